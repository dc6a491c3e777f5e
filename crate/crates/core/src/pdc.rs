//! Photon statistics of seeded parametric down-conversion.
//!
//! `M` equal thermal modes with `nbar` photons each, one of them displaced by
//! a coherent amplitude of intensity `alpha_sq`, give
//!
//! ```text
//! rho_n = nbar^n / (1 + nbar)^(n + M) * exp(-alpha_sq / (1 + nbar))
//!         * L_n^(M-1)(-alpha_sq / (nbar (1 + nbar)))
//! ```
//!
//! and the off-probability of a detector of efficiency `eta`,
//!
//! ```text
//! p0 = (1 + eta nbar)^(-M) * exp(-eta alpha_sq / (1 + eta nbar)).
//! ```
//!
//! With `M` around 10^5..10^6 the Laguerre factor overflows any float, so the
//! distribution is built from ratios `rho_n / rho_(n-1)` in the log domain.

use serde::{Deserialize, Serialize};

use crate::distribution::PhotonDistribution;
use crate::numeric::CompensatedSum;
use crate::{Error, Result};

/// Parameters of the displaced multithermal model.
///
/// The Poisson limit (no thermal component) is represented with a zero
/// per-mode mean and a single mode; it can only be built through
/// [`PdcModelParams::poisson`] or the energy-based constructors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct PdcModelParams {
    per_mode_mean: f64,
    alpha_sq: f64,
    modes: u64,
}

#[derive(Deserialize)]
struct RawParams {
    per_mode_mean: f64,
    alpha_sq: f64,
    modes: u64,
}

impl TryFrom<RawParams> for PdcModelParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        if raw.per_mode_mean == 0.0 && raw.modes == 1 {
            Self::poisson(raw.alpha_sq)
        } else {
            Self::new(raw.per_mode_mean, raw.alpha_sq, raw.modes)
        }
    }
}

fn check_alpha_sq(alpha_sq: f64) -> Result<()> {
    if alpha_sq.is_finite() && alpha_sq >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "coherent intensity {alpha_sq} must be finite and nonnegative"
        )))
    }
}

impl PdcModelParams {
    pub fn new(per_mode_mean: f64, alpha_sq: f64, modes: u64) -> Result<Self> {
        if !(per_mode_mean.is_finite() && per_mode_mean > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "per-mode thermal mean {per_mode_mean} must be finite and positive"
            )));
        }
        check_alpha_sq(alpha_sq)?;
        if modes == 0 {
            return Err(Error::InvalidParameter(
                "mode count must be positive".into(),
            ));
        }
        Ok(Self {
            per_mode_mean,
            alpha_sq,
            modes,
        })
    }

    /// Coherent state: Poisson statistics with mean `alpha_sq`.
    pub fn poisson(alpha_sq: f64) -> Result<Self> {
        check_alpha_sq(alpha_sq)?;
        Ok(Self {
            per_mode_mean: 0.0,
            alpha_sq,
            modes: 1,
        })
    }

    /// `modes` thermal modes with no coherent seed.
    pub fn multithermal(per_mode_mean: f64, modes: u64) -> Result<Self> {
        Self::new(per_mode_mean, 0.0, modes)
    }

    /// Splits a total thermal energy evenly over `modes` modes. A zero thermal
    /// energy gives the Poisson limit.
    pub fn from_totals(total_thermal: f64, alpha_sq: f64, modes: u64) -> Result<Self> {
        if !(total_thermal.is_finite() && total_thermal >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "total thermal energy {total_thermal} must be finite and nonnegative"
            )));
        }
        if modes == 0 {
            return Err(Error::InvalidParameter(
                "mode count must be positive".into(),
            ));
        }
        if total_thermal == 0.0 {
            Self::poisson(alpha_sq)
        } else {
            Self::new(total_thermal / modes as f64, alpha_sq, modes)
        }
    }

    /// Mean energy `n_ave` with a fraction `x` carried by the coherent seed:
    /// total thermal energy `(1 - x) n_ave`, `alpha_sq = x n_ave`.
    pub fn from_regime(n_ave: f64, x: f64, modes: u64) -> Result<Self> {
        if !(n_ave.is_finite() && n_ave >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mean energy {n_ave} must be finite and nonnegative"
            )));
        }
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidParameter(format!(
                "stimulation fraction {x} outside [0, 1]"
            )));
        }
        Self::from_totals((1.0 - x) * n_ave, x * n_ave, modes)
    }

    pub fn per_mode_mean(&self) -> f64 {
        self.per_mode_mean
    }

    pub fn alpha_sq(&self) -> f64 {
        self.alpha_sq
    }

    pub fn modes(&self) -> u64 {
        self.modes
    }

    pub fn is_poisson(&self) -> bool {
        self.per_mode_mean == 0.0
    }

    pub fn total_thermal(&self) -> f64 {
        self.modes as f64 * self.per_mode_mean
    }

    pub fn mean_energy(&self) -> f64 {
        self.total_thermal() + self.alpha_sq
    }

    /// Photon-number variance: `M nbar (1 + nbar) + alpha_sq (1 + 2 nbar)`.
    pub fn variance(&self) -> f64 {
        let nbar = self.per_mode_mean;
        self.total_thermal() * (1.0 + nbar) + self.alpha_sq * (1.0 + 2.0 * nbar)
    }

    /// Share of the energy in the coherent seed; zero for the vacuum.
    pub fn stimulation_fraction(&self) -> f64 {
        let e = self.mean_energy();
        if e > 0.0 {
            self.alpha_sq / e
        } else {
            0.0
        }
    }

    pub fn off_probability(&self, eta: f64) -> Result<f64> {
        pdc_off_probability(self, eta)
    }

    /// Smallest truncation past the mean whose tail mass is below `tail_tolerance`.
    pub fn truncation_for_tail(&self, tail_tolerance: f64) -> usize {
        let mean = self.mean_energy();
        let cap = (mean + 40.0 * self.variance().sqrt() + 50.0).ceil() as usize;
        let mut mass = CompensatedSum::default();
        for (n, ln_rho) in LogPmfTerms::new(self).enumerate() {
            mass.add(ln_rho.exp());
            if (n as f64 >= mean && 1.0 - mass.value() < tail_tolerance) || n >= cap {
                return n;
            }
        }
        unreachable!("the term iterator is infinite")
    }

    /// Log-domain PMF terms `ln rho_0, ln rho_1, ...`.
    pub fn log_pmf_terms(&self) -> impl Iterator<Item = f64> {
        LogPmfTerms::new(self)
    }
}

/// Incremental `ln rho_n` via the ratio `rho_n / rho_(n-1)`.
///
/// With `r_n = L_n / L_(n-1)` for the Laguerre factor the ratio is
/// `nbar r_n / (1 + nbar)`, and `r_n` follows from the three-term recurrence.
struct LogPmfTerms {
    n: usize,
    ln_rho: f64,
    ln_sum: CompensatedSum,
    laguerre: Option<LaguerreRatios>,
    scale: f64,
    alpha_sq: f64,
}

impl LogPmfTerms {
    fn new(params: &PdcModelParams) -> Self {
        let nbar = params.per_mode_mean;
        let ln_rho0 = if params.is_poisson() {
            -params.alpha_sq
        } else {
            -(params.modes as f64) * nbar.ln_1p() - params.alpha_sq / (1.0 + nbar)
        };
        let laguerre = (!params.is_poisson()).then(|| {
            let z = -params.alpha_sq / (nbar * (1.0 + nbar));
            LaguerreRatios::new((params.modes - 1) as f64, z)
        });
        Self {
            n: 0,
            ln_rho: ln_rho0,
            ln_sum: CompensatedSum::default(),
            laguerre,
            scale: nbar / (1.0 + nbar),
            alpha_sq: params.alpha_sq,
        }
    }
}

impl Iterator for LogPmfTerms {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if self.n > 0 {
            let ratio = match &mut self.laguerre {
                Some(lag) => self.scale * lag.next_ratio(),
                None => self.alpha_sq / self.n as f64,
            };
            if ratio > 0.0 {
                self.ln_sum.add(ratio.ln());
            } else {
                // Support ends here (vacuum input).
                self.ln_rho = f64::NEG_INFINITY;
            }
        }
        self.n += 1;
        Some(self.ln_rho + self.ln_sum.value())
    }
}

/// Successive ratios `L_k^a(z) / L_(k-1)^a(z)` for `k = 1, 2, ...`.
///
/// All terms are positive for `z <= 0` and `a > -1`.
struct LaguerreRatios {
    a: f64,
    z: f64,
    k: usize,
    ratio: f64,
}

impl LaguerreRatios {
    fn new(a: f64, z: f64) -> Self {
        Self {
            a,
            z,
            k: 0,
            ratio: 1.0,
        }
    }

    fn next_ratio(&mut self) -> f64 {
        self.ratio = if self.k == 0 {
            1.0 + self.a - self.z
        } else {
            let k = self.k as f64;
            ((2.0 * k + 1.0 + self.a - self.z) - (k + self.a) / self.ratio) / (k + 1.0)
        };
        self.k += 1;
        self.ratio
    }
}

fn check_laguerre_domain(a: f64, z: f64) -> Result<()> {
    if !(a.is_finite() && a > -1.0) {
        return Err(Error::InvalidParameter(format!(
            "Laguerre order {a} must be finite and greater than -1"
        )));
    }
    if !(z.is_finite() && z <= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Laguerre argument {z} must be finite and nonpositive"
        )));
    }
    Ok(())
}

/// `ln L_n^a(z)` for `z <= 0`, returned as `(ln |L|, sign)`; the sign is
/// always `+1` on this domain.
pub fn laguerre_log_scaled(n: usize, a: f64, z: f64) -> Result<(f64, i8)> {
    check_laguerre_domain(a, z)?;
    let mut ratios = LaguerreRatios::new(a, z);
    let mut acc = CompensatedSum::default();
    for _ in 0..n {
        acc.add(ratios.next_ratio().ln());
    }
    Ok((acc.value(), 1))
}

/// `ln L_k^a(z)` for `k = 0..=n_max`.
pub fn laguerre_log_sequence(n_max: usize, a: f64, z: f64) -> Result<Vec<f64>> {
    check_laguerre_domain(a, z)?;
    let mut ratios = LaguerreRatios::new(a, z);
    let mut acc = CompensatedSum::default();
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(0.0);
    for _ in 0..n_max {
        acc.add(ratios.next_ratio().ln());
        out.push(acc.value());
    }
    Ok(out)
}

/// Model PMF truncated at `n_max`, with the mass left out of the truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedPmf {
    /// `rho_0 ..= rho_nmax`, not renormalized.
    pub distribution: PhotonDistribution,
    /// `1 - sum_n rho_n`, clamped at zero.
    pub tail: f64,
}

pub fn pdc_pmf(params: &PdcModelParams, n_max: usize) -> Result<TruncatedPmf> {
    let probs: Vec<f64> = params
        .log_pmf_terms()
        .take(n_max + 1)
        .map(f64::exp)
        .collect();
    let distribution = PhotonDistribution::unnormalized(probs)?;
    let tail = (1.0 - distribution.total_mass()).max(0.0);
    Ok(TruncatedPmf { distribution, tail })
}

/// Closed-form off-probability, evaluated as
/// `exp(-M ln(1 + eta nbar) - eta alpha_sq / (1 + eta nbar))`.
pub fn pdc_off_probability(params: &PdcModelParams, eta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidEfficiency(eta));
    }
    let g = eta * params.per_mode_mean;
    Ok((-(params.modes as f64) * g.ln_1p() - eta * params.alpha_sq / (1.0 + g)).exp())
}

/// A known photon source: either the down-conversion model or an explicit
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Pdc(PdcModelParams),
    Distribution(PhotonDistribution),
}

impl Source {
    /// Off-probability, closed form for the model and series otherwise.
    pub fn off_probability(&self, eta: f64) -> Result<f64> {
        match self {
            Source::Pdc(p) => pdc_off_probability(p, eta),
            Source::Distribution(d) => d.off_probability(eta),
        }
    }

    pub fn mean_energy(&self) -> f64 {
        match self {
            Source::Pdc(p) => p.mean_energy(),
            Source::Distribution(d) => d.mean_photon_number(),
        }
    }

    /// Distribution on `0..=n_max`, truncated or zero-padded, not renormalized.
    pub fn distribution(&self, n_max: usize) -> Result<PhotonDistribution> {
        match self {
            Source::Pdc(p) => Ok(pdc_pmf(p, n_max)?.distribution),
            Source::Distribution(d) => d.resized(n_max),
        }
    }

    /// Truncation covering all but `tail_tolerance` of the mass.
    pub fn truncation_for_tail(&self, tail_tolerance: f64) -> usize {
        match self {
            Source::Pdc(p) => p.truncation_for_tail(tail_tolerance),
            Source::Distribution(d) => d.n_max(),
        }
    }
}
