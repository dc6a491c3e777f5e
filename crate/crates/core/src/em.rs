//! Expectation-maximization reconstruction of the photon distribution.
//!
//! The standard update is the multiplicative EM map for a positive linear
//! model,
//!
//! ```text
//! rho_n <- rho_n / sum_m rho_m * sum_v A[v][n] / s_n * f_v / P_v,   s_n = sum_l A[l][n]
//! ```
//!
//! The energy-constrained update maximizes `L - beta * sum_n n rho_n` and only
//! changes the denominator, `s_n + beta * n * (sum_g P_g / sum_m f_m)`. Both
//! maps are scale invariant in `rho`; iterates are renormalized to unit mass
//! after every step unless configured otherwise.

use log::{debug, trace};

use crate::distribution::{
    build_design_matrix, loglikelihood_from_predicted, DesignMatrix, OnOffDataset,
    PhotonDistribution,
};
use crate::numeric::compensated_sum;
use crate::pdc::Source;
use crate::{Error, Result};

/// Weight of the uniform component mixed into a model-seeded start, so that
/// no entry starts (and stays) at exactly zero.
const MODEL_INIT_FLOOR: f64 = 1e-6;

/// Starting point of the iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Uniform over `0..=n_max`.
    Uniform,
    /// The model distribution truncated at `n_max`.
    Model(Source),
    /// A user-supplied distribution, cut or zero-padded to `n_max`.
    Distribution(PhotonDistribution),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub n_max: usize,
    pub max_iterations: usize,
    /// Stop once `|L(h+1) - L(h)|` drops below this value.
    pub loglik_tolerance: f64,
    pub init: Init,
    /// Lagrange multiplier of the energy penalty; zero runs the standard map.
    pub beta: f64,
    pub renormalize_each_step: bool,
}

impl EmConfig {
    pub const DEFAULT_MAX_ITERATIONS: usize = 100_000;
    pub const DEFAULT_LOGLIK_TOLERANCE: f64 = 1e-9;

    pub fn new(n_max: usize) -> Self {
        Self {
            n_max,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
            loglik_tolerance: Self::DEFAULT_LOGLIK_TOLERANCE,
            init: Init::Uniform,
            beta: 0.0,
            renormalize_each_step: true,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn with_tolerance(mut self, loglik_tolerance: f64) -> Self {
        self.loglik_tolerance = loglik_tolerance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        if self.loglik_tolerance.is_nan() || self.loglik_tolerance <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "loglikelihood tolerance {} must be positive",
                self.loglik_tolerance
            )));
        }
        check_beta(self.beta)
    }

    fn initial(&self) -> Result<Vec<f64>> {
        let n = self.n_max + 1;
        let probs = match &self.init {
            Init::Uniform => return Ok(vec![1.0 / n as f64; n]),
            Init::Model(source) => {
                let model = source.distribution(self.n_max)?.normalize()?;
                let floor = MODEL_INIT_FLOOR / n as f64;
                model
                    .probs()
                    .iter()
                    .map(|p| (1.0 - MODEL_INIT_FLOOR) * p + floor)
                    .collect()
            }
            Init::Distribution(d) => d.resized(self.n_max)?.into_probs(),
        };
        Ok(PhotonDistribution::new(probs)?.into_probs())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "beta {beta} must be finite and nonnegative"
        )))
    }
}

/// Energy-targeting search for the penalty weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTarget {
    pub target: f64,
    pub rel_tolerance: f64,
    /// Initial upper end of the bracket; doubled until it undershoots the target.
    pub beta_hi: f64,
    /// Largest upper end tried before giving up.
    pub beta_ceiling: f64,
    pub max_outer_iterations: usize,
}

impl EnergyTarget {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            rel_tolerance: 0.01,
            beta_hi: 1.0,
            beta_ceiling: 2f64.powi(60),
            max_outer_iterations: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaPolicy {
    Fixed(f64),
    TargetEnergy(EnergyTarget),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub distribution: PhotonDistribution,
    /// Number of update steps applied.
    pub iterations_used: usize,
    /// Loglikelihood of every iterate, starting with the initial one.
    pub loglik_trace: Vec<f64>,
    /// Off-probabilities predicted by `distribution`, one per record.
    pub predicted_off: Vec<f64>,
    pub beta_used: f64,
    pub mean_energy: f64,
    pub converged: bool,
    /// Fewer than two efficiencies: the data cannot determine the distribution.
    pub underdetermined: bool,
    /// Mass of the last update before renormalization.
    pub final_raw_mass: f64,
}

impl ReconstructionResult {
    pub fn final_loglikelihood(&self) -> f64 {
        *self
            .loglik_trace
            .last()
            .expect("trace holds the initial value")
    }
}

/// Per-run scratch buffers shared by both update maps.
struct Engine<'a> {
    design: &'a DesignMatrix,
    frequencies: &'a [f64],
    frequency_total: f64,
    predicted: Vec<f64>,
    ratios: Vec<f64>,
    back: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(design: &'a DesignMatrix, frequencies: &'a [f64]) -> Result<Self> {
        if frequencies.len() != design.rows() {
            return Err(Error::LengthMismatch {
                expected: design.rows(),
                found: frequencies.len(),
            });
        }
        if let Some(f) = frequencies.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::InvalidParameter(format!(
                "frequency {f} outside [0, 1]"
            )));
        }
        let frequency_total = compensated_sum(frequencies.iter().copied());
        if frequency_total == 0.0 {
            return Err(Error::DegenerateData("all off-frequencies are zero".into()));
        }
        Ok(Self {
            design,
            frequencies,
            frequency_total,
            predicted: vec![0.0; design.rows()],
            ratios: vec![0.0; design.rows()],
            back: vec![0.0; design.columns()],
        })
    }

    fn check_len(&self, rho: &[f64]) -> Result<()> {
        if rho.len() != self.design.columns() {
            return Err(Error::LengthMismatch {
                expected: self.design.columns(),
                found: rho.len(),
            });
        }
        Ok(())
    }

    /// Fills `predicted` and the ratios `f_v / P_v` (zero where `f_v = 0`).
    fn predict(&mut self, rho: &[f64]) -> Result<()> {
        self.design.forward_into(rho, &mut self.predicted);
        for (v, (&f, &p)) in self.frequencies.iter().zip(&self.predicted).enumerate() {
            self.ratios[v] = if f == 0.0 {
                0.0
            } else if p > 0.0 {
                f / p
            } else {
                return Err(Error::SingularUpdate {
                    index: v,
                    eta: self.design.etas()[v],
                });
            };
        }
        Ok(())
    }

    fn loglikelihood(&self) -> f64 {
        loglikelihood_from_predicted(&self.predicted, self.frequencies)
    }

    /// `back[n] = sum_v A[v][n] f_v / P_v`.
    fn backproject(&mut self) {
        self.back.iter_mut().for_each(|b| *b = 0.0);
        for (v, &w) in self.ratios.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (b, a) in self.back.iter_mut().zip(self.design.row(v)) {
                *b += a * w;
            }
        }
    }

    /// Standard update; returns the mass of `out`. Requires a prior `predict`.
    fn step_standard(&mut self, rho: &[f64], out: &mut [f64]) -> f64 {
        self.backproject();
        let mass = compensated_sum(rho.iter().copied());
        let sums = self.design.column_sums();
        for n in 0..rho.len() {
            out[n] = if sums[n] > 0.0 {
                rho[n] / mass * self.back[n] / sums[n]
            } else {
                0.0
            };
        }
        compensated_sum(out.iter().copied())
    }

    /// Energy-penalized update; returns the mass of `out`. Requires a prior `predict`.
    fn step_constrained(&mut self, rho: &[f64], beta: f64, out: &mut [f64]) -> f64 {
        self.backproject();
        let mass = compensated_sum(rho.iter().copied());
        let scale = compensated_sum(self.predicted.iter().copied()) / self.frequency_total;
        let sums = self.design.column_sums();
        for n in 0..rho.len() {
            let denom = sums[n] + beta * n as f64 * scale;
            out[n] = if denom > 0.0 {
                rho[n] / mass * self.back[n] / denom
            } else {
                0.0
            };
        }
        compensated_sum(out.iter().copied())
    }
}

fn finish_step(mut out: Vec<f64>, raw_mass: f64, renormalize: bool) -> Result<PhotonDistribution> {
    if renormalize {
        if raw_mass.is_nan() || raw_mass <= 0.0 {
            return Err(Error::DegenerateData(
                "update produced a distribution with zero mass".into(),
            ));
        }
        out.iter_mut().for_each(|x| *x /= raw_mass);
    }
    PhotonDistribution::unnormalized(out)
}

/// One step of the standard EM map.
pub fn em_step_standard(
    current: &PhotonDistribution,
    design: &DesignMatrix,
    frequencies: &[f64],
    renormalize: bool,
) -> Result<PhotonDistribution> {
    let mut engine = Engine::new(design, frequencies)?;
    engine.check_len(current.probs())?;
    engine.predict(current.probs())?;
    let mut out = vec![0.0; design.columns()];
    let raw = engine.step_standard(current.probs(), &mut out);
    finish_step(out, raw, renormalize)
}

/// One step of the energy-penalized EM map with multiplier `beta`.
pub fn em_step_constrained(
    current: &PhotonDistribution,
    design: &DesignMatrix,
    frequencies: &[f64],
    beta: f64,
    renormalize: bool,
) -> Result<PhotonDistribution> {
    check_beta(beta)?;
    let mut engine = Engine::new(design, frequencies)?;
    engine.check_len(current.probs())?;
    engine.predict(current.probs())?;
    let mut out = vec![0.0; design.columns()];
    let raw = engine.step_constrained(current.probs(), beta, &mut out);
    finish_step(out, raw, renormalize)
}

/// Iterates the configured map until the loglikelihood settles or the
/// iteration budget runs out. Running out is reported through `converged`,
/// not as an error.
pub fn reconstruct(data: &OnOffDataset, config: &EmConfig) -> Result<ReconstructionResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Underdetermined {
            found: 0,
            required: 2,
        });
    }
    let design = build_design_matrix(&data.grid(), config.n_max);
    let frequencies = data.frequencies();
    run(
        &design,
        &frequencies,
        config,
        config.init.clone(),
        config.beta,
        data.len() < 2,
    )
}

fn run(
    design: &DesignMatrix,
    frequencies: &[f64],
    config: &EmConfig,
    init: Init,
    beta: f64,
    underdetermined: bool,
) -> Result<ReconstructionResult> {
    let mut engine = Engine::new(design, frequencies)?;
    let mut rho = EmConfig {
        init,
        ..config.clone()
    }
    .initial()?;
    let mut next = vec![0.0; rho.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut raw_mass = 1.0;

    loop {
        engine.predict(&rho)?;
        let l = engine.loglikelihood();
        let settled = trace
            .last()
            .is_some_and(|prev: &f64| (l - prev).abs() < config.loglik_tolerance);
        trace.push(l);
        if settled {
            converged = true;
            break;
        }
        if iterations == config.max_iterations {
            break;
        }
        raw_mass = if beta == 0.0 {
            engine.step_standard(&rho, &mut next)
        } else {
            engine.step_constrained(&rho, beta, &mut next)
        };
        if config.renormalize_each_step {
            if raw_mass.is_nan() || raw_mass <= 0.0 {
                return Err(Error::DegenerateData(
                    "update produced a distribution with zero mass".into(),
                ));
            }
            next.iter_mut().for_each(|x| *x /= raw_mass);
        }
        std::mem::swap(&mut rho, &mut next);
        iterations += 1;
        if iterations % 10_000 == 0 {
            trace!("iteration {iterations}: L = {l:.12e}, raw mass {raw_mass:.12}");
        }
    }

    let distribution = PhotonDistribution::new(rho)?;
    let predicted_off = design.forward(distribution.probs())?;
    let mean_energy = distribution.mean_photon_number();
    debug!(
        "beta = {beta}: {iterations} iterations, converged = {converged}, mean energy {mean_energy:.6}"
    );
    Ok(ReconstructionResult {
        distribution,
        iterations_used: iterations,
        loglik_trace: trace,
        predicted_off,
        beta_used: beta,
        mean_energy,
        converged,
        underdetermined,
        final_raw_mass: raw_mass,
    })
}

/// Reconstruction under a penalty-weight policy.
///
/// With a target energy the weight is bracketed, starting from `beta = 0` and
/// doubling the upper end, then bisected; the mean energy of the converged
/// reconstruction is assumed non-increasing in `beta`. If a bisection midpoint
/// breaks that ordering, the bracket is scanned on a uniform grid instead and
/// the closest candidate is returned.
pub fn tune_beta(
    data: &OnOffDataset,
    config: &EmConfig,
    policy: &BetaPolicy,
) -> Result<ReconstructionResult> {
    let target = match policy {
        BetaPolicy::Fixed(beta) => {
            check_beta(*beta)?;
            return reconstruct(data, &config.clone().with_beta(*beta));
        }
        BetaPolicy::TargetEnergy(target) => *target,
    };
    if !(target.target.is_finite() && target.target > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "target energy {} must be positive",
            target.target
        )));
    }
    if !(target.rel_tolerance > 0.0 && target.beta_hi > 0.0) {
        return Err(Error::InvalidParameter(
            "energy search needs a positive tolerance and initial bracket".into(),
        ));
    }
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Underdetermined {
            found: 0,
            required: 2,
        });
    }

    let design = build_design_matrix(&data.grid(), config.n_max);
    let frequencies = data.frequencies();
    let solve = |beta: f64| {
        run(
            &design,
            &frequencies,
            config,
            config.init.clone(),
            beta,
            data.len() < 2,
        )
    };
    let goal = target.target;
    let accept =
        |r: &ReconstructionResult| (r.mean_energy - goal).abs() <= target.rel_tolerance * goal;

    let mut lo = solve(0.0)?;
    if accept(&lo) {
        return Ok(lo);
    }
    if lo.mean_energy < goal {
        let probe = solve(target.beta_hi)?;
        return Err(Error::TargetUnreachable {
            target: goal,
            lowest: probe.mean_energy.min(lo.mean_energy),
            highest: lo.mean_energy,
        });
    }

    let mut beta_hi = target.beta_hi;
    let mut hi = loop {
        let r = solve(beta_hi)?;
        debug!("bracket: beta = {beta_hi}, energy {}", r.mean_energy);
        if accept(&r) {
            return Ok(r);
        }
        if r.mean_energy < goal {
            break r;
        }
        if beta_hi * 2.0 > target.beta_ceiling {
            return Err(Error::TargetUnreachable {
                target: goal,
                lowest: r.mean_energy,
                highest: lo.mean_energy,
            });
        }
        lo = r;
        beta_hi *= 2.0;
    };

    let slack = 1e-9 * goal;
    for _ in 0..target.max_outer_iterations {
        let mid = 0.5 * (lo.beta_used + hi.beta_used);
        let r = solve(mid)?;
        debug!("bisection: beta = {mid}, energy {}", r.mean_energy);
        if accept(&r) {
            return Ok(r);
        }
        if r.mean_energy > lo.mean_energy + slack || r.mean_energy < hi.mean_energy - slack {
            debug!(
                "energy not monotone in beta on [{}, {}]; scanning",
                lo.beta_used, hi.beta_used
            );
            return grid_search(&solve, lo.beta_used, hi.beta_used, goal);
        }
        if r.mean_energy > goal {
            lo = r;
        } else {
            hi = r;
        }
    }
    Ok(closest(vec![lo, hi], goal))
}

fn grid_search<F>(solve: &F, lo: f64, hi: f64, goal: f64) -> Result<ReconstructionResult>
where
    F: Fn(f64) -> Result<ReconstructionResult>,
{
    const POINTS: usize = 33;
    let candidates = (0..POINTS)
        .map(|k| solve(lo + (hi - lo) * k as f64 / (POINTS - 1) as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(closest(candidates, goal))
}

fn closest(candidates: Vec<ReconstructionResult>, goal: f64) -> ReconstructionResult {
    candidates
        .into_iter()
        .min_by(|a, b| {
            (a.mean_energy - goal)
                .abs()
                .total_cmp(&(b.mean_energy - goal).abs())
        })
        .expect("at least one candidate")
}
