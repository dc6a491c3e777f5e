//! Photon distributions, on/off datasets and the linear detection model.
//!
//! A detector of quantum efficiency `eta` stays silent on an `n`-photon input
//! with probability `(1 - eta)^n`, so the off-probability of a distribution is
//! linear in its entries. Stacking several efficiencies gives the design
//! matrix `A[v][n] = (1 - eta_v)^n` that every reconstruction works with.

use crate::numeric::{compensated_sum, CompensatedSum};
use crate::{Error, Result};

/// Allowed deviation of the total mass from one for a normalized distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Truncated photon-number distribution `rho_0 ..= rho_nmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonDistribution {
    probs: Vec<f64>,
    normalized: bool,
}

impl PhotonDistribution {
    /// Builds a distribution from nonnegative weights, normalizing them to unit mass.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        Self::check_entries(&weights)?;
        let total = compensated_sum(weights.iter().copied());
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("total mass is zero".into()));
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            probs,
            normalized: true,
        })
    }

    /// Keeps the entries as given. The distribution is flagged normalized when
    /// its mass is within [`NORMALIZATION_TOLERANCE`] of one.
    pub fn unnormalized(probs: Vec<f64>) -> Result<Self> {
        Self::check_entries(&probs)?;
        let total = compensated_sum(probs.iter().copied());
        Ok(Self {
            probs,
            normalized: (total - 1.0).abs() <= NORMALIZATION_TOLERANCE,
        })
    }

    fn check_entries(probs: &[f64]) -> Result<()> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no entries".into()));
        }
        if let Some((n, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidDistribution(format!(
                "entry {n} is {p}, expected a finite nonnegative value"
            )));
        }
        Ok(())
    }

    pub fn vacuum() -> Self {
        Self::fock(0)
    }

    /// Number state `|n>`.
    pub fn fock(n: usize) -> Self {
        let mut probs = vec![0.0; n + 1];
        probs[n] = 1.0;
        Self {
            probs,
            normalized: true,
        }
    }

    pub fn uniform(n_max: usize) -> Self {
        let w = 1.0 / (n_max + 1) as f64;
        Self {
            probs: vec![w; n_max + 1],
            normalized: true,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Truncation `n_max`, the largest photon number kept.
    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.probs.iter().copied())
    }

    pub fn normalize(&self) -> Result<Self> {
        Self::new(self.probs.clone())
    }

    /// Copy with truncation `n_max`, zero-padded or cut as needed.
    pub fn resized(&self, n_max: usize) -> Result<Self> {
        let mut probs = self.probs.clone();
        probs.resize(n_max + 1, 0.0);
        Self::unnormalized(probs)
    }

    pub fn mean_photon_number(&self) -> f64 {
        mean_photon_number(self)
    }

    pub fn off_probability(&self, eta: f64) -> Result<f64> {
        off_probability(self, eta)
    }
}

/// Distinct quantum efficiencies, each in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyGrid {
    etas: Vec<f64>,
}

impl EfficiencyGrid {
    pub fn new(etas: Vec<f64>) -> Result<Self> {
        for (i, &eta) in etas.iter().enumerate() {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::InvalidEfficiency(eta));
            }
            if etas[..i].contains(&eta) {
                return Err(Error::DuplicateEfficiency(eta));
            }
        }
        Ok(Self { etas })
    }

    /// `points` equally spaced efficiencies `eta_max * k / points`, `k = 1..=points`.
    pub fn equally_spaced(points: usize, eta_max: f64) -> Result<Self> {
        Self::new(
            (1..=points)
                .map(|k| eta_max * k as f64 / points as f64)
                .collect(),
        )
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn len(&self) -> usize {
        self.etas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.etas.is_empty()
    }
}

/// Outcome of `windows` gated detections at one efficiency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnOffRecord {
    pub eta: f64,
    pub windows: u64,
    pub off_count: u64,
}

impl OnOffRecord {
    pub fn new(eta: f64, windows: u64, off_count: u64) -> Result<Self> {
        let record = Self {
            eta,
            windows,
            off_count,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason| {
            Err(Error::InvalidRecord {
                eta: self.eta,
                windows: self.windows,
                off_count: self.off_count,
                reason,
            })
        };
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return fail("efficiency outside (0, 1]");
        }
        if self.windows == 0 {
            return fail("no detection windows");
        }
        if self.off_count > self.windows {
            return fail("off count exceeds window count");
        }
        Ok(())
    }

    /// Off frequency `off_count / windows`.
    pub fn frequency(&self) -> f64 {
        self.off_count as f64 / self.windows as f64
    }
}

/// On/off records at pairwise distinct efficiencies.
#[derive(Debug, Clone, PartialEq)]
pub struct OnOffDataset {
    records: Vec<OnOffRecord>,
    label: String,
}

impl OnOffDataset {
    pub fn new(records: Vec<OnOffRecord>, label: impl Into<String>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if records[..i].iter().any(|o| o.eta == r.eta) {
                return Err(Error::DuplicateEfficiency(r.eta));
            }
        }
        Ok(Self {
            records,
            label: label.into(),
        })
    }

    /// Dataset with the given off-frequencies expressed over `windows` windows each.
    pub fn from_frequencies(
        grid: &EfficiencyGrid,
        frequencies: &[f64],
        windows: u64,
        label: impl Into<String>,
    ) -> Result<Self> {
        if frequencies.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                found: frequencies.len(),
            });
        }
        let records = grid
            .etas()
            .iter()
            .zip(frequencies)
            .map(|(&eta, &f)| {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::InvalidParameter(format!(
                        "frequency {f} outside [0, 1]"
                    )));
                }
                OnOffRecord::new(eta, windows, (f * windows as f64).round() as u64)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records, label)
    }

    pub fn records(&self) -> &[OnOffRecord] {
        &self.records
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn etas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.eta).collect()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.records.iter().map(OnOffRecord::frequency).collect()
    }

    pub fn grid(&self) -> EfficiencyGrid {
        EfficiencyGrid { etas: self.etas() }
    }
}

/// `A[v][n] = (1 - eta_v)^n`, stored row-major, with precomputed column sums.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    etas: Vec<f64>,
    columns: usize,
    entries: Vec<f64>,
    column_sums: Vec<f64>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.etas.len()
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn n_max(&self) -> usize {
        self.columns - 1
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.entries[v * self.columns..(v + 1) * self.columns]
    }

    pub fn get(&self, v: usize, n: usize) -> f64 {
        self.entries[v * self.columns + n]
    }

    /// `sum_v A[v][n]` for every `n`.
    pub fn column_sums(&self) -> &[f64] {
        &self.column_sums
    }

    /// Predicted off-probabilities `P_v = sum_n A[v][n] rho_n`.
    pub fn forward(&self, rho: &[f64]) -> Result<Vec<f64>> {
        if rho.len() != self.columns {
            return Err(Error::LengthMismatch {
                expected: self.columns,
                found: rho.len(),
            });
        }
        let mut out = vec![0.0; self.rows()];
        self.forward_into(rho, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_into(&self, rho: &[f64], out: &mut [f64]) {
        for (v, p) in out.iter_mut().enumerate() {
            let mut acc = CompensatedSum::default();
            for (a, r) in self.row(v).iter().zip(rho) {
                acc.add(a * r);
            }
            *p = acc.value();
        }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::InvalidEfficiency(eta))
    }
}

/// Probability that a detector of efficiency `eta` does not click:
/// `sum_n (1 - eta)^n rho_n`.
pub fn off_probability(dist: &PhotonDistribution, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    let q = 1.0 - eta;
    let mut power = 1.0;
    let mut acc = CompensatedSum::default();
    for &p in dist.probs() {
        acc.add(power * p);
        power *= q;
    }
    Ok(acc.value())
}

pub fn build_design_matrix(grid: &EfficiencyGrid, n_max: usize) -> DesignMatrix {
    let columns = n_max + 1;
    let mut entries = Vec::with_capacity(grid.len() * columns);
    for &eta in grid.etas() {
        let q = 1.0 - eta;
        let mut power = 1.0;
        for _ in 0..columns {
            entries.push(power);
            power *= q;
        }
    }
    let column_sums = (0..columns)
        .map(|n| compensated_sum((0..grid.len()).map(|v| entries[v * columns + n])))
        .collect();
    DesignMatrix {
        etas: grid.etas().to_vec(),
        columns,
        entries,
        column_sums,
    }
}

/// `sum_v f_v log(P_v / sum_l P_l)`.
///
/// Records with zero frequency contribute nothing. A zero prediction where the
/// frequency is positive yields `f64::NEG_INFINITY`.
pub fn loglikelihood_from_predicted(predicted: &[f64], frequencies: &[f64]) -> f64 {
    let total = compensated_sum(predicted.iter().copied());
    let mut acc = CompensatedSum::default();
    for (&p, &f) in predicted.iter().zip(frequencies) {
        if f == 0.0 {
            continue;
        }
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc.add(f * (p / total).ln());
    }
    acc.value()
}

/// Normalized loglikelihood of the dataset under `dist`.
///
/// The predicted off-probabilities are normalized across the efficiency grid;
/// the measured frequencies are used as they are.
pub fn loglikelihood(dist: &PhotonDistribution, data: &OnOffDataset) -> f64 {
    let predicted: Vec<f64> = data
        .records()
        .iter()
        .map(|r| off_probability(dist, r.eta).expect("record efficiencies are validated"))
        .collect();
    loglikelihood_from_predicted(&predicted, &data.frequencies())
}

/// Overlap `sum_n sqrt(a_n b_n)`; the shorter distribution is zero-padded.
pub fn fidelity(a: &PhotonDistribution, b: &PhotonDistribution) -> f64 {
    compensated_sum(a.probs().iter().zip(b.probs()).map(|(x, y)| (x * y).sqrt()))
}

/// Sum of squared differences between predicted and measured off-probabilities.
pub fn chi_square(predicted_off: &[f64], measured: &[f64]) -> Result<f64> {
    if predicted_off.len() != measured.len() {
        return Err(Error::LengthMismatch {
            expected: predicted_off.len(),
            found: measured.len(),
        });
    }
    Ok(compensated_sum(
        predicted_off
            .iter()
            .zip(measured)
            .map(|(p, f)| (p - f) * (p - f)),
    ))
}

pub fn mean_photon_number(dist: &PhotonDistribution) -> f64 {
    compensated_sum(dist.probs().iter().enumerate().map(|(n, p)| n as f64 * p))
}

/// Truncation heuristic used when no model is available: `ceil(mu + 10 sqrt(mu + 1))`.
pub fn heuristic_truncation(mean: f64) -> usize {
    let mean = mean.max(0.0);
    (mean + 10.0 * (mean + 1.0).sqrt()).ceil() as usize
}
