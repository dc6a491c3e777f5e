//! Monte Carlo generation of on/off datasets and background correction.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution};

use crate::distribution::{EfficiencyGrid, OnOffDataset, OnOffRecord};
use crate::pdc::Source;
use crate::{Error, Result};

/// Generator used by [`simulate_dataset`]; recorded in file metadata so runs
/// can be replayed from `(algorithm, seed)`.
pub const RNG_ALGORITHM: &str = "chacha20-stream-per-record";

pub const DEFAULT_WINDOWS: u64 = 200_000;
pub const DEFAULT_ETA_MAX: f64 = 0.284;
pub const DEFAULT_GRID_POINTS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub grid: EfficiencyGrid,
    pub windows_per_point: u64,
    pub seed: u64,
    /// Off-probability of the background alone at each efficiency.
    pub background_off_prob: Option<Vec<f64>>,
}

impl SimConfig {
    pub fn new(grid: EfficiencyGrid, seed: u64) -> Self {
        Self {
            grid,
            windows_per_point: DEFAULT_WINDOWS,
            seed,
            background_off_prob: None,
        }
    }

    pub fn with_windows(mut self, windows: u64) -> Self {
        self.windows_per_point = windows;
        self
    }

    pub fn with_background(mut self, background: Vec<f64>) -> Self {
        self.background_off_prob = Some(background);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows_per_point == 0 {
            return Err(Error::InvalidParameter(
                "at least one window per point is required".into(),
            ));
        }
        if let Some(bg) = &self.background_off_prob {
            if bg.len() != self.grid.len() {
                return Err(Error::LengthMismatch {
                    expected: self.grid.len(),
                    found: bg.len(),
                });
            }
            if let Some(b) = bg.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
                return Err(Error::InvalidParameter(format!(
                    "background off-probability {b} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Calibrated neutral filters in front of a detector of efficiency `eta_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSet {
    pub transmittances: Vec<f64>,
    pub eta_max: f64,
}

impl FilterSet {
    pub fn new(transmittances: Vec<f64>, eta_max: f64) -> Self {
        Self {
            transmittances,
            eta_max,
        }
    }

    /// Transmittances `k / points` for `k = 1..=points`.
    pub fn equally_spaced(points: usize, eta_max: f64) -> Self {
        Self::new(
            (1..=points).map(|k| k as f64 / points as f64).collect(),
            eta_max,
        )
    }
}

impl Default for FilterSet {
    fn default() -> Self {
        Self::equally_spaced(DEFAULT_GRID_POINTS, DEFAULT_ETA_MAX)
    }
}

pub fn efficiency_grid_from_filters(filters: &FilterSet) -> Result<EfficiencyGrid> {
    if !(filters.eta_max > 0.0 && filters.eta_max <= 1.0) {
        return Err(Error::InvalidEfficiency(filters.eta_max));
    }
    if let Some(t) = filters
        .transmittances
        .iter()
        .find(|t| !(**t > 0.0 && **t <= 1.0))
    {
        return Err(Error::InvalidParameter(format!(
            "filter transmittance {t} outside (0, 1]"
        )));
    }
    EfficiencyGrid::new(
        filters
            .transmittances
            .iter()
            .map(|t| filters.eta_max * t)
            .collect(),
    )
}

/// Draws `off_count ~ Binomial(windows, p0 * b)` at every efficiency.
///
/// Record `k` uses its own ChaCha20 stream `k` under the configured seed, so
/// results do not depend on evaluation order.
pub fn simulate_dataset(truth: &Source, config: &SimConfig) -> Result<OnOffDataset> {
    config.validate()?;
    let records = config
        .grid
        .etas()
        .iter()
        .enumerate()
        .map(|(k, &eta)| {
            let background = config.background_off_prob.as_ref().map_or(1.0, |bg| bg[k]);
            let p = (truth.off_probability(eta)? * background).clamp(0.0, 1.0);
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            rng.set_stream(k as u64);
            let off = Binomial::new(config.windows_per_point, p)
                .map_err(|e| Error::InvalidParameter(format!("binomial sampler: {e}")))?
                .sample(&mut rng);
            OnOffRecord::new(eta, config.windows_per_point, off)
        })
        .collect::<Result<Vec<_>>>()?;
    OnOffDataset::new(records, "simulated")
}

/// Divides out an independently measured background no-click frequency:
/// `f_corr = clamp(f_meas / f_bg, 0, 1)`, expressed on the measured window
/// counts.
pub fn correct_background(
    measured: &OnOffDataset,
    background: &OnOffDataset,
) -> Result<OnOffDataset> {
    if measured.len() != background.len() {
        return Err(Error::LengthMismatch {
            expected: measured.len(),
            found: background.len(),
        });
    }
    let records = measured
        .records()
        .iter()
        .zip(background.records())
        .enumerate()
        .map(|(index, (m, b))| {
            if m.eta != b.eta {
                return Err(Error::GridMismatch {
                    index,
                    measured: m.eta,
                    background: b.eta,
                });
            }
            let fb = b.frequency();
            if fb == 0.0 {
                return Err(Error::DegenerateBackground { index, eta: b.eta });
            }
            let corrected = (m.frequency() / fb).clamp(0.0, 1.0);
            OnOffRecord::new(
                m.eta,
                m.windows,
                (corrected * m.windows as f64).round() as u64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    OnOffDataset::new(records, measured.label())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::PhotonDistribution;

    #[test]
    fn grid_from_filters() {
        let g = efficiency_grid_from_filters(&FilterSet::new(vec![1.0], DEFAULT_ETA_MAX)).unwrap();
        assert_eq!(g.etas(), &[0.284]);
        let g = efficiency_grid_from_filters(&FilterSet::new(vec![1.0, 0.5], 0.2)).unwrap();
        assert_eq!(g.etas(), &[0.2, 0.1]);
        let g = efficiency_grid_from_filters(&FilterSet::default()).unwrap();
        assert_eq!(g.len(), 30);
        assert!(g.etas().iter().all(|&e| e > 0.0 && e <= 0.284));
        assert!(efficiency_grid_from_filters(&FilterSet::new(vec![0.5, 0.5], 0.2)).is_err());
        assert!(efficiency_grid_from_filters(&FilterSet::new(vec![1.5], 0.2)).is_err());
    }

    #[test]
    fn vacuum_never_clicks() {
        let config = SimConfig::new(EfficiencyGrid::equally_spaced(10, 1.0).unwrap(), 3);
        let d =
            simulate_dataset(&Source::Distribution(PhotonDistribution::vacuum()), &config).unwrap();
        assert!(d.records().iter().all(|r| r.off_count == r.windows));
    }

    #[test]
    fn single_photon_frequency_within_five_sigma() {
        let config =
            SimConfig::new(EfficiencyGrid::new(vec![0.5]).unwrap(), 11).with_windows(1_000_000);
        let d =
            simulate_dataset(&Source::Distribution(PhotonDistribution::fock(1)), &config).unwrap();
        let sigma = (0.25f64 / 1e6).sqrt();
        assert!((d.frequencies()[0] - 0.5).abs() < 5.0 * sigma);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let config = SimConfig::new(EfficiencyGrid::equally_spaced(30, 0.284).unwrap(), 7);
        let src = Source::Distribution(PhotonDistribution::new(vec![0.3, 0.3, 0.4]).unwrap());
        assert_eq!(
            simulate_dataset(&src, &config).unwrap(),
            simulate_dataset(&src, &config).unwrap()
        );
        let other = SimConfig { seed: 8, ..config };
        assert_ne!(
            simulate_dataset(&src, &other).unwrap(),
            simulate_dataset(&src, &SimConfig::new(other.grid.clone(), 7)).unwrap()
        );
    }

    #[test]
    fn background_correction_arithmetic() {
        let m = OnOffDataset::new(vec![OnOffRecord::new(0.2, 100, 45).unwrap()], "m").unwrap();
        let b = OnOffDataset::new(vec![OnOffRecord::new(0.2, 1000, 900).unwrap()], "b").unwrap();
        let c = correct_background(&m, &b).unwrap();
        assert_eq!(c.records()[0].off_count, 50);
        assert_eq!(c.frequencies()[0], 0.5);

        let none = OnOffDataset::new(vec![OnOffRecord::new(0.2, 10, 10).unwrap()], "b").unwrap();
        assert_eq!(correct_background(&m, &none).unwrap(), m);
    }

    #[test]
    fn background_correction_errors() {
        let m = OnOffDataset::new(vec![OnOffRecord::new(0.2, 100, 45).unwrap()], "m").unwrap();
        let shifted =
            OnOffDataset::new(vec![OnOffRecord::new(0.3, 100, 90).unwrap()], "b").unwrap();
        assert!(matches!(
            correct_background(&m, &shifted),
            Err(Error::GridMismatch { index: 0, .. })
        ));
        let dark = OnOffDataset::new(vec![OnOffRecord::new(0.2, 100, 0).unwrap()], "b").unwrap();
        assert!(matches!(
            correct_background(&m, &dark),
            Err(Error::DegenerateBackground { .. })
        ));
        // Corrected frequencies are clamped to one.
        let low = OnOffDataset::new(vec![OnOffRecord::new(0.2, 100, 40).unwrap()], "b").unwrap();
        assert_eq!(correct_background(&m, &low).unwrap().frequencies()[0], 1.0);
    }

    #[test]
    fn background_config_validation() {
        let grid = EfficiencyGrid::equally_spaced(3, 0.3).unwrap();
        assert!(SimConfig::new(grid.clone(), 1)
            .with_background(vec![0.9; 2])
            .validate()
            .is_err());
        assert!(SimConfig::new(grid.clone(), 1)
            .with_background(vec![0.0; 3])
            .validate()
            .is_err());
        assert!(SimConfig::new(grid, 1).with_windows(0).validate().is_err());
    }
}
