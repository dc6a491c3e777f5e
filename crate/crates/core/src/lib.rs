//! Photon-number distribution reconstruction from on/off (Geiger-mode)
//! detection data taken at several quantum efficiencies.
//!
//! The crate is organised as a small pipeline:
//!
//! - [`distribution`]: domain types, the linear off-probability model and
//!   the diagnostics (fidelity, chi-square, mean photon number).
//! - [`pdc`]: the displaced multithermal model of seeded down-conversion and
//!   its closed-form off-probability.
//! - [`em`]: expectation-maximization reconstruction, with and without the
//!   linear energy penalty, and the search for the penalty weight.
//! - [`energy_fit`]: least-squares fit of the closed-form off-probability to
//!   measured frequencies, giving the input energy estimate.
//! - [`sim`]: seeded Monte Carlo generation of on/off datasets.
//! - [`dataio`]: text file formats for datasets, distributions and reports.
//! - [`cli`]: the command-line front end.

pub mod cli;
pub mod dataio;
pub mod distribution;
pub mod em;
pub mod energy_fit;
mod error;
mod numeric;
pub mod pdc;
pub mod sim;

pub use distribution::{
    build_design_matrix, chi_square, fidelity, loglikelihood, mean_photon_number, off_probability,
    DesignMatrix, EfficiencyGrid, OnOffDataset, OnOffRecord, PhotonDistribution,
};
pub use em::{
    em_step_constrained, em_step_standard, reconstruct, tune_beta, BetaPolicy, EmConfig,
    EnergyTarget, Init, ReconstructionResult,
};

pub use energy_fit::{fit_energy, sensitivity_to_modes, EnergyFitResult};
pub use error::{Error, Result};
pub use pdc::{
    laguerre_log_scaled, pdc_off_probability, pdc_pmf, PdcModelParams, Source, TruncatedPmf,
};
pub use sim::{
    correct_background, efficiency_grid_from_filters, simulate_dataset, FilterSet, SimConfig,
};
