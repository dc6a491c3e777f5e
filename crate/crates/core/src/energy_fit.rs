//! Input-energy estimate from a least-squares fit of the closed-form
//! off-probability to measured off-frequencies.
//!
//! The free parameters are the total thermal energy and the coherent
//! intensity; the mode count is a fixed experimental estimate. Both free
//! parameters are fitted in log space, which keeps them positive.
//!
//! With many modes the off-probability depends on the two energies almost
//! only through their sum, so the refinement works in the coordinates
//! `(ln(thermal + alpha_sq), ln(alpha_sq / thermal))`, which follow that
//! long, flat valley.

use serde::{Deserialize, Serialize};

use crate::distribution::OnOffDataset;
use crate::numeric::compensated_sum;
use crate::pdc::{pdc_off_probability, PdcModelParams};
use crate::{Error, Result};

const GRID_POINTS: usize = 40;
const GRID_LOG10_MIN: f64 = -3.0;
const GRID_LOG10_MAX: f64 = 3.0;
/// Relative residual improvement below which refinement stops.
const RESIDUAL_TOLERANCE: f64 = 1e-12;
const MAX_RESTARTS: usize = 50;
const MAX_EVALUATIONS: usize = 4_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyFitResult {
    pub total_thermal: f64,
    pub alpha_sq: f64,
    pub modes: u64,
    #[serde(rename = "N_ave")]
    pub n_ave: f64,
    /// Stimulation fraction `alpha_sq / n_ave`.
    pub x: f64,
    pub sum_sq_residual: f64,
    pub converged: bool,
}

impl EnergyFitResult {
    pub fn params(&self) -> Result<PdcModelParams> {
        PdcModelParams::from_totals(self.total_thermal, self.alpha_sq, self.modes)
    }
}

struct Objective {
    etas: Vec<f64>,
    frequencies: Vec<f64>,
    modes: u64,
}

/// `(ln thermal, ln alpha_sq)` to `(ln total, ln ratio)`.
fn to_valley(p: [f64; 2]) -> [f64; 2] {
    let hi = p[0].max(p[1]);
    let total = hi + ((p[0] - hi).exp() + (p[1] - hi).exp()).ln();
    [total, p[1] - p[0]]
}

fn from_valley(q: [f64; 2]) -> [f64; 2] {
    // thermal = total / (1 + ratio), alpha_sq = total * ratio / (1 + ratio)
    let log1p_ratio = if q[1] > 0.0 {
        q[1] + (-q[1]).exp().ln_1p()
    } else {
        q[1].exp().ln_1p()
    };
    [q[0] - log1p_ratio, q[0] + q[1] - log1p_ratio]
}

impl Objective {
    fn residual(&self, log_thermal: f64, log_alpha_sq: f64) -> f64 {
        let params = PdcModelParams::from_totals(log_thermal.exp(), log_alpha_sq.exp(), self.modes)
            .expect("exponentiated parameters are nonnegative");
        compensated_sum(self.etas.iter().zip(&self.frequencies).map(|(&eta, &f)| {
            let d = f - pdc_off_probability(&params, eta).expect("validated efficiency");
            d * d
        }))
    }

    fn at(&self, p: [f64; 2]) -> f64 {
        let r = self.residual(p[0], p[1]);
        if r.is_finite() {
            r
        } else {
            f64::INFINITY
        }
    }
}

/// Fits `(total_thermal, alpha_sq)` at a fixed mode count.
///
/// A 40 x 40 logarithmic scan over `[1e-3, 1e3]^2` picks the start (or
/// `init_guess`, when it scores better), then Nelder-Mead restarts refine it
/// until a restart improves the residual by less than a relative `1e-12`.
pub fn fit_energy(
    data: &OnOffDataset,
    modes: u64,
    init_guess: Option<(f64, f64)>,
) -> Result<EnergyFitResult> {
    if data.len() < 3 {
        return Err(Error::Underdetermined {
            found: data.len(),
            required: 3,
        });
    }
    if modes == 0 {
        return Err(Error::InvalidParameter(
            "mode count must be positive".into(),
        ));
    }
    let objective = Objective {
        etas: data.etas(),
        frequencies: data.frequencies(),
        modes,
    };

    let step = (GRID_LOG10_MAX - GRID_LOG10_MIN) / (GRID_POINTS - 1) as f64;
    let axis: Vec<f64> = (0..GRID_POINTS)
        .map(|i| (GRID_LOG10_MIN + step * i as f64) * std::f64::consts::LN_10)
        .collect();
    let mut best = ([axis[0], axis[0]], f64::INFINITY);
    for &u in &axis {
        for &v in &axis {
            let r = objective.at([u, v]);
            if r < best.1 {
                best = ([u, v], r);
            }
        }
    }
    if let Some((thermal, alpha_sq)) = init_guess {
        if !(thermal > 0.0 && alpha_sq > 0.0) {
            return Err(Error::InvalidParameter(
                "initial guess must have positive components".into(),
            ));
        }
        let p = [thermal.ln(), alpha_sq.ln()];
        let r = objective.at(p);
        if r <= best.1 {
            best = (p, r);
        }
    }

    let scale = step * std::f64::consts::LN_10;
    let mut best = (to_valley(best.0), best.1);
    let mut converged = false;
    for _ in 0..MAX_RESTARTS {
        let (point, value) = nelder_mead(
            |q| objective.at(from_valley(q)),
            best.0,
            scale,
            MAX_EVALUATIONS,
        );
        let improvement = best.1 - value;
        if value < best.1 {
            best = (point, value);
        }
        if improvement <= RESIDUAL_TOLERANCE * best.1 || best.1 == 0.0 {
            converged = true;
            break;
        }
    }

    let [log_thermal, log_alpha_sq] = from_valley(best.0);
    let total_thermal = log_thermal.exp();
    let alpha_sq = log_alpha_sq.exp();
    let n_ave = total_thermal + alpha_sq;
    Ok(EnergyFitResult {
        total_thermal,
        alpha_sq,
        modes,
        n_ave,
        x: if n_ave > 0.0 { alpha_sq / n_ave } else { 0.0 },
        sum_sq_residual: best.1,
        converged,
    })
}

/// Runs [`fit_energy`] once per mode count.
pub fn sensitivity_to_modes(
    data: &OnOffDataset,
    modes_list: &[u64],
) -> Result<Vec<EnergyFitResult>> {
    modes_list
        .iter()
        .map(|&m| fit_energy(data, m, None))
        .collect()
}

/// Two-dimensional Nelder-Mead with the standard coefficients. Stops when the
/// simplex values agree to machine precision, the simplex collapses, or the
/// evaluation budget runs out.
fn nelder_mead<F>(f: F, start: [f64; 2], scale: f64, max_evaluations: usize) -> ([f64; 2], f64)
where
    F: Fn([f64; 2]) -> f64,
{
    let mut simplex = [
        start,
        [start[0] + scale, start[1]],
        [start[0], start[1] + scale],
    ];
    let mut values = simplex.map(&f);
    let mut evaluations = 3;

    while evaluations < max_evaluations {
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);

        let spread = values[2] - values[0];
        let size = (simplex[2][0] - simplex[0][0])
            .abs()
            .max((simplex[2][1] - simplex[0][1]).abs())
            .max((simplex[1][0] - simplex[0][0]).abs())
            .max((simplex[1][1] - simplex[0][1]).abs());
        if spread <= f64::EPSILON * values[0].abs() || size < 1e-13 {
            break;
        }

        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let toward = |t: f64| {
            [
                centroid[0] + t * (simplex[2][0] - centroid[0]),
                centroid[1] + t * (simplex[2][1] - centroid[1]),
            ]
        };

        let reflected = toward(-1.0);
        let fr = f(reflected);
        evaluations += 1;
        if fr < values[0] {
            let expanded = toward(-2.0);
            let fe = f(expanded);
            evaluations += 1;
            if fe < fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            let contracted = if fr < values[2] {
                toward(-0.5)
            } else {
                toward(0.5)
            };
            let fc = f(contracted);
            evaluations += 1;
            if fc < values[2].min(fr) {
                simplex[2] = contracted;
                values[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = [
                        0.5 * (simplex[0][0] + simplex[i][0]),
                        0.5 * (simplex[0][1] + simplex[i][1]),
                    ];
                    values[i] = f(simplex[i]);
                }
                evaluations += 2;
            }
        }
    }
    let best = (0..3)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("three vertices");
    (simplex[best], values[best])
}
