//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use onoff::dataio::{self, Metadata};
use onoff::distribution::build_design_matrix;
use onoff::pdc::pdc_pmf;
use onoff::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const MODES: u64 = 700_000;
const REGIMES: [(f64, f64); 3] = [(7.23, 0.507), (16.72, 0.781), (18.34, 0.907)];
const N_MAX: usize = 80;
/// Windows per point for noise-free data: frequencies are exact to 2^-53.
const EXACT_WINDOWS: u64 = 1 << 53;

type Check = fn() -> Verdict;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn regime_grid() -> EfficiencyGrid {
    EfficiencyGrid::equally_spaced(30, 0.284).unwrap()
}

fn exact_dataset(source: &Source, grid: &EfficiencyGrid) -> OnOffDataset {
    let f: Vec<f64> = grid
        .etas()
        .iter()
        .map(|&eta| source.off_probability(eta).unwrap())
        .collect();
    OnOffDataset::from_frequencies(grid, &f, EXACT_WINDOWS, "exact").unwrap()
}

fn regime_dataset(truth: &PdcModelParams, seed: u64) -> OnOffDataset {
    let config = SimConfig::new(regime_grid(), seed).with_windows(200_000);
    simulate_dataset(&Source::Pdc(*truth), &config).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let hi = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi + terms.iter().map(|t| (t - hi).exp()).sum::<f64>().ln()
}

fn series_matches_closed_form() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let mut worst = 0f64;
    let mut worst_tail = 0f64;
    for _ in 0..100 {
        let nbar = rng.random_range(1e-4..=2.0);
        let alpha_sq = rng.random_range(0.0..=20.0);
        let modes = rng.random_range(1..=1000u64);
        let p = PdcModelParams::new(nbar, alpha_sq, modes).unwrap();
        let n_max = p.truncation_for_tail(1e-12);
        worst_tail = worst_tail.max(pdc_pmf(&p, n_max).unwrap().tail);
        let log_terms: Vec<f64> = p.log_pmf_terms().take(n_max + 1).collect();
        for k in 0..10 {
            let eta = 0.05 + 0.1 * k as f64;
            let l1m = (-eta).ln_1p();
            let series = log_sum_exp(
                log_terms
                    .iter()
                    .enumerate()
                    .map(|(n, l)| l + n as f64 * l1m),
            );
            // Compared through logarithms: for large mode counts p0 underflows.
            let g = eta * nbar;
            let closed = -(modes as f64) * g.ln_1p() - eta * alpha_sq / (1.0 + g);
            let library = pdc_off_probability(&p, eta).unwrap();
            if library > 1e-290 {
                worst = worst.max((library.ln() - closed).abs());
            }
            worst = worst.max((series - closed).exp_m1().abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-9 && worst_tail < 1e-12 && elapsed < Duration::from_secs(10),
        format!("max relative deviation {worst:.2e}, max tail {worst_tail:.1e}, {elapsed:.2?}"),
    )
}

fn laguerre_oracle() -> Verdict {
    let text = include_str!("data/laguerre_oracle.csv");
    let mut worst = 0f64;
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let n: usize = f[0].parse().unwrap();
        let a: f64 = f[1].parse().unwrap();
        let z: f64 = f[2].parse().unwrap();
        let want: f64 = f[3].parse().unwrap();
        let (got, sign) = laguerre_log_scaled(n, a, z).unwrap();
        assert_eq!(sign, 1);
        let err = if want == 0.0 {
            got.abs()
        } else {
            ((got - want) / want).abs()
        };
        worst = worst.max(err);
        rows += 1;
    }
    verdict(
        worst <= 1e-9,
        format!("{rows} oracle values, max relative error {worst:.2e}"),
    )
}

fn random_distribution(rng: &mut ChaCha20Rng, n_max: usize) -> PhotonDistribution {
    let w: Vec<f64> = (0..=n_max)
        .map(|_| rng.random::<f64>().powi(3) + 1e-9)
        .collect();
    PhotonDistribution::new(w).unwrap()
}

fn em_ascent_and_fixed_point() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut worst_drop = 0f64;
    let mut worst_move = 0f64;
    for case in 0..50u64 {
        let n_max = rng.random_range(3..=25);
        let truth = random_distribution(&mut rng, n_max);
        let grid =
            EfficiencyGrid::equally_spaced(rng.random_range(8..=30), rng.random_range(0.3..=1.0))
                .unwrap();
        let windows = rng.random_range(10_000..=1_000_000);
        let data = simulate_dataset(
            &Source::Distribution(truth.clone()),
            &SimConfig::new(grid.clone(), case).with_windows(windows),
        )
        .unwrap();
        let run = reconstruct(
            &data,
            &EmConfig::new(n_max)
                .with_max_iterations(2000)
                .with_tolerance(1e-300),
        )
        .unwrap();
        for w in run.loglik_trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }

        let design = build_design_matrix(&grid, n_max);
        let exact = design.forward(truth.probs()).unwrap();
        let next = em_step_standard(&truth, &design, &exact, true).unwrap();
        for (a, b) in next.probs().iter().zip(truth.probs()) {
            worst_move = worst_move.max((a - b).abs());
        }
    }
    verdict(
        worst_drop <= 1e-12 && worst_move <= 1e-12,
        format!("largest loglikelihood drop {worst_drop:.2e}, largest fixed-point move {worst_move:.2e}"),
    )
}

fn beta_zero_equivalence() -> Verdict {
    let truth = PdcModelParams::new(0.8, 2.0, 3).unwrap();
    let grid = EfficiencyGrid::equally_spaced(30, 0.5).unwrap();
    let data = simulate_dataset(&Source::Pdc(truth), &SimConfig::new(grid.clone(), 4)).unwrap();
    let design = build_design_matrix(&grid, 40);
    let f = data.frequencies();
    let mut a = PhotonDistribution::uniform(40);
    let mut b = a.clone();
    let mut worst = 0f64;
    for _ in 0..1000 {
        a = em_step_standard(&a, &design, &f, true).unwrap();
        b = em_step_constrained(&b, &design, &f, 0.0, true).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(
        worst <= 1e-12,
        format!("max per-entry difference over 1000 iterations {worst:.2e}"),
    )
}

fn thermal_recovery() -> Verdict {
    let start = Instant::now();
    let source = Source::Pdc(PdcModelParams::multithermal(1.0, 1).unwrap());
    let data = exact_dataset(&source, &regime_grid());
    // The default stopping tolerance halts before the fit is this sharp.
    let config = EmConfig::new(60)
        .with_max_iterations(100_000)
        .with_tolerance(1e-12);
    let run = reconstruct(&data, &config).unwrap();
    let f = fidelity(&run.distribution, &source.distribution(60).unwrap());
    let elapsed = start.elapsed();
    verdict(
        f >= 0.9999 && run.iterations_used <= 100_000 && elapsed < Duration::from_secs(5),
        format!(
            "fidelity {f:.6} after {} iterations, {elapsed:.2?}",
            run.iterations_used
        ),
    )
}

struct PipelineRun {
    constrained: f64,
    unconstrained: f64,
    chi_square: f64,
}

fn pipeline(truth: &PdcModelParams, seed: u64) -> PipelineRun {
    let data = regime_dataset(truth, seed);
    let fit = fit_energy(&data, MODES, None).unwrap();
    let reference = Source::Pdc(*truth).distribution(N_MAX).unwrap();
    let config = EmConfig::new(N_MAX);
    let free = reconstruct(&data, &config).unwrap();
    let constrained = tune_beta(
        &data,
        &config,
        &BetaPolicy::TargetEnergy(EnergyTarget::new(fit.n_ave)),
    )
    .unwrap();
    PipelineRun {
        constrained: fidelity(&constrained.distribution, &reference),
        unconstrained: fidelity(&free.distribution, &reference),
        chi_square: chi_square(&constrained.predicted_off, &data.frequencies()).unwrap(),
    }
}

fn regime_reproduction() -> Verdict {
    let start = Instant::now();
    let mut passed = true;
    let mut parts = Vec::new();
    for (n_ave, x) in REGIMES {
        let truth = PdcModelParams::from_regime(n_ave, x, MODES).unwrap();
        let runs: Vec<PipelineRun> = (1..=5).map(|seed| pipeline(&truth, seed)).collect();
        let f = median(runs.iter().map(|r| r.constrained).collect());
        let chi = median(runs.iter().map(|r| r.chi_square).collect());
        passed &= f >= 0.99 && chi <= 5e-2;
        parts.push(format!("x={x}: F {f:.4}, chi2 {chi:.1e}"));
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(120);
    verdict(passed, format!("{}; {elapsed:.1?}", parts.join("; ")))
}

fn constraint_advantage() -> Verdict {
    let truth = PdcModelParams::from_regime(18.34, 0.907, MODES).unwrap();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 1..=10 {
        let run = pipeline(&truth, seed);
        if run.constrained > run.unconstrained {
            wins += 1;
        }
        pairs.push(format!("{:.4}/{:.4}", run.constrained, run.unconstrained));
    }
    verdict(
        wins >= 8,
        format!(
            "constrained ahead in {wins}/10 seeds (constrained/unconstrained F: {})",
            pairs.join(" ")
        ),
    )
}

fn energy_fit_round_trip() -> Verdict {
    let mut worst_exact = 0f64;
    let mut worst_noisy = 0f64;
    for (n_ave, x) in REGIMES {
        let truth = PdcModelParams::from_regime(n_ave, x, MODES).unwrap();
        let exact = fit_energy(
            &exact_dataset(&Source::Pdc(truth), &regime_grid()),
            MODES,
            None,
        )
        .unwrap();
        worst_exact = worst_exact.max((exact.n_ave / n_ave - 1.0).abs());
        for seed in 1..=5 {
            let noisy = fit_energy(&regime_dataset(&truth, seed), MODES, None).unwrap();
            worst_noisy = worst_noisy.max((noisy.n_ave / n_ave - 1.0).abs());
        }
    }
    verdict(
        worst_exact < 1e-3 && worst_noisy < 2e-2,
        format!("worst N_ave error: noiseless {worst_exact:.1e}, noisy {worst_noisy:.1e}"),
    )
}

fn mode_count_insensitivity() -> Verdict {
    let mut worst = 0f64;
    for (n_ave, x) in REGIMES {
        let truth = PdcModelParams::from_regime(n_ave, x, MODES).unwrap();
        for data in [
            exact_dataset(&Source::Pdc(truth), &regime_grid()),
            regime_dataset(&truth, 1),
        ] {
            let fits = sensitivity_to_modes(&data, &[MODES / 10, MODES, MODES * 10]).unwrap();
            let centre = fits[1].n_ave;
            for f in [&fits[0], &fits[2]] {
                worst = worst.max((f.n_ave / centre - 1.0).abs());
            }
        }
    }
    verdict(worst < 0.05, format!("largest N_ave change {:.2e}", worst))
}

fn run_cli(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_onoff"))
        .args(args)
        .arg("--quiet")
        .current_dir(dir)
        .status()
        .unwrap();
    assert!(status.success(), "onoff {args:?} failed");
}

fn cli_session(dir: &Path) {
    run_cli(
        dir,
        &[
            "simulate",
            "--model",
            "regime:18.34,0.907,700000",
            "--grid",
            "30,0.284",
            "--windows",
            "200000",
            "--seed",
            "7",
            "--output",
            "d.csv",
        ],
    );
    run_cli(
        dir,
        &[
            "reconstruct",
            "--input",
            "d.csv",
            "--nmax",
            "80",
            "--target-energy-from-fit",
            "--modes",
            "700000",
            "--output",
            "r.json",
        ],
    );
    run_cli(
        dir,
        &["report", "--input", "r.json", "--output", "plot.csv"],
    );
}

fn determinism_and_io() -> Verdict {
    let mut problems = Vec::new();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        cli_session(d.path());
    }
    for name in ["d.csv", "r.json", "plot.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        if a != b {
            problems.push(format!("{name} differs between runs"));
        }
    }

    let dataset_text = std::fs::read_to_string(dirs[0].path().join("d.csv")).unwrap();
    let (data, meta) = dataio::parse_dataset(&dataset_text).unwrap();
    if dataio::format_dataset(&data, &Metadata(meta.0[1..].to_vec())) != dataset_text {
        problems.push("dataset text round trip".into());
    }
    let path = dirs[0].path().join("copy.csv");
    dataio::write_dataset(&data, &path).unwrap();
    if dataio::read_dataset(&path).unwrap() != data {
        problems.push("dataset value round trip".into());
    }

    let report_text = std::fs::read_to_string(dirs[0].path().join("r.json")).unwrap();
    let report = dataio::parse_report(&report_text).unwrap();
    if dataio::format_report(&report).unwrap() != report_text {
        problems.push("report text round trip".into());
    }
    let path = dirs[0].path().join("copy.json");
    dataio::write_report(&report, &path).unwrap();
    if dataio::read_report(&path).unwrap() != report {
        problems.push("report value round trip".into());
    }

    let dist = report.distribution().unwrap();
    if dataio::parse_distribution(&dataio::format_distribution(&dist)).unwrap() != dist {
        problems.push("distribution round trip".into());
    }
    let params = report.fit.unwrap().params().unwrap();
    let path = dirs[0].path().join("params.json");
    dataio::write_model_params(&params, &path).unwrap();
    if dataio::read_model_params(&path).unwrap() != params {
        problems.push("model parameter round trip".into());
    }

    let passed = problems.is_empty();
    let detail = if passed {
        "dataset, report and plot files byte-identical across runs; all round trips exact".into()
    } else {
        problems.join(", ")
    };
    verdict(passed, detail)
}

fn main() {
    let criteria: [(u32, &str, Check); 10] = [
        (1, "series vs closed form", series_matches_closed_form),
        (2, "Laguerre oracle", laguerre_oracle),
        (3, "EM ascent and fixed point", em_ascent_and_fixed_point),
        (4, "beta = 0 equivalence", beta_zero_equivalence),
        (5, "thermal recovery", thermal_recovery),
        (6, "regime reproduction", regime_reproduction),
        (7, "constraint advantage", constraint_advantage),
        (8, "energy fit round trip", energy_fit_round_trip),
        (9, "mode-count insensitivity", mode_count_insensitivity),
        (10, "determinism and I/O", determinism_and_io),
    ];
    let mut failures = 0;
    for (id, name, check) in criteria {
        let v =
            std::panic::catch_unwind(check).unwrap_or_else(|_| verdict(false, "panicked".into()));
        if !v.passed {
            failures += 1;
        }
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag} {name}: {}", v.detail);
    }
    println!("acceptance: {}/10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
