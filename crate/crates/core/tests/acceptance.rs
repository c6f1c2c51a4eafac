//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, SQRT_2};
use std::process::ExitCode;
use std::time::Instant;

use bellthresh::bell::{
    local_bound_closed_form, local_bound_numeric, postselected_chsh, singlet_chsh_closed_form,
    singlet_chsh_deficit, singlet_violation_margin, werner_optimal_distribution, LocalSearchConfig,
    SettingsQuad,
};
use bellthresh::counting::{detection_probabilities, enumerate_oracle, outcome_probability, SourceModel};
use bellthresh::detectors::ResponseFunction;
use bellthresh::optimize::{
    maximize_over_theta, noise_resistance, smooth_threshold_no_violation_check, sweep,
    verify_small_phi_family, Functional, OptimizerConfig, Scenario, StateFamily, SweepOptions, SweepParameter,
};
use bellthresh::quantum::{Outcome, PairProbabilities, TwoQubitState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn step(n: u32) -> ResponseFunction {
    ResponseFunction::perfect_step(n).unwrap()
}

fn closed_form_anchors() -> Verdict {
    let s2 = singlet_chsh_closed_form(2);
    let l1 = local_bound_closed_form(1);
    let mut bad = Vec::new();
    for n in 1..=50 {
        // Both sides round to 4.0 in f64 for large n; compare the exact gaps.
        if !(singlet_violation_margin(n) > 0.0 && singlet_chsh_deficit(n) > 0.0) {
            bad.push(n);
        }
        if n <= 15 && !(local_bound_closed_form(n) < singlet_chsh_closed_form(n)) {
            bad.push(n);
        }
    }
    let ok = (s2 - 8.0 * SQRT_2 / 3.0).abs() < 1e-12 && l1 == 2.0 && bad.is_empty();
    verdict(
        ok,
        format!(
            "S(2) = {s2:.15}, L(1) = {l1}, min S-L gap over N=1..50 = {:.3e}, failures at {bad:?}",
            (1..=50).map(singlet_violation_margin).fold(f64::INFINITY, f64::min)
        ),
    )
}

fn engine_vs_closed_form() -> Verdict {
    let state = TwoQubitState::singlet();
    let quad = SettingsQuad::tsirelson();
    let mut worst: f64 = 0.0;
    for n in 1..=6 {
        let source = SourceModel::fixed(n).unwrap();
        let f = step(n);
        let p = quad
            .pair_probabilities(&state)
            .map(|row| row.map(|pp| detection_probabilities(&source, &f, &f, &pp)));
        let s = postselected_chsh(&p).unwrap();
        worst = worst.max((s - singlet_chsh_closed_form(n)).abs());
    }
    verdict(worst < 1e-10, format!("max |S_engine - S_closed| over N=1..6 = {worst:.3e}"))
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let tables: Vec<PairProbabilities> = (0..50)
        .map(|_| {
            let raw: [f64; 4] = std::array::from_fn(|_| -(1.0 - rng.gen::<f64>()).ln());
            let s: f64 = raw.iter().sum();
            let mut p = [[raw[0] / s, raw[1] / s], [raw[2] / s, 0.0]];
            p[1][1] = (1.0 - p[0][0] - p[0][1] - p[1][0]).max(0.0);
            PairProbabilities::new(p).unwrap()
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for m in 1..=6u32 {
        for n in 1..=m {
            let mut responses = vec![step(n)];
            for eta in [0.2, 0.5, 0.9] {
                responses.push(ResponseFunction::smooth_step(n, eta).unwrap());
            }
            for f in &responses {
                for pp in &tables {
                    for alpha in Outcome::BOTH {
                        for beta in Outcome::BOTH {
                            let fast = outcome_probability(m, f, f, pp, alpha, beta);
                            let slow = enumerate_oracle(m, f, f, pp, alpha, beta).unwrap();
                            worst = worst.max((fast - slow).abs());
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(worst < 1e-12, format!("{checked} comparisons, max deviation {worst:.3e}"))
}

fn ch_for_all_thresholds(config: &OptimizerConfig) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for n in 1..=5 {
        let s = Scenario::new(
            StateFamily::Pure { theta: FRAC_PI_4 },
            SourceModel::fixed(n).unwrap(),
            step(n),
            Functional::Ch,
        );
        let r = maximize_over_theta(&s, config).unwrap();
        let theta = r.optimal_theta.unwrap();
        let again = s
            .with_state(StateFamily::Pure { theta })
            .evaluate(&r.optimal_settings)
            .unwrap();
        ok &= r.best_value > 1e-6 && (again - r.best_value).abs() < 1e-9;
        parts.push(format!("N={n}: CH={:.6} at theta={theta:.4}", r.best_value));
    }
    let phis = [0.005, 0.01, 0.02, 0.03, 0.04, 0.05];
    let mut worst: f64 = 0.0;
    for n in 1..=10 {
        let report = verify_small_phi_family(n, &phis).unwrap();
        worst = worst.max(report.relative_error);
        ok &= report.rows.iter().all(|&(_, ch)| ch > 0.0);
    }
    ok &= worst <= 0.05;
    parts.push(format!("small-phi coefficient worst relative error over N<=10 = {worst:.2e}"));
    verdict(ok, parts.join("; "))
}

fn majority_vote_optimum(config: &OptimizerConfig) -> Verdict {
    let template = Scenario::new(
        StateFamily::Pure { theta: FRAC_PI_4 },
        SourceModel::fixed(7).unwrap(),
        step(1),
        Functional::Ch,
    );
    let grid: Vec<f64> = (1..=7).map(f64::from).collect();
    let options = SweepOptions {
        optimize_theta: true,
        noise_resistance: false,
    };
    let values: Vec<f64> = sweep(&template, SweepParameter::Threshold, &grid, options, config)
        .unwrap()
        .into_iter()
        .map(|r| r.unwrap().best_value)
        .collect();
    let best = (0..7).max_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap() + 1;
    let asym = (1..=3)
        .map(|n| (values[n - 1] - values[7 - n]).abs())
        .fold(0.0, f64::max);
    let listing: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(k, v)| format!("N={}:{v:.6}", k + 1))
        .collect();
    verdict(
        best == 4 && asym <= 1e-9,
        format!("best N = {best}; max |CH(N) - CH(8-N)| = {asym:.2e}; {}", listing.join(" ")),
    )
}

fn poisson_optimum(config: &OptimizerConfig) -> Verdict {
    let grid: Vec<f64> = (0..=200).map(|k| 5.0 + 0.05 * k as f64).collect();
    let template = Scenario::new(
        StateFamily::Pure { theta: FRAC_PI_4 },
        SourceModel::poisson(9.0).unwrap(),
        step(5),
        Functional::Ch,
    );
    let best: Vec<f64> = sweep(
        &template,
        SweepParameter::Mu,
        &grid,
        SweepOptions {
            optimize_theta: true,
            noise_resistance: false,
        },
        config,
    )
    .unwrap()
    .into_iter()
    .map(|r| r.unwrap().best_value)
    .collect();
    let k = (0..grid.len()).max_by(|&a, &b| best[a].total_cmp(&best[b])).unwrap();
    let mu_star = grid[k];

    // Critical weights for the maximally entangled state; tolerated noise is
    // 1 - w*, so it decreases in mu exactly when w* increases.
    let fine = OptimizerConfig {
        noise_tolerance: 1e-6,
        ..config.clone()
    };
    let weights: Vec<f64> = sweep(
        &template,
        SweepParameter::Mu,
        &grid,
        SweepOptions {
            optimize_theta: false,
            noise_resistance: true,
        },
        &fine,
    )
    .unwrap()
    .into_iter()
    .map(|r| r.unwrap().noise_resistance.unwrap_or(f64::NAN))
    .collect();
    let bad: Vec<f64> = grid
        .windows(2)
        .zip(weights.windows(2))
        .filter(|(_, w)| !(w[1] >= w[0]))
        .map(|(mu, _)| mu[1])
        .collect();
    verdict(
        (8.5..=9.5).contains(&mu_star) && bad.is_empty(),
        format!(
            "argmax mu = {mu_star:.2} (CH = {:.8}); tolerated noise 1-w* from {:.5} at mu=5 to {:.5} at mu=15, monotonicity breaks at {bad:?}",
            best[k],
            1.0 - weights[0],
            1.0 - weights[weights.len() - 1]
        ),
    )
}

fn werner_link() -> Verdict {
    let table = werner_optimal_distribution();
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let same = if i == 0 || j == 0 { 0.75 } else { 0.25 };
            let t = table.cells[i][j].table();
            let expected = [[same / 2.0, (1.0 - same) / 2.0], [(1.0 - same) / 2.0, same / 2.0]];
            for a in 0..2 {
                for b in 0..2 {
                    worst = worst.max((t[a][b] - expected[a][b]).abs());
                }
            }
        }
    }
    let gap = (1..=6)
        .map(|n| (table.n_copy_postselected_chsh(n).unwrap() - local_bound_closed_form(n)).abs())
        .fold(0.0, f64::max);
    verdict(
        worst < 1e-12 && gap < 1e-12,
        format!("table deviation {worst:.2e}; max |S_N - L(N)| over N<=6 = {gap:.2e}"),
    )
}

fn local_bound_conjecture() -> Verdict {
    let config = LocalSearchConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for n in 1..=4 {
        let b = local_bound_numeric(n, &config).unwrap();
        let l = local_bound_closed_form(n);
        let inside = b.value >= l - 1e-6 && b.value <= l + 1e-4;
        ok &= inside;
        parts.push(format!("N={n}: {:.10} vs L={l:.10}", b.value));
        if b.value > l + 1e-4 {
            parts.push(format!("COUNTEREXAMPLE weights {:?}", b.mixture.weights()));
        }
    }
    verdict(ok, parts.join("; "))
}

fn postselected_noise(config: &OptimizerConfig) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for n in 1..=5 {
        let s = Scenario::new(
            StateFamily::Singlet,
            SourceModel::fixed(n).unwrap(),
            step(n),
            Functional::PostselectedChsh,
        );
        let w = noise_resistance(&s, config).unwrap();
        worst = worst.max((w - FRAC_1_SQRT_2).abs());
        parts.push(format!("N={n}: w*={w:.5}"));
    }
    verdict(worst <= 1e-3, format!("{}; max |w* - 1/sqrt2| = {worst:.2e}", parts.join(" ")))
}

fn smooth_threshold(config: &OptimizerConfig) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (n, m) in [(2, 3), (2, 4), (3, 4)] {
        for row in smooth_threshold_no_violation_check(n, m, &[0.1, 0.3, 0.5, 0.8], config).unwrap() {
            if row.margin > 1e-6 {
                ok = false;
                parts.push(format!(
                    "VIOLATION N={n} M={m} eta={}: S={:.6} > bound {:.6} at theta={:.4}",
                    row.eta, row.best_value, row.bound, row.optimal_theta
                ));
            }
        }
    }

    let thetas: Vec<f64> = (1..=10).map(|k| FRAC_PI_4 * k as f64 / 10.0).collect();
    for n in 2..=4u32 {
        let poisson = |mu: f64| {
            Scenario::new(
                StateFamily::Pure { theta: FRAC_PI_4 },
                SourceModel::poisson(mu).unwrap(),
                step(n),
                Functional::PostselectedChsh,
            )
        };
        let r = maximize_over_theta(&poisson(0.1), config).unwrap();
        let violated = r.violation() > 0.0;
        ok &= violated;
        parts.push(format!(
            "N={n} mu=0.1: S={:.6} vs L={:.6} at theta={:.4}",
            r.best_value,
            r.local_bound,
            r.optimal_theta.unwrap()
        ));

        let fixed = Scenario::new(
            StateFamily::Pure { theta: FRAC_PI_4 },
            SourceModel::fixed(n).unwrap(),
            step(n),
            Functional::PostselectedChsh,
        );
        let options = SweepOptions::default();
        let a = sweep(&poisson(1e-3), SweepParameter::Theta, &thetas, options, config).unwrap();
        let b = sweep(&fixed, SweepParameter::Theta, &thetas, options, config).unwrap();
        let gap = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x.as_ref().unwrap().best_value - y.as_ref().unwrap().best_value).abs())
            .fold(0.0, f64::max);
        ok &= gap <= 1e-3;
        parts.push(format!("N={n} mu=1e-3 vs M=N: max gap {gap:.2e}"));
    }
    verdict(ok, parts.join("; "))
}

fn main() -> ExitCode {
    let config = OptimizerConfig::default();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("closed-form anchors", Box::new(closed_form_anchors)),
        ("engine vs closed form", Box::new(engine_vs_closed_form)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("CH violation for every threshold", Box::new(|| ch_for_all_thresholds(&config))),
        ("majority-vote optimum at M=7", Box::new(|| majority_vote_optimum(&config))),
        ("Poisson optimum and noise trend", Box::new(|| poisson_optimum(&config))),
        ("Werner table and L(N)", Box::new(werner_link)),
        ("numeric local bound", Box::new(local_bound_conjecture)),
        ("post-selected noise resistance", Box::new(|| postselected_noise(&config))),
        ("smooth threshold and Poisson limit", Box::new(|| smooth_threshold(&config))),
    ];
    let mut failures = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        if !v.pass {
            failures += 1;
        }
        println!(
            "{} {:>2} {name} ({:.1}s): {}",
            if v.pass { "PASS" } else { "FAIL" },
            k + 1,
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
