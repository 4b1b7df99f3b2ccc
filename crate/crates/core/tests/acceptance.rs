//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::time::Instant;

use smp_spde::adjoint::{
    duality_residual, solve_discrete_adjoint_batch, solve_lsmc_adjoint, AdjointMethod, RegressionBasis,
};
use smp_spde::forward::{estimate_cost, simulate_batch, simulate_path, ControlPath};
use smp_spde::harness::oracle::kkt_control;
use smp_spde::models::{check_assumptions, BuiltinModel, NoiseKind, ProblemConfig, ProblemSpec};
use smp_spde::optimizer::{estimate_gradient, fd_gradient_check, projected_gradient_descent, PgdOptions};
use smp_spde::sensitivity::{cost_expansion, eps_scaling_report, simulate_linearized};
use smp_spde::wiener::{PathBatch, WienerPath};

type Outcome = Result<(bool, String), String>;

struct Tally {
    failed: usize,
}

impl Tally {
    fn record(&mut self, id: &str, title: &str, start: Instant, outcome: Outcome) {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            self.failed += 1;
        }
        println!(
            "{} [{id}] {title}: {detail} ({secs:.1}s)",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn e(err: smp_spde::Error) -> String {
    err.to_string()
}

fn build(config: ProblemConfig) -> Result<ProblemSpec, String> {
    config.build("").map_err(e)
}

fn wavy(n_steps: usize, phase: f64) -> ControlPath {
    ControlPath::new(
        (0..n_steps)
            .map(|k| {
                let t = k as f64 / n_steps as f64;
                vec![(6.0 * t + phase).sin(), 0.5 * (4.0 * t - phase).cos()]
            })
            .collect(),
    )
    .unwrap()
}

fn adjoint_exactness() -> Outcome {
    let spec = ProblemSpec::builtin(BuiltinModel::Cubic, 8, 200).map_err(e)?;
    assert_eq!(spec.noise.kind, NoiseKind::BoundedMultiplicative);
    let batch = PathBatch::for_spec(&spec, 11, 100).map_err(e)?;
    let control = ControlPath::constant(200, &[0.5, -0.3]).map_err(e)?;
    let dirs = vec![wavy(200, 0.0), wavy(200, 1.3)];
    let r = fd_gradient_check(&spec, &control, &dirs, &[1e-5], &batch).map_err(e)?;
    let worst = r.max_rel_err;
    Ok((
        worst < 1e-6,
        format!("max relative error {worst:.2e} (< 1e-6) over {} directions", dirs.len()),
    ))
}

fn duality() -> Outcome {
    let mut worst = 0.0_f64;
    for model in BuiltinModel::ALL {
        let spec = ProblemSpec::builtin(model, 8, 200).map_err(e)?;
        let batch = PathBatch::for_spec(&spec, 21, 100).map_err(e)?;
        let star = ControlPath::constant(200, &[0.2, -0.1]).map_err(e)?;
        let dir = wavy(200, 0.4);
        let fw = simulate_batch(&spec, &spec.u0, &star, &batch).map_err(e)?;
        let adj = solve_discrete_adjoint_batch(&spec, &fw, &star, &batch).map_err(e)?;
        for ((f, a), w) in fw.iter().zip(&adj).zip(batch.paths()) {
            let p = simulate_linearized(&spec, f, &dir, w).map_err(e)?;
            let d = duality_residual(&spec, &[p], std::slice::from_ref(a), std::slice::from_ref(f), &dir).map_err(e)?;
            worst = worst.max(d.residual);
        }
    }

    let spec = ProblemSpec::builtin(BuiltinModel::Linear, 8, 200).map_err(e)?;
    let batch = PathBatch::for_spec(&spec, 22, 10_000).map_err(e)?;
    let star = ControlPath::constant(200, &[0.2, -0.1]).map_err(e)?;
    let dir = wavy(200, 0.4);
    let fw = simulate_batch(&spec, &spec.u0, &star, &batch).map_err(e)?;
    let adj = solve_lsmc_adjoint(&spec, &fw, &star, &batch, &RegressionBasis::new(4)).map_err(e)?;
    let sens = fw
        .iter()
        .zip(batch.paths())
        .map(|(f, w)| simulate_linearized(&spec, f, &dir, w))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let lsmc = duality_residual(&spec, &sens, &adj, &fw, &dir).map_err(e)?;
    Ok((
        worst < 1e-10 && lsmc.residual < 5e-2,
        format!(
            "discrete adjoint worst pathwise residual {worst:.2e} (< 1e-10, 3 models x 100 paths); \
             LSMC batch residual {:.2e} (< 5e-2, LQ, 10^4 paths)",
            lsmc.residual
        ),
    ))
}

fn perturbation_scaling() -> Outcome {
    let eps = [0.2, 0.1, 0.05, 0.025];
    let mut details = Vec::new();
    let mut pass = true;
    for (model, lo, hi) in [(BuiltinModel::Cubic, 1.9, 2.1), (BuiltinModel::Burgers, 1.9, 2.1)] {
        let spec = ProblemSpec::builtin(model, 8, 200).map_err(e)?;
        let batch = PathBatch::for_spec(&spec, 31, 200).map_err(e)?;
        let star = ControlPath::zeros_for(&spec);
        let dir = ControlPath::constant(200, &[1.0, 1.0]).map_err(e)?;
        let r = eps_scaling_report(&spec, &spec.u0, &star, &dir, &eps, &batch).map_err(e)?;
        pass &= (lo..=hi).contains(&r.slope_sq_err);
        details.push(format!("{} slope {:.4} (in [1.9, 2.1])", model.name(), r.slope_sq_err));
    }
    let spec = ProblemSpec::builtin(BuiltinModel::Linear, 8, 200).map_err(e)?;
    let batch = PathBatch::for_spec(&spec, 31, 200).map_err(e)?;
    let dir = ControlPath::constant(200, &[1.0, 1.0]).map_err(e)?;
    let r = eps_scaling_report(&spec, &spec.u0, &ControlPath::zeros_for(&spec), &dir, &eps, &batch).map_err(e)?;
    pass &= (r.slope_sq_err - 2.0).abs() < 1e-6;
    details.push(format!("linear slope {:.9} (2 +- 1e-6)", r.slope_sq_err));
    Ok((pass, details.join("; ")))
}

fn remainder_vanishing() -> Outcome {
    let eps = [0.2, 0.1, 0.05, 0.025, 0.0125];
    // zero equilibrium: u* = 0 on every path, and the odd nonlinearity makes
    // the remainder second order in ε
    let mut cfg = BuiltinModel::Cubic.config(8, 200);
    cfg.space.u0 = Some(vec![0.0; 8]);
    let spec = build(cfg)?;
    let batch = PathBatch::for_spec(&spec, 41, 200).map_err(e)?;
    let dir = ControlPath::constant(200, &[1.0, 1.0]).map_err(e)?;
    let r = eps_scaling_report(&spec, &spec.u0, &ControlPath::zeros_for(&spec), &dir, &eps, &batch).map_err(e)?;
    let decreasing = r.sup_delta_sq.windows(2).all(|w| w[1] < w[0]);
    let ratio = r.sup_delta_sq[4] / r.sup_delta_sq[0];

    // off equilibrium, reported only
    let generic = ProblemSpec::builtin(BuiltinModel::Cubic, 8, 200).map_err(e)?;
    let g = eps_scaling_report(&generic, &generic.u0, &ControlPath::zeros_for(&generic), &dir, &eps, &batch)
        .map_err(e)?;
    let g_decreasing = g.sup_delta_sq.windows(2).all(|w| w[1] < w[0]);
    let g_ratio = g.sup_delta_sq[4] / g.sup_delta_sq[0];

    let lin = ProblemSpec::builtin(BuiltinModel::Linear, 8, 200).map_err(e)?;
    let l = eps_scaling_report(&lin, &lin.u0, &ControlPath::zeros_for(&lin), &dir, &eps, &batch).map_err(e)?;
    let lin_max = l.sup_delta_sq.iter().copied().fold(0.0, f64::max);

    Ok((
        decreasing && ratio < 1e-3 && lin_max < 1e-12,
        format!(
            "cubic at zero equilibrium: strictly decreasing {decreasing}, ratio eps=0.0125/eps=0.2 {ratio:.2e} (< 1e-3); \
             linear max {lin_max:.2e} (< 1e-12); [info] cubic from u0=(1,0.5): decreasing {g_decreasing}, ratio {g_ratio:.2e}"
        ),
    ))
}

fn cost_expansion_check() -> Outcome {
    let eps = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    let mut pass = true;
    let mut details = Vec::new();
    for model in [BuiltinModel::Cubic, BuiltinModel::Linear] {
        let spec = ProblemSpec::builtin(model, 8, 200).map_err(e)?;
        let batch = PathBatch::for_spec(&spec, 51, 200).map_err(e)?;
        let star = ControlPath::constant(200, &[0.3, -0.2]).map_err(e)?;
        let dir = wavy(200, 0.7);
        let r = cost_expansion(&spec, &star, &dir, &eps, &batch).map_err(e)?;
        pass &= (1.9..=2.1).contains(&r.remainder_slope);
        details.push(format!("{} remainder slope {:.4}", model.name(), r.remainder_slope));
    }
    Ok((pass, format!("{} (in [1.9, 2.1])", details.join("; "))))
}

fn clipped_lq() -> Result<ProblemSpec, String> {
    let mut cfg = BuiltinModel::Linear.config(8, 200);
    cfg.controls.lower = vec![-2.0, -2.0];
    cfg.controls.upper = vec![2.0, 2.0];
    build(cfg)
}

fn variational_inequality() -> Outcome {
    let spec = clipped_lq()?;
    let kkt = kkt_control(&spec).map_err(e)?;
    let active = kkt
        .control
        .values()
        .iter()
        .flatten()
        .filter(|x| (x.abs() - 2.0).abs() < 1e-12)
        .count();
    let opts = PgdOptions {
        step0: 5.0,
        max_iters: 500,
        tol_rel: 1e-3,
        n_paths: 256,
        seed: 61,
        ..PgdOptions::default()
    };
    let r = projected_gradient_descent(&spec, &ControlPath::zeros_for(&spec), &opts).map_err(e)?;
    let ratio = r.final_residual / r.initial_residual;
    let dt = spec.dt();
    let dist = r.final_control.add_scaled(-1.0, &kkt.control).map_err(e)?.norm_l2(dt) / kkt.control.norm_l2(dt);
    Ok((
        ratio <= 1e-3 && dist < 0.02 && active > 0,
        format!(
            "residual ratio {ratio:.2e} (<= 1e-3) after {} iterations; relative distance to KKT oracle {dist:.2e} (< 2e-2); \
             {active} active bound entries",
            r.iterates.len() - 1
        ),
    ))
}

fn solver_sanity() -> Outcome {
    // heat decay of the first mode
    let mut cfg = BuiltinModel::Linear.config(1, 2000);
    cfg.space.u0 = Some(vec![1.0]);
    cfg.noise.sigma = Some(vec![0.0]);
    cfg.drift.gain = Some(vec![vec![0.0, 0.0]]);
    let spec = build(cfg)?;
    let w = WienerPath::zeros(2000, spec.m_noise(), spec.dt()).map_err(e)?;
    let fw = simulate_path(&spec, &spec.u0, &ControlPath::zeros_for(&spec), &w).map_err(e)?;
    let decay_err = (fw.terminal().coeffs()[0] - (-std::f64::consts::PI.powi(2) * spec.horizon).exp()).abs();
    let dt_ok = (spec.dt() - 5e-5).abs() < 1e-18;

    // increment variance over 10⁵ samples
    let dt = 5e-5;
    let batch = PathBatch::generate(71, 0, 50, 2000, 1, dt).map_err(e)?;
    let xs: Vec<f64> = batch.paths().iter().flat_map(|p| p.increments().iter().copied()).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let var_rel = (var / dt - 1.0).abs();

    // reruns at several thread counts
    let run = |threads: usize| -> Result<String, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|x| x.to_string())?;
        pool.install(|| {
            let spec = ProblemSpec::builtin(BuiltinModel::Burgers, 8, 200).map_err(e)?;
            let batch = PathBatch::for_spec(&spec, 72, 200).map_err(e)?;
            let c = ControlPath::constant(200, &[0.4, -0.4]).map_err(e)?;
            let cost = estimate_cost(&spec, &spec.u0, &c, &batch).map_err(e)?;
            let g = estimate_gradient(&spec, &c, &batch, AdjointMethod::DiscreteAdjoint).map_err(e)?;
            let l = estimate_gradient(&spec, &c, &batch, AdjointMethod::Lsmc).map_err(e)?;
            let bits = |v: &[f64]| v.iter().map(|x| format!("{:016x}", x.to_bits())).collect::<String>();
            Ok(format!(
                "{}{}{}{}",
                bits(&[cost.mean, cost.std_err]),
                bits(&g.values.concat()),
                bits(&l.values.concat()),
                bits(&g.std_err)
            ))
        })
    };
    let reference = run(1)?;
    let identical = [2, 4, 8].iter().map(|&t| run(t)).collect::<Result<Vec<_>, _>>()?.iter().all(|r| *r == reference)
        && run(1)? == reference;

    Ok((
        dt_ok && decay_err < 1e-3 && var_rel < 0.05 && identical,
        format!(
            "heat decay error {decay_err:.2e} (< 1e-3, dt 5e-5); increment variance off by {:.2}% (< 5%, 10^5 samples); \
             bit-identical at 1/2/4/8 threads: {identical}",
            100.0 * var_rel
        ),
    ))
}

fn assumption_margins() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for model in BuiltinModel::ALL {
        let spec = ProblemSpec::builtin(model, 8, 200).map_err(e)?;
        let r = check_assumptions(&spec, 10_000, 2.0, 81).map_err(e)?;
        let ok = r.a3_coercivity_margin >= 0.0 && r.a2_violation_count == 0 && r.a2_worst_margin >= 0.0;
        pass &= ok;
        details.push(format!(
            "{}: A3 {:.3e}, A2 worst {:.3e} ({} violations)",
            model.name(),
            r.a3_coercivity_margin,
            r.a2_worst_margin,
            r.a2_violation_count
        ));
    }
    // integrability condition: (K − 2θ)² − 48γc_HV², evaluated here from the spec
    let mut signs = Vec::new();
    for (sigma, expect) in [(0.01, true), (4.0, false)] {
        let mut cfg = BuiltinModel::Linear.config(8, 200);
        cfg.noise.sigma = Some(vec![sigma; 8]);
        let spec = build(cfg)?;
        let r = check_assumptions(&spec, 100, 1.0, 82).map_err(e)?;
        let gamma: f64 = spec.noise.sigma.iter().map(|s| s * s).sum();
        let c_hv = 1.0 / std::f64::consts::PI.powi(2);
        let value = (spec.drift.constants.k - 2.0 * spec.a_op.theta).powi(2) - 48.0 * gamma * c_hv * c_hv;
        let ok = r.lemma2_satisfied == expect && (value > 0.0) == expect && (r.lemma2_value - value).abs() < 1e-9 * value.abs();
        pass &= ok;
        signs.push(format!("sigma {sigma}: value {value:.3e}, reported satisfied {}", r.lemma2_satisfied));
    }
    details.push(format!("integrability sign {}", signs.join(", ")));
    Ok((pass, details.join("; ")))
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn main() {
    let mut tally = Tally { failed: 0 };
    let criteria: [Criterion; 8] = [
        ("1", "adjoint exactness", adjoint_exactness),
        ("2", "duality identity", duality),
        ("3", "perturbation scaling", perturbation_scaling),
        ("4", "remainder vanishing", remainder_vanishing),
        ("5", "cost expansion", cost_expansion_check),
        ("6", "variational inequality", variational_inequality),
        ("7", "solver sanity", solver_sanity),
        ("8", "assumption margins", assumption_margins),
    ];
    for (id, title, f) in criteria {
        let start = Instant::now();
        tally.record(id, title, start, f());
    }
    println!("{} of {} criteria passed", criteria.len() - tally.failed, criteria.len());
    if tally.failed > 0 {
        std::process::exit(1);
    }
}
