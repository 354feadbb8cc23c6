use std::path::Path;
use std::sync::Arc;

use merton_impact::corrector1d::Corrector1D;
use merton_impact::corrector_md::{first_corrector_residual, full_corrector_residual, FactorConstants};
use merton_impact::market_sim::{
    candidate_rate, candidate_rate_dual, run_paths, trace_path, write_trace_csv, ExecMode, Model, SimResult,
};
use merton_impact::second_corrector::{feynman_kac_check, FeynmanKac, SecondCorrector};
use merton_impact::validator::{convergence_study, expansion_report};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{cache_key, load_or_solve, CacheStatus};
use crate::config::{DerivedConstants, RunConfig};
use crate::CliError;

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(dir.join(name), text + "\n").map_err(runtime)
}

/// Loads the corrector through the cache and builds the full model.
pub fn build_model(cfg: &RunConfig) -> Result<(Model, CacheStatus), CliError> {
    let (c1d, status) = load_or_solve(&cfg.cache_dir, cfg.investor.m, &cfg.corrector)?;
    match status {
        CacheStatus::Hit => log::info!("corrector for m = {} loaded from cache", cfg.investor.m),
        CacheStatus::Miss | CacheStatus::Corrupted => log::info!("corrector for m = {} solved", cfg.investor.m),
    }
    let model = Model::new(&cfg.market()?, &cfg.investor, Arc::new(c1d)).map_err(CliError::from_core)?;
    Ok((model, status))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub cache_key: String,
    pub m: f64,
    pub x_max: f64,
    pub derived: DerivedConstants,
    pub factor: FactorConstants,
}

pub fn solve_corrector(cfg: &RunConfig) -> Result<bool, CliError> {
    let (model, status) = build_model(cfg)?;
    let report = ConstantsReport {
        cache_key: cache_key(cfg.investor.m, &cfg.corrector),
        m: cfg.investor.m,
        x_max: model.cmd.c1d.x_max(),
        derived: cfg.derived()?,
        factor: model.cmd.constants(),
    };
    println!("cache: {}", if status == CacheStatus::Hit { "hit" } else { "solved" });
    println!("lambda_m = {:.12}", report.factor.lambda_m);
    println!("gamma    = {:?}", report.factor.gamma);
    println!("beta     = {:?}", report.factor.beta);
    println!("lambda   = {:.12e}", report.factor.lambda);
    write_json(&cfg.output_dir, "constants.json", &report)?;
    Ok(true)
}

/// One named check with its measured value and tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, tol: f64) -> Self {
        Self { name: name.into(), value, tol, pass: value <= tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub feynman_kac: Option<FeynmanKac>,
    pub pass: bool,
}

/// Samples `(t, w, s)` and an `X` inside the solved box, returning the
/// matching share displacement `ξ`.
fn sample_state(rng: &mut ChaCha8Rng, model: &Model) -> (f64, f64, DVector<f64>, DVector<f64>) {
    let d = model.dim();
    let cmd = &model.cmd;
    let b = cmd.grid_box();
    let t = rng.random_range(0.0..0.99 * model.horizon());
    let w: f64 = rng.random_range(0.5..2.0);
    let s = DVector::from_fn(d, |_, _| rng.random_range(0.5..2.0));
    let x = DVector::from_fn(d, |_, _| rng.random_range(-b..b));
    let xi = ((&cmd.s_half_inv * x) * w.powf(1.0 + cmd.m_star)).component_div(&s);
    (t, w, s, xi)
}

fn corrector_checks(c: &Corrector1D) -> Vec<Check> {
    let d2 = c.verify_second_derivative_bound();
    vec![
        Check::at_most("corrector1d.ode_residual", c.max_ode_residual(), 1e-8),
        Check::at_most("corrector1d.slope_ratio_error", c.slope_ratio_error().abs(), 5e-3),
        Check::at_most("corrector1d.value_ratio_error", c.value_ratio_error().abs(), 0.02),
        Check { name: "corrector1d.second_derivative_tail_ratio".into(), value: d2.tail_ratio, tol: 0.1, pass: d2.passed },
    ]
}

pub fn verify_model(model: &Model, cfg: &RunConfig) -> Result<VerifyReport, CliError> {
    let v = &cfg.verify;
    let mut rng = ChaCha8Rng::seed_from_u64(v.seed);
    let mut checks = corrector_checks(&model.cmd.c1d);
    let d = model.dim();
    let cmd = &model.cmd;

    let b = cmd.grid_box();
    let xs: Vec<DVector<f64>> = (0..1000).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-b..b))).collect();
    checks.push(Check::at_most("corrector_md.first_residual", first_corrector_residual(cmd, &xs), 1e-5));

    let mut full = 0.0f64;
    for _ in 0..100 {
        let (t, w, s, xi) = sample_state(&mut rng, model);
        full = full.max(full_corrector_residual(cmd, &model.merton, t, w, &s, &[xi]).map_err(CliError::from_core)?);
    }
    checks.push(Check::at_most("corrector_md.full_relative_residual", full, 1e-4));

    let im = &model.impact;
    let mut gap = 0.0f64;
    for _ in 0..10_000 {
        let s = DVector::from_fn(d, |_, _| rng.random_range(0.2..3.0));
        let x = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        let phi = im.phi(&s, &x).map_err(CliError::from_core)?;
        let th = im.phi_grad(&s, &x).map_err(CliError::from_core)?;
        let cost = im.execution_cost(&s, &th).map_err(CliError::from_core)?;
        gap = gap.max((phi + cost - x.dot(&th)).abs() / (1.0 + phi.abs()));
    }
    checks.push(Check::at_most("impact.fenchel_young_gap", gap, 1e-8));

    let mut rate_gap = 0.0f64;
    for _ in 0..100 {
        let (t, w, s, xi) = sample_state(&mut rng, model);
        let eps: f64 = rng.random_range(0.01..0.2);
        let h0 = merton_impact::merton::h0_shares(t, w, &s, &model.merton.pi).map_err(CliError::from_core)?;
        let h = h0 + xi * eps.powf(model.m_star());
        let direct = candidate_rate(w, &s, &h, eps, &model.merton.pi, cmd).map_err(CliError::from_core)?;
        let dual = candidate_rate_dual(t, w, &s, &h, eps, model).map_err(CliError::from_core)?;
        rate_gap = rate_gap.max((&direct - &dual).amax() / (1.0 + direct.amax()));
    }
    checks.push(Check::at_most("market_sim.rate_forms_gap", rate_gap, 1e-10));

    let sc = SecondCorrector::new(&model.merton, cmd.lambda);
    let horizon = model.horizon();
    let grid: Vec<f64> = (0..=1000).map(|k| horizon * k as f64 / 1000.0).collect();
    let ode = sc.bar_g_ode(&grid).map_err(CliError::from_core)?;
    let mut bar_g = 0.0f64;
    for (t, y) in grid.iter().zip(&ode) {
        bar_g = bar_g.max((sc.bar_g_closed_form(*t).map_err(CliError::from_core)? - y).abs());
    }
    checks.push(Check::at_most("second_corrector.closed_form_vs_ode", bar_g, 1e-7));
    let at_t = sc.bar_g_closed_form(horizon).map_err(CliError::from_core)?.abs();
    checks.push(Check::at_most("second_corrector.terminal_value", at_t, 0.0));

    let feynman_kac = if v.fk_paths > 0 {
        let fk = feynman_kac_check(&sc, &model.merton, 0.0, 1.0, v.fk_steps, v.fk_paths, v.seed, ExecMode::default())
            .map_err(CliError::from_core)?;
        checks.push(Check::at_most("second_corrector.feynman_kac_z", fk.z_score, 3.0));
        Some(fk)
    } else {
        None
    };
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport { checks, feynman_kac, pass })
}

pub fn verify(cfg: &RunConfig) -> Result<bool, CliError> {
    let (mut model, _) = build_model(cfg)?;
    if cfg.verify.lambda_scale != 1.0 {
        log::warn!("ergodic constant scaled by {}", cfg.verify.lambda_scale);
        model.cmd.lambda_m *= cfg.verify.lambda_scale;
        model.cmd.lambda *= cfg.verify.lambda_scale;
    }
    let report = verify_model(&model, cfg)?;
    for c in &report.checks {
        println!("[{}] {:<45} {:.3e} (tol {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tol);
    }
    write_json(&cfg.output_dir, "verify.json", &report)?;
    Ok(report.pass)
}

/// Aggregates of a simulation run; per-path records go to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub epsilon: f64,
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub mean_utility: f64,
    pub std_err: f64,
    pub v0: f64,
    pub loss: f64,
    pub paired_loss: f64,
    pub paired_std_err: f64,
    pub frac_stopped_early: f64,
    /// Candidate utility does not exceed the frictionless value beyond
    /// three standard errors.
    pub pass: bool,
}

fn write_records(dir: &Path, res: &SimResult) -> Result<(), CliError> {
    let mut out = String::from(
        "index,utility,frictionless_utility,terminal_wealth,stopped_reason,liquidation_time,max_abs_x,max_weight_dev,max_wealth_dev\n",
    );
    for r in &res.records {
        let reason = serde_json::to_value(r.stopped_reason).map_err(runtime)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.index,
            r.utility,
            r.frictionless_utility,
            r.terminal_wealth,
            reason.as_str().unwrap_or_default(),
            r.liquidation_time.map(|t| t.to_string()).unwrap_or_default(),
            r.max_abs_x,
            r.max_weight_dev,
            r.max_wealth_dev
        ));
    }
    std::fs::write(dir.join("paths.csv"), out).map_err(runtime)
}

/// Number of paths traced with `--trace`.
pub const TRACED_PATHS: usize = 4;

pub fn simulate(cfg: &RunConfig, trace: bool) -> Result<bool, CliError> {
    let (model, _) = build_model(cfg)?;
    let res = run_paths(&model, &cfg.sim, ExecMode::default()).map_err(CliError::from_core)?;
    let v0 = model.merton.value(cfg.sim.t0, cfg.sim.w0);
    let report = SimulateReport {
        epsilon: res.epsilon,
        seed: cfg.sim.seed,
        n_paths: res.n_paths,
        n_steps: res.n_steps,
        dt: res.dt,
        mean_utility: res.mean_utility,
        std_err: res.std_err,
        v0,
        loss: v0 - res.mean_utility,
        paired_loss: res.paired_loss,
        paired_std_err: res.paired_std_err,
        frac_stopped_early: res.frac_stopped_early,
        pass: res.mean_utility <= v0 + 3.0 * res.std_err,
    };
    let dir = &cfg.output_dir;
    write_json(dir, "simulate.json", &report)?;
    write_records(dir, &res)?;
    if trace {
        for i in 0..TRACED_PATHS.min(cfg.sim.n_paths) {
            let (_, rows) = trace_path(&model, &cfg.sim, i).map_err(CliError::from_core)?;
            let f = std::fs::File::create(dir.join(format!("trace_{i:04}.csv"))).map_err(runtime)?;
            write_trace_csv(&rows, f).map_err(CliError::from_core)?;
        }
    }
    println!(
        "eps = {}  mean utility = {:.8} ± {:.2e}  V0 = {:.8}  stopped early = {:.3}",
        report.epsilon, report.mean_utility, report.std_err, v0, report.frac_stopped_early
    );
    Ok(report.pass)
}

pub fn converge(cfg: &RunConfig) -> Result<bool, CliError> {
    let (model, _) = build_model(cfg)?;
    let rep = convergence_study(&model, &cfg.sim, &cfg.validator.eps_grid, &cfg.validator.study(), ExecMode::default())
        .map_err(CliError::from_core)?;
    for w in &rep.warnings {
        log::warn!("{w}");
    }
    for r in &rep.per_eps {
        println!(
            "eps = {:<8} loss_ratio = {:>10.4} ± {:.4}  paired = {:>10.4}  stopped = {:.3}",
            r.eps, r.loss_ratio, r.std_err_ratio, r.paired_ratio, r.frac_stopped
        );
    }
    println!("pass = {} (band {}, trend {})", rep.pass, rep.smallest_in_band, rep.trend_ok);
    expansion_report(&rep, &cfg.output_dir).map_err(CliError::from_core)?;
    Ok(rep.pass)
}
