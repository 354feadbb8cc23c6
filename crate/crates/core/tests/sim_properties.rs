//! Path-level properties of the candidate strategy on the d=2 benchmark.

use std::sync::{Arc, OnceLock};

use merton_impact::corrector1d::shoot_lambda;
use merton_impact::market_sim::{run_paths, trace_path, ExecMode, Model, SimConfig, SimResult};
use merton_impact::merton::{utility, InvestorImpactParams, MarketParams};
use merton_impact::validator::{convergence_study, StudyConfig};

fn model() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(|| {
        let market = MarketParams::new(vec![0.04, 0.05], vec![vec![0.30, 0.00], vec![0.09, 0.28]], 0.02).unwrap();
        let inv = InvestorImpactParams::new(0.5, 1.0, 1.0, 3.0).unwrap();
        Model::new(&market, &inv, Arc::new(shoot_lambda(3.0, 10.0, 1e-10).unwrap())).unwrap()
    })
}

const GRID: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

fn sweep(n_paths: usize) -> &'static Vec<SimResult> {
    static S: OnceLock<Vec<SimResult>> = OnceLock::new();
    S.get_or_init(|| {
        GRID.iter()
            .map(|&eps| {
                let cfg = SimConfig { epsilon: eps, n_paths, seed: 11, ..Default::default() };
                run_paths(model(), &cfg, ExecMode::default()).unwrap()
            })
            .collect()
    })
}

#[test]
fn friction_cannot_help() {
    let v0 = model().merton.value(0.0, 1.0);
    for r in sweep(2000) {
        assert!(r.mean_utility <= v0 + 3.0 * r.std_err, "eps {}: {} > {v0}", r.epsilon, r.mean_utility);
    }
}

#[test]
fn utility_accumulator_matches_trace() {
    let m = model();
    let cfg = SimConfig { epsilon: 0.1, n_paths: 1, seed: 3, ..Default::default() };
    let (rec, rows) = trace_path(m, &cfg, 0).unwrap();
    let r_a = m.merton.inv.risk_aversion;
    let dt = rows[1].t - rows[0].t;
    let u: Vec<f64> = rows.iter().map(|r| utility(r.c, r_a)).collect();
    let mut acc: f64 = u.windows(2).map(|p| 0.5 * (p[0] + p[1]) * dt).sum();
    // closing half step to T at the terminal consumption rate
    let last = rows.last().unwrap();
    let c_t = if rec.stopped_reason == merton_impact::market_sim::StopReason::WealthFloor {
        0.0
    } else {
        m.merton.consumption(1.0, rec.terminal_wealth)
    };
    acc += 0.5 * (utility(last.c, r_a) + utility(c_t, r_a)) * dt;
    let lump = utility(rec.terminal_wealth, r_a);
    assert!((rec.utility - (acc + lump)).abs() <= 1e-9 * rec.utility.abs(), "{} vs {}", rec.utility, acc + lump);
}

#[test]
fn step_halving_is_stable() {
    let m = model();
    let s = StudyConfig::default();
    let base = SimConfig { n_paths: 2000, seed: 21, ..Default::default() };
    let coarse = convergence_study(m, &base, &[0.05], &s, ExecMode::default()).unwrap();
    let fine = convergence_study(m, &SimConfig { refine: 1, ..base }, &[0.05], &s, ExecMode::default()).unwrap();
    let (a, b) = (&coarse.per_eps[0], &fine.per_eps[0]);
    println!("loss_ratio {} -> {} (se {})", a.loss_ratio, b.loss_ratio, a.std_err_ratio);
    assert!((a.loss_ratio - b.loss_ratio).abs() < a.std_err_ratio);
}

#[test]
fn common_random_numbers_reduce_variance() {
    let base = SimConfig { n_paths: 2000, seed: 5, ..Default::default() };
    let rep = convergence_study(model(), &base, &GRID, &StudyConfig::default(), ExecMode::default()).unwrap();
    for p in &rep.pairing {
        println!("{} / {}: crn {:.3e} independent {:.3e}", p.eps_hi, p.eps_lo, p.crn_se, p.independent_se);
        assert!(p.crn_se < p.independent_se);
    }
}

#[test]
fn liquidation_leaves_no_shares() {
    let m = model();
    for seed in 0..5 {
        let cfg = SimConfig { epsilon: 0.1, n_paths: 1, seed, ..Default::default() };
        let (rec, rows) = trace_path(m, &cfg, 0).unwrap();
        assert!(rec.liquidation_time.is_some());
        let end = rows.last().unwrap();
        let held: f64 = end.h.iter().zip(&end.theta).map(|(h, th)| h + th * (1.0 / rows.len() as f64)).sum();
        assert!(held.abs() < 1e-9, "{held}");
    }
}

#[test]
fn early_stops_do_not_grow_as_eps_shrinks() {
    let r = sweep(2000);
    for p in r.windows(2) {
        assert!(p[1].frac_stopped_early <= p[0].frac_stopped_early + 0.02);
    }
}

#[test]
fn displacement_does_not_grow_as_eps_shrinks() {
    let r = sweep(2000);
    for p in r.windows(2) {
        println!("eps {} -> {}: median max|X| {:.4} -> {:.4}", p[0].epsilon, p[1].epsilon, p[0].median_max_abs_x, p[1].median_max_abs_x);
    }
    for p in r.windows(2) {
        assert!(p[1].median_max_abs_x <= 1.1 * p[0].median_max_abs_x);
    }
}

#[test]
fn wealth_gap_shrinks_with_eps() {
    let r = sweep(2000);
    for p in r.windows(2) {
        println!("eps {} -> {}: median max|W/W0-1| {:.4} -> {:.4}", p[0].epsilon, p[1].epsilon, p[0].median_max_wealth_dev, p[1].median_max_wealth_dev);
    }
    for p in r.windows(2) {
        assert!(p[1].median_max_wealth_dev <= p[0].median_max_wealth_dev);
    }
}
