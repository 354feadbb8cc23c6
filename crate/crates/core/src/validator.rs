//! Convergence study of the renormalized utility loss
//! `(V⁰(t₀,w₀) − E[utility under the candidate]) / (ε^{2m*} u(t₀,w₀))`
//! over a decreasing ε-grid, with common random numbers across ε.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::market_sim::{run_paths, ExecMode, Model, SimConfig, SimResult};
use crate::merton::{utility, InvestorImpactParams};
use crate::second_corrector::SecondCorrector;

/// Band-and-trend tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub ratio_tol: f64,
    pub slack_tol: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { ratio_tol: 0.2, slack_tol: 0.1 }
    }
}

/// `λ(1−R) w^{2m*} ḡ(t) U(w)`; equal to `u(t,w)` since `U(w)(1−R) = w^{1−R}`.
pub fn theoretical_correction(t: f64, w: f64, sc: &SecondCorrector, inv: &InvestorImpactParams) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::NonPositiveWealth(w));
    }
    let r_a = inv.risk_aversion;
    let bar_g = sc.bar_g_closed_form(t)?;
    let value = sc.lambda * (1.0 - r_a) * w.powf(2.0 * inv.m_star()) * bar_g * utility(w, r_a);
    let u = sc.u_value(t, w)?;
    assert!(
        (value - u).abs() <= 1e-12 * u.abs().max(f64::MIN_POSITIVE),
        "correction {value} disagrees with u = {u}"
    );
    Ok(value)
}

/// One ε of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsRow {
    pub eps: f64,
    pub n_steps: usize,
    pub mean_utility: f64,
    pub std_err: f64,
    pub loss: f64,
    pub loss_ratio: f64,
    pub std_err_ratio: f64,
    pub frac_stopped: f64,
    /// Mean of the per-path difference to the coupled frictionless utility.
    pub paired_loss: f64,
    pub paired_ratio: f64,
    pub paired_std_err_ratio: f64,
    pub median_max_abs_x: f64,
    pub median_max_wealth_dev: f64,
}

/// Standard error of the utility difference between adjacent ε, with shared
/// noise and as if the runs were independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingRow {
    pub eps_hi: f64,
    pub eps_lo: f64,
    pub crn_se: f64,
    pub independent_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config_hash: String,
    pub eps_grid: Vec<f64>,
    pub v0: f64,
    pub u: f64,
    pub per_eps: Vec<EpsRow>,
    pub pass: bool,
    pub smallest_in_band: bool,
    pub trend_ok: bool,
    /// `frac_stopped` nonincreasing as ε decreases.
    pub stop_trend_ok: bool,
    /// Least-squares slope of `ln|loss_ratio − 1|` against `ln ε`.
    pub fitted_remainder_slope: Option<f64>,
    pub pairing: Vec<PairingRow>,
    pub warnings: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of everything that determines the study's numbers.
pub fn study_hash(model: &Model, base: &SimConfig, eps_grid: &[f64], study: &StudyConfig) -> Result<String> {
    let market = &model.merton.market;
    let sigma = market.sigma();
    let rows: Vec<Vec<f64>> = (0..sigma.nrows()).map(|i| sigma.row(i).iter().copied().collect()).collect();
    let c1d = &model.cmd.c1d;
    let payload = serde_json::json!({
        "market": { "mu": market.mu().as_slice(), "sigma": rows, "r": market.rate() },
        "investor": model.merton.inv,
        "lambda_m": c1d.lambda_m,
        "x_max": c1d.x_max(),
        "sim": base,
        "eps_grid": eps_grid,
        "study": study,
    });
    let digest = Sha256::digest(serde_json::to_vec(&payload)?);
    Ok(hex(&digest))
}

fn validate_grid(eps_grid: &[f64]) -> Result<()> {
    if eps_grid.is_empty() {
        return Err(Error::InvalidStudy("empty ε-grid".into()));
    }
    if eps_grid.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::InvalidStudy("ε-grid entries must be positive".into()));
    }
    if eps_grid.windows(2).any(|p| p[1] >= p[0]) {
        return Err(Error::InvalidStudy("ε-grid must be strictly decreasing".into()));
    }
    Ok(())
}

fn slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn pairing(a: &SimResult, b: &SimResult) -> PairingRow {
    let n = a.records.len().min(b.records.len());
    let diffs: Vec<f64> = a.records.iter().zip(&b.records).map(|(x, y)| x.utility - y.utility).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    PairingRow {
        eps_hi: a.epsilon,
        eps_lo: b.epsilon,
        crn_se: (var / n as f64).sqrt(),
        independent_se: a.std_err.hypot(b.std_err),
    }
}

/// Band test on the smallest ε plus the trend test on `|loss_ratio − 1|`.
pub fn assess(rows: &[EpsRow], study: &StudyConfig) -> (bool, bool, bool) {
    let Some(last) = rows.last() else {
        return (false, false, false);
    };
    let dev = (last.loss_ratio - 1.0).abs();
    let in_band = dev <= study.ratio_tol || dev <= 3.0 * last.std_err_ratio;
    let trend = rows
        .windows(2)
        .all(|p| (p[1].loss_ratio - 1.0).abs() <= (p[0].loss_ratio - 1.0).abs() + study.slack_tol);
    let stops = rows.windows(2).all(|p| p[1].frac_stopped <= p[0].frac_stopped);
    (in_band, trend, stops)
}

/// Runs `run_paths` for each ε of a decreasing grid. All runs draw their
/// Brownian increments from the finest grid of the study.
pub fn convergence_study(
    model: &Model,
    base: &SimConfig,
    eps_grid: &[f64],
    study: &StudyConfig,
    mode: ExecMode,
) -> Result<ConvergenceReport> {
    validate_grid(eps_grid)?;
    let horizon = model.horizon();
    if !(base.t0 < horizon) {
        return Err(Error::InvalidStudy(format!("t0 = {} leaves no time before T = {horizon}", base.t0)));
    }
    let sc = SecondCorrector::new(&model.merton, model.cmd.lambda);
    let u = sc.u_value(base.t0, base.w0)?;
    if !(u > 0.0) {
        return Err(Error::InvalidStudy(format!("degenerate correction u = {u}")));
    }
    let v0 = model.merton.value(base.t0, base.w0);
    let ms = model.m_star();

    let finest = eps_grid
        .iter()
        .map(|&e| SimConfig { epsilon: e, ..base.clone() }.step_level(ms, horizon))
        .max()
        .unwrap_or(0)
        .max(base.noise_level.unwrap_or(0));

    let mut rows = Vec::with_capacity(eps_grid.len());
    let mut results: Vec<SimResult> = Vec::with_capacity(eps_grid.len());
    let mut warnings = Vec::new();
    for &eps in eps_grid {
        let cfg = SimConfig { epsilon: eps, noise_level: Some(finest), ..base.clone() };
        let res = run_paths(model, &cfg, mode)?;
        let scale = eps.powf(2.0 * ms) * u;
        let loss = v0 - res.mean_utility;
        let row = EpsRow {
            eps,
            n_steps: res.n_steps,
            mean_utility: res.mean_utility,
            std_err: res.std_err,
            loss,
            loss_ratio: loss / scale,
            std_err_ratio: res.std_err / scale,
            frac_stopped: res.frac_stopped_early,
            paired_loss: res.paired_loss,
            paired_ratio: res.paired_loss / scale,
            paired_std_err_ratio: res.paired_std_err / scale,
            median_max_abs_x: res.median_max_abs_x,
            median_max_wealth_dev: res.median_max_wealth_dev,
        };
        if row.std_err_ratio > study.ratio_tol / 2.0 {
            warnings.push(format!(
                "insufficient paths at eps = {eps}: std_err_ratio {:.4} exceeds {:.4}",
                row.std_err_ratio,
                study.ratio_tol / 2.0
            ));
        }
        if row.loss_ratio < -3.0 * row.std_err_ratio {
            warnings.push(format!("negative loss beyond noise at eps = {eps}: ratio {:.4}", row.loss_ratio));
        }
        rows.push(row);
        results.push(res);
    }

    let pairing = results.windows(2).map(|p| pairing(&p[0], &p[1])).collect();
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.loss_ratio != 1.0 && r.loss_ratio.is_finite())
        .map(|r| (r.eps.ln(), (r.loss_ratio - 1.0).abs().ln()))
        .collect();
    let (smallest_in_band, trend_ok, stop_trend_ok) = assess(&rows, study);
    Ok(ConvergenceReport {
        config_hash: study_hash(model, base, eps_grid, study)?,
        eps_grid: eps_grid.to_vec(),
        v0,
        u,
        per_eps: rows,
        pass: smallest_in_band && trend_ok,
        smallest_in_band,
        trend_ok,
        stop_trend_ok,
        fitted_remainder_slope: slope(&pts),
        pairing,
        warnings,
    })
}

/// CSV header of the expansion table.
pub const CSV_COLUMNS: [&str; 4] = ["eps", "loss", "loss_ratio", "std_err"];

fn non_empty(report: &ConvergenceReport) -> Result<()> {
    if report.per_eps.is_empty() || report.eps_grid.is_empty() {
        return Err(Error::InvalidStudy("report has an empty ε-grid".into()));
    }
    Ok(())
}

pub fn render_json(report: &ConvergenceReport) -> Result<String> {
    non_empty(report)?;
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn parse_json(text: &str) -> Result<ConvergenceReport> {
    let report: ConvergenceReport = serde_json::from_str(text)?;
    non_empty(&report)?;
    Ok(report)
}

pub fn render_csv(report: &ConvergenceReport) -> Result<String> {
    non_empty(report)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(CSV_COLUMNS)?;
    for r in &report.per_eps {
        wtr.write_record([r.eps, r.loss, r.loss_ratio, r.std_err].map(|v| v.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Writes `expansion.json` and `expansion.csv` into `dir`.
pub fn expansion_report(report: &ConvergenceReport, dir: &Path) -> Result<()> {
    let json = render_json(report)?;
    let csv = render_csv(report)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("expansion.json"), json)?;
    std::fs::write(dir.join("expansion.csv"), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector1d::shoot_lambda;
    use crate::merton::MarketParams;
    use std::sync::{Arc, OnceLock};

    fn model() -> &'static Model {
        static M: OnceLock<Model> = OnceLock::new();
        M.get_or_init(|| {
            let market = MarketParams::new(vec![0.04, 0.05], vec![vec![0.30, 0.0], vec![0.09, 0.28]], 0.02).unwrap();
            let inv = InvestorImpactParams::new(0.5, 1.0, 1.0, 3.0).unwrap();
            Model::new(&market, &inv, Arc::new(shoot_lambda(3.0, 10.0, 1e-10).unwrap())).unwrap()
        })
    }

    fn row(eps: f64, ratio: f64, se: f64, stopped: f64) -> EpsRow {
        EpsRow {
            eps,
            n_steps: 1,
            mean_utility: 0.0,
            std_err: se,
            loss: ratio,
            loss_ratio: ratio,
            std_err_ratio: se,
            frac_stopped: stopped,
            paired_loss: 0.0,
            paired_ratio: 0.0,
            paired_std_err_ratio: 0.0,
            median_max_abs_x: 0.0,
            median_max_wealth_dev: 0.0,
        }
    }

    fn small_report() -> ConvergenceReport {
        ConvergenceReport {
            config_hash: "abc".into(),
            eps_grid: vec![0.2, 0.1],
            v0: 2.5,
            u: 1e-3,
            per_eps: vec![row(0.2, 1.3, 0.05, 0.2), row(0.1, 1.1, 0.04, 0.1)],
            pass: true,
            smallest_in_band: true,
            trend_ok: true,
            stop_trend_ok: true,
            fitted_remainder_slope: Some(1.58),
            pairing: vec![],
            warnings: vec!["w".into()],
        }
    }

    #[test]
    fn correction_equals_u() {
        let m = model();
        let sc = SecondCorrector::new(&m.merton, m.cmd.lambda);
        for &(t, w) in &[(0.0, 1.0), (0.3, 2.5), (0.9, 0.1)] {
            let c = theoretical_correction(t, w, &sc, &m.merton.inv).unwrap();
            let u = sc.u_value(t, w).unwrap();
            assert!((c - u).abs() <= 1e-12 * u);
        }
    }

    #[test]
    fn correction_vanishes_at_horizon() {
        let m = model();
        let sc = SecondCorrector::new(&m.merton, m.cmd.lambda);
        assert_eq!(theoretical_correction(1.0, 1.7, &sc, &m.merton.inv).unwrap(), 0.0);
    }

    #[test]
    fn correction_wealth_scaling() {
        let m = model();
        let inv = &m.merton.inv;
        let sc = SecondCorrector::new(&m.merton, m.cmd.lambda);
        let expo = 1.0 - inv.risk_aversion + 2.0 * inv.m_star();
        let a = theoretical_correction(0.2, 1.0, &sc, inv).unwrap();
        let b = theoretical_correction(0.2, 3.0, &sc, inv).unwrap();
        assert!((b / a - 3f64.powf(expo)).abs() < 1e-12);
    }

    #[test]
    fn correction_rejects_nonpositive_wealth() {
        let m = model();
        let sc = SecondCorrector::new(&m.merton, m.cmd.lambda);
        assert!(theoretical_correction(0.0, 0.0, &sc, &m.merton.inv).is_err());
    }

    #[test]
    fn assess_band_and_trend() {
        let s = StudyConfig::default();
        assert_eq!(assess(&[row(0.2, 1.3, 0.01, 0.3), row(0.1, 1.1, 0.01, 0.2)], &s), (true, true, true));
        // outside the band but within three standard errors
        assert!(assess(&[row(0.1, 1.5, 0.2, 0.0)], &s).0);
        assert!(!assess(&[row(0.1, 1.5, 0.1, 0.0)], &s).0);
        // deviation grows by more than the slack
        let (_, trend, stops) = assess(&[row(0.2, 1.05, 0.01, 0.1), row(0.1, 1.18, 0.01, 0.2)], &s);
        assert!(!trend);
        assert!(!stops);
        // growth within the slack is tolerated
        assert!(assess(&[row(0.2, 1.05, 0.01, 0.1), row(0.1, 0.9, 0.01, 0.1)], &s).1);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [0.2f64, 0.1, 0.05].iter().map(|e| (e.ln(), (0.7 * e.powf(0.57)).ln())).collect();
        assert!((slope(&pts).unwrap() - 0.57).abs() < 1e-12);
        assert_eq!(slope(&pts[..1]), None);
    }

    #[test]
    fn grid_must_decrease() {
        let m = model();
        let base = SimConfig { n_paths: 2, ..Default::default() };
        let s = StudyConfig::default();
        for grid in [vec![], vec![0.1, 0.2], vec![0.1, 0.1], vec![0.1, -0.05]] {
            let err = convergence_study(m, &base, &grid, &s, ExecMode::Sequential).unwrap_err();
            assert!(matches!(err, Error::InvalidStudy(_)), "{grid:?}: {err}");
        }
    }

    #[test]
    fn start_at_horizon_rejected() {
        let m = model();
        let base = SimConfig { n_paths: 2, t0: 1.0, ..Default::default() };
        let err = convergence_study(m, &base, &[0.1], &StudyConfig::default(), ExecMode::Sequential).unwrap_err();
        assert!(matches!(err, Error::InvalidStudy(_)));
    }

    #[test]
    fn small_study_is_reproducible_and_well_formed() {
        let m = model();
        let base = SimConfig { n_paths: 16, n_steps_base: 100, ..Default::default() };
        let s = StudyConfig::default();
        let a = convergence_study(m, &base, &[0.2, 0.1], &s, ExecMode::Sequential).unwrap();
        let b = convergence_study(m, &base, &[0.2, 0.1], &s, ExecMode::Sequential).unwrap();
        assert_eq!(render_json(&a).unwrap(), render_json(&b).unwrap());
        assert_eq!(a.per_eps.len(), 2);
        assert_eq!(a.pairing.len(), 1);
        assert_eq!(a.config_hash.len(), 64);
        assert!((a.v0 - m.merton.value(0.0, 1.0)).abs() < 1e-15);
        // with 16 paths the noise warning must fire
        assert!(a.warnings.iter().any(|w| w.contains("insufficient paths")));
        let other = convergence_study(m, &SimConfig { seed: 7, ..base }, &[0.2, 0.1], &s, ExecMode::Sequential).unwrap();
        assert_ne!(a.config_hash, other.config_hash);
    }

    #[test]
    fn json_round_trip() {
        let r = small_report();
        assert_eq!(parse_json(&render_json(&r).unwrap()).unwrap(), r);
    }

    #[test]
    fn csv_schema() {
        let text = render_csv(&small_report()).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, CSV_COLUMNS);
        let rows: Vec<Vec<f64>> =
            rdr.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows, vec![vec![0.2, 1.3, 1.3, 0.05], vec![0.1, 1.1, 1.1, 0.04]]);
    }

    #[test]
    fn empty_report_rejected() {
        let mut r = small_report();
        r.per_eps.clear();
        r.eps_grid.clear();
        assert!(render_json(&r).is_err());
        assert!(render_csv(&r).is_err());
        let dir = std::env::temp_dir().join("validator-empty-report");
        assert!(expansion_report(&r, &dir).is_err());
    }

    #[test]
    fn report_files_written() {
        let dir = std::env::temp_dir().join(format!("validator-report-{}", std::process::id()));
        expansion_report(&small_report(), &dir).unwrap();
        let json = std::fs::read_to_string(dir.join("expansion.json")).unwrap();
        assert_eq!(parse_json(&json).unwrap(), small_report());
        assert!(dir.join("expansion.csv").exists());
        std::fs::remove_dir_all(&dir).ok();
    }
}
