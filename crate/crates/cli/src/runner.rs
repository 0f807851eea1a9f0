//! Executes a validated [`ExperimentConfig`] into in-memory artifacts.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use dln_core::analysis::{self, distance_scaling, median, ntk_change, ntk_monte_carlo, rng_seed, ScalingFit};
use dln_core::escape::{escape_profile, flow_residual, refine_escape_path, PathGrid};
use dln_core::flow::{detect_plateaus, escape_time, integrate_with_test, CSV_HEADER};
use dln_core::greedy::{greedy_low_rank, greedy_vs_flow};
use dln_core::{init_gaussian, CostSpec, DlnError, FlowConfig, GreedyReport, Matrix, NetShape, Params, Trajectory};

use crate::config::{
    EscapeSweepBlock, ExperimentConfig, Figure3Block, GreedyBlock, Kind, NtkCheckBlock, RefineBlock, RegimeSweepBlock,
    RunBlock,
};

/// Theory slope magnitude used as the tolerance scale when the predicted
/// slope is zero.
pub const FLAT_REFERENCE_SLOPE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Default)]
pub struct Artifacts {
    /// Relative path and contents of each data file.
    pub files: Vec<(String, Vec<u8>)>,
    pub stats: Map<String, Value>,
    pub checks: Vec<Check>,
}

impl Artifacts {
    fn file(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn stat(&mut self, key: &str, value: impl Serialize) {
        self.stats
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    fn absorb(&mut self, other: Artifacts) {
        self.files.extend(other.files);
        self.checks.extend(other.checks);
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub kind: Kind,
    pub artifacts: Artifacts,
    pub error: Option<DlnError>,
}

impl RunOutcome {
    pub fn checks_passed(&self) -> bool {
        self.artifacts.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> Value {
        let mut s = Map::new();
        s.insert("kind".into(), json!(self.kind.name()));
        s.insert("status".into(), json!(if self.error.is_none() { "ok" } else { "error" }));
        if let Some(e) = &self.error {
            s.insert("error".into(), json!(e.to_string()));
        }
        s.insert("stats".into(), Value::Object(self.artifacts.stats.clone()));
        s.insert("checks".into(), serde_json::to_value(&self.artifacts.checks).unwrap_or(Value::Null));
        s.insert("checks_passed".into(), json!(self.checks_passed()));
        Value::Object(s)
    }
}

fn f(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn trajectory_csv(traj: &Trajectory) -> Vec<u8> {
    csv_bytes(&CSV_HEADER, traj.snapshots.iter().map(|s| s.csv_fields()))
}

fn path_csv(path: &PathGrid) -> Vec<u8> {
    let header = path.csv_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(&header, path.csv_rows())
}

/// Trajectory carried by a failed integration, if any.
fn partial_trajectory(e: &DlnError) -> Option<&Trajectory> {
    match e {
        DlnError::NonFinite { partial, .. } | DlnError::NeverEscaped { partial, .. } => Some(partial),
        _ => None,
    }
}

/// Keeps the partial trajectory of a failed point under `<stem>.partial.csv`.
fn keep_partial(art: &mut Artifacts, stem: &str, e: &DlnError) {
    if let Some(t) = partial_trajectory(e) {
        art.file(format!("{stem}.partial.csv"), trajectory_csv(t));
    }
}

/// Runs the experiment. The current rayon pool bounds sweep concurrency.
pub fn execute(cfg: &ExperimentConfig) -> RunOutcome {
    let mut art = Artifacts::default();
    let result = match cfg.kind {
        Kind::Run => run_single(cfg, cfg.run.as_ref().expect("validated"), &mut art),
        Kind::Figure1 => run_single(cfg, cfg.figure1.as_ref().expect("validated"), &mut art),
        Kind::Greedy => run_greedy(cfg, cfg.greedy.as_ref().expect("validated"), &mut art),
        Kind::EscapeSweep => run_escape_sweep(cfg, cfg.escape_sweep.as_ref().expect("validated"), &mut art),
        Kind::RegimeSweep => run_regime_sweep(cfg, cfg.regime_sweep.as_ref().expect("validated"), &mut art),
        Kind::NtkCheck => run_ntk_check(cfg, cfg.ntk_check.as_ref().expect("validated"), &mut art),
        Kind::RefinePath => run_refine(cfg, cfg.refine_path.as_ref().expect("validated"), &mut art),
        Kind::Figure3 => run_width_gamma_sweep(cfg, cfg.figure3.as_ref().expect("validated"), &mut art),
    };
    RunOutcome {
        kind: cfg.kind,
        artifacts: art,
        error: result.err(),
    }
}

fn initial_params(cfg: &ExperimentConfig) -> dln_core::Result<Params> {
    let sigma = cfg.init_sigma().ok_or_else(|| DlnError::InvalidArgument("no initialization scale".into()))?;
    init_gaussian(&cfg.shape, sigma, cfg.seed)
}

fn flow_cfg(cfg: &ExperimentConfig) -> &FlowConfig {
    cfg.flow.as_ref().expect("validated")
}

/// Integrates and stores `<stem>.csv`, or `<stem>.partial.csv` on failure.
fn flow_point(
    art: &mut Artifacts,
    stem: &str,
    theta0: &Params,
    cost: &CostSpec,
    test: Option<&CostSpec>,
    flow: &FlowConfig,
) -> dln_core::Result<Trajectory> {
    match integrate_with_test(theta0, cost, flow, test) {
        Ok(t) => {
            art.file(format!("{stem}.csv"), trajectory_csv(&t));
            Ok(t)
        }
        Err(e) => {
            keep_partial(art, stem, &e);
            Err(e)
        }
    }
}

fn trajectory_stats(art: &mut Artifacts, traj: &Trajectory) {
    let last = traj.last();
    art.stat("final_step", last.step);
    art.stat("final_time", last.time);
    art.stat("final_train_loss", last.loss_train);
    art.stat("final_test_loss", last.loss_test);
    art.stat("final_rank", last.rank);
    art.stat("stop", traj.stop);
    art.stat("rank_sequence", traj.rank_sequence());
}

fn run_single(cfg: &ExperimentConfig, block: &RunBlock, art: &mut Artifacts) -> dln_core::Result<()> {
    let (cost, test) = cfg.resolved_costs()?;
    let theta0 = initial_params(cfg)?;
    let traj = flow_point(art, "trajectory", &theta0, &cost, test.as_ref(), flow_cfg(cfg))?;
    trajectory_stats(art, &traj);
    let p = &block.plateaus;
    let plateaus = detect_plateaus(&traj, p.window, p.slope_tol, p.sep_tol)?;
    art.stat("plateau_count", plateaus.count());
    art.stat("plateaus", &plateaus.plateaus);

    if let Some(n) = block.expect_plateaus {
        art.checks.push(Check::new(
            "plateau_count",
            plateaus.count() == n,
            format!("{} plateaus, expected {n}", plateaus.count()),
        ));
    }
    if let Some(expected) = &block.expect_ranks {
        let got = traj.rank_sequence();
        art.checks.push(Check::new(
            "rank_sequence",
            &got == expected,
            format!("ranks {got:?}, expected {expected:?}"),
        ));
    }
    if let Some(max) = block.max_train_loss {
        let v = traj.final_loss();
        art.checks
            .push(Check::new("final_train_loss", v <= max, format!("{v:.3e} <= {max:.3e}")));
    }
    if let Some(max) = block.max_test_loss {
        let v = traj.last().loss_test.unwrap_or(f64::NAN);
        art.checks
            .push(Check::new("final_test_loss", v <= max, format!("{v:.3e} <= {max:.3e}")));
    }
    Ok(())
}

fn greedy_csv(report: &GreedyReport) -> Vec<u8> {
    csv_bytes(
        &["stage", "width", "loss", "grad_top_singular", "rank", "multiplicity_flag"],
        report.stages.iter().enumerate().map(|(k, s)| {
            vec![
                k.to_string(),
                s.width.to_string(),
                f(s.loss),
                f(s.grad_top_singular),
                s.rank.to_string(),
                s.multiplicity_flag.to_string(),
            ]
        }),
    )
}

fn greedy_stats(art: &mut Artifacts, report: &GreedyReport) {
    art.stat("greedy_final_width", report.final_width());
    art.stat("greedy_final_loss", report.final_loss());
    art.stat("greedy_rank_sequence", report.rank_sequence());
    art.stat("greedy_terminated", report.terminated);
    art.stat("c_min", report.c_min);
}

fn run_greedy(cfg: &ExperimentConfig, block: &GreedyBlock, art: &mut Artifacts) -> dln_core::Result<()> {
    let (cost, _) = cfg.resolved_costs()?;
    let result = match block.compare_alpha {
        Some(alpha) => greedy_vs_flow(&cost, &cfg.shape, alpha, cfg.seed, flow_cfg(cfg), &block.cfg_greedy).map(
            |(cmp, traj, report)| {
                art.file("trajectory.csv", trajectory_csv(&traj));
                art.stat("comparison", &cmp);
                art.checks.push(Check::new(
                    "rank_sequences_match",
                    cmp.ranks_match,
                    format!("flow {:?}, greedy {:?}", cmp.flow_ranks, cmp.greedy_ranks),
                ));
                report
            },
        ),
        None => greedy_low_rank(&cost, &cfg.shape, &block.cfg_greedy),
    };
    match result {
        Ok(report) => {
            art.file("greedy_stages.csv", greedy_csv(&report));
            greedy_stats(art, &report);
            Ok(())
        }
        Err(DlnError::MaxWidthExceeded(report)) => {
            art.file("greedy_stages.csv", greedy_csv(&report));
            greedy_stats(art, &report);
            Err(DlnError::MaxWidthExceeded(report))
        }
        Err(e) => {
            keep_partial(art, "trajectory", &e);
            Err(e)
        }
    }
}

fn run_escape_sweep(cfg: &ExperimentConfig, block: &EscapeSweepBlock, art: &mut Artifacts) -> dln_core::Result<()> {
    let (cost, _) = cfg.resolved_costs()?;
    let depth = cfg.shape.depth();
    let profile = escape_profile(&cost, depth)?;
    let theta0 = initial_params(cfg)?;
    let theta0 = theta0.scaled(1.0 / theta0.norm());
    let flow = flow_cfg(cfg);
    let mut alphas = block.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    let results: Vec<dln_core::Result<f64>> = alphas
        .par_iter()
        .map(|&a| escape_time(&theta0, &cost, flow, block.r, a))
        .collect();
    let mut times = Vec::with_capacity(alphas.len());
    let mut first_err = None;
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => times.push(t),
            Err(e) => {
                keep_partial(art, &format!("escape_alpha{k}"), &e);
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    art.file(
        "escape_times.csv",
        csv_bytes(
            &["alpha", "escape_time"],
            alphas.iter().zip(&times).map(|(&a, &t)| vec![f(a), f(t)]),
        ),
    );
    art.stat("s1", profile.s1);
    art.stat("s_star", profile.s_star);
    art.stat("alphas", &alphas);
    art.stat("escape_times", &times);
    let (slope, theory, r2, what) = if depth == 2 {
        let x: Vec<f64> = alphas.iter().map(|a| -a.ln()).collect();
        let (slope, _, r2) = analysis::ols(&x, &times);
        (slope, 1.0 / profile.s_star, r2, "t against -ln(alpha)")
    } else {
        let fit = ScalingFit::new(alphas.clone(), times.clone(), -(depth as f64 - 2.0))?;
        (fit.slope, fit.theory_slope, fit.r_squared, "ln t against ln(alpha)")
    };
    art.stat(
        "fit",
        json!({"regression": what, "slope": slope, "theory_slope": theory, "r_squared": r2}),
    );
    art.checks.push(Check::new(
        "escape_slope",
        (slope - theory).abs() <= block.slope_rel_tol * theory.abs(),
        format!("{what}: slope {slope:.4} vs {theory:.4} (rel tol {})", block.slope_rel_tol),
    ));
    art.checks.push(Check::new(
        "escape_fit_r_squared",
        r2 >= block.r_squared_min,
        format!("R² {r2:.5} >= {}", block.r_squared_min),
    ));
    Ok(())
}

/// Global minimizer used as the distance target.
fn target_matrix(cost: &CostSpec) -> dln_core::Result<Matrix> {
    match cost {
        CostSpec::MatrixCompletion { a_star, .. } => Ok(a_star.clone()),
        CostSpec::Mse { x, y } => {
            let pinv = x.clone().pseudo_inverse(1e-12).map_err(|e| DlnError::Domain(e.to_string()))?;
            Ok(y * pinv)
        }
        _ => Err(DlnError::NoFiniteMinimum),
    }
}

fn slope_check(name: String, fit: &ScalingFit, rel: f64) -> Check {
    let (passed, tol) = if fit.theory_slope == 0.0 {
        (fit.slope.abs() <= rel * FLAT_REFERENCE_SLOPE, rel * FLAT_REFERENCE_SLOPE)
    } else {
        (fit.within(rel), rel * fit.theory_slope.abs())
    };
    Check::new(
        name,
        passed,
        format!("slope {:.4} vs {:.4} (±{tol:.4})", fit.slope, fit.theory_slope),
    )
}

fn run_regime_sweep(cfg: &ExperimentConfig, block: &RegimeSweepBlock, art: &mut Artifacts) -> dln_core::Result<()> {
    let (cost, _) = cfg.resolved_costs()?;
    let a_star = target_matrix(&cost)?;
    let depth = cfg.shape.depth();
    let seeds: Vec<u64> = (0..block.trials as u64).map(|k| rng_seed(cfg.seed, k)).collect();
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for &gamma in &block.gammas {
        let sc = distance_scaling(depth, &block.widths, gamma, &a_star, &seeds)?;
        art.checks.push(slope_check(format!("saddle_distance_slope_gamma_{gamma}"), &sc.saddle_fit, block.slope_rel_tol));
        art.checks.push(slope_check(format!("min_distance_slope_gamma_{gamma}"), &sc.min_fit, block.slope_rel_tol));
        fits.push(json!({"gamma": gamma, "saddle_fit": sc.saddle_fit, "min_fit": sc.min_fit}));
        rows.extend(sc.rows);
    }
    art.file(
        "distances.csv",
        csv_bytes(
            &["gamma", "width", "seed", "d_s_upper", "d_m_upper", "min_branch", "rank_deficient_flank"],
            rows.iter().map(|r| {
                vec![
                    f(r.gamma),
                    r.width.to_string(),
                    r.seed.to_string(),
                    f(r.d_s_upper),
                    f(r.d_m_upper),
                    format!("{:?}", r.min_branch).to_lowercase(),
                    r.rank_deficient_flank.to_string(),
                ]
            }),
        ),
    );
    art.stat("fits", fits);
    art.stat("rank_deficient_flanks", rows.iter().filter(|r| r.rank_deficient_flank).count());
    Ok(())
}

fn run_ntk_check(cfg: &ExperimentConfig, block: &NtkCheckBlock, art: &mut Artifacts) -> dln_core::Result<()> {
    let gamma = cfg.gamma.expect("validated");
    let sample = ntk_monte_carlo(&cfg.shape, gamma, block.trials, cfg.seed)?;
    let rel = sample.diagonal_mean / sample.expectation - 1.0;
    art.checks.push(Check::new(
        "ntk_diagonal_mean",
        rel.abs() <= block.diag_rel_tol,
        format!(
            "{:.4} vs {:.4} (se {:.3}, rel tol {})",
            sample.diagonal_mean, sample.expectation, sample.diagonal_se, block.diag_rel_tol
        ),
    ));
    art.stat("sample", &sample);
    if block.train {
        let (cost, test) = cfg.resolved_costs()?;
        let theta0 = initial_params(cfg)?;
        let traj = flow_point(art, "trajectory", &theta0, &cost, test.as_ref(), flow_cfg(cfg))?;
        trajectory_stats(art, &traj);
        let (diff, base) = ntk_change(&theta0, &traj.final_params)?;
        art.stat("ntk_relative_change", diff / base);
    }
    Ok(())
}

fn run_refine(cfg: &ExperimentConfig, block: &RefineBlock, art: &mut Artifacts) -> dln_core::Result<()> {
    let (cost, _) = cfg.resolved_costs()?;
    let profile = escape_profile(&cost, cfg.shape.depth())?;
    let rf = refine_escape_path(&cost, &profile, &block.grid_spec, block.tol, block.max_iter)?;
    art.file("homogeneous_path.csv", path_csv(&rf.homogeneous));
    art.file("refined_path.csv", path_csv(&rf.refined));
    art.file(
        "refinement.csv",
        csv_bytes(
            &["iteration", "difference", "contraction_ratio"],
            rf.differences.iter().enumerate().map(|(k, &d)| {
                let ratio = if k == 0 { String::new() } else { rf.contraction_ratios.get(k - 1).map(|&q| f(q)).unwrap_or_default() };
                vec![(k + 1).to_string(), f(d), ratio]
            }),
        ),
    );
    let residual = flow_residual(&rf.refined, &rf.cost)?;
    let max_ratio = rf.contraction_ratios.iter().cloned().fold(0.0, f64::max);
    art.stat("iterations", rf.differences.len());
    art.stat("converged", rf.converged);
    art.stat("max_contraction_ratio", max_ratio);
    art.stat("flow_residual", residual);
    art.stat("r", rf.r);
    art.stat("t_min", rf.t_min);
    art.stat("t_max", rf.t_max);
    art.stat("tail_estimate", rf.tail_estimate);
    art.checks.push(Check::new(
        "converged",
        rf.converged,
        format!("{} iterations to tol {:e}", rf.differences.len(), block.tol),
    ));
    art.checks.push(Check::new(
        "contracting",
        rf.contraction_ratios.iter().all(|&q| q < 1.0),
        format!("max ratio {max_ratio:.4}"),
    ));
    Ok(())
}

struct SweepPoint {
    gamma: f64,
    width: usize,
    trial: usize,
}

struct PointResult {
    eta: f64,
    train: f64,
    test: Option<f64>,
    rank: usize,
}

fn run_width_gamma_sweep(cfg: &ExperimentConfig, block: &Figure3Block, art: &mut Artifacts) -> dln_core::Result<()> {
    let (cost, test) = cfg.resolved_costs()?;
    let depth = cfg.shape.depth() as f64;
    let points: Vec<SweepPoint> = block
        .gammas
        .iter()
        .flat_map(|&gamma| {
            block
                .widths
                .iter()
                .flat_map(move |&width| (0..block.trials).map(move |trial| SweepPoint { gamma, width, trial }))
        })
        .collect();
    let run_point = |p: &SweepPoint| -> (Artifacts, dln_core::Result<PointResult>) {
        let mut local = Artifacts::default();
        let eta = if block.scale_eta && p.gamma <= 1.0 {
            block.eta0 * (p.width as f64).powf((depth - 1.0) * (p.gamma - 1.0))
        } else {
            block.eta0
        };
        let result = (|| {
            let shape: NetShape = cfg.shape.with_hidden_width(p.width)?;
            let seed = rng_seed(rng_seed(cfg.seed, p.width as u64), p.trial as u64);
            let theta0 = init_gaussian(&shape, (p.width as f64).powf(-p.gamma / 2.0), seed)?;
            let mut flow = flow_cfg(cfg).clone();
            flow.step_size = eta;
            let stem = format!("sweep_gamma{}_w{}_trial{}", p.gamma, p.width, p.trial);
            let traj = flow_point(&mut local, &stem, &theta0, &cost, test.as_ref(), &flow)?;
            let last = traj.last();
            Ok(PointResult {
                eta,
                train: last.loss_train,
                test: last.loss_test,
                rank: last.rank,
            })
        })();
        (local, result)
    };
    let results: Vec<(Artifacts, dln_core::Result<PointResult>)> = points.par_iter().map(run_point).collect();

    let mut rows = Vec::new();
    let mut first_err = None;
    for (p, (local, r)) in points.iter().zip(results) {
        art.absorb(local);
        match r {
            Ok(res) => rows.push((p, res)),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    art.file(
        "sweep_points.csv",
        csv_bytes(
            &["gamma", "width", "trial", "step_size", "final_train_loss", "final_test_loss", "final_rank"],
            rows.iter().map(|(p, r)| {
                vec![
                    f(p.gamma),
                    p.width.to_string(),
                    p.trial.to_string(),
                    f(r.eta),
                    f(r.train),
                    r.test.map(f).unwrap_or_default(),
                    r.rank.to_string(),
                ]
            }),
        ),
    );
    if let Some(e) = first_err {
        return Err(e);
    }

    let cell = |gamma: f64, width: usize| -> (f64, f64, f64) {
        let sel: Vec<&PointResult> = rows
            .iter()
            .filter(|(p, _)| p.gamma == gamma && p.width == width)
            .map(|(_, r)| r)
            .collect();
        let test: Vec<f64> = sel.iter().map(|r| r.test.unwrap_or(r.train)).collect();
        let train: Vec<f64> = sel.iter().map(|r| r.train).collect();
        let rank: Vec<f64> = sel.iter().map(|r| r.rank as f64).collect();
        (median(&train), median(&test), median(&rank))
    };
    let mut cells = Vec::new();
    for &gamma in &block.gammas {
        for &width in &block.widths {
            let (train, test, rank) = cell(gamma, width);
            cells.push(json!({
                "gamma": gamma, "width": width,
                "median_train_loss": train, "median_test_loss": test, "median_rank": rank,
            }));
        }
    }
    art.stat("cells", cells);

    if block.check_trend {
        let w = *block.widths.last().expect("validated");
        let lo = block.gammas.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = block.gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (_, test_lo, rank_lo) = cell(lo, w);
        let (_, test_hi, rank_hi) = cell(hi, w);
        art.checks.push(Check::new(
            "regime_trend",
            test_hi < test_lo && rank_hi <= rank_lo,
            format!(
                "w={w}: gamma {lo}: test {test_lo:.3e}, rank {rank_lo}; gamma {hi}: test {test_hi:.3e}, rank {rank_hi}"
            ),
        ));
    }
    Ok(())
}
