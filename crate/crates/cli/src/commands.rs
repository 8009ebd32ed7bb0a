//! The four commands. Each stage works on in-memory bytes so that `replicate`
//! produces exactly what `simulate`, `estimate`, and `diagnose` produce when
//! run one after another with the same configuration.

use std::path::Path;

use lmp_core::diagnostics::{report_files, run_diagnostics, DiagnosticsReport, SurfaceTarget};
use lmp_core::model::{Component, ModelParams};
use lmp_core::msem::{run_msem_with, Checkpoint, MsemError, MsemState};
use lmp_core::panel_io::{parse_panel_reader, residualize, write_panel_csv, PanelDataset};
use lmp_core::rng::derive_seed;
use lmp_core::simulator::{self, DgpKind, DgpSpec};
use serde::{Deserialize, Serialize};

use crate::artifacts::{write_atomic, Manifest, Staging};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Estimate,
    Diagnose,
    Replicate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Estimate => "estimate",
            Command::Diagnose => "diagnose",
            Command::Replicate => "replicate",
        }
    }
}

/// Sub-seed domains, one per stage, all derived from the top-level seed.
mod stage {
    pub const SIMULATE: u64 = 1;
    pub const ESTIMATE: u64 = 2;
    pub const DIAGNOSE: u64 = 3;
}

pub const CHECKPOINT: &str = "checkpoint.json";

/// Largest `|E[V' | V]|` a fit may show before `replicate` reports failure.
pub const NORMALIZATION_TOLERANCE: f64 = 0.05;

type Files = Vec<(String, Vec<u8>)>;

fn file<'a>(files: &'a Files, name: &str) -> &'a [u8] {
    files
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, b)| b.as_slice())
        .expect("stage output present")
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn parse_params(bytes: &[u8]) -> Result<ModelParams, CliError> {
    let params: ModelParams = serde_json::from_slice(bytes).map_err(|e| CliError::Params(e.to_string()))?;
    params.validate().map_err(|e| CliError::Params(e.to_string()))?;
    Ok(params)
}

pub fn load_panel(config: &RunConfig, bytes: &[u8]) -> Result<PanelDataset, CliError> {
    let raw = parse_panel_reader(bytes, &config.panel)?;
    Ok(residualize(&raw)?)
}

/// Panel, latent truth, and the DGP actually used.
pub fn simulate_stage(config: &RunConfig, spec: &DgpSpec, fitted: Option<&ModelParams>) -> Result<Files, CliError> {
    let spec = DgpSpec { seed: derive_seed(config.seed, stage::SIMULATE), ..spec.clone() };
    let sim = simulator::simulate(&spec, fitted)?;
    let mut panel = Vec::new();
    write_panel_csv(&sim.data.to_raw(), &mut panel)?;
    let mut truth = Vec::new();
    sim.truth.write_csv(&sim.data, &mut truth)?;
    let mut files = vec![
        ("panel.csv".to_string(), panel),
        ("truth.csv".to_string(), truth),
        ("dgp.json".to_string(), to_json(&spec)),
    ];
    if spec.kind == DgpKind::NonlinearSieve {
        files.push(("true_params.json".to_string(), to_json(&simulator::skew_reversal_params(&spec)?)));
    }
    Ok(files)
}

fn traces_csv(state: &MsemState) -> Vec<u8> {
    let mut out = String::from("iteration,loglik,surrogate_loss,acceptance\n");
    for s in 0..state.loglik_trace.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s + 1,
            state.loglik_trace[s],
            state.surrogate_loss_trace[s],
            state.acceptance_trace[s]
        ));
    }
    out.into_bytes()
}

/// Fit the model to the panel in `panel_bytes`. A checkpoint is rewritten in
/// `work_dir` after every outer iteration.
pub fn estimate_stage(
    config: &RunConfig,
    panel_bytes: &[u8],
    work_dir: &Path,
    resume: Option<Checkpoint>,
    label: &str,
) -> Result<Files, CliError> {
    let raw = parse_panel_reader(panel_bytes, &config.panel)?;
    let data = residualize(&raw)?;
    let msem = lmp_core::msem::MsemConfig { seed: derive_seed(config.seed, stage::ESTIMATE), ..config.msem.clone() };
    std::fs::create_dir_all(work_dir).map_err(|e| CliError::io(work_dir, e))?;
    let checkpoint_path = work_dir.join(CHECKPOINT);
    let (params, state) = run_msem_with(&data, &msem, None, resume, |state| {
        let s = state.iterates.len();
        eprintln!(
            "{label}estimate: iteration {s}/{}, loglik {:.5}, acceptance {:.3}",
            msem.n_outer,
            state.loglik_trace[s - 1],
            state.acceptance_trace[s - 1]
        );
        let json = to_json(&Checkpoint::from_state(state));
        write_atomic(&checkpoint_path, &json).map_err(|e| MsemError::Observer(e.to_string()))
    })?;
    let meta = data.meta(raw.dropped_households, &raw.demographic_names);
    Ok(vec![
        ("params.json".to_string(), to_json(&params)),
        ("traces.csv".to_string(), traces_csv(&state)),
        ("panel_meta.json".to_string(), to_json(&meta)),
    ])
}

pub fn diagnose_stage(config: &RunConfig, data: &PanelDataset, params: &ModelParams) -> Result<(Files, DiagnosticsReport), CliError> {
    let report = run_diagnostics(data, params, &config.diagnostics, derive_seed(config.seed, stage::DIAGNOSE))?;
    Ok((report_files(&report)?, report))
}

/// Headline numbers of one `replicate` branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub branch: String,
    /// Persistence of the fitted `U` kernel over the grid without its end knots.
    pub persistence_mean_u: f64,
    pub persistence_min_u: f64,
    pub persistence_max_u: f64,
    pub skewness_u_low_percentile: f64,
    pub skewness_u_low: f64,
    pub skewness_u_high_percentile: f64,
    pub skewness_u_high: f64,
    pub excess_kurtosis_v: f64,
    pub growth_variance_increasing: bool,
    pub normalization_deviation_u: f64,
    pub normalization_deviation_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub normalization_tolerance: f64,
    pub branches: Vec<BranchSummary>,
    pub invariants_ok: bool,
}

fn interior<T>(values: &[T]) -> &[T] {
    if values.len() > 2 {
        &values[1..values.len() - 1]
    } else {
        values
    }
}

pub fn summarize(branch: &str, report: &DiagnosticsReport) -> BranchSummary {
    let surface = report.surfaces.iter().find(|s| s.target == SurfaceTarget::U).expect("U surface");
    let rows: Vec<usize> = (0..surface.values.len()).collect();
    let cells: Vec<f64> = interior(&rows)
        .iter()
        .flat_map(|&a| interior(&surface.values[a]).to_vec())
        .collect();
    let skew = report.skewness_curves.iter().find(|c| c.component == Component::U).expect("U skewness");
    let last = skew.values.len() - 1;
    let kurt_v = report
        .marginal_densities
        .iter()
        .find(|m| m.component == Component::V)
        .expect("V density")
        .moments
        .excess_kurtosis();
    BranchSummary {
        branch: branch.to_string(),
        persistence_mean_u: cells.iter().sum::<f64>() / cells.len() as f64,
        persistence_min_u: cells.iter().copied().fold(f64::INFINITY, f64::min),
        persistence_max_u: cells.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        skewness_u_low_percentile: skew.percentiles[0],
        skewness_u_low: skew.values[0],
        skewness_u_high_percentile: skew.percentiles[last],
        skewness_u_high: skew.values[last],
        excess_kurtosis_v: kurt_v,
        growth_variance_increasing: report.growth_moments.windows(2).all(|w| w[1].variance > w[0].variance),
        normalization_deviation_u: report.normalization_deviation.u,
        normalization_deviation_v: report.normalization_deviation.v,
    }
}

fn summary_csv(summary: &ReplicateSummary) -> Vec<u8> {
    let mut out = String::from("branch,metric,value\n");
    for b in &summary.branches {
        let rows: [(&str, String); 11] = [
            ("persistence_mean_U", b.persistence_mean_u.to_string()),
            ("persistence_min_U", b.persistence_min_u.to_string()),
            ("persistence_max_U", b.persistence_max_u.to_string()),
            ("skewness_U_low", b.skewness_u_low.to_string()),
            ("skewness_U_high", b.skewness_u_high.to_string()),
            ("excess_kurtosis_V", b.excess_kurtosis_v.to_string()),
            ("growth_variance_increasing", b.growth_variance_increasing.to_string()),
            ("normalization_deviation_U", b.normalization_deviation_u.to_string()),
            ("normalization_deviation_V", b.normalization_deviation_v.to_string()),
            ("skewness_low_percentile", b.skewness_u_low_percentile.to_string()),
            ("skewness_high_percentile", b.skewness_u_high_percentile.to_string()),
        ];
        for (metric, value) in rows {
            out.push_str(&format!("{},{metric},{value}\n", b.branch));
        }
    }
    out.into_bytes()
}

/// Run `command` and commit its outputs under `config.paths.out_dir`.
/// Inputs are read before anything is written.
pub fn dispatch(config: &RunConfig, command: Command, resume: bool) -> Result<Manifest, CliError> {
    let out = config.paths.out_dir.clone();
    let echo = config.echo()?;
    let mut staging = Staging::new(&out);
    let mut failure = None;
    match command {
        Command::Simulate => {
            let fitted = if config.simulate.kind == DgpKind::Fitted {
                let path = config.paths.params_path();
                let bytes = read_input(&path)?;
                staging.record_input(&path, &bytes);
                Some(parse_params(&bytes)?)
            } else {
                None
            };
            let files = simulate_stage(config, &config.simulate, fitted.as_ref())?;
            staging.put_all("", &files)?;
        }
        Command::Estimate => {
            let path = config.paths.panel_path();
            let bytes = read_input(&path)?;
            staging.record_input(&path, &bytes);
            // Reject a malformed panel before the output directory is touched.
            load_panel(config, &bytes)?;
            let checkpoint = if resume {
                let cp_path = out.join(CHECKPOINT);
                let cp = read_input(&cp_path)?;
                Some(serde_json::from_slice::<Checkpoint>(&cp).map_err(|e| CliError::Params(format!("{}: {e}", cp_path.display())))?)
            } else {
                None
            };
            let files = estimate_stage(config, &bytes, &out, checkpoint, "")?;
            staging.put_all("", &files)?;
        }
        Command::Diagnose => {
            let panel_path = config.paths.panel_path();
            let params_path = config.paths.params_path();
            let panel = read_input(&panel_path)?;
            let params = read_input(&params_path)?;
            staging.record_input(&panel_path, &panel);
            staging.record_input(&params_path, &params);
            let data = load_panel(config, &panel)?;
            let params = parse_params(&params)?;
            let (files, _) = diagnose_stage(config, &data, &params)?;
            staging.put_all("", &files)?;
        }
        Command::Replicate => {
            let mut branches = Vec::new();
            for (branch, kind) in [("canonical", DgpKind::Canonical), ("nonlinear", DgpKind::NonlinearSieve)] {
                let spec = DgpSpec { kind, ..config.simulate.clone() };
                let sim = simulate_stage(config, &spec, None)?;
                staging.put_all(branch, &sim)?;
                let panel = file(&sim, "panel.csv");
                let label = format!("[{branch}] ");
                let est = estimate_stage(config, panel, &out.join(branch), None, &label)?;
                staging.put_all(branch, &est)?;
                let data = load_panel(config, panel)?;
                let params = parse_params(file(&est, "params.json"))?;
                let (diag, report) = diagnose_stage(config, &data, &params)?;
                staging.put_all(branch, &diag)?;
                branches.push(summarize(branch, &report));
            }
            let bad: Vec<String> = branches
                .iter()
                .filter(|b| !(b.normalization_deviation_v < NORMALIZATION_TOLERANCE))
                .map(|b| format!("{}: V normalization deviation {:.4} >= {NORMALIZATION_TOLERANCE}", b.branch, b.normalization_deviation_v))
                .collect();
            let summary = ReplicateSummary {
                normalization_tolerance: NORMALIZATION_TOLERANCE,
                invariants_ok: bad.is_empty(),
                branches,
            };
            staging.put("summary.json", &to_json(&summary))?;
            staging.put("summary.csv", &summary_csv(&summary))?;
            if !bad.is_empty() {
                failure = Some(CliError::Invariant(bad.join("; ")));
            }
        }
    }
    let manifest = staging.commit(command.name(), config.seed, &echo)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}
