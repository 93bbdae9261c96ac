//! End-to-end runs built from an [`ExperimentConfig`]: graph generation,
//! training with CSV output, anomaly evaluation, parameter sweeps and the
//! named figure recipes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anomaly::{
    anomaly_scores_with, default_threshold, pr_curve_csv, threshold_sweep, AnomalyError, AnomalyReport,
    EmbeddingSource, OperatingPoint,
};
use crate::config::{ConfigError, ExperimentConfig};
use crate::fed::{run_experiment, setup, ExperimentLog, FedError};
use crate::gat::{model_forward, ModelParams};
use crate::graph::{graph_to_json, Graph};
use crate::metrics::{linear_fit, overhead_ratio, scaling_csv, LinearFit, ScalingPoint};
use crate::rng::{derive_seed, Stream};
use crate::secagg::Backend;
use crate::synthgen::{generate_federation, plant_anomalies, GenError};
use crate::threat::RobustMode;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("run aborted after {completed} completed rounds: {source}")]
    Aborted { completed: usize, source: FedError },
    #[error("unknown recipe {0:?}; expected one of fig1..fig7")]
    UnknownRecipe(String),
}

impl ExperimentError {
    /// Whether the failure is a problem with the configuration rather than
    /// with the run itself.
    pub fn is_config(&self) -> bool {
        match self {
            ExperimentError::Config(_) | ExperimentError::UnknownRecipe(_) => true,
            ExperimentError::Gen(GenError::InvalidSpec(_) | GenError::InfeasibleDegree { .. }) => true,
            ExperimentError::Fed(FedError::Config(_)) => true,
            _ => false,
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ExperimentError::Io { path: parent.into(), source })?;
    }
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io { path: path.into(), source })
}

/// Client graphs for a run, with planted anomalies when enabled.
#[derive(Debug, Clone)]
pub struct Federation {
    pub graphs: Vec<Graph>,
    /// Per-client planted node ids, when anomalies are enabled.
    pub truth: Option<Vec<Vec<usize>>>,
}

pub fn build_federation(cfg: &ExperimentConfig) -> Result<Federation, ExperimentError> {
    cfg.validate()?;
    let clean = generate_federation(&cfg.graph, cfg.fed.num_clients)?;
    if !cfg.anomaly.enabled {
        return Ok(Federation { graphs: clean, truth: None });
    }
    let magnitude = cfg.anomaly.magnitude_for(&cfg.graph);
    let mut graphs = Vec::with_capacity(clean.len());
    let mut truth = Vec::with_capacity(clean.len());
    for (i, g) in clean.iter().enumerate() {
        let seed = derive_seed(cfg.graph.seed, &[Stream::Anomaly as u64, i as u64]);
        let (planted, t) = plant_anomalies(g, cfg.anomaly.fraction, magnitude, seed)?;
        graphs.push(planted);
        truth.push(t);
    }
    Ok(Federation { graphs, truth: Some(truth) })
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub planted: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub num_clients: usize,
    pub seed: u64,
    pub clients: Vec<ManifestEntry>,
}

/// Writes `client_XX.json` per client and `manifest.json`. Everything is
/// generated before the first file is written.
pub fn write_federation(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest, ExperimentError> {
    let fed = build_federation(cfg)?;
    let mut files = Vec::with_capacity(fed.graphs.len());
    let mut clients = Vec::with_capacity(fed.graphs.len());
    for (i, g) in fed.graphs.iter().enumerate() {
        let json = graph_to_json(g);
        let file = format!("client_{i:02}.json");
        clients.push(ManifestEntry {
            file: file.clone(),
            sha256: hex(&Sha256::digest(json.as_bytes())),
            num_nodes: g.num_nodes(),
            num_edges: g.num_directed_edges() / 2,
            planted: fed.truth.as_ref().map(|t| t[i].clone()),
        });
        files.push((file, json));
    }
    let manifest = Manifest { schema_version: crate::config::SCHEMA_VERSION, num_clients: clients.len(), seed: cfg.graph.seed, clients };
    for (file, json) in files {
        write_file(&dir.join(file), json)?;
    }
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct AnomalyOutcome {
    pub report: AnomalyReport,
    /// Planted nodes, in pooled numbering (client offsets in client order).
    pub truth: Vec<usize>,
    pub sweep: Vec<OperatingPoint>,
}

/// Scores every node of every client under `params` and thresholds the
/// pooled scores.
pub fn evaluate_anomalies(
    cfg: &ExperimentConfig,
    graphs: &[Graph],
    truth: &[Vec<usize>],
    params: &ModelParams,
) -> Result<AnomalyOutcome, ExperimentError> {
    let mut scores = vec![];
    let mut pooled_truth = vec![];
    for (g, t) in graphs.iter().zip(truth) {
        let trace = model_forward(g, params).map_err(FedError::from)?;
        let emb = match cfg.anomaly.embedding {
            EmbeddingSource::Projection => trace.hidden_projections(),
            EmbeddingSource::Hidden => trace.hidden_states(),
        };
        let offset = scores.len();
        scores.extend(anomaly_scores_with(emb, g, cfg.anomaly.metric)?);
        pooled_truth.extend(t.iter().map(|v| v + offset));
    }
    let tau = cfg.anomaly.threshold.unwrap_or_else(|| default_threshold(&scores, Some(cfg.anomaly.fraction)));
    let sweep = threshold_sweep(&scores, &pooled_truth, cfg.anomaly.sweep_points);
    Ok(AnomalyOutcome { report: AnomalyReport::new(scores, tau, &pooled_truth), truth: pooled_truth, sweep })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: ExperimentLog,
    pub anomaly: Option<AnomalyOutcome>,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.log.final_accuracy().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.log.records.last().map_or(f64::NAN, |r| r.train_loss_avg)
    }
}

/// Generates the federation, trains, and with `out` writes `config.json`,
/// `metrics.csv`, `timing.csv`, `model.ckpt` and, when anomalies are
/// enabled, `anomaly_report.csv` and `pr_curve.csv`. An aborted run still
/// writes what it has and is then reported as [`ExperimentError::Aborted`].
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome, ExperimentError> {
    let fed = build_federation(cfg)?;
    if let Some(dir) = out {
        write_file(&dir.join("config.json"), cfg.to_json())?;
    }
    let eval_graphs = fed.truth.as_ref().map(|_| fed.graphs.clone());
    let mut log = run_experiment(&cfg.fed, fed.graphs, out)?;
    if let Some(source) = log.error.take() {
        return Err(ExperimentError::Aborted { completed: log.records.len(), source });
    }
    let anomaly = match (&fed.truth, eval_graphs) {
        (Some(truth), Some(graphs)) => {
            let outcome = evaluate_anomalies(cfg, &graphs, truth, &log.final_params)?;
            if let Some(dir) = out {
                write_file(&dir.join("anomaly_report.csv"), outcome.report.to_csv(&outcome.truth))?;
                write_file(&dir.join("pr_curve.csv"), pr_curve_csv(&outcome.sweep))?;
            }
            Some(outcome)
        }
        _ => None,
    };
    Ok(TrainOutcome { log, anomaly })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub sigma: f64,
    pub malicious_fraction: f64,
    pub robust_mode: String,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub epsilon: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("label,sigma,malicious_fraction,robust_mode,final_accuracy,final_loss,epsilon\n");
    for r in rows {
        let eps = if r.epsilon.is_infinite() { "inf".to_string() } else { r.epsilon.to_string() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{eps}",
            r.label, r.sigma, r.malicious_fraction, r.robust_mode, r.final_accuracy, r.final_loss
        );
    }
    out
}

fn sweep_point(cfg: &ExperimentConfig, label: String, out: Option<&Path>) -> Result<SweepRow, ExperimentError> {
    let dir = out.map(|d| d.join(&label));
    let outcome = train(cfg, dir.as_deref())?;
    Ok(SweepRow {
        label,
        sigma: cfg.fed.dp.noise_multiplier,
        malicious_fraction: cfg.fed.attack.malicious_fraction,
        robust_mode: cfg.fed.robust_mode.as_str().to_string(),
        final_accuracy: outcome.final_accuracy(),
        final_loss: outcome.final_loss(),
        epsilon: outcome.log.records.last().map_or(f64::NAN, |r| r.epsilon),
    })
}

/// One run per noise multiplier; writes `noise_sweep.csv`.
pub fn noise_sweep(cfg: &ExperimentConfig, sigmas: &[f64], out: Option<&Path>) -> Result<Vec<SweepRow>, ExperimentError> {
    let rows = sigmas
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.fed.dp.noise_multiplier = s;
            sweep_point(&c, format!("sigma_{s}"), out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = out {
        write_file(&dir.join("noise_sweep.csv"), sweep_csv(&rows))?;
    }
    Ok(rows)
}

/// One run per (malicious fraction, robust mode) pair on the plain backend,
/// since filtering needs per-client updates; writes `attack_sweep.csv`.
pub fn attack_sweep(
    cfg: &ExperimentConfig,
    fractions: &[f64],
    modes: &[RobustMode],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut rows = vec![];
    for &mode in modes {
        for &f in fractions {
            let mut c = cfg.clone();
            c.fed.backend = Backend::Plain;
            c.fed.robust_mode = mode;
            c.fed.attack.malicious_fraction = f;
            rows.push(sweep_point(&c, format!("malicious_{f}_{}", mode.as_str()), out)?);
        }
    }
    if let Some(dir) = out {
        write_file(&dir.join("attack_sweep.csv"), sweep_csv(&rows))?;
    }
    Ok(rows)
}

/// Fixed-round runs at each client graph size, timing the rounds only
/// (generation excluded). Writes `scaling.csv` with the fit appended.
pub fn scaling_run(
    cfg: &ExperimentConfig,
    sizes: &[usize],
    rounds: usize,
    out: Option<&Path>,
) -> Result<(Vec<ScalingPoint>, LinearFit), ExperimentError> {
    if sizes.len() < 3 {
        return Err(ConfigError::Invalid(format!("scaling needs at least 3 sizes, got {}", sizes.len())).into());
    }
    let mut points = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut c = cfg.clone();
        c.graph.num_nodes = n;
        c.graph.max_nodes = None;
        c.fed.rounds = rounds;
        let outcome = train(&c, None)?;
        points.push(ScalingPoint { num_nodes: n, wall_ms: outcome.log.total_wall_ms(), final_accuracy: outcome.final_accuracy() });
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.num_nodes as f64, p.wall_ms)).collect();
    let fit = linear_fit(&xy).expect("at least 3 points");
    if let Some(dir) = out {
        write_file(&dir.join("scaling.csv"), scaling_csv(&points, Some(&fit)))?;
    }
    Ok((points, fit))
}

/// Per-client uplink bytes of one update under each backend.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub param_count: usize,
    pub plain_bytes: u64,
    pub masked_bytes: u64,
    pub paillier_bytes: u64,
    pub paillier_bits: u64,
    pub masked_ratio: f64,
    pub paillier_ratio: f64,
}

impl OverheadReport {
    pub fn to_csv(&self) -> String {
        format!(
            "backend,bytes_per_client,overhead_vs_plain\nplain,{},0\nmasked,{},{}\npaillier,{},{}\n# baseline: plain-backend update frame; paillier key {} bits; {} parameters\n",
            self.plain_bytes, self.masked_bytes, self.masked_ratio, self.paillier_bytes, self.paillier_ratio,
            self.paillier_bits, self.param_count
        )
    }
}

/// Measures uplink size per client: plain and masked from one real round
/// each, Paillier from one client's encrypted update.
pub fn overhead(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<OverheadReport, ExperimentError> {
    let one_round = |backend: Backend| -> Result<u64, ExperimentError> {
        let mut c = cfg.clone();
        c.fed.backend = backend;
        c.fed.robust_mode = RobustMode::Off;
        c.fed.rounds = 1;
        let outcome = train(&c, None)?;
        Ok(outcome.log.records[0].bytes_up / c.fed.num_clients as u64)
    };
    let plain_bytes = one_round(Backend::Plain)?;
    let masked_bytes = one_round(Backend::Masked)?;

    let mut c = cfg.clone();
    c.fed.backend = Backend::Paillier;
    c.fed.robust_mode = RobustMode::Off;
    let fed = build_federation(&c)?;
    let (server, clients) = setup(&c.fed, fed.graphs)?;
    let update = clients[0].local_update(server.params(), &c.fed, 1)?;
    let paillier_bytes = update.bytes_on_wire() as u64;

    let report = OverheadReport {
        param_count: server.params().param_count(),
        plain_bytes,
        masked_bytes,
        paillier_bytes,
        paillier_bits: c.fed.paillier_bits,
        masked_ratio: overhead_ratio(masked_bytes, plain_bytes),
        paillier_ratio: overhead_ratio(paillier_bytes, plain_bytes),
    };
    if let Some(dir) = out {
        write_file(&dir.join("overhead.csv"), report.to_csv())?;
    }
    Ok(report)
}

pub const RECIPES: [&str; 7] = ["fig1", "fig2", "fig3", "fig4", "fig5", "fig6", "fig7"];
pub const NOISE_LEVELS: [f64; 4] = [0.0, 0.5, 1.1, 1.5];
pub const MALICIOUS_FRACTIONS: [f64; 3] = [0.0, 0.1, 0.2];
pub const SCALING_SIZES: [usize; 3] = [1000, 2000, 4000];
pub const SCALING_ROUNDS: usize = 5;

/// Runs a named recipe into `out` and returns a short text summary.
pub fn run_recipe(name: &str, cfg: &ExperimentConfig, out: &Path) -> Result<String, ExperimentError> {
    let mut s = String::new();
    match name {
        "fig1" => {
            let o = train(cfg, Some(out))?;
            let _ = writeln!(s, "accuracy over {} rounds: final {:.4}", o.log.records.len(), o.final_accuracy());
        }
        "fig2" => {
            let mut c = cfg.clone();
            if c.fed.dp.noise_multiplier == 0.0 {
                c.fed.dp.noise_multiplier = crate::dp::DpConfig::default().noise_multiplier;
            }
            c.fed.backend = Backend::Masked;
            c.fed.robust_mode = RobustMode::Off;
            let o = train(&c, Some(out))?;
            let _ = writeln!(
                s,
                "loss with sigma {} and masked aggregation: first {:.4}, final {:.4}",
                c.fed.dp.noise_multiplier,
                o.log.records.first().map_or(f64::NAN, |r| r.train_loss_avg),
                o.final_loss()
            );
        }
        "fig3" => {
            for r in noise_sweep(cfg, &NOISE_LEVELS, Some(out))? {
                let _ = writeln!(s, "sigma {}: accuracy {:.4}, epsilon {}", r.sigma, r.final_accuracy, r.epsilon);
            }
        }
        "fig4" => {
            for r in attack_sweep(cfg, &MALICIOUS_FRACTIONS, &[RobustMode::Off, RobustMode::NormFilter], Some(out))? {
                let _ = writeln!(s, "malicious {} defense {}: accuracy {:.4}", r.malicious_fraction, r.robust_mode, r.final_accuracy);
            }
        }
        "fig5" => {
            let r = overhead(cfg, Some(out))?;
            let _ = writeln!(s, "per-client uplink bytes: plain {}, masked {}, paillier {}", r.plain_bytes, r.masked_bytes, r.paillier_bytes);
            let _ = writeln!(s, "overhead vs plain: masked {:.4}, paillier {:.2}", r.masked_ratio, r.paillier_ratio);
        }
        "fig6" => {
            let mut c = cfg.clone();
            c.anomaly.enabled = true;
            let o = train(&c, Some(out))?;
            let a = o.anomaly.expect("anomalies enabled");
            let _ = writeln!(
                s,
                "tau {:.4}: flagged {}, planted {}, precision {:.4}, recall {:.4}",
                a.report.threshold,
                a.report.flagged.len(),
                a.truth.len(),
                a.report.precision,
                a.report.recall
            );
        }
        "fig7" => {
            let (points, fit) = scaling_run(cfg, &SCALING_SIZES, SCALING_ROUNDS, Some(out))?;
            for p in &points {
                let _ = writeln!(s, "{} nodes: {:.0} ms", p.num_nodes, p.wall_ms);
            }
            let _ = writeln!(s, "linear fit r_squared {:.4}", fit.r_squared);
        }
        other => return Err(ExperimentError::UnknownRecipe(other.to_string())),
    }
    write_file(&out.join("summary.txt"), &s)?;
    Ok(s)
}
