//! Round-synchronous federated training of the GAT.
//!
//! Each round the server broadcasts the global checkpoint, every client
//! trains locally and returns a privatized, optionally protected
//! pseudo-gradient, and the server applies `θ ← θ − η · aggregate`.

pub mod transport;
pub mod wire;

use std::fs::File;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{epsilon_report, privatize, DpConfig, DpError};
use crate::gat::{loss_and_gradient, model_forward, node_losses, sgd_step, GatError, GatHyper, ModelParams};
use crate::graph::Graph;
use crate::metrics::{accuracy_counts, comm_cost, global_avg_loss, RoundRecord, METRICS_HEADER};
use crate::rng::{derive_seed, stream, Stream};
use crate::secagg::{
    decrypt_aggregate, encrypt_vector, mask_update, paillier_aggregate, paillier_keygen, unmask_sum, Backend,
    FixedPointCodec, PairwiseSecrets, PaillierKeypair, PaillierPublicKey, SecAggError,
};
use crate::threat::{apply_label_flip, poison_gradient, robust_aggregate, AttackKind, AttackSpec, RobustMode, ThreatError};

use transport::{accept_clients, ChannelLink, Link, TcpLink, TransportKind};
use wire::{Frame, GradientUpdate, MsgType, Payload};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed message: {0}")]
    Wire(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Gat(#[from] GatError),
    #[error(transparent)]
    SecAgg(#[from] SecAggError),
    #[error(transparent)]
    Threat(#[from] ThreatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<DpError> for FedError {
    fn from(e: DpError) -> Self {
        FedError::Config(e.to_string())
    }
}

pub const PAILLIER_KEY_SIZES: [u64; 2] = [1024, 2048];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    /// Constant learning rate, used both locally and for the server update.
    pub lr: f64,
    pub local_steps: usize,
    pub batch_nodes: usize,
    pub backend: Backend,
    pub dp: DpConfig,
    pub robust_mode: RobustMode,
    /// Values trimmed from each end under `trimmed_mean`.
    pub trim_k: usize,
    pub attack: AttackSpec,
    pub model: GatHyper,
    pub paillier_bits: u64,
    pub transport: TransportKind,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 10,
            rounds: 100,
            lr: 0.005,
            local_steps: 5,
            batch_nodes: 128,
            backend: Backend::Plain,
            dp: DpConfig::default(),
            robust_mode: RobustMode::Off,
            trim_k: 1,
            attack: AttackSpec::default(),
            model: GatHyper::default(),
            paillier_bits: 1024,
            transport: TransportKind::InProcess,
            seed: 42,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::Config(m));
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1".into());
        }
        if self.num_clients > u32::MAX as usize || self.rounds > u32::MAX as usize {
            return bad("num_clients and rounds must fit in 32 bits".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.local_steps == 0 || self.batch_nodes == 0 {
            return bad("local_steps and batch_nodes must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.model.hidden_dim == 0 || !self.model.leaky_slope.is_finite() {
            return bad("model.hidden_dim must be positive and leaky_slope finite".into());
        }
        self.dp.validate()?;
        self.attack.validate().map_err(|e| FedError::Config(e.to_string()))?;
        if self.backend.is_protected() && self.robust_mode != RobustMode::Off {
            return bad(format!(
                "robust_mode {} needs per-client updates, which the {} backend hides; use robust_mode off",
                self.robust_mode.as_str(),
                self.backend.as_str()
            ));
        }
        if self.robust_mode == RobustMode::TrimmedMean && 2 * self.trim_k >= self.num_clients {
            return bad(format!("trim_k = {} leaves no values among {} clients", self.trim_k, self.num_clients));
        }
        if self.backend == Backend::Paillier && !PAILLIER_KEY_SIZES.contains(&self.paillier_bits) {
            return bad(format!("paillier_bits must be one of {PAILLIER_KEY_SIZES:?}, got {}", self.paillier_bits));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Protection {
    Plain,
    Masked { secrets: Arc<PairwiseSecrets>, roster: Arc<Vec<usize>>, share: f64 },
    Paillier { public: PaillierPublicKey, share: f64 },
}

/// A participant: its (possibly poisoned) training graph and protection keys.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    graph: Graph,
    train_nodes: Vec<usize>,
    /// Labeled-node count.
    pub weight: f64,
    pub malicious: bool,
    protection: Protection,
}

impl Client {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Local training for one round, returning the update to send.
    pub fn local_update(&self, global: &ModelParams, cfg: &FedConfig, round: usize) -> Result<GradientUpdate, FedError> {
        let raw = self.pseudo_gradient(global, cfg, round)?;
        let id = self.id as u64;
        let r = round as u64;
        let private = privatize(&raw, &cfg.dp, &mut stream(cfg.seed, Stream::DpNoise, id, r));
        let sent = if self.malicious && cfg.attack.poisons_gradient() {
            poison_gradient(&private, &cfg.attack, &mut stream(cfg.seed, Stream::Poison, id, r))
        } else {
            private
        };
        let codec = FixedPointCodec::default();
        let payload = match &self.protection {
            Protection::Plain => Payload::Plain(sent),
            Protection::Masked { secrets, roster, share } => {
                let scaled: Vec<f64> = sent.iter().map(|x| x * share).collect();
                let ring = FixedPointCodec::to_ring(&codec.encode(&scaled)?);
                Payload::Ring(mask_update(&ring, &secrets.context(self.id, r), roster)?)
            }
            Protection::Paillier { public, share } => {
                let scaled: Vec<f64> = sent.iter().map(|x| x * share).collect();
                let encoded = codec.encode(&scaled)?;
                Payload::Paillier(encrypt_vector(public, &encoded, &mut stream(cfg.seed, Stream::Paillier, id, r)))
            }
        };
        Ok(GradientUpdate { client_id: self.id as u32, round: round as u32, weight: self.weight, payload })
    }

    /// Sum of the local-step gradients, which equals `(θ_global − θ_local)/η`
    /// under a constant learning rate without the rounding of a subtraction.
    pub fn pseudo_gradient(&self, global: &ModelParams, cfg: &FedConfig, round: usize) -> Result<Vec<f64>, FedError> {
        let mut rng = stream(cfg.seed, Stream::Batch, self.id as u64, round as u64);
        let mut local = global.clone();
        let mut sum = vec![0.0; global.param_count()];
        for _ in 0..cfg.local_steps {
            let batch = if self.train_nodes.len() <= cfg.batch_nodes {
                self.train_nodes.clone()
            } else {
                let mut picked: Vec<usize> = sample(&mut rng, self.train_nodes.len(), cfg.batch_nodes)
                    .into_iter()
                    .map(|i| self.train_nodes[i])
                    .collect();
                picked.sort_unstable();
                picked
            };
            let (_, grad) = loss_and_gradient(&self.graph, &local, self.graph.labels(), &batch)?;
            local = sgd_step(&local, &grad, cfg.lr)?;
            sum.iter_mut().zip(&grad).for_each(|(s, g)| *s += g);
        }
        Ok(sum)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutcome {
    pub aggregate: Vec<f64>,
    /// Clients dropped by a robust filter.
    pub excluded: Vec<usize>,
    /// The filter rejected everyone and a zero update was used.
    pub fell_back: bool,
}

/// Weighted mean of one round's updates. Protected payloads arrive
/// pre-scaled by each client's weight share, so their sum is the mean.
pub fn aggregate(
    updates: &[GradientUpdate],
    cfg: &FedConfig,
    keypair: Option<&PaillierKeypair>,
    param_count: usize,
) -> Result<AggregateOutcome, FedError> {
    let k = cfg.num_clients;
    if updates.len() != k {
        return Err(FedError::Protocol(format!("expected {k} updates, got {}", updates.len())));
    }
    let round = updates[0].round;
    for (i, u) in updates.iter().enumerate() {
        if u.client_id as usize != i {
            return Err(FedError::Protocol(format!("update {i} came from client {}", u.client_id)));
        }
        if u.round != round {
            return Err(FedError::Protocol(format!("client {i} sent round {} during round {round}", u.round)));
        }
        if u.payload.len() != param_count {
            return Err(FedError::Protocol(format!(
                "client {i} sent {} values, model has {param_count}",
                u.payload.len()
            )));
        }
    }
    let wrong = |i: usize| FedError::Protocol(format!("client {i} sent a payload not matching backend {}", cfg.backend.as_str()));
    let codec = FixedPointCodec::default();
    match cfg.backend {
        Backend::Plain => {
            let vecs = updates
                .iter()
                .enumerate()
                .map(|(i, u)| match &u.payload {
                    Payload::Plain(v) => Ok(v.clone()),
                    _ => Err(wrong(i)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let weights: Vec<f64> = updates.iter().map(|u| u.weight).collect();
            let out = robust_aggregate(&vecs, &weights, cfg.robust_mode, cfg.trim_k)?;
            Ok(AggregateOutcome { aggregate: out.aggregate, excluded: out.excluded, fell_back: out.fell_back })
        }
        Backend::Masked => {
            let masked = updates
                .iter()
                .enumerate()
                .map(|(i, u)| match &u.payload {
                    Payload::Ring(v) => Ok((i, v.clone())),
                    _ => Err(wrong(i)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let roster: Vec<usize> = (0..k).collect();
            let sum = unmask_sum(&masked, &roster)?;
            Ok(AggregateOutcome { aggregate: codec.decode_ring(&sum), excluded: vec![], fell_back: false })
        }
        Backend::Paillier => {
            let kp = keypair.ok_or_else(|| FedError::Setup("Paillier backend without a keypair".into()))?;
            let cts = updates
                .iter()
                .enumerate()
                .map(|(i, u)| match &u.payload {
                    Payload::Paillier(v) => Ok(v.clone()),
                    _ => Err(wrong(i)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let agg = paillier_aggregate(&cts, &kp.public)?;
            Ok(AggregateOutcome { aggregate: decrypt_aggregate(&agg, kp, &codec, k)?, excluded: vec![], fell_back: false })
        }
    }
}

/// Server state: the global model, the decryption key (standing in for a
/// separate key authority) and clean copies of the client graphs used only
/// for evaluation.
pub struct Server {
    cfg: FedConfig,
    params: ModelParams,
    keypair: Option<PaillierKeypair>,
    eval_graphs: Vec<Graph>,
    round: usize,
    malicious: Vec<usize>,
}

/// Builds the server and clients for `graphs`, one per client.
pub fn setup(cfg: &FedConfig, graphs: Vec<Graph>) -> Result<(Server, Vec<Client>), FedError> {
    cfg.validate()?;
    let k = cfg.num_clients;
    if graphs.len() != k {
        return Err(FedError::Setup(format!("{} graphs for {k} clients", graphs.len())));
    }
    let (f, c) = (graphs[0].feature_dim(), graphs[0].num_classes());
    for (i, g) in graphs.iter().enumerate() {
        if g.feature_dim() != f || g.num_classes() != c {
            return Err(FedError::Setup(format!(
                "client {i} has {} features and {} classes, client 0 has {f} and {c}",
                g.feature_dim(),
                g.num_classes()
            )));
        }
        if g.train_nodes().is_empty() {
            return Err(FedError::Setup(format!("client {i} has no labeled training nodes")));
        }
    }
    if graphs.iter().all(|g| g.test_nodes().is_empty()) {
        return Err(FedError::Setup("no client has test nodes".into()));
    }

    let params = ModelParams::glorot(f, c, cfg.model, derive_seed(cfg.seed, &[Stream::Init as u64]));
    let malicious = cfg.attack.malicious_clients(k, cfg.seed);
    let weights: Vec<f64> = graphs.iter().map(|g| g.train_nodes().len() as f64).collect();
    let total: f64 = weights.iter().sum();
    let keypair = match cfg.backend {
        Backend::Paillier => Some(paillier_keygen(
            cfg.paillier_bits,
            &mut stream(cfg.seed, Stream::Paillier, u64::MAX, 0),
        )?),
        _ => None,
    };
    let roster: Arc<Vec<usize>> = Arc::new((0..k).collect());
    let secrets = Arc::new(PairwiseSecrets::derive(cfg.seed, &roster));

    let clients = graphs
        .iter()
        .enumerate()
        .map(|(id, g)| {
            let is_malicious = malicious.contains(&id);
            let graph = if is_malicious && cfg.attack.kind == AttackKind::LabelFlip {
                apply_label_flip(g, &cfg.attack, derive_seed(cfg.seed, &[Stream::Attack as u64, id as u64]))
            } else {
                g.clone()
            };
            let share = weights[id] / total;
            let protection = match cfg.backend {
                Backend::Plain => Protection::Plain,
                Backend::Masked => Protection::Masked { secrets: secrets.clone(), roster: roster.clone(), share },
                Backend::Paillier => Protection::Paillier {
                    public: keypair.as_ref().expect("generated above").public.clone(),
                    share,
                },
            };
            Client { id, train_nodes: graph.train_nodes(), graph, weight: weights[id], malicious: is_malicious, protection }
        })
        .collect();
    let server = Server { cfg: cfg.clone(), params, keypair, eval_graphs: graphs, round: 0, malicious };
    Ok((server, clients))
}

impl Server {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn malicious(&self) -> &[usize] {
        &self.malicious
    }

    pub fn keypair(&self) -> Option<&PaillierKeypair> {
        self.keypair.as_ref()
    }

    pub fn eval_graphs(&self) -> &[Graph] {
        &self.eval_graphs
    }

    /// Reads and checks the HELLO of every in-process client.
    pub fn handshake(&self, links: &mut [Box<dyn Link>]) -> Result<(), FedError> {
        for (i, link) in links.iter_mut().enumerate() {
            let f = link.recv()?;
            if f.kind != MsgType::Hello || f.payload_u32()? as usize != i {
                return Err(FedError::Protocol(format!("bad HELLO on link {i}")));
            }
        }
        Ok(())
    }

    /// Pooled train loss (node-count weighted) and pooled test accuracy of
    /// the current global model on the clean client graphs.
    pub fn evaluate(&self) -> Result<(f64, f64), FedError> {
        let mut per_client = Vec::with_capacity(self.eval_graphs.len());
        let (mut hits, mut total) = (0, 0);
        for g in &self.eval_graphs {
            let trace = model_forward(g, &self.params)?;
            let train = g.train_nodes();
            let losses = node_losses(&trace, g.labels(), &train);
            per_client.push((losses.iter().sum::<f64>() / losses.len() as f64, losses.len()));
            let test = g.test_nodes();
            if !test.is_empty() {
                let (h, t) = accuracy_counts(trace.logits(), g.labels(), &test).map_err(|e| FedError::Setup(e.to_string()))?;
                hits += h;
                total += t;
            }
        }
        Ok((global_avg_loss(&per_client), hits as f64 / total as f64))
    }

    /// One synchronous round over `links`, indexed by client id.
    pub fn run_round(&mut self, links: &mut [Box<dyn Link>]) -> Result<RoundRecord, FedError> {
        let start = Instant::now();
        let round = self.round + 1;
        let k = self.cfg.num_clients;
        if links.len() != k {
            return Err(FedError::Setup(format!("{} links for {k} clients", links.len())));
        }
        let model = Frame::new(MsgType::GlobalModel, self.params.to_checkpoint());
        let mut bytes_down = 0u64;
        for link in links.iter_mut() {
            bytes_down += link.send(&model)? as u64;
        }
        let mut updates = Vec::with_capacity(k);
        let mut sizes = Vec::with_capacity(k);
        let mut bytes_up = 0u64;
        for (i, link) in links.iter_mut().enumerate() {
            let f = link.recv()?;
            if f.kind != MsgType::Update {
                return Err(FedError::Protocol(format!("client {i} sent {:?} instead of an update", f.kind)));
            }
            bytes_up += f.wire_len() as u64;
            sizes.push(f.payload.len() as u64);
            let u = GradientUpdate::decode(&f.payload)?;
            if u.client_id as usize != i || u.round as usize != round {
                return Err(FedError::Protocol(format!(
                    "link {i} delivered client {} round {} during round {round}",
                    u.client_id, u.round
                )));
            }
            updates.push(u);
        }
        let outcome = aggregate(&updates, &self.cfg, self.keypair.as_ref(), self.params.param_count())?;
        self.params = sgd_step(&self.params, &outcome.aggregate, self.cfg.lr)?;
        for link in links.iter_mut() {
            bytes_down += link.send(&Frame::round_done(round as u32))? as u64;
        }
        self.round = round;
        let (train_loss_avg, test_accuracy) = self.evaluate()?;

        let mut notes = vec![];
        if !outcome.excluded.is_empty() {
            let ids: Vec<String> = outcome.excluded.iter().map(|i| i.to_string()).collect();
            notes.push(format!("excluded={}", ids.join(" ")));
        }
        if outcome.fell_back {
            notes.push("all updates rejected".to_string());
        }
        Ok(RoundRecord {
            round,
            train_loss_avg,
            test_accuracy,
            bytes_up,
            bytes_down,
            comm_cost: comm_cost(&sizes),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            epsilon: epsilon_report(&self.cfg.dp, round),
            backend: self.cfg.backend.as_str().to_string(),
            notes: notes.join(" "),
        })
    }
}

/// Client side of the protocol: HELLO, then answer every GLOBAL_MODEL with
/// an UPDATE until SHUTDOWN.
pub fn client_loop(client: &Client, cfg: &FedConfig, link: &mut dyn Link) -> Result<(), FedError> {
    link.send(&Frame::hello(client.id as u32))?;
    let mut round = 1;
    loop {
        let f = link.recv()?;
        match f.kind {
            MsgType::GlobalModel => {
                let global = ModelParams::from_checkpoint(&f.payload)?;
                link.send(&client.local_update(&global, cfg, round)?.into_frame())?;
            }
            MsgType::RoundDone => round = f.payload_u32()? as usize + 1,
            MsgType::Shutdown => return Ok(()),
            other => return Err(FedError::Protocol(format!("client {} got unexpected {other:?}", client.id))),
        }
    }
}

/// Incremental writer for `metrics.csv` and the `timing.csv` sidecar.
pub struct CsvSink {
    dir: PathBuf,
    metrics: File,
    timing: File,
}

impl CsvSink {
    pub fn create(dir: &Path) -> Result<CsvSink, FedError> {
        std::fs::create_dir_all(dir)?;
        let mut metrics = File::create(dir.join("metrics.csv"))?;
        writeln!(metrics, "{METRICS_HEADER}")?;
        let mut timing = File::create(dir.join("timing.csv"))?;
        writeln!(timing, "round,wall_ms")?;
        Ok(CsvSink { dir: dir.to_path_buf(), metrics, timing })
    }

    pub fn append(&mut self, r: &RoundRecord) -> Result<(), FedError> {
        writeln!(self.metrics, "{}", r.csv_row())?;
        self.metrics.flush()?;
        writeln!(self.timing, "{}", r.timing_row())?;
        self.timing.flush()?;
        Ok(())
    }

    pub fn write_checkpoint(&self, params: &ModelParams) -> Result<(), FedError> {
        std::fs::write(self.dir.join("model.ckpt"), params.to_checkpoint())?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct ExperimentLog {
    pub records: Vec<RoundRecord>,
    pub final_params: ModelParams,
    pub malicious: Vec<usize>,
    /// Set when a round aborted; `records` then holds the completed rounds.
    pub error: Option<FedError>,
}

impl ExperimentLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_accuracy)
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.records.iter().map(|r| r.wall_ms).sum()
    }
}

/// Runs `cfg.rounds` rounds over the configured transport. Setup problems
/// are returned as errors; a failed round ends the run and is reported in
/// [`ExperimentLog::error`]. With `out_dir`, CSV rows are written as rounds
/// complete and the final model is checkpointed.
pub fn run_experiment(cfg: &FedConfig, graphs: Vec<Graph>, out_dir: Option<&Path>) -> Result<ExperimentLog, FedError> {
    let (mut server, clients) = setup(cfg, graphs)?;
    let mut sink = out_dir.map(CsvSink::create).transpose()?;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut error = None;

    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(clients.len());
        let links: Result<Vec<Box<dyn Link>>, FedError> = match cfg.transport {
            TransportKind::InProcess => {
                let mut links: Vec<Box<dyn Link>> = Vec::with_capacity(clients.len());
                for client in &clients {
                    let (server_end, mut client_end) = ChannelLink::pair();
                    handles.push(scope.spawn(move || client_loop(client, cfg, &mut client_end)));
                    links.push(Box::new(server_end));
                }
                server.handshake(&mut links).map(|_| links)
            }
            TransportKind::Tcp => match TcpListener::bind("127.0.0.1:0").and_then(|l| Ok((l.local_addr()?, l))) {
                Err(e) => Err(FedError::Transport(format!("bind: {e}"))),
                Ok((addr, listener)) => {
                    for client in &clients {
                        handles.push(scope.spawn(move || {
                            let mut link = TcpLink::connect(addr)?;
                            client_loop(client, cfg, &mut link)
                        }));
                    }
                    accept_clients(&listener, clients.len())
                }
            },
        };
        match links {
            Err(e) => error = Some(e),
            Ok(mut links) => {
                for _ in 0..cfg.rounds {
                    match server.run_round(&mut links).and_then(|r| {
                        if let Some(s) = sink.as_mut() {
                            s.append(&r)?;
                        }
                        Ok(r)
                    }) {
                        Ok(r) => records.push(r),
                        Err(e) => {
                            error = Some(e);
                            break;
                        }
                    }
                }
                for link in links.iter_mut() {
                    let _ = link.send(&Frame::shutdown());
                }
            }
        }
        // dropping the server ends here unblocks any client still waiting
        for h in handles {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    if matches!(error, None | Some(FedError::Transport(_))) && !matches!(e, FedError::Transport(_)) {
                        error = Some(e);
                    }
                }
                Err(_) => error = error.take().or(Some(FedError::Setup("client thread panicked".into()))),
            }
        }
    });

    if let Some(s) = &sink {
        s.write_checkpoint(server.params())?;
    }
    Ok(ExperimentLog {
        records,
        final_params: server.params().clone(),
        malicious: server.malicious().to_vec(),
        error,
    })
}
