//! The federated round loop.
//!
//! Each round the server broadcasts θ, every client evaluates per-sample
//! gradients on its shard, reshapes them with its leave-one-out baseline
//! and reports the mean, and the server combines the reports with its own
//! control variate before taking a gradient step. Participation is full.

use std::borrow::Borrow;

use rayon::prelude::*;

use crate::data::{self, LabeledDataset, Partition, PartitionSpec};
use crate::error::{ClientId, Error, Result};
use crate::estimators::{
    self, ClientGradSet, ClientMap, ClientWeighting, CvConfig, Flavor,
};
use crate::models::{self, LabeledSample, ModelSpec};
use crate::numeric::{self, derive_stream, stream_key, GradVec, RngStream};
use crate::run_config::{Algorithm, AlphaMode, PartitionMode, RunConfig};

const TAG_INIT: u64 = 10;
const TAG_CLIENT: u64 = 11;

/// Step for the finite-difference α slope reported in descent mode.
pub const DESCENT_EPS: f64 = 1e-3;
/// Any parameter beyond this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: ClientId,
    pub indices: Vec<usize>,
    pub alpha_u: f64,
    pub rng: RngStream,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta: GradVec,
    pub gamma: f64,
    pub round: usize,
    pub cfg: CvConfig,
    pub alpha_mode: AlphaMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: ClientId,
    pub g_u: GradVec,
    pub n_u: usize,
    /// Mean loss over the client's samples at the point the gradients were taken.
    pub local_loss: f64,
    /// The α actually applied; 0 for a pass-through client.
    pub alpha_used: f64,
    /// Set when the client had a single sample and skipped reshaping.
    pub passthrough: bool,
    /// Raw per-sample gradients, kept only when the server needs them.
    pub aux: Option<Vec<GradVec>>,
    /// Central-difference slope of `‖g_u‖²` in α, for descent mode.
    pub descent_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub grad_dispersion: f64,
    pub global_grad_norm: f64,
    pub alpha_mean: f64,
    pub beta: f64,
}

impl RoundMetrics {
    fn is_finite(&self) -> bool {
        [
            self.train_loss,
            self.test_accuracy,
            self.grad_dispersion,
            self.global_grad_norm,
            self.alpha_mean,
            self.beta,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// What a client does with its gradients in a round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub alpha_mode: AlphaMode,
    pub local_steps: usize,
    /// Step size of the extra local steps when `local_steps > 1`.
    pub local_lr: f64,
    pub resample: bool,
}

/// `(initial CvConfig, α mode)` for an algorithm.
pub fn algorithm_select(
    kind: Algorithm,
    ids: impl IntoIterator<Item = ClientId>,
    alpha_mode: AlphaMode,
    alpha: f64,
    beta: f64,
) -> (CvConfig, AlphaMode) {
    let flavor = Flavor::GradientBaseline;
    match kind {
        Algorithm::FedAvg => (CvConfig::uniform(ids, 0.0, 0.0, flavor), AlphaMode::Fixed),
        Algorithm::ClientCv => (CvConfig::uniform(ids, alpha, 0.0, flavor), alpha_mode),
        Algorithm::FedNcv => (CvConfig::uniform(ids, alpha, beta, flavor), alpha_mode),
    }
}

fn mean_loss_and_grads(
    spec: &ModelSpec,
    theta: &GradVec,
    samples: &[&LabeledSample],
) -> Result<(f64, Vec<GradVec>)> {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for s in samples {
        loss += models::forward_loss(spec, theta, s)?;
        grads.push(models::per_sample_grad(spec, theta, s)?);
    }
    Ok((loss / samples.len() as f64, grads))
}

/// One client's work for a round.
pub fn local_round(
    client: &ClientState,
    theta: &GradVec,
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    cfg: &LocalConfig,
    round: usize,
) -> Result<ClientReport> {
    if client.indices.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no samples", client.client_id)));
    }
    let all = dataset.samples();
    let indices: Vec<usize> = if cfg.resample {
        use rand::Rng;
        let mut rng = client.rng.child(round as u64);
        (0..client.indices.len())
            .map(|_| client.indices[rng.random_range(0..client.indices.len())])
            .collect()
    } else {
        client.indices.clone()
    };
    let samples: Vec<&LabeledSample> = indices
        .iter()
        .map(|&i| {
            all.get(i).ok_or(Error::IndexOutOfRange {
                index: i,
                len: all.len(),
            })
        })
        .collect::<Result<_>>()?;

    let mut point = theta.clone();
    for _ in 1..cfg.local_steps {
        let (_, grads) = mean_loss_and_grads(spec, &point, &samples)?;
        point.add_scaled(-cfg.local_lr, &numeric::mean(&grads)?);
    }
    let (local_loss, grads) = mean_loss_and_grads(spec, &point, &samples)?;

    let set = ClientGradSet::new(client.client_id, grads);
    let reshaped = estimators::reshape_or_passthrough(&set, client.alpha_u)?;
    let g_u = estimators::client_aggregate(&reshaped.values, ClientWeighting::Uniform)?;
    if !g_u.is_finite() {
        return Err(Error::NonFinite);
    }
    let descent_slope = match (cfg.alpha_mode, reshaped.passthrough) {
        (AlphaMode::Descent, false) => Some(estimators::aggregate_norm_sq_slope(
            &set,
            client.alpha_u,
            DESCENT_EPS,
        )?),
        _ => None,
    };
    let aux = (cfg.alpha_mode == AlphaMode::ClosedForm).then(|| set.per_sample.clone());
    Ok(ClientReport {
        client_id: client.client_id,
        g_u,
        n_u: set.n(),
        local_loss,
        alpha_used: if reshaped.passthrough { 0.0 } else { client.alpha_u },
        passthrough: reshaped.passthrough,
        aux,
        descent_slope,
    })
}

/// `Σ_u (n_u/n) ‖g_u - ḡ‖²` with `ḡ = Σ_u (n_u/n) g_u`.
pub fn grad_dispersion<R: Borrow<ClientReport>>(reports: &[R]) -> Result<f64> {
    let aggregates: Vec<GradVec> = reports.iter().map(|r| r.borrow().g_u.clone()).collect();
    let weights: Vec<f64> = reports.iter().map(|r| r.borrow().n_u as f64).collect();
    let center = numeric::weighted_mean(&aggregates, &weights)?;
    let n: f64 = weights.iter().sum();
    Ok(aggregates
        .iter()
        .zip(&weights)
        .map(|(g, w)| w / n * numeric::norm_sq(&g.minus_scaled(1.0, &center)))
        .sum())
}

/// Server half of a round: aggregate, step, update α, measure.
pub fn global_round(
    server: &ServerState,
    reports: &[ClientReport],
    testset: &LabeledDataset,
    spec: &ModelSpec,
) -> Result<(ServerState, RoundMetrics)> {
    if reports.is_empty() {
        return Err(Error::Empty);
    }
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);

    let mut aggregates = ClientMap::new();
    let mut sizes = ClientMap::new();
    for r in &sorted {
        if aggregates.insert(r.client_id, r.g_u.clone()).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate report from {}", r.client_id)));
        }
        sizes.insert(r.client_id, r.n_u);
    }
    let divergence = |reason: String| Error::Divergence {
        round: server.round,
        reason,
    };
    let g = match estimators::server_aggregate(&aggregates, &sizes, server.cfg.beta) {
        Err(Error::NonFinite) => return Err(divergence("non-finite global gradient".into())),
        other => other?,
    };

    let theta = server.theta.minus_scaled(server.gamma, &g);
    if !theta.is_finite() {
        return Err(divergence("non-finite parameters".into()));
    }
    if theta.max_abs() > DIVERGENCE_LIMIT {
        return Err(divergence(format!(
            "parameter magnitude {:e} exceeds {DIVERGENCE_LIMIT:e}",
            theta.max_abs()
        )));
    }

    let n: usize = sorted.iter().map(|r| r.n_u).sum();
    let train_loss = sorted
        .iter()
        .map(|r| r.n_u as f64 / n as f64 * r.local_loss)
        .sum();
    let alpha_mean =
        sorted.iter().map(|r| r.alpha_used).sum::<f64>() / sorted.len() as f64;
    let (_, test_accuracy) = models::evaluate(spec, &theta, testset.samples())?;

    let mut cfg = server.cfg.clone();
    match server.alpha_mode {
        AlphaMode::Fixed => {}
        AlphaMode::Descent => {
            for r in &sorted {
                if let Some(slope) = r.descent_slope {
                    let a = cfg.alpha_for(r.client_id)?;
                    cfg.alphas.insert(
                        r.client_id,
                        estimators::alpha_descent_update(a, server.gamma, slope)?,
                    );
                }
            }
        }
        AlphaMode::ClosedForm => {
            let sets: Vec<ClientGradSet> = sorted
                .iter()
                .filter(|r| r.n_u >= 2)
                .map(|r| {
                    r.aux
                        .clone()
                        .map(|g| ClientGradSet::new(r.client_id, g))
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "{} sent no per-sample gradients",
                                r.client_id
                            ))
                        })
                })
                .collect::<Result<_>>()?;
            // Degenerate rounds (or fewer than two usable clients) keep the previous α.
            if let Ok(alpha) = estimators::pooled_optimal_alpha(&sets) {
                let alpha = alpha.clamp(0.0, 1.0);
                for a in cfg.alphas.values_mut() {
                    *a = alpha;
                }
            }
        }
    }

    let metrics = RoundMetrics {
        round: server.round + 1,
        train_loss,
        test_accuracy,
        grad_dispersion: grad_dispersion(&sorted)?,
        global_grad_norm: numeric::norm_sq(&g).sqrt(),
        alpha_mean,
        beta: server.cfg.beta,
    };
    if !metrics.is_finite() {
        return Err(divergence("non-finite metrics".into()));
    }
    Ok((
        ServerState {
            theta,
            gamma: server.gamma,
            round: server.round + 1,
            cfg,
            alpha_mode: server.alpha_mode,
        },
        metrics,
    ))
}

/// Everything a run needs once data has been generated and partitioned.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub spec: ModelSpec,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: Partition,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub local: LocalConfig,
    pub rounds: usize,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub theta: GradVec,
    /// The divergence that stopped the run early, if any.
    pub aborted: Option<Error>,
}

/// Loads or synthesizes data, splits, partitions and initializes θ.
pub fn prepare(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    let full = match &cfg.dataset {
        Some(path) => data::load_dataset(path)?,
        None => data::synth_gaussian_mixture(
            cfg.num_classes,
            cfg.input_dim,
            cfg.n_samples,
            cfg.spread,
            cfg.seed,
        )?,
    };
    let (train, test) = full.train_test_split(TEST_FRACTION, cfg.seed)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("dataset too small for a test split".into()));
    }
    let partition = match cfg.partition {
        PartitionMode::Dirichlet => data::dirichlet_partition(
            &train,
            &PartitionSpec {
                num_clients: cfg.clients,
                concentration: cfg.dirichlet,
                min_per_client: cfg.min_per_client,
                seed: cfg.seed,
            },
        )?,
        PartitionMode::IidEqual => data::iid_partition(train.len(), cfg.clients, cfg.seed)?,
    };
    if let Some((id, _)) = partition.assignment.iter().find(|(_, idx)| idx.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "{id} received no samples; raise min_per_client"
        )));
    }

    let spec = cfg.model_spec(train.input_dim(), train.num_classes());
    let theta = spec.init(&mut derive_stream(cfg.seed, stream_key(&[TAG_INIT])))?;
    let ids: Vec<ClientId> = partition.assignment.keys().copied().collect();
    let (cv, alpha_mode) =
        algorithm_select(cfg.algorithm, ids, cfg.alpha_mode, cfg.alpha, cfg.beta);
    if cv.beta != 0.0 && cfg.clients < 2 {
        return Err(Error::SingleClient);
    }
    let clients = partition
        .assignment
        .iter()
        .map(|(id, idx)| ClientState {
            client_id: *id,
            indices: idx.clone(),
            alpha_u: cv.alphas[id],
            rng: derive_stream(cfg.seed, stream_key(&[TAG_CLIENT, id.0 as u64])),
        })
        .collect();
    Ok(Experiment {
        spec,
        train,
        test,
        partition,
        clients,
        server: ServerState {
            theta,
            gamma: cfg.gamma,
            round: 0,
            cfg: cv,
            alpha_mode,
        },
        local: LocalConfig {
            alpha_mode,
            local_steps: cfg.local_steps,
            local_lr: cfg.gamma,
            resample: cfg.resample,
        },
        rounds: cfg.rounds,
    })
}

impl Experiment {
    /// One broadcast, local, global cycle.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        for c in &mut self.clients {
            c.alpha_u = self.server.cfg.alpha_for(c.client_id)?;
        }
        let theta = &self.server.theta;
        let round = self.server.round;
        let reports: Vec<ClientReport> = self
            .clients
            .par_iter()
            .map(|c| local_round(c, theta, &self.spec, &self.train, &self.local, round))
            .collect::<Result<_>>()?;
        let (server, metrics) = global_round(&self.server, &reports, &self.test, &self.spec)?;
        self.server = server;
        Ok(metrics)
    }

    /// Runs every remaining round. A divergence stops the loop and is
    /// reported in the outcome alongside the rounds completed before it.
    pub fn run(mut self) -> Result<RunOutcome> {
        let mut metrics = Vec::with_capacity(self.rounds);
        let mut aborted = None;
        while self.server.round < self.rounds {
            match self.step() {
                Ok(m) => metrics.push(m),
                Err(e @ Error::Divergence { .. }) => {
                    aborted = Some(e);
                    break;
                }
                Err(Error::NonFinite) => {
                    aborted = Some(Error::Divergence {
                        round: self.server.round,
                        reason: "non-finite client gradient".into(),
                    });
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(RunOutcome {
            metrics,
            theta: self.server.theta,
            aborted,
        })
    }
}

/// Prepares and runs a configuration on a pool of `cfg.threads` workers.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| prepare(cfg)?.run())
}
