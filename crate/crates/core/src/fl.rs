//! The federation state machine.
//!
//! One round is: sample M clients -> broadcast the global head -> each
//! participant trains on its own unlabeled low-res data -> size-weighted
//! aggregation -> soft parameter mixing with the previous server head ->
//! supervised server training on labeled high-res data -> evaluation.
//! A warm-up phase (plain supervised training) produces the round-0 head.
//!
//! Determinism: every random decision draws from a stream keyed by
//! `(seed, purpose, id, round)`, clients are processed in ascending id
//! order, and all accumulations run in fixed order — so a federation is
//! bit-reproducible and independent of client registration order.

use crate::cost;
use crate::data::{extract_features, LabeledSample, Resolution, World};
use crate::error::{Error, Result};
use crate::moe::{route_spatial, HeadConfig, RoutingMode, TaskHead};
use crate::rng::{derive_rng, derive_rng2};
use crate::ssl::{client_local_train, SSLConfig};
use crate::tensor::{argmax_channel, Graph, Optimizer, OptimizerKind, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Optimizer settings as plain data (so configs can build fresh
/// optimizers for each training phase).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    /// `"sgd_momentum"` or `"adamw"`.
    pub kind: String,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            kind: "sgd_momentum".into(),
            learning_rate: 0.05,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerSettings {
    /// AdamW defaults matching the reference training setup.
    pub fn adamw_default() -> Self {
        OptimizerSettings {
            kind: "adamw".into(),
            learning_rate: 1e-4,
            weight_decay: 0.05,
            ..Default::default()
        }
    }

    pub fn build(&self) -> Result<Optimizer> {
        let kind = match self.kind.as_str() {
            "sgd_momentum" => OptimizerKind::SgdMomentum { momentum: self.momentum },
            "adamw" => OptimizerKind::AdamW {
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            other => {
                return Err(Error::Config(format!(
                    "optim.kind must be sgd_momentum or adamw, got `{other}`"
                )))
            }
        };
        Ok(Optimizer::new(kind, self.learning_rate, self.weight_decay))
    }

    pub fn validate(&self) -> Result<()> {
        self.build().map(|_| ())?;
        if self.learning_rate < 0.0 {
            return Err(Error::Config("optim.learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Federation-level knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FLConfig {
    pub seed: u64,
    pub sample_ratio: f64,
    pub rounds: u32,
    pub warmup_epochs: u32,
    pub server_epochs_per_round: u32,
    /// Soft-mixture weight on the previous server head.
    pub alpha: f64,
    pub aggregator: String,
    /// Weight client updates by n_i over the global n (the literal
    /// formula) instead of normalizing over participants.
    pub literal_global_weighting: bool,
    /// Run the server phases (warm-up and per-round training) on the
    /// low-resolution view of the server data.
    pub server_low_res: bool,
}

impl Default for FLConfig {
    fn default() -> Self {
        FLConfig {
            seed: 0,
            sample_ratio: 0.33,
            rounds: 50,
            warmup_epochs: 50,
            server_epochs_per_round: 1,
            alpha: 0.1,
            aggregator: "fedavg".into(),
            literal_global_weighting: false,
            server_low_res: false,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "fl.sample_ratio must be in (0, 1], got {}",
                self.sample_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("fl.alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.aggregator != "fedavg" {
            return Err(Error::Config(format!(
                "fl.aggregator must be `fedavg`, got `{}`",
                self.aggregator
            )));
        }
        Ok(())
    }

    /// Participants per round: round-half-up with a floor of one.
    pub fn participants_per_round(&self, num_clients: u32) -> u32 {
        let m = (self.sample_ratio * f64::from(num_clients) + 0.5).floor() as u32;
        m.clamp(1, num_clients)
    }
}

/// Everything a federation run needs besides the world itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSetup {
    pub fl: FLConfig,
    pub ssl: SSLConfig,
    pub head: HeadConfig,
    pub optim: OptimizerSettings,
}

/// One registered client: identity, domain and sample count. The actual
/// data stays in the [`World`]; records are sorted by id on construction
/// so registration order never matters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: u32,
    pub domain_id: u32,
    pub num_samples: usize,
}

/// Mutable federation state carried across rounds.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub global_head: TaskHead,
    /// The server model of the previous round, retained for soft mixing.
    pub prev_server_head: TaskHead,
    pub round: u32,
    pub clients: Vec<ClientRecord>,
}

impl FederationState {
    pub fn new(initial_head: TaskHead, mut clients: Vec<ClientRecord>) -> Self {
        clients.sort_by_key(|c| c.client_id);
        FederationState {
            prev_server_head: initial_head.clone(),
            global_head: initial_head,
            round: 0,
            clients,
        }
    }

    pub fn total_client_samples(&self) -> usize {
        self.clients.iter().map(|c| c.num_samples).sum()
    }
}

/// Per-round log record; one JSON object per line in the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub total_accuracy: f64,
    pub per_domain_accuracy: BTreeMap<String, f64>,
    pub server_loss: f64,
    /// Mean client training loss over this round's participants; absent
    /// for the warm-up record.
    pub mean_client_loss: Option<f64>,
    /// Pseudo-label coverage per participating client.
    pub pseudo_coverage: BTreeMap<String, f64>,
    /// Fraction of evaluated pixels routed to each expert.
    pub expert_load: Vec<f64>,
    /// Parameters moved this round: 2*M*P after warm-up; the one-time
    /// backbone broadcast (N * backbone parameters) at round 0.
    pub params_communicated: u64,
    /// Analytic forward FLOPs of one client training step (backbone
    /// included) at client resolution.
    pub flops_client_step: u64,
    pub backbone_hash: String,
    pub participants: Vec<u32>,
}

/// Uniform sample of `m` client ids without replacement, keyed by the
/// sampler stream for `(seed, round)`; ids are returned sorted.
pub fn sample_clients(ids: &[u32], m: u32, seed: u64, round: u32) -> Vec<u32> {
    let mut pool: Vec<u32> = ids.to_vec();
    pool.sort_unstable();
    let m = (m as usize).min(pool.len());
    let mut rng = derive_rng2(seed, "sampler", u64::from(round), 0);
    for i in 0..m {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut picked = pool[..m].to_vec();
    picked.sort_unstable();
    picked
}

/// Size-weighted parameter mean over participating heads (FedAvg).
/// Weights are `n_i / sum(n_j)` over the participants.
pub fn aggregate_fedavg(heads: &[TaskHead], sizes: &[usize]) -> Result<TaskHead> {
    if heads.is_empty() || heads.len() != sizes.len() {
        return Err(Error::invalid("aggregate_fedavg", "need one size per head"));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::invalid("aggregate_fedavg", "sizes must be positive"));
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total).collect();
    aggregate_weighted(heads, &weights)
}

/// Weighted parameter combination with explicit weights (the literal
/// global-n weighting path also lands here).
pub fn aggregate_weighted(heads: &[TaskHead], weights: &[f64]) -> Result<TaskHead> {
    let first = &heads[0];
    let mut out = first.clone();
    let names: Vec<String> = first.parameters().iter().map(|p| p.name.clone()).collect();
    for (h, head) in heads.iter().enumerate().skip(1) {
        let params = head.parameters();
        if params.len() != names.len() {
            return Err(Error::invalid("aggregate", "heads have different parameter sets"));
        }
        for (p, reference) in params.iter().zip(first.parameters()) {
            if p.name != reference.name || p.value.shape() != reference.value.shape() {
                return Err(Error::InvalidArgument {
                    op: "aggregate",
                    msg: format!(
                        "head {h} parameter `{}` does not match `{}` {:?}",
                        p.name,
                        reference.name,
                        reference.value.shape()
                    ),
                });
            }
        }
    }
    for (i, out_p) in out.parameters_mut().into_iter().enumerate() {
        let n = out_p.value.numel();
        let mut acc = vec![0.0; n];
        for (head, &w) in heads.iter().zip(weights) {
            let src = head.parameters()[i].value.data();
            for (a, v) in acc.iter_mut().zip(src) {
                *a += w * v;
            }
        }
        out_p.value.data_mut().copy_from_slice(&acc);
        out_p.value.zero_grad();
    }
    Ok(out)
}

/// Coordinatewise `alpha * prev + (1 - alpha) * aggregated`. The
/// endpoints return exact copies of the corresponding head.
pub fn soft_mixture(prev_server: &TaskHead, aggregated: &TaskHead, alpha: f64) -> Result<TaskHead> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("soft_mixture", format!("alpha must be in [0, 1], got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(aggregated.clone());
    }
    if alpha == 1.0 {
        return Ok(prev_server.clone());
    }
    let mut out = aggregated.clone();
    for (out_p, prev_p) in out.parameters_mut().into_iter().zip(prev_server.parameters()) {
        if out_p.value.shape() != prev_p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "soft_mixture",
                lhs: prev_p.value.shape().to_vec(),
                rhs: out_p.value.shape().to_vec(),
            });
        }
        for (v, p) in out_p.value.data_mut().iter_mut().zip(prev_p.value.data()) {
            *v = alpha * p + (1.0 - alpha) * *v;
        }
    }
    Ok(out)
}

/// Backbone features pre-extracted for every sample (the backbone is
/// frozen, so this happens exactly once per run).
pub struct FeatureCache {
    pub server_high: Vec<Tensor>,
    pub server_low: Vec<Tensor>,
    pub clients: BTreeMap<u32, Vec<Tensor>>,
    pub test: Vec<Tensor>,
}

impl FeatureCache {
    pub fn build(world: &World) -> Result<Self> {
        let run = |samples: &[LabeledSample]| -> Result<Vec<Tensor>> {
            samples.iter().map(|s| extract_features(&world.backbone, &s.image)).collect()
        };
        let mut clients = BTreeMap::new();
        for c in &world.clients {
            let feats: Result<Vec<Tensor>> =
                c.samples.iter().map(|s| extract_features(&world.backbone, &s.image)).collect();
            clients.insert(c.client_id, feats?);
        }
        Ok(FeatureCache {
            server_high: run(&world.server)?,
            server_low: run(&world.server_low)?,
            clients,
            test: run(&world.test)?,
        })
    }
}

fn supervised_step(
    head: &mut TaskHead,
    features: &Tensor,
    labels: &[u8],
    domain_id: u32,
    step: u64,
    opt: &mut Optimizer,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(features);
    let bound = head.bind(&mut g, true)?;
    let logits = bound.forward(&mut g, x, step, Some(domain_id))?;
    let probs = g.softmax_channel(logits);
    let loss = g.cross_entropy(probs, labels)?;
    let loss_value = g.data(loss)[0];
    g.backward(loss)?;
    head.apply_grads(&g.param_grads())?;
    opt.step(&mut head.parameters_mut())?;
    head.zero_grad();
    Ok(loss_value)
}

/// One supervised epoch over `(features, samples)` in a shuffled order;
/// returns the mean per-step loss.
fn supervised_epoch(
    head: &mut TaskHead,
    features: &[Tensor],
    samples: &[LabeledSample],
    opt: &mut Optimizer,
    rng: &mut impl Rng,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for (step, idx) in order.into_iter().enumerate() {
        total += supervised_step(
            head,
            &features[idx],
            &samples[idx].label,
            samples[idx].domain_id,
            step as u64,
            opt,
        )?;
    }
    Ok(total / samples.len() as f64)
}

/// Mean supervised loss without any parameter update.
pub fn supervised_loss(head: &TaskHead, features: &[Tensor], samples: &[LabeledSample]) -> Result<f64> {
    let mut total = 0.0;
    for (feats, sample) in features.iter().zip(samples) {
        let mut g = Graph::new();
        let x = g.constant(feats);
        let bound = head.bind(&mut g, false)?;
        let logits = bound.forward(&mut g, x, 1, Some(sample.domain_id))?;
        let probs = g.softmax_channel(logits);
        let loss = g.cross_entropy(probs, &sample.label)?;
        total += g.data(loss)[0];
    }
    Ok(total / samples.len() as f64)
}

/// Supervised warm-up on the server data; returns the trained head and
/// the mean loss per epoch.
pub fn warmup(
    head: TaskHead,
    features: &[Tensor],
    samples: &[LabeledSample],
    epochs: u32,
    optim: &OptimizerSettings,
    seed: u64,
) -> Result<(TaskHead, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("warmup: server dataset is empty".into()));
    }
    let mut head = head;
    let mut opt = optim.build()?;
    let mut losses = Vec::with_capacity(epochs as usize);
    for epoch in 0..epochs {
        let mut rng = derive_rng2(seed, "warmup", u64::from(epoch), 0);
        losses.push(supervised_epoch(&mut head, features, samples, &mut opt, &mut rng)?);
    }
    Ok((head, losses))
}

/// Per-pixel class predictions for one feature map.
pub fn predict(head: &TaskHead, features: &Tensor, domain_id: u32) -> Result<Vec<u8>> {
    let mut g = Graph::new();
    let x = g.constant(features);
    let bound = head.bind(&mut g, false)?;
    // Inference uses the sparse path for the alternating mode.
    let logits = bound.forward(&mut g, x, 1, Some(domain_id))?;
    Ok(argmax_channel(&g.value(logits)).into_iter().map(|c| c as u8).collect())
}

/// Accuracy report over a labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub total_accuracy: f64,
    pub per_domain_accuracy: BTreeMap<String, f64>,
    pub expert_load: Vec<f64>,
}

/// Pure counting over precomputed predictions; separated from the model
/// so tests can drive it with known inputs.
pub fn evaluate_predictions(predictions: &[Vec<u8>], samples: &[LabeledSample]) -> Result<EvalReport> {
    if predictions.len() != samples.len() {
        return Err(Error::invalid("evaluate", "one prediction vector per sample required"));
    }
    let mut per_domain: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for (pred, sample) in predictions.iter().zip(samples) {
        if pred.len() != sample.label.len() {
            return Err(Error::invalid("evaluate", "prediction/label length mismatch"));
        }
        let entry = per_domain.entry(sample.domain_id).or_insert((0, 0));
        for (p, l) in pred.iter().zip(&sample.label) {
            entry.0 += u64::from(p == l);
            entry.1 += 1;
        }
    }
    let correct: u64 = per_domain.values().map(|v| v.0).sum();
    let total: u64 = per_domain.values().map(|v| v.1).sum();
    if total == 0 {
        return Err(Error::EmptyInput("evaluate: no labeled pixels".into()));
    }
    Ok(EvalReport {
        total_accuracy: correct as f64 / total as f64,
        per_domain_accuracy: per_domain
            .into_iter()
            .map(|(d, (c, t))| (format!("domain{d}"), c as f64 / t as f64))
            .collect(),
        expert_load: Vec::new(),
    })
}

/// Evaluate a head on the (high-resolution, labeled) test set: per-pixel
/// accuracy per domain plus the routing load observed while predicting.
pub fn evaluate(head: &TaskHead, features: &[Tensor], samples: &[LabeledSample]) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(samples.len());
    let mut maps = Vec::with_capacity(samples.len());
    for (feats, sample) in features.iter().zip(samples) {
        predictions.push(predict(head, feats, sample.domain_id)?);
        maps.push(route_spatial(feats, &head.spatial_router)?);
    }
    let mut report = evaluate_predictions(&predictions, samples)?;
    report.expert_load = crate::moe::expert_load(&maps)?.fractions;
    Ok(report)
}

fn evaluation_metrics(
    setup: &FederationSetup,
    world: &World,
    cache: &FeatureCache,
    state: &FederationState,
    round: u32,
    server_loss: f64,
    mean_client_loss: Option<f64>,
    pseudo_coverage: BTreeMap<String, f64>,
    participants: Vec<u32>,
    params_communicated: u64,
) -> Result<RoundMetrics> {
    let eval = evaluate(&state.global_head, &cache.test, &world.test)?;
    let client_dims =
        (world.spec.feature_channels, world.spec.low_height(), world.spec.low_width());
    let flops_client_step = cost::count_flops(
        &setup.head,
        (world.spec.image_channels, world.spec.feature_channels),
        client_dims,
        setup.head.routing_mode,
        1,
    )
    .total_with_backbone;
    Ok(RoundMetrics {
        round,
        total_accuracy: eval.total_accuracy,
        per_domain_accuracy: eval.per_domain_accuracy,
        server_loss,
        mean_client_loss,
        pseudo_coverage,
        expert_load: eval.expert_load,
        params_communicated,
        flops_client_step,
        backbone_hash: world.backbone.hash(),
        participants,
    })
}

/// Execute one federated round and advance the state. Any failing stage
/// aborts the round with the stage named in the error.
pub fn run_round(
    state: &mut FederationState,
    setup: &FederationSetup,
    world: &World,
    cache: &FeatureCache,
) -> Result<RoundMetrics> {
    let round = state.round + 1;
    let seed = setup.fl.seed;
    let n = state.clients.len() as u32;
    let m = setup.fl.participants_per_round(n);

    let ids: Vec<u32> = state.clients.iter().map(|c| c.client_id).collect();
    let participants = sample_clients(&ids, m, seed, round);

    // Broadcast + local training, in ascending client-id order. Each
    // client consumes its own (seed, id, round) stream, so results do not
    // depend on visit order.
    let broadcast = state.global_head.clone();
    let mut trained = Vec::with_capacity(participants.len());
    let mut sizes = Vec::with_capacity(participants.len());
    let mut coverage = BTreeMap::new();
    let mut loss_sum = 0.0;
    for &cid in &participants {
        let record = state
            .clients
            .iter()
            .find(|c| c.client_id == cid)
            .ok_or_else(|| Error::invalid("run_round", format!("unknown client {cid}")).in_stage("client_train"))?;
        let feats = cache
            .clients
            .get(&cid)
            .ok_or_else(|| Error::invalid("run_round", format!("no features for client {cid}")).in_stage("client_train"))?;
        let mut opt = setup.optim.build().map_err(|e| e.in_stage("client_train"))?;
        let mut rng = derive_rng2(seed, "client", u64::from(cid), u64::from(round));
        let (head, report) =
            client_local_train(&broadcast, feats, record.domain_id, &setup.ssl, &mut opt, &mut rng)
                .map_err(|e| e.in_stage("client_train"))?;
        coverage.insert(format!("client{cid}"), report.mean_coverage);
        loss_sum += report.mean_loss;
        trained.push(head);
        sizes.push(record.num_samples);
    }

    // Aggregation, with the literal global-n weighting behind its flag.
    let aggregated = if setup.fl.literal_global_weighting {
        let total = state.total_client_samples() as f64;
        let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / total).collect();
        aggregate_weighted(&trained, &weights).map_err(|e| e.in_stage("aggregate"))?
    } else {
        aggregate_fedavg(&trained, &sizes).map_err(|e| e.in_stage("aggregate"))?
    };

    state.prev_server_head = state.global_head.clone();
    let mixed = soft_mixture(&state.prev_server_head, &aggregated, setup.fl.alpha)
        .map_err(|e| e.in_stage("soft_mixture"))?;

    // Supervised server phase on the configured resolution view.
    let (server_feats, server_samples): (&[Tensor], &[LabeledSample]) = if setup.fl.server_low_res {
        (&cache.server_low, &world.server_low)
    } else {
        (&cache.server_high, &world.server)
    };
    let mut head = mixed;
    let server_loss = if setup.fl.server_epochs_per_round > 0 {
        let mut opt = setup.optim.build().map_err(|e| e.in_stage("server_train"))?;
        let mut total = 0.0;
        for epoch in 0..setup.fl.server_epochs_per_round {
            let mut rng =
                derive_rng2(seed, "server", u64::from(round), u64::from(epoch));
            total += supervised_epoch(&mut head, server_feats, server_samples, &mut opt, &mut rng)
                .map_err(|e| e.in_stage("server_train"))?;
        }
        total / f64::from(setup.fl.server_epochs_per_round)
    } else {
        supervised_loss(&head, server_feats, server_samples).map_err(|e| e.in_stage("server_train"))?
    };

    state.global_head = head;
    state.round = round;

    let p = state.global_head.param_count() as u64;
    let mean_client_loss = Some(loss_sum / participants.len() as f64);
    evaluation_metrics(
        setup,
        world,
        cache,
        state,
        round,
        server_loss,
        mean_client_loss,
        coverage,
        participants,
        2 * u64::from(m) * p,
    )
    .map_err(|e| e.in_stage("evaluate"))
}

/// Warm-up plus `rounds` federated rounds. The returned metrics start
/// with a round-0 record for the freshly warmed-up head (its
/// `params_communicated` is the one-time backbone broadcast).
pub fn run_federation(
    setup: &FederationSetup,
    world: &World,
) -> Result<(Vec<RoundMetrics>, TaskHead)> {
    setup.fl.validate()?;
    setup.ssl.validate()?;
    setup.head.validate()?;
    setup.optim.validate()?;
    if setup.head.feature_channels != world.spec.feature_channels {
        return Err(Error::Config(format!(
            "head expects {} feature channels but the world produces {}",
            setup.head.feature_channels, world.spec.feature_channels
        )));
    }
    if setup.head.num_classes != world.spec.num_classes {
        return Err(Error::Config(format!(
            "head predicts {} classes but the world has {}",
            setup.head.num_classes, world.spec.num_classes
        )));
    }

    let cache = FeatureCache::build(world)?;
    let seed = setup.fl.seed;
    let init = TaskHead::init(setup.head.clone(), &mut derive_rng(seed, "init", 0))?;

    let (server_feats, server_samples): (&[Tensor], &[LabeledSample]) = if setup.fl.server_low_res {
        (&cache.server_low, &world.server_low)
    } else {
        (&cache.server_high, &world.server)
    };
    let (warm, losses) =
        warmup(init, server_feats, server_samples, setup.fl.warmup_epochs, &setup.optim, seed)?;
    let warm_loss = match losses.last() {
        Some(&l) => l,
        None => supervised_loss(&warm, server_feats, server_samples)?,
    };

    let clients: Vec<ClientRecord> = world
        .clients
        .iter()
        .map(|c| ClientRecord {
            client_id: c.client_id,
            domain_id: c.domain_id,
            num_samples: c.samples.len(),
        })
        .collect();
    let mut state = FederationState::new(warm, clients);

    let backbone_params: u64 = [&world.backbone.w1, &world.backbone.b1, &world.backbone.w2, &world.backbone.b2]
        .iter()
        .map(|t| t.numel() as u64)
        .sum();
    let n = state.clients.len() as u64;

    let mut metrics = Vec::with_capacity(setup.fl.rounds as usize + 1);
    metrics.push(evaluation_metrics(
        setup,
        world,
        &cache,
        &state,
        0,
        warm_loss,
        None,
        BTreeMap::new(),
        Vec::new(),
        n * backbone_params,
    )?);

    for _ in 0..setup.fl.rounds {
        let m = run_round(&mut state, setup, world, &cache)?;
        metrics.push(m);
    }
    Ok((metrics, state.global_head))
}
