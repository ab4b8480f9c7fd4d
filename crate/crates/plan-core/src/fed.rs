//! Federated orchestration: the two-stage round loop between one server and
//! K clients, exact payload accounting, target-domain evaluation, and the
//! end-to-end experiment driver.
//!
//! Every tensor that crosses the server/client boundary moves through
//! [`SimTransport`], which encodes and decodes real frames; computation
//! continues with the decoded copies, so the byte log can never drift from
//! what the math actually used. A round commits its effects only after every
//! fallible step has succeeded: an error anywhere leaves the global state
//! and all client states bitwise unchanged.

use crate::agg::{
    aggregate, attention_weights, fedavg_aggregator_set, mean_promptsets,
    train_aggregators_with_modes, AggregatorSet, Modality,
};
use crate::data::{
    domain_family, generate_domain, leave_one_out, prompted_accuracy, warmup_backbone,
    ClientData, DomainDataset, Sample, ShiftParams, WarmupConfig,
};
use crate::encoder::{BackboneParams, ModelConfig, PromptSet};
use crate::error::{Error, Result};
use crate::fmath;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{local_prompt_round, ReferenceMode, TrainConfig};
use crate::wire::{
    aggregator_payload_bytes, prompt_payload_bytes, Party, SimTransport, Stage,
};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Wall-clock source for round timing. Timing is observability only; it must
/// never feed back into computation, so determinism holds under any clock.
pub trait Clock {
    fn now_secs(&self) -> f64;
}

/// Reports zero always: the no_std default, and the clock of choice whenever
/// two runs must produce bitwise-identical metrics.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_secs(&self) -> f64 {
        0.0
    }
}

/// How the server fuses the K uploaded prompt sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Attention aggregation with locally trained aggregators.
    Plan,
    /// Equal-weight averaging of raw prompts; aggregators never train and
    /// stage 2 is skipped entirely.
    AvgBaseline,
}

/// Switches that disable individual mechanisms, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationFlags {
    /// Train local prompts on plain cross-entropy (alpha forced to 0).
    pub disable_kl: bool,
    /// Use the global prompts as the round-1 reference instead of the
    /// prompt-free zero-shot predictions.
    pub disable_zsi: bool,
    /// Replace text-side attention aggregation with the equal-weight mean.
    pub avg_text_agg: bool,
    /// Replace visual-side attention aggregation with the equal-weight mean.
    pub avg_vis_agg: bool,
}

/// Synthetic task layout: how many domains exist, how they shift, and how
/// the backbone warms up before any federation starts.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// Domains in the experiment family; one is held out, the rest become
    /// clients.
    pub n_domains: usize,
    pub samples_per_class: usize,
    pub shift: ShiftParams,
    /// Seeds the shared class patterns and every domain transform.
    pub family_seed: u64,
    /// Extra same-class domains appended to the family; their samples form
    /// the warmup pool and never enter the federation.
    pub warmup_domains: usize,
    pub warmup: WarmupConfig,
}

impl DatasetConfig {
    /// Four mutually shifted desk-scale domains plus two warmup domains.
    pub fn desk() -> Self {
        DatasetConfig {
            n_domains: 4,
            samples_per_class: 100,
            shift: ShiftParams::default(),
            family_seed: 11,
            warmup_domains: 8,
            warmup: WarmupConfig::default(),
        }
    }
}

/// Everything one experiment needs: model geometry, optimization settings,
/// federation size, task layout, method and ablations, and the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Shared by both stages; its `seed` field is ignored here because every
    /// client derives stage seeds from the experiment seed.
    pub train: TrainConfig,
    /// K. Must equal `dataset.n_domains - 1` (leave-one-domain-out).
    pub clients: usize,
    /// R. Total federated rounds.
    pub rounds: usize,
    pub dataset: DatasetConfig,
    /// Domain id held out as the unseen target.
    pub held_out: usize,
    pub method: Method,
    pub flags: AblationFlags,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Reference desk-scale experiment: 4 domains, K = 3, R = 10.
    pub fn desk(held_out: usize, seed: u64) -> Self {
        ExperimentConfig {
            model: ModelConfig::desk(),
            train: TrainConfig {
                alpha: 1.0,
                lr: 0.05,
                batch_size: 16,
                epochs: 1,
                optimizer: crate::train::OptimizerKind::Sgd,
                seed: 0,
            },
            clients: 3,
            rounds: 10,
            dataset: DatasetConfig::desk(),
            held_out,
            method: Method::Plan,
            flags: AblationFlags::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.rounds < 1 {
            return Err(Error::Config(String::from("rounds must be at least 1")));
        }
        if self.dataset.n_domains < 2 {
            return Err(Error::Config(format!(
                "leave-one-domain-out needs at least 2 domains, got {}",
                self.dataset.n_domains
            )));
        }
        if self.dataset.samples_per_class < 1 {
            return Err(Error::Config(String::from("samples_per_class must be at least 1")));
        }
        if self.held_out >= self.dataset.n_domains {
            return Err(Error::Config(format!(
                "held-out domain {} outside 0..{}",
                self.held_out, self.dataset.n_domains
            )));
        }
        if self.clients != self.dataset.n_domains - 1 {
            return Err(Error::Config(format!(
                "{} clients for {} domains; leave-one-domain-out requires n_domains - 1",
                self.clients, self.dataset.n_domains
            )));
        }
        if self.dataset.warmup.steps > 0 && self.dataset.warmup_domains == 0 {
            return Err(Error::Config(String::from(
                "warmup requested but no warmup domains provide a pool",
            )));
        }
        Ok(())
    }
}

/// One participant: its private data and whatever it produced last round.
/// Raw samples never leave this struct; only prompt and aggregator tensors
/// are handed to the transport.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub data: ClientData,
    /// Local prompts from the most recent stage 1; `None` before round 1.
    pub prompts: Option<PromptSet>,
    /// Locally trained aggregator copies from the most recent stage 2.
    pub agg_text: Option<AggregatorSet>,
    pub agg_vis: Option<AggregatorSet>,
    /// Per-client seed; stage seeds derive from it per round.
    pub seed: u64,
}

/// Server-side state: the current global prompts and aggregators.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub prompts: PromptSet,
    pub agg_text: AggregatorSet,
    pub agg_vis: AggregatorSet,
    /// Completed rounds.
    pub round: usize,
}

impl GlobalState {
    /// Fresh random globals, before any round has run.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        GlobalState {
            prompts: PromptSet::init(cfg, rng::subseed(seed, "global-prompts", &[]), "global"),
            agg_text: AggregatorSet::init(cfg, Modality::Text, rng::subseed(seed, "agg-text", &[])),
            agg_vis: AggregatorSet::init(cfg, Modality::Visual, rng::subseed(seed, "agg-vis", &[])),
            round: 0,
        }
    }

    /// Hash over prompts, both aggregators and the round counter.
    pub fn fingerprint(&self) -> u64 {
        let mut h = rng::fnv1a(b"global-state");
        h = rng::fnv1a_extend(h, &self.prompts.fingerprint().to_le_bytes());
        h = rng::fnv1a_extend(h, &self.agg_text.fingerprint().to_le_bytes());
        h = rng::fnv1a_extend(h, &self.agg_vis.fingerprint().to_le_bytes());
        rng::fnv1a_extend(h, &(self.round as u64).to_le_bytes())
    }
}

/// One client's stage-1 losses, averaged over the round's steps with each
/// step weighted by its batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStageOne {
    pub ce: f64,
    pub kl: f64,
    /// ce + alpha * kl.
    pub total: f64,
    /// Log-clamp events summed over the round.
    pub kl_clamp_events: usize,
}

/// Everything one round reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-indexed round number.
    pub round: usize,
    /// Per client, in client order.
    pub stage1: Vec<ClientStageOne>,
    /// Per client; empty when stage 2 is skipped (baseline / all-avg runs).
    pub stage2_ce: Vec<f64>,
    /// Attention entropy -sum(gamma ln gamma) per block; empty for a
    /// modality fused by the equal-weight mean.
    pub gamma_entropy_text: Vec<f64>,
    pub gamma_entropy_vis: Vec<f64>,
    /// Tensor-payload bytes moved this round, by stage and direction.
    pub bytes_down_stage1: usize,
    pub bytes_up_stage1: usize,
    pub bytes_down_stage2: usize,
    pub bytes_up_stage2: usize,
    /// Filled by the experiment driver; zero under `NullClock`.
    pub wall_secs: f64,
    /// Held-out-domain accuracy after this round; filled by the driver.
    pub target_accuracy: Option<f64>,
}

/// Testing hook: abort the round right after one protocol step, before any
/// state has been committed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    AfterBroadcast,
    AfterLocalTraining,
    AfterPromptUpload,
    AfterStageTwoBroadcast,
    AfterAggregatorTraining,
    AfterAggregatorUpload,
}

/// One full federated round. Steps: (1) broadcast global prompts, (2) each
/// client tunes local prompts, (3) clients upload them, (4) server sends all
/// K prompt sets plus the aggregators in use to every client, (5) each
/// client trains its aggregator copies, (6) clients upload them, (7) the
/// server averages the aggregators and fuses the local prompts into the next
/// globals. Client states and the returned global state change only if every
/// step succeeded.
pub fn run_round(
    global: &GlobalState,
    clients: &mut [ClientState],
    backbone: &BackboneParams,
    cfg: &ExperimentConfig,
    transport: &mut SimTransport,
) -> Result<(GlobalState, RoundMetrics)> {
    run_round_impl(global, clients, backbone, cfg, transport, None)
}

/// `run_round` with a fault injected after the chosen step; exists so tests
/// can prove rounds are atomic.
pub fn run_round_with_fault(
    global: &GlobalState,
    clients: &mut [ClientState],
    backbone: &BackboneParams,
    cfg: &ExperimentConfig,
    transport: &mut SimTransport,
    fault: FaultPoint,
) -> Result<(GlobalState, RoundMetrics)> {
    run_round_impl(global, clients, backbone, cfg, transport, Some(fault))
}

fn run_round_impl(
    global: &GlobalState,
    clients: &mut [ClientState],
    backbone: &BackboneParams,
    cfg: &ExperimentConfig,
    transport: &mut SimTransport,
    fault: Option<FaultPoint>,
) -> Result<(GlobalState, RoundMetrics)> {
    if clients.is_empty() || clients.len() != cfg.clients {
        return Err(Error::Config(format!(
            "round got {} client states, config says {}",
            clients.len(),
            cfg.clients
        )));
    }
    let r = global.round + 1;
    let fail = |point: FaultPoint| -> Result<()> {
        if fault == Some(point) {
            return Err(Error::Contract(format!("injected fault {point:?}")));
        }
        Ok(())
    };

    // (1) Broadcast the current global prompts.
    let mut received = Vec::with_capacity(clients.len());
    for c in clients.iter() {
        received.push(transport.send_prompt_set(
            r,
            Stage::One,
            Party::Server,
            Party::Client(c.client_id),
            &global.prompts,
        )?);
    }
    fail(FaultPoint::AfterBroadcast)?;

    // (2) Local prompt tuning. The first round aligns to the prompt-free
    // zero-shot predictions because no trained globals exist yet.
    let reference = if r == 1 && !cfg.flags.disable_zsi {
        ReferenceMode::ZeroShot
    } else {
        ReferenceMode::GlobalPrompts
    };
    let mut locals = Vec::with_capacity(clients.len());
    let mut stage1 = Vec::with_capacity(clients.len());
    for (c, start) in clients.iter().zip(&received) {
        let tc = TrainConfig {
            alpha: if cfg.flags.disable_kl { 0.0 } else { cfg.train.alpha },
            seed: rng::subseed(c.seed, "stage1", &[r as u64]),
            ..cfg.train.clone()
        };
        let (prompts, reports) = local_prompt_round(&c.data.train, backbone, start, reference, &tc)?;
        let mut n = 0usize;
        let (mut ce, mut kl, mut total, mut clamps) = (0.0, 0.0, 0.0, 0usize);
        for rep in &reports {
            ce += rep.ce_loss * rep.samples as f64;
            kl += rep.kl_loss * rep.samples as f64;
            total += rep.total_loss * rep.samples as f64;
            clamps += rep.kl_clamp_events;
            n += rep.samples;
        }
        let n = n as f64;
        stage1.push(ClientStageOne {
            ce: ce / n,
            kl: kl / n,
            total: total / n,
            kl_clamp_events: clamps,
        });
        locals.push(prompts);
    }
    fail(FaultPoint::AfterLocalTraining)?;

    // (3) Upload the local prompts.
    let mut server_locals = Vec::with_capacity(clients.len());
    for (c, p) in clients.iter().zip(&locals) {
        server_locals.push(transport.send_prompt_set(
            r,
            Stage::One,
            Party::Client(c.client_id),
            Party::Server,
            p,
        )?);
    }
    fail(FaultPoint::AfterPromptUpload)?;

    let train_text = cfg.method == Method::Plan && !cfg.flags.avg_text_agg;
    let train_vis = cfg.method == Method::Plan && !cfg.flags.avg_vis_agg;

    let mut stage2_ce = Vec::new();
    let mut trained: Vec<(Option<AggregatorSet>, Option<AggregatorSet>)> = Vec::new();
    let mut up_text: Vec<AggregatorSet> = Vec::new();
    let mut up_vis: Vec<AggregatorSet> = Vec::new();
    if train_text || train_vis {
        // (4) Send every client all K local prompt sets plus the aggregators
        // still under attention fusion.
        let mut inputs = Vec::with_capacity(clients.len());
        for c in clients.iter() {
            let to = Party::Client(c.client_id);
            let mut sets = Vec::with_capacity(server_locals.len());
            for p in &server_locals {
                sets.push(transport.send_prompt_set(r, Stage::Two, Party::Server, to, p)?);
            }
            let text = if train_text {
                Some(transport.send_aggregator_set(r, Stage::Two, Party::Server, to, &global.agg_text)?)
            } else {
                None
            };
            let vis = if train_vis {
                Some(transport.send_aggregator_set(r, Stage::Two, Party::Server, to, &global.agg_vis)?)
            } else {
                None
            };
            inputs.push((sets, text, vis));
        }
        fail(FaultPoint::AfterStageTwoBroadcast)?;

        // (5) Train aggregator copies on the frozen local prompt sets.
        for (c, (sets, text, vis)) in clients.iter().zip(&inputs) {
            let tc = TrainConfig {
                seed: rng::subseed(c.seed, "stage2", &[r as u64]),
                ..cfg.train.clone()
            };
            let refs: Vec<&PromptSet> = sets.iter().collect();
            let (t, v, reports) = train_aggregators_with_modes(
                &c.data.train,
                backbone,
                &refs,
                text.as_ref(),
                vis.as_ref(),
                &tc,
            )?;
            let n: usize = reports.iter().map(|rep| rep.samples).sum();
            let ce: f64 = reports.iter().map(|rep| rep.ce_loss * rep.samples as f64).sum();
            stage2_ce.push(ce / n as f64);
            trained.push((t, v));
        }
        fail(FaultPoint::AfterAggregatorTraining)?;

        // (6) Upload the trained aggregators.
        for (c, (t, v)) in clients.iter().zip(&trained) {
            let from = Party::Client(c.client_id);
            if let Some(t) = t {
                up_text.push(transport.send_aggregator_set(r, Stage::Two, from, Party::Server, t)?);
            }
            if let Some(v) = v {
                up_vis.push(transport.send_aggregator_set(r, Stage::Two, from, Party::Server, v)?);
            }
        }
        fail(FaultPoint::AfterAggregatorUpload)?;
    }

    // (7) Federated averaging of the aggregators, then prompt fusion. All
    // fallible work happens before any state is committed.
    let new_agg_text = if train_text {
        let refs: Vec<&AggregatorSet> = up_text.iter().collect();
        fedavg_aggregator_set(&refs)?
    } else {
        global.agg_text.clone()
    };
    let new_agg_vis = if train_vis {
        let refs: Vec<&AggregatorSet> = up_vis.iter().collect();
        fedavg_aggregator_set(&refs)?
    } else {
        global.agg_vis.clone()
    };

    let local_refs: Vec<&PromptSet> = server_locals.iter().collect();
    let mean = if !train_text || !train_vis {
        Some(mean_promptsets(&local_refs)?)
    } else {
        None
    };
    let (text, gamma_entropy_text) = if train_text {
        fuse_modality(&local_refs, &new_agg_text, Modality::Text)?
    } else {
        (mean.as_ref().expect("mean built above").text.clone(), Vec::new())
    };
    let (visual, gamma_entropy_vis) = if train_vis {
        fuse_modality(&local_refs, &new_agg_vis, Modality::Visual)?
    } else {
        (mean.as_ref().expect("mean built above").visual.clone(), Vec::new())
    };

    let metrics = RoundMetrics {
        round: r,
        stage1,
        stage2_ce,
        gamma_entropy_text,
        gamma_entropy_vis,
        bytes_down_stage1: transport.payload_total(r, Stage::One, true),
        bytes_up_stage1: transport.payload_total(r, Stage::One, false),
        bytes_down_stage2: transport.payload_total(r, Stage::Two, true),
        bytes_up_stage2: transport.payload_total(r, Stage::Two, false),
        wall_secs: 0.0,
        target_accuracy: None,
    };

    // Commit: infallible from here on.
    let mut trained = trained.into_iter();
    for (c, local) in clients.iter_mut().zip(locals) {
        c.prompts = Some(local);
        if let Some((t, v)) = trained.next() {
            c.agg_text = t;
            c.agg_vis = v;
        }
    }
    let next = GlobalState {
        prompts: PromptSet { text, visual },
        agg_text: new_agg_text,
        agg_vis: new_agg_vis,
        round: r,
    };
    Ok((next, metrics))
}

/// Attention-fuses one modality of K uploaded prompt sets and reports each
/// block's fusion-weight entropy.
fn fuse_modality(
    locals: &[&PromptSet],
    agg: &AggregatorSet,
    side: Modality,
) -> Result<(Vec<Tensor>, Vec<f64>)> {
    let depth = agg.blocks.len();
    let mut fused = Vec::with_capacity(depth);
    let mut entropies = Vec::with_capacity(depth);
    for l in 0..depth {
        let ts: Vec<&Tensor> = locals
            .iter()
            .map(|p| match side {
                Modality::Text => &p.text[l],
                Modality::Visual => &p.visual[l],
            })
            .collect();
        let gamma = attention_weights(&ts, &agg.blocks[l])?;
        entropies.push(entropy(&gamma.gamma));
        fused.push(aggregate(&ts, &gamma, &agg.blocks[l])?);
    }
    Ok((fused, entropies))
}

fn entropy(gamma: &[f64]) -> f64 {
    let mut h = 0.0;
    for &g in gamma {
        if g > 0.0 {
            h -= g * fmath::ln(g);
        }
    }
    h
}

/// Analytic per-round payload bytes for a PLAN round with both aggregators
/// in play, given the objects actually in flight. Stage-2 downloads fan all
/// K prompt sets plus the aggregators out to each of the K clients.
pub fn analytic_round_bytes(
    prompts: &PromptSet,
    agg_text: &AggregatorSet,
    agg_vis: &AggregatorSet,
    k: usize,
) -> (usize, usize, usize, usize) {
    let p = prompt_payload_bytes(prompts);
    let a = aggregator_payload_bytes(agg_text) + aggregator_payload_bytes(agg_vis);
    (k * p, k * p, k * (k * p + a), k * a)
}

/// Held-out-domain accuracy under the current global prompts. Read-only.
pub fn evaluate(
    global: &GlobalState,
    backbone: &BackboneParams,
    target: &DomainDataset,
) -> Result<f64> {
    prompted_accuracy(backbone, &global.prompts, &target.samples)
}

/// Fixed per-experiment surroundings: the (possibly warmed-up) frozen
/// backbone, the client datasets, and the held-out target domain.
#[derive(Debug, Clone)]
pub struct Environment {
    pub backbone: BackboneParams,
    pub clients: Vec<ClientData>,
    pub target: DomainDataset,
}

/// Builds datasets and the frozen backbone for one experiment. Warmup draws
/// from extra domains of the same family, so its pool shares class semantics
/// with the experiment domains while overlapping none of their samples; the
/// warmed-up backbone must clear the zero-shot margin on every experiment
/// domain.
pub fn build_environment(cfg: &ExperimentConfig) -> Result<Environment> {
    cfg.validate()?;
    let ds = &cfg.dataset;
    let specs = domain_family(
        &cfg.model,
        ds.n_domains + ds.warmup_domains,
        ds.samples_per_class,
        &ds.shift,
        ds.family_seed,
    );
    let data_seed = rng::subseed(cfg.seed, "data", &[]);
    let (clients, target) = leave_one_out(&cfg.model, &specs[..ds.n_domains], cfg.held_out, data_seed)?;

    let backbone = BackboneParams::init(cfg.model.clone(), rng::subseed(cfg.seed, "backbone", &[]))?;
    let backbone = if ds.warmup.steps > 0 {
        let warmup_seed = rng::subseed(cfg.seed, "warmup-data", &[]);
        let mut pool: Vec<Sample> = Vec::new();
        for spec in &specs[ds.n_domains..] {
            pool.extend(generate_domain(&cfg.model, spec, warmup_seed)?.samples);
        }
        let domains: Vec<DomainDataset> = specs[..ds.n_domains]
            .iter()
            .map(|s| generate_domain(&cfg.model, s, data_seed))
            .collect::<Result<_>>()?;
        let refs: Vec<&DomainDataset> = domains.iter().collect();
        warmup_backbone(backbone, &pool, &ds.warmup, &refs)?
    } else {
        backbone
    };
    Ok(Environment { backbone, clients, target })
}

/// A finished experiment: per-round metrics, the final global state, and
/// the transport with its complete frame log.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub state: GlobalState,
    pub transport: SimTransport,
}

/// Runs R rounds against a prebuilt environment, evaluating the held-out
/// domain after every round. `clock` only fills the wall-time field.
pub fn run_experiment_with_env(
    cfg: &ExperimentConfig,
    env: &Environment,
    clock: &dyn Clock,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if env.clients.len() != cfg.clients {
        return Err(Error::Config(format!(
            "environment has {} clients, config says {}",
            env.clients.len(),
            cfg.clients
        )));
    }
    let mut transport = SimTransport::new();
    let mut clients: Vec<ClientState> = env
        .clients
        .iter()
        .map(|cd| ClientState {
            client_id: cd.client_id,
            data: cd.clone(),
            prompts: None,
            agg_text: None,
            agg_vis: None,
            seed: rng::subseed(cfg.seed, "client", &[cd.client_id as u64]),
        })
        .collect();
    let mut global = GlobalState::init(&cfg.model, cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let t0 = clock.now_secs();
        let (next, mut m) = run_round(&global, &mut clients, &env.backbone, cfg, &mut transport)?;
        m.target_accuracy = Some(evaluate(&next, &env.backbone, &env.target)?);
        m.wall_secs = clock.now_secs() - t0;
        global = next;
        metrics.push(m);
    }
    transport.audit()?;
    Ok(ExperimentOutcome { metrics, state: global, transport })
}

/// Convenience driver: builds the environment, runs the experiment under
/// the null clock, and returns both.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Environment, ExperimentOutcome)> {
    let env = build_environment(cfg)?;
    let outcome = run_experiment_with_env(cfg, &env, &NullClock)?;
    Ok((env, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::aggregate_promptset;
    use crate::train::OptimizerKind;
    use alloc::vec;

    fn toy_exp(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig::toy(),
            train: TrainConfig {
                alpha: 1.0,
                lr: 0.1,
                batch_size: 8,
                epochs: 1,
                optimizer: OptimizerKind::Sgd,
                seed: 0,
            },
            clients: 2,
            rounds: 2,
            dataset: DatasetConfig {
                n_domains: 3,
                samples_per_class: 6,
                shift: ShiftParams::default(),
                family_seed: 5,
                warmup_domains: 0,
                warmup: WarmupConfig { steps: 0, ..WarmupConfig::default() },
            },
            held_out: 0,
            method: Method::Plan,
            flags: AblationFlags::default(),
            seed,
        }
    }

    fn k1_exp(seed: u64) -> ExperimentConfig {
        let mut cfg = toy_exp(seed);
        cfg.clients = 1;
        cfg.dataset.n_domains = 2;
        cfg.held_out = 1;
        cfg
    }

    fn client_fingerprints(clients: &[ClientState]) -> Vec<(Option<u64>, Option<u64>, Option<u64>)> {
        clients
            .iter()
            .map(|c| {
                (
                    c.prompts.as_ref().map(|p| p.fingerprint()),
                    c.agg_text.as_ref().map(|a| a.fingerprint()),
                    c.agg_vis.as_ref().map(|a| a.fingerprint()),
                )
            })
            .collect()
    }

    #[test]
    fn validate_rejects_inconsistent_configs() {
        assert!(toy_exp(1).validate().is_ok());
        let mut bad = toy_exp(1);
        bad.rounds = 0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = toy_exp(1);
        bad.clients = 3;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = toy_exp(1);
        bad.held_out = 3;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = toy_exp(1);
        bad.dataset.warmup.steps = 5;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn experiment_is_deterministic_and_emits_r_records() {
        let cfg = toy_exp(42);
        let (_, a) = run_experiment(&cfg).unwrap();
        let (_, b) = run_experiment(&cfg).unwrap();
        assert_eq!(a.metrics.len(), cfg.rounds);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.state.fingerprint(), b.state.fingerprint());
        assert_eq!(a.transport.records(), b.transport.records());
        for (i, m) in a.metrics.iter().enumerate() {
            assert_eq!(m.round, i + 1);
            assert_eq!(m.stage1.len(), cfg.clients);
            assert_eq!(m.stage2_ce.len(), cfg.clients);
            assert_eq!(m.gamma_entropy_text.len(), cfg.model.depth);
            assert_eq!(m.gamma_entropy_vis.len(), cfg.model.depth);
            assert!(m.target_accuracy.is_some());
            assert_eq!(m.wall_secs, 0.0);
        }
        let (_, c) = run_experiment(&toy_exp(43)).unwrap();
        assert_ne!(a.state.fingerprint(), c.state.fingerprint());
    }

    #[test]
    fn round_bytes_match_analytic_formulas() {
        let cfg = toy_exp(7);
        let (_, out) = run_experiment(&cfg).unwrap();
        let k = cfg.clients;
        let (d1, u1, d2, u2) = analytic_round_bytes(
            &out.state.prompts,
            &out.state.agg_text,
            &out.state.agg_vis,
            k,
        );
        for m in &out.metrics {
            assert_eq!(m.bytes_down_stage1, d1);
            assert_eq!(m.bytes_up_stage1, u1);
            assert_eq!(m.bytes_down_stage2, d2);
            assert_eq!(m.bytes_up_stage2, u2);
        }
    }

    #[test]
    fn stage_two_frames_never_precede_stage_one() {
        let (_, out) = run_experiment(&toy_exp(11)).unwrap();
        for r in 1..=2 {
            let stages: Vec<Stage> = out
                .transport
                .records()
                .iter()
                .filter(|rec| rec.round == r)
                .map(|rec| rec.stage)
                .collect();
            let first_two = stages.iter().position(|s| *s == Stage::Two);
            if let Some(i) = first_two {
                assert!(stages[i..].iter().all(|s| *s == Stage::Two));
            }
        }
    }

    #[test]
    fn faults_at_every_step_leave_all_state_unchanged() {
        let cfg = toy_exp(21);
        let env = build_environment(&cfg).unwrap();
        let mut clients: Vec<ClientState> = env
            .clients
            .iter()
            .map(|cd| ClientState {
                client_id: cd.client_id,
                data: cd.clone(),
                prompts: None,
                agg_text: None,
                agg_vis: None,
                seed: rng::subseed(cfg.seed, "client", &[cd.client_id as u64]),
            })
            .collect();
        let global = GlobalState::init(&cfg.model, cfg.seed);
        let before_global = global.fingerprint();
        let before_clients = client_fingerprints(&clients);
        for point in [
            FaultPoint::AfterBroadcast,
            FaultPoint::AfterLocalTraining,
            FaultPoint::AfterPromptUpload,
            FaultPoint::AfterStageTwoBroadcast,
            FaultPoint::AfterAggregatorTraining,
            FaultPoint::AfterAggregatorUpload,
        ] {
            let mut transport = SimTransport::new();
            let got = run_round_with_fault(
                &global,
                &mut clients,
                &env.backbone,
                &cfg,
                &mut transport,
                point,
            );
            assert!(matches!(got, Err(Error::Contract(_))), "{point:?}");
            assert_eq!(global.fingerprint(), before_global, "{point:?}");
            assert_eq!(client_fingerprints(&clients), before_clients, "{point:?}");
        }
        let mut transport = SimTransport::new();
        let (next, _) = run_round(&global, &mut clients, &env.backbone, &cfg, &mut transport).unwrap();
        assert_ne!(next.fingerprint(), before_global);
        assert!(clients.iter().all(|c| c.prompts.is_some()));
    }

    #[test]
    fn avg_baseline_skips_stage_two_and_means_prompts() {
        let mut cfg = k1_exp(31);
        cfg.method = Method::AvgBaseline;
        cfg.rounds = 1;
        let (_, out) = run_experiment(&cfg).unwrap();
        let m = &out.metrics[0];
        assert!(m.stage2_ce.is_empty());
        assert!(m.gamma_entropy_text.is_empty() && m.gamma_entropy_vis.is_empty());
        assert_eq!(m.bytes_down_stage2, 0);
        assert_eq!(m.bytes_up_stage2, 0);
        let init = GlobalState::init(&cfg.model, cfg.seed);
        assert_eq!(out.state.agg_text.fingerprint(), init.agg_text.fingerprint());
        assert_eq!(out.state.agg_vis.fingerprint(), init.agg_vis.fingerprint());
        assert!(out
            .transport
            .records()
            .iter()
            .all(|rec| rec.stage == Stage::One));
    }

    #[test]
    fn k1_baseline_global_equals_the_single_local_set() {
        let mut cfg = k1_exp(33);
        cfg.method = Method::AvgBaseline;
        cfg.rounds = 1;
        let env = build_environment(&cfg).unwrap();
        let out = run_experiment_with_env(&cfg, &env, &NullClock).unwrap();
        // Recompute the client's stage-1 output independently.
        let init = GlobalState::init(&cfg.model, cfg.seed);
        let tc = TrainConfig {
            seed: rng::subseed(rng::subseed(cfg.seed, "client", &[0]), "stage1", &[1]),
            ..cfg.train.clone()
        };
        let (local, _) = local_prompt_round(
            &env.clients[0].train,
            &env.backbone,
            &init.prompts,
            ReferenceMode::ZeroShot,
            &tc,
        )
        .unwrap();
        assert_eq!(out.state.prompts.fingerprint(), local.fingerprint());
    }

    #[test]
    fn k1_plan_collapses_to_transformed_local_with_unit_gamma() {
        let mut cfg = k1_exp(35);
        cfg.rounds = 1;
        let env = build_environment(&cfg).unwrap();
        let out = run_experiment_with_env(&cfg, &env, &NullClock).unwrap();
        let m = &out.metrics[0];
        for h in m.gamma_entropy_text.iter().chain(&m.gamma_entropy_vis) {
            assert_eq!(*h, 0.0);
        }
        // With one client, fedavg returns that client's trained aggregators,
        // so the committed globals must equal aggregating its local set once
        // more under the committed aggregators.
        let init = GlobalState::init(&cfg.model, cfg.seed);
        let tc = TrainConfig {
            seed: rng::subseed(rng::subseed(cfg.seed, "client", &[0]), "stage1", &[1]),
            ..cfg.train.clone()
        };
        let (local, _) = local_prompt_round(
            &env.clients[0].train,
            &env.backbone,
            &init.prompts,
            ReferenceMode::ZeroShot,
            &tc,
        )
        .unwrap();
        let expected =
            aggregate_promptset(&[&local], &out.state.agg_text, &out.state.agg_vis).unwrap();
        assert_eq!(out.state.prompts.fingerprint(), expected.fingerprint());
    }

    #[test]
    fn zsi_reference_differs_from_global_reference_in_round_one() {
        let mut with_zsi = toy_exp(51);
        with_zsi.rounds = 1;
        with_zsi.train.batch_size = 64;
        let mut without = with_zsi.clone();
        without.flags.disable_zsi = true;
        let (_, a) = run_experiment(&with_zsi).unwrap();
        let (_, b) = run_experiment(&without).unwrap();
        // One step per epoch at this batch size: the report is the first
        // step, where local equals global, so the global-reference KL is 0.
        for c in &b.metrics[0].stage1 {
            assert_eq!(c.kl, 0.0);
        }
        assert!(a.metrics[0].stage1.iter().any(|c| c.kl > 0.0));
    }

    #[test]
    fn disable_kl_forces_plain_ce_totals() {
        let mut cfg = toy_exp(61);
        cfg.rounds = 1;
        cfg.flags.disable_kl = true;
        let (_, out) = run_experiment(&cfg).unwrap();
        for c in &out.metrics[0].stage1 {
            assert_eq!(c.total, c.ce);
        }
    }

    #[test]
    fn avg_text_flag_freezes_text_aggregator_and_its_entropy() {
        let mut cfg = toy_exp(71);
        cfg.rounds = 1;
        cfg.flags.avg_text_agg = true;
        let (_, out) = run_experiment(&cfg).unwrap();
        let init = GlobalState::init(&cfg.model, cfg.seed);
        assert_eq!(out.state.agg_text.fingerprint(), init.agg_text.fingerprint());
        assert_ne!(out.state.agg_vis.fingerprint(), init.agg_vis.fingerprint());
        let m = &out.metrics[0];
        assert!(m.gamma_entropy_text.is_empty());
        assert_eq!(m.gamma_entropy_vis.len(), cfg.model.depth);
        // Stage-2 downloads then carry K prompt sets each plus one
        // aggregator; uploads carry one aggregator per client.
        let p = prompt_payload_bytes(&out.state.prompts);
        let a = aggregator_payload_bytes(&out.state.agg_vis);
        let k = cfg.clients;
        assert_eq!(m.bytes_down_stage2, k * (k * p + a));
        assert_eq!(m.bytes_up_stage2, k * a);
    }

    #[test]
    fn evaluate_is_read_only_and_rejects_empty_targets() {
        let cfg = toy_exp(81);
        let env = build_environment(&cfg).unwrap();
        let global = GlobalState::init(&cfg.model, cfg.seed);
        let before = global.fingerprint();
        let acc = evaluate(&global, &env.backbone, &env.target).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(evaluate(&global, &env.backbone, &env.target).unwrap(), acc);
        assert_eq!(global.fingerprint(), before);
        let empty = DomainDataset { domain_id: 9, samples: vec![] };
        assert!(matches!(
            evaluate(&global, &env.backbone, &empty),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn stage_one_ce_improves_over_rounds() {
        let mut cfg = toy_exp(91);
        cfg.rounds = 6;
        cfg.train.lr = 0.3;
        let (_, out) = run_experiment(&cfg).unwrap();
        let mean_ce = |m: &RoundMetrics| {
            m.stage1.iter().map(|c| c.ce).sum::<f64>() / m.stage1.len() as f64
        };
        let first = mean_ce(&out.metrics[0]);
        let last = mean_ce(out.metrics.last().unwrap());
        assert!(last < first, "stage-1 CE {first} -> {last}");
    }
}
