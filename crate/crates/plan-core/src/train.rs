//! Stage-1 local training: one client tunes its prompt set under
//! cross-entropy plus a KL term that pulls local predictions toward a
//! reference distribution — the global-prompt predictions in normal rounds,
//! the prompt-free zero-shot predictions in the very first round.

use crate::data::{batch_probability_rows, Sample};
use crate::encoder::{
    class_token_sequences, BackboneParams, BoundBackbone, BoundPrompts, PromptSet,
};
use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::{self, substream};
use crate::tensor::{Tape, Tensor, LOG_CLAMP};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// The only optimizer here; kept as an explicit kind so configs are honest
/// about what runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
}

/// Local optimization settings for one client round.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the KL alignment term.
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Local epochs per round.
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    /// Published defaults: alpha 1, lr 0.0015, batch 32, one local epoch.
    pub fn reference_defaults() -> Self {
        TrainConfig {
            alpha: 1.0,
            lr: 0.0015,
            batch_size: 32,
            epochs: 1,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if self.epochs < 1 {
            return Err(Error::Config(String::from("epochs must be at least 1")));
        }
        if self.batch_size < 1 {
            return Err(Error::Config(String::from("batch size must be at least 1")));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        Ok(())
    }
}

/// Which distribution the KL term aligns local predictions to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Predictions under the (fixed) global prompts.
    GlobalPrompts,
    /// Prompt-free predictions; the substitute used before any global
    /// prompts exist.
    ZeroShot,
}

/// Losses of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStepReport {
    pub ce_loss: f64,
    pub kl_loss: f64,
    /// ce_loss + alpha * kl_loss.
    pub total_loss: f64,
    pub samples: usize,
    /// Local probabilities that hit the log clamp while evaluating the KL.
    pub kl_clamp_events: usize,
}

/// Mean negative log-likelihood with the log argument clamped at 1e-12.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape.to_vec(),
            rhs: Vec::new(),
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n || n == 0 {
        return Err(Error::Data(format!(
            "{} labels for {n} probability rows",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range 0..{c}")));
        }
        total -= fmath::ln(fmath::max(probs.data()[i * c + y], LOG_CLAMP));
    }
    Ok(total / n as f64)
}

/// Mean KL divergence with the global distribution as the reference:
/// (1/N) sum_i sum_j pg_ij * log(pg_ij / pl_ij). Returns the value and the
/// count of local probabilities that needed clamping.
pub fn kl_divergence(p_global: &Tensor, p_local: &Tensor) -> Result<(f64, usize)> {
    if p_global.shape() != p_local.shape() || p_global.shape().len() != 2 {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: p_global.shape().to_vec(),
            rhs: p_local.shape().to_vec(),
        });
    }
    let n = p_global.shape()[0];
    if n == 0 {
        return Err(Error::Data(String::from("kl over zero samples")));
    }
    let mut total = 0.0;
    let mut clamped = 0usize;
    for (&pg, &pl) in p_global.data().iter().zip(p_local.data()) {
        if pg <= 0.0 {
            continue;
        }
        if pl < LOG_CLAMP {
            clamped += 1;
        }
        total += pg * (fmath::ln(fmath::max(pg, LOG_CLAMP)) - fmath::ln(fmath::max(pl, LOG_CLAMP)));
    }
    Ok((total / n as f64, clamped))
}

/// One client's stage-1 round: initialize local prompts from the global set
/// and run E epochs of minibatch SGD on ce + alpha * kl. The reference
/// distribution is recomputed per minibatch with gradients disabled; the
/// global prompts and the backbone are never modified.
pub fn local_prompt_round(
    data: &[Sample],
    backbone: &BackboneParams,
    global_prompts: &PromptSet,
    reference_mode: ReferenceMode,
    cfg: &TrainConfig,
) -> Result<(PromptSet, Vec<LocalStepReport>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data(String::from("client has no training samples")));
    }
    let model_cfg = &backbone.config;
    let seqs = class_token_sequences(model_cfg);

    let mut local = global_prompts.clone();
    local.set_requires_grad(true);

    // The reference forward must not leak gradients into anything.
    let mut reference_prompts = match reference_mode {
        ReferenceMode::GlobalPrompts => global_prompts.clone(),
        ReferenceMode::ZeroShot => PromptSet::empty(model_cfg),
    };
    reference_prompts.set_requires_grad(false);

    let mut reports = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, "stage1-shuffle", &[epoch as u64]);
        rng::shuffle(&mut rng, &mut order);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

            let mut tape = Tape::new();
            let bound = BoundBackbone::bind(&mut tape, backbone);

            let ref_bound = BoundPrompts::bind(&mut tape, &reference_prompts);
            let ref_reps = bound.text_features_batch(&mut tape, &ref_bound.text, &seqs)?;
            let ref_probs =
                batch_probability_rows(&mut tape, &bound, ref_reps, &ref_bound.visual, &batch)?;
            let reference = tape.value(ref_probs).to_vec();

            let local_bound = BoundPrompts::bind(&mut tape, &local);
            let reps = bound.text_features_batch(&mut tape, &local_bound.text, &seqs)?;
            let probs =
                batch_probability_rows(&mut tape, &bound, reps, &local_bound.visual, &batch)?;

            let ce = tape.cross_entropy(probs, &labels)?;
            let (kl, clamp_events) = tape.kl_from_reference(&reference, probs)?;
            let weighted_kl = tape.scale(kl, cfg.alpha);
            let total = tape.add(ce, weighted_kl)?;

            tape.backward(total)?;
            local_bound.write_grads_into(&tape, &mut local);
            for t in local.text.iter_mut().chain(local.visual.iter_mut()) {
                t.sgd_step(cfg.lr);
                t.zero_grad();
            }

            reports.push(LocalStepReport {
                ce_loss: tape.scalar_value(ce),
                kl_loss: tape.scalar_value(kl),
                total_loss: tape.scalar_value(total),
                samples: batch.len(),
                kl_clamp_events: clamp_events,
            });
        }
    }
    Ok((local, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{domain_family, generate_domain, ShiftParams};
    use crate::encoder::ModelConfig;

    #[test]
    fn cross_entropy_examples() {
        let perfect = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(cross_entropy(&perfect, &[0, 1]).unwrap(), 0.0);

        let uniform = Tensor::from_vec(vec![1, 4], vec![0.25; 4]).unwrap();
        let got = cross_entropy(&uniform, &[2]).unwrap();
        assert!((got - fmath::ln(4.0)).abs() < 1e-12, "{got}");

        let two = Tensor::from_vec(vec![2, 2], vec![0.7, 0.3, 0.2, 0.8]).unwrap();
        let got = cross_entropy(&two, &[0, 1]).unwrap();
        let want = -(fmath::ln(0.7) + fmath::ln(0.8)) / 2.0;
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.289909).abs() < 1e-6);
    }

    #[test]
    fn kl_examples_and_asymmetry() {
        let p = Tensor::from_vec(vec![1, 2], vec![0.6, 0.4]).unwrap();
        let (v, clamped) = kl_divergence(&p, &p).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(clamped, 0);

        let pg = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let pl = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let (v, _) = kl_divergence(&pg, &pl).unwrap();
        assert!((v - fmath::ln(2.0)).abs() < 1e-12);

        // Direct-formula oracle for both directions.
        let a = Tensor::from_vec(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let b = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let (ab, _) = kl_divergence(&a, &b).unwrap();
        let (ba, _) = kl_divergence(&b, &a).unwrap();
        let direct_ab = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let direct_ba = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((ab - direct_ab).abs() < 1e-12);
        assert!((ba - direct_ba).abs() < 1e-12);
        assert!((ab - ba).abs() > 0.1, "kl must be asymmetric: {ab} vs {ba}");
    }

    #[test]
    fn kl_clamps_zero_local_probability() {
        let pg = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let pl = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let (v, clamped) = kl_divergence(&pg, &pl).unwrap();
        assert_eq!(clamped, 1);
        assert!(v.is_finite() && v > 0.0);
    }

    fn toy_setup() -> (ModelConfig, BackboneParams, PromptSet, Vec<Sample>) {
        let cfg = ModelConfig::toy();
        let backbone = BackboneParams::init(cfg.clone(), 101).unwrap();
        let global = PromptSet::init(&cfg, 102, "global");
        let specs = domain_family(&cfg, 1, 4, &ShiftParams::default(), 103);
        let data = generate_domain(&cfg, &specs[0], 104).unwrap().samples;
        (cfg, backbone, global, data)
    }

    #[test]
    fn lr_zero_leaves_prompts_bitwise_unchanged() {
        let (_, backbone, global, data) = toy_setup();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 6,
            ..TrainConfig::reference_defaults()
        };
        let (updated, reports) =
            local_prompt_round(&data, &backbone, &global, ReferenceMode::GlobalPrompts, &cfg)
                .unwrap();
        assert_eq!(updated.fingerprint(), global.fingerprint());
        assert!(!reports.is_empty());
    }

    #[test]
    fn kl_is_zero_at_step_zero_under_global_reference() {
        let (_, backbone, global, data) = toy_setup();
        let cfg = TrainConfig {
            batch_size: data.len(),
            ..TrainConfig::reference_defaults()
        };
        let (_, reports) =
            local_prompt_round(&data, &backbone, &global, ReferenceMode::GlobalPrompts, &cfg)
                .unwrap();
        assert!(
            reports[0].kl_loss.abs() < 1e-10,
            "local == global at step 0, kl was {}",
            reports[0].kl_loss
        );
    }

    #[test]
    fn report_total_is_ce_plus_alpha_kl() {
        let (_, backbone, global, data) = toy_setup();
        let cfg = TrainConfig {
            alpha: 0.7,
            batch_size: 5,
            epochs: 2,
            ..TrainConfig::reference_defaults()
        };
        let (_, reports) =
            local_prompt_round(&data, &backbone, &global, ReferenceMode::ZeroShot, &cfg).unwrap();
        for r in &reports {
            assert!((r.total_loss - (r.ce_loss + 0.7 * r.kl_loss)).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_zero_updates_equal_pure_ce_updates() {
        let (_, backbone, global, data) = toy_setup();
        let cfg = TrainConfig {
            alpha: 0.0,
            lr: 0.5,
            batch_size: 6,
            ..TrainConfig::reference_defaults()
        };
        let (updated, reports) =
            local_prompt_round(&data, &backbone, &global, ReferenceMode::GlobalPrompts, &cfg)
                .unwrap();
        // Manual pure-CE replica of the same schedule.
        let seqs = class_token_sequences(&backbone.config);
        let mut manual = global.clone();
        manual.set_requires_grad(true);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = substream(cfg.seed, "stage1-shuffle", &[0]);
        rng::shuffle(&mut rng, &mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let bound = BoundBackbone::bind(&mut tape, &backbone);
            let pb = BoundPrompts::bind(&mut tape, &manual);
            let reps = bound.text_features_batch(&mut tape, &pb.text, &seqs).unwrap();
            let probs = batch_probability_rows(&mut tape, &bound, reps, &pb.visual, &batch).unwrap();
            let ce = tape.cross_entropy(probs, &labels).unwrap();
            tape.backward(ce).unwrap();
            pb.write_grads_into(&tape, &mut manual);
            for t in manual.text.iter_mut().chain(manual.visual.iter_mut()) {
                t.sgd_step(cfg.lr);
                t.zero_grad();
            }
        }
        assert_eq!(updated.fingerprint(), manual.fingerprint());
        assert!(reports.iter().all(|r| r.kl_loss.is_finite()));
    }

    #[test]
    fn round_is_deterministic_and_preserves_inputs() {
        let (_, backbone, global, data) = toy_setup();
        let backbone_hash = backbone.fingerprint();
        let global_hash = global.fingerprint();
        let cfg = TrainConfig {
            lr: 0.2,
            batch_size: 4,
            ..TrainConfig::reference_defaults()
        };
        let (a, ra) =
            local_prompt_round(&data, &backbone, &global, ReferenceMode::ZeroShot, &cfg).unwrap();
        let (b, rb) =
            local_prompt_round(&data, &backbone, &global, ReferenceMode::ZeroShot, &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(ra, rb);
        assert_ne!(a.fingerprint(), global_hash, "training must move the prompts");
        assert_eq!(backbone.fingerprint(), backbone_hash);
        assert_eq!(global.fingerprint(), global_hash);
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let (_, backbone, global, _) = toy_setup();
        let cfg = TrainConfig::reference_defaults();
        assert!(matches!(
            local_prompt_round(&[], &backbone, &global, ReferenceMode::ZeroShot, &cfg),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn fifty_steps_halve_ce_on_two_class_toy_client() {
        let mut cfg = ModelConfig::toy();
        cfg.n_classes = 2;
        cfg.vocab_size = 6;
        let backbone = BackboneParams::init(cfg.clone(), 201).unwrap();
        let global = PromptSet::init(&cfg, 202, "global");
        let specs = domain_family(&cfg, 1, 5, &ShiftParams::default(), 203);
        let data = generate_domain(&cfg, &specs[0], 204).unwrap().samples;
        // 10 samples, batch 5 -> 2 steps per epoch; 25 epochs -> 50 steps.
        let tc = TrainConfig {
            alpha: 0.0,
            lr: 0.2,
            batch_size: 5,
            epochs: 25,
            optimizer: OptimizerKind::Sgd,
            seed: 205,
        };
        let (_, reports) =
            local_prompt_round(&data, &backbone, &global, ReferenceMode::ZeroShot, &tc).unwrap();
        assert_eq!(reports.len(), 50);
        let first = reports.first().unwrap().ce_loss;
        let last = reports.last().unwrap().ce_loss;
        assert!(
            last <= 0.5 * first,
            "ce must at least halve over 50 steps: {first} -> {last}"
        );
    }
}
