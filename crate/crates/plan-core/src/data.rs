//! Synthetic multi-domain image data with controllable shift, plus the
//! backbone warmup that gives zero-shot inference real signal.
//!
//! Every class has one fixed low-frequency pattern shared by all domains;
//! a domain only changes how that pattern is rendered (channel mixing, per
//! channel offsets, pixel noise, optional integer jitter). Labels therefore
//! mean the same thing everywhere while pixel statistics differ per domain.

use crate::encoder::{
    class_token_sequences, classify_rows, BackboneParams, BoundBackbone, BoundPrompts,
    ModelConfig, PromptSet,
};
use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::{self, substream};
use crate::tensor::{Tape, Tensor, Var};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// One labeled image, stored as `[channels, side, side]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

/// How one domain renders the shared class patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Seed of the per-class base patterns; identical across domains.
    pub class_seed: u64,
    pub samples_per_class: usize,
    /// Channel mixing matrix, `[channels × channels]` row-major.
    pub mix: Vec<f64>,
    /// Per-channel brightness offset.
    pub offset: Vec<f64>,
    pub noise_sigma: f64,
    /// Maximum circular pixel shift; 0 disables geometric jitter.
    pub jitter: usize,
    /// Std of the per-sample multiplicative amplitude jitter.
    pub amp_jitter: f64,
}

/// Strength knobs for a family of mutually shifted domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftParams {
    pub mix_strength: f64,
    pub offset_scale: f64,
    pub noise_sigma: f64,
    pub jitter: usize,
    pub amp_jitter: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams {
            mix_strength: 0.7,
            offset_scale: 0.18,
            noise_sigma: 0.03,
            jitter: 0,
            amp_jitter: 0.15,
        }
    }
}

/// All samples one domain contributes.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub samples: Vec<Sample>,
}

/// One federation participant's data, split into train and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub domain_id: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Builds `n_domains` specs sharing class semantics but differing in their
/// rendering transforms, drawn from `family_seed`.
pub fn domain_family(
    cfg: &ModelConfig,
    n_domains: usize,
    samples_per_class: usize,
    shift: &ShiftParams,
    family_seed: u64,
) -> Vec<DomainSpec> {
    let ch = cfg.image_channels;
    (0..n_domains)
        .map(|d| {
            let mut rng = substream(family_seed, "domain-transform", &[d as u64]);
            let mut mix = vec![0.0; ch * ch];
            for i in 0..ch {
                for j in 0..ch {
                    let base = if i == j { 1.0 } else { 0.0 };
                    mix[i * ch + j] = base + shift.mix_strength * rng::normal(&mut rng);
                }
                // Unit rows keep the rendered contrast in range at any mix
                // strength; the strength then only steers how far the row
                // rotates away from the identity.
                let row = &mut mix[i * ch..(i + 1) * ch];
                let norm = fmath::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                if norm > 1e-9 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                } else {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if i == j { 1.0 } else { 0.0 };
                    }
                }
            }
            let offset = (0..ch)
                .map(|_| shift.offset_scale * rng::normal(&mut rng))
                .collect();
            DomainSpec {
                domain_id: d,
                class_seed: family_seed,
                samples_per_class,
                mix,
                offset,
                noise_sigma: shift.noise_sigma,
                jitter: shift.jitter,
                amp_jitter: shift.amp_jitter,
            }
        })
        .collect()
}

/// Fixed per-class pattern at one pixel: a low-frequency plane wave whose
/// frequency pair and phases are drawn once from the class seed.
fn class_pattern(cfg: &ModelConfig, class_seed: u64, c: usize) -> Vec<f64> {
    let side = cfg.image_side;
    let ch = cfg.image_channels;
    let mut rng = substream(class_seed, "class-pattern", &[c as u64]);
    // Distinct integer frequency pairs keep the classes linearly separable.
    let freqs: [(f64, f64); 8] = [
        (1.0, 0.0),
        (0.0, 1.0),
        (1.0, 1.0),
        (2.0, 1.0),
        (1.0, 2.0),
        (2.0, 0.0),
        (0.0, 2.0),
        (2.0, 2.0),
    ];
    let (fx, fy) = freqs[c % freqs.len()];
    let lap = (c / freqs.len()) as f64;
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut out = vec![0.0; ch * side * side];
    for k in 0..ch {
        let phase = two_pi * rng::uniform(&mut rng);
        for y in 0..side {
            for x in 0..side {
                let t = two_pi * ((fx + lap) * x as f64 + (fy + lap) * y as f64) / side as f64
                    + phase;
                out[k * side * side + y * side + x] = 0.5 + 0.35 * fmath::cos(t);
            }
        }
    }
    out
}

fn clamp01(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else if v > 1.0 {
        1.0
    } else {
        v
    }
}

/// Renders one domain deterministically from `seed`.
pub fn generate_domain(cfg: &ModelConfig, spec: &DomainSpec, seed: u64) -> Result<DomainDataset> {
    cfg.validate()?;
    let ch = cfg.image_channels;
    if spec.mix.len() != ch * ch || spec.offset.len() != ch {
        return Err(Error::Config(format!(
            "domain {} transform sized for {} channels, config has {ch}",
            spec.domain_id,
            spec.offset.len()
        )));
    }
    let side = cfg.image_side;
    let plane = side * side;
    let patterns: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|c| class_pattern(cfg, spec.class_seed, c))
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_classes * spec.samples_per_class);
    for c in 0..cfg.n_classes {
        for i in 0..spec.samples_per_class {
            let mut rng = substream(
                seed,
                "sample",
                &[spec.domain_id as u64, c as u64, i as u64],
            );
            let amp = 1.0 + spec.amp_jitter * rng::normal(&mut rng);
            let (dx, dy) = if spec.jitter > 0 {
                let span = 2 * spec.jitter + 1;
                (rng::below(&mut rng, span), rng::below(&mut rng, span))
            } else {
                (0, 0)
            };
            let mut img = vec![0.0; ch * plane];
            for k in 0..ch {
                for y in 0..side {
                    for x in 0..side {
                        // Circular shift keeps the pattern intact under jitter.
                        let sy = (y + dy) % side;
                        let sx = (x + dx) % side;
                        // Mixing acts on the mean-centered pattern so the
                        // output stays near mid-range under any channel mix.
                        let mut acc = spec.offset[k] + 0.5;
                        for k2 in 0..ch {
                            acc += spec.mix[k * ch + k2]
                                * amp
                                * (patterns[c][k2 * plane + sy * side + sx] - 0.5);
                        }
                        img[k * plane + y * side + x] = acc;
                    }
                }
            }
            for v in img.iter_mut() {
                *v = clamp01(*v + spec.noise_sigma * rng::normal(&mut rng));
            }
            samples.push(Sample {
                image: Tensor::from_vec(vec![ch, side, side], img)?,
                label: c,
            });
        }
    }
    Ok(DomainDataset {
        domain_id: spec.domain_id,
        samples,
    })
}

/// One domain per client, the held-out domain as the target; each client's
/// samples are split 90/10 into train/validation.
pub fn leave_one_out(
    cfg: &ModelConfig,
    specs: &[DomainSpec],
    held_out: usize,
    seed: u64,
) -> Result<(Vec<ClientData>, DomainDataset)> {
    if specs.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-domain-out needs at least 2 domains, got {}",
            specs.len()
        )));
    }
    if !specs.iter().any(|s| s.domain_id == held_out) {
        return Err(Error::Config(format!(
            "held-out domain {held_out} not among the provided specs"
        )));
    }
    let mut clients = Vec::new();
    let mut target = None;
    for spec in specs {
        let ds = generate_domain(cfg, spec, seed)?;
        if spec.domain_id == held_out {
            target = Some(ds);
            continue;
        }
        let n = ds.samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = substream(seed, "client-split", &[spec.domain_id as u64]);
        rng::shuffle(&mut rng, &mut order);
        let n_val = (n / 10).max(1);
        let val = order[..n_val]
            .iter()
            .map(|&i| ds.samples[i].clone())
            .collect();
        let train = order[n_val..]
            .iter()
            .map(|&i| ds.samples[i].clone())
            .collect();
        clients.push(ClientData {
            client_id: clients.len(),
            domain_id: spec.domain_id,
            train,
            val,
        });
    }
    Ok((clients, target.expect("held_out checked above")))
}

/// Lowest index wins ties, so evaluation is deterministic.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of classification under the given prompts over a sample set.
pub fn prompted_accuracy(
    backbone: &BackboneParams,
    prompts: &PromptSet,
    samples: &[Sample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data(String::from("accuracy over zero samples")));
    }
    let cfg = &backbone.config;
    let seqs = class_token_sequences(cfg);
    let classes = seqs.len();
    let mut hits = 0usize;
    for chunk in samples.chunks(64) {
        let mut tape = Tape::new();
        let bound = BoundBackbone::bind(&mut tape, backbone);
        let bp = BoundPrompts::bind(&mut tape, prompts);
        let reps = bound.text_features_batch(&mut tape, &bp.text, &seqs)?;
        let images: Vec<&[f64]> = chunk.iter().map(|s| s.image.data()).collect();
        let feats = bound.vision_features_batch(&mut tape, &bp.visual, &images)?;
        let probs = classify_rows(&mut tape, reps, feats, cfg.tau)?;
        let vals = tape.value(probs);
        for (row, s) in chunk.iter().enumerate() {
            if argmax_lowest(&vals[row * classes..(row + 1) * classes]) == s.label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Accuracy of prompt-free classification over a sample set.
pub fn zero_shot_accuracy(backbone: &BackboneParams, samples: &[Sample]) -> Result<f64> {
    prompted_accuracy(backbone, &PromptSet::empty(&backbone.config), samples)
}

/// Warmup optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            steps: 480,
            lr: 0.01,
            batch_size: 16,
            seed: 77,
        }
    }
}

/// Minimum zero-shot accuracy, as a multiple of chance, that a warmed-up
/// backbone must reach on every checked domain.
pub const WARMUP_MARGIN: f64 = 1.5;

/// Trains every backbone weight on the prompt-free classification objective,
/// then freezes the result. With `steps = 0` the backbone passes through
/// untouched (the random-baseline mode) and no accuracy check applies.
pub fn warmup_backbone(
    mut backbone: BackboneParams,
    pool: &[Sample],
    wcfg: &WarmupConfig,
    check_domains: &[&DomainDataset],
) -> Result<BackboneParams> {
    if wcfg.steps == 0 {
        return Ok(backbone);
    }
    if pool.is_empty() {
        return Err(Error::Data(String::from("warmup pool is empty")));
    }
    let cfg = backbone.config.clone();
    let seqs = class_token_sequences(&cfg);
    backbone.set_trainable();

    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut step = 0;
    let mut epoch = 0u64;
    'outer: loop {
        let mut rng = substream(wcfg.seed, "warmup-shuffle", &[epoch]);
        rng::shuffle(&mut rng, &mut order);
        for batch in order.chunks(wcfg.batch_size) {
            if step >= wcfg.steps {
                break 'outer;
            }
            let mut tape = Tape::new();
            let bound = BoundBackbone::bind(&mut tape, &backbone);
            let empty = PromptSet::empty(&cfg);
            let prompts = BoundPrompts::bind(&mut tape, &empty);
            let reps = bound.text_features_batch(&mut tape, &prompts.text, &seqs)?;
            let images: Vec<&[f64]> = batch.iter().map(|&i| pool[i].image.data()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| pool[i].label).collect();
            let feats = bound.vision_features_batch(&mut tape, &prompts.visual, &images)?;
            let probs = classify_rows(&mut tape, reps, feats, cfg.tau)?;
            let loss = tape.cross_entropy(probs, &labels)?;
            tape.backward(loss)?;
            bound.write_grads_into(&tape, &mut backbone);
            backbone.for_each_tensor_mut(|_, t| {
                t.sgd_step(wcfg.lr);
                t.zero_grad();
            });
            step += 1;
        }
        epoch += 1;
    }
    backbone.freeze();

    let required = WARMUP_MARGIN / cfg.n_classes as f64;
    for ds in check_domains {
        let acc = zero_shot_accuracy(&backbone, &ds.samples)?;
        if acc <= required {
            return Err(Error::Warmup {
                accuracy: acc,
                required,
                domain: ds.domain_id,
            });
        }
    }
    Ok(backbone)
}

/// Stacks a batch of images through the prompted visual encoder and returns
/// per-sample probability rows against category rows `text_reps[C, d]`.
pub fn batch_probability_rows(
    tape: &mut Tape,
    bound: &BoundBackbone,
    text_reps: Var,
    prompts_vis: &[Var],
    samples: &[&Sample],
) -> Result<Var> {
    let images: Vec<&[f64]> = samples.iter().map(|s| s.image.data()).collect();
    let feats = bound.vision_features_batch(tape, prompts_vis, &images)?;
    classify_rows(tape, text_reps, feats, bound.config.tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig::toy()
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = small_cfg();
        let specs = domain_family(&cfg, 2, 3, &ShiftParams::default(), 42);
        let a = generate_domain(&cfg, &specs[0], 7).unwrap();
        let b = generate_domain(&cfg, &specs[0], 7).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(&cfg, &specs[0], 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn null_shift_domains_render_identical_class_images() {
        let cfg = small_cfg();
        let ch = cfg.image_channels;
        let null = |id: usize| DomainSpec {
            domain_id: id,
            class_seed: 5,
            samples_per_class: 2,
            mix: {
                let mut m = vec![0.0; ch * ch];
                for i in 0..ch {
                    m[i * ch + i] = 1.0;
                }
                m
            },
            offset: vec![0.0; ch],
            noise_sigma: 0.0,
            jitter: 0,
            amp_jitter: 0.0,
        };
        let a = generate_domain(&cfg, &null(0), 9).unwrap();
        let b = generate_domain(&cfg, &null(1), 9).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.label, sb.label);
            assert_eq!(sa.image.data(), sb.image.data());
        }
    }

    #[test]
    fn datasets_are_complete_and_in_range() {
        let cfg = small_cfg();
        let specs = domain_family(&cfg, 3, 4, &ShiftParams::default(), 43);
        for spec in &specs {
            let ds = generate_domain(&cfg, spec, 11).unwrap();
            assert_eq!(ds.samples.len(), cfg.n_classes * spec.samples_per_class);
            for c in 0..cfg.n_classes {
                assert!(ds.samples.iter().any(|s| s.label == c));
            }
            for s in &ds.samples {
                assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn leave_one_out_partitions() {
        let cfg = small_cfg();
        let specs = domain_family(&cfg, 4, 5, &ShiftParams::default(), 44);
        let (clients, target) = leave_one_out(&cfg, &specs, 2, 13).unwrap();
        assert_eq!(clients.len(), 3);
        assert_eq!(target.domain_id, 2);
        let total: usize = clients.iter().map(|c| c.train.len() + c.val.len()).sum();
        let expect: usize = specs.iter().map(|s| cfg.n_classes * s.samples_per_class).sum();
        assert_eq!(total + target.samples.len(), expect);
        for c in &clients {
            assert!(!c.val.is_empty());
            assert_eq!(c.train.len() + c.val.len(), cfg.n_classes * 5);
            assert_ne!(c.domain_id, 2);
        }

        let (two_clients, _) = leave_one_out(&cfg, &specs[..2], 0, 13).unwrap();
        assert_eq!(two_clients.len(), 1, "two domains give a single client");
        assert!(leave_one_out(&cfg, &specs, 9, 13).is_err());
        assert!(leave_one_out(&cfg, &specs[..1], 0, 13).is_err());
    }

    #[test]
    fn zero_step_warmup_is_identity() {
        let cfg = small_cfg();
        let b = BackboneParams::init(cfg.clone(), 3).unwrap();
        let before = b.fingerprint();
        let warmed = warmup_backbone(
            b,
            &[],
            &WarmupConfig {
                steps: 0,
                ..WarmupConfig::default()
            },
            &[],
        )
        .unwrap();
        assert_eq!(warmed.fingerprint(), before);
    }

    #[test]
    fn warmup_changes_weights_and_freezes() {
        let cfg = small_cfg();
        let specs = domain_family(&cfg, 1, 4, &ShiftParams::default(), 45);
        let pool = generate_domain(&cfg, &specs[0], 15).unwrap();
        let b = BackboneParams::init(cfg.clone(), 4).unwrap();
        let before = b.fingerprint();
        let warmed = warmup_backbone(
            b,
            &pool.samples,
            &WarmupConfig {
                steps: 3,
                lr: 0.05,
                batch_size: 4,
                seed: 1,
            },
            &[],
        )
        .unwrap();
        assert_ne!(warmed.fingerprint(), before);
        warmed.for_each_tensor(|name, t| {
            assert!(!t.requires_grad(), "{name} must be frozen after warmup");
        });
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax_lowest(&[0.2, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
    }
}
