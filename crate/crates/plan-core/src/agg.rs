//! Stage-2 attention aggregation: per-block, per-modality aggregators score
//! each client's prompt matrix, fuse the set into a global prompt by a
//! softmax-weighted sum of transformed prompts, are trained locally on
//! frozen local prompts with plain cross-entropy, and are averaged
//! elementwise on the server.

use crate::data::{batch_probability_rows, Sample};
use crate::encoder::{
    class_token_sequences, BackboneParams, BoundBackbone, BoundPrompts, ModelConfig, PromptSet,
};
use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::{self, substream};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::TrainConfig;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Bottleneck reduction ratio shared by both aggregator MLPs.
pub const REDUCTION: f64 = 0.125;

/// Which prompt stack an aggregator set fuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    fn label(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "vis",
        }
    }
}

/// Two-layer perceptron; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    /// Fan-in Gaussian first layer; the output layer scale is the caller's
    /// choice so near-identity maps are expressible.
    fn init(input: usize, hidden: usize, output: usize, out_sigma: f64, seed: u64, tag: &str) -> Self {
        let gauss = |sub: &str, shape: Vec<usize>, sigma: f64| {
            let mut rng = substream(seed, &format!("{tag}.{sub}"), &[]);
            Tensor::randn(shape, sigma, &mut rng)
        };
        Mlp {
            w1: gauss("w1", vec![input, hidden], 1.0 / fmath::sqrt(input as f64)),
            b1: Tensor::zeros(vec![hidden]),
            w2: gauss("w2", vec![hidden, output], out_sigma),
            b2: Tensor::zeros(vec![output]),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// One block's fusion head: a scoring query `q` `[d_q, 1]`, the scoring MLP
/// `fq` (flattened prompt -> d_q), and the transform MLP `fa` (flattened
/// prompt -> flattened prompt) applied with a residual skip so it starts
/// near the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub q: Tensor,
    pub fq: Mlp,
    pub fa: Mlp,
}

/// Bottleneck width for a flattened `m x d` prompt: ceil(m*d / 8).
pub fn bottleneck_width(m: usize, d: usize) -> usize {
    (m * d).div_ceil(8)
}

impl Aggregator {
    pub fn init(m: usize, d: usize, seed: u64, tag: &str) -> Self {
        let md = m * d;
        let h = bottleneck_width(m, d);
        let mut rng = substream(seed, &format!("{tag}.q"), &[]);
        Aggregator {
            q: Tensor::randn(vec![h, 1], 1.0 / fmath::sqrt(h as f64), &mut rng),
            fq: Mlp::init(md, h, h, 1.0 / fmath::sqrt(h as f64), seed, &format!("{tag}.fq")),
            // Small output layer keeps the residual transform near identity,
            // so early global prompts stay close to a plain weighted mean.
            fa: Mlp::init(md, h, md, 0.02, seed, &format!("{tag}.fa")),
        }
    }

    /// Flattened prompt width this aggregator accepts.
    pub fn input_width(&self) -> usize {
        self.fa.w1.shape()[0]
    }

    fn for_each_tensor<F: FnMut(&str, &Tensor)>(&self, prefix: &str, f: &mut F) {
        f(&format!("{prefix}.q"), &self.q);
        for (n, t) in self.fq.tensors() {
            f(&format!("{prefix}.fq.{n}"), t);
        }
        for (n, t) in self.fa.tensors() {
            f(&format!("{prefix}.fa.{n}"), t);
        }
    }

    fn for_each_tensor_mut<F: FnMut(&str, &mut Tensor)>(&mut self, prefix: &str, f: &mut F) {
        f(&format!("{prefix}.q"), &mut self.q);
        for (n, t) in self.fq.tensors_mut() {
            f(&format!("{prefix}.fq.{n}"), t);
        }
        for (n, t) in self.fa.tensors_mut() {
            f(&format!("{prefix}.fa.{n}"), t);
        }
    }
}

/// One aggregator per encoder block for a single modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorSet {
    pub modality: Modality,
    /// Prompt rows per block.
    pub m: usize,
    /// Prompt width.
    pub d: usize,
    pub blocks: Vec<Aggregator>,
}

impl AggregatorSet {
    pub fn init(cfg: &ModelConfig, modality: Modality, seed: u64) -> Self {
        let (m, d) = match modality {
            Modality::Text => (cfg.m_t, cfg.d_text),
            Modality::Visual => (cfg.m_v, cfg.d_vis),
        };
        let blocks = (0..cfg.depth)
            .map(|l| Aggregator::init(m, d, seed, &format!("agg.{}.block{l}", modality.label())))
            .collect();
        AggregatorSet { modality, m, d, blocks }
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.for_each_tensor_mut(|_, t| {
            t.set_requires_grad(on);
        });
    }

    pub fn zero_grad(&mut self) {
        self.for_each_tensor_mut(|_, t| t.zero_grad());
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.numel());
        n
    }

    pub fn for_each_tensor<F: FnMut(&str, &Tensor)>(&self, mut f: F) {
        let label = self.modality.label();
        for (l, a) in self.blocks.iter().enumerate() {
            a.for_each_tensor(&format!("{label}.block{l}"), &mut f);
        }
    }

    pub fn for_each_tensor_mut<F: FnMut(&str, &mut Tensor)>(&mut self, mut f: F) {
        let label = self.modality.label();
        for (l, a) in self.blocks.iter_mut().enumerate() {
            a.for_each_tensor_mut(&format!("{label}.block{l}"), &mut f);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_tensor(|n, t| out.push((String::from(n), t.clone())));
        out
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = rng::fnv1a(b"aggregators");
        self.for_each_tensor(|name, t| {
            h = rng::fnv1a_extend(h, name.as_bytes());
            h = rng::fnv1a_extend(h, &t.fingerprint().to_le_bytes());
        });
        h
    }
}

/// Per-client fusion weights of one block and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub gamma: Vec<f64>,
}

/// One aggregator bound onto a tape.
pub struct BoundAggregator {
    pub q: Var,
    pub fq_w1: Var,
    pub fq_b1: Var,
    pub fq_w2: Var,
    pub fq_b2: Var,
    pub fa_w1: Var,
    pub fa_b1: Var,
    pub fa_w2: Var,
    pub fa_b2: Var,
}

impl BoundAggregator {
    pub fn bind(tape: &mut Tape, a: &Aggregator) -> Self {
        BoundAggregator {
            q: tape.input(&a.q),
            fq_w1: tape.input(&a.fq.w1),
            fq_b1: tape.input(&a.fq.b1),
            fq_w2: tape.input(&a.fq.w2),
            fq_b2: tape.input(&a.fq.b2),
            fa_w1: tape.input(&a.fa.w1),
            fa_b1: tape.input(&a.fa.b1),
            fa_w2: tape.input(&a.fa.w2),
            fa_b2: tape.input(&a.fa.b2),
        }
    }

    pub fn write_grads_into(&self, tape: &Tape, a: &mut Aggregator) {
        tape.write_grad_into(self.q, &mut a.q);
        tape.write_grad_into(self.fq_w1, &mut a.fq.w1);
        tape.write_grad_into(self.fq_b1, &mut a.fq.b1);
        tape.write_grad_into(self.fq_w2, &mut a.fq.w2);
        tape.write_grad_into(self.fq_b2, &mut a.fq.b2);
        tape.write_grad_into(self.fa_w1, &mut a.fa.w1);
        tape.write_grad_into(self.fa_b1, &mut a.fa.b1);
        tape.write_grad_into(self.fa_w2, &mut a.fa.w2);
        tape.write_grad_into(self.fa_b2, &mut a.fa.b2);
    }
}

/// One modality's aggregators bound onto a tape.
pub struct BoundAggregatorSet {
    pub blocks: Vec<BoundAggregator>,
}

impl BoundAggregatorSet {
    pub fn bind(tape: &mut Tape, s: &AggregatorSet) -> Self {
        BoundAggregatorSet {
            blocks: s.blocks.iter().map(|a| BoundAggregator::bind(tape, a)).collect(),
        }
    }

    pub fn write_grads_into(&self, tape: &Tape, s: &mut AggregatorSet) {
        for (b, a) in self.blocks.iter().zip(s.blocks.iter_mut()) {
            b.write_grads_into(tape, a);
        }
    }
}

/// Reshapes K prompt matrices of identical shape `[m, d]` into `[1, m*d]`
/// rows; the shared shape is returned.
fn flatten_prompts(tape: &mut Tape, locals: &[Var]) -> Result<(Vec<Var>, usize, usize)> {
    if locals.is_empty() {
        return Err(Error::Config(String::from("aggregation needs at least one client")));
    }
    let shape = tape.shape_of(locals[0]).to_vec();
    let (m, d) = (shape[0], shape[1]);
    if m == 0 {
        return Err(Error::Config(String::from("cannot aggregate empty prompts")));
    }
    let mut flats = Vec::with_capacity(locals.len());
    for &p in locals {
        if tape.shape_of(p) != shape.as_slice() {
            return Err(Error::Config(format!(
                "client prompt shape {:?} differs from {:?}",
                tape.shape_of(p),
                shape
            )));
        }
        flats.push(tape.reshape(p, vec![1, m * d])?);
    }
    Ok((flats, m, d))
}

/// Fusion weights `[1, K]`: softmax over clients of the query's inner
/// product with each scored flattened prompt.
pub fn gamma_vars(tape: &mut Tape, agg: &BoundAggregator, flats: &[Var]) -> Result<Var> {
    let mut scores = Vec::with_capacity(flats.len());
    for &f in flats {
        let h = tape.matmul(f, agg.fq_w1)?;
        let h = tape.add_row(h, agg.fq_b1)?;
        let h = tape.gelu(h);
        let s = tape.matmul(h, agg.fq_w2)?;
        let s = tape.add_row(s, agg.fq_b2)?;
        scores.push(tape.matmul(s, agg.q)?);
    }
    let col = tape.concat_rows(&scores)?;
    let row = tape.reshape(col, vec![1, flats.len()])?;
    tape.softmax_rows(row)
}

/// Weighted sum of residually transformed prompts, reshaped to `[m, d]`.
pub fn fuse_vars(
    tape: &mut Tape,
    agg: &BoundAggregator,
    flats: &[Var],
    gamma: Var,
    m: usize,
    d: usize,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(flats.len());
    for &f in flats {
        let h = tape.matmul(f, agg.fa_w1)?;
        let h = tape.add_row(h, agg.fa_b1)?;
        let h = tape.gelu(h);
        let t = tape.matmul(h, agg.fa_w2)?;
        let t = tape.add_row(t, agg.fa_b2)?;
        rows.push(tape.add(f, t)?);
    }
    let stacked = tape.concat_rows(&rows)?;
    let fused = tape.matmul(gamma, stacked)?;
    tape.reshape(fused, vec![m, d])
}

/// Fusion weights and fused prompt of one block in one pass.
pub fn aggregate_block_vars(
    tape: &mut Tape,
    agg: &BoundAggregator,
    locals: &[Var],
) -> Result<(Var, Var)> {
    let (flats, m, d) = flatten_prompts(tape, locals)?;
    let gamma = gamma_vars(tape, agg, &flats)?;
    let fused = fuse_vars(tape, agg, &flats, gamma, m, d)?;
    Ok((gamma, fused))
}

fn check_width(agg: &Aggregator, m: usize, d: usize) -> Result<()> {
    if agg.input_width() != m * d {
        return Err(Error::Config(format!(
            "aggregator takes width {}, prompts flatten to {}",
            agg.input_width(),
            m * d
        )));
    }
    Ok(())
}

/// Fusion weights for K local prompt matrices under one aggregator.
pub fn attention_weights(locals: &[&Tensor], agg: &Aggregator) -> Result<AttentionWeights> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = locals.iter().map(|t| tape.input(t)).collect();
    let (flats, m, d) = flatten_prompts(&mut tape, &vars)?;
    check_width(agg, m, d)?;
    let bound = BoundAggregator::bind(&mut tape, agg);
    let gamma = gamma_vars(&mut tape, &bound, &flats)?;
    Ok(AttentionWeights { gamma: tape.value(gamma).to_vec() })
}

/// Fuses K local prompt matrices with given weights into one `[m, d]` prompt.
pub fn aggregate(
    locals: &[&Tensor],
    gamma: &AttentionWeights,
    agg: &Aggregator,
) -> Result<Tensor> {
    if gamma.gamma.len() != locals.len() {
        return Err(Error::Config(format!(
            "{} weights for {} clients",
            gamma.gamma.len(),
            locals.len()
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = locals.iter().map(|t| tape.input(t)).collect();
    let (flats, m, d) = flatten_prompts(&mut tape, &vars)?;
    check_width(agg, m, d)?;
    let bound = BoundAggregator::bind(&mut tape, agg);
    let g = tape.constant(vec![1, locals.len()], gamma.gamma.clone())?;
    let fused = fuse_vars(&mut tape, &bound, &flats, g, m, d)?;
    let mut out = Tensor::from_vec(vec![m, d], tape.value(fused).to_vec())?;
    out.set_requires_grad(false);
    Ok(out)
}

fn check_set_shapes(
    all_local: &[&PromptSet],
    agg_text: &AggregatorSet,
    agg_vis: &AggregatorSet,
) -> Result<usize> {
    if all_local.is_empty() {
        return Err(Error::Config(String::from("aggregation needs at least one client")));
    }
    let depth = agg_text.blocks.len();
    if agg_vis.blocks.len() != depth {
        return Err(Error::Protocol {
            offset: 0,
            detail: format!(
                "text aggregators cover {depth} blocks, visual {}",
                agg_vis.blocks.len()
            ),
        });
    }
    for (k, p) in all_local.iter().enumerate() {
        if p.text.len() != depth || p.visual.len() != depth {
            return Err(Error::Protocol {
                offset: 0,
                detail: format!(
                    "client {k} prompt stacks cover {}/{} blocks, aggregators {depth}",
                    p.text.len(),
                    p.visual.len()
                ),
            });
        }
    }
    Ok(depth)
}

fn check_prompt_depths(all_local: &[&PromptSet]) -> Result<usize> {
    if all_local.is_empty() {
        return Err(Error::Config(String::from("aggregation needs at least one client")));
    }
    let depth = all_local[0].text.len();
    for (k, p) in all_local.iter().enumerate() {
        if p.text.len() != depth || p.visual.len() != depth {
            return Err(Error::Protocol {
                offset: 0,
                detail: format!(
                    "client {k} prompt stacks cover {}/{} blocks, expected {depth}",
                    p.text.len(),
                    p.visual.len()
                ),
            });
        }
    }
    Ok(depth)
}

/// Builds the fused global prompt stack of one modality on `tape`.
/// `per_client[k]` is client k's per-block prompt vars for this modality.
pub fn aggregate_modality_vars(
    tape: &mut Tape,
    agg: &BoundAggregatorSet,
    per_client: &[&[Var]],
) -> Result<Vec<Var>> {
    let depth = agg.blocks.len();
    let mut fused = Vec::with_capacity(depth);
    for (l, block_agg) in agg.blocks.iter().enumerate() {
        let locals: Vec<Var> = per_client.iter().map(|c| c[l]).collect();
        let (_, out) = aggregate_block_vars(tape, block_agg, &locals)?;
        fused.push(out);
    }
    Ok(fused)
}

/// Server-side fusion of K clients' prompt sets into the next global set,
/// block by block and modality by modality.
pub fn aggregate_promptset(
    all_local: &[&PromptSet],
    agg_text: &AggregatorSet,
    agg_vis: &AggregatorSet,
) -> Result<PromptSet> {
    let depth = check_set_shapes(all_local, agg_text, agg_vis)?;
    let mut text = Vec::with_capacity(depth);
    let mut visual = Vec::with_capacity(depth);
    for l in 0..depth {
        let t_locals: Vec<&Tensor> = all_local.iter().map(|p| &p.text[l]).collect();
        let g = attention_weights(&t_locals, &agg_text.blocks[l])?;
        text.push(aggregate(&t_locals, &g, &agg_text.blocks[l])?);
        let v_locals: Vec<&Tensor> = all_local.iter().map(|p| &p.visual[l]).collect();
        let g = attention_weights(&v_locals, &agg_vis.blocks[l])?;
        visual.push(aggregate(&v_locals, &g, &agg_vis.blocks[l])?);
    }
    Ok(PromptSet { text, visual })
}

/// Equal-weight mean of K prompt sets: the attention-free baseline fusion.
/// Sums client-index ascending, then divides.
pub fn mean_promptsets(sets: &[&PromptSet]) -> Result<PromptSet> {
    if sets.is_empty() {
        return Err(Error::Config(String::from("mean of zero prompt sets")));
    }
    let depth = sets[0].text.len();
    for (k, s) in sets.iter().enumerate() {
        if s.text.len() != depth || s.visual.len() != depth {
            return Err(Error::Protocol {
                offset: 0,
                detail: format!("client {k} prompt stack depth differs"),
            });
        }
    }
    let k = sets.len() as f64;
    let mean_side = |pick: &dyn Fn(&PromptSet) -> &Vec<Tensor>| -> Result<Vec<Tensor>> {
        (0..depth)
            .map(|l| {
                let shape = pick(sets[0])[l].shape().to_vec();
                let mut acc = vec![0.0; pick(sets[0])[l].numel()];
                for s in sets {
                    let t = &pick(s)[l];
                    if t.shape() != shape.as_slice() {
                        return Err(Error::Protocol {
                            offset: 0,
                            detail: String::from("prompt shapes differ across clients"),
                        });
                    }
                    for (a, v) in acc.iter_mut().zip(t.data()) {
                        *a += *v;
                    }
                }
                for a in acc.iter_mut() {
                    *a /= k;
                }
                Tensor::from_vec(shape, acc)
            })
            .collect()
    };
    Ok(PromptSet {
        text: mean_side(&|s: &PromptSet| &s.text)?,
        visual: mean_side(&|s: &PromptSet| &s.visual)?,
    })
}

/// Losses of one stage-2 optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct AggStepReport {
    pub ce_loss: f64,
    pub samples: usize,
}

/// One client's stage-2 round: E epochs of minibatch SGD on the
/// cross-entropy of predictions under the aggregated global prompts,
/// recomputed every forward pass. Gradients reach only the aggregators; the
/// local prompt sets and the backbone stay untouched.
pub fn train_aggregators_locally(
    data: &[Sample],
    backbone: &BackboneParams,
    all_local: &[&PromptSet],
    agg_text: &AggregatorSet,
    agg_vis: &AggregatorSet,
    cfg: &TrainConfig,
) -> Result<(AggregatorSet, AggregatorSet, Vec<AggStepReport>)> {
    let (t, v, reports) = train_aggregators_with_modes(
        data,
        backbone,
        all_local,
        Some(agg_text),
        Some(agg_vis),
        cfg,
    )?;
    Ok((t.expect("text requested"), v.expect("visual requested"), reports))
}

/// Stage-2 training where either modality's aggregator may be replaced by
/// the equal-weight mean of the local prompts (`None`): that modality then
/// contributes a fixed fusion and receives no gradient.
pub fn train_aggregators_with_modes(
    data: &[Sample],
    backbone: &BackboneParams,
    all_local: &[&PromptSet],
    agg_text: Option<&AggregatorSet>,
    agg_vis: Option<&AggregatorSet>,
    cfg: &TrainConfig,
) -> Result<(Option<AggregatorSet>, Option<AggregatorSet>, Vec<AggStepReport>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data(String::from("client has no training samples")));
    }
    if agg_text.is_none() && agg_vis.is_none() {
        return Err(Error::Config(String::from("stage 2 with no aggregator to train")));
    }
    let depth = check_prompt_depths(all_local)?;
    for set in [agg_text, agg_vis].into_iter().flatten() {
        if set.blocks.len() != depth {
            return Err(Error::Protocol {
                offset: 0,
                detail: format!(
                    "aggregators cover {} blocks, prompts {depth}",
                    set.blocks.len()
                ),
            });
        }
    }
    let model_cfg = &backbone.config;
    let seqs = class_token_sequences(model_cfg);

    // The mean is constant through the round; each tape binds it afresh.
    let mean = if agg_text.is_none() || agg_vis.is_none() {
        Some(mean_promptsets(all_local)?)
    } else {
        None
    };
    let mut a_text = agg_text.cloned();
    let mut a_vis = agg_vis.cloned();
    for s in [a_text.as_mut(), a_vis.as_mut()].into_iter().flatten() {
        s.set_requires_grad(true);
    }

    let mut reports = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, "stage2-shuffle", &[epoch as u64]);
        rng::shuffle(&mut rng, &mut order);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

            let mut tape = Tape::new();
            let bound = BoundBackbone::bind(&mut tape, backbone);
            let bound_text = a_text.as_ref().map(|s| BoundAggregatorSet::bind(&mut tape, s));
            let bound_vis = a_vis.as_ref().map(|s| BoundAggregatorSet::bind(&mut tape, s));
            let bound_locals: Vec<BoundPrompts> = all_local
                .iter()
                .map(|p| BoundPrompts::bind(&mut tape, p))
                .collect();

            let global_text = match &bound_text {
                Some(bt) => {
                    let stacks: Vec<&[Var]> =
                        bound_locals.iter().map(|b| b.text.as_slice()).collect();
                    aggregate_modality_vars(&mut tape, bt, &stacks)?
                }
                None => {
                    let m = mean.as_ref().expect("mean built above");
                    m.text.iter().map(|t| tape.input(t)).collect()
                }
            };
            let global_vis = match &bound_vis {
                Some(bv) => {
                    let stacks: Vec<&[Var]> =
                        bound_locals.iter().map(|b| b.visual.as_slice()).collect();
                    aggregate_modality_vars(&mut tape, bv, &stacks)?
                }
                None => {
                    let m = mean.as_ref().expect("mean built above");
                    m.visual.iter().map(|t| tape.input(t)).collect()
                }
            };

            let reps = bound.text_features_batch(&mut tape, &global_text, &seqs)?;
            let probs = batch_probability_rows(&mut tape, &bound, reps, &global_vis, &batch)?;
            let ce = tape.cross_entropy(probs, &labels)?;

            tape.backward(ce)?;
            if let (Some(b), Some(s)) = (&bound_text, a_text.as_mut()) {
                b.write_grads_into(&tape, s);
            }
            if let (Some(b), Some(s)) = (&bound_vis, a_vis.as_mut()) {
                b.write_grads_into(&tape, s);
            }
            for s in [a_text.as_mut(), a_vis.as_mut()].into_iter().flatten() {
                s.for_each_tensor_mut(|_, t| {
                    t.sgd_step(cfg.lr);
                    t.zero_grad();
                });
            }

            reports.push(AggStepReport {
                ce_loss: tape.scalar_value(ce),
                samples: batch.len(),
            });
        }
    }
    Ok((a_text, a_vis, reports))
}

/// Elementwise arithmetic mean of K aggregator pairs, client index ascending.
pub fn fedavg_aggregators(
    pairs: &[(&AggregatorSet, &AggregatorSet)],
) -> Result<(AggregatorSet, AggregatorSet)> {
    if pairs.is_empty() {
        return Err(Error::Config(String::from("fedavg needs at least one client")));
    }
    let texts: Vec<&AggregatorSet> = pairs.iter().map(|p| p.0).collect();
    let visuals: Vec<&AggregatorSet> = pairs.iter().map(|p| p.1).collect();
    Ok((mean_sets(&texts)?, mean_sets(&visuals)?))
}

/// Single-modality federated averaging of aggregator sets sharing a topology.
pub fn fedavg_aggregator_set(sets: &[&AggregatorSet]) -> Result<AggregatorSet> {
    if sets.is_empty() {
        return Err(Error::Config(String::from("fedavg needs at least one client")));
    }
    mean_sets(sets)
}

fn mean_sets(sets: &[&AggregatorSet]) -> Result<AggregatorSet> {
    let first = sets[0];
    let mut out = first.clone();
    let reference = first.named_tensors();
    for (k, s) in sets.iter().enumerate().skip(1) {
        let named = s.named_tensors();
        let same = s.modality == first.modality
            && named.len() == reference.len()
            && named
                .iter()
                .zip(reference.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape());
        if !same {
            return Err(Error::Protocol {
                offset: 0,
                detail: format!("client {k} aggregator topology differs from client 0"),
            });
        }
    }
    let k = sets.len() as f64;
    out.for_each_tensor_mut(|name, t| {
        let data = t.data_mut();
        for v in data.iter_mut() {
            *v = 0.0;
        }
        for s in sets {
            s.for_each_tensor(|n, src| {
                if n == name {
                    for (dst, v) in data.iter_mut().zip(src.data()) {
                        *dst += *v;
                    }
                }
            });
        }
        for v in data.iter_mut() {
            *v /= k;
        }
    });
    out.set_requires_grad(false);
    Ok(out)
}
