//! Frozen dual-encoder backbone with per-block prompt injection.
//!
//! Both encoders are stacks of pre-norm transformer blocks. A forward pass
//! assembles the sequence ([cls], prompts, content) for every block: block
//! outputs at prompt positions are discarded and replaced by that block's
//! fresh learnable prompt rows, while [cls] and content rows propagate.
//! Features are the final [cls] row, layer-normed, projected to the shared
//! width and L2-normalized. Classification is softmax over cosine
//! similarities divided by a fixed temperature.

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::substream;
use crate::tensor::{softmax_row, MhaVars, Tape, Tensor, Var};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Geometry and scale of the dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of transformer blocks per encoder.
    pub depth: usize,
    pub d_text: usize,
    pub d_vis: usize,
    /// Shared projection width of both feature heads.
    pub d_proj: usize,
    pub n_heads: usize,
    /// Text prompt rows per block.
    pub m_t: usize,
    /// Visual prompt rows per block.
    pub m_v: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub image_channels: usize,
    pub image_side: usize,
    pub patch_side: usize,
    /// MLP hidden width as a multiple of the block width.
    pub mlp_ratio: usize,
    pub ln_eps: f64,
    /// Softmax temperature; fixed, never trained.
    pub tau: f64,
}

impl ModelConfig {
    /// Small configuration that exercises every code path in seconds.
    pub fn desk() -> Self {
        ModelConfig {
            depth: 4,
            d_text: 32,
            d_vis: 48,
            d_proj: 32,
            n_heads: 4,
            m_t: 4,
            m_v: 4,
            n_classes: 4,
            vocab_size: 8,
            image_channels: 3,
            image_side: 16,
            patch_side: 4,
            mlp_ratio: 4,
            ln_eps: 1e-5,
            tau: 0.07,
        }
    }

    /// Full-scale profile matching the published model sizes; used for
    /// communication accounting, far too slow to train on a desk machine.
    pub fn paper(n_classes: usize) -> Self {
        ModelConfig {
            depth: 12,
            d_text: 512,
            d_vis: 768,
            d_proj: 512,
            n_heads: 8,
            m_t: 8,
            m_v: 8,
            n_classes,
            vocab_size: n_classes + 4,
            image_channels: 3,
            image_side: 224,
            patch_side: 16,
            mlp_ratio: 4,
            ln_eps: 1e-5,
            tau: 0.07,
        }
    }

    /// Minimal two-block configuration for gradient suites.
    pub fn toy() -> Self {
        ModelConfig {
            depth: 2,
            d_text: 8,
            d_vis: 12,
            d_proj: 8,
            n_heads: 2,
            m_t: 2,
            m_v: 2,
            n_classes: 3,
            vocab_size: 7,
            image_channels: 1,
            image_side: 4,
            patch_side: 2,
            mlp_ratio: 2,
            ln_eps: 1e-5,
            tau: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config(String::from("depth must be at least 1")));
        }
        if self.m_t < 1 || self.m_v < 1 {
            return Err(Error::Config(String::from(
                "prompt lengths must be at least 1",
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(String::from("need at least 2 classes")));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if self.d_text % self.n_heads != 0 || self.d_vis % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "widths {}/{} not divisible by {} heads",
                self.d_text, self.d_vis, self.n_heads
            )));
        }
        if self.vocab_size <= self.n_classes {
            return Err(Error::Config(String::from(
                "vocabulary must hold every class token plus a template token",
            )));
        }
        if self.mlp_ratio < 1 {
            return Err(Error::Config(String::from("mlp_ratio must be at least 1")));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch_side * self.patch_side
    }

    pub fn image_numel(&self) -> usize {
        self.image_channels * self.image_side * self.image_side
    }

    /// Token id of the shared description template.
    pub fn template_token(&self) -> usize {
        self.n_classes
    }

    /// Longest content token sequence the text encoder accepts.
    pub fn max_text_tokens(&self) -> usize {
        3
    }
}

/// Token sequences standing in for per-category descriptions: a shared
/// template token followed by the category's own token.
pub fn class_token_sequences(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    (0..cfg.n_classes)
        .map(|c| vec![cfg.template_token(), c])
        .collect()
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl BlockParams {
    fn init(d: usize, hidden: usize, seed: u64, name: &str) -> Self {
        // Fan-in scaling keeps block output variance comparable to its input
        // at any width; a fixed sigma starves narrow configs of signal.
        let gauss = |sub: &str, shape: Vec<usize>| {
            let sigma = 1.0 / fmath::sqrt(shape[0] as f64);
            let mut rng = substream(seed, &format!("{name}.{sub}"), &[]);
            Tensor::randn(shape, sigma, &mut rng)
        };
        BlockParams {
            ln1_gain: Tensor::from_vec(vec![d], vec![1.0; d]).expect("shape"),
            ln1_bias: Tensor::zeros(vec![d]),
            wq: gauss("wq", vec![d, d]),
            bq: Tensor::zeros(vec![d]),
            wk: gauss("wk", vec![d, d]),
            bk: Tensor::zeros(vec![d]),
            wv: gauss("wv", vec![d, d]),
            bv: Tensor::zeros(vec![d]),
            wo: gauss("wo", vec![d, d]),
            bo: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::from_vec(vec![d], vec![1.0; d]).expect("shape"),
            ln2_bias: Tensor::zeros(vec![d]),
            mlp_w1: gauss("mlp_w1", vec![d, hidden]),
            mlp_b1: Tensor::zeros(vec![hidden]),
            mlp_w2: gauss("mlp_w2", vec![hidden, d]),
            mlp_b2: Tensor::zeros(vec![d]),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("mlp_w1", &mut self.mlp_w1),
            ("mlp_b1", &mut self.mlp_b1),
            ("mlp_w2", &mut self.mlp_w2),
            ("mlp_b2", &mut self.mlp_b2),
        ]
    }
}

/// Complete frozen dual-encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: ModelConfig,
    pub token_embed: Tensor,
    /// Positional rows for [cls] plus content token slots; prompts carry none.
    pub pos_text: Tensor,
    pub cls_text: Tensor,
    pub text_blocks: Vec<BlockParams>,
    pub ln_text_gain: Tensor,
    pub ln_text_bias: Tensor,
    pub proj_text: Tensor,
    pub patch_embed: Tensor,
    pub patch_bias: Tensor,
    pub pos_vis: Tensor,
    pub cls_vis: Tensor,
    pub vis_blocks: Vec<BlockParams>,
    pub ln_vis_gain: Tensor,
    pub ln_vis_bias: Tensor,
    pub proj_vis: Tensor,
}

impl BackboneParams {
    /// Seeded Gaussian initialization; every tensor frozen.
    ///
    /// Embedding tables use sigma 0.02; linear maps use fan-in scaling
    /// (sigma = 1/sqrt(rows)) so signal survives the depth at every width.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let gauss = |name: &str, shape: Vec<usize>| {
            let mut rng = substream(seed, name, &[]);
            Tensor::randn(shape, 0.02, &mut rng)
        };
        let fan_in = |name: &str, shape: Vec<usize>| {
            let sigma = 1.0 / fmath::sqrt(shape[0] as f64);
            let mut rng = substream(seed, name, &[]);
            Tensor::randn(shape, sigma, &mut rng)
        };
        let dt = config.d_text;
        let dv = config.d_vis;
        let text_blocks = (0..config.depth)
            .map(|l| {
                BlockParams::init(dt, dt * config.mlp_ratio, seed, &format!("text.block{l}"))
            })
            .collect();
        let vis_blocks = (0..config.depth)
            .map(|l| BlockParams::init(dv, dv * config.mlp_ratio, seed, &format!("vis.block{l}")))
            .collect();
        let mut b = BackboneParams {
            token_embed: gauss("text.token_embed", vec![config.vocab_size, dt]),
            pos_text: gauss("text.pos", vec![1 + config.max_text_tokens(), dt]),
            cls_text: gauss("text.cls", vec![1, dt]),
            text_blocks,
            ln_text_gain: Tensor::from_vec(vec![dt], vec![1.0; dt]).expect("shape"),
            ln_text_bias: Tensor::zeros(vec![dt]),
            proj_text: fan_in("text.proj", vec![dt, config.d_proj]),
            patch_embed: fan_in("vis.patch_embed", vec![config.patch_dim(), dv]),
            patch_bias: Tensor::zeros(vec![dv]),
            pos_vis: gauss("vis.pos", vec![1 + config.n_patches(), dv]),
            cls_vis: gauss("vis.cls", vec![1, dv]),
            vis_blocks,
            ln_vis_gain: Tensor::from_vec(vec![dv], vec![1.0; dv]).expect("shape"),
            ln_vis_bias: Tensor::zeros(vec![dv]),
            proj_vis: fan_in("vis.proj", vec![dv, config.d_proj]),
            config,
        };
        b.freeze();
        Ok(b)
    }

    /// Marks every backbone tensor frozen.
    pub fn freeze(&mut self) {
        self.for_each_tensor_mut(|_, t| {
            t.freeze();
        });
    }

    /// Marks every backbone tensor trainable; only the warmup phase does this.
    pub fn set_trainable(&mut self) {
        self.for_each_tensor_mut(|_, t| {
            t.set_requires_grad(true);
        });
    }

    pub fn for_each_tensor<F: FnMut(&str, &Tensor)>(&self, mut f: F) {
        f("text.token_embed", &self.token_embed);
        f("text.pos", &self.pos_text);
        f("text.cls", &self.cls_text);
        for (l, blk) in self.text_blocks.iter().enumerate() {
            for (name, t) in blk.tensors() {
                f(&format!("text.block{l}.{name}"), t);
            }
        }
        f("text.ln_f.gain", &self.ln_text_gain);
        f("text.ln_f.bias", &self.ln_text_bias);
        f("text.proj", &self.proj_text);
        f("vis.patch_embed", &self.patch_embed);
        f("vis.patch_bias", &self.patch_bias);
        f("vis.pos", &self.pos_vis);
        f("vis.cls", &self.cls_vis);
        for (l, blk) in self.vis_blocks.iter().enumerate() {
            for (name, t) in blk.tensors() {
                f(&format!("vis.block{l}.{name}"), t);
            }
        }
        f("vis.ln_f.gain", &self.ln_vis_gain);
        f("vis.ln_f.bias", &self.ln_vis_bias);
        f("vis.proj", &self.proj_vis);
    }

    pub fn for_each_tensor_mut<F: FnMut(&str, &mut Tensor)>(&mut self, mut f: F) {
        f("text.token_embed", &mut self.token_embed);
        f("text.pos", &mut self.pos_text);
        f("text.cls", &mut self.cls_text);
        for (l, blk) in self.text_blocks.iter_mut().enumerate() {
            for (name, t) in blk.tensors_mut() {
                f(&format!("text.block{l}.{name}"), t);
            }
        }
        f("text.ln_f.gain", &mut self.ln_text_gain);
        f("text.ln_f.bias", &mut self.ln_text_bias);
        f("text.proj", &mut self.proj_text);
        f("vis.patch_embed", &mut self.patch_embed);
        f("vis.patch_bias", &mut self.patch_bias);
        f("vis.pos", &mut self.pos_vis);
        f("vis.cls", &mut self.cls_vis);
        for (l, blk) in self.vis_blocks.iter_mut().enumerate() {
            for (name, t) in blk.tensors_mut() {
                f(&format!("vis.block{l}.{name}"), t);
            }
        }
        f("vis.ln_f.gain", &mut self.ln_vis_gain);
        f("vis.ln_f.bias", &mut self.ln_vis_bias);
        f("vis.proj", &mut self.proj_vis);
    }

    /// Named tensors in a stable order, for checkpoints and hashing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_tensor(|name, t| out.push((String::from(name), t.clone())));
        out
    }

    /// Content hash over every weight; unchanged across training rounds.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::fnv1a(b"backbone");
        self.for_each_tensor(|name, t| {
            h = crate::rng::fnv1a_extend(h, name.as_bytes());
            h = crate::rng::fnv1a_extend(h, &t.fingerprint().to_le_bytes());
        });
        h
    }
}

/// Per-block prompt matrices for both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// depth entries of shape [m_t, d_text].
    pub text: Vec<Tensor>,
    /// depth entries of shape [m_v, d_vis].
    pub visual: Vec<Tensor>,
}

impl PromptSet {
    /// Seeded Gaussian prompts (sigma 0.02), trainable.
    pub fn init(cfg: &ModelConfig, seed: u64, tag: &str) -> Self {
        let text = (0..cfg.depth)
            .map(|l| {
                let mut rng = substream(seed, &format!("{tag}.text{l}"), &[]);
                let mut t = Tensor::randn(vec![cfg.m_t, cfg.d_text], 0.02, &mut rng);
                t.set_requires_grad(true);
                t
            })
            .collect();
        let visual = (0..cfg.depth)
            .map(|l| {
                let mut rng = substream(seed, &format!("{tag}.vis{l}"), &[]);
                let mut t = Tensor::randn(vec![cfg.m_v, cfg.d_vis], 0.02, &mut rng);
                t.set_requires_grad(true);
                t
            })
            .collect();
        PromptSet { text, visual }
    }

    /// Zero-row prompts: the degenerate prompt-free mode.
    pub fn empty(cfg: &ModelConfig) -> Self {
        PromptSet {
            text: (0..cfg.depth)
                .map(|_| Tensor::zeros(vec![0, cfg.d_text]))
                .collect(),
            visual: (0..cfg.depth)
                .map(|_| Tensor::zeros(vec![0, cfg.d_vis]))
                .collect(),
        }
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in self.text.iter_mut().chain(self.visual.iter_mut()) {
            t.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&mut self) {
        for t in self.text.iter_mut().chain(self.visual.iter_mut()) {
            t.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.text
            .iter()
            .chain(self.visual.iter())
            .map(|t| t.numel())
            .sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, t) in self.text.iter().enumerate() {
            out.push((format!("prompt.text{l}"), t.clone()));
        }
        for (l, t) in self.visual.iter().enumerate() {
            out.push((format!("prompt.vis{l}"), t.clone()));
        }
        out
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::fnv1a(b"prompts");
        for (name, t) in self.named_tensors() {
            h = crate::rng::fnv1a_extend(h, name.as_bytes());
            h = crate::rng::fnv1a_extend(h, &t.fingerprint().to_le_bytes());
        }
        h
    }
}

struct BoundBlock {
    ln1_gain: Var,
    ln1_bias: Var,
    mha: MhaVars,
    ln2_gain: Var,
    ln2_bias: Var,
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
}

fn bind_block(tape: &mut Tape, p: &BlockParams) -> BoundBlock {
    BoundBlock {
        ln1_gain: tape.input(&p.ln1_gain),
        ln1_bias: tape.input(&p.ln1_bias),
        mha: MhaVars {
            wq: tape.input(&p.wq),
            bq: tape.input(&p.bq),
            wk: tape.input(&p.wk),
            bk: tape.input(&p.bk),
            wv: tape.input(&p.wv),
            bv: tape.input(&p.bv),
            wo: tape.input(&p.wo),
            bo: tape.input(&p.bo),
        },
        ln2_gain: tape.input(&p.ln2_gain),
        ln2_bias: tape.input(&p.ln2_bias),
        mlp_w1: tape.input(&p.mlp_w1),
        mlp_b1: tape.input(&p.mlp_b1),
        mlp_w2: tape.input(&p.mlp_w2),
        mlp_b2: tape.input(&p.mlp_b2),
    }
}

fn apply_block(
    tape: &mut Tape,
    b: &BoundBlock,
    x: Var,
    heads: usize,
    eps: f64,
    batch: usize,
) -> Result<Var> {
    let a = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, eps)?;
    let att = tape.multihead_attention_batched(a, &b.mha, heads, batch)?;
    let x1 = tape.add(x, att)?;
    let h = tape.layer_norm(x1, b.ln2_gain, b.ln2_bias, eps)?;
    let h = tape.matmul(h, b.mlp_w1)?;
    let h = tape.add_row(h, b.mlp_b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, b.mlp_w2)?;
    let h = tape.add_row(h, b.mlp_b2)?;
    tape.add(x1, h)
}

/// Backbone weights bound onto one tape, reusable across many forwards.
pub struct BoundBackbone {
    pub config: ModelConfig,
    token_embed: Var,
    pos_text: Var,
    cls_text: Var,
    text_blocks: Vec<BoundBlock>,
    ln_text_gain: Var,
    ln_text_bias: Var,
    proj_text: Var,
    patch_embed: Var,
    patch_bias: Var,
    pos_vis: Var,
    cls_vis: Var,
    vis_blocks: Vec<BoundBlock>,
    ln_vis_gain: Var,
    ln_vis_bias: Var,
    proj_vis: Var,
}

/// Trainable prompts bound onto one tape.
pub struct BoundPrompts {
    pub text: Vec<Var>,
    pub visual: Vec<Var>,
}

impl BoundPrompts {
    pub fn bind(tape: &mut Tape, p: &PromptSet) -> Self {
        BoundPrompts {
            text: p.text.iter().map(|t| tape.input(t)).collect(),
            visual: p.visual.iter().map(|t| tape.input(t)).collect(),
        }
    }

    /// Adds tape gradients back into the owning prompt tensors.
    pub fn write_grads_into(&self, tape: &Tape, target: &mut PromptSet) {
        for (v, t) in self.text.iter().zip(target.text.iter_mut()) {
            tape.write_grad_into(*v, t);
        }
        for (v, t) in self.visual.iter().zip(target.visual.iter_mut()) {
            tape.write_grad_into(*v, t);
        }
    }
}

fn check_prompt_stack(
    tape: &Tape,
    prompts: &[Var],
    depth: usize,
    expect_m: usize,
    width: usize,
    side: &'static str,
) -> Result<usize> {
    if prompts.len() != depth {
        return Err(Error::Config(format!(
            "{side} prompt stack has {} entries, encoder depth is {depth}",
            prompts.len()
        )));
    }
    let m = tape.shape_of(prompts[0])[0];
    if m != 0 && m != expect_m {
        return Err(Error::Config(format!(
            "{side} prompt length {m} does not match configured {expect_m}"
        )));
    }
    for &p in prompts {
        let s = tape.shape_of(p);
        if s != [m, width] {
            return Err(Error::Config(format!(
                "{side} prompt shape {s:?} differs from [{m}, {width}]"
            )));
        }
    }
    Ok(m)
}

impl BoundBackbone {
    pub fn bind(tape: &mut Tape, b: &BackboneParams) -> Self {
        BoundBackbone {
            config: b.config.clone(),
            token_embed: tape.input(&b.token_embed),
            pos_text: tape.input(&b.pos_text),
            cls_text: tape.input(&b.cls_text),
            text_blocks: b.text_blocks.iter().map(|p| bind_block(tape, p)).collect(),
            ln_text_gain: tape.input(&b.ln_text_gain),
            ln_text_bias: tape.input(&b.ln_text_bias),
            proj_text: tape.input(&b.proj_text),
            patch_embed: tape.input(&b.patch_embed),
            patch_bias: tape.input(&b.patch_bias),
            pos_vis: tape.input(&b.pos_vis),
            cls_vis: tape.input(&b.cls_vis),
            vis_blocks: b.vis_blocks.iter().map(|p| bind_block(tape, p)).collect(),
            ln_vis_gain: tape.input(&b.ln_vis_gain),
            ln_vis_bias: tape.input(&b.ln_vis_bias),
            proj_vis: tape.input(&b.proj_vis),
        }
    }

    fn run_blocks(
        &self,
        tape: &mut Tape,
        blocks: &[BoundBlock],
        prompts: &[Var],
        m: usize,
        cls0: Var,
        content0: Var,
        content_len: usize,
    ) -> Result<Var> {
        let mut parts = vec![cls0];
        if m > 0 {
            parts.push(prompts[0]);
        }
        parts.push(content0);
        let mut seq = tape.concat_rows(&parts)?;
        let heads = self.config.n_heads;
        let eps = self.config.ln_eps;
        for (l, blk) in blocks.iter().enumerate() {
            let y = apply_block(tape, blk, seq, heads, eps, 1)?;
            if l + 1 < blocks.len() {
                // Prompt-position outputs are dropped here; the next block
                // sees its own fresh prompt rows instead.
                let cls = tape.slice_rows(y, 0, 1)?;
                let content = tape.slice_rows(y, 1 + m, content_len)?;
                let mut parts = vec![cls];
                if m > 0 {
                    parts.push(prompts[l + 1]);
                }
                parts.push(content);
                seq = tape.concat_rows(&parts)?;
            } else {
                seq = y;
            }
        }
        tape.slice_rows(seq, 0, 1)
    }

    /// Runs `batch` sequences through the prompted blocks at once and returns
    /// the stacked class-token rows `[batch, width]`. Each row matches what
    /// [`BoundBackbone::run_blocks`] computes for the same content bit for
    /// bit; only gradient accumulation order across the batch differs.
    fn run_blocks_batch(
        &self,
        tape: &mut Tape,
        blocks: &[BoundBlock],
        prompts: &[Var],
        m: usize,
        cls0: Var,
        contents: Var,
        content_len: usize,
        batch: usize,
    ) -> Result<Var> {
        let t_rows = 1 + m + content_len;
        // Every sequence shares the class-token and prompt rows, so they are
        // stored once and fanned out by row gathers.
        let mut idx = Vec::with_capacity(batch * t_rows);
        for b in 0..batch {
            idx.push(0);
            for r in 0..m {
                idx.push(1 + r);
            }
            for r in 0..content_len {
                idx.push(1 + m + b * content_len + r);
            }
        }
        let source = if m > 0 {
            tape.concat_rows(&[cls0, prompts[0], contents])?
        } else {
            tape.concat_rows(&[cls0, contents])?
        };
        let mut seq = tape.gather_rows(source, &idx)?;
        let heads = self.config.n_heads;
        let eps = self.config.ln_eps;
        for (l, blk) in blocks.iter().enumerate() {
            let y = apply_block(tape, blk, seq, heads, eps, batch)?;
            if l + 1 < blocks.len() && m > 0 {
                // Prompt-position outputs are dropped here; the next block
                // sees its own fresh prompt rows instead.
                let source = tape.concat_rows(&[prompts[l + 1], y])?;
                let mut idx = Vec::with_capacity(batch * t_rows);
                for b in 0..batch {
                    idx.push(m + b * t_rows);
                    for r in 0..m {
                        idx.push(r);
                    }
                    for r in 0..content_len {
                        idx.push(m + b * t_rows + 1 + m + r);
                    }
                }
                seq = tape.gather_rows(source, &idx)?;
            } else {
                seq = y;
            }
        }
        let cls_idx: Vec<usize> = (0..batch).map(|b| b * t_rows).collect();
        tape.gather_rows(seq, &cls_idx)
    }

    /// Text feature for one category token sequence: unit-norm `[1, d_proj]`.
    pub fn text_feature(
        &self,
        tape: &mut Tape,
        prompts: &[Var],
        tokens: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        let m = check_prompt_stack(tape, prompts, cfg.depth, cfg.m_t, cfg.d_text, "text")?;
        if tokens.is_empty() || tokens.len() > cfg.max_text_tokens() {
            return Err(Error::Config(format!(
                "token sequence length {} outside 1..={}",
                tokens.len(),
                cfg.max_text_tokens()
            )));
        }
        let pos0 = tape.slice_rows(self.pos_text, 0, 1)?;
        let cls0 = tape.add(self.cls_text, pos0)?;
        let emb = tape.gather_rows(self.token_embed, tokens)?;
        let pos = tape.slice_rows(self.pos_text, 1, tokens.len())?;
        let content0 = tape.add(emb, pos)?;
        let cls_l = self.run_blocks(
            tape,
            &self.text_blocks,
            prompts,
            m,
            cls0,
            content0,
            tokens.len(),
        )?;
        let n = tape.layer_norm(cls_l, self.ln_text_gain, self.ln_text_bias, cfg.ln_eps)?;
        let p = tape.matmul(n, self.proj_text)?;
        tape.l2_normalize(p)
    }

    /// Visual feature for one image: unit-norm `[1, d_proj]`.
    pub fn vision_feature(
        &self,
        tape: &mut Tape,
        prompts: &[Var],
        image: &[f64],
    ) -> Result<Var> {
        let cfg = &self.config;
        let m = check_prompt_stack(tape, prompts, cfg.depth, cfg.m_v, cfg.d_vis, "visual")?;
        let patches = patch_grid(cfg, image)?;
        let np = cfg.n_patches();
        let pv = tape.constant(vec![np, cfg.patch_dim()], patches)?;
        let emb = tape.matmul(pv, self.patch_embed)?;
        let emb = tape.add_row(emb, self.patch_bias)?;
        let pos = tape.slice_rows(self.pos_vis, 1, np)?;
        let content0 = tape.add(emb, pos)?;
        let pos0 = tape.slice_rows(self.pos_vis, 0, 1)?;
        let cls0 = tape.add(self.cls_vis, pos0)?;
        let cls_l = self.run_blocks(tape, &self.vis_blocks, prompts, m, cls0, content0, np)?;
        let n = tape.layer_norm(cls_l, self.ln_vis_gain, self.ln_vis_bias, cfg.ln_eps)?;
        let p = tape.matmul(n, self.proj_vis)?;
        tape.l2_normalize(p)
    }

    /// Text features for several same-length token sequences in one pass:
    /// unit-norm rows `[n, d_proj]`, each bitwise equal to the corresponding
    /// [`BoundBackbone::text_feature`] output.
    pub fn text_features_batch(
        &self,
        tape: &mut Tape,
        prompts: &[Var],
        sequences: &[Vec<usize>],
    ) -> Result<Var> {
        let cfg = &self.config;
        let m = check_prompt_stack(tape, prompts, cfg.depth, cfg.m_t, cfg.d_text, "text")?;
        let Some(first) = sequences.first() else {
            return Err(Error::Config(String::from("text batch is empty")));
        };
        let len = first.len();
        if len == 0 || len > cfg.max_text_tokens() {
            return Err(Error::Config(format!(
                "token sequence length {len} outside 1..={}",
                cfg.max_text_tokens()
            )));
        }
        let mut tokens = Vec::with_capacity(sequences.len() * len);
        for seq in sequences {
            if seq.len() != len {
                return Err(Error::Config(format!(
                    "batched token sequences must share one length, got {} and {len}",
                    seq.len()
                )));
            }
            tokens.extend_from_slice(seq);
        }
        let pos0 = tape.slice_rows(self.pos_text, 0, 1)?;
        let cls0 = tape.add(self.cls_text, pos0)?;
        let emb = tape.gather_rows(self.token_embed, &tokens)?;
        let pos_idx: Vec<usize> = (0..sequences.len()).flat_map(|_| 1..=len).collect();
        let pos = tape.gather_rows(self.pos_text, &pos_idx)?;
        let content0 = tape.add(emb, pos)?;
        let cls_l = self.run_blocks_batch(
            tape,
            &self.text_blocks,
            prompts,
            m,
            cls0,
            content0,
            len,
            sequences.len(),
        )?;
        let n = tape.layer_norm(cls_l, self.ln_text_gain, self.ln_text_bias, cfg.ln_eps)?;
        let p = tape.matmul(n, self.proj_text)?;
        tape.l2_normalize_rows(p)
    }

    /// Visual features for several images in one pass: unit-norm rows
    /// `[n, d_proj]`, each bitwise equal to the corresponding
    /// [`BoundBackbone::vision_feature`] output.
    pub fn vision_features_batch(
        &self,
        tape: &mut Tape,
        prompts: &[Var],
        images: &[&[f64]],
    ) -> Result<Var> {
        let cfg = &self.config;
        let m = check_prompt_stack(tape, prompts, cfg.depth, cfg.m_v, cfg.d_vis, "visual")?;
        if images.is_empty() {
            return Err(Error::Config(String::from("image batch is empty")));
        }
        let np = cfg.n_patches();
        let mut patches = Vec::with_capacity(images.len() * np * cfg.patch_dim());
        for image in images {
            patches.extend_from_slice(&patch_grid(cfg, image)?);
        }
        let pv = tape.constant(vec![images.len() * np, cfg.patch_dim()], patches)?;
        let emb = tape.matmul(pv, self.patch_embed)?;
        let emb = tape.add_row(emb, self.patch_bias)?;
        let pos_idx: Vec<usize> = (0..images.len()).flat_map(|_| 1..=np).collect();
        let pos = tape.gather_rows(self.pos_vis, &pos_idx)?;
        let content0 = tape.add(emb, pos)?;
        let pos0 = tape.slice_rows(self.pos_vis, 0, 1)?;
        let cls0 = tape.add(self.cls_vis, pos0)?;
        let cls_l = self.run_blocks_batch(
            tape,
            &self.vis_blocks,
            prompts,
            m,
            cls0,
            content0,
            np,
            images.len(),
        )?;
        let n = tape.layer_norm(cls_l, self.ln_vis_gain, self.ln_vis_bias, cfg.ln_eps)?;
        let p = tape.matmul(n, self.proj_vis)?;
        tape.l2_normalize_rows(p)
    }

    /// Probability row `[1, C]` from per-class text features and one visual
    /// feature, all unit-norm.
    pub fn classify_on_tape(
        &self,
        tape: &mut Tape,
        text_reps: &[Var],
        f: Var,
    ) -> Result<Var> {
        classify_vars(tape, text_reps, f, self.config.tau)
    }

    /// Adds tape gradients back into the owning backbone tensors; only the
    /// warmup phase trains these.
    pub fn write_grads_into(&self, tape: &Tape, b: &mut BackboneParams) {
        tape.write_grad_into(self.token_embed, &mut b.token_embed);
        tape.write_grad_into(self.pos_text, &mut b.pos_text);
        tape.write_grad_into(self.cls_text, &mut b.cls_text);
        for (bound, blk) in self.text_blocks.iter().zip(b.text_blocks.iter_mut()) {
            write_block_grads(tape, bound, blk);
        }
        tape.write_grad_into(self.ln_text_gain, &mut b.ln_text_gain);
        tape.write_grad_into(self.ln_text_bias, &mut b.ln_text_bias);
        tape.write_grad_into(self.proj_text, &mut b.proj_text);
        tape.write_grad_into(self.patch_embed, &mut b.patch_embed);
        tape.write_grad_into(self.patch_bias, &mut b.patch_bias);
        tape.write_grad_into(self.pos_vis, &mut b.pos_vis);
        tape.write_grad_into(self.cls_vis, &mut b.cls_vis);
        for (bound, blk) in self.vis_blocks.iter().zip(b.vis_blocks.iter_mut()) {
            write_block_grads(tape, bound, blk);
        }
        tape.write_grad_into(self.ln_vis_gain, &mut b.ln_vis_gain);
        tape.write_grad_into(self.ln_vis_bias, &mut b.ln_vis_bias);
        tape.write_grad_into(self.proj_vis, &mut b.proj_vis);
    }
}

fn write_block_grads(tape: &Tape, bound: &BoundBlock, blk: &mut BlockParams) {
    tape.write_grad_into(bound.ln1_gain, &mut blk.ln1_gain);
    tape.write_grad_into(bound.ln1_bias, &mut blk.ln1_bias);
    tape.write_grad_into(bound.mha.wq, &mut blk.wq);
    tape.write_grad_into(bound.mha.bq, &mut blk.bq);
    tape.write_grad_into(bound.mha.wk, &mut blk.wk);
    tape.write_grad_into(bound.mha.bk, &mut blk.bk);
    tape.write_grad_into(bound.mha.wv, &mut blk.wv);
    tape.write_grad_into(bound.mha.bv, &mut blk.bv);
    tape.write_grad_into(bound.mha.wo, &mut blk.wo);
    tape.write_grad_into(bound.mha.bo, &mut blk.bo);
    tape.write_grad_into(bound.ln2_gain, &mut blk.ln2_gain);
    tape.write_grad_into(bound.ln2_bias, &mut blk.ln2_bias);
    tape.write_grad_into(bound.mlp_w1, &mut blk.mlp_w1);
    tape.write_grad_into(bound.mlp_b1, &mut blk.mlp_b1);
    tape.write_grad_into(bound.mlp_w2, &mut blk.mlp_w2);
    tape.write_grad_into(bound.mlp_b2, &mut blk.mlp_b2);
}

/// On-tape cosine/temperature classifier over prebuilt feature vars.
pub fn classify_vars(tape: &mut Tape, text_reps: &[Var], f: Var, tau: f64) -> Result<Var> {
    if text_reps.len() < 2 {
        return Err(Error::Config(format!(
            "classification needs at least 2 categories, got {}",
            text_reps.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let d = tape.value(f).len();
    let f_col = tape.reshape(f, vec![d, 1])?;
    let mut dots = Vec::with_capacity(text_reps.len());
    for &w in text_reps {
        let w_row = tape.reshape(w, vec![1, d])?;
        dots.push(tape.matmul(w_row, f_col)?);
    }
    let col = tape.concat_rows(&dots)?;
    let logits = tape.reshape(col, vec![1, text_reps.len()])?;
    let scaled = tape.scale(logits, 1.0 / tau);
    tape.softmax_rows(scaled)
}

/// Batched cosine/temperature classifier: probability rows `[n, C]` from
/// feature rows `feats[n, d]` against category rows `text_reps[C, d]`.
pub fn classify_rows(tape: &mut Tape, text_reps: Var, feats: Var, tau: f64) -> Result<Var> {
    let classes = tape.shape_of(text_reps)[0];
    if classes < 2 {
        return Err(Error::Config(format!(
            "classification needs at least 2 categories, got {classes}"
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let logits = tape.matmul_nt(feats, text_reps)?;
    let scaled = tape.scale(logits, 1.0 / tau);
    tape.softmax_rows(scaled)
}

/// Extracts non-overlapping patches in grid row-major order; within each
/// patch the layout is channel-major.
pub fn patch_grid(cfg: &ModelConfig, image: &[f64]) -> Result<Vec<f64>> {
    if image.len() != cfg.image_numel() {
        return Err(Error::Config(format!(
            "image has {} values, configured geometry needs {}",
            image.len(),
            cfg.image_numel()
        )));
    }
    let side = cfg.image_side;
    let ps = cfg.patch_side;
    let g = cfg.grid_side();
    let mut out = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for py in 0..g {
        for px in 0..g {
            for ch in 0..cfg.image_channels {
                let base = ch * side * side;
                for y in 0..ps {
                    let row = base + (py * ps + y) * side + px * ps;
                    out.extend_from_slice(&image[row..row + ps]);
                }
            }
        }
    }
    Ok(out)
}

/// One-shot text feature as an owned `[d_proj]` tensor.
pub fn text_forward(
    backbone: &BackboneParams,
    text_prompts: &[Tensor],
    tokens: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundBackbone::bind(&mut tape, backbone);
    let pv: Vec<Var> = text_prompts.iter().map(|t| tape.input(t)).collect();
    let w = bound.text_feature(&mut tape, &pv, tokens)?;
    Tensor::from_vec(vec![backbone.config.d_proj], tape.value(w).to_vec())
}

/// One-shot visual feature as an owned `[d_proj]` tensor.
pub fn vision_forward(
    backbone: &BackboneParams,
    vis_prompts: &[Tensor],
    image: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundBackbone::bind(&mut tape, backbone);
    let pv: Vec<Var> = vis_prompts.iter().map(|t| tape.input(t)).collect();
    let f = bound.vision_feature(&mut tape, &pv, image.data())?;
    Tensor::from_vec(vec![backbone.config.d_proj], tape.value(f).to_vec())
}

/// Softmax over cosine similarities at temperature `tau`.
pub fn classify(text_reps: &[Tensor], f: &Tensor, tau: f64) -> Result<Vec<f64>> {
    if text_reps.len() < 2 {
        return Err(Error::Config(format!(
            "classification needs at least 2 categories, got {}",
            text_reps.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let d = f.numel();
    let mut logits = Vec::with_capacity(text_reps.len());
    for w in text_reps {
        if w.numel() != d {
            return Err(Error::Shape {
                op: "classify",
                lhs: w.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        let dot: f64 = w.data().iter().zip(f.data()).map(|(a, b)| a * b).sum();
        logits.push(dot / tau);
    }
    softmax_row(&mut logits);
    Ok(logits)
}

/// Prompt-free classification: the reference the first round trains against.
pub fn zero_shot_distribution(
    backbone: &BackboneParams,
    image: &Tensor,
    class_sequences: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let empty = PromptSet::empty(&backbone.config);
    let mut tape = Tape::new();
    let bound = BoundBackbone::bind(&mut tape, backbone);
    let prompts = BoundPrompts::bind(&mut tape, &empty);
    let mut reps = Vec::with_capacity(class_sequences.len());
    for seq in class_sequences {
        reps.push(bound.text_feature(&mut tape, &prompts.text, seq)?);
    }
    let f = bound.vision_feature(&mut tape, &prompts.visual, image.data())?;
    let p = classify_vars(&mut tape, &reps, f, backbone.config.tau)?;
    Ok(tape.value(p).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::toy().validate().is_ok());
        assert!(ModelConfig::paper(7).validate().is_ok());
        let mut c = ModelConfig::desk();
        c.n_classes = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.patch_side = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forwards_are_deterministic() {
        let cfg = ModelConfig::toy();
        let b = BackboneParams::init(cfg.clone(), 7).unwrap();
        let prompts = PromptSet::init(&cfg, 8, "p");
        let seqs = class_token_sequences(&cfg);
        let w1 = text_forward(&b, &prompts.text, &seqs[0]).unwrap();
        let w2 = text_forward(&b, &prompts.text, &seqs[0]).unwrap();
        assert_eq!(w1.data(), w2.data());
        let img = Tensor::from_vec(
            vec![cfg.image_channels, cfg.image_side, cfg.image_side],
            (0..cfg.image_numel()).map(|i| (i as f64 * 0.1).sin()).collect(),
        )
        .unwrap();
        let f1 = vision_forward(&b, &prompts.visual, &img).unwrap();
        let f2 = vision_forward(&b, &prompts.visual, &img).unwrap();
        assert_eq!(f1.data(), f2.data());
        let norm: f64 = f1.data().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_orthogonal_is_uniform() {
        let w1 = Tensor::from_vec(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let w2 = Tensor::from_vec(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        let f = Tensor::from_vec(vec![3], vec![0.0, 0.0, 1.0]).unwrap();
        let p = classify(&[w1, w2], &f, 0.07).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn classify_small_tau_concentrates() {
        let w1 = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let w2 = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        let f = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let p = classify(&[w1, w2], &f, 0.001).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
    }

    #[test]
    fn classify_matches_direct_formula() {
        let mut rng = substream(3, "cls", &[]);
        let mut reps = Vec::new();
        for _ in 0..3 {
            let mut t = Tensor::randn(vec![5], 1.0, &mut rng);
            let n: f64 = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            t.data_mut().iter_mut().for_each(|v| *v /= n);
            reps.push(t);
        }
        let mut f = Tensor::randn(vec![5], 1.0, &mut rng);
        let n: f64 = f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        f.data_mut().iter_mut().for_each(|v| *v /= n);
        let tau = 0.07;
        let p = classify(&reps, &f, tau).unwrap();

        let mut expect: Vec<f64> = reps
            .iter()
            .map(|w| {
                let dot: f64 = w.data().iter().zip(f.data()).map(|(a, b)| a * b).sum();
                (dot / tau).exp()
            })
            .collect();
        let z: f64 = expect.iter().sum();
        expect.iter_mut().for_each(|v| *v /= z);
        for (a, e) in p.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_rejects_single_class() {
        let w = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let f = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(classify(&[w], &f, 0.07).is_err());
    }

    #[test]
    fn zero_shot_is_definitional() {
        let cfg = ModelConfig::toy();
        let b = BackboneParams::init(cfg.clone(), 11).unwrap();
        let seqs = class_token_sequences(&cfg);
        let img = Tensor::from_vec(
            vec![cfg.image_channels, cfg.image_side, cfg.image_side],
            (0..cfg.image_numel()).map(|i| (i as f64 * 0.3).cos()).collect(),
        )
        .unwrap();
        let zs = zero_shot_distribution(&b, &img, &seqs).unwrap();

        let empty = PromptSet::empty(&cfg);
        let reps: Vec<Tensor> = seqs
            .iter()
            .map(|s| text_forward(&b, &empty.text, s).unwrap())
            .collect();
        let f = vision_forward(&b, &empty.visual, &img).unwrap();
        let direct = classify(&reps, &f, cfg.tau).unwrap();
        for (a, e) in zs.iter().zip(&direct) {
            assert_eq!(a, e, "zero-shot must equal classify over prompt-free features");
        }
        assert!((zs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_image_with_zero_pos_gives_identical_patch_rows() {
        let cfg = ModelConfig::toy();
        let mut b = BackboneParams::init(cfg.clone(), 13).unwrap();
        for v in b.pos_vis.data_mut().iter_mut() {
            *v = 0.0;
        }
        let img = vec![0.0; cfg.image_numel()];
        let patches = patch_grid(&cfg, &img).unwrap();
        let mut tape = Tape::new();
        let p = tape
            .constant(vec![cfg.n_patches(), cfg.patch_dim()], patches)
            .unwrap();
        let pe = tape.input(&b.patch_embed);
        let pb = tape.input(&b.patch_bias);
        let emb = tape.matmul(p, pe).unwrap();
        let emb = tape.add_row(emb, pb).unwrap();
        let rows = tape.value(emb);
        let d = cfg.d_vis;
        for r in 1..cfg.n_patches() {
            for j in 0..d {
                assert_eq!(rows[j], rows[r * d + j]);
            }
        }
    }

    #[test]
    fn prompt_shape_mismatch_is_config_error() {
        let cfg = ModelConfig::toy();
        let b = BackboneParams::init(cfg.clone(), 17).unwrap();
        let seqs = class_token_sequences(&cfg);
        let bad = vec![Tensor::zeros(vec![cfg.m_t, cfg.d_text]); cfg.depth - 1];
        assert!(matches!(
            text_forward(&b, &bad, &seqs[0]),
            Err(Error::Config(_))
        ));
        let wrong_m = vec![Tensor::zeros(vec![cfg.m_t + 1, cfg.d_text]); cfg.depth];
        assert!(matches!(
            text_forward(&b, &wrong_m, &seqs[0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backbone_fingerprint_is_stable_and_weight_sensitive() {
        let cfg = ModelConfig::toy();
        let a = BackboneParams::init(cfg.clone(), 21).unwrap();
        let b = BackboneParams::init(cfg.clone(), 21).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = BackboneParams::init(cfg, 22).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn image_geometry_mismatch_is_config_error() {
        let cfg = ModelConfig::toy();
        let b = BackboneParams::init(cfg.clone(), 23).unwrap();
        let prompts = PromptSet::init(&cfg, 1, "p");
        let img = Tensor::zeros(vec![cfg.image_numel() + 1]);
        assert!(matches!(
            vision_forward(&b, &prompts.visual, &img),
            Err(Error::Config(_))
        ));
    }
}
