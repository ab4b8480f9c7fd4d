//! Independent step-by-step oracle for the prompted dual-encoder forward.
//!
//! The oracle below re-implements embedding, pre-norm blocks, per-block
//! prompt splicing and the projection head with plain row-vector loops,
//! sharing no code with the tape engine. The encoder must match it within
//! 1e-12, the prompt-discard semantics must hold exactly, and the zero-row
//! prompt mode must be bit-for-bit identical to a spliceless forward.

use plan_core::encoder::{
    class_token_sequences, classify_rows, text_forward, vision_forward, BackboneParams,
    BlockParams, BoundBackbone, BoundPrompts, ModelConfig, PromptSet,
};
use plan_core::rng::substream;
use plan_core::tensor::{Tape, Tensor};

type Row = Vec<f64>;

fn vecmat(row: &[f64], w: &Tensor) -> Row {
    let (d, e) = (w.shape()[0], w.shape()[1]);
    assert_eq!(row.len(), d);
    let mut out = vec![0.0; e];
    for j in 0..e {
        let mut acc = 0.0;
        for i in 0..d {
            acc += row[i] * w.data()[i * e + j];
        }
        out[j] = acc;
    }
    out
}

fn add_bias(mut row: Row, b: &Tensor) -> Row {
    for (v, &bv) in row.iter_mut().zip(b.data()) {
        *v += bv;
    }
    row
}

fn layer_norm_row(row: &[f64], g: &Tensor, b: &Tensor, eps: f64) -> Row {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * g.data()[j] + b.data()[j])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / core::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

fn oracle_block(rows: &[Row], blk: &BlockParams, heads: usize, eps: f64) -> Vec<Row> {
    let s = rows.len();
    let d = rows[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let normed: Vec<Row> = rows
        .iter()
        .map(|r| layer_norm_row(r, &blk.ln1_gain, &blk.ln1_bias, eps))
        .collect();
    let q: Vec<Row> = normed.iter().map(|r| add_bias(vecmat(r, &blk.wq), &blk.bq)).collect();
    let k: Vec<Row> = normed.iter().map(|r| add_bias(vecmat(r, &blk.wk), &blk.bk)).collect();
    let v: Vec<Row> = normed.iter().map(|r| add_bias(vecmat(r, &blk.wv), &blk.bv)).collect();

    let mut concat: Vec<Row> = vec![vec![0.0; d]; s];
    for h in 0..heads {
        let lo = h * dh;
        let hi = lo + dh;
        for i in 0..s {
            let mut scores: Vec<f64> = (0..s)
                .map(|j| {
                    q[i][lo..hi]
                        .iter()
                        .zip(&k[j][lo..hi])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            softmax(&mut scores);
            for j in 0..s {
                for t in lo..hi {
                    concat[i][t] += scores[j] * v[j][t];
                }
            }
        }
    }

    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let attended = add_bias(vecmat(&concat[i], &blk.wo), &blk.bo);
        let x1: Row = rows[i].iter().zip(&attended).map(|(a, b)| a + b).collect();
        let n = layer_norm_row(&x1, &blk.ln2_gain, &blk.ln2_bias, eps);
        let h1: Row = add_bias(vecmat(&n, &blk.mlp_w1), &blk.mlp_b1)
            .into_iter()
            .map(gelu)
            .collect();
        let h2 = add_bias(vecmat(&h1, &blk.mlp_w2), &blk.mlp_b2);
        out.push(x1.iter().zip(&h2).map(|(a, b)| a + b).collect());
    }
    out
}

fn prompt_rows(p: &Tensor) -> Vec<Row> {
    let (m, d) = (p.shape()[0], p.shape()[1]);
    (0..m).map(|i| p.data()[i * d..(i + 1) * d].to_vec()).collect()
}

/// Splice-by-hand forward; `perturb` adds noise to the prompt-position
/// outputs of one block before they are thrown away.
fn oracle_heads(
    backbone: &BackboneParams,
    blocks: &[BlockParams],
    prompts: &[Tensor],
    cls0: Row,
    content0: Vec<Row>,
    perturb: Option<(usize, f64)>,
    ln: (&Tensor, &Tensor),
    proj: &Tensor,
) -> Row {
    let cfg = &backbone.config;
    let m = prompts[0].shape()[0];
    let mut rows: Vec<Row> = Vec::new();
    rows.push(cls0);
    rows.extend(prompt_rows(&prompts[0]));
    rows.extend(content0);

    let depth = blocks.len();
    for (l, blk) in blocks.iter().enumerate() {
        let mut y = oracle_block(&rows, blk, cfg.n_heads, cfg.ln_eps);
        if let Some((pl, delta)) = perturb {
            if pl == l {
                for r in y.iter_mut().skip(1).take(m) {
                    for v in r.iter_mut() {
                        *v += delta;
                    }
                }
            }
        }
        if l + 1 < depth {
            let mut next: Vec<Row> = Vec::new();
            next.push(y[0].clone());
            next.extend(prompt_rows(&prompts[l + 1]));
            next.extend(y[1 + m..].iter().cloned());
            rows = next;
        } else {
            rows = y;
        }
    }

    let cls = layer_norm_row(&rows[0], ln.0, ln.1, cfg.ln_eps);
    let mut feat = vecmat(&cls, proj);
    let norm: f64 = feat.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in feat.iter_mut() {
        *v /= norm;
    }
    feat
}

fn oracle_text(
    b: &BackboneParams,
    prompts: &[Tensor],
    tokens: &[usize],
    perturb: Option<(usize, f64)>,
) -> Row {
    let cfg = &b.config;
    let d = cfg.d_text;
    let cls0: Row = (0..d)
        .map(|j| b.cls_text.data()[j] + b.pos_text.data()[j])
        .collect();
    let content: Vec<Row> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            (0..d)
                .map(|j| b.token_embed.data()[t * d + j] + b.pos_text.data()[(1 + i) * d + j])
                .collect()
        })
        .collect();
    oracle_heads(
        b,
        &b.text_blocks,
        prompts,
        cls0,
        content,
        perturb,
        (&b.ln_text_gain, &b.ln_text_bias),
        &b.proj_text,
    )
}

fn oracle_vision(
    b: &BackboneParams,
    prompts: &[Tensor],
    image: &[f64],
    perturb: Option<(usize, f64)>,
) -> Row {
    let cfg = &b.config;
    let d = cfg.d_vis;
    let ps = cfg.patch_side;
    let g = cfg.grid_side();
    let mut content: Vec<Row> = Vec::new();
    for p in 0..cfg.n_patches() {
        let (py, px) = (p / g, p % g);
        let mut flat = Vec::with_capacity(cfg.patch_dim());
        for ch in 0..cfg.image_channels {
            for y in 0..ps {
                for x in 0..ps {
                    let iy = py * ps + y;
                    let ix = px * ps + x;
                    flat.push(image[ch * cfg.image_side * cfg.image_side + iy * cfg.image_side + ix]);
                }
            }
        }
        let mut row = vec![0.0; d];
        for j in 0..d {
            let mut acc = 0.0;
            for (i, &pv) in flat.iter().enumerate() {
                acc += pv * b.patch_embed.data()[i * d + j];
            }
            row[j] = acc + b.patch_bias.data()[j] + b.pos_vis.data()[(1 + p) * d + j];
        }
        content.push(row);
    }
    let cls0: Row = (0..d)
        .map(|j| b.cls_vis.data()[j] + b.pos_vis.data()[j])
        .collect();
    oracle_heads(
        b,
        &b.vis_blocks,
        prompts,
        cls0,
        content,
        perturb,
        (&b.ln_vis_gain, &b.ln_vis_bias),
        &b.proj_vis,
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn test_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = substream(seed, "oracle-image", &[]);
    Tensor::randn(
        vec![cfg.image_channels, cfg.image_side, cfg.image_side],
        1.0,
        &mut rng,
    )
}

#[test]
fn text_forward_matches_manual_splice_oracle() {
    for (cfg, seed) in [(ModelConfig::toy(), 31u64), (ModelConfig::desk(), 32u64)] {
        let b = BackboneParams::init(cfg.clone(), seed).unwrap();
        let prompts = PromptSet::init(&cfg, seed + 1, "p");
        for seq in class_token_sequences(&cfg) {
            let got = text_forward(&b, &prompts.text, &seq).unwrap();
            let want = oracle_text(&b, &prompts.text, &seq, None);
            let d = max_abs_diff(got.data(), &want);
            assert!(d < 1e-12, "text mismatch {d} at depth {}", cfg.depth);
        }
    }
}

#[test]
fn vision_forward_matches_manual_splice_oracle() {
    for (cfg, seed) in [(ModelConfig::toy(), 41u64), (ModelConfig::desk(), 42u64)] {
        let b = BackboneParams::init(cfg.clone(), seed).unwrap();
        let prompts = PromptSet::init(&cfg, seed + 1, "p");
        let img = test_image(&cfg, seed + 2);
        let got = vision_forward(&b, &prompts.visual, &img).unwrap();
        let want = oracle_vision(&b, &prompts.visual, img.data(), None);
        let d = max_abs_diff(got.data(), &want);
        assert!(d < 1e-12, "vision mismatch {d} at depth {}", cfg.depth);
    }
}

#[test]
fn prompt_position_outputs_are_discarded() {
    let cfg = ModelConfig::toy();
    let b = BackboneParams::init(cfg.clone(), 51).unwrap();
    let prompts = PromptSet::init(&cfg, 52, "p");
    let seq = &class_token_sequences(&cfg)[1];
    let clean = oracle_text(&b, &prompts.text, seq, None);
    // Blocks before the last: perturbing prompt-position outputs is invisible.
    let noisy = oracle_text(&b, &prompts.text, seq, Some((0, 123.456)));
    assert_eq!(clean, noisy, "discarded rows must not influence the feature");

    let img = test_image(&cfg, 53);
    let clean_v = oracle_vision(&b, &prompts.visual, img.data(), None);
    let noisy_v = oracle_vision(&b, &prompts.visual, img.data(), Some((0, -9.9)));
    assert_eq!(clean_v, noisy_v);
}

#[test]
fn empty_prompt_mode_is_bitwise_plain_forward() {
    let cfg = ModelConfig::desk();
    let b = BackboneParams::init(cfg.clone(), 61).unwrap();
    let empty = PromptSet::empty(&cfg);
    let seq = &class_token_sequences(&cfg)[0];

    // Plain forward assembled without any prompt or splice machinery: bind
    // the same weights and run ([cls], content) straight through.
    let mut tape = Tape::new();
    let bound = BoundBackbone::bind(&mut tape, &b);
    let bp = BoundPrompts::bind(&mut tape, &empty);
    let w = bound.text_feature(&mut tape, &bp.text, seq).unwrap();
    let via_empty = tape.value(w).to_vec();

    let plain = plain_text_forward(&b, seq);
    assert_eq!(via_empty, plain, "zero-row prompts must be the plain forward, bitwise");

    let img = test_image(&cfg, 62);
    let mut tape = Tape::new();
    let bound = BoundBackbone::bind(&mut tape, &b);
    let bp = BoundPrompts::bind(&mut tape, &empty);
    let f = bound.vision_feature(&mut tape, &bp.visual, img.data()).unwrap();
    let via_empty_v = tape.value(f).to_vec();
    let plain_v = plain_vision_forward(&b, img.data());
    assert_eq!(via_empty_v, plain_v);
}

// Spliceless forward with the same tape primitives in the same order the
// encoder uses, minus all prompt handling.
fn plain_text_forward(b: &BackboneParams, tokens: &[usize]) -> Vec<f64> {
    let cfg = &b.config;
    let mut tape = Tape::new();
    let te = tape.input(&b.token_embed);
    let pos = tape.input(&b.pos_text);
    let cls = tape.input(&b.cls_text);
    let pos0 = tape.slice_rows(pos, 0, 1).unwrap();
    let cls0 = tape.add(cls, pos0).unwrap();
    let emb = tape.gather_rows(te, tokens).unwrap();
    let posn = tape.slice_rows(pos, 1, tokens.len()).unwrap();
    let content = tape.add(emb, posn).unwrap();
    let mut seq = tape.concat_rows(&[cls0, content]).unwrap();
    for blk in &b.text_blocks {
        seq = apply_block_plain(&mut tape, blk, seq, cfg.n_heads, cfg.ln_eps);
    }
    let cls_l = tape.slice_rows(seq, 0, 1).unwrap();
    let g = tape.input(&b.ln_text_gain);
    let bb = tape.input(&b.ln_text_bias);
    let n = tape.layer_norm(cls_l, g, bb, cfg.ln_eps).unwrap();
    let pj = tape.input(&b.proj_text);
    let p = tape.matmul(n, pj).unwrap();
    let f = tape.l2_normalize(p).unwrap();
    tape.value(f).to_vec()
}

fn plain_vision_forward(b: &BackboneParams, image: &[f64]) -> Vec<f64> {
    let cfg = &b.config;
    let mut tape = Tape::new();
    let patches = plan_core::encoder::patch_grid(cfg, image).unwrap();
    let pv = tape
        .constant(vec![cfg.n_patches(), cfg.patch_dim()], patches)
        .unwrap();
    let pe = tape.input(&b.patch_embed);
    let pb = tape.input(&b.patch_bias);
    let emb = tape.matmul(pv, pe).unwrap();
    let emb = tape.add_row(emb, pb).unwrap();
    let pos = tape.input(&b.pos_vis);
    let posn = tape.slice_rows(pos, 1, cfg.n_patches()).unwrap();
    let content = tape.add(emb, posn).unwrap();
    let cls = tape.input(&b.cls_vis);
    let pos0 = tape.slice_rows(pos, 0, 1).unwrap();
    let cls0 = tape.add(cls, pos0).unwrap();
    let mut seq = tape.concat_rows(&[cls0, content]).unwrap();
    for blk in &b.vis_blocks {
        seq = apply_block_plain(&mut tape, blk, seq, cfg.n_heads, cfg.ln_eps);
    }
    let cls_l = tape.slice_rows(seq, 0, 1).unwrap();
    let g = tape.input(&b.ln_vis_gain);
    let bb = tape.input(&b.ln_vis_bias);
    let n = tape.layer_norm(cls_l, g, bb, cfg.ln_eps).unwrap();
    let pj = tape.input(&b.proj_vis);
    let p = tape.matmul(n, pj).unwrap();
    let f = tape.l2_normalize(p).unwrap();
    tape.value(f).to_vec()
}

fn apply_block_plain(
    tape: &mut Tape,
    blk: &BlockParams,
    x: plan_core::tensor::Var,
    heads: usize,
    eps: f64,
) -> plan_core::tensor::Var {
    use plan_core::tensor::MhaVars;
    let ln1g = tape.input(&blk.ln1_gain);
    let ln1b = tape.input(&blk.ln1_bias);
    let a = tape.layer_norm(x, ln1g, ln1b, eps).unwrap();
    let w = MhaVars {
        wq: tape.input(&blk.wq),
        bq: tape.input(&blk.bq),
        wk: tape.input(&blk.wk),
        bk: tape.input(&blk.bk),
        wv: tape.input(&blk.wv),
        bv: tape.input(&blk.bv),
        wo: tape.input(&blk.wo),
        bo: tape.input(&blk.bo),
    };
    let att = tape.multihead_attention(a, &w, heads).unwrap();
    let x1 = tape.add(x, att).unwrap();
    let ln2g = tape.input(&blk.ln2_gain);
    let ln2b = tape.input(&blk.ln2_bias);
    let h = tape.layer_norm(x1, ln2g, ln2b, eps).unwrap();
    let w1 = tape.input(&blk.mlp_w1);
    let b1 = tape.input(&blk.mlp_b1);
    let h = tape.matmul(h, w1).unwrap();
    let h = tape.add_row(h, b1).unwrap();
    let h = tape.gelu(h);
    let w2 = tape.input(&blk.mlp_w2);
    let b2 = tape.input(&blk.mlp_b2);
    let h = tape.matmul(h, w2).unwrap();
    let h = tape.add_row(h, b2).unwrap();
    tape.add(x1, h).unwrap()
}

/// The stacked batch path must reproduce the one-at-a-time features and
/// probability rows bit for bit; only gradient accumulation order may differ.
#[test]
fn batched_features_match_per_sample_forward() {
    let cfg = ModelConfig::desk();
    let b = BackboneParams::init(cfg.clone(), 71).unwrap();
    let prompts = PromptSet::init(&cfg, 72, "batch-eq");
    let seqs = class_token_sequences(&cfg);
    let images: Vec<Tensor> = (0..5).map(|i| test_image(&cfg, 80 + i)).collect();

    let mut tape = Tape::new();
    let bound = BoundBackbone::bind(&mut tape, &b);
    let bp = BoundPrompts::bind(&mut tape, &prompts);

    let treps = bound.text_features_batch(&mut tape, &bp.text, &seqs).unwrap();
    let views: Vec<&[f64]> = images.iter().map(|t| t.data()).collect();
    let feats = bound.vision_features_batch(&mut tape, &bp.visual, &views).unwrap();
    let probs = classify_rows(&mut tape, treps, feats, cfg.tau).unwrap();

    let treps_vals = tape.value(treps).to_vec();
    let feats_vals = tape.value(feats).to_vec();
    let probs_vals = tape.value(probs).to_vec();
    let d = cfg.d_proj;
    let c = seqs.len();

    let mut rep_vars = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        let w = bound.text_feature(&mut tape, &bp.text, seq).unwrap();
        assert_eq!(tape.value(w), &treps_vals[i * d..(i + 1) * d], "text row {i}");
        rep_vars.push(w);
    }
    for (i, img) in images.iter().enumerate() {
        let f = bound.vision_feature(&mut tape, &bp.visual, img.data()).unwrap();
        assert_eq!(tape.value(f), &feats_vals[i * d..(i + 1) * d], "visual row {i}");
        let p = bound.classify_on_tape(&mut tape, &rep_vars, f).unwrap();
        assert_eq!(tape.value(p), &probs_vals[i * c..(i + 1) * c], "probability row {i}");
    }
}
