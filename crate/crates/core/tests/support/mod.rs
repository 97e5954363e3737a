//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stbd_core::data::{is_special, prepare, CmvnStats, Prepared, Utterance, EOS, L2R, R2L, SPECIAL_COUNT};
use stbd_core::decode::{length_penalty, DecodeConfig, StepScorer};
use stbd_core::layers::{
    feed_forward, multi_head, scaled_dot_attention, AttentionConfig, FeedForwardLayer, LayerNorm, Linear, Mask,
    MultiHeadLayer,
};
use stbd_core::model::{Direction, Model, ModelConfig, NextToken, StreamInput};
use stbd_core::tensor::{grad_check, grad_check_params, log_softmax, Graph, ParamStore, Tensor, Var};
use stbd_core::train::{joint_loss, LossConfig};
use stbd_core::Result;

pub const STEP: f64 = 1e-5;

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random values bounded away from zero, so ReLU kinks stay out of reach of
/// the finite-difference step.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random matrix shape with 2 to 8 elements.
fn small_shape(rng: &mut ChaCha8Rng, min_cols: usize) -> [usize; 2] {
    loop {
        let r = rng.random_range(1..=4);
        let c = rng.random_range(min_cols.max(1)..=4);
        if (2..=8).contains(&(r * c)) {
            return [r, c];
        }
    }
}

/// Contracts any output with fixed random weights into a scalar, so no
/// gradient component vanishes by symmetry.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = g.constant(shape, uniform(&mut rng, n, -1.0, 1.0))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Worst relative error of every differentiable operation for one seed.
pub fn op_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let s = seed;

    let [r, c] = small_shape(&mut rng, 1);
    let k = rng.random_range(1..=3);
    let x = tensor(&[r, c], uniform(&mut rng, r * c, -1.0, 1.0));
    let w = uniform(&mut rng, c * k, -1.0, 1.0);
    let wt = uniform(&mut rng, k * r, -1.0, 1.0);
    out.push((
        "matmul",
        grad_check(
            |g, x| {
                let w = g.constant([c, k], w.clone())?;
                let y = g.matmul(x, w)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    out.push((
        "matmul (right operand)",
        grad_check(
            |g, x| {
                let a = g.constant([k, r], wt.clone())?;
                let y = g.matmul(a, x)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    for (ta, tb) in [(true, false), (false, true), (true, true)] {
        let other = uniform(&mut rng, 16, -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                // x is [r, c]; choose the other operand so the product is defined.
                let (xr, xc) = if ta { (c, r) } else { (r, c) };
                let (orows, ocols) = if tb { (k, xc) } else { (xc, k) };
                let o = g.constant([orows, ocols], other[..orows * ocols].to_vec())?;
                let _ = xr;
                let y = g.matmul_t(x, o, ta, tb)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?;
        out.push(("matmul_t", err));
    }
    let b = uniform(&mut rng, r * c, -1.0, 1.0);
    out.push((
        "add",
        grad_check(
            |g, x| {
                let b = g.constant([r, c], b.clone())?;
                let y = g.add(x, b)?;
                let y = g.add(y, x)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    out.push((
        "mul",
        grad_check(
            |g, x| {
                let b = g.constant([r, c], b.clone())?;
                let y = g.mul(x, b)?;
                let y = g.mul(y, x)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    let bias = tensor(&[c], uniform(&mut rng, c, -1.0, 1.0));
    let base = uniform(&mut rng, r * c, -1.0, 1.0);
    out.push((
        "add_bias",
        grad_check(
            |g, b| {
                let x = g.constant([r, c], base.clone())?;
                let y = g.add_bias(x, b)?;
                project(g, y, s)
            },
            &bias,
            STEP,
        )?,
    ));
    out.push((
        "scale",
        grad_check(
            |g, x| {
                let y = g.scale(x, -1.7)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    let xr = tensor(&[r, c], off_zero(&mut rng, r * c));
    out.push((
        "relu",
        grad_check(
            |g, x| {
                let y = g.relu(x)?;
                project(g, y, s)
            },
            &xr,
            STEP,
        )?,
    ));
    for axis in [0, 1] {
        out.push((
            "softmax",
            grad_check(
                |g, x| {
                    let y = g.softmax(x, axis)?;
                    project(g, y, s)
                },
                &x,
                STEP,
            )?,
        ));
    }
    let keep: Vec<bool> = (0..r * c).map(|i| i % c == 0 || rng.random_bool(0.6)).collect();
    out.push((
        "masked_fill",
        grad_check(
            |g, x| {
                let y = g.masked_fill(x, &keep)?;
                let y = g.softmax(y, 1)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    let [lr, lc] = small_shape(&mut rng, 3);
    let xl = tensor(&[lr, lc], uniform(&mut rng, lr * lc, -2.0, 2.0));
    let gain = uniform(&mut rng, lc, 0.5, 1.5);
    let lbias = uniform(&mut rng, lc, -0.5, 0.5);
    out.push((
        "layer_norm",
        grad_check(
            |g, x| {
                let ga = g.constant([lc], gain.clone())?;
                let be = g.constant([lc], lbias.clone())?;
                let y = g.layer_norm(x, ga, be)?;
                project(g, y, s)
            },
            &xl,
            STEP,
        )?,
    ));
    let xdata = xl.data().to_vec();
    out.push((
        "layer_norm (gain)",
        grad_check(
            |g, ga| {
                let x = g.constant([lr, lc], xdata.clone())?;
                let be = g.constant([lc], lbias.clone())?;
                let y = g.layer_norm(x, ga, be)?;
                project(g, y, s)
            },
            &tensor(&[lc], gain.clone()),
            STEP,
        )?,
    ));
    out.push((
        "layer_norm (bias)",
        grad_check(
            |g, be| {
                let x = g.constant([lr, lc], xdata.clone())?;
                let ga = g.constant([lc], gain.clone())?;
                let y = g.layer_norm(x, ga, be)?;
                project(g, y, s)
            },
            &tensor(&[lc], lbias.clone()),
            STEP,
        )?,
    ));
    let ids: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..r)).collect();
    out.push((
        "embedding",
        grad_check(
            |g, table| {
                let y = g.embedding(table, &ids)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    let (r0, c0) = (rng.random_range(0..r), rng.random_range(0..c));
    out.push((
        "slice",
        grad_check(
            |g, x| {
                let y = g.slice(x, r0..r, c0..c)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    let extra = uniform(&mut rng, r * 2, -1.0, 1.0);
    out.push((
        "concat_cols",
        grad_check(
            |g, x| {
                let e = g.constant([r, 2], extra.clone())?;
                let y = g.concat_cols(&[x, e, x])?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    let extra_rows = uniform(&mut rng, c * 2, -1.0, 1.0);
    out.push((
        "concat_rows",
        grad_check(
            |g, x| {
                let e = g.constant([2, c], extra_rows.clone())?;
                let y = g.concat_rows(&[e, x, x])?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?,
    ));
    out.push((
        "sum",
        grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            },
            &x,
            STEP,
        )?,
    ));
    let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let weights = uniform(&mut rng, r, 0.1, 1.0);
    let smoothing = if rng.random_bool(0.5) { 0.0 } else { 0.1 };
    if c >= 2 {
        out.push((
            "cross_entropy",
            grad_check(|g, x| g.cross_entropy(x, &targets, &weights, smoothing), &x, STEP)?,
        ));
    }
    out.push(("dropout", dropout_check(seed, &x)?));

    let (tq, tk, dk) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    let q = uniform(&mut rng, tq * dk, -1.0, 1.0);
    let kk = uniform(&mut rng, tk * dk, -1.0, 1.0);
    let v = uniform(&mut rng, tk * 2, -1.0, 1.0);
    let allowed: Vec<bool> = (0..tq * tk).map(|i| i % tk == 0 || rng.random_bool(0.7)).collect();
    let mask = Mask::new(tq, tk, allowed).unwrap();
    for which in 0..3 {
        let x = match which {
            0 => tensor(&[tq, dk], q.clone()),
            1 => tensor(&[tk, dk], kk.clone()),
            _ => tensor(&[tk, 2], v.clone()),
        };
        let err = grad_check(
            |g, x| {
                let qv = if which == 0 { x } else { g.constant([tq, dk], q.clone())? };
                let kv = if which == 1 { x } else { g.constant([tk, dk], kk.clone())? };
                let vv = if which == 2 { x } else { g.constant([tk, 2], v.clone())? };
                let (y, _) = scaled_dot_attention(g, qv, kv, vv, &mask)?;
                project(g, y, s)
            },
            &x,
            STEP,
        )?;
        out.push(("attention", err));
    }

    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadLayer::new(&mut store, "mha", AttentionConfig::new(4, 2)?, &mut rng);
    let ff = FeedForwardLayer::new(&mut store, "ff", 4, 6, 0.0, &mut rng);
    let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 4);
    let t = rng.random_range(1..=3);
    let xin = uniform(&mut rng, t * 4, -1.0, 1.0);
    let mem = uniform(&mut rng, 2 * 4, -1.0, 1.0);
    out.push((
        "layers (attention, ffn, linear, norm)",
        grad_check_params(
            &store,
            |g| {
                let x = g.constant([t, 4], xin.clone())?;
                let m = g.constant([2, 4], mem.clone())?;
                let (a, _) = multi_head(g, &mha, x, x, &stbd_core::layers::causal_mask(t))?;
                let (cx, _) = multi_head(g, &mha, a, m, &Mask::full(t, 2))?;
                let h = ln.forward(g, cx)?;
                let h = feed_forward(g, &ff, h)?;
                let y = lin.forward(g, h)?;
                project(g, y, s)
            },
            STEP,
        )?,
    ));
    Ok(out)
}

/// Dropout with a fixed mask is linear; its gradient is checked against
/// central differences with the same seed on every evaluation.
fn dropout_check(seed: u64, x: &Tensor<f64>) -> Result<f64> {
    let eval = |t: &Tensor<f64>, want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new().training(seed);
        let xv = g.input(if want_grad { t.clone().with_grad() } else { t.clone() })?;
        let y = g.dropout(xv, 0.3)?;
        let l = project(&mut g, y, seed)?;
        let v = g.value(l)[0];
        if !want_grad {
            return Ok((v, Vec::new()));
        }
        let gr = g.backward(l)?;
        Ok((v, gr.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])))
    };
    let (_, analytic) = eval(x, true)?;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= STEP;
        let numeric = (eval(&p, false)?.0 - eval(&m, false)?.0) / (2.0 * STEP);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
    }
    Ok(worst)
}

/// One-layer model small enough for exhaustive parameter gradient checks.
pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_model: 8,
        d_ff: 12,
        heads: 2,
        dropout: 0.0,
        residual_dropout: 0.0,
        vocab_size: vocab,
        max_positions: 32,
        ..ModelConfig::desk(6, vocab)
    }
}

/// Worst relative error of the joint bidirectional loss of a one-layer model
/// with respect to every parameter.
pub fn stbd_loss_check(seed: u64) -> Result<f64> {
    let vocab = SPECIAL_COUNT + 3;
    let cfg = ModelConfig {
        init_seed: seed,
        ..tiny_config(vocab)
    };
    let model = Model::<f64>::new(cfg)?;
    let batch = tiny_batch(seed, 2, vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = LossConfig {
        alpha: rng.random_range(0.2..0.8),
        label_smoothing: 0.1,
    };
    let streams: Vec<_> = [Direction::L2R, Direction::R2L]
        .iter()
        .flat_map(|&d| {
            batch
                .iter()
                .enumerate()
                .map(move |(i, p)| (i, stbd_core::model::DecoderStream::new(d, &p.reference)))
        })
        .collect();
    grad_check_params(
        model.params(),
        |g| {
            let feats = batch.iter().map(|p| g.input(p.input.clone())).collect::<Result<Vec<_>>>()?;
            let enc = model.encode_batch(g, &feats)?;
            let inputs: Vec<StreamInput> = streams
                .iter()
                .map(|(i, s)| StreamInput {
                    tokens: &s.input,
                    encoder_segment: *i,
                })
                .collect();
            let out = model.decode_batch(g, &enc, &inputs)?;
            let targets: Vec<usize> = streams.iter().flat_map(|(_, s)| s.target.clone()).collect();
            let dirs: Vec<Direction> = streams
                .iter()
                .flat_map(|(_, s)| std::iter::repeat_n(s.direction, s.target.len()))
                .collect();
            let keep = vec![true; targets.len()];
            Ok(joint_loss(g, out.logits, &targets, &dirs, &keep, &loss)?.total)
        },
        STEP,
    )
}

/// Random utterances already in model-input form (`frames × 6`).
pub fn tiny_batch(seed: u64, n: usize, vocab: usize) -> Vec<Prepared<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let utts: Vec<Utterance> = (0..n)
        .map(|i| {
            let len = rng.random_range(1..=3);
            let reference = (0..len).map(|_| rng.random_range(SPECIAL_COUNT..vocab)).collect();
            let frames = rng.random_range(2..=5) * 3;
            Utterance {
                id: format!("u{i}"),
                features: Tensor::new([frames, 2], uniform(&mut rng, frames * 2, -1.0, 1.0).iter().map(|&v| v as f32).collect())
                    .unwrap(),
                reference,
            }
        })
        .collect();
    let cmvn = CmvnStats {
        mean: vec![0.0; 2],
        var: vec![1.0; 2],
        frames: 0,
    };
    prepare(&utts, &cmvn).unwrap()
}

/// Next-token log-probabilities from a fixed random table keyed by the full
/// prefix (start token included).
pub struct TableScorer {
    pub vocab: usize,
    pub table: HashMap<Vec<usize>, Vec<f64>>,
}

impl TableScorer {
    /// `content` emittable tokens besides `<EOS>`, prefixes up to `max_len`
    /// body tokens, for both start tokens.
    pub fn random(seed: u64, content: usize, max_len: usize) -> Self {
        let vocab = SPECIAL_COUNT + content;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = HashMap::new();
        let mut frontier = vec![vec![L2R], vec![R2L]];
        for _ in 0..=max_len {
            let mut next = Vec::new();
            for p in frontier {
                let logits = uniform(&mut rng, vocab, -3.0, 3.0);
                table.insert(p.clone(), log_softmax(&logits));
                for t in SPECIAL_COUNT..vocab {
                    let mut c = p.clone();
                    c.push(t);
                    next.push(c);
                }
            }
            frontier = next;
        }
        TableScorer { vocab, table }
    }
}

impl StepScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<NextToken>> {
        Ok(prefixes
            .iter()
            .map(|p| NextToken {
                log_probs: self.table[*p].clone(),
                attention: None,
            })
            .collect())
    }
}

/// Exhaustive search: every body of up to `max_len` emittable tokens followed
/// by `<EOS>`, scored by length-penalized log-probability. Returns the body
/// (stream order) and its penalized score; ties keep the first found in
/// lexicographic order of bodies.
pub fn brute_force(s: &TableScorer, direction: Direction, max_len: usize, cfg: &DecodeConfig) -> (Vec<usize>, f64) {
    fn walk(
        s: &TableScorer,
        prefix: &mut Vec<usize>,
        score: f64,
        max_len: usize,
        cfg: &DecodeConfig,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        let lp = &s.table[prefix.as_slice()];
        let body = prefix.len() - 1;
        let pen = (score + lp[EOS]) / length_penalty(body + 1, cfg.length_penalty, cfg.penalty_form);
        if best.as_ref().is_none_or(|(_, b)| pen > *b) {
            *best = Some((prefix[1..].to_vec(), pen));
        }
        if body < max_len {
            for t in 0..s.vocab {
                if is_special(t) {
                    continue;
                }
                prefix.push(t);
                walk(s, prefix, score + lp[t], max_len, cfg, best);
                prefix.pop();
            }
        }
    }
    let mut best = None;
    walk(s, &mut vec![direction.start_token()], 0.0, max_len, cfg, &mut best);
    best.expect("the empty body is always a candidate")
}
