//! Attention, feed-forward and normalization blocks over a [`Graph`].
//!
//! Sequences of several utterances are processed packed: their rows are
//! stacked into one matrix, row-wise maps (projections, FFN, norms) run on the
//! whole stack at once, and attention runs per [`AttnSegment`] so that no
//! row ever attends outside its own sequence.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionConfig { d_model, heads })
    }

    /// Per-head query/key/value width.
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Boolean attention mask, `true` where attending is allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || allowed.len() != rows * cols {
            return Err(Error::shape(
                "mask",
                format!("{} entries for a {rows}x{cols} mask", allowed.len()),
            ));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * cols..(r + 1) * cols].contains(&true)) {
            return Err(Error::shape("mask", format!("query row {r} is fully masked")));
        }
        Ok(Mask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.cols + key]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Lower-triangular mask (diagonal included).
pub fn causal_mask(t: usize) -> Mask {
    let mut allowed = vec![false; t * t];
    for i in 0..t {
        allowed[i * t..=i * t + i].fill(true);
    }
    Mask {
        rows: t,
        cols: t,
        allowed,
    }
}

/// Sinusoidal position table: `sin(pos / 10000^(2i/d))` on even columns,
/// `cos` of the same angle on odd ones.
pub fn sinusoidal_positions<T: Scalar>(max_len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even width, got {d_model}"
        )));
    }
    if max_len == 0 {
        return Err(Error::Config("positional encoding needs max_len >= 1".into()));
    }
    let mut data = Vec::with_capacity(max_len * d_model);
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(T::of(angle.sin()));
            data.push(T::of(angle.cos()));
        }
    }
    Tensor::new([max_len, d_model], data)
}

pub(crate) fn xavier<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let data = (0..fan_in * fan_out).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new([fan_in, fan_out], data).expect("shape matches")
}

pub(crate) fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: [usize; 2], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..shape[0] * shape[1]).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn filled<T: Scalar>(n: usize, v: f64) -> Tensor<T> {
    Tensor::new([n], vec![T::of(v); n]).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out));
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), filled(d_out, 0.0)));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), filled(d, 1.0)),
            bias: store.add(format!("{name}.bias"), filled(d, 0.0)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention. The per-head projections `W_i^Q`, `W_i^K`, `W_i^V`
/// (each `d_model × d_head`) are stored side by side as column blocks of one
/// `d_model × d_model` matrix; block `i` belongs to head `i`.
#[derive(Clone, Debug)]
pub struct MultiHeadLayer {
    pub config: AttentionConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

/// One independent attention problem inside packed query/key matrices.
#[derive(Clone, Debug)]
pub struct AttnSegment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    pub mask: Mask,
}

impl AttnSegment {
    pub fn full(queries: Range<usize>, keys: Range<usize>) -> Self {
        let mask = Mask::full(queries.len(), keys.len());
        AttnSegment {
            queries,
            keys,
            mask,
        }
    }

    pub fn causal(rows: Range<usize>) -> Self {
        let mask = causal_mask(rows.len());
        AttnSegment {
            queries: rows.clone(),
            keys: rows,
            mask,
        }
    }
}

pub struct MultiHeadOutput {
    pub output: Var,
    /// Attention weights per segment, per head (`t_q × t_k` each).
    pub weights: Vec<Vec<Var>>,
}

impl MultiHeadLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        let mut proj = |suffix: &str| store.add(format!("{name}.{suffix}"), xavier(rng, d, d));
        MultiHeadLayer {
            config,
            w_q: proj("w_q"),
            w_k: proj("w_k"),
            w_v: proj("w_v"),
            w_o: proj("w_o"),
        }
    }

    /// Attention of `x_q` rows over `x_kv` rows, segment by segment. Segments
    /// must tile the rows of `x_q` in order.
    pub fn forward_segments<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x_q: Var,
        x_kv: Var,
        segments: &[AttnSegment],
    ) -> Result<MultiHeadOutput> {
        let mut next = 0;
        for s in segments {
            if s.queries.start != next {
                return Err(Error::shape("multi_head", "segments do not tile the query rows"));
            }
            next = s.queries.end;
        }
        if next != g.shape(x_q)[0] {
            return Err(Error::shape("multi_head", "segments do not tile the query rows"));
        }
        let (wq, wk, wv, wo) = (
            g.param(self.w_q),
            g.param(self.w_k),
            g.param(self.w_v),
            g.param(self.w_o),
        );
        let q = g.matmul(x_q, wq)?;
        let k = g.matmul(x_kv, wk)?;
        let v = g.matmul(x_kv, wv)?;
        let dh = self.config.d_head();
        let mut rows = Vec::with_capacity(segments.len());
        let mut weights = Vec::with_capacity(segments.len());
        for s in segments {
            let mut heads = Vec::with_capacity(self.config.heads);
            let mut head_weights = Vec::with_capacity(self.config.heads);
            for h in 0..self.config.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = g.slice(q, s.queries.clone(), cols.clone())?;
                let kh = g.slice(k, s.keys.clone(), cols.clone())?;
                let vh = g.slice(v, s.keys.clone(), cols)?;
                let (o, w) = scaled_dot_attention(g, qh, kh, vh, &s.mask)?;
                heads.push(o);
                head_weights.push(w);
            }
            rows.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            });
            weights.push(head_weights);
        }
        let concat = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        };
        let output = g.matmul(concat, wo)?;
        Ok(MultiHeadOutput { output, weights })
    }
}

/// `softmax(Q Kᵀ / √d_k) V` with disallowed scores forced to the mask fill
/// value. Returns the output and the attention weights.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &Mask,
) -> Result<(Var, Var)> {
    let (tq, dq) = dims(g, q)?;
    let (tk, dk) = dims(g, k)?;
    let (tv, _) = dims(g, v)?;
    if dq != dk {
        return Err(Error::shape(
            "attention",
            format!("query width {dq} differs from key width {dk}"),
        ));
    }
    if tk != tv {
        return Err(Error::shape(
            "attention",
            format!("{tk} keys but {tv} values"),
        ));
    }
    if mask.rows() != tq || mask.cols() != tk {
        return Err(Error::shape(
            "attention",
            format!("{}x{} mask for {tq} queries and {tk} keys", mask.rows(), mask.cols()),
        ));
    }
    if let Some(r) = (0..tq).find(|&r| !(0..tk).any(|c| mask.allows(r, c))) {
        return Err(Error::shape("attention", format!("query row {r} is fully masked")));
    }
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, T::of(1.0 / (dk as f64).sqrt()))?;
    let scores = if mask.is_full() {
        scores
    } else {
        g.masked_fill(scores, mask.as_slice())?
    };
    let weights = g.softmax(scores, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

fn dims<T: Scalar>(g: &Graph<'_, T>, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape("attention", format!("expected a matrix, got {s:?}"))),
    }
}

/// Single-sequence multi-head attention; returns the output and the weights of
/// each head.
pub fn multi_head<T: Scalar>(
    g: &mut Graph<'_, T>,
    layer: &MultiHeadLayer,
    x_q: Var,
    x_kv: Var,
    mask: &Mask,
) -> Result<(Var, Vec<Var>)> {
    let tq = g.shape(x_q)[0];
    let tk = g.shape(x_kv)[0];
    let seg = AttnSegment {
        queries: 0..tq,
        keys: 0..tk,
        mask: mask.clone(),
    };
    let mut out = layer.forward_segments(g, x_q, x_kv, &[seg])?;
    Ok((out.output, out.weights.pop().expect("one segment")))
}

/// `max(0, x W₁ + b₁) W₂ + b₂` with dropout on the inner activation.
#[derive(Clone, Debug)]
pub struct FeedForwardLayer {
    pub inner: Linear,
    pub outer: Linear,
    pub dropout: f64,
}

impl FeedForwardLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        FeedForwardLayer {
            inner: Linear::new(store, &format!("{name}.inner"), d_model, d_ff, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d_model, true, rng),
            dropout,
        }
    }
}

pub fn feed_forward<T: Scalar>(g: &mut Graph<'_, T>, layer: &FeedForwardLayer, x: Var) -> Result<Var> {
    let h = layer.inner.forward(g, x)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, layer.dropout)?;
    layer.outer.forward(g, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new([r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn set(store: &mut ParamStore<f64>, id: ParamId, data: Vec<f64>) {
        store.get_mut(id).data_mut().copy_from_slice(&data);
    }

    fn identity(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::from_f64([2, 2], &[0.3, 0.1, -2.0, 4.0]).unwrap()).unwrap();
        let k = g.input(Tensor::from_f64([1, 2], &[1.0, 1.0]).unwrap()).unwrap();
        let v = g.input(Tensor::from_f64([1, 3], &[5.0, 6.0, 7.0]).unwrap()).unwrap();
        let (o, w) = scaled_dot_attention(&mut g, q, k, v, &Mask::full(2, 1)).unwrap();
        assert_eq!(g.value(w), &[1.0, 1.0]);
        assert_eq!(g.value(o), &[5.0, 6.0, 7.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn attention_hand_examples() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::from_f64([1, 1], &[1.0]).unwrap()).unwrap();
        let k = g.input(Tensor::from_f64([2, 1], &[0.0, 1.0]).unwrap()).unwrap();
        let v = g.input(Tensor::from_f64([2, 1], &[0.0, 1.0]).unwrap()).unwrap();
        let (o, _) = scaled_dot_attention(&mut g, q, k, v, &Mask::full(1, 2)).unwrap();
        assert!((g.value(o)[0] - 0.73106).abs() < 1e-5);

        let k = g.input(Tensor::from_f64([2, 1], &[0.5, 0.5]).unwrap()).unwrap();
        let v = g.input(Tensor::from_f64([2, 1], &[2.0, 4.0]).unwrap()).unwrap();
        let (o, _) = scaled_dot_attention(&mut g, q, k, v, &Mask::full(1, 2)).unwrap();
        assert!((g.value(o)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_bad_shapes_and_empty_rows() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::zeros([2, 3])).unwrap();
        let k = g.input(Tensor::zeros([2, 2])).unwrap();
        let v = g.input(Tensor::zeros([2, 2])).unwrap();
        assert!(scaled_dot_attention(&mut g, q, k, v, &Mask::full(2, 2)).is_err());
        assert!(Mask::new(2, 2, vec![true, false, false, false]).is_err());
    }

    #[test]
    fn causal_mask_examples() {
        assert_eq!(causal_mask(1), Mask::full(1, 1));
        let m = causal_mask(3);
        assert!((0..3).all(|k| m.allows(2, k)));
        assert!(m.allows(0, 0) && !m.allows(0, 1) && !m.allows(0, 2));
        for t in 1..20 {
            assert_eq!(causal_mask(t).allowed_count(), t * (t + 1) / 2);
        }
    }

    #[test]
    fn positions() {
        let pe = sinusoidal_positions::<f64>(50, 8).unwrap();
        for j in 0..8 {
            assert_eq!(pe.at(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let pe2 = sinusoidal_positions::<f64>(2, 2).unwrap();
        assert!((pe2.at(1, 0) - 0.84147).abs() < 1e-5);
        assert!(sinusoidal_positions::<f64>(4, 3).is_err());
    }

    #[test]
    fn head_width() {
        assert_eq!(AttentionConfig::new(512, 8).unwrap().d_head(), 64);
        assert!(AttentionConfig::new(10, 3).is_err());
    }

    #[test]
    fn single_head_identity_reduces_to_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = MultiHeadLayer::new(&mut store, "mh", AttentionConfig::new(4, 1).unwrap(), &mut rng);
        for id in [layer.w_q, layer.w_k, layer.w_v, layer.w_o] {
            set(&mut store, id, identity(4));
        }
        let xq = rand_tensor(&mut rng, 3, 4);
        let xkv = rand_tensor(&mut rng, 5, 4);
        let mut g = Graph::with_params(&store);
        let q = g.input(xq).unwrap();
        let kv = g.input(xkv).unwrap();
        let mask = Mask::full(3, 5);
        let (a, _) = multi_head(&mut g, &layer, q, kv, &mask).unwrap();
        let (b, _) = scaled_dot_attention(&mut g, q, kv, kv, &mask).unwrap();
        for (x, y) in g.value(a).iter().zip(g.value(b)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    /// Plain-loop multi-head attention over explicit per-head weight blocks.
    fn per_head_oracle(
        xq: &Tensor<f64>,
        xkv: &Tensor<f64>,
        wq: &Tensor<f64>,
        wk: &Tensor<f64>,
        wv: &Tensor<f64>,
        wo: &Tensor<f64>,
        heads: usize,
        mask: &Mask,
    ) -> Vec<f64> {
        let d = wq.rows();
        let dh = d / heads;
        let (tq, tk) = (xq.rows(), xkv.rows());
        let proj = |x: &Tensor<f64>, w: &Tensor<f64>, h: usize, r: usize| -> Vec<f64> {
            (0..dh)
                .map(|j| (0..d).map(|p| x.at(r, p) * w.at(p, h * dh + j)).sum())
                .collect()
        };
        let mut concat = vec![vec![0.0; d]; tq];
        for h in 0..heads {
            for i in 0..tq {
                let qi = proj(xq, wq, h, i);
                let scores: Vec<f64> = (0..tk)
                    .map(|j| {
                        if !mask.allows(i, j) {
                            return f64::NEG_INFINITY;
                        }
                        let kj = proj(xkv, wk, h, j);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..tk {
                    let vj = proj(xkv, wv, h, j);
                    for c in 0..dh {
                        concat[i][h * dh + c] += e[j] / z * vj[c];
                    }
                }
            }
        }
        let mut out = Vec::new();
        for row in &concat {
            for c in 0..d {
                out.push((0..d).map(|p| row[p] * wo.at(p, c)).sum());
            }
        }
        out
    }

    #[test]
    fn multi_head_matches_per_head_loop_oracle() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let heads = if seed % 2 == 0 { 2 } else { 4 };
            let mut store = ParamStore::new();
            let layer = MultiHeadLayer::new(&mut store, "mh", AttentionConfig::new(8, heads).unwrap(), &mut rng);
            let tq = rng.random_range(1..6);
            let xq = rand_tensor(&mut rng, tq, 8);
            let (xkv, mask) = if seed % 3 == 0 {
                (xq.clone(), causal_mask(tq))
            } else {
                let tk = rng.random_range(1..7);
                (rand_tensor(&mut rng, tk, 8), Mask::full(tq, tk))
            };
            let expected = per_head_oracle(
                &xq,
                &xkv,
                store.get(layer.w_q),
                store.get(layer.w_k),
                store.get(layer.w_v),
                store.get(layer.w_o),
                heads,
                &mask,
            );
            let mut g = Graph::with_params(&store);
            let q = g.input(xq).unwrap();
            let kv = g.input(xkv).unwrap();
            let (out, w) = multi_head(&mut g, &layer, q, kv, &mask).unwrap();
            assert_eq!(w.len(), heads);
            for (a, b) in g.value(out).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn packed_segments_equal_separate_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let layer = MultiHeadLayer::new(&mut store, "mh", AttentionConfig::new(8, 2).unwrap(), &mut rng);
        let a = rand_tensor(&mut rng, 3, 8);
        let b = rand_tensor(&mut rng, 4, 8);
        let mut g = Graph::with_params(&store);
        let va = g.input(a).unwrap();
        let vb = g.input(b).unwrap();
        let packed = g.concat_rows(&[va, vb]).unwrap();
        let segs = [AttnSegment::causal(0..3), AttnSegment::causal(3..7)];
        let out = layer.forward_segments(&mut g, packed, packed, &segs).unwrap();
        let (oa, _) = multi_head(&mut g, &layer, va, va, &causal_mask(3)).unwrap();
        let (ob, _) = multi_head(&mut g, &layer, vb, vb, &causal_mask(4)).unwrap();
        let mut separate = g.value(oa).to_vec();
        separate.extend_from_slice(g.value(ob));
        for (x, y) in g.value(out.output).iter().zip(&separate) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_keys_and_values_jointly_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, 3, 4);
        let k = rand_tensor(&mut rng, 5, 4);
        let v = rand_tensor(&mut rng, 5, 2);
        let perm = [3, 0, 4, 2, 1];
        let permute = |t: &Tensor<f64>| {
            let rows: Vec<f64> = perm.iter().flat_map(|&r| t.row(r).to_vec()).collect();
            Tensor::new(t.shape().to_vec(), rows).unwrap()
        };
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (g.input(q.clone()).unwrap(), g.input(k.clone()).unwrap(), g.input(v.clone()).unwrap());
        let (o1, _) = scaled_dot_attention(&mut g, qv, kv, vv, &Mask::full(3, 5)).unwrap();
        let kp = g.input(permute(&k)).unwrap();
        let vp = g.input(permute(&v)).unwrap();
        let (o2, _) = scaled_dot_attention(&mut g, qv, kp, vp, &Mask::full(3, 5)).unwrap();
        for (a, b) in g.value(o1).iter().zip(g.value(o2)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_values_never_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = rand_tensor(&mut rng, 4, 3);
        let k = rand_tensor(&mut rng, 4, 3);
        let v = rand_tensor(&mut rng, 4, 2);
        let mask = Mask::new(
            4,
            4,
            vec![
                true, false, true, false, //
                false, true, false, false, //
                true, true, true, true, //
                false, false, false, true,
            ],
        )
        .unwrap();
        let run = |v: Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let (qv, kv, vv) = (g.input(q.clone()).unwrap(), g.input(k.clone()).unwrap(), g.input(v).unwrap());
            let (o, _) = scaled_dot_attention(&mut g, qv, kv, vv, &mask).unwrap();
            g.value(o).to_vec()
        };
        let base = run(v.clone());
        for j in 0..4 {
            let mut moved = v.clone();
            moved.data_mut()[j * 2] += 0.5;
            let out = run(moved);
            for i in 0..4 {
                let changed = out[i * 2] != base[i * 2];
                assert_eq!(changed, mask.allows(i, j), "query {i} key {j}");
            }
        }
    }

    #[test]
    fn zero_padding_width_only_rescales_scores() {
        // Padding Q and K with zero columns from d_k to d_k' leaves QKᵀ intact,
        // so the pre-softmax scores scale by √(d_k / d_k').
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_tensor(&mut rng, 2, 3);
        let k = rand_tensor(&mut rng, 4, 3);
        let pad = |t: &Tensor<f64>| {
            let rows: Vec<f64> = (0..t.rows())
                .flat_map(|r| t.row(r).iter().copied().chain([0.0; 3]).collect::<Vec<_>>())
                .collect();
            Tensor::new([t.rows(), 6], rows).unwrap()
        };
        let scores = |q: Tensor<f64>, k: Tensor<f64>| {
            let d = q.cols() as f64;
            let mut g = Graph::<f64>::new();
            let (qv, kv) = (g.input(q).unwrap(), g.input(k).unwrap());
            let s = g.matmul_t(qv, kv, false, true).unwrap();
            let s = g.scale(s, 1.0 / d.sqrt()).unwrap();
            g.value(s).to_vec()
        };
        let narrow = scores(q.clone(), k.clone());
        let wide = scores(pad(&q), pad(&k));
        let ratio = (3.0f64 / 6.0).sqrt();
        for (n, w) in narrow.iter().zip(&wide) {
            assert!((w - n * ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn feed_forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ff = FeedForwardLayer::new(&mut store, "ff", 2, 3, 0.0, &mut rng);
        set(&mut store, ff.inner.weight, vec![0.0; 6]);
        set(&mut store, ff.outer.bias.unwrap(), vec![0.25, -0.5]);
        let mut g = Graph::with_params(&store);
        let x = g.input(rand_tensor(&mut rng, 3, 2)).unwrap();
        let y = feed_forward(&mut g, &ff, x).unwrap();
        assert_eq!(g.value(y), &[0.25, -0.5, 0.25, -0.5, 0.25, -0.5]);

        let mut store = ParamStore::new();
        let ff = FeedForwardLayer::new(&mut store, "ff", 1, 1, 0.0, &mut rng);
        set(&mut store, ff.inner.weight, vec![-1.0]);
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::from_f64([1, 1], &[1.0]).unwrap()).unwrap();
        let h = ff.inner.forward(&mut g, x).unwrap();
        let h = g.relu(h).unwrap();
        assert_eq!(g.value(h), &[0.0]);
    }

    #[test]
    fn feed_forward_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ff = FeedForwardLayer::new(&mut store, "ff", 3, 5, 0.0, &mut rng);
        set(&mut store, ff.inner.bias.unwrap(), (0..5).map(|i| 0.1 * i as f64 - 0.2).collect());
        set(&mut store, ff.outer.bias.unwrap(), vec![0.3, -0.1, 0.05]);
        let x = rand_tensor(&mut rng, 2, 3);
        let (w1, b1) = (store.get(ff.inner.weight), store.get(ff.inner.bias.unwrap()));
        let (w2, b2) = (store.get(ff.outer.weight), store.get(ff.outer.bias.unwrap()));
        let mut expected = Vec::new();
        for r in 0..2 {
            let inner: Vec<f64> = (0..5)
                .map(|j| ((0..3).map(|p| x.at(r, p) * w1.at(p, j)).sum::<f64>() + b1.data()[j]).max(0.0))
                .collect();
            for c in 0..3 {
                expected.push((0..5).map(|j| inner[j] * w2.at(j, c)).sum::<f64>() + b2.data()[c]);
            }
        }
        let mut g = Graph::with_params(&store);
        let xv = g.input(x).unwrap();
        let y = feed_forward(&mut g, &ff, xv).unwrap();
        for (a, b) in g.value(y).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
