//! Encoder stack and the shared-weight bidirectional decoder.
//!
//! The decoder has a single parameter set. A stream is selected purely by its
//! first token (`<L2R>` or `<R2L>`); streams are packed as separate segments,
//! so self-attention never crosses from one stream into another and a
//! bidirectional pass equals two unidirectional passes with the same weights.

mod checkpoint;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{EOS, L2R, R2L, SPECIAL_COUNT};
use crate::error::{Error, Result};
use crate::layers::{
    feed_forward, normal, sinusoidal_positions, AttentionConfig, AttnSegment, FeedForwardLayer,
    LayerNorm, Linear, MultiHeadLayer,
};
use crate::tensor::{log_softmax, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    L2R,
    R2L,
}

impl Direction {
    pub fn start_token(self) -> usize {
        match self {
            Direction::L2R => L2R,
            Direction::R2L => R2L,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::L2R => "l2r",
            Direction::R2L => "r2l",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Teacher-forcing input and target for one decoding direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderStream {
    pub direction: Direction,
    /// Start token followed by the body in stream order.
    pub input: Vec<usize>,
    /// Body in stream order followed by `<EOS>`.
    pub target: Vec<usize>,
}

impl DecoderStream {
    /// Builds the stream for `body` given in natural (left-to-right) order.
    pub fn new(direction: Direction, body: &[usize]) -> Self {
        let ordered: Vec<usize> = match direction {
            Direction::L2R => body.to_vec(),
            Direction::R2L => body.iter().rev().copied().collect(),
        };
        let mut input = Vec::with_capacity(ordered.len() + 1);
        input.push(direction.start_token());
        input.extend_from_slice(&ordered);
        let mut target = ordered;
        target.push(EOS);
        DecoderStream {
            direction,
            input,
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    Pre,
    Post,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of one (stacked) encoder input frame.
    pub input_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Dropout on embeddings and on every sub-layer output before its
    /// residual sum.
    pub residual_dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub norm: NormPlacement,
    pub tie_embeddings: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Small topology for single-machine runs.
    pub fn desk(input_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            input_dim,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            dropout: 0.1,
            residual_dropout: 0.1,
            vocab_size,
            max_positions: 256,
            norm: NormPlacement::Pre,
            tie_embeddings: false,
            init_seed: 0,
        }
    }

    /// Full-size 8-4-512-8 topology.
    pub fn baseline(input_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_enc_layers: 8,
            n_dec_layers: 4,
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            dropout: 0.2,
            residual_dropout: 0.0,
            max_positions: 1024,
            ..Self::desk(input_dim, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        AttentionConfig::new(self.d_model, self.heads)?;
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.vocab_size <= SPECIAL_COUNT {
            return Err(Error::Config(format!(
                "vocabulary of {} leaves no room past the {SPECIAL_COUNT} special tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.residual_dropout) {
            return Err(Error::Config(format!(
                "residual dropout {} not in [0, 1)",
                self.residual_dropout
            )));
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Topology as `model.*` checkpoint metadata entries.
    pub fn to_metadata(&self) -> Vec<(String, String)> {
        let norm = match self.norm {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        };
        [
            ("input_dim", self.input_dim.to_string()),
            ("n_enc_layers", self.n_enc_layers.to_string()),
            ("n_dec_layers", self.n_dec_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("heads", self.heads.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("residual_dropout", format!("{:?}", self.residual_dropout)),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("norm", norm.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("init_seed", self.init_seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }

    /// Inverse of [`ModelConfig::to_metadata`].
    pub fn from_metadata(meta: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(
            meta: &std::collections::BTreeMap<String, String>,
            key: &str,
        ) -> Result<V> {
            let raw = meta
                .get(&format!("model.{key}"))
                .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks model.{key}")))?;
            raw.parse()
                .map_err(|_| Error::Data(format!("bad value `{raw}` for model.{key}")))
        }
        let norm = match get::<String>(meta, "norm")?.as_str() {
            "pre" => NormPlacement::Pre,
            "post" => NormPlacement::Post,
            other => return Err(Error::Data(format!("unknown norm placement `{other}`"))),
        };
        let cfg = ModelConfig {
            input_dim: get(meta, "input_dim")?,
            n_enc_layers: get(meta, "n_enc_layers")?,
            n_dec_layers: get(meta, "n_dec_layers")?,
            d_model: get(meta, "d_model")?,
            d_ff: get(meta, "d_ff")?,
            heads: get(meta, "heads")?,
            dropout: get(meta, "dropout")?,
            residual_dropout: get(meta, "residual_dropout")?,
            vocab_size: get(meta, "vocab_size")?,
            max_positions: get(meta, "max_positions")?,
            norm,
            tie_embeddings: get(meta, "tie_embeddings")?,
            init_seed: get(meta, "init_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadLayer,
    ff_norm: LayerNorm,
    ff: FeedForwardLayer,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadLayer,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadLayer,
    ff_norm: LayerNorm,
    ff: FeedForwardLayer,
}

#[derive(Clone, Debug)]
struct OutputLayer {
    /// `None` when tied to the embedding table.
    weight: Option<ParamId>,
    bias: ParamId,
}

/// Encoder hidden states `H` for one utterance.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    pub hidden: Tensor<T>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn frame_count(&self) -> usize {
        self.hidden.rows()
    }
}

/// Packed encoder states inside a graph.
pub struct EncodedBatch {
    pub hidden: Var,
    pub segments: Vec<Range<usize>>,
}

/// A decoder stream to run: its input tokens and which encoder segment it
/// attends to.
#[derive(Clone, Copy, Debug)]
pub struct StreamInput<'s> {
    pub tokens: &'s [usize],
    pub encoder_segment: usize,
}

pub struct DecoderBatch {
    /// Packed logits, one row per input position of every stream.
    pub logits: Var,
    pub rows: Vec<Range<usize>>,
    /// Final-layer cross-attention weights per stream, per head.
    pub cross_attention: Vec<Vec<Var>>,
}

/// Next-token distribution for one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct NextToken {
    pub log_probs: Vec<f64>,
    /// Final-layer cross-attention of the last position, averaged over heads.
    pub attention: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    positions: Tensor<T>,
    input_proj: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<LayerNorm>,
    embedding: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<LayerNorm>,
    output: OutputLayer,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model: Xavier-uniform matrices, zero
    /// biases, unit norm gains, and `normal(0, d_model^-0.5)` embeddings.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let attn = AttentionConfig::new(d, config.heads)?;
        let pre = config.norm == NormPlacement::Pre;

        let input_proj = Linear::new(&mut p, "encoder.input", config.input_dim, d, true, &mut rng);
        let encoder = (0..config.n_enc_layers)
            .map(|i| {
                let n = format!("encoder.layers.{i}");
                EncoderLayer {
                    attn_norm: LayerNorm::new(&mut p, &format!("{n}.attn_norm"), d),
                    attn: MultiHeadLayer::new(&mut p, &format!("{n}.self_attn"), attn, &mut rng),
                    ff_norm: LayerNorm::new(&mut p, &format!("{n}.ff_norm"), d),
                    ff: FeedForwardLayer::new(&mut p, &format!("{n}.ff"), d, config.d_ff, config.dropout, &mut rng),
                }
            })
            .collect();
        let encoder_norm = pre.then(|| LayerNorm::new(&mut p, "encoder.final_norm", d));

        let embedding = p.add(
            "decoder.embedding",
            normal(&mut rng, [config.vocab_size, d], (d as f64).powf(-0.5)),
        );
        let decoder = (0..config.n_dec_layers)
            .map(|i| {
                let n = format!("decoder.layers.{i}");
                DecoderLayer {
                    self_norm: LayerNorm::new(&mut p, &format!("{n}.self_norm"), d),
                    self_attn: MultiHeadLayer::new(&mut p, &format!("{n}.self_attn"), attn, &mut rng),
                    cross_norm: LayerNorm::new(&mut p, &format!("{n}.cross_norm"), d),
                    cross_attn: MultiHeadLayer::new(&mut p, &format!("{n}.cross_attn"), attn, &mut rng),
                    ff_norm: LayerNorm::new(&mut p, &format!("{n}.ff_norm"), d),
                    ff: FeedForwardLayer::new(&mut p, &format!("{n}.ff"), d, config.d_ff, config.dropout, &mut rng),
                }
            })
            .collect();
        let decoder_norm = pre.then(|| LayerNorm::new(&mut p, "decoder.final_norm", d));
        let output = if config.tie_embeddings {
            OutputLayer {
                weight: None,
                bias: p.add("decoder.output.bias", Tensor::zeros([config.vocab_size])),
            }
        } else {
            let l = Linear::new(&mut p, "decoder.output", d, config.vocab_size, true, &mut rng);
            OutputLayer {
                weight: Some(l.weight),
                bias: l.bias.expect("output bias"),
            }
        };
        let positions = sinusoidal_positions(config.max_positions, d)?;
        Ok(Model {
            config,
            params: p,
            positions,
            input_proj,
            encoder,
            encoder_norm,
            embedding,
            decoder,
            decoder_norm,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn position_rows(&self, op: &'static str, lens: &[usize]) -> Result<Vec<T>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(lens.iter().sum::<usize>() * d);
        for &n in lens {
            if n > self.config.max_positions {
                return Err(Error::shape(
                    op,
                    format!(
                        "sequence of {n} positions exceeds max_positions {}",
                        self.config.max_positions
                    ),
                ));
            }
            out.extend_from_slice(&self.positions.data()[..n * d]);
        }
        Ok(out)
    }

    /// Sub-layer with a residual connection, normalized before (pre-norm) or
    /// after (post-norm) the residual sum.
    fn residual<F>(&self, g: &mut Graph<'_, T>, x: Var, norm: &LayerNorm, f: F) -> Result<Var>
    where
        F: FnOnce(&mut Graph<'_, T>, Var) -> Result<Var>,
    {
        match self.config.norm {
            NormPlacement::Pre => {
                let h = norm.forward(g, x)?;
                let h = f(g, h)?;
                let h = g.dropout(h, self.config.residual_dropout)?;
                g.add(x, h)
            }
            NormPlacement::Post => {
                let h = f(g, x)?;
                let h = g.dropout(h, self.config.residual_dropout)?;
                let s = g.add(x, h)?;
                norm.forward(g, s)
            }
        }
    }

    /// Encodes several utterances packed row-wise into one matrix.
    pub fn encode_batch(&self, g: &mut Graph<'_, T>, features: &[Var]) -> Result<EncodedBatch> {
        if features.is_empty() {
            return Err(Error::shape("encode", "no utterances given"));
        }
        let mut segments = Vec::with_capacity(features.len());
        let mut lens = Vec::with_capacity(features.len());
        let mut start = 0;
        for &f in features {
            let shape = g.shape(f);
            if shape.len() != 2 || shape[1] != self.config.input_dim {
                return Err(Error::shape(
                    "encode",
                    format!("features {shape:?}, expected n x {}", self.config.input_dim),
                ));
            }
            lens.push(shape[0]);
            segments.push(start..start + shape[0]);
            start += shape[0];
        }
        let x = if features.len() == 1 {
            features[0]
        } else {
            g.concat_rows(features)?
        };
        let x = self.input_proj.forward(g, x)?;
        let pe = self.position_rows("encode", &lens)?;
        let pe = g.constant([start, self.config.d_model], pe)?;
        let x = g.add(x, pe)?;
        let mut x = g.dropout(x, self.config.residual_dropout)?;
        let attn_segments: Vec<AttnSegment> = segments
            .iter()
            .map(|r| AttnSegment::full(r.clone(), r.clone()))
            .collect();
        for layer in &self.encoder {
            x = self.residual(g, x, &layer.attn_norm, |g, h| {
                Ok(layer.attn.forward_segments(g, h, h, &attn_segments)?.output)
            })?;
            x = self.residual(g, x, &layer.ff_norm, |g, h| feed_forward(g, &layer.ff, h))?;
        }
        if let Some(norm) = &self.encoder_norm {
            x = norm.forward(g, x)?;
        }
        Ok(EncodedBatch {
            hidden: x,
            segments,
        })
    }

    /// Runs decoder streams, each as its own causal segment, against packed
    /// encoder states.
    pub fn decode_batch(
        &self,
        g: &mut Graph<'_, T>,
        enc: &EncodedBatch,
        streams: &[StreamInput<'_>],
    ) -> Result<DecoderBatch> {
        if streams.is_empty() {
            return Err(Error::shape("decode", "no streams given"));
        }
        let mut ids = Vec::new();
        let mut rows = Vec::with_capacity(streams.len());
        let mut lens = Vec::with_capacity(streams.len());
        for s in streams {
            if s.tokens.is_empty() {
                return Err(Error::shape("decode", "empty decoder stream"));
            }
            if s.encoder_segment >= enc.segments.len() {
                return Err(Error::shape(
                    "decode",
                    format!("stream refers to encoder segment {}", s.encoder_segment),
                ));
            }
            rows.push(ids.len()..ids.len() + s.tokens.len());
            lens.push(s.tokens.len());
            ids.extend_from_slice(s.tokens);
        }
        let pe = self.position_rows("decode", &lens)?;
        let table = g.param(self.embedding);
        let x = g.embedding(table, &ids)?;
        let x = g.scale(x, T::of((self.config.d_model as f64).sqrt()))?;
        let pe = g.constant([ids.len(), self.config.d_model], pe)?;
        let x = g.add(x, pe)?;
        let mut x = g.dropout(x, self.config.residual_dropout)?;

        let self_segments: Vec<AttnSegment> =
            rows.iter().map(|r| AttnSegment::causal(r.clone())).collect();
        let cross_segments: Vec<AttnSegment> = rows
            .iter()
            .zip(streams)
            .map(|(r, s)| AttnSegment::full(r.clone(), enc.segments[s.encoder_segment].clone()))
            .collect();
        let mut cross_attention = Vec::new();
        for layer in &self.decoder {
            x = self.residual(g, x, &layer.self_norm, |g, h| {
                Ok(layer.self_attn.forward_segments(g, h, h, &self_segments)?.output)
            })?;
            x = self.residual(g, x, &layer.cross_norm, |g, h| {
                let out = layer
                    .cross_attn
                    .forward_segments(g, h, enc.hidden, &cross_segments)?;
                cross_attention = out.weights;
                Ok(out.output)
            })?;
            x = self.residual(g, x, &layer.ff_norm, |g, h| feed_forward(g, &layer.ff, h))?;
        }
        if let Some(norm) = &self.decoder_norm {
            x = norm.forward(g, x)?;
        }
        let logits = match self.output.weight {
            Some(w) => {
                let w = g.param(w);
                g.matmul(x, w)?
            }
            None => g.matmul_t(x, table, false, true)?,
        };
        let bias = g.param(self.output.bias);
        let logits = g.add_bias(logits, bias)?;
        Ok(DecoderBatch {
            logits,
            rows,
            cross_attention,
        })
    }

    /// Encoder hidden states for one utterance (evaluation mode).
    pub fn encode(&self, features: &Tensor<T>) -> Result<EncoderOutput<T>> {
        if features.shape().first() == Some(&0) || features.is_empty() {
            return Err(Error::shape("encode", "empty input"));
        }
        let mut g = Graph::with_params(&self.params);
        let f = g.borrow(features)?;
        let enc = self.encode_batch(&mut g, &[f])?;
        Ok(EncoderOutput {
            hidden: g.tensor(enc.hidden),
        })
    }

    fn decode_streams(&self, enc: &EncoderOutput<T>, streams: &[&DecoderStream]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::with_params(&self.params);
        let hidden = g.borrow(&enc.hidden)?;
        let batch = EncodedBatch {
            hidden,
            segments: vec![0..enc.frame_count()],
        };
        let inputs: Vec<StreamInput> = streams
            .iter()
            .map(|s| StreamInput {
                tokens: &s.input,
                encoder_segment: 0,
            })
            .collect();
        let out = self.decode_batch(&mut g, &batch, &inputs)?;
        let logits = g.tensor(out.logits);
        let v = self.config.vocab_size;
        out.rows
            .iter()
            .map(|r| Tensor::new([r.len(), v], logits.data()[r.start * v..r.end * v].to_vec()))
            .collect()
    }

    /// Logits for both directions from one shared-weight pass.
    pub fn decode_bidirectional(
        &self,
        enc: &EncoderOutput<T>,
        l2r: &DecoderStream,
        r2l: &DecoderStream,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut out = self.decode_streams(enc, &[l2r, r2l])?;
        let r = out.pop().expect("two streams");
        let l = out.pop().expect("two streams");
        Ok((l, r))
    }

    pub fn decode_unidirectional(&self, enc: &EncoderOutput<T>, stream: &DecoderStream) -> Result<Tensor<T>> {
        Ok(self.decode_streams(enc, &[stream])?.pop().expect("one stream"))
    }

    /// Next-token log-probabilities after each prefix, computed in one packed
    /// pass over the full prefixes.
    pub fn next_token(
        &self,
        enc: &EncoderOutput<T>,
        prefixes: &[&[usize]],
        capture_attention: bool,
    ) -> Result<Vec<NextToken>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::with_params(&self.params);
        let hidden = g.borrow(&enc.hidden)?;
        let batch = EncodedBatch {
            hidden,
            segments: vec![0..enc.frame_count()],
        };
        let inputs: Vec<StreamInput> = prefixes
            .iter()
            .map(|p| StreamInput {
                tokens: p,
                encoder_segment: 0,
            })
            .collect();
        let out = self.decode_batch(&mut g, &batch, &inputs)?;
        let v = self.config.vocab_size;
        let logits = g.value(out.logits);
        let frames = enc.frame_count();
        out.rows
            .iter()
            .enumerate()
            .map(|(s, r)| {
                let last = r.end - 1;
                let log_probs = log_softmax(&logits[last * v..(last + 1) * v]);
                let attention = capture_attention.then(|| {
                    let heads = &out.cross_attention[s];
                    let row = r.len() - 1;
                    let mut avg = vec![0.0; frames];
                    for &h in heads {
                        let w = &g.value(h)[row * frames..(row + 1) * frames];
                        avg.iter_mut().zip(w).for_each(|(a, &b)| *a += b.as_f64());
                    }
                    avg.iter_mut().for_each(|a| *a /= heads.len() as f64);
                    avg
                });
                Ok(NextToken {
                    log_probs,
                    attention,
                })
            })
            .collect()
    }

    /// Weights plus the topology (`model.*` entries) and `metadata`.
    pub fn to_checkpoint(&self, metadata: impl IntoIterator<Item = (String, String)>) -> Checkpoint {
        Checkpoint::from_params(&self.params, self.config.to_metadata().into_iter().chain(metadata))
    }

    /// Rebuilds a model from a checkpoint's own topology entries.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ModelConfig::from_metadata(&ckpt.metadata)?)?;
        model.load_weights(ckpt)?;
        Ok(model)
    }

    /// Replaces all weights with those of `ckpt`, which must match this
    /// model's tensor names and shapes exactly.
    pub fn load_weights(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.copy_into(&mut self.params)
    }

    pub fn save_checkpoint(
        &self,
        path: impl AsRef<std::path::Path>,
        metadata: impl IntoIterator<Item = (String, String)>,
    ) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    /// Builds a model for `config` and fills it from the checkpoint at `path`.
    pub fn load_checkpoint(config: ModelConfig, path: impl AsRef<std::path::Path>) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        let mut model = Model::new(config)?;
        model.load_weights(&ckpt)?;
        Ok((model, ckpt))
    }

    /// Same architecture and weights at another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::new(self.config.clone())?;
        for ((_, dst), (_, src)) in out.params.iter_mut().zip(self.params.iter()) {
            dst.data_mut()
                .iter_mut()
                .zip(src.data())
                .for_each(|(d, &s)| *d = U::of(s.as_f64()));
        }
        Ok(out)
    }
}
