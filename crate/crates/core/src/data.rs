//! Toy transduction corpus, feature pipeline, vocabulary and CER.
//!
//! Each content token owns a fixed random 80-dim "acoustic" template. An
//! utterance renders its tokens left to right, each as a run of noisy copies
//! of the template, so the frame/token alignment is monotonic by construction.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{DecoderStream, Direction};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const L2R: usize = 3;
pub const R2L: usize = 4;
pub const SPECIAL_COUNT: usize = 5;
pub const SPECIAL_TOKENS: [&str; SPECIAL_COUNT] = ["<PAD>", "<UNK>", "<EOS>", "<L2R>", "<R2L>"];

/// Raw feature width (fbank-like).
pub const FEATURE_DIM: usize = 80;
/// Frames stacked per encoder input frame.
pub const DOWNSAMPLE: usize = 3;

pub fn is_special(id: usize) -> bool {
    id < SPECIAL_COUNT
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Printable name of the `i`-th content token.
fn content_name(i: usize) -> String {
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    match LETTERS.get(i) {
        Some(&c) => (c as char).to_string(),
        None => format!("t{i}"),
    }
}

impl Vocabulary {
    /// The five special tokens followed by `content` generated token names.
    pub fn with_content(content: usize) -> Self {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain((0..content).map(content_name))
            .collect();
        Self::from_tokens(tokens).expect("generated names are unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_COUNT || tokens[..SPECIAL_COUNT] != SPECIAL_TOKENS {
            return Err(Error::Data(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {t:?} on line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("token {t:?} appears more than once")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn content_size(&self) -> usize {
        self.tokens.len() - SPECIAL_COUNT
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<UNK>")
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Raw frames, `n × FEATURE_DIM`, before normalization.
    pub features: Tensor<f32>,
    /// Reference token ids, no specials.
    pub reference: Vec<usize>,
}

impl Utterance {
    pub fn frame_count(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_utts: usize,
    /// Content tokens (specials excluded).
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub noise_sigma: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            n_utts: 2000,
            vocab_size: 30,
            min_len: 3,
            max_len: 12,
            min_frames_per_token: 6,
            max_frames_per_token: 9,
            noise_sigma: 0.5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("corpus vocab_size must be at least 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > 50 {
            return Err(Error::Config(format!(
                "token length range {}..={} must lie within 1..=50",
                self.min_len, self.max_len
            )));
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return Err(Error::Config(format!(
                "invalid frames-per-token range {}..={}",
                self.min_frames_per_token, self.max_frames_per_token
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("invalid noise sigma {}", self.noise_sigma)));
        }
        if self.n_utts == 0 {
            return Err(Error::Config("corpus needs at least one utterance".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub utterances: Vec<Utterance>,
}

/// Deterministic toy corpus. Consecutive tokens of an utterance always differ,
/// so every token boundary is visible in the frames.
pub fn generate_toy_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = Vocabulary::with_content(cfg.vocab_size);
    let templates: Vec<Vec<f32>> = (0..cfg.vocab_size)
        .map(|_| {
            (0..FEATURE_DIM)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let mut utterances = Vec::with_capacity(cfg.n_utts);
    for u in 0..cfg.n_utts {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut reference = Vec::with_capacity(len);
        while reference.len() < len {
            let t = rng.random_range(0..cfg.vocab_size);
            if cfg.vocab_size > 1 && reference.last() == Some(&(t + SPECIAL_COUNT)) {
                continue;
            }
            reference.push(t + SPECIAL_COUNT);
        }
        let mut frames = Vec::new();
        for &tok in &reference {
            let reps = rng.random_range(cfg.min_frames_per_token..=cfg.max_frames_per_token);
            let template = &templates[tok - SPECIAL_COUNT];
            for _ in 0..reps {
                for &v in template {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    frames.push(v + (cfg.noise_sigma * noise) as f32);
                }
            }
        }
        let n = frames.len() / FEATURE_DIM;
        utterances.push(Utterance {
            id: format!("utt{u:05}"),
            features: Tensor::new([n, FEATURE_DIM], frames)?,
            reference,
        });
    }
    Ok(Corpus { vocab, utterances })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!("unknown split `{other}` (train, dev, test)"))),
        }
    }
}

/// 80/10/10 split by seeded shuffle; each split stays sorted by id.
pub fn split_corpus(utterances: Vec<Utterance>, seed: u64) -> Splits {
    let n = utterances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let mut slot = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        slot[i] = if rank < n_train {
            0
        } else if rank < n_train + n_dev {
            1
        } else {
            2
        };
    }
    let mut splits = Splits {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for (u, s) in utterances.into_iter().zip(slot) {
        match s {
            0 => splits.train.push(u),
            1 => splits.dev.push(u),
            _ => splits.test.push(u),
        }
    }
    splits
}

const SPLIT_SALT: u64 = 0x5eed_5917;

/// Global per-dimension mean and variance of the training frames.
#[derive(Clone, Debug, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub frames: usize,
}

pub fn fit_cmvn(train: &[Utterance]) -> Result<CmvnStats> {
    let dim = train
        .first()
        .map(|u| u.features.cols())
        .ok_or_else(|| Error::Data("cannot fit CMVN on an empty corpus".into()))?;
    let mut sum = vec![0.0f64; dim];
    let mut frames = 0usize;
    for u in train {
        if u.features.cols() != dim {
            return Err(Error::Data(format!("utterance {} has width {}", u.id, u.features.cols())));
        }
        for row in u.features.data().chunks(dim) {
            sum.iter_mut().zip(row).for_each(|(s, &v)| *s += v as f64);
        }
        frames += u.frame_count();
    }
    if frames == 0 {
        return Err(Error::Data("cannot fit CMVN on zero frames".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / frames as f64).collect();
    let mut sq = vec![0.0f64; dim];
    for u in train {
        for row in u.features.data().chunks(dim) {
            for ((s, &v), m) in sq.iter_mut().zip(row).zip(&mean) {
                *s += (v as f64 - m) * (v as f64 - m);
            }
        }
    }
    let var = sq.iter().map(|s| s / frames as f64).collect();
    Ok(CmvnStats { mean, var, frames })
}

impl CmvnStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / sqrt(var + 1e-10)` per dimension.
    pub fn apply<T: Scalar>(&self, frames: &Tensor<f32>) -> Result<Tensor<T>> {
        let d = self.dim();
        if frames.cols() != d {
            return Err(Error::Data(format!(
                "frames of width {} for CMVN stats of width {d}",
                frames.cols()
            )));
        }
        let scale: Vec<f64> = self.var.iter().map(|v| 1.0 / (v + 1e-10).sqrt()).collect();
        let data = frames
            .data()
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&scale)
                    .map(|((&x, m), s)| T::of((x as f64 - m) * s))
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(frames.shape().to_vec(), data)
    }

    /// Layout: dim (u32 LE), mean (f64 LE × dim), variance (f64 LE × dim).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(4 + 16 * self.dim());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.mean.iter().chain(&self.var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = fs::read(path)?;
        if buf.len() < 4 {
            return Err(Error::Truncated("CMVN dimension".into()));
        }
        let dim = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
        if buf.len() != 4 + 16 * dim {
            return Err(Error::Truncated(format!("CMVN stats of dimension {dim}")));
        }
        let vals: Vec<f64> = buf[4..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(CmvnStats {
            mean: vals[..dim].to_vec(),
            var: vals[dim..].to_vec(),
            frames: 0,
        })
    }
}

/// Stacks consecutive triples of frames; the last group is zero-padded.
pub fn downsample3<T: Scalar>(frames: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (frames.rows(), frames.cols());
    let groups = n.div_ceil(DOWNSAMPLE);
    let mut out = vec![T::zero(); groups * DOWNSAMPLE * d];
    out[..n * d].copy_from_slice(frames.data());
    Tensor::new([groups, DOWNSAMPLE * d], out).expect("shape matches")
}

/// Teacher-forcing streams for both directions.
pub fn build_streams(reference: &[usize]) -> Result<(DecoderStream, DecoderStream)> {
    if reference.is_empty() {
        return Err(Error::Data("empty reference".into()));
    }
    if let Some(&bad) = reference.iter().find(|&&t| is_special(t)) {
        return Err(Error::Data(format!("reference contains special token id {bad}")));
    }
    Ok((
        DecoderStream::new(Direction::L2R, reference),
        DecoderStream::new(Direction::R2L, reference),
    ))
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<A: PartialEq>(reference: &[A], hypothesis: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance divided by the reference length; not clipped at 1.
pub fn cer<A: PartialEq>(reference: &[A], hypothesis: &[A]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Data("CER is undefined for an empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Model-ready utterance: normalized, downsampled encoder input.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub id: String,
    pub input: Tensor<T>,
    pub reference: Vec<usize>,
    pub raw_frames: usize,
}

pub fn prepare<T: Scalar>(utts: &[Utterance], cmvn: &CmvnStats) -> Result<Vec<Prepared<T>>> {
    utts.iter()
        .map(|u| {
            Ok(Prepared {
                id: u.id.clone(),
                input: downsample3(&cmvn.apply::<T>(&u.features)?),
                reference: u.reference.clone(),
                raw_frames: u.frame_count(),
            })
        })
        .collect()
}

/// Feature file: frame count (u32 LE), dim (u32 LE), then f32 LE values.
pub fn write_features(path: impl AsRef<Path>, frames: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * frames.len());
    out.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    if buf.len() < 8 {
        return Err(Error::Truncated(format!("header of {}", path.display())));
    }
    let n = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    if buf.len() != 8 + 4 * n * d {
        return Err(Error::Truncated(format!("values of {}", path.display())));
    }
    let data = buf[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new([n, d], data)
}

/// Writes `<split>.csv` (`utt_id,n_frames,transcript`) and one feature file
/// per utterance under `feats/`.
pub fn write_split(dir: &Path, split: &str, utts: &[Utterance], vocab: &Vocabulary) -> Result<()> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{split}.csv")))?;
    w.write_record(["utt_id", "n_frames", "transcript"])?;
    for u in utts {
        w.write_record([
            u.id.as_str(),
            &u.frame_count().to_string(),
            &vocab.decode(&u.reference),
        ])?;
        write_features(feats.join(format!("{}.bin", u.id)), &u.features)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(dir: &Path, split: &str, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let mut r = csv::Reader::from_path(dir.join(format!("{split}.csv")))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (id, n, text) = (&rec[0], &rec[1], &rec[2]);
        let features = read_features(dir.join("feats").join(format!("{id}.bin")))?;
        let expected: usize = n
            .parse()
            .map_err(|_| Error::Data(format!("bad frame count `{n}` for {id}")))?;
        if features.rows() != expected {
            return Err(Error::Data(format!(
                "{id}: manifest says {expected} frames, feature file has {}",
                features.rows()
            )));
        }
        let reference = vocab.encode(text);
        if reference.is_empty() {
            return Err(Error::Data(format!("{id}: empty transcript")));
        }
        out.push(Utterance {
            id: id.to_string(),
            features,
            reference,
        });
    }
    Ok(out)
}

/// Appends one line to a writer; small helper for CSV-like logs.
pub(crate) fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}
