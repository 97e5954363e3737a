//! Joint bidirectional loss, Adam with warmup, batching and the epoch loop.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{append_line, build_streams, edit_distance, Prepared};
use crate::decode::{decode_input, DecodeConfig, SearchMode};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, DecoderStream, Direction, Model, StreamInput};
use crate::numfmt::exact;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier `k` of the warmup schedule.
    pub k: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    /// Full-scale settings: 16000 warmup steps, k = 1.
    pub fn baseline() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            k: 1.0,
            warmup_steps: 16000,
            clip_norm: Some(5.0),
        }
    }

    /// Desk settings: 400 warmup steps with `k` scaled down so the peak
    /// rate is 5e-3.
    pub fn desk() -> Self {
        OptimizerConfig {
            k: 0.1,
            warmup_steps: 400,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1)")))
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon = {} must be > 0", self.epsilon)));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("k = {} must be > 0", self.k)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup steps must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// `k · min(s^-0.5, s · w^-1.5)` for 1-based step `s`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Usage("learning-rate steps are 1-based".into()));
    }
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    Ok(cfg.k * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam moments, one buffer per parameter in store order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut ParamStore<T>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Usage("optimizer state does not match the parameter store".into()));
    }
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::numeric(
                    "adam",
                    format!("non-finite gradient in {name}[{i}]"),
                ));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, eps) = (T::one(), T::of(cfg.epsilon));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(lr);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let grad = p.grad().map(<[T]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for (name, t) in params.iter() {
        for x in t.grad().unwrap_or(&[]) {
            let x = x.as_f64();
            if !x.is_finite() {
                return Err(Error::numeric("clip", format!("non-finite gradient in {name}")));
            }
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let f = T::of(max_norm / norm);
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<T> = g.iter().map(|&x| x * f).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled)?;
            }
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the L2R term; R2L gets `1 - alpha`.
    pub alpha: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            label_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    /// Equal direction weights with 0.1 label smoothing.
    pub fn desk() -> Self {
        LossConfig {
            label_smoothing: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha = {} must lie in [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} must lie in [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

pub struct JointLoss {
    pub total: Var,
    pub l2r: Option<Var>,
    pub r2l: Option<Var>,
}

/// `alpha · L_l2r + (1 - alpha) · L_r2l`, each term the mean cross-entropy
/// over the non-padded rows of its direction. `row_directions` and
/// `keep` label every logits row; a direction whose weight is zero may be
/// absent.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[usize],
    row_directions: &[Direction],
    keep: &[bool],
    cfg: &LossConfig,
) -> Result<JointLoss> {
    cfg.validate()?;
    let rows = targets.len();
    if row_directions.len() != rows || keep.len() != rows {
        return Err(Error::shape("joint_loss", "row labels do not match the targets"));
    }
    let mut terms = Vec::new();
    let mut parts = [None, None];
    for (slot, dir, weight) in [(0, Direction::L2R, cfg.alpha), (1, Direction::R2L, 1.0 - cfg.alpha)] {
        let count = (0..rows).filter(|&r| keep[r] && row_directions[r] == dir).count();
        if count == 0 {
            if weight > 0.0 {
                return Err(Error::Data(format!("no unpadded {dir} positions to score")));
            }
            continue;
        }
        let w = T::of(1.0 / count as f64);
        let weights: Vec<T> = (0..rows)
            .map(|r| if keep[r] && row_directions[r] == dir { w } else { T::zero() })
            .collect();
        let ce = g.cross_entropy(logits, targets, &weights, cfg.label_smoothing)?;
        parts[slot] = Some(ce);
        if weight > 0.0 {
            terms.push(g.scale(ce, T::of(weight))?);
        }
    }
    let total = match terms.as_slice() {
        [only] => *only,
        [a, b] => g.add(*a, *b)?,
        _ => return Err(Error::Data("all positions are padded".into())),
    };
    Ok(JointLoss {
        total,
        l2r: parts[0],
        r2l: parts[1],
    })
}

/// Groups utterance indices, sorted by length, into batches whose summed
/// length stays within `cap`.
pub fn pack_batches(lengths: &[usize], cap: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((i, &l)) = lengths.iter().enumerate().find(|(_, &l)| l > cap) {
        return Err(Error::Config(format!(
            "utterance {i} has {l} frames, more than the batch cap of {cap}"
        )));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        if used + lengths[i] > cap && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += lengths[i];
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// [`pack_batches`] with the batch order shuffled by `seed`.
pub fn make_batches(lengths: &[usize], cap: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut batches = pack_batches(lengths, cap)?;
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(batches)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Both streams through the shared decoder, joint loss.
    Bidirectional,
    L2R,
    R2L,
}

impl TrainMode {
    pub fn directions(self) -> &'static [Direction] {
        match self {
            TrainMode::Bidirectional => &[Direction::L2R, Direction::R2L],
            TrainMode::L2R => &[Direction::L2R],
            TrainMode::R2L => &[Direction::R2L],
        }
    }

    pub fn search_mode(self) -> SearchMode {
        match self {
            TrainMode::Bidirectional => SearchMode::Bidirectional,
            TrainMode::L2R => SearchMode::L2R,
            TrainMode::R2L => SearchMode::R2L,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Bidirectional => "stbd",
            TrainMode::L2R => "st-l2r",
            TrainMode::R2L => "st-r2l",
        }
    }

    fn loss(self, cfg: &LossConfig) -> LossConfig {
        let alpha = match self {
            TrainMode::Bidirectional => cfg.alpha,
            TrainMode::L2R => 1.0,
            TrainMode::R2L => 0.0,
        };
        LossConfig {
            alpha,
            label_smoothing: cfg.label_smoothing,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stbd" | "bidirectional" => Ok(TrainMode::Bidirectional),
            "st-l2r" | "l2r" => Ok(TrainMode::L2R),
            "st-r2l" | "r2l" => Ok(TrainMode::R2L),
            _ => Err(Error::Config(format!(
                "unknown training mode '{s}' (expected stbd, st-l2r or st-r2l)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Batch budget in raw (pre-downsampling) frames.
    pub max_frames_per_batch: usize,
    pub seed: u64,
    /// How many best dev-CER epochs are averaged at the end.
    pub average_best: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            mode: TrainMode::Bidirectional,
            epochs: 30,
            max_frames_per_batch: 600,
            seed: 1,
            average_best: 5,
            optimizer: OptimizerConfig::desk(),
            loss: LossConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.max_frames_per_batch == 0 {
            return Err(Error::Config("batch frame cap must be at least 1".into()));
        }
        if self.average_best == 0 {
            return Err(Error::Config("average_best must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub l2r: Option<f64>,
    pub r2l: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean joint loss over the epoch's batches.
    pub train_loss: f64,
    pub l2r: Option<f64>,
    pub r2l: Option<f64>,
    pub dev_cer: f64,
}

pub const CURVE_HEADER: &str = "epoch,step,train_loss,dev_cer,best_dev_cer";

pub struct Trainer<T: Scalar> {
    model: Model<T>,
    adam: AdamState<T>,
    cfg: TrainConfig,
    epoch: usize,
    best_dev_cer: f64,
    curve: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            adam: AdamState::new(model.params()),
            model,
            cfg,
            epoch: 0,
            best_dev_cer: f64::NAN,
            curve: None,
        })
    }

    /// Starts a validation-curve CSV at `path` (truncating it); every epoch
    /// appends one row.
    pub fn with_curve(mut self, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        std::fs::write(&path, format!("{CURVE_HEADER}\n"))?;
        self.curve = Some(path);
        Ok(self)
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.adam.step()
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Forward, backward and one optimizer update on a packed batch.
    pub fn train_batch(&mut self, batch: &[&Prepared<T>]) -> Result<StepReport> {
        let step = self.adam.step() + 1;
        let (loss, l2r, r2l, grads) = {
            let seed = self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step);
            let mut g = Graph::with_params(self.model.params()).training(seed);
            let out = batch_loss(&self.model, &mut g, batch, self.cfg.mode, &self.cfg.loss)?;
            let value = |g: &Graph<'_, T>, v: Option<Var>| v.map(|v| g.value(v)[0].as_f64());
            let loss = g.value(out.total)[0].as_f64();
            let (l2r, r2l) = (value(&g, out.l2r), value(&g, out.r2l));
            let grads = g.backward(out.total)?;
            (loss, l2r, r2l, grads)
        };
        if !loss.is_finite() {
            return Err(Error::numeric(
                "train",
                format!("non-finite loss at epoch {} step {step}", self.epoch + 1),
            ));
        }
        let params = self.model.params_mut();
        params.zero_grads();
        params.accumulate(&grads)?;
        let grad_norm = match self.cfg.optimizer.clip_norm {
            Some(c) => clip_grad_norm(params, c),
            None => clip_grad_norm(params, f64::INFINITY),
        }
        .map_err(|e| annotate(e, self.epoch + 1, step))?;
        let lr = lr_at(step, &self.cfg.optimizer)?;
        adam_step(&mut self.adam, params, lr, &self.cfg.optimizer)
            .map_err(|e| annotate(e, self.epoch + 1, step))?;
        Ok(StepReport {
            loss,
            l2r,
            r2l,
            grad_norm,
            lr,
        })
    }

    /// One pass over `train` followed by greedy decoding of `dev`.
    pub fn train_epoch(&mut self, train: &[Prepared<T>], dev: &[Prepared<T>]) -> Result<EpochReport> {
        let lengths: Vec<usize> = train.iter().map(|p| p.raw_frames).collect();
        let seed = self.cfg.seed ^ ((self.epoch as u64 + 1) << 32);
        let batches = make_batches(&lengths, self.cfg.max_frames_per_batch, seed)?;
        let (mut total, mut l2r, mut r2l) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let batch: Vec<&Prepared<T>> = idx.iter().map(|&i| &train[i]).collect();
            let rep = self.train_batch(&batch)?;
            log::debug!(
                "step {} loss {:.4} lr {:.3e} |g| {:.3}",
                self.adam.step(),
                rep.loss,
                rep.lr,
                rep.grad_norm
            );
            total += rep.loss;
            l2r += rep.l2r.unwrap_or(0.0);
            r2l += rep.r2l.unwrap_or(0.0);
        }
        self.epoch += 1;
        let n = batches.len().max(1) as f64;
        let has = |d| self.cfg.mode.directions().contains(&d);
        let dev_cer = if dev.is_empty() {
            f64::NAN
        } else {
            corpus_cer(&self.model, dev, &greedy(self.cfg.mode))?
        };
        let report = EpochReport {
            epoch: self.epoch,
            step: self.adam.step(),
            train_loss: total / n,
            l2r: has(Direction::L2R).then_some(l2r / n),
            r2l: has(Direction::R2L).then_some(r2l / n),
            dev_cer,
        };
        log::info!(
            "epoch {} step {} loss {:.4} (l2r {} r2l {}) dev cer {:.4}",
            report.epoch,
            report.step,
            report.train_loss,
            report.l2r.map_or("-".into(), |v| format!("{v:.4}")),
            report.r2l.map_or("-".into(), |v| format!("{v:.4}")),
            report.dev_cer
        );
        self.best_dev_cer = self.best_dev_cer.min(report.dev_cer);
        if let Some(path) = &self.curve {
            append_line(
                path,
                &format!(
                    "{},{},{},{},{}",
                    report.epoch,
                    report.step,
                    exact(report.train_loss),
                    exact(report.dev_cer),
                    exact(self.best_dev_cer)
                ),
            )?;
        }
        Ok(report)
    }
}

fn annotate(e: Error, epoch: usize, step: u64) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("{detail} (epoch {epoch}, step {step})"),
        },
        other => other,
    }
}

/// Teacher-forced joint loss of a packed batch inside `g`. L2R streams of all
/// utterances come first, then the R2L streams.
pub fn batch_loss<'a, T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<'a, T>,
    batch: &[&'a Prepared<T>],
    mode: TrainMode,
    loss: &LossConfig,
) -> Result<JointLoss> {
    let feats = batch
        .iter()
        .map(|p| g.borrow(&p.input))
        .collect::<Result<Vec<_>>>()?;
    let enc = model.encode_batch(g, &feats)?;
    let streams: Vec<(DecoderStream, DecoderStream)> = batch
        .iter()
        .map(|p| build_streams(&p.reference))
        .collect::<Result<_>>()?;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut dirs = Vec::new();
    for &dir in mode.directions() {
        for (i, (l, r)) in streams.iter().enumerate() {
            let s = if dir == Direction::L2R { l } else { r };
            inputs.push(StreamInput {
                tokens: &s.input,
                encoder_segment: i,
            });
            targets.extend_from_slice(&s.target);
            dirs.extend(std::iter::repeat_n(dir, s.target.len()));
        }
    }
    let out = model.decode_batch(g, &enc, &inputs)?;
    let keep = vec![true; targets.len()];
    joint_loss(g, out.logits, &targets, &dirs, &keep, &mode.loss(loss))
}

/// Beam-1 search in the directions a model was trained for.
pub fn greedy(mode: TrainMode) -> DecodeConfig {
    DecodeConfig {
        beam_size: 1,
        mode: mode.search_mode(),
        ..DecodeConfig::default()
    }
}

/// Corpus-level CER: total edit distance over total reference length.
pub fn corpus_cer<T: Scalar>(model: &Model<T>, utts: &[Prepared<T>], cfg: &DecodeConfig) -> Result<f64> {
    let (mut edits, mut len) = (0usize, 0usize);
    for u in utts {
        let out = decode_input(model, &u.input, cfg)?;
        edits += edit_distance(&u.reference, &out.tokens);
        len += u.reference.len();
    }
    if len == 0 {
        return Err(Error::Data("CER of an empty reference set".into()));
    }
    Ok(edits as f64 / len as f64)
}

/// Epoch numbers of the `n` lowest dev CERs (earlier epoch wins ties),
/// returned in ascending epoch order.
pub fn select_best(history: &[EpochReport], n: usize) -> Vec<usize> {
    let mut ranked: Vec<&EpochReport> = history.iter().filter(|r| !r.dev_cer.is_nan()).collect();
    ranked.sort_by(|a, b| a.dev_cer.total_cmp(&b.dev_cer).then(a.epoch.cmp(&b.epoch)));
    let mut best: Vec<usize> = ranked.iter().take(n).map(|r| r.epoch).collect();
    best.sort_unstable();
    best
}

/// Everything a finished run produced.
pub struct FitOutcome<T: Scalar> {
    /// Parameters averaged over the best epochs.
    pub model: Model<T>,
    pub history: Vec<EpochReport>,
    pub averaged_epochs: Vec<usize>,
    pub averaged: Checkpoint,
}

/// Trains for the configured epochs, keeping one checkpoint per epoch, then
/// averages the best `average_best` of them by dev CER. When `out_dir` is
/// given, per-epoch checkpoints, `curve.csv` and `averaged.ckpt` are written
/// there.
pub fn fit<T: Scalar>(
    model: Model<T>,
    train: &[Prepared<T>],
    dev: &[Prepared<T>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome<T>> {
    if train.is_empty() {
        return Err(Error::Data("no training utterances".into()));
    }
    let model_cfg = model.config().clone();
    let mut trainer = Trainer::new(model, cfg.clone())?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        trainer = trainer.with_curve(dir.join("curve.csv"))?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let report = trainer.train_epoch(train, dev)?;
        let ckpt = trainer.model().to_checkpoint(run_metadata(cfg, &report));
        if let Some(dir) = out_dir {
            ckpt.save(dir.join(format!("epoch{:03}.ckpt", report.epoch)))?;
        }
        snapshots.push((format!("epoch{:03}", report.epoch), ckpt));
        history.push(report);
    }
    if history.is_empty() {
        return Err(Error::Config("training needs at least one epoch".into()));
    }
    let mut averaged_epochs = select_best(&history, cfg.average_best);
    if averaged_epochs.is_empty() {
        averaged_epochs.push(history.len());
    }
    let chosen: Vec<(String, Checkpoint)> = averaged_epochs
        .iter()
        .map(|&e| snapshots[e - 1].clone())
        .collect();
    let averaged = Checkpoint::average(&chosen)?;
    let mut model = Model::new(model_cfg)?;
    model.load_weights(&averaged)?;
    if let Some(dir) = out_dir {
        averaged.save(dir.join("averaged.ckpt"))?;
    }
    Ok(FitOutcome {
        model,
        history,
        averaged_epochs,
        averaged,
    })
}

fn run_metadata(cfg: &TrainConfig, report: &EpochReport) -> Vec<(String, String)> {
    vec![
        ("mode".into(), cfg.mode.label().into()),
        ("seed".into(), cfg.seed.to_string()),
        ("epoch".into(), report.epoch.to_string()),
        ("step".into(), report.step.to_string()),
        ("dev_cer".into(), exact(report.dev_cer)),
    ]
}

/// Converts a 1-row logits tensor into log-probabilities; helper for tests
/// and diagnostics.
pub fn row_log_probs<T: Scalar>(logits: &Tensor<T>, row: usize) -> Vec<f64> {
    let xs: Vec<f64> = logits.row(row).iter().map(|x| x.as_f64()).collect();
    crate::tensor::log_softmax(&xs)
}
