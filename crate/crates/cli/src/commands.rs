//! Subcommand implementations. Each returns a report so harnesses can use the
//! numbers directly instead of scraping stdout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use stbd_core::data::{
    fit_cmvn, generate_toy_corpus, prepare, read_split, split_corpus, write_split, CmvnStats,
    Prepared, Utterance, Vocabulary, DOWNSAMPLE,
};
use stbd_core::decode::{
    attention_csv, attention_pgm, capture_attention, decode_input, hypotheses_csv,
    length_penalized_score, monotone_fraction, BidirectionalResult, DecodeConfig, SearchMode,
};
use stbd_core::model::{Checkpoint, Direction, Model};
use stbd_core::numfmt::{exact, sig6};
use stbd_core::train::{corpus_cer, fit, greedy, EpochReport, TrainMode};
use stbd_core::{data::edit_distance, Error};

use crate::config::{parse_search_mode, search_mode_label, RunConfig};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// A generated corpus directory: vocabulary, CMVN statistics and splits.
pub struct Dataset {
    pub dir: PathBuf,
    pub vocab: Vocabulary,
    pub cmvn: CmvnStats,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(dir.join("vocab.txt"))
            .with_context(|| format!("loading vocabulary from {}", dir.display()))?;
        let cmvn = CmvnStats::load(dir.join("cmvn.bin"))
            .with_context(|| format!("loading CMVN statistics from {}", dir.display()))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            vocab,
            cmvn,
        })
    }

    pub fn split(&self, name: &str) -> Result<Vec<Utterance>> {
        if !SPLITS.contains(&name) {
            return Err(Error::Usage(format!("unknown split '{name}' (expected train, dev or test)")).into());
        }
        read_split(&self.dir, name, &self.vocab).with_context(|| format!("reading split {name}"))
    }

    pub fn prepared(&self, name: &str) -> Result<Vec<Prepared<f32>>> {
        Ok(prepare(&self.split(name)?, &self.cmvn)?)
    }

    /// Width of one stacked encoder input frame.
    pub fn input_dim(&self) -> usize {
        self.cmvn.dim() * DOWNSAMPLE
    }

    fn check_model(&self, model: &Model<f32>) -> Result<()> {
        let c = model.config();
        if c.vocab_size != self.vocab.len() || c.input_dim != self.input_dim() {
            return Err(Error::Config(format!(
                "checkpoint expects vocabulary {} and input width {}, corpus has {} and {}",
                c.vocab_size,
                c.input_dim,
                self.vocab.len(),
                self.input_dim()
            ))
            .into());
        }
        Ok(())
    }
}

/// Writes the toy corpus: `vocab.txt`, `{train,dev,test}.csv`, `feats/` and
/// `cmvn.bin` (fitted on train). Returns the split sizes.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<[usize; 3]> {
    let corpus = generate_toy_corpus(&cfg.corpus_config())?;
    let splits = split_corpus(corpus.utterances, cfg.seed);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    corpus.vocab.save(out.join("vocab.txt"))?;
    for name in SPLITS {
        write_split(out, name, splits.get(name)?, &corpus.vocab)?;
    }
    fit_cmvn(&splits.train)?.save(out.join("cmvn.bin"))?;
    let counts = [splits.train.len(), splits.dev.len(), splits.test.len()];
    log::info!(
        "wrote {} utterances ({} / {} / {}) to {}",
        counts.iter().sum::<usize>(),
        counts[0],
        counts[1],
        counts[2],
        out.display()
    );
    Ok(counts)
}

pub struct TrainSummary {
    pub history: Vec<EpochReport>,
    pub averaged_epochs: Vec<usize>,
    pub averaged_dev_cer: f64,
    pub checkpoint: PathBuf,
    pub param_count: usize,
}

/// Trains one model. `out` receives `config.toml`, `epochNNN.ckpt`,
/// `curve.csv` and `averaged.ckpt`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    let ds = Dataset::open(data)?;
    let train = ds.prepared("train")?;
    let dev = ds.prepared("dev")?;
    let model_cfg = cfg.model_config(ds.input_dim(), ds.vocab.len())?;
    let tc = cfg.train_config()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let model = Model::<f32>::new(model_cfg)?;
    let param_count = model.param_count();
    log::info!(
        "training {} ({} parameters) on {} utterances for {} epochs",
        tc.mode,
        param_count,
        train.len(),
        tc.epochs
    );
    let outcome = fit(model, &train, &dev, &tc, Some(out))?;
    let averaged_dev_cer = corpus_cer(&outcome.model, &dev, &greedy(tc.mode))?;
    let mut averaged = outcome.averaged;
    averaged.metadata.insert("mode".into(), tc.mode.label().into());
    averaged.metadata.insert("seed".into(), cfg.seed.to_string());
    averaged.metadata.insert("dev_cer".into(), exact(averaged_dev_cer));
    let checkpoint = out.join("averaged.ckpt");
    averaged.save(&checkpoint)?;
    log::info!(
        "averaged epochs {:?}: dev CER {:.4}",
        outcome.averaged_epochs,
        averaged_dev_cer
    );
    Ok(TrainSummary {
        history: outcome.history,
        averaged_epochs: outcome.averaged_epochs,
        averaged_dev_cer,
        checkpoint,
        param_count,
    })
}

#[derive(Clone, Debug)]
pub struct DecodeRequest {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub split: String,
    /// Overrides the config's decode mode.
    pub mode: Option<SearchMode>,
    pub beam: Option<usize>,
    /// Best-hypothesis CSV; a full-precision score sidecar is written next to it.
    pub out: Option<PathBuf>,
    /// Directory for one ranked hypothesis pool per utterance.
    pub hyps_dir: Option<PathBuf>,
    pub jobs: usize,
}

#[derive(Clone, Debug)]
pub struct DecodedUtterance {
    pub id: String,
    pub reference: Vec<usize>,
    pub result: BidirectionalResult,
}

#[derive(Clone, Debug)]
pub struct DecodeReport {
    pub mode: SearchMode,
    pub beam: usize,
    pub cer: f64,
    /// Fraction of utterances whose winner came from the R2L beam.
    pub backward_fraction: f64,
    pub forward_fraction: f64,
    pub utterances: Vec<DecodedUtterance>,
}

impl DecodeReport {
    pub fn summary(&self) -> String {
        format!(
            "decoded {} utterances ({}, beam {}): CER {:.4}; backward-decoded fraction {:.4}, forward {:.4}",
            self.utterances.len(),
            search_mode_label(self.mode),
            self.beam,
            self.cer,
            self.backward_fraction,
            self.forward_fraction
        )
    }
}

/// Default search for a checkpoint: its training mode decides for
/// single-direction models.
fn default_mode(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<SearchMode> {
    match ckpt.metadata.get("mode").map(|m| m.parse::<TrainMode>()) {
        Some(Ok(TrainMode::L2R)) => Ok(SearchMode::L2R),
        Some(Ok(TrainMode::R2L)) => Ok(SearchMode::R2L),
        _ => Ok(parse_search_mode(&cfg.decode.mode)?),
    }
}

fn load_model(path: &Path) -> Result<(Model<f32>, Checkpoint)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = Model::from_checkpoint(&ckpt).with_context(|| format!("restoring {}", path.display()))?;
    Ok((model, ckpt))
}

fn run_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("starting decode workers")?;
    Ok(pool.install(f))
}

/// Decodes a whole split. Output rows are ordered by utterance id.
pub fn decode_split(
    model: &Model<f32>,
    utts: &[Prepared<f32>],
    dcfg: &DecodeConfig,
    jobs: usize,
) -> Result<Vec<DecodedUtterance>> {
    let mut order: Vec<&Prepared<f32>> = utts.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let results = run_pool(jobs, || {
        order
            .par_iter()
            .map(|u| {
                decode_input(model, &u.input, dcfg)
                    .map(|result| DecodedUtterance {
                        id: u.id.clone(),
                        reference: u.reference.clone(),
                        result,
                    })
                    .map_err(anyhow::Error::from)
                    .with_context(|| format!("decoding {}", u.id))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(results)
}

fn report(mode: SearchMode, beam: usize, utterances: Vec<DecodedUtterance>) -> Result<DecodeReport> {
    let (mut edits, mut len, mut backward) = (0usize, 0usize, 0usize);
    for u in &utterances {
        edits += edit_distance(&u.reference, &u.result.tokens);
        len += u.reference.len();
        backward += usize::from(u.result.winner == Direction::R2L);
    }
    if utterances.is_empty() || len == 0 {
        return Err(Error::Data("nothing to decode".into()).into());
    }
    let n = utterances.len() as f64;
    Ok(DecodeReport {
        mode,
        beam,
        cer: edits as f64 / len as f64,
        backward_fraction: backward as f64 / n,
        forward_fraction: (utterances.len() - backward) as f64 / n,
        utterances,
    })
}

pub fn cmd_decode(cfg: &RunConfig, req: &DecodeRequest) -> Result<DecodeReport> {
    let ds = Dataset::open(&req.data)?;
    let (model, ckpt) = load_model(&req.checkpoint)?;
    ds.check_model(&model)?;
    let utts = ds.prepared(&req.split)?;
    let mut dcfg = cfg.decode_config()?;
    dcfg.mode = match req.mode {
        Some(m) => m,
        None => default_mode(cfg, &ckpt)?,
    };
    if let Some(b) = req.beam {
        dcfg.beam_size = b;
    }
    dcfg.validate()?;
    let decoded = decode_split(&model, &utts, &dcfg, req.jobs)?;
    if let Some(path) = &req.out {
        write_decode_csv(path, &decoded, &dcfg, &ds.vocab)?;
    }
    if let Some(dir) = &req.hyps_dir {
        fs::create_dir_all(dir)?;
        for u in &decoded {
            let text = hypotheses_csv(&u.result.pool, &dcfg, |t| ds.vocab.decode(t));
            fs::write(dir.join(format!("{}.csv", u.id)), text)?;
        }
    }
    report(dcfg.mode, dcfg.beam_size, decoded)
}

/// `utt_id,direction,penalized_score,raw_score,forced,hypothesis` plus a
/// `<name>.scores.csv` sidecar with the scores at full precision.
fn write_decode_csv(path: &Path, decoded: &[DecodedUtterance], dcfg: &DecodeConfig, vocab: &Vocabulary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["utt_id", "direction", "penalized_score", "raw_score", "forced", "hypothesis"])?;
    let mut side = csv::Writer::from_path(sidecar(path))?;
    side.write_record(["utt_id", "penalized_score", "raw_score"])?;
    for u in decoded {
        let best = &u.result.best;
        let pen = length_penalized_score(best, dcfg);
        w.write_record([
            u.id.as_str(),
            best.direction.label(),
            &sig6(pen),
            &sig6(best.score),
            &best.forced.to_string(),
            &vocab.decode(&u.result.tokens),
        ])?;
        side.write_record([u.id.as_str(), &exact(pen), &exact(best.score)])?;
    }
    w.flush()?;
    side.flush()?;
    Ok(())
}

pub fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("decode");
    path.with_file_name(format!("{stem}.scores.csv"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub beam: usize,
    pub cer: f64,
    pub backward_fraction: f64,
}

/// Decodes the split once per beam size and writes `beam,cer,backward_fraction`.
pub fn cmd_beam_sweep(cfg: &RunConfig, req: &DecodeRequest, beams: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(beams.len());
    for &beam in beams {
        let r = cmd_decode(
            cfg,
            &DecodeRequest {
                beam: Some(beam),
                out: None,
                hyps_dir: None,
                ..req.clone()
            },
        )?;
        log::info!("{}", r.summary());
        rows.push(SweepRow {
            beam,
            cer: r.cer,
            backward_fraction: r.backward_fraction,
        });
    }
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(["beam", "cer", "backward_fraction"])?;
    for r in &rows {
        w.write_record([r.beam.to_string(), sig6(r.cer), sig6(r.backward_fraction)])?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub edits: usize,
    pub ref_len: usize,
    pub cer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cer: f64,
    pub rows: Vec<EvalRow>,
}

/// Corpus CER of `hypotheses` against `references`, both keyed by
/// utterance id. Every id must appear on both sides.
pub fn evaluate(
    references: &BTreeMap<String, Vec<String>>,
    hypotheses: &BTreeMap<String, Vec<String>>,
) -> Result<EvalReport> {
    let missing: Vec<&str> = references
        .keys()
        .filter(|k| !hypotheses.contains_key(*k))
        .map(String::as_str)
        .collect();
    let extra: Vec<&str> = hypotheses
        .keys()
        .filter(|k| !references.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Data(format!(
            "utterance ids do not align; missing hypotheses: [{}]; unknown ids: [{}]",
            missing.join(", "),
            extra.join(", ")
        ))
        .into());
    }
    let mut rows = Vec::with_capacity(references.len());
    let (mut edits, mut len) = (0, 0);
    for (id, r) in references {
        if r.is_empty() {
            return Err(Error::Data(format!("{id}: empty reference")).into());
        }
        let e = edit_distance(r, &hypotheses[id]);
        edits += e;
        len += r.len();
        rows.push(EvalRow {
            id: id.clone(),
            edits: e,
            ref_len: r.len(),
            cer: e as f64 / r.len() as f64,
        });
    }
    if len == 0 {
        return Err(Error::Data("no references to score".into()).into());
    }
    Ok(EvalReport {
        cer: edits as f64 / len as f64,
        rows,
    })
}

fn read_column_pairs(path: &Path, text_column: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{} has no `{name}` column", path.display())))
    };
    let (id_col, text_col) = (col("utt_id")?, col(text_column)?);
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let tokens = rec[text_col].split_whitespace().map(str::to_string).collect();
        if out.insert(rec[id_col].to_string(), tokens).is_some() {
            return Err(Error::Data(format!("{}: duplicate id {}", path.display(), &rec[id_col])).into());
        }
    }
    Ok(out)
}

/// Scores a decode CSV against a split manifest; optionally writes the
/// per-utterance table `utt_id,ref_len,edits,cer`.
pub fn cmd_eval(data: &Path, split: &str, hyps: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let refs = read_column_pairs(&data.join(format!("{split}.csv")), "transcript")?;
    let hyps = read_column_pairs(hyps, "hypothesis")?;
    let report = evaluate(&refs, &hyps)?;
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["utt_id", "ref_len", "edits", "cer"])?;
        for r in &report.rows {
            w.write_record([r.id.clone(), r.ref_len.to_string(), r.edits.to_string(), sig6(r.cer)])?;
        }
        w.flush()?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct AttentionReport {
    pub direction: Direction,
    /// Tokens in stream order.
    pub tokens: Vec<usize>,
    /// `emitted tokens × encoder frames`, rows in emission order.
    pub attention: stbd_core::tensor::Tensor<f64>,
    pub monotone_fraction: f64,
}

/// Decodes one utterance in each direction with attention capture and
/// writes `<id>.<dir>.csv` / `<id>.<dir>.pgm` heatmaps into `out`.
pub fn cmd_inspect_attention(
    cfg: &RunConfig,
    data: &Path,
    split: &str,
    checkpoint: &Path,
    utt: &str,
    out: Option<&Path>,
) -> Result<Vec<AttentionReport>> {
    let ds = Dataset::open(data)?;
    let (model, _) = load_model(checkpoint)?;
    ds.check_model(&model)?;
    let utts = ds.prepared(split)?;
    let u = utts
        .iter()
        .find(|u| u.id == utt)
        .ok_or_else(|| Error::Data(format!("utterance {utt} not found in split {split}")))?;
    inspect_attention(&model, u, &cfg.decode_config()?, out)
}

pub fn inspect_attention(
    model: &Model<f32>,
    u: &Prepared<f32>,
    base: &DecodeConfig,
    out: Option<&Path>,
) -> Result<Vec<AttentionReport>> {
    let mut reports = Vec::with_capacity(2);
    for (mode, dir) in [(SearchMode::L2R, Direction::L2R), (SearchMode::R2L, Direction::R2L)] {
        let dcfg = DecodeConfig {
            mode,
            capture_attention: true,
            ..base.clone()
        };
        let result = decode_input(model, &u.input, &dcfg)?;
        let attention = capture_attention(&result.best)?;
        let frac = monotone_fraction(&attention, dir);
        if let Some(dir_path) = out {
            fs::create_dir_all(dir_path)?;
            fs::write(dir_path.join(format!("{}.{dir}.csv", u.id)), attention_csv(&attention))?;
            fs::write(dir_path.join(format!("{}.{dir}.pgm", u.id)), attention_pgm(&attention))?;
        }
        reports.push(AttentionReport {
            direction: dir,
            tokens: result.best.tokens.clone(),
            attention,
            monotone_fraction: frac,
        });
    }
    Ok(reports)
}

/// Averages checkpoints. With `best = Some(n)` only the `n` inputs with the
/// lowest `dev_cer` metadata take part (earlier inputs win ties).
pub fn cmd_average(inputs: &[PathBuf], best: Option<usize>, out: &Path) -> Result<Checkpoint> {
    let mut loaded = Vec::with_capacity(inputs.len());
    for p in inputs {
        let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
        loaded.push((p.display().to_string(), ckpt));
    }
    if let Some(n) = best {
        let cer = |c: &Checkpoint| -> Result<f64> {
            c.metadata
                .get("dev_cer")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data("checkpoint lacks dev_cer metadata".into()).into())
        };
        let mut ranked = Vec::with_capacity(loaded.len());
        for (i, (_, c)) in loaded.iter().enumerate() {
            ranked.push((cer(c)?, i));
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = ranked.iter().take(n).map(|r| r.1).collect();
        keep.sort_unstable();
        loaded = keep.into_iter().map(|i| loaded[i].clone()).collect();
    }
    let avg = Checkpoint::average(&loaded)?;
    avg.save(out)?;
    Ok(avg)
}
