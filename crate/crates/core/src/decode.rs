//! Beam search in one direction and split across both directions.
//!
//! Pruning compares raw cumulative log-probabilities; the length penalty is
//! applied only when ranking finished hypotheses. All orderings are total
//! (score, then last token id, then length, then token sequence) so results
//! are reproducible bit for bit.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::data::{is_special, EOS};
use crate::error::{Error, Result};
use crate::model::{Direction, EncoderOutput, Model, NextToken};
use crate::numfmt::sig6;
use crate::tensor::{Scalar, Tensor};

/// Source of next-token log-probabilities for a batch of prefixes. Each prefix
/// starts with its direction's start token.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<NextToken>>;
}

pub struct ModelScorer<'m, T: Scalar> {
    pub model: &'m Model<T>,
    pub encoder: &'m EncoderOutput<T>,
    pub capture_attention: bool,
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<NextToken>> {
        self.model
            .next_token(self.encoder, prefixes, self.capture_attention)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyForm {
    /// `((5 + |Y|) / 6)^exponent`
    Gnmt,
    /// `|Y|^exponent`
    Power,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SearchMode {
    L2R,
    R2L,
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub penalty_form: PenaltyForm,
    /// Output length limit beyond the encoder frame count.
    pub extra_length: usize,
    pub capture_attention: bool,
    pub mode: SearchMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 2,
            length_penalty: 0.6,
            penalty_form: PenaltyForm::Gnmt,
            extra_length: 10,
            capture_attention: false,
            mode: SearchMode::Bidirectional,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(Error::Config(format!(
                "length penalty exponent {} must be >= 0",
                self.length_penalty
            )));
        }
        Ok(())
    }

    /// Body-token limit for an input of `frames` encoder frames.
    pub fn max_length(&self, frames: usize, max_positions: usize) -> usize {
        (frames + self.extra_length).min(max_positions.saturating_sub(1)).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub direction: Direction,
    /// Emitted tokens in stream order, start token and `<EOS>` excluded.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, `<EOS>` included once finished.
    pub score: f64,
    pub finished: bool,
    /// Finished because the length limit was reached.
    pub forced: bool,
    /// One cross-attention row per emitted token (including `<EOS>`).
    pub attention: Option<Vec<Vec<f64>>>,
}

impl Hypothesis {
    fn start(direction: Direction, capture: bool) -> Self {
        Hypothesis {
            direction,
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
            forced: false,
            attention: capture.then(Vec::new),
        }
    }

    /// Emitted length `|Y|`: body tokens plus `<EOS>` when finished.
    pub fn emitted_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Tokens in natural (left-to-right) order.
    pub fn natural_tokens(&self) -> Vec<usize> {
        match self.direction {
            Direction::L2R => self.tokens.clone(),
            Direction::R2L => self.tokens.iter().rev().copied().collect(),
        }
    }

    fn prefix(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.tokens.len() + 1);
        p.push(self.direction.start_token());
        p.extend_from_slice(&self.tokens);
        p
    }
}

pub fn length_penalty(len: usize, exponent: f64, form: PenaltyForm) -> f64 {
    match form {
        PenaltyForm::Gnmt => ((5.0 + len as f64) / 6.0).powf(exponent),
        PenaltyForm::Power => (len as f64).powf(exponent),
    }
}

pub fn length_penalized_score(hyp: &Hypothesis, cfg: &DecodeConfig) -> f64 {
    hyp.score / length_penalty(hyp.emitted_len().max(1), cfg.length_penalty, cfg.penalty_form)
}

/// Ranking of finished hypotheses: higher penalized score, then L2R before
/// R2L, then lower last token, then shorter, then lexicographic tokens.
fn rank(a: &Hypothesis, b: &Hypothesis, cfg: &DecodeConfig) -> Ordering {
    length_penalized_score(b, cfg)
        .total_cmp(&length_penalized_score(a, cfg))
        .then(a.direction.cmp(&b.direction))
        .then(a.tokens.last().cmp(&b.tokens.last()))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then(a.tokens.cmp(&b.tokens))
}

struct Candidate {
    parent: usize,
    token: usize,
    score: f64,
    forced: bool,
}

/// Beam search in one direction. Every alive hypothesis is expanded over all
/// emittable tokens; the best `beam` candidates survive, and those ending in
/// `<EOS>` move to the finished pool. Search stops once no hypothesis is alive.
/// At `max_len` body tokens only `<EOS>` may follow (forced finish).
///
/// Returns the finished pool ranked by length-penalized score.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &S,
    direction: Direction,
    beam: usize,
    max_len: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let vocab = scorer.vocab_size();
    let mut alive = vec![Hypothesis::start(direction, cfg.capture_attention)];
    let mut done = Vec::new();
    while !alive.is_empty() {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(Hypothesis::prefix).collect();
        let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
        let scores = scorer.score(&refs)?;
        if scores.len() != alive.len() {
            return Err(Error::shape("beam_search", "scorer returned the wrong number of rows"));
        }
        let mut cands = Vec::new();
        for (p, (hyp, next)) in alive.iter().zip(&scores).enumerate() {
            if next.log_probs.len() != vocab {
                return Err(Error::shape("beam_search", "scorer row does not cover the vocabulary"));
            }
            let at_cap = hyp.tokens.len() >= max_len;
            for (tok, &lp) in next.log_probs.iter().enumerate() {
                let allowed = if at_cap { tok == EOS } else { tok == EOS || !is_special(tok) };
                if !allowed {
                    continue;
                }
                if lp.is_nan() {
                    return Err(Error::numeric("beam_search", format!("NaN log-probability for token {tok}")));
                }
                if lp == f64::NEG_INFINITY && !at_cap {
                    continue;
                }
                cands.push(Candidate {
                    parent: p,
                    token: tok,
                    score: hyp.score + lp,
                    forced: at_cap,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.token.cmp(&b.token))
                .then(alive[a.parent].tokens.cmp(&alive[b.parent].tokens))
        });
        cands.truncate(beam);
        let mut next_alive = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &alive[c.parent];
            let mut attention = parent.attention.clone();
            if let (Some(trace), Some(row)) = (attention.as_mut(), scores[c.parent].attention.as_ref()) {
                trace.push(row.clone());
            }
            let mut tokens = parent.tokens.clone();
            let finished = c.token == EOS;
            if !finished {
                tokens.push(c.token);
            }
            let hyp = Hypothesis {
                direction,
                tokens,
                score: c.score,
                finished,
                forced: finished && c.forced,
                attention,
            };
            if finished {
                done.push(hyp);
            } else {
                next_alive.push(hyp);
            }
        }
        alive = next_alive;
    }
    done.sort_by(|a, b| rank(a, b, cfg));
    Ok(done)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BidirectionalResult {
    /// Winning hypothesis as searched (stream order).
    pub best: Hypothesis,
    /// Winner in natural order (reversed when it came from the R2L beam).
    pub tokens: Vec<usize>,
    pub winner: Direction,
    /// Every finished hypothesis of both directions, ranked.
    pub pool: Vec<Hypothesis>,
}

/// Beams per direction for a total beam `n`: L2R gets `⌈n/2⌉`, R2L `⌊n/2⌋`,
/// and `n = 1` runs one beam in each direction.
pub fn split_beam(n: usize) -> (usize, usize) {
    (n.div_ceil(2).max(1), (n / 2).max(1))
}

/// Splits the beam across both directions, pools the finished hypotheses and
/// keeps the best by length-penalized score (ties go to L2R).
pub fn beam_search_bidirectional<S: StepScorer + ?Sized>(
    scorer: &S,
    max_len: usize,
    cfg: &DecodeConfig,
) -> Result<BidirectionalResult> {
    let (nl, nr) = split_beam(cfg.beam_size);
    let mut pool = beam_search(scorer, Direction::L2R, nl, max_len, cfg)?;
    pool.extend(beam_search(scorer, Direction::R2L, nr, max_len, cfg)?);
    pool.sort_by(|a, b| rank(a, b, cfg));
    let best = pool
        .first()
        .cloned()
        .ok_or_else(|| Error::numeric("beam_search", "no hypothesis finished"))?;
    Ok(BidirectionalResult {
        tokens: best.natural_tokens(),
        winner: best.direction,
        best,
        pool,
    })
}

/// Runs the configured search mode on one model input.
pub fn decode_input<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    cfg: &DecodeConfig,
) -> Result<BidirectionalResult> {
    cfg.validate()?;
    if input.is_empty() {
        return Err(Error::shape("decode", "empty encoder input"));
    }
    let encoder = model.encode(input)?;
    let scorer = ModelScorer {
        model,
        encoder: &encoder,
        capture_attention: cfg.capture_attention,
    };
    let max_len = cfg.max_length(encoder.frame_count(), model.config().max_positions);
    let single = |direction| -> Result<BidirectionalResult> {
        let pool = beam_search(&scorer, direction, cfg.beam_size, max_len, cfg)?;
        let best = pool
            .first()
            .cloned()
            .ok_or_else(|| Error::numeric("beam_search", "no hypothesis finished"))?;
        Ok(BidirectionalResult {
            tokens: best.natural_tokens(),
            winner: direction,
            best,
            pool,
        })
    };
    match cfg.mode {
        SearchMode::L2R => single(Direction::L2R),
        SearchMode::R2L => single(Direction::R2L),
        SearchMode::Bidirectional => beam_search_bidirectional(&scorer, max_len, cfg),
    }
}

/// Head-averaged final-layer cross-attention, one row per emitted token in
/// emission order.
pub fn capture_attention(hyp: &Hypothesis) -> Result<Tensor<f64>> {
    let rows = hyp.attention.as_ref().ok_or(Error::AttentionNotCaptured)?;
    let frames = rows.first().map(Vec::len).ok_or(Error::AttentionNotCaptured)?;
    Tensor::new([rows.len(), frames], rows.concat())
}

/// Fraction of consecutive steps whose argmax frame moves forward (L2R) or
/// backward (R2L), ties counting as monotone.
pub fn monotone_fraction(attention: &Tensor<f64>, direction: Direction) -> f64 {
    let peaks: Vec<usize> = (0..attention.rows())
        .map(|r| {
            attention
                .row(r)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    if peaks.len() < 2 {
        return 1.0;
    }
    let good = peaks
        .windows(2)
        .filter(|w| match direction {
            Direction::L2R => w[1] >= w[0],
            Direction::R2L => w[1] <= w[0],
        })
        .count();
    good as f64 / (peaks.len() - 1) as f64
}

/// Attention matrix as CSV, one row per emitted token.
pub fn attention_csv(attention: &Tensor<f64>) -> String {
    let mut out = String::new();
    for r in 0..attention.rows() {
        let row: Vec<String> = attention.row(r).iter().map(|&v| sig6(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Plain (P2) grayscale image, width = frames, height = tokens, scaled so the
/// largest weight maps to 255.
pub fn attention_pgm(attention: &Tensor<f64>) -> String {
    let max = attention.data().iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = format!("P2\n{} {}\n255\n", attention.cols(), attention.rows());
    for r in 0..attention.rows() {
        let row: Vec<String> = attention
            .row(r)
            .iter()
            .map(|&v| ((v * scale).round() as u32).min(255).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Hypothesis dump: `rank,direction,penalized_score,raw_score,tokens`.
pub fn hypotheses_csv(pool: &[Hypothesis], cfg: &DecodeConfig, render: impl Fn(&[usize]) -> String) -> String {
    let mut out = String::from("rank,direction,penalized_score,raw_score,tokens\n");
    for (i, h) in pool.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            h.direction,
            sig6(length_penalized_score(h, cfg)),
            sig6(h.score),
            render(&h.natural_tokens())
        );
    }
    out
}
