//! Greedy decoding strategies and prediction policies.
//!
//! Every single-sequence strategy is an instance of [`decode_meta`]: the
//! sequence starts with `w` start tokens, each iteration runs the decoder
//! over the whole sequence, reads the outputs of the last `w` queries, keeps
//! the first head of the first `w - 1` queries plus up to `m` heads of the
//! last one, and commits the kept tokens as one new attention block.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{
    blocks_mask, causal_mask, fasterdan_mask, AttentionMask, BlockAssignment, LineLayout,
};
use crate::nncore::ops::{softmax_in_place, Scalar};
use crate::nncore::{sequential_positions, Memory, Model, Position};
use crate::synthdoc::GrayImage;
use crate::textcodec::{TokenId, TokenSeq};

pub const DEFAULT_CAP: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictionPolicy {
    /// Always keep the first `k` heads of the last query.
    Static { k: usize },
    /// Keep heads while their confidence reaches `tau`; head 0 is always kept.
    Dynamic { tau: f64 },
}

impl PredictionPolicy {
    fn validate(&self, heads: usize) -> Result<()> {
        match *self {
            PredictionPolicy::Static { k } if k < 1 || k > heads => Err(Error::InvalidArgument(
                format!("static policy keeps {k} heads, decoder uses {heads}"),
            )),
            PredictionPolicy::Dynamic { tau } if !(0.0..=1.0).contains(&tau) => Err(
                Error::InvalidArgument(format!("confidence threshold {tau} is outside [0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PredictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictionPolicy::Static { k } => write!(f, "static k={k}"),
            PredictionPolicy::Dynamic { tau } => write!(f, "dynamic tau={tau}"),
        }
    }
}

/// Number of heads kept: 1 plus the longest prefix of `confidences[1..]`
/// whose values all reach `tau`.
pub fn dynamic_keep(confidences: &[f32], tau: f64) -> usize {
    1 + confidences
        .iter()
        .skip(1)
        .take_while(|&&c| c as f64 >= tau)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeCaps {
    /// Maximum emitted tokens (excluding `<e>`).
    pub max_tokens: usize,
    pub max_iterations: usize,
}

impl Default for DecodeCaps {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_CAP,
            max_iterations: DEFAULT_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    TokenCap,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Query positions `[start, end)` whose outputs were read.
    pub window: [usize; 2],
    /// Tokens kept per query in the window (per line stream for the two-stage decoder).
    pub kept: Vec<usize>,
    /// Head confidences per query (softmax maxima).
    pub confidences: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub emitted: TokenSeq,
    pub iterations: usize,
    pub per_iteration: Vec<IterationRecord>,
    pub wall_time: f64,
    pub stopped_by: StopReason,
}

impl DecodeTrace {
    pub fn kept_total(&self) -> usize {
        self.per_iteration
            .iter()
            .map(|r| r.kept.iter().sum::<usize>())
            .sum()
    }
}

/// A decoding strategy with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum Strategy {
    Dan,
    Wdan {
        w: usize,
    },
    Mtdan {
        policy: PredictionPolicy,
    },
    Meta {
        w: usize,
        m: usize,
        policy: PredictionPolicy,
    },
    /// `newline` joins the lines recognized in parallel.
    Fasterdan {
        newline: TokenId,
    },
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Dan => write!(f, "dan"),
            Strategy::Wdan { w } => write!(f, "wdan w={w}"),
            Strategy::Mtdan { policy } => write!(f, "mtdan {policy}"),
            Strategy::Meta { w, m, policy } => write!(f, "meta w={w} m={m} {policy}"),
            Strategy::Fasterdan { .. } => write!(f, "fasterdan"),
        }
    }
}

pub fn decode<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    strategy: &Strategy,
    caps: &DecodeCaps,
) -> Result<DecodeTrace> {
    match *strategy {
        Strategy::Dan => decode_dan(model, image, caps),
        Strategy::Wdan { w } => decode_wdan(model, image, w, caps),
        Strategy::Mtdan { policy } => decode_mtdan(model, image, policy, caps),
        Strategy::Meta { w, m, policy } => decode_meta(model, image, w, m, policy, caps),
        Strategy::Fasterdan { newline } => decode_fasterdan(model, image, newline, caps),
    }
}

/// Source of head scores for the decoding loops: the network, or a scripted
/// stand-in in tests.
pub trait Scorer {
    type Value: Scalar;

    fn num_heads(&self) -> usize;

    /// Number of output classes; the last one is `<e>`.
    fn num_classes(&self) -> usize;

    /// Scores `[query][head][class]` of heads `0..heads` for each index in
    /// `queries`, after one forward over the whole sequence.
    fn score(
        &mut self,
        ids: &[TokenId],
        positions: &[Position],
        mask: &AttentionMask,
        queries: &[usize],
        heads: usize,
    ) -> Result<Vec<Self::Value>>;
}

/// A model bound to the encoded memory of one image.
pub struct ModelScorer<'a, T: Scalar> {
    model: &'a Model<T>,
    memory: Memory<T>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, image: &GrayImage) -> Result<Self> {
        Ok(Self {
            model,
            memory: model.prepare_memory(image)?,
        })
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    type Value = T;

    fn num_heads(&self) -> usize {
        self.model.num_heads()
    }

    fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    fn score(
        &mut self,
        ids: &[TokenId],
        positions: &[Position],
        mask: &AttentionMask,
        queries: &[usize],
        heads: usize,
    ) -> Result<Vec<T>> {
        let c = self.model.config().channels;
        let out = self
            .model
            .decoder_forward(&self.memory, ids, positions, mask)?;
        let mut rows = Vec::with_capacity(queries.len() * c);
        for &q in queries {
            rows.extend_from_slice(&out[q * c..(q + 1) * c]);
        }
        self.model.project_heads(&rows, heads)
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax and softmax confidence of one score vector.
fn pick<T: Scalar>(scores: &[T]) -> (TokenId, f32) {
    let best = argmax(scores);
    let mut p = scores.to_vec();
    let conf = softmax_in_place(&mut p);
    (best as TokenId, conf.as_f64() as f32)
}

pub fn decode_meta<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    w: usize,
    m_used: usize,
    policy: PredictionPolicy,
    caps: &DecodeCaps,
) -> Result<DecodeTrace> {
    let start = Instant::now();
    let mut scorer = ModelScorer::new(model, image)?;
    let mut trace = decode_meta_with(&mut scorer, w, m_used, policy, caps)?;
    trace.wall_time = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// The windowed multi-token schedule over any [`Scorer`].
pub fn decode_meta_with<S: Scorer>(
    scorer: &mut S,
    w: usize,
    m_used: usize,
    policy: PredictionPolicy,
    caps: &DecodeCaps,
) -> Result<DecodeTrace> {
    let start = Instant::now();
    if w < 1 {
        return Err(Error::InvalidArgument(
            "window size must be at least 1".into(),
        ));
    }
    if m_used < 1 || m_used > scorer.num_heads() {
        return Err(Error::InvalidArgument(format!(
            "cannot use {m_used} heads, model has {}",
            scorer.num_heads()
        )));
    }
    policy.validate(m_used)?;
    let classes = scorer.num_classes();
    let eos = (classes - 1) as TokenId;
    let sos = classes as TokenId;

    let mut seq: TokenSeq = vec![sos; w];
    let mut blocks = BlockAssignment::uniform(w, w);
    let mut records = Vec::new();
    let stopped_by = loop {
        if records.len() >= caps.max_iterations {
            break StopReason::IterationCap;
        }
        if seq.len() - w >= caps.max_tokens {
            break StopReason::TokenCap;
        }
        let first = seq.len() - w;
        let queries: Vec<usize> = (first..seq.len()).collect();
        let scores = scorer.score(
            &seq,
            &sequential_positions(seq.len()),
            &blocks_mask(&blocks),
            &queries,
            m_used,
        )?;
        let stride = m_used * classes;

        let mut new_tokens = Vec::with_capacity(w + m_used);
        let mut kept = Vec::with_capacity(w);
        let mut confidences = Vec::with_capacity(w);
        for q in 0..w {
            let row = &scores[q * stride..(q + 1) * stride];
            let heads: Vec<(TokenId, f32)> = row.chunks(classes).map(pick).collect();
            let conf: Vec<f32> = heads.iter().map(|h| h.1).collect();
            let keep = if q + 1 < w {
                1
            } else {
                match policy {
                    PredictionPolicy::Static { k } => k,
                    PredictionPolicy::Dynamic { tau } => dynamic_keep(&conf, tau),
                }
            };
            new_tokens.extend(heads[..keep].iter().map(|h| h.0));
            kept.push(keep);
            confidences.push(if q + 1 < w { conf[..1].to_vec() } else { conf });
        }
        records.push(IterationRecord {
            window: [first, seq.len()],
            kept,
            confidences,
        });
        blocks.push_block(new_tokens.len());
        seq.extend_from_slice(&new_tokens);
        if let Some(pos) = seq[w..].iter().position(|&t| t == eos) {
            seq.truncate(w + pos);
            break StopReason::Eos;
        }
    };
    let mut emitted = seq.split_off(w);
    let stopped_by = if emitted.len() > caps.max_tokens {
        emitted.truncate(caps.max_tokens);
        StopReason::TokenCap
    } else {
        stopped_by
    };
    Ok(DecodeTrace {
        emitted,
        iterations: records.len(),
        per_iteration: records,
        wall_time: start.elapsed().as_secs_f64(),
        stopped_by,
    })
}

/// One token per iteration from the first head under a causal mask.
pub fn decode_dan<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    caps: &DecodeCaps,
) -> Result<DecodeTrace> {
    decode_meta(model, image, 1, 1, PredictionPolicy::Static { k: 1 }, caps)
}

/// `w` queries per iteration, each predicting one token with the first head.
pub fn decode_wdan<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    w: usize,
    caps: &DecodeCaps,
) -> Result<DecodeTrace> {
    decode_meta(model, image, w, 1, PredictionPolicy::Static { k: 1 }, caps)
}

/// One query per iteration predicting up to `m` tokens.
pub fn decode_mtdan<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    policy: PredictionPolicy,
    caps: &DecodeCaps,
) -> Result<DecodeTrace> {
    decode_meta(model, image, 1, model.num_heads(), policy, caps)
}

/// Line-start positions and line streams of a two-stage sequence.
pub(crate) fn twostage_sequence(
    sos: TokenId,
    first_chars: &[TokenId],
    streams: &[TokenSeq],
) -> (TokenSeq, Vec<Position>, LineLayout) {
    let mut ids = vec![sos];
    ids.extend_from_slice(first_chars);
    let mut positions = sequential_positions(ids.len());
    let mut layout = LineLayout {
        n_stage1: ids.len(),
        line_of: Vec::new(),
        pos_in_line: Vec::new(),
    };
    for (line, stream) in streams.iter().enumerate() {
        for (offset, &t) in stream.iter().enumerate() {
            ids.push(t);
            positions.push(Position::Line { line, offset });
            layout.line_of.push(line);
            layout.pos_in_line.push(offset);
        }
    }
    (ids, positions, layout)
}

/// Two-stage decoding: first characters of every line autoregressively, then
/// all lines completed in parallel.
pub fn decode_fasterdan<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    newline: TokenId,
    caps: &DecodeCaps,
) -> Result<DecodeTrace> {
    let start = Instant::now();
    let mut scorer = ModelScorer::new(model, image)?;
    let mut trace = decode_fasterdan_with(&mut scorer, newline, caps)?;
    trace.wall_time = start.elapsed().as_secs_f64();
    Ok(trace)
}

pub fn decode_fasterdan_with<S: Scorer>(
    scorer: &mut S,
    newline: TokenId,
    caps: &DecodeCaps,
) -> Result<DecodeTrace> {
    let start = Instant::now();
    let classes = scorer.num_classes();
    let eos = (classes - 1) as TokenId;
    let sos = classes as TokenId;
    let mut records = Vec::new();

    // stage 1: line starts
    let mut firsts: TokenSeq = Vec::new();
    let mut stopped = None;
    loop {
        if records.len() >= caps.max_iterations {
            stopped = Some(StopReason::IterationCap);
            break;
        }
        if firsts.len() >= caps.max_tokens {
            stopped = Some(StopReason::TokenCap);
            break;
        }
        let mut ids = vec![sos];
        ids.extend_from_slice(&firsts);
        let n = ids.len();
        let scores = scorer.score(&ids, &sequential_positions(n), &causal_mask(n), &[n - 1], 1)?;
        let (tok, conf) = pick(&scores);
        records.push(IterationRecord {
            window: [n - 1, n],
            kept: vec![1],
            confidences: vec![vec![conf]],
        });
        if tok == eos {
            break;
        }
        firsts.push(tok);
    }

    // stage 2: parallel line completion
    let mut streams: Vec<TokenSeq> = firsts.iter().map(|&f| vec![f]).collect();
    let mut done = vec![false; streams.len()];
    let emitted_len =
        |s: &[TokenSeq]| s.iter().map(Vec::len).sum::<usize>() + s.len().saturating_sub(1);
    while stopped.is_none() && done.iter().any(|d| !d) {
        if records.len() >= caps.max_iterations {
            stopped = Some(StopReason::IterationCap);
            break;
        }
        if emitted_len(&streams) >= caps.max_tokens {
            stopped = Some(StopReason::TokenCap);
            break;
        }
        let (ids, positions, layout) = twostage_sequence(sos, &firsts, &streams);
        let mask = fasterdan_mask(&layout)?;
        let mut active = Vec::new();
        let mut queries = Vec::new();
        let mut end = layout.n_stage1;
        for (l, stream) in streams.iter().enumerate() {
            end += stream.len();
            if !done[l] {
                active.push(l);
                queries.push(end - 1);
            }
        }
        let scores = scorer.score(&ids, &positions, &mask, &queries, 1)?;
        let mut kept = vec![0; streams.len()];
        let mut confidences = vec![Vec::new(); streams.len()];
        for (row, &l) in scores.chunks(classes).zip(&active) {
            let (tok, conf) = pick(row);
            confidences[l] = vec![conf];
            kept[l] = 1;
            if tok == eos {
                done[l] = true;
            } else {
                streams[l].push(tok);
            }
        }
        records.push(IterationRecord {
            window: [layout.n_stage1, ids.len()],
            kept,
            confidences,
        });
    }

    let mut emitted = TokenSeq::new();
    for (i, s) in streams.iter().enumerate() {
        if i > 0 {
            emitted.push(newline);
        }
        emitted.extend_from_slice(s);
    }
    emitted.truncate(caps.max_tokens);
    Ok(DecodeTrace {
        emitted,
        iterations: records.len(),
        per_iteration: records,
        wall_time: start.elapsed().as_secs_f64(),
        stopped_by: stopped.unwrap_or(StopReason::Eos),
    })
}
