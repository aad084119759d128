//! Losses, curriculum, Adam and checkpoints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{PredictionPolicy, Strategy};
use crate::error::{Error, Result};
use crate::masks::{fasterdan_mask, windowed_mask};
use crate::nncore::ops::{cross_entropy, Scalar};
use crate::nncore::{sequential_positions, Grads, Model, ModelConfig, ParamSet, Position};
use crate::synthdoc::{render_document, DocumentSample, GrayImage, SynthConfig};
use crate::textcodec::{PaddedTargets, TokenId, TokenSeq, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dan,
    Wdan,
    Mtdan,
    Meta,
    Fasterdan,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Dan,
        Variant::Wdan,
        Variant::Mtdan,
        Variant::Meta,
        Variant::Fasterdan,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Dan => "dan",
            Variant::Wdan => "wdan",
            Variant::Mtdan => "mtdan",
            Variant::Meta => "meta",
            Variant::Fasterdan => "fasterdan",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Linear ramp of the maximum number of lines per synthetic page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Curriculum {
    pub start_lines: usize,
    pub end_lines: usize,
    /// Fraction of the run over which the cap grows.
    pub ramp_fraction: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            start_lines: 1,
            end_lines: 6,
            ramp_fraction: 0.5,
        }
    }
}

impl Curriculum {
    /// Line cap at `step` of a `total`-step run, rounded half up.
    pub fn lines_at(&self, step: u64, total: u64) -> usize {
        let ramp = self.ramp_fraction * total as f64;
        if ramp <= 0.0 || step as f64 >= ramp {
            return self.end_lines;
        }
        let span = self.end_lines as f64 - self.start_lines as f64;
        let v = self.start_lines as f64 + span * step as f64 / ramp;
        (v + 0.5).floor().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Queries per iteration `w`.
    pub window: usize,
    /// Projection heads `m`.
    pub heads: usize,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub curriculum: Curriculum,
    /// Probability that a training page is synthesized on the fly rather
    /// than drawn from the dataset.
    pub synthetic_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dan,
            window: 1,
            heads: 1,
            lr: 1e-4,
            steps: 1000,
            batch_size: 4,
            curriculum: Curriculum::default(),
            synthetic_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.window < 1 || self.heads < 1 {
            return bad("window and heads must be at least 1".into());
        }
        let (w, m) = (self.window, self.heads);
        match self.variant {
            Variant::Dan | Variant::Fasterdan if w != 1 || m != 1 => {
                return bad(format!(
                    "{} uses w = m = 1, got w = {w}, m = {m}",
                    self.variant
                ))
            }
            Variant::Wdan if m != 1 => return bad(format!("wdan uses m = 1, got {m}")),
            Variant::Mtdan if w != 1 => return bad(format!("mtdan uses w = 1, got {w}")),
            _ => {}
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.synthetic_fraction) {
            return bad(format!(
                "synthetic fraction {} is outside [0, 1]",
                self.synthetic_fraction
            ));
        }
        let c = &self.curriculum;
        if c.start_lines < 1
            || c.end_lines < c.start_lines
            || !(0.0..=1.0).contains(&c.ramp_fraction)
        {
            return bad(format!(
                "invalid curriculum: {} to {} lines over {}",
                c.start_lines, c.end_lines, c.ramp_fraction
            ));
        }
        Ok(())
    }

    /// Greedy decoding strategy matching the training variant.
    pub fn strategy(&self, newline: TokenId) -> Strategy {
        let policy = PredictionPolicy::Static { k: self.heads };
        match self.variant {
            Variant::Dan => Strategy::Dan,
            Variant::Wdan => Strategy::Wdan { w: self.window },
            Variant::Mtdan => Strategy::Mtdan { policy },
            Variant::Meta => Strategy::Meta {
                w: self.window,
                m: self.heads,
                policy,
            },
            Variant::Fasterdan => Strategy::Fasterdan { newline },
        }
    }
}

/// Cross-entropy averaged over every (query, head) pair, with gradients
/// accumulated into `grads` scaled by `weight` when given.
#[allow(clippy::too_many_arguments)]
fn supervised<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    ids: &[TokenId],
    positions: &[Position],
    mask: &crate::masks::AttentionMask,
    targets: &[Vec<TokenId>],
    dropout: Option<&mut dyn RngCore>,
    grads: Option<(&mut Grads<T>, T)>,
) -> Result<T> {
    let heads = targets.len();
    let rows = ids.len();
    let a = model.config().num_classes;
    let c = model.config().channels;
    let (outputs, cache) = model.forward_train(image, ids, positions, mask, dropout)?;
    let scores = model.project_heads(&outputs, heads)?;
    let n = T::from_f64((rows * heads) as f64);
    let weight = grads.as_ref().map_or(T::zero(), |g| g.1) / n;
    let mut d_scores = vec![vec![T::zero(); rows * a]; heads];
    let mut total = T::zero();
    for r in 0..rows {
        for (k, tk) in targets.iter().enumerate() {
            let logits = &scores[(r * heads + k) * a..(r * heads + k + 1) * a];
            total += cross_entropy(
                logits,
                tk[r] as usize,
                weight,
                &mut d_scores[k][r * a..(r + 1) * a],
            );
        }
    }
    if let Some((g, _)) = grads {
        let mut d_out = vec![T::zero(); rows * c];
        for (k, d) in d_scores.iter().enumerate() {
            model.head_backward(k, &outputs, d, &mut d_out, g);
        }
        model.backward(&cache, &d_out, g);
    }
    Ok(total / n)
}

fn model_ids(config: &ModelConfig) -> (TokenId, TokenId) {
    (
        config.num_classes as TokenId,
        (config.num_classes - 1) as TokenId,
    )
}

/// Teacher-forcing inputs and per-head targets of the windowed multi-token loss.
pub fn meta_targets(
    config: &ModelConfig,
    y: &[TokenId],
    w: usize,
    m: usize,
) -> Result<(PaddedTargets, TokenSeq, Vec<Vec<TokenId>>)> {
    let (sos, eos) = model_ids(config);
    let padded = PaddedTargets::with_ids(sos, eos, y, w, m)?;
    let input = padded.decoder_input();
    let targets = (0..m)
        .map(|k| {
            (0..input.len())
                .map(|p| padded.target_at(p + w + k))
                .collect()
        })
        .collect();
    Ok((padded, input, targets))
}

/// Windowed multi-token loss of one page with ground truth `y` (no `<e>`).
pub fn loss_meta<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    y: &[TokenId],
    w: usize,
    m: usize,
    dropout: Option<&mut dyn RngCore>,
    grads: Option<(&mut Grads<T>, T)>,
) -> Result<T> {
    if m > model.num_heads() {
        return Err(Error::InvalidArgument(format!(
            "loss uses {m} heads, model has {}",
            model.num_heads()
        )));
    }
    let (_, input, targets) = meta_targets(model.config(), y, w, m)?;
    let positions = sequential_positions(input.len());
    let mask = windowed_mask(input.len(), w);
    supervised(
        model, image, &input, &positions, &mask, &targets, dropout, grads,
    )
}

/// Scores `[position][head][class]` of every teacher-forced query.
pub fn teacher_forced_scores<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    y: &[TokenId],
    w: usize,
    m: usize,
) -> Result<Vec<T>> {
    let (_, input, _) = meta_targets(model.config(), y, w, m)?;
    let memory = model.prepare_memory(image)?;
    let out = model.decoder_forward(
        &memory,
        &input,
        &sequential_positions(input.len()),
        &windowed_mask(input.len(), w),
    )?;
    model.project_heads(&out, m)
}

/// Two-stage loss: line starts autoregressively, then every line from its
/// first character, all in one forward.
pub fn loss_fasterdan<T: Scalar>(
    model: &Model<T>,
    image: &GrayImage,
    lines: &[TokenSeq],
    dropout: Option<&mut dyn RngCore>,
    grads: Option<(&mut Grads<T>, T)>,
) -> Result<T> {
    if lines.is_empty() || lines.iter().any(|l| l.is_empty()) {
        return Err(Error::InvalidArgument(
            "two-stage training needs non-empty line annotations".into(),
        ));
    }
    let (sos, eos) = model_ids(model.config());
    let firsts: TokenSeq = lines.iter().map(|l| l[0]).collect();
    let (ids, positions, layout) = crate::decode::twostage_sequence(sos, &firsts, lines);
    let mut targets = firsts.clone();
    targets.push(eos);
    for l in lines {
        targets.extend_from_slice(&l[1..]);
        targets.push(eos);
    }
    let mask = fasterdan_mask(&layout)?;
    supervised(
        model,
        image,
        &ids,
        &positions,
        &mask,
        &[targets],
        dropout,
        grads,
    )
}

/// A page ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: GrayImage,
    pub tokens: TokenSeq,
    pub lines: Vec<TokenSeq>,
}

impl TrainSample {
    pub fn from_document(vocab: &Vocab, doc: &DocumentSample) -> Result<Self> {
        Self::new(
            vocab,
            doc.image.clone(),
            &doc.text,
            doc.lines.iter().map(|l| l.text.as_str()),
        )
    }

    pub fn new<'a>(
        vocab: &Vocab,
        image: GrayImage,
        text: &str,
        lines: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        Ok(Self {
            image,
            tokens: vocab.encode(text)?,
            lines: lines
                .into_iter()
                .map(|l| vocab.encode(l))
                .collect::<Result<_>>()?,
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub lines_cap: usize,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub config: TrainConfig,
    pub synth: Option<SynthConfig>,
    dataset: Vec<TrainSample>,
    adam: Adam,
    step: u64,
    rng: ChaCha8Rng,
    grads: Vec<f32>,
}

impl Trainer {
    /// `synth` enables on-the-fly pages; at least one source must be present.
    pub fn new(
        model: Model<f32>,
        vocab: Vocab,
        config: TrainConfig,
        synth: Option<SynthConfig>,
        dataset: Vec<TrainSample>,
    ) -> Result<Self> {
        config.validate()?;
        if model.config().num_classes != vocab.num_classes() {
            return Err(Error::VocabMismatch(format!(
                "model predicts {} classes, vocabulary has {}",
                model.config().num_classes,
                vocab.num_classes()
            )));
        }
        if config.heads > model.num_heads() {
            return Err(Error::InvalidArgument(format!(
                "training uses {} heads, model has {}",
                config.heads,
                model.num_heads()
            )));
        }
        if dataset.is_empty() && synth.is_none() {
            return Err(Error::EmptyTrainingSplit);
        }
        if let Some(s) = &synth {
            s.validate()?;
            if let Some(c) = s.alphabet_text().chars().find(|&c| !vocab.contains(c)) {
                return Err(Error::VocabMismatch(format!(
                    "generator emits {c:?} outside the vocabulary"
                )));
            }
        }
        let len = model.params().len();
        Ok(Self {
            adam: Adam::new(config.lr, len),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            grads: vec![0.0; len],
            step: 0,
            model,
            vocab,
            config,
            synth,
            dataset,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Continues counting from `step` (optimizer moments start fresh).
    pub fn resume_at(&mut self, step: u64) {
        self.step = step;
        self.rng =
            ChaCha8Rng::seed_from_u64(self.config.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }

    pub fn lines_cap(&self) -> usize {
        self.config
            .curriculum
            .lines_at(self.step, self.config.steps)
    }

    /// Draws the next batch from the synthetic generator and the dataset.
    pub fn next_batch(&mut self) -> Result<Vec<TrainSample>> {
        let cap = self.lines_cap();
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let synthetic = match &self.synth {
                None => false,
                Some(_) if self.dataset.is_empty() => true,
                Some(_) => self.rng.gen_bool(self.config.synthetic_fraction),
            };
            if synthetic {
                let mut cfg = self.synth.clone().expect("synthetic source");
                cfg.max_lines = cap.max(1);
                cfg.min_lines = cfg.min_lines.min(cfg.max_lines);
                let doc = render_document(&cfg, &mut self.rng)?;
                batch.push(TrainSample::from_document(&self.vocab, &doc)?);
            } else {
                let i = self.rng.gen_range(0..self.dataset.len());
                batch.push(self.dataset[i].clone());
            }
        }
        Ok(batch)
    }

    /// Mean loss of `batch` with one Adam update.
    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<StepLog> {
        let lines_cap = self.lines_cap();
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        let weight = 1.0 / batch.len() as f32;
        let mut total = 0.0;
        let (w, m) = (self.config.window, self.config.heads);
        for sample in batch {
            let mut g = Grads::new(self.model.params(), &mut self.grads);
            let dropout: &mut dyn RngCore = &mut self.rng;
            let loss = match self.config.variant {
                Variant::Fasterdan => loss_fasterdan(
                    &self.model,
                    &sample.image,
                    &sample.lines,
                    Some(dropout),
                    Some((&mut g, weight)),
                )?,
                _ => loss_meta(
                    &self.model,
                    &sample.image,
                    &sample.tokens,
                    w,
                    m,
                    Some(dropout),
                    Some((&mut g, weight)),
                )?,
            };
            total += loss as f64 * weight as f64;
        }
        if !total.is_finite() || self.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: self.step,
                loss: total,
            });
        }
        self.adam
            .step(self.model.params_mut().flat_mut(), &self.grads);
        let log = StepLog {
            step: self.step,
            loss: total,
            lr: self.adam.lr,
            lines_cap,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs the remaining steps, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let batch = self.next_batch()?;
            let log = self.train_step(&batch)?;
            on_step(&log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            train: self.config.clone(),
            synth: self.synth.clone(),
            step: self.step,
        }
    }
}

/// Copies every tensor of `source` whose name and shape match into `model`;
/// returns the names copied.
pub fn transfer_weights(model: &mut Model<f32>, source: &ParamSet<f32>) -> Vec<String> {
    let mut copied = Vec::new();
    for t in source.tensors() {
        let matches = model
            .params()
            .find(&t.name)
            .is_some_and(|d| d.shape == t.shape);
        if matches {
            let src = source.tensor_by_name(&t.name).expect("listed tensor");
            model
                .params_mut()
                .tensor_by_name_mut(&t.name)
                .expect("checked tensor")
                .copy_from_slice(src);
            copied.push(t.name.clone());
        }
    }
    copied
}

pub const CHECKPOINT_JSON: &str = "model.json";
pub const CHECKPOINT_BIN: &str = "model.bin";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into `model.bin`.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: u32,
    model: ModelConfig,
    vocab: Vocab,
    train: TrainConfig,
    #[serde(default)]
    synth: Option<SynthConfig>,
    step: u64,
    tensors: Vec<TensorEntry>,
}

/// Trained model with everything needed to decode or resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub train: TrainConfig,
    pub synth: Option<SynthConfig>,
    pub step: u64,
}

impl Checkpoint {
    /// Writes `model.json` and `model.bin` (little-endian f32) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = self.model.params();
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT,
            model: self.model.config().clone(),
            vocab: self.vocab.clone(),
            train: self.train.clone(),
            synth: self.synth.clone(),
            step: self.step,
            tensors: params
                .tensors()
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset: t.offset * 4,
                })
                .collect(),
        };
        let json_path = dir.join(CHECKPOINT_JSON);
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&json_path, e))?;
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        let bin_path = dir.join(CHECKPOINT_BIN);
        let bytes: Vec<u8> = params.flat().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json_path = dir.join(CHECKPOINT_JSON);
        let raw = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&raw).map_err(|e| Error::json(&json_path, e))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format {}",
                manifest.format
            )));
        }
        if manifest.model.num_classes != manifest.vocab.num_classes() {
            return Err(Error::VocabMismatch(format!(
                "model predicts {} classes, stored vocabulary has {}",
                manifest.model.num_classes,
                manifest.vocab.num_classes()
            )));
        }
        let bin_path = dir.join(CHECKPOINT_BIN);
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!(
                "{} is not a whole number of f32",
                bin_path.display()
            )));
        }
        let mut params = ParamSet::default();
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            let end = t.offset + 4 * n;
            if t.offset % 4 != 0 || end > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} lies outside {}",
                    t.name,
                    bin_path.display()
                )));
            }
            let values = bytes[t.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.add(t.name.clone(), &t.shape, values);
        }
        let model = Model::from_params(manifest.model, params)?;
        Ok(Self {
            model,
            vocab: manifest.vocab,
            train: manifest.train,
            synth: manifest.synth,
            step: manifest.step,
        })
    }
}
