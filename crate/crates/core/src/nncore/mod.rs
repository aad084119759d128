//! Convolutional encoder, positional encodings, transformer decoder and the
//! multi-token projection heads, with a hand-written backward pass.
//!
//! The model is generic over the scalar type: training and inference run in
//! `f32`, gradient checks in `f64`.

pub mod ops;
pub mod params;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::synthdoc::GrayImage;
use crate::textcodec::TokenId;
use ops::{ConvShape, LayerNormCache, Scalar, View, ViewMut};
pub use params::{Grads, ParamSet, TensorInfo, P};

/// Strides (height, width) of the five encoder stages: total (32, 8).
pub const ENCODER_STRIDES: [(usize, usize); 5] = [(2, 2), (2, 2), (2, 2), (2, 1), (2, 1)];

pub const MIN_IMAGE_HEIGHT: usize = 32;
pub const MIN_IMAGE_WIDTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width shared by the encoder output and the decoder.
    pub channels: usize,
    pub layers: usize,
    pub attn_heads: usize,
    pub ff_width: usize,
    /// Number of projection heads (tokens predicted per query).
    pub heads: usize,
    /// Predictable classes: characters plus `<e>`.
    pub num_classes: usize,
    pub dropout: f64,
    /// Output widths of the first four encoder stages; the fifth outputs `channels`.
    pub encoder_widths: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            layers: 2,
            attn_heads: 4,
            ff_width: 256,
            heads: 1,
            num_classes: 0,
            dropout: 0.1,
            encoder_widths: [16, 32, 64, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return bad(format!(
                "channels must be even and positive, got {}",
                self.channels
            ));
        }
        if self.attn_heads == 0 || !self.channels.is_multiple_of(self.attn_heads) {
            return bad(format!(
                "channels ({}) must be divisible by attention heads ({})",
                self.channels, self.attn_heads
            ));
        }
        if self.layers == 0 || self.heads == 0 || self.ff_width == 0 {
            return bad("layers, heads and ff_width must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.encoder_widths.contains(&0) {
            return bad("encoder widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn embedding_rows(&self) -> usize {
        self.num_classes + 1
    }

    fn stage_widths(&self) -> [(usize, usize); 5] {
        let w = self.encoder_widths;
        [
            (1, w[0]),
            (w[0], w[1]),
            (w[1], w[2]),
            (w[2], w[3]),
            (w[3], self.channels),
        ]
    }
}

/// Where a query sits: plain sequence index, or (line, offset) for the
/// parallel line streams of the two-stage decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Seq(usize),
    Line { line: usize, offset: usize },
}

pub fn sequential_positions(n: usize) -> Vec<Position> {
    (0..n).map(Position::Seq).collect()
}

/// 1-D sinusoidal encoding (interleaved sin/cos, base 10000).
pub fn pe1d<T: Scalar>(pos: usize, dim: usize) -> Vec<T> {
    let mut v = vec![T::zero(); dim];
    ops::sinusoid(pos as f64, dim, &mut v);
    v
}

/// 2-D encoding: first half of the channels encodes the row, second half the column.
pub fn pe2d<T: Scalar>(row: usize, col: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut v = vec![T::zero(); dim];
    ops::sinusoid(row as f64, half, &mut v[..half]);
    ops::sinusoid(col as f64, dim - half, &mut v[half..]);
    v
}

fn position_encoding<T: Scalar>(pos: Position, dim: usize, out: &mut [T]) {
    match pos {
        Position::Seq(i) => ops::sinusoid(i as f64, dim, out),
        Position::Line { line, offset } => {
            let half = dim / 2;
            ops::sinusoid(line as f64, half, &mut out[..half]);
            ops::sinusoid(offset as f64, dim - half, &mut out[half..]);
        }
    }
}

/// Encoder output laid out `height x width x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn at(&self, row: usize, col: usize) -> &[T] {
        let i = (row * self.width + col) * self.channels;
        &self.values[i..i + self.channels]
    }

    /// Adds the 2-D positional encoding in place.
    pub fn add_pe2d(&mut self) {
        for y in 0..self.height {
            for x in 0..self.width {
                let pe = pe2d::<T>(y, x, self.channels);
                let i = (y * self.width + x) * self.channels;
                for (v, p) in self.values[i..i + self.channels].iter_mut().zip(pe) {
                    *v += p;
                }
            }
        }
    }

    /// Row-major sequence of `height * width` vectors; element (r, c) lands at `r * width + c`.
    pub fn flatten(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattened image features plus the per-layer cross-attention keys/values.
#[derive(Debug, Clone)]
pub struct Memory<T> {
    pub values: Vec<T>,
    pub len: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    kv: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: P,
    b: P,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: P,
    b: P,
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1: Norm,
    qkv: Linear,
    self_out: Linear,
    ln2: Norm,
    cross_q: Linear,
    cross_kv: Linear,
    cross_out: Linear,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Indices {
    convs: Vec<Linear>,
    embed: P,
    layers: Vec<LayerIdx>,
    ln_f: Norm,
    heads: Vec<Linear>,
}

enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.channels;
    let mut v = Vec::new();
    for (i, (cin, cout)) in cfg.stage_widths().into_iter().enumerate() {
        let fan_in = (cin * 9) as f64;
        v.push((
            format!("enc.conv{i}.weight"),
            vec![cout, cin, 3, 3],
            Init::Uniform((6.0 / fan_in).sqrt()),
        ));
        v.push((format!("enc.conv{i}.bias"), vec![cout], Init::Zeros));
    }
    v.push((
        "dec.embedding".into(),
        vec![cfg.embedding_rows(), c],
        Init::Uniform(3f64.sqrt()),
    ));
    let xavier = |a: usize, b: usize| Init::Uniform((6.0 / (a + b) as f64).sqrt());
    for l in 0..cfg.layers {
        let p = format!("dec.layer{l}");
        let mut lin = |name: &str, out: usize, inp: usize, init: Init| {
            v.push((format!("{p}.{name}.weight"), vec![out, inp], init));
            v.push((format!("{p}.{name}.bias"), vec![out], Init::Zeros));
        };
        lin("self_attn.qkv", 3 * c, c, xavier(c, c));
        lin("self_attn.out", c, c, xavier(c, c));
        lin("cross_attn.q", c, c, xavier(c, c));
        lin("cross_attn.kv", 2 * c, c, xavier(c, c));
        lin("cross_attn.out", c, c, xavier(c, c));
        lin(
            "ff1",
            cfg.ff_width,
            c,
            Init::Uniform((6.0 / c as f64).sqrt()),
        );
        lin("ff2", c, cfg.ff_width, xavier(cfg.ff_width, c));
        for n in ["ln1", "ln2", "ln3"] {
            v.push((format!("{p}.{n}.gain"), vec![c], Init::Ones));
            v.push((format!("{p}.{n}.bias"), vec![c], Init::Zeros));
        }
    }
    v.push(("dec.ln_f.gain".into(), vec![c], Init::Ones));
    v.push(("dec.ln_f.bias".into(), vec![c], Init::Zeros));
    for k in 0..cfg.heads {
        v.push((
            format!("head{k}.weight"),
            vec![cfg.num_classes, c],
            xavier(c, cfg.num_classes),
        ));
        v.push((format!("head{k}.bias"), vec![cfg.num_classes], Init::Zeros));
    }
    v
}

fn indices<T: Scalar>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<Indices> {
    let find = |name: String| -> Result<P> {
        params
            .tensors()
            .iter()
            .position(|t| t.name == name)
            .map(P)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let lin = |prefix: String| -> Result<Linear> {
        Ok(Linear {
            w: find(format!("{prefix}.weight"))?,
            b: find(format!("{prefix}.bias"))?,
        })
    };
    let norm = |prefix: String| -> Result<Norm> {
        Ok(Norm {
            g: find(format!("{prefix}.gain"))?,
            b: find(format!("{prefix}.bias"))?,
        })
    };
    let convs = (0..5)
        .map(|i| lin(format!("enc.conv{i}")))
        .collect::<Result<_>>()?;
    let layers = (0..cfg.layers)
        .map(|l| {
            let p = format!("dec.layer{l}");
            Ok(LayerIdx {
                ln1: norm(format!("{p}.ln1"))?,
                qkv: lin(format!("{p}.self_attn.qkv"))?,
                self_out: lin(format!("{p}.self_attn.out"))?,
                ln2: norm(format!("{p}.ln2"))?,
                cross_q: lin(format!("{p}.cross_attn.q"))?,
                cross_kv: lin(format!("{p}.cross_attn.kv"))?,
                cross_out: lin(format!("{p}.cross_attn.out"))?,
                ln3: norm(format!("{p}.ln3"))?,
                ff1: lin(format!("{p}.ff1"))?,
                ff2: lin(format!("{p}.ff2"))?,
            })
        })
        .collect::<Result<_>>()?;
    let heads = (0..cfg.heads)
        .map(|k| lin(format!("head{k}")))
        .collect::<Result<_>>()?;
    Ok(Indices {
        convs,
        embed: find("dec.embedding".into())?,
        layers,
        ln_f: norm("dec.ln_f".into())?,
        heads,
    })
}

struct EncoderCache<T> {
    shapes: Vec<ConvShape>,
    cols: Vec<Vec<T>>,
    outs: Vec<Vec<T>>,
}

struct LayerCache<T> {
    ln1: LayerNormCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    self_probs: Vec<T>,
    self_ctx: Vec<T>,
    drop1: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    c: Vec<T>,
    cq: Vec<T>,
    cross_probs: Vec<T>,
    cross_ctx: Vec<T>,
    drop2: Option<Vec<T>>,
    ln3: LayerNormCache<T>,
    f: Vec<T>,
    h: Vec<T>,
    drop3: Option<Vec<T>>,
}

struct DecoderCache<T> {
    ids: Vec<TokenId>,
    layers: Vec<LayerCache<T>>,
    ln_f: LayerNormCache<T>,
}

/// Everything the backward pass needs from one training forward.
pub struct ForwardCache<T> {
    encoder: EncoderCache<T>,
    memory: Memory<T>,
    decoder: DecoderCache<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamSet<T>,
    idx: Indices,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model; identical values for every scalar type
    /// given the same seed (up to rounding).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let values = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Uniform(a) => (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-a..a) as f32 as f64))
                    .collect(),
            };
            params.add(name, &shape, values);
        }
        let idx = indices(&config, &params)?;
        Ok(Self {
            config,
            params,
            idx,
        })
    }

    /// Wraps existing parameters, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.tensors().len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.tensors().len()
            )));
        }
        for (name, shape, _) in &expected {
            match params.find(name) {
                Some(t) if &t.shape == shape => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: shape {:?} does not match expected {shape:?}",
                        t.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        let idx = indices(&config, &params)?;
        Ok(Self {
            config,
            params,
            idx,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_heads(&self) -> usize {
        self.config.heads
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            idx: self.idx.clone(),
        }
    }

    fn p(&self, p: P) -> &[T] {
        self.params.get(p)
    }

    fn image_input(image: &GrayImage) -> Result<Vec<T>> {
        if image.height < MIN_IMAGE_HEIGHT || image.width < MIN_IMAGE_WIDTH {
            return Err(Error::ImageTooSmall {
                height: image.height,
                width: image.width,
            });
        }
        Ok(image
            .pixels
            .iter()
            .map(|&p| T::from_f64((255 - p) as f64 / 255.0))
            .collect())
    }

    fn encoder_forward(
        &self,
        image: &GrayImage,
        keep: bool,
    ) -> Result<(FeatureGrid<T>, Option<EncoderCache<T>>)> {
        let mut x = Self::image_input(image)?;
        let (mut h, mut w) = (image.height, image.width);
        let mut cache = EncoderCache {
            shapes: Vec::new(),
            cols: Vec::new(),
            outs: Vec::new(),
        };
        let widths = self.config.stage_widths();
        for (i, &(sh, sw)) in ENCODER_STRIDES.iter().enumerate() {
            let shape = ConvShape {
                c_in: widths[i].0,
                c_out: widths[i].1,
                h,
                w,
                stride_h: sh,
                stride_w: sw,
            };
            let conv = self.idx.convs[i];
            let col = ops::im2col(&shape, &x);
            let mut out = ops::conv_from_cols(&shape, &col, self.p(conv.w), self.p(conv.b));
            if i + 1 < ENCODER_STRIDES.len() {
                ops::relu_in_place(&mut out);
            }
            h = shape.out_h();
            w = shape.out_w();
            if keep {
                cache.shapes.push(shape);
                cache.cols.push(col);
                cache.outs.push(out.clone());
            }
            x = out;
        }
        let c = self.config.channels;
        let n = h * w;
        let mut values = vec![T::zero(); n * c];
        for ch in 0..c {
            for p in 0..n {
                values[p * c + ch] = x[ch * n + p];
            }
        }
        let grid = FeatureGrid {
            height: h,
            width: w,
            channels: c,
            values,
        };
        Ok((grid, keep.then_some(cache)))
    }

    /// Convolutional features (no positional encoding), `ceil(H/32) x ceil(W/8) x channels`.
    pub fn encode_image(&self, image: &GrayImage) -> Result<FeatureGrid<T>> {
        Ok(self.encoder_forward(image, false)?.0)
    }

    fn memory_from_grid(&self, mut grid: FeatureGrid<T>) -> Memory<T> {
        grid.add_pe2d();
        let c = self.config.channels;
        let len = grid.len();
        let kv = self
            .idx
            .layers
            .iter()
            .map(|l| {
                let mut out = vec![T::zero(); len * 2 * c];
                ops::linear(
                    &grid.values,
                    len,
                    c,
                    self.p(l.cross_kv.w),
                    self.p(l.cross_kv.b),
                    &mut out,
                );
                out
            })
            .collect();
        Memory {
            len,
            grid_height: grid.height,
            grid_width: grid.width,
            values: grid.values,
            kv,
        }
    }

    /// Encoder, 2-D positional encoding, flattening and cross-attention projections.
    pub fn prepare_memory(&self, image: &GrayImage) -> Result<Memory<T>> {
        Ok(self.memory_from_grid(self.encode_image(image)?))
    }

    /// Token embeddings plus positional encodings.
    pub fn embed_queries(&self, ids: &[TokenId], positions: &[Position]) -> Result<Vec<T>> {
        if ids.len() != positions.len() {
            return Err(Error::Shape(format!(
                "{} token ids but {} positions",
                ids.len(),
                positions.len()
            )));
        }
        let c = self.config.channels;
        let rows = self.config.embedding_rows();
        let table = self.p(self.idx.embed);
        let mut q = vec![T::zero(); ids.len() * c];
        for (i, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
            if id as usize >= rows {
                return Err(Error::InvalidToken { id, rows });
            }
            let dst = &mut q[i * c..(i + 1) * c];
            position_encoding(pos, c, dst);
            for (d, &e) in dst
                .iter_mut()
                .zip(&table[id as usize * c..(id as usize + 1) * c])
            {
                *d += e;
            }
        }
        Ok(q)
    }

    fn decoder_forward_cached(
        &self,
        memory: &Memory<T>,
        ids: &[TokenId],
        positions: &[Position],
        mask: &AttentionMask,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<(Vec<T>, DecoderCache<T>)> {
        let l = ids.len();
        if mask.len() != l {
            return Err(Error::Shape(format!(
                "mask is {0}x{0} but there are {l} queries",
                mask.len()
            )));
        }
        if memory.len == 0 {
            return Err(Error::Shape("empty memory".into()));
        }
        let c = self.config.channels;
        let f = self.config.ff_width;
        let nh = self.config.attn_heads;
        let rate = self.config.dropout;
        let mut x = self.embed_queries(ids, positions)?;
        let mut layers = Vec::with_capacity(self.idx.layers.len());

        for (li, lx) in self.idx.layers.iter().enumerate() {
            let mut a = vec![T::zero(); l * c];
            let ln1 = ops::layer_norm(&x, l, c, self.p(lx.ln1.g), self.p(lx.ln1.b), &mut a);
            let mut qkv = vec![T::zero(); l * 3 * c];
            ops::linear(&a, l, c, self.p(lx.qkv.w), self.p(lx.qkv.b), &mut qkv);
            let mut self_ctx = vec![T::zero(); l * c];
            let self_probs = ops::attention(
                View {
                    data: &qkv,
                    ld: 3 * c,
                },
                View {
                    data: &qkv[c..],
                    ld: 3 * c,
                },
                View {
                    data: &qkv[2 * c..],
                    ld: 3 * c,
                },
                l,
                l,
                c,
                nh,
                Some(mask),
                &mut self_ctx,
            );
            let mut so = vec![T::zero(); l * c];
            ops::linear(
                &self_ctx,
                l,
                c,
                self.p(lx.self_out.w),
                self.p(lx.self_out.b),
                &mut so,
            );
            let drop1 = apply_dropout(&mut so, rate, dropout.as_deref_mut());
            add_into(&mut x, &so);

            let mut cn = vec![T::zero(); l * c];
            let ln2 = ops::layer_norm(&x, l, c, self.p(lx.ln2.g), self.p(lx.ln2.b), &mut cn);
            let mut cq = vec![T::zero(); l * c];
            ops::linear(
                &cn,
                l,
                c,
                self.p(lx.cross_q.w),
                self.p(lx.cross_q.b),
                &mut cq,
            );
            let kv = &memory.kv[li];
            let mut cross_ctx = vec![T::zero(); l * c];
            let cross_probs = ops::attention(
                View { data: &cq, ld: c },
                View {
                    data: kv,
                    ld: 2 * c,
                },
                View {
                    data: &kv[c..],
                    ld: 2 * c,
                },
                l,
                memory.len,
                c,
                nh,
                None,
                &mut cross_ctx,
            );
            let mut co = vec![T::zero(); l * c];
            ops::linear(
                &cross_ctx,
                l,
                c,
                self.p(lx.cross_out.w),
                self.p(lx.cross_out.b),
                &mut co,
            );
            let drop2 = apply_dropout(&mut co, rate, dropout.as_deref_mut());
            add_into(&mut x, &co);

            let mut fin = vec![T::zero(); l * c];
            let ln3 = ops::layer_norm(&x, l, c, self.p(lx.ln3.g), self.p(lx.ln3.b), &mut fin);
            let mut h = vec![T::zero(); l * f];
            ops::linear(&fin, l, c, self.p(lx.ff1.w), self.p(lx.ff1.b), &mut h);
            ops::relu_in_place(&mut h);
            let mut ff = vec![T::zero(); l * c];
            ops::linear(&h, l, f, self.p(lx.ff2.w), self.p(lx.ff2.b), &mut ff);
            let drop3 = apply_dropout(&mut ff, rate, dropout.as_deref_mut());
            add_into(&mut x, &ff);

            layers.push(LayerCache {
                ln1,
                a,
                qkv,
                self_probs,
                self_ctx,
                drop1,
                ln2,
                c: cn,
                cq,
                cross_probs,
                cross_ctx,
                drop2,
                ln3,
                f: fin,
                h,
                drop3,
            });
        }
        let mut out = vec![T::zero(); l * c];
        let ln_f = ops::layer_norm(
            &x,
            l,
            c,
            self.p(self.idx.ln_f.g),
            self.p(self.idx.ln_f.b),
            &mut out,
        );
        Ok((
            out,
            DecoderCache {
                ids: ids.to_vec(),
                layers,
                ln_f,
            },
        ))
    }

    /// Decoder outputs (one `channels` vector per query) in evaluation mode.
    pub fn decoder_forward(
        &self,
        memory: &Memory<T>,
        ids: &[TokenId],
        positions: &[Position],
        mask: &AttentionMask,
    ) -> Result<Vec<T>> {
        Ok(self
            .decoder_forward_cached(memory, ids, positions, mask, None)?
            .0)
    }

    /// Scores of heads `0..heads_used` for each output row, laid out
    /// `[row][head][class]`.
    pub fn project_heads(&self, outputs: &[T], heads_used: usize) -> Result<Vec<T>> {
        if heads_used == 0 || heads_used > self.config.heads {
            return Err(Error::InvalidArgument(format!(
                "requested {heads_used} heads, model has {}",
                self.config.heads
            )));
        }
        let c = self.config.channels;
        let a = self.config.num_classes;
        let rows = outputs.len() / c;
        let mut scores = vec![T::zero(); rows * heads_used * a];
        let mut tmp = vec![T::zero(); rows * a];
        for k in 0..heads_used {
            let h = self.idx.heads[k];
            ops::linear(outputs, rows, c, self.p(h.w), self.p(h.b), &mut tmp);
            for r in 0..rows {
                let dst = (r * heads_used + k) * a;
                scores[dst..dst + a].copy_from_slice(&tmp[r * a..(r + 1) * a]);
            }
        }
        Ok(scores)
    }

    /// Training forward with optional dropout; returns decoder outputs.
    pub fn forward_train(
        &self,
        image: &GrayImage,
        ids: &[TokenId],
        positions: &[Position],
        mask: &AttentionMask,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(Vec<T>, ForwardCache<T>)> {
        let (grid, enc) = self.encoder_forward(image, true)?;
        let memory = self.memory_from_grid(grid);
        let (out, dec) = self.decoder_forward_cached(&memory, ids, positions, mask, dropout)?;
        Ok((
            out,
            ForwardCache {
                encoder: enc.expect("cache requested"),
                memory,
                decoder: dec,
            },
        ))
    }

    /// Gradients of head `k` given `d_scores` (`rows x classes`); returns
    /// the gradient with respect to the outputs (accumulated into `d_out`).
    pub fn head_backward(
        &self,
        k: usize,
        outputs: &[T],
        d_scores: &[T],
        d_out: &mut [T],
        grads: &mut Grads<T>,
    ) {
        let c = self.config.channels;
        let rows = outputs.len() / c;
        let h = self.idx.heads[k];
        let mut dx = vec![T::zero(); rows * c];
        let (dw, db) = grads.pair_mut(h.w, h.b);
        ops::linear_backward(
            outputs,
            rows,
            c,
            self.p(h.w),
            d_scores,
            Some(&mut dx),
            dw,
            db,
        );
        add_into(d_out, &dx);
    }

    /// Accumulates parameter gradients given the gradient of the decoder outputs.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &[T], grads: &mut Grads<T>) {
        let c = self.config.channels;
        let f = self.config.ff_width;
        let nh = self.config.attn_heads;
        let dc = &cache.decoder;
        let l = dc.ids.len();
        let mem = &cache.memory;

        let mut dx = vec![T::zero(); l * c];
        {
            let (dg, db) = grads.pair_mut(self.idx.ln_f.g, self.idx.ln_f.b);
            ops::layer_norm_backward(
                &dc.ln_f,
                l,
                c,
                self.p(self.idx.ln_f.g),
                d_out,
                &mut dx,
                dg,
                db,
            );
        }
        let mut d_mem = vec![T::zero(); mem.len * c];

        for (li, lx) in self.idx.layers.iter().enumerate().rev() {
            let lc = &dc.layers[li];

            // feedforward
            let mut dff = dx.clone();
            scale_by_mask(&mut dff, lc.drop3.as_deref());
            let mut dh = vec![T::zero(); l * f];
            {
                let (dw, db) = grads.pair_mut(lx.ff2.w, lx.ff2.b);
                ops::linear_backward(&lc.h, l, f, self.p(lx.ff2.w), &dff, Some(&mut dh), dw, db);
            }
            ops::relu_backward_in_place(&lc.h, &mut dh);
            let mut dfin = vec![T::zero(); l * c];
            {
                let (dw, db) = grads.pair_mut(lx.ff1.w, lx.ff1.b);
                ops::linear_backward(&lc.f, l, c, self.p(lx.ff1.w), &dh, Some(&mut dfin), dw, db);
            }
            {
                let (dg, db) = grads.pair_mut(lx.ln3.g, lx.ln3.b);
                ops::layer_norm_backward(&lc.ln3, l, c, self.p(lx.ln3.g), &dfin, &mut dx, dg, db);
            }

            // cross-attention
            let mut dco = dx.clone();
            scale_by_mask(&mut dco, lc.drop2.as_deref());
            let mut dctx = vec![T::zero(); l * c];
            {
                let (dw, db) = grads.pair_mut(lx.cross_out.w, lx.cross_out.b);
                ops::linear_backward(
                    &lc.cross_ctx,
                    l,
                    c,
                    self.p(lx.cross_out.w),
                    &dco,
                    Some(&mut dctx),
                    dw,
                    db,
                );
            }
            let kv = &mem.kv[li];
            let mut dq = vec![T::zero(); l * c];
            let mut dk = vec![T::zero(); mem.len * c];
            let mut dv = vec![T::zero(); mem.len * c];
            ops::attention_backward(
                View {
                    data: &lc.cq,
                    ld: c,
                },
                View {
                    data: kv,
                    ld: 2 * c,
                },
                View {
                    data: &kv[c..],
                    ld: 2 * c,
                },
                l,
                mem.len,
                c,
                nh,
                &lc.cross_probs,
                &dctx,
                ViewMut {
                    data: &mut dq,
                    ld: c,
                },
                ViewMut {
                    data: &mut dk,
                    ld: c,
                },
                ViewMut {
                    data: &mut dv,
                    ld: c,
                },
            );
            let dkv = interleave(&[&dk, &dv], mem.len, c);
            let mut dm = vec![T::zero(); mem.len * c];
            {
                let (dw, db) = grads.pair_mut(lx.cross_kv.w, lx.cross_kv.b);
                ops::linear_backward(
                    &mem.values,
                    mem.len,
                    c,
                    self.p(lx.cross_kv.w),
                    &dkv,
                    Some(&mut dm),
                    dw,
                    db,
                );
            }
            add_into(&mut d_mem, &dm);
            let mut dcn = vec![T::zero(); l * c];
            {
                let (dw, db) = grads.pair_mut(lx.cross_q.w, lx.cross_q.b);
                ops::linear_backward(
                    &lc.c,
                    l,
                    c,
                    self.p(lx.cross_q.w),
                    &dq,
                    Some(&mut dcn),
                    dw,
                    db,
                );
            }
            {
                let (dg, db) = grads.pair_mut(lx.ln2.g, lx.ln2.b);
                ops::layer_norm_backward(&lc.ln2, l, c, self.p(lx.ln2.g), &dcn, &mut dx, dg, db);
            }

            // self-attention
            let mut dso = dx.clone();
            scale_by_mask(&mut dso, lc.drop1.as_deref());
            let mut dctx = vec![T::zero(); l * c];
            {
                let (dw, db) = grads.pair_mut(lx.self_out.w, lx.self_out.b);
                ops::linear_backward(
                    &lc.self_ctx,
                    l,
                    c,
                    self.p(lx.self_out.w),
                    &dso,
                    Some(&mut dctx),
                    dw,
                    db,
                );
            }
            let mut dq = vec![T::zero(); l * c];
            let mut dk = vec![T::zero(); l * c];
            let mut dv = vec![T::zero(); l * c];
            ops::attention_backward(
                View {
                    data: &lc.qkv,
                    ld: 3 * c,
                },
                View {
                    data: &lc.qkv[c..],
                    ld: 3 * c,
                },
                View {
                    data: &lc.qkv[2 * c..],
                    ld: 3 * c,
                },
                l,
                l,
                c,
                nh,
                &lc.self_probs,
                &dctx,
                ViewMut {
                    data: &mut dq,
                    ld: c,
                },
                ViewMut {
                    data: &mut dk,
                    ld: c,
                },
                ViewMut {
                    data: &mut dv,
                    ld: c,
                },
            );
            let dqkv = interleave(&[&dq, &dk, &dv], l, c);
            let mut da = vec![T::zero(); l * c];
            {
                let (dw, db) = grads.pair_mut(lx.qkv.w, lx.qkv.b);
                ops::linear_backward(&lc.a, l, c, self.p(lx.qkv.w), &dqkv, Some(&mut da), dw, db);
            }
            {
                let (dg, db) = grads.pair_mut(lx.ln1.g, lx.ln1.b);
                ops::layer_norm_backward(&lc.ln1, l, c, self.p(lx.ln1.g), &da, &mut dx, dg, db);
            }
        }

        // embeddings (positional encodings carry no parameters)
        {
            let de = grads.get_mut(self.idx.embed);
            for (i, &id) in dc.ids.iter().enumerate() {
                let row = &mut de[id as usize * c..(id as usize + 1) * c];
                add_into(row, &dx[i * c..(i + 1) * c]);
            }
        }

        self.encoder_backward(&cache.encoder, mem, &d_mem, grads);
    }

    fn encoder_backward(
        &self,
        cache: &EncoderCache<T>,
        mem: &Memory<T>,
        d_mem: &[T],
        grads: &mut Grads<T>,
    ) {
        let c = self.config.channels;
        let n = mem.len;
        let mut dout = vec![T::zero(); c * n];
        for p in 0..n {
            for ch in 0..c {
                dout[ch * n + p] = d_mem[p * c + ch];
            }
        }
        for i in (0..ENCODER_STRIDES.len()).rev() {
            let shape = &cache.shapes[i];
            if i + 1 < ENCODER_STRIDES.len() {
                ops::relu_backward_in_place(&cache.outs[i], &mut dout);
            }
            let conv = self.idx.convs[i];
            let dcol = {
                let (dw, db) = grads.pair_mut(conv.w, conv.b);
                ops::conv_backward(shape, &cache.cols[i], self.p(conv.w), &dout, dw, db, i > 0)
            };
            if let Some(dcol) = dcol {
                let mut din = vec![T::zero(); shape.c_in * shape.h * shape.w];
                ops::col2im(shape, &dcol, &mut din);
                dout = din;
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn scale_by_mask<T: Scalar>(d: &mut [T], mask: Option<&[T]>) {
    if let Some(m) = mask {
        for (g, &s) in d.iter_mut().zip(m) {
            *g *= s;
        }
    }
}

/// Concatenates `parts` (each `rows x dim`) column-wise.
fn interleave<T: Scalar>(parts: &[&[T]], rows: usize, dim: usize) -> Vec<T> {
    let w = parts.len() * dim;
    let mut out = vec![T::zero(); rows * w];
    for r in 0..rows {
        for (k, p) in parts.iter().enumerate() {
            out[r * w + k * dim..r * w + (k + 1) * dim].copy_from_slice(&p[r * dim..(r + 1) * dim]);
        }
    }
    out
}

fn apply_dropout<T: Scalar, R: RngCore + ?Sized>(
    x: &mut [T],
    rate: f64,
    rng: Option<&mut R>,
) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = x
        .iter()
        .map(|_| if rng.gen_bool(rate) { T::zero() } else { keep })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

#[cfg(test)]
mod tests;
