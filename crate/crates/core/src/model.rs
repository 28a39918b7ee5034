//! Classifier networks over a flat parameter vector.
//!
//! Every learnable value lives in one contiguous `Vec`, laid out layer by
//! layer (weights then bias). Layers read their slices as matrix views, which
//! keeps EMA updates, weight averaging and optimizer steps plain vector
//! arithmetic. Backpropagation is written by hand: [`Architecture::forward_train`]
//! records a [`Tape`] and [`Architecture::backward`] accumulates into a
//! gradient vector of the same layout.
//!
//! Convolutions run on channel-last row matrices (`[B*H*W, C]`) through
//! im2col and a GEMM. The networks contain no stochastic or normalization
//! layers, so evaluation is deterministic and the flat vector is the entire
//! model state.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backbone {
    /// Fully connected layers of the given widths, each followed by ReLU.
    Mlp { hidden: Vec<usize> },
    /// 3x3 convolution + ReLU + 2x2 max-pool blocks with the given widths.
    Cnn { channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// `(channels, height, width)` of input images.
    pub input: (usize, usize, usize),
    pub backbone: Backbone,
    /// Embedding size `D` produced by the feature extractor.
    pub feature_dim: usize,
    pub n_classes: usize,
}

impl ArchSpec {
    /// Desk-scale default: four conv blocks of widths 8, 16, 32, 64. Needs
    /// inputs of at least 16x16.
    pub fn small_cnn(input: (usize, usize, usize), n_classes: usize) -> Self {
        ArchSpec {
            input,
            backbone: Backbone::Cnn {
                channels: vec![8, 16, 32, 64],
            },
            feature_dim: 64,
            n_classes,
        }
    }

    pub fn mlp(input: (usize, usize, usize), hidden: Vec<usize>, feature_dim: usize, n_classes: usize) -> Self {
        ArchSpec {
            input,
            backbone: Backbone::Mlp { hidden },
            feature_dim,
            n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    /// NCHW batch to `[B, C*H*W]` rows.
    FlattenInput,
    /// NCHW batch to channel-last rows `[B*H*W, C]`.
    ToRows,
    Conv {
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        w_off: usize,
        b_off: usize,
    },
    Pool {
        c: usize,
        h: usize,
        w: usize,
    },
    /// Channel-last rows `[B*H*W, C]` to `[B, H*W*C]`.
    Flatten {
        hw: usize,
        c: usize,
    },
    Dense {
        din: usize,
        dout: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu,
}

enum Cache<F> {
    None,
    Flat,
    Conv { col: Array2<F>, batch: usize },
    Pool { argmax: Vec<usize>, in_rows: usize },
    Relu(Array2<F>),
    Dense(Array2<F>),
}

/// Intermediate values of a forward pass, consumed by [`Architecture::backward`].
pub struct Tape<F> {
    caches: Vec<Cache<F>>,
    batch: usize,
}

impl<F> Tape<F> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Layer graph and parameter layout of a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    spec: ArchSpec,
    layers: Vec<Layer>,
    /// Index of the head's dense layer; everything before it is the backbone.
    head: usize,
    n_params: usize,
}

impl Architecture {
    pub fn new(spec: ArchSpec) -> Result<Self> {
        let (c0, h0, w0) = spec.input;
        if c0 * h0 * w0 == 0 || spec.feature_dim == 0 || spec.n_classes == 0 {
            return Err(Error::InvalidValue(format!("degenerate architecture {spec:?}")));
        }
        let mut layers = Vec::new();
        let mut off = 0;
        let dense = |layers: &mut Vec<Layer>, off: &mut usize, din: usize, dout: usize| {
            layers.push(Layer::Dense {
                din,
                dout,
                w_off: *off,
                b_off: *off + din * dout,
            });
            *off += din * dout + dout;
        };
        let flat_dim = match &spec.backbone {
            Backbone::Mlp { hidden } => {
                layers.push(Layer::FlattenInput);
                let mut din = c0 * h0 * w0;
                for &width in hidden {
                    dense(&mut layers, &mut off, din, width);
                    layers.push(Layer::Relu);
                    din = width;
                }
                din
            }
            Backbone::Cnn { channels } => {
                layers.push(Layer::ToRows);
                let (mut c, mut h, mut w) = (c0, h0, w0);
                for &cout in channels {
                    if h < 2 || w < 2 {
                        return Err(Error::InvalidValue(format!("input {:?} too small for {} conv blocks", spec.input, channels.len())));
                    }
                    layers.push(Layer::Conv {
                        cin: c,
                        cout,
                        h,
                        w,
                        w_off: off,
                        b_off: off + 9 * c * cout,
                    });
                    off += 9 * c * cout + cout;
                    layers.push(Layer::Relu);
                    layers.push(Layer::Pool { c: cout, h, w });
                    c = cout;
                    h /= 2;
                    w /= 2;
                }
                layers.push(Layer::Flatten { hw: h * w, c });
                h * w * c
            }
        };
        dense(&mut layers, &mut off, flat_dim, spec.feature_dim);
        layers.push(Layer::Relu);
        let head = layers.len();
        dense(&mut layers, &mut off, spec.feature_dim, spec.n_classes);
        Ok(Architecture {
            spec,
            layers,
            head,
            n_params: off,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// Range of the head's values inside the flat vector.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        match self.layers[self.head] {
            Layer::Dense { w_off, .. } => w_off..self.n_params,
            _ => unreachable!("head is dense"),
        }
    }

    /// He initialization: weights `N(0, 2 / fan_in)`, biases zero.
    pub fn init<F: Scalar>(&self, rng: &mut Rng) -> Vec<F> {
        let mut params = vec![F::zero(); self.n_params];
        for layer in &self.layers {
            let (fan_in, weights) = match *layer {
                Layer::Conv { cin, w_off, cout, .. } => (9 * cin, w_off..w_off + 9 * cin * cout),
                Layer::Dense { din, dout, w_off, .. } => (din, w_off..w_off + din * dout),
                _ => continue,
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for p in &mut params[weights] {
                *p = F::of(normal.sample(rng));
            }
        }
        params
    }

    fn check(&self, params: usize, x: (usize, usize, usize, usize)) -> Result<()> {
        if params != self.n_params {
            return Err(Error::Layout {
                left: self.n_params,
                right: params,
            });
        }
        let (_, c, h, w) = x;
        if (c, h, w) != self.spec.input {
            return Err(Error::shape(format!("[B, {:?}]", self.spec.input), format!("{x:?}")));
        }
        Ok(())
    }

    fn run<F: Scalar>(&self, params: &[F], x: &Array4<F>, upto: usize, record: bool) -> Result<(Array2<F>, Vec<Cache<F>>)> {
        self.check(params.len(), x.dim())?;
        let batch = x.dim().0;
        let mut caches = Vec::with_capacity(if record { upto } else { 0 });
        let std_x = x.as_standard_layout();
        let mut act: Array2<F> = Array2::zeros((0, 0));
        for layer in &self.layers[..upto] {
            let cache;
            (act, cache) = match *layer {
                Layer::FlattenInput => {
                    let n = std_x.len() / batch.max(1);
                    let a = Array2::from_shape_vec((batch, n), std_x.iter().copied().collect()).expect("flatten");
                    (a, Cache::None)
                }
                Layer::ToRows => {
                    let (b, c, h, w) = std_x.dim();
                    let a = std_x
                        .view()
                        .permuted_axes([0, 2, 3, 1])
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((b * h * w, c))
                        .expect("rows");
                    (a, Cache::None)
                }
                Layer::Conv {
                    cin,
                    cout,
                    h,
                    w,
                    w_off,
                    b_off,
                } => {
                    let col = im2col(&act, batch, h, w, cin);
                    let wm = ArrayView2::from_shape((9 * cin, cout), &params[w_off..b_off]).expect("conv weight");
                    let mut out = Array2::zeros((batch * h * w, cout));
                    general_mat_mul(F::one(), &col, &wm, F::zero(), &mut out);
                    add_bias(&mut out, &params[b_off..b_off + cout]);
                    (out, if record { Cache::Conv { col, batch } } else { Cache::None })
                }
                Layer::Pool { c, h, w } => {
                    let (out, argmax) = max_pool(&act, batch, h, w, c);
                    let in_rows = act.nrows();
                    (out, if record { Cache::Pool { argmax, in_rows } } else { Cache::None })
                }
                Layer::Flatten { hw, c } => {
                    let a = act.into_shape_with_order((batch, hw * c)).expect("flatten rows");
                    (a, Cache::Flat)
                }
                Layer::Dense { din, dout, w_off, b_off } => {
                    let wm = ArrayView2::from_shape((din, dout), &params[w_off..b_off]).expect("dense weight");
                    let mut out = Array2::zeros((batch, dout));
                    general_mat_mul(F::one(), &act, &wm, F::zero(), &mut out);
                    add_bias(&mut out, &params[b_off..b_off + dout]);
                    (out, if record { Cache::Dense(act) } else { Cache::None })
                }
                Layer::Relu => {
                    act.mapv_inplace(|v| v.max(F::zero()));
                    let cache = if record { Cache::Relu(act.clone()) } else { Cache::None };
                    (act, cache)
                }
            };
            if record {
                caches.push(cache);
            }
        }
        Ok((act, caches))
    }

    /// Logits `[B, n_classes]`.
    pub fn forward<F: Scalar>(&self, params: &[F], x: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.run(params, x, self.layers.len(), false)?.0)
    }

    /// Penultimate embedding `[B, D]` (the network without its head).
    pub fn features<F: Scalar>(&self, params: &[F], x: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.run(params, x, self.head, false)?.0)
    }

    /// Logits plus the tape needed for [`Architecture::backward`].
    pub fn forward_train<F: Scalar>(&self, params: &[F], x: &Array4<F>) -> Result<(Array2<F>, Tape<F>)> {
        let batch = x.dim().0;
        let (logits, caches) = self.run(params, x, self.layers.len(), true)?;
        Ok((logits, Tape { caches, batch }))
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub fn backward<F: Scalar>(&self, params: &[F], tape: &Tape<F>, dlogits: &Array2<F>, grad: &mut [F]) -> Result<()> {
        if grad.len() != self.n_params || params.len() != self.n_params {
            return Err(Error::Layout {
                left: self.n_params,
                right: grad.len().min(params.len()),
            });
        }
        if dlogits.dim() != (tape.batch, self.spec.n_classes) {
            return Err(Error::shape(
                format!("[{}, {}]", tape.batch, self.spec.n_classes),
                format!("{:?}", dlogits.dim()),
            ));
        }
        let batch = tape.batch;
        let mut delta = dlogits.clone();
        // the first parameterized layer needs no input gradient
        let first_param = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv { .. } | Layer::Dense { .. }))
            .expect("at least the head");
        for (idx, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            if idx < first_param {
                break;
            }
            delta = match (layer, cache) {
                (&Layer::Dense { din, dout, w_off, b_off }, Cache::Dense(input)) => {
                    {
                        let mut gw = ArrayViewMut2::from_shape((din, dout), &mut grad[w_off..b_off]).expect("dense grad");
                        general_mat_mul(F::one(), &input.t(), &delta, F::one(), &mut gw);
                    }
                    accumulate_bias(&delta, &mut grad[b_off..b_off + dout]);
                    if idx == first_param {
                        break;
                    }
                    let wm = ArrayView2::from_shape((din, dout), &params[w_off..b_off]).expect("dense weight");
                    delta.dot(&wm.t())
                }
                (&Layer::Conv { cin, cout, h, w, w_off, b_off }, Cache::Conv { col, batch: b }) => {
                    {
                        let mut gw = ArrayViewMut2::from_shape((9 * cin, cout), &mut grad[w_off..b_off]).expect("conv grad");
                        general_mat_mul(F::one(), &col.t(), &delta, F::one(), &mut gw);
                    }
                    accumulate_bias(&delta, &mut grad[b_off..b_off + cout]);
                    if idx == first_param {
                        break;
                    }
                    let wm = ArrayView2::from_shape((9 * cin, cout), &params[w_off..b_off]).expect("conv weight");
                    let dcol = delta.dot(&wm.t());
                    col2im(&dcol, *b, h, w, cin)
                }
                (Layer::Relu, Cache::Relu(out)) => {
                    ndarray::Zip::from(&mut delta).and(out).for_each(|d, &o| {
                        if o <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    delta
                }
                (&Layer::Pool { c, .. }, Cache::Pool { argmax, in_rows }) => {
                    let mut dx = Array2::zeros((*in_rows, c));
                    let dxs = dx.as_slice_mut().expect("contiguous");
                    let ds = delta.as_standard_layout();
                    for (g, &src) in ds.iter().zip(argmax) {
                        dxs[src] += *g;
                    }
                    dx
                }
                (&Layer::Flatten { hw, c }, Cache::Flat) => delta
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((batch * hw, c))
                    .expect("unflatten"),
                _ => unreachable!("layer/cache mismatch"),
            };
        }
        Ok(())
    }
}

fn add_bias<F: Scalar>(out: &mut Array2<F>, bias: &[F]) {
    for mut row in out.rows_mut() {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn accumulate_bias<F: Scalar>(delta: &Array2<F>, grad: &mut [F]) {
    for row in delta.rows() {
        for (g, &d) in grad.iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// `[B*H*W, C]` rows to `[B*H*W, 9*C]` patches (3x3, zero padding 1).
fn im2col<F: Scalar>(x: &Array2<F>, batch: usize, h: usize, w: usize, c: usize) -> Array2<F> {
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let mut col = Array2::zeros((batch * h * w, 9 * c));
    let cs = col.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = (b * h + y) * w + xx;
                let dst = &mut cs[row * 9 * c..(row + 1) * 9 * c];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (b * h + sy as usize) * w + sx as usize;
                        let k = ky * 3 + kx;
                        dst[k * c..(k + 1) * c].copy_from_slice(&xs[src * c..(src + 1) * c]);
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Scalar>(dcol: &Array2<F>, batch: usize, h: usize, w: usize, c: usize) -> Array2<F> {
    let ds = dcol.as_standard_layout();
    let ds = ds.as_slice().expect("contiguous");
    let mut dx = Array2::zeros((batch * h * w, c));
    let dxs = dx.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = (b * h + y) * w + xx;
                let src_row = &ds[row * 9 * c..(row + 1) * 9 * c];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = (b * h + sy as usize) * w + sx as usize;
                        let k = ky * 3 + kx;
                        for (d, &g) in dxs[dst * c..(dst + 1) * c].iter_mut().zip(&src_row[k * c..(k + 1) * c]) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 max-pool on channel-last rows; returns the flat source index of each
/// output element.
fn max_pool<F: Scalar>(x: &Array2<F>, batch: usize, h: usize, w: usize, c: usize) -> (Array2<F>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let mut out = Array2::zeros((batch * ho * wo, c));
    let mut argmax = vec![0usize; batch * ho * wo * c];
    let os = out.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        for y in 0..ho {
            for xx in 0..wo {
                let orow = (b * ho + y) * wo + xx;
                for ch in 0..c {
                    let mut best = F::neg_infinity();
                    let mut arg = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        if xs[src] > best {
                            best = xs[src];
                            arg = src;
                        }
                    }
                    os[orow * c + ch] = best;
                    argmax[orow * c + ch] = arg;
                }
            }
        }
    }
    (out, argmax)
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Classifier<F> {
    pub arch: Arc<Architecture>,
    pub params: Vec<F>,
}

impl<F: Scalar> Classifier<F> {
    pub fn new(arch: Arc<Architecture>, rng: &mut Rng) -> Self {
        let params = arch.init(rng);
        Classifier { arch, params }
    }

    pub fn from_params(arch: Arc<Architecture>, params: Vec<F>) -> Result<Self> {
        if params.len() != arch.n_params() {
            return Err(Error::Layout {
                left: arch.n_params(),
                right: params.len(),
            });
        }
        Ok(Classifier { arch, params })
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.arch.forward(&self.params, x)
    }

    pub fn features(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.arch.features(&self.params, x)
    }

    pub fn forward_train(&self, x: &Array4<F>) -> Result<(Array2<F>, Tape<F>)> {
        self.arch.forward_train(&self.params, x)
    }

    pub fn backward(&self, tape: &Tape<F>, dlogits: &Array2<F>, grad: &mut [F]) -> Result<()> {
        self.arch.backward(&self.params, tape, dlogits, grad)
    }

    /// Copy of the flat parameter view.
    pub fn read_params(&self) -> Vec<F> {
        self.params.clone()
    }

    pub fn write_params(&mut self, params: &[F]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Layout {
                left: self.params.len(),
                right: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Class predictions, evaluated in chunks to bound memory.
    pub fn predict(&self, x: &Array4<F>) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(x.dim().0);
        for chunk in x.axis_chunks_iter(Axis(0), 256) {
            let logits = self.forward(&chunk.to_owned())?;
            preds.extend(logits.rows().into_iter().map(argmax));
        }
        Ok(preds)
    }
}

pub fn argmax<'a, F: Scalar>(row: impl IntoIterator<Item = &'a F>) -> usize {
    let mut best = F::neg_infinity();
    let mut arg = 0;
    for (i, &v) in row.into_iter().enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MKDCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

impl Classifier<f32> {
    /// Writes `path` (binary: magic, version, architecture JSON, f32 values)
    /// and `path.json` holding `hyper`.
    pub fn save_checkpoint(&self, path: &Path, hyper: &serde_json::Value) -> Result<()> {
        let arch = serde_json::to_vec(self.arch.spec()).map_err(|e| Error::Serde(e.to_string()))?;
        let mut bytes = Vec::with_capacity(24 + arch.len() + 4 * self.params.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&arch);
        bytes.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension("json");
        let text = serde_json::to_string_pretty(hyper).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Serde(format!("{}: {what}", path.display()));
        let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| bad("truncated"));
        if take(0, 8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let arch_len = u32::from_le_bytes(take(12, 4)?.try_into().expect("4 bytes")) as usize;
        let spec: ArchSpec = serde_json::from_slice(take(16, arch_len)?).map_err(|e| bad(&e.to_string()))?;
        let mut at = 16 + arch_len;
        let n = u64::from_le_bytes(take(at, 8)?.try_into().expect("8 bytes")) as usize;
        at += 8;
        let raw = take(at, 4 * n)?;
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Classifier::from_params(Arc::new(Architecture::new(spec)?), params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use crate::seed::{self, Stream};

    fn cnn() -> Arc<Architecture> {
        let spec = ArchSpec {
            backbone: Backbone::Cnn { channels: vec![4, 6] },
            feature_dim: 8,
            ..ArchSpec::small_cnn((3, 8, 8), 5)
        };
        Arc::new(Architecture::new(spec).unwrap())
    }

    fn input(b: usize, seed: u64) -> Array4<f64> {
        let mut rng = seed::rng(seed, Stream::Dataset);
        Array4::from_shape_fn((b, 3, 8, 8), |_| rng.random::<f64>())
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let arch = cnn();
        let mut m: Classifier<f64> = Classifier::new(arch.clone(), &mut seed::rng(0, Stream::Init));
        for p in &mut m.params[arch.head_range()] {
            *p = 0.0;
        }
        let logits = m.forward(&input(4, 1)).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch() {
        let m: Classifier<f32> = Classifier::new(cnn(), &mut seed::rng(0, Stream::Init));
        let out = m.forward(&Array4::zeros((0, 3, 8, 8))).unwrap();
        assert_eq!(out.dim(), (0, 5));
    }

    #[test]
    fn duplicated_rows_match() {
        let m: Classifier<f64> = Classifier::new(cnn(), &mut seed::rng(0, Stream::Init));
        let x = input(1, 2);
        let xx = ndarray::concatenate![Axis(0), x, x];
        let out = m.forward(&xx).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m: Classifier<f32> = Classifier::new(cnn(), &mut seed::rng(0, Stream::Init));
        assert!(matches!(m.forward(&Array4::zeros((2, 1, 8, 8))), Err(Error::Shape { .. })));
    }

    #[test]
    fn head_does_not_influence_features() {
        let arch = cnn();
        let m: Classifier<f64> = Classifier::new(arch.clone(), &mut seed::rng(0, Stream::Init));
        let mut other = m.clone();
        for p in &mut other.params[arch.head_range()] {
            *p += 3.0;
        }
        let x = input(3, 4);
        assert_eq!(m.features(&x).unwrap(), other.features(&x).unwrap());
        assert_ne!(m.forward(&x).unwrap(), other.forward(&x).unwrap());
    }

    #[test]
    fn forward_is_head_of_features() {
        let arch = cnn();
        let m: Classifier<f64> = Classifier::new(arch.clone(), &mut seed::rng(1, Stream::Init));
        let x = input(3, 5);
        let f = m.features(&x).unwrap();
        let head = &m.params[arch.head_range()];
        let (d, k) = (arch.feature_dim(), arch.n_classes());
        let w = ArrayView2::from_shape((d, k), &head[..d * k]).unwrap();
        let mut expected = f.dot(&w);
        add_bias(&mut expected, &head[d * k..]);
        assert_eq!(expected, m.forward(&x).unwrap());
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn default_cnn_needs_sixteen_pixels() {
        assert!(Architecture::new(ArchSpec::small_cnn((3, 16, 16), 10)).is_ok());
        assert!(Architecture::new(ArchSpec::small_cnn((3, 8, 8), 10)).is_err());
    }

    #[test]
    fn param_round_trip() {
        let mut m: Classifier<f32> = Classifier::new(cnn(), &mut seed::rng(0, Stream::Init));
        let p: Vec<f32> = (0..m.params.len()).map(|i| i as f32 * 1e-3).collect();
        m.write_params(&p).unwrap();
        assert_eq!(m.read_params(), p);
        assert!(m.write_params(&p[1..]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m: Classifier<f32> = Classifier::new(cnn(), &mut seed::rng(7, Stream::Init));
        m.save_checkpoint(&path, &serde_json::json!({"lr": 0.1})).unwrap();
        let back = Classifier::load_checkpoint(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.arch.spec(), m.arch.spec());
        assert!(path.with_extension("json").exists());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Classifier::load_checkpoint(&path).is_err());
    }

    fn numeric_check(arch: Arc<Architecture>) {
        // loss = sum(logits * r) so dlogits = r
        let m: Classifier<f64> = Classifier::new(arch.clone(), &mut seed::rng(3, Stream::Init));
        let (c, h, w) = arch.spec().input;
        let mut rng = seed::rng(9, Stream::Dataset);
        let x = Array4::from_shape_fn((3, c, h, w), |_| rng.random::<f64>());
        let r = Array2::from_shape_fn((3, arch.n_classes()), |_| rng.random::<f64>() - 0.5);
        let (_, tape) = m.forward_train(&x).unwrap();
        let mut grad = vec![0.0; arch.n_params()];
        m.backward(&tape, &r, &mut grad).unwrap();
        let loss = |p: &[f64]| (arch.forward(p, &x).unwrap() * &r).sum();
        let eps = 1e-6;
        for i in (0..arch.n_params()).step_by(arch.n_params() / 60 + 1) {
            let mut p = m.params.clone();
            p[i] += eps;
            let up = loss(&p);
            p[i] -= 2.0 * eps;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * eps);
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!((fd - grad[i]).abs() < tol, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn cnn_backward_matches_finite_differences() {
        numeric_check(cnn());
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        numeric_check(Arc::new(Architecture::new(ArchSpec::mlp((1, 4, 4), vec![7], 5, 3)).unwrap()));
    }
}
