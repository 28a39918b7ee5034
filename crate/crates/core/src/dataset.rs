//! Image datasets.
//!
//! Two procedurally generated datasets ship with the crate so experiments run
//! without downloads:
//!
//! - `synth-digits`: ten hand-drawn-style digit glyphs rendered at 16x16 with
//!   random stroke jitter, affine distortion, random ink/paper colours, pixel
//!   noise and an occasional stray stroke. This is the MNIST-class dataset
//!   used for desk-scale runs.
//! - `synth-objects-100`: one hundred colour-blob prototypes with per-sample
//!   shifts and noise, a CIFAR100-shaped class universe.
//!
//! Any other dataset is loaded from a local directory (see [`load_dir`]):
//!
//! ```text
//! <root>/dataset.json          {"name", "channels", "height", "width", "n_classes"}
//! <root>/train/class_<k>.bin   u8 pixels, N x C x H x W, row-major
//! <root>/test/class_<k>.bin
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array4;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Environment variable naming the root under which `dir:` datasets live.
pub const DATA_ROOT_ENV: &str = "MKD_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DatasetId {
    SynthDigits,
    SynthObjects100,
    /// A dataset stored on disk in the per-class layout.
    Dir(PathBuf),
}

impl DatasetId {
    /// Number of classes without loading any pixels.
    pub fn n_classes(&self) -> Result<usize> {
        match self {
            DatasetId::SynthDigits => Ok(10),
            DatasetId::SynthObjects100 => Ok(100),
            DatasetId::Dir(path) => Ok(read_info(&resolve_dir(path))?.n_classes),
        }
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth-digits" => Ok(DatasetId::SynthDigits),
            "synth-objects-100" => Ok(DatasetId::SynthObjects100),
            other => match other.strip_prefix("dir:") {
                Some(p) if !p.is_empty() => Ok(DatasetId::Dir(PathBuf::from(p))),
                _ => Err(Error::UnknownDataset(other.to_string())),
            },
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetId::SynthDigits => f.write_str("synth-digits"),
            DatasetId::SynthObjects100 => f.write_str("synth-objects-100"),
            DatasetId::Dir(p) => write!(f, "dir:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
}

impl DatasetInfo {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Images stored contiguously as `N x C x H x W` floats in `[0, 1]`.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    image_len: usize,
}

impl Split {
    pub fn new(image_len: usize) -> Self {
        Split {
            images: Vec::new(),
            labels: Vec::new(),
            image_len,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len..(i + 1) * self.image_len]
    }

    pub fn push(&mut self, image: &[f32], label: usize) {
        debug_assert_eq!(image.len(), self.image_len);
        self.images.extend_from_slice(image);
        self.labels.push(label);
    }

    /// Indices of samples whose label satisfies `keep`.
    pub fn indices_where(&self, mut keep: impl FnMut(usize) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(self.labels[i])).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    /// Gathers the given rows of `split` into an `[B, C, H, W]` array.
    pub fn gather(&self, split: &Split, rows: &[usize]) -> Array4<f32> {
        let info = &self.info;
        let mut out = Vec::with_capacity(rows.len() * info.image_len());
        for &r in rows {
            out.extend_from_slice(split.image(r));
        }
        Array4::from_shape_vec((rows.len(), info.channels, info.height, info.width), out)
            .expect("rows have the dataset image size")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.info.channels, self.info.height, self.info.width)
    }
}

/// Sizes for the procedural generators. Ignored by on-disk datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            train_per_class: 500,
            test_per_class: 100,
            seed: 0,
        }
    }
}

/// Materializes the dataset named by `id`.
pub fn load(id: &DatasetId, sizes: SynthSizes) -> Result<Dataset> {
    match id {
        DatasetId::SynthDigits => Ok(synth_digits(sizes)),
        DatasetId::SynthObjects100 => Ok(synth_objects(100, sizes)),
        DatasetId::Dir(path) => load_dir(&resolve_dir(path)),
    }
}

/// Relative `dir:` paths are resolved against `$MKD_DATA_ROOT` when set.
pub fn resolve_dir(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            return PathBuf::from(root).join(path);
        }
    }
    path.to_path_buf()
}

// ---------------------------------------------------------------------------
// synth-digits

const DIGIT_SIDE: usize = 16;

/// Control polylines of each digit in the unit square, y pointing down.
fn digit_strokes(digit: usize) -> Vec<Vec<(f64, f64)>> {
    let ring = |cx: f64, cy: f64, rx: f64, ry: f64, n: usize| -> Vec<(f64, f64)> {
        (0..=n)
            .map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                (cx + rx * t.sin(), cy - ry * t.cos())
            })
            .collect()
    };
    match digit {
        0 => vec![ring(0.5, 0.5, 0.22, 0.33, 14)],
        1 => vec![vec![(0.38, 0.3), (0.52, 0.16), (0.52, 0.84)]],
        2 => vec![vec![
            (0.3, 0.3),
            (0.4, 0.17),
            (0.6, 0.17),
            (0.7, 0.3),
            (0.64, 0.46),
            (0.3, 0.84),
            (0.74, 0.84),
        ]],
        3 => vec![vec![
            (0.3, 0.2),
            (0.66, 0.2),
            (0.48, 0.47),
            (0.68, 0.6),
            (0.63, 0.8),
            (0.3, 0.83),
        ]],
        4 => vec![vec![(0.62, 0.85), (0.62, 0.15), (0.27, 0.6), (0.76, 0.6)]],
        5 => vec![vec![
            (0.7, 0.17),
            (0.36, 0.17),
            (0.33, 0.47),
            (0.6, 0.44),
            (0.71, 0.64),
            (0.6, 0.83),
            (0.3, 0.81),
        ]],
        6 => vec![vec![
            (0.66, 0.15),
            (0.42, 0.33),
            (0.32, 0.62),
            (0.4, 0.83),
            (0.6, 0.83),
            (0.69, 0.66),
            (0.58, 0.5),
            (0.34, 0.58),
        ]],
        7 => vec![vec![(0.27, 0.18), (0.73, 0.18), (0.44, 0.85)]],
        8 => vec![ring(0.5, 0.31, 0.16, 0.15, 10), ring(0.5, 0.67, 0.2, 0.18, 12)],
        9 => vec![vec![
            (0.66, 0.44),
            (0.42, 0.5),
            (0.32, 0.32),
            (0.45, 0.16),
            (0.64, 0.21),
            (0.67, 0.44),
            (0.6, 0.86),
        ]],
        _ => unreachable!("digits are 0..10"),
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn render_digit(digit: usize, rng: &mut seed::Rng, out: &mut Vec<f32>) {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let mut g = |s: f64| s * n.sample(rng);
    let rot = g(0.25);
    let shear = g(0.15);
    let scale = 0.85 + 0.12 * g(1.0).clamp(-1.5, 1.5);
    let (tx, ty) = (g(0.07), g(0.07));
    let jitter = 0.05;
    let clutter = (g(0.3), g(0.3));
    let mut strokes: Vec<Vec<(f64, f64)>> = digit_strokes(digit)
        .into_iter()
        .map(|line| {
            line.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x - 0.5 + g(jitter), y - 0.5 + g(jitter));
                    let x = x + shear * y;
                    let (c, s) = (rot.cos(), rot.sin());
                    (
                        0.5 + scale * (c * x - s * y) + tx,
                        0.5 + scale * (s * x + c * y) + ty,
                    )
                })
                .collect()
        })
        .collect();
    // clutter: a stray stroke that carries no class information
    if rng.random::<f64>() < 0.3 {
        let a = (rng.random::<f64>(), rng.random::<f64>());
        let b = (a.0 + clutter.0, a.1 + clutter.1);
        strokes.push(vec![a, b]);
    }
    let half_width = 0.045 + 0.025 * rng.random::<f64>();
    let soft = 0.035;
    let ink: [f64; 3] = std::array::from_fn(|_| 0.55 + 0.45 * rng.random::<f64>());
    let paper: [f64; 3] = std::array::from_fn(|_| 0.3 * rng.random::<f64>());
    let noise = Normal::new(0.0, 0.12).expect("valid sigma");

    let side = DIGIT_SIDE;
    let mut coverage = vec![0.0f64; side * side];
    for py in 0..side {
        for px in 0..side {
            let p = ((px as f64 + 0.5) / side as f64, (py as f64 + 0.5) / side as f64);
            let d = strokes
                .iter()
                .flat_map(|line| line.windows(2).map(move |w| seg_dist(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            coverage[py * side + px] = (1.0 - (d - half_width) / soft).clamp(0.0, 1.0);
        }
    }
    for c in 0..3 {
        for &cov in &coverage {
            let v = paper[c] + (ink[c] - paper[c]) * cov + noise.sample(rng);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
}

/// Ten-class digit glyph dataset, 3x16x16.
pub fn synth_digits(sizes: SynthSizes) -> Dataset {
    let info = DatasetInfo {
        name: "synth-digits".into(),
        channels: 3,
        height: DIGIT_SIDE,
        width: DIGIT_SIDE,
        n_classes: 10,
    };
    let mut rng = seed::rng(sizes.seed, Stream::Dataset);
    let mut make = |per_class: usize| {
        let mut split = Split::new(info.image_len());
        let mut buf = Vec::with_capacity(info.image_len());
        for digit in 0..10 {
            for _ in 0..per_class {
                buf.clear();
                render_digit(digit, &mut rng, &mut buf);
                split.push(&buf, digit);
            }
        }
        split
    };
    let train = make(sizes.train_per_class);
    let test = make(sizes.test_per_class);
    Dataset { info, train, test }
}

// ---------------------------------------------------------------------------
// synth-objects

/// `n_classes` colour-blob prototypes, 3x16x16.
pub fn synth_objects(n_classes: usize, sizes: SynthSizes) -> Dataset {
    let side = 16;
    let info = DatasetInfo {
        name: format!("synth-objects-{n_classes}"),
        channels: 3,
        height: side,
        width: side,
        n_classes,
    };
    let mut rng = seed::rng(sizes.seed, Stream::Dataset);
    // (cx, cy, radius, rgb) per blob, three blobs per class.
    let protos: Vec<Vec<(f64, f64, f64, [f64; 3])>> = (0..n_classes)
        .map(|_| {
            (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.1..0.3),
                        std::array::from_fn(|_| rng.random::<f64>()),
                    )
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.08).expect("valid sigma");
    let mut make = |per_class: usize| {
        let mut split = Split::new(info.image_len());
        let mut buf = vec![0f32; info.image_len()];
        for (class, blobs) in protos.iter().enumerate() {
            for _ in 0..per_class {
                let (sx, sy) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
                for py in 0..side {
                    for px in 0..side {
                        let (x, y) = ((px as f64 + 0.5) / side as f64, (py as f64 + 0.5) / side as f64);
                        let mut rgb = [0.1f64; 3];
                        for &(cx, cy, r, col) in blobs {
                            let d2 = (x - cx - sx).powi(2) + (y - cy - sy).powi(2);
                            let w = (-d2 / (2.0 * r * r)).exp();
                            for c in 0..3 {
                                rgb[c] += w * col[c];
                            }
                        }
                        for c in 0..3 {
                            let v = rgb[c] + noise.sample(&mut rng);
                            buf[(c * side + py) * side + px] = v.clamp(0.0, 1.0) as f32;
                        }
                    }
                }
                split.push(&buf, class);
            }
        }
        split
    };
    let train = make(sizes.train_per_class);
    let test = make(sizes.test_per_class);
    Dataset { info, train, test }
}

// ---------------------------------------------------------------------------
// per-class directory format

fn read_info(root: &Path) -> Result<DatasetInfo> {
    let path = root.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Loads a dataset stored in the per-class layout described in the module docs.
pub fn load_dir(root: &Path) -> Result<Dataset> {
    let info = read_info(root)?;
    let image_len = info.image_len();
    if image_len == 0 || info.n_classes == 0 {
        return Err(Error::InvalidValue(format!("degenerate dataset header in {}", root.display())));
    }
    let read_split = |name: &str| -> Result<Split> {
        let mut split = Split::new(image_len);
        for class in 0..info.n_classes {
            let path = root.join(name).join(format!("class_{class}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % image_len != 0 {
                return Err(Error::shape(
                    format!("multiple of {image_len} bytes"),
                    format!("{} bytes in {}", bytes.len(), path.display()),
                ));
            }
            for chunk in bytes.chunks_exact(image_len) {
                let img: Vec<f32> = chunk.iter().map(|&b| b as f32 / 255.0).collect();
                split.push(&img, class);
            }
        }
        Ok(split)
    };
    let train = read_split("train")?;
    let test = read_split("test")?;
    Ok(Dataset { info, train, test })
}

/// Writes `data` in the per-class layout (pixels quantized to u8).
pub fn save_dir(data: &Dataset, root: &Path) -> Result<()> {
    for name in ["train", "test"] {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let header = serde_json::to_string_pretty(&data.info).map_err(|e| Error::Serde(e.to_string()))?;
    let path = root.join("dataset.json");
    fs::write(&path, header).map_err(|e| Error::io(&path, e))?;
    for (name, split) in [("train", &data.train), ("test", &data.test)] {
        for class in 0..data.info.n_classes {
            let mut bytes = Vec::new();
            for i in split.indices_where(|l| l == class) {
                bytes.extend(split.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
            let path = root.join(name).join(format!("class_{class}.bin"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
