//! Priors, synthetic planar datasets and raw-image ingestion.
//!
//! Batches are `[n, d]` row-major tensors. Images are flattened channel-first
//! with pixels in `[0, 1]`.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::ImageShape;
use crate::{Rng, Scalar, Tensor};

pub const IVG_MAGIC: &[u8; 4] = b"IVG1";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("latent dimension must be at least 1")]
    ZeroLatent,
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: image is {found:?} (c, h, w), expected {expected:?}")]
    Resolution {
        path: PathBuf,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// `n` i.i.d. standard normal rows of width `d_z`.
pub fn sample_prior<T: Scalar>(d_z: usize, n: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(DataError::EmptyBatch);
    }
    if d_z == 0 {
        return Err(DataError::ZeroLatent);
    }
    let data = (0..n * d_z)
        .map(|_| T::lit(StandardNormal.sample(rng)))
        .collect();
    Ok(Tensor::matrix(n, d_z, data))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// `k` modes evenly spaced on a circle.
    GaussRing { k: usize, radius: f64, sigma: f64 },
    /// `k × k` modes on a square lattice with unit spacing, centered at 0.
    GaussGrid { k: usize, sigma: f64 },
    /// Uniform over the dark cells of a 4×4 board on `[-2, 2]²`.
    Checkerboard,
    ImageDir { path: PathBuf, shape: ImageShape },
}

impl DatasetSpec {
    pub const DEFAULT: DatasetSpec = DatasetSpec::GaussRing { k: 8, radius: 2.0, sigma: 0.05 };

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::ImageDir { shape, .. } => shape.len(),
            _ => 2,
        }
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        match self {
            DatasetSpec::ImageDir { shape, .. } => Some(*shape),
            _ => None,
        }
    }

    /// Mode centers of the Gaussian mixtures; empty for other kinds.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        match *self {
            DatasetSpec::GaussRing { k, radius, .. } => (0..k)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / k as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            DatasetSpec::GaussGrid { k, .. } => {
                let off = (k as f64 - 1.0) / 2.0;
                (0..k * k)
                    .map(|i| [(i / k) as f64 - off, (i % k) as f64 - off])
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Spec(m.into()));
        match *self {
            DatasetSpec::GaussRing { k, radius, sigma } => {
                if k == 0 {
                    return bad("gauss-ring needs k >= 1");
                }
                if !(sigma > 0.0) || !radius.is_finite() {
                    return bad("gauss-ring needs sigma > 0 and a finite radius");
                }
            }
            DatasetSpec::GaussGrid { k, sigma } => {
                if k == 0 || !(sigma > 0.0) {
                    return bad("gauss-grid needs k >= 1 and sigma > 0");
                }
            }
            DatasetSpec::Checkerboard => {}
            DatasetSpec::ImageDir { shape, .. } => {
                if shape.is_empty() || !matches!(shape.channels, 1 | 3) {
                    return bad("image-dir needs a positive resolution and 1 or 3 channels");
                }
            }
        }
        Ok(())
    }
}

/// `gauss-ring`, `gauss-ring(8,2,0.05)`, `gauss-grid(5,0.05)`, `checkerboard`,
/// `image-dir(<path>,<h>x<w>x<c>)`.
impl FromStr for DatasetSpec {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], s[i + 1..s.len() - 1].split(',').map(str::trim).collect()),
            Some(_) => return Err(DataError::Spec(format!("unbalanced parentheses in {s:?}"))),
            None => (s, Vec::new()),
        };
        let num = |i: usize, default: f64| -> Result<f64> {
            match args.get(i) {
                None => Ok(default),
                Some(a) => a.parse().map_err(|_| DataError::Spec(format!("bad number {a:?} in {s:?}"))),
            }
        };
        let count = |i: usize, default: usize| -> Result<usize> {
            match args.get(i) {
                None => Ok(default),
                Some(a) => a.parse().map_err(|_| DataError::Spec(format!("bad count {a:?} in {s:?}"))),
            }
        };
        let spec = match name {
            "gauss-ring" if args.len() <= 3 => DatasetSpec::GaussRing {
                k: count(0, 8)?,
                radius: num(1, 2.0)?,
                sigma: num(2, 0.05)?,
            },
            "gauss-grid" if args.len() <= 2 => DatasetSpec::GaussGrid { k: count(0, 5)?, sigma: num(1, 0.05)? },
            "checkerboard" if args.is_empty() => DatasetSpec::Checkerboard,
            "image-dir" if args.len() == 2 => {
                let dims: Vec<usize> = args[1].split('x').map(|d| d.parse().unwrap_or(0)).collect();
                let [h, w, c] = dims[..] else {
                    return Err(DataError::Spec(format!("resolution must be <h>x<w>x<c>, got {:?}", args[1])));
                };
                DatasetSpec::ImageDir { path: PathBuf::from(args[0]), shape: ImageShape::new(c, h, w) }
            }
            _ => return Err(DataError::Spec(format!("unknown dataset {s:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::GaussRing { k, radius, sigma } => write!(f, "gauss-ring({k},{radius},{sigma})"),
            DatasetSpec::GaussGrid { k, sigma } => write!(f, "gauss-grid({k},{sigma})"),
            DatasetSpec::Checkerboard => f.write_str("checkerboard"),
            DatasetSpec::ImageDir { path, shape } => {
                write!(f, "image-dir({},{}x{}x{})", path.display(), shape.height, shape.width, shape.channels)
            }
        }
    }
}

/// Checkerboard cell of a point, or `None` outside the board.
pub fn checker_cell(p: [f64; 2]) -> Option<(usize, usize)> {
    let idx = |v: f64| (-2.0..2.0).contains(&v).then(|| (v + 2.0).floor() as usize);
    Some((idx(p[0])?, idx(p[1])?))
}

/// Dark cells are those with an even index sum.
pub fn checker_allowed(p: [f64; 2]) -> bool {
    checker_cell(p).is_some_and(|(i, j)| (i + j) % 2 == 0)
}

/// A dataset ready to sample from. Image directories are decoded once.
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: DatasetSpec,
    /// Decoded images, each `shape.len()` values in `[0, 1]`.
    images: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn open(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let images = match &spec {
            DatasetSpec::ImageDir { path, shape } => load_image_dir(path, *shape)?,
            _ => Vec::new(),
        };
        Ok(Self { spec, images })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn sample<T: Scalar>(&self, n: usize, rng: &mut Rng) -> Result<Tensor<T>> {
        if n == 0 {
            return Err(DataError::EmptyBatch);
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        let gauss = |rng: &mut Rng| -> f64 { StandardNormal.sample(rng) };
        match self.spec {
            DatasetSpec::GaussRing { sigma, .. } | DatasetSpec::GaussGrid { sigma, .. } => {
                let centers = self.spec.centers();
                for _ in 0..n {
                    let c = centers[rng.random_range(0..centers.len())];
                    out.push(c[0] + sigma * gauss(rng));
                    out.push(c[1] + sigma * gauss(rng));
                }
            }
            DatasetSpec::Checkerboard => {
                for _ in 0..n {
                    let cell = rng.random_range(0..8usize);
                    let i = cell / 2;
                    let j = 2 * (cell % 2) + i % 2;
                    out.push(i as f64 - 2.0 + rng.random::<f64>());
                    out.push(j as f64 - 2.0 + rng.random::<f64>());
                }
            }
            DatasetSpec::ImageDir { .. } => {
                for _ in 0..n {
                    out.extend_from_slice(&self.images[rng.random_range(0..self.images.len())]);
                }
            }
        }
        Ok(Tensor::matrix(n, d, out.into_iter().map(T::lit).collect()))
    }
}

/// Header plus payload of one raw image file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImages {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `count · h · w · c` bytes, each image height-major with interleaved channels.
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.height * self.width * self.channels).max(1)
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(IVG_MAGIC)?;
        for v in [self.count(), self.height, self.width, self.channels] {
            let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "extent exceeds u32"))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| DataError::Io { path: path.to_owned(), source };
        let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
        self.write_to(&mut f).and_then(|_| f.flush()).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| DataError::Io { path: path.to_owned(), source })?;
        Self::parse(&bytes).map_err(|detail| DataError::Format { path: path.to_owned(), detail })
    }

    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..4] != IVG_MAGIC {
            return Err("missing IVG1 header".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (count, height, width, channels) = (word(0), word(1), word(2), word(3));
        let payload = count
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(channels))
            .ok_or("header extents overflow")?;
        if bytes.len() - 20 != payload {
            return Err(format!("payload is {} bytes, header promises {payload}", bytes.len() - 20));
        }
        if count == 0 || payload == 0 {
            return Err("file holds no pixels".into());
        }
        Ok(Self { height, width, channels, pixels: bytes[20..].to_vec() })
    }

    /// Image `i` as channel-first values in `[0, 1]`.
    pub fn decode(&self, i: usize) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let img = &self.pixels[i * h * w * c..(i + 1) * h * w * c];
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = img[(y * w + x) * c + ch] as f64 / 255.0;
                }
            }
        }
        out
    }
}

/// Every `*.ivg` file in `dir`, in name order.
fn load_image_dir(dir: &Path, shape: ImageShape) -> Result<Vec<Vec<f64>>> {
    let io_err = |source| DataError::Io { path: dir.to_owned(), source };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()
        .map_err(io_err)?;
    files.retain(|p| p.extension().is_some_and(|e| e == "ivg"));
    files.sort();
    let mut images = Vec::new();
    for path in files {
        let raw = RawImages::load(&path)?;
        let found = (raw.channels, raw.height, raw.width);
        let expected = (shape.channels, shape.height, shape.width);
        if found != expected {
            return Err(DataError::Resolution { path, expected, found });
        }
        images.extend((0..raw.count()).map(|i| raw.decode(i)));
    }
    if images.is_empty() {
        return Err(DataError::Format { path: dir.to_owned(), detail: "no .ivg images found".into() });
    }
    Ok(images)
}
