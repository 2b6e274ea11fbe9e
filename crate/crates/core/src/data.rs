//! Dataset ingestion and preprocessing.
//!
//! Decoders take raw bytes so they can be driven directly by tests and fuzz
//! targets; the `load_*` wrappers read files and transparently gunzip.
//! Pixels are scaled into `[0, 1]`.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::linalg::Matrix;
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD: usize = 1 + 3072;
pub const CIFAR100_RECORD: usize = 2 + 3072;
pub const USPS_SIDE: usize = 16;
pub const MNIST_SIDE: usize = 28;
pub const STL10_SIDE: usize = 96;

/// Labelled images, one flattened image per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    images: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    /// Builds a dataset, enforcing row/label agreement, label range and
    /// pixel range.
    pub fn new(name: impl Into<String>, images: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let name = name.into();
        if images.rows() != labels.len() {
            bail!(Data, "'{name}': {} images but {} labels", images.rows(), labels.len());
        }
        if class_count == 0 {
            bail!(Data, "'{name}': class count must be positive");
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= class_count) {
            bail!(Data, "'{name}': label {y} at index {i} exceeds class count {class_count}");
        }
        if let Some(x) = images.as_slice().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            bail!(Data, "'{name}': pixel value {x} outside [0, 1]");
        }
        Ok(Dataset { name, images, labels, class_count })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.cols()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Widens the class count, e.g. when a small file does not contain every
    /// class of its family.
    pub fn with_class_count(self, class_count: usize) -> Result<Self> {
        Dataset::new(self.name, self.images, self.labels, class_count)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// Reads a file and gunzips it if it starts with the gzip magic.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode_maybe_gzip(raw)
}

pub fn decode_maybe_gzip(raw: Vec<u8>) -> Result<Vec<u8>> {
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("corrupt gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4-byte slice"))),
        None => bail!(Format, "truncated IDX header"),
    }
}

/// Header-checked view of an IDX image file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdxImages<'a> {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: &'a [u8],
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages<'_>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        bail!(Format, "IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}");
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let Some(need) = count.checked_mul(rows).and_then(|x| x.checked_mul(cols)) else {
        bail!(Format, "IDX image dims {count}x{rows}x{cols} overflow");
    };
    let pixels = &bytes[16..];
    if pixels.len() != need {
        bail!(Format, "IDX image payload is {} bytes, header implies {need}", pixels.len());
    }
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        bail!(Format, "IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}");
    }
    let count = be_u32(bytes, 4)? as usize;
    let labels = &bytes[8..];
    if labels.len() != count {
        bail!(Format, "IDX label payload is {} bytes, header says {count}", labels.len());
    }
    Ok(labels)
}

fn scale_pixels(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&p| p as f64 / 255.0).collect()
}

fn class_count_of(labels: &[usize]) -> usize {
    labels.iter().max().map_or(1, |m| m + 1)
}

/// Decodes an IDX image/label pair. The class count is `max label + 1`.
pub fn parse_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let imgs = parse_idx_images(images)?;
    let labs = parse_idx_labels(labels)?;
    if imgs.count != labs.len() {
        bail!(Data, "'{name}': {} images but {} labels", imgs.count, labs.len());
    }
    let dim = imgs.rows * imgs.cols;
    let labels: Vec<usize> = labs.iter().map(|&l| l as usize).collect();
    let k = class_count_of(&labels);
    Dataset::new(name, Matrix::from_vec(imgs.count, dim, scale_pixels(imgs.pixels))?, labels, k)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let name = images_path.file_name().map_or_else(|| "idx".into(), |n| n.to_string_lossy().into_owned());
    parse_idx(&name, &read_maybe_gzip(images_path)?, &read_maybe_gzip(labels_path)?)
}

/// Serialises images (values already in `[0, 1]`, rounded to bytes) and
/// labels into IDX files. Used to build fixtures and converted datasets.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.input_dim() {
        bail!(Shape, "{rows}x{cols} images do not match input dim {}", ds.input_dim());
    }
    let mut images = Vec::with_capacity(16 + ds.len() * ds.input_dim());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images().as_slice().iter().map(|&x| (x * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &y in ds.labels() {
        if y > u8::MAX as usize {
            bail!(Data, "label {y} does not fit an IDX byte");
        }
        labels.push(y as u8);
    }
    Ok((images, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::C10 => CIFAR10_RECORD,
            CifarVariant::C100 => CIFAR100_RECORD,
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }
}

/// Decodes a CIFAR binary batch. CIFAR-100 records carry a coarse and a
/// fine label; the fine label is used.
pub fn parse_cifar(name: &str, bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        bail!(Format, "'{name}': {} bytes is not a whole number of {rec}-byte records", bytes.len());
    }
    let n = bytes.len() / rec;
    let skip = rec - 3072;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        let y = r[skip - 1] as usize;
        if y >= variant.class_count() {
            bail!(Data, "'{name}': label {y} out of range for {} classes", variant.class_count());
        }
        labels.push(y);
        pixels.extend(r[skip..].iter().map(|&p| p as f64 / 255.0));
    }
    Dataset::new(name, Matrix::from_vec(n, 3072, pixels)?, labels, variant.class_count())
}

pub fn load_cifar(paths: &[impl AsRef<Path>], variant: CifarVariant) -> Result<Dataset> {
    if paths.is_empty() {
        bail!(Config, "no CIFAR batch files given");
    }
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_maybe_gzip(p.as_ref())?);
    }
    let name = match variant {
        CifarVariant::C10 => "cifar10",
        CifarVariant::C100 => "cifar100",
    };
    parse_cifar(name, &all, variant)
}

/// Bilinear resize of a single-channel row-major image using pixel-centre
/// alignment with edge clamping.
pub fn resize_bilinear(src: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = width as f64 / out_w as f64;
    let sy = height as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let fy = y - y0 as f64;
        for ox in 0..out_w {
            let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let fx = x - x0 as f64;
            let top = src[y0 * width + x0] * (1.0 - fx) + src[y0 * width + x1] * fx;
            let bottom = src[y1 * width + x0] * (1.0 - fx) + src[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Maps the libsvm USPS label (1..=10) to a digit; 10 stands for 0.
pub fn usps_digit(label: i64) -> Option<usize> {
    match label {
        1..=9 => Some(label as usize),
        10 => Some(0),
        _ => None,
    }
}

/// Decodes USPS in libsvm format (`label index:value ...`, 1-based indices,
/// values in `[-1, 1]`). Values are mapped to `[0, 1]` by `(v + 1) / 2` and
/// every 16×16 image is resized to 28×28.
pub fn parse_usps_libsvm(name: &str, text: &[u8]) -> Result<Dataset> {
    let text = std::str::from_utf8(text).map_err(|e| Error::Format(format!("'{name}': not UTF-8: {e}")))?;
    const DIM: usize = USPS_SIDE * USPS_SIDE;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let mut fields = line.split_whitespace();
        let Some(head) = fields.next() else { continue };
        let label = head
            .parse::<f64>()
            .ok()
            .filter(|l| l.fract() == 0.0)
            .and_then(|l| usps_digit(l as i64))
            .ok_or_else(|| Error::Format(format!("'{name}' line {lineno}: bad label '{head}'")))?;
        let mut raw = [0.0f64; DIM];
        for field in fields {
            let parsed =
                field.split_once(':').and_then(|(i, v)| Some((i.parse::<usize>().ok()?, v.parse::<f64>().ok()?)));
            let Some((idx, value)) = parsed else {
                bail!(Format, "'{name}' line {lineno}: malformed feature '{field}'");
            };
            if idx == 0 || idx > DIM {
                bail!(Format, "'{name}' line {lineno}: feature index {idx} outside 1..={DIM}");
            }
            if !(-1.0..=1.0).contains(&value) {
                bail!(Format, "'{name}' line {lineno}: value {value} outside [-1, 1]");
            }
            raw[idx - 1] = value;
        }
        let unit: Vec<f64> = raw.iter().map(|v| (v + 1.0) / 2.0).collect();
        let resized = resize_bilinear(&unit, USPS_SIDE, USPS_SIDE, MNIST_SIDE, MNIST_SIDE);
        pixels.extend(resized.into_iter().map(|x| x.clamp(0.0, 1.0)));
        labels.push(label);
    }
    if labels.is_empty() {
        bail!(Format, "'{name}': no samples");
    }
    let n = labels.len();
    Dataset::new(name, Matrix::from_vec(n, MNIST_SIDE * MNIST_SIDE, pixels)?, labels, 10)
}

pub fn load_usps_libsvm(path: &Path) -> Result<Dataset> {
    parse_usps_libsvm("usps", &read_maybe_gzip(path)?)
}

/// Decodes STL-10 binary files (96×96×3 bytes per image, each channel stored
/// column-major; labels 1..=10) and box-filters every image down to 32×32.
/// Output layout matches CIFAR: three row-major 32×32 planes.
pub fn parse_stl10(name: &str, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    const PLANE: usize = STL10_SIDE * STL10_SIDE;
    const IMAGE: usize = 3 * PLANE;
    if images.is_empty() || images.len() % IMAGE != 0 {
        bail!(Format, "'{name}': {} bytes is not a whole number of STL-10 images", images.len());
    }
    let n = images.len() / IMAGE;
    if labels.len() != n {
        bail!(Data, "'{name}': {n} images but {} labels", labels.len());
    }
    let labels = labels
        .iter()
        .map(|&l| match l {
            1..=10 => Ok(l as usize - 1),
            _ => Err(Error::Data(format!("'{name}': STL-10 label {l} outside 1..=10"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let out_side = STL10_SIDE / 3;
    let mut pixels = Vec::with_capacity(n * 3 * out_side * out_side);
    for img in images.chunks_exact(IMAGE) {
        for c in 0..3 {
            let plane = &img[c * PLANE..(c + 1) * PLANE];
            for oy in 0..out_side {
                for ox in 0..out_side {
                    let mut acc = 0u32;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (row, col) = (oy * 3 + dy, ox * 3 + dx);
                            acc += plane[col * STL10_SIDE + row] as u32;
                        }
                    }
                    pixels.push(acc as f64 / (9.0 * 255.0));
                }
            }
        }
    }
    Dataset::new(name, Matrix::from_vec(n, 3 * out_side * out_side, pixels)?, labels, 10)
}

pub fn load_stl10(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    parse_stl10("stl10", &read_maybe_gzip(images_path)?, &read_maybe_gzip(labels_path)?)
}

/// Seeded uniform sample of `n` rows without replacement.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        bail!(Config, "cannot take {n} samples from '{}' with {} rows", ds.name(), ds.len());
    }
    let mut rng = seed::rng(seed);
    let picked = index::sample(&mut rng, ds.len(), n).into_vec();
    Ok(ds.select(&picked))
}

/// Ranges for random per-image affine transforms. Translation is a fraction
/// of the image side; rotation is in degrees, counter-clockwise as displayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub translate_frac: (f64, f64),
    pub scale: (f64, f64),
    pub rotate_deg: (f64, f64),
    pub seed: u64,
}

impl TransformSpec {
    pub fn identity(seed: u64) -> Self {
        TransformSpec { translate_frac: (0.0, 0.0), scale: (1.0, 1.0), rotate_deg: (0.0, 0.0), seed }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, (lo, hi)) in [("translate", self.translate_frac), ("scale", self.scale), ("rotate", self.rotate_deg)]
        {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                bail!(Config, "{what} range ({lo}, {hi}) must be finite and ordered");
            }
        }
        if self.scale.0 <= 0.0 {
            bail!(Config, "scale range must be positive, got {:?}", self.scale);
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Concrete transform `q = c + s·R(θ)·(p − c) + t` about the image centre
/// `c`, with translation `t` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
    pub rotate_deg: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { tx: 0.0, ty: 0.0, scale: 1.0, rotate_deg: 0.0 };

    /// Parameters of the exact inverse map: angle `−θ`, scale `1/s` and
    /// translation `−R(−θ)·t / s`.
    pub fn inverse(&self) -> AffineParams {
        let (s, c) = (-self.rotate_deg).to_radians().sin_cos();
        let (dx, dy) = rotate_display(self.tx, self.ty, c, s);
        AffineParams {
            tx: -dx / self.scale,
            ty: -dy / self.scale,
            scale: 1.0 / self.scale,
            rotate_deg: -self.rotate_deg,
        }
    }
}

/// Rotation counter-clockwise as displayed (y axis pointing down).
#[inline]
fn rotate_display(dx: f64, dy: f64, cos: f64, sin: f64) -> (f64, f64) {
    (cos * dx + sin * dy, -sin * dx + cos * dy)
}

/// Resamples one square single-channel image through `params` by inverse
/// mapping with bilinear interpolation; samples outside the source are 0.
pub fn apply_affine(image: &[f64], side: usize, params: &AffineParams) -> Vec<f64> {
    let centre = (side as f64 - 1.0) / 2.0;
    // Inverse map: p = c + R(−θ)·(q − c − t) / s
    let (sin, cos) = (-params.rotate_deg).to_radians().sin_cos();
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= side as isize || y >= side as isize {
            0.0
        } else {
            image[y as usize * side + x as usize]
        }
    };
    let mut out = Vec::with_capacity(side * side);
    for qy in 0..side {
        for qx in 0..side {
            let dx = (qx as f64 - centre - params.tx) / params.scale;
            let dy = (qy as f64 - centre - params.ty) / params.scale;
            let (rx, ry) = rotate_display(dx, dy, cos, sin);
            let (px, py) = (centre + rx, centre + ry);
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut v = 0.0;
            for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    let w = wx * wy;
                    if w != 0.0 {
                        v += w * at(x0 + ox, y0 + oy);
                    }
                }
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Draws one set of parameters per image from `spec` (uniform within each
/// range) and resamples every image. Labels are unchanged.
pub fn transform_affine(ds: &Dataset, spec: &TransformSpec, side: usize) -> Result<Dataset> {
    spec.validate()?;
    if side * side != ds.input_dim() {
        bail!(Config, "input dim {} is not a {side}x{side} square", ds.input_dim());
    }
    let mut rng = seed::rng(spec.seed);
    let mut pixels = Vec::with_capacity(ds.len() * ds.input_dim());
    for r in 0..ds.len() {
        let params = AffineParams {
            tx: draw(&mut rng, spec.translate_frac) * side as f64,
            ty: draw(&mut rng, spec.translate_frac) * side as f64,
            scale: draw(&mut rng, spec.scale),
            rotate_deg: draw(&mut rng, spec.rotate_deg),
        };
        pixels.extend(apply_affine(ds.images().row(r), side, &params));
    }
    Dataset::new(
        format!("{}+affine", ds.name()),
        Matrix::from_vec(ds.len(), ds.input_dim(), pixels)?,
        ds.labels().to_vec(),
        ds.class_count(),
    )
}
