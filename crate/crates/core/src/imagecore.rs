//! Image containers, normalization and file formats.
//!
//! Three on-disk formats are handled here:
//!
//! * binary 8-bit PGM (`P5`), values scaled to `[0, 1]` on load;
//! * the `OSSR1` raw float container: the magic bytes `OSSR1`, a `u32`
//!   little-endian rank, `rank` little-endian `u32` dimensions, then the
//!   product of the dimensions as little-endian `f32` values;
//! * the dataset directory layout (`images/NNNN.pgm`, `masks/NNNN.pgm`,
//!   `labels.csv` with header `filename,class_id`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Pixel spacing used when neither a sidecar nor the caller supplies one.
pub const DEFAULT_SPACING_MM: f64 = 0.3;

pub const RAW_MAGIC: &[u8; 5] = b"OSSR1";

/// Number of bone classes: knee, femur, radius, tibia.
pub const NUM_CLASSES: usize = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["knee", "femur", "radius", "tibia"];

/// Physical pixel size in millimetres along rows (depth) and columns (lateral).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub row_mm: f64,
    pub col_mm: f64,
}

impl Spacing {
    pub fn new(row_mm: f64, col_mm: f64) -> Result<Self> {
        if !(row_mm > 0.0 && col_mm > 0.0 && row_mm.is_finite() && col_mm.is_finite()) {
            return Err(Error::InvalidImage(format!(
                "spacing must be positive and finite, got ({row_mm}, {col_mm})"
            )));
        }
        Ok(Spacing { row_mm, col_mm })
    }

    pub fn isotropic(mm: f64) -> Result<Self> {
        Spacing::new(mm, mm)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing {
            row_mm: DEFAULT_SPACING_MM,
            col_mm: DEFAULT_SPACING_MM,
        }
    }
}

/// Single-channel 2-D scalar field stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    rows: usize,
    cols: usize,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(rows: usize, cols: usize, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite value at index {i}")));
        }
        Ok(Image2D {
            rows,
            cols,
            spacing,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, spacing: Spacing) -> Self {
        Self::filled(rows, cols, spacing, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, spacing: Spacing, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        assert!(value.is_finite());
        Image2D {
            rows,
            cols,
            spacing,
            data: vec![value; rows * cols],
        }
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Image2D {
            rows,
            cols,
            spacing,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn same_dims(&self, other: &Image2D) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Element-wise map producing a new image with the same geometry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image2D {
        Image2D {
            rows: self.rows,
            cols: self.cols,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two equally sized images.
    pub fn zip_map(&self, other: &Image2D, f: impl Fn(f64, f64) -> f64) -> Result<Image2D> {
        if !self.same_dims(other) {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Image2D {
            rows: self.rows,
            cols: self.cols,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the `rows x cols` window whose top-left corner is `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Image2D {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        Image2D::from_fn(rows, cols, self.spacing, |r, c| self.get(r0 + r, c0 + c))
    }
}

/// Affinely maps `[min, max]` onto `[0, 1]`. A constant image maps to zeros.
pub fn normalize01(image: &Image2D) -> Image2D {
    let (lo, hi) = image.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        return Image2D::zeros(image.rows, image.cols, image.spacing);
    }
    image.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// One training or test example with its dilated ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image2D,
    pub gt_contour: Vec<(usize, usize)>,
    pub gt_mask: Image2D,
    pub class_id: u8,
}

impl LabeledSample {
    pub fn new(
        image: Image2D,
        gt_contour: Vec<(usize, usize)>,
        gt_mask: Image2D,
        class_id: u8,
    ) -> Result<Self> {
        if !image.same_dims(&gt_mask) {
            return Err(Error::Dimension("mask and image differ in size".into()));
        }
        if gt_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidImage("mask values must be exactly 0 or 1".into()));
        }
        if class_id as usize >= NUM_CLASSES {
            return Err(Error::InvalidImage(format!("class id {class_id} out of range")));
        }
        if let Some(&(r, c)) = gt_contour
            .iter()
            .find(|&&(r, c)| r >= image.rows() || c >= image.cols())
        {
            return Err(Error::InvalidImage(format!("contour point ({r}, {c}) outside image")));
        }
        Ok(LabeledSample {
            image,
            gt_contour,
            gt_mask,
            class_id,
        })
    }
}

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

/// Loads an 8-bit binary PGM. Spacing comes from a `<file>.spacing` sidecar
/// (two numbers: row and column mm per pixel) when present, else the default.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image2D> {
    let path = path.as_ref();
    let spacing = read_spacing_sidecar(path)?.unwrap_or_default();
    load_pgm_with_spacing(path, spacing)
}

pub fn load_pgm_with_spacing(path: impl AsRef<Path>, spacing: Spacing) -> Result<Image2D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, spacing)
}

pub fn decode_pgm(bytes: &[u8], spacing: Spacing) -> Result<Image2D> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Format(format!(
            "expected P5 magic, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let cols = parse_header_number(bytes, &mut pos, "width")?;
    let rows = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 {
        return Err(Error::Format("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(Error::UnsupportedDepth(maxval as u32));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    pos += 1;
    let expected = rows * cols;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Length {
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Image2D::new(rows, cols, spacing, data)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Format(format!("bad PGM {what}: {:?}", String::from_utf8_lossy(tok))))
}

/// Quantizes with `round(clip(v, 0, 1) * 255)`, ties rounding up.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm(image: &Image2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.cols, image.rows).into_bytes();
    out.extend(image.data.iter().map(|&v| quantize_u8(v)));
    out
}

pub fn save_pgm(image: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

fn spacing_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".spacing");
    PathBuf::from(s)
}

pub fn read_spacing_sidecar(path: &Path) -> Result<Option<Spacing>> {
    let side = spacing_sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let nums: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Format(format!("bad spacing sidecar {}: {e}", side.display())))?;
    match nums.as_slice() {
        [mm] => Spacing::isotropic(*mm).map(Some),
        [r, c] => Spacing::new(*r, *c).map(Some),
        _ => Err(Error::Format(format!(
            "spacing sidecar {} must hold one or two numbers",
            side.display()
        ))),
    }
}

pub fn write_spacing_sidecar(path: &Path, spacing: Spacing) -> Result<()> {
    let side = spacing_sidecar_path(path);
    fs::write(&side, format!("{} {}\n", spacing.row_mm, spacing.col_mm))
        .map_err(|e| Error::io(&side, e))
}

// ---------------------------------------------------------------------------
// OSSR1 raw float container
// ---------------------------------------------------------------------------

/// N-dimensional `f32` array as stored in the raw container.
#[derive(Debug, Clone, PartialEq)]
pub struct RawArray {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl RawArray {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Format(format!("dimensions must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::Length {
                expected: n,
                found: values.len(),
            });
        }
        Ok(RawArray { dims, values })
    }

    pub fn from_image(image: &Image2D) -> Self {
        RawArray {
            dims: vec![image.rows, image.cols],
            values: image.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Interprets a rank-2 array as an image.
    pub fn to_image(&self, spacing: Spacing) -> Result<Image2D> {
        match self.dims.as_slice() {
            [rows, cols] => Image2D::new(
                *rows,
                *cols,
                spacing,
                self.values.iter().map(|&v| v as f64).collect(),
            ),
            d => Err(Error::Format(format!("expected rank-2 array, found dims {d:?}"))),
        }
    }

    /// Splits the leading axis of a rank-3 array into images.
    pub fn to_images(&self, spacing: Spacing) -> Result<Vec<Image2D>> {
        match self.dims.as_slice() {
            [n, rows, cols] => (0..*n)
                .map(|k| {
                    let s = k * rows * cols;
                    Image2D::new(
                        *rows,
                        *cols,
                        spacing,
                        self.values[s..s + rows * cols].iter().map(|&v| v as f64).collect(),
                    )
                })
                .collect(),
            d => Err(Error::Format(format!("expected rank-3 array, found dims {d:?}"))),
        }
    }

    pub fn stack_images(images: &[&Image2D]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("no images to stack".into()))?;
        if images.iter().any(|im| !im.same_dims(first)) {
            return Err(Error::Dimension("stacked images differ in size".into()));
        }
        let values = images
            .iter()
            .flat_map(|im| im.data.iter().map(|&v| v as f32))
            .collect();
        RawArray::new(vec![images.len(), first.rows, first.cols], values)
    }
}

/// Appends the encoded record (without magic) to `out`.
pub(crate) fn encode_raw_record(array: &RawArray, out: &mut Vec<u8>) {
    out.extend_from_slice(&(array.dims.len() as u32).to_le_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(array.values.len() * 4);
    for v in &array.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_raw(array: &RawArray) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    encode_raw_record(array, &mut out);
    out
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(Error::Length {
                expected: n,
                found: remaining,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn expect_magic(&mut self) -> Result<()> {
        let m = self
            .take(RAW_MAGIC.len())
            .map_err(|_| Error::Format("file too short for OSSR1 magic".into()))?;
        if m != RAW_MAGIC {
            return Err(Error::Format("OSSR1 magic not found".into()));
        }
        Ok(())
    }

    pub(crate) fn raw_record(&mut self) -> Result<RawArray> {
        let rank = self.u32()? as usize;
        if rank == 0 {
            return Err(Error::Format("rank 0 is not a raw array (model container?)".into()));
        }
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        if dims.contains(&0) {
            return Err(Error::Format(format!("dimensions must be positive, got {dims:?}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        let payload = self.take(n * 4)?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        RawArray::new(dims, values)
    }
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawArray> {
    let mut reader = ByteReader::new(bytes);
    reader.expect_magic()?;
    let array = reader.raw_record()?;
    if !reader.is_done() {
        return Err(Error::Format("trailing bytes after raw payload".into()));
    }
    Ok(array)
}

pub fn save_raw(array: &RawArray, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raw(array)).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<RawArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes)
}

pub fn save_image_raw(image: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    save_raw(&RawArray::from_image(image), path)
}

pub fn load_image_raw(path: impl AsRef<Path>, spacing: Spacing) -> Result<Image2D> {
    load_raw(path)?.to_image(spacing)
}

// ---------------------------------------------------------------------------
// Dataset layout
// ---------------------------------------------------------------------------

pub fn sample_filename(index: usize) -> String {
    format!("{index:04}.pgm")
}

/// Writes one sample into `images/`, `masks/` of `dir`; labels are written
/// separately by [`write_labels`].
pub fn write_sample(dir: &Path, filename: &str, sample: &LabeledSample) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    save_pgm(&sample.image, dir.join("images").join(filename))?;
    save_pgm(&sample.gt_mask, dir.join("masks").join(filename))
}

pub fn write_labels(dir: &Path, labels: &[(String, u8)]) -> Result<()> {
    let path = dir.join("labels.csv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut text = String::from("filename,class_id\n");
    for (name, class) in labels {
        text.push_str(&format!("{name},{class}\n"));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn read_labels(dir: &Path) -> Result<Vec<(String, u8)>> {
    let path = dir.join("labels.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "filename,class_id" => {}
        other => {
            return Err(Error::Format(format!(
                "{}: expected header 'filename,class_id', found {other:?}",
                path.display()
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (name, class) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad labels line {line:?}")))?;
            let class: u8 = class
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad class id in {line:?}")))?;
            if class as usize >= NUM_CLASSES {
                return Err(Error::Format(format!("class id out of range in {line:?}")));
            }
            Ok((name.trim().to_string(), class))
        })
        .collect()
}
