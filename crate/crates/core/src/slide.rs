//! Bags: synthetic slides, raster patching, patch encoders and the binary
//! feature cache.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::seed;

/// Grid position of a patch: `(column, row)`.
pub type Coord = (u32, u32);

/// One slide: patch coordinates and their embeddings, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub patient_id: String,
    pub label: u8,
    pub coords: Vec<Coord>,
    pub features: Matrix,
}

impl Bag {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: u8,
        coords: Vec<Coord>,
        features: Matrix,
    ) -> Result<Self> {
        let bag = Bag {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            label,
            coords,
            features,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidLabel(self.label));
        }
        if self.coords.is_empty() {
            return Err(Error::EmptyBag);
        }
        if self.coords.len() != self.features.rows() {
            return Err(Error::shape(format!(
                "{} coordinates but {} feature rows",
                self.coords.len(),
                self.features.rows()
            )));
        }
        let mut sorted = self.coords.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config(format!(
                "slide {} has duplicate patch coordinates",
                self.slide_id
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite("bag features"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Grid extent `(columns, rows)` covering every coordinate.
    pub fn grid_extent(&self) -> (u32, u32) {
        let w = self.coords.iter().map(|c| c.0).max().map_or(0, |v| v + 1);
        let h = self.coords.iter().map(|c| c.1).max().map_or(0, |v| v + 1);
        (w, h)
    }
}

// ---------------------------------------------------------------------------
// synthetic slides

/// Parameters of a synthetic slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: u32,
    pub height: u32,
    /// Fraction of the grid covered by the discriminative region.
    pub signal_fraction: f64,
    /// Norm of the class-dependent mean shift inside the region.
    pub signal_shift: f64,
    /// Standard deviation of the background features.
    pub noise: f64,
    pub dim: usize,
    pub seed: u64,
    /// Seed of the per-class shift directions; shared by a whole dataset.
    pub prototype_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 100,
            height: 160,
            signal_fraction: 0.05,
            signal_shift: 2.0,
            noise: 1.0,
            dim: 32,
            seed: 0,
            prototype_seed: 0x5EED,
        }
    }
}

impl SynthSpec {
    pub fn area(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Number of patches in the planted region.
    pub fn signal_count(&self) -> usize {
        (self.signal_fraction * self.area() as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::config("synthetic grid has zero area"));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return Err(Error::config("signal fraction must lie in (0, 1]"));
        }
        if self.signal_count() == 0 {
            return Err(Error::config("signal fraction yields zero patches"));
        }
        if self.dim == 0 {
            return Err(Error::config("feature width must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.signal_shift.is_finite()) {
            return Err(Error::config("noise and shift must be finite, noise nonnegative"));
        }
        Ok(())
    }
}

/// Placement of the planted region: a block `width` columns wide, filled
/// row by row from `(x0, y0)` until `count` patches are covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub count: usize,
}

impl Region {
    fn place(spec: &SynthSpec, rng: &mut impl Rng) -> Region {
        let count = spec.signal_count();
        let square = (count as f64).sqrt().ceil() as u32;
        let fit = count.div_ceil(spec.height as usize) as u32;
        let width = square.max(fit).clamp(1, spec.width);
        let rows = count.div_ceil(width as usize) as u32;
        let x0 = rng.gen_range(0..=spec.width - width);
        let y0 = rng.gen_range(0..=spec.height.saturating_sub(rows));
        Region {
            x0,
            y0,
            width,
            count,
        }
    }

    pub fn contains(&self, (x, y): Coord) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.width {
            return false;
        }
        let offset = (y - self.y0) as usize * self.width as usize + (x - self.x0) as usize;
        offset < self.count
    }
}

/// Unit-norm mean-shift direction of class `label`.
pub fn class_prototype(label: u8, dim: usize, prototype_seed: u64) -> Vec<f64> {
    let mut rng = seed::rng_for(prototype_seed, &["prototype".into(), u64::from(label).into()]);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

/// A generated slide plus the ground truth of where its signal lives.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub bag: Bag,
    pub region: Region,
    /// Indices of patches inside the planted region.
    pub signal: Vec<usize>,
}

/// Generate a fully tissue-covered grid, row-major. Background features are
/// `N(0, noise²)`; patches in the planted region are shifted by
/// `signal_shift` along the class prototype.
pub fn generate_synthetic(
    spec: &SynthSpec,
    slide_id: &str,
    patient_id: &str,
    label: u8,
) -> Result<SyntheticSlide> {
    spec.validate()?;
    if label > 1 {
        return Err(Error::InvalidLabel(label));
    }
    let mut rng = seed::rng_for(spec.seed, &["synth".into()]);
    let region = Region::place(spec, &mut rng);
    let shift: Vec<f64> = class_prototype(label, spec.dim, spec.prototype_seed)
        .into_iter()
        .map(|v| v * spec.signal_shift)
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;

    let mut coords = Vec::with_capacity(spec.area());
    let mut features = Matrix::zeros(spec.area(), spec.dim);
    let mut signal = Vec::with_capacity(region.count);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let idx = coords.len();
            coords.push((x, y));
            let row = features.row_mut(idx);
            for v in row.iter_mut() {
                *v = noise.sample(&mut rng);
            }
            if region.contains((x, y)) {
                signal.push(idx);
                for (v, s) in row.iter_mut().zip(&shift) {
                    *v += s;
                }
            }
        }
    }
    let bag = Bag::new(slide_id, patient_id, label, coords, features)?;
    Ok(SyntheticSlide {
        bag,
        region,
        signal,
    })
}

/// Layout of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub slides: usize,
    pub patients: usize,
    /// Fraction of patients in class 1.
    pub positive_fraction: f64,
    pub slide: SynthSpec,
    pub seed: u64,
}

/// Generate a cohort: patients `0..n` with the first `round(n·(1−p))` in
/// class 0, slides dealt to patients round-robin. Each slide's generator
/// seed is derived from the cohort seed and slide index.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<SyntheticSlide>> {
    if spec.patients == 0 || spec.slides < spec.patients {
        return Err(Error::config("cohort needs at least one slide per patient"));
    }
    if !(0.0..=1.0).contains(&spec.positive_fraction) {
        return Err(Error::config("positive fraction must lie in [0, 1]"));
    }
    let negatives = (spec.patients as f64 * (1.0 - spec.positive_fraction)).round() as usize;
    (0..spec.slides)
        .map(|s| {
            let patient = s % spec.patients;
            let label = u8::from(patient >= negatives);
            let slide = SynthSpec {
                seed: seed::derive(spec.seed, &["cohort-slide".into(), s.into()]),
                ..spec.slide.clone()
            };
            generate_synthetic(
                &slide,
                &format!("slide_{s:04}"),
                &format!("patient_{patient:03}"),
                label,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// rasters, tissue detection, tiling

/// 8-bit RGB image, interleaved, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Raster {
            width,
            height,
            pixels,
        }
    }

    /// Load a PNG or PNM file as RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        Ok(Raster {
            width: img.width(),
            height: img.height(),
            pixels: img.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .ok_or_else(|| Error::shape("raster buffer does not match its dimensions"))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// HSV saturation on a `[0, 1]` scale: `(max − min) / max`, 0 for black.
#[inline]
pub fn saturation([r, g, b]: [u8; 3]) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max == 0 {
        0.0
    } else {
        f64::from(max - min) / f64::from(max)
    }
}

pub const DEFAULT_SATURATION_THRESHOLD: f64 = 0.07;
/// Minimum fraction of saturated pixels for a patch to count as tissue.
pub const TISSUE_COVERAGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub columns: u32,
    pub rows: u32,
    pub cells: Vec<bool>,
    pub threshold: f64,
}

impl TissueMask {
    pub fn full(columns: u32, rows: u32) -> Self {
        TissueMask {
            columns,
            rows,
            cells: vec![true; columns as usize * rows as usize],
            threshold: 0.0,
        }
    }

    #[inline]
    pub fn is_tissue(&self, col: u32, row: u32) -> bool {
        self.cells[row as usize * self.columns as usize + col as usize]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

fn grid_dims(raster: &Raster, patch_size: u32) -> Result<(u32, u32)> {
    if patch_size == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    if raster.width < patch_size || raster.height < patch_size {
        return Err(Error::config(format!(
            "{}x{} image is smaller than one {patch_size}px patch",
            raster.width, raster.height
        )));
    }
    Ok((raster.width / patch_size, raster.height / patch_size))
}

/// Patch-level tissue detection: a patch is tissue when at least half its
/// pixels have saturation above `threshold`. Edge strips narrower than a
/// patch are ignored.
pub fn tissue_mask(raster: &Raster, patch_size: u32, threshold: f64) -> Result<TissueMask> {
    let (columns, rows) = grid_dims(raster, patch_size)?;
    let total = f64::from(patch_size) * f64::from(patch_size);
    let mut cells = Vec::with_capacity(columns as usize * rows as usize);
    for row in 0..rows {
        for col in 0..columns {
            let mut saturated = 0usize;
            for y in row * patch_size..(row + 1) * patch_size {
                for x in col * patch_size..(col + 1) * patch_size {
                    if saturation(raster.pixel(x, y)) > threshold {
                        saturated += 1;
                    }
                }
            }
            cells.push(saturated as f64 / total >= TISSUE_COVERAGE);
        }
    }
    Ok(TissueMask {
        columns,
        rows,
        cells,
        threshold,
    })
}

/// Pixels of one square patch, RGB interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPatch {
    pub size: u32,
    pub pixels: Vec<u8>,
}

/// Non-overlapping row-major tiling keeping only tissue patches.
pub fn extract_grid(
    raster: &Raster,
    patch_size: u32,
    mask: &TissueMask,
) -> Result<(Vec<Coord>, Vec<RawPatch>)> {
    let (columns, rows) = grid_dims(raster, patch_size)?;
    if (columns, rows) != (mask.columns, mask.rows) {
        return Err(Error::shape(format!(
            "mask is {}x{}, patch grid is {columns}x{rows}",
            mask.columns, mask.rows
        )));
    }
    let mut coords = Vec::new();
    let mut patches = Vec::new();
    let side = patch_size as usize;
    for row in 0..rows {
        for col in 0..columns {
            if !mask.is_tissue(col, row) {
                continue;
            }
            let mut pixels = Vec::with_capacity(side * side * 3);
            for y in row * patch_size..(row + 1) * patch_size {
                let start = (y as usize * raster.width as usize + (col * patch_size) as usize) * 3;
                pixels.extend_from_slice(&raster.pixels[start..start + side * 3]);
            }
            coords.push((col, row));
            patches.push(RawPatch {
                size: patch_size,
                pixels,
            });
        }
    }
    Ok((coords, patches))
}

// ---------------------------------------------------------------------------
// encoders

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    RandomProjection,
    ColorHistogram,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_projection" => Ok(EncoderKind::RandomProjection),
            "color_histogram" => Ok(EncoderKind::ColorHistogram),
            other => Err(Error::config(format!("unknown encoder {other}"))),
        }
    }
}

const HISTOGRAM_BINS: usize = 8;

/// Stand-in patch encoders. Both are pure once constructed.
#[derive(Debug, Clone)]
pub enum Encoder {
    /// `dim × pixel_len` Gaussian projection of pixel values in `[0, 1]`,
    /// scaled by `1/√pixel_len`.
    RandomProjection { projection: Matrix, scale: f64 },
    /// Per-channel 8-bin histograms (fractions), tiled or truncated to `dim`.
    ColorHistogram { dim: usize },
}

impl Encoder {
    pub fn new(kind: EncoderKind, patch_size: u32, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("encoder output width must be at least 1"));
        }
        let pixel_len = patch_size as usize * patch_size as usize * 3;
        if pixel_len == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        Ok(match kind {
            EncoderKind::RandomProjection => {
                let mut rng = seed::rng_for(seed, &["projection".into()]);
                let data = (0..dim * pixel_len)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                Encoder::RandomProjection {
                    projection: Matrix::from_vec(dim, pixel_len, data)?,
                    scale: 1.0 / (pixel_len as f64).sqrt(),
                }
            }
            EncoderKind::ColorHistogram => Encoder::ColorHistogram { dim },
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::RandomProjection { projection, .. } => projection.rows(),
            Encoder::ColorHistogram { dim } => *dim,
        }
    }

    /// Encode pixel values given as reals (used directly by linearity checks).
    pub fn encode_values(&self, values: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Encoder::RandomProjection { projection, scale } => {
                if values.len() != projection.cols() {
                    return Err(Error::shape(format!(
                        "patch has {} values, encoder expects {}",
                        values.len(),
                        projection.cols()
                    )));
                }
                for (j, o) in out.iter_mut().enumerate() {
                    *o = dot(projection.row(j), values) * scale;
                }
                Ok(())
            }
            Encoder::ColorHistogram { .. } => {
                let bytes: Vec<u8> = values
                    .iter()
                    .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                    .collect();
                self.encode(&bytes, out)
            }
        }
    }

    pub fn encode(&self, pixels: &[u8], out: &mut [f64]) -> Result<()> {
        if out.len() != self.dim() {
            return Err(Error::shape("encoder output buffer has the wrong width"));
        }
        match self {
            Encoder::RandomProjection { .. } => {
                let values: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
                self.encode_values(&values, out)
            }
            Encoder::ColorHistogram { dim } => {
                if pixels.is_empty() || !pixels.len().is_multiple_of(3) {
                    return Err(Error::shape("patch is not RGB"));
                }
                let mut hist = [0.0f64; 3 * HISTOGRAM_BINS];
                for px in pixels.chunks_exact(3) {
                    for (c, &v) in px.iter().enumerate() {
                        hist[c * HISTOGRAM_BINS + v as usize * HISTOGRAM_BINS / 256] += 1.0;
                    }
                }
                let n = (pixels.len() / 3) as f64;
                for (i, o) in out.iter_mut().enumerate().take(*dim) {
                    *o = hist[i % hist.len()] / n;
                }
                Ok(())
            }
        }
    }
}

/// Encode each patch into one feature row.
pub fn encode_patches(patches: &[RawPatch], encoder: &Encoder) -> Result<Matrix> {
    let mut out = Matrix::zeros(patches.len(), encoder.dim());
    for (i, p) in patches.iter().enumerate() {
        encoder.encode(&p.pixels, out.row_mut(i))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// feature cache

pub const CACHE_MAGIC: &[u8; 8] = b"DRASFEAT";
pub const CACHE_VERSION: u16 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Serialise a bag in the feature-cache layout.
pub fn cache_bytes(bag: &Bag) -> Vec<u8> {
    let (k, m) = (bag.len(), bag.dim());
    let mut buf = Vec::with_capacity(
        8 + 2 + 16 + 1 + 16 + bag.slide_id.len() + bag.patient_id.len() + k * 8 + k * m * 8,
    );
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(k as u64).to_le_bytes());
    buf.extend_from_slice(&(m as u64).to_le_bytes());
    buf.push(bag.label);
    put_str(&mut buf, &bag.slide_id);
    put_str(&mut buf, &bag.patient_id);
    for &(x, y) in &bag.coords {
        buf.extend_from_slice(&x.to_le_bytes());
        buf.extend_from_slice(&y.to_le_bytes());
    }
    for v in bag.features.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCache(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = usize::try_from(self.u64()?)
            .map_err(|_| Error::CorruptCache("string length overflow".into()))?;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::CorruptCache("identifier is not UTF-8".into()))
    }
}

/// Parse the feature-cache layout.
pub fn bag_from_cache_bytes(buf: &[u8]) -> Result<Bag> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CACHE_MAGIC {
        return Err(Error::CorruptCache("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != CACHE_VERSION {
        return Err(Error::CorruptCache(format!("unsupported version {version}")));
    }
    let k = r.u64()? as usize;
    let m = r.u64()? as usize;
    let label = r.take(1)?[0];
    let slide_id = r.string()?;
    let patient_id = r.string()?;
    let expected = k
        .checked_mul(8)
        .and_then(|c| k.checked_mul(m)?.checked_mul(8)?.checked_add(c))
        .ok_or_else(|| Error::CorruptCache("declared size overflows".into()))?;
    if buf.len() - r.pos != expected {
        return Err(Error::CorruptCache(format!(
            "payload is {} bytes, header declares {expected}",
            buf.len() - r.pos
        )));
    }
    let coords = r
        .take(k * 8)?
        .chunks_exact(8)
        .map(|c| {
            (
                u32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                u32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
            )
        })
        .collect();
    let data = r
        .take(k * m * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let features = Matrix::from_vec(k, m, data)?;
    Bag::new(slide_id, patient_id, label, coords, features)
        .map_err(|e| Error::CorruptCache(e.to_string()))
}

pub fn cache_write(bag: &Bag, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&cache_bytes(bag))?;
    f.flush()?;
    Ok(())
}

pub fn cache_read(path: &Path) -> Result<Bag> {
    bag_from_cache_bytes(&fs::read(path).map_err(Error::file(path))?)
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub label: u8,
    pub path: String,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_reader(fs::File::open(path).map_err(Error::file(path))?);
    let headers = r.headers()?.clone();
    if headers != vec!["slide_id", "patient_id", "label", "path"] {
        return Err(Error::config(format!(
            "manifest header must be slide_id,patient_id,label,path, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Resolve a manifest entry's path relative to the manifest's directory.
pub fn resolve_entry(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Load every cached bag listed in a manifest, checking ids and labels agree.
pub fn load_manifest_bags(manifest: &Path) -> Result<Vec<Bag>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            let bag = cache_read(&resolve_entry(manifest, e))?;
            if bag.slide_id != e.slide_id || bag.patient_id != e.patient_id || bag.label != e.label
            {
                return Err(Error::config(format!(
                    "manifest row {} disagrees with its cache file",
                    e.slide_id
                )));
            }
            Ok(bag)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            width: 20,
            height: 10,
            dim: 4,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn full_fraction_marks_every_patch() {
        let spec = SynthSpec {
            signal_fraction: 1.0,
            ..small_spec(1)
        };
        let s = generate_synthetic(&spec, "s", "p", 1).unwrap();
        assert_eq!(s.signal.len(), 200);
        assert!(s.bag.coords.iter().all(|&c| s.region.contains(c)));
    }

    #[test]
    fn default_grid_plants_eight_hundred_patches() {
        let spec = SynthSpec {
            dim: 2,
            ..SynthSpec::default()
        };
        let s = generate_synthetic(&spec, "s", "p", 0).unwrap();
        assert_eq!(s.bag.len(), 16000);
        assert_eq!(s.signal.len(), 800);
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = generate_synthetic(&small_spec(3), "s", "p", 0).unwrap();
        let b = generate_synthetic(&small_spec(3), "s", "p", 0).unwrap();
        let c = generate_synthetic(&small_spec(4), "s", "p", 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.bag.features, c.bag.features);
    }

    #[test]
    fn zero_signal_patches_is_an_error() {
        let spec = SynthSpec {
            signal_fraction: 1e-6,
            ..small_spec(1)
        };
        assert!(matches!(
            generate_synthetic(&spec, "s", "p", 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cohort_assigns_patient_labels() {
        let spec = CohortSpec {
            slides: 12,
            patients: 6,
            positive_fraction: 0.5,
            slide: small_spec(0),
            seed: 9,
        };
        let c = generate_cohort(&spec).unwrap();
        assert_eq!(c.len(), 12);
        for s in &c {
            let p: usize = s.bag.patient_id[8..].parse().unwrap();
            assert_eq!(s.bag.label, u8::from(p >= 3));
        }
    }

    #[test]
    fn saturation_hexcone() {
        assert_eq!(saturation([0, 0, 0]), 0.0);
        assert_eq!(saturation([255, 255, 255]), 0.0);
        assert_eq!(saturation([255, 0, 255]), 1.0);
        assert!((saturation([200, 100, 150]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn white_and_magenta_masks() {
        let white = Raster::from_fn(64, 64, |_, _| [255, 255, 255]);
        assert_eq!(tissue_mask(&white, 16, 0.07).unwrap().count(), 0);
        let magenta = Raster::from_fn(64, 64, |_, _| [255, 0, 255]);
        assert_eq!(tissue_mask(&magenta, 16, 0.07).unwrap().count(), 16);
    }

    #[test]
    fn tiny_image_is_rejected() {
        let r = Raster::from_fn(8, 8, |_, _| [0, 0, 0]);
        assert!(tissue_mask(&r, 16, 0.07).is_err());
    }

    #[test]
    fn tiling_counts_and_order() {
        let r = Raster::from_fn(512, 512, |x, y| [(x % 251) as u8, (y % 241) as u8, 7]);
        let (coords, patches) = extract_grid(&r, 256, &TissueMask::full(2, 2)).unwrap();
        assert_eq!(coords, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        assert_eq!(patches[3].pixels[..3], r.pixel(256, 256));

        let r = Raster::from_fn(600, 600, |_, _| [1, 2, 3]);
        let (coords, _) = extract_grid(&r, 256, &TissueMask::full(2, 2)).unwrap();
        assert_eq!(coords.len(), 4);

        let empty = TissueMask {
            cells: vec![false; 4],
            ..TissueMask::full(2, 2)
        };
        assert!(extract_grid(&r, 256, &empty).unwrap().0.is_empty());
        assert!(extract_grid(&r, 256, &TissueMask::full(3, 2)).is_err());
    }

    #[test]
    fn black_patch_histogram_is_bin_zero() {
        let enc = Encoder::new(EncoderKind::ColorHistogram, 4, 24, 0).unwrap();
        let mut out = vec![0.0; 24];
        enc.encode(&[0u8; 48], &mut out).unwrap();
        for c in 0..3 {
            assert_eq!(out[c * 8], 1.0);
            assert!(out[c * 8 + 1..(c + 1) * 8].iter().all(|&v| v == 0.0));
        }
        // tiled to a wider output
        let wide = Encoder::new(EncoderKind::ColorHistogram, 4, 30, 0).unwrap();
        let mut out = vec![0.0; 30];
        wide.encode(&[0u8; 48], &mut out).unwrap();
        assert_eq!(out[24], 1.0);
    }

    #[test]
    fn encoder_rejects_zero_width() {
        assert!(Encoder::new(EncoderKind::RandomProjection, 4, 0, 0).is_err());
    }

    #[test]
    fn identical_patches_encode_identically() {
        let enc = Encoder::new(EncoderKind::RandomProjection, 4, 8, 3).unwrap();
        let p = RawPatch {
            size: 4,
            pixels: (0..48).map(|i| (i * 5) as u8).collect(),
        };
        let m = encode_patches(&[p.clone(), p], &enc).unwrap();
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn random_projection_is_linear() {
        let enc = Encoder::new(EncoderKind::RandomProjection, 4, 6, 11).unwrap();
        let mut rng = seed::rng(5);
        let a: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..0.5)).collect();
        let b: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..0.5)).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (mut ea, mut eb, mut es) = (vec![0.0; 6], vec![0.0; 6], vec![0.0; 6]);
        enc.encode_values(&a, &mut ea).unwrap();
        enc.encode_values(&b, &mut eb).unwrap();
        enc.encode_values(&sum, &mut es).unwrap();
        for i in 0..6 {
            assert!((es[i] - ea[i] - eb[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_cache_is_an_error() {
        let s = generate_synthetic(&small_spec(2), "slide", "pat", 1).unwrap();
        let bytes = cache_bytes(&s.bag);
        assert_eq!(bag_from_cache_bytes(&bytes).unwrap(), s.bag);
        for cut in [0, 5, 9, 30, bytes.len() - 1] {
            assert!(matches!(
                bag_from_cache_bytes(&bytes[..cut]),
                Err(Error::CorruptCache(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(bag_from_cache_bytes(&bad), Err(Error::CorruptCache(_))));
    }

    #[test]
    fn cache_size_arithmetic() {
        let k = 16230usize;
        let m = 1024usize;
        let bag = Bag::new(
            "slide",
            "patient",
            0,
            (0..k as u32).map(|i| (i % 200, i / 200)).collect(),
            Matrix::zeros(k, m),
        )
        .unwrap();
        let header = 8 + 2 + 8 + 8 + 1 + (8 + 5) + (8 + 7);
        assert_eq!(cache_bytes(&bag).len(), header + k * 8 + k * m * 8);
    }

    #[test]
    fn duplicate_coords_rejected() {
        assert!(Bag::new("s", "p", 0, vec![(0, 0), (0, 0)], Matrix::zeros(2, 1)).is_err());
        assert!(Bag::new("s", "p", 2, vec![(0, 0)], Matrix::zeros(1, 1)).is_err());
    }
}
