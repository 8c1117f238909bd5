//! Efficiency harness: end-to-end evaluation with patches encoded on demand,
//! swept over encoding batch sizes, timing each cell and accounting the
//! bytes held in patch-pixel and feature buffers.

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelParams;
use crate::sampler::{evaluate, repeat_seed, BagScorer, Method, PatchFeatures, SamplingConfig};
use crate::seed;
use crate::slide::{Coord, Encoder, EncoderKind, Raster, Region, SynthSpec};

/// High-water-mark accounting of instrumented buffers.
#[derive(Debug, Default)]
pub struct BufferTracker {
    current: Cell<usize>,
    peak: Cell<usize>,
}

impl BufferTracker {
    pub fn alloc(&self, bytes: usize) {
        let now = self.current.get() + bytes;
        self.current.set(now);
        if now > self.peak.get() {
            self.peak.set(now);
        }
    }

    pub fn free(&self, bytes: usize) {
        self.current.set(self.current.get().saturating_sub(bytes));
    }

    pub fn current(&self) -> usize {
        self.current.get()
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }
}

/// A slide whose patch pixels are produced on request.
pub trait PatchSource {
    fn slide_id(&self) -> &str;
    fn coords(&self) -> &[Coord];
    fn patch_size(&self) -> u32;
    /// Write the RGB pixels of patch `index` into `buf`.
    fn fill_patch(&self, index: usize, buf: &mut [u8]);

    fn patch_bytes(&self) -> usize {
        self.patch_size() as usize * self.patch_size() as usize * 3
    }
}

/// Procedurally textured slide: pale stained background with a class-tinted
/// region, pixels derived from `(seed, patch index)` so any patch can be
/// rendered independently.
#[derive(Debug, Clone)]
pub struct SyntheticRaster {
    pub slide_id: String,
    pub label: u8,
    pub patch_size: u32,
    pub region: Region,
    pub seed: u64,
    coords: Vec<Coord>,
    in_region: Vec<bool>,
}

impl SyntheticRaster {
    pub fn new(slide_id: &str, label: u8, spec: &SynthSpec, patch_size: u32) -> Result<Self> {
        let s = crate::slide::generate_synthetic(
            &SynthSpec { dim: 1, ..spec.clone() },
            slide_id,
            "bench",
            label,
        )?;
        let mut in_region = vec![false; s.bag.len()];
        for &i in &s.signal {
            in_region[i] = true;
        }
        Ok(SyntheticRaster {
            slide_id: slide_id.to_string(),
            label,
            patch_size,
            region: s.region,
            seed: spec.seed,
            coords: s.bag.coords,
            in_region,
        })
    }
}

impl PatchSource for SyntheticRaster {
    fn slide_id(&self) -> &str {
        &self.slide_id
    }

    fn coords(&self) -> &[Coord] {
        &self.coords
    }

    fn patch_size(&self) -> u32 {
        self.patch_size
    }

    fn fill_patch(&self, index: usize, buf: &mut [u8]) {
        let base: [u8; 3] = match (self.in_region[index], self.label) {
            (false, _) => [225, 170, 200],
            (true, 0) => [110, 50, 150],
            (true, _) => [190, 80, 60],
        };
        let mut state = seed::derive(self.seed, &["pixels".into(), index.into()]);
        for px in buf.chunks_exact_mut(3) {
            state = seed::splitmix64(state);
            let noise = state.to_le_bytes();
            for c in 0..3 {
                px[c] = base[c].saturating_add(noise[c] % 24).saturating_sub(12);
            }
        }
    }
}

/// Patches of a real raster at given tile coordinates.
pub struct RasterPatches<'a> {
    pub slide_id: String,
    pub raster: &'a Raster,
    pub patch_size: u32,
    pub coords: Vec<Coord>,
}

impl PatchSource for RasterPatches<'_> {
    fn slide_id(&self) -> &str {
        &self.slide_id
    }

    fn coords(&self) -> &[Coord] {
        &self.coords
    }

    fn patch_size(&self) -> u32 {
        self.patch_size
    }

    fn fill_patch(&self, index: usize, buf: &mut [u8]) {
        let (col, row) = self.coords[index];
        let side = self.patch_size as usize;
        for (dy, chunk) in buf.chunks_exact_mut(side * 3).enumerate() {
            let y = row as usize * side + dy;
            let start = (y * self.raster.width as usize + col as usize * side) * 3;
            chunk.copy_from_slice(&self.raster.pixels[start..start + side * 3]);
        }
    }
}

/// Encodes patches on demand in batches of `batch_size`, reporting every
/// pixel batch and feature row to a [`BufferTracker`].
pub struct LiveFeatures<'a, S: PatchSource + ?Sized> {
    source: &'a S,
    encoder: &'a Encoder,
    batch_size: usize,
    tracker: &'a BufferTracker,
    held: usize,
}

impl<'a, S: PatchSource + ?Sized> LiveFeatures<'a, S> {
    pub fn new(
        source: &'a S,
        encoder: &'a Encoder,
        batch_size: usize,
        tracker: &'a BufferTracker,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if let Encoder::RandomProjection { projection, .. } = encoder {
            if projection.cols() != source.patch_bytes() {
                return Err(Error::config(format!(
                    "encoder expects {} pixel values, patches have {}",
                    projection.cols(),
                    source.patch_bytes()
                )));
            }
        }
        Ok(LiveFeatures {
            source,
            encoder,
            batch_size,
            tracker,
            held: 0,
        })
    }
}

impl<S: PatchSource + ?Sized> Drop for LiveFeatures<'_, S> {
    fn drop(&mut self) {
        self.tracker.free(self.held);
    }
}

impl<S: PatchSource + ?Sized> PatchFeatures for LiveFeatures<'_, S> {
    fn coords(&self) -> &[Coord] {
        self.source.coords()
    }

    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn encode_into(&mut self, indices: &[usize], out: &mut Matrix) -> Result<()> {
        let patch_bytes = self.source.patch_bytes();
        let row_bytes = self.encoder.dim() * std::mem::size_of::<f64>();
        let batch_bytes = self.batch_size * patch_bytes;
        let mut pixels = vec![0u8; batch_bytes];
        let mut row = vec![0.0; self.encoder.dim()];
        for batch in indices.chunks(self.batch_size) {
            self.tracker.alloc(batch_bytes);
            for (slot, &i) in batch.iter().enumerate() {
                self.source
                    .fill_patch(i, &mut pixels[slot * patch_bytes..(slot + 1) * patch_bytes]);
            }
            self.tracker.alloc(batch.len() * row_bytes);
            self.held += batch.len() * row_bytes;
            for slot in 0..batch.len() {
                self.encoder
                    .encode(&pixels[slot * patch_bytes..(slot + 1) * patch_bytes], &mut row)?;
                out.push_row(&row)?;
            }
            self.tracker.free(batch_bytes);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Full,
    Dras,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Full => "full",
            BenchMethod::Dras => "dras",
        }
    }
}

impl std::str::FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BenchMethod::Full),
            "dras" => Ok(BenchMethod::Dras),
            other => Err(Error::config(format!("unknown bench method {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub methods: Vec<BenchMethod>,
    pub repetitions: usize,
    pub encoder: EncoderKind,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_sizes: vec![1, 4, 8, 16, 32, 64],
            methods: vec![BenchMethod::Full, BenchMethod::Dras],
            repetitions: 3,
            encoder: EncoderKind::RandomProjection,
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.contains(&0) {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if self.repetitions.is_multiple_of(2) {
            return Err(Error::config("repetitions must be odd so the median is a run"));
        }
        self.sampling.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub method: BenchMethod,
    pub batch_size: usize,
    pub total_seconds: f64,
    pub mean_seconds_per_bag: f64,
    pub peak_bytes: usize,
    pub patches_encoded: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, method: BenchMethod, batch_size: usize) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.batch_size == batch_size)
    }
}

/// Median of an odd-length sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct RunStats {
    seconds: f64,
    peak: usize,
    encoded: usize,
}

fn run_once<S: PatchSource>(
    scorer: &dyn BagScorer,
    slides: &[S],
    encoder: &Encoder,
    method: BenchMethod,
    batch_size: usize,
    config: &BenchConfig,
) -> Result<RunStats> {
    let tracker = BufferTracker::default();
    let m = match method {
        BenchMethod::Full => Method::Full,
        BenchMethod::Dras => Method::Dras(config.sampling.clone()),
    };
    let mut encoded = 0;
    let start = Instant::now();
    for slide in slides {
        let mut live = LiveFeatures::new(slide, encoder, batch_size, &tracker)?;
        let seed = repeat_seed(config.seed, slide.slide_id(), 0);
        encoded += evaluate(scorer, &mut live, &m, seed)?.patches_encoded;
    }
    Ok(RunStats {
        seconds: start.elapsed().as_secs_f64(),
        peak: tracker.peak(),
        encoded,
    })
}

/// Sweep batch sizes; within each, run one discarded warm-up per method,
/// then `repetitions` timed runs alternating the method order, keeping the
/// median time.
pub fn run_bench<S: PatchSource>(
    model: &ModelParams,
    slides: &[S],
    config: &BenchConfig,
) -> Result<BenchReport> {
    config.validate()?;
    let Some(first) = slides.first() else {
        return Err(Error::config("no slides to benchmark"));
    };
    let encoder = Encoder::new(
        config.encoder,
        first.patch_size(),
        model.embedding_dim(),
        seed::derive(config.seed, &["encoder".into()]),
    )?;
    if slides.iter().any(|s| s.patch_size() != first.patch_size()) {
        return Err(Error::config("all benchmark slides must share a patch size"));
    }
    let mut report = BenchReport::default();
    for &batch in &config.batch_sizes {
        if config.methods.is_empty() {
            break;
        }
        for &method in &config.methods {
            run_once(model, &slides[..1], &encoder, method, batch, config)?;
        }
        let mut runs: Vec<Vec<RunStats>> = config.methods.iter().map(|_| Vec::new()).collect();
        for rep in 0..config.repetitions {
            let mut order: Vec<usize> = (0..config.methods.len()).collect();
            if rep % 2 == 1 {
                order.reverse();
            }
            for k in order {
                runs[k].push(run_once(model, slides, &encoder, config.methods[k], batch, config)?);
            }
        }
        for (k, &method) in config.methods.iter().enumerate() {
            let times: Vec<f64> = runs[k].iter().map(|r| r.seconds).collect();
            let total = median(&times);
            report.cells.push(BenchCell {
                method,
                batch_size: batch,
                total_seconds: total,
                mean_seconds_per_bag: total / slides.len() as f64,
                peak_bytes: runs[k].iter().map(|r| r.peak).max().unwrap_or(0),
                patches_encoded: runs[k][0].encoded,
            });
        }
    }
    Ok(report)
}

/// Method × batch-size grid of time and memory, as text.
pub fn render_table(report: &BenchReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<8} {:>10} {:>14} {:>14} {:>14} {:>16}",
        "method", "batch", "total (s)", "per bag (s)", "peak bytes", "patches encoded"
    )
    .expect("write to string");
    for c in &report.cells {
        writeln!(
            out,
            "{:<8} {:>10} {:>14.4} {:>14.5} {:>14} {:>16}",
            c.method.name(),
            c.batch_size,
            c.total_seconds,
            c.mean_seconds_per_bag,
            c.peak_bytes,
            c.patches_encoded
        )
        .expect("write to string");
    }
    out
}

pub fn render_csv(report: &BenchReport) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record([
        "method",
        "batch_size",
        "total_seconds",
        "mean_seconds_per_bag",
        "peak_bytes",
        "patches_encoded",
    ])?;
    for c in &report.cells {
        w.serialize(c)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_csv(text: &str) -> Result<BenchReport> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let cells = r.deserialize().collect::<std::result::Result<Vec<BenchCell>, _>>()?;
    Ok(BenchReport { cells })
}

pub fn write_report(report: &BenchReport, csv_path: &Path, table_path: &Path) -> Result<()> {
    std::fs::write(csv_path, render_csv(report)?)?;
    std::fs::write(table_path, render_table(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracker_high_water_mark() {
        let t = BufferTracker::default();
        t.alloc(10);
        t.alloc(5);
        t.free(12);
        t.alloc(4);
        assert_eq!((t.current(), t.peak()), (7, 15));
    }

    #[test]
    fn median_ignores_order() {
        let v = [3.0, 1.0, 2.0];
        for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let p: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
            assert_eq!(median(&p), 2.0);
        }
    }

    #[test]
    fn even_repetitions_rejected() {
        let c = BenchConfig {
            repetitions: 2,
            ..BenchConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_report_renders_header_only() {
        let r = BenchReport::default();
        let csv = render_csv(&r).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert_eq!(parse_csv(&csv).unwrap(), r);
        assert_eq!(render_table(&r).lines().count(), 1);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = BenchReport {
            cells: vec![BenchCell {
                method: BenchMethod::Dras,
                batch_size: 16,
                total_seconds: 0.1 + 0.2,
                mean_seconds_per_bag: 1.0 / 3.0,
                peak_bytes: 123_456,
                patches_encoded: 8000,
            }],
        };
        let csv = render_csv(&r).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(parse_csv(&csv).unwrap(), r);
    }

    #[test]
    fn raster_patches_copy_tiles() {
        let raster = Raster::from_fn(8, 4, |x, y| [x as u8, y as u8, 0]);
        let src = RasterPatches {
            slide_id: "r".into(),
            raster: &raster,
            patch_size: 4,
            coords: vec![(1, 0)],
        };
        let mut buf = vec![0u8; src.patch_bytes()];
        src.fill_patch(0, &mut buf);
        assert_eq!(&buf[..3], &[4, 0, 0]);
        assert_eq!(&buf[buf.len() - 3..], &[7, 3, 0]);
    }
}
