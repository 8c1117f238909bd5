//! Sampling trace and per-patch map exports.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sampler::TraceRow;
use crate::slide::Coord;

pub fn write_trace(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Rasterise per-patch values onto the patch grid; cells without a patch
/// hold `None`.
pub fn grid_values(coords: &[Coord], values: &[f64]) -> Result<(u32, u32, Vec<Option<f64>>)> {
    if coords.len() != values.len() {
        return Err(Error::shape("map values do not align with coordinates"));
    }
    let w = coords.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let h = coords.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    let mut cells = vec![None; w as usize * h as usize];
    for (&(x, y), &v) in coords.iter().zip(values) {
        cells[y as usize * w as usize + x as usize] = Some(v);
    }
    Ok((w, h, cells))
}

/// Binary 8-bit PGM, one pixel per patch, values min-max scaled to 0..=255.
/// Cells without a patch are 0.
pub fn pgm_bytes(coords: &[Coord], values: &[f64]) -> Result<Vec<u8>> {
    let (w, h, cells) = grid_values(coords, values)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(cells.iter().map(|c| match c {
        Some(v) if span > 0.0 => ((v - lo) / span * 255.0).round() as u8,
        _ => 0,
    }));
    Ok(out)
}

pub fn write_pgm(coords: &[Coord], values: &[f64], path: &Path) -> Result<()> {
    fs::write(path, pgm_bytes(coords, values)?)?;
    Ok(())
}

/// Raw map as CSV: `patch,x,y,value`.
pub fn write_map_csv(coords: &[Coord], values: &[f64], path: &Path) -> Result<()> {
    if coords.len() != values.len() {
        return Err(Error::shape("map values do not align with coordinates"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patch", "x", "y", "value"])?;
    for (i, (&(x, y), v)) in coords.iter().zip(values).enumerate() {
        w.write_record([i.to_string(), x.to_string(), y.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
