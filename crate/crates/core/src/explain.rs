//! Importance maps from randomized input sampling.
//!
//! Each mask is the outer product of a binary frequency vector and a binary
//! time vector, so a map is built from `2^(F+T)` rather than `2^(F*T)`
//! possible masks. The scorer sees the masked linear magnitudes; any log
//! compression or normalization happens inside the scorer.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::SpectroGrid;
use crate::error::{Error, Result};

/// Masks evaluated per parallel round.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Probability that a single grid cell is masked on its axis.
    pub mask_prob: f64,
    pub time_grid: usize,
    pub freq_grid: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            mask_prob: 0.25,
            time_grid: 20,
            freq_grid: 34,
            iters: 10_000,
            seed: 0,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mask probability must lie in (0, 1), got {}",
                self.mask_prob
            )));
        }
        if self.time_grid == 0 || self.freq_grid == 0 {
            return Err(Error::InvalidParameter("mask grids must be >= 1".into()));
        }
        if self.iters == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        Ok(())
    }

    /// Probability that a spectrogram entry survives a mask.
    pub fn keep_prob(&self) -> f64 {
        (1.0 - self.mask_prob).powi(2)
    }
}

/// A mask stored as its two factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableMask {
    pub freq: Vec<bool>,
    pub time: Vec<bool>,
}

impl SeparableMask {
    pub fn get(&self, f: usize, t: usize) -> bool {
        self.freq[f] && self.time[t]
    }

    pub fn to_grid(&self) -> SpectroGrid {
        let values = self
            .freq
            .iter()
            .flat_map(|&f| self.time.iter().map(move |&t| f64::from(u8::from(f && t))))
            .collect();
        SpectroGrid::new(self.freq.len(), self.time.len(), values).expect("sizes agree")
    }

    /// Element-wise product with `grid`.
    pub fn apply(&self, grid: &SpectroGrid) -> SpectroGrid {
        let mut out = grid.clone();
        let n_time = grid.n_time();
        for (f, row) in out.values_mut().chunks_mut(n_time.max(1)).enumerate() {
            if !self.freq[f] {
                row.fill(0.0);
                continue;
            }
            for (v, &keep) in row.iter_mut().zip(&self.time) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        out
    }
}

/// A `grid`-cell binary vector upsampled by nearest neighbor to `len` plus
/// one cell of slack, then cropped at a random offset to `len`.
fn sample_axis(grid: usize, len: usize, mask_prob: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let cells: Vec<bool> = (0..grid).map(|_| rng.random::<f64>() >= mask_prob).collect();
    let cell = len.div_ceil(grid);
    let up = len + cell;
    let offset = rng.random_range(0..=cell);
    (offset..offset + len).map(|j| cells[j * grid / up]).collect()
}

/// Draws one `n_freq x n_time` mask.
///
/// Every entry is kept with probability `(1 - mask_prob)^2` because it lies in
/// exactly one frequency cell and one time cell.
pub fn sample_mask(
    params: &MaskParams,
    n_freq: usize,
    n_time: usize,
    rng: &mut ChaCha8Rng,
) -> SeparableMask {
    let p = params.mask_prob.clamp(0.0, 1.0);
    let time = sample_axis(params.time_grid.max(1), n_time, p, rng);
    let freq = sample_axis(params.freq_grid.max(1), n_freq, p, rng);
    SeparableMask { freq, time }
}

/// Mask `i` of the sequence determined by `seed`.
pub fn nth_mask(params: &MaskParams, n_freq: usize, n_time: usize, i: usize) -> SeparableMask {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(i as u64);
    sample_mask(params, n_freq, n_time, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub values: SpectroGrid,
    pub params: MaskParams,
}

impl ImportanceMap {
    pub fn iters(&self) -> usize {
        self.params.iters
    }
}

fn indicator(bits: &[bool]) -> impl Iterator<Item = f64> + '_ {
    bits.iter().map(|&b| f64::from(u8::from(b)))
}

/// Weighted sum of masks over `params.iters` masked copies of `spec`,
/// normalized by the expected mask value.
///
/// Mask `i` comes from its own random stream and the sum is accumulated in
/// index order, so the result depends only on `spec`, the scorer and
/// `params`.
pub fn importance_map<S>(scorer: S, spec: &SpectroGrid, params: &MaskParams) -> Result<ImportanceMap>
where
    S: Fn(&SpectroGrid) -> Result<f64> + Sync,
{
    params.validate()?;
    let (n_freq, n_time) = (spec.n_freq(), spec.n_time());
    if n_freq == 0 || n_time == 0 {
        return Err(Error::Empty("spectrogram has no cells".into()));
    }
    let mut acc = Array2::<f64>::zeros((n_freq, n_time));
    let mut start = 0;
    while start < params.iters {
        let end = (start + CHUNK).min(params.iters);
        let scored: Vec<(SeparableMask, f64)> = (start..end)
            .into_par_iter()
            .map(|i| {
                let mask = nth_mask(params, n_freq, n_time, i);
                let s = scorer(&mask.apply(spec))?;
                if !s.is_finite() {
                    return Err(Error::NonFinite(format!("score {s} for mask {i}")));
                }
                Ok((mask, s))
            })
            .collect::<Result<_>>()?;
        // sum_i s_i f_i t_i^T as one product
        let n = scored.len();
        let mut fm = Array2::<f64>::zeros((n, n_freq));
        let mut tm = Array2::<f64>::zeros((n, n_time));
        for (r, (mask, s)) in scored.iter().enumerate() {
            fm.row_mut(r).iter_mut().zip(indicator(&mask.freq)).for_each(|(d, v)| *d = v);
            tm.row_mut(r).iter_mut().zip(indicator(&mask.time)).for_each(|(d, v)| *d = s * v);
        }
        acc += &fm.t().dot(&tm);
        start = end;
    }
    acc /= params.iters as f64 * params.keep_prob();
    let values = SpectroGrid::new(n_freq, n_time, acc.into_raw_vec_and_offset().0)?;
    Ok(ImportanceMap {
        values,
        params: *params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    /// One CSV row per frequency bin, one column per frame.
    CsvGrid,
    /// Binary 8-bit grayscale, width `T` and height `F`.
    Pgm,
}

impl MapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MapFormat::CsvGrid => "csv",
            MapFormat::Pgm => "pgm",
        }
    }
}

impl fmt::Display for MapFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapFormat::CsvGrid => "csv-grid",
            MapFormat::Pgm => "pgm",
        })
    }
}

impl FromStr for MapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv-grid" | "csv" => Ok(MapFormat::CsvGrid),
            "pgm" => Ok(MapFormat::Pgm),
            other => Err(Error::InvalidParameter(format!("unknown map format '{other}'"))),
        }
    }
}

/// Gray levels of `g`, min-max scaled to 0..=255. A map with no range is
/// uniformly 128.
pub fn gray_levels(g: &SpectroGrid) -> Vec<u8> {
    let (lo, hi) = g
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    g.values()
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect()
}

pub fn write_map<W: Write>(mut out: W, map: &ImportanceMap, format: MapFormat) -> std::io::Result<()> {
    let g = &map.values;
    match format {
        MapFormat::CsvGrid => {
            for f in 0..g.n_freq() {
                let line: Vec<String> = g.row(f).iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(","))?;
            }
        }
        MapFormat::Pgm => {
            writeln!(out, "P5 {} {} 255", g.n_time(), g.n_freq())?;
            out.write_all(&gray_levels(g))?;
        }
    }
    out.flush()
}

pub fn export_map(map: &ImportanceMap, path: &Path, format: MapFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_map(BufWriter::new(file), map, format).map_err(|e| Error::io(path, e))
}

/// Reads a grid written in the csv-grid format.
pub fn read_csv_grid(path: &Path) -> Result<SpectroGrid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut n_time = None;
    let mut n_freq = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidParameter(format!("row {}: {e}", n_freq + 1)))?;
        if *n_time.get_or_insert(row.len()) != row.len() {
            return Err(Error::Shape(format!("row {} has {} columns", n_freq + 1, row.len())));
        }
        values.extend(row);
        n_freq += 1;
    }
    SpectroGrid::new(n_freq, n_time.unwrap_or(0), values)
}
