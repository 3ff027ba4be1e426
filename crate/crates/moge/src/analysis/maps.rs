//! Per-class average routing maps and their spatial clustering.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use super::routing_distribution;
use crate::data::ImageDataset;
use crate::group_reg::TopographicMap;
use crate::model::ModelParams;
use crate::tensor::Matrix;
use crate::{Error, Result};

const CHUNK: usize = 500;

#[derive(Debug, Clone)]
pub struct CategoryMaps {
    /// `None` for classes with no items.
    pub maps: Vec<Option<TopographicMap>>,
    pub counts: Vec<usize>,
}

impl CategoryMaps {
    pub fn missing(&self) -> Vec<usize> {
        (0..self.maps.len()).filter(|&c| self.maps[c].is_none()).collect()
    }

    /// Mean Moran's I over the classes that are present.
    pub fn mean_morans_i(&self) -> f64 {
        let present: Vec<f64> = self.maps.iter().flatten().map(morans_i).collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Mean dense routing map for each label in `0..classes`.
pub fn category_mean_maps(model: &ModelParams, ds: &ImageDataset, classes: usize) -> Result<CategoryMaps> {
    if ds.pixels() != model.dims.input {
        return Err(Error::shape(format!(
            "dataset has {} pixels per image, model expects {}",
            ds.pixels(),
            model.dims.input
        )));
    }
    let n = model.n_experts();
    let mut sums = vec![vec![0.0; n]; classes];
    let mut counts = vec![0usize; classes];
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let (x, labels) = ds.gather(chunk);
        let z = routing_distribution(model, &x);
        for (t, &label) in labels.iter().enumerate() {
            let c = label as usize;
            if c >= classes {
                return Err(Error::shape(format!("label {c} outside {classes} classes")));
            }
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(z.row(t)) {
                *s += v;
            }
        }
    }
    let maps = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &cnt)| {
            (cnt > 0).then(|| {
                let mean: Vec<f64> = s.iter().map(|v| v / cnt as f64).collect();
                TopographicMap::from_vector(&mean)
            })
        })
        .collect();
    Ok(CategoryMaps { maps, counts })
}

/// Moran's I with rook adjacency. A constant map scores 0.
pub fn morans_i(map: &TopographicMap) -> f64 {
    let (rows, cols) = (map.rows(), map.cols());
    let v = map.values.as_slice();
    let n = v.len();
    // the mean of a constant map need not equal its value exactly
    if n < 2 || v.iter().all(|x| *x == v[0]) {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let denom: f64 = dev.iter().map(|d| d * d).sum();
    if denom == 0.0 || !denom.is_normal() {
        return 0.0;
    }
    // each unordered neighbour pair counted twice
    let mut cross = 0.0;
    let mut weight = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                cross += 2.0 * dev[i] * dev[i + 1];
                weight += 2.0;
            }
            if r + 1 < rows {
                cross += 2.0 * dev[i] * dev[i + cols];
                weight += 2.0;
            }
        }
    }
    if weight == 0.0 {
        return 0.0;
    }
    (n as f64 / weight) * cross / denom
}

/// Comma-separated grid, one map row per line.
pub fn map_to_csv(map: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..map.rows() {
        let line: Vec<String> = map.row(r).iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn parse_map_csv(text: &str) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| Error::shape(format!("bad map cell {t:?}"))))
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => return Err(Error::shape("ragged map grid")),
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

/// Scale used for the 16-bit image: `pixel = round((v - min) / (max - min) * 65535)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgmScale {
    pub min: f64,
    pub max: f64,
}

/// Binary 16-bit PGM (P5, big-endian samples), normalised per map.
pub fn map_to_pgm(map: &Matrix) -> (Vec<u8>, PgmScale) {
    let v = map.as_slice();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{} {}\n65535\n", map.cols(), map.rows()).into_bytes();
    for &x in v {
        let level = if span > 0.0 { ((x - min) / span * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&level.to_be_bytes());
    }
    (out, PgmScale { min, max })
}

/// Writes `class_{c}.csv`, `class_{c}.pgm` and `class_{c}.scale` for each present class.
pub fn write_category_maps(dir: &Path, maps: &CategoryMaps) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (c, map) in maps.maps.iter().enumerate() {
        let Some(map) = map else { continue };
        std::fs::write(dir.join(format!("class_{c}.csv")), map_to_csv(&map.values))?;
        let (pgm, scale) = map_to_pgm(&map.values);
        std::fs::write(dir.join(format!("class_{c}.pgm")), pgm)?;
        let mut f = std::fs::File::create(dir.join(format!("class_{c}.scale")))?;
        writeln!(f, "min={:e} max={:e} count={}", scale.min, scale.max, maps.counts[c])?;
    }
    Ok(())
}
