//! How far routing maps move when the input image is perturbed.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{imed, routing_distribution};
use crate::data::{affine_transform, AffineSpec, ImageDataset};
use crate::group_reg::TopographicMap;
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "transform,magnitude,model,mean_imed,n_images";

const CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceRow {
    pub transform: String,
    pub magnitude: String,
    pub model: String,
    pub mean_imed: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvarianceReport {
    pub rows: Vec<InvarianceRow>,
}

impl InvarianceReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:e},{}", r.transform, r.magnitude, r.model, r.mean_imed, r.n_images);
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::shape("invariance CSV header mismatch"));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let [transform, magnitude, model, mean, n] = f.as_slice() else {
                return Err(Error::shape(format!("invariance CSV row {line:?}")));
            };
            let bad = |what: &str| Error::shape(format!("bad {what} in invariance row {line:?}"));
            rows.push(InvarianceRow {
                transform: transform.to_string(),
                magnitude: magnitude.to_string(),
                model: model.to_string(),
                mean_imed: mean.parse().map_err(|_| bad("mean_imed"))?,
                n_images: n.parse().map_err(|_| bad("n_images"))?,
            });
        }
        Ok(Self { rows })
    }

    /// Row for one model tag and transform cell.
    pub fn find(&self, model: &str, spec: &AffineSpec) -> Option<&InvarianceRow> {
        let (kind, mag) = (spec.kind().name(), spec.magnitude_label());
        self.rows
            .iter()
            .find(|r| r.model == model && r.transform == kind && r.magnitude == mag)
    }

    pub fn extend(&mut self, other: InvarianceReport) {
        self.rows.extend(other.rows);
    }
}

/// Mean IMED between the routing map of each image and that of its
/// transformed copy, one row per spec.
///
/// With `samples = Some((s, seed))` each image is perturbed `s` times by
/// draws from `[-magnitude, magnitude]` instead of the fixed magnitude.
pub fn invariance_report(
    model: &ModelParams,
    tag: &str,
    ds: &ImageDataset,
    specs: &[AffineSpec],
    width: f64,
    samples: Option<(usize, u64)>,
) -> Result<InvarianceReport> {
    if specs.is_empty() {
        return Err(Error::config("no transforms requested"));
    }
    if ds.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    for s in specs {
        s.validate()?;
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut base_maps = Vec::with_capacity(ds.len());
    for chunk in all.chunks(CHUNK) {
        let z = routing_distribution(model, &ds.gather(chunk).0);
        base_maps.extend((0..chunk.len()).map(|t| TopographicMap::from_vector(z.row(t))));
    }

    let mut rows = Vec::with_capacity(specs.len());
    for (si, spec) in specs.iter().enumerate() {
        let per_image: Vec<f64> = match samples {
            None => distances(model, ds, &base_maps, width, |i| vec![*spec].into_iter().map(move |s| (i, s)))?,
            Some((count, seed)) => {
                let draws: Vec<Vec<AffineSpec>> = (0..ds.len())
                    .map(|i| {
                        let mut rng = Rng::substream(seed, &format!("invariance/{si}/{i}"));
                        (0..count.max(1)).map(|_| spec.sample(&mut rng)).collect()
                    })
                    .collect();
                distances(model, ds, &base_maps, width, |i| draws[i].clone().into_iter().map(move |s| (i, s)))?
            }
        };
        let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
        rows.push(InvarianceRow {
            transform: spec.kind().name().to_string(),
            magnitude: spec.magnitude_label(),
            model: tag.to_string(),
            mean_imed: mean,
            n_images: ds.len(),
        });
    }
    Ok(InvarianceReport { rows })
}

/// Per-image mean distance over the perturbations produced by `perturb(i)`.
fn distances<I>(
    model: &ModelParams,
    ds: &ImageDataset,
    base: &[TopographicMap],
    width: f64,
    perturb: impl Fn(usize) -> I,
) -> Result<Vec<f64>>
where
    I: Iterator<Item = (usize, AffineSpec)>,
{
    let jobs: Vec<(usize, AffineSpec)> = (0..ds.len()).flat_map(&perturb).collect();
    let p = ds.pixels();
    let mut per_image = vec![0.0; ds.len()];
    let mut per_count = vec![0usize; ds.len()];
    for chunk in jobs.chunks(CHUNK) {
        let warped: Vec<Vec<f64>> = chunk
            .par_iter()
            .map(|(i, s)| affine_transform(ds.image(*i), ds.rows, ds.cols, s))
            .collect::<Result<_>>()?;
        let x = Matrix::from_vec(chunk.len(), p, warped.concat())?;
        let z = routing_distribution(model, &x);
        let d: Vec<f64> = chunk
            .par_iter()
            .enumerate()
            .map(|(t, (i, _))| imed(&base[*i].values, &TopographicMap::from_vector(z.row(t)).values, width))
            .collect::<Result<_>>()?;
        for ((i, _), v) in chunk.iter().zip(d) {
            per_image[*i] += v;
            per_count[*i] += 1;
        }
    }
    Ok(per_image.iter().zip(&per_count).map(|(s, &c)| s / c as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelDims};

    fn setup() -> (ModelParams, ImageDataset) {
        let dims = ModelDims { input: 64, hidden: 4, output: 4, classes: 2 };
        let model = ModelParams::init_with_std(dims, 16, Activation::Relu, 0.5, 3).unwrap();
        let mut rng = Rng::new(8);
        let images = (0..20 * 64).map(|_| rng.uniform()).collect();
        let ds = ImageDataset::new(8, 8, images, vec![0; 20]).unwrap();
        (model, ds)
    }

    #[test]
    fn identity_row_is_zero() {
        let (model, ds) = setup();
        let r = invariance_report(&model, "m", &ds, &[AffineSpec::identity()], 1.0, None).unwrap();
        assert_eq!(r.rows[0].mean_imed, 0.0);
        assert_eq!(r.rows[0].n_images, 20);
    }

    #[test]
    fn deterministic_and_parses_back() {
        let (model, ds) = setup();
        let specs = AffineSpec::default_grid();
        let a = invariance_report(&model, "moge", &ds, &specs, 1.0, None).unwrap();
        let b = invariance_report(&model, "moge", &ds, &specs, 1.0, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 12);
        assert!(a.rows.iter().all(|r| r.mean_imed > 0.0 && r.mean_imed.is_finite()));
        let back = InvarianceReport::parse_csv(&a.to_csv()).unwrap();
        assert_eq!(back, a);
        assert!(back.find("moge", &AffineSpec::Translation(0.1, 0.1)).is_some());
    }

    #[test]
    fn sampled_mode_is_seeded() {
        let (model, ds) = setup();
        let specs = [AffineSpec::Rotation(10.0)];
        let a = invariance_report(&model, "m", &ds, &specs, 1.0, Some((3, 1))).unwrap();
        let b = invariance_report(&model, "m", &ds, &specs, 1.0, Some((3, 1))).unwrap();
        let c = invariance_report(&model, "m", &ds, &specs, 1.0, Some((3, 2))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_spec_list_rejected() {
        let (model, ds) = setup();
        assert!(invariance_report(&model, "m", &ds, &[], 1.0, None).is_err());
    }
}
