//! Latent-space projection, the nearest-neighbour baseline and the two
//! evaluation protocols (size sweep and per-region error).

use std::cmp::Ordering;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_dataset, subset, ViewSample, EYE_HEIGHT};
use crate::error::{Error, Result};
use crate::field::{Normalizer, ThematicDistribution, Viewpoint};
use crate::net::{ModelMeta, ModelParams, LATENT};
use crate::raster::{render_histogram, BinSpec, Camera, CameraConfig};
use crate::scene::{Scene, ThematicClass};
use crate::train::{rmse, train, TrainConfig};

/// Anything that maps viewpoints to thematic distributions.
pub trait ViewPredictor: Sync {
    fn predict_views(&self, viewpoints: &[Viewpoint]) -> Result<Vec<ThematicDistribution>>;
}

impl ViewPredictor for ModelParams {
    fn predict_views(&self, viewpoints: &[Viewpoint]) -> Result<Vec<ThematicDistribution>> {
        self.predict(viewpoints)
    }
}

/// Renders the scene: the exact answer a model tries to approximate.
pub struct GroundTruth<'a> {
    pub scene: &'a Scene,
    pub camera: CameraConfig,
    pub bins: BinSpec,
}

impl ViewPredictor for GroundTruth<'_> {
    fn predict_views(&self, viewpoints: &[Viewpoint]) -> Result<Vec<ThematicDistribution>> {
        Ok(build_dataset(self.scene, viewpoints, &self.bins, &self.camera)?
            .into_iter()
            .map(|s| s.m_gt)
            .collect())
    }
}

/// Adapts a closure into a predictor.
pub struct FnPredictor<F>(pub F);

impl<F> ViewPredictor for FnPredictor<F>
where
    F: Fn(&[Viewpoint]) -> Result<Vec<ThematicDistribution>> + Sync,
{
    fn predict_views(&self, viewpoints: &[Viewpoint]) -> Result<Vec<ThematicDistribution>> {
        (self.0)(viewpoints)
    }
}

/// Second-to-last layer activations, one row per viewpoint.
pub fn latent_codes(params: &ModelParams, viewpoints: &[Viewpoint]) -> Result<Vec<Vec<f64>>> {
    let inf = params.forward(viewpoints)?;
    Ok((0..viewpoints.len())
        .map(|i| inf.latent_row(i).iter().map(|&v| v as f64).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    PrincipalComponents,
    AxisPair { i: usize, j: usize },
}

/// A fitted linear map to the plane: `((x − mean)·axes[0], (x − mean)·axes[1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    /// Variance along each axis (zero for axis pairs).
    pub variance: [f64; 2],
}

const POWER_TOLERANCE: f64 = 1e-9;
const POWER_ITERATIONS: usize = 1000;

/// Dominant eigenpair of a symmetric positive semi-definite matrix, with the
/// iterate kept orthogonal to `against`.
fn power_iteration(c: &DMatrix<f64>, against: Option<&DVector<f64>>) -> (f64, DVector<f64>) {
    let d = c.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let orthogonalize = |v: &mut DVector<f64>| {
        if let Some(u) = against {
            let dot = u.dot(v);
            v.axpy(-dot, u, 1.0);
        }
    };
    let mut v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
    orthogonalize(&mut v);
    let n = v.norm();
    if n == 0.0 {
        return (0.0, DVector::zeros(d));
    }
    v /= n;
    for _ in 0..POWER_ITERATIONS {
        let mut w = c * &v;
        orthogonalize(&mut w);
        let norm = w.norm();
        if !(norm > 1e-300) {
            return (0.0, DVector::zeros(d));
        }
        w /= norm;
        let delta = (&w - &v).norm();
        v = w;
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    // canonical sign: largest-magnitude entry positive
    let imax = v.iamax();
    if v[imax] < 0.0 {
        v.neg_mut();
    }
    let lambda = v.dot(&(c * &v));
    (lambda, v)
}

impl Projector {
    pub fn fit(latents: &[Vec<f64>], method: Projection) -> Result<Self> {
        let d = latents.first().map_or(0, Vec::len);
        if d == 0 || latents.iter().any(|l| l.len() != d) {
            return Err(Error::invalid("latent vectors must be non-empty and equally long"));
        }
        match method {
            Projection::AxisPair { i, j } => {
                if i >= d || j >= d {
                    return Err(Error::invalid(format!("axis out of range for {d} dimensions")));
                }
                let unit = |a: usize| (0..d).map(|x| if x == a { 1.0 } else { 0.0 }).collect();
                Ok(Projector {
                    mean: vec![0.0; d],
                    axes: [unit(i), unit(j)],
                    variance: [0.0; 2],
                })
            }
            Projection::PrincipalComponents => {
                let n = latents.len();
                if n < 2 {
                    return Err(Error::invalid("principal components need at least 2 points"));
                }
                let mut mean = vec![0.0; d];
                for l in latents {
                    for (m, v) in mean.iter_mut().zip(l) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                let centered =
                    DMatrix::from_fn(n, d, |r, c| latents[r][c] - mean[c]);
                let cov = (centered.transpose() * &centered) / (n - 1) as f64;
                let (l1, v1) = power_iteration(&cov, None);
                let deflated = &cov - &v1 * v1.transpose() * l1;
                let (l2, v2) = if v1.norm() > 0.0 {
                    power_iteration(&deflated, Some(&v1))
                } else {
                    (0.0, DVector::zeros(d))
                };
                Ok(Projector {
                    mean,
                    axes: [v1.iter().copied().collect(), v2.iter().copied().collect()],
                    variance: [l1.max(0.0), l2.max(0.0)],
                })
            }
        }
    }

    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, axis) in out.iter_mut().zip(&self.axes) {
            *o = x
                .iter()
                .zip(&self.mean)
                .zip(axis)
                .map(|((v, m), a)| (v - m) * a)
                .sum();
        }
        out
    }
}

pub fn project_2d(latents: &[Vec<f64>], method: Projection) -> Result<Vec<[f64; 2]>> {
    let p = Projector::fit(latents, method)?;
    Ok(latents.iter().map(|l| p.project(l)).collect())
}

/// A viewpoint with its latent code and plane coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub viewpoint: Viewpoint,
    pub latent: Vec<f64>,
    pub xy: [f64; 2],
    pub m: Vec<f64>,
}

/// Latents of `viewpoints` projected with an already fitted projector.
pub fn latent_points(
    params: &ModelParams,
    viewpoints: &[Viewpoint],
    projector: &Projector,
) -> Result<Vec<LatentPoint>> {
    let inf = params.forward(viewpoints)?;
    Ok(viewpoints
        .iter()
        .enumerate()
        .map(|(i, vp)| {
            let latent: Vec<f64> = inf.latent_row(i).iter().map(|&v| v as f64).collect();
            debug_assert_eq!(latent.len(), LATENT);
            LatentPoint {
                viewpoint: *vp,
                xy: projector.project(&latent),
                m: inf.output_row(i).iter().map(|&v| v as f64).collect(),
                latent,
            }
        })
        .collect())
}

/// Brute-force nearest neighbours in normalized viewpoint coordinates.
#[derive(Debug, Clone)]
pub struct KnnModel {
    normalizer: Normalizer,
    points: Vec<[f64; 5]>,
    targets: Vec<ThematicDistribution>,
    k: usize,
}

impl KnnModel {
    pub fn new(train: &[ViewSample], normalizer: Normalizer, k: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("nearest neighbours need training samples"));
        }
        if k < 1 || k > train.len() {
            return Err(Error::invalid(format!(
                "k = {k} must be in 1..={}",
                train.len()
            )));
        }
        Ok(KnnModel {
            points: train.iter().map(|s| normalizer.normalize(&s.viewpoint)).collect(),
            targets: train.iter().map(|s| s.m_gt.clone()).collect(),
            normalizer,
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Indices of the `k` nearest samples, closest first, ties by index.
    pub fn neighbours(&self, query: &Viewpoint) -> Vec<usize> {
        let q = self.normalizer.normalize(query);
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
        };
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, cmp);
            d.truncate(self.k);
        }
        d.sort_by(cmp);
        d.into_iter().map(|(_, i)| i).collect()
    }

    pub fn predict_one(&self, query: &Viewpoint) -> ThematicDistribution {
        let len = self.targets[0].len();
        let mut m = vec![0.0; len];
        for i in self.neighbours(query) {
            for (acc, v) in m.iter_mut().zip(self.targets[i].as_slice()) {
                *acc += v;
            }
        }
        for v in &mut m {
            *v /= self.k as f64;
        }
        ThematicDistribution(m)
    }
}

impl ViewPredictor for KnnModel {
    fn predict_views(&self, viewpoints: &[Viewpoint]) -> Result<Vec<ThematicDistribution>> {
        Ok(viewpoints.par_iter().map(|vp| self.predict_one(vp)).collect())
    }
}

pub fn knn_predict(
    train: &[ViewSample],
    normalizer: &Normalizer,
    query: &Viewpoint,
    k: usize,
) -> Result<ThematicDistribution> {
    Ok(KnnModel::new(train, *normalizer, k)?.predict_one(query))
}

/// RMSE of a predictor on labelled samples.
pub fn predictor_rmse(model: &dyn ViewPredictor, samples: &[ViewSample]) -> Result<f64> {
    let vps: Vec<Viewpoint> = samples.iter().map(|s| s.viewpoint).collect();
    let preds = model.predict_views(&vps)?;
    let targets: Vec<&[f64]> = samples.iter().map(|s| s.m_gt.as_slice()).collect();
    let preds: Vec<&[f64]> = preds.iter().map(|p| p.as_slice()).collect();
    rmse(&preds, &targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    /// One entry per fraction; `None` where the model could not be fitted.
    pub rmse: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub fractions: Vec<f64>,
    pub train_sizes: Vec<usize>,
    pub test_size: usize,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Aligned text table, one column per training-set size.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}", "model");
        for n in &self.train_sizes {
            let _ = write!(out, " {:>9}", n);
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<width$}", row.model);
            for v in &row.rmse {
                match v {
                    Some(v) => {
                        let _ = write!(out, " {:>9.4}", v);
                    }
                    None => out.push_str(&format!(" {:>9}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub fractions: Vec<f64>,
    pub knn: Vec<usize>,
    pub train: TrainConfig,
    pub model_seed: u64,
    pub subset_seed: u64,
}

/// Neural model against nearest-neighbour baselines on nested training subsets.
pub fn compare_models(
    meta: &ModelMeta,
    train_set: &[ViewSample],
    test_set: &[ViewSample],
    config: &CompareConfig,
) -> Result<ComparisonReport> {
    if config.fractions.is_empty() {
        return Err(Error::invalid("no training fractions given"));
    }
    if test_set.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let mut ours = ComparisonRow {
        model: "Ours".into(),
        rmse: Vec::new(),
    };
    let mut knn_rows: Vec<ComparisonRow> = config
        .knn
        .iter()
        .map(|k| ComparisonRow {
            model: format!("{k}-Neighbors"),
            rmse: Vec::new(),
        })
        .collect();
    let mut train_sizes = Vec::new();
    for &fraction in &config.fractions {
        let part = subset(train_set, fraction, config.subset_seed)?;
        train_sizes.push(part.len());
        log::info!("training on {} samples", part.len());
        let params = ModelParams::init(config.model_seed, meta.clone());
        let (_, report) = train(params, &part, Some(test_set), &config.train)?;
        ours.rmse.push(report.test_rmse);
        for (row, &k) in knn_rows.iter_mut().zip(&config.knn) {
            let value = if k <= part.len() {
                let knn = KnnModel::new(&part, meta.normalizer, k)?;
                Some(predictor_rmse(&knn, test_set)?)
            } else {
                None
            };
            row.rmse.push(value);
        }
    }
    let mut rows = vec![ours];
    rows.extend(knn_rows);
    Ok(ComparisonReport {
        fractions: config.fractions.clone(),
        train_sizes,
        test_size: test_set.len(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionConfig {
    /// Side of a square region, meters.
    pub side: f64,
    pub threshold: f64,
    pub eye_height: f64,
    pub directions: usize,
    pub camera: CameraConfig,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            side: 80.0,
            threshold: 0.1,
            eye_height: EYE_HEIGHT,
            directions: 8,
            camera: CameraConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub origin: [f64; 2],
    pub side: f64,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionError {
    pub ix: usize,
    pub iy: usize,
    /// Where the views were taken; the region center unless that is inside a
    /// building.
    pub position: [f64; 3],
    /// Mean absolute error per class over all directions.
    pub error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionErrorReport {
    pub grid: RegionGrid,
    pub classes: Vec<String>,
    pub threshold: f64,
    pub directions: usize,
    pub regions: Vec<RegionError>,
    /// Regions with no free viewing position.
    pub skipped: usize,
    /// Percentage of regions whose error is at most the threshold, per class.
    pub percent_under: Vec<f64>,
}

impl RegionErrorReport {
    pub fn percent(&self, class: &str) -> Option<f64> {
        self.classes
            .iter()
            .position(|c| c == class)
            .map(|i| self.percent_under[i])
    }

    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut out = format!(
            "{:<width$} {:>8}   ({} regions, threshold {})\n",
            "class",
            "% under",
            self.regions.len(),
            self.threshold
        );
        for (c, p) in self.classes.iter().zip(&self.percent_under) {
            let _ = writeln!(out, "{:<width$} {:>7.2}%", c, p);
        }
        out
    }
}

/// Free viewing position in a cell: the center, else the lattice point
/// nearest to it that lies outside every building.
fn free_position(scene: &Scene, x0: f64, y0: f64, side: f64, z: f64) -> Option<[f64; 3]> {
    const LATTICE: usize = 9;
    let center = (x0 + side / 2.0, y0 + side / 2.0);
    let mut candidates: Vec<(f64, f64, f64)> = (0..LATTICE * LATTICE)
        .map(|i| {
            let x = x0 + side * ((i % LATTICE) as f64 + 0.5) / LATTICE as f64;
            let y = y0 + side * ((i / LATTICE) as f64 + 0.5) / LATTICE as f64;
            ((x - center.0).powi(2) + (y - center.1).powi(2), x, y)
        })
        .collect();
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    std::iter::once((center.0, center.1))
        .chain(candidates.into_iter().map(|(_, x, y)| (x, y)))
        .map(|(x, y)| [x, y, z])
        .find(|p| !scene.inside_building(&crate::geom::Vec3::new(p[0], p[1], p[2]), 0.0))
}

/// Per-region mean absolute error of `model` against rendered ground truth.
pub fn region_error(
    scene: &Scene,
    model: &dyn ViewPredictor,
    bins: &BinSpec,
    config: &RegionConfig,
) -> Result<RegionErrorReport> {
    if !(config.side > 0.0) {
        return Err(Error::invalid("region side must be positive"));
    }
    if config.directions < 1 {
        return Err(Error::invalid("need at least one direction"));
    }
    config.camera.validate()?;
    let aabb = scene.aabb;
    let extent = aabb.extent();
    let cells = |e: f64| ((e / config.side).ceil() as usize).max(1);
    let grid = RegionGrid {
        origin: [aabb.min.x, aabb.min.y],
        side: config.side,
        nx: cells(extent.x),
        ny: cells(extent.y),
    };
    // ground plane at z = 0
    let z = config.eye_height;
    let mut cells_used = Vec::new();
    let mut skipped = 0;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let x0 = grid.origin[0] + ix as f64 * grid.side;
            let y0 = grid.origin[1] + iy as f64 * grid.side;
            match free_position(scene, x0, y0, grid.side, z) {
                Some(p) => cells_used.push((ix, iy, p)),
                None => skipped += 1,
            }
        }
    }
    let dirs = config.directions;
    let vps: Vec<Viewpoint> = cells_used
        .iter()
        .flat_map(|&(_, _, p)| {
            (0..dirs).map(move |d| {
                let yaw = std::f64::consts::TAU * d as f64 / dirs as f64;
                Viewpoint::new(p[0], p[1], p[2], yaw, 0.0)
            })
        })
        .collect();
    let k = bins.k();
    let classes = bins.component_names(&scene.class_names());
    if vps.is_empty() {
        return Ok(RegionErrorReport {
            grid,
            classes,
            threshold: config.threshold,
            directions: dirs,
            regions: Vec::new(),
            skipped,
            percent_under: vec![100.0; k],
        });
    }
    let truth: Vec<ThematicDistribution> = vps
        .par_iter()
        .map(|vp| render_histogram(scene, &Camera::new(*vp, config.camera), bins))
        .collect::<Result<_>>()?;
    let predicted = model.predict_views(&vps)?;
    if predicted.len() != vps.len() || predicted.iter().any(|p| p.len() != k) {
        return Err(Error::invalid(format!("predictor must return {k}-component distributions")));
    }
    let mut regions = Vec::with_capacity(cells_used.len());
    let mut under = vec![0usize; k];
    for (r, &(ix, iy, p)) in cells_used.iter().enumerate() {
        let mut error = vec![0.0; k];
        for d in r * dirs..(r + 1) * dirs {
            for (c, e) in error.iter_mut().enumerate() {
                *e += (predicted[d][c] - truth[d][c]).abs();
            }
        }
        for (c, e) in error.iter_mut().enumerate() {
            *e /= dirs as f64;
            if *e <= config.threshold {
                under[c] += 1;
            }
        }
        regions.push(RegionError {
            ix,
            iy,
            position: p,
            error,
        });
    }
    let n = regions.len() as f64;
    Ok(RegionErrorReport {
        grid,
        classes,
        threshold: config.threshold,
        directions: dirs,
        percent_under: under.iter().map(|&u| 100.0 * u as f64 / n).collect(),
        regions,
        skipped,
    })
}

/// Splits the `building` class into `brick` and `glass`: each building is
/// wholly one material, with `round(brick_fraction · count)` of them brick.
pub fn material_scenario(scene: &Scene, brick_fraction: f64, seed: u64) -> Result<Scene> {
    if !(0.0..=1.0).contains(&brick_fraction) {
        return Err(Error::invalid("brick fraction must be in [0, 1]"));
    }
    let building = scene
        .class_id("building")
        .ok_or_else(|| Error::invalid("scene has no building class"))?;
    let mut classes = scene.classes.clone();
    classes[building as usize].name = "brick".into();
    classes[building as usize].display_color = [178, 84, 58];
    let glass = classes.len() as u8;
    classes.push(ThematicClass::new(glass, "glass", [150, 210, 230]));
    let mut order: Vec<usize> = (0..scene.buildings.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_brick = (brick_fraction * order.len() as f64).round() as usize;
    let mut tri_class = scene.tri_class.clone();
    for &b in &order[n_brick..] {
        for t in scene.buildings[b].triangle_range() {
            if tri_class[t] == building {
                tri_class[t] = glass;
            }
        }
    }
    scene.relabeled(classes, tri_class)
}

#[cfg(test)]
mod tests;
