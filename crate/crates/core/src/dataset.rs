//! Viewpoint sampling and ground-truth dataset generation.

use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ThematicDistribution, Viewpoint};
use crate::geom::{Aabb, Vec3};
use crate::raster::{render_histogram, BinSpec, Camera, CameraConfig};
use crate::scene::Scene;

/// Pedestrian eye height above the walked surface, meters.
pub const EYE_HEIGHT: f64 = 1.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSample {
    pub viewpoint: Viewpoint,
    pub m_gt: ThematicDistribution,
}

/// Where viewpoints are drawn from. Angles are radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingKind {
    /// Anywhere in the scene's footprint between two heights, outside buildings.
    Uniform {
        z_min: f64,
        z_max: f64,
        pitch_min: f64,
        pitch_max: f64,
    },
    /// Eye height above road and sidewalk surfaces, pitch in [-10°, 30°].
    StreetLevel,
    /// Just in front of building facades, looking away from the wall.
    FacadeMounted {
        offset: f64,
        /// Maximum yaw deviation from the facade normal, below 90°.
        yaw_jitter: f64,
        /// Pitch is drawn from `[-pitch_max, pitch_max]`.
        pitch_max: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    #[serde(flatten)]
    pub kind: SamplingKind,
    /// Viewing directions drawn at each sampled position.
    pub directions_per_position: usize,
}

impl SamplingStrategy {
    pub fn street_level() -> Self {
        SamplingStrategy {
            kind: SamplingKind::StreetLevel,
            directions_per_position: 1,
        }
    }

    /// Uniform sampling from eye height to the top of the scene, pitch in ±30°.
    pub fn uniform(scene: &Scene) -> Self {
        SamplingStrategy {
            kind: SamplingKind::Uniform {
                z_min: EYE_HEIGHT.min(scene.aabb.max.z),
                z_max: scene.aabb.max.z,
                pitch_min: -30f64.to_radians(),
                pitch_max: 30f64.to_radians(),
            },
            directions_per_position: 1,
        }
    }

    pub fn facade_mounted() -> Self {
        SamplingStrategy {
            kind: SamplingKind::FacadeMounted {
                offset: 0.05,
                yaw_jitter: 60f64.to_radians(),
                pitch_max: 30f64.to_radians(),
            },
            directions_per_position: 1,
        }
    }

    pub fn with_directions(self, directions_per_position: usize) -> Self {
        SamplingStrategy {
            directions_per_position,
            ..self
        }
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        if self.directions_per_position < 1 {
            return Err(Error::invalid("directions per position must be at least 1"));
        }
        match self.kind {
            SamplingKind::Uniform {
                z_min,
                z_max,
                pitch_min,
                pitch_max,
            } => {
                let (lo, hi) = (scene.aabb.min.z, scene.aabb.max.z);
                if !(z_min <= z_max && z_min >= lo && z_max <= hi) {
                    return Err(Error::invalid(format!(
                        "height range [{z_min}, {z_max}] must lie within the scene's [{lo}, {hi}]"
                    )));
                }
                if !(pitch_min <= pitch_max && pitch_min > -PI / 2.0 && pitch_max < PI / 2.0) {
                    return Err(Error::invalid("pitch range must lie strictly within ±90°"));
                }
            }
            SamplingKind::StreetLevel => {}
            SamplingKind::FacadeMounted {
                offset,
                yaw_jitter,
                pitch_max,
            } => {
                if !(offset > 0.0 && (0.0..PI / 2.0).contains(&yaw_jitter)) {
                    return Err(Error::invalid(
                        "facade sampling needs a positive offset and yaw jitter below 90°",
                    ));
                }
                if !(0.0..PI / 2.0).contains(&pitch_max) {
                    return Err(Error::invalid("facade pitch bound must be below 90°"));
                }
            }
        }
        Ok(())
    }
}

/// Area-weighted picker over a set of triangles.
struct TrianglePicker {
    cumulative: Vec<f64>,
    tris: Vec<[Vec3; 3]>,
}

impl TrianglePicker {
    fn new(tris: Vec<[Vec3; 3]>) -> Self {
        let mut total = 0.0;
        let cumulative = tris
            .iter()
            .map(|t| {
                total += 0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm();
                total
            })
            .collect();
        TrianglePicker { cumulative, tris }
    }

    fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        let r = rng.gen::<f64>() * self.total();
        let i = self.cumulative.partition_point(|&c| c <= r).min(self.tris.len() - 1);
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let t = &self.tris[i];
        t[0] + (t[1] - t[0]) * u + (t[2] - t[0]) * v
    }
}

/// Draws `n` viewpoints; deterministic in `(scene, strategy, n, seed)`.
/// Positions falling inside a building are rejected and redrawn.
pub fn sample_viewpoints(
    scene: &Scene,
    strategy: &SamplingStrategy,
    n: usize,
    seed: u64,
) -> Result<Vec<Viewpoint>> {
    if n < 1 {
        return Err(Error::invalid("need at least one viewpoint"));
    }
    strategy.validate(scene)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aabb = scene.aabb;

    // Each position source yields a point plus the yaw/pitch ranges to draw from.
    type Draw<'a> = Box<dyn FnMut(&mut ChaCha8Rng) -> (Vec3, (f64, f64), (f64, f64)) + 'a>;
    let mut draw: Draw = match strategy.kind {
        SamplingKind::Uniform {
            z_min,
            z_max,
            pitch_min,
            pitch_max,
        } => {
            if !(aabb.extent().x > 0.0 && aabb.extent().y > 0.0) {
                return Err(Error::EmptyRegion("scene has no horizontal extent".into()));
            }
            Box::new(move |rng| {
                let p = Vec3::new(
                    rng.gen_range(aabb.min.x..=aabb.max.x),
                    rng.gen_range(aabb.min.y..=aabb.max.y),
                    rng.gen_range(z_min..=z_max),
                );
                (p, (0.0, TAU), (pitch_min, pitch_max))
            })
        }
        SamplingKind::StreetLevel => {
            let classes: Vec<u8> = ["road", "sidewalk"]
                .iter()
                .filter_map(|name| scene.class_id(name))
                .collect();
            let tris = scene
                .triangles_of(&classes)
                .into_iter()
                .map(|i| scene.triangle(i))
                .collect();
            let picker = TrianglePicker::new(tris);
            if !(picker.total() > 0.0) {
                return Err(Error::EmptyRegion("scene has no road or sidewalk surface".into()));
            }
            let pitch = (-10f64.to_radians(), 30f64.to_radians());
            Box::new(move |rng| {
                let p = picker.sample(rng) + Vec3::new(0.0, 0.0, EYE_HEIGHT);
                (p, (0.0, TAU), pitch)
            })
        }
        SamplingKind::FacadeMounted {
            offset,
            yaw_jitter,
            pitch_max,
        } => {
            let facades: Vec<_> = scene.buildings.iter().flat_map(|b| b.facades).collect();
            let mut total = 0.0;
            let cumulative: Vec<f64> = facades
                .iter()
                .map(|f| {
                    total += f.width() * f.height();
                    total
                })
                .collect();
            if !(total > 0.0) {
                return Err(Error::EmptyRegion("scene has no building facades".into()));
            }
            Box::new(move |rng| {
                let r = rng.gen::<f64>() * total;
                let i = cumulative.partition_point(|&c| c <= r).min(facades.len() - 1);
                let f = &facades[i];
                let (s, t): (f64, f64) = (rng.gen(), rng.gen());
                let p = f.origin + f.u * s + f.v * t + f.normal * offset;
                let yaw = f.normal.y.atan2(f.normal.x);
                (p, (yaw - yaw_jitter, yaw + yaw_jitter), (-pitch_max, pitch_max))
            })
        }
    };

    let per = strategy.directions_per_position;
    let max_attempts = 1000 * n + 10_000;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::EmptyRegion(format!(
                "only {} of {n} viewpoints found outside buildings",
                out.len()
            )));
        }
        let (p, yaw, pitch) = draw(&mut rng);
        if scene.inside_building(&p, 0.0) {
            continue;
        }
        for _ in 0..per.min(n - out.len()) {
            let alpha = if yaw.1 > yaw.0 { rng.gen_range(yaw.0..yaw.1) } else { yaw.0 };
            let gamma = if pitch.1 > pitch.0 {
                rng.gen_range(pitch.0..=pitch.1)
            } else {
                pitch.0
            };
            out.push(Viewpoint::at(p, alpha, gamma));
        }
    }
    Ok(out)
}

/// Renders every viewpoint and aggregates it; output order matches input order.
pub fn build_dataset(
    scene: &Scene,
    viewpoints: &[Viewpoint],
    bins: &BinSpec,
    camera: &CameraConfig,
) -> Result<Vec<ViewSample>> {
    camera.validate()?;
    viewpoints
        .par_iter()
        .enumerate()
        .map(|(index, vp)| {
            render_histogram(scene, &Camera::new(*vp, *camera), bins)
                .map(|m_gt| ViewSample {
                    viewpoint: *vp,
                    m_gt,
                })
                .map_err(|e| Error::AtViewpoint {
                    index,
                    source: Box::new(e),
                })
        })
        .collect()
}

fn check_fraction(f: f64, what: &str) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must be in (0, 1], got {f}")))
    }
}

/// Disjoint, exhaustive train/test split with `round(n · test_fraction)` test
/// samples. Both parts keep the original relative order.
pub fn split<T: Clone>(data: &[T], test_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    check_fraction(test_fraction, "test fraction")?;
    let n = data.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::invalid(format!(
            "splitting {n} samples at fraction {test_fraction} leaves an empty part"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &idx[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n - n_test), Vec::with_capacity(n_test));
    for (item, t) in data.iter().zip(is_test) {
        if t {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}

/// Indices of a `round(n · fraction)` subset. Subsets drawn with the same seed
/// are nested: a smaller fraction always yields a prefix-subset of a larger one.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    check_fraction(fraction, "subset fraction")?;
    let m = (n as f64 * fraction).round() as usize;
    if m == 0 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {n} samples is empty"
        )));
    }
    if m == n {
        return Ok((0..n).collect());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

pub fn subset<T: Clone>(data: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    Ok(subset_indices(data.len(), fraction, seed)?
        .into_iter()
        .map(|i| data[i].clone())
        .collect())
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros dropped.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let fixed = format!("{:.*}", (8 - exp) as usize, v);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Sidecar metadata stored next to a dataset CSV as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub components: Vec<String>,
    pub bins: BinSpec,
    pub aabb: Aabb,
    pub camera: CameraConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<SamplingStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub count: usize,
}

pub fn meta_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn save_meta(meta: &DatasetMeta, csv: &Path) -> Result<()> {
    let path = meta_path(csv);
    let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads the sidecar if present.
pub fn load_meta(csv: &Path) -> Result<Option<DatasetMeta>> {
    let path = meta_path(csv);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Parse {
            path,
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
}

pub fn write_csv(samples: &[ViewSample], out: impl Write) -> Result<()> {
    let k = samples.first().map_or(0, |s| s.m_gt.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["x", "y", "z", "alpha", "gamma"].map(String::from).to_vec();
    header.extend((0..k).map(|i| format!("m{i}")));
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    let mut row = Vec::with_capacity(5 + k);
    for (i, s) in samples.iter().enumerate() {
        if s.m_gt.len() != k {
            return Err(Error::Validation(format!(
                "sample {i} has {} components, expected {k}",
                s.m_gt.len()
            )));
        }
        row.clear();
        row.extend(s.viewpoint.to_array().iter().map(|&v| format_sig9(v)));
        row.extend(s.m_gt.as_slice().iter().map(|&v| format_sig9(v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(())
}

pub fn save_csv(samples: &[ViewSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_csv(samples, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses a dataset CSV; the component count comes from the header.
pub fn read_csv(text: &[u8], path: &Path) -> Result<Vec<ViewSample>> {
    let parse_err = |line: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text);
    let header = r
        .headers()
        .map_err(|e| parse_err(1, 0, e.to_string()))?
        .clone();
    let expected = ["x", "y", "z", "alpha", "gamma"];
    let k = header.len().saturating_sub(5);
    let header_ok = header.len() > 5
        && header.iter().take(5).eq(expected.iter().copied())
        && header.iter().skip(5).enumerate().all(|(i, h)| h == format!("m{i}"));
    if !header_ok {
        return Err(parse_err(
            1,
            1,
            "expected header x,y,z,alpha,gamma,m0,...".into(),
        ));
    }
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, 0, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut values = Vec::with_capacity(5 + k);
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(line, col + 1, format!("'{field}' is not a number"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, col + 1, "non-finite value".into()));
            }
            values.push(v);
        }
        let m = ThematicDistribution(values[5..].to_vec());
        if !m.is_simplex(1e-6) {
            return Err(parse_err(line, 6, "distribution is not on the simplex".into()));
        }
        let vp = Viewpoint {
            x: values[0],
            y: values[1],
            z: values[2],
            alpha: values[3],
            gamma: values[4],
        };
        out.push(ViewSample { viewpoint: vp, m_gt: m });
    }
    Ok(out)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<ViewSample>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_csv(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_city, urban_classes, CityParams, MeshBuilder};
    use proptest::prelude::*;

    fn city() -> Scene {
        generate_city(4, &CityParams { grid: 2, ..CityParams::default() }).unwrap()
    }

    fn single_box() -> Scene {
        let mut mesh = MeshBuilder::default();
        mesh.ground_rect(-50.0, -50.0, 50.0, 50.0, 0.0, 3);
        let range = mesh.closed_box(Vec3::new(-5.0, -8.0, 0.0), Vec3::new(5.0, 8.0, 20.0), 1);
        let b = crate::scene::Building::new(0, range, [-5.0, -8.0, 5.0, 8.0], 20.0);
        Scene::new(urban_classes(), mesh.vertices, mesh.triangles, mesh.tri_class, None, vec![b])
            .unwrap()
    }

    #[test]
    fn uniform_samples_stay_in_free_space() {
        let scene = city();
        let strategy = SamplingStrategy::uniform(&scene);
        let vps = sample_viewpoints(&scene, &strategy, 1000, 3).unwrap();
        assert_eq!(vps.len(), 1000);
        for v in &vps {
            let p = v.position();
            assert!(p.z >= 0.0 && p.z <= scene.aabb.max.z);
            assert!(scene.aabb.contains(&p));
            assert!(!scene.inside_building(&p, 0.0));
            assert!((0.0..TAU).contains(&v.alpha));
        }
        assert_eq!(vps, sample_viewpoints(&scene, &strategy, 1000, 3).unwrap());
        assert_ne!(vps, sample_viewpoints(&scene, &strategy, 1000, 4).unwrap());
    }

    #[test]
    fn street_level_is_at_eye_height_over_streets() {
        let scene = city();
        let vps = sample_viewpoints(&scene, &SamplingStrategy::street_level(), 500, 1).unwrap();
        for v in &vps {
            assert!((v.z - EYE_HEIGHT).abs() < 1e-9);
            assert!(v.gamma >= -10f64.to_radians() - 1e-12 && v.gamma <= 30f64.to_radians() + 1e-12);
            assert!(!scene.inside_building(&v.position(), 0.0));
        }
    }

    #[test]
    fn street_level_without_streets_is_an_error() {
        let scene = single_box();
        let only_buildings = scene
            .relabeled(scene.classes.clone(), vec![1; scene.triangles.len()])
            .unwrap();
        let err = sample_viewpoints(&only_buildings, &SamplingStrategy::street_level(), 10, 0);
        assert!(matches!(err, Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn facade_mounted_hugs_the_walls() {
        let scene = single_box();
        let vps = sample_viewpoints(&scene, &SamplingStrategy::facade_mounted(), 400, 9).unwrap();
        let b = &scene.buildings[0];
        for v in &vps {
            let p = v.position();
            // distance to the nearest facade plane, and that facade's normal
            let (dist, normal) = b
                .facades
                .iter()
                .map(|f| ((p - f.origin).dot(&f.normal), f.normal))
                .filter(|(d, _)| *d >= 0.0)
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            assert!(dist <= 0.1, "{p:?} is {dist} m from the wall");
            assert!(v.direction().dot(&normal) > 0.0);
            assert!(!scene.inside_building(&p, 0.0));
        }
    }

    #[test]
    fn directions_share_positions() {
        let scene = city();
        let strategy = SamplingStrategy::street_level().with_directions(8);
        let vps = sample_viewpoints(&scene, &strategy, 20, 2).unwrap();
        assert_eq!(vps.len(), 20);
        for chunk in vps.chunks(8) {
            assert!(chunk.iter().all(|v| v.position() == chunk[0].position()));
        }
        assert_ne!(vps[0].position(), vps[8].position());
    }

    #[test]
    fn invalid_strategies() {
        let scene = city();
        let bad = SamplingStrategy::uniform(&scene).with_directions(0);
        assert!(sample_viewpoints(&scene, &bad, 10, 0).is_err());
        let bad = SamplingStrategy {
            kind: SamplingKind::Uniform {
                z_min: 0.0,
                z_max: scene.aabb.max.z + 100.0,
                pitch_min: 0.0,
                pitch_max: 0.0,
            },
            directions_per_position: 1,
        };
        assert!(sample_viewpoints(&scene, &bad, 10, 0).is_err());
        assert!(sample_viewpoints(&scene, &SamplingStrategy::street_level(), 0, 0).is_err());
    }

    #[test]
    fn sky_view_is_sky_one_hot() {
        let scene = single_box();
        let vp = Viewpoint::new(0.0, 30.0, 2.0, 0.0, 80f64.to_radians());
        let data = build_dataset(&scene, &[vp], &BinSpec::categorical(7), &CameraConfig::default())
            .unwrap();
        assert_eq!(data[0].m_gt, ThematicDistribution::one_hot(7, 0));
    }

    #[test]
    fn dataset_preserves_order_and_simplex() {
        let scene = city();
        let vps = sample_viewpoints(&scene, &SamplingStrategy::street_level(), 64, 5).unwrap();
        let cfg = CameraConfig::default().with_size(16, 16);
        let data = build_dataset(&scene, &vps, &BinSpec::categorical(7), &cfg).unwrap();
        assert_eq!(data.len(), 64);
        for (s, v) in data.iter().zip(&vps) {
            assert_eq!(&s.viewpoint, v);
            assert!(s.m_gt.is_simplex(1e-9));
        }
    }

    #[test]
    fn bad_viewpoint_reports_its_index() {
        let scene = single_box();
        let vps = [
            Viewpoint::new(0.0, 30.0, 2.0, 0.0, 0.0),
            Viewpoint::new(0.0, 30.0, 2.0, 0.0, PI / 2.0),
        ];
        let err = build_dataset(&scene, &vps, &BinSpec::categorical(7), &CameraConfig::default());
        assert!(matches!(err, Err(Error::AtViewpoint { index: 1, .. })));
    }

    #[test]
    fn csv_round_trip_and_determinism() {
        let scene = city();
        let vps = sample_viewpoints(&scene, &SamplingStrategy::street_level(), 50, 8).unwrap();
        let cfg = CameraConfig::default().with_size(16, 16);
        let data = build_dataset(&scene, &vps, &BinSpec::categorical(7), &cfg).unwrap();
        let mut a = Vec::new();
        write_csv(&data, &mut a).unwrap();
        let again = build_dataset(&scene, &vps, &BinSpec::categorical(7), &cfg).unwrap();
        let mut b = Vec::new();
        write_csv(&again, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a.clone()).unwrap();
        assert!(text.starts_with("x,y,z,alpha,gamma,m0,m1,m2,m3,m4,m5,m6\n"));
        let back = read_csv(&a, Path::new("mem.csv")).unwrap();
        assert_eq!(back.len(), 50);
        for (x, y) in back.iter().zip(&data) {
            for (p, q) in x.viewpoint.to_array().iter().zip(y.viewpoint.to_array()) {
                assert!((p - q).abs() <= 1e-8 * q.abs().max(1.0));
            }
            assert!(x.m_gt.squared_distance(y.m_gt.as_slice()) < 1e-16);
        }
    }

    #[test]
    fn malformed_csv_reports_location() {
        let text = b"x,y,z,alpha,gamma,m0,m1\n1,2,3,0,0,0.5,0.5\n1,2,oops,0,0,0.5,0.5\n";
        match read_csv(text, Path::new("d.csv")) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (3, 3)),
            other => panic!("{other:?}"),
        }
        let off_simplex = b"x,y,z,alpha,gamma,m0,m1\n1,2,3,0,0,0.5,0.7\n";
        assert!(read_csv(off_simplex, Path::new("d.csv")).is_err());
        assert!(read_csv(b"a,b\n1,2\n", Path::new("d.csv")).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.7), "1.7");
        assert_eq!(format_sig9(0.5), "0.5");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e9");
        assert_eq!(format_sig9(-0.000123456789123), "-0.000123456789");
        assert_eq!(format_sig9(1e-7), "1e-7");
        assert_eq!(format_sig9(2.0 / 3.0), "0.666666667");
        assert_eq!(format_sig9(9.9999999999), "10");
    }

    #[test]
    fn paper_split_counts() {
        let data: Vec<usize> = (0..78_696).collect();
        let (train, test) = split(&data, 15_000.0 / 78_696.0, 1).unwrap();
        assert_eq!((train.len(), test.len()), (63_696, 15_000));
    }

    #[test]
    fn split_edge_cases() {
        let data: Vec<usize> = (0..10).collect();
        assert!(split(&data, 1.0, 0).is_err());
        assert!(split(&data, 0.0, 0).is_err());
        assert!(split(&data, 0.01, 0).is_err());
        assert_eq!(subset(&data, 1.0, 3).unwrap(), data);
        assert!(subset(&data, 0.01, 3).is_err());
        assert!(subset(&data, 1.5, 3).is_err());
    }

    #[test]
    fn meta_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("views.csv");
        assert_eq!(load_meta(&csv).unwrap(), None);
        let scene = city();
        let meta = DatasetMeta {
            components: scene.class_names(),
            bins: BinSpec::categorical(7),
            aabb: scene.aabb,
            camera: CameraConfig::default(),
            strategy: Some(SamplingStrategy::street_level()),
            seed: Some(3),
            count: 10,
        };
        save_meta(&meta, &csv).unwrap();
        assert_eq!(load_meta(&csv).unwrap(), Some(meta));
        assert!(meta_path(&csv).ends_with("views.csv.meta.json"));
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_exhaustive(n in 2usize..300, f in 0.05f64..0.95, seed in 0u64..50) {
            let data: Vec<usize> = (0..n).collect();
            if let Ok((train, test)) = split(&data, f, seed) {
                prop_assert_eq!(test.len(), (n as f64 * f).round() as usize);
                let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, data);
                prop_assert!(train.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(test.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn subsets_are_nested(n in 1usize..500, seed in 0u64..50) {
            let fractions = [0.1, 0.2, 0.3, 0.8, 1.0];
            let sets: Vec<Vec<usize>> = fractions
                .iter()
                .filter_map(|&f| subset_indices(n, f, seed).ok())
                .collect();
            for w in sets.windows(2) {
                prop_assert!(w[0].iter().all(|i| w[1].contains(i)));
            }
        }

        #[test]
        fn sig9_keeps_nine_digits(v in -1e6f64..1e6) {
            let s = format_sig9(v);
            let back: f64 = s.parse().unwrap();
            prop_assert!((back - v).abs() <= 5e-9 * v.abs().max(1e-300));
        }
    }
}
