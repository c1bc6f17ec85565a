//! Software rasterization of class-labelled scenes.
//!
//! Pixels are sampled at their centers with a top-left fill rule and a
//! nearest-depth test; no anti-aliasing, since blending class ids is
//! meaningless. The per-bin pixel fractions of a render are the ground-truth
//! distributions the field is trained on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ThematicDistribution, Viewpoint};
use crate::geom::Vec3;
use crate::scene::{Scene, SKY};

/// Intrinsics shared by every render of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub vertical_fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            vertical_fov_deg: 60.0,
            width: 64,
            height: 64,
            near: 0.1,
            far: 5000.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.vertical_fov_deg > 0.0 && self.vertical_fov_deg < 180.0) {
            return Err(Error::invalid(format!(
                "vertical fov must be in (0, 180) degrees, got {}",
                self.vertical_fov_deg
            )));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::invalid("image size must be at least 1x1"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(format!(
                "clip planes must satisfy 0 < near < far, got {} / {}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    pub fn with_size(self, width: usize, height: usize) -> Self {
        CameraConfig {
            width,
            height,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub viewpoint: Viewpoint,
    pub config: CameraConfig,
}

/// World-space camera basis plus pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub eye: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraFrame {
    /// Direction through the center of pixel `(i, j)`, scaled so its forward
    /// component is 1 (the ray parameter then equals view depth).
    pub fn pixel_ray(&self, i: usize, j: usize) -> Vec3 {
        let sx = (i as f64 + 0.5 - self.cx) / self.focal;
        let sy = (j as f64 + 0.5 - self.cy) / self.focal;
        self.forward + self.right * sx - self.up * sy
    }
}

impl Camera {
    pub fn new(viewpoint: Viewpoint, config: CameraConfig) -> Self {
        Camera { viewpoint, config }
    }

    pub fn frame(&self) -> Result<CameraFrame> {
        self.config.validate()?;
        let forward = self.viewpoint.direction();
        if self.viewpoint.gamma.cos().abs() < 1e-12 {
            return Err(Error::DegenerateCamera(self.viewpoint.gamma));
        }
        let right = forward.cross(&Vec3::z()).normalize();
        let up = right.cross(&forward);
        let half = 0.5 * self.config.vertical_fov_deg.to_radians();
        let focal = 0.5 * self.config.height as f64 / half.tan();
        Ok(CameraFrame {
            eye: self.viewpoint.position(),
            right,
            up,
            forward,
            focal,
            cx: 0.5 * self.config.width as f64,
            cy: 0.5 * self.config.height as f64,
        })
    }
}

/// Per-pixel class id, view depth and optional scalar value, row-major from the top.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassImage {
    pub width: usize,
    pub height: usize,
    pub class: Vec<u8>,
    /// `+∞` where nothing was hit.
    pub depth: Vec<f64>,
    /// Present iff the scene carries per-triangle values; `NaN` on sky pixels.
    pub value: Option<Vec<f64>>,
}

impl ClassImage {
    fn blank(width: usize, height: usize, with_value: bool) -> Self {
        let n = width * height;
        ClassImage {
            width,
            height,
            class: vec![SKY; n],
            depth: vec![f64::INFINITY; n],
            value: with_value.then(|| vec![f64::NAN; n]),
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> u8 {
        self.class[j * self.width + i]
    }
}

/// How pixels are aggregated into distribution components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinSpec {
    /// One bin per class id, sky first.
    Categorical { k: usize },
    /// Bins `[e_i, e_{i+1})` over the scalar channel (the last one closed),
    /// preceded by a sky bin. Values outside the edges clamp to the end bins.
    Scalar { edges: Vec<f64> },
}

impl BinSpec {
    pub fn categorical(k: usize) -> Self {
        BinSpec::Categorical { k }
    }

    pub fn scalar(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::invalid("scalar bins need at least two edges"));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid("scalar bin edges must be finite and strictly increasing"));
        }
        Ok(BinSpec::Scalar { edges })
    }

    /// Number of distribution components, sky included.
    pub fn k(&self) -> usize {
        match self {
            BinSpec::Categorical { k } => *k,
            BinSpec::Scalar { edges } => edges.len(),
        }
    }

    /// Component names: the scene's class names, or `sky, bin1, …` for scalar bins.
    pub fn component_names(&self, scene_classes: &[String]) -> Vec<String> {
        match self {
            BinSpec::Categorical { .. } => scene_classes.to_vec(),
            BinSpec::Scalar { edges } => std::iter::once("sky".to_string())
                .chain((1..edges.len()).map(|i| format!("bin{i}")))
                .collect(),
        }
    }

    fn scalar_bin(edges: &[f64], v: f64) -> usize {
        let n = edges.len() - 1;
        edges.partition_point(|&e| e <= v).saturating_sub(1).min(n - 1)
    }
}

/// Fraction of pixels per bin.
pub fn histogram(image: &ClassImage, bins: &BinSpec) -> Result<ThematicDistribution> {
    let k = bins.k();
    let mut counts = vec![0u64; k];
    match bins {
        BinSpec::Categorical { .. } => {
            for &c in &image.class {
                let slot = counts.get_mut(c as usize).ok_or_else(|| {
                    Error::invalid(format!("pixel class {c} outside the {k} categorical bins"))
                })?;
                *slot += 1;
            }
        }
        BinSpec::Scalar { edges } => {
            let values = image
                .value
                .as_ref()
                .ok_or_else(|| Error::invalid("scalar bins need an image with a value channel"))?;
            for (&c, &v) in image.class.iter().zip(values) {
                if c == SKY {
                    counts[0] += 1;
                } else {
                    counts[1 + BinSpec::scalar_bin(edges, v)] += 1;
                }
            }
        }
    }
    let total = image.class.len() as f64;
    Ok(ThematicDistribution(
        counts.into_iter().map(|c| c as f64 / total).collect(),
    ))
}

/// Screen-space vertex: pixel coordinates (y down) and reciprocal view depth.
#[derive(Debug, Clone, Copy)]
struct ScreenVertex {
    x: f64,
    y: f64,
    inv_z: f64,
}

#[inline]
fn orient(a: &ScreenVertex, b: &ScreenVertex, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// Top-left rule for a positively oriented (clockwise on screen) triangle:
/// pixel centers exactly on an edge belong to it only for top and left edges.
/// The predicate is antisymmetric, so a shared edge is owned by exactly one side.
#[inline]
fn owns_edge(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

struct Target<'a> {
    image: &'a mut ClassImage,
    far: f64,
}

impl Target<'_> {
    fn fill(&mut self, v: [ScreenVertex; 3], class: u8, value: f64) {
        let [a, mut b, mut c] = v;
        let mut area = orient(&a, &b, c.x, c.y);
        if area == 0.0 || !area.is_finite() {
            return;
        }
        if area < 0.0 {
            std::mem::swap(&mut b, &mut c);
            area = -area;
        }
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        let min_x = a.x.min(b.x).min(c.x);
        let max_x = a.x.max(b.x).max(c.x);
        let min_y = a.y.min(b.y).min(c.y);
        let max_y = a.y.max(b.y).max(c.y);
        if max_x < 0.0 || max_y < 0.0 || min_x > w || min_y > h {
            return;
        }
        let i0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let i1 = (max_x - 0.5).floor().min(w - 1.0);
        let j0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let j1 = (max_y - 0.5).floor().min(h - 1.0);
        if i1 < 0.0 || j1 < 0.0 {
            return;
        }
        let (i1, j1) = (i1 as usize, j1 as usize);
        let (own_bc, own_ca, own_ab) = (owns_edge(&b, &c), owns_edge(&c, &a), owns_edge(&a, &b));
        let inside = |e: f64, own: bool| e > 0.0 || (e == 0.0 && own);
        let width = self.image.width;
        for j in j0..=j1 {
            let py = j as f64 + 0.5;
            for i in i0..=i1 {
                let px = i as f64 + 0.5;
                let wa = orient(&b, &c, px, py);
                let wb = orient(&c, &a, px, py);
                let wc = orient(&a, &b, px, py);
                if !(inside(wa, own_bc) && inside(wb, own_ca) && inside(wc, own_ab)) {
                    continue;
                }
                let inv_z = (wa * a.inv_z + wb * b.inv_z + wc * c.inv_z) / area;
                let depth = 1.0 / inv_z;
                if depth > self.far {
                    continue;
                }
                let idx = j * width + i;
                if depth < self.image.depth[idx] {
                    self.image.depth[idx] = depth;
                    self.image.class[idx] = class;
                    if let Some(values) = self.image.value.as_mut() {
                        values[idx] = value;
                    }
                }
            }
        }
    }
}

/// Clips a camera-space polygon against `z ≥ near`.
fn clip_near(poly: &[Vec3], near: f64, out: &mut Vec<Vec3>) {
    out.clear();
    for (i, &cur) in poly.iter().enumerate() {
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        let (cin, pin) = (cur.z >= near, prev.z >= near);
        if cin != pin {
            let t = (near - prev.z) / (cur.z - prev.z);
            let mut p = prev + (cur - prev) * t;
            p.z = near;
            out.push(p);
        }
        if cin {
            out.push(cur);
        }
    }
}

/// Renders the scene's class labels from `camera`.
pub fn render(scene: &Scene, camera: &Camera) -> Result<ClassImage> {
    let frame = camera.frame()?;
    let cfg = camera.config;
    let mut image = ClassImage::blank(cfg.width, cfg.height, scene.tri_value.is_some());

    let cam: Vec<Vec3> = scene
        .vertices
        .iter()
        .map(|p| {
            let d = p - frame.eye;
            Vec3::new(d.dot(&frame.right), d.dot(&frame.up), d.dot(&frame.forward))
        })
        .collect();
    let tan_x = frame.cx / frame.focal;
    let tan_y = frame.cy / frame.focal;

    let mut target = Target {
        image: &mut image,
        far: cfg.far,
    };
    let mut clipped = Vec::with_capacity(4);
    for (t, tri) in scene.triangles.iter().enumerate() {
        let v = [
            cam[tri[0] as usize],
            cam[tri[1] as usize],
            cam[tri[2] as usize],
        ];
        let all = |f: &dyn Fn(&Vec3) -> bool| v.iter().all(f);
        if all(&|p| p.z < cfg.near)
            || all(&|p| p.z > cfg.far)
            || all(&|p| p.x > p.z * tan_x)
            || all(&|p| p.x < -p.z * tan_x)
            || all(&|p| p.y > p.z * tan_y)
            || all(&|p| p.y < -p.z * tan_y)
        {
            continue;
        }
        clip_near(&v, cfg.near, &mut clipped);
        if clipped.len() < 3 {
            continue;
        }
        let project = |p: &Vec3| ScreenVertex {
            x: frame.cx + frame.focal * p.x / p.z,
            y: frame.cy - frame.focal * p.y / p.z,
            inv_z: 1.0 / p.z,
        };
        let class = scene.tri_class[t];
        let value = scene.tri_value.as_ref().map_or(f64::NAN, |vals| vals[t]);
        let first = project(&clipped[0]);
        for k in 1..clipped.len() - 1 {
            target.fill([first, project(&clipped[k]), project(&clipped[k + 1])], class, value);
        }
    }
    Ok(image)
}

/// Renders and aggregates in one step.
pub fn render_histogram(scene: &Scene, camera: &Camera, bins: &BinSpec) -> Result<ThematicDistribution> {
    histogram(&render(scene, camera)?, bins)
}

/// RGB false-color image of the class labels, PNG-encoded.
pub fn render_falsecolor(scene: &Scene, camera: &Camera) -> Result<Vec<u8>> {
    let image = render(scene, camera)?;
    let mut rgb = Vec::with_capacity(image.class.len() * 3);
    for &c in &image.class {
        let color = scene
            .classes
            .get(c as usize)
            .map_or([0, 0, 0], |cls| cls.display_color);
        rgb.extend_from_slice(&color);
    }
    encode_png(image.width, image.height, &rgb)
}

pub fn encode_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::invalid(format!("png: {e}")))?;
        writer
            .write_image_data(rgb)
            .map_err(|e| Error::invalid(format!("png: {e}")))?;
    }
    Ok(out)
}
