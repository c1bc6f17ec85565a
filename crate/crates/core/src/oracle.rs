//! Brute-force reference renderer: one ray per pixel center against every
//! triangle. Slow, but shares no code with the rasterizer beyond the camera
//! basis, so agreement between the two is meaningful.

use rand::Rng;

use crate::error::Result;
use crate::field::Viewpoint;
use crate::geom::Vec3;
use crate::raster::{Camera, CameraConfig, ClassImage};
use crate::scene::{urban_classes, Scene, SKY};

/// Möller–Trumbore intersection; returns the ray parameter of the hit.
pub fn intersect(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

/// Ray-cast class image. Rays have unit forward component, so the hit
/// parameter is view depth and the clip range applies to it directly.
pub fn raycast(scene: &Scene, camera: &Camera) -> Result<ClassImage> {
    let frame = camera.frame()?;
    let cfg = camera.config;
    let n = cfg.width * cfg.height;
    let mut image = ClassImage {
        width: cfg.width,
        height: cfg.height,
        class: vec![SKY; n],
        depth: vec![f64::INFINITY; n],
        value: scene.tri_value.as_ref().map(|_| vec![f64::NAN; n]),
    };
    for j in 0..cfg.height {
        for i in 0..cfg.width {
            let dir = frame.pixel_ray(i, j);
            let idx = j * cfg.width + i;
            for t in 0..scene.triangles.len() {
                let Some(depth) = intersect(&frame.eye, &dir, &scene.triangle(t)) else {
                    continue;
                };
                if depth < cfg.near || depth > cfg.far || depth >= image.depth[idx] {
                    continue;
                }
                image.depth[idx] = depth;
                image.class[idx] = scene.tri_class[t];
                if let (Some(out), Some(vals)) = (image.value.as_mut(), scene.tri_value.as_ref()) {
                    out[idx] = vals[t];
                }
            }
        }
    }
    Ok(image)
}

/// Fraction of pixels per class from the ray-cast image.
pub fn raycast_distribution(scene: &Scene, camera: &Camera) -> Result<Vec<f64>> {
    let image = raycast(scene, camera)?;
    let mut m = vec![0.0; scene.k()];
    for &c in &image.class {
        m[c as usize] += 1.0;
    }
    let total = image.class.len() as f64;
    Ok(m.into_iter().map(|c| c / total).collect())
}

/// A handful of random triangles around a camera at the origin, many of
/// them straddling the image borders and the near plane.
pub fn random_case(rng: &mut impl Rng, size: usize) -> (Scene, Camera) {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut tri_class = Vec::new();
    let n = rng.gen_range(3..12);
    for t in 0..n {
        let center = Vec3::new(
            rng.gen_range(-5.0..25.0),
            rng.gen_range(-12.0..12.0),
            rng.gen_range(-12.0..12.0),
        );
        for _ in 0..3 {
            let offset = Vec3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            vertices.push(center + offset);
        }
        let b = 3 * t as u32;
        triangles.push([b, b + 1, b + 2]);
        tri_class.push(rng.gen_range(1..7));
    }
    let scene = Scene::new(urban_classes(), vertices, triangles, tri_class, None, vec![])
        .expect("random scene is valid");
    let vp = Viewpoint::new(
        0.0,
        0.0,
        0.0,
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
    );
    let camera = Camera::new(vp, CameraConfig::default().with_size(size, size));
    (scene, camera)
}
