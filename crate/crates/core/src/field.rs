//! Input and output domain of the view field.
//!
//! A [`Viewpoint`] is normalized into `[-1, 1]^5` by a [`Normalizer`] built from
//! the scene bounds, then lifted by the sinusoidal [`encode`] into 60 position
//! features and 40 direction features. [`Parametrization`]s map the unit square
//! onto planes and spheres so inverse queries can be restricted to a surface.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

/// Number of octaves in the sinusoidal encoding.
pub const FREQUENCIES: usize = 10;
/// Features produced per encoded scalar: one sine and one cosine per octave.
pub const ENCODING_DIM: usize = 2 * FREQUENCIES;
pub const POSITION_FEATURES: usize = 3 * ENCODING_DIM;
pub const DIRECTION_FEATURES: usize = 2 * ENCODING_DIM;

/// Position plus yaw/pitch. Roll is not modelled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Yaw in `[0, 2π)`, counter-clockwise from +x.
    pub alpha: f64,
    /// Pitch in `[-π/2, π/2]`, positive looking up.
    pub gamma: f64,
}

impl Viewpoint {
    /// Builds a viewpoint, wrapping yaw into `[0, 2π)` and clamping pitch.
    pub fn new(x: f64, y: f64, z: f64, alpha: f64, gamma: f64) -> Self {
        Viewpoint {
            x,
            y,
            z,
            alpha: wrap_yaw(alpha),
            gamma: gamma.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }

    pub fn at(position: Vec3, alpha: f64, gamma: f64) -> Self {
        Viewpoint::new(position.x, position.y, position.z, alpha, gamma)
    }

    /// Viewpoint at `position` looking along `direction` (need not be unit length).
    pub fn looking(position: Vec3, direction: Vec3) -> Self {
        let d = direction.normalize();
        let alpha = d.y.atan2(d.x);
        let gamma = d.z.clamp(-1.0, 1.0).asin();
        Viewpoint::at(position, alpha, gamma)
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Unit view direction `(cos γ cos α, cos γ sin α, sin γ)`.
    pub fn direction(&self) -> Vec3 {
        let (sa, ca) = self.alpha.sin_cos();
        let (sg, cg) = self.gamma.sin_cos();
        Vec3::new(cg * ca, cg * sa, sg)
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.z, self.alpha, self.gamma]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Viewpoint::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for Viewpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.x, self.y, self.z, self.alpha, self.gamma
        )
    }
}

impl FromStr for Viewpoint {
    type Err = Error;

    /// Parses `x,y,z,alpha,gamma` (angles in radians).
    fn from_str(s: &str) -> Result<Self> {
        let parts = parse_floats(s)?;
        if parts.len() != 5 {
            return Err(Error::invalid(format!(
                "viewpoint needs 5 comma-separated numbers, got {}",
                parts.len()
            )));
        }
        Ok(Viewpoint::new(parts[0], parts[1], parts[2], parts[3], parts[4]))
    }
}

pub(crate) fn wrap_yaw(alpha: f64) -> f64 {
    let a = alpha.rem_euclid(TAU);
    // rem_euclid rounds tiny negatives up to exactly TAU
    if a >= TAU {
        0.0
    } else {
        a
    }
}

pub(crate) fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("not a number: {:?}", p.trim())))
        })
        .collect()
}

/// A point on the probability simplex: fractions of a view per thematic bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThematicDistribution(pub Vec<f64>);

impl ThematicDistribution {
    pub fn uniform(k: usize) -> Self {
        ThematicDistribution(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, i: usize) -> Self {
        let mut m = vec![0.0; k];
        m[i] = 1.0;
        ThematicDistribution(m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Non-negative components summing to one within `tol`.
    pub fn is_simplex(&self, tol: f64) -> bool {
        self.0.iter().all(|&v| v >= 0.0 && v.is_finite()) && (self.sum() - 1.0).abs() <= tol
    }

    pub fn squared_distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl std::ops::Index<usize> for ThematicDistribution {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Affine map from world viewpoints into `[-1, 1]^5`.
///
/// Positions are scaled per axis by the bounding box; yaw uses `α/π − 1` and
/// pitch `2γ/π`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Normalizer {
    pub fn new(bounds: &Aabb) -> Self {
        Normalizer {
            min: [bounds.min.x, bounds.min.y, bounds.min.z],
            max: [bounds.max.x, bounds.max.y, bounds.max.z],
        }
    }

    pub fn bounds(&self) -> Aabb {
        Aabb {
            min: Vec3::from(self.min),
            max: Vec3::from(self.max),
        }
    }

    fn extent(&self, axis: usize) -> f64 {
        let e = self.max[axis] - self.min[axis];
        // flat or empty boxes still need an invertible map
        if e > 0.0 {
            e
        } else {
            1.0
        }
    }

    pub fn normalize(&self, vp: &Viewpoint) -> [f64; 5] {
        let p = [vp.x, vp.y, vp.z];
        let mut out = [0.0; 5];
        for axis in 0..3 {
            out[axis] = 2.0 * (p[axis] - self.min[axis]) / self.extent(axis) - 1.0;
        }
        out[3] = vp.alpha / PI - 1.0;
        out[4] = 2.0 * vp.gamma / PI;
        out
    }

    /// Inverse of [`normalize`](Self::normalize). Angles are not wrapped, so the
    /// result may lie outside the canonical viewpoint ranges.
    pub fn denormalize(&self, t: &[f64; 5]) -> Viewpoint {
        let mut p = [0.0; 3];
        for axis in 0..3 {
            p[axis] = (t[axis] + 1.0) * self.extent(axis) / 2.0 + self.min[axis];
        }
        Viewpoint {
            x: p[0],
            y: p[1],
            z: p[2],
            alpha: (t[3] + 1.0) * PI,
            gamma: t[4] * FRAC_PI_2,
        }
    }

    /// Derivative of each normalized coordinate with respect to its raw coordinate.
    pub fn input_scale(&self) -> [f64; 5] {
        [
            2.0 / self.extent(0),
            2.0 / self.extent(1),
            2.0 / self.extent(2),
            1.0 / PI,
            2.0 / PI,
        ]
    }

    pub fn clamp_position(&self, vp: &Viewpoint) -> Viewpoint {
        Viewpoint {
            x: vp.x.clamp(self.min[0], self.max[0]),
            y: vp.y.clamp(self.min[1], self.max[1]),
            z: vp.z.clamp(self.min[2], self.max[2]),
            ..*vp
        }
    }

    pub fn contains(&self, vp: &Viewpoint) -> bool {
        let p = [vp.x, vp.y, vp.z];
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Phase `2^j t` reduced modulo 2; exact because scaling by a power of two and
/// `rem_euclid` introduce no rounding.
#[inline]
fn octave_phase(t: f64, j: usize) -> f64 {
    (t * (1u32 << j) as f64).rem_euclid(2.0)
}

/// `(sin(2^0 π t), cos(2^0 π t), …, sin(2^9 π t), cos(2^9 π t))`.
pub fn encode(t: f64) -> [f64; ENCODING_DIM] {
    let mut out = [0.0; ENCODING_DIM];
    encode_into(t, &mut out);
    out
}

pub fn encode_into(t: f64, out: &mut [f64]) {
    for j in 0..FREQUENCIES {
        let (s, c) = (PI * octave_phase(t, j)).sin_cos();
        out[2 * j] = s;
        out[2 * j + 1] = c;
    }
}

/// Elementwise derivative of [`encode`] with respect to `t`.
pub fn encode_derivative(t: f64) -> [f64; ENCODING_DIM] {
    let mut out = [0.0; ENCODING_DIM];
    for j in 0..FREQUENCIES {
        let w = PI * (1u32 << j) as f64;
        let (s, c) = (PI * octave_phase(t, j)).sin_cos();
        out[2 * j] = w * c;
        out[2 * j + 1] = -w * s;
    }
    out
}

/// Encodes a normalized 5-vector into position (60) and direction (40) features.
pub fn encode_normalized(t: &[f64; 5], pos: &mut [f64], dir: &mut [f64]) {
    for axis in 0..3 {
        encode_into(t[axis], &mut pos[axis * ENCODING_DIM..(axis + 1) * ENCODING_DIM]);
    }
    for axis in 0..2 {
        encode_into(
            t[3 + axis],
            &mut dir[axis * ENCODING_DIM..(axis + 1) * ENCODING_DIM],
        );
    }
}

pub fn encode_viewpoint(
    normalizer: &Normalizer,
    vp: &Viewpoint,
) -> ([f64; POSITION_FEATURES], [f64; DIRECTION_FEATURES]) {
    let mut pos = [0.0; POSITION_FEATURES];
    let mut dir = [0.0; DIRECTION_FEATURES];
    encode_normalized(&normalizer.normalize(vp), &mut pos, &mut dir);
    (pos, dir)
}

/// A map ζ from the unit square onto a spatial region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parametrization {
    /// Parallelogram `p + a·l·v1 + b·L·v2`.
    Plane {
        origin: [f64; 3],
        v1: [f64; 3],
        v2: [f64; 3],
        l: f64,
        #[serde(rename = "L")]
        big_l: f64,
    },
    Sphere { center: [f64; 3], radius: f64 },
    /// Upper half (`z ≥ center.z`) of a sphere.
    Hemisphere { center: [f64; 3], radius: f64 },
}

impl Parametrization {
    /// Validated plane; direction vectors are normalized.
    pub fn plane(origin: Vec3, v1: Vec3, v2: Vec3, l: f64, big_l: f64) -> Result<Self> {
        let (n1, n2) = (v1.norm(), v2.norm());
        if !(n1 > 0.0 && n2 > 0.0) {
            return Err(Error::invalid("plane direction vectors must be non-zero"));
        }
        let (u1, u2) = (v1 / n1, v2 / n2);
        if u1.cross(&u2).norm() < 1e-9 {
            return Err(Error::invalid("plane direction vectors are parallel"));
        }
        if !(l > 0.0 && big_l > 0.0) {
            return Err(Error::invalid("plane side lengths must be positive"));
        }
        Ok(Parametrization::Plane {
            origin: origin.into(),
            v1: u1.into(),
            v2: u2.into(),
            l,
            big_l,
        })
    }

    pub fn sphere(center: Vec3, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid("sphere radius must be positive"));
        }
        Ok(Parametrization::Sphere {
            center: center.into(),
            radius,
        })
    }

    pub fn hemisphere(center: Vec3, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid("hemisphere radius must be positive"));
        }
        Ok(Parametrization::Hemisphere {
            center: center.into(),
            radius,
        })
    }

    /// Polar angle range covered by `b ∈ [0, 1]`.
    fn polar_span(&self) -> f64 {
        match self {
            Parametrization::Hemisphere { .. } => FRAC_PI_2,
            _ => PI,
        }
    }

    /// ζ(a, b); arguments are clamped into `[0, 1]`.
    pub fn point(&self, a: f64, b: f64) -> Vec3 {
        let (a, b) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
        match self {
            Parametrization::Plane {
                origin,
                v1,
                v2,
                l,
                big_l,
            } => Vec3::from(*origin) + Vec3::from(*v1) * (a * l) + Vec3::from(*v2) * (b * big_l),
            Parametrization::Sphere { center, radius }
            | Parametrization::Hemisphere { center, radius } => {
                let (sa, ca) = (TAU * a).sin_cos();
                let (sb, cb) = (self.polar_span() * b).sin_cos();
                Vec3::from(*center) + Vec3::new(ca * sb, sa * sb, cb) * *radius
            }
        }
    }

    /// Partial derivatives `(∂ζ/∂a, ∂ζ/∂b)`.
    pub fn jacobian(&self, a: f64, b: f64) -> (Vec3, Vec3) {
        let (a, b) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
        match self {
            Parametrization::Plane {
                v1, v2, l, big_l, ..
            } => (Vec3::from(*v1) * *l, Vec3::from(*v2) * *big_l),
            Parametrization::Sphere { radius, .. } | Parametrization::Hemisphere { radius, .. } => {
                let span = self.polar_span();
                let (sa, ca) = (TAU * a).sin_cos();
                let (sb, cb) = (span * b).sin_cos();
                let da = Vec3::new(-sa * sb, ca * sb, 0.0) * (TAU * radius);
                let db = Vec3::new(ca * cb, sa * cb, -sb) * (span * radius);
                (da, db)
            }
        }
    }

    /// Distance from `p` to the region's supporting surface (plane or sphere).
    pub fn residual(&self, p: &Vec3) -> f64 {
        match self {
            Parametrization::Plane { origin, v1, v2, .. } => {
                let n = Vec3::from(*v1).cross(&Vec3::from(*v2)).normalize();
                (p - Vec3::from(*origin)).dot(&n).abs()
            }
            Parametrization::Sphere { center, radius }
            | Parametrization::Hemisphere { center, radius } => {
                ((p - Vec3::from(*center)).norm() - radius).abs()
            }
        }
    }
}

impl FromStr for Parametrization {
    type Err = Error;

    /// Accepts `p=x,y,z;v1=..;v2=..;l=..;L=..` for planes and
    /// `sphere:c=x,y,z;r=..` / `hemisphere:c=x,y,z;r=..`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, body) = match s.split_once(':') {
            Some((k, b)) if !k.contains('=') => (k.trim().to_ascii_lowercase(), b),
            _ => ("plane".to_string(), s),
        };
        let mut fields = std::collections::BTreeMap::new();
        for item in body.split(';').filter(|p| !p.trim().is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got {item:?}")))?;
            fields.insert(key.trim().to_string(), parse_floats(value)?);
        }
        let take = |key: &str, len: usize| -> Result<Vec<f64>> {
            match fields.get(key) {
                Some(v) if v.len() == len => Ok(v.clone()),
                Some(v) => Err(Error::invalid(format!(
                    "{key} needs {len} value(s), got {}",
                    v.len()
                ))),
                None => Err(Error::invalid(format!("missing {key} in {kind} spec"))),
            }
        };
        let vec3 = |v: Vec<f64>| Vec3::new(v[0], v[1], v[2]);
        match kind.as_str() {
            "plane" => Parametrization::plane(
                vec3(take("p", 3)?),
                vec3(take("v1", 3)?),
                vec3(take("v2", 3)?),
                take("l", 1)?[0],
                take("L", 1)?[0],
            ),
            "sphere" => Parametrization::sphere(vec3(take("c", 3)?), take("r", 1)?[0]),
            "hemisphere" => Parametrization::hemisphere(vec3(take("c", 3)?), take("r", 1)?[0]),
            other => Err(Error::invalid(format!("unknown region kind {other:?}"))),
        }
    }
}
