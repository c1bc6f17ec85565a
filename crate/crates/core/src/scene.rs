//! Thematically labelled triangle meshes and a procedural city generator.
//!
//! Every triangle carries one class id (and optionally one scalar value). Class
//! 0 is reserved for `sky`: it is what a pixel reports when nothing is hit, so
//! geometry never carries it.

use std::collections::HashSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

pub const SKY: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThematicClass {
    pub id: u8,
    pub name: String,
    #[serde(rename = "color")]
    pub display_color: [u8; 3],
}

impl ThematicClass {
    pub fn new(id: u8, name: &str, display_color: [u8; 3]) -> Self {
        ThematicClass {
            id,
            name: name.to_string(),
            display_color,
        }
    }
}

/// The seven urban view classes, sky first.
pub fn urban_classes() -> Vec<ThematicClass> {
    vec![
        ThematicClass::new(0, "sky", [135, 206, 235]),
        ThematicClass::new(1, "building", [160, 160, 160]),
        ThematicClass::new(2, "water", [30, 90, 200]),
        ThematicClass::new(3, "road", [60, 60, 60]),
        ThematicClass::new(4, "sidewalk", [210, 190, 150]),
        ThematicClass::new(5, "surface", [120, 180, 90]),
        ThematicClass::new(6, "tree", [20, 110, 40]),
    ]
}

/// Checks ids are `0..k` in order, names are unique lowercase identifiers and
/// class 0 is `sky`.
pub fn validate_classes(classes: &[ThematicClass]) -> Result<()> {
    if classes.is_empty() || classes[0].name != "sky" {
        return Err(Error::Validation("class 0 must be \"sky\"".into()));
    }
    if classes.len() > u8::MAX as usize {
        return Err(Error::Validation("too many classes".into()));
    }
    let mut seen = HashSet::new();
    for (i, c) in classes.iter().enumerate() {
        if c.id as usize != i {
            return Err(Error::Validation(format!(
                "class ids must be contiguous from 0; position {i} has id {}",
                c.id
            )));
        }
        let valid_name = !c.name.is_empty()
            && c.name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
        if !valid_name {
            return Err(Error::Validation(format!("invalid class name {:?}", c.name)));
        }
        if !seen.insert(c.name.as_str()) {
            return Err(Error::Validation(format!("duplicate class name {:?}", c.name)));
        }
    }
    Ok(())
}

/// A vertical wall rectangle: `origin + s·u + t·v` for `s, t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Facade {
    pub origin: Vec3,
    /// Horizontal edge, left to right as seen from outside.
    pub u: Vec3,
    /// Vertical edge.
    pub v: Vec3,
    /// Outward unit normal.
    pub normal: Vec3,
}

impl Facade {
    pub fn width(&self) -> f64 {
        self.u.norm()
    }

    pub fn height(&self) -> f64 {
        self.v.norm()
    }

    pub fn center(&self) -> Vec3 {
        self.origin + (self.u + self.v) * 0.5
    }
}

/// An extruded rectangular footprint standing on `z = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    pub id: u32,
    pub tri_start: usize,
    pub tri_count: usize,
    /// `[x0, y0, x1, y1]` with `x0 ≤ x1`, `y0 ≤ y1`.
    pub footprint: [f64; 4],
    pub height: f64,
    pub facades: [Facade; 4],
}

impl Building {
    pub fn new(id: u32, triangles: Range<usize>, footprint: [f64; 4], height: f64) -> Self {
        let [x0, y0, x1, y1] = footprint;
        let v = Vec3::new(0.0, 0.0, height);
        let facade = |origin: Vec3, u: Vec3, normal: Vec3| Facade {
            origin,
            u,
            v,
            normal,
        };
        let facades = [
            facade(Vec3::new(x0, y0, 0.0), Vec3::new(x1 - x0, 0.0, 0.0), -Vec3::y()),
            facade(Vec3::new(x1, y0, 0.0), Vec3::new(0.0, y1 - y0, 0.0), Vec3::x()),
            facade(Vec3::new(x1, y1, 0.0), Vec3::new(x0 - x1, 0.0, 0.0), Vec3::y()),
            facade(Vec3::new(x0, y1, 0.0), Vec3::new(0.0, y0 - y1, 0.0), -Vec3::x()),
        ];
        Building {
            id,
            tri_start: triangles.start,
            tri_count: triangles.len(),
            footprint,
            height,
            facades,
        }
    }

    pub fn triangle_range(&self) -> Range<usize> {
        self.tri_start..self.tri_start + self.tri_count
    }

    pub fn centroid(&self) -> Vec3 {
        let [x0, y0, x1, y1] = self.footprint;
        Vec3::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.5 * self.height)
    }

    /// Strictly inside the solid box, with `margin` of slack on every side.
    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        let [x0, y0, x1, y1] = self.footprint;
        p.x > x0 - margin
            && p.x < x1 + margin
            && p.y > y0 - margin
            && p.y < y1 + margin
            && p.z < self.height + margin
            && p.z > -margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub classes: Vec<ThematicClass>,
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub tri_class: Vec<u8>,
    pub tri_value: Option<Vec<f64>>,
    pub buildings: Vec<Building>,
    pub aabb: Aabb,
}

impl Scene {
    /// Assembles and validates a scene; the bounding box is derived from the vertices.
    pub fn new(
        classes: Vec<ThematicClass>,
        vertices: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
        tri_class: Vec<u8>,
        tri_value: Option<Vec<f64>>,
        buildings: Vec<Building>,
    ) -> Result<Self> {
        let aabb = Aabb::from_points(&vertices);
        let scene = Scene {
            classes,
            vertices,
            triangles,
            tri_class,
            tri_value,
            buildings,
            aabb,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty(classes: Vec<ThematicClass>) -> Result<Self> {
        Scene::new(classes, vec![], vec![], vec![], None, vec![])
    }

    pub fn validate(&self) -> Result<()> {
        validate_classes(&self.classes)?;
        let k = self.classes.len();
        let nv = self.vertices.len();
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Validation("non-finite vertex coordinate".into()));
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v as usize >= nv) {
                return Err(Error::Validation(format!(
                    "triangle {i} indexes past the {nv} vertices"
                )));
            }
        }
        if self.tri_class.len() != self.triangles.len() {
            return Err(Error::Validation(format!(
                "tri_class has {} entries for {} triangles",
                self.tri_class.len(),
                self.triangles.len()
            )));
        }
        for (i, &c) in self.tri_class.iter().enumerate() {
            if c == SKY || c as usize >= k {
                return Err(Error::Validation(format!(
                    "triangle {i} references class {c}, expected 1..{k}"
                )));
            }
        }
        if let Some(values) = &self.tri_value {
            if values.len() != self.triangles.len() {
                return Err(Error::Validation(format!(
                    "tri_value has {} entries for {} triangles",
                    values.len(),
                    self.triangles.len()
                )));
            }
        }
        for b in &self.buildings {
            if b.tri_start + b.tri_count > self.triangles.len() {
                return Err(Error::Validation(format!(
                    "building {} triangle range out of bounds",
                    b.id
                )));
            }
            let [x0, y0, x1, y1] = b.footprint;
            if !(x0 <= x1 && y0 <= y1 && b.height >= 0.0) {
                return Err(Error::Validation(format!("building {} has a malformed footprint", b.id)));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_id(&self, name: &str) -> Option<u8> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn building(&self, id: u32) -> Option<&Building> {
        self.buildings.iter().find(|b| b.id == id)
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let t = self.triangles[i];
        [
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        ]
    }

    /// Whether `p` lies inside (or within `margin` of) a registered building.
    pub fn inside_building(&self, p: &Vec3, margin: f64) -> bool {
        self.buildings.iter().any(|b| b.contains(p, margin))
    }

    /// Triangles carrying any of the given classes.
    pub fn triangles_of(&self, classes: &[u8]) -> Vec<usize> {
        (0..self.triangles.len())
            .filter(|&i| classes.contains(&self.tri_class[i]))
            .collect()
    }

    /// Returns a copy of this scene with a new class table and per-triangle labels.
    pub fn relabeled(&self, classes: Vec<ThematicClass>, tri_class: Vec<u8>) -> Result<Scene> {
        let scene = Scene {
            classes,
            tri_class,
            ..self.clone()
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Incremental mesh assembly with outward (counter-clockwise) winding.
#[derive(Debug, Default)]
pub struct MeshBuilder {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub tri_class: Vec<u8>,
}

impl MeshBuilder {
    fn vertex(&mut self, p: Vec3) -> u32 {
        self.vertices.push(p);
        (self.vertices.len() - 1) as u32
    }

    pub fn triangle(&mut self, a: Vec3, b: Vec3, c: Vec3, class: u8) {
        let t = [self.vertex(a), self.vertex(b), self.vertex(c)];
        self.triangles.push(t);
        self.tri_class.push(class);
    }

    /// Quad `a b c d` in counter-clockwise order as seen from the front.
    pub fn quad(&mut self, a: Vec3, b: Vec3, c: Vec3, d: Vec3, class: u8) {
        let ia = self.vertex(a);
        let ib = self.vertex(b);
        let ic = self.vertex(c);
        let id = self.vertex(d);
        self.triangles.push([ia, ib, ic]);
        self.triangles.push([ia, ic, id]);
        self.tri_class.push(class);
        self.tri_class.push(class);
    }

    /// Upward-facing rectangle on the plane `z`.
    pub fn ground_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, z: f64, class: u8) {
        if x1 <= x0 || y1 <= y0 {
            return;
        }
        self.quad(
            Vec3::new(x0, y0, z),
            Vec3::new(x1, y0, z),
            Vec3::new(x1, y1, z),
            Vec3::new(x0, y1, z),
            class,
        );
    }

    /// Closed axis-aligned box, 12 triangles. Returns the triangle range.
    pub fn closed_box(&mut self, min: Vec3, max: Vec3, class: u8) -> Range<usize> {
        let start = self.triangles.len();
        let p = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
        let (x0, y0, z0) = (min.x, min.y, min.z);
        let (x1, y1, z1) = (max.x, max.y, max.z);
        // walls
        self.quad(p(x0, y0, z0), p(x1, y0, z0), p(x1, y0, z1), p(x0, y0, z1), class);
        self.quad(p(x1, y0, z0), p(x1, y1, z0), p(x1, y1, z1), p(x1, y0, z1), class);
        self.quad(p(x1, y1, z0), p(x0, y1, z0), p(x0, y1, z1), p(x1, y1, z1), class);
        self.quad(p(x0, y1, z0), p(x0, y0, z0), p(x0, y0, z1), p(x0, y1, z1), class);
        // roof and floor
        self.quad(p(x0, y0, z1), p(x1, y0, z1), p(x1, y1, z1), p(x0, y1, z1), class);
        self.quad(p(x0, y0, z0), p(x0, y1, z0), p(x1, y1, z0), p(x1, y0, z0), class);
        start..self.triangles.len()
    }

    /// Open cylinder side wall around a vertical axis.
    pub fn cylinder(&mut self, base: Vec3, radius: f64, height: f64, segments: usize, class: u8) {
        let ring = |i: usize| {
            let a = std::f64::consts::TAU * i as f64 / segments as f64;
            Vec3::new(a.cos(), a.sin(), 0.0) * radius
        };
        let up = Vec3::new(0.0, 0.0, height);
        for i in 0..segments {
            let (r0, r1) = (ring(i), ring(i + 1));
            self.quad(base + r0, base + r1, base + r1 + up, base + r0 + up, class);
        }
    }

    /// Closed cone: side fan to the apex plus a downward-facing base disk.
    pub fn cone(&mut self, base: Vec3, radius: f64, height: f64, segments: usize, class: u8) {
        let ring = |i: usize| {
            let a = std::f64::consts::TAU * i as f64 / segments as f64;
            base + Vec3::new(a.cos(), a.sin(), 0.0) * radius
        };
        let apex = base + Vec3::new(0.0, 0.0, height);
        for i in 0..segments {
            let (r0, r1) = (ring(i), ring(i + 1));
            self.triangle(r0, r1, apex, class);
            self.triangle(base, r1, r0, class);
        }
    }
}

/// Layout knobs for [`generate_city`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityParams {
    /// Blocks per side of the square city grid.
    pub grid: usize,
    /// Side of one square block, meters.
    pub block_size: f64,
    pub street_width: f64,
    /// Probability that a parcel is built on.
    pub building_density: f64,
    pub max_height: f64,
    /// Probability that a tree slot (sidewalk or park) holds a tree.
    pub tree_density: f64,
    /// Probability that an unbuilt parcel is a pond.
    pub water_fraction: f64,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams {
            grid: 4,
            block_size: 60.0,
            street_width: 14.0,
            building_density: 0.8,
            max_height: 60.0,
            tree_density: 0.3,
            water_fraction: 0.1,
        }
    }
}

impl CityParams {
    fn validate(&self) -> Result<()> {
        if self.grid < 1 {
            return Err(Error::invalid("grid size must be at least 1"));
        }
        for (name, v) in [
            ("block size", self.block_size),
            ("street width", self.street_width),
            ("max height", self.max_height),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("building density", self.building_density),
            ("tree density", self.tree_density),
            ("water fraction", self.water_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.block_size < 8.0 {
            return Err(Error::invalid("block size must be at least 8 m"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Parcel {
    Building,
    Water,
    Park,
}

const TREE_SEGMENTS: usize = 6;

/// Procedural grid city using the [`urban_classes`] table.
///
/// Streets separate square blocks; each block has a sidewalk ring and a lot
/// split into parcels that hold a box building, a pond or a park. Ground
/// pieces tile the plane `z = 0` without overlap, so no two ground triangles
/// ever compete for the same pixel.
pub fn generate_city(seed: u64, params: &CityParams) -> Result<Scene> {
    params.validate()?;
    let classes = urban_classes();
    let id = |name: &str| classes.iter().position(|c| c.name == name).unwrap() as u8;
    let (building, water, road, sidewalk, surface, tree) = (
        id("building"),
        id("water"),
        id("road"),
        id("sidewalk"),
        id("surface"),
        id("tree"),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = params.grid;
    let street = params.street_width;
    let block = params.block_size;
    let pitch = block + street;
    let span = g as f64 * pitch + street;
    let margin = 0.5 * block;
    let sw = (block / 6.0).min(3.0);
    let lot = block - 2.0 * sw;
    let per_side = ((lot / 25.0).round() as usize).max(1);
    let parcel = lot / per_side as f64;

    // Parcel assignment first, so guarantees can be enforced before meshing.
    let n_parcels = g * g * per_side * per_side;
    let mut kinds: Vec<Parcel> = (0..n_parcels)
        .map(|_| {
            if rng.gen_bool(params.building_density) {
                Parcel::Building
            } else if rng.gen_bool(params.water_fraction) {
                Parcel::Water
            } else {
                Parcel::Park
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n_parcels).collect();
    order.shuffle(&mut rng);
    if params.building_density > 0.0 && !kinds.contains(&Parcel::Building) {
        kinds[order[0]] = Parcel::Building;
    }
    if params.water_fraction > 0.0 && !kinds.contains(&Parcel::Water) {
        if let Some(&i) = order.iter().find(|&&i| kinds[i] != Parcel::Building) {
            kinds[i] = Parcel::Water;
        } else if n_parcels > 1 {
            kinds[order[n_parcels - 1]] = Parcel::Water;
        }
    }

    let mut mesh = MeshBuilder::default();

    // Outer apron and streets.
    mesh.ground_rect(-margin, -margin, span + margin, 0.0, 0.0, surface);
    mesh.ground_rect(-margin, span, span + margin, span + margin, 0.0, surface);
    mesh.ground_rect(-margin, 0.0, 0.0, span, 0.0, surface);
    mesh.ground_rect(span, 0.0, span + margin, span, 0.0, surface);
    for j in 0..=g {
        let y0 = j as f64 * pitch;
        mesh.ground_rect(0.0, y0, span, y0 + street, 0.0, road);
    }
    for i in 0..=g {
        let x0 = i as f64 * pitch;
        for j in 0..g {
            let y0 = j as f64 * pitch + street;
            mesh.ground_rect(x0, y0, x0 + street, y0 + block, 0.0, road);
        }
    }

    let mut footprints = Vec::new();
    let mut tree_spots = Vec::new();
    for bi in 0..g {
        for bj in 0..g {
            let bx0 = bi as f64 * pitch + street;
            let by0 = bj as f64 * pitch + street;
            let (bx1, by1) = (bx0 + block, by0 + block);
            mesh.ground_rect(bx0, by0, bx1, by0 + sw, 0.0, sidewalk);
            mesh.ground_rect(bx0, by1 - sw, bx1, by1, 0.0, sidewalk);
            mesh.ground_rect(bx0, by0 + sw, bx0 + sw, by1 - sw, 0.0, sidewalk);
            mesh.ground_rect(bx1 - sw, by0 + sw, bx1, by1 - sw, 0.0, sidewalk);

            // Street trees along the sidewalk centerline, every 10 m.
            let slots = (block / 10.0).floor() as usize;
            for s in 0..slots {
                let t = (s as f64 + 0.5) * block / slots as f64;
                for p in [
                    Vec3::new(bx0 + t, by0 + 0.5 * sw, 0.0),
                    Vec3::new(bx0 + t, by1 - 0.5 * sw, 0.0),
                    Vec3::new(bx0 + 0.5 * sw, by0 + t, 0.0),
                    Vec3::new(bx1 - 0.5 * sw, by0 + t, 0.0),
                ] {
                    if rng.gen_bool(params.tree_density) {
                        tree_spots.push(p);
                    }
                }
            }

            for pi in 0..per_side {
                for pj in 0..per_side {
                    let idx = ((bi * g + bj) * per_side + pi) * per_side + pj;
                    let px0 = bx0 + sw + pi as f64 * parcel;
                    let py0 = by0 + sw + pj as f64 * parcel;
                    let (px1, py1) = (px0 + parcel, py0 + parcel);
                    match kinds[idx] {
                        Parcel::Water => mesh.ground_rect(px0, py0, px1, py1, 0.0, water),
                        Parcel::Park => {
                            mesh.ground_rect(px0, py0, px1, py1, 0.0, surface);
                            let n = (parcel / 8.0).floor().max(1.0) as usize;
                            for a in 0..n {
                                for b in 0..n {
                                    if rng.gen_bool(params.tree_density) {
                                        let jitter = Vec3::new(
                                            rng.gen_range(-1.5..1.5),
                                            rng.gen_range(-1.5..1.5),
                                            0.0,
                                        );
                                        let c = Vec3::new(
                                            px0 + (a as f64 + 0.5) * parcel / n as f64,
                                            py0 + (b as f64 + 0.5) * parcel / n as f64,
                                            0.0,
                                        );
                                        tree_spots.push(c + jitter);
                                    }
                                }
                            }
                        }
                        Parcel::Building => {
                            mesh.ground_rect(px0, py0, px1, py1, 0.0, surface);
                            let setback = 2.0_f64.min(parcel / 8.0);
                            let mut inset = || setback + rng.gen_range(0.0..0.15) * parcel;
                            let fp = [px0 + inset(), py0 + inset(), px1 - inset(), py1 - inset()];
                            let height = params.max_height * rng.gen_range(0.25..=1.0);
                            footprints.push((fp, height));
                        }
                    }
                }
            }
        }
    }
    if params.tree_density > 0.0 && tree_spots.is_empty() {
        tree_spots.push(Vec3::new(street + 0.5 * sw, street + 0.5 * sw, 0.0));
    }

    let mut buildings = Vec::with_capacity(footprints.len());
    for (i, (fp, height)) in footprints.into_iter().enumerate() {
        let range = mesh.closed_box(
            Vec3::new(fp[0], fp[1], 0.0),
            Vec3::new(fp[2], fp[3], height),
            building,
        );
        buildings.push(Building::new(i as u32, range, fp, height));
    }

    for base in tree_spots {
        let trunk_h = 2.5;
        mesh.cylinder(base, 0.25, trunk_h, TREE_SEGMENTS, tree);
        let crown_r = rng.gen_range(1.5..2.5);
        let crown_h = rng.gen_range(4.0..7.0);
        mesh.cone(base + Vec3::new(0.0, 0.0, 2.0), crown_r, crown_h, TREE_SEGMENTS, tree);
    }

    Scene::new(
        classes,
        mesh.vertices,
        mesh.triangles,
        mesh.tri_class,
        None,
        buildings,
    )
}

/// One tile of a building facade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FacadePatch {
    pub building: u32,
    pub facade: usize,
    pub row: usize,
    pub col: usize,
    /// Lower-left corner of the tile as seen from outside.
    #[serde(with = "crate::geom::vec3_array")]
    pub origin: Vec3,
    #[serde(with = "crate::geom::vec3_array")]
    pub u: Vec3,
    #[serde(with = "crate::geom::vec3_array")]
    pub v: Vec3,
    #[serde(with = "crate::geom::vec3_array")]
    pub center: Vec3,
    #[serde(with = "crate::geom::vec3_array")]
    pub normal: Vec3,
}

impl FacadePatch {
    pub fn area(&self) -> f64 {
        self.u.norm() * self.v.norm()
    }

    /// Point at fractional coordinates `(s, t) ∈ [0, 1]²` of the tile.
    pub fn point(&self, s: f64, t: f64) -> Vec3 {
        self.origin + self.u * s + self.v * t
    }
}

fn tiles(length: f64, size: f64) -> usize {
    if length <= 0.0 {
        0
    } else {
        // tolerance keeps exact multiples (20 ft into 100 ft) from gaining a sliver
        ((length / size) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Tiles every facade of `building` into `patch_size` squares; the last row and
/// column absorb the remainder.
pub fn facade_patches(building: &Building, patch_size: f64) -> Result<Vec<FacadePatch>> {
    if !(patch_size > 0.0) {
        return Err(Error::invalid("patch size must be positive"));
    }
    let mut out = Vec::new();
    for (fi, f) in building.facades.iter().enumerate() {
        let (w, h) = (f.width(), f.height());
        let (cols, rows) = (tiles(w, patch_size), tiles(h, patch_size));
        if cols == 0 || rows == 0 {
            continue;
        }
        let (ud, vd) = (f.u / w, f.v / h);
        for row in 0..rows {
            let t0 = row as f64 * patch_size;
            let t1 = ((row + 1) as f64 * patch_size).min(h);
            for col in 0..cols {
                let s0 = col as f64 * patch_size;
                let s1 = ((col + 1) as f64 * patch_size).min(w);
                let origin = f.origin + ud * s0 + vd * t0;
                let (u, v) = (ud * (s1 - s0), vd * (t1 - t0));
                out.push(FacadePatch {
                    building: building.id,
                    facade: fi,
                    row,
                    col,
                    origin,
                    u,
                    v,
                    center: origin + (u + v) * 0.5,
                    normal: f.normal,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    classes: Vec<ThematicClass>,
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[u32; 3]>,
    tri_class: Vec<u8>,
    tri_value: Option<Vec<f64>>,
    buildings: Vec<BuildingRecord>,
}

#[derive(Serialize, Deserialize)]
struct BuildingRecord {
    id: u32,
    tri_start: usize,
    tri_count: usize,
    footprint: [f64; 4],
    height: f64,
}

pub fn scene_to_json(scene: &Scene) -> String {
    let file = SceneFile {
        version: 1,
        classes: scene.classes.clone(),
        vertices: scene.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
        triangles: scene.triangles.clone(),
        tri_class: scene.tri_class.clone(),
        tri_value: scene.tri_value.clone(),
        buildings: scene
            .buildings
            .iter()
            .map(|b| BuildingRecord {
                id: b.id,
                tri_start: b.tri_start,
                tri_count: b.tri_count,
                footprint: b.footprint,
                height: b.height,
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("scene serialization is infallible")
}

pub fn scene_from_json(text: &str, path: &Path) -> Result<Scene> {
    let file: SceneFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if file.version != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            column: 0,
            message: format!("unsupported scene version {}", file.version),
        });
    }
    let buildings = file
        .buildings
        .into_iter()
        .map(|b| Building::new(b.id, b.tri_start..b.tri_start + b.tri_count, b.footprint, b.height))
        .collect();
    Scene::new(
        file.classes,
        file.vertices.into_iter().map(Vec3::from).collect(),
        file.triangles,
        file.tri_class,
        file.tri_value,
        buildings,
    )
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scene_to_json(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text, path)
}
