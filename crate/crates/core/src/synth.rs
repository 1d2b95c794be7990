//! Synthetic indoor scenes and simulated region-caption sources.
//!
//! A scene is an axis-aligned room (wall, floor and ceiling classes) holding
//! non-overlapping boxes, cylinders and spheres that stand on the floor.
//! Points are sampled on every visible-able surface and each view carries a
//! depth map ray-cast against the same primitives.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{look_at, pinhole, project_points, CameraView, PointScene, Region2D, SourceTag};
use crate::lang::CategorySpec;

const PLACEMENT_ATTEMPTS: usize = 500;
const WALL_MARGIN: f64 = 0.2;
const OBJECT_GAP: f64 = 0.35;
/// Voxel edge for splitting same-label points into object instances; must stay
/// below `OBJECT_GAP`.
const INSTANCE_VOXEL: f64 = 0.15;
const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Wall,
    Floor,
    Ceiling,
    Object,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    #[default]
    Box,
    Cylinder,
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    #[default]
    Large,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCategory {
    #[serde(flatten)]
    pub spec: CategorySpec,
    pub role: Role,
    #[serde(default)]
    pub shape: Shape,
    #[serde(default)]
    pub size: SizeClass,
    #[serde(default = "yes")]
    pub salient: bool,
    pub color: [f32; 3],
}

impl SceneCategory {
    fn object(name: &str, shape: Shape, size: SizeClass, salient: bool, color: [f32; 3]) -> Self {
        Self {
            spec: CategorySpec::new(name),
            role: Role::Object,
            shape,
            size,
            salient,
            color,
        }
    }

    fn background(name: &str, role: Role, color: [f32; 3]) -> Self {
        Self {
            spec: CategorySpec::new(name),
            role,
            shape: Shape::Box,
            size: SizeClass::Large,
            salient: true,
            color,
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

/// Background classes followed by eight object classes of mixed size,
/// shape and salience.
pub fn default_categories() -> Vec<SceneCategory> {
    use Shape::*;
    use SizeClass::*;
    vec![
        SceneCategory::background("wall", Role::Wall, [0.80, 0.78, 0.72]),
        SceneCategory::background("floor", Role::Floor, [0.45, 0.32, 0.20]),
        SceneCategory::background("ceiling", Role::Ceiling, [0.95, 0.95, 0.95]),
        SceneCategory::object("table", Box, Large, true, [0.85, 0.55, 0.15]),
        SceneCategory::object("cabinet", Box, Large, true, [0.20, 0.35, 0.80]),
        SceneCategory::object("sofa", Box, Large, true, [0.75, 0.10, 0.15]),
        SceneCategory::object("bookshelf", Box, Large, true, [0.15, 0.60, 0.25]),
        SceneCategory::object("chair", Box, Small, true, [0.90, 0.85, 0.10]),
        SceneCategory::object("lamp", Cylinder, Small, false, [0.95, 0.45, 0.75]),
        SceneCategory::object("bin", Cylinder, Small, false, [0.10, 0.75, 0.75]),
        SceneCategory::object("globe", Sphere, Small, false, [0.50, 0.20, 0.70]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub room_extent: [f64; 3],
    pub object_count_range: (usize, usize),
    pub categories: Vec<SceneCategory>,
    /// Surface point density on room surfaces, points per square meter.
    pub points_per_m2: f64,
    /// Density multiplier on object surfaces.
    pub object_density_scale: f64,
    pub color_noise: f64,
    pub view_count: usize,
    pub image_size: (u32, u32),
    pub focal: f64,
    pub camera_height: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room_extent: [6.0, 5.0, 2.8],
            object_count_range: (5, 7),
            categories: default_categories(),
            points_per_m2: 25.0,
            object_density_scale: 6.0,
            color_noise: 0.04,
            view_count: 6,
            image_size: (160, 120),
            focal: 120.0,
            camera_height: 1.7,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.room_extent.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::config("scene.room_extent must be positive"));
        }
        let (lo, hi) = self.object_count_range;
        if lo > hi {
            return Err(Error::config("scene.object_count_range must have min <= max"));
        }
        if !(self.points_per_m2 > 0.0) || !(self.object_density_scale > 0.0) {
            return Err(Error::config("scene.points_per_m2 and object_density_scale must be positive"));
        }
        if self.view_count == 0 || self.image_size.0 == 0 || self.image_size.1 == 0 || !(self.focal > 0.0) {
            return Err(Error::config("scene needs >= 1 view, a non-empty image and a positive focal"));
        }
        if !(self.camera_height > 0.0 && self.camera_height < self.room_extent[2]) {
            return Err(Error::config("scene.camera_height must lie inside the room"));
        }
        if self.color_noise < 0.0 {
            return Err(Error::config("scene.color_noise must be >= 0"));
        }
        for role in [Role::Wall, Role::Floor, Role::Ceiling] {
            if self.categories.iter().filter(|c| c.role == role).count() != 1 {
                return Err(Error::config(format!("scene.categories needs exactly one {role:?} category")));
            }
        }
        if hi > 0 && !self.categories.iter().any(|c| c.role == Role::Object) {
            return Err(Error::config("scene.categories has no object category"));
        }
        if self.categories.len() >= crate::geom::IGNORE as usize {
            return Err(Error::config("too many categories"));
        }
        self.categories.iter().try_for_each(|c| c.spec.validate())
    }

    fn role_index(&self, role: Role) -> usize {
        self.categories.iter().position(|c| c.role == role).expect("validated")
    }
}

/// A primitive standing on the floor. `half` holds the box half extents,
/// `(r, r, h/2)` for a cylinder and `(r, r, r)` for a sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedObject {
    pub category: usize,
    pub shape: Shape,
    /// Footprint centre on the floor.
    pub base: [f64; 2],
    pub half: [f64; 3],
}

impl PlacedObject {
    fn footprint_overlaps(&self, other: &PlacedObject, gap: f64) -> bool {
        (self.base[0] - other.base[0]).abs() < self.half[0] + other.half[0] + gap
            && (self.base[1] - other.base[1]).abs() < self.half[1] + other.half[1] + gap
    }

    fn covers_floor(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.base[0], y - self.base[1]);
        match self.shape {
            Shape::Box => dx.abs() < self.half[0] && dy.abs() < self.half[1],
            Shape::Cylinder => dx * dx + dy * dy < self.half[0] * self.half[0],
            Shape::Sphere => false,
        }
    }

    pub fn height(&self) -> f64 {
        2.0 * self.half[2]
    }

    /// Nearest ray parameter `t > 0` at which `o + t d` meets the surface.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let [bx, by] = self.base;
        match self.shape {
            Shape::Box => {
                let lo = [bx - self.half[0], by - self.half[1], 0.0];
                let hi = [bx + self.half[0], by + self.half[1], self.height()];
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k] < lo[k] || o[k] > hi[k] {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1 && t0 > RAY_EPS).then_some(t0)
            }
            Shape::Cylinder => {
                let r = self.half[0];
                let h = self.height();
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > RAY_EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let (px, py) = (o.x - bx, o.y - by);
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-15 {
                    let b = 2.0 * (px * d.x + py * d.y);
                    let c = px * px + py * py - r * r;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                            let z = o.z + t * d.z;
                            if (0.0..=h).contains(&z) {
                                consider(t);
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    let t = (h - o.z) / d.z;
                    let (x, y) = (px + t * d.x, py + t * d.y);
                    if x * x + y * y <= r * r {
                        consider(t);
                    }
                }
                best
            }
            Shape::Sphere => {
                let r = self.half[0];
                let p = o - Vector3::new(bx, by, r);
                let a = d.dot(d);
                let b = 2.0 * p.dot(d);
                let c = p.dot(&p) - r * r;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)].into_iter().find(|&t| t > RAY_EPS)
            }
        }
    }

    /// Distance from `p` to the sampled surface (bottom faces excluded).
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let [bx, by] = self.base;
        match self.shape {
            Shape::Box => {
                let q = Vector3::new(p.x - bx, p.y - by, p.z - self.half[2]);
                let outside = Vector3::new(
                    (q.x.abs() - self.half[0]).max(0.0),
                    (q.y.abs() - self.half[1]).max(0.0),
                    (q.z.abs() - self.half[2]).max(0.0),
                );
                let inside = (q.x.abs() - self.half[0])
                    .max(q.y.abs() - self.half[1])
                    .max(q.z.abs() - self.half[2])
                    .min(0.0);
                outside.norm() + inside.abs()
            }
            Shape::Cylinder => {
                let radial = ((p.x - bx).hypot(p.y - by) - self.half[0]).abs();
                let top = (p.z - self.height()).abs();
                if p.z > self.height() {
                    top.hypot(((p.x - bx).hypot(p.y - by) - self.half[0]).max(0.0))
                } else {
                    radial.min(top)
                }
            }
            Shape::Sphere => ((p - Vector3::new(bx, by, self.half[0])).norm() - self.half[0]).abs(),
        }
    }
}

/// Ray parameter at which a ray starting inside the room leaves it.
fn room_exit(extent: &[f64; 3], o: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    (0..3)
        .filter(|&k| d[k].abs() > 1e-15)
        .map(|k| if d[k] > 0.0 { (extent[k] - o[k]) / d[k] } else { -o[k] / d[k] })
        .fold(f64::INFINITY, f64::min)
}

fn sample_dims(rng: &mut ChaCha8Rng, shape: Shape, size: SizeClass) -> [f64; 3] {
    let (foot, height, radius) = match size {
        SizeClass::Small => ((0.25, 0.45), (0.3, 0.7), (0.15, 0.25)),
        SizeClass::Large => ((0.8, 1.6), (0.5, 1.3), (0.35, 0.55)),
    };
    match shape {
        Shape::Box => [
            rng.random_range(foot.0..foot.1) / 2.0,
            rng.random_range(foot.0..foot.1) / 2.0,
            rng.random_range(height.0..height.1) / 2.0,
        ],
        Shape::Cylinder => {
            let r = rng.random_range(foot.0..foot.1) / 2.0;
            [r, r, rng.random_range(height.0..height.1) / 2.0]
        }
        Shape::Sphere => {
            let r = rng.random_range(radius.0..radius.1);
            [r, r, r]
        }
    }
}

struct Sampler<'a> {
    rng: &'a mut ChaCha8Rng,
    noise: Normal<f64>,
    points: Vec<[f32; 3]>,
    colors: Vec<[f32; 3]>,
    labels: Vec<u16>,
}

impl Sampler<'_> {
    fn push(&mut self, p: Vector3<f64>, label: usize, color: [f32; 3]) {
        self.points.push([p.x as f32, p.y as f32, p.z as f32]);
        let c = std::array::from_fn(|k| (color[k] as f64 + self.noise.sample(self.rng)).clamp(0.0, 1.0) as f32);
        self.colors.push(c);
        self.labels.push(label as u16);
    }

    fn count(&mut self, area: f64, density: f64) -> usize {
        let expected = area * density;
        let base = expected.floor();
        base as usize + usize::from(self.rng.random::<f64>() < expected - base)
    }

    /// Rectangle `origin + s a + t b`, `s, t` in [0, 1].
    fn rect(&mut self, origin: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>, density: f64, label: usize, color: [f32; 3]) {
        let n = self.count(a.cross(&b).norm(), density);
        for _ in 0..n {
            let p = origin + a * self.rng.random::<f64>() + b * self.rng.random::<f64>();
            self.push(p, label, color);
        }
    }
}

/// Scene plus the primitives it was built from.
pub fn generate_scene_detailed(cfg: &SceneConfig, scene_id: &str) -> Result<(PointScene, Vec<PlacedObject>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [ex, ey, ez] = cfg.room_extent;

    let object_categories: Vec<usize> = (0..cfg.categories.len())
        .filter(|&i| cfg.categories[i].role == Role::Object)
        .collect();
    let (lo, hi) = cfg.object_count_range;
    let count = rng.random_range(lo..=hi);
    let mut order = object_categories.clone();
    order.shuffle(&mut rng);
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(count);
    for k in 0..count {
        if k > 0 && k % order.len() == 0 {
            order.shuffle(&mut rng);
        }
        let category = order[k % order.len()];
        let cat = &cfg.categories[category];
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let half = sample_dims(&mut rng, cat.shape, cat.size);
            let (mx, my) = (half[0] + WALL_MARGIN, half[1] + WALL_MARGIN);
            if 2.0 * mx >= ex || 2.0 * my >= ey || 2.0 * half[2] >= cfg.camera_height {
                continue;
            }
            let cand = PlacedObject {
                category,
                shape: cat.shape,
                base: [rng.random_range(mx..ex - mx), rng.random_range(my..ey - my)],
                half,
            };
            if objects.iter().all(|o| !o.footprint_overlaps(&cand, OBJECT_GAP)) {
                placed = Some(cand);
                break;
            }
        }
        objects.push(placed.ok_or(Error::PlacementFailure {
            object: k,
            attempts: PLACEMENT_ATTEMPTS,
        })?);
    }

    let noise = Normal::new(0.0, cfg.color_noise.max(1e-12)).expect("finite std");
    let mut s = Sampler {
        rng: &mut rng,
        noise,
        points: Vec::new(),
        colors: Vec::new(),
        labels: Vec::new(),
    };
    let dens = cfg.points_per_m2;
    let (wall, floor, ceiling) = (cfg.role_index(Role::Wall), cfg.role_index(Role::Floor), cfg.role_index(Role::Ceiling));
    let color = |i: usize| cfg.categories[i].color;
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    let zero = Vector3::zeros();
    let floor_n = s.count(ex * ey, dens);
    for _ in 0..floor_n {
        let (px, py) = (s.rng.random_range(0.0..ex), s.rng.random_range(0.0..ey));
        if objects.iter().all(|o| !o.covers_floor(px, py)) {
            s.push(Vector3::new(px, py, 0.0), floor, color(floor));
        }
    }
    s.rect(z * ez, x * ex, y * ey, dens, ceiling, color(ceiling));
    s.rect(zero, x * ex, z * ez, dens, wall, color(wall));
    s.rect(y * ey, x * ex, z * ez, dens, wall, color(wall));
    s.rect(zero, y * ey, z * ez, dens, wall, color(wall));
    s.rect(x * ex, y * ey, z * ez, dens, wall, color(wall));

    let od = dens * cfg.object_density_scale;
    for o in &objects {
        let c = color(o.category);
        let [hx, hy, hz] = o.half;
        let b = Vector3::new(o.base[0], o.base[1], 0.0);
        match o.shape {
            Shape::Box => {
                let lo = b - Vector3::new(hx, hy, 0.0);
                let (a, w, h) = (x * 2.0 * hx, y * 2.0 * hy, z * 2.0 * hz);
                s.rect(lo + h, a, w, od, o.category, c);
                s.rect(lo, a, h, od, o.category, c);
                s.rect(lo + w, a, h, od, o.category, c);
                s.rect(lo, w, h, od, o.category, c);
                s.rect(lo + a, w, h, od, o.category, c);
            }
            Shape::Cylinder => {
                let (r, h) = (hx, 2.0 * hz);
                let side = s.count(2.0 * std::f64::consts::PI * r * h, od);
                for _ in 0..side {
                    let th = s.rng.random_range(0.0..std::f64::consts::TAU);
                    let pz = s.rng.random_range(0.0..h);
                    s.push(b + Vector3::new(r * th.cos(), r * th.sin(), pz), o.category, c);
                }
                let top = s.count(std::f64::consts::PI * r * r, od);
                for _ in 0..top {
                    let th = s.rng.random_range(0.0..std::f64::consts::TAU);
                    let rr = r * s.rng.random::<f64>().sqrt();
                    s.push(b + Vector3::new(rr * th.cos(), rr * th.sin(), h), o.category, c);
                }
            }
            Shape::Sphere => {
                let r = hx;
                let n = s.count(4.0 * std::f64::consts::PI * r * r, od);
                for _ in 0..n {
                    let u: [f64; 3] = UnitSphere.sample(s.rng);
                    s.push(b + Vector3::new(0.0, 0.0, r) + Vector3::from(u) * r, o.category, c);
                }
            }
        }
    }
    let (points, colors, labels) = (s.points, s.colors, s.labels);

    let views = (0..cfg.view_count)
        .map(|i| render_view(cfg, &objects, i))
        .collect();
    let scene = PointScene {
        scene_id: scene_id.to_string(),
        points,
        colors,
        labels,
        views,
    };
    scene.validate(Some(cfg.categories.len()))?;
    Ok((scene, objects))
}

pub fn generate_scene(cfg: &SceneConfig, scene_id: &str) -> Result<PointScene> {
    generate_scene_detailed(cfg, scene_id).map(|(s, _)| s)
}

fn render_view(cfg: &SceneConfig, objects: &[PlacedObject], i: usize) -> CameraView {
    let [ex, ey, _] = cfg.room_extent;
    let (w, h) = cfg.image_size;
    let centre = Vector3::new(ex / 2.0, ey / 2.0, 0.0);
    let angle = std::f64::consts::TAU * i as f64 / cfg.view_count as f64 + 0.3;
    let radius = 0.42 * ex.min(ey);
    let eye = centre + Vector3::new(radius * angle.cos(), radius * angle.sin(), cfg.camera_height);
    let target = centre + Vector3::new(0.0, 0.0, 0.4);
    let world_to_cam = look_at(eye, target);
    let intrinsics = pinhole(cfg.focal, cfg.focal, w as f64 / 2.0, h as f64 / 2.0);
    let r_t = world_to_cam.fixed_view::<3, 3>(0, 0).transpose();
    let mut depth = vec![0.0f32; (w * h) as usize];
    for row in 0..h {
        for col in 0..w {
            let cam_dir = Vector3::new(
                (col as f64 + 0.5 - intrinsics[(0, 2)]) / cfg.focal,
                (row as f64 + 0.5 - intrinsics[(1, 2)]) / cfg.focal,
                1.0,
            );
            // Camera z of `eye + t d` equals t because d has unit camera z.
            let d = r_t * cam_dir;
            let t = objects
                .iter()
                .filter_map(|o| o.intersect(&eye, &d))
                .fold(room_exit(&cfg.room_extent, &eye, &d), f64::min);
            depth[(row * w + col) as usize] = t as f32;
        }
    }
    CameraView {
        intrinsics,
        world_to_cam,
        width: w,
        height: h,
        depth,
    }
}

/// Object instance: connected same-label points of an object category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub category: usize,
    pub points: Vec<u32>,
}

/// Splits object-category points into voxel-connected components, ordered by
/// their smallest point index.
pub fn object_instances(scene: &PointScene, categories: &[SceneCategory]) -> Vec<Instance> {
    let key = |i: usize| -> (u16, [i64; 3]) {
        let p = scene.points[i];
        (scene.labels[i], std::array::from_fn(|k| (p[k] as f64 / INSTANCE_VOXEL).floor() as i64))
    };
    let is_object = |l: u16| categories.get(l as usize).is_some_and(|c| c.role == Role::Object);
    let mut voxel_of: HashMap<(u16, [i64; 3]), usize> = HashMap::new();
    let mut voxels: Vec<(u16, [i64; 3])> = Vec::new();
    for i in 0..scene.len() {
        if is_object(scene.labels[i]) {
            let k = key(i);
            voxel_of.entry(k).or_insert_with(|| {
                voxels.push(k);
                voxels.len() - 1
            });
        }
    }
    let mut parent: Vec<usize> = (0..voxels.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (v, &(label, c)) in voxels.iter().enumerate() {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(&u) = voxel_of.get(&(label, [c[0] + dx, c[1] + dy, c[2] + dz])) {
                        let (a, b) = (find(&mut parent, u), find(&mut parent, v));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
    }
    let mut by_root: HashMap<usize, usize> = HashMap::new();
    let mut out: Vec<Instance> = Vec::new();
    for i in 0..scene.len() {
        if !is_object(scene.labels[i]) {
            continue;
        }
        let root = find(&mut parent, voxel_of[&key(i)]);
        let slot = *by_root.entry(root).or_insert_with(|| {
            out.push(Instance {
                category: scene.labels[i] as usize,
                points: Vec::new(),
            });
            out.len() - 1
        });
        out[slot].points.push(i as u32);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStyle {
    /// The profile template filled with the category name.
    Template,
    /// Attribute word followed by the category name.
    Phrase,
}

fn default_template() -> String {
    "a photo of a {}".into()
}

fn default_grid() -> u32 {
    3
}

fn default_source_z_tolerance() -> f64 {
    0.08
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceProfile {
    pub kind: SourceTag,
    pub vocabulary: Vec<String>,
    #[serde(default)]
    pub salient_only: bool,
    #[serde(default)]
    pub min_pixel_area: f64,
    pub caption_style: CaptionStyle,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub box_jitter: f64,
    #[serde(default = "default_template")]
    pub template: String,
    /// Windows per image side for `sw` sources (50% overlap).
    #[serde(default = "default_grid")]
    pub grid: u32,
    /// Occlusion tolerance used when finding what an object covers in a view.
    #[serde(default = "default_source_z_tolerance")]
    pub z_tolerance: f64,
    /// Out-of-vocabulary categories the source still boxes, mapped to the
    /// vocabulary name it reports for them.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub misname: BTreeMap<String, String>,
}

impl SourceProfile {
    pub fn new(kind: SourceTag, vocabulary: Vec<String>, caption_style: CaptionStyle) -> Self {
        Self {
            kind,
            vocabulary,
            salient_only: false,
            min_pixel_area: 0.0,
            caption_style,
            label_noise: 0.0,
            box_jitter: 0.0,
            template: default_template(),
            grid: default_grid(),
            z_tolerance: default_source_z_tolerance(),
            misname: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.kind.as_str();
        if self.vocabulary.is_empty() {
            return Err(Error::config(format!("source {name}: vocabulary is empty")));
        }
        if !(0.0..=1.0).contains(&self.label_noise) || !(0.0..=1.0).contains(&self.box_jitter) {
            return Err(Error::config(format!("source {name}: label_noise and box_jitter must lie in [0, 1]")));
        }
        if !(self.min_pixel_area >= 0.0) || !(self.z_tolerance > 0.0) || self.grid == 0 {
            return Err(Error::config(format!(
                "source {name}: min_pixel_area >= 0, z_tolerance > 0 and grid >= 1 required"
            )));
        }
        if self.template.matches("{}").count() != 1 {
            return Err(Error::config(format!("source {name}: template needs exactly one {{}} slot")));
        }
        if let Some((from, to)) = self.misname.iter().find(|(f, t)| self.vocabulary.contains(f) || !self.vocabulary.contains(t)) {
            return Err(Error::config(format!(
                "source {name}: misname `{from}` -> `{to}` must map outside the vocabulary into it"
            )));
        }
        Ok(())
    }
}

/// A simulated region with the category it covers and the one its caption names.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRegion {
    pub region: Region2D,
    pub true_category: usize,
    pub caption_category: usize,
}

const ATTRIBUTES: [&str; 8] = ["small", "large", "old", "new", "dark", "bright", "plain", "simple"];

fn caption(profile: &SourceProfile, name: &str, rng: &mut ChaCha8Rng) -> String {
    match profile.caption_style {
        CaptionStyle::Template => profile.template.replacen("{}", name, 1),
        CaptionStyle::Phrase => format!("a {} {name}", ATTRIBUTES[rng.random_range(0..ATTRIBUTES.len())]),
    }
}

fn jitter(b: [f64; 4], frac: f64, w: f64, h: f64, rng: &mut ChaCha8Rng) -> [f64; 4] {
    if frac == 0.0 {
        return b;
    }
    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
    let mut j = |x: f64, span: f64| x + rng.random_range(-1.0..=1.0) * frac * span;
    let mut x0 = j(b[0], bw).clamp(0.0, w - 1.0).floor();
    let mut y0 = j(b[1], bh).clamp(0.0, h - 1.0).floor();
    let mut x1 = j(b[2], bw).clamp(0.0, w).ceil();
    let mut y1 = j(b[3], bh).clamp(0.0, h).ceil();
    if x1 <= x0 {
        (x0, x1) = (x0.min(w - 1.0), (x0 + 1.0).min(w));
    }
    if y1 <= y0 {
        (y0, y1) = (y0.min(h - 1.0), (y0 + 1.0).min(h));
    }
    [x0, y0, x1, y1]
}

/// Regions per view with their ground truth. `categories` gives the names,
/// roles and salience of the scene's label indices.
pub fn simulate_source_detailed(
    scene: &PointScene,
    categories: &[SceneCategory],
    profile: &SourceProfile,
    seed: u64,
) -> Result<Vec<Vec<SimRegion>>> {
    profile.validate()?;
    let lookup = |n: &String| {
        categories
            .iter()
            .position(|c| c.name() == n)
            .ok_or_else(|| Error::config(format!("source {}: unknown category `{n}`", profile.kind)))
    };
    let vocab: Vec<usize> = profile.vocabulary.iter().map(lookup).collect::<Result<_>>()?;
    let misname: HashMap<usize, usize> = profile
        .misname
        .iter()
        .map(|(f, t)| Ok((lookup(f)?, lookup(t)?)))
        .collect::<Result<_>>()?;
    let instances = if profile.kind == SourceTag::Sw {
        Vec::new()
    } else {
        object_instances(scene, categories)
    };
    let mut out = Vec::with_capacity(scene.views.len());
    for (vid, view) in scene.views.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(vid as u64 + 1);
        let (w, h) = (view.width as f64, view.height as f64);
        let proj = project_points(scene, vid, profile.z_tolerance)?;
        // (box, true category, reported category before noise)
        let mut found: Vec<([f64; 4], usize, usize)> = Vec::new();
        if profile.kind == SourceTag::Sw {
            let g = profile.grid as f64;
            let (ww, wh) = (2.0 * w / (g + 1.0), 2.0 * h / (g + 1.0));
            for gy in 0..profile.grid {
                for gx in 0..profile.grid {
                    let b = [
                        (gx as f64 * ww / 2.0).floor(),
                        (gy as f64 * wh / 2.0).floor(),
                        ((gx as f64 * ww / 2.0 + ww).ceil()).min(w),
                        ((gy as f64 * wh / 2.0 + wh).ceil()).min(h),
                    ];
                    let mut counts = vec![0usize; categories.len()];
                    for (p, &l) in proj.iter().zip(&scene.labels) {
                        if p.visible && (l as usize) < counts.len() && p.u >= b[0] && p.u < b[2] && p.v >= b[1] && p.v < b[3] {
                            counts[l as usize] += 1;
                        }
                    }
                    let best = (0..counts.len()).fold(0, |m, c| if counts[c] > counts[m] { c } else { m });
                    if counts[best] > 0 && vocab.contains(&best) {
                        found.push((b, best, best));
                    }
                }
            }
        } else {
            for inst in &instances {
                let Some(reported) = (if vocab.contains(&inst.category) {
                    Some(inst.category)
                } else {
                    misname.get(&inst.category).copied()
                }) else {
                    continue;
                };
                if profile.salient_only && !categories[inst.category].salient {
                    continue;
                }
                let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
                for &i in &inst.points {
                    let p = proj[i as usize];
                    if p.visible {
                        (u0, v0, u1, v1) = (u0.min(p.u), v0.min(p.v), u1.max(p.u), v1.max(p.v));
                    }
                }
                if u0 > u1 {
                    continue;
                }
                let b = [u0.floor(), v0.floor(), (u1.floor() + 1.0).min(w), (v1.floor() + 1.0).min(h)];
                if (b[2] - b[0]) * (b[3] - b[1]) < profile.min_pixel_area {
                    continue;
                }
                found.push((b, inst.category, reported));
            }
        }
        let mut regions = Vec::with_capacity(found.len());
        for (b, true_category, reported) in found {
            let mut named = reported;
            if profile.label_noise > 0.0 && rng.random::<f64>() < profile.label_noise {
                let pool: Vec<usize> = if vocab.len() > 1 {
                    vocab.iter().copied().filter(|&c| c != reported).collect()
                } else {
                    (0..categories.len()).filter(|&c| c != reported).collect()
                };
                if !pool.is_empty() {
                    named = pool[rng.random_range(0..pool.len())];
                }
            }
            let text = caption(profile, categories[named].name(), &mut rng);
            let bbox = jitter(b, profile.box_jitter, w, h, &mut rng);
            regions.push(SimRegion {
                region: Region2D {
                    bbox,
                    caption: text,
                    source: profile.kind,
                },
                true_category,
                caption_category: named,
            });
        }
        out.push(regions);
    }
    Ok(out)
}

pub fn simulate_source(
    scene: &PointScene,
    categories: &[SceneCategory],
    profile: &SourceProfile,
    seed: u64,
) -> Result<Vec<Vec<Region2D>>> {
    Ok(simulate_source_detailed(scene, categories, profile, seed)?
        .into_iter()
        .map(|v| v.into_iter().map(|r| r.region).collect())
        .collect())
}
