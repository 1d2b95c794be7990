//! Point-cloud and camera geometry: pinhole projection with a depth-map
//! occlusion test, and association of projected points to 2D caption boxes.

pub mod io;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Label value for points without a usable annotation.
pub const IGNORE: u16 = u16::MAX;

pub const DEFAULT_Z_TOLERANCE: f64 = 0.01;
pub const DEFAULT_MIN_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    DetT,
    DetC,
    Sw,
    GritLike,
    KosLike,
    Synthetic,
}

impl SourceTag {
    pub const ALL: [SourceTag; 6] = [
        SourceTag::DetT,
        SourceTag::DetC,
        SourceTag::Sw,
        SourceTag::GritLike,
        SourceTag::KosLike,
        SourceTag::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::DetT => "det_t",
            SourceTag::DetC => "det_c",
            SourceTag::Sw => "sw",
            SourceTag::GritLike => "grit_like",
            SourceTag::KosLike => "kos_like",
            SourceTag::Synthetic => "synthetic",
        }
    }
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown source tag `{s}`")))
    }
}

/// A posed pinhole camera with a rendered depth map (0 = no surface).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Matrix3<f64>,
    pub world_to_cam: Matrix4<f64>,
    pub width: u32,
    pub height: u32,
    /// Row-major `height x width` camera-frame z depth in meters.
    pub depth: Vec<f32>,
}

impl CameraView {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_cam.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn depth_at(&self, col: u32, row: u32) -> f32 {
        self.depth[(row * self.width + col) as usize]
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.world_to_cam * Vector4::new(p.x, p.y, p.z, 1.0)).xyz()
    }

    /// Lifts pixel coordinates at a camera-frame depth back into the world frame.
    pub fn back_project(&self, u: f64, v: f64, cam_depth: f64) -> Result<Vector3<f64>> {
        let k_inv = self
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::invalid("singular intrinsics"))?;
        let cam = k_inv * Vector3::new(u * cam_depth, v * cam_depth, cam_depth);
        Ok(self.rotation().transpose() * (cam - self.translation()))
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("intrinsics must have positive finite focal entries"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("view has zero width or height"));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::invalid(format!(
                "world_to_cam rotation is not orthonormal (deviation {err:e})"
            )));
        }
        let bottom = self.world_to_cam.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::invalid("world_to_cam last row must be [0, 0, 0, 1]"));
        }
        if self.depth.len() != (self.width as usize) * (self.height as usize) {
            return Err(Error::invalid("depth map size does not match width x height"));
        }
        if self.depth.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::invalid("depth values must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointScene {
    pub scene_id: String,
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub labels: Vec<u16>,
    pub views: Vec<CameraView>,
}

impl PointScene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        let p = self.points[i];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn view(&self, view_id: usize) -> Result<&CameraView> {
        self.views.get(view_id).ok_or_else(|| {
            Error::NotFound(format!(
                "view {view_id} in scene `{}` ({} views)",
                self.scene_id,
                self.views.len()
            ))
        })
    }

    /// Checks the structural invariants. `category_count` additionally bounds labels.
    pub fn validate(&self, category_count: Option<usize>) -> Result<()> {
        let n = self.points.len();
        if n == 0 {
            return Err(Error::invalid("scene has no points"));
        }
        if self.colors.len() != n || self.labels.len() != n {
            return Err(Error::invalid("points, colors and labels differ in length"));
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("scene contains non-finite coordinates"));
        }
        if let Some(k) = category_count {
            if let Some(l) = self.labels.iter().find(|&&l| l != IGNORE && l as usize >= k) {
                return Err(Error::invalid(format!("label {l} out of range for {k} categories")));
            }
        }
        self.views.iter().try_for_each(CameraView::validate)
    }
}

/// Half-open pixel box `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region2D {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub caption: String,
    pub source: SourceTag,
}

impl Region2D {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let [x0, y0, x1, y1] = self.bbox;
        u >= x0 && u < x1 && v >= y0 && v < y1
    }

    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.bbox;
        (x1 - x0) * (y1 - y0)
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        let ok = 0.0 <= x0 && x0 < x1 && x1 <= width as f64 && 0.0 <= y0 && y0 < y1 && y1 <= height as f64;
        if !ok {
            return Err(Error::invalid(format!(
                "region box {:?} invalid for a {width}x{height} image",
                self.bbox
            )));
        }
        if self.caption.trim().is_empty() {
            return Err(Error::invalid("region caption is empty"));
        }
        Ok(())
    }
}

/// A set of scene points paired with one caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLanguagePair {
    pub scene_id: String,
    pub point_indices: Vec<u32>,
    pub caption: String,
    pub source: SourceTag,
    pub view_id: u32,
}

impl RegionLanguagePair {
    pub fn validate(&self, point_count: usize) -> Result<()> {
        if self.point_indices.is_empty() {
            return Err(Error::invalid("pair has an empty point set"));
        }
        if self.point_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("pair point indices must be sorted and unique"));
        }
        if *self.point_indices.last().unwrap() as usize >= point_count {
            return Err(Error::invalid("pair point index out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Pixel coordinates; NaN when the point is at or behind the camera plane.
    pub u: f64,
    pub v: f64,
    pub cam_depth: f64,
    pub visible: bool,
}

pub fn project_points(scene: &PointScene, view_id: usize, z_tolerance: f64) -> Result<Vec<Projection>> {
    project_points_with(Exec::default(), scene, view_id, z_tolerance)
}

pub fn project_points_with(
    exec: Exec,
    scene: &PointScene,
    view_id: usize,
    z_tolerance: f64,
) -> Result<Vec<Projection>> {
    let view = scene.view(view_id)?;
    if !(z_tolerance > 0.0) {
        return Err(Error::invalid("z_tolerance must be positive"));
    }
    if let Some(i) = scene.points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::invalid(format!("point {i} has non-finite coordinates")));
    }
    let k = view.intrinsics;
    let (w, h) = (view.width as f64, view.height as f64);
    Ok(exec.map(&scene.points, |p| {
        let cam = view.to_camera(&Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64));
        let z = cam.z;
        if z <= 0.0 {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                cam_depth: z,
                visible: false,
            };
        }
        let pix = k * cam;
        let (u, v) = (pix.x / z, pix.y / z);
        let visible = u >= 0.0 && u < w && v >= 0.0 && v < h && {
            let d = view.depth_at(u.floor() as u32, v.floor() as u32) as f64;
            (z - d).abs() <= z_tolerance
        };
        Projection {
            u,
            v,
            cam_depth: z,
            visible,
        }
    }))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    pub pairs: Vec<RegionLanguagePair>,
    /// Regions dropped for having fewer than `min_points` visible points.
    pub dropped: usize,
}

/// Pairs each region with the visible points that project inside its box.
pub fn associate_regions(
    scene: &PointScene,
    view_id: usize,
    regions: &[Region2D],
    min_points: usize,
    z_tolerance: f64,
) -> Result<Association> {
    associate_regions_with(Exec::default(), scene, view_id, regions, min_points, z_tolerance)
}

pub fn associate_regions_with(
    exec: Exec,
    scene: &PointScene,
    view_id: usize,
    regions: &[Region2D],
    min_points: usize,
    z_tolerance: f64,
) -> Result<Association> {
    if min_points == 0 {
        return Err(Error::invalid("min_points must be >= 1"));
    }
    let view = scene.view(view_id)?;
    for r in regions {
        r.validate(view.width, view.height)?;
    }
    let proj = project_points_with(exec, scene, view_id, z_tolerance)?;
    let visible: Vec<(u32, f64, f64)> = proj
        .iter()
        .enumerate()
        .filter(|(_, p)| p.visible)
        .map(|(i, p)| (i as u32, p.u, p.v))
        .collect();

    let sets = exec.map(regions, |r| {
        visible
            .iter()
            .filter(|(_, u, v)| r.contains(*u, *v))
            .map(|(i, _, _)| *i)
            .collect::<Vec<u32>>()
    });

    let mut out = Association::default();
    for (r, idx) in regions.iter().zip(sets) {
        if idx.len() < min_points {
            out.dropped += 1;
            continue;
        }
        out.pairs.push(RegionLanguagePair {
            scene_id: scene.scene_id.clone(),
            point_indices: idx,
            caption: r.caption.clone(),
            source: r.source,
            view_id: view_id as u32,
        });
    }
    Ok(out)
}

/// Camera looking from `eye` at `target` with world +z up (x right, y down, z forward).
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Matrix4<f64> {
    let fwd = (target - eye).normalize();
    let mut right = fwd.cross(&Vector3::z());
    if right.norm() < 1e-9 {
        right = Vector3::x();
    }
    let right = right.normalize();
    let down = fwd.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
    let t = -(r * eye);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
}
