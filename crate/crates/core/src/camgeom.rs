//! Pinhole camera geometry: projection, backprojection, voxel indexing and
//! planar homography warps.
//!
//! Conventions used throughout the crate:
//! - poses map world to camera, `p_cam = R·p_world + t`;
//! - pixel centers sit at integer coordinates and the image domain is
//!   `[0, width) × [0, height)`;
//! - depth is the camera-frame z of a point, not the distance along the ray.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, Image};

const ORTHONORMAL_TOL: f64 = 1e-9;
/// Loaded poses carry `%.9g` rounding, so they only satisfy a looser check.
const LOADED_ORTHONORMAL_TOL: f64 = 1e-6;
const MIN_WARP_W: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center, horizontal field
    /// of view `fov_x` in radians.
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            f,
            f,
            0.5 * (width as f64 - 1.0),
            0.5 * (height as f64 - 1.0),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("invalid intrinsics {self:?}")))
        }
    }

    #[inline]
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.x < self.width as f64
            && pixel.y >= 0.0
            && pixel.y < self.height as f64
    }
}

/// Rigid world→camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::checked(rotation, translation, ORTHONORMAL_TOL)
    }

    /// Like [`Pose::new`] with the looser tolerance used for poses read
    /// back from text (9 significant digits).
    pub fn new_loaded(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::checked(rotation, translation, LOADED_ORTHONORMAL_TOL)
    }

    fn checked(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let det = rotation.determinant();
        if gram.amax() > tol || (det - 1.0).abs() > tol {
            return Err(Error::Precondition(format!(
                "rotation not orthonormal (|RᵀR−I|={:e}, det={det})",
                gram.amax()
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; camera y points "down" in the
    /// image, so the world `up` maps to −y.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Precondition("eye coincides with target".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Precondition("view direction parallel to up".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    #[inline]
    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    #[inline]
    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Intrinsics plus pose; everything needed to map between pixels and world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

/// One rendered viewpoint with aligned image and dense depth.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: Camera,
    pub image: Image,
    pub depth: DepthMap,
}

impl CameraView {
    pub fn new(camera: Camera, image: Image, depth: DepthMap) -> Result<Self> {
        let k = &camera.intrinsics;
        if image.width != k.width
            || image.height != k.height
            || !image.same_shape(&depth)
        {
            return Err(Error::DimensionMismatch(format!(
                "intrinsics {}x{}, image {}x{}, depth {}x{}",
                k.width, k.height, image.width, image.height, depth.width, depth.height
            )));
        }
        Ok(Self {
            camera,
            image,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.camera.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.camera.intrinsics.height
    }

    /// World point seen at integer pixel `(x, y)`, if that pixel has depth.
    pub fn surface_point(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let z = self.depth.get(x, y) as f64;
        if z > 0.0 {
            backproject(&Vector2::new(x as f64, y as f64), z, &self.camera).ok()
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Perspective projection; `None` when behind the camera or outside the
/// image domain.
pub fn project(p_world: &Vector3<f64>, camera: &Camera) -> Option<Projection> {
    let pc = camera.pose.to_camera(p_world);
    if pc.z <= 0.0 {
        return None;
    }
    let k = &camera.intrinsics;
    let pixel = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
    k.contains(&pixel).then_some(Projection {
        pixel,
        depth: pc.z,
    })
}

pub fn backproject(pixel: &Vector2<f64>, depth: f64, camera: &Camera) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    let k = &camera.intrinsics;
    let pc = Vector3::new(
        (pixel.x - k.cx) / k.fx * depth,
        (pixel.y - k.cy) / k.fy * depth,
        depth,
    );
    Ok(camera.pose.to_world(&pc))
}

/// Nearest integer pixel of a continuous position, if it lies in the image.
#[inline]
pub fn nearest_pixel(pixel: &Vector2<f64>, width: usize, height: usize) -> Option<(usize, usize)> {
    let x = pixel.x.round();
    let y = pixel.y.round();
    (x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64)
        .then_some((x as usize, y as usize))
}

/// Uniform voxel grid placement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vector3<f64>,
    pub extent: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub const DEFAULT_EXTENT: f64 = 0.005;

    pub fn new(origin: Vector3<f64>, extent: f64, dims: [usize; 3]) -> Result<Self> {
        if !(extent > 0.0) || dims.contains(&0) {
            return Err(Error::Precondition(format!(
                "grid extent {extent} / dims {dims:?} invalid"
            )));
        }
        Ok(Self {
            origin,
            extent,
            dims,
        })
    }

    /// Grid covering the axis-aligned box `[lo, hi]` grown by `margin`
    /// (a fraction of the box size on each side).
    pub fn covering(lo: Vector3<f64>, hi: Vector3<f64>, extent: f64, margin: f64) -> Result<Self> {
        let size = hi - lo;
        let pad = size * margin;
        let origin = lo - pad;
        let span = size + 2.0 * pad;
        let dims = [0, 1, 2].map(|a| ((span[a] / extent).ceil() as usize).max(1));
        Self::new(origin, extent, dims)
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    #[inline]
    pub fn unlinear(&self, lin: usize) -> [usize; 3] {
        let k = lin % self.dims[2];
        let j = (lin / self.dims[2]) % self.dims[1];
        let i = lin / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }
}

/// Half-open cell lookup: `origin + i·e ≤ p < origin + (i+1)·e` per axis.
#[inline]
pub fn voxel_index(p_world: &Vector3<f64>, grid: &GridSpec) -> Option<[usize; 3]> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let f = ((p_world[a] - grid.origin[a]) / grid.extent).floor();
        if !(f >= 0.0 && f < grid.dims[a] as f64) {
            return None;
        }
        idx[a] = f as usize;
    }
    Some(idx)
}

pub fn warp_homography(pixel: &Vector2<f64>, h: &Matrix3<f64>) -> Result<Vector2<f64>> {
    let q = h * Vector3::new(pixel.x, pixel.y, 1.0);
    if !(q.z.abs() >= MIN_WARP_W) {
        return Err(Error::DegenerateWarp(q.z.abs()));
    }
    Ok(Vector2::new(q.x / q.z, q.y / q.z))
}

/// C-style `%.*g` formatting.
pub fn format_g(x: f64, precision: usize) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let p = precision.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if exp < -4 || exp >= p as i32 {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One line of the pose file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRecord {
    pub view_id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Pose,
}

impl PoseRecord {
    pub fn from_camera(view_id: usize, camera: &Camera) -> Self {
        let k = &camera.intrinsics;
        Self {
            view_id,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            pose: camera.pose,
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {}",
            self.view_id,
            format_g(self.fx, 9),
            format_g(self.fy, 9),
            format_g(self.cx, 9),
            format_g(self.cy, 9)
        );
        for r in 0..3 {
            for c in 0..3 {
                write!(s, " {}", format_g(self.pose.rotation[(r, c)], 9)).unwrap();
            }
        }
        for a in 0..3 {
            write!(s, " {}", format_g(self.pose.translation[a], 9)).unwrap();
        }
        s
    }

    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 17 {
            return Err(format!("expected 17 fields, found {}", fields.len()));
        }
        let view_id = fields[0]
            .parse::<usize>()
            .map_err(|_| format!("bad view id `{}`", fields[0]))?;
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| format!("bad number `{f}`")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let rotation = Matrix3::from_row_slice(&nums[4..13]);
        let translation = Vector3::new(nums[13], nums[14], nums[15]);
        let pose = Pose::checked(rotation, translation, LOADED_ORTHONORMAL_TOL)
            .map_err(|e| e.to_string())?;
        Ok(Self {
            view_id,
            fx: nums[0],
            fy: nums[1],
            cx: nums[2],
            cy: nums[3],
            pose,
        })
    }
}

pub fn write_pose_file(path: &Path, records: &[PoseRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pose_file(path: &Path) -> Result<Vec<PoseRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            PoseRecord::parse_line(l).map_err(|r| Error::malformed(path, format!("line {}: {r}", i + 1)))
        })
        .collect()
}
