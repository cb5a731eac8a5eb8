//! Pinhole cameras, rigid transforms and frustum construction.
//!
//! Conventions: the camera frame is z forward, x right, y down. The ego frame
//! is x forward, y left, z up with its origin at the rear-axle center. Pixel
//! coordinates are continuous; pixel `(col, row)` covers `[col, col + 1)` so
//! its center is at `col + 0.5`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    pub fov_deg: T,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self, GeometryError> {
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(GeometryError::Config(format!("focal lengths must be positive (fx={fx}, fy={fy})")));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::Config("image size must be non-zero".into()));
        }
        let (w, h) = (T::lit(width as f64), T::lit(height as f64));
        if !(cx >= T::zero() && cx < w && cy >= T::zero() && cy < h) {
            return Err(GeometryError::Config(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        let fov_deg = (T::lit(2.0) * (w / (T::lit(2.0) * fx)).atan()).to_degrees();
        Ok(Self { fx, fy, cx, cy, width, height, fov_deg })
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, fov_deg: T) -> Result<Self, GeometryError> {
        if !(fov_deg > T::zero() && fov_deg < T::lit(180.0)) {
            return Err(GeometryError::Config(format!("fov {fov_deg} outside (0, 180)")));
        }
        let w = T::lit(width as f64);
        let fx = w / (T::lit(2.0) * (fov_deg.to_radians() / T::lit(2.0)).tan());
        let mut intr = Self::new(fx, fx, w / T::lit(2.0), T::lit(height as f64) / T::lit(2.0), width, height)?;
        intr.fov_deg = fov_deg;
        Ok(intr)
    }

    pub fn backproject(&self, pixel: (T, T), depth: T) -> Result<Vec3<T>, GeometryError> {
        if !(depth > T::zero()) {
            return Err(GeometryError::Domain(format!("depth must be positive, got {depth}")));
        }
        let (u, v) = pixel;
        let (w, h) = (T::lit(self.width as f64), T::lit(self.height as f64));
        if !(u >= T::zero() && u <= w && v >= T::zero() && v <= h) {
            return Err(GeometryError::Domain(format!("pixel ({u}, {v}) outside image")));
        }
        Ok([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth])
    }

    /// Perspective projection; `None` behind the image plane.
    pub fn project(&self, p: Vec3<T>) -> Option<(T, T)> {
        if !(p[2] > T::zero()) {
            return None;
        }
        Some((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    /// Unnormalized viewing ray through a pixel, with unit z.
    pub fn ray(&self, pixel: (T, T)) -> Vec3<T> {
        [(pixel.0 - self.cx) / self.fx, (pixel.1 - self.cy) / self.fy, T::one()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Scalar> RigidTransform<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { rotation: [[o, z, z], [z, o, z], [z, z, o]], translation: [z; 3] }
    }

    pub fn translation(t: Vec3<T>) -> Self {
        Self { translation: t, ..Self::identity() }
    }

    /// Rotation about the z axis.
    pub fn yaw(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self { rotation: [[c, -s, z], [s, c, z], [z, z, o]], translation: [z; 3] }
    }

    /// Rotation about the y axis; positive tilts +x toward -z.
    pub fn pitch(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self { rotation: [[c, z, s], [z, o, z], [-s, z, c]], translation: [z; 3] }
    }

    /// Camera-to-ego extrinsics for a camera mounted at `position` (ego frame),
    /// looking along ego yaw `yaw`, pitched down by `pitch_down`.
    pub fn camera_mount(yaw: T, pitch_down: T, position: Vec3<T>) -> Self {
        let (o, z) = (T::one(), T::zero());
        // camera axes expressed in ego coordinates: x_c -> -y_e, y_c -> -z_e, z_c -> x_e
        let axes = Self { rotation: [[z, z, o], [-o, z, z], [z, -o, z]], translation: [z; 3] };
        let mut t = Self::yaw(yaw).compose(&Self::pitch(pitch_down)).compose(&axes);
        t.translation = position;
        t
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let r = mat_mul(&self.rotation, &other.rotation);
        let t = self.transform_point(other.translation);
        Self { rotation: r, translation: t }
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        Self { rotation: rt, translation: [-t[0], -t[1], -t[2]] }
    }

    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn rotate(&self, v: Vec3<T>) -> Vec3<T> {
        mat_vec(&self.rotation, v)
    }

    /// Checks orthonormality and a positive determinant within `tol`.
    pub fn is_proper(&self, tol: T) -> bool {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let orthonormal = (0..3).all(|i| {
            (0..3).all(|j| {
                let target = if i == j { T::one() } else { T::zero() };
                (rtr[i][j] - target).abs() <= tol
            })
        });
        orthonormal && (det(&self.rotation) - T::one()).abs() <= tol
    }
}

fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec<T: Scalar>(a: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = *a;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

fn det<T: Scalar>(a: &Mat3<T>) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigKind {
    /// Three 60° cameras covering the front half.
    Front3x60,
    /// Three 120° cameras covering all around.
    Surround3x120,
    /// Six 60° cameras covering all around.
    Surround6x60,
}

impl RigKind {
    pub fn camera_count(self) -> usize {
        match self {
            RigKind::Front3x60 | RigKind::Surround3x120 => 3,
            RigKind::Surround6x60 => 6,
        }
    }

    pub fn fov_deg(self) -> f64 {
        match self {
            RigKind::Front3x60 | RigKind::Surround6x60 => 60.0,
            RigKind::Surround3x120 => 120.0,
        }
    }

    /// Camera yaw angles in degrees, in rig order.
    pub fn yaws_deg(self) -> Vec<f64> {
        match self {
            RigKind::Front3x60 => vec![60.0, 0.0, -60.0],
            RigKind::Surround3x120 => vec![0.0, 120.0, 240.0],
            RigKind::Surround6x60 => (0..6).map(|i| 60.0 * i as f64).collect(),
        }
    }

    pub fn is_surround(self) -> bool {
        !matches!(self, RigKind::Front3x60)
    }
}

/// Where cameras sit on the ego body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mount {
    pub forward: f64,
    pub height: f64,
    pub pitch_down_deg: f64,
}

impl Default for Mount {
    fn default() -> Self {
        Self { forward: 1.35, height: 1.6, pitch_down_deg: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigCamera<T> {
    pub intrinsics: CameraIntrinsics<T>,
    /// camera → ego
    pub extrinsics: RigidTransform<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig<T> {
    pub cameras: Vec<RigCamera<T>>,
    pub kind: RigKind,
}

impl<T: Scalar> CameraRig<T> {
    pub fn standard(kind: RigKind, width: usize, height: usize, mount: Mount) -> Result<Self, GeometryError> {
        let intr = CameraIntrinsics::from_fov(width, height, T::lit(kind.fov_deg()))?;
        let cameras = kind
            .yaws_deg()
            .into_iter()
            .map(|yaw| RigCamera {
                intrinsics: intr.clone(),
                extrinsics: RigidTransform::camera_mount(
                    T::lit(yaw.to_radians()),
                    T::lit(mount.pitch_down_deg.to_radians()),
                    [T::lit(mount.forward), T::zero(), T::lit(mount.height)],
                ),
            })
            .collect();
        Self::new(cameras, kind)
    }

    pub fn new(cameras: Vec<RigCamera<T>>, kind: RigKind) -> Result<Self, GeometryError> {
        if cameras.is_empty() {
            return Err(GeometryError::Config("camera rig is empty".into()));
        }
        if kind.is_surround() {
            let total: T = cameras.iter().map(|c| c.intrinsics.fov_deg).sum();
            if total < T::lit(360.0 - 1e-6) {
                return Err(GeometryError::Config(format!("surround rig covers only {total} degrees")));
            }
        }
        Ok(Self { cameras, kind })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Same cameras in a different order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self { cameras: order.iter().map(|&i| self.cameras[i].clone()).collect(), kind: self.kind }
    }
}

/// Ordered, strictly increasing, positive depth bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins<T> {
    values: Vec<T>,
}

impl<T: Scalar> DepthBins<T> {
    pub fn new(values: Vec<T>) -> Result<Self, GeometryError> {
        if values.is_empty() {
            return Err(GeometryError::Config("no depth bins".into()));
        }
        if values.iter().any(|d| !(*d > T::zero())) {
            return Err(GeometryError::Config("depth bins must be positive".into()));
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(GeometryError::Config("depth bins must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// `count` bin centers uniformly covering `[min, max]`.
    pub fn uniform(min: T, max: T, count: usize) -> Result<Self, GeometryError> {
        if count == 0 || !(max > min) {
            return Err(GeometryError::Config(format!("bad depth range [{min}, {max}] x {count}")));
        }
        let width = (max - min) / T::lit(count as f64);
        Self::new((0..count).map(|i| min + width * (T::lit(i as f64) + T::lit(0.5))).collect())
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Back-projected feature-cell rays sampled at every depth bin.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumGrid<T> {
    pub depth_bins: Vec<T>,
    pub feature_h: usize,
    pub feature_w: usize,
    /// Row-major `(n, feature_h, feature_w)` camera-frame points.
    pub points_cam: Vec<Vec3<T>>,
}

impl<T: Scalar> FrustumGrid<T> {
    pub fn point_count(&self) -> usize {
        self.points_cam.len()
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.feature_h + h) * self.feature_w + w
    }
}

pub fn build_frustum<T: Scalar>(
    intr: &CameraIntrinsics<T>,
    depth_bins: &DepthBins<T>,
    downsample: usize,
) -> Result<FrustumGrid<T>, GeometryError> {
    if downsample == 0 || intr.width % downsample != 0 || intr.height % downsample != 0 {
        return Err(GeometryError::Config(format!(
            "downsample {downsample} does not divide {}x{}",
            intr.height, intr.width
        )));
    }
    let (fh, fw) = (intr.height / downsample, intr.width / downsample);
    let ds = T::lit(downsample as f64);
    let mut points = Vec::with_capacity(depth_bins.len() * fh * fw);
    for &d in depth_bins.values() {
        for h in 0..fh {
            for w in 0..fw {
                let pixel = ((T::lit(w as f64) + T::lit(0.5)) * ds, (T::lit(h as f64) + T::lit(0.5)) * ds);
                points.push(intr.backproject(pixel, d)?);
            }
        }
    }
    Ok(FrustumGrid { depth_bins: depth_bins.values().to_vec(), feature_h: fh, feature_w: fw, points_cam: points })
}

pub fn frustum_to_ego<T: Scalar>(frustum: &FrustumGrid<T>, extr: &RigidTransform<T>) -> Vec<Vec3<T>> {
    frustum.points_cam.iter().map(|&p| extr.transform_point(p)).collect()
}

/// Ego-centered planar grid. Rows index the forward (x) axis, columns the
/// lateral (y) axis; cell `(0, 0)` is rear-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_extent: f64,
    pub y_extent: f64,
    pub cell: f64,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self { x_extent: 40.0, y_extent: 40.0, cell: 0.5 }
    }
}

impl BevGridSpec {
    pub fn new(x_extent: f64, y_extent: f64, cell: f64) -> Result<Self, GeometryError> {
        let spec = Self { x_extent, y_extent, cell };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.cell > 0.0 && self.x_extent > 0.0 && self.y_extent > 0.0) {
            return Err(GeometryError::Config(format!("grid sizes must be positive: {self:?}")));
        }
        for e in [self.x_extent, self.y_extent] {
            let n = e / self.cell;
            if (n - n.round()).abs() > 1e-9 {
                return Err(GeometryError::Config(format!("extent {e} is not a multiple of cell {}", self.cell)));
            }
        }
        Ok(())
    }

    /// Rows (forward axis).
    pub fn nx(&self) -> usize {
        (self.x_extent / self.cell).round() as usize
    }

    /// Columns (lateral axis).
    pub fn ny(&self) -> usize {
        (self.y_extent / self.cell).round() as usize
    }

    pub fn cells(&self) -> usize {
        self.nx() * self.ny()
    }

    /// Containing cell of an ego-frame point; exact boundaries go to the higher index.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let i = ((x + self.x_extent / 2.0) / self.cell).floor();
        let j = ((y + self.y_extent / 2.0) / self.cell).floor();
        (i >= 0.0 && j >= 0.0 && (i as usize) < self.nx() && (j as usize) < self.ny()).then(|| (i as usize, j as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.cell - self.x_extent / 2.0, (j as f64 + 0.5) * self.cell - self.y_extent / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bev_grid_cells() {
        let g = BevGridSpec::default();
        assert_eq!((g.nx(), g.ny()), (80, 80));
        assert_eq!(g.cell_of(0.0, 0.0), Some((40, 40)));
        assert_eq!(g.cell_of(5.0, 0.0), Some((50, 40)));
        assert_eq!(g.cell_of(100.0, 100.0), None);
        assert_eq!(g.cell_of(-20.0, -20.0), Some((0, 0)));
        assert_eq!(g.cell_of(20.0, 0.0), None);
        assert!(BevGridSpec::new(40.0, 40.0, 0.3).is_err());
    }

    fn intr() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(100.0, 100.0, 176.0, 64.0, 352, 128).unwrap()
    }

    fn close(a: Vec3<f64>, b: Vec3<f64>) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn backproject_examples() {
        let i = intr();
        assert_eq!(i.backproject((176.0, 64.0), 5.0).unwrap(), [0.0, 0.0, 5.0]);
        assert_eq!(i.backproject((276.0, 64.0), 5.0).unwrap(), [5.0, 0.0, 5.0]);
        // row 164 lies below a 128-row image
        assert!(matches!(i.backproject((176.0, 164.0), 2.0), Err(GeometryError::Domain(_))));
        let i = CameraIntrinsics::new(100.0, 100.0, 176.0, 64.0, 352, 256).unwrap();
        assert_eq!(i.backproject((176.0, 164.0), 2.0).unwrap(), [0.0, 2.0, 2.0]);
    }

    #[test]
    fn backproject_rejects_bad_depth() {
        assert!(matches!(intr().backproject((1.0, 1.0), 0.0), Err(GeometryError::Domain(_))));
        assert!(matches!(intr().backproject((1.0, 1.0), -3.0), Err(GeometryError::Domain(_))));
    }

    #[test]
    fn fov_consistent_with_focal_length() {
        let i = CameraIntrinsics::<f64>::from_fov(176, 64, 60.0).unwrap();
        let derived = 2.0 * (176.0 / (2.0 * i.fx)).atan();
        assert!((derived - 60f64.to_radians()).abs() < 1e-6);
        let j = CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, 176, 64).unwrap();
        assert!((j.fov_deg - 60.0).abs() < 1e-9);
    }

    #[test]
    fn transform_examples() {
        let p = [1.0, 2.0, 3.0];
        assert_eq!(RigidTransform::identity().transform_point(p), p);
        assert_eq!(RigidTransform::translation([0.0, 0.0, 1.0]).transform_point(p), [1.0, 2.0, 4.0]);
        let r = RigidTransform::<f64>::yaw(std::f64::consts::FRAC_PI_2).transform_point([1.0, 0.0, 0.0]);
        assert!(close(r, [0.0, 1.0, 0.0]));
    }

    #[test]
    fn frustum_shapes() {
        let bins = DepthBins::uniform(1.0, 33.0, 16).unwrap();
        let f = build_frustum(&intr(), &bins, 8).unwrap();
        assert_eq!((f.feature_h, f.feature_w), (16, 44));
        assert_eq!(f.point_count(), 16 * 16 * 44);
        assert!(matches!(build_frustum(&intr(), &bins, 7), Err(GeometryError::Config(_))));
    }

    #[test]
    fn single_cell_frustum_on_axis() {
        let i = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        let bins = DepthBins::new(vec![4.0, 8.0]).unwrap();
        let f = build_frustum(&i, &bins, 8).unwrap();
        assert_eq!(f.points_cam, vec![[0.0, 0.0, 4.0], [0.0, 0.0, 8.0]]);
    }

    #[test]
    fn frustum_to_ego_examples() {
        let bins = DepthBins::new(vec![5.0]).unwrap();
        let i = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        let f = build_frustum(&i, &bins, 8).unwrap();
        assert_eq!(frustum_to_ego(&f, &RigidTransform::identity()), f.points_cam);
        let shifted = frustum_to_ego(&f, &RigidTransform::translation([1.0, 0.0, 0.0]));
        assert_eq!(shifted, vec![[1.0, 0.0, 5.0]]);
        let rear = RigidTransform::camera_mount(std::f64::consts::PI, 0.0, [0.0; 3]);
        assert!(close(frustum_to_ego(&f, &rear)[0], [-5.0, 0.0, 0.0]));
        let front = RigidTransform::camera_mount(0.0, 0.0, [0.0; 3]);
        assert!(close(frustum_to_ego(&f, &front)[0], [5.0, 0.0, 0.0]));
    }

    #[test]
    fn rig_kinds_validate() {
        for kind in [RigKind::Front3x60, RigKind::Surround3x120, RigKind::Surround6x60] {
            let rig = CameraRig::<f64>::standard(kind, 176, 64, Mount::default()).unwrap();
            assert_eq!(rig.len(), kind.camera_count());
            assert!(rig.cameras.iter().all(|c| c.extrinsics.is_proper(1e-9)));
        }
        let front = CameraRig::<f64>::standard(RigKind::Front3x60, 176, 64, Mount::default()).unwrap();
        assert!(CameraRig::new(front.cameras.clone(), RigKind::Surround6x60).is_err());
        assert!(CameraRig::<f64>::new(vec![], RigKind::Front3x60).is_err());
    }

    #[test]
    fn depth_bins_validate() {
        assert!(DepthBins::new(vec![1.0, 1.0]).is_err());
        assert!(DepthBins::new(vec![0.0, 1.0]).is_err());
        let b = DepthBins::<f64>::uniform(1.0, 33.0, 16).unwrap();
        assert_eq!(b.values()[0], 2.0);
        assert_eq!(b.values()[15], 32.0);
    }

    fn any_transform() -> impl Strategy<Value = RigidTransform<f64>> {
        (-3.2f64..3.2, -1.5f64..1.5, -3.2f64..3.2, prop::array::uniform3(-10.0f64..10.0)).prop_map(
            |(a, b, c, t)| {
                let mut r = RigidTransform::yaw(a).compose(&RigidTransform::pitch(b)).compose(&RigidTransform::yaw(c));
                r.translation = t;
                r
            },
        )
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(u in 0.0f64..352.0, v in 0.0f64..128.0, d in 0.1f64..100.0) {
            let i = intr();
            let (pu, pv) = i.project(i.backproject((u, v), d).unwrap()).unwrap();
            prop_assert!((pu - u).abs() <= 1e-9 * u.abs().max(1.0));
            prop_assert!((pv - v).abs() <= 1e-9 * v.abs().max(1.0));
        }

        #[test]
        fn rigid_transform_is_isometry(
            t in any_transform(),
            a in prop::array::uniform3(-20.0f64..20.0),
            b in prop::array::uniform3(-20.0f64..20.0),
        ) {
            prop_assert!(t.is_proper(1e-9));
            let dist = |p: Vec3<f64>, q: Vec3<f64>| ((p[0]-q[0]).powi(2) + (p[1]-q[1]).powi(2) + (p[2]-q[2]).powi(2)).sqrt();
            let before = dist(a, b);
            let after = dist(t.transform_point(a), t.transform_point(b));
            prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
        }

        #[test]
        fn frustum_to_ego_commutes_with_bin_permutation(t in any_transform(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let i = CameraIntrinsics::<f64>::from_fov(16, 8, 60.0).unwrap();
            let bins = vec![2.0, 5.0, 9.0, 14.0];
            let f = build_frustum(&i, &DepthBins::new(bins.clone()).unwrap(), 4).unwrap();
            let ego = frustum_to_ego(&f, &t);
            let mut perm: Vec<usize> = (0..bins.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            // Build a frustum over the permuted bins directly (bypassing the ordering check).
            let cells = f.feature_h * f.feature_w;
            let permuted = FrustumGrid {
                depth_bins: perm.iter().map(|&k| bins[k]).collect(),
                feature_h: f.feature_h,
                feature_w: f.feature_w,
                points_cam: perm.iter().flat_map(|&k| f.points_cam[k * cells..(k + 1) * cells].to_vec()).collect(),
            };
            let ego_perm = frustum_to_ego(&permuted, &t);
            for (slot, &k) in perm.iter().enumerate() {
                prop_assert_eq!(&ego_perm[slot * cells..(slot + 1) * cells], &ego[k * cells..(k + 1) * cells]);
            }
        }
    }
}
