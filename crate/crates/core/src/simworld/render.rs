//! Per-pixel ray casting of flat ground and upright actor boxes.

use crate::geometry::{CameraIntrinsics, CameraRig, RigidTransform};

use super::actors::{ActorKind, ActorState};
use super::map::{MapSpec, Surface};

pub const SKY: [f32; 3] = [0.55, 0.72, 0.92];
const OFFROAD: [f32; 3] = [0.28, 0.45, 0.22];
const SIDEWALK: [f32; 3] = [0.62, 0.6, 0.56];
const ROAD: [f32; 3] = [0.3, 0.3, 0.32];
const MARKING: [f32; 3] = [0.95, 0.95, 0.88];
const PEDESTRIAN: [f32; 3] = [1.0, 0.55, 0.1];
const VEHICLES: [[f32; 3]; 5] = [[0.85, 0.1, 0.1], [0.1, 0.3, 0.9], [0.9, 0.8, 0.1], [0.1, 0.8, 0.8], [0.8, 0.2, 0.8]];
const ACTOR_RANGE: f64 = 80.0;

pub fn surface_color(s: Surface) -> [f32; 3] {
    match s {
        Surface::Offroad => OFFROAD,
        Surface::Sidewalk => SIDEWALK,
        Surface::Road => ROAD,
        Surface::Marking => MARKING,
    }
}

fn actor_color(index: usize, kind: ActorKind) -> [f32; 3] {
    match kind {
        ActorKind::Pedestrian => PEDESTRIAN,
        _ => VEHICLES[index % VEHICLES.len()],
    }
}

/// Precomputed ego-frame rays of one camera.
#[derive(Debug, Clone)]
struct CameraRays {
    origin: [f64; 3],
    dirs: Vec<[f64; 3]>,
    yaw: f64,
    half_fov: f64,
    width: usize,
    height: usize,
}

impl CameraRays {
    fn new(intr: &CameraIntrinsics<f64>, extr: &RigidTransform<f64>) -> Self {
        let mut dirs = Vec::with_capacity(intr.width * intr.height);
        for v in 0..intr.height {
            for u in 0..intr.width {
                dirs.push(extr.rotate(intr.ray((u as f64 + 0.5, v as f64 + 0.5))));
            }
        }
        let fwd = extr.rotate([0.0, 0.0, 1.0]);
        // widest angle any pixel ray makes with the optical axis, measured in the ground plane
        let half_fov = dirs
            .iter()
            .map(|d| (d[1].atan2(d[0]) - fwd[1].atan2(fwd[0])).sin().abs().asin())
            .fold(0.0, f64::max)
            .max(intr.fov_deg.to_radians() / 2.0);
        Self { origin: extr.translation, dirs, yaw: fwd[1].atan2(fwd[0]), half_fov, width: intr.width, height: intr.height }
    }

    fn render(&self, map: &MapSpec, ego: &ActorState, actors: &[ActorState], out: &mut [f32]) {
        let plane = self.width * self.height;
        assert_eq!(out.len(), 3 * plane, "contract violation: image buffer size");
        let (s, c) = ego.heading.sin_cos();
        let o = [
            ego.position[0] + c * self.origin[0] - s * self.origin[1],
            ego.position[1] + s * self.origin[0] + c * self.origin[1],
            self.origin[2],
        ];
        let cam_yaw = ego.heading + self.yaw;
        let visible: Vec<(usize, &ActorState)> = actors
            .iter()
            .enumerate()
            .filter(|(_, a)| {
                let cc = a.center();
                let (dx, dy) = (cc[0] - o[0], cc[1] - o[1]);
                let d = dx.hypot(dy);
                if d > ACTOR_RANGE {
                    return false;
                }
                if d <= a.radius() + 0.5 {
                    return true;
                }
                let off = super::map::wrap_angle(dy.atan2(dx) - cam_yaw).abs();
                off <= self.half_fov + (a.radius() / d).min(1.0).asin() + 1e-3
            })
            .collect();
        for (k, d_ego) in self.dirs.iter().enumerate() {
            let d = [c * d_ego[0] - s * d_ego[1], s * d_ego[0] + c * d_ego[1], d_ego[2]];
            let mut best_t = if d[2] < 0.0 { -o[2] / d[2] } else { f64::INFINITY };
            let mut color = if d[2] < 0.0 {
                surface_color(map.surface.at([o[0] + best_t * d[0], o[1] + best_t * d[1]]))
            } else {
                SKY
            };
            for &(i, a) in &visible {
                if let Some((t, face)) = ray_box(o, d, a) {
                    if t < best_t {
                        best_t = t;
                        let shade = [0.75f32, 0.6, 1.0][face];
                        let base = actor_color(i, a.kind);
                        color = [base[0] * shade, base[1] * shade, base[2] * shade];
                    }
                }
            }
            for ch in 0..3 {
                out[ch * plane + k] = color[ch];
            }
        }
    }
}

/// Entry distance and entry face axis (0 = ends, 1 = sides, 2 = top) of a ray into an actor box.
fn ray_box(o: [f64; 3], d: [f64; 3], a: &ActorState) -> Option<(f64, usize)> {
    let c = a.center();
    let (s, co) = a.heading.sin_cos();
    let (ox, oy) = (o[0] - c[0], o[1] - c[1]);
    let lo = [co * ox + s * oy, -s * ox + co * oy, o[2]];
    let ld = [co * d[0] + s * d[1], -s * d[0] + co * d[1], d[2]];
    let bounds = [(-a.half_extents[0], a.half_extents[0]), (-a.half_extents[1], a.half_extents[1]), (0.0, a.kind.height())];
    let (mut t_in, mut t_out, mut face) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for k in 0..3 {
        let (lo_k, hi_k) = bounds[k];
        if ld[k].abs() < 1e-12 {
            if lo[k] < lo_k || lo[k] > hi_k {
                return None;
            }
            continue;
        }
        let (mut t1, mut t2) = ((lo_k - lo[k]) / ld[k], (hi_k - lo[k]) / ld[k]);
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        if t1 > t_in {
            t_in = t1;
            face = k;
        }
        t_out = t_out.min(t2);
    }
    (t_in <= t_out && t_in > 0.0).then_some((t_in, face))
}

/// Renders every camera of a rig into one `(cams, 3, H, W)` buffer.
#[derive(Debug, Clone)]
pub struct Renderer {
    cams: Vec<CameraRays>,
}

impl Renderer {
    pub fn new(rig: &CameraRig<f64>) -> Self {
        Self { cams: rig.cameras.iter().map(|c| CameraRays::new(&c.intrinsics, &c.extrinsics)).collect() }
    }

    pub fn image_len(&self) -> usize {
        self.cams.iter().map(|c| 3 * c.width * c.height).sum()
    }

    pub fn render(&self, map: &MapSpec, ego: &ActorState, actors: &[ActorState]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.image_len()];
        let mut offset = 0;
        for cam in &self.cams {
            let n = 3 * cam.width * cam.height;
            cam.render(map, ego, actors, &mut out[offset..offset + n]);
            offset += n;
        }
        out
    }
}

/// Renders one camera with camera→ego extrinsics `extr`; returns a `(3, H, W)` buffer in [0, 1].
pub fn render_camera(
    map: &MapSpec,
    ego: &ActorState,
    actors: &[ActorState],
    intr: &CameraIntrinsics<f64>,
    extr: &RigidTransform<f64>,
) -> Vec<f32> {
    let cam = CameraRays::new(intr, extr);
    let mut out = vec![0.0; 3 * intr.width * intr.height];
    cam.render(map, ego, actors, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::super::map::MapKey;
    use super::*;

    fn mount(pitch_deg: f64) -> RigidTransform<f64> {
        RigidTransform::camera_mount(0.0, pitch_deg.to_radians(), [1.35, 0.0, 1.6])
    }

    fn is_sky(img: &[f32], plane: usize, k: usize) -> bool {
        (0..3).all(|c| img[c * plane + k] == SKY[c])
    }

    #[test]
    fn horizon_row_matches_closed_form() {
        let map = MapSpec::generate(MapKey::OPEN_FIELD);
        let ego = ActorState::ego([0.0, 0.0], 0.3);
        for pitch in [0.0, 5.0, -4.0, 12.0] {
            let intr = CameraIntrinsics::from_fov(40, 30, 60.0).unwrap();
            let img = render_camera(&map, &ego, &[], &intr, &mount(pitch));
            let horizon = intr.cy - intr.fy * pitch.to_radians().tan();
            let plane = 40 * 30;
            for v in 0..30 {
                let sky_expected = v as f64 + 0.5 < horizon;
                for u in 0..40 {
                    assert_eq!(is_sky(&img, plane, v * 40 + u), sky_expected, "pitch {pitch} row {v}");
                }
            }
        }
    }

    fn apparent_width(distance: f64) -> usize {
        let map = MapSpec::generate(MapKey::OPEN_FIELD);
        let ego = ActorState::ego([0.0, 0.0], 0.0);
        let actor = ActorState::vehicle([1.35 + distance + 0.9, 0.0], std::f64::consts::FRAC_PI_2, 0.0);
        let intr = CameraIntrinsics::from_fov(400, 100, 90.0).unwrap();
        let img = render_camera(&map, &ego, &[actor], &intr, &mount(0.0));
        let plane = 400 * 100;
        // the row through the optical axis sits at the camera height; the box is 1.5 m tall so use a lower row
        let row = 55;
        (0..400).filter(|u| img[row * 400 + u] != OFFROAD[0] && img[plane + row * 400 + u] != OFFROAD[1]).count()
    }

    #[test]
    fn perspective_scaling() {
        let (near, far) = (apparent_width(5.0), apparent_width(20.0));
        let ratio = near as f64 / far as f64;
        assert!((ratio - 4.0).abs() / 4.0 < 0.1, "near {near} far {far}");
    }

    #[test]
    fn identical_worlds_identical_pixels() {
        let map = MapSpec::generate(MapKey::Town(1));
        let (p, h) = map.route.sample(0.0);
        let ego = ActorState::ego(p, h);
        let other = ActorState::vehicle(map.route.sample(15.0).0, h, 3.0);
        let intr = CameraIntrinsics::from_fov(48, 16, 60.0).unwrap();
        let a = render_camera(&map, &ego, &[other], &intr, &mount(0.0));
        let b = render_camera(&map, &ego, &[other], &intr, &mount(0.0));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
