//! Road / vehicle / navigation feature vectors and ground-truth BEV masks.

use crate::geometry::BevGridSpec;

use super::actors::ActorState;
use super::map::{MapSpec, P2};
use super::WorldState;

pub const ROAD_DIM: usize = 9;
pub const VEHICLE_DIM: usize = 4;
pub const NAV_DIM: usize = 5;
/// Route lookahead distances for the curvature samples, m.
pub const CURVATURE_LOOKAHEAD: [f64; 3] = [5.0, 10.0, 20.0];
/// A junction closer than this along the route raises the flag.
pub const JUNCTION_HORIZON: f64 = 25.0;

pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const VEHICLE: u8 = 2;
pub const CLASS_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Features {
    pub road: [f32; ROAD_DIM],
    pub vehicle: [f32; VEHICLE_DIM],
    pub nav: [f32; NAV_DIM],
}

/// World point expressed in the ego frame (x forward, y left).
pub fn to_ego_frame(ego: &ActorState, p: P2) -> P2 {
    let (s, c) = ego.heading.sin_cos();
    let (dx, dy) = (p[0] - ego.position[0], p[1] - ego.position[1]);
    [c * dx + s * dy, -s * dx + c * dy]
}

pub fn to_world_frame(ego: &ActorState, p: P2) -> P2 {
    let (s, c) = ego.heading.sin_cos();
    [ego.position[0] + c * p[0] - s * p[1], ego.position[1] + s * p[0] + c * p[1]]
}

pub fn assemble_features(map: &MapSpec, state: &WorldState) -> Features {
    let ego = &state.ego;
    let proj = map.route.project_near(ego.position, state.route_s - 20.0, state.route_s + 30.0);
    let lw = map.lane_width;
    let heading_err = super::map::wrap_angle(ego.heading - proj.heading);
    let curv = CURVATURE_LOOKAHEAD.map(|d| map.route.curvature_at(proj.s + d));
    let junction = map.junction_ahead(proj.s).is_some_and(|d| d <= JUNCTION_HORIZON);
    let road = [
        proj.lateral,
        heading_err,
        curv[0],
        curv[1],
        curv[2],
        lw,
        lw / 2.0 - proj.lateral,
        lw / 2.0 + proj.lateral,
        if junction { 1.0 } else { 0.0 },
    ]
    .map(|v| v as f32);
    let vehicle = [ego.speed, state.yaw_rate, state.prev_action.accel, state.prev_action.steer].map(|v| v as f32);
    let n = map.waypoints.len();
    let w1 = to_ego_frame(ego, map.waypoints[state.next_waypoint_index]);
    let w2 = to_ego_frame(ego, map.waypoints[(state.next_waypoint_index + 1).min(n - 1)]);
    let remaining = (n - state.next_waypoint_index) as f64 / n as f64;
    let nav = [w1[0], w1[1], w2[0], w2[1], remaining].map(|v| v as f32);
    Features { road, vehicle, nav }
}

/// Class per grid cell, rows along the ego x axis. Pedestrians count as vehicles.
pub fn ground_truth_bev_mask(map: &MapSpec, state: &WorldState, grid: &BevGridSpec) -> Vec<u8> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let reach = (grid.x_extent.hypot(grid.y_extent)) / 2.0 + 1.0;
    let near: Vec<&ActorState> = state
        .traffic
        .iter()
        .filter(|a| super::map::dist(a.center(), state.ego.position) < reach + a.radius())
        .collect();
    let mut mask = vec![BACKGROUND; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            let (x, y) = grid.cell_center(i, j);
            let p = to_world_frame(&state.ego, [x, y]);
            mask[i * ny + j] = if state.ego.contains(p) {
                BACKGROUND
            } else if near.iter().any(|a| a.contains(p)) {
                VEHICLE
            } else if map.surface.at(p).is_drivable() {
                ROAD
            } else {
                BACKGROUND
            };
        }
    }
    mask
}
