//! Actor state, oriented-box collision and scripted traffic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::map::{dist, MapSpec, P2};

/// Ego wheelbase; the ego reference point is the rear axle.
pub const WHEELBASE: f64 = 2.7;
pub const EGO_HALF_EXTENTS: [f64; 2] = [2.25, 0.95];
pub const VEHICLE_HALF_EXTENTS: [f64; 2] = [2.2, 0.9];
pub const PEDESTRIAN_HALF_EXTENTS: [f64; 2] = [0.3, 0.3];
pub const VEHICLE_SPEED: (f64, f64) = (2.0, 6.0);
pub const PEDESTRIAN_SPEED: (f64, f64) = (0.5, 1.5);
const TURN_PROBABILITY: f64 = 1.0 / 3.0;
const SPAWN_CLEARANCE: f64 = 12.0;
const SAME_LANE_LEAD: f64 = 20.0;
/// Where vehicles that could not be respawned are parked.
const PARKING: P2 = [1.0e6, 1.0e6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    Ego,
    Vehicle,
    Pedestrian,
}

impl ActorKind {
    pub fn height(self) -> f64 {
        match self {
            ActorKind::Ego | ActorKind::Vehicle => 1.5,
            ActorKind::Pedestrian => 1.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorState {
    /// Rear axle for the ego, box center otherwise.
    pub position: P2,
    pub heading: f64,
    pub speed: f64,
    pub half_extents: [f64; 2],
    pub kind: ActorKind,
}

impl ActorState {
    pub fn ego(position: P2, heading: f64) -> Self {
        Self { position, heading, speed: 0.0, half_extents: EGO_HALF_EXTENTS, kind: ActorKind::Ego }
    }

    pub fn vehicle(position: P2, heading: f64, speed: f64) -> Self {
        Self { position, heading, speed, half_extents: VEHICLE_HALF_EXTENTS, kind: ActorKind::Vehicle }
    }

    pub fn pedestrian(position: P2, heading: f64, speed: f64) -> Self {
        Self { position, heading, speed, half_extents: PEDESTRIAN_HALF_EXTENTS, kind: ActorKind::Pedestrian }
    }

    pub fn center(&self) -> P2 {
        match self.kind {
            ActorKind::Ego => {
                let off = WHEELBASE / 2.0;
                [self.position[0] + off * self.heading.cos(), self.position[1] + off * self.heading.sin()]
            }
            _ => self.position,
        }
    }

    pub fn radius(&self) -> f64 {
        self.half_extents[0].hypot(self.half_extents[1])
    }

    /// Whether a world point lies inside the footprint.
    pub fn contains(&self, p: P2) -> bool {
        let c = self.center();
        let (s, co) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        let lx = co * dx + s * dy;
        let ly = -s * dx + co * dy;
        lx.abs() <= self.half_extents[0] && ly.abs() <= self.half_extents[1]
    }
}

/// Separating-axis test for two oriented rectangles.
pub fn boxes_overlap(a: &ActorState, b: &ActorState) -> bool {
    let (ca, cb) = (a.center(), b.center());
    if dist(ca, cb) > a.radius() + b.radius() {
        return false;
    }
    let axes = |h: f64| {
        let (s, c) = h.sin_cos();
        [[c, s], [-s, c]]
    };
    let (ax, bx) = (axes(a.heading), axes(b.heading));
    let d = [cb[0] - ca[0], cb[1] - ca[1]];
    let proj = |axes: &[[f64; 2]; 2], ext: [f64; 2], n: [f64; 2]| {
        ext[0] * (axes[0][0] * n[0] + axes[0][1] * n[1]).abs() + ext[1] * (axes[1][0] * n[0] + axes[1][1] * n[1]).abs()
    };
    for n in ax.iter().chain(bx.iter()) {
        let sep = (d[0] * n[0] + d[1] * n[1]).abs();
        if sep > proj(&ax, a.half_extents, *n) + proj(&bx, b.half_extents, *n) {
            return false;
        }
    }
    true
}

/// How one traffic participant moves.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    Lane { lane: usize, s: f64 },
    Walk { path: usize, s: f64, forward: bool },
    Static,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Traffic {
    pub controllers: Vec<Controller>,
}

fn lane_pose(map: &MapSpec, lane: usize, s: f64) -> (P2, f64) {
    map.lanes[lane].path.sample(s)
}

fn walk_pose(map: &MapSpec, path: usize, s: f64, forward: bool) -> (P2, f64) {
    let (p, h) = map.walk_paths[path].sample(s);
    (p, if forward { h } else { h + std::f64::consts::PI })
}

impl Traffic {
    pub fn empty() -> Self {
        Self { controllers: Vec::new() }
    }

    /// Seeds `vehicles` lane followers and `pedestrians` walkers away from the ego.
    pub fn spawn(
        map: &MapSpec,
        ego: &ActorState,
        vehicles: usize,
        pedestrians: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Self, Vec<ActorState>) {
        let mut controllers = Vec::new();
        let mut actors: Vec<ActorState> = Vec::new();
        let ego_s = map.route.project(ego.position).s;
        for _ in 0..vehicles {
            let speed = rng.gen_range(VEHICLE_SPEED.0..=VEHICLE_SPEED.1);
            let (ctrl, actor) = match spawn_vehicle(map, ego, ego_s, &actors, rng) {
                Some((lane, s)) => {
                    let (p, h) = lane_pose(map, lane, s);
                    (Controller::Lane { lane, s }, ActorState::vehicle(p, h, speed))
                }
                None => (Controller::Static, ActorState::vehicle(PARKING, 0.0, 0.0)),
            };
            controllers.push(ctrl);
            actors.push(actor);
        }
        for _ in 0..pedestrians {
            let speed = rng.gen_range(PEDESTRIAN_SPEED.0..=PEDESTRIAN_SPEED.1);
            let forward = rng.gen_bool(0.5);
            let mut placed = None;
            if !map.walk_paths.is_empty() {
                for _ in 0..100 {
                    let path = if !map.crosswalks.is_empty() && rng.gen_bool(0.5) {
                        map.crosswalks[rng.gen_range(0..map.crosswalks.len())]
                    } else {
                        rng.gen_range(0..map.walk_paths.len().min(2))
                    };
                    let s = rng.gen_range(0.0..map.walk_paths[path].length());
                    let (p, _) = walk_pose(map, path, s, forward);
                    if dist(p, ego.center()) > SPAWN_CLEARANCE {
                        placed = Some((path, s));
                        break;
                    }
                }
            }
            let (ctrl, actor) = match placed {
                Some((path, s)) => {
                    let (p, h) = walk_pose(map, path, s, forward);
                    (Controller::Walk { path, s, forward }, ActorState::pedestrian(p, h, speed))
                }
                None => (Controller::Static, ActorState::pedestrian(PARKING, 0.0, 0.0)),
            };
            controllers.push(ctrl);
            actors.push(actor);
        }
        (Self { controllers }, actors)
    }

    /// Adds a motionless actor (fixtures and tests).
    pub fn push_static(&mut self, actors: &mut Vec<ActorState>, actor: ActorState) {
        self.controllers.push(Controller::Static);
        actors.push(ActorState { speed: 0.0, ..actor });
    }

    pub fn advance(&mut self, map: &MapSpec, actors: &mut [ActorState], ego: &ActorState, dt: f64, rng: &mut ChaCha8Rng) {
        let ego_s = map.route.project_near(ego.position, 0.0, map.route.length()).s;
        for i in 0..self.controllers.len() {
            match self.controllers[i].clone() {
                Controller::Static => {}
                Controller::Walk { path, s, forward } => {
                    let len = map.walk_paths[path].length();
                    let step = actors[i].speed * dt;
                    let (mut s, mut forward) = (if forward { s + step } else { s - step }, forward);
                    if s >= len {
                        s = 2.0 * len - s;
                        forward = false;
                    } else if s <= 0.0 {
                        s = -s;
                        forward = true;
                    }
                    let (p, h) = walk_pose(map, path, s, forward);
                    actors[i].position = p;
                    actors[i].heading = h;
                    self.controllers[i] = Controller::Walk { path, s, forward };
                }
                Controller::Lane { lane, s } => {
                    let mut lane = lane;
                    let new_s = s + actors[i].speed * dt;
                    let mut s_next = new_s;
                    let crossed = map.lanes[lane].junction_s.iter().find(|(js, _)| s < *js && *js <= new_s).map(|&(_, j)| j);
                    if let Some(j) = crossed {
                        if rng.gen_bool(TURN_PROBABILITY) {
                            let options: Vec<usize> =
                                map.junctions[j].lanes.iter().copied().filter(|&l| l != lane && l != twin(lane)).collect();
                            if !options.is_empty() {
                                let pos = lane_pose(map, lane, new_s).0;
                                lane = options[rng.gen_range(0..options.len())];
                                s_next = map.lanes[lane].path.project(pos).s;
                            }
                        }
                    }
                    if s_next >= map.lanes[lane].path.length() {
                        let others: Vec<ActorState> =
                            actors.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, a)| *a).collect();
                        match spawn_vehicle(map, ego, ego_s, &others, rng) {
                            Some((l, s)) => {
                                lane = l;
                                s_next = s;
                            }
                            None => {
                                actors[i] = ActorState::vehicle(PARKING, 0.0, 0.0);
                                self.controllers[i] = Controller::Static;
                                continue;
                            }
                        }
                    }
                    let (p, h) = lane_pose(map, lane, s_next);
                    actors[i].position = p;
                    actors[i].heading = h;
                    self.controllers[i] = Controller::Lane { lane, s: s_next };
                }
            }
        }
    }
}

/// The opposite-direction lane on the same road.
fn twin(lane: usize) -> usize {
    lane ^ 1
}

fn spawn_vehicle(map: &MapSpec, ego: &ActorState, ego_s: f64, others: &[ActorState], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
    if map.lanes.is_empty() {
        return None;
    }
    for _ in 0..100 {
        let lane = rng.gen_range(0..map.lanes.len());
        let len = map.lanes[lane].path.length();
        if len < 12.0 {
            continue;
        }
        let s = rng.gen_range(5.0..len - 5.0);
        if lane == 0 && s < ego_s + SAME_LANE_LEAD {
            continue;
        }
        let (p, _) = lane_pose(map, lane, s);
        if dist(p, ego.center()) < SPAWN_CLEARANCE {
            continue;
        }
        if others.iter().any(|o| o.kind == ActorKind::Vehicle && dist(o.position, p) < 8.0) {
            continue;
        }
        return Some((lane, s));
    }
    None
}
