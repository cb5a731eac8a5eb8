//! Desk-scale driving world: procedural maps, a kinematic-bicycle ego,
//! scripted traffic, pinhole rendering, feature vectors and the reward.

mod actors;
mod features;
mod map;
mod render;
mod reward;

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::geometry::{BevGridSpec, CameraRig, GeometryError, Mount, RigKind};

pub use actors::{
    boxes_overlap, ActorKind, ActorState, Controller, Traffic, EGO_HALF_EXTENTS, PEDESTRIAN_HALF_EXTENTS,
    VEHICLE_HALF_EXTENTS, WHEELBASE,
};
pub use features::{
    assemble_features, ground_truth_bev_mask, to_ego_frame, to_world_frame, Features, BACKGROUND, CLASS_COUNT,
    NAV_DIM, ROAD, ROAD_DIM, VEHICLE, VEHICLE_DIM,
};
pub use map::{dist, wrap_angle, Lane, MapKey, MapSpec, NamedMap, Polyline, Surface, GENERATOR_VERSION, P2};
pub use render::{render_camera, Renderer};
pub use reward::{direction_similarity, reward_branch, reward_fn, RewardBranch, RewardInputs, RewardParams};

/// Episode cap; an episode that reaches it without a collision succeeds.
pub const EPISODE_STEPS: usize = 128;
pub const MAX_ACCEL: f64 = 3.0;
pub const MAX_BRAKE: f64 = 6.0;
pub const MAX_STEER_DEG: f64 = 35.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: step called after the episode ended")]
    StepAfterDone,
    #[error("contract violation: non-finite action ({0}, {1})")]
    InvalidAction(f64, f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Congestion {
    Low,
    High,
}

impl Congestion {
    pub fn multiplier(self) -> usize {
        match self {
            Congestion::Low => 1,
            Congestion::High => 2,
        }
    }
}

impl std::fmt::Display for Congestion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Congestion::Low => "low",
            Congestion::High => "high",
        })
    }
}

impl std::str::FromStr for Congestion {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "low" => Ok(Congestion::Low),
            "high" => Ok(Congestion::High),
            _ => Err(SimError::Config(format!("unknown congestion `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub map: MapKey,
    pub congestion: Congestion,
    /// Simulation step, s.
    pub dt: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub rig: RigKind,
    pub camera_forward: f64,
    pub camera_height: f64,
    pub camera_pitch_deg: f64,
    pub reward: RewardParams,
    /// Vehicles at low congestion; high doubles it.
    pub vehicles: usize,
    /// Pedestrians at low congestion; high doubles it.
    pub pedestrians: usize,
    pub max_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            map: MapKey::Town(3),
            congestion: Congestion::Low,
            dt: 0.1,
            image_height: 64,
            image_width: 176,
            rig: RigKind::Surround6x60,
            camera_forward: 1.35,
            camera_height: 1.6,
            camera_pitch_deg: 0.0,
            reward: RewardParams::default(),
            vehicles: 8,
            pedestrians: 8,
            max_speed: 15.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.map.validate()?;
        self.reward.validate()?;
        if !(self.dt > 0.0 && self.max_speed > 0.0) {
            return Err(SimError::Config("dt and max_speed must be positive".into()));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(SimError::Config("image size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn mount(&self) -> Mount {
        Mount { forward: self.camera_forward, height: self.camera_height, pitch_down_deg: self.camera_pitch_deg }
    }

    pub fn rig(&self) -> Result<CameraRig<f64>, SimError> {
        Ok(CameraRig::standard(self.rig, self.image_width, self.image_height, self.mount())?)
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [self.rig.camera_count(), 3, self.image_height, self.image_width]
    }
}

/// Normalized controls; both clamped to [-1, 1] before use.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    /// Positive accelerates, negative brakes.
    pub accel: f64,
    pub steer: f64,
}

impl Action {
    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }

    pub fn clamped(self) -> Self {
        Self { accel: self.accel.clamp(-1.0, 1.0), steer: self.steer.clamp(-1.0, 1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub ego: ActorState,
    pub traffic: Vec<ActorState>,
    pub next_waypoint_index: usize,
    pub step_count: usize,
    pub collided: bool,
    pub yaw_rate: f64,
    pub prev_action: Action,
    /// Arc length of the ego's projection on the route lane.
    pub route_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `(cams, 3, H, W)` in [0, 1].
    pub images: Tensor<f32>,
    pub road: [f32; ROAD_DIM],
    pub vehicle: [f32; VEHICLE_DIM],
    pub nav: [f32; NAV_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub success: bool,
    pub collided: bool,
    /// Cosine between motion and the direction to the next waypoint.
    pub similarity: f64,
    pub waypoint_distance: f64,
    pub next_waypoint_index: usize,
    pub branch: RewardBranch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One line of an episode trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    pub steer: f64,
    pub reward: f64,
    pub done: bool,
}

/// Advances the rear-axle kinematic bicycle by one step: speed first, then heading, then position.
pub fn bicycle_step(ego: &mut ActorState, action: Action, dt: f64, max_speed: f64) {
    let a = if action.accel >= 0.0 { action.accel * MAX_ACCEL } else { action.accel * MAX_BRAKE };
    let delta = action.steer * MAX_STEER_DEG.to_radians();
    ego.speed = (ego.speed + a * dt).clamp(0.0, max_speed);
    ego.heading = wrap_angle(ego.heading + ego.speed / WHEELBASE * delta.tan() * dt);
    ego.position[0] += ego.speed * dt * ego.heading.cos();
    ego.position[1] += ego.speed * dt * ego.heading.sin();
}

fn world_seed(seed: u64, map: MapKey, congestion: Congestion) -> u64 {
    let tag = match map {
        MapKey::Town(id) => id as u64,
        MapKey::Named(n) => 64 + n as u64,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (tag << 8) ^ congestion.multiplier() as u64
}

/// One independent simulator instance.
#[derive(Debug, Clone)]
pub struct World {
    cfg: SimConfig,
    renderer: Renderer,
    map: Arc<MapSpec>,
    state: WorldState,
    traffic: Traffic,
    rng: ChaCha8Rng,
    done: bool,
    trace: Vec<TraceRecord>,
}

impl World {
    /// Builds the world and resets it to the configured map and congestion with seed 0.
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let renderer = Renderer::new(&cfg.rig()?);
        let map = MapSpec::load(cfg.map)?;
        let (p, h) = map.route.sample(0.0);
        let state = WorldState {
            ego: ActorState::ego(p, h),
            traffic: Vec::new(),
            next_waypoint_index: 0,
            step_count: 0,
            collided: false,
            yaw_rate: 0.0,
            prev_action: Action::default(),
            route_s: 0.0,
        };
        let mut w = Self {
            renderer,
            map,
            state,
            traffic: Traffic::empty(),
            rng: ChaCha8Rng::seed_from_u64(0),
            done: false,
            trace: Vec::new(),
            cfg,
        };
        w.reset(0, w.cfg.map, w.cfg.congestion)?;
        Ok(w)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn map(&self) -> &MapSpec {
        &self.map
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn reset(&mut self, seed: u64, map: MapKey, congestion: Congestion) -> Result<Observation, SimError> {
        map.validate()?;
        self.map = MapSpec::load(map)?;
        self.rng = ChaCha8Rng::seed_from_u64(world_seed(seed, map, congestion));
        let (p, h) = self.map.route.sample(0.0);
        let ego = ActorState::ego(p, h);
        let m = congestion.multiplier();
        let (vehicles, pedestrians) =
            if map.has_traffic() { (self.cfg.vehicles * m, self.cfg.pedestrians * m) } else { (0, 0) };
        let (traffic, actors) = Traffic::spawn(&self.map, &ego, vehicles, pedestrians, &mut self.rng);
        self.traffic = traffic;
        self.state = WorldState {
            ego,
            traffic: actors,
            next_waypoint_index: 0,
            step_count: 0,
            collided: false,
            yaw_rate: 0.0,
            prev_action: Action::default(),
            route_s: 0.0,
        };
        self.done = false;
        self.trace.clear();
        Ok(self.observe())
    }

    /// Adds a motionless actor to the current episode (test fixtures).
    pub fn place_static_actor(&mut self, actor: ActorState) {
        self.traffic.push_static(&mut self.state.traffic, actor);
    }

    /// Moves the ego (test fixtures).
    pub fn set_ego(&mut self, ego: ActorState) {
        self.state.ego = ActorState { kind: ActorKind::Ego, half_extents: EGO_HALF_EXTENTS, ..ego };
        self.state.route_s = self.map.route.project(ego.position).s;
    }

    pub fn features(&self) -> Features {
        assemble_features(&self.map, &self.state)
    }

    pub fn observe(&self) -> Observation {
        let data = self.renderer.render(&self.map, &self.state.ego, &self.state.traffic);
        let f = self.features();
        Observation { images: Tensor::new(&self.cfg.image_shape(), data), road: f.road, vehicle: f.vehicle, nav: f.nav }
    }

    pub fn bev_mask(&self, grid: &BevGridSpec) -> Vec<u8> {
        ground_truth_bev_mask(&self.map, &self.state, grid)
    }

    pub fn next_waypoint(&self) -> P2 {
        self.map.waypoints[self.state.next_waypoint_index]
    }

    pub fn step(&mut self, action: Action) -> Result<Step, SimError> {
        let (info, reward) = self.advance(action)?;
        Ok(Step { observation: self.observe(), reward, done: self.done, info })
    }

    /// Like [`World::step`] without rendering an observation.
    pub fn advance(&mut self, action: Action) -> Result<(StepInfo, f64), SimError> {
        if self.done {
            return Err(SimError::StepAfterDone);
        }
        if !(action.accel.is_finite() && action.steer.is_finite()) {
            return Err(SimError::InvalidAction(action.accel, action.steer));
        }
        let action = action.clamped();
        let st = &mut self.state;
        let before = st.ego.heading;
        bicycle_step(&mut st.ego, action, self.cfg.dt, self.cfg.max_speed);
        st.yaw_rate = wrap_angle(st.ego.heading - before) / self.cfg.dt;
        st.prev_action = action;
        st.route_s = self.map.route.project_near(st.ego.position, st.route_s - 20.0, st.route_s + 30.0).s;
        self.traffic.advance(&self.map, &mut st.traffic, &st.ego, self.cfg.dt, &mut self.rng);
        st.collided = st.traffic.iter().any(|a| boxes_overlap(&st.ego, a));
        let n = self.map.waypoints.len();
        let params = &self.cfg.reward;
        if st.next_waypoint_index + 1 < n
            && dist(st.ego.position, self.map.waypoints[st.next_waypoint_index]) < params.waypoint_reach_radius
        {
            st.next_waypoint_index += 1;
        }
        st.step_count += 1;
        let waypoint = self.map.waypoints[st.next_waypoint_index];
        let inputs = RewardInputs {
            collided: st.collided,
            speed: st.ego.speed,
            heading: st.ego.heading,
            position: st.ego.position,
            waypoint,
        };
        let reward = reward_fn(&inputs, params);
        self.done = st.collided || st.step_count >= EPISODE_STEPS;
        let info = StepInfo {
            success: self.done && !st.collided,
            collided: st.collided,
            similarity: direction_similarity(st.ego.speed, st.ego.heading, st.ego.position, waypoint),
            waypoint_distance: dist(st.ego.position, waypoint),
            next_waypoint_index: st.next_waypoint_index,
            branch: reward_branch(&inputs, params),
        };
        self.trace.push(TraceRecord {
            step: st.step_count,
            x: st.ego.position[0],
            y: st.ego.position[1],
            heading: st.ego.heading,
            speed: st.ego.speed,
            accel: action.accel,
            steer: action.steer,
            reward,
            done: self.done,
        });
        Ok((info, reward))
    }

    /// Writes the episode trace as line-delimited JSON.
    pub fn write_trace(&self, out: &mut impl Write) -> std::io::Result<()> {
        for r in &self.trace {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig { image_height: 8, image_width: 24, ..SimConfig::default() }
    }

    #[test]
    fn reset_is_deterministic_and_doubles_traffic() {
        let mut w = World::new(small()).unwrap();
        let a = w.reset(5, MapKey::Town(2), Congestion::Low).unwrap();
        let low = w.state().traffic.len();
        let b = w.reset(5, MapKey::Town(2), Congestion::Low).unwrap();
        assert_eq!(a, b);
        assert_eq!(w.state().step_count, 0);
        w.reset(5, MapKey::Town(2), Congestion::High).unwrap();
        assert_eq!(w.state().traffic.len(), 2 * low);
        assert!(matches!(w.reset(5, MapKey::Town(9), Congestion::Low), Err(SimError::Config(_))));
    }

    #[test]
    fn zero_action_from_rest() {
        let mut w = World::new(small()).unwrap();
        let obs = w.reset(1, MapKey::SMOKE, Congestion::Low).unwrap();
        assert_eq!(obs.vehicle, [0.0; 4]);
        assert_eq!(&obs.nav[..2], &[5.0, 0.0]);
        assert_eq!(obs.road[0], 0.0);
        assert_eq!(obs.road[1], 0.0);
        let start = w.state().ego.position;
        let s = w.step(Action::default()).unwrap();
        assert_eq!(s.reward, 0.0);
        assert_eq!(w.state().ego.position, start);
        assert_eq!(s.info.branch, RewardBranch::Progress);
    }

    #[test]
    fn full_episode_succeeds_and_stops() {
        let mut w = World::new(small()).unwrap();
        w.reset(1, MapKey::SMOKE, Congestion::Low).unwrap();
        let mut last = None;
        for _ in 0..EPISODE_STEPS {
            last = Some(w.advance(Action::new(0.2, 0.0)).unwrap());
        }
        let (info, _) = last.unwrap();
        assert!(w.is_done() && info.success);
        let frozen = w.state().clone();
        assert_eq!(w.step(Action::default()), Err(SimError::StepAfterDone));
        assert_eq!(w.state(), &frozen);
        assert!(w.state().next_waypoint_index > 0);
    }

    #[test]
    fn forced_overlap_ends_episode() {
        let mut w = World::new(small()).unwrap();
        w.reset(2, MapKey::SMOKE, Congestion::Low).unwrap();
        let ego = w.state().ego;
        w.place_static_actor(ActorState::vehicle(ego.center(), ego.heading, 0.0));
        let s = w.step(Action::new(0.5, 0.0)).unwrap();
        assert!(s.done && s.info.collided && !s.info.success);
        assert_eq!(s.reward, -w.config().reward.k_c);
    }

    #[test]
    fn bev_mask_examples() {
        let grid = BevGridSpec::default();
        let mut w = World::new(SimConfig { map: MapKey::OPEN_FIELD, ..small() }).unwrap();
        assert!(w.bev_mask(&grid).iter().all(|&c| c == BACKGROUND));
        let ego = w.state().ego;
        // crossing the ego's path so its footprint stays clear of the ego box
        w.place_static_actor(ActorState::vehicle(to_world_frame(&ego, [5.0, 0.0]), ego.heading + std::f64::consts::FRAC_PI_2, 0.0));
        let mask = w.bev_mask(&grid);
        let ny = grid.ny();
        let (ei, ej) = grid.cell_of(0.0, 0.0).unwrap();
        let rows: Vec<usize> = (0..grid.nx()).filter(|i| mask[i * ny + ej] == VEHICLE).collect();
        let center = (rows[0] + rows[rows.len() - 1]) as f64 / 2.0;
        assert!((center - (ei as f64 + 10.0 - 0.5)).abs() <= 0.5, "{rows:?}");
        assert!(mask.iter().all(|&c| c <= 2));
        // on a road map the ego's own footprint stays background
        w.reset(0, MapKey::SMOKE, Congestion::Low).unwrap();
        let mask = w.bev_mask(&grid);
        assert_eq!(mask[ei * ny + ej], BACKGROUND);
        assert!(mask.contains(&ROAD));
    }

    #[test]
    fn trace_lines_parse() {
        let mut w = World::new(small()).unwrap();
        w.reset(0, MapKey::Town(1), Congestion::Low).unwrap();
        for _ in 0..3 {
            w.advance(Action::new(1.0, 0.1)).unwrap();
        }
        let mut buf = Vec::new();
        w.write_trace(&mut buf).unwrap();
        let lines: Vec<TraceRecord> =
            String::from_utf8(buf).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2].step, 3);
    }
}
