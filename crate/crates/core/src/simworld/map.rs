//! Procedural road maps: polylines, lanes, junctions, walk paths and the
//! ground-surface raster used by the renderer and the mask generator.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

pub type P2 = [f64; 2];

/// Bumped whenever generation changes; part of the map seed.
pub const GENERATOR_VERSION: u64 = 1;

const SIDEWALK_WIDTH: f64 = 3.0;
const RASTER_RES: f64 = 0.25;
const WAYPOINT_SPACING: f64 = 5.0;
const MIN_ROUTE_LENGTH: f64 = 320.0;

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI) % (2.0 * PI);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    a - PI
}

fn sub(a: P2, b: P2) -> P2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: P2, b: P2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn dist(a: P2, b: P2) -> f64 {
    let d = sub(a, b);
    d[0].hypot(d[1])
}

/// Which map to drive on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MapKey {
    Town(u8),
    Named(NamedMap),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedMap {
    /// Long straight road without traffic.
    Smoke,
    /// No roads at all.
    OpenField,
}

impl MapKey {
    pub const SMOKE: MapKey = MapKey::Named(NamedMap::Smoke);
    pub const OPEN_FIELD: MapKey = MapKey::Named(NamedMap::OpenField);

    pub fn validate(self) -> Result<(), SimError> {
        match self {
            MapKey::Town(id) if !(1..=7).contains(&id) => Err(SimError::Config(format!("map id {id} outside 1..7"))),
            _ => Ok(()),
        }
    }

    pub fn has_traffic(self) -> bool {
        matches!(self, MapKey::Town(_))
    }

    fn seed(self) -> u64 {
        let tag = match self {
            MapKey::Town(id) => id as u64,
            MapKey::Named(NamedMap::Smoke) => 100,
            MapKey::Named(NamedMap::OpenField) => 101,
        };
        0x6d61_7000 ^ (GENERATOR_VERSION << 32) ^ tag
    }
}

impl std::fmt::Display for MapKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MapKey::Town(id) => write!(f, "{id}"),
            MapKey::Named(NamedMap::Smoke) => f.write_str("smoke"),
            MapKey::Named(NamedMap::OpenField) => f.write_str("open_field"),
        }
    }
}

impl std::str::FromStr for MapKey {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        let key = match s {
            "smoke" => MapKey::SMOKE,
            "open_field" => MapKey::OPEN_FIELD,
            _ => MapKey::Town(s.parse().map_err(|_| SimError::Config(format!("unknown map `{s}`")))?),
        };
        key.validate()?;
        Ok(key)
    }
}

/// Foot of a point on a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    /// Signed distance, positive to the left of the direction of travel.
    pub lateral: f64,
    pub heading: f64,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pts: Vec<P2>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(pts: Vec<P2>) -> Self {
        assert!(pts.len() >= 2, "polyline needs two points");
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in pts.windows(2) {
            acc += dist(w[0], w[1]);
            cum.push(acc);
        }
        Self { pts, cum }
    }

    pub fn points(&self) -> &[P2] {
        &self.pts
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        let s = s.clamp(0.0, self.length());
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => (i - 1).min(self.pts.len() - 2),
        }
    }

    fn segment_heading(&self, i: usize) -> f64 {
        let d = sub(self.pts[i + 1], self.pts[i]);
        d[1].atan2(d[0])
    }

    /// Position and heading at arc length `s` (clamped to the ends).
    pub fn sample(&self, s: f64) -> (P2, f64) {
        let i = self.segment_at(s);
        let len = self.cum[i + 1] - self.cum[i];
        let t = if len > 0.0 { ((s - self.cum[i]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], self.segment_heading(i))
    }

    /// Signed curvature (1/m) from the turn between two 2 m chords around `s`.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let l = 2.0;
        let s = s.clamp(l, (self.length() - l).max(l));
        let (a, b, c) = (self.sample(s - l).0, self.sample(s).0, self.sample(s + l).0);
        let (u, v) = (sub(b, a), sub(c, b));
        let turn = (u[0] * v[1] - u[1] * v[0]).atan2(dot(u, v));
        let span = (dist(a, b) + dist(b, c)) / 2.0;
        if span > 1e-9 { turn / span } else { 0.0 }
    }

    pub fn project(&self, p: P2) -> Projection {
        self.project_in(p, 0, self.pts.len() - 1)
    }

    /// Projection restricted to arc lengths in `[s_lo, s_hi]`.
    pub fn project_near(&self, p: P2, s_lo: f64, s_hi: f64) -> Projection {
        let a = self.segment_at(s_lo);
        let b = self.segment_at(s_hi) + 1;
        self.project_in(p, a, b)
    }

    fn project_in(&self, p: P2, first: usize, end: usize) -> Projection {
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        for i in first..end.min(self.pts.len() - 1) {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let ab = sub(b, a);
            let len2 = dot(ab, ab);
            let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let foot = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = dist(p, foot);
            if d < best.0 {
                best = (d, i, t);
            }
        }
        let (_, i, t) = best;
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let ab = sub(b, a);
        let len = dot(ab, ab).sqrt();
        let ap = sub(p, a);
        let lateral = if len > 0.0 { (ab[0] * ap[1] - ab[1] * ap[0]) / len } else { 0.0 };
        Projection { s: self.cum[i] + t * len, lateral, heading: self.segment_heading(i), segment: i }
    }

    /// Parallel curve shifted `d` meters to the left.
    pub fn offset(&self, d: f64) -> Polyline {
        let n = self.pts.len();
        let pts = (0..n)
            .map(|i| {
                let a = self.pts[i.saturating_sub(1)];
                let b = self.pts[(i + 1).min(n - 1)];
                let t = sub(b, a);
                let l = t[0].hypot(t[1]);
                let normal = [-t[1] / l, t[0] / l];
                [self.pts[i][0] + d * normal[0], self.pts[i][1] + d * normal[1]]
            })
            .collect();
        Polyline::new(pts)
    }

    pub fn reversed(&self) -> Polyline {
        Polyline::new(self.pts.iter().rev().copied().collect())
    }

    fn bounds(&self) -> (P2, P2) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.pts {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

fn straight_points(from: P2, heading: f64, length: f64) -> Vec<P2> {
    let n = length.ceil().max(1.0) as usize;
    let (s, c) = heading.sin_cos();
    (0..=n).map(|i| {
        let t = length * i as f64 / n as f64;
        [from[0] + c * t, from[1] + s * t]
    }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub center: Polyline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub path: Polyline,
    /// Arc lengths along this lane where it passes a junction, with the junction index.
    pub junction_s: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Junction {
    pub center: P2,
    /// Arc length along the route lane.
    pub route_s: f64,
    /// Lanes meeting here.
    pub lanes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Surface {
    Offroad = 0,
    Sidewalk = 1,
    Road = 2,
    Marking = 3,
}

impl Surface {
    pub fn is_drivable(self) -> bool {
        matches!(self, Surface::Road | Surface::Marking)
    }
}

/// Ground classes sampled on a regular grid in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceRaster {
    origin: P2,
    res: f64,
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SurfaceRaster {
    fn empty() -> Self {
        Self { origin: [0.0, 0.0], res: RASTER_RES, width: 0, height: 0, data: Vec::new() }
    }

    #[inline]
    pub fn at(&self, p: P2) -> Surface {
        let fx = (p[0] - self.origin[0]) / self.res;
        let fy = (p[1] - self.origin[1]) / self.res;
        if !(fx >= 0.0 && fy >= 0.0) {
            return Surface::Offroad;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.width || iy >= self.height {
            return Surface::Offroad;
        }
        match self.data[iy * self.width + ix] {
            1 => Surface::Sidewalk,
            2 => Surface::Road,
            3 => Surface::Marking,
            _ => Surface::Offroad,
        }
    }

    fn build(roads: &[Road], lane_width: f64) -> Self {
        if roads.is_empty() {
            return Self::empty();
        }
        let margin = lane_width + SIDEWALK_WIDTH + 1.0;
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for r in roads {
            let (a, b) = r.center.bounds();
            for k in 0..2 {
                lo[k] = lo[k].min(a[k] - margin);
                hi[k] = hi[k].max(b[k] + margin);
            }
        }
        let width = ((hi[0] - lo[0]) / RASTER_RES).ceil() as usize;
        let height = ((hi[1] - lo[1]) / RASTER_RES).ceil() as usize;
        // per-road nearest distance, then merged: overlapping road surfaces drop their markings
        let mut road_hits = vec![0u8; width * height];
        let mut marking = vec![false; width * height];
        let mut sidewalk = vec![false; width * height];
        let mut best = vec![f32::INFINITY; width * height];
        let reach = lane_width + SIDEWALK_WIDTH;
        for road in roads {
            best.iter_mut().for_each(|b| *b = f32::INFINITY);
            let mut touched = Vec::new();
            for w in road.center.points().windows(2) {
                let (a, b) = (w[0], w[1]);
                let ab = sub(b, a);
                let len2 = dot(ab, ab);
                let x0 = (((a[0].min(b[0]) - reach - lo[0]) / RASTER_RES).floor().max(0.0)) as usize;
                let x1 = (((a[0].max(b[0]) + reach - lo[0]) / RASTER_RES).ceil() as usize).min(width);
                let y0 = (((a[1].min(b[1]) - reach - lo[1]) / RASTER_RES).floor().max(0.0)) as usize;
                let y1 = (((a[1].max(b[1]) + reach - lo[1]) / RASTER_RES).ceil() as usize).min(height);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let p = [lo[0] + (ix as f64 + 0.5) * RASTER_RES, lo[1] + (iy as f64 + 0.5) * RASTER_RES];
                        let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                        let d = dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]]) as f32;
                        let k = iy * width + ix;
                        if d < best[k] {
                            if best[k].is_infinite() {
                                touched.push(k);
                            }
                            best[k] = d;
                        }
                    }
                }
            }
            for k in touched {
                let d = best[k] as f64;
                if d < lane_width {
                    road_hits[k] = road_hits[k].saturating_add(1);
                    let center_line = d < 0.12;
                    let edge_line = (lane_width - 0.3..lane_width - 0.12).contains(&d);
                    marking[k] |= center_line || edge_line;
                } else if d < reach {
                    sidewalk[k] = true;
                }
            }
        }
        let data = (0..width * height)
            .map(|k| match road_hits[k] {
                1 if marking[k] => Surface::Marking as u8,
                0 if sidewalk[k] => Surface::Sidewalk as u8,
                0 => Surface::Offroad as u8,
                _ => Surface::Road as u8,
            })
            .collect();
        Self { origin: lo, res: RASTER_RES, width, height, data }
    }
}

/// A fully generated map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    pub key: MapKey,
    pub lane_width: f64,
    pub roads: Vec<Road>,
    /// Lane 0 is the route lane; lane 1 runs the other way on the same road.
    pub lanes: Vec<Lane>,
    pub route: Polyline,
    pub waypoints: Vec<P2>,
    pub junctions: Vec<Junction>,
    /// Sidewalks and crosswalks pedestrians walk along.
    pub walk_paths: Vec<Polyline>,
    /// Walk paths that cross the carriageway.
    pub crosswalks: Vec<usize>,
    pub surface: SurfaceRaster,
}

struct Recipe {
    radius: (f64, f64),
    turn_deg: (f64, f64),
    straight: (f64, f64),
    junctions: usize,
    crossings: usize,
    lane_width: f64,
    alternate: bool,
}

fn recipe(id: u8) -> Recipe {
    match id {
        1 => Recipe { radius: (50.0, 80.0), turn_deg: (10.0, 30.0), straight: (30.0, 60.0), junctions: 1, crossings: 2, lane_width: 3.5, alternate: true },
        2 => Recipe { radius: (15.0, 25.0), turn_deg: (60.0, 90.0), straight: (25.0, 40.0), junctions: 2, crossings: 3, lane_width: 3.2, alternate: false },
        3 => Recipe { radius: (30.0, 50.0), turn_deg: (20.0, 60.0), straight: (30.0, 50.0), junctions: 2, crossings: 2, lane_width: 3.5, alternate: false },
        4 => Recipe { radius: (80.0, 150.0), turn_deg: (5.0, 25.0), straight: (50.0, 90.0), junctions: 0, crossings: 1, lane_width: 3.75, alternate: true },
        5 => Recipe { radius: (25.0, 40.0), turn_deg: (30.0, 60.0), straight: (20.0, 30.0), junctions: 1, crossings: 2, lane_width: 3.5, alternate: true },
        6 => Recipe { radius: (20.0, 30.0), turn_deg: (85.0, 90.0), straight: (70.0, 110.0), junctions: 3, crossings: 2, lane_width: 3.5, alternate: false },
        _ => Recipe { radius: (20.0, 35.0), turn_deg: (30.0, 75.0), straight: (10.0, 25.0), junctions: 1, crossings: 3, lane_width: 3.2, alternate: false },
    }
}

impl MapSpec {
    /// Cached, immutable map for `key`.
    pub fn load(key: MapKey) -> Result<Arc<MapSpec>, SimError> {
        key.validate()?;
        static CACHE: OnceLock<Mutex<HashMap<MapKey, Arc<MapSpec>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(m) = cache.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let map = Arc::new(Self::generate(key));
        cache.lock().unwrap().insert(key, map.clone());
        Ok(map)
    }

    pub fn generate(key: MapKey) -> MapSpec {
        match key {
            MapKey::Town(id) => Self::town(key, &recipe(id), &mut ChaCha8Rng::seed_from_u64(key.seed())),
            MapKey::Named(NamedMap::Smoke) => {
                let center = Polyline::new(straight_points([0.0, 0.0], 0.0, 400.0));
                Self::assemble(key, 3.5, center, &[], &[])
            }
            MapKey::Named(NamedMap::OpenField) => {
                let center = Polyline::new(straight_points([0.0, 0.0], 0.0, 400.0));
                let mut m = Self::assemble(key, 3.5, center, &[], &[]);
                m.roads.clear();
                m.walk_paths.clear();
                m.surface = SurfaceRaster::empty();
                m
            }
        }
    }

    fn town(key: MapKey, r: &Recipe, rng: &mut ChaCha8Rng) -> MapSpec {
        let mut pts = vec![[0.0, 0.0]];
        let mut heading = 0.0f64;
        // (start s, length) of straight pieces after the first
        let mut straights = Vec::new();
        let mut length = 0.0;
        let mut sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let first = 30.0;
        let push_straight = |pts: &mut Vec<P2>, heading: f64, len: f64| {
            let from = *pts.last().unwrap();
            pts.extend(straight_points(from, heading, len).into_iter().skip(1));
        };
        push_straight(&mut pts, heading, first);
        length += first;
        while length < MIN_ROUTE_LENGTH {
            let radius = rng.gen_range(r.radius.0..=r.radius.1);
            let turn = rng.gen_range(r.turn_deg.0..=r.turn_deg.1).to_radians();
            sign = if r.alternate { -sign } else if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let arc = radius * turn;
            let n = arc.ceil() as usize;
            for _ in 0..n {
                let ds = arc / n as f64;
                let mid = heading + sign * ds / radius / 2.0;
                let last = *pts.last().unwrap();
                pts.push([last[0] + ds * mid.cos(), last[1] + ds * mid.sin()]);
                heading += sign * ds / radius;
            }
            length += arc;
            let len = rng.gen_range(r.straight.0..=r.straight.1);
            straights.push((length, len));
            push_straight(&mut pts, heading, len);
            length += len;
        }
        let center = Polyline::new(pts);
        // junctions at the middle of the longest straights
        let mut candidates: Vec<_> = straights.iter().filter(|(_, l)| *l >= 24.0).copied().collect();
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut junction_s: Vec<f64> = candidates.iter().take(r.junctions).map(|(s, l)| s + l / 2.0).collect();
        junction_s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut crossing_s = Vec::new();
        let mut tries = 0;
        while crossing_s.len() < r.crossings && tries < 200 {
            tries += 1;
            let s = rng.gen_range(40.0..center.length() - 20.0);
            let clear = junction_s.iter().chain(&crossing_s).all(|&o| (o - s).abs() > 25.0);
            if clear {
                crossing_s.push(s);
            }
        }
        crossing_s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self::assemble(key, r.lane_width, center, &junction_s, &crossing_s)
    }

    fn assemble(key: MapKey, lw: f64, center: Polyline, junction_s: &[f64], crossing_s: &[f64]) -> MapSpec {
        let mut roads = vec![Road { center: center.clone() }];
        let route = center.offset(-lw / 2.0);
        let mut lanes = vec![
            Lane { path: route.clone(), junction_s: Vec::new() },
            Lane { path: center.reversed().offset(-lw / 2.0), junction_s: Vec::new() },
        ];
        let mut junctions = Vec::new();
        let arm = 40.0;
        for &s in junction_s {
            let (c, h) = center.sample(s);
            let cross_heading = h + PI / 2.0;
            let start = [c[0] - arm * cross_heading.cos(), c[1] - arm * cross_heading.sin()];
            let cross = Polyline::new(straight_points(start, cross_heading, 2.0 * arm));
            let idx = lanes.len();
            lanes.push(Lane { path: cross.offset(-lw / 2.0), junction_s: Vec::new() });
            lanes.push(Lane { path: cross.reversed().offset(-lw / 2.0), junction_s: Vec::new() });
            roads.push(Road { center: cross });
            let route_s = route.project(c).s;
            junctions.push(Junction { center: c, route_s, lanes: vec![0, 1, idx, idx + 1] });
        }
        for (j, junction) in junctions.iter().enumerate() {
            for &l in &junction.lanes {
                let s = lanes[l].path.project(junction.center).s;
                lanes[l].junction_s.push((s, j));
            }
        }
        for lane in &mut lanes {
            lane.junction_s.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        }
        let waypoints = {
            let n = (route.length() / WAYPOINT_SPACING).floor() as usize;
            (1..=n).map(|i| route.sample(i as f64 * WAYPOINT_SPACING).0).collect()
        };
        let side = lw + SIDEWALK_WIDTH / 2.0;
        let mut walk_paths = vec![center.offset(side), center.offset(-side).reversed()];
        let mut crosswalks = Vec::new();
        let crosswalk_s: Vec<f64> = junction_s.iter().map(|s| s + lw + 2.0).chain(crossing_s.iter().copied()).collect();
        for s in crosswalk_s {
            let (c, h) = center.sample(s);
            let n = [-h.sin(), h.cos()];
            let start = [c[0] + side * n[0], c[1] + side * n[1]];
            crosswalks.push(walk_paths.len());
            walk_paths.push(Polyline::new(straight_points(start, h - PI / 2.0, 2.0 * side)));
        }
        let surface = SurfaceRaster::build(&roads, lw);
        MapSpec { key, lane_width: lw, roads, lanes, route, waypoints, junctions, walk_paths, crosswalks, surface }
    }

    /// Distance along the route to the next junction strictly ahead of `s`, if any.
    pub fn junction_ahead(&self, s: f64) -> Option<f64> {
        self.junctions.iter().map(|j| j.route_s - s).filter(|&d| d > 0.0).min_by(|a, b| a.partial_cmp(b).unwrap())
    }
}
