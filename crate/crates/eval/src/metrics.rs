use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use bevdrive::simworld::{Congestion, MapKey, Observation, World, EPISODE_STEPS};

use crate::agent::{Agent, EvalAgent};
use crate::EvalError;

pub const DEFAULT_EPISODES: usize = 50;
const TOWNS: std::ops::RangeInclusive<u8> = 1..=7;

/// Town number, or the per-agent average over towns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapId {
    Town(u8),
    Avg,
}

impl fmt::Display for MapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapId::Town(n) => write!(f, "{n}"),
            MapId::Avg => f.write_str("avg"),
        }
    }
}

impl FromStr for MapId {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "avg" => Ok(MapId::Avg),
            _ => s
                .parse::<u8>()
                .ok()
                .filter(|n| TOWNS.contains(n))
                .map(MapId::Town)
                .ok_or_else(|| EvalError::Scenario(format!("unknown map id `{s}`"))),
        }
    }
}

impl Serialize for MapId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MapId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// One cell of a result table. Episode `i` uses seed `seed_base + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub map_id: u8,
    pub congestion: Congestion,
    pub episodes: usize,
    pub seed_base: u64,
}

impl ScenarioSpec {
    pub fn new(map_id: u8, congestion: Congestion, episodes: usize, seed_base: u64) -> Result<Self, EvalError> {
        if !TOWNS.contains(&map_id) {
            return Err(EvalError::Scenario(format!("map id {map_id} outside 1..=7")));
        }
        if episodes == 0 {
            return Err(EvalError::Scenario("at least one episode per scenario".into()));
        }
        Ok(Self { map_id, congestion, episodes, seed_base })
    }

    /// Cross product of maps and congestion levels.
    pub fn grid(maps: &[u8], congestion: &[Congestion], episodes: usize, seed_base: u64) -> Result<Vec<Self>, EvalError> {
        maps.iter()
            .flat_map(|&m| congestion.iter().map(move |&c| Self::new(m, c, episodes, seed_base)))
            .collect()
    }

    pub fn episode_seed(&self, episode: usize) -> u64 {
        self.seed_base + episode as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub seed: u64,
    pub collided: bool,
    /// Collision-free steps: the step that collides is not counted, so an
    /// episode reaches the full 128 exactly when it succeeds.
    pub steps: usize,
    pub similarity: Vec<f64>,
    pub waypoint_distance: Vec<f64>,
}

/// Drives from `first` until the episode ends.
pub fn roll_out(agent: &mut dyn Agent, world: &mut World, first: Observation, seed: u64) -> Result<EpisodeResult, EvalError> {
    let mut r = EpisodeResult { seed, collided: false, steps: 0, similarity: Vec::new(), waypoint_distance: Vec::new() };
    let mut obs = first;
    loop {
        let action = agent.act(&obs)?;
        let step = world.step(action)?;
        if !step.info.collided {
            r.steps += 1;
        }
        r.similarity.push(step.info.similarity);
        r.waypoint_distance.push(step.info.waypoint_distance);
        if step.done {
            r.collided = step.info.collided;
            return Ok(r);
        }
        obs = step.observation;
    }
}

pub fn run_episode(
    agent: &mut dyn Agent,
    world: &mut World,
    map: MapKey,
    congestion: Congestion,
    seed: u64,
) -> Result<EpisodeResult, EvalError> {
    agent.reset();
    let first = world.reset(seed, map, congestion)?;
    roll_out(agent, world, first, seed)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean cosine similarity over the steps of an episode.
pub fn similarity_metric(r: &EpisodeResult) -> f64 {
    mean(&r.similarity)
}

/// Mean after sorting, so the result does not depend on input order.
fn order_free_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    mean(&xs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub agent: String,
    pub map_id: MapId,
    pub congestion: Congestion,
    pub episodes: usize,
    pub seed_base: u64,
    pub collision_rate: f64,
    pub similarity: f64,
    pub timesteps: f64,
    pub waypoint_distance: f64,
}

impl MetricRecord {
    fn key(&self) -> (&str, MapId, Congestion) {
        (&self.agent, self.map_id, self.congestion)
    }
}

/// Means over episodes of one scenario cell.
pub fn aggregate(agent: &str, scenario: &ScenarioSpec, results: &[EpisodeResult]) -> MetricRecord {
    assert!(!results.is_empty(), "contract violation: aggregating zero episodes");
    let per = |f: &dyn Fn(&EpisodeResult) -> f64| order_free_mean(results.iter().map(f).collect());
    MetricRecord {
        agent: agent.to_string(),
        map_id: MapId::Town(scenario.map_id),
        congestion: scenario.congestion,
        episodes: results.len(),
        seed_base: scenario.seed_base,
        collision_rate: per(&|r| f64::from(u8::from(r.collided))),
        similarity: per(&|r| similarity_metric(r)),
        timesteps: per(&|r| r.steps as f64),
        waypoint_distance: per(&|r| mean(&r.waypoint_distance)),
    }
}

/// Unweighted mean over towns, one row per (agent, congestion).
fn averages(rows: &[MetricRecord]) -> Vec<MetricRecord> {
    let mut groups: BTreeMap<(&str, Congestion), Vec<&MetricRecord>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.map_id != MapId::Avg) {
        groups.entry((&r.agent, r.congestion)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((agent, congestion), g)| {
            let per = |f: &dyn Fn(&MetricRecord) -> f64| mean(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            MetricRecord {
                agent: agent.to_string(),
                map_id: MapId::Avg,
                congestion,
                episodes: g.iter().map(|r| r.episodes).sum(),
                seed_base: g.iter().map(|r| r.seed_base).min().unwrap_or(0),
                collision_rate: per(&|r| r.collision_rate),
                similarity: per(&|r| r.similarity),
                timesteps: per(&|r| r.timesteps),
                waypoint_distance: per(&|r| r.waypoint_distance),
            }
        })
        .collect()
}

/// Runs every agent on every scenario and appends the average rows; output is
/// sorted by (agent, map, congestion).
pub fn evaluate(agents: &mut [EvalAgent], scenarios: &[ScenarioSpec]) -> Result<Vec<MetricRecord>, EvalError> {
    let mut rows = Vec::new();
    for a in agents.iter_mut() {
        let mut world = World::new(a.sim.clone())?;
        for sc in scenarios {
            let results = (0..sc.episodes)
                .map(|i| run_episode(a.agent.as_mut(), &mut world, MapKey::Town(sc.map_id), sc.congestion, sc.episode_seed(i)))
                .collect::<Result<Vec<_>, _>>()?;
            debug_assert!(results.iter().all(|r| r.steps <= EPISODE_STEPS));
            rows.push(aggregate(&a.id, sc, &results));
        }
    }
    let avg = averages(&rows);
    rows.extend(avg);
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(rows)
}
