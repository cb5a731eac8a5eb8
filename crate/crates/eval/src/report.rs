use std::io::{Read, Write};

use serde::Serialize;

use bevdrive::simworld::Congestion;

use crate::metrics::{MapId, MetricRecord};
use crate::EvalError;

pub const CSV_HEADER: &str = "agent,map_id,congestion,episodes,seed_base,collision_rate,similarity,timesteps,waypoint_distance";

pub fn write_csv(rows: &[MetricRecord], out: impl Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<Vec<MetricRecord>, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(EvalError::Scenario(format!("unexpected CSV header `{header}`")));
    }
    r.deserialize().map(|row| row.map_err(EvalError::from)).collect()
}

/// One agent's metric minus another's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricDeltas {
    pub collision_rate: f64,
    pub similarity: f64,
    pub timesteps: f64,
    pub waypoint_distance: f64,
}

impl MetricDeltas {
    fn between(a: &MetricRecord, b: &MetricRecord) -> Self {
        Self {
            collision_rate: a.collision_rate - b.collision_rate,
            similarity: a.similarity - b.similarity,
            timesteps: a.timesteps - b.timesteps,
            waypoint_distance: a.waypoint_distance - b.waypoint_distance,
        }
    }

    /// Count of metrics where the candidate is strictly better, out of four.
    pub fn improvements(&self) -> usize {
        [self.collision_rate < 0.0, self.similarity > 0.0, self.timesteps > 0.0, self.waypoint_distance < 0.0]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CongestionComparison {
    pub congestion: Congestion,
    pub candidate: MetricRecord,
    pub baseline: MetricRecord,
    /// Candidate minus baseline on the average rows.
    pub deltas: MetricDeltas,
    /// Full-scale reference deltas (six-camera BEV agent minus the
    /// three-front-camera agent), where available.
    pub reference: Option<MetricDeltas>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub candidate: String,
    pub baseline: String,
    pub by_congestion: Vec<CongestionComparison>,
}

impl AblationReport {
    pub fn get(&self, congestion: Congestion) -> Option<&CongestionComparison> {
        self.by_congestion.iter().find(|c| c.congestion == congestion)
    }

    /// One line per congestion level with signed deltas.
    pub fn summary(&self) -> String {
        let sign = |v: f64, lower_better: bool| match (v > 0.0, v < 0.0) {
            (false, false) => "=",
            (up, _) if up != lower_better => "better",
            _ => "worse",
        };
        self.by_congestion
            .iter()
            .map(|c| {
                let d = c.deltas;
                format!(
                    "{} vs {} ({}): collision {:+.3} {}, similarity {:+.3} {}, timesteps {:+.2} {}, waypoint distance {:+.2} {}",
                    self.candidate,
                    self.baseline,
                    c.congestion,
                    d.collision_rate,
                    sign(d.collision_rate, true),
                    d.similarity,
                    sign(d.similarity, false),
                    d.timesteps,
                    sign(d.timesteps, false),
                    d.waypoint_distance,
                    sign(d.waypoint_distance, true),
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Town-averaged results of the full-scale study: (front-camera agent, six-camera BEV agent).
pub fn reference_points(congestion: Congestion) -> ([f64; 4], [f64; 4]) {
    match congestion {
        Congestion::Low => ([0.34, 0.81, 114.94, 5.99], [0.12, 0.84, 126.86, 5.99]),
        Congestion::High => ([0.35, 0.82, 112.98, 6.43], [0.11, 0.86, 125.79, 5.88]),
    }
}

/// Average-row deltas of `candidate` minus `baseline` for every congestion
/// level both agents were evaluated at.
pub fn compare_agents(table: &[MetricRecord], candidate: &str, baseline: &str) -> Result<AblationReport, EvalError> {
    let avg = |agent: &str, c: Congestion| table.iter().find(|r| r.agent == agent && r.map_id == MapId::Avg && r.congestion == c);
    for agent in [candidate, baseline] {
        if !table.iter().any(|r| r.agent == agent && r.map_id == MapId::Avg) {
            return Err(EvalError::MissingAgent(agent.to_string()));
        }
    }
    let mut by_congestion = Vec::new();
    for c in [Congestion::Low, Congestion::High] {
        let (Some(a), Some(b)) = (avg(candidate, c), avg(baseline, c)) else { continue };
        let (base, bev) = reference_points(c);
        let reference = Some(MetricDeltas {
            collision_rate: bev[0] - base[0],
            similarity: bev[1] - base[1],
            timesteps: bev[2] - base[2],
            waypoint_distance: bev[3] - base[3],
        });
        by_congestion.push(CongestionComparison {
            congestion: c,
            candidate: a.clone(),
            baseline: b.clone(),
            deltas: MetricDeltas::between(a, b),
            reference,
        });
    }
    Ok(AblationReport { candidate: candidate.to_string(), baseline: baseline.to_string(), by_congestion })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(agent: &str, map_id: MapId, c: Congestion, collision: f64, steps: f64) -> MetricRecord {
        MetricRecord {
            agent: agent.into(),
            map_id,
            congestion: c,
            episodes: 50,
            seed_base: 1000,
            collision_rate: collision,
            similarity: 0.8,
            timesteps: steps,
            waypoint_distance: 2.5,
        }
    }

    #[test]
    fn csv_round_trip_with_exact_header() {
        let rows = vec![
            row("bev6", MapId::Town(1), Congestion::Low, 0.1, 120.5),
            row("bev6", MapId::Avg, Congestion::Low, 0.1, 120.5),
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(text.lines().nth(2).unwrap(), "bev6,avg,low,50,1000,0.1,0.8,120.5,2.5");
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn self_comparison_is_all_zero() {
        let t = vec![row("a", MapId::Avg, Congestion::Low, 0.2, 100.0)];
        let r = compare_agents(&t, "a", "a").unwrap();
        let d = r.get(Congestion::Low).unwrap().deltas;
        assert_eq!(d, MetricDeltas { collision_rate: 0.0, similarity: 0.0, timesteps: 0.0, waypoint_distance: 0.0 });
        assert_eq!(d.improvements(), 0);
    }

    #[test]
    fn deltas_and_missing_agent() {
        let t = vec![row("bev6", MapId::Avg, Congestion::Low, 0.1, 125.0), row("drl", MapId::Avg, Congestion::Low, 0.3, 110.0)];
        let r = compare_agents(&t, "bev6", "drl").unwrap();
        let c = r.get(Congestion::Low).unwrap();
        assert!((c.deltas.collision_rate + 0.2).abs() < 1e-12);
        assert_eq!(c.deltas.timesteps, 15.0);
        assert!(r.get(Congestion::High).is_none());
        let reference = c.reference.unwrap();
        assert!((reference.collision_rate + 0.22).abs() < 1e-12);
        assert!((reference.timesteps - 11.92).abs() < 1e-9);
        assert!(r.summary().contains("collision -0.200 better"));
        assert!(matches!(compare_agents(&t, "bev6", "bev3"), Err(EvalError::MissingAgent(a)) if a == "bev3"));
    }
}
