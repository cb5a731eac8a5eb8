use serde::{Deserialize, Serialize};

use super::map::P2;
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    /// Collision penalty.
    pub k_c: f64,
    /// Speed limit, m/s.
    pub v_m: f64,
    pub waypoint_reach_radius: f64,
    /// Floor on the squared waypoint distance, m².
    pub denom_floor: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { k_c: 100.0, v_m: 8.0, waypoint_reach_radius: 2.0, denom_floor: 0.25 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let all = [self.k_c, self.v_m, self.waypoint_reach_radius, self.denom_floor];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(SimError::Config(format!("reward parameters must be positive: {self:?}")))
        }
    }
}

/// The inputs the reward depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInputs {
    pub collided: bool,
    pub speed: f64,
    pub heading: f64,
    pub position: P2,
    pub waypoint: P2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardBranch {
    Collision,
    Overspeed,
    Progress,
}

/// Cosine between the motion direction and the direction to `waypoint`;
/// zero when stationary or already on the waypoint.
pub fn direction_similarity(speed: f64, heading: f64, position: P2, waypoint: P2) -> f64 {
    let (dx, dy) = (waypoint[0] - position[0], waypoint[1] - position[1]);
    let d = dx.hypot(dy);
    if speed <= 0.0 || d == 0.0 {
        return 0.0;
    }
    ((heading.cos() * dx + heading.sin() * dy) / d).clamp(-1.0, 1.0)
}

pub fn reward_branch(inputs: &RewardInputs, params: &RewardParams) -> RewardBranch {
    if inputs.collided {
        RewardBranch::Collision
    } else if inputs.speed - params.v_m > 0.0 {
        RewardBranch::Overspeed
    } else {
        RewardBranch::Progress
    }
}

pub fn reward_fn(inputs: &RewardInputs, params: &RewardParams) -> f64 {
    match reward_branch(inputs, params) {
        RewardBranch::Collision => -params.k_c,
        RewardBranch::Overspeed => params.v_m - inputs.speed,
        RewardBranch::Progress => {
            let v_s = direction_similarity(inputs.speed, inputs.heading, inputs.position, inputs.waypoint);
            let (dx, dy) = (inputs.position[0] - inputs.waypoint[0], inputs.position[1] - inputs.waypoint[1]);
            4.0 * inputs.speed * v_s / (dx * dx + dy * dy).max(params.denom_floor)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(collided: bool, speed: f64, position: P2) -> RewardInputs {
        RewardInputs { collided, speed, heading: 0.0, position, waypoint: [0.0, 0.0] }
    }

    #[test]
    fn branch_examples() {
        let p = RewardParams::default();
        assert_eq!(reward_fn(&inputs(true, 3.0, [-2.0, 0.0]), &p), -100.0);
        assert_eq!(reward_fn(&inputs(false, 10.0, [-2.0, 0.0]), &p), -2.0);
        assert_eq!(reward_fn(&inputs(false, 5.0, [-2.0, 0.0]), &p), 5.0);
        assert_eq!(reward_fn(&inputs(false, 0.0, [-2.0, 0.0]), &p), 0.0);
    }

    proptest! {
        #[test]
        fn similarity_bounded_and_reward_capped(
            v in 0.0..8.0f64, h in -4.0..4.0f64, x in -20.0..20.0f64, y in -20.0..20.0f64,
        ) {
            let p = RewardParams::default();
            let i = RewardInputs { collided: false, speed: v, heading: h, position: [x, y], waypoint: [1.0, 2.0] };
            let s = direction_similarity(v, h, [x, y], [1.0, 2.0]);
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!(reward_fn(&i, &p) <= 4.0 * p.v_m / p.denom_floor);
        }
    }
}
