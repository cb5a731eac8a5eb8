use crate::simworld::{NAV_DIM, ROAD_DIM, VEHICLE_DIM};

use super::net::ObsRef;
use super::PolicyError;

/// Everything the update needs to replay one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub images: Vec<f32>,
    pub road: [f32; ROAD_DIM],
    pub vehicle: [f32; VEHICLE_DIM],
    pub nav: [f32; NAV_DIM],
    /// Recurrent state fed into this step.
    pub hidden: Vec<f32>,
    pub pre_tanh: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

impl StepRecord {
    pub fn obs(&self) -> ObsRef<'_> {
        ObsRef { images: &self.images, road: &self.road, vehicle: &self.vehicle, nav: &self.nav }
    }
}

/// Fixed-capacity per-worker trajectories of `horizon` steps each.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub workers: usize,
    pub image_shape: [usize; 4],
    steps: Vec<Vec<StepRecord>>,
    advantages: Vec<Vec<f64>>,
    returns: Vec<Vec<f64>>,
}

impl RolloutBuffer {
    pub fn new(horizon: usize, workers: usize, image_shape: [usize; 4]) -> Self {
        Self {
            horizon,
            workers,
            image_shape,
            steps: vec![Vec::with_capacity(horizon); workers],
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn push(&mut self, worker: usize, rec: StepRecord) -> Result<(), PolicyError> {
        let lane = &mut self.steps[worker];
        if lane.len() >= self.horizon {
            return Err(PolicyError::BufferFull(worker));
        }
        lane.push(rec);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.steps.iter().all(|s| s.len() == self.horizon)
    }

    pub fn len(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, worker: usize, t: usize) -> &StepRecord {
        &self.steps[worker][t]
    }

    /// Runs GAE per worker and normalizes advantages over the whole buffer.
    pub fn finish(&mut self, gamma: f64, lambda: f64, bootstrap: &[f64]) -> Result<(), PolicyError> {
        if !self.is_full() {
            return Err(PolicyError::BufferNotFull(self.len(), self.horizon * self.workers));
        }
        assert_eq!(bootstrap.len(), self.workers, "contract violation: one bootstrap value per worker");
        self.advantages.clear();
        self.returns.clear();
        for (lane, &boot) in self.steps.iter().zip(bootstrap) {
            let r: Vec<f64> = lane.iter().map(|s| s.reward).collect();
            let v: Vec<f64> = lane.iter().map(|s| s.value).collect();
            let d: Vec<bool> = lane.iter().map(|s| s.done).collect();
            let (a, ret) = compute_gae(&r, &v, &d, boot, gamma, lambda);
            self.advantages.push(a);
            self.returns.push(ret);
        }
        let mut flat: Vec<f64> = self.advantages.concat();
        normalize(&mut flat);
        for (w, lane) in self.advantages.iter_mut().enumerate() {
            lane.copy_from_slice(&flat[w * self.horizon..(w + 1) * self.horizon]);
        }
        Ok(())
    }

    /// Installs explicit advantages and returns (fixtures and replays).
    pub fn set_targets(&mut self, advantages: Vec<Vec<f64>>, returns: Vec<Vec<f64>>) {
        assert!(
            advantages.len() == self.workers && returns.len() == self.workers,
            "contract violation: one target lane per worker"
        );
        self.advantages = advantages;
        self.returns = returns;
    }

    pub fn is_finished(&self) -> bool {
        self.advantages.len() == self.workers
    }

    /// Normalized advantage of a step; available after [`RolloutBuffer::finish`].
    pub fn advantage(&self, worker: usize, t: usize) -> f64 {
        self.advantages[worker][t]
    }

    pub fn return_of(&self, worker: usize, t: usize) -> f64 {
        self.returns[worker][t]
    }

    pub fn clear(&mut self) {
        self.steps.iter_mut().for_each(Vec::clear);
        self.advantages.clear();
        self.returns.clear();
    }
}

/// Generalized advantage estimation over one trajectory, newest step last.
///
/// `bootstrap` is the value estimate of the observation following the last
/// step; a `done` flag cuts both the bootstrap and the advantage recursion.
/// Returns raw (unnormalized) advantages and `advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "contract violation: GAE input lengths differ");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts to zero mean and scales to unit variance (left unscaled when the spread is negligible).
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x -= mean;
        if std > 1e-8 {
            *x /= std;
        }
    }
}
