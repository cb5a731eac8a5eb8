use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bevdrive::autodiff::{ParamStore, Tensor};
use bevdrive::policy::{ObsBatch, PolicyNet};
use bevdrive::simworld::{Action, Observation, SimConfig};

use crate::EvalError;

/// Anything that drives: called once per step with the latest observation.
pub trait Agent {
    /// Called before every episode.
    fn reset(&mut self) {}
    fn act(&mut self, obs: &Observation) -> Result<Action, EvalError>;
}

/// Drives with `tanh(μ)`, carrying its recurrent state across steps.
pub struct PolicyAgent<'a> {
    net: &'a PolicyNet,
    store: &'a ParamStore<f32>,
    hidden: Tensor<f32>,
    rng: ChaCha8Rng,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(net: &'a PolicyNet, store: &'a ParamStore<f32>) -> Self {
        Self { net, store, hidden: net.initial_hidden(1), rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Agent for PolicyAgent<'_> {
    fn reset(&mut self) {
        self.hidden = self.net.initial_hidden(1);
    }

    fn act(&mut self, obs: &Observation) -> Result<Action, EvalError> {
        let batch = ObsBatch::<f32>::from_observations(&[obs]);
        let out = self.net.act(self.store, &batch, &self.hidden, &mut self.rng, true)?;
        self.hidden = out.hidden;
        let [accel, steer] = out.actions[0];
        Ok(Action::new(accel, steer))
    }
}

/// Repeats one action forever.
#[derive(Debug, Clone, Copy)]
pub struct ConstantAgent(pub Action);

impl Agent for ConstantAgent {
    fn act(&mut self, _: &Observation) -> Result<Action, EvalError> {
        Ok(self.0)
    }
}

/// An agent with its name and the simulator settings (camera rig) it was trained with.
pub struct EvalAgent<'a> {
    pub id: String,
    pub sim: SimConfig,
    pub agent: Box<dyn Agent + 'a>,
}
