use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bevdrive::bev::BevConfig;
use bevdrive::geometry::{BevGridSpec, RigKind};
use bevdrive::policy::{ExtractorKind, NetConfig, PpoConfig};
use bevdrive::simworld::{Congestion, SimConfig};
use eval::DEFAULT_EPISODES;
use segdecoder::SegConfig;

use crate::CliError;

/// The four agents compared in the study: extractor and camera rig.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AgentKind {
    /// Per-camera encoder on three front 60° cameras.
    Drl,
    /// Per-camera encoder on three surround 120° cameras.
    DrlPan,
    /// SC Block on three surround 120° cameras.
    Bev3,
    /// SC Block on six surround 60° cameras.
    Bev6,
}

impl AgentKind {
    pub fn extractor(self) -> ExtractorKind {
        match self {
            AgentKind::Drl | AgentKind::DrlPan => ExtractorKind::Baseline,
            AgentKind::Bev3 | AgentKind::Bev6 => ExtractorKind::Bev,
        }
    }

    pub fn rig(self) -> RigKind {
        match self {
            AgentKind::Drl => RigKind::Front3x60,
            AgentKind::DrlPan | AgentKind::Bev3 => RigKind::Surround3x120,
            AgentKind::Bev6 => RigKind::Surround6x60,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Drl => "drl",
            AgentKind::DrlPan => "drl_pan",
            AgentKind::Bev3 => "bev3",
            AgentKind::Bev6 => "bev6",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Town numbers, 1..=7.
    pub maps: Vec<u8>,
    pub congestion: Vec<Congestion>,
    pub episodes: usize,
    /// Episode `i` of every scenario uses seed `seed_base + i`.
    pub seed_base: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            maps: (1..=7).collect(),
            congestion: vec![Congestion::Low, Congestion::High],
            episodes: DEFAULT_EPISODES,
            seed_base: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Rollout environments; they step in turn on one thread.
    pub workers: usize,
    pub output_dir: PathBuf,
    /// Updates between checkpoints (the final one is always written).
    pub checkpoint_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, workers: 4, output_dir: PathBuf::from("runs"), checkpoint_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub bev: BevConfig,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub seg: SegConfig,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl RunConfig {
    /// Small images and networks that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            sim: SimConfig { image_height: 16, image_width: 48, camera_pitch_deg: 8.0, ..SimConfig::default() },
            bev: BevConfig {
                depth_min: 2.0,
                depth_max: 26.0,
                depth_bins: 8,
                downsample: 4,
                grid: BevGridSpec::new(24.0, 24.0, 1.5).expect("valid grid"),
                context_channels: 8,
                latent_dim: 32,
                image_channels: vec![8, 16],
                bev_channels: vec![16, 32],
                ..BevConfig::default()
            },
            net: NetConfig { gru_hidden: 64, ..NetConfig::default() },
            ..Self::default()
        }
    }

    /// Sets the extractor and camera rig of an agent.
    pub fn for_agent(mut self, agent: AgentKind) -> Self {
        self.net.extractor = agent.extractor();
        self.sim.rig = agent.rig();
        self
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string().trim().to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner().to_string().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialized form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    /// Checks every section, naming the offending one.
    pub fn validate(&self) -> Result<(), CliError> {
        let at = |section: &str, e: &dyn std::fmt::Display| CliError::Config(format!("at `{section}`: {e}"));
        self.sim.validate().map_err(|e| at("sim", &e))?;
        self.bev.validate().map_err(|e| at("bev", &e))?;
        self.ppo.validate(self.run.workers).map_err(|e| at("ppo", &e))?;
        self.seg.validate().map_err(|e| at("seg", &e))?;
        let g = &self.bev.grid;
        if g.nx() % 4 != 0 || g.ny() % 4 != 0 {
            return Err(at("bev.grid", &format!("the segmentation decoder needs cell counts divisible by 4, got {}×{}", g.nx(), g.ny())));
        }
        if self.eval.maps.is_empty() || self.eval.maps.iter().any(|m| !(1..=7).contains(m)) {
            return Err(at("eval.maps", &format!("expected town numbers in 1..=7, got {:?}", self.eval.maps)));
        }
        if self.eval.congestion.is_empty() || self.eval.episodes == 0 {
            return Err(at("eval", &"need at least one congestion level and one episode"));
        }
        if self.run.workers == 0 || self.run.checkpoint_every == 0 {
            return Err(at("run", &"workers and checkpoint_every must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::desk().for_agent(AgentKind::Drl);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = RunConfig::parse("[ppo]\nclip = 0.2\nclipp = 0.3\n").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("ppo") && m.contains("clipp")), "{err}");
        let err = RunConfig::parse("[sim]\ndt = \"fast\"\n").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("sim.dt")), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_section() {
        let err = RunConfig::parse("[ppo]\nclip = -1.0\n").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("`ppo`")), "{err}");
        let err = RunConfig::parse("[eval]\nmaps = [9]\n").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("eval.maps")), "{err}");
    }

    #[test]
    fn agent_roster() {
        let rigs: Vec<_> = [AgentKind::Drl, AgentKind::DrlPan, AgentKind::Bev3, AgentKind::Bev6].map(|a| (a.extractor(), a.rig())).into();
        assert_eq!(
            rigs,
            vec![
                (ExtractorKind::Baseline, RigKind::Front3x60),
                (ExtractorKind::Baseline, RigKind::Surround3x120),
                (ExtractorKind::Bev, RigKind::Surround3x120),
                (ExtractorKind::Bev, RigKind::Surround6x60),
            ]
        );
    }

    #[test]
    fn shipped_desk_config_matches_preset() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::desk());
    }
}
