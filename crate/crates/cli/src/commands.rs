use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use bevdrive::autodiff::gradcheck::{run_op_suite, GradcheckReport};
use bevdrive::autodiff::{OpKind, ParamStore, ScatterPlan, Tape, Tensor};
use bevdrive::bev::{sc_block_gradcheck, ScBlock};
use bevdrive::geometry::{CameraRig, Mount, RigKind};
use bevdrive::nn::Bind;
use bevdrive::policy::{train, ExtractorKind, LogRecord, PolicyNet, Trainer};
use bevdrive::simworld::{Action, Congestion, MapKey, World, VEHICLE};
use eval::{evaluate, run_episode, Agent, ConstantAgent, EvalAgent, MetricRecord, PolicyAgent, ScenarioSpec};
use segdecoder::{export_mask_image, predict, train_decoder, SegDataset, SegDecoder, SegReport, SEG_PREFIX};

use crate::checkpoint::{Checkpoint, CheckpointKind, Metadata};
use crate::config::{AgentKind, EvalSection, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.bevd";
pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_INFO_FILE: &str = "run.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fresh network for a configuration; parameters come from `run.seed`.
pub fn build_policy(cfg: &RunConfig) -> Result<(PolicyNet, ParamStore<f32>), CliError> {
    let mut store = ParamStore::new();
    let rig = cfg.sim.rig().map_err(|e| CliError::Config(format!("at `sim`: {e}")))?;
    let net = PolicyNet::new(&mut store, &cfg.net, &cfg.bev, &rig, cfg.run.seed)?;
    Ok((net, store))
}

fn decoder_for(cfg: &RunConfig, store: &mut ParamStore<f32>, seed: u64) -> Result<SegDecoder, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    SegDecoder::new(store, SEG_PREFIX, cfg.bev.context_channels, cfg.seg.channels, &mut rng)
        .map_err(|e| CliError::Other(e.to_string()))
}

pub struct LoadedPolicy {
    pub cfg: RunConfig,
    pub meta: Metadata,
    pub net: PolicyNet,
    pub store: ParamStore<f32>,
    /// Present for segmentation checkpoints.
    pub decoder: Option<SegDecoder>,
}

impl LoadedPolicy {
    pub fn agent(&self) -> AgentKind {
        self.meta.agent
    }

    pub fn block(&self) -> Result<&ScBlock, CliError> {
        self.net
            .extractor()
            .as_bev()
            .ok_or_else(|| CliError::Config(format!("agent `{}` has no SC Block to decode", self.meta.agent.name())))
    }
}

/// Loads a policy or segmentation checkpoint. The network is rebuilt from the
/// configuration stored inside it; `expected`, when given, replaces that
/// configuration and a differing hash only draws a warning.
pub fn load_policy(path: &Path, expected: Option<&RunConfig>) -> Result<LoadedPolicy, CliError> {
    let ck = Checkpoint::load(path)?;
    let stored = RunConfig::parse(&ck.meta.config)
        .map_err(|e| CliError::Checkpoint(format!("{}: embedded configuration: {e}", path.display())))?;
    let cfg = match expected {
        Some(c) => {
            let c = c.clone().for_agent(ck.meta.agent);
            if c.hash() != ck.config_hash {
                eprintln!("warning: {} was written with a different configuration (hash {})", path.display(), hex(&ck.config_hash));
            }
            c
        }
        None => stored,
    };
    let (net, mut store) = build_policy(&cfg)?;
    let decoder = match ck.meta.kind {
        CheckpointKind::Policy => None,
        CheckpointKind::Segmentation { .. } => Some(decoder_for(&cfg, &mut store, cfg.run.seed)?),
    };
    ck.restore(&mut store).map_err(|e| match e {
        CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(LoadedPolicy { cfg, meta: ck.meta, net, store, decoder })
}

fn save_checkpoint(path: &Path, cfg: &RunConfig, kind: CheckpointKind, agent: AgentKind, trainer: (u64, u64), store: &ParamStore<f32>) -> Result<(), CliError> {
    let meta = Metadata { kind, agent, update: trainer.0, env_steps: trainer.1, optimizer_step: 0, config: cfg.to_toml() };
    Checkpoint::from_store(meta, cfg.hash(), store).save(path)
}

#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    version: &'a str,
    agent: AgentKind,
    seed: u64,
    config_hash: String,
    resumed_from: Option<&'a Path>,
    start_update: u64,
    start_env_steps: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: Vec<LogRecord>,
}

/// Trains `agent` until `ppo.total_steps`, writing the configuration, a JSON
/// line per update and periodic checkpoints into `run_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    agent: AgentKind,
    resume: Option<&Path>,
    run_dir: &Path,
    progress: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome, CliError> {
    let cfg = cfg.clone().for_agent(agent);
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let (net, store, update, env_steps) = match resume {
        Some(path) => {
            let loaded = load_policy(path, Some(&cfg))?;
            if loaded.agent() != agent {
                return Err(CliError::Config(format!(
                    "cannot resume `{}` checkpoint {} as `{}`",
                    loaded.agent().name(),
                    path.display(),
                    agent.name()
                )));
            }
            (loaded.net, loaded.store, loaded.meta.update, loaded.meta.env_steps)
        }
        None => {
            let (net, store) = build_policy(&cfg)?;
            (net, store, 0, 0)
        }
    };
    std::fs::write(run_dir.join(CONFIG_FILE), cfg.to_toml())?;
    let info = RunInfo {
        version: env!("CARGO_PKG_VERSION"),
        agent,
        seed: cfg.run.seed,
        config_hash: hex(&cfg.hash()),
        resumed_from: resume,
        start_update: update,
        start_env_steps: env_steps,
    };
    std::fs::write(run_dir.join(RUN_INFO_FILE), serde_json::to_string_pretty(&info).expect("serializes"))?;

    let mut trainer = Trainer::resume(&cfg.sim, net, store, &cfg.ppo, cfg.run.workers, cfg.run.seed, update, env_steps)?;
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    let mut log_file = OpenOptions::new().create(true).append(true).open(run_dir.join(LOG_FILE))?;
    let mut io_error = None;
    let log = train(&mut trainer, &mut |tr, rec| {
        progress(rec);
        let mut write = || -> Result<(), CliError> {
            writeln!(log_file, "{}", serde_json::to_string(rec).expect("serializes"))?;
            if tr.update % cfg.run.checkpoint_every == 0 {
                save_checkpoint(&checkpoint, &cfg, CheckpointKind::Policy, agent, (tr.update, tr.env_steps), &tr.store)?;
            }
            Ok(())
        };
        write().map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            bevdrive::policy::PolicyError::Config(msg)
        })
    })
    .map_err(|e| io_error.take().unwrap_or_else(|| e.into()))?;
    save_checkpoint(&checkpoint, &cfg, CheckpointKind::Policy, agent, (trainer.update, trainer.env_steps), &trainer.store)?;
    Ok(TrainOutcome { run_dir: run_dir.to_path_buf(), checkpoint, log })
}

/// Evaluates every checkpoint on the cross product of `section` and writes
/// the CSV table to `out`. Agents are named after their kind, with a `#n`
/// suffix when a kind repeats.
pub fn cmd_eval(checkpoints: &[PathBuf], section: &EvalSection, out: &Path) -> Result<Vec<MetricRecord>, CliError> {
    if checkpoints.is_empty() {
        return Err(CliError::Config("no checkpoint to evaluate".into()));
    }
    let scenarios = ScenarioSpec::grid(&section.maps, &section.congestion, section.episodes, section.seed_base)?;
    let loaded = checkpoints.iter().map(|p| load_policy(p, None)).collect::<Result<Vec<_>, _>>()?;
    let mut agents = Vec::with_capacity(loaded.len());
    for (i, l) in loaded.iter().enumerate() {
        let base = l.agent().name();
        let repeats = loaded[..i].iter().filter(|o| o.agent() == l.agent()).count();
        let id = if repeats == 0 { base.to_string() } else { format!("{base}#{}", repeats + 1) };
        agents.push(EvalAgent { id, sim: l.cfg.sim.clone(), agent: Box::new(PolicyAgent::new(&l.net, &l.store)) });
    }
    let rows = evaluate(&mut agents, &scenarios)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::fs::File::create(out)?;
    eval::write_csv(&rows, file)?;
    Ok(rows)
}

/// Loads or collects the segmentation dataset.
pub fn seg_dataset(cfg: &RunConfig, path: Option<&Path>, seed: u64) -> Result<SegDataset, CliError> {
    if let Some(p) = path.filter(|p| p.exists()) {
        let d = SegDataset::read(p)?;
        if d.image_shape != cfg.sim.image_shape() || (d.nx, d.ny) != (cfg.bev.grid.nx(), cfg.bev.grid.ny()) {
            return Err(CliError::Config(format!("dataset {} does not match the configured cameras or grid", p.display())));
        }
        return Ok(d);
    }
    let s = &cfg.seg;
    let d = SegDataset::collect(&cfg.sim, &cfg.bev.grid, s.frames, s.frame_stride, s.empty_keep, seed)?;
    if let Some(p) = path {
        d.write(p)?;
    }
    Ok(d)
}

/// Trains a decoder on the grids of a BEV policy; writes a segmentation
/// checkpoint to `out` and the report next to it as JSON.
pub fn cmd_train_seg(
    policy: &Path,
    cfg_override: Option<&RunConfig>,
    frozen: bool,
    dataset: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<SegReport, CliError> {
    let mut loaded = load_policy(policy, cfg_override)?;
    if loaded.decoder.is_some() {
        return Err(CliError::Config(format!("{} already holds a decoder", policy.display())));
    }
    if loaded.cfg.net.extractor != ExtractorKind::Bev {
        return Err(CliError::Config(format!("agent `{}` has no SC Block to decode", loaded.agent().name())));
    }
    let data = seg_dataset(&loaded.cfg, dataset, seed)?;
    let decoder = decoder_for(&loaded.cfg, &mut loaded.store, loaded.cfg.run.seed)?;
    let block = loaded.block()?.clone();
    let report = train_decoder(&mut loaded.store, &block, &decoder, &data, &loaded.cfg.seg, frozen, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let kind = CheckpointKind::Segmentation { frozen };
    let m = &loaded.meta;
    save_checkpoint(out, &loaded.cfg, kind, m.agent, (m.update, m.env_steps), &loaded.store)?;
    std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&report).expect("serializes"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskExport {
    pub frame: usize,
    pub file: String,
    pub vehicle_iou: f64,
}

/// Decodes `frames` fresh random-policy frames and writes one side-by-side
/// pixmap per frame plus `manifest.csv`.
pub fn cmd_export_masks(seg: &Path, frames: usize, out_dir: &Path, seed: u64) -> Result<Vec<MaskExport>, CliError> {
    let loaded = load_policy(seg, None)?;
    let decoder = loaded
        .decoder
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{} holds no segmentation decoder", seg.display())))?;
    let cfg = &loaded.cfg;
    let data = SegDataset::collect(&cfg.sim, &cfg.bev.grid, frames, cfg.seg.frame_stride, cfg.seg.empty_keep, seed)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds = predict(&loaded.store, loaded.block()?, decoder, &data, &idx, cfg.seg.batch_size);
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(frames);
    for (i, (pred, frame)) in preds.iter().zip(&data.frames).enumerate() {
        let file = format!("frame_{i:03}.ppm");
        export_mask_image(pred, &frame.mask, data.nx, data.ny, &out_dir.join(&file))
            .map_err(|e| CliError::Other(format!("{}: {e}", out_dir.join(&file).display())))?;
        rows.push(MaskExport { frame: i, file, vehicle_iou: segdecoder::iou(pred, &frame.mask, VEHICLE) });
    }
    let mut w = csv::Writer::from_path(out_dir.join("manifest.csv")).map_err(|e| CliError::Other(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.flush()?;
    Ok(rows)
}

/// Finite-difference check of every tape op plus a tiny end-to-end SC Block.
pub fn cmd_gradcheck(seed: u64, fault: Option<OpKind>) -> Vec<GradcheckReport> {
    let mut reports = run_op_suite(seed, fault);
    reports.push(sc_block_gradcheck(seed));
    reports
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: &'static str,
    pub points: usize,
    pub cells: usize,
    pub channels: usize,
    pub median_s: f64,
    pub points_per_s: f64,
}

fn median_time(repeats: usize, mut f: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Median wall times of the splat scatter-add at each point count (fixed
/// 80×80 grid, 32 channels) and of a full SC Block forward at the configured sizes.
pub fn cmd_bench(cfg: &RunConfig, sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cells, channels) = (80 * 80, 32);
    let mut rows = Vec::new();
    for &n in sizes {
        let voxel: Vec<Option<usize>> = (0..n).map(|_| Some(rng.gen_range(0..cells))).collect();
        let plan = Rc::new(ScatterPlan::new(&voxel, &[1, channels, 80, 80]));
        let values = Tensor::new(&[n, channels], (0..n * channels).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let t = median_time(repeats, || {
            std::hint::black_box(plan.forward(&values));
        });
        rows.push(BenchRow { kind: "splat", points: n, cells, channels, median_s: t, points_per_s: n as f64 / t });
    }
    let rig = CameraRig::standard(RigKind::Surround6x60, cfg.sim.image_width, cfg.sim.image_height, Mount::default())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut store = ParamStore::<f32>::new();
    let block = ScBlock::new(&mut store, "image", &cfg.bev, &rig, &mut rng)?;
    let [c, k, h, w] = [6, 3, cfg.sim.image_height, cfg.sim.image_width];
    let images = Tensor::new(&[1, c, k, h, w], (0..c * k * h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect());
    let t = median_time(repeats, || {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        std::hint::black_box(block.forward(&mut tape, &mut Bind::new(&store), x));
    });
    let points = block.geometry().points_per_batch_item();
    let grid = block.geometry().grid();
    rows.push(BenchRow {
        kind: "sc_block_forward",
        points,
        cells: grid.nx() * grid.ny(),
        channels: cfg.bev.context_channels,
        median_s: t,
        points_per_s: points as f64 / t,
    });
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], out: impl Write) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Drives one episode and writes its line-delimited trace. Without a
/// checkpoint the ego brakes in place.
pub fn cmd_trace(
    checkpoint: Option<&Path>,
    cfg: &RunConfig,
    map: MapKey,
    congestion: Congestion,
    seed: u64,
    out: &Path,
) -> Result<usize, CliError> {
    let loaded = checkpoint.map(|p| load_policy(p, None)).transpose()?;
    let sim = loaded.as_ref().map_or_else(|| cfg.sim.clone(), |l| l.cfg.sim.clone());
    let mut world = World::new(sim).map_err(|e| CliError::Config(e.to_string()))?;
    let mut agent: Box<dyn Agent + '_> = match &loaded {
        Some(l) => Box::new(PolicyAgent::new(&l.net, &l.store)),
        None => Box::new(ConstantAgent(Action::new(-1.0, 0.0))),
    };
    let r = run_episode(agent.as_mut(), &mut world, map, congestion, seed)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    world.write_trace(&mut file)?;
    file.flush()?;
    Ok(r.steps)
}
