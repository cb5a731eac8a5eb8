//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line straight to
//! stderr (bypassing output capture) before asserting.
//!
//! The directional ablation and the segmentation check share one pair of
//! 300k-step training runs; expect the whole file to take about an hour.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bevdrive::autodiff::{gradcheck::run_op_suite, Accumulation, ParamStore, Tape, Tensor};
use bevdrive::bev::{lift_from_logits, sc_block_gradcheck, splat, BaselineEncoder, ScBlock, SplatGeometry};
use bevdrive::geometry::{BevGridSpec, CameraIntrinsics, CameraRig, DepthBins, Mount, RigCamera, RigKind, RigidTransform};
use bevdrive::nn::Bind;
use bevdrive::policy::{compute_gae, random_policy_return, Trainer};
use bevdrive::simworld::{reward_branch, reward_fn, Action, Congestion, MapKey, Observation, RewardBranch, RewardInputs, RewardParams, World};
use bevdrive_cli::commands::{cmd_eval, cmd_export_masks, cmd_train, cmd_train_seg, load_policy};
use bevdrive_cli::{AgentKind, Checkpoint, EvalSection, RunConfig};
use eval::{compare_agents, reference_points, run_episode, Agent, EvalError};

fn report(criterion: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {verdict} {criterion}: {detail}");
}

// ---------------------------------------------------------------- gradients

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let mut reports = run_op_suite(0, None);
    reports.push(sc_block_gradcheck(0));
    let elapsed = start.elapsed();
    let worst = reports.iter().max_by(|a, b| a.max_rel_err().total_cmp(&b.max_rel_err())).unwrap();
    let failing: Vec<String> =
        reports.iter().filter(|r| r.max_rel_err() >= 1e-5).map(|r| format!("{} {:.2e}", r.name, r.max_rel_err())).collect();
    let pass = failing.is_empty() && elapsed < Duration::from_secs(60);
    report(
        "gradient correctness",
        pass,
        &format!(
            "{} checks, worst {} {:.2e} (< 1e-5), {:.2}s (< 60s)",
            reports.len(),
            worst.name,
            worst.max_rel_err(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(failing.is_empty(), "failing checks: {failing:?}");
    assert!(elapsed < Duration::from_secs(60));
}

// ------------------------------------------------------------------- splat

/// Random rig of 1–3 cameras with feature maps up to 8×8.
fn random_rig(rng: &mut ChaCha8Rng) -> (CameraRig<f64>, usize) {
    let downsample = [1, 2, 4][rng.gen_range(0..3)];
    let (fh, fw) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
    let cams = (0..rng.gen_range(1..=3))
        .map(|_| {
            let (w, h) = (fw * downsample, fh * downsample);
            let intr = CameraIntrinsics::new(
                rng.gen_range(2.0..20.0),
                rng.gen_range(2.0..20.0),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                w,
                h,
            )
            .unwrap();
            let pos = [rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.0)];
            let extr = RigidTransform::camera_mount(rng.gen_range(-3.2..3.2), rng.gen_range(-0.3..0.3), pos);
            RigCamera { intrinsics: intr, extrinsics: extr }
        })
        .collect();
    (CameraRig::new(cams, RigKind::Front3x60).unwrap(), downsample)
}

/// Per-point accumulation written out directly from the camera model.
fn brute_force_grid(
    rig: &CameraRig<f64>,
    depths: &[f64],
    downsample: usize,
    grid: &BevGridSpec,
    batch: usize,
    alpha: &[f64],
    context: &[f64],
    channels: usize,
) -> Vec<f64> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut out = vec![0.0; batch * channels * nx * ny];
    let intr0 = &rig.cameras[0].intrinsics;
    let (fh, fw) = (intr0.height / downsample, intr0.width / downsample);
    let d_count = depths.len();
    for b in 0..batch {
        for (c, cam) in rig.cameras.iter().enumerate() {
            let n = b * rig.len() + c;
            let k = &cam.intrinsics;
            let r = &cam.extrinsics.rotation;
            let t = &cam.extrinsics.translation;
            for (di, &d) in depths.iter().enumerate() {
                for h in 0..fh {
                    for w in 0..fw {
                        let u = (w as f64 + 0.5) * downsample as f64;
                        let v = (h as f64 + 0.5) * downsample as f64;
                        let p = [(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d];
                        let x = r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0];
                        let y = r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1];
                        let i = ((x + grid.x_extent / 2.0) / grid.cell).floor();
                        let j = ((y + grid.y_extent / 2.0) / grid.cell).floor();
                        if i < 0.0 || j < 0.0 || i as usize >= nx || j as usize >= ny {
                            continue;
                        }
                        let cell = i as usize * ny + j as usize;
                        let a = alpha[((n * d_count + di) * fh + h) * fw + w];
                        for ch in 0..channels {
                            let ctx = context[((n * channels + ch) * fh + h) * fw + w];
                            out[(b * channels + ch) * nx * ny + cell] += a * ctx;
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn splat_matches_brute_force_accumulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut kept_points = 0usize;
    let mut mismatches = Vec::new();
    for instance in 0..100 {
        let (rig, downsample) = random_rig(&mut rng);
        let mut depths: Vec<f64> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0.5..12.0)).collect();
        depths.sort_by(f64::total_cmp);
        depths.dedup();
        let bins = DepthBins::new(depths.clone()).unwrap();
        let cell = [0.5, 1.0, 2.0][rng.gen_range(0..3)];
        let grid = BevGridSpec::new(cell * rng.gen_range(2..24) as f64, cell * rng.gen_range(2..24) as f64, cell).unwrap();
        let geometry = SplatGeometry::new(&rig, &bins, downsample, grid).unwrap();
        kept_points += geometry.cells().iter().flatten().count();

        let batch = rng.gen_range(1..=2);
        let channels = rng.gen_range(1..=3);
        let intr = &rig.cameras[0].intrinsics;
        let (fh, fw) = (intr.height / downsample, intr.width / downsample);
        let n = batch * rig.len();
        let mut t = Tape::<f64>::new();
        let logits = t.constant(&[n, depths.len(), fh, fw], (0..n * depths.len() * fh * fw).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let context = t.constant(&[n, channels, fh, fw], (0..n * channels * fh * fw).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let lift = lift_from_logits(&mut t, logits, context);
        let g = splat(&mut t, lift, &geometry, batch);
        let expected =
            brute_force_grid(&rig, &depths, downsample, &grid, batch, t.data(lift.alpha), t.data(lift.context), channels);
        if t.data(g) != expected.as_slice() {
            mismatches.push(instance);
        }
    }
    report(
        "splat oracle",
        mismatches.is_empty(),
        &format!("100 instances, {kept_points} in-grid points, exact mismatches: {mismatches:?}"),
    );
    assert!(kept_points > 1000, "instances should exercise the grid");
    assert!(mismatches.is_empty());
}

// ------------------------------------------------------------ permutation

#[test]
fn camera_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RunConfig::desk().bev;
    let rig = CameraRig::standard(RigKind::Surround6x60, 48, 16, Mount { pitch_down_deg: 8.0, ..Mount::default() }).unwrap();
    let mut store = ParamStore::<f64>::new();
    let block = ScBlock::new(&mut store, "bev", &cfg, &rig, &mut rng).unwrap();
    assert_eq!(block.geometry().cells().len(), block.geometry().points_per_batch_item());
    let base = BaselineEncoder::new(&mut store, "base", &cfg, &rig, &mut rng).unwrap();
    let order = [4, 2, 0, 5, 3, 1];
    let shuffled = block.with_rig(&rig.permuted(&order)).unwrap().with_accumulation(Accumulation::InputOrder);

    let plane = 3 * 16 * 48;
    let images = Tensor::new(&[2, 6, 3, 16, 48], (0..2 * 6 * plane).map(|_| rng.gen::<f64>()).collect());
    let mut permuted = Vec::with_capacity(images.data.len());
    for b in 0..2 {
        for &c in &order {
            let start = (b * 6 + c) * plane;
            permuted.extend_from_slice(&images.data[start..start + plane]);
        }
    }
    let permuted = Tensor::new(&images.shape, permuted);

    let bev = |blk: &ScBlock, x: &Tensor<f64>| {
        let mut t = Tape::new();
        let mut p = Bind::new(&store);
        let v = t.leaf(x.clone());
        let (z, g) = blk.forward(&mut t, &mut p, v);
        (t.value(z).clone(), t.value(g).clone())
    };
    let baseline = |x: &Tensor<f64>| {
        let mut t = Tape::new();
        let mut p = Bind::new(&store);
        let v = t.leaf(x.clone());
        let z = base.forward(&mut t, &mut p, v);
        t.value(z).clone()
    };
    let (z0, g0) = bev(&block, &images);
    let (z1, g1) = bev(&shuffled, &permuted);
    let (grid_gap, latent_gap) = (g0.max_abs_diff(&g1), z0.max_abs_diff(&z1));
    let base_gap = baseline(&images).max_abs_diff(&baseline(&permuted));
    let grid_mass: f64 = g0.data.iter().map(|v| v.abs()).sum();
    let pass = grid_gap < 1e-9 && latent_gap < 1e-9 && base_gap > 1e-6;
    report(
        "permutation invariance",
        pass,
        &format!("grid {grid_gap:.2e}, latent {latent_gap:.2e} (< 1e-9); baseline encoder changes by {base_gap:.2e}"),
    );
    assert!(grid_mass > 0.0, "the grid must not be trivially empty");
    assert!(grid_gap < 1e-9 && latent_gap < 1e-9);
    assert!(base_gap > 1e-6);
}

// ------------------------------------------------------------------ reward

#[test]
fn reward_table() {
    let std = RewardParams::default();
    let (pi, half_pi) = (std::f64::consts::PI, std::f64::consts::FRAC_PI_2);
    let p = |k_c: f64, v_m: f64, floor: f64| RewardParams { k_c, v_m, denom_floor: floor, ..std };
    // (collided, speed, heading, position, waypoint, params, expected, branch)
    let cases: [(bool, f64, f64, [f64; 2], [f64; 2], RewardParams, f64, RewardBranch); 20] = [
        (true, 5.0, 0.0, [0.0, 0.0], [4.0, 0.0], std, -100.0, RewardBranch::Collision),
        (true, 12.0, 0.0, [0.0, 0.0], [4.0, 0.0], std, -100.0, RewardBranch::Collision),
        (true, 0.0, 1.0, [3.0, 2.0], [3.0, 2.0], p(37.5, 8.0, 0.25), -37.5, RewardBranch::Collision),
        (false, 10.0, 0.0, [0.0, 0.0], [4.0, 0.0], std, -2.0, RewardBranch::Overspeed),
        (false, 8.5, 2.0, [1.0, 1.0], [9.0, 9.0], std, -0.5, RewardBranch::Overspeed),
        (false, 15.0, 0.0, [0.0, 0.0], [4.0, 0.0], p(100.0, 12.0, 0.25), -3.0, RewardBranch::Overspeed),
        (false, 0.0, 0.7, [0.0, 0.0], [4.0, 0.0], std, 0.0, RewardBranch::Progress),
        (false, 8.0, 0.0, [0.0, 0.0], [4.0, 0.0], std, 2.0, RewardBranch::Progress),
        (false, 8.0, 0.0, [0.0, 0.0], [0.0, 4.0], std, 0.0, RewardBranch::Progress),
        (false, 4.0, 0.0, [0.0, 0.0], [3.0, 4.0], std, 0.384, RewardBranch::Progress),
        (false, 4.0, pi, [0.0, 0.0], [3.0, 4.0], std, -0.384, RewardBranch::Progress),
        (false, 2.0, 0.0, [0.0, 0.0], [0.3, 0.0], std, 32.0, RewardBranch::Progress),
        (false, 2.0, 0.0, [5.0, 5.0], [5.0, 5.0], std, 0.0, RewardBranch::Progress),
        (false, 1.0, 0.0, [0.0, 0.0], [0.5, 0.0], std, 16.0, RewardBranch::Progress),
        (false, 6.0, half_pi, [1.0, 1.0], [1.0, 3.0], std, 6.0, RewardBranch::Progress),
        (false, 6.0, -half_pi, [1.0, 1.0], [1.0, 3.0], std, -6.0, RewardBranch::Progress),
        (false, 3.0, 0.0, [2.0, -1.0], [-2.0, 2.0], std, -0.384, RewardBranch::Progress),
        (false, 3.0, pi, [2.0, -1.0], [-2.0, 2.0], std, 0.384, RewardBranch::Progress),
        (false, 7.999, 0.0, [0.0, 0.0], [10.0, 0.0], std, 0.31996, RewardBranch::Progress),
        (false, 2.0, 0.0, [0.0, 0.0], [0.5, 0.0], p(100.0, 8.0, 1.0), 8.0, RewardBranch::Progress),
    ];
    let mut worst: f64 = 0.0;
    let mut wrong_branch = Vec::new();
    for (i, &(collided, speed, heading, position, waypoint, params, expected, branch)) in cases.iter().enumerate() {
        let inputs = RewardInputs { collided, speed, heading, position, waypoint };
        worst = worst.max((reward_fn(&inputs, &params) - expected).abs());
        if reward_branch(&inputs, &params) != branch {
            wrong_branch.push(i);
        }
    }
    let pass = worst <= 1e-12 && wrong_branch.is_empty();
    report("reward conformance", pass, &format!("20 cases, max abs error {worst:.2e} (<= 1e-12), branch mismatches {wrong_branch:?}"));
    assert!(worst <= 1e-12);
    assert!(wrong_branch.is_empty());
}

// ---------------------------------------------------------- episode rules

/// Uniform random actions; with `forward` the throttle is never negative,
/// which reaches traffic far more often.
struct UniformRandom {
    rng: ChaCha8Rng,
    forward: bool,
}

impl Agent for UniformRandom {
    fn act(&mut self, _: &Observation) -> Result<Action, EvalError> {
        let accel = if self.forward { self.rng.gen_range(0.0..=1.0) } else { self.rng.gen_range(-1.0..=1.0) };
        Ok(Action::new(accel, self.rng.gen_range(-1.0..=1.0)))
    }
}

#[test]
fn episode_protocol() {
    let sim = RunConfig::desk().sim;
    let mut world = World::new(sim).unwrap();
    let mut agent = UniformRandom { rng: ChaCha8Rng::seed_from_u64(77), forward: false };
    let (mut too_long, mut rule_broken, mut collisions) = (0, 0, 0);
    for e in 0..1000u64 {
        let map = MapKey::Town(1 + (e % 7) as u8);
        let congestion = if e % 2 == 0 { Congestion::Low } else { Congestion::High };
        agent.forward = e % 4 >= 2;
        let r = run_episode(&mut agent, &mut world, map, congestion, 50_000 + e).unwrap();
        too_long += usize::from(r.steps > 128);
        rule_broken += usize::from((r.steps == 128) == r.collided);
        collisions += usize::from(r.collided);
    }
    let pass = too_long == 0 && rule_broken == 0;
    report(
        "episode protocol",
        pass,
        &format!("1000 episodes, {collisions} collisions, over-long {too_long}, 128-step/no-collision violations {rule_broken}"),
    );
    assert!(collisions >= 50 && collisions <= 950, "both outcomes should occur often");
    assert_eq!(too_long, 0);
    assert_eq!(rule_broken, 0);
}

// ---------------------------------------------------------- learning signal

#[test]
fn learning_signal_on_the_smoke_map() {
    let mut cfg = RunConfig::desk().for_agent(AgentKind::Bev6);
    cfg.sim.map = MapKey::SMOKE;
    cfg.ppo.total_steps = 100_000;
    let random = random_policy_return(&cfg.sim, 100, 12_345).unwrap();
    let mut outcomes = Vec::new();
    for seed in [1, 2, 3] {
        let start = Instant::now();
        let mut tr = Trainer::new(&cfg.sim, &cfg.net, &cfg.bev, &cfg.ppo, cfg.run.workers, seed).unwrap();
        let (mut sum, mut episodes) = (0.0, 0usize);
        while tr.env_steps < cfg.ppo.total_steps {
            let rec = tr.round().unwrap();
            if rec.env_steps > cfg.ppo.total_steps * 3 / 4 {
                if let Some(m) = rec.mean_return {
                    sum += m * rec.episodes as f64;
                    episodes += rec.episodes;
                }
            }
        }
        let final_quartile = sum / episodes.max(1) as f64;
        outcomes.push((seed, final_quartile, start.elapsed()));
    }
    let pass = outcomes.iter().all(|&(_, r, t)| r >= 3.0 * random && t < Duration::from_secs(7200));
    let detail: Vec<String> =
        outcomes.iter().map(|(s, r, t)| format!("seed {s}: {r:.1} in {:.0}s", t.as_secs_f64())).collect();
    report(
        "learning signal",
        pass,
        &format!("random {random:.1}, need >= {:.1}; {}", 3.0 * random, detail.join(", ")),
    );
    assert!(pass);
}

// ------------------------------------------------ ablation and segmentation

const ABLATION_STEPS: u64 = 300_000;
const ABLATION_SEED: u64 = 0;

struct Ablation {
    _dir: tempfile::TempDir,
    bev6: PathBuf,
    table: Vec<eval::MetricRecord>,
}

/// BEV-6 and the three-front-camera baseline, trained with the same budget
/// and seed on map 3 at low congestion, then evaluated on maps 1–7.
fn ablation() -> &'static Ablation {
    static RUN: OnceLock<Ablation> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::desk();
        cfg.sim.map = MapKey::Town(3);
        cfg.sim.congestion = Congestion::Low;
        cfg.ppo.total_steps = ABLATION_STEPS;
        cfg.run.seed = ABLATION_SEED;
        let mut checkpoints = Vec::new();
        for agent in [AgentKind::Bev6, AgentKind::Drl] {
            let out = cmd_train(&cfg, agent, None, &dir.path().join(agent.name()), &mut |_| {}).unwrap();
            checkpoints.push(out.checkpoint);
        }
        let section = EvalSection {
            maps: (1..=7).collect(),
            congestion: vec![Congestion::Low],
            episodes: 50,
            seed_base: 10_000,
        };
        let table = cmd_eval(&checkpoints, &section, &dir.path().join("ablation.csv")).unwrap();
        Ablation { bev6: checkpoints[0].clone(), _dir: dir, table }
    })
}

#[test]
fn directional_ablation() {
    let run = ablation();
    let cmp = compare_agents(&run.table, "bev6", "drl").unwrap();
    let low = cmp.get(Congestion::Low).unwrap();
    let (paper_drl, paper_bev6) = reference_points(Congestion::Low);
    let pass = low.candidate.collision_rate < low.baseline.collision_rate && low.candidate.timesteps > low.baseline.timesteps;
    report(
        "directional ablation",
        pass,
        &format!(
            "collision bev6 {:.3} vs drl {:.3}, timesteps {:.2} vs {:.2} (full-scale reference: collision {:.2} -> {:.2}, timesteps {:.2} -> {:.2})",
            low.candidate.collision_rate,
            low.baseline.collision_rate,
            low.candidate.timesteps,
            low.baseline.timesteps,
            paper_drl[0],
            paper_bev6[0],
            paper_drl[2],
            paper_bev6[2]
        ),
    );
    assert!(low.candidate.collision_rate < low.baseline.collision_rate, "{}", cmp.summary());
    assert!(low.candidate.timesteps > low.baseline.timesteps, "{}", cmp.summary());
}

#[test]
fn segmentation_interpretability() {
    let run = ablation();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("frames.bin");
    let seed = 31;
    let frozen = cmd_train_seg(&run.bev6, None, true, Some(&data), &dir.path().join("frozen.bevd"), seed).unwrap();
    let tuned_path = dir.path().join("tuned.bevd");
    let tuned = cmd_train_seg(&run.bev6, None, false, Some(&data), &tuned_path, seed).unwrap();

    let a = cmd_export_masks(&tuned_path, 8, &dir.path().join("a"), 99).unwrap();
    let b = cmd_export_masks(&tuned_path, 8, &dir.path().join("b"), 99).unwrap();
    let stable = a == b
        && a.iter().all(|m| {
            std::fs::read(dir.path().join("a").join(&m.file)).unwrap() == std::fs::read(dir.path().join("b").join(&m.file)).unwrap()
        });

    let (f, t) = (frozen.vehicle_iou(), tuned.vehicle_iou());
    let pass = t >= 0.40 && t >= f && stable;
    report(
        "segmentation interpretability",
        pass,
        &format!("held-out vehicle IoU fine-tuned {t:.3} (>= 0.40), frozen probe {f:.3}; pixmaps byte-stable: {stable}"),
    );
    assert!(t >= 0.40, "fine-tuned vehicle IoU {t}");
    assert!(t >= f, "fine-tuned {t} below frozen {f}");
    assert!(stable);
}

// ------------------------------------------------------------- determinism

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk();
    cfg.ppo.total_steps = 1024;
    cfg.run.workers = 1;
    let run = cmd_train(&cfg, AgentKind::Bev6, None, &dir.path().join("run"), &mut |_| {}).unwrap();
    let section = EvalSection { maps: vec![1, 3, 6], congestion: vec![Congestion::Low, Congestion::High], episodes: 3, seed_base: 500 };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    cmd_eval(&[run.checkpoint.clone()], &section, &a).unwrap();
    cmd_eval(&[run.checkpoint.clone()], &section, &b).unwrap();
    let csv_identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let bytes = std::fs::read(&run.checkpoint).unwrap();
    let ck = Checkpoint::load(&run.checkpoint).unwrap();
    let copy = dir.path().join("copy.bevd");
    ck.save(&copy).unwrap();
    let loaded = load_policy(&run.checkpoint, None).unwrap();
    let rebuilt = Checkpoint::from_store(ck.meta.clone(), ck.config_hash, &loaded.store);
    let round_trip = ck.to_bytes() == bytes && std::fs::read(&copy).unwrap() == bytes && rebuilt.to_bytes() == bytes;

    report(
        "determinism",
        csv_identical && round_trip,
        &format!("single-worker eval CSVs byte-identical: {csv_identical}; checkpoint save/load bit-exact: {round_trip}"),
    );
    assert!(csv_identical);
    assert!(round_trip);
}

// --------------------------------------------------------------------- GAE

/// `Σ_k (γλ)^k δ_{t+k}` with the sum cut after a terminal step.
fn discounted_sum(r: &[f64], v: &[f64], done: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let next_value = |t: usize| if t + 1 < n { v[t + 1] } else { bootstrap };
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for k in t..n {
                let delta = r[k] + if done[k] { 0.0 } else { gamma * next_value(k) } - v[k];
                acc += (gamma * lambda).powi((k - t) as i32) * delta;
                if done[k] {
                    break;
                }
            }
            acc
        })
        .collect()
}

#[test]
fn gae_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=16);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let done: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
        let boot = rng.gen_range(-10.0..10.0);
        let (gamma, lambda) = (rng.gen_range(0.8..1.0), rng.gen_range(0.0..=1.0));
        let (adv, _) = compute_gae(&r, &v, &done, boot, gamma, lambda);
        for (a, b) in adv.iter().zip(discounted_sum(&r, &v, &done, boot, gamma, lambda)) {
            worst = worst.max((a - b).abs());
        }
    }
    report("gae oracle", worst < 1e-9, &format!("100 buffers, max abs error {worst:.2e} (< 1e-9)"));
    assert!(worst < 1e-9);
}
