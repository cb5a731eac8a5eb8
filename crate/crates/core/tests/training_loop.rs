use bevdrive::bev::BevConfig;
use bevdrive::geometry::{BevGridSpec, RigKind};
use bevdrive::policy::{random_policy_return, train, ExtractorKind, NetConfig, ObsBatch, PpoConfig, Trainer};
use bevdrive::simworld::{Action, MapKey, SimConfig, World};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sim() -> SimConfig {
    SimConfig { map: MapKey::SMOKE, image_height: 8, image_width: 24, rig: RigKind::Surround6x60, ..SimConfig::default() }
}

fn bev() -> BevConfig {
    BevConfig {
        depth_bins: 4,
        downsample: 4,
        grid: BevGridSpec::new(16.0, 16.0, 2.0).unwrap(),
        context_channels: 4,
        latent_dim: 8,
        image_channels: vec![4, 4],
        bev_channels: vec![8],
        ..BevConfig::default()
    }
}

fn ppo(total_steps: u64) -> PpoConfig {
    PpoConfig { horizon: 32, chunk_len: 8, minibatches: 4, epochs: 2, total_steps, ..PpoConfig::default() }
}

fn trainer(seed: u64, total_steps: u64) -> Trainer {
    let net = NetConfig { extractor: ExtractorKind::Bev, gru_hidden: 16, ..NetConfig::default() };
    Trainer::new(&sim(), &net, &bev(), &ppo(total_steps), 2, seed).unwrap()
}

fn strip_time(mut log: Vec<bevdrive::policy::LogRecord>) -> Vec<bevdrive::policy::LogRecord> {
    log.iter_mut().for_each(|r| r.wall_time_s = 0.0);
    log
}

#[test]
fn same_seed_same_run() {
    let mut a = trainer(4, 192);
    let mut b = trainer(4, 192);
    let la = strip_time(train(&mut a, &mut |_, _| Ok(())).unwrap());
    let lb = strip_time(train(&mut b, &mut |_, _| Ok(())).unwrap());
    assert_eq!(la.len(), 3);
    assert_eq!(la, lb);
    assert_eq!(a.store.optimizer_state(), b.store.optimizer_state());
    assert_eq!(a.env_steps, 192);
}

#[test]
fn callback_sees_every_round_and_counters_grow() {
    let mut tr = trainer(1, 128);
    let mut seen = Vec::new();
    train(&mut tr, &mut |t, rec| {
        seen.push((t.update, rec.env_steps));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![(1, 64), (2, 128)]);
}

#[test]
fn trained_policy_drives_within_action_bounds() {
    let mut tr = trainer(2, 64);
    train(&mut tr, &mut |_, _| Ok(())).unwrap();
    let mut world = World::new(sim()).unwrap();
    let mut obs = world.reset(9, MapKey::SMOKE, sim().congestion).unwrap();
    let mut hidden = tr.net.initial_hidden(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut steps = 0;
    loop {
        let out = tr.net.act(&tr.store, &ObsBatch::<f32>::from_observations(&[&obs]), &hidden, &mut rng, true).unwrap();
        let [accel, steer] = out.actions[0];
        assert!((-1.0..=1.0).contains(&accel) && (-1.0..=1.0).contains(&steer));
        hidden = out.hidden;
        let step = world.step(Action::new(accel, steer)).unwrap();
        steps += 1;
        if step.done {
            break;
        }
        obs = step.observation;
    }
    assert!(steps <= 128);
}

#[test]
fn random_baseline_is_reproducible() {
    let a = random_policy_return(&sim(), 5, 3).unwrap();
    assert_eq!(a, random_policy_return(&sim(), 5, 3).unwrap());
    assert!(a.is_finite());
}

/// Episode-weighted mean return of the rounds whose step counter falls in `range`.
fn mean_return_between(log: &[bevdrive::policy::LogRecord], range: std::ops::RangeInclusive<u64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in log.iter().filter(|r| range.contains(&r.env_steps)) {
        if let Some(m) = r.mean_return {
            sum += m * r.episodes as f64;
            n += r.episodes;
        }
    }
    sum / n.max(1) as f64
}

#[test]
fn smoke_run_return_rises_from_first_to_last_quartile() {
    let sim = SimConfig { image_height: 16, image_width: 48, camera_pitch_deg: 8.0, ..sim() };
    let bev = BevConfig {
        depth_min: 2.0,
        depth_max: 26.0,
        depth_bins: 8,
        grid: BevGridSpec::new(24.0, 24.0, 1.5).unwrap(),
        context_channels: 8,
        latent_dim: 32,
        image_channels: vec![8, 16],
        bev_channels: vec![16, 32],
        ..bev()
    };
    let net = NetConfig { extractor: ExtractorKind::Bev, gru_hidden: 64, ..NetConfig::default() };
    let total = 10_240;
    let ppo = PpoConfig { total_steps: total, ..PpoConfig::default() };
    let mut tr = Trainer::new(&sim, &net, &bev, &ppo, 4, 11).unwrap();
    let log = train(&mut tr, &mut |_, _| Ok(())).unwrap();
    let first = mean_return_between(&log, 1..=total / 4);
    let last = mean_return_between(&log, total * 3 / 4 + 1..=total);
    assert!(last > first, "first quartile {first:.2}, last quartile {last:.2}");
}
