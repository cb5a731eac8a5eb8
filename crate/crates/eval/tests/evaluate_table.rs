use bevdrive::autodiff::ParamStore;
use bevdrive::bev::BevConfig;
use bevdrive::geometry::{BevGridSpec, RigKind};
use bevdrive::policy::{ExtractorKind, NetConfig, PolicyNet};
use bevdrive::simworld::{Action, Congestion, SimConfig};
use eval::{compare_agents, evaluate, read_csv, write_csv, ConstantAgent, EvalAgent, MapId, PolicyAgent, ScenarioSpec};

fn sim(rig: RigKind) -> SimConfig {
    SimConfig { image_height: 8, image_width: 24, rig, ..SimConfig::default() }
}

fn small_net(store: &mut ParamStore<f32>) -> PolicyNet {
    let bev = BevConfig {
        depth_bins: 4,
        downsample: 4,
        grid: BevGridSpec::new(16.0, 16.0, 2.0).unwrap(),
        context_channels: 4,
        latent_dim: 8,
        image_channels: vec![4, 4],
        bev_channels: vec![8],
        ..BevConfig::default()
    };
    let cfg = NetConfig { extractor: ExtractorKind::Bev, gru_hidden: 8, ..NetConfig::default() };
    PolicyNet::new(store, &cfg, &bev, &sim(RigKind::Surround6x60).rig().unwrap(), 3).unwrap()
}

fn table() -> Vec<eval::MetricRecord> {
    let mut store = ParamStore::new();
    let net = small_net(&mut store);
    let mut agents = vec![
        EvalAgent { id: "net".into(), sim: sim(RigKind::Surround6x60), agent: Box::new(PolicyAgent::new(&net, &store)) },
        EvalAgent { id: "coast".into(), sim: sim(RigKind::Front3x60), agent: Box::new(ConstantAgent(Action::new(0.3, 0.0))) },
    ];
    let scenarios = ScenarioSpec::grid(&[2, 5], &[Congestion::Low, Congestion::High], 2, 500).unwrap();
    evaluate(&mut agents, &scenarios).unwrap()
}

#[test]
fn two_agents_fill_the_table_with_average_rows() {
    let rows = table();
    assert_eq!(rows.len(), 2 * (4 + 2));
    for agent in ["net", "coast"] {
        let avg: Vec<_> = rows.iter().filter(|r| r.agent == agent && r.map_id == MapId::Avg).collect();
        assert_eq!(avg.len(), 2);
        assert!(avg.iter().all(|r| r.episodes == 4 && r.seed_base == 500));
    }
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.collision_rate));
        assert!((-1.0..=1.0).contains(&r.similarity));
        assert!(r.timesteps >= 0.0 && r.timesteps <= 128.0);
    }
}

#[test]
fn table_is_reproducible_and_survives_csv() {
    let rows = table();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    write_csv(&rows, &mut a).unwrap();
    write_csv(&table(), &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(read_csv(&a[..]).unwrap(), rows);
}

#[test]
fn comparison_covers_both_congestion_levels() {
    let report = compare_agents(&table(), "net", "coast").unwrap();
    assert_eq!(report.by_congestion.len(), 2);
    let low = report.get(Congestion::Low).unwrap();
    assert!((low.deltas.timesteps - (low.candidate.timesteps - low.baseline.timesteps)).abs() < 1e-12);
    assert!(low.reference.is_some());
    assert!(!report.summary().is_empty());
}
