use bevdrive::autodiff::ParamStore;
use bevdrive::bev::BevConfig;
use bevdrive::geometry::{BevGridSpec, RigKind};
use bevdrive::policy::{ExtractorKind, NetConfig, PolicyNet, IMAGE_PREFIX};
use bevdrive::simworld::{Congestion, MapKey, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segdecoder::{predict, train_decoder, SegConfig, SegDataset, SegDecoder, SEG_PREFIX};

fn sim() -> SimConfig {
    SimConfig {
        map: MapKey::Town(3),
        congestion: Congestion::High,
        image_height: 8,
        image_width: 24,
        rig: RigKind::Surround6x60,
        ..SimConfig::default()
    }
}

fn bev() -> BevConfig {
    BevConfig {
        depth_min: 2.0,
        depth_max: 18.0,
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

fn setup() -> (ParamStore<f32>, PolicyNet, SegDecoder, SegDataset, SegConfig) {
    let mut store = ParamStore::new();
    let net_cfg = NetConfig { extractor: ExtractorKind::Bev, gru_hidden: 8, ..NetConfig::default() };
    let net = PolicyNet::new(&mut store, &net_cfg, &bev(), &sim().rig().unwrap(), 1).unwrap();
    let cfg = SegConfig { channels: [4, 8, 8], epochs: 2, batch_size: 4, frames: 24, ..SegConfig::default() };
    let dec = SegDecoder::new(&mut store, SEG_PREFIX, 4, cfg.channels, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let data = SegDataset::collect(&sim(), &bev().grid, cfg.frames, 2, 1.0, 7).unwrap();
    (store, net, dec, data, cfg)
}

fn image_params(store: &ParamStore<f32>) -> Vec<Vec<f32>> {
    store.iter().filter(|(n, _)| n.starts_with(IMAGE_PREFIX)).map(|(_, t)| t.data.clone()).collect()
}

#[test]
fn probe_keeps_the_extractor_and_fine_tuning_moves_it() {
    let (store, net, dec, data, cfg) = setup();
    let block = net.extractor().as_bev().unwrap();
    let before = image_params(&store);

    let mut probe = store.clone();
    let r = train_decoder(&mut probe, block, &dec, &data, &cfg, true, 3).unwrap();
    assert!(r.frozen);
    assert_eq!(image_params(&probe), before);
    assert_eq!(r.curve.len(), cfg.epochs);
    assert!(r.iou.iter().all(|v| (0.0..=1.0).contains(v)));

    let mut tuned = store.clone();
    let r = train_decoder(&mut tuned, block, &dec, &data, &cfg, false, 3).unwrap();
    assert!(!r.frozen);
    assert_ne!(image_params(&tuned), before);
    assert!(r.curve.iter().all(|e| e.train.is_finite() && e.heldout.is_finite()));
}

#[test]
fn training_lowers_the_loss_and_predictions_cover_the_grid() {
    let (mut store, net, dec, data, cfg) = setup();
    let block = net.extractor().as_bev().unwrap().clone();
    let cfg = SegConfig { epochs: 4, ..cfg };
    let r = train_decoder(&mut store, &block, &dec, &data, &cfg, false, 3).unwrap();
    assert!(r.curve.last().unwrap().train < r.curve[0].train, "{:?}", r.curve);
    let masks = predict(&store, &block, &dec, &data, &r.heldout, 4);
    assert_eq!(masks.len(), r.heldout.len());
    assert!(masks.iter().all(|m| m.len() == data.nx * data.ny && m.iter().all(|&c| c < 3)));
}

#[test]
fn dataset_survives_a_file_round_trip() {
    let (.., data, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frames.bin");
    data.write(&path).unwrap();
    let back = SegDataset::read(&path).unwrap();
    assert_eq!(back.len(), data.len());
    assert_eq!(back.targets(&[0, 1]), data.targets(&[0, 1]));
    assert_eq!(back.images(&[2]).data, data.images(&[2]).data);
}
