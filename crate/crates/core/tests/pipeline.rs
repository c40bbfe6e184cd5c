use csfm_core::data::{
    self, assign_splits, crop_and_split, load_fov, simulate_frames, synth_dataset, write_fov, Dataset, Item, SourceMode,
    Split, SplitCounts, SynthKind,
};
use csfm_core::mask::{self, BaselineKind};
use csfm_core::noise::{NoiseModel, NoiseParams, SeededRng};
use csfm_core::recon::{TvwConfig, UNetConfig};
use csfm_core::train::{self, EvalConfig, EvalRecon, ReconKind, Reconstructor, TrainConfig};

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        s_total: 3,
        epochs: 3,
        batch_size: 4,
        recon: ReconKind::UNet(UNetConfig {
            levels: 1,
            base_channels: 4,
            ..UNetConfig::default()
        }),
        ..TrainConfig::default()
    }
}

#[test]
fn synthetic_train_save_load_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = assign_splits(synth_dataset(SynthKind::GaussianBlobs, 12, 16, 100.0, 2).unwrap(), 8, 0).unwrap();
    ds.save(dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let train_items = ds.split(Split::Train);
    let test_items = ds.split(Split::Test);
    assert_eq!((train_items.len(), test_items.len()), (8, 4));

    let res = train::train_joint(&train_items, &tiny_train_cfg()).unwrap();
    assert!((res.mask.mean() - 0.25).abs() <= 1e-6);
    let ckpt = dir.path().join("r.ckpt");
    res.recon.save(&ckpt).unwrap();
    let recon = Reconstructor::load(&ckpt).unwrap();
    let mpath = dir.path().join("m.bin");
    mask::write_mask(&mpath, &res.mask, 16, "learned").unwrap();
    let (m, manifest) = mask::read_mask(&mpath).unwrap();
    assert_eq!(manifest.kind, "learned");

    let ecfg = EvalConfig {
        s_total: 3,
        source: SourceMode::Simulated(NoiseModel::PoissonGaussian(NoiseParams::default())),
        seed: 5,
        peak: None,
    };
    let a = train::evaluate(&test_items, &m, "learned", EvalRecon::Net(&recon), &ecfg).unwrap();
    let b = train::evaluate(&test_items, &m, "learned", EvalRecon::Net(&recon), &ecfg).unwrap();
    assert_eq!(a.rows_csv(), b.rows_csv());
    assert_eq!(a.rows.len(), 4);
    assert!(a.rows.iter().all(|r| r.psnr_db.is_finite()));

    let t = train::evaluate(&test_items, &m, "learned", EvalRecon::Tvw(&TvwConfig::default()), &ecfg).unwrap();
    assert_eq!(t.recon, "tvw");
}

#[test]
fn raw_frames_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let params = NoiseParams::new(1.0, 0.01).unwrap();
    let truths = synth_dataset(SynthKind::PiecewiseConstant, 3, 32, 50.0, 4).unwrap();
    for (k, it) in truths.items.iter().enumerate() {
        let frames = simulate_frames(&it.truth, params, 6, &mut SeededRng::new(k as u64, 0).rng()).unwrap();
        write_fov(&dir.path().join(format!("fov{k}")), &frames, Some("test")).unwrap();
    }
    let items: Vec<Item> = (0..3)
        .map(|k| {
            let name = format!("fov{k}");
            Item::from_frames(name.clone(), name.clone(), Split::Train, load_fov(&dir.path().join(&name)).unwrap())
        })
        .collect();
    let source = Dataset { items };
    let counts = SplitCounts {
        train: 4,
        val: 0,
        test: 4,
    };
    let ds = crop_and_split(&source, 16, counts, 1).unwrap();
    assert_eq!(ds.split(Split::Train).len(), 4);
    assert_eq!(ds.split(Split::Test).len(), 4);
    for it in &ds.items {
        assert_eq!(it.frames.as_ref().unwrap().len(), 6);
    }

    let cfg = TrainConfig {
        s_total: 6,
        source: SourceMode::Raw,
        ..tiny_train_cfg()
    };
    let fixed = mask::baseline_mask(BaselineKind::LowSequency, 0.25, 16, &mut SeededRng::new(0, 0).rng()).unwrap();
    let res = train::train_recon_only(&ds.split(Split::Train), &fixed, &cfg).unwrap();
    assert_eq!(res.mask, fixed);
    let ecfg = EvalConfig {
        s_total: 6,
        source: SourceMode::Raw,
        seed: 0,
        peak: None,
    };
    let rep = train::evaluate(&ds.split(Split::Test), &fixed, "LS", EvalRecon::Net(&res.recon), &ecfg).unwrap();
    assert_eq!(rep.rows.len(), 4);

    let too_many = TrainConfig { s_total: 7, ..cfg };
    assert!(train::train_recon_only(&ds.split(Split::Train), &fixed, &too_many).is_err());
}

#[test]
fn raw_mode_needs_frames() {
    let ds = synth_dataset(SynthKind::GaussianBlobs, 1, 8, 10.0, 0).unwrap();
    assert!(data::make_measurement_source(&ds.items[0], SourceMode::Raw).is_err());
}
