use candle_core::Device;
use leafgan::image::{BinaryMask, ValueRange};
use leafgan::leafgan::{epoch_dir, latest_checkpoint, read_manifest, train, GanConfig, GanState, LossRecord, TrainOptions, UnpairedData};
use leafgan::synth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 32;

fn data(n: usize) -> UnpairedData {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let (x, y) = synth::disk_domains(n, SIDE, &mut rng);
    let pair = |l: &synth::Labeled| (l.image.to_range(ValueRange::Signed), l.mask.clone());
    UnpairedData {
        x: x.iter().map(pair).collect(),
        y: y.iter().map(pair).collect(),
    }
}

fn config(epochs: usize, batch: usize) -> GanConfig {
    let mut cfg = GanConfig::desk(SIDE, 4);
    cfg.epochs = epochs;
    cfg.batch = batch;
    cfg.seed = 31;
    cfg
}

fn totals(rs: &[LossRecord]) -> Vec<(u64, f64)> {
    rs.iter().map(|r| (r.iteration, r.total)).collect()
}

#[test]
fn one_epoch_runs_ceil_steps_and_saves_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = GanState::new(config(1, 3), &Device::Cpu).unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 10,
        loss_csv: Some(dir.path().join("losses.csv")),
        max_steps: None,
    };
    let summary = train(&mut state, &data(4), &opts).unwrap();
    assert_eq!(summary.records.len(), 2);
    assert_eq!(state.iteration, 2);
    assert_eq!(summary.checkpoints, vec![epoch_dir(dir.path(), 1)]);
    assert_eq!(latest_checkpoint(dir.path()).unwrap(), epoch_dir(dir.path(), 1));
    let m = read_manifest(&epoch_dir(dir.path(), 1)).unwrap();
    assert_eq!((m.epoch, m.iteration), (1, 2));
    let csv = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,adv_G,adv_F,cyc,bs,total");
    assert_eq!(lines.len(), 3);
}

#[test]
fn shorter_domain_wraps_around() {
    let mut d = data(5);
    d.y.truncate(2);
    assert_eq!(d.steps_per_epoch(2), 3);
    let mut state = GanState::new(config(1, 2), &Device::Cpu).unwrap();
    let summary = train(&mut state, &d, &TrainOptions::default()).unwrap();
    assert_eq!(summary.records.len(), 3);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let d = data(3);
    let run = || {
        let mut state = GanState::new(config(2, 1), &Device::Cpu).unwrap();
        totals(&train(&mut state, &d, &TrainOptions::default()).unwrap().records)
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_continues_where_the_checkpoint_left_off() {
    let d = data(3);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 1,
        ..TrainOptions::default()
    };
    let mut straight = GanState::new(config(2, 1), &Device::Cpu).unwrap();
    let full = train(&mut straight, &d, &opts).unwrap();
    assert_eq!(full.checkpoints.len(), 2);

    let mut resumed = GanState::load_checkpoint(&epoch_dir(dir.path(), 1), &Device::Cpu).unwrap();
    assert_eq!((resumed.epoch, resumed.iteration), (1, 3));
    let rest = train(&mut resumed, &d, &TrainOptions::default()).unwrap();
    assert_eq!(totals(&rest.records), totals(&full.records[3..]));
    assert_eq!(resumed.iteration, straight.iteration);
}

#[test]
fn misaligned_mask_is_rejected() {
    let mut d = data(2);
    d.x[0].1 = BinaryMask::ones(SIDE / 2, SIDE / 2);
    let mut state = GanState::new(config(1, 1), &Device::Cpu).unwrap();
    assert!(train(&mut state, &d, &TrainOptions::default()).is_err());
}
