use spikeattn::ModelConfig;
use spikeattn::runtime::single_threaded;
use spikeattn::training::{train, write_history_csv, Sample, TrainConfig};
use spikeattn::video::{synthesize, FaceBox, SynthSpec};
use spikeattn::{Error, Model32};

fn dataset(n: usize, frames: usize) -> Vec<Sample<f32>> {
    (0..n)
        .map(|i| {
            let hr = 60.0 + 7.0 * i as f64;
            let spec = SynthSpec {
                hr_bpm: hr,
                face_box: FaceBox { x: 8, y: 6, w: 16, h: 20 },
                noise_std: 0.01,
                illumination_drift: 0.01,
                seed: 40 + i as u64,
            };
            let (clip, wave) = synthesize(&spec, frames, 32, 32, 30.0).unwrap();
            Sample::from_clip(&clip, &wave, hr).unwrap()
        })
        .collect()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let model = Model32::new(small(), 3).unwrap();
    let before: Vec<_> = model.params().values().to_vec();
    let cfg = TrainConfig { lr: 0.0, epochs: 1, ..TrainConfig::default() };
    let out = train(model, &dataset(5, 64), &cfg, |_| {}).unwrap();
    assert_eq!(out.last.params().values(), &before[..]);
}

#[test]
fn single_sample_overfits() {
    let model = Model32::new(small(), 3).unwrap();
    let cfg = TrainConfig { epochs: 50, val_fraction: 0.0, ..TrainConfig::default() };
    let out = train(model, &dataset(1, 64), &cfg, |_| {}).unwrap();
    let l: Vec<f64> = out.history.iter().map(|r| r.l_time).collect();
    let head = l[..10].iter().sum::<f64>() / 10.0;
    let tail = l[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "l_time {head} -> {tail}");
    assert_eq!(out.best_epoch, 50);
}

#[test]
fn identical_seeds_identical_runs() {
    let run = || {
        single_threaded(|| {
            let model = Model32::new(small(), 9).unwrap();
            let cfg = TrainConfig { epochs: 2, seed: 5, ..TrainConfig::default() };
            train(model, &dataset(6, 64), &cfg, |_| {}).unwrap()
        })
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.last.params().values(), b.last.params().values());
}

#[test]
fn nan_loss_reports_divergence() {
    let mut model = Model32::new(small(), 3).unwrap();
    model.params_mut().get_mut("head.out.bias").unwrap().data_mut()[0] = f32::NAN;
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    match train(model, &dataset(4, 64), &cfg, |_| {}) {
        Err(Error::Diverged(msg)) => assert!(msg.contains("epoch 1"), "{msg}"),
        Err(e) => panic!("expected divergence, got {e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn history_csv_layout() {
    let model = Model32::new(small(), 3).unwrap();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let out = train(model, &dataset(5, 64), &cfg, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &out.history).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,l_time,l_ce,l_ld,beta,val_mae");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2,"));
}

fn small() -> ModelConfig {
    ModelConfig::toy(8, 1, 2, [64, 32, 32])
}
