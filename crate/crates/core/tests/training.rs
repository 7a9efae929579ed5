use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wavetag::blocks::BlockKind;
use wavetag::data::{synth_generate, Dataset, Split, SynthConfig};
use wavetag::model::{ModelConfig, Network};
use wavetag::tensor::{ParamKind, Parameterized};
use wavetag::train::{eval_loss, fit, train_epoch, OptimState, TrainConfig};

fn small_data(seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        num_songs: 40,
        num_tags: 3,
        input_len: 81,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_net(kind: BlockKind, seed: u64) -> Network<f32> {
    Network::build(ModelConfig::desk(kind, 3, 6, 3), seed).unwrap()
}

fn trainable(net: &Network<f32>) -> Vec<f32> {
    let mut out = Vec::new();
    net.visit("", &mut |_, p| {
        if p.kind != ParamKind::Buffer {
            out.extend_from_slice(&p.value);
        }
    });
    out
}

#[test]
fn training_lowers_the_training_loss() {
    let data = small_data(1);
    let view = data.view(Some(Split::Train), 81);
    for kind in BlockKind::ALL {
        let mut net = small_net(kind, 2);
        let before = eval_loss(&mut net, &view, 16).unwrap();
        let mut optim = OptimState::new(0.01, 0.9, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            train_epoch(&mut net, &view, &mut optim, &mut rng, 8).unwrap();
        }
        let after = eval_loss(&mut net, &view, 16).unwrap();
        assert!(after < before, "{kind}: {before} -> {after}");
    }
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let data = small_data(2);
    let view = data.view(Some(Split::Train), 81);
    let mut net = small_net(BlockKind::Rese2, 4);
    let before = trainable(&net);
    let mut optim = OptimState::new(0.0, 0.9, 1e-4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    train_epoch(&mut net, &view, &mut optim, &mut rng, 8).unwrap();
    assert_eq!(trainable(&net), before);
}

#[test]
fn fit_is_deterministic_and_keeps_the_best_epoch() {
    let data = small_data(3);
    let train = data.view(Some(Split::Train), 81);
    let val = data.view(Some(Split::Valid), 81);
    let cfg = TrainConfig {
        max_epochs: 4,
        batch_size: 8,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = small_net(BlockKind::Se, 6);
        let mut log = Vec::new();
        let out = fit(&mut net, &train, &val, &cfg, Some(&mut log)).unwrap();
        (out, String::from_utf8(log).unwrap())
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 4);
    let bits = |o: &wavetag::train::FitOutcome| {
        o.history
            .iter()
            .map(|r| (r.train_loss.to_bits(), r.val_loss.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    let best = a
        .history
        .iter()
        .min_by(|x, y| x.val_loss.total_cmp(&y.val_loss))
        .unwrap();
    assert_eq!(a.best_epoch, best.epoch);
    assert_eq!(a.best_val_loss, best.val_loss);
}

#[test]
fn different_seeds_give_different_traces() {
    let data = small_data(4);
    let train = data.view(Some(Split::Train), 81);
    let val = data.view(Some(Split::Valid), 81);
    let trace = |seed| {
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };
        let mut net = small_net(BlockKind::Basic, 1);
        fit(&mut net, &train, &val, &cfg, None).unwrap().history[0].train_loss
    };
    assert_ne!(trace(1).to_bits(), trace(2).to_bits());
}

#[test]
fn early_stopping_ends_the_run() {
    let data = small_data(5);
    let train = data.view(Some(Split::Train), 81);
    let val = data.view(Some(Split::Valid), 81);
    let cfg = TrainConfig {
        max_epochs: 40,
        batch_size: 8,
        early_stop_patience: Some(1),
        ..TrainConfig::default()
    };
    let mut net = small_net(BlockKind::Basic, 2);
    let out = fit(&mut net, &train, &val, &cfg, None).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.val_loss).collect();
    assert!(losses.len() < 40, "{losses:?}");
    let (last, earlier) = losses.split_last().unwrap();
    assert!(earlier.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(last >= earlier.last().unwrap());
    assert_eq!(out.best_epoch, losses.len() - 1);
}
