use gridattn::grid::{DatasetManifest, Label, TaskKind};
use gridattn::model::{AttentionConfig, ModelParams, Target};
use gridattn::synth::{gen_dataset, gen_split, SynthBag, SynthConfig};
use gridattn::tensor::PoolMode;
use gridattn::train::{
    adam_step, batch_gradient, cross_entropy, cross_validate, load_samples, sgd_step, train, AdamState,
    OptimizerKind, Sample, TrainConfig,
};
use proptest::prelude::*;

fn samples(bags: &[SynthBag]) -> Vec<Sample> {
    bags.iter()
        .enumerate()
        .map(|(i, b)| {
            let target = match b.label {
                Label::Class(c) => Target::Class(c as usize),
                Label::Score(s) => Target::Score(s),
            };
            Sample::new(format!("bag{i}"), &b.grid, target)
        })
        .collect()
}

fn small_model(task: TaskKind) -> AttentionConfig {
    let mut attn = AttentionConfig::new(task, 16).with_modes(&[PoolMode::Max, PoolMode::Min]);
    attn.h = 4;
    attn
}

#[test]
fn full_batch_loss_never_rises_at_small_learning_rate() {
    let synth = SynthConfig::default();
    let (train_bags, _) = gen_split(&synth, 48, 2).unwrap();
    let data = samples(&train_bags);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: data.len(),
        lr: 1e-4,
        lr_decay_factor: 1.0,
        ..TrainConfig::classification()
    };
    let report = train(&data, &cfg, &small_model(TaskKind::Classification), 5).unwrap();
    let losses = &report.epoch_losses;
    assert_eq!(losses.len(), 50);
    for w in losses.windows(2) {
        assert!(w[1] - w[0] < 1e-6, "{} -> {}", w[0], w[1]);
    }
    assert!(losses[49] < losses[0]);
}

#[test]
fn default_protocol_reduces_training_loss() {
    let (train_bags, _) = gen_split(&SynthConfig::default(), 64, 2).unwrap();
    let data = samples(&train_bags);
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::classification()
    };
    let report = train(&data, &cfg, &small_model(TaskKind::Classification), 1).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
}

#[test]
fn regression_with_adam_reduces_training_loss() {
    let synth = SynthConfig {
        task: TaskKind::Regression,
        ..SynthConfig::default()
    };
    let (train_bags, _) = gen_split(&synth, 32, 2).unwrap();
    let data = samples(&train_bags);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 8,
        ..TrainConfig::regression()
    };
    let report = train(&data, &cfg, &small_model(TaskKind::Regression), 2).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
}

#[test]
fn runs_are_reproducible_and_thread_count_independent() {
    let (train_bags, _) = gen_split(&SynthConfig::default(), 20, 2).unwrap();
    let data = samples(&train_bags);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 7,
        ..TrainConfig::classification()
    };
    let attn = small_model(TaskKind::Classification);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&data, &cfg, &attn, 11).unwrap())
    };
    let a = run(1);
    let b = run(3);
    let c = run(1);
    assert_eq!(a.params, c.params);
    assert_eq!(a.params, b.params);
    assert_eq!(a.epoch_losses, b.epoch_losses);
    let other = train(&data, &cfg, &attn, 12).unwrap();
    assert_ne!(a.params, other.params);
}

#[test]
fn cross_entropy_closed_forms() {
    assert!(cross_entropy(&[20.0, -20.0], 0).unwrap() < 1e-8);
    let v = cross_entropy(&[0.0, 3f64.ln()], 1).unwrap();
    assert!((v - (4.0f64 / 3.0).ln()).abs() < 1e-15);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let cfg = TrainConfig::regression();
    for g in [1e-3, -0.5, 7.0] {
        let mut theta = vec![1.0];
        let mut state = AdamState::new(1);
        adam_step(&mut theta, &[g], &mut state, 1, 0, &cfg).unwrap();
        let step = 1.0 - theta[0];
        assert!((step - 1e-4 * g.signum()).abs() < 1e-9, "{g}: {step}");
    }
    let mut theta = vec![1.0];
    let mut state = AdamState::new(1);
    let mut prev = theta[0];
    for t in 1..=2 {
        let g = theta[0];
        adam_step(&mut theta, &[g], &mut state, t, 0, &cfg).unwrap();
        assert!(theta[0] < prev);
        prev = theta[0];
    }
    assert!(adam_step(&mut theta, &[1.0], &mut state, 0, 0, &cfg).is_err());
}

proptest! {
    #[test]
    fn sgd_step_is_exactly_minus_lr_times_gradient(
        theta in prop::collection::vec(-10.0f64..10.0, 1..20),
        epoch in 0usize..40,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<f64> = theta.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        let cfg = TrainConfig::classification();
        let lr = cfg.learning_rate(epoch);
        let mut t = theta.clone();
        sgd_step(&mut t, &grads, epoch, &cfg).unwrap();
        for ((after, before), g) in t.iter().zip(&theta).zip(&grads) {
            prop_assert_eq!(*after, before - lr * g);
        }
        prop_assert!(sgd_step(&mut t, &grads[1..], epoch, &cfg).is_err());
    }

    #[test]
    fn batch_gradient_is_the_mean_of_sample_gradients(seed in 0u64..1000, n in 1usize..6) {
        let synth = SynthConfig { seed, grid_size: (3, 5), ..SynthConfig::default() };
        let (bags, _) = gen_split(&synth, n.max(2), 2).unwrap();
        let data = samples(&bags[..n]);
        let attn = small_model(TaskKind::Classification);
        let params = ModelParams::init(&attn, seed).unwrap();
        let refs: Vec<&Sample> = data.iter().collect();
        let (loss, grads) = batch_gradient(&refs, &params, &attn, true).unwrap();
        let mut mean_loss = 0.0;
        let grads = grads.to_flat();
        let mut mean = vec![0.0; grads.len()];
        for s in &refs {
            let (l, g) = batch_gradient(&[*s], &params, &attn, true).unwrap();
            mean_loss += l / n as f64;
            for (m, v) in mean.iter_mut().zip(&g.to_flat()) {
                *m += v / n as f64;
            }
        }
        prop_assert!((loss - mean_loss).abs() < 1e-12);
        for (a, b) in grads.iter().zip(&mean) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_validation_on_a_synthetic_directory() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        grid_size: (4, 6),
        ..SynthConfig::default()
    };
    gen_dataset(&synth, 16, 4, dir.path()).unwrap();
    let manifest = DatasetManifest::read(dir.path().join("train.tsv")).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        folds: 4,
        weight_inits: 2,
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::classification()
    };
    let attn = small_model(TaskKind::Classification);
    let expanded = gridattn::grid::expand_manifest(&manifest);
    let report = cross_validate(&expanded, dir.path(), &cfg, &attn).unwrap();
    assert_eq!(report.runs.len(), 8);
    assert_eq!(report.metric_name, "auc");
    assert!(report.metrics().iter().all(|m| (0.0..=1.0).contains(m)));
    let again = cross_validate(&expanded, dir.path(), &cfg, &attn).unwrap();
    assert_eq!(again.to_tsv(), report.to_tsv());
    let loaded = load_samples(&expanded.records, dir.path()).unwrap();
    assert_eq!(loaded.len(), 160);
}
