use std::sync::Arc;

use cpcr::data::*;
use cpcr::dbpnet::{ForwardOptions, NetworkConfig};
use cpcr::losses::{ramp_up_weight, supervised_loss, LossWeights};
use cpcr::metrics::evaluate_volumes;
use cpcr::nn::{Mode, Parameterized};
use cpcr::trainer::*;
use cpcr::{Error, Network32};

fn dataset(slices: usize) -> Vec<VolumeSample> {
    generate_synthetic_dataset(&SyntheticSpec {
        num_volumes: 10,
        slices_per_volume: slices,
        image_size: [40, 36],
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn net_config() -> NetworkConfig {
    NetworkConfig {
        encoder_channels: vec![4, 6, 8, 10, 12],
        ..NetworkConfig::default()
    }
    .with_input_size(32, 32)
}

fn train_config(iterations: u64) -> TrainConfig {
    let mut c = TrainConfig {
        max_iterations: iterations,
        val_every: 10,
        rampup_step_every: 3,
        ..TrainConfig::default()
    };
    c.objective.weights.t_max = 4;
    c.batch.labeled = 2;
    c.batch.unlabeled = 2;
    c.batch.patch_size = [32, 32];
    c
}

fn split_of(vols: &[VolumeSample], ratio: f64) -> SslSplit {
    make_ssl_split(&patient_ids(vols, SplitTag::Train), ratio, 1337).unwrap()
}

fn sampler(vols: &[VolumeSample], split: &SslSplit, cfg: &TrainConfig) -> BatchSampler {
    let pools = Arc::new(SlicePools::build(vols, split, cfg.batch.patch_size).unwrap());
    BatchSampler::new(pools, cfg.batch.clone(), cfg.seed).unwrap()
}

fn parameters(net: &Network32) -> Vec<f32> {
    let mut v = Vec::new();
    net.visit("", &mut |_, p| v.extend_from_slice(&p.value));
    v
}

#[test]
fn identical_states_and_batches_give_identical_steps() {
    let vols = dataset(3);
    let split = split_of(&vols, 0.3);
    let cfg = train_config(10);
    let batch = sampler(&vols, &split, &cfg).next_batch();
    let mut a = TrainState::<f32>::new(net_config(), &cfg).unwrap();
    let mut b = TrainState::<f32>::new(net_config(), &cfg).unwrap();
    for _ in 0..3 {
        assert_eq!(
            train_step(&mut a, &batch, &cfg).unwrap(),
            train_step(&mut b, &batch, &cfg).unwrap()
        );
    }
    assert_eq!(parameters(&a.network), parameters(&b.network));
}

#[test]
fn zero_regularizer_weights_reduce_to_a_supervised_step() {
    let vols = dataset(3);
    let split = split_of(&vols, 0.3);
    let mut cfg = train_config(10);
    cfg.objective.weights = LossWeights::supervised_only();
    let batch = sampler(&vols, &split, &cfg).next_batch();
    let mut state = TrainState::<f32>::new(net_config(), &cfg).unwrap();

    // Hand-rolled reference: same forward, Dice on both main outputs only,
    // plain momentum SGD.
    let mut net = state.network.clone();
    let mut rng = state.forward_rng.clone();
    let opts = ForwardOptions {
        bn_split: Some(2),
        ..ForwardOptions::new(Mode::Train)
    };
    let (pyr, tape) = net
        .forward_with(&batch.stacked_images(), opts, &mut rng)
        .unwrap();
    let (sup, grads) = supervised_loss(&pyr, &batch.labeled_labels).unwrap();
    net.zero_grad();
    net.update_running_stats(&tape);
    net.backward(tape, &grads);
    let (lr, wd) = (cfg.optimizer.lr as f32, cfg.optimizer.weight_decay as f32);
    net.visit_mut("", &mut |_, p| {
        if p.trainable {
            for (w, g) in p.value.iter_mut().zip(&p.grad) {
                // first step: the momentum buffer equals the raw update
                *w -= lr * (g + wd * *w);
            }
        }
    });

    let loss = train_step(&mut state, &batch, &cfg).unwrap();
    assert_eq!(loss.sup, sup as f64);
    assert_eq!(loss.total, loss.sup);
    assert_eq!(parameters(&state.network), parameters(&net));
}

#[test]
fn zeroing_unlabeled_images_leaves_the_supervised_term_unchanged() {
    let vols = dataset(3);
    let split = split_of(&vols, 0.3);
    let cfg = train_config(10);
    let batch = sampler(&vols, &split, &cfg).next_batch();
    let mut zeroed = batch.clone();
    zeroed
        .unlabeled_images
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let state = TrainState::<f32>::new(net_config(), &cfg).unwrap();
    let a = train_step(&mut state.clone_for_test(), &batch, &cfg).unwrap();
    let b = train_step(&mut state.clone_for_test(), &zeroed, &cfg).unwrap();
    assert_eq!(a.sup, b.sup);
    assert_ne!(a.con_main, b.con_main);
}

trait CloneForTest {
    fn clone_for_test(&self) -> Self;
}

impl CloneForTest for TrainState<f32> {
    fn clone_for_test(&self) -> Self {
        TrainState {
            network: self.network.clone(),
            optimizer: self.optimizer.clone(),
            iteration: self.iteration,
            rampup_t: self.rampup_t,
            best_val_dice: self.best_val_dice,
            forward_rng: self.forward_rng.clone(),
            sampler: self.sampler.clone(),
        }
    }
}

#[test]
fn aux_consistency_reaches_aux_heads_and_supervision_does_not() {
    let vols = dataset(3);
    let split = split_of(&vols, 0.3);
    let cfg = train_config(10);
    let batch = sampler(&vols, &split, &cfg).next_batch();
    let mut net = TrainState::<f32>::new(net_config(), &cfg).unwrap().network;
    let opts = ForwardOptions {
        bn_split: Some(2),
        ..ForwardOptions::new(Mode::Train)
    };
    let mut rng = cpcr::dbpnet::ForwardRng::from_seed(1);
    let (pyr, tape) = net
        .forward_with(&batch.stacked_images(), opts, &mut rng)
        .unwrap();
    let (_, grads) = cfg
        .objective
        .evaluate(&pyr, &batch.labeled_labels, cfg.objective.weights.t_max)
        .unwrap();
    net.zero_grad();
    net.backward(tape, &grads);
    let mut aux_heads = 0;
    net.visit("", &mut |name, p| {
        if name.contains(".aux") && name.ends_with("weight") {
            assert!(p.grad.iter().any(|&g| g != 0.0), "{name}");
            aux_heads += 1;
        }
    });
    assert_eq!(aux_heads, 6);

    let (pyr, tape) = net
        .forward_with(&batch.stacked_images(), opts, &mut rng)
        .unwrap();
    let (_, grads) = supervised_loss(&pyr, &batch.labeled_labels).unwrap();
    net.zero_grad();
    net.backward(tape, &grads);
    net.visit("", &mut |name, p| {
        if name.contains(".aux") {
            assert!(p.grad.iter().all(|&g| g == 0.0), "{name}");
        }
    });
}

#[test]
fn non_finite_loss_aborts_without_touching_the_state() {
    let vols = dataset(3);
    let split = split_of(&vols, 0.3);
    let cfg = train_config(10);
    let mut batch = sampler(&vols, &split, &cfg).next_batch();
    batch.labeled_images.data_mut()[0] = f32::NAN;
    let mut state = TrainState::<f32>::new(net_config(), &cfg).unwrap();
    let before = parameters(&state.network);
    let err = train_step(&mut state, &batch, &cfg).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { iteration: 0, .. }),
        "{err}"
    );
    assert_eq!(state.iteration, 0);
    assert_eq!(parameters(&state.network), before);
}

#[test]
fn lambda_in_the_log_follows_the_ramp_schedule() {
    let vols = dataset(2);
    let split = split_of(&vols, 0.3);
    let mut cfg = train_config(16);
    cfg.rampup_step_every = 5;
    let mut t = Trainer::new(
        cfg.clone(),
        net_config(),
        &vols,
        split,
        RunOptions::default(),
    )
    .unwrap();
    t.run().unwrap();
    let losses = &t.artifacts().losses;
    assert_eq!(losses.len(), 16);
    for r in losses {
        let expected = ramp_up_weight((r.iteration / 5).min(4), &cfg.objective.weights);
        assert_eq!(r.loss.lambda_t, expected, "iteration {}", r.iteration);
    }
    assert!(losses[5].loss.lambda_t > losses[4].loss.lambda_t);
    assert_eq!(t.state().rampup_t, 3);
}

#[test]
fn default_ramp_steps_at_iteration_150() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.rampup_t(149), 0);
    assert_eq!(cfg.rampup_t(150), 1);
    let w = cfg.objective.weights;
    assert!(ramp_up_weight(cfg.rampup_t(150), &w) > ramp_up_weight(cfg.rampup_t(149), &w));
    assert_eq!(cfg.rampup_t(10_000_000), w.t_max);
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_run() {
    let vols = dataset(2);
    let split = split_of(&vols, 0.3);
    let cfg = train_config(14);
    let full_dir = tempfile::tempdir().unwrap();
    let opts = |d: &std::path::Path| RunOptions {
        out_dir: Some(d.to_path_buf()),
        ..RunOptions::default()
    };
    let mut full = Trainer::new(
        cfg.clone(),
        net_config(),
        &vols,
        split.clone(),
        opts(full_dir.path()),
    )
    .unwrap();
    full.run().unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(
        cfg.clone(),
        net_config(),
        &vols,
        split.clone(),
        opts(part_dir.path()),
    )
    .unwrap();
    first.run_until(6).unwrap();
    let ck = part_dir.path().join("k.ckpt");
    first.save_checkpoint(&ck).unwrap();
    // A few extra steps that the resumed run must discard from the log.
    first.run_until(8).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(cfg, &vols, split, &ck, opts(part_dir.path())).unwrap();
    resumed.run().unwrap();

    assert_eq!(full.artifacts().losses[6..], resumed.artifacts().losses[..]);
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(
        read(full_dir.path(), LOSS_LOG),
        read(part_dir.path(), LOSS_LOG)
    );
    assert_eq!(
        read(full_dir.path(), VAL_LOG),
        read(part_dir.path(), VAL_LOG)
    );
    assert_eq!(
        parameters(&full.state().network),
        parameters(&resumed.state().network)
    );
}

#[test]
fn resume_rejects_a_different_configuration() {
    let vols = dataset(2);
    let split = split_of(&vols, 0.3);
    let cfg = train_config(3);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(
        cfg.clone(),
        net_config(),
        &vols,
        split.clone(),
        RunOptions::default(),
    )
    .unwrap();
    t.run().unwrap();
    let ck = dir.path().join("c.ckpt");
    t.save_checkpoint(&ck).unwrap();
    let other = TrainConfig { seed: 1, ..cfg };
    assert!(matches!(
        Trainer::resume(other, &vols, split, &ck, RunOptions::default()),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let vols = dataset(2);
    let split = split_of(&vols, 0.3);
    let cfg = train_config(4);
    let mut t = Trainer::new(
        cfg.clone(),
        net_config(),
        &vols,
        split.clone(),
        RunOptions::default(),
    )
    .unwrap();
    t.run().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    t.save_checkpoint(&a).unwrap();
    let (state, meta) = load_checkpoint::<f32>(&a, Some(&net_config())).unwrap();
    assert_eq!(meta.iteration, 4);
    save_checkpoint(&state, &meta.train_config, meta.split.as_ref(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let wrong = NetworkConfig {
        num_classes: 3,
        ..net_config()
    };
    assert!(load_checkpoint::<f32>(&a, Some(&wrong)).is_err());
    let mut bytes = std::fs::read(&a).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&b, bytes).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&b, None),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn validation_pipeline_contracts() {
    let vols = dataset(3);
    let val: Vec<VolumeSample> = vols
        .iter()
        .filter(|v| v.split_tag == SplitTag::Val)
        .cloned()
        .collect();
    let net = Network32::new(net_config(), 1).unwrap();
    for v in &val {
        let p = predict_volume(&net, &v.image, cpcr::dbpnet::Branch::Up).unwrap();
        assert_eq!(p.dim(), v.image.dim());
    }
    let gts: Vec<_> = val.iter().map(|v| v.label.clone()).collect();
    let ids: Vec<_> = val.iter().map(|v| v.volume_id.clone()).collect();
    let perfect = evaluate_volumes(&gts, &gts, &ids, &CLASS_NAMES, [1.0; 3]).unwrap();
    assert_eq!(perfect.mean_dsc(), 1.0);
    assert!(matches!(
        validate(&net, &[], cpcr::dbpnet::Branch::Up),
        Err(Error::Data(_))
    ));
}

#[test]
fn training_beats_the_untrained_network_and_keeps_the_best_checkpoint() {
    let vols = dataset(4);
    let split = split_of(&vols, 0.3);
    let mut cfg = train_config(200);
    cfg.val_every = 50;
    cfg.optimizer.lr = 0.05;
    let net = NetworkConfig {
        encoder_channels: vec![8, 16, 24, 32, 40],
        branch_dropout_rate: 0.0,
        ..net_config()
    };
    let val: Vec<VolumeSample> = vols
        .iter()
        .filter(|v| v.split_tag == SplitTag::Val)
        .cloned()
        .collect();
    let untrained = validate(
        &Network32::new(net.clone(), cfg.seed).unwrap(),
        &val,
        cfg.inference_branch,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let mut t = Trainer::new(cfg.clone(), net, &vols, split, opts).unwrap();
    t.run().unwrap();
    let art = t.artifacts();
    let vals: Vec<f64> = art.validations.iter().map(|v| v.mean_dsc).collect();
    assert_eq!(vals.len(), 4);
    let best = vals.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(t.state().best_val_dice, Some(best));
    assert!(best >= *vals.last().unwrap());
    assert!(
        best > untrained.mean_dsc(),
        "trained {best} vs untrained {}",
        untrained.mean_dsc()
    );

    let (best_state, meta) =
        load_checkpoint::<f32>(art.best_checkpoint.as_ref().unwrap(), None).unwrap();
    let again = validate(&best_state.network, &val, cfg.inference_branch).unwrap();
    assert!((again.mean_dsc() - best).abs() <= 1e-6);
    assert_eq!(meta.best_val_dice, Some(best));
    for f in [LOSS_LOG, VAL_LOG, BEST_CHECKPOINT, LAST_CHECKPOINT] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn labeled_only_overfit_drives_the_supervised_loss_down() {
    let vols = generate_synthetic_dataset(&SyntheticSpec {
        num_volumes: 1,
        slices_per_volume: 4,
        image_size: [32, 32],
        ..SyntheticSpec::default()
    })
    .unwrap();
    let split = split_of(&vols, 1.0);
    assert!(split.unlabeled_ids.is_empty());
    let mut cfg = train_config(500);
    cfg.val_every = 1000;
    cfg.objective.weights = LossWeights::supervised_only();
    cfg.batch.augment.flip_probability = 0.0;
    cfg.batch.augment.rotation_probability = 0.0;
    // overfit mode: no stochastic regularization anywhere
    let net = NetworkConfig {
        encoder_channels: vec![16, 32, 64, 128, 256],
        branch_dropout_rate: 0.0,
        ..net_config()
    };
    let mut t = Trainer::new(cfg, net, &vols, split, RunOptions::default()).unwrap();
    t.run().unwrap();
    let last = t.artifacts().losses.last().unwrap().loss.sup;
    assert!(last < 0.1, "final supervised loss {last}");
}
