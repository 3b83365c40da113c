use cpcr::dbpnet::{
    Branch, BranchPyramids, ForwardOptions, ForwardRng, Network, NetworkConfig, ParameterScope,
    PerturbationKind, PyramidGrads,
};
use cpcr::losses::{supervised_loss, uncertainty_min_from_logits};
use cpcr::nn::{Mode, Parameterized};
use cpcr::{Error, Network64, Tensor4};
use ndarray::Array3;

fn tiny_config(classes: usize) -> NetworkConfig {
    NetworkConfig {
        num_classes: classes,
        encoder_channels: vec![2, 3, 4, 5, 6],
        ..NetworkConfig::default()
    }
    .with_input_size(16, 16)
}

fn images(b: usize, h: usize, w: usize, phase: f64) -> Tensor4<f64> {
    Tensor4::from_fn([b, 1, h, w], |i| {
        ((i[0] as f64 + 1.0) * 0.7 * i[2] as f64 + 0.31 * i[3] as f64 + phase).sin()
            + 0.2 * ((i[2] * i[3]) as f64 * 0.13).cos()
    })
}

fn labels(b: usize, h: usize, w: usize, classes: usize) -> Array3<u8> {
    Array3::from_shape_fn((b, h, w), |(k, y, x)| {
        (((y / 4) + (x / 5) + k) % classes) as u8
    })
}

#[test]
fn default_network_yields_eight_maps_at_input_resolution() {
    let net = Network::<f32>::new(NetworkConfig::default().with_input_size(64, 48), 1).unwrap();
    let x = images(2, 64, 48, 0.0).cast::<f32>();
    for mode in [Mode::Train, Mode::Eval] {
        let pyr = net
            .forward(&x, mode, &mut ForwardRng::from_seed(3))
            .unwrap();
        assert_eq!(pyr.tr.len(), 4);
        assert_eq!(pyr.up.len(), 4);
        for m in pyr.tr.iter().chain(&pyr.up) {
            assert_eq!(m.shape(), [2, 4, 64, 48]);
        }
    }
}

#[test]
fn two_class_config_gives_two_channel_logits() {
    let net = Network64::new(tiny_config(2), 5).unwrap();
    let pyr = net
        .forward(
            &images(3, 16, 16, 0.5),
            Mode::Train,
            &mut ForwardRng::from_seed(0),
        )
        .unwrap();
    assert!(pyr
        .tr
        .iter()
        .chain(&pyr.up)
        .all(|m| m.shape() == [3, 2, 16, 16]));
}

#[test]
fn misaligned_input_is_a_shape_error() {
    let net = Network64::new(tiny_config(3), 5).unwrap();
    let err = net.forward(
        &images(1, 20, 16, 0.0),
        Mode::Eval,
        &mut ForwardRng::from_seed(0),
    );
    assert!(matches!(err, Err(Error::Shape(_))));
    let cfg = NetworkConfig::default().with_input_size(40, 64);
    assert!(
        matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "input_size")
    );
}

#[test]
fn eval_mode_is_bitwise_deterministic() {
    let net = Network64::new(tiny_config(3), 9).unwrap();
    let x = images(2, 16, 16, 1.0);
    let a = net
        .forward(&x, Mode::Eval, &mut ForwardRng::from_seed(1))
        .unwrap();
    let b = net
        .forward(&x, Mode::Eval, &mut ForwardRng::from_seed(2))
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_mode_reproduces_with_a_reset_rng() {
    let net = Network64::new(tiny_config(3), 9).unwrap();
    let x = images(2, 16, 16, 1.0);
    let a = net
        .forward(&x, Mode::Train, &mut ForwardRng::from_seed(11))
        .unwrap();
    let b = net
        .forward(&x, Mode::Train, &mut ForwardRng::from_seed(11))
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_mode_perturbations_change_coarsest_aux_output() {
    let net = Network64::new(tiny_config(3), 9).unwrap();
    let x = images(2, 16, 16, 1.0);
    let mut rng = ForwardRng::from_seed(4);
    let draws: Vec<_> = (0..10)
        .map(|_| net.forward(&x, Mode::Train, &mut rng).unwrap().tr[0].clone())
        .collect();
    for i in 0..draws.len() {
        for j in i + 1..draws.len() {
            assert!(
                draws[i].max_abs_diff(&draws[j]) > 1e-9,
                "draws {i} and {j} coincide"
            );
        }
    }
}

#[test]
fn aux_perturbations_leave_main_outputs_untouched() {
    let net = Network64::new(tiny_config(3), 9).unwrap();
    let x = images(2, 16, 16, 0.3);
    let on = ForwardOptions::new(Mode::Train);
    let off = ForwardOptions {
        aux_perturbation: false,
        ..on
    };
    let (a, _) = net
        .forward_with(&x, on, &mut ForwardRng::from_seed(8))
        .unwrap();
    let (b, _) = net
        .forward_with(&x, off, &mut ForwardRng::from_seed(8))
        .unwrap();
    for branch in [Branch::Tr, Branch::Up] {
        assert_eq!(a.main(branch), b.main(branch));
        for s in 1..=3 {
            assert!(a.scale(branch, s).max_abs_diff(b.scale(branch, s)) > 0.0);
        }
    }
}

#[test]
fn inference_probabilities_sum_to_one_and_start_near_uniform() {
    let net = Network::<f32>::new(NetworkConfig::default().with_input_size(32, 32), 21).unwrap();
    let probs = net
        .forward_inference(&images(2, 32, 32, 0.2).cast())
        .unwrap();
    let [b, c, h, w] = probs.shape();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let s: f32 = (0..c).map(|k| probs.get([bi, k, y, x])).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
    let worst = probs
        .data()
        .iter()
        .map(|p| (p - 0.25).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 0.05, "max deviation from uniform {worst}");
}

#[test]
fn parameter_counts_match_reference_sizes() {
    let net = Network::<f32>::new(NetworkConfig::default(), 0).unwrap();
    let full = net.count_parameters(ParameterScope::FullTraining);
    let infer = net.count_parameters(ParameterScope::InferenceUpBranch);
    let unet = net.count_parameters(ParameterScope::BackboneUnetEquivalent);
    assert!(full >= infer && infer > unet);
    assert!(
        (unet as f64 / 1.81e6 - 1.0).abs() <= 0.02,
        "unet-equivalent {unet}"
    );
    assert!(
        (infer as f64 / 1.83e6 - 1.0).abs() <= 0.02,
        "inference {infer}"
    );
}

#[test]
fn doubling_channels_increases_the_count() {
    let small = Network::<f32>::new(tiny_config(3), 0).unwrap();
    let cfg = NetworkConfig {
        encoder_channels: vec![4, 6, 8, 10, 12],
        ..tiny_config(3)
    };
    let big = Network::<f32>::new(cfg, 0).unwrap();
    for scope in [
        ParameterScope::FullTraining,
        ParameterScope::InferenceUpBranch,
        ParameterScope::BackboneUnetEquivalent,
    ] {
        assert!(big.count_parameters(scope) > small.count_parameters(scope));
    }
}

#[test]
fn same_seed_builds_identical_parameters() {
    let a = Network64::new(tiny_config(3), 17).unwrap();
    let b = Network64::new(tiny_config(3), 17).unwrap();
    let c = Network64::new(tiny_config(3), 18).unwrap();
    let collect = |n: &Network64| {
        let mut v = Vec::new();
        n.visit("", &mut |_, p| v.extend_from_slice(&p.value));
        v
    };
    assert_eq!(collect(&a), collect(&b));
    assert_ne!(collect(&a), collect(&c));
}

// Deterministic train-mode configuration: no decoder dropout, no head
// perturbations, batch statistics split between labeled and unlabeled.
fn deterministic_opts(split: usize) -> ForwardOptions {
    ForwardOptions {
        aux_perturbation: false,
        bn_split: Some(split),
        ..ForwardOptions::new(Mode::Train)
    }
}

// Supervised Dice on both main outputs, the uncertainty term, and a fixed
// linear probe on every auxiliary map. None of these detach anything, so the
// analytic network gradient must match finite differences of this value.
struct ProbeLoss {
    weights: Vec<Tensor4<f64>>,
}

impl ProbeLoss {
    fn new(shape: [usize; 4]) -> Self {
        let weights = (0..6)
            .map(|m| {
                Tensor4::from_fn(shape, |i| {
                    ((m * 7 + i[1] * 3 + i[2] * 5 + i[3] + i[0] * 11) as f64 * 0.37).sin()
                })
            })
            .collect();
        Self { weights }
    }

    fn evaluate(&self, pyr: &BranchPyramids<f64>, y: &Array3<u8>) -> (f64, PyramidGrads<f64>) {
        let (sup, mut grads) = supervised_loss(pyr, y).unwrap();
        let um = uncertainty_min_from_logits(pyr.main(Branch::Tr), pyr.main(Branch::Up)).unwrap();
        grads.accumulate(Branch::Tr, 4, &um.grad_tr, 1.0);
        grads.accumulate(Branch::Up, 4, &um.grad_up, 1.0);
        let mut value = sup + um.value;
        for (m, w) in self.weights.iter().enumerate() {
            let branch = if m < 3 { Branch::Tr } else { Branch::Up };
            let s = m % 3 + 1;
            value += pyr
                .scale(branch, s)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
            grads.accumulate(branch, s, w, 1.0);
        }
        (value, grads)
    }
}

fn probe_value(net: &Network64, x: &Tensor4<f64>, y: &Array3<u8>, probe: &ProbeLoss) -> f64 {
    let (pyr, _) = net
        .forward_with(
            x,
            deterministic_opts(y.dim().0),
            &mut ForwardRng::from_seed(0),
        )
        .unwrap();
    probe.evaluate(&pyr, y).0
}

#[test]
fn analytic_gradients_match_central_differences() {
    let cfg = NetworkConfig {
        branch_dropout_rate: 0.0,
        ..tiny_config(3)
    };
    let mut net = Network64::new(cfg, 31).unwrap();
    let x = images(4, 16, 16, 0.4);
    let y = labels(2, 16, 16, 3);
    let probe = ProbeLoss::new([4, 3, 16, 16]);

    let (pyr, tape) = net
        .forward_with(&x, deterministic_opts(2), &mut ForwardRng::from_seed(0))
        .unwrap();
    let (_, grads) = probe.evaluate(&pyr, &y);
    net.zero_grad();
    net.backward(tape, &grads);

    let mut probes = Vec::new();
    net.visit("", &mut |name, p| {
        if p.trainable {
            let n = p.len();
            for k in [0, n / 2, n - 1] {
                probes.push((name.to_string(), k, p.grad[k]));
            }
        }
    });
    probes.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    let h = 1e-5;
    let mut checked = 0;
    let mut kinks = 0;
    for (name, k, analytic) in probes {
        let shifted = |delta: f64| {
            let mut n = net.clone();
            n.visit_mut("", &mut |nm, p| {
                if nm == name {
                    p.value[k] += delta;
                }
            });
            probe_value(&n, &x, &y, &probe)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        // Gradients that vanish analytically (biases ahead of batch norm)
        // leave only round-off in the difference quotient.
        let scale = analytic.abs().max(numeric.abs());
        let agrees =
            |n: f64, rel: f64| (analytic - n).abs() <= rel * analytic.abs().max(n.abs()) + 1e-9;
        if !agrees(numeric, 1e-4) {
            // A rectifier or pooling kink inside [-h, h] spoils the central
            // quotient; one side of it is still smooth.
            let base = shifted(0.0);
            let fwd = (shifted(1e-6) - base) / 1e-6;
            let bwd = (base - shifted(-1e-6)) / 1e-6;
            assert!(
                agrees(fwd, 1e-3) || agrees(bwd, 1e-3),
                "{name}[{k}]: analytic {analytic:e} central {numeric:e} one-sided {fwd:e} / {bwd:e}"
            );
            kinks += 1;
        }
        if scale > 1e-6 {
            checked += 1;
        }
    }
    assert!(
        kinks * 20 < checked,
        "{kinks} kinks out of {checked} probes"
    );
    assert!(checked > 100, "only {checked} probes were informative");
}

fn is_pre_norm_bias(name: &str) -> bool {
    name.ends_with(".conv.bias")
}

#[test]
fn supervised_loss_reaches_every_non_auxiliary_parameter() {
    let mut net = Network64::new(tiny_config(3), 2).unwrap();
    let x = images(2, 16, 16, 0.9);
    let y = labels(2, 16, 16, 3);
    let (pyr, tape) = net
        .forward_with(
            &x,
            ForwardOptions::new(Mode::Train),
            &mut ForwardRng::from_seed(5),
        )
        .unwrap();
    let (_, grads) = supervised_loss(&pyr, &y).unwrap();
    net.zero_grad();
    net.backward(tape, &grads);
    let mut seen = 0;
    net.visit("", &mut |name, p| {
        if !p.trainable {
            return;
        }
        let max = p.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if name.contains(".aux") {
            assert_eq!(max, 0.0, "{name} received supervised gradient");
        } else if is_pre_norm_bias(name) {
            assert!(
                max < 1e-10,
                "{name} bias before normalization has gradient {max:e}"
            );
        } else {
            assert!(max > 0.0, "{name} received no gradient");
            seen += 1;
        }
    });
    assert!(seen > 40);
}

#[test]
fn aux_heads_use_the_configured_perturbations() {
    let cfg = tiny_config(3);
    assert_eq!(cfg.perturbation(1), PerturbationKind::FeatureNoise);
    assert_eq!(cfg.perturbation(2), PerturbationKind::FeatureDropout);
    assert_eq!(cfg.perturbation(3), PerturbationKind::Dropout);
    let names = Network64::new(cfg, 0).unwrap().tensor_names();
    for branch in ["tr", "up"] {
        for s in 1..=3 {
            assert!(
                names
                    .iter()
                    .any(|n| n.starts_with(&format!("{branch}.aux{s}"))),
                "{branch}.aux{s} missing: {names:?}"
            );
        }
    }
}
