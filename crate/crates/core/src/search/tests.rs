use super::*;
use crate::data::synth::{generate_synthetic, SynthConfig};
use crate::gradcheck::{check_close, DEFAULT_TOL};
use crate::params::{ParamStore, ParamVars};
use crate::primitives::{build_primitive, EdgeRole, PrimitiveKind};
use crate::search_space::MixedOp;
use crate::supernet::NetworkConfig;

fn tiny_net_config(hw: usize) -> NetworkConfig {
    NetworkConfig {
        depth: 1,
        base_channels: 4,
        num_classes: 4,
        m: 1,
        in_channels: 1,
        input_h: hw,
        input_w: hw,
    }
}

fn tiny_search_config(epochs: usize, seed: u64) -> SearchConfig {
    SearchConfig {
        epochs,
        batch_size: 2,
        lr_max: 0.025,
        lr_min: 0.01,
        momentum: 0.95,
        weight_decay: 3e-4,
        arch_lr: 3e-4,
        arch_beta1: 0.5,
        arch_beta2: 0.999,
        arch_weight_decay: 1e-3,
        val_fraction: 0.25,
        seed,
        verify_phase_separation: true,
    }
}

fn dataset(count: usize, hw: usize, seed: u64) -> Vec<crate::data::ImageSample> {
    let config = SynthConfig {
        count,
        height: hw,
        width: hw,
        num_layers: 4,
        seed,
        ..SynthConfig::default()
    };
    generate_synthetic(&config).unwrap()
}

#[test]
fn weight_step_freezes_alpha_and_inactive_candidates() {
    let net = Supernet::<f32>::build(tiny_net_config(16), 3).unwrap();
    let mut engine = SearchEngine::new(net, tiny_search_config(5, 3)).unwrap();
    let data = dataset(2, 16, 3);
    let batch: Vec<&crate::data::ImageSample> = data.iter().collect();

    // sample the same gates the step will draw
    let mut probe_rng = Rng64::derive(99, &[1]);
    let down = sample_binary_gates(&engine.net.alpha_down, &mut probe_rng);
    let up = sample_binary_gates(&engine.net.alpha_up, &mut probe_rng);

    let alpha_before = engine.net.alpha_hash();
    let before: Vec<(String, Vec<u64>)> = engine
        .net
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.data.iter().map(|v| v.to_bits_u64()).collect()))
        .collect();

    let mut gate_rng = Rng64::derive(99, &[1]);
    let loss = engine.weight_step(&batch, 0.01, &mut gate_rng).unwrap();
    assert!(loss.is_finite());
    assert_eq!(engine.net.alpha_hash(), alpha_before, "alpha must stay frozen");

    for ((name, bits), (_, p)) in before.iter().zip(engine.net.store.iter()) {
        let changed = p.data.iter().map(|v| v.to_bits_u64()).ne(bits.iter().copied());
        if let Some(rest) = name.split(".op.").nth(1) {
            // candidate parameter: "<role>.<cell>.edge.<e>.op.<k>...."
            let op_idx: usize = rest.split('.').next().unwrap().parse().unwrap();
            let edge_idx: usize = name.split(".edge.").nth(1).unwrap().split('.').next().unwrap().parse().unwrap();
            let gates = if name.starts_with("down.") { &down } else { &up };
            if op_idx != gates.active[edge_idx] {
                assert!(!changed, "inactive candidate parameter {name} must stay bit-identical");
            }
        }
    }
    // at least one active parameter moved
    let moved = before
        .iter()
        .zip(engine.net.store.iter())
        .any(|((_, bits), (_, p))| p.data.iter().map(|v| v.to_bits_u64()).ne(bits.iter().copied()));
    assert!(moved);
}

#[test]
fn arch_step_freezes_weights_and_moves_alpha() {
    let net = Supernet::<f32>::build(tiny_net_config(16), 5).unwrap();
    let mut engine = SearchEngine::new(net, tiny_search_config(5, 5)).unwrap();
    let data = dataset(2, 16, 5);
    let batch: Vec<&crate::data::ImageSample> = data.iter().collect();

    let weights_before = engine.net.weights_hash();
    let alpha_before = engine.net.alpha_hash();
    let loss = engine.arch_step(&batch).unwrap();
    assert!(loss.is_finite());
    assert_eq!(engine.net.weights_hash(), weights_before, "weights must stay frozen");
    assert_ne!(engine.net.alpha_hash(), alpha_before, "alpha must move");
}

#[test]
fn weight_steps_overfit_a_fixed_tiny_batch() {
    let net = Supernet::<f32>::build(tiny_net_config(16), 7).unwrap();
    let mut engine = SearchEngine::new(net, tiny_search_config(5, 7)).unwrap();
    let data = dataset(2, 16, 7);
    let batch: Vec<&crate::data::ImageSample> = data.iter().collect();

    let mut first = None;
    let mut last = 0.0;
    for step in 0..50 {
        let mut gate_rng = Rng64::derive(7, &[0x6f76, step]);
        last = engine.weight_step(&batch, 0.05, &mut gate_rng).unwrap();
        first.get_or_insert(last);
    }
    let first = first.unwrap();
    assert!(last < first, "loss should fall while overfitting: {first} -> {last}");
}

#[test]
fn arch_steps_favor_identity_when_input_is_the_answer() {
    // contrived mixed edge: candidates [identity, conv]; the input already
    // is the correct per-pixel logit map, so optimizing alpha on the
    // validation objective must push identity's softmax weight on top
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng64::new(11);
    let id = build_primitive(&mut store, &mut rng, "a", PrimitiveKind::Identity, 4, EdgeRole::Normal).unwrap();
    let conv = build_primitive(&mut store, &mut rng, "b", PrimitiveKind::Conv, 4, EdgeRole::Normal).unwrap();
    let mixed = MixedOp { candidates: vec![id, conv] };

    // logits with a clear margin on the true class
    let (h, w) = (6, 6);
    let labels: Vec<u16> = (0..h * w).map(|i| (i % 4) as u16).collect();
    let mut x = vec![0.0f64; 4 * h * w];
    for (p, &l) in labels.iter().enumerate() {
        x[l as usize * h * w + p] = 6.0;
    }

    let mut alpha = vec![0.0f64, 0.0];
    let mut opt = Adam::<f64>::new(0.05, 0.5, 0.999, 1e-8, 0.0);
    for _ in 0..30 {
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone(), Shape::new(1, 4, h, w), false).unwrap();
        let row = tape.leaf(alpha.clone(), Shape::vector(2), true).unwrap();
        let weights = tape.softmax_channels(row).unwrap();
        let mut pv = ParamVars::new(&store, false);
        let out = mixed.forward_continuous(&mut tape, &mut pv, &store, xv, weights).unwrap();
        let loss = tape.dice_loss(out, &labels, DICE_SMOOTH).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(row).unwrap().to_vec();
        opt.begin_step();
        opt.step(0, &mut alpha, &grad);
    }
    let final_weights = crate::tensor::softmax_slice(&alpha);
    assert!(
        final_weights[0] > final_weights[1],
        "identity should win: {final_weights:?}"
    );
}

#[test]
fn alpha_gradient_matches_finite_differences_on_toy_supernet() {
    let config = NetworkConfig { input_h: 8, input_w: 8, ..tiny_net_config(8) };
    let mut net = Supernet::<f64>::build(config, 13).unwrap();
    let data = dataset(1, 8, 13);
    let (xdata, labels, shape) = assemble_batch::<f64>(&[&data[0]]).unwrap();

    let eval_loss = |net: &Supernet<f64>| -> f64 {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xdata.clone(), shape, false).unwrap();
        let pass = net.forward(&mut tape, x, &SupernetMode::Continuous, false).unwrap();
        let loss = tape.dice_loss(pass.logits, &labels, DICE_SMOOTH).unwrap();
        tape.scalar_value(loss)
    };

    // analytic gradients
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xdata.clone(), shape, false).unwrap();
    let pass = net.forward(&mut tape, x, &SupernetMode::Continuous, false).unwrap();
    let loss = tape.dice_loss(pass.logits, &labels, DICE_SMOOTH).unwrap();
    tape.backward(loss).unwrap();
    let (down_rows, up_rows) = pass.alpha_vars.clone().unwrap();
    let mut analytic = Vec::new();
    for &v in down_rows.iter().chain(&up_rows) {
        analytic.extend(tape.grad(v).unwrap().to_vec());
    }

    // numeric oracle by perturbing alpha in place
    let eps = 1e-5;
    let mut numeric = Vec::new();
    let edges_down = net.alpha_down.num_edges();
    let edges_up = net.alpha_up.num_edges();
    for role in 0..2 {
        let rows = if role == 0 { edges_down } else { edges_up };
        for e in 0..rows {
            let len = if role == 0 { net.alpha_down.row(e).len() } else { net.alpha_up.row(e).len() };
            for i in 0..len {
                let bump = |net: &mut Supernet<f64>, delta: f64| {
                    let row = if role == 0 { net.alpha_down.row_mut(e) } else { net.alpha_up.row_mut(e) };
                    row[i] += delta;
                };
                bump(&mut net, eps);
                let fp = eval_loss(&net);
                bump(&mut net, -2.0 * eps);
                let fm = eval_loss(&net);
                bump(&mut net, eps);
                numeric.push((fp - fm) / (2.0 * eps));
            }
        }
    }
    check_close("alpha grads", &analytic, &numeric, DEFAULT_TOL).unwrap();
}

#[test]
fn two_epochs_bookkeeping_and_determinism() {
    let run = || {
        let net = Supernet::<f32>::build(tiny_net_config(16), 17).unwrap();
        let mut engine = SearchEngine::new(net, tiny_search_config(2, 17)).unwrap();
        let data = dataset(8, 16, 17);
        let (train, val) = carve_val_split(data, 0.25, 17).unwrap();
        assert_eq!((train.len(), val.len()), (6, 2));
        let (gd, gu) = engine.run(&train, &val, |_, _| Ok(())).unwrap();
        (engine.history, gd, gu)
    };
    let (h1, gd1, gu1) = run();
    let (h2, gd2, gu2) = run();
    assert_eq!(h1.len(), 2);
    assert_eq!(h1[0].epoch, 0);
    assert_eq!(h1[1].epoch, 1);
    assert!(h1[0].lr > h1[1].lr, "cosine schedule decays");
    // bit-identical histories and identical genotypes
    for (a, b) in h1.iter().zip(&h2) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.miou.to_bits(), b.miou.to_bits());
        assert_eq!(a.dsc.to_bits(), b.dsc.to_bits());
        assert_eq!(a.pixel_accuracy.to_bits(), b.pixel_accuracy.to_bits());
        assert_eq!(a.genotype_hash, b.genotype_hash);
    }
    assert_eq!(gd1, gd2);
    assert_eq!(gu1, gu2);
}

#[test]
fn carve_val_split_properties() {
    let data = dataset(10, 16, 19);
    let (tr, va) = carve_val_split(data.clone(), 0.2, 19).unwrap();
    assert_eq!((tr.len(), va.len()), (8, 2));
    let (tr2, va2) = carve_val_split(data.clone(), 0.2, 19).unwrap();
    assert_eq!(tr.iter().map(|s| &s.id).collect::<Vec<_>>(), tr2.iter().map(|s| &s.id).collect::<Vec<_>>());
    assert_eq!(va.iter().map(|s| &s.id).collect::<Vec<_>>(), va2.iter().map(|s| &s.id).collect::<Vec<_>>());
    // no overlap
    for v in &va {
        assert!(tr.iter().all(|t| t.id != v.id));
    }
    assert!(carve_val_split(Vec::new(), 0.2, 1).is_err());
    // a single sample cannot feed both splits
    assert!(carve_val_split(dataset(1, 16, 1), 0.2, 1).is_err());
}

#[test]
fn empty_splits_are_rejected() {
    let net = Supernet::<f32>::build(tiny_net_config(16), 23).unwrap();
    let mut engine = SearchEngine::new(net, tiny_search_config(1, 23)).unwrap();
    let data = dataset(2, 16, 23);
    assert!(engine.run_epoch(0, &[], &data).is_err());
    assert!(engine.run_epoch(0, &data, &[]).is_err());
}
