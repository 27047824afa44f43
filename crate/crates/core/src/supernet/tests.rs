use super::*;
use crate::search_space::{argmax_gates, sample_binary_gates};

fn small_config(depth: usize, m: usize, hw: usize) -> NetworkConfig {
    NetworkConfig {
        depth,
        base_channels: 4,
        num_classes: 3,
        m,
        in_channels: 1,
        input_h: hw,
        input_w: hw,
    }
}

fn random_batch(rng: &mut Rng64, n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    (0..n * c * h * w).map(|_| rng.uniform(0.0, 1.0)).collect()
}

#[test]
fn logits_shape_matches_input_resolution() {
    let config = NetworkConfig {
        depth: 2,
        base_channels: 8,
        num_classes: 4,
        m: 2,
        in_channels: 1,
        input_h: 32,
        input_w: 32,
    };
    let net = Supernet::<f64>::build(config, 5).unwrap();
    let mut rng = Rng64::new(6);
    let mut tape = Tape::new();
    let x = tape.leaf(random_batch(&mut rng, 1, 1, 32, 32), Shape::new(1, 1, 32, 32), false).unwrap();
    let pass = net.forward(&mut tape, x, &SupernetMode::Continuous, false).unwrap();
    assert_eq!(tape.shape(pass.logits), Shape::new(1, 4, 32, 32));

    // binarized mode agrees on the shape
    let mut gate_rng = Rng64::new(7);
    let down = sample_binary_gates(&net.alpha_down, &mut gate_rng);
    let up = sample_binary_gates(&net.alpha_up, &mut gate_rng);
    let mut tape = Tape::new();
    let x = tape.leaf(random_batch(&mut rng, 2, 1, 32, 32), Shape::new(2, 1, 32, 32), false).unwrap();
    let pass = net.forward(&mut tape, x, &SupernetMode::Binarized { down: &down, up: &up }, false).unwrap();
    assert_eq!(tape.shape(pass.logits), Shape::new(2, 4, 32, 32));
}

#[test]
fn round_trip_preserves_resolution_across_depths() {
    for depth in 1..=3 {
        let hw = 8 << depth;
        let config = small_config(depth, 1, hw);
        let net = Supernet::<f64>::build(config, 11).unwrap();
        let mut rng = Rng64::new(12);
        let mut tape = Tape::new();
        let x = tape.leaf(random_batch(&mut rng, 1, 1, hw, hw), Shape::new(1, 1, hw, hw), false).unwrap();
        let pass = net.forward(&mut tape, x, &SupernetMode::Continuous, false).unwrap();
        assert_eq!(tape.shape(pass.logits), Shape::new(1, 3, hw, hw));
    }
}

#[test]
fn minimal_supernet_backward_populates_every_gradient() {
    let config = small_config(1, 1, 8);
    let net = Supernet::<f64>::build(config, 21).unwrap();
    let mut rng = Rng64::new(22);
    let mut tape = Tape::new();
    let x = tape.leaf(random_batch(&mut rng, 1, 1, 8, 8), Shape::new(1, 1, 8, 8), false).unwrap();
    let pass = net.forward(&mut tape, x, &SupernetMode::Continuous, true).unwrap();
    let labels: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
    let loss = tape.dice_loss(pass.logits, &labels, 1.0).unwrap();
    tape.backward(loss).unwrap();

    // every parameter of the network is on the tape and has a gradient
    let mut seen = 0;
    for (_, var) in pass.params.materialized() {
        assert!(tape.grad(var).is_some());
        seen += 1;
    }
    assert_eq!(seen, net.store.len(), "continuous mode touches every parameter");

    // alpha gradients exist and are not all zero
    let (down_rows, up_rows) = pass.alpha_vars.as_ref().unwrap();
    let norm: f64 = down_rows
        .iter()
        .chain(up_rows)
        .flat_map(|&v| tape.grad(v).unwrap().to_vec())
        .map(|g| g * g)
        .sum();
    assert!(norm > 0.0, "loss must be sensitive to alpha");
}

#[test]
fn encoder_ladder_doubles_channels_and_halves_resolution() {
    let config = NetworkConfig {
        depth: 3,
        base_channels: 8,
        num_classes: 4,
        m: 2,
        in_channels: 1,
        input_h: 64,
        input_w: 64,
    };
    let net = Supernet::<f64>::build(config, 31).unwrap();
    let mut rng = Rng64::new(32);
    let mut tape = Tape::new();
    let x = tape.leaf(random_batch(&mut rng, 1, 1, 64, 64), Shape::new(1, 1, 64, 64), false).unwrap();

    // replicate the encoder loop to observe per-level shapes
    let mut pv = ParamVars::new(&net.store, false);
    let stem_out = net.stem.apply(&mut tape, &mut pv, &net.store, x).unwrap();
    assert_eq!(tape.shape(stem_out), Shape::new(1, 8, 64, 64));

    let gates = argmax_gates(&net.alpha_down);
    let mut outs: Vec<Var> = Vec::new();
    for (d, cell) in net.down_cells.iter().enumerate() {
        let prev = if d == 0 { stem_out } else { outs[d - 1] };
        let prev_prev_raw = if d <= 1 { stem_out } else { outs[d - 2] };
        let prev_prev = match &cell.pre {
            Some(pre) => pre.apply(&mut tape, &mut pv, &net.store, prev_prev_raw).unwrap(),
            None => prev_prev_raw,
        };
        let out = forward_cell(
            &mut tape,
            &mut pv,
            &net.store,
            &net.down_spec,
            &cell.edges,
            &cell.proj,
            prev_prev,
            prev,
            CellEdgeMode::Binarized(&gates),
        )
        .unwrap();
        outs.push(out);
    }
    let shapes: Vec<Shape> = outs.iter().map(|&v| tape.shape(v)).collect();
    assert_eq!(shapes[0], Shape::new(1, 16, 32, 32));
    assert_eq!(shapes[1], Shape::new(1, 32, 16, 16));
    assert_eq!(shapes[2], Shape::new(1, 64, 8, 8));
}

#[test]
fn binarized_mode_requires_matching_gates() {
    let config = small_config(1, 2, 8);
    let net = Supernet::<f64>::build(config, 41).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(vec![0.5; 64], Shape::new(1, 1, 8, 8), false).unwrap();
    let bad = BinaryGates { active: vec![0] }; // wrong edge count
    let good = argmax_gates(&net.alpha_up);
    assert!(net
        .forward(&mut tape, x, &SupernetMode::Binarized { down: &bad, up: &good }, false)
        .is_err());
}

#[test]
fn continuous_one_hot_equals_binarized_whole_net() {
    let mut rng = Rng64::new(51);
    for trial in 0..4 {
        let config = small_config(2, 2, 16);
        let mut net = Supernet::<f64>::build(config, 100 + trial).unwrap();
        // randomize alpha to a hard one-hot per edge
        for e in 0..net.alpha_down.num_edges() {
            let n = net.alpha_down.row(e).len();
            let hot = rng.next_below(n as u64) as usize;
            net.alpha_down.set_one_hot(e, hot);
        }
        for e in 0..net.alpha_up.num_edges() {
            let n = net.alpha_up.row(e).len();
            let hot = rng.next_below(n as u64) as usize;
            net.alpha_up.set_one_hot(e, hot);
        }
        let down = argmax_gates(&net.alpha_down);
        let up = argmax_gates(&net.alpha_up);

        let batch = random_batch(&mut rng, 1, 1, 16, 16);
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), Shape::new(1, 1, 16, 16), false).unwrap();
        let cont = net.forward(&mut tape, x, &SupernetMode::Continuous, false).unwrap();
        let bin = net
            .forward(&mut tape, x, &SupernetMode::Binarized { down: &down, up: &up }, false)
            .unwrap();
        for (a, b) in tape.data(cont.logits).iter().zip(tape.data(bin.logits)) {
            assert!((a - b).abs() <= 1e-6, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn binarized_backward_leaves_inactive_candidates_untouched() {
    let config = small_config(1, 1, 8);
    let net = Supernet::<f64>::build(config, 61).unwrap();
    let mut rng = Rng64::new(62);
    let down = sample_binary_gates(&net.alpha_down, &mut rng);
    let up = sample_binary_gates(&net.alpha_up, &mut rng);

    let mut tape = Tape::new();
    let x = tape.leaf(random_batch(&mut rng, 1, 1, 8, 8), Shape::new(1, 1, 8, 8), false).unwrap();
    let pass = net
        .forward(&mut tape, x, &SupernetMode::Binarized { down: &down, up: &up }, true)
        .unwrap();
    let labels: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
    let loss = tape.dice_loss(pass.logits, &labels, 1.0).unwrap();
    tape.backward(loss).unwrap();

    // materialized (active) parameters carry gradients; the rest of the
    // store never reached the tape
    let materialized: Vec<bool> = {
        let mut flags = vec![false; net.store.len()];
        for (id, var) in pass.params.materialized() {
            flags[id.index()] = true;
            assert!(tape.grad(var).is_some());
        }
        flags
    };
    let skipped = materialized.iter().filter(|&&f| !f).count();
    assert!(skipped > 0, "some candidate parameters must be inactive");

    // inactive candidates exist on every multi-candidate edge
    let total = net.store.len();
    assert!(skipped * 2 > total / 2, "expected a large inactive fraction, got {skipped}/{total}");
}

#[test]
fn binarized_tape_size_is_independent_of_candidate_count() {
    // node count of a gated pass stays the same whichever single path is
    // active, and is far below the continuous pass which materializes all
    // candidates
    let config = small_config(1, 1, 8);
    let net = Supernet::<f64>::build(config, 71).unwrap();
    let mut rng = Rng64::new(72);
    let batch = random_batch(&mut rng, 1, 1, 8, 8);

    let count_nodes = |mode: &SupernetMode| -> usize {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(batch.clone(), Shape::new(1, 1, 8, 8), false).unwrap();
        net.forward(&mut tape, x, mode, true).unwrap();
        tape.num_nodes()
    };

    let n_cont = count_nodes(&SupernetMode::Continuous);
    let up = BinaryGates { active: vec![2, 2] };
    for d in 0..6 {
        let down = BinaryGates { active: vec![d, d] };
        let n_gated = count_nodes(&SupernetMode::Binarized { down: &down, up: &up });
        // a gated pass materializes only the active path per edge, so it
        // stays far below the all-candidates pass regardless of the gate
        assert!(2 * n_gated < n_cont, "gate {d}: {n_gated} vs continuous {n_cont}");
        // and is reproducible for the same gates
        assert_eq!(n_gated, count_nodes(&SupernetMode::Binarized { down: &down, up: &up }));
    }
}

#[test]
fn batch_independence_per_sample() {
    let config = small_config(2, 1, 16);
    let net = Supernet::<f64>::build(config, 81).unwrap();
    let mut rng = Rng64::new(82);
    let a = random_batch(&mut rng, 1, 1, 16, 16);
    let b = random_batch(&mut rng, 1, 1, 16, 16);
    let mut joined = a.clone();
    joined.extend_from_slice(&b);

    let down = argmax_gates(&net.alpha_down);
    let up = argmax_gates(&net.alpha_up);
    let run = |data: Vec<f64>, n: usize| -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(data, Shape::new(n, 1, 16, 16), false).unwrap();
        let pass = net
            .forward(&mut tape, x, &SupernetMode::Binarized { down: &down, up: &up }, false)
            .unwrap();
        tape.data(pass.logits).to_vec()
    };
    let single = run(a, 1);
    let pair = run(joined, 2);
    // sample 0 of the pair is bit-identical to the single-sample run
    assert_eq!(&pair[..single.len()], single.as_slice());
}

#[test]
fn discrete_net_from_handbuilt_genotype() {
    let config = small_config(2, 2, 16);
    let gd = Genotype::handbuilt(CellRole::Down, 2);
    let gu = Genotype::handbuilt(CellRole::Up, 2);
    let net = DiscreteNet::<f64>::build(gd, gu, config, 91).unwrap();
    let mut rng = Rng64::new(92);
    let mut tape = Tape::new();
    let x = tape.leaf(random_batch(&mut rng, 1, 1, 16, 16), Shape::new(1, 1, 16, 16), false).unwrap();
    let pass = net.forward(&mut tape, x, false).unwrap();
    assert_eq!(tape.shape(pass.logits), Shape::new(1, 3, 16, 16));

    // strictly fewer parameters than the supernet with the same config
    let sup = Supernet::<f64>::build(config, 91).unwrap();
    assert!(net.store.total_values() < sup.store.total_values());
}

#[test]
fn discrete_net_rejects_mismatched_m() {
    let config = small_config(1, 2, 8);
    let gd = Genotype::handbuilt(CellRole::Down, 1);
    let gu = Genotype::handbuilt(CellRole::Up, 1);
    assert!(DiscreteNet::<f64>::build(gd, gu, config, 1).is_err());
}

#[test]
fn weight_copy_reproduces_one_hot_supernet() {
    // with m = 1 no edge is pruned, so the derived net must compute exactly
    // the hard-one-hot supernet function once weights are copied over
    let config = small_config(2, 1, 16);
    let mut sup = Supernet::<f64>::build(config, 101).unwrap();
    let mut rng = Rng64::new(102);
    for e in 0..sup.alpha_down.num_edges() {
        let n = sup.alpha_down.row(e).len();
        sup.alpha_down.set_one_hot(e, rng.next_below(n as u64) as usize);
    }
    for e in 0..sup.alpha_up.num_edges() {
        let n = sup.alpha_up.row(e).len();
        sup.alpha_up.set_one_hot(e, rng.next_below(n as u64) as usize);
    }
    let (gd, gu) = sup.derive_genotypes();
    gd.validate().unwrap();
    gu.validate().unwrap();

    let mut discrete = DiscreteNet::<f64>::build(gd, gu, config, 999).unwrap();
    discrete.copy_weights_from(&sup).unwrap();

    let batch = random_batch(&mut rng, 2, 1, 16, 16);
    let mut tape = Tape::new();
    let x = tape.leaf(batch, Shape::new(2, 1, 16, 16), false).unwrap();
    let sup_pass = sup.forward(&mut tape, x, &SupernetMode::Continuous, false).unwrap();
    let disc_pass = discrete.forward(&mut tape, x, false).unwrap();
    for (a, b) in tape.data(sup_pass.logits).iter().zip(tape.data(disc_pass.logits)) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn same_seed_builds_identical_networks() {
    let config = small_config(2, 2, 16);
    let a = Supernet::<f32>::build(config, 7).unwrap();
    let b = Supernet::<f32>::build(config, 7).unwrap();
    assert_eq!(a.weights_hash(), b.weights_hash());
    let c = Supernet::<f32>::build(config, 8).unwrap();
    assert_ne!(a.weights_hash(), c.weights_hash());
}
