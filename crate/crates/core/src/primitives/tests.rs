use super::*;
use crate::gradcheck::{check_close, numeric_gradient, DEFAULT_EPS, DEFAULT_TOL};

fn build_one(kind: PrimitiveKind, c_in: usize, role: EdgeRole, seed: u64) -> (ParamStore<f64>, PrimitiveInstance) {
    let mut store = ParamStore::new();
    let mut rng = Rng64::new(seed);
    let op = build_primitive(&mut store, &mut rng, "op", kind, c_in, role).unwrap();
    (store, op)
}

fn apply_once(store: &ParamStore<f64>, op: &PrimitiveInstance, input: Shape) -> Shape {
    let mut tape = Tape::<f64>::new();
    let mut rng = Rng64::new(17);
    let x = tape
        .leaf((0..input.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect(), input, false)
        .unwrap();
    let mut pv = ParamVars::new(store, false);
    let y = op.apply(&mut tape, &mut pv, store, x).unwrap();
    tape.shape(y)
}

#[test]
fn down_conv_contract() {
    let (store, op) = build_one(PrimitiveKind::DownConv, 8, EdgeRole::Down, 1);
    assert_eq!(apply_once(&store, &op, Shape::new(1, 8, 16, 16)), Shape::new(1, 16, 8, 8));
}

#[test]
fn up_conv_contract() {
    let (store, op) = build_one(PrimitiveKind::UpConv, 16, EdgeRole::Up, 2);
    assert_eq!(apply_once(&store, &op, Shape::new(1, 16, 8, 8)), Shape::new(1, 8, 16, 16));
}

#[test]
fn identity_is_parameter_free_passthrough() {
    let (store, op) = build_one(PrimitiveKind::Identity, 8, EdgeRole::Normal, 3);
    assert_eq!(op.param_count(&store), 0);

    let mut tape = Tape::<f64>::new();
    let data: Vec<f64> = (0..8 * 16).map(|i| i as f64 * 0.5).collect();
    let x = tape.leaf(data.clone(), Shape::new(1, 8, 4, 4), false).unwrap();
    let mut pv = ParamVars::new(&store, false);
    let y = op.apply(&mut tape, &mut pv, &store, x).unwrap();
    assert_eq!(tape.data(y), data.as_slice());
}

#[test]
fn depth_and_dilation_contracts() {
    let (store, op) = build_one(PrimitiveKind::DepthConv, 4, EdgeRole::Normal, 4);
    assert_eq!(apply_once(&store, &op, Shape::new(1, 4, 8, 8)), Shape::new(1, 4, 8, 8));

    let (store, op) = build_one(PrimitiveKind::DownDilationConv, 4, EdgeRole::Down, 5);
    assert_eq!(apply_once(&store, &op, Shape::new(1, 4, 8, 8)), Shape::new(1, 8, 4, 4));
}

#[test]
fn all_kinds_satisfy_contract_over_even_sizes() {
    let mut rng = Rng64::new(6);
    for &(kind, role) in &[
        (PrimitiveKind::AvgPool, EdgeRole::Down),
        (PrimitiveKind::MaxPool, EdgeRole::Down),
        (PrimitiveKind::DownConv, EdgeRole::Down),
        (PrimitiveKind::DownCweight, EdgeRole::Down),
        (PrimitiveKind::DownDilationConv, EdgeRole::Down),
        (PrimitiveKind::DownDepthConv, EdgeRole::Down),
        (PrimitiveKind::UpCweight, EdgeRole::Up),
        (PrimitiveKind::UpDepthConv, EdgeRole::Up),
        (PrimitiveKind::UpConv, EdgeRole::Up),
        (PrimitiveKind::UpDilationConv, EdgeRole::Up),
        (PrimitiveKind::Identity, EdgeRole::Normal),
        (PrimitiveKind::Cweight, EdgeRole::Normal),
        (PrimitiveKind::Conv, EdgeRole::Normal),
        (PrimitiveKind::DilationConv, EdgeRole::Normal),
        (PrimitiveKind::DepthConv, EdgeRole::Normal),
    ] {
        let c_in = 8;
        let (store, op) = build_one(kind, c_in, role, 100 + kind as u64);
        for h in [4usize, 8, 12, 16] {
            for _ in 0..2 {
                let w = 2 * rng.range_inclusive(2, 8) as usize;
                let input = Shape::new(1, c_in, h, w);
                let got = apply_once(&store, &op, input);
                assert_eq!(got, kind.contract().output_shape(input), "{} on {}", kind.name(), input);
            }
        }
    }
}

#[test]
fn param_count_is_deterministic_per_kind_and_width() {
    for &(kind, role) in &[
        (PrimitiveKind::DownConv, EdgeRole::Down),
        (PrimitiveKind::DownCweight, EdgeRole::Down),
        (PrimitiveKind::UpDepthConv, EdgeRole::Up),
        (PrimitiveKind::Cweight, EdgeRole::Normal),
    ] {
        let (s1, op1) = build_one(kind, 8, role, 11);
        let (s2, op2) = build_one(kind, 8, role, 11);
        assert_eq!(op1.param_count(&s1), op2.param_count(&s2));
        assert_eq!(s1.content_hash(), s2.content_hash(), "{}", kind.name());
        let (s3, _) = build_one(kind, 8, role, 12);
        assert_ne!(s1.content_hash(), s3.content_hash());
    }
    // hand-checked count: down_conv = 3x3 conv (16*8*9) + gn gamma/beta (16+16)
    let (s, op) = build_one(PrimitiveKind::DownConv, 8, EdgeRole::Down, 13);
    assert_eq!(op.param_count(&s), 16 * 8 * 9 + 32);
}

#[test]
fn illegal_kind_role_pairings_rejected() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng64::new(9);
    assert!(build_primitive(&mut store, &mut rng, "x", PrimitiveKind::UpConv, 8, EdgeRole::Down).is_err());
    assert!(build_primitive(&mut store, &mut rng, "y", PrimitiveKind::DownConv, 8, EdgeRole::Normal).is_err());
    assert!(build_primitive(&mut store, &mut rng, "z", PrimitiveKind::Identity, 8, EdgeRole::Up).is_err());
    // channel constraint: GN groups must divide the normalized width
    assert!(build_primitive(&mut store, &mut rng, "w", PrimitiveKind::Conv, 6, EdgeRole::Normal).is_err());
}

#[test]
fn apply_rejects_wrong_channel_count() {
    let (store, op) = build_one(PrimitiveKind::Conv, 8, EdgeRole::Normal, 14);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(vec![0.0; 4 * 16], Shape::new(1, 4, 4, 4), false).unwrap();
    let mut pv = ParamVars::new(&store, false);
    assert!(op.apply(&mut tape, &mut pv, &store, x).is_err());
}

#[test]
fn se_with_zero_weights_halves_input() {
    // all-zero fc weights and biases: gate = sigmoid(0) = 0.5 exactly
    let mut tape = Tape::<f64>::new();
    let mut rng = Rng64::new(15);
    let xdata: Vec<f64> = (0..8 * 9).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let x = tape.leaf(xdata.clone(), Shape::new(1, 8, 3, 3), false).unwrap();
    let w1 = tape.leaf(vec![0.0; 2 * 8], Shape::new(2, 8, 1, 1), false).unwrap();
    let b1 = tape.leaf(vec![0.0; 2], Shape::vector(2), false).unwrap();
    let w2 = tape.leaf(vec![0.0; 8 * 2], Shape::new(8, 2, 1, 1), false).unwrap();
    let b2 = tape.leaf(vec![0.0; 8], Shape::vector(8), false).unwrap();
    let y = se_reweight(&mut tape, x, w1, b1, w2, b2).unwrap();
    for (out, inp) in tape.data(y).iter().zip(&xdata) {
        assert_eq!(*out, 0.5 * inp);
    }
}

#[test]
fn se_of_zero_input_is_zero_and_gate_bounded() {
    let mut rng = Rng64::new(16);
    // zero input stays zero under any weights
    {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![0.0; 4 * 16], Shape::new(1, 4, 4, 4), false).unwrap();
        let w1 = tape.leaf((0..4).map(|_| rng.uniform(-1.0, 1.0)).collect(), Shape::new(1, 4, 1, 1), false).unwrap();
        let b1 = tape.leaf(vec![0.3], Shape::vector(1), false).unwrap();
        let w2 = tape.leaf((0..4).map(|_| rng.uniform(-1.0, 1.0)).collect(), Shape::new(4, 1, 1, 1), false).unwrap();
        let b2 = tape.leaf(vec![-0.2; 4], Shape::vector(4), false).unwrap();
        let y = se_reweight(&mut tape, x, w1, b1, w2, b2).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }
    // gate stays in (0,1): per-channel output magnitude never exceeds input
    for trial in 0..20 {
        let (store, op) = build_one(PrimitiveKind::Cweight, 4, EdgeRole::Normal, 200 + trial);
        let mut tape = Tape::<f64>::new();
        let xdata: Vec<f64> = (0..4 * 16).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let x = tape.leaf(xdata.clone(), Shape::new(1, 4, 4, 4), false).unwrap();
        let mut pv = ParamVars::new(&store, false);
        let y = op.apply(&mut tape, &mut pv, &store, x).unwrap();
        for (out, inp) in tape.data(y).iter().zip(&xdata) {
            assert!(out.abs() < inp.abs() || *inp == 0.0, "gate must shrink: {out} vs {inp}");
            assert!(out.signum() == inp.signum() || *inp == 0.0, "gate must be positive");
        }
    }
}

/// Finite-difference check of the full gradient (input and every parameter)
/// through one primitive.
fn gradcheck_primitive(kind: PrimitiveKind, role: EdgeRole, c_in: usize, input: Shape, seed: u64) {
    let (store, op) = build_one(kind, c_in, role, seed);
    let ids = op.param_ids();
    let mut rng = Rng64::derive(seed, &[0xfd]);
    let mut inputs: Vec<Vec<f64>> = vec![(0..input.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect()];
    for &id in &ids {
        inputs.push(store.get(id).data.clone());
    }

    let run = |vals: &[Vec<f64>], rg: bool| -> (Tape<f64>, Vec<Var>) {
        let mut tape = Tape::<f64>::new();
        let mut vars = Vec::new();
        let x = tape.leaf(vals[0].clone(), input, rg).unwrap();
        vars.push(x);
        let mut pv = ParamVars::new(&store, rg);
        for (i, &id) in ids.iter().enumerate() {
            let v = tape.leaf(vals[i + 1].clone(), store.get(id).shape, rg).unwrap();
            pv.preset(id, v);
            vars.push(v);
        }
        let y = op.apply(&mut tape, &mut pv, &store, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        vars.insert(0, loss);
        (tape, vars)
    };

    let (mut tape, vars) = run(&inputs, true);
    tape.backward(vars[0]).unwrap();
    let analytic: Vec<Vec<f64>> = vars[1..].iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    let numeric = numeric_gradient(&inputs, DEFAULT_EPS, |vals| {
        let (t, vs) = run(vals, false);
        t.scalar_value(vs[0])
    });
    for (slot, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        check_close(&format!("{} slot {slot}", kind.name()), a, n, DEFAULT_TOL).unwrap();
    }
}

#[test]
fn down_cweight_gradients_match_finite_differences() {
    gradcheck_primitive(PrimitiveKind::DownCweight, EdgeRole::Down, 4, Shape::new(1, 4, 6, 6), 31);
}

#[test]
fn depthwise_and_up_gradients_match_finite_differences() {
    gradcheck_primitive(PrimitiveKind::DownDepthConv, EdgeRole::Down, 4, Shape::new(1, 4, 4, 4), 32);
    gradcheck_primitive(PrimitiveKind::UpCweight, EdgeRole::Up, 8, Shape::new(1, 8, 3, 3), 33);
    gradcheck_primitive(PrimitiveKind::UpDepthConv, EdgeRole::Up, 8, Shape::new(1, 8, 3, 3), 34);
}
