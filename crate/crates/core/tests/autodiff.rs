use proptest::prelude::*;
use stpp::autodiff::{grad_check, rel_err, AutodiffError, Mask, ParamStore, Tape, Tensor, Var};
use stpp::rng::RngState;

fn random(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn positive(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| 0.5 + rng.uniform()).collect()).unwrap()
}

// Random linear functional of `y`, so no primitive gets a trivially zero gradient.
fn probe<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> stpp::autodiff::Result<Var<'t, f64>> {
    let mut rng = RngState::new(seed, 99);
    let w = tape.constant(random(&y.shape(), &mut rng));
    Ok(y.mul(w)?.sum())
}

fn check<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> stpp::autodiff::Result<Var<'t, f64>>,
{
    let rep = grad_check(f, store, 1e-5, 1e-4).unwrap();
    assert!(rep.passed(), "{:?}", rep.per_param);
    rep.max_rel_err
}

#[test]
fn softmax_singleton_axis_is_one() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(vec![1, 1], &[-3.7]).unwrap());
    assert_eq!(x.softmax(1).unwrap().value().data(), &[1.0]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 5], 0.1));
    let g = tape.constant(Tensor::ones(&[5]));
    let b = tape.constant(Tensor::zeros(&[5]));
    let y = x.layer_norm(g, b, 1e-5).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn derivative_of_x_exp_x() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(1.0)).unwrap();
    fn f<'t>(t: &'t Tape<f64>, s: &ParamStore<f64>) -> stpp::autodiff::Result<Var<'t, f64>> {
        let x = t.param(s, "x")?;
        Ok(x.mul(x.exp())?.sum())
    }
    let tape = Tape::new();
    let loss = f(&tape, &store).unwrap();
    let g = tape.backward(loss).unwrap().params(&store)["x"].item();
    let two_e = 2.0 * std::f64::consts::E;
    let h = 1e-5;
    let num = ((1.0f64 + h) * (1.0 + h).exp() - (1.0f64 - h) * (1.0f64 - h).exp()) / (2.0 * h);
    assert!(((g - two_e) / two_e).abs() < 1e-14);
    assert!(((g - num) / num).abs() < 1e-9);
}

#[test]
fn sum_gradient_is_ones() {
    let mut store = ParamStore::new();
    store.insert("W", random(&[3, 4], &mut RngState::new(1, 0))).unwrap();
    let tape = Tape::new();
    let loss = tape.param(&store, "W").unwrap().sum();
    let g = tape.backward(loss).unwrap().params(&store);
    assert_eq!(g["W"], Tensor::ones(&[3, 4]));
}

#[test]
fn unreachable_params_get_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.insert("used", Tensor::ones(&[2])).unwrap();
    store.insert("unused", Tensor::ones(&[3])).unwrap();
    let tape = Tape::new();
    let loss = tape.param(&store, "used").unwrap().sum();
    let g = tape.backward(loss).unwrap().params(&store);
    assert_eq!(g["unused"], Tensor::zeros(&[3]));
}

fn mlp_store(seed: u64) -> ParamStore<f64> {
    let mut rng = RngState::new(seed, 0);
    let mut s = ParamStore::new();
    s.insert_uniform("l1.W", &[4, 6], 4, &mut rng).unwrap();
    s.insert_uniform("l1.b", &[6], 4, &mut rng).unwrap();
    s.insert_uniform("l2.W", &[6, 2], 6, &mut rng).unwrap();
    s.insert_uniform("l2.b", &[2], 6, &mut rng).unwrap();
    s
}

fn mlp<'t>(t: &'t Tape<f64>, s: &ParamStore<f64>) -> stpp::autodiff::Result<Var<'t, f64>> {
    let x = t.constant(random(&[5, 4], &mut RngState::new(7, 1)));
    let h = x.matmul(t.param(s, "l1.W")?)?.add(t.param(s, "l1.b")?)?.elu();
    let y = h.matmul(t.param(s, "l2.W")?)?.add(t.param(s, "l2.b")?)?.softplus();
    Ok(y.log()?.mean())
}

#[test]
fn mlp_gradients_match_central_differences() {
    check(&mlp_store(2), mlp);
}

#[test]
fn repeated_backward_is_identical() {
    let store = mlp_store(3);
    let tape = Tape::new();
    let loss = mlp(&tape, &store).unwrap();
    let a = tape.backward(loss).unwrap().params(&store);
    let b = tape.backward(loss).unwrap().params(&store);
    assert_eq!(a, b);
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let msg = a.matmul(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(a.add(b).is_err());
}

#[test]
fn log_and_div_domain_errors() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap());
    assert!(matches!(z.log(), Err(AutodiffError::Domain { .. })));
    assert!(matches!(z.div(z), Err(AutodiffError::Domain { .. })));
}

#[test]
fn dropout_identity_cases() {
    let x = random(&[4, 8], &mut RngState::new(4, 0));
    let eval = Tape::new();
    let v = eval.constant(x.clone());
    assert_eq!(v.dropout(0.5).unwrap().value(), x);
    let train = Tape::training(RngState::new(1, 2));
    let v = train.constant(x.clone());
    assert_eq!(v.dropout(0.0).unwrap().value(), x);
    let d = v.dropout(0.5).unwrap().value();
    assert_ne!(d, x);
    for (a, b) in d.data().iter().zip(x.data()) {
        assert!(*a == 0.0 || (*a - 2.0 * b).abs() < 1e-15);
    }
}

#[test]
fn masked_softmax_rows() {
    let mut rng = RngState::new(5, 0);
    let tape = Tape::new();
    let x = tape.constant(random(&[2, 4, 4], &mut rng));
    let p = x.masked_fill(&Mask::causal(4)).unwrap().softmax(2).unwrap().value();
    for b in 0..2 {
        for i in 0..4 {
            let row: f64 = (0..4).map(|j| p.at(&[b, i, j])).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for j in i + 1..4 {
                assert_eq!(p.at(&[b, i, j]), 0.0);
            }
        }
    }
    let all = Mask { shape: vec![1, 4], data: vec![true; 4] };
    assert!(matches!(x.masked_fill(&all).unwrap().softmax(2), Err(AutodiffError::AllMasked)));
}

#[test]
fn masked_softmax_gradient() {
    let mut store = ParamStore::new();
    store.insert("x", random(&[2, 3, 3], &mut RngState::new(6, 0))).unwrap();
    check(&store, |t, s| {
        let y = t.param(s, "x")?.masked_fill(&Mask::causal(3))?.softmax(2)?;
        probe(t, y, 1)
    });
}

#[test]
fn layer_norm_gradient() {
    let mut rng = RngState::new(8, 0);
    let mut store = ParamStore::new();
    store.insert("x", random(&[3, 5], &mut rng)).unwrap();
    store.insert("g", random(&[5], &mut rng)).unwrap();
    store.insert("b", random(&[5], &mut rng)).unwrap();
    check(&store, |t, s| {
        let y = t.param(s, "x")?.layer_norm(t.param(s, "g")?, t.param(s, "b")?, 1e-5)?;
        probe(t, y, 2)
    });
}

#[test]
fn batched_matmul_gradient() {
    let mut rng = RngState::new(9, 0);
    let mut store = ParamStore::new();
    store.insert("a", random(&[2, 3, 4], &mut rng)).unwrap();
    store.insert("b", random(&[2, 4, 5], &mut rng)).unwrap();
    store.insert("w", random(&[4, 2], &mut rng)).unwrap();
    check(&store, |t, s| {
        let a = t.param(s, "a")?;
        let y = a.matmul(t.param(s, "b")?)?;
        let z = a.matmul(t.param(s, "w")?)?;
        Ok(probe(t, y, 3)?.add(probe(t, z, 4)?)?)
    });
}

#[test]
fn dropout_gradient_uses_same_mask() {
    let mut store = ParamStore::new();
    store.insert("x", random(&[4, 6], &mut RngState::new(10, 0))).unwrap();
    fn f<'t>(t: &'t Tape<f64>, s: &ParamStore<f64>) -> stpp::autodiff::Result<Var<'t, f64>> {
        let y = t.param(s, "x")?.dropout(0.3)?;
        probe(t, y, 5)
    }
    let tape = Tape::training(RngState::new(1, 1));
    let loss = f(&tape, &store).unwrap();
    let g = tape.backward(loss).unwrap().params(&store)["x"].clone();
    let w = random(&[4, 6], &mut RngState::new(5, 99));
    let y = {
        let t2 = Tape::training(RngState::new(1, 1));
        let y = t2.param(&store, "x").unwrap().dropout(0.3).unwrap().value();
        y
    };
    for i in 0..g.len() {
        let x = store.value("x").unwrap().data()[i];
        let scale = y.data()[i] / x;
        assert!(rel_err(g.data()[i], w.data()[i] * scale) < 1e-12);
    }
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Shift,
    Exp,
    Log,
    Tanh,
    Elu,
    Softplus,
    Broadcast,
    Reshape,
    Permute,
    Transpose,
    Slice,
    Concat,
    SumAxis,
    MeanAxis,
    Mean,
    Softmax,
}

const PRIMS: [Prim; 22] = [
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::Div,
    Prim::Neg,
    Prim::Scale,
    Prim::Shift,
    Prim::Exp,
    Prim::Log,
    Prim::Tanh,
    Prim::Elu,
    Prim::Softplus,
    Prim::Broadcast,
    Prim::Reshape,
    Prim::Permute,
    Prim::Transpose,
    Prim::Slice,
    Prim::Concat,
    Prim::SumAxis,
    Prim::MeanAxis,
    Prim::Mean,
    Prim::Softmax,
];

fn apply<'t>(p: Prim, t: &'t Tape<f64>, s: &ParamStore<f64>) -> stpp::autodiff::Result<Var<'t, f64>> {
    let x = t.param(s, "x")?;
    let y = t.param(s, "y")?;
    let r = x.shape().len();
    let last = r - 1;
    Ok(match p {
        Prim::Add => x.add(y)?,
        Prim::Sub => x.sub(y)?,
        Prim::Mul => x.mul(y)?,
        Prim::Div => x.div(y)?,
        Prim::Neg => x.neg(),
        Prim::Scale => x.scale(-1.7),
        Prim::Shift => x.add_scalar(0.3),
        Prim::Exp => x.exp(),
        Prim::Log => y.log()?,
        Prim::Tanh => x.tanh(),
        Prim::Elu => x.elu(),
        Prim::Softplus => x.softplus(),
        Prim::Broadcast => {
            let mut shape = vec![2];
            shape.extend(y.shape());
            y.broadcast_to(&shape)?
        }
        Prim::Reshape => {
            let n: usize = x.shape().iter().product();
            x.reshape(&[n])?
        }
        Prim::Permute => {
            let perm: Vec<usize> = (0..r).rev().collect();
            x.permute(&perm)?
        }
        Prim::Transpose => {
            if r < 2 {
                x.neg()
            } else {
                x.transpose()?
            }
        }
        Prim::Slice => {
            let n = x.shape()[last];
            x.slice(last, n / 2, n)?
        }
        Prim::Concat => Var::concat(&[x, x.exp(), x], 0)?,
        Prim::SumAxis => x.sum_axis(0)?,
        Prim::MeanAxis => x.mean_axis(last)?,
        Prim::Mean => x.mean(),
        Prim::Softmax => x.softmax(last)?,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn every_primitive_passes_grad_check(
        dims in proptest::collection::vec(1usize..4, 1..=4),
        bcast in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let mut rng = RngState::new(seed, 0);
        let mut store = ParamStore::new();
        store.insert("x", random(&dims, &mut rng)).unwrap();
        // y broadcasts against x on the leading axis when requested.
        let ydims = if bcast { dims[1..].to_vec() } else { dims.clone() };
        store.insert("y", positive(&ydims, &mut rng)).unwrap();
        for p in PRIMS {
            let rep = grad_check(|t, s| { let v = apply(p, t, s)?; probe(t, v, seed) }, &store, 1e-5, 1e-4).unwrap();
            prop_assert!(rep.passed(), "{:?} on {:?}: {:?}", p, dims, rep.per_param);
        }
    }
}
