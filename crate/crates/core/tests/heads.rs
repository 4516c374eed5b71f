use stpp::autodiff::{grad_check, ParamStore, Tape, Tensor};
use stpp::heads::{
    exp_head, exp_logprob, exp_sample, log_prob_space, log_prob_time, mvn_head, mvn_sample, realnvp_forward,
    realnvp_forward_values, realnvp_inverse, realnvp_inverse_values, softplus_fwd, softplus_inv, softsign_fwd,
    softsign_inv, time_logprob_value, HeadsError, MvnOut,
};
use stpp::linalg::{determinant, invert};
use stpp::neural::{init_params, NetConfig, TimeFlow};
use stpp::quadrature::{integrate, QuadConfig};
use stpp::rng::RngState;

fn cfg(d: usize) -> NetConfig {
    NetConfig { d_model: 8, n_layers: 1, n_heads: 2, n_in: 4, l_out: 3, d_space: d, dropout: 0.0, ..NetConfig::default() }
}

/// Only the head and flow parameters of a fresh network.
fn head_store(cfg: &NetConfig, seed: u64) -> ParamStore<f64> {
    let full: ParamStore<f64> = init_params(cfg, &mut RngState::new(seed, 10)).unwrap();
    let mut s = ParamStore::new();
    for (name, p) in full.iter() {
        if name.starts_with("head.") || name.starts_with("flow.") {
            s.insert(name.clone(), p.value.clone()).unwrap();
        }
    }
    s
}

fn random(shape: &[usize], scale: f64, rng: &mut RngState) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn zero_flow(s: &mut ParamStore<f64>) {
    let names: Vec<String> = s.names().filter(|n| n.starts_with("flow.")).cloned().collect();
    for n in names {
        s.get_mut(&n).unwrap().value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn random_spd(d: usize, rng: &mut RngState) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..i {
            l[i][j] = rng.normal();
        }
        l[i][i] = 0.5 + rng.uniform();
    }
    let mut sigma = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sigma[i * d + j] = (0..d).map(|k| l[i][k] * l[j][k]).sum();
        }
    }
    (sigma, l)
}

fn const_mvn<'t>(t: &'t Tape<f64>, mu: &[f64], l: &[Vec<f64>]) -> MvnOut<'t, f64> {
    let c = |v: f64| t.constant(Tensor::full(&[1, 1], v));
    MvnOut {
        mu: mu.iter().map(|m| c(*m)).collect(),
        chol: (0..mu.len()).map(|i| (0..=i).map(|j| c(l[i][j])).collect()).collect(),
    }
}

#[test]
fn exponential_basics() {
    assert!(exp_logprob(1e-300, 1.0).unwrap().abs() < 1e-12);
    assert!(matches!(exp_logprob(0.0, 1.0), Err(HeadsError::NonPositive(_))));
    let mut rng = RngState::new(1, 0);
    let mean = (0..1_000_000).map(|_| exp_sample(2.0, &mut rng)).sum::<f64>() / 1e6;
    assert!((mean - 2.0).abs() < 0.02, "{mean}");
}

#[test]
fn exp_head_is_positive() {
    let c = cfg(2);
    let s = head_store(&c, 3);
    let t = Tape::new();
    let h = t.constant(random(&[2, 3, 1], 30.0, &mut RngState::new(4, 0)));
    let beta = exp_head(&t, &s, h).unwrap().value();
    assert_eq!(beta.shape(), &[2, 3]);
    assert!(beta.data().iter().all(|b| *b > 0.0));
}

#[test]
fn gaussian_peak_value() {
    let t = Tape::new();
    let mvn = const_mvn(&t, &[0.3, -1.0], &[vec![1.0], vec![0.0, 1.0]]);
    let z = t.constant(Tensor::from_f64(vec![1, 1, 2], &[0.3, -1.0]).unwrap());
    let lp = mvn.log_prob(z).unwrap().value().item();
    assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
}

#[test]
fn gaussian_matches_dense_inverse() {
    let mut rng = RngState::new(7, 0);
    for d in [2, 3, 5] {
        let (sigma, l) = random_spd(d, &mut rng);
        let mu: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let x: Vec<f64> = (0..d).map(|_| 2.0 * rng.normal()).collect();
        let inv = invert(&sigma, d).unwrap();
        let r: Vec<f64> = (0..d).map(|i| x[i] - mu[i]).collect();
        let quad: f64 = (0..d).map(|i| (0..d).map(|j| r[i] * inv[i * d + j] * r[j]).sum::<f64>()).sum();
        let want = -0.5 * quad - 0.5 * determinant(&sigma, d).ln() - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        let t = Tape::new();
        let mvn = const_mvn(&t, &mu, &l);
        let got = mvn.log_prob(t.constant(Tensor::from_f64(vec![1, 1, d], &x).unwrap())).unwrap().value().item();
        assert!((got - want).abs() < 1e-10, "d={d}: {got} vs {want}");
    }
}

#[test]
fn gaussian_sample_covariance() {
    let mut rng = RngState::new(8, 0);
    let d = 3;
    let (sigma, l) = random_spd(d, &mut rng);
    let mu = [1.0, -2.0, 0.5];
    let n = 1_000_000;
    let mut mean = [0.0; 3];
    let mut cov = [0.0; 9];
    let draws: Vec<Vec<f64>> = (0..n).map(|_| mvn_sample(&mu, &l, &mut rng)).collect();
    for x in &draws {
        for i in 0..d {
            mean[i] += x[i] / n as f64;
        }
    }
    for x in &draws {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    let err: f64 = cov.iter().zip(&sigma).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err / norm < 0.01, "{}", err / norm);
}

#[test]
fn softsign_round_trip_and_values() {
    assert_eq!(softsign_fwd(1.0), 0.5);
    let mut z = 1e-6;
    while z < 1e3 {
        assert!((softsign_inv(softsign_fwd(z)) - z).abs() <= 1e-10 * z.max(1.0));
        z *= 1.1;
    }
    for &t in &[0.01f64, 0.2, 0.5, 0.77, 0.95] {
        let closed = (-(t / (1.0 - t)) - 2.0 * (1.0 - t).ln()).exp();
        let got = time_logprob_value(TimeFlow::Softsign, t, 1.0).unwrap().exp();
        assert!((got - closed).abs() < 1e-10);
    }
}

#[test]
fn softplus_round_trip() {
    let mut z = 1e-6;
    while z < 1e3 {
        assert!((softplus_inv(softplus_fwd(z)) - z).abs() <= 1e-10 * z.max(1.0), "{z}");
        z *= 1.1;
    }
}

#[test]
fn time_densities_integrate_to_one() {
    let q = QuadConfig::default();
    let p = |flow: TimeFlow, beta: f64| move |t: f64| time_logprob_value(flow, t, beta).unwrap().exp();
    let unit = integrate(p(TimeFlow::Softsign, 1.0), 0.0, 1.0, &q).unwrap();
    assert!((unit - 1.0).abs() < 1e-6, "{unit}");
    for beta in [0.01, 0.3, 2.0, 25.0] {
        let m = integrate(p(TimeFlow::Softsign, beta), 0.0, 1.0, &q).unwrap();
        assert!((m - 1.0).abs() < 1e-3, "softsign beta={beta}: {m}");
        let m = integrate(p(TimeFlow::Softplus, beta), 0.0, 60.0 * beta, &q).unwrap();
        assert!((m - 1.0).abs() < 1e-3, "softplus beta={beta}: {m}");
    }
}

#[test]
fn time_target_out_of_range_is_an_error() {
    let t = Tape::new();
    let beta = t.constant(Tensor::full(&[1, 2], 1.0));
    let target = Tensor::from_f64(vec![1, 2], &[0.5, 1.0]).unwrap();
    match log_prob_time(TimeFlow::Softsign, beta, &target) {
        Err(HeadsError::TimeDomain { index, .. }) => assert_eq!(index, 1),
        other => panic!("{:?}", other.map(|v| v.value())),
    }
}

#[test]
fn zero_flow_is_identity() {
    let c = cfg(3);
    let mut s = head_store(&c, 5);
    zero_flow(&mut s);
    let mut rng = RngState::new(1, 0);
    let z = random(&[4, 3], 1.0, &mut rng);
    let ctx = random(&[4, 3], 1.0, &mut rng);
    let (x, ld) = realnvp_forward_values(&s, &c, &z, &ctx).unwrap();
    assert_eq!(x, z);
    assert!(ld.iter().all(|v| *v == 0.0));
}

#[test]
fn flow_needs_two_dimensions() {
    let c = cfg(2);
    let s = head_store(&c, 5);
    let t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 1]));
    assert!(matches!(realnvp_forward(&t, &s, &c, x, x), Err(HeadsError::FlowDimension(1))));
}

#[test]
fn realnvp_round_trip_and_logdet() {
    for d in [2, 3] {
        let c = cfg(d);
        let s = head_store(&c, 6 + d as u64);
        let mut rng = RngState::new(2, 0);
        let z = random(&[5, d], 1.5, &mut rng);
        let ctx = random(&[5, d], 1.0, &mut rng);
        let (x, ld) = realnvp_forward_values(&s, &c, &z, &ctx).unwrap();
        let (back, ld_inv) = realnvp_inverse_values(&s, &c, &x, &ctx).unwrap();
        for (a, b) in back.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in ld.iter().zip(&ld_inv) {
            assert!((a + b).abs() < 1e-10);
        }
        let h = 1e-6;
        for row in 0..5 {
            let point = |zr: &[f64]| {
                let zt = Tensor::from_f64(vec![1, d], zr).unwrap();
                let ct = Tensor::from_f64(vec![1, d], &ctx.data()[row * d..(row + 1) * d]).unwrap();
                realnvp_forward_values(&s, &c, &zt, &ct).unwrap().0.into_data()
            };
            let z0 = z.data()[row * d..(row + 1) * d].to_vec();
            let mut jac = vec![0.0; d * d];
            for j in 0..d {
                let (mut up, mut dn) = (z0.clone(), z0.clone());
                up[j] += h;
                dn[j] -= h;
                let (fu, fd) = (point(&up), point(&dn));
                for i in 0..d {
                    jac[i * d + j] = (fu[i] - fd[i]) / (2.0 * h);
                }
            }
            let num = determinant(&jac, d).abs().ln();
            assert!((num - ld[row]).abs() / ld[row].abs().max(1.0) < 1e-4, "d={d} row={row}: {num} vs {}", ld[row]);
        }
    }
}

#[test]
fn identity_flow_reduces_to_gaussian() {
    let c = cfg(2);
    let mut s = head_store(&c, 9);
    zero_flow(&mut s);
    let mut rng = RngState::new(3, 0);
    let t = Tape::new();
    let h = t.constant(random(&[2, 3, 2], 1.0, &mut rng));
    let tin = t.constant(random(&[2, 3, 1], 0.3, &mut rng));
    let mvn = mvn_head(&t, &s, 2, h, tin).unwrap();
    let target = random(&[2, 3, 2], 1.0, &mut rng);
    let flowed = log_prob_space(&t, &s, &c, &target, &mvn, h).unwrap().value();
    let plain = mvn.log_prob(t.constant(target)).unwrap().value();
    assert_eq!(flowed, plain);
}

#[test]
fn spatial_density_grid_mass() {
    let c = cfg(2);
    let s = head_store(&c, 11);
    let mut rng = RngState::new(4, 0);
    let t = Tape::new();
    let h = t.constant(random(&[1, 1, 2], 1.0, &mut rng));
    let tin = t.constant(Tensor::full(&[1, 1, 1], 0.2));
    let mvn = mvn_head(&t, &s, 2, h, tin).unwrap();
    let (mu, chol) = mvn.values();
    // Window covering 6 sigma of the flow's pushforward, measured from samples.
    let draws = 20_000;
    let zs: Vec<f64> = (0..draws).flat_map(|_| mvn_sample(&mu[0], &chol[0], &mut rng)).collect();
    let ctx = Tensor::new(vec![draws, 2], h.value().data().repeat(draws)).unwrap();
    let (xs, _) = realnvp_forward_values(&s, &c, &Tensor::new(vec![draws, 2], zs).unwrap(), &ctx).unwrap();
    let mut lo = [0.0; 2];
    let mut hi = [0.0; 2];
    for k in 0..2 {
        let col: Vec<f64> = xs.data().iter().skip(k).step_by(2).copied().collect();
        let m = col.iter().sum::<f64>() / draws as f64;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / draws as f64).sqrt();
        lo[k] = m - 6.0 * sd;
        hi[k] = m + 6.0 * sd;
    }
    let steps = 300;
    let (dx, dy) = ((hi[0] - lo[0]) / steps as f64, (hi[1] - lo[1]) / steps as f64);
    let mut pts = Vec::with_capacity(steps * steps * 2);
    for i in 0..steps {
        for j in 0..steps {
            pts.push(lo[0] + (i as f64 + 0.5) * dx);
            pts.push(lo[1] + (j as f64 + 0.5) * dy);
        }
    }
    let n = steps * steps;
    let t2 = Tape::new();
    let h2 = t2.constant(Tensor::new(vec![1, n, 2], h.value().data().repeat(n)).unwrap());
    let mvn2 = mvn_head(&t2, &s, 2, h2, t2.constant(Tensor::full(&[1, n, 1], 0.2))).unwrap();
    let lp = log_prob_space(&t2, &s, &c, &Tensor::new(vec![1, n, 2], pts).unwrap(), &mvn2, h2).unwrap().value();
    let mass: f64 = lp.data().iter().map(|v| v.exp()).sum::<f64>() * dx * dy;
    assert!((mass - 1.0).abs() < 2e-2, "{mass}");
}

#[test]
fn batched_equals_single_calls() {
    let c = cfg(2);
    let s = head_store(&c, 12);
    let mut rng = RngState::new(5, 0);
    let ht = random(&[4, 3, 1], 1.0, &mut rng);
    let hx = random(&[4, 3, 2], 1.0, &mut rng);
    let tt = Tensor::new(vec![4, 3], (0..12).map(|_| 0.05 + 0.9 * rng.uniform()).collect()).unwrap();
    let xt = random(&[4, 3, 2], 1.0, &mut rng);
    let run = |ht: Tensor<f64>, hx: Tensor<f64>, tt: Tensor<f64>, xt: Tensor<f64>| {
        let t = Tape::new();
        let beta = exp_head(&t, &s, t.constant(ht)).unwrap();
        let lt = log_prob_time(TimeFlow::Softsign, beta, &tt).unwrap().value();
        let shape = tt.shape().to_vec();
        let tin = t.constant(Tensor::new([shape.clone(), vec![1]].concat(), tt.into_data()).unwrap());
        let h = t.constant(hx);
        let mvn = mvn_head(&t, &s, 2, h, tin).unwrap();
        let lx = log_prob_space(&t, &s, &c, &xt, &mvn, h).unwrap().value();
        (lt.into_data(), lx.into_data())
    };
    let (bt, bx) = run(ht.clone(), hx.clone(), tt.clone(), xt.clone());
    for k in 0..12 {
        let one = |x: &Tensor<f64>, w: usize, shape: Vec<usize>| Tensor::new(shape, x.data()[k * w..(k + 1) * w].to_vec()).unwrap();
        let (st, sx) = run(one(&ht, 1, vec![1, 1, 1]), one(&hx, 2, vec![1, 1, 2]), one(&tt, 1, vec![1, 1]), one(&xt, 2, vec![1, 1, 2]));
        assert!((st[0] - bt[k]).abs() < 1e-12);
        assert!((sx[0] - bx[k]).abs() < 1e-12);
    }
}

#[test]
fn heads_and_flows_pass_gradient_check() {
    for (d, flow) in [(2, TimeFlow::Softsign), (3, TimeFlow::Softplus)] {
        let c = NetConfig { time_flow: flow, flow_hidden: 6, head_hidden: 6, flow_layers: 2, ..cfg(d) };
        let s = head_store(&c, 13);
        let mut rng = RngState::new(6, 0);
        let ht = random(&[2, 3, 1], 1.0, &mut rng);
        let hx = random(&[2, 3, d], 1.0, &mut rng);
        let tt = Tensor::new(vec![2, 3], (0..6).map(|_| 0.05 + 0.9 * rng.uniform()).collect()).unwrap();
        let xt = random(&[2, 3, d], 1.0, &mut rng);
        let report = grad_check(
            |t, s| {
                let beta = exp_head(t, s, t.constant(ht.clone())).unwrap();
                let lt = log_prob_time(flow, beta, &tt).unwrap();
                let tin = t.constant(Tensor::new(vec![2, 3, 1], tt.data().to_vec()).unwrap());
                let h = t.constant(hx.clone());
                let mvn = mvn_head(t, s, d, h, tin).unwrap();
                let lx = log_prob_space(t, s, &c, &xt, &mvn, h).unwrap();
                Ok(lt.add(lx)?.mean().neg())
            },
            &s,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.per_param);
    }
}

#[test]
fn inverse_flow_gradient_reaches_inputs() {
    let c = cfg(2);
    let s = head_store(&c, 14);
    let t = Tape::new();
    let x = t.constant(random(&[3, 2], 1.0, &mut RngState::new(7, 0)));
    let ctx = t.constant(Tensor::zeros(&[3, 2]));
    let (z, _) = realnvp_inverse(&t, &s, &c, x, ctx).unwrap();
    let g = t.backward(z.sum()).unwrap().wrt(x);
    assert!(g.data().iter().all(|v| v.is_finite() && *v != 0.0));
}
