use stpp::autodiff::{ParamStore, Tape, Tensor};
use stpp::events::{normalize, split_dataset, window_sequences, Event, NormalizedDataset, NormalizedSequence};
use stpp::heads::{self, exp_sample};
use stpp::neural::{self, init_params, NetConfig, TimeFlow};
use stpp::rng::{streams, RngState};
use stpp::train::{
    build_batch, clip_global_norm, difference_grid, evaluate, export_density, loss_multi_event, per_sequence_nll,
    predict, reconstruct_times, split_loss, train, train_step, Ablation, Adam, GridConfig, Phase, PredictConfig,
    Summary, TimeSource, TrainConfig, TrainError,
};

fn toy_events(n: usize, d: usize, seed: u64) -> Vec<Event> {
    let mut rng = RngState::new(seed, 0);
    let mut t = 0.0;
    (0..n)
        .map(|i| {
            t += 0.2 + rng.exp1();
            let phase = (i % 3) as f64;
            let x = (0..d).map(|k| phase * (k as f64 + 1.0) + 0.3 * rng.normal()).collect();
            Event::new(t, x, 1.0)
        })
        .collect()
}

fn toy_data(d: usize, seed: u64) -> NormalizedDataset {
    let windows = window_sequences(&toy_events(80, d, seed), 10, 8, 7).unwrap();
    normalize(&split_dataset(windows, (0.7, 0.2, 0.1), seed).unwrap())
}

fn toy_cfg(d: usize) -> NetConfig {
    NetConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        n_in: 7,
        l_out: 3,
        d_space: d,
        dropout: 0.0,
        head_hidden: 8,
        flow_hidden: 8,
        flow_layers: 2,
        time_flow: TimeFlow::Softplus,
        ..NetConfig::default()
    }
}

fn params(cfg: &NetConfig, seed: u64) -> ParamStore<f64> {
    init_params(cfg, &mut RngState::new(seed, streams::INIT)).unwrap()
}

fn loss_value(s: &ParamStore<f64>, cfg: &NetConfig, seqs: &[&NormalizedSequence], phase: Phase) -> f64 {
    let batch = build_batch::<f64>(seqs, cfg, phase, Ablation::None).unwrap();
    let t = Tape::new();
    loss_multi_event(&t, s, cfg, &batch).unwrap().value().item()
}

fn same_params(a: &ParamStore<f64>, b: &ParamStore<f64>) -> bool {
    a.len() == b.len() && a.iter().all(|(n, p)| b.get(n).map(|q| q.value == p.value).unwrap_or(false))
}

fn set(s: &mut ParamStore<f64>, name: &str, values: &[f64]) {
    let p = s.get_mut(name).unwrap();
    assert_eq!(p.value.len(), values.len(), "{name}");
    p.value.data_mut().copy_from_slice(values);
}

fn zero(s: &mut ParamStore<f64>, prefix: &str) {
    let names: Vec<String> = s.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        s.get_mut(&n).unwrap().value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn duplicated_batch_keeps_the_mean() {
    let data = toy_data(2, 1);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 1);
    let (a, b) = (&data.train[0], &data.train[1]);
    let one = loss_value(&s, &cfg, &[a, b], Phase::Train);
    let two = loss_value(&s, &cfg, &[a, b, a, b], Phase::Train);
    assert!((one - two).abs() < 1e-12, "{one} vs {two}");
}

#[test]
fn one_step_descends() {
    let data = toy_data(2, 2);
    let cfg = toy_cfg(2);
    let mut s = params(&cfg, 2);
    let refs: Vec<&NormalizedSequence> = data.train.iter().take(4).collect();
    let batch = build_batch::<f64>(&refs, &cfg, Phase::Train, Ablation::None).unwrap();
    let before = loss_value(&s, &cfg, &refs, Phase::Train);
    let mut opt = Adam::default();
    let reported = train_step(&mut s, &cfg, &batch, &mut opt, 1e-3, None, &mut RngState::new(0, streams::DROPOUT)).unwrap();
    assert_eq!(reported, before);
    assert!(loss_value(&s, &cfg, &refs, Phase::Train) < before);
}

#[test]
fn zero_epochs_leave_params_untouched() {
    let data = toy_data(2, 3);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 3);
    let out = train(&s, &data, &cfg, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
    assert!(same_params(&out.best, &s));
    assert!(same_params(&out.last, &s));
    assert_eq!(out.log.len(), 1);
}

#[test]
fn seeded_training_is_reproducible() {
    let data = toy_data(2, 4);
    let cfg = NetConfig { dropout: 0.1, ..toy_cfg(2) };
    let s = params(&cfg, 4);
    let tcfg = TrainConfig { epochs: 3, batch_size: 4, seed: 9, ..TrainConfig::default() };
    let a = train(&s, &data, &cfg, &tcfg).unwrap();
    let b = train(&s, &data, &cfg, &tcfg).unwrap();
    assert_eq!(a.log, b.log);
    assert!(same_params(&a.last, &b.last));
    assert!(same_params(&a.best, &b.best));
    let c = train(&s, &data, &cfg, &TrainConfig { seed: 10, ..tcfg }).unwrap();
    assert_eq!(a.log[0], c.log[0]);
    assert_ne!(a.log[1], c.log[1]);
}

#[test]
fn training_improves_validation_and_evaluation() {
    let data = toy_data(2, 5);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 5);
    let out = train(&s, &data, &cfg, &TrainConfig { epochs: 40, batch_size: 4, ..TrainConfig::default() }).unwrap();
    assert!(out.aborted.is_none());
    assert!(out.best_val < out.log[0].val_loss);
    let ev = |p: &ParamStore<f64>| evaluate(p, &cfg, &data.val, Ablation::None, TimeSource::TrueTimes, 100, 0).unwrap();
    let (before, after) = (ev(&s), ev(&out.best));
    assert!(before.nll_joint.mean.is_finite());
    assert!(after.nll_joint.mean < before.nll_joint.mean);
    assert_eq!(ev(&out.best), after);
    // Evaluation averages over the L slots; the validation loss sums them.
    assert!((after.nll_joint.mean * cfg.l_out as f64 - out.best_val).abs() < 1e-9);
}

#[test]
fn evaluation_std_matches_two_pass_oracle() {
    let data = toy_data(2, 6);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 6);
    let rep = evaluate(&s, &cfg, &data.train, Ablation::None, TimeSource::TrueTimes, 10, 0).unwrap();
    let per = per_sequence_nll(&s, &cfg, &data.train, Ablation::None, TimeSource::TrueTimes, 10, 0).unwrap();
    let joint: Vec<f64> = per.iter().map(|p| p.0 + p.1).collect();
    let n = joint.len() as f64;
    let mean = joint.iter().sum::<f64>() / n;
    let var = joint.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert_eq!(rep.n_sequences, joint.len());
    assert!((rep.nll_joint.mean - mean).abs() < 1e-12);
    assert!((rep.nll_joint.std - var.sqrt()).abs() < 1e-12);
    assert_eq!(Summary::of(&[2.0, 4.0]), Summary { mean: 3.0, std: 1.0 });
}

#[test]
fn reconstruction_recursion() {
    let t = reconstruct_times(5.0, &[0.1, 0.2, 0.3]);
    for (a, b) in t.iter().zip([5.1, 5.3, 5.6]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn prediction_mean_within_clt_bound() {
    let data = toy_data(2, 7);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 7);
    let seq = &data.test[0];
    let pred = predict(&s, &cfg, &data.stats, seq, Ablation::None, &PredictConfig::default()).unwrap();
    assert_eq!(pred.t_hat.len(), 3);
    assert_eq!(pred.x_hat.len(), 3);
    assert!(pred.t_hat.windows(2).all(|w| w[1] > w[0]));
    let mut rng = RngState::new(99, 0);
    for (slot, dist) in pred.slots.iter().enumerate() {
        let draws: Vec<f64> = (0..1_000_000).map(|_| cfg.time_flow.forward(exp_sample(dist.beta, &mut rng))).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        let got = pred.dt_hat[slot] / data.stats.dt_max;
        assert!((got - mean).abs() < 4.0 * sd / 1000f64.sqrt(), "slot {slot}: {got} vs {mean}");
    }
}

#[test]
fn collapsed_interval_distribution_gives_no_advance() {
    let data = toy_data(2, 8);
    let cfg = toy_cfg(2);
    let mut s = params(&cfg, 8);
    set(&mut s, "head.time.W", &[0.0]);
    set(&mut s, "head.time.b", &[-800.0]);
    let seq = &data.test[0];
    let pred = predict(&s, &cfg, &data.stats, seq, Ablation::None, &PredictConfig::default()).unwrap();
    let t_last = seq.t0 + seq.t_last_input;
    for (slot, dist) in pred.slots.iter().enumerate() {
        assert_eq!(dist.beta, 1e-6);
        assert!(pred.dt_hat[slot] / data.stats.dt_max < 2e-6);
        assert!((pred.t_hat[slot] - t_last).abs() < 1e-5 * data.stats.dt_max * 3.0);
    }
    // The interval means are exactly the sample means of the documented draws.
    let mut rng = RngState::new(0, streams::SAMPLING);
    for slot in 0..3 {
        let m = (0..1000).map(|_| cfg.time_flow.forward(exp_sample(1e-6, &mut rng))).sum::<f64>() / 1000.0;
        assert_eq!(pred.dt_hat[slot], m * data.stats.dt_max);
    }
}

#[test]
fn density_grid_is_normalized() {
    let data = toy_data(2, 9);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 9);
    let g = GridConfig { steps: 300, n_samples: 2000, ..GridConfig::default() };
    let out = export_density(&s, &cfg, &data.stats, &data.test[0], Ablation::None, &g).unwrap();
    assert_eq!(out.slots.len(), 3);
    assert_eq!(out.differences.len(), 2);
    for grid in &out.slots {
        let mass: f64 = grid.logp.iter().map(|v| v.exp()).sum::<f64>() * grid.grid.cell_area();
        assert!((mass - 1.0).abs() < 2e-2, "slot {}: {mass}", grid.event_index);
    }
    let json = serde_json::to_value(&out.slots[0]).unwrap();
    for key in ["x1_min", "x1_max", "x2_min", "x2_max", "steps"] {
        assert!(json["grid"][key].is_number(), "{key}");
    }
    assert!(json["logp"].is_array() && json["event_index"].is_number() && json["meta"].is_object());
}

#[test]
fn self_difference_is_zero() {
    let data = toy_data(2, 10);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 10);
    let g = GridConfig { steps: 20, n_samples: 200, ..GridConfig::default() };
    let out = export_density(&s, &cfg, &data.stats, &data.test[0], Ablation::None, &g).unwrap();
    assert!(difference_grid(&out.slots[0], &out.slots[0]).iter().all(|v| *v == 0.0));
    let manual = difference_grid(&out.slots[1], &out.slots[0]);
    assert_eq!(manual, out.differences[0].logp);
}

#[test]
fn grid_cap_is_enforced() {
    let data = toy_data(2, 10);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 10);
    let g = GridConfig { steps: 2000, max_cells: 1000, ..GridConfig::default() };
    let err = export_density(&s, &cfg, &data.stats, &data.test[0], Ablation::None, &g).unwrap_err();
    assert!(matches!(err, TrainError::GridTooLarge { cells: 4_000_000, cap: 1000 }));
}

#[test]
fn depth_slice_matches_full_evaluation() {
    let data = toy_data(3, 11);
    let cfg = toy_cfg(3);
    let s = params(&cfg, 11);
    let seq = &data.test[0];
    let depth = 0.7;
    let g = GridConfig { steps: 7, depth: Some(depth), n_samples: 50, ..GridConfig::default() };
    let out = export_density(&s, &cfg, &data.stats, seq, Ablation::None, &g).unwrap();

    let batch = build_batch::<f64>(&[seq], &cfg, Phase::Test, Ablation::None).unwrap();
    let t = Tape::new();
    let (_, dec) = neural::forward(&t, &s, &cfg, &batch.enc, &batch.dec).unwrap();
    let pts = out.slots[0].grid.points();
    let m = pts.len();
    let sd: Vec<f64> = data.stats.space_var.iter().map(|v| v.sqrt()).collect();
    for slot in 0..3 {
        let rep = |v: Tensor<f64>, w: usize| {
            let row = v.data()[slot * w..(slot + 1) * w].to_vec();
            Tensor::new(vec![1, m, w], row.repeat(m)).unwrap()
        };
        let h = t.constant(rep(dec.h_x.value(), 3));
        let tin = t.constant(rep(batch.dt.clone(), 1));
        let mvn = heads::mvn_head(&t, &s, 3, h, tin).unwrap();
        let mut x = Vec::with_capacity(m * 3);
        for p in &pts {
            let raw = [p[0], p[1], depth];
            x.extend((0..3).map(|k| (raw[k] - data.stats.space_mean[k]) / sd[k]));
        }
        let lp = heads::log_prob_space(&t, &s, &cfg, &Tensor::new(vec![1, m, 3], x).unwrap(), &mvn, h).unwrap().value();
        let log_jac: f64 = sd.iter().map(|v| v.ln()).sum();
        for (a, b) in out.slots[slot].logp.iter().zip(lp.data()) {
            assert!((a - (b - log_jac)).abs() < 1e-10, "slot {slot}: {a} vs {}", b - log_jac);
        }
        assert!((out.slots[slot].meta["depth"].as_f64().unwrap() - depth).abs() < 1e-12);
    }
}

#[test]
fn test_phase_ignores_withheld_outputs() {
    let data = toy_data(2, 12);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 12);
    let seq = data.test[0].clone();
    let mut other = seq.clone();
    for l in 0..3 {
        let i = seq.n_in + l;
        other.x[i] = vec![5.0, -5.0];
        other.dt[i] *= 0.5;
        other.t_out[l] = 0.123 * l as f64;
    }
    let a = build_batch::<f64>(&[&seq], &cfg, Phase::Test, Ablation::None).unwrap();
    let b = build_batch::<f64>(&[&other], &cfg, Phase::Test, Ablation::None).unwrap();
    assert_eq!((a.enc, a.dec), (b.enc, b.dec));
    let pc = PredictConfig { time_source: TimeSource::Sampled, n_samples: 100, seed: 3 };
    let pa = predict(&s, &cfg, &data.stats, &seq, Ablation::None, &pc).unwrap();
    let pb = predict(&s, &cfg, &data.stats, &other, Ablation::None, &pc).unwrap();
    assert_eq!((pa.t_hat, pa.x_hat, pa.slots), (pb.t_hat, pb.x_hat, pb.slots));
}

#[test]
fn zero_encoder_ignores_history() {
    let data = toy_data(2, 13);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 13);
    let (a, b) = (&data.train[0], &data.train[5]);
    let pc = PredictConfig { time_source: TimeSource::Sampled, n_samples: 100, seed: 3 };
    let pa = predict(&s, &cfg, &data.stats, a, Ablation::ZeroEncoder, &pc).unwrap();
    let pb = predict(&s, &cfg, &data.stats, b, Ablation::ZeroEncoder, &pc).unwrap();
    assert_eq!(pa.slots, pb.slots);
    assert_eq!(pa.dt_hat, pb.dt_hat);
    let full = predict(&s, &cfg, &data.stats, a, Ablation::None, &pc).unwrap();
    assert_ne!(pa.slots, full.slots);
}

#[test]
fn zero_decoder_shares_the_encoder_path() {
    let data = toy_data(2, 14);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 14);
    let refs: Vec<&NormalizedSequence> = data.train.iter().take(4).collect();
    let main = build_batch::<f64>(&refs, &cfg, Phase::Train, Ablation::None).unwrap();
    let abl = build_batch::<f64>(&refs, &cfg, Phase::Train, Ablation::ZeroDecoder).unwrap();
    assert_eq!(main.enc, abl.enc);
    assert_ne!(main.dec, abl.dec);
    assert!(abl.dec.data().iter().all(|v| *v == 0.0));
    let t = Tape::new();
    let ea = neural::encoder_forward(&t, &s, &cfg, &main.enc).unwrap();
    let eb = neural::encoder_forward(&t, &s, &cfg, &abl.enc).unwrap();
    assert_eq!(ea.h_t.value(), eb.h_t.value());
    assert_eq!(ea.h_x.value(), eb.h_x.value());
    // At test time both modes feed zeros, so the whole batch coincides.
    let mt = build_batch::<f64>(&refs, &cfg, Phase::Test, Ablation::None).unwrap();
    let at = build_batch::<f64>(&refs, &cfg, Phase::Test, Ablation::ZeroDecoder).unwrap();
    assert_eq!(mt, at);
}

#[test]
fn training_decoder_input_is_shifted_truth() {
    let data = toy_data(2, 15);
    let cfg = toy_cfg(2);
    let seq = &data.train[0];
    let b = build_batch::<f64>(&[seq], &cfg, Phase::Train, Ablation::None).unwrap();
    let f = cfg.n_features();
    let outs = seq.output_features();
    assert!(b.dec.data()[..f].iter().all(|v| *v == 0.0));
    assert_eq!(&b.dec.data()[f..2 * f], outs[0].as_slice());
    assert_eq!(&b.dec.data()[2 * f..3 * f], outs[1].as_slice());
}

#[test]
fn identity_heads_reduce_to_closed_form() {
    let data = toy_data(2, 16);
    let cfg = NetConfig { time_flow: TimeFlow::Softsign, ..toy_cfg(2) };
    let mut s = params(&cfg, 16);
    zero(&mut s, "flow.");
    // softplus(b) + 1e-6 = 1 gives a unit exponential and an identity factor.
    let unit = ((1.0f64 - 1e-6).exp() - 1.0).ln();
    set(&mut s, "head.time.W", &[0.0]);
    set(&mut s, "head.time.b", &[unit]);
    zero(&mut s, "head.space.l2.W");
    set(&mut s, "head.space.l2.b", &[0.0, 0.0, unit, 0.0, unit]);
    let refs: Vec<&NormalizedSequence> = data.train.iter().take(5).collect();
    let batch = build_batch::<f64>(&refs, &cfg, Phase::Train, Ablation::None).unwrap();
    let got = loss_value(&s, &cfg, &refs, Phase::Train);
    let mut want = 0.0;
    for (i, dt) in batch.dt.data().iter().enumerate() {
        let z = dt / (1.0 - dt);
        want += z - 2.0 * (1.0 + z).ln();
        let x = &batch.x.data()[2 * i..2 * i + 2];
        want += 0.5 * (x[0] * x[0] + x[1] * x[1]) + (2.0 * std::f64::consts::PI).ln();
    }
    want /= refs.len() as f64;
    assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn non_finite_values_name_the_sequence() {
    let data = toy_data(2, 17);
    let cfg = toy_cfg(2);
    let s = params(&cfg, 17);
    let mut seqs: Vec<NormalizedSequence> = data.train.iter().take(3).cloned().collect();
    seqs[1].x[0][0] = f64::NAN;
    let r: Vec<&NormalizedSequence> = seqs.iter().collect();
    assert!(matches!(build_batch::<f64>(&r, &cfg, Phase::Train, Ablation::None), Err(TrainError::NonFiniteInput { index: 1 })));

    // A finite but absurd target overflows only its own sequence's likelihood.
    let mut seqs: Vec<NormalizedSequence> = data.train.iter().take(3).cloned().collect();
    seqs[2].x[cfg.n_in + 2][0] = 1e200;
    let r: Vec<&NormalizedSequence> = seqs.iter().collect();
    let batch = build_batch::<f64>(&r, &cfg, Phase::Test, Ablation::None).unwrap();
    let t = Tape::new();
    match loss_multi_event(&t, &s, &cfg, &batch) {
        Err(TrainError::NonFinite { index }) => assert_eq!(index, 2),
        Err(e) => panic!("{e}"),
        Ok(v) => panic!("finite loss {}", v.value().item()),
    }
}

#[test]
fn gradient_clipping_bounds_the_norm() {
    let mut g: indexmap::IndexMap<String, Tensor<f64>> = indexmap::IndexMap::new();
    g.insert("a".to_string(), Tensor::from_f64(vec![2], &[3.0, 0.0]).unwrap());
    g.insert("b".to_string(), Tensor::from_f64(vec![1], &[4.0]).unwrap());
    assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
    assert_eq!(g["a"].data(), &[3.0, 0.0]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    let n: f64 = g.values().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-15);
}

#[test]
fn invalid_config_lists_every_problem() {
    let bad = TrainConfig { lr0: 0.0, batch_size: 0, grad_clip: Some(-1.0), ..TrainConfig::default() };
    match bad.validate() {
        Err(TrainError::Config(msg)) => {
            assert!(msg.contains("lr0") && msg.contains("batch_size") && msg.contains("grad_clip"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn split_loss_is_deterministic_in_eval_mode() {
    let data = toy_data(2, 18);
    let cfg = NetConfig { dropout: 0.3, ..toy_cfg(2) };
    let s = params(&cfg, 18);
    let a = split_loss(&s, &cfg, &data.val, Phase::Test, Ablation::None, 2).unwrap();
    let b = split_loss(&s, &cfg, &data.val, Phase::Test, Ablation::None, 7).unwrap();
    assert!((a - b).abs() < 1e-12);
}
