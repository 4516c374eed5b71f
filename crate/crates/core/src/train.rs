//! Training, evaluation and multi-event prediction for the network.

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::events::{denormalize_location, NormStats, NormalizedDataset, NormalizedSequence};
use crate::heads::{self, HeadsError};
use crate::linalg;
use crate::neural::{self, NetConfig, NeuralError, Stream, TimeFlow};
use crate::rng::{streams, RngState};
use crate::scalar::Scalar;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss for sequence {index} of the batch")]
    NonFinite { index: usize },
    #[error("non-finite value in sequence {index} of the batch")]
    NonFiniteInput { index: usize },
    #[error("empty split: {0}")]
    Empty(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("density grid of {cells} cells exceeds the cap of {cap}")]
    GridTooLarge { cells: usize, cap: usize },
    #[error("sequence shape does not match the network: {0}")]
    Shape(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Encoder sees zeros in both phases.
    ZeroEncoder,
    /// Decoder sees zeros in both phases.
    ZeroDecoder,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "zero-encoder" | "zero_encoder" => Ok(Self::ZeroEncoder),
            "zero-decoder" | "zero_decoder" => Ok(Self::ZeroDecoder),
            other => Err(format!("unknown ablation `{other}`")),
        }
    }
}

/// Which time value the spatial head is conditioned on outside training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeSource {
    #[default]
    TrueTimes,
    Sampled,
}

impl std::str::FromStr for TimeSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "true-times" | "true_times" => Ok(Self::TrueTimes),
            "sampled" => Ok(Self::Sampled),
            other => Err(format!("unknown time source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub time_source: TimeSource,
    pub n_samples: usize,
    /// Rescales the gradient to this global L2 norm when it is larger.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 32,
            lr0: 1e-3,
            lr_factor: 0.5,
            lr_patience: 50,
            lr_floor: 1e-5,
            seed: 0,
            ablation: Ablation::None,
            time_source: TimeSource::TrueTimes,
            n_samples: 1000,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr0 > 0.0) {
            errs.push(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            errs.push(format!("lr_factor must lie in (0, 1], got {}", self.lr_factor));
        }
        if self.n_samples == 0 {
            errs.push("n_samples must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                errs.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Decoder receives the true outputs, shifted one slot to the right.
    Train,
    /// Decoder receives zeros.
    Test,
}

const INTERVAL_EPS: f64 = 1e-6;

/// Keeps an interval target inside the open support of the time flow.
pub fn clamp_interval(flow: TimeFlow, dt: f64) -> f64 {
    match flow {
        TimeFlow::Softsign => dt.clamp(INTERVAL_EPS, 1.0 - INTERVAL_EPS),
        TimeFlow::Softplus => dt.max(INTERVAL_EPS),
    }
}

/// Network-ready arrays for a group of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `[B, n, d + 2]`
    pub enc: Tensor<T>,
    /// `[B, L, d + 2]`
    pub dec: Tensor<T>,
    /// Interval targets `[B, L]`.
    pub dt: Tensor<T>,
    /// Location targets `[B, L, d]`.
    pub x: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn size(&self) -> usize {
        self.dt.shape()[0]
    }
}

pub fn build_batch<T: Scalar>(
    seqs: &[&NormalizedSequence],
    cfg: &NetConfig,
    phase: Phase,
    ablation: Ablation,
) -> Result<Batch<T>> {
    let (b, n, l, d, f) = (seqs.len(), cfg.n_in, cfg.l_out, cfg.d_space, cfg.n_features());
    if b == 0 {
        return Err(TrainError::Empty("batch"));
    }
    let mut enc = Vec::with_capacity(b * n * f);
    let mut dec = Vec::with_capacity(b * l * f);
    let mut dt = Vec::with_capacity(b * l);
    let mut x = Vec::with_capacity(b * l * d);
    for (index, s) in seqs.iter().enumerate() {
        let finite = s.dt.iter().chain(&s.m).chain(&s.t_in).chain(&s.t_out).chain(s.x.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(TrainError::NonFiniteInput { index });
        }
        if s.n_in != n || s.l_out != l || s.x.first().map(|v| v.len()) != Some(d) {
            return Err(TrainError::Shape(format!(
                "sequence has n={}, L={}, d={:?}; network expects n={n}, L={l}, d={d}",
                s.n_in,
                s.l_out,
                s.x.first().map(|v| v.len())
            )));
        }
        for row in s.input_features() {
            if ablation == Ablation::ZeroEncoder {
                enc.extend(std::iter::repeat(0.0).take(f));
            } else {
                enc.extend(row);
            }
        }
        let feed = phase == Phase::Train && ablation != Ablation::ZeroDecoder;
        let outs = s.output_features();
        for slot in 0..l {
            if feed && slot > 0 {
                dec.extend_from_slice(&outs[slot - 1]);
            } else {
                dec.extend(std::iter::repeat(0.0).take(f));
            }
        }
        dt.extend(s.output_intervals().iter().map(|&v| clamp_interval(cfg.time_flow, v)));
        for loc in s.output_locations() {
            x.extend_from_slice(loc);
        }
    }
    Ok(Batch {
        enc: Tensor::from_f64(vec![b, n, f], &enc)?,
        dec: Tensor::from_f64(vec![b, l, f], &dec)?,
        dt: Tensor::from_f64(vec![b, l], &dt)?,
        x: Tensor::from_f64(vec![b, l, d], &x)?,
    })
}

/// Per-slot log-densities of a batch, `[B, L]` each.
pub struct Scores<'t, T> {
    pub time: Var<'t, T>,
    pub space: Var<'t, T>,
}

/// Runs the network and both heads. `space_t` overrides the time fed to the
/// spatial head (`[B, L]`); by default the true intervals are used.
pub fn score<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    batch: &Batch<T>,
    space_t: Option<&Tensor<T>>,
) -> Result<Scores<'t, T>> {
    let (_, dec) = neural::forward(t, s, cfg, &batch.enc, &batch.dec)?;
    let beta = heads::exp_head(t, s, dec.h_t)?;
    let lpt = heads::log_prob_time(cfg.time_flow, beta, &batch.dt)?;
    let (b, l) = (batch.size(), cfg.l_out);
    let tin = space_t.unwrap_or(&batch.dt).reshaped(&[b, l, 1])?;
    let mvn = heads::mvn_head(t, s, cfg.d_space, dec.h_x, t.constant(tin))?;
    let lps = heads::log_prob_space(t, s, cfg, &batch.x, &mvn, dec.h_x)?;
    Ok(Scores { time: lpt, space: lps })
}

/// Negative joint log-likelihood summed over the `L` slots and averaged over
/// the batch.
pub fn loss_multi_event<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    batch: &Batch<T>,
) -> Result<Var<'t, T>> {
    let sc = score(t, s, cfg, batch, None)?;
    let joint = sc.time.add(sc.space)?;
    let per_seq = joint.value();
    let l = cfg.l_out;
    for (i, chunk) in per_seq.data().chunks(l).enumerate() {
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite { index: i });
        }
    }
    Ok(joint.sum().scale(-T::one() / T::lit(batch.size() as f64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(self.step as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &NetConfig,
    batch: &Batch<T>,
    opt: &mut Adam<T>,
    lr: f64,
    grad_clip: Option<f64>,
    dropout_rng: &mut RngState,
) -> Result<f64> {
    let tape = Tape::training(dropout_rng.clone());
    let loss = loss_multi_event(&tape, store, cfg, batch)?;
    let value = loss.value().item().to_f64_lossy();
    if !value.is_finite() {
        return Err(TrainError::NonFinite { index: 0 });
    }
    let mut grads = tape.backward(loss)?.params(store);
    if let Some(c) = grad_clip {
        clip_global_norm(&mut grads, c);
    }
    if let Some(r) = tape.take_rng() {
        *dropout_rng = r;
    }
    opt.step(store, &grads, lr);
    Ok(value)
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm<T: Scalar>(grads: &mut IndexMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Mean loss over a split without dropout, split into the time and space
/// terms (each summed over the `L` slots).
pub fn split_loss_parts<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &NetConfig,
    seqs: &[NormalizedSequence],
    phase: Phase,
    ablation: Ablation,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if seqs.is_empty() {
        return Err(TrainError::Empty("split"));
    }
    let (mut time, mut space) = (0.0, 0.0);
    for chunk in seqs.chunks(batch_size.max(1)) {
        let refs: Vec<&NormalizedSequence> = chunk.iter().collect();
        let batch = build_batch::<T>(&refs, cfg, phase, ablation)?;
        let tape = Tape::new();
        let sc = score(&tape, store, cfg, &batch, None)?;
        let (lt, ls) = (sc.time.value(), sc.space.value());
        for (i, (ct, cs)) in lt.data().chunks(cfg.l_out).zip(ls.data().chunks(cfg.l_out)).enumerate() {
            let a = -ct.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            let b = -cs.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            if !(a.is_finite() && b.is_finite()) {
                return Err(TrainError::NonFinite { index: i });
            }
            time += a;
            space += b;
        }
    }
    let n = seqs.len() as f64;
    Ok((time / n, space / n))
}

/// Mean loss over a split without dropout.
pub fn split_loss<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &NetConfig,
    seqs: &[NormalizedSequence],
    phase: Phase,
    ablation: Ablation,
    batch_size: usize,
) -> Result<f64> {
    let (t, s) = split_loss_parts(store, cfg, seqs, phase, ablation, batch_size)?;
    Ok(t + s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], mut w: W) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,lr")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Each stream's parameters from the epoch where its own validation
    /// term was lowest. The streams share nothing and their losses add, so
    /// this combination minimizes the validation loss over all epochs.
    pub best: ParamStore<T>,
    pub best_epoch_time: usize,
    pub best_epoch_space: usize,
    /// Validation loss of `best`.
    pub best_val: f64,
    /// Parameters after the last completed epoch.
    pub last: ParamStore<T>,
    pub log: Vec<LogRow>,
    /// Set when training stopped early on a non-finite loss.
    pub aborted: Option<String>,
}

fn copy_stream<T: Scalar>(dst: &mut ParamStore<T>, src: &ParamStore<T>, stream: Stream) {
    for (name, p) in src.iter() {
        if Stream::of_param(name) == stream {
            if let Some(d) = dst.get_mut(name) {
                d.value = p.value.clone();
            }
        }
    }
}

/// Adam with step decay on validation plateaus. Row 0 of the log scores the
/// untouched parameters.
pub fn train<T: Scalar>(
    init: &ParamStore<T>,
    data: &NormalizedDataset,
    cfg: &NetConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Empty("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::Empty("val"));
    }
    let mut store = init.clone();
    let mut opt = Adam::default();
    let mut lr = tcfg.lr0;
    let mut shuffle = RngState::new(tcfg.seed, streams::SHUFFLE);
    let mut dropout = RngState::new(tcfg.seed, streams::DROPOUT);
    let bs = tcfg.batch_size;
    let train0 = split_loss(&store, cfg, &data.train, Phase::Train, tcfg.ablation, bs)?;
    let val0 = split_loss_parts(&store, cfg, &data.val, Phase::Test, tcfg.ablation, bs)?;
    let mut log = vec![LogRow { epoch: 0, train_loss: train0, val_loss: val0.0 + val0.1, lr }];
    let mut best = store.clone();
    let (mut best_t, mut best_s) = (val0.0, val0.1);
    let (mut epoch_t, mut epoch_s) = (0, 0);
    let mut plateau_best = val0.0 + val0.1;
    let mut since_best = 0;
    let mut aborted = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    'epochs: for epoch in 1..=tcfg.epochs {
        shuffle.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let refs: Vec<&NormalizedSequence> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = build_batch::<T>(&refs, cfg, Phase::Train, tcfg.ablation)?;
            match train_step(&mut store, cfg, &batch, &mut opt, lr, tcfg.grad_clip, &mut dropout) {
                Ok(v) => sum += v * chunk.len() as f64,
                Err(TrainError::NonFinite { .. }) => {
                    aborted = Some(format!("non-finite training loss in epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if store.iter().any(|(_, p)| !p.value.all_finite()) {
            aborted = Some(format!("non-finite parameters after epoch {epoch}"));
            break;
        }
        let (vt, vs) = match split_loss_parts(&store, cfg, &data.val, Phase::Test, tcfg.ablation, bs) {
            Ok(v) => v,
            Err(TrainError::NonFinite { .. }) => {
                aborted = Some(format!("non-finite validation loss in epoch {epoch}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let val = vt + vs;
        log.push(LogRow { epoch, train_loss: sum / data.train.len() as f64, val_loss: val, lr });
        if vt < best_t {
            best_t = vt;
            epoch_t = epoch;
            copy_stream(&mut best, &store, Stream::Time);
        }
        if vs < best_s {
            best_s = vs;
            epoch_s = epoch;
            copy_stream(&mut best, &store, Stream::Space);
        }
        if val < plateau_best {
            plateau_best = val;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.lr_patience {
                lr = (lr * tcfg.lr_factor).max(tcfg.lr_floor);
                since_best = 0;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch_time: epoch_t,
        best_epoch_space: epoch_s,
        best_val: best_t + best_s,
        last: store,
        log,
        aborted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    pub fn shifted(self, c: f64) -> Self {
        Self { mean: self.mean + c, std: self.std }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

/// Negative log-likelihood per output event, summarized over sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll_time: Summary,
    pub nll_space: Summary,
    pub nll_joint: Summary,
    pub n_sequences: usize,
}

impl EvalReport {
    /// Converts network units to the data's own units: interval densities
    /// pick up `log dt_max`, location densities `Σ ½ log var`.
    pub fn to_raw_units(&self, stats: &NormStats) -> Self {
        let (ct, cs) = stats.nll_offsets();
        Self {
            nll_time: self.nll_time.shifted(ct),
            nll_space: self.nll_space.shifted(cs),
            nll_joint: self.nll_joint.shifted(ct + cs),
            n_sequences: self.n_sequences,
        }
    }
}

/// Per-sequence `(time, space)` NLL averaged over the `L` output events, in
/// the test phase.
pub fn per_sequence_nll<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &NetConfig,
    seqs: &[NormalizedSequence],
    ablation: Ablation,
    time_source: TimeSource,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(seqs.len());
    let mut rng = RngState::new(seed, streams::SAMPLING);
    let l = cfg.l_out as f64;
    for chunk in seqs.chunks(32) {
        let refs: Vec<&NormalizedSequence> = chunk.iter().collect();
        let batch = build_batch::<T>(&refs, cfg, Phase::Test, ablation)?;
        let space_t = match time_source {
            TimeSource::TrueTimes => None,
            TimeSource::Sampled => {
                let tape = Tape::new();
                let (_, dec) = neural::forward(&tape, store, cfg, &batch.enc, &batch.dec)?;
                let beta = heads::exp_head(&tape, store, dec.h_t)?.value();
                let means: Vec<f64> = beta
                    .data()
                    .iter()
                    .map(|b| sample_interval_mean(cfg.time_flow, b.to_f64_lossy(), n_samples, &mut rng))
                    .map(|m| clamp_interval(cfg.time_flow, m))
                    .collect();
                Some(Tensor::from_f64(beta.shape().to_vec(), &means)?)
            }
        };
        let tape = Tape::new();
        let sc = score(&tape, store, cfg, &batch, space_t.as_ref())?;
        let (lt, ls) = (sc.time.value(), sc.space.value());
        for (ct, cs) in lt.data().chunks(cfg.l_out).zip(ls.data().chunks(cfg.l_out)) {
            let nt = -ct.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / l;
            let ns = -cs.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / l;
            out.push((nt, ns));
        }
    }
    Ok(out)
}

/// Test-phase NLL of the `L` output events, mean ± std over sequences.
pub fn evaluate<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &NetConfig,
    seqs: &[NormalizedSequence],
    ablation: Ablation,
    time_source: TimeSource,
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if seqs.is_empty() {
        return Err(TrainError::Empty("evaluation split"));
    }
    let per = per_sequence_nll(store, cfg, seqs, ablation, time_source, n_samples, seed)?;
    let t: Vec<f64> = per.iter().map(|p| p.0).collect();
    let s: Vec<f64> = per.iter().map(|p| p.1).collect();
    let j: Vec<f64> = per.iter().map(|p| p.0 + p.1).collect();
    Ok(EvalReport { nll_time: Summary::of(&t), nll_space: Summary::of(&s), nll_joint: Summary::of(&j), n_sequences: per.len() })
}

fn sample_interval_mean(flow: TimeFlow, beta: f64, n: usize, rng: &mut RngState) -> f64 {
    (0..n).map(|_| flow.forward(heads::exp_sample(beta, rng))).sum::<f64>() / n as f64
}

/// `t̂_l = t̂_{l-1} + Δt̂_l` starting from the last observed time.
pub fn reconstruct_times(t_last: f64, intervals: &[f64]) -> Vec<f64> {
    let mut t = t_last;
    intervals
        .iter()
        .map(|d| {
            t += d;
            t
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub n_samples: usize,
    pub time_source: TimeSource,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { n_samples: 1000, time_source: TimeSource::TrueTimes, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDistribution {
    pub beta: f64,
    /// Gaussian base in network units.
    pub mu: Vec<f64>,
    pub chol: Vec<Vec<f64>>,
    /// Time value the spatial head was conditioned on (network units).
    pub t_input: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionNll {
    pub time: f64,
    pub space: f64,
    pub joint: f64,
}

/// Point forecasts and per-slot distributions for one history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Absolute times in data units.
    pub t_hat: Vec<f64>,
    pub x_hat: Vec<Vec<f64>>,
    pub dt_hat: Vec<f64>,
    pub t_true: Vec<f64>,
    pub x_true: Vec<Vec<f64>>,
    pub nll: PredictionNll,
    pub slots: Vec<SlotDistribution>,
    pub n_samples: usize,
    pub time_source: TimeSource,
}

struct SlotState<T> {
    beta: Vec<f64>,
    mu: Vec<Vec<f64>>,
    chol: Vec<Vec<Vec<f64>>>,
    ctx: Tensor<T>,
    t_input: Vec<f64>,
}

fn slot_state<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &NetConfig,
    batch: &Batch<T>,
    t_input: &[f64],
) -> Result<SlotState<T>> {
    let tape = Tape::new();
    let (_, dec) = neural::forward(&tape, store, cfg, &batch.enc, &batch.dec)?;
    let beta = heads::exp_head(&tape, store, dec.h_t)?.value().to_f64();
    let tin = Tensor::from_f64(vec![1, cfg.l_out, 1], t_input)?;
    let mvn = heads::mvn_head(&tape, store, cfg.d_space, dec.h_x, tape.constant(tin))?;
    let (mu, chol) = mvn.values();
    let ctx = dec.h_x.value().reshaped(&[cfg.l_out, cfg.d_space])?;
    Ok(SlotState { beta, mu, chol, ctx, t_input: t_input.to_vec() })
}

/// Interval means from `n_samples` draws per slot, then locations from
/// `n_samples` draws through the spatial flow. Everything is returned in data
/// units.
pub fn predict<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &NetConfig,
    stats: &NormStats,
    seq: &NormalizedSequence,
    ablation: Ablation,
    pcfg: &PredictConfig,
) -> Result<Prediction> {
    let batch = build_batch::<T>(&[seq], cfg, Phase::Test, ablation)?;
    let (l, d, n) = (cfg.l_out, cfg.d_space, pcfg.n_samples.max(1));
    let mut rng = RngState::new(pcfg.seed, streams::SAMPLING);
    let true_dt: Vec<f64> = batch.dt.to_f64();
    let probe = slot_state(store, cfg, &batch, &true_dt)?;
    let dt_norm: Vec<f64> = probe.beta.iter().map(|&b| sample_interval_mean(cfg.time_flow, b, n, &mut rng)).collect();
    let st = match pcfg.time_source {
        TimeSource::TrueTimes => probe,
        TimeSource::Sampled => {
            let tin: Vec<f64> = dt_norm.iter().map(|&v| clamp_interval(cfg.time_flow, v)).collect();
            slot_state(store, cfg, &batch, &tin)?
        }
    };
    let mut x_hat = Vec::with_capacity(l);
    for slot in 0..l {
        let mut z = Vec::with_capacity(n * d);
        for _ in 0..n {
            z.extend(heads::mvn_sample(&st.mu[slot], &st.chol[slot], &mut rng));
        }
        let zt = Tensor::from_f64(vec![n, d], &z)?;
        let ctx_row: Vec<T> = st.ctx.data()[slot * d..(slot + 1) * d].to_vec();
        let ctx = Tensor::new(vec![1, d], ctx_row)?;
        let ctx = Tape::new().constant(ctx).broadcast_to(&[n, d])?.value();
        let (xs, _) = heads::realnvp_forward_values(store, cfg, &zt, &ctx)?;
        let xs = xs.to_f64();
        let mean: Vec<f64> = (0..d).map(|k| (0..n).map(|i| xs[i * d + k]).sum::<f64>() / n as f64).collect();
        x_hat.push(denormalize_location(&mean, stats));
    }
    let dt_hat: Vec<f64> = dt_norm.iter().map(|v| v * stats.dt_max).collect();
    let t_last = seq.t0 + seq.t_last_input;
    let t_hat = reconstruct_times(t_last, &dt_hat);
    let raw_out_dt: Vec<f64> = seq.output_intervals().iter().map(|v| v * stats.dt_max).collect();
    let t_true = reconstruct_times(t_last, &raw_out_dt);
    let x_true = seq.output_locations().iter().map(|x| denormalize_location(x, stats)).collect();
    let space_t = Tensor::from_f64(vec![1, l], &st.t_input)?;
    let tape = Tape::new();
    let sc = score(&tape, store, cfg, &batch, Some(&space_t))?;
    let nt = -sc.time.value().to_f64().iter().sum::<f64>() / l as f64;
    let ns = -sc.space.value().to_f64().iter().sum::<f64>() / l as f64;
    let slots = (0..l)
        .map(|k| SlotDistribution { beta: st.beta[k], mu: st.mu[k].clone(), chol: st.chol[k].clone(), t_input: st.t_input[k] })
        .collect();
    Ok(Prediction {
        t_hat,
        x_hat,
        dt_hat,
        t_true,
        x_true,
        nll: PredictionNll { time: nt, space: ns, joint: nt + ns },
        slots,
        n_samples: n,
        time_source: pcfg.time_source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub steps: usize,
    /// Explicit `[min, max]` per plotted axis in data units.
    pub window: Option<[[f64; 2]; 2]>,
    /// Half-width of the automatic window in standard deviations.
    pub sigma_span: f64,
    pub max_cells: usize,
    /// Third coordinate (data units) of the plotted plane when `d = 3`;
    /// defaults to the first true output event's depth.
    pub depth: Option<f64>,
    pub differences: bool,
    pub n_samples: usize,
    pub seed: u64,
    pub time_source: TimeSource,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            window: None,
            sigma_span: 6.0,
            max_cells: 1_000_000,
            depth: None,
            differences: true,
            n_samples: 1000,
            seed: 0,
            time_source: TimeSource::TrueTimes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn cell_area(&self) -> f64 {
        let s = (self.steps.max(2) - 1) as f64;
        (self.x1_max - self.x1_min) / s * (self.x2_max - self.x2_min) / s
    }

    /// Row-major points: the row index walks `x2`, the column index `x1`.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let s = (self.steps.max(2) - 1) as f64;
        let mut out = Vec::with_capacity(self.steps * self.steps);
        for r in 0..self.steps {
            let x2 = self.x2_min + (self.x2_max - self.x2_min) * r as f64 / s;
            for c in 0..self.steps {
                out.push([self.x1_min + (self.x1_max - self.x1_min) * c as f64 / s, x2]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub grid: GridSpec,
    /// Log-density (data units) at `grid.points()`; for difference grids this
    /// holds `p_l - p_{l-1}` instead.
    pub logp: Vec<f64>,
    pub event_index: usize,
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityExport {
    pub slots: Vec<DensityGrid>,
    pub differences: Vec<DensityGrid>,
}

/// Spatial log-density of every output slot on a shared regular grid.
pub fn export_density<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &NetConfig,
    stats: &NormStats,
    seq: &NormalizedSequence,
    ablation: Ablation,
    gcfg: &GridConfig,
) -> Result<DensityExport> {
    let cells = gcfg.steps * gcfg.steps;
    if cells > gcfg.max_cells {
        return Err(TrainError::GridTooLarge { cells, cap: gcfg.max_cells });
    }
    if gcfg.steps < 2 {
        return Err(TrainError::Config("grid needs at least 2 steps per axis".into()));
    }
    let (l, d) = (cfg.l_out, cfg.d_space);
    let batch = build_batch::<T>(&[seq], cfg, Phase::Test, ablation)?;
    let pcfg = PredictConfig { n_samples: gcfg.n_samples, time_source: gcfg.time_source, seed: gcfg.seed };
    let pred = predict(store, cfg, stats, seq, ablation, &pcfg)?;
    let t_input: Vec<f64> = pred.slots.iter().map(|s| s.t_input).collect();
    let st = slot_state(store, cfg, &batch, &t_input)?;
    let sd: Vec<f64> = stats.space_var.iter().map(|v| v.sqrt()).collect();
    let depth_norm = match (d, gcfg.depth) {
        (3, Some(z)) => Some((z - stats.space_mean[2]) / sd[2]),
        (3, None) => Some(seq.output_locations()[0][2]),
        _ => None,
    };
    let window = match gcfg.window {
        Some(w) => w,
        None => auto_window(store, cfg, &st, gcfg, stats)?,
    };
    let spec = GridSpec { x1_min: window[0][0], x1_max: window[0][1], x2_min: window[1][0], x2_max: window[1][1], steps: gcfg.steps };
    let pts = spec.points();
    let log_jac: f64 = sd.iter().map(|s| s.ln()).sum();
    let mut slots = Vec::with_capacity(l);
    for slot in 0..l {
        let mut xn = Vec::with_capacity(pts.len() * d);
        for p in &pts {
            xn.push((p[0] - stats.space_mean[0]) / sd[0]);
            xn.push((p[1] - stats.space_mean[1]) / sd[1]);
            if let Some(z) = depth_norm {
                xn.push(z);
            }
        }
        let logp = slot_logpdf(store, cfg, &st, slot, &xn)?;
        let logp = logp.into_iter().map(|v| v - log_jac).collect();
        slots.push(DensityGrid {
            grid: spec.clone(),
            logp,
            event_index: seq.n_in + slot,
            meta: serde_json::json!({
                "slot": slot,
                "kind": "logp",
                "units": "data",
                "depth": depth_norm.map(|z| z * sd[2] + stats.space_mean[2]),
                "t_hat": pred.t_hat[slot],
                "x_true": pred.x_true[slot],
            }),
        });
    }
    let mut differences = Vec::new();
    if gcfg.differences {
        for slot in 1..l {
            let diff = slots[slot].logp.iter().zip(&slots[slot - 1].logp).map(|(a, b)| a.exp() - b.exp()).collect();
            differences.push(DensityGrid {
                grid: spec.clone(),
                logp: diff,
                event_index: seq.n_in + slot,
                meta: serde_json::json!({"slot": slot, "kind": "difference", "minus_slot": slot - 1}),
            });
        }
    }
    Ok(DensityExport { slots, differences })
}

/// `p_a - p_b` on a shared grid; all zeros when `a` is `b`.
pub fn difference_grid(a: &DensityGrid, b: &DensityGrid) -> Vec<f64> {
    a.logp.iter().zip(&b.logp).map(|(x, y)| x.exp() - y.exp()).collect()
}

/// Log-density in network units at the given flattened points `[m, d]`.
fn slot_logpdf<T: Scalar>(store: &ParamStore<T>, cfg: &NetConfig, st: &SlotState<T>, slot: usize, xn: &[f64]) -> Result<Vec<f64>> {
    let d = cfg.d_space;
    let m = xn.len() / d;
    let xt = Tensor::from_f64(vec![m, d], xn)?;
    let ctx_row: Vec<T> = st.ctx.data()[slot * d..(slot + 1) * d].to_vec();
    let ctx = Tape::new().constant(Tensor::new(vec![1, d], ctx_row)?).broadcast_to(&[m, d])?.value();
    let (z, ld) = heads::realnvp_inverse_values(store, cfg, &xt, &ctx)?;
    let z = z.to_f64();
    let mu = &st.mu[slot];
    let chol: Vec<f64> = st.chol[slot].iter().flatten().copied().collect();
    Ok((0..m)
        .map(|i| {
            let zi = &z[i * d..(i + 1) * d];
            linalg::mvn_logpdf_chol(zi, mu, &chol) + ld[i].to_f64_lossy()
        })
        .collect())
}

/// Union over slots of `mean ± span·σ` of flow samples, in data units.
fn auto_window<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &NetConfig,
    st: &SlotState<T>,
    gcfg: &GridConfig,
    stats: &NormStats,
) -> Result<[[f64; 2]; 2]> {
    let d = cfg.d_space;
    let n = gcfg.n_samples.max(2);
    let mut rng = RngState::new(gcfg.seed, streams::SAMPLING).fork(1);
    let mut w = [[f64::INFINITY, f64::NEG_INFINITY]; 2];
    for slot in 0..cfg.l_out {
        let mut z = Vec::with_capacity(n * d);
        for _ in 0..n {
            z.extend(heads::mvn_sample(&st.mu[slot], &st.chol[slot], &mut rng));
        }
        let ctx_row: Vec<T> = st.ctx.data()[slot * d..(slot + 1) * d].to_vec();
        let ctx = Tape::new().constant(Tensor::new(vec![1, d], ctx_row)?).broadcast_to(&[n, d])?.value();
        let (xs, _) = heads::realnvp_forward_values(store, cfg, &Tensor::from_f64(vec![n, d], &z)?, &ctx)?;
        let xs = xs.to_f64();
        for (k, wk) in w.iter_mut().enumerate() {
            let col: Vec<f64> = (0..n).map(|i| xs[i * d + k]).collect();
            let s = Summary::of(&col);
            let sd = stats.space_var[k].sqrt();
            let lo = (s.mean - gcfg.sigma_span * s.std) * sd + stats.space_mean[k];
            let hi = (s.mean + gcfg.sigma_span * s.std) * sd + stats.space_mean[k];
            wk[0] = wk[0].min(lo);
            wk[1] = wk[1].max(hi);
        }
    }
    Ok(w)
}
