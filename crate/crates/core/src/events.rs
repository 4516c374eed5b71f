//! Event data model, CSV ingestion, windowing, splitting and normalization.

use crate::rng::{streams, RngState};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("malformed header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("row {row}: expected {expected} columns, found {found}")]
    ColumnCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column `{column}`: `{value}` is not a finite number")]
    NonFinite {
        row: usize,
        column: String,
        value: String,
    },
    #[error("non-monotone time at row {row}: {t} < previous {prev}")]
    NonMonotone { row: usize, t: f64, prev: f64 },
    #[error("space dimension must be 2 or 3, got {0}")]
    Dimension(usize),
    #[error("need at least {needed} events, have {have}")]
    TooFewEvents { needed: usize, have: usize },
    #[error("invalid window: {0}")]
    Window(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("zero variance in standardized component `{0}`")]
    ZeroVariance(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EventError>;

/// One marked point: time, location and a scalar extra marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub x: Vec<f64>,
    pub m: f64,
}

impl Event {
    pub fn new(t: f64, x: Vec<f64>, m: f64) -> Self {
        Self { t, x, m }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// A window of `n_in + l_out` events whose times start at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<Event>,
    pub n_in: usize,
    pub l_out: usize,
    /// Absolute time of the first event before shifting.
    pub t0: f64,
}

impl EventSequence {
    pub fn inputs(&self) -> &[Event] {
        &self.events[..self.n_in]
    }

    pub fn outputs(&self) -> &[Event] {
        &self.events[self.n_in..]
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }
}

/// Train-split statistics used to normalize every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub space_mean: Vec<f64>,
    pub space_var: Vec<f64>,
    pub marker_mean: f64,
    /// Divisor variance for the marker. Set to 1 when the marker is constant.
    pub marker_var: f64,
    #[serde(default)]
    pub marker_constant: bool,
    /// Largest inter-event interval in the train split.
    pub dt_max: f64,
}

impl NormStats {
    /// Constants that turn network-unit NLLs into data-unit NLLs: intervals
    /// pick up `log dt_max`, locations `Σ ½ log var`.
    pub fn nll_offsets(&self) -> (f64, f64) {
        let cs = self.space_var.iter().map(|v| 0.5 * v.ln()).sum();
        (self.dt_max.ln(), cs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub train: Vec<EventSequence>,
    pub val: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
    pub stats: NormStats,
    pub d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SequenceDataset {
    pub fn split(&self, which: Split) -> &[EventSequence] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn n_in(&self) -> usize {
        self.train.first().map_or(0, |s| s.n_in)
    }

    pub fn l_out(&self) -> usize {
        self.train.first().map_or(0, |s| s.l_out)
    }
}

/// Written next to serialized splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub d: usize,
    pub n_in: usize,
    pub l_out: usize,
    pub seq_len: usize,
    pub overlap: usize,
    pub seed: u64,
    pub stats: NormStats,
}

fn header_for(d: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=d).map(|i| format!("x{i}")));
    h.push("m".to_string());
    h
}

/// Parses `t,x1,...,xd,m` rows sorted by time.
pub fn parse_event_csv<R: Read>(reader: R, d: usize) -> Result<Vec<Event>> {
    if !(2..=3).contains(&d) {
        return Err(EventError::Dimension(d));
    }
    let expected = header_for(d);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(EventError::Header {
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    let mut events = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != d + 2 {
            return Err(EventError::ColumnCount {
                row,
                expected: d + 2,
                found: rec.len(),
            });
        }
        let mut vals = Vec::with_capacity(d + 2);
        for (field, column) in rec.iter().zip(&expected) {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => vals.push(v),
                _ => {
                    return Err(EventError::NonFinite {
                        row,
                        column: column.clone(),
                        value: field.to_string(),
                    })
                }
            }
        }
        let t = vals[0];
        if t < prev {
            return Err(EventError::NonMonotone { row, t, prev });
        }
        prev = t;
        events.push(Event::new(t, vals[1..=d].to_vec(), vals[d + 1]));
    }
    Ok(events)
}

pub fn write_event_csv<W: Write>(writer: W, events: &[Event]) -> Result<()> {
    let d = events.first().map_or(2, Event::dim);
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(header_for(d))?;
    for e in events {
        let mut row = Vec::with_capacity(d + 2);
        row.push(e.t.to_string());
        row.extend(e.x.iter().map(f64::to_string));
        row.push(e.m.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Cuts overlapping windows of `seq_len` events with stride `seq_len - overlap`.
///
/// The trailing partial window is discarded. Each window's times are shifted
/// so its first event sits at 0; the original start is kept in `t0`.
pub fn window_sequences(
    events: &[Event],
    seq_len: usize,
    overlap: usize,
    n_in: usize,
) -> Result<Vec<EventSequence>> {
    if overlap >= seq_len {
        return Err(EventError::Window(format!(
            "overlap {overlap} must be smaller than seq_len {seq_len}"
        )));
    }
    if n_in == 0 || n_in >= seq_len {
        return Err(EventError::Window(format!(
            "input length {n_in} must lie in 1..{seq_len}"
        )));
    }
    if events.len() < seq_len {
        return Err(EventError::TooFewEvents {
            needed: seq_len,
            have: events.len(),
        });
    }
    let stride = seq_len - overlap;
    let count = (events.len() - seq_len) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let slice = &events[w * stride..w * stride + seq_len];
            let t0 = slice[0].t;
            EventSequence {
                events: slice
                    .iter()
                    .map(|e| Event::new(e.t - t0, e.x.clone(), e.m))
                    .collect(),
                n_in,
                l_out: seq_len - n_in,
                t0,
            }
        })
        .collect())
}

/// Shuffles with `seed` and allocates `floor(f * n)` sequences to val and test
/// (at least one each), the remainder to train. Statistics come from train only.
pub fn split_dataset(
    sequences: Vec<EventSequence>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SequenceDataset> {
    let (ft, fv, fs) = fractions;
    if (ft + fv + fs - 1.0).abs() > 1e-9 || ft <= 0.0 || fv < 0.0 || fs < 0.0 {
        return Err(EventError::Split(format!(
            "fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let n = sequences.len();
    if n < 3 {
        return Err(EventError::Split(format!(
            "need at least 3 sequences for nonempty splits, have {n}"
        )));
    }
    let d = sequences[0].events[0].dim();
    let n_val = ((fv * n as f64).floor() as usize).max(1);
    let n_test = ((fs * n as f64).floor() as usize).max(1);
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed, streams::SPLIT).shuffle(&mut order);
    let mut slots: Vec<Option<EventSequence>> = sequences.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<EventSequence> {
        idx.iter().map(|&i| slots[i].take().expect("each index once")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    let stats = compute_stats(&train)?;
    Ok(SequenceDataset {
        train,
        val,
        test,
        stats,
        d,
    })
}

/// Population mean/variance of locations and markers plus the largest
/// inter-event interval over the given sequences.
pub fn compute_stats(train: &[EventSequence]) -> Result<NormStats> {
    let d = train
        .first()
        .and_then(|s| s.events.first())
        .map(Event::dim)
        .ok_or_else(|| EventError::Split("empty train split".into()))?;
    let mut count = 0usize;
    let mut sx = vec![0.0; d];
    let mut sm = 0.0;
    let mut dt_max: f64 = 0.0;
    for s in train {
        for (i, e) in s.events.iter().enumerate() {
            count += 1;
            for k in 0..d {
                sx[k] += e.x[k];
            }
            sm += e.m;
            if i > 0 {
                dt_max = dt_max.max(e.t - s.events[i - 1].t);
            }
        }
    }
    let nf = count as f64;
    let space_mean: Vec<f64> = sx.iter().map(|v| v / nf).collect();
    let marker_mean = sm / nf;
    let mut vx = vec![0.0; d];
    let mut vm = 0.0;
    for e in train.iter().flat_map(|s| &s.events) {
        for k in 0..d {
            vx[k] += (e.x[k] - space_mean[k]).powi(2);
        }
        vm += (e.m - marker_mean).powi(2);
    }
    let space_var: Vec<f64> = vx.iter().map(|v| v / nf).collect();
    for (k, v) in space_var.iter().enumerate() {
        if *v <= 0.0 {
            return Err(EventError::ZeroVariance(format!("x{}", k + 1)));
        }
    }
    if dt_max <= 0.0 {
        return Err(EventError::ZeroVariance("time intervals".into()));
    }
    let marker_var = vm / nf;
    let marker_constant = marker_var <= 0.0;
    Ok(NormStats {
        space_mean,
        space_var,
        marker_mean,
        marker_var: if marker_constant { 1.0 } else { marker_var },
        marker_constant,
        dt_max,
    })
}

/// Min/max pair used to rescale a block of times onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn of(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    /// A block with a single distinct value maps to 0.
    pub fn apply(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (v - self.min) / span
        } else {
            0.0
        }
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// A sequence in network units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSequence {
    /// Input times min-max rescaled with their own extremes.
    pub t_in: Vec<f64>,
    /// Output times min-max rescaled with their own extremes.
    pub t_out: Vec<f64>,
    pub t_in_scale: MinMax,
    pub t_out_scale: MinMax,
    /// Inter-event intervals divided by `dt_max`; the first entry is 0.
    pub dt: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub m: Vec<f64>,
    pub n_in: usize,
    pub l_out: usize,
    pub t0: f64,
    /// Shifted (window-relative) raw time of the last input event.
    pub t_last_input: f64,
}

impl NormalizedSequence {
    /// Event features `[t, x.., m]` for the input block.
    pub fn input_features(&self) -> Vec<Vec<f64>> {
        (0..self.n_in)
            .map(|i| self.features(self.t_in[i], i))
            .collect()
    }

    pub fn output_features(&self) -> Vec<Vec<f64>> {
        (0..self.l_out)
            .map(|l| self.features(self.t_out[l], self.n_in + l))
            .collect()
    }

    fn features(&self, t: f64, i: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.x[i].len() + 2);
        f.push(t);
        f.extend_from_slice(&self.x[i]);
        f.push(self.m[i]);
        f
    }

    pub fn output_intervals(&self) -> &[f64] {
        &self.dt[self.n_in..]
    }

    pub fn output_locations(&self) -> &[Vec<f64>] {
        &self.x[self.n_in..]
    }

    /// Window times in units of `dt_max` (cumulative normalized intervals).
    pub fn scaled_times(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.dt
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDataset {
    pub train: Vec<NormalizedSequence>,
    pub val: Vec<NormalizedSequence>,
    pub test: Vec<NormalizedSequence>,
    pub stats: NormStats,
    pub d: usize,
}

impl NormalizedDataset {
    pub fn split(&self, which: Split) -> &[NormalizedSequence] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn normalize_location(x: &[f64], stats: &NormStats) -> Vec<f64> {
    x.iter()
        .zip(stats.space_mean.iter().zip(&stats.space_var))
        .map(|(v, (mu, var))| (v - mu) / var.sqrt())
        .collect()
}

pub fn denormalize_location(x_norm: &[f64], stats: &NormStats) -> Vec<f64> {
    x_norm
        .iter()
        .zip(stats.space_mean.iter().zip(&stats.space_var))
        .map(|(v, (mu, var))| v * var.sqrt() + mu)
        .collect()
}

pub fn normalize_marker(m: f64, stats: &NormStats) -> f64 {
    (m - stats.marker_mean) / stats.marker_var.sqrt()
}

pub fn denormalize_marker(m_norm: f64, stats: &NormStats) -> f64 {
    m_norm * stats.marker_var.sqrt() + stats.marker_mean
}

pub fn normalize_intervals(dt: &[f64], stats: &NormStats) -> Vec<f64> {
    dt.iter().map(|v| v / stats.dt_max).collect()
}

pub fn denormalize_intervals(dt_norm: &[f64], stats: &NormStats) -> Vec<f64> {
    dt_norm.iter().map(|v| v * stats.dt_max).collect()
}

/// Normalizes one window with the given statistics. Val/test intervals may
/// exceed 1; no clamping happens here.
pub fn normalize_sequence(seq: &EventSequence, stats: &NormStats) -> NormalizedSequence {
    let times = seq.times();
    let (tin, tout) = times.split_at(seq.n_in);
    let t_in_scale = MinMax::of(tin);
    let t_out_scale = MinMax::of(tout);
    let mut dt = Vec::with_capacity(times.len());
    dt.push(0.0);
    dt.extend(times.windows(2).map(|w| (w[1] - w[0]) / stats.dt_max));
    NormalizedSequence {
        t_in: tin.iter().map(|&t| t_in_scale.apply(t)).collect(),
        t_out: tout.iter().map(|&t| t_out_scale.apply(t)).collect(),
        t_in_scale,
        t_out_scale,
        dt,
        x: seq
            .events
            .iter()
            .map(|e| normalize_location(&e.x, stats))
            .collect(),
        m: seq.events.iter().map(|e| normalize_marker(e.m, stats)).collect(),
        n_in: seq.n_in,
        l_out: seq.l_out,
        t0: seq.t0,
        t_last_input: tin[tin.len() - 1],
    }
}

pub fn normalize(dataset: &SequenceDataset) -> NormalizedDataset {
    let norm = |v: &[EventSequence]| -> Vec<NormalizedSequence> {
        v.iter().map(|s| normalize_sequence(s, &dataset.stats)).collect()
    };
    NormalizedDataset {
        train: norm(&dataset.train),
        val: norm(&dataset.val),
        test: norm(&dataset.test),
        stats: dataset.stats.clone(),
        d: dataset.d,
    }
}

/// Reconstructs raw (window-shifted) events from a normalized sequence.
pub fn denormalize_sequence(seq: &NormalizedSequence, stats: &NormStats) -> Vec<Event> {
    let dts = denormalize_intervals(&seq.dt, stats);
    let mut t = 0.0;
    dts.iter()
        .enumerate()
        .map(|(i, dt)| {
            t += dt;
            Event::new(
                t,
                denormalize_location(&seq.x[i], stats),
                denormalize_marker(seq.m[i], stats),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64) -> Event {
        Event::new(t, vec![t.sin(), t.cos()], 1.0 + t)
    }

    #[test]
    fn single_row_csv() {
        let evs = parse_event_csv("t,x1,x2,m\n0.0,1.0,2.0,3.0".as_bytes(), 2).unwrap();
        assert_eq!(evs, vec![Event::new(0.0, vec![1.0, 2.0], 3.0)]);
    }

    #[test]
    fn empty_csv_body() {
        let evs = parse_event_csv("t,x1,x2,m\n".as_bytes(), 2).unwrap();
        assert!(evs.is_empty());
    }

    #[test]
    fn csv_rejects_non_monotone() {
        let err = parse_event_csv("t,x1,x2,m\n5,0,0,0\n4,0,0,0\n".as_bytes(), 2).unwrap_err();
        assert!(err.to_string().contains("non-monotone time"), "{err}");
    }

    #[test]
    fn csv_rejects_bad_header_columns_and_values() {
        assert!(matches!(
            parse_event_csv("t,x,y,m\n".as_bytes(), 2),
            Err(EventError::Header { .. })
        ));
        assert!(matches!(
            parse_event_csv("t,x1,x2,m\n1,2,3\n".as_bytes(), 2),
            Err(EventError::ColumnCount { row: 1, .. })
        ));
        assert!(matches!(
            parse_event_csv("t,x1,x2,m\n1,2,inf,0\n".as_bytes(), 2),
            Err(EventError::NonFinite { .. })
        ));
        assert!(matches!(
            parse_event_csv("t,x1,x2,m\n1,2,abc,0\n".as_bytes(), 2),
            Err(EventError::NonFinite { .. })
        ));
    }

    #[test]
    fn csv_write_then_parse_is_exact() {
        let evs: Vec<Event> = (0..20).map(|i| ev(i as f64 * 0.37)).collect();
        let mut buf = Vec::new();
        write_event_csv(&mut buf, &evs).unwrap();
        assert_eq!(parse_event_csv(buf.as_slice(), 2).unwrap(), evs);
    }

    #[test]
    fn window_starts_follow_stride() {
        let evs: Vec<Event> = (0..504).map(|i| ev(i as f64)).collect();
        let w = window_sequences(&evs, 500, 498, 497).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.iter().map(|s| s.t0).collect::<Vec<_>>(), vec![0.0, 2.0, 4.0]);
        assert!(w.iter().all(|s| s.events[0].t == 0.0 && s.events.len() == 500));
        assert_eq!(w[0].l_out, 3);
    }

    #[test]
    fn window_boundary_and_too_few() {
        let evs: Vec<Event> = (0..500).map(|i| ev(10.0 + i as f64)).collect();
        let w = window_sequences(&evs, 500, 498, 497).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].events[0].t, 0.0);
        assert_eq!(w[0].t0, 10.0);
        assert!(matches!(
            window_sequences(&evs[..499], 500, 498, 497),
            Err(EventError::TooFewEvents { .. })
        ));
    }

    #[test]
    fn window_count_for_ten_thousand_events() {
        let evs: Vec<Event> = (0..10_000).map(|i| ev(i as f64)).collect();
        let w = window_sequences(&evs, 500, 498, 497).unwrap();
        // floor((10000 - 500) / 2) + 1
        assert_eq!(w.len(), (10_000 - 500) / 2 + 1);
        assert_eq!(w.len(), 4751);
    }

    fn seqs(n: usize) -> Vec<EventSequence> {
        let evs: Vec<Event> = (0..n + 9).map(|i| ev(i as f64 * 0.5 + (i % 3) as f64 * 0.1)).collect();
        window_sequences(&evs, 10, 9, 8).unwrap()
    }

    #[test]
    fn split_counts() {
        let ds = split_dataset(seqs(100), (0.80, 0.14, 0.06), 1).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (80, 14, 6));
        let ds = split_dataset(seqs(3), (0.80, 0.14, 0.06), 1).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (1, 1, 1));
        assert!(split_dataset(seqs(2), (0.80, 0.14, 0.06), 1).is_err());
        assert!(split_dataset(seqs(10), (0.80, 0.14, 0.07), 1).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let a = split_dataset(seqs(50), (0.80, 0.14, 0.06), 9).unwrap();
        let b = split_dataset(seqs(50), (0.80, 0.14, 0.06), 9).unwrap();
        assert_eq!(a, b);
        let mut t0s: Vec<f64> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .map(|s| s.t0)
            .collect();
        t0s.sort_by(f64::total_cmp);
        t0s.dedup();
        assert_eq!(t0s.len(), 50);
    }

    #[test]
    fn standardization_and_interval_scaling() {
        let stats = NormStats {
            space_mean: vec![5.0, 0.0],
            space_var: vec![4.0, 1.0],
            marker_mean: 0.0,
            marker_var: 1.0,
            marker_constant: false,
            dt_max: 10.0,
        };
        assert_eq!(normalize_location(&[7.0, 0.0], &stats)[0], 1.0);
        assert_eq!(normalize_intervals(&[2.0], &stats), vec![0.2]);
        assert_eq!(denormalize_location(&[0.0, 0.0], &stats), vec![5.0, 0.0]);
        assert_eq!(denormalize_location(&[1.0, 1.0], &stats), vec![7.0, 1.0]);
    }

    #[test]
    fn train_intervals_lie_in_unit_interval() {
        let ds = split_dataset(seqs(40), (0.80, 0.14, 0.06), 2).unwrap();
        let n = normalize(&ds);
        for s in &n.train {
            assert!(s.dt.iter().all(|&d| (0.0..=1.0).contains(&d)));
            assert!(s.t_in.iter().chain(&s.t_out).all(|&t| (0.0..=1.0).contains(&t)));
            assert_eq!(s.t_out[0], 0.0);
            assert_eq!(*s.t_out.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn constant_marker_is_centered_only() {
        let evs: Vec<Event> = (0..30)
            .map(|i| Event::new(i as f64, vec![(i as f64).sin(), (i as f64 * 0.3).cos()], 1.0))
            .collect();
        let w = window_sequences(&evs, 10, 8, 8).unwrap();
        let ds = split_dataset(w, (0.8, 0.14, 0.06), 0).unwrap();
        assert!(ds.stats.marker_constant);
        let n = normalize(&ds);
        assert!(n.train.iter().flat_map(|s| &s.m).all(|&m| m == 0.0));
    }

    #[test]
    fn zero_location_variance_is_an_error() {
        let evs: Vec<Event> = (0..30).map(|i| Event::new(i as f64, vec![1.0, i as f64], 1.0)).collect();
        let w = window_sequences(&evs, 10, 8, 8).unwrap();
        assert!(matches!(
            split_dataset(w, (0.8, 0.14, 0.06), 0),
            Err(EventError::ZeroVariance(c)) if c == "x1"
        ));
    }
}
