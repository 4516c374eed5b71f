//! Transformer encoder-decoder with separate time and space streams.

use crate::autodiff::{AutodiffError, Mask, ParamStore, Tape, Tensor, Var};
use crate::rng::RngState;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("expected input shape {expected:?}, got {got:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeFlow {
    #[default]
    Softsign,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Per-head query/key/value width. Zero means `d_model / n_heads`.
    pub key_dim: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub d_space: usize,
    pub n_in: usize,
    pub l_out: usize,
    pub encoder_causal: bool,
    pub head_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub flow_scale: f64,
    pub time_flow: TimeFlow,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 6,
            n_heads: 6,
            key_dim: 0,
            ff_mult: 4,
            dropout: 0.1,
            d_space: 2,
            n_in: 497,
            l_out: 3,
            encoder_causal: true,
            head_hidden: 32,
            flow_layers: 4,
            flow_hidden: 32,
            flow_scale: 3.0,
            time_flow: TimeFlow::Softsign,
        }
    }
}

impl NetConfig {
    pub fn dk(&self) -> usize {
        if self.key_dim > 0 {
            self.key_dim
        } else {
            (self.d_model / self.n_heads.max(1)).max(1)
        }
    }

    pub fn n_features(&self) -> usize {
        self.d_space + 2
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.d_model == 0 {
            errs.push("d_model must be positive".to_string());
        }
        if self.n_heads == 0 {
            errs.push("n_heads must be positive".to_string());
        }
        if self.n_in == 0 || self.l_out == 0 {
            errs.push("n_in and l_out must be positive".to_string());
        }
        if !(2..=3).contains(&self.d_space) {
            errs.push(format!("d_space must be 2 or 3, got {}", self.d_space));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ff_mult == 0 || self.head_hidden == 0 || self.flow_hidden == 0 {
            errs.push("hidden widths must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(NeuralError::Config(errs.join("; ")))
        }
    }
}

pub const STREAMS: [&str; 2] = ["time", "space"];

/// The two parameter groups. They share no parameters and their losses add,
/// so each can be selected or frozen on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Time,
    Space,
}

impl Stream {
    /// Stream owning a parameter: the time transformer and `head.time` form
    /// the time group, everything else the space group.
    pub fn of_param(name: &str) -> Self {
        if name.starts_with("time.") || name.starts_with("head.time.") {
            Self::Time
        } else {
            Self::Space
        }
    }
}

fn linear_params<T: Scalar>(s: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngState) -> Result<()> {
    s.insert_uniform(format!("{name}.W"), &[fan_in, fan_out], fan_in, rng)?;
    s.insert_uniform(format!("{name}.b"), &[fan_out], fan_in, rng)?;
    Ok(())
}

fn ln_params<T: Scalar>(s: &mut ParamStore<T>, name: &str, dim: usize) -> Result<()> {
    s.insert(format!("{name}.g"), Tensor::ones(&[dim]))?;
    s.insert(format!("{name}.b"), Tensor::zeros(&[dim]))?;
    Ok(())
}

fn attn_params<T: Scalar>(s: &mut ParamStore<T>, name: &str, cfg: &NetConfig, rng: &mut RngState) -> Result<()> {
    let (d, hk) = (cfg.d_model, cfg.n_heads * cfg.dk());
    for w in ["Wq", "Wk", "Wv"] {
        s.insert_uniform(format!("{name}.{w}"), &[d, hk], d, rng)?;
    }
    s.insert_uniform(format!("{name}.Wo"), &[hk, d], hk, rng)?;
    s.insert_uniform(format!("{name}.bo"), &[d], hk, rng)?;
    Ok(())
}

fn ff_params<T: Scalar>(s: &mut ParamStore<T>, name: &str, cfg: &NetConfig, rng: &mut RngState) -> Result<()> {
    let inner = cfg.ff_mult * cfg.d_model;
    linear_params(s, &format!("{name}.l1"), cfg.d_model, inner, rng)?;
    linear_params(s, &format!("{name}.l2"), inner, cfg.d_model, rng)
}

/// Registers every network, head and flow parameter.
pub fn init_params<T: Scalar>(cfg: &NetConfig, rng: &mut RngState) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let (d, f) = (cfg.d_model, cfg.n_features());
    for stream in STREAMS {
        for part in ["enc", "dec"] {
            linear_params(&mut s, &format!("{stream}.{part}.embed.l1"), f, d, rng)?;
            linear_params(&mut s, &format!("{stream}.{part}.embed.l2"), d, d, rng)?;
        }
        for i in 0..cfg.n_layers {
            let p = format!("{stream}.enc.layer{i}");
            attn_params(&mut s, &format!("{p}.attn"), cfg, rng)?;
            ln_params(&mut s, &format!("{p}.ln1"), d)?;
            ff_params(&mut s, &format!("{p}.ff"), cfg, rng)?;
            ln_params(&mut s, &format!("{p}.ln2"), d)?;
        }
        for i in 0..cfg.n_layers {
            let p = format!("{stream}.dec.layer{i}");
            attn_params(&mut s, &format!("{p}.self_attn"), cfg, rng)?;
            ln_params(&mut s, &format!("{p}.ln1"), d)?;
            attn_params(&mut s, &format!("{p}.cross_attn"), cfg, rng)?;
            ln_params(&mut s, &format!("{p}.ln2"), d)?;
            ff_params(&mut s, &format!("{p}.ff"), cfg, rng)?;
            ln_params(&mut s, &format!("{p}.ln3"), d)?;
        }
        let out = if stream == "time" { 1 } else { cfg.d_space };
        linear_params(&mut s, &format!("{stream}.out.l1"), d, d, rng)?;
        linear_params(&mut s, &format!("{stream}.out.l2"), d, out, rng)?;
    }
    crate::heads::init_head_params(&mut s, cfg, rng)?;
    Ok(s)
}

pub fn linear<'t, T: Scalar>(t: &'t Tape<T>, s: &ParamStore<T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.matmul(t.param(s, &format!("{name}.W"))?)?.add(t.param(s, &format!("{name}.b"))?)?)
}

fn layer_norm<'t, T: Scalar>(t: &'t Tape<T>, s: &ParamStore<T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let g = t.param(s, &format!("{name}.g"))?;
    let b = t.param(s, &format!("{name}.b"))?;
    Ok(x.layer_norm(g, b, T::lit(1e-5))?)
}

/// `[len, dim]` sinusoidal position table.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let k = (i / 2 * 2) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(k);
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, dim], data).expect("pe shape")
}

/// Affine, ELU, affine, then positions `0..len` added.
pub fn embed_events<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    name: &str,
    events: Var<'t, T>,
    d_model: usize,
) -> Result<Var<'t, T>> {
    let shape = events.shape();
    let len = shape[shape.len() - 2];
    let h = linear(t, s, &format!("{name}.l1"), events)?.elu();
    let h = linear(t, s, &format!("{name}.l2"), h)?;
    let pe = t.constant(positional_encoding(len, d_model));
    Ok(h.add(pe)?)
}

/// Scaled dot-product attention over the last two axes.
pub fn attention<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, mask: Option<&Mask>) -> Result<Var<'t, T>> {
    let dk = *q.shape().last().expect("rank");
    let scores = q.matmul(k.transpose()?)?.scale(T::one() / T::lit(dk as f64).sqrt());
    let scores = match mask {
        Some(m) => scores.masked_fill(m)?,
        None => scores,
    };
    let rank = scores.shape().len();
    Ok(scores.softmax(rank - 1)?.matmul(v)?)
}

fn split_heads<'t, T: Scalar>(x: Var<'t, T>, heads: usize, dk: usize) -> Result<Var<'t, T>> {
    let sh = x.shape();
    let (b, l) = (sh[0], sh[1]);
    Ok(x.reshape(&[b, l, heads, dk])?.permute(&[0, 2, 1, 3])?)
}

/// Multi-head attention with queries from `xq` and keys/values from `xkv`.
pub fn multi_head<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    name: &str,
    cfg: &NetConfig,
    xq: Var<'t, T>,
    xkv: Var<'t, T>,
    mask: Option<&Mask>,
) -> Result<Var<'t, T>> {
    let (h, dk) = (cfg.n_heads, cfg.dk());
    let q = split_heads(xq.matmul(t.param(s, &format!("{name}.Wq"))?)?, h, dk)?;
    let k = split_heads(xkv.matmul(t.param(s, &format!("{name}.Wk"))?)?, h, dk)?;
    let v = split_heads(xkv.matmul(t.param(s, &format!("{name}.Wv"))?)?, h, dk)?;
    let o = attention(q, k, v, mask)?;
    let sh = o.shape();
    let o = o.permute(&[0, 2, 1, 3])?.reshape(&[sh[0], sh[2], h * dk])?;
    Ok(o.matmul(t.param(s, &format!("{name}.Wo"))?)?.add(t.param(s, &format!("{name}.bo"))?)?)
}

fn feed_forward<'t, T: Scalar>(t: &'t Tape<T>, s: &ParamStore<T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let h = linear(t, s, &format!("{name}.l1"), x)?.elu();
    linear(t, s, &format!("{name}.l2"), h)
}

/// Hidden states of one stream.
pub fn encoder_stream<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    stream: &str,
    inputs: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let n = inputs.shape()[1];
    let mask = Mask::causal(n);
    let mask = cfg.encoder_causal.then_some(&mask);
    let mut x = embed_events(t, s, &format!("{stream}.enc.embed"), inputs, cfg.d_model)?.dropout(cfg.dropout)?;
    for i in 0..cfg.n_layers {
        let p = format!("{stream}.enc.layer{i}");
        let a = multi_head(t, s, &format!("{p}.attn"), cfg, x, x, mask)?.dropout(cfg.dropout)?;
        x = layer_norm(t, s, &format!("{p}.ln1"), x.add(a)?)?;
        let f = feed_forward(t, s, &format!("{p}.ff"), x)?.dropout(cfg.dropout)?;
        x = layer_norm(t, s, &format!("{p}.ln2"), x.add(f)?)?;
    }
    Ok(x)
}

/// Decoder stream: causal self-attention over the output slots, then
/// unmasked cross-attention onto the same stream's encoder states.
pub fn decoder_stream<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    stream: &str,
    inputs: Var<'t, T>,
    memory: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let l = inputs.shape()[1];
    let mask = Mask::causal(l);
    let mut x = embed_events(t, s, &format!("{stream}.dec.embed"), inputs, cfg.d_model)?.dropout(cfg.dropout)?;
    for i in 0..cfg.n_layers {
        let p = format!("{stream}.dec.layer{i}");
        let a = multi_head(t, s, &format!("{p}.self_attn"), cfg, x, x, Some(&mask))?.dropout(cfg.dropout)?;
        x = layer_norm(t, s, &format!("{p}.ln1"), x.add(a)?)?;
        let c = multi_head(t, s, &format!("{p}.cross_attn"), cfg, x, memory, None)?.dropout(cfg.dropout)?;
        x = layer_norm(t, s, &format!("{p}.ln2"), x.add(c)?)?;
        let f = feed_forward(t, s, &format!("{p}.ff"), x)?.dropout(cfg.dropout)?;
        x = layer_norm(t, s, &format!("{p}.ln3"), x.add(f)?)?;
    }
    let h = linear(t, s, &format!("{stream}.out.l1"), x)?.elu();
    linear(t, s, &format!("{stream}.out.l2"), h)
}

pub struct Encoded<'t, T> {
    /// `[batch, n, d_model]`
    pub h_t: Var<'t, T>,
    pub h_x: Var<'t, T>,
}

pub struct Decoded<'t, T> {
    /// `[batch, L, 1]`
    pub h_t: Var<'t, T>,
    /// `[batch, L, d_space]`
    pub h_x: Var<'t, T>,
}

fn check_input<T: Scalar>(x: &Tensor<T>, batch: usize, len: usize, feats: usize) -> Result<()> {
    if x.shape() != [batch, len, feats] {
        return Err(NeuralError::Input { expected: vec![batch, len, feats], got: x.shape().to_vec() });
    }
    Ok(())
}

pub fn encoder_forward<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    inputs: &Tensor<T>,
) -> Result<Encoded<'t, T>> {
    let b = inputs.shape().first().copied().unwrap_or(0);
    check_input(inputs, b, cfg.n_in, cfg.n_features())?;
    let x = t.constant(inputs.clone());
    Ok(Encoded { h_t: encoder_stream(t, s, cfg, "time", x)?, h_x: encoder_stream(t, s, cfg, "space", x)? })
}

pub fn decoder_forward<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    inputs: &Tensor<T>,
    enc: &Encoded<'t, T>,
) -> Result<Decoded<'t, T>> {
    let b = enc.h_t.shape()[0];
    check_input(inputs, b, cfg.l_out, cfg.n_features())?;
    let x = t.constant(inputs.clone());
    Ok(Decoded {
        h_t: decoder_stream(t, s, cfg, "time", x, enc.h_t)?,
        h_x: decoder_stream(t, s, cfg, "space", x, enc.h_x)?,
    })
}

/// Encoder then decoder.
pub fn forward<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    enc_in: &Tensor<T>,
    dec_in: &Tensor<T>,
) -> Result<(Encoded<'t, T>, Decoded<'t, T>)> {
    let enc = encoder_forward(t, s, cfg, enc_in)?;
    let dec = decoder_forward(t, s, cfg, dec_in, &enc)?;
    Ok((enc, dec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig { d_model: 8, n_layers: 1, n_heads: 2, n_in: 5, l_out: 3, dropout: 0.0, ..Default::default() }
    }

    #[test]
    fn pe_distinguishes_positions() {
        let pe = positional_encoding::<f64>(2, 8);
        assert_ne!(&pe.data()[..8], &pe.data()[8..]);
    }

    #[test]
    fn key_dim_defaults_to_floor() {
        let cfg = NetConfig::default();
        assert_eq!(cfg.dk(), 10);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn output_shapes() {
        let cfg = NetConfig { d_space: 3, ..small() };
        let s = init_params::<f64>(&cfg, &mut RngState::new(1, 0)).unwrap();
        let t = Tape::new();
        let enc = Tensor::zeros(&[2, 5, 5]);
        let dec = Tensor::zeros(&[2, 3, 5]);
        let (e, d) = forward(&t, &s, &cfg, &enc, &dec).unwrap();
        assert_eq!(e.h_t.shape(), vec![2, 5, 8]);
        assert_eq!(d.h_t.shape(), vec![2, 3, 1]);
        assert_eq!(d.h_x.shape(), vec![2, 3, 3]);
    }

    #[test]
    fn wrong_input_shape() {
        let cfg = small();
        let s = init_params::<f64>(&cfg, &mut RngState::new(1, 0)).unwrap();
        let t = Tape::new();
        assert!(matches!(encoder_forward(&t, &s, &cfg, &Tensor::zeros(&[1, 4, 4])), Err(NeuralError::Input { .. })));
    }
}
