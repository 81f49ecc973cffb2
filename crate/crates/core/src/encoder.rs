//! Window encoder: input projection, causal-convolution attention backbone,
//! and the trend (time-domain) and period (frequency-domain) extractors.
//!
//! Every stage is causal, so row `t` of any output depends only on input
//! rows `≤ t`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{glorot, Linear, Mlp};
use crate::numerics::{Bound, Graph, ParameterSet, RandomStream, Tensor, Var};

/// Additive logit for attention positions that must receive zero weight.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Input channels `F`.
    pub input_channels: usize,
    /// Projected latent width `K_z`.
    pub latent_dim: usize,
    pub heads: usize,
    /// Backbone width `d_h`.
    pub hidden_dim: usize,
    /// Trend branches; branch `i` uses kernel `2^i`.
    pub conv_branches: usize,
    /// `K_T`.
    pub time_dim: usize,
    /// `K_F`.
    pub freq_dim: usize,
    /// Kernel and dilation of the Q/K/V causal convolutions.
    pub qkv_kernel: usize,
    pub qkv_dilation: usize,
    /// Trailing window length of the per-timestamp spectrum.
    pub fft_window: usize,
    /// Hidden width of the period MLP.
    pub period_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            latent_dim: 64,
            heads: 4,
            hidden_dim: 64,
            conv_branches: 4,
            time_dim: 32,
            freq_dim: 32,
            qkv_kernel: 3,
            qkv_dilation: 1,
            fft_window: 64,
            period_hidden: 64,
        }
    }
}

impl EncoderConfig {
    /// Total representation width `K = K_T + K_F`.
    pub fn repr_dim(&self) -> usize {
        self.time_dim + self.freq_dim
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_window / 2 + 1
    }

    /// Trailing rows that determine the final-timestamp representation
    /// beyond what keys and values already see.
    pub fn receptive_suffix(&self) -> usize {
        let trend = 1usize << (self.conv_branches - 1);
        self.fft_window.max(trend)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("latent_dim", self.latent_dim),
            ("heads", self.heads),
            ("hidden_dim", self.hidden_dim),
            ("conv_branches", self.conv_branches),
            ("time_dim", self.time_dim),
            ("freq_dim", self.freq_dim),
            ("qkv_kernel", self.qkv_kernel),
            ("qkv_dilation", self.qkv_dilation),
            ("fft_window", self.fft_window),
            ("period_hidden", self.period_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be ≥ 1")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.hidden_dim ({}) must be divisible by encoder.heads ({})",
                self.hidden_dim, self.heads
            )));
        }
        if self.conv_branches > 16 {
            return Err(Error::Config("encoder.conv_branches must be ≤ 16".into()));
        }
        Ok(())
    }
}

/// Graph handles for one encoded window.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Backbone embedding `r̃` (`rows×d_h`).
    pub contextual: Var,
    /// `r^T` (`rows×K_T`).
    pub time: Var,
    /// `r^F` (`rows×K_F`).
    pub freq: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    input: Mlp,
    attn_out: Linear,
    period: Mlp,
    /// `window × 2·bins` real DFT basis, cosine columns then sine columns,
    /// pre-scaled by `1/window`.
    basis: Tensor,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let w = config.fft_window;
        let bins = config.freq_bins();
        let mut basis = vec![0.0; w * 2 * bins];
        for j in 0..w {
            for k in 0..bins {
                let angle = 2.0 * PI * ((k * j) % w) as f64 / w as f64;
                basis[j * 2 * bins + k] = angle.cos() / w as f64;
                basis[j * 2 * bins + bins + k] = -angle.sin() / w as f64;
            }
        }
        Ok(Self {
            input: Mlp::new("encoder.input", config.input_channels, config.latent_dim, config.latent_dim),
            attn_out: Linear::new("encoder.attn.out", config.hidden_dim, config.hidden_dim),
            period: Mlp::new(
                "encoder.period",
                config.hidden_dim * bins,
                config.period_hidden,
                config.freq_dim,
            ),
            basis: Tensor::matrix(w, 2 * bins, basis)?,
            config,
        })
    }

    fn trend_path(i: usize, leaf: &str) -> String {
        format!("encoder.trend.{i}.{leaf}")
    }

    pub fn init(&self, stream: &mut RandomStream) -> Result<ParameterSet> {
        let c = &self.config;
        let mut p = ParameterSet::new();
        self.input.init(&mut p, stream)?;
        p.insert("encoder.attn.qkv.w", glorot(c.qkv_kernel * c.latent_dim, 3 * c.hidden_dim, stream))?;
        p.insert("encoder.attn.qkv.b", Tensor::zeros(&[1, 3 * c.hidden_dim]))?;
        self.attn_out.init(&mut p, stream)?;
        for i in 0..c.conv_branches {
            let k = 1 << i;
            p.insert(Self::trend_path(i, "w"), glorot(k * c.hidden_dim, c.time_dim, stream))?;
            p.insert(Self::trend_path(i, "b"), Tensor::zeros(&[1, c.time_dim]))?;
        }
        self.period.init(&mut p, stream)?;
        Ok(p)
    }

    /// Pointwise MLP `h×F → h×K_z`.
    pub fn project_input(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (_, f) = g.shape(x);
        if f != self.config.input_channels {
            return Err(Error::Contract(format!(
                "encoder expects {} input channels, window has {f}",
                self.config.input_channels
            )));
        }
        Ok(self.input.forward(g, p, x))
    }

    /// Masked multi-head attention over causal-conv Q/K/V.
    ///
    /// Queries are formed only for rows `query_from..T`; keys and values
    /// cover every row, so the returned rows equal the corresponding rows of
    /// a full pass.
    pub fn backbone(&self, g: &mut Graph, p: &Bound, z: Var, query_from: usize) -> Var {
        self.backbone_with_weights(g, p, z, query_from).0
    }

    /// As [`Self::backbone`], also returning each head's attention matrix.
    pub fn backbone_with_weights(&self, g: &mut Graph, p: &Bound, z: Var, query_from: usize) -> (Var, Vec<Var>) {
        let c = &self.config;
        let (t, _) = g.shape(z);
        assert!(query_from < t, "backbone: query_from {query_from} out of range for {t} rows");
        let d = c.hidden_dim;
        let dk = d / c.heads;
        let qkv = g.causal_conv(
            z,
            p.var("encoder.attn.qkv.w"),
            Some(p.var("encoder.attn.qkv.b")),
            c.qkv_kernel,
            c.qkv_dilation,
        );
        let q_rows = g.slice_rows(qkv, query_from, t);
        let r = t - query_from;
        let mut mask = vec![0.0; r * t];
        for i in 0..r {
            mask[i * t + query_from + i + 1..(i + 1) * t].fill(MASKED_LOGIT);
        }
        let mask = g.constant(Tensor::matrix(r, t, mask).expect("finite mask"));
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        let mut weights = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let q = g.slice_cols(q_rows, h * dk, (h + 1) * dk);
            let k = g.slice_cols(qkv, d + h * dk, d + (h + 1) * dk);
            let v = g.slice_cols(qkv, 2 * d + h * dk, 2 * d + (h + 1) * dk);
            let logits = g.matmul(q, k, true);
            let logits = g.scale(logits, inv_sqrt);
            let logits = g.add(logits, mask);
            let a = g.softmax_rows(logits);
            weights.push(a);
            heads.push(g.matmul(a, v, false));
        }
        let s = g.concat_cols(&heads);
        (self.attn_out.forward(g, p, s), weights)
    }

    /// Average of causal convolutions with kernels `1, 2, 4, …`.
    pub fn trend_extract(&self, g: &mut Graph, p: &Bound, r: Var) -> Var {
        let n = self.config.conv_branches;
        let mut acc: Option<Var> = None;
        for i in 0..n {
            let y = g.causal_conv(
                r,
                p.var(&Self::trend_path(i, "w")),
                Some(p.var(&Self::trend_path(i, "b"))),
                1 << i,
                1,
            );
            acc = Some(match acc {
                Some(a) => g.add(a, y),
                None => y,
            });
        }
        let sum = acc.expect("at least one branch");
        g.scale(sum, 1.0 / n as f64)
    }

    /// Trailing-window magnitude spectra per embedding channel (`rows ×
    /// d_h·bins`, channel-major), before the MLP.
    pub fn spectrum(&self, g: &mut Graph, r: Var) -> Var {
        let (t, d) = g.shape(r);
        let bins = self.config.freq_bins();
        let windows = g.sliding_windows(r, self.config.fft_window);
        let basis = g.constant(self.basis.clone());
        let coeffs = g.matmul(windows, basis, false);
        let re = g.slice_cols(coeffs, 0, bins);
        let im = g.slice_cols(coeffs, bins, 2 * bins);
        let re2 = g.square(re);
        let im2 = g.square(im);
        let power = g.add(re2, im2);
        // |X| = exp(½·log(power)); the offset keeps log finite on silent bins.
        let power = g.offset(power, 1e-12);
        let logp = g.log(power);
        let half = g.scale(logp, 0.5);
        let mag = g.exp(half);
        g.reshape(mag, t, d * bins)
    }

    pub fn period_extract(&self, g: &mut Graph, p: &Bound, r: Var) -> Var {
        let spec = self.spectrum(g, r);
        self.period.forward(g, p, spec)
    }

    /// Full pipeline on a `T×F` window, with an optional `T×1` keep-mask
    /// applied after the input projection.
    ///
    /// With `output_from > 0` only rows `output_from..T` are produced; their
    /// values match a full pass as long as at least
    /// [`EncoderConfig::receptive_suffix`] rows are kept.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mask: Option<Var>,
        output_from: usize,
    ) -> Result<EncoderOutput> {
        let (t, _) = g.shape(x);
        if t == 0 {
            return Err(Error::Contract("encoder input window is empty".into()));
        }
        let mut z = self.project_input(g, p, x)?;
        if let Some(m) = mask {
            z = g.mul_col(z, m);
        }
        let r = self.backbone(g, p, z, output_from);
        Ok(EncoderOutput {
            contextual: r,
            time: self.trend_extract(g, p, r),
            freq: self.period_extract(g, p, r),
        })
    }

    /// Exactly rows `keep_from..T` of a full [`Self::forward`], computing
    /// queries only for the rows that feed them.
    pub fn forward_tail(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mask: Option<Var>,
        keep_from: usize,
    ) -> Result<EncoderOutput> {
        let from = keep_from.saturating_sub(self.config.receptive_suffix() - 1);
        let out = self.forward(g, p, x, mask, from)?;
        if from == keep_from {
            return Ok(out);
        }
        let (rows, _) = g.shape(out.time);
        let skip = keep_from - from;
        Ok(EncoderOutput {
            contextual: g.slice_rows(out.contextual, skip, rows),
            time: g.slice_rows(out.time, skip, rows),
            freq: g.slice_rows(out.freq, skip, rows),
        })
    }

    /// Inference-time representation of every row: `T × K`.
    pub fn encode(&self, params: &ParameterSet, window: &Tensor) -> Result<Tensor> {
        self.encode_rows(params, window, 0)
    }

    /// Representation of the window's final timestamp (its summary vector).
    pub fn encode_last(&self, params: &ParameterSet, window: &Tensor) -> Result<Vec<f64>> {
        let t = window.rows();
        let from = t.saturating_sub(self.config.receptive_suffix());
        let out = self.encode_rows(params, window, from)?;
        Ok(out.row_slice(out.rows() - 1).to_vec())
    }

    fn encode_rows(&self, params: &ParameterSet, window: &Tensor, from: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.constant(window.clone().reshaped(vec![window.rows(), window.cols()])?);
        let out = self.forward(&mut g, &p, x, None, from)?;
        let r = g.concat_cols(&[out.time, out.freq]);
        g.check_finite()?;
        Ok(g.value(r).clone())
    }
}
