//! Conditional affine-coupling flow: an invertible map between standard
//! normal noise `z` and observations `y` given a condition vector `h`.
//!
//! The forward direction is `z → y`. Each layer keeps the first `d`
//! coordinates and maps the rest as `y_b = z_b ⊙ exp(s) + t`, where
//! `s = clamp · tanh(ŝ)` and `(ŝ, t)` come from MLPs of `[z_a, h]`.
//! Coordinates are reversed between layers so every coordinate gets
//! transformed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::numerics::{
    evaluate_with_gradients, Bound, Distribution, Graph, OptimizerConfig, ParameterSet, RandomStream, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Coupling layers `K`.
    pub layers: usize,
    /// Hidden width of the scale and translation MLPs.
    pub hidden: usize,
    /// Bound on `|s|`.
    pub scale_clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            scale_clamp: 3.0,
        }
    }
}

/// One coupling layer followed by a coordinate reversal.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub dim: usize,
    /// Kept coordinates `d`; zero only for one-dimensional flows, where the
    /// networks see the condition alone.
    pub split: usize,
    pub cond_dim: usize,
    pub scale_clamp: f64,
    /// Whether the output coordinates are reversed.
    pub reverse: bool,
    s_net: Mlp,
    t_net: Mlp,
}

/// `n×1` column of ones, the conditioner input when it has nothing else.
fn ones_column(g: &mut Graph, n: usize) -> Var {
    g.constant(Tensor::full(&[n, 1], 1.0))
}

fn reverse_cols(g: &mut Graph, x: Var) -> Var {
    let (_, d) = g.shape(x);
    if d <= 1 {
        return x;
    }
    let cols: Vec<Var> = (0..d).rev().map(|j| g.slice_cols(x, j, j + 1)).collect();
    g.concat_cols(&cols)
}

impl CouplingLayer {
    pub fn new(name: &str, dim: usize, cond_dim: usize, hidden: usize, scale_clamp: f64, reverse: bool) -> Self {
        let split = dim / 2;
        let input = (split + cond_dim).max(1);
        Self {
            dim,
            split,
            cond_dim,
            scale_clamp,
            reverse,
            s_net: Mlp::new(&format!("{name}.s"), input, hidden, dim - split),
            t_net: Mlp::new(&format!("{name}.t"), input, hidden, dim - split),
        }
    }

    pub fn init(&self, params: &mut ParameterSet, stream: &mut RandomStream) -> Result<()> {
        self.s_net.init(params, stream)?;
        self.t_net.init(params, stream)?;
        // Start at the identity map.
        for net in [&self.s_net, &self.t_net] {
            params
                .get_mut(&net.out.weight_path())
                .expect("just inserted")
                .data_mut()
                .fill(0.0);
        }
        Ok(())
    }

    /// Scale and translation for the transformed block.
    fn conditioner(&self, g: &mut Graph, p: &Bound, kept: Option<Var>, h: Option<Var>, rows: usize) -> (Var, Var) {
        let parts: Vec<Var> = kept.into_iter().chain(h).collect();
        let input = if parts.is_empty() {
            ones_column(g, rows)
        } else {
            g.concat_cols(&parts)
        };
        let raw = self.s_net.forward(g, p, input);
        let bounded = g.tanh(raw);
        let s = g.scale(bounded, self.scale_clamp);
        let t = self.t_net.forward(g, p, input);
        (s, t)
    }

    fn split_input(&self, g: &mut Graph, x: Var) -> (Option<Var>, Var) {
        if self.split == 0 {
            (None, x)
        } else {
            let a = g.slice_cols(x, 0, self.split);
            let b = g.slice_cols(x, self.split, self.dim);
            (Some(a), b)
        }
    }

    fn join(&self, g: &mut Graph, kept: Option<Var>, moved: Var) -> Var {
        match kept {
            Some(a) => g.concat_cols(&[a, moved]),
            None => moved,
        }
    }

    /// `z → y`, with per-row `log|det ∂y/∂z|` (`n×1`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, h: Option<Var>) -> (Var, Var) {
        let (n, _) = g.shape(z);
        let (za, zb) = self.split_input(g, z);
        let (s, t) = self.conditioner(g, p, za, h, n);
        let es = g.exp(s);
        let scaled = g.mul(zb, es);
        let yb = g.add(scaled, t);
        let y = self.join(g, za, yb);
        let y = if self.reverse { reverse_cols(g, y) } else { y };
        (y, g.sum_cols(s))
    }

    /// `y → z`, with per-row `log|det ∂z/∂y|` (`n×1`).
    pub fn inverse(&self, g: &mut Graph, p: &Bound, y: Var, h: Option<Var>) -> (Var, Var) {
        let (n, _) = g.shape(y);
        let y = if self.reverse { reverse_cols(g, y) } else { y };
        let (ya, yb) = self.split_input(g, y);
        let (s, t) = self.conditioner(g, p, ya, h, n);
        let shifted = g.sub(yb, t);
        let neg_s = g.neg(s);
        let ens = g.exp(neg_s);
        let zb = g.mul(shifted, ens);
        let z = self.join(g, ya, zb);
        let ld = g.sum_cols(s);
        (z, g.neg(ld))
    }
}

/// `K` coupling layers over `R^D` with a standard normal base.
#[derive(Clone, Debug)]
pub struct FlowStack {
    pub dim: usize,
    pub cond_dim: usize,
    pub layers: Vec<CouplingLayer>,
}

impl FlowStack {
    pub fn new(name: &str, dim: usize, cond_dim: usize, cfg: &FlowConfig) -> Result<Self> {
        if dim == 0 || cfg.layers == 0 || cfg.hidden == 0 {
            return Err(Error::Config("flow needs dimension, layers, and hidden width ≥ 1".into()));
        }
        if !(cfg.scale_clamp > 0.0 && cfg.scale_clamp.is_finite()) {
            return Err(Error::Config("flow.scale_clamp must be positive and finite".into()));
        }
        let layers = (0..cfg.layers)
            .map(|i| {
                CouplingLayer::new(
                    &format!("{name}.{i}"),
                    dim,
                    cond_dim,
                    cfg.hidden,
                    cfg.scale_clamp,
                    i + 1 < cfg.layers,
                )
            })
            .collect();
        Ok(Self { dim, cond_dim, layers })
    }

    pub fn init(&self, params: &mut ParameterSet, stream: &mut RandomStream) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(params, stream))
    }

    fn check(&self, g: &Graph, x: Var, h: Option<Var>) -> Result<()> {
        let (n, d) = g.shape(x);
        if d != self.dim {
            return Err(Error::Contract(format!("flow expects dimension {}, got {d}", self.dim)));
        }
        match h {
            Some(h) if g.shape(h) != (n, self.cond_dim) => Err(Error::Contract(format!(
                "flow condition must be {n}×{}, got {:?}",
                self.cond_dim,
                g.shape(h)
            ))),
            None if self.cond_dim != 0 => Err(Error::Contract("flow condition missing".into())),
            _ => Ok(()),
        }
    }

    /// Noise to data through every layer; returns `y` and the summed log-det.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, h: Option<Var>) -> Result<(Var, Var)> {
        self.check(g, z, h)?;
        let mut x = z;
        let mut total: Option<Var> = None;
        for l in &self.layers {
            let (y, ld) = l.forward(g, p, x, h);
            x = y;
            total = Some(match total {
                Some(t) => g.add(t, ld),
                None => ld,
            });
        }
        Ok((x, total.expect("at least one layer")))
    }

    /// Data to noise; returns `z` and the summed inverse log-det.
    pub fn inverse(&self, g: &mut Graph, p: &Bound, y: Var, h: Option<Var>) -> Result<(Var, Var)> {
        self.check(g, y, h)?;
        let mut x = y;
        let mut total: Option<Var> = None;
        for l in self.layers.iter().rev() {
            let (z, ld) = l.inverse(g, p, x, h);
            x = z;
            total = Some(match total {
                Some(t) => g.add(t, ld),
                None => ld,
            });
        }
        Ok((x, total.expect("at least one layer")))
    }

    /// Per-row `log p(y | h)` (`n×1`).
    pub fn log_density(&self, g: &mut Graph, p: &Bound, y: Var, h: Option<Var>) -> Result<Var> {
        let (z, ld) = self.inverse(g, p, y, h)?;
        let zz = g.square(z);
        let ss = g.sum_cols(zz);
        let base = g.scale(ss, -0.5);
        let base = g.offset(base, -0.5 * self.dim as f64 * (2.0 * PI).ln());
        Ok(g.add(base, ld))
    }

    /// `n` draws from `p(· | h)`; `h` is a single `1×cond` row (or absent),
    /// repeated for every draw.
    pub fn sample(&self, params: &ParameterSet, h: Option<&Tensor>, stream: &mut RandomStream, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Contract("sample count must be ≥ 1".into()));
        }
        let noise = stream.draw(Distribution::StandardNormal, &[n, self.dim])?;
        let hs = h.map(|h| {
            let row = h.data();
            Tensor::matrix(n, row.len(), row.repeat(n)).expect("finite condition")
        });
        self.push_forward(params, &noise, hs.as_ref())
    }

    /// Applies the forward map to given noise rows.
    pub fn push_forward(&self, params: &ParameterSet, z: &Tensor, h: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let zv = g.constant(z.clone().reshaped(vec![z.rows(), z.cols()])?);
        let hv = h.map(|h| g.constant(h.clone()));
        let (y, _) = self.forward(&mut g, &p, zv, hv)?;
        g.check_finite()?;
        Ok(g.value(y).clone())
    }

    /// `log p(y | h)` for each row of `y`.
    pub fn log_density_values(&self, params: &ParameterSet, y: &Tensor, h: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let yv = g.constant(y.clone().reshaped(vec![y.rows(), y.cols()])?);
        let hv = h.map(|h| g.constant(h.clone()));
        let lp = self.log_density(&mut g, &p, yv, hv)?;
        g.check_finite()?;
        Ok(g.value(lp).data().to_vec())
    }
}

/// Minibatch maximum-likelihood settings for [`fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            optimizer: OptimizerConfig::adam(3e-3),
        }
    }
}

/// Fits `params` by minimizing the mean negative log-density of the rows of
/// `data` (with matching condition rows, if any). Returns the per-step
/// losses.
pub fn fit(
    flow: &FlowStack,
    params: &mut ParameterSet,
    data: &Tensor,
    cond: Option<&Tensor>,
    cfg: &FitConfig,
    stream: &mut RandomStream,
) -> Result<Vec<f64>> {
    let n = data.rows();
    if n == 0 || cfg.batch_size == 0 {
        return Err(Error::Contract("flow fit needs data and a positive batch size".into()));
    }
    let mut opt = cfg.optimizer.build();
    let mut losses = Vec::with_capacity(cfg.steps);
    let gather = |t: &Tensor, idx: &[usize]| {
        let c = t.cols();
        let rows = idx.iter().flat_map(|&i| t.row_slice(i).iter().copied()).collect();
        Tensor::matrix(idx.len(), c, rows).expect("finite rows")
    };
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size.min(n)).map(|_| stream.below(n)).collect();
        let y = gather(data, &idx);
        let h = cond.map(|c| gather(c, &idx));
        let (loss, grads) = evaluate_with_gradients(params, |g, p| {
            let yv = g.constant(y);
            let hv = h.map(|h| g.constant(h));
            let lp = flow.log_density(g, p, yv, hv)?;
            let m = g.mean(lp);
            Ok(g.neg(m))
        })?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                primitive: "flow likelihood".into(),
                detail: format!("non-finite loss at step {}", losses.len()),
            });
        }
        opt.step(params, &grads);
        losses.push(loss);
    }
    Ok(losses)
}
