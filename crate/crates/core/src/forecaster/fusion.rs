//! Multi-head attention over the token sequence `[c, r_1, …, r_S]`, read out
//! at the context position with a residual connection.

use crate::encoder::MASKED_LOGIT;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::numerics::{Bound, Graph, ParameterSet, RandomStream, Tensor, Var};

/// Fused state and the attention weights that produced it.
pub struct FusionOutput {
    /// `n × dim`.
    pub fused: Var,
    /// Per head, `n × (1 + tokens)`; column 0 is the context token.
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FusionAttention {
    pub dim: usize,
    pub heads: usize,
    pub repr_dim: usize,
    /// One projection MLP per scale slot, mapping `repr_dim → dim`.
    pub projections: Vec<Mlp>,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

impl FusionAttention {
    pub fn new(name: &str, dim: usize, heads: usize, repr_dim: usize, scales: usize, proj_hidden: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("fusion width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            dim,
            heads,
            repr_dim,
            projections: (0..scales)
                .map(|s| Mlp::new(&format!("{name}.proj.{s}"), repr_dim, proj_hidden, dim))
                .collect(),
            query: Linear::new(format!("{name}.q"), dim, dim),
            key: Linear::new(format!("{name}.k"), dim, dim),
            value: Linear::new(format!("{name}.v"), dim, dim),
            out: Linear::new(format!("{name}.out"), dim, dim),
        })
    }

    pub fn init(&self, params: &mut ParameterSet, stream: &mut RandomStream) -> Result<()> {
        for m in &self.projections {
            m.init(params, stream)?;
        }
        for l in [&self.query, &self.key, &self.value, &self.out] {
            l.init(params, stream)?;
        }
        Ok(())
    }

    /// Maps raw representations of scale slot `slot` (`n × repr_dim`) to tokens.
    pub fn project(&self, g: &mut Graph, p: &Bound, slot: usize, r: Var) -> Var {
        self.projections[slot].forward(g, p, r)
    }

    /// `context` is `n × dim`; every token is `n × dim`. `absent` is an
    /// `n × tokens` 0/1 matrix marking tokens a row must ignore.
    pub fn forward(&self, g: &mut Graph, p: &Bound, context: Var, tokens: &[Var], absent: Option<&Tensor>) -> FusionOutput {
        let (n, d) = g.shape(context);
        assert_eq!(d, self.dim, "fusion context width");
        let mask = absent.map(|a| {
            assert_eq!((a.rows(), a.cols()), (n, tokens.len()), "fusion mask shape");
            let mut data = Vec::with_capacity(n * (tokens.len() + 1));
            for row in 0..n {
                data.push(0.0);
                data.extend(a.row_slice(row).iter().map(|&m| if m != 0.0 { MASKED_LOGIT } else { 0.0 }));
            }
            g.constant(Tensor::matrix(n, tokens.len() + 1, data).expect("finite mask"))
        });
        let q = self.query.forward(g, p, context);
        let mut keys = vec![self.key.forward(g, p, context)];
        let mut values = vec![self.value.forward(g, p, context)];
        for &t in tokens {
            keys.push(self.key.forward(g, p, t));
            values.push(self.value.forward(g, p, t));
        }
        let dh = d / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let scores: Vec<Var> = keys
                .iter()
                .map(|&k| {
                    let kh = g.slice_cols(k, lo, hi);
                    let prod = g.mul(qh, kh);
                    g.sum_cols(prod)
                })
                .collect();
            let s = g.concat_cols(&scores);
            let mut s = g.scale(s, inv);
            if let Some(m) = mask {
                s = g.add(s, m);
            }
            let w = g.softmax_rows(s);
            let mut acc: Option<Var> = None;
            for (j, &v) in values.iter().enumerate() {
                let vh = g.slice_cols(v, lo, hi);
                let wj = g.slice_cols(w, j, j + 1);
                let term = g.mul_col(vh, wj);
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            }
            heads.push(acc.expect("context token always present"));
            weights.push(w);
        }
        let mixed = g.concat_cols(&heads);
        let projected = self.out.forward(g, p, mixed);
        FusionOutput {
            fused: g.add(context, projected),
            weights,
        }
    }
}
