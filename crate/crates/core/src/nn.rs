//! Small layer building blocks expressed as graph compositions.

use crate::error::Result;
use crate::numerics::{Bound, Graph, ParameterSet, RandomStream, Tensor, Var};

/// Glorot-uniform `rows×cols` matrix.
pub fn glorot(rows: usize, cols: usize, stream: &mut RandomStream) -> Tensor {
    let a = (6.0 / (rows + cols).max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| (2.0 * stream.uniform() - 1.0) * a).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

/// `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, params: &mut ParameterSet, stream: &mut RandomStream) -> Result<()> {
        params.insert(self.weight_path(), glorot(self.input, self.output, stream))?;
        params.insert(self.bias_path(), Tensor::zeros(&[1, self.output]))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let w = p.var(&self.weight_path());
        let b = p.var(&self.bias_path());
        g.affine(x, w, Some(b))
    }
}

/// Two affine maps with a `tanh` in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::new(format!("{name}.l1"), input, hidden),
            out: Linear::new(format!("{name}.l2"), hidden, output),
        }
    }

    pub fn init(&self, params: &mut ParameterSet, stream: &mut RandomStream) -> Result<()> {
        self.hidden.init(params, stream)?;
        self.out.init(params, stream)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.hidden.forward(g, p, x);
        let h = g.tanh(h);
        self.out.forward(g, p, h)
    }
}

/// Gated recurrent unit.
///
/// ```text
/// r  = σ(x·Wx_r + bx_r + h·Wh_r + bh_r)
/// z  = σ(x·Wx_z + bx_z + h·Wh_z + bh_z)
/// n  = tanh(x·Wx_n + bx_n + r ⊙ (h·Wh_n + bh_n))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// Gate blocks are packed `[r | z | n]` along columns.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    fn path(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.name)
    }

    pub fn init(&self, params: &mut ParameterSet, stream: &mut RandomStream) -> Result<()> {
        let h3 = 3 * self.hidden;
        params.insert(self.path("wx"), glorot(self.input, h3, stream))?;
        params.insert(self.path("wh"), glorot(self.hidden, h3, stream))?;
        params.insert(self.path("bx"), Tensor::zeros(&[1, h3]))?;
        params.insert(self.path("bh"), Tensor::zeros(&[1, h3]))
    }

    /// Input-side gate pre-activations for any number of rows at once.
    pub fn project_inputs(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.affine(x, p.var(&self.path("wx")), Some(p.var(&self.path("bx"))))
    }

    /// One recurrence step from precomputed input projections.
    pub fn step(&self, g: &mut Graph, p: &Bound, x_proj: Var, h: Var) -> Var {
        let d = self.hidden;
        let hp = g.affine(h, p.var(&self.path("wh")), Some(p.var(&self.path("bh"))));
        let x_rz = g.slice_cols(x_proj, 0, 2 * d);
        let h_rz = g.slice_cols(hp, 0, 2 * d);
        let rz_pre = g.add(x_rz, h_rz);
        let rz = g.sigmoid(rz_pre);
        let r = g.slice_cols(rz, 0, d);
        let z = g.slice_cols(rz, d, 2 * d);
        let x_n = g.slice_cols(x_proj, 2 * d, 3 * d);
        let h_n = g.slice_cols(hp, 2 * d, 3 * d);
        let gated = g.mul(r, h_n);
        let n_pre = g.add(x_n, gated);
        let n = g.tanh(n_pre);
        let keep = g.one_minus(z);
        let a = g.mul(keep, n);
        let b = g.mul(z, h);
        g.add(a, b)
    }
}
