//! Small layer building blocks shared by the encoder and decoder.

use crate::autodiff::{BnMode, Graph, Var};
use crate::error::{KagsError, Result};
use crate::params::{Init, ParamId};
use crate::tensor::Float;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let mut s = init.scope(name);
        let weight = s.xavier("weight", d_in, d_out);
        let bias = bias.then(|| s.constant("bias", &[1, d_out], 0.0, true));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2("linear")?;
        if d != self.d_in {
            return Err(KagsError::dim(
                "linear",
                format!("input width {d}, layer expects {}", self.d_in),
            ));
        }
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Self {
        let mut s = init.scope(name);
        BatchNorm {
            gamma: s.constant("gamma", &[1, d], 1.0, true),
            beta: s.constant("beta", &[1, d], 0.0, true),
            running_mean: s.constant("running_mean", &[1, d], 0.0, false),
            running_var: s.constant("running_var", &[1, d], 1.0, false),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, mode: BnMode) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batchnorm_rows(x, gamma, beta, (self.running_mean, self.running_var), mode)
    }
}

/// LSTM cell with gate order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, hidden: usize) -> Self {
        let mut s = init.scope(name);
        let w_input = s.xavier("w_input", d_in, 4 * hidden);
        let w_hidden = s.xavier("w_hidden", hidden, 4 * hidden);
        let bias = s.constant("bias", &[1, 4 * hidden], 0.0, true);
        LstmCell {
            w_input,
            w_hidden,
            bias,
            d_in,
            hidden,
        }
    }

    pub fn zero_state<T: Float>(&self, g: &mut Graph<'_, T>) -> LstmState {
        let h = g.constant(crate::tensor::Tensor::zeros(&[1, self.hidden]));
        let c = g.constant(crate::tensor::Tensor::zeros(&[1, self.hidden]));
        LstmState { h, c }
    }

    pub fn step<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, state: LstmState) -> Result<LstmState> {
        let (_, d) = g.value(x).dims2("lstm_step")?;
        if d != self.d_in {
            return Err(KagsError::dim(
                "lstm_step",
                format!("input width {d}, cell expects {}", self.d_in),
            ));
        }
        let wi = g.param(self.w_input);
        let wh = g.param(self.w_hidden);
        let b = g.param(self.bias);
        let xi = g.matmul(x, wi)?;
        let hh = g.matmul(state.h, wh)?;
        let z = g.add(xi, hh)?;
        let z = g.add_row(z, b)?;
        let n = self.hidden;
        let i = g.slice_cols(z, 0, n)?;
        let f = g.slice_cols(z, n, n)?;
        let c_hat = g.slice_cols(z, 2 * n, n)?;
        let o = g.slice_cols(z, 3 * n, n)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let c_hat = g.tanh(c_hat)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, c_hat)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Gated linear unit over the columns: `a ⊙ σ(b)` with `[a | b] = x`.
pub fn glu<T: Float>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let (_, n) = g.value(x).dims2("glu")?;
    if n % 2 != 0 {
        return Err(KagsError::dim("glu", format!("odd width {n}")));
    }
    let a = g.slice_cols(x, 0, n / 2)?;
    let b = g.slice_cols(x, n / 2, n / 2)?;
    let gate = g.sigmoid(b)?;
    g.mul(a, gate)
}
