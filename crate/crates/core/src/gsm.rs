//! Second-order pooling and the group-wise semantic module.
//!
//! Pooled aggregations are `1×1×d` tensors; inside the graph they are carried
//! as `1×d` rows.

use crate::autodiff::{Graph, Var};
use crate::error::{KagsError, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamId};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct SopParams {
    /// 1×1 convolution `d → c`.
    pub reduce: Linear,
    /// One length-`c` filter per covariance row (`c×c`), plus a bias per row.
    pub row_weight: ParamId,
    pub row_bias: ParamId,
    /// 1×1 convolution `c → d`.
    pub expand: Linear,
    pub d: usize,
    pub c: usize,
}

impl SopParams {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, c: usize) -> Result<Self> {
        if c == 0 || c > d {
            return Err(KagsError::Config(format!(
                "reduced channels {c} must be in 1..={d}"
            )));
        }
        let mut s = init.scope(name);
        Ok(SopParams {
            reduce: Linear::new(&mut s, "reduce", d, c, true),
            row_weight: s.xavier("row_weight", c, c),
            row_bias: s.constant("row_bias", &[1, c], 0.0, true),
            expand: Linear::new(&mut s, "expand", c, d, true),
            d,
            c,
        })
    }
}

fn flatten_grid<T: Float>(g: &mut Graph<'_, T>, x: Var, d: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (positions, width) = match shape[..] {
        [h, w, dd] => (h * w, dd),
        [n, dd] => (n, dd),
        _ => {
            return Err(KagsError::dim(
                "sop_forward",
                format!("expected h×w×d or n×d, got {shape:?}"),
            ))
        }
    };
    if width != d {
        return Err(KagsError::dim(
            "sop_forward",
            format!("feature width {width}, pooling expects {d}"),
        ));
    }
    if shape.len() == 2 {
        Ok(x)
    } else {
        g.reshape(x, &[positions, d])
    }
}

/// Channel covariance `yᵀy` of the reduced features `y = reduce(x)` (`c×c`).
pub fn sop_covariance<T: Float>(g: &mut Graph<'_, T>, x: Var, p: &SopParams) -> Result<Var> {
    let flat = flatten_grid(g, x, p.d)?;
    let y = p.reduce.forward(g, flat)?;
    let yt = g.transpose(y)?;
    g.matmul(yt, y)
}

/// Second-order pooling of an `h×w×d` grid (or an `n×d` matrix) into `1×d`.
pub fn sop_forward<T: Float>(g: &mut Graph<'_, T>, x: Var, p: &SopParams) -> Result<Var> {
    let cov = sop_covariance(g, x, p)?;
    let w = g.param(p.row_weight);
    let filtered = g.mul(cov, w)?;
    let rows = g.sum_rows(filtered)?;
    let rows = g.transpose(rows)?;
    let b = g.param(p.row_bias);
    let rows = g.add(rows, b)?;
    p.expand.forward(g, rows)
}

#[derive(Clone, Debug)]
pub struct Gsm {
    pub inner: SopParams,
    pub outer: SopParams,
}

impl Gsm {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, c: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(Gsm {
            inner: SopParams::new(&mut s, "inner", d, c)?,
            outer: SopParams::new(&mut s, "outer", d, c)?,
        })
    }

    /// Pools each image grid, stacks the results into `N×d`, and pools again.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, grids: &[Var]) -> Result<Var> {
        if grids.is_empty() {
            return Err(KagsError::Precondition(
                "group pooling needs at least one image".into(),
            ));
        }
        let first = g.shape(grids[0]).to_vec();
        if grids.iter().any(|&c| g.shape(c) != first.as_slice()) {
            return Err(KagsError::dim("gsm_forward", "album grids differ in shape"));
        }
        let pooled = grids
            .iter()
            .map(|&c| sop_forward(g, c, &self.inner))
            .collect::<Result<Vec<_>>>()?;
        let stacked = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_rows(&pooled)?
        };
        sop_forward(g, stacked, &self.outer)
    }
}

/// `M = C Ãᵀ`: per-position dot product of an `h×w×d` grid with `Ã`.
pub fn class_activation_map<T: Float>(grid: &Tensor<T>, aggregate: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, d) = match grid.shape()[..] {
        [h, w, d] => (h, w, d),
        _ => {
            return Err(KagsError::dim(
                "class_activation_map",
                format!("expected h×w×d grid, got {:?}", grid.shape()),
            ))
        }
    };
    if aggregate.numel() != d {
        return Err(KagsError::dim(
            "class_activation_map",
            format!("grid width {d} vs aggregation {:?}", aggregate.shape()),
        ));
    }
    let a = aggregate.data();
    let data = (0..h * w)
        .map(|p| {
            grid.data()[p * d..(p + 1) * d]
                .iter()
                .zip(a)
                .map(|(&x, &y)| x * y)
                .sum()
        })
        .collect();
    Tensor::new(vec![h, w], data)
}
