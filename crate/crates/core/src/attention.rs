//! Knowledge-enriched attention: scaled dot-product and multi-head attention,
//! the self-/cross-attention units with their LS block, and the cascade that
//! alternates them over knowledge concepts and regional features.

use crate::autodiff::{BnMode, Graph, Var};
use crate::error::{KagsError, Result};
use crate::nn::{BatchNorm, Linear};
use crate::params::{Init, ParamId};
use crate::tensor::Float;

/// `softmax(q kᵀ / √d) v`, where `d` is the key width.
///
/// Returns the attended output and the attention weights.
pub fn scaled_dot_attention<T: Float>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let (_, dq) = g.value(q).dims2("scaled_dot_attention")?;
    let (mk, dk) = g.value(k).dims2("scaled_dot_attention")?;
    let (mv, _) = g.value(v).dims2("scaled_dot_attention")?;
    if dq != dk {
        return Err(KagsError::dim(
            "scaled_dot_attention",
            format!("query width {dq} vs key width {dk}"),
        ));
    }
    if mk != mv {
        return Err(KagsError::dim(
            "scaled_dot_attention",
            format!("{mk} keys vs {mv} values"),
        ));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head projections. Head `i` uses column block `i` of each input
/// projection, which is the same as holding separate per-head matrices.
#[derive(Clone, Debug)]
pub struct MultiHead {
    pub heads: usize,
    pub d_head: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub d_query: usize,
    pub d_kv: usize,
    pub d_out: usize,
}

impl MultiHead {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        d_query: usize,
        d_kv: usize,
        d_out: usize,
        heads: usize,
        d_head: usize,
    ) -> Self {
        let mut s = init.scope(name);
        MultiHead {
            heads,
            d_head,
            w_q: s.xavier("w_q", d_query, heads * d_head),
            w_k: s.xavier("w_k", d_kv, heads * d_head),
            w_v: s.xavier("w_v", d_kv, heads * d_head),
            w_o: s.xavier("w_o", heads * d_head, d_out),
            d_query,
            d_kv,
            d_out,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, q, k, v)?.0)
    }

    /// Also returns each head's attention weights (rows sum to one).
    pub fn forward_with_weights<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (_, wq) = g.value(q).dims2("multi_head_attention")?;
        let (_, wk) = g.value(k).dims2("multi_head_attention")?;
        if wq != self.d_query || wk != self.d_kv || g.shape(v)[1] != self.d_kv {
            return Err(KagsError::dim(
                "multi_head_attention",
                format!(
                    "inputs {:?}/{:?}/{:?} for projections {}→{}, {}→{}",
                    g.shape(q),
                    g.shape(k),
                    g.shape(v),
                    self.d_query,
                    self.heads * self.d_head,
                    self.d_kv,
                    self.heads * self.d_head
                ),
            ));
        }
        let wq = g.param(self.w_q);
        let wk = g.param(self.w_k);
        let wv = g.param(self.w_v);
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(k, wk)?;
        let vp = g.matmul(v, wv)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.d_head;
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    g.slice_cols(qp, off, self.d_head)?,
                    g.slice_cols(kp, off, self.d_head)?,
                    g.slice_cols(vp, off, self.d_head)?,
                )
            };
            let (o, w) = scaled_dot_attention(g, qh, kh, vh)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let wo = g.param(self.w_o);
        Ok((g.matmul(cat, wo)?, weights))
    }
}

/// Point-wise addition, a linear layer, then BatchNorm.
#[derive(Clone, Debug)]
pub struct LsBlock {
    pub linear: Linear,
    pub norm: BatchNorm,
}

impl LsBlock {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Self {
        let mut s = init.scope(name);
        LsBlock {
            linear: Linear::new(&mut s, "linear", d, d, true),
            norm: BatchNorm::new(&mut s, "norm", d),
        }
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x_in: Var,
        attended: Var,
        mode: BnMode,
    ) -> Result<Var> {
        Ok(self.forward_stacked(g, &[(x_in, attended)], mode)?[0])
    }

    /// LS over several inputs at once. The linear layer acts row-wise, and
    /// the BatchNorm statistics pool the rows of every input.
    pub fn forward_stacked<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        pairs: &[(Var, Var)],
        mode: BnMode,
    ) -> Result<Vec<Var>> {
        let mut sums = Vec::with_capacity(pairs.len());
        for &(x_in, attended) in pairs {
            let sum = g.add(x_in, attended).map_err(|_| {
                KagsError::dim(
                    "ls_block",
                    format!("{:?} vs {:?}", g.shape(x_in), g.shape(attended)),
                )
            })?;
            sums.push(sum);
        }
        if sums.len() == 1 {
            let lin = self.linear.forward(g, sums[0])?;
            return Ok(vec![self.norm.forward(g, lin, mode)?]);
        }
        let counts: Vec<usize> = sums.iter().map(|&v| g.shape(v)[0]).collect();
        let stacked = g.concat_rows(&sums)?;
        let lin = self.linear.forward(g, stacked)?;
        let normed = self.norm.forward(g, lin, mode)?;
        let mut out = Vec::with_capacity(counts.len());
        let mut start = 0;
        for n in counts {
            out.push(g.slice_rows(normed, start, n)?);
            start += n;
        }
        Ok(out)
    }
}

/// Multi-head attention followed by the LS block. Used both as a
/// self-attention unit (`q = k = v`) and a cross-attention unit.
#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub attn: MultiHead,
    pub ls: LsBlock,
}

impl AttentionUnit {
    /// Unit whose query stream has width `d_query` and key/value stream `d_kv`.
    /// The output keeps the query width.
    pub fn new(init: &mut Init<'_>, name: &str, d_query: usize, d_kv: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_query.is_multiple_of(heads) {
            return Err(KagsError::Config(format!(
                "{heads} heads do not divide width {d_query}"
            )));
        }
        let mut s = init.scope(name);
        Ok(AttentionUnit {
            attn: MultiHead::new(&mut s, "attn", d_query, d_kv, d_query, heads, d_query / heads),
            ls: LsBlock::new(&mut s, "ls", d_query),
        })
    }

    /// `LS(MultiHead(f, f, f))`.
    pub fn self_attend<T: Float>(&self, g: &mut Graph<'_, T>, f: Var, mode: BnMode) -> Result<Var> {
        Ok(self.self_attend_many(g, &[f], mode)?[0])
    }

    /// `LS(MultiHead(f_t, f_v, f_v))`; the residual uses the query stream.
    pub fn cross_attend<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        f_t: Var,
        f_v: Var,
        mode: BnMode,
    ) -> Result<Var> {
        Ok(self.cross_attend_many(g, &[f_t], &[f_v], mode)?[0])
    }

    /// Self-attention within each input, with one shared LS pass.
    pub fn self_attend_many<T: Float>(&self, g: &mut Graph<'_, T>, fs: &[Var], mode: BnMode) -> Result<Vec<Var>> {
        self.cross_attend_many(g, fs, fs, mode)
    }

    /// Cross-attention of `f_ts[i]` over `f_vs[i]`, with one shared LS pass.
    pub fn cross_attend_many<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        f_ts: &[Var],
        f_vs: &[Var],
        mode: BnMode,
    ) -> Result<Vec<Var>> {
        if f_ts.len() != f_vs.len() {
            return Err(KagsError::Contract(format!(
                "{} query inputs for {} key/value inputs",
                f_ts.len(),
                f_vs.len()
            )));
        }
        let mut pairs = Vec::with_capacity(f_ts.len());
        for (&t, &v) in f_ts.iter().zip(f_vs) {
            pairs.push((t, self.attn.forward(g, t, v, v)?));
        }
        self.ls.forward_stacked(g, &pairs, mode)
    }
}

#[derive(Clone, Debug)]
pub struct CcaLayer {
    pub sa_knowledge: AttentionUnit,
    pub sa_regions: AttentionUnit,
    pub ca: AttentionUnit,
}

/// Cascade of cross-modal attention layers; weights are not shared.
#[derive(Clone, Debug)]
pub struct Cca {
    pub layers: Vec<CcaLayer>,
}

impl Cca {
    pub fn new(init: &mut Init<'_>, name: &str, layers: usize, d: usize, heads: usize) -> Result<Self> {
        if layers == 0 {
            return Err(KagsError::Config("cascade needs at least one layer".into()));
        }
        let mut s = init.scope(name);
        let layers = (0..layers)
            .map(|p| {
                let mut l = s.scope(&format!("layer{p}"));
                Ok(CcaLayer {
                    sa_knowledge: AttentionUnit::new(&mut l, "sa_knowledge", d, d, heads)?,
                    sa_regions: AttentionUnit::new(&mut l, "sa_regions", d, d, heads)?,
                    ca: AttentionUnit::new(&mut l, "ca", d, d, heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cca { layers })
    }

    /// Per layer: `K ← CA(SA(K), SA(R))`, `R ← SA(R)`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        k0: Var,
        r0: Var,
        mode: BnMode,
    ) -> Result<(Var, Var)> {
        let (k, r) = self.forward_many(g, &[k0], &[r0], mode)?;
        Ok((k[0], r[0]))
    }

    /// Runs the cascade on several images together. Attention stays within
    /// each image; the LS BatchNorm statistics span all of them.
    pub fn forward_many<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        k0: &[Var],
        r0: &[Var],
        mode: BnMode,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let (mut k, mut r) = (k0.to_vec(), r0.to_vec());
        for layer in &self.layers {
            let sk = layer.sa_knowledge.self_attend_many(g, &k, mode)?;
            let sr = layer.sa_regions.self_attend_many(g, &r, mode)?;
            k = layer.ca.cross_attend_many(g, &sk, &sr, mode)?;
            r = sr;
        }
        Ok((k, r))
    }
}
