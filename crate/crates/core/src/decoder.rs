//! Two-stream story decoder: flatten indicators, regional and global
//! LSTM + cross-attention streams, GLU fusion and the word distribution.

use crate::attention::AttentionUnit;
use crate::autodiff::{BnMode, Graph, Var};
use crate::config::{FlattenActivation, RegionalKeys};
use crate::error::{KagsError, Result};
use crate::nn::{glu, Linear, LstmCell, LstmState};
use crate::params::{Init, ParamId};
use crate::search::StepModel;
use crate::tensor::{Float, Tensor};
use crate::vocab::{BOS, EOS};

/// Scores each row, softmaxes the scores over rows and returns the weighted
/// row sum (`M×d → 1×d`).
#[derive(Clone, Debug)]
pub struct FlattenIndicator {
    pub score_hidden: Linear,
    pub score_out: Linear,
    pub activation: FlattenActivation,
}

impl FlattenIndicator {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, hidden: usize, activation: FlattenActivation) -> Self {
        let mut s = init.scope(name);
        FlattenIndicator {
            score_hidden: Linear::new(&mut s, "score_hidden", d, hidden, true),
            score_out: Linear::new(&mut s, "score_out", hidden, 1, true),
            activation,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.score_hidden.forward(g, x)?;
        let h = match self.activation {
            FlattenActivation::Relu => g.relu(h)?,
            FlattenActivation::None => h,
        };
        let scores = self.score_out.forward(g, h)?;
        let scores = g.transpose(scores)?;
        let weights = g.softmax_rows(scores)?;
        g.matmul(weights, x)
    }
}

/// Per-image encoder outputs the decoder conditions on.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    pub k_bar: Var,
    pub r_bar: Var,
    pub a_tilde: Var,
    pub r_full: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub regional: LstmState,
    pub global: LstmState,
}

#[derive(Clone, Debug)]
pub struct DecoderDims {
    pub d: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub regional_keys: RegionalKeys,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub dims: DecoderDims,
    pub lstm_regional: LstmCell,
    pub lstm_global: LstmCell,
    pub ca_regional: AttentionUnit,
    pub ca_global: AttentionUnit,
    pub embed_regional: Linear,
    pub embed_global: Linear,
    pub fuse: Linear,
    pub output: Linear,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, name: &str, dims: DecoderDims) -> Result<Self> {
        let (d, h) = (dims.d, dims.hidden);
        let mut s = init.scope(name);
        Ok(Decoder {
            lstm_regional: LstmCell::new(&mut s, "lstm_regional", 3 * d, h),
            lstm_global: LstmCell::new(&mut s, "lstm_global", 3 * d, h),
            ca_regional: AttentionUnit::new(&mut s, "ca_regional", h, d, dims.heads)?,
            ca_global: AttentionUnit::new(&mut s, "ca_global", h, d, dims.heads)?,
            embed_regional: Linear::new(&mut s, "embed_regional", h, d, true),
            embed_global: Linear::new(&mut s, "embed_global", h, d, true),
            fuse: Linear::new(&mut s, "fuse", d + h, d, true),
            output: Linear::new(&mut s, "output", d, dims.vocab, true),
            dims,
        })
    }

    pub fn zero_state<T: Float>(&self, g: &mut Graph<'_, T>) -> DecoderState {
        DecoderState {
            regional: self.lstm_regional.zero_state(g),
            global: self.lstm_global.zero_state(g),
        }
    }

    fn check_state<T: Float>(&self, g: &Graph<'_, T>, s: &DecoderState) -> Result<()> {
        for v in [s.regional.h, s.regional.c, s.global.h, s.global.c] {
            if g.shape(v) != [1, self.dims.hidden] {
                return Err(KagsError::Contract(format!(
                    "decoder state has shape {:?}, expected [1, {}]",
                    g.shape(v),
                    self.dims.hidden
                )));
            }
        }
        Ok(())
    }

    /// One step up to the fused `1×d` feature `v_t`; `word` is the previous
    /// word embedding.
    pub fn step_features<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        state: &DecoderState,
        ctx: &Context,
        word: Var,
        mode: BnMode,
    ) -> Result<(Var, DecoderState)> {
        self.check_state(g, state)?;
        let x_r = g.concat_cols(&[ctx.k_bar, word, ctx.r_bar])?;
        let regional = self.lstm_regional.step(g, x_r, state.regional)?;
        let keys = match self.dims.regional_keys {
            RegionalKeys::Full => ctx.r_full,
            RegionalKeys::Flattened => ctx.r_bar,
        };
        let att_r = self.ca_regional.cross_attend(g, regional.h, keys, mode)?;
        let v_r = self.embed_regional.forward(g, att_r)?;

        let x_a = g.concat_cols(&[ctx.k_bar, word, ctx.a_tilde])?;
        let global = self.lstm_global.step(g, x_a, state.global)?;
        let att_a = self.ca_global.cross_attend(g, global.h, ctx.a_tilde, mode)?;
        let v_a = self.embed_global.forward(g, att_a)?;

        let cat = g.concat_cols(&[v_r, regional.h, v_a, global.h])?;
        let gated = glu(g, cat)?;
        let v = self.fuse.forward(g, gated)?;
        Ok((v, DecoderState { regional, global }))
    }

    /// Logits over the vocabulary for stacked fused features (`rows×|V|`).
    pub fn logits<T: Float>(&self, g: &mut Graph<'_, T>, v: Var) -> Result<Var> {
        self.output.forward(g, v)
    }

    pub fn decode_step<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        state: &DecoderState,
        ctx: &Context,
        word: Var,
        mode: BnMode,
    ) -> Result<(Var, DecoderState)> {
        let (v, next) = self.step_features(g, state, ctx, word, mode)?;
        Ok((self.logits(g, v)?, next))
    }

    /// Teacher-forced summed cross-entropy of one sentence. `words` excludes
    /// the begin and end tokens; at most `max_len - 1` words are kept so the
    /// end token always fits within `max_len` steps.
    pub fn sentence_loss<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        table: ParamId,
        ctx: &Context,
        words: &[usize],
        max_len: usize,
        mode: BnMode,
    ) -> Result<(Var, usize)> {
        let (inputs, targets) = teacher_forcing(words, max_len);
        let table = g.param(table);
        let embedded = g.gather_rows(table, &inputs)?;
        let mut state = self.zero_state(g);
        let mut feats = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let w = g.slice_rows(embedded, t, 1)?;
            let (v, next) = self.step_features(g, &state, ctx, w, mode)?;
            feats.push(v);
            state = next;
        }
        let stacked = if feats.len() == 1 { feats[0] } else { g.concat_rows(&feats)? };
        let logits = self.logits(g, stacked)?;
        let mask = vec![true; targets.len()];
        Ok((g.cross_entropy_sum(logits, &targets, &mask)?, targets.len()))
    }
}

/// Shifted input and target ids for one sentence.
pub fn teacher_forcing(words: &[usize], max_len: usize) -> (Vec<usize>, Vec<usize>) {
    let kept = &words[..words.len().min(max_len.saturating_sub(1))];
    let mut inputs = vec![BOS];
    inputs.extend_from_slice(kept);
    let mut targets = kept.to_vec();
    targets.push(EOS);
    (inputs, targets)
}

/// Row-wise log-softmax in f64.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Drives the decoder for one image inside an existing graph.
pub struct DecoderStepper<'a, 'g, 'p, T: Float> {
    pub decoder: &'a Decoder,
    pub graph: &'g mut Graph<'p, T>,
    pub table: ParamId,
    pub ctx: Context,
}

impl<T: Float> StepModel for DecoderStepper<'_, '_, '_, T> {
    type State = DecoderState;

    fn initial(&mut self) -> Result<DecoderState> {
        Ok(self.decoder.zero_state(self.graph))
    }

    fn step(&mut self, state: &DecoderState, token: usize) -> Result<(Vec<f64>, DecoderState)> {
        let table = self.graph.param(self.table);
        let word = self.graph.gather_rows(table, &[token])?;
        let (logits, next) = self
            .decoder
            .decode_step(self.graph, state, &self.ctx, word, BnMode::Eval)?;
        let row: Vec<f64> = self.graph.value(logits).data().iter().map(|v| v.as_f64()).collect();
        Ok((log_softmax(&row), next))
    }
}

/// Probability vector of a `1×|V|` logits tensor.
pub fn word_distribution<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    crate::autodiff::softmax_rows(logits)
}
