//! Registered gradient checks over every differentiable module, built at the
//! scaled widths with seeded random parameters and inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_with, CheckOptions, GradCheckReport, ScalarFn};
use crate::attention::{AttentionUnit, Cca, MultiHead};
use crate::autodiff::{BnMode, Graph, Var};
use crate::config::{FlattenActivation, RegionalKeys, RunConfig};
use crate::decoder::{Context, Decoder, DecoderDims, FlattenIndicator};
use crate::error::{KagsError, Result};
use crate::gsm::{sop_forward, Gsm, SopParams};
use crate::nn::{glu, BatchNorm, Linear, LstmCell, LstmState};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Every registered check, in run order.
pub const CHECKS: [&str; 16] = [
    "matmul",
    "softmax_rows",
    "batchnorm_rows",
    "cross_entropy",
    "project_feature",
    "multi_head_attention",
    "sa_unit",
    "ca_unit",
    "cca_forward",
    "sop_forward",
    "gsm_forward",
    "lstm_step",
    "glu_fusion",
    "flatten_indicator",
    "decode_step",
    "story_loss",
];

/// Widths the checks are built at.
#[derive(Clone, Debug)]
pub struct Widths {
    pub d: usize,
    pub hidden: usize,
    pub heads: usize,
    pub k: usize,
    pub m: usize,
    pub grid: (usize, usize),
    pub images: usize,
    pub reduced: usize,
    pub feature: usize,
    pub vocab: usize,
    pub layers: usize,
}

impl Widths {
    pub fn from_config(c: &RunConfig, vocab: usize) -> Self {
        Widths {
            d: c.d_model,
            hidden: c.d_hidden,
            heads: c.n_heads,
            k: c.k_relations,
            m: c.m_boxes,
            grid: (4, 4),
            images: c.n_images,
            reduced: c.reduced_channels(),
            feature: c.feature_dim,
            vocab,
            layers: c.cca_layers,
        }
    }

    pub fn scaled() -> Self {
        Self::from_config(&RunConfig::scaled(), 60)
    }
}

/// Elements checked per tensor; smaller tensors are checked in full.
pub const SAMPLE_PER_TENSOR: usize = 64;

struct Setup {
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
    opts: CheckOptions,
}

impl Setup {
    fn new(seed: u64) -> Self {
        Setup {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            opts: CheckOptions {
                sample_per_tensor: Some(SAMPLE_PER_TENSOR),
                sample_seed: seed,
                ..CheckOptions::default()
            },
        }
    }

    fn init(&mut self) -> Init<'_> {
        Init::new(&mut self.store, &mut self.rng)
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    fn params(&self) -> ParamStore<f64> {
        self.store.cast()
    }

    fn run<F: ScalarFn>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<GradCheckReport> {
        let params = self.params();
        grad_check_with(name, f, &params, &inputs, &self.opts)
    }
}

/// `Σ out ⊙ w` with a fixed random `w`, so every output element carries a
/// distinct weight into the scalar.
fn project(g: &mut Graph<'_, f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

pub fn run_check(name: &str, seed: u64, w: &Widths) -> Result<GradCheckReport> {
    let mut s = Setup::new(seed);
    let d = w.d;
    match name {
        "matmul" => {
            let inputs = vec![s.tensor(&[w.m, d]), s.tensor(&[d, w.k])];
            let proj = s.tensor(&[w.m, w.k]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, &proj)
            })
        }
        "softmax_rows" => {
            let inputs = vec![s.tensor(&[w.m, d])];
            let proj = s.tensor(&[w.m, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = g.softmax_rows(v[0])?;
                project(g, y, &proj)
            })
        }
        "batchnorm_rows" => {
            let bn = BatchNorm::new(&mut s.init(), "bn", d);
            let inputs = vec![s.tensor(&[w.m, d])];
            let proj = s.tensor(&[w.m, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = bn.forward(g, v[0], BnMode::Train)?;
                project(g, y, &proj)
            })
        }
        "cross_entropy" => {
            let inputs = vec![s.tensor(&[w.m, w.vocab])];
            let targets: Vec<usize> = (0..w.m).map(|_| s.rng.gen_range(0..w.vocab)).collect();
            let mask: Vec<bool> = (0..w.m).map(|i| i % 3 != 2).collect();
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                g.cross_entropy_sum(v[0], &targets, &mask)
            })
        }
        "project_feature" => {
            let lin = Linear::new(&mut s.init(), "project", w.feature, d, true);
            let inputs = vec![s.tensor(&[w.m, w.feature])];
            let proj = s.tensor(&[w.m, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = lin.forward(g, v[0])?;
                project(g, y, &proj)
            })
        }
        "multi_head_attention" => {
            let mh = MultiHead::new(&mut s.init(), "mha", d, d, d, w.heads, d / w.heads);
            let inputs = vec![s.tensor(&[w.k, d]), s.tensor(&[w.m, d]), s.tensor(&[w.m, d])];
            let proj = s.tensor(&[w.k, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = mh.forward(g, v[0], v[1], v[2])?;
                project(g, y, &proj)
            })
        }
        "sa_unit" => {
            let unit = AttentionUnit::new(&mut s.init(), "sa", d, d, w.heads)?;
            let inputs = vec![s.tensor(&[w.m, d])];
            let proj = s.tensor(&[w.m, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = unit.self_attend(g, v[0], BnMode::Train)?;
                project(g, y, &proj)
            })
        }
        "ca_unit" => {
            let unit = AttentionUnit::new(&mut s.init(), "ca", d, d, w.heads)?;
            let inputs = vec![s.tensor(&[w.k, d]), s.tensor(&[w.m, d])];
            let proj = s.tensor(&[w.k, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = unit.cross_attend(g, v[0], v[1], BnMode::Train)?;
                project(g, y, &proj)
            })
        }
        "cca_forward" => {
            let cca = Cca::new(&mut s.init(), "cca", w.layers, d, w.heads)?;
            // Two images, so the pooled normalisation statistics are exercised.
            let inputs = vec![
                s.tensor(&[w.k, d]),
                s.tensor(&[w.m, d]),
                s.tensor(&[w.k, d]),
                s.tensor(&[w.m, d]),
            ];
            let pk = s.tensor(&[w.k, d]);
            let pr = s.tensor(&[w.m, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let (k, r) = cca.forward_many(g, &[v[0], v[2]], &[v[1], v[3]], BnMode::Train)?;
                let mut total = project(g, k[0], &pk)?;
                for (y, p) in [(k[1], &pk), (r[0], &pr), (r[1], &pr)] {
                    let t = project(g, y, p)?;
                    total = g.add(total, t)?;
                }
                Ok(total)
            })
        }
        "sop_forward" => {
            let sop = SopParams::new(&mut s.init(), "sop", d, w.reduced)?;
            let inputs = vec![s.tensor(&[w.grid.0, w.grid.1, d])];
            let proj = s.tensor(&[1, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = sop_forward(g, v[0], &sop)?;
                project(g, y, &proj)
            })
        }
        "gsm_forward" => {
            let gsm = Gsm::new(&mut s.init(), "gsm", d, w.reduced)?;
            let inputs = (0..w.images).map(|_| s.tensor(&[w.grid.0, w.grid.1, d])).collect();
            let proj = s.tensor(&[1, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = gsm.forward(g, v)?;
                project(g, y, &proj)
            })
        }
        "lstm_step" => {
            let cell = LstmCell::new(&mut s.init(), "lstm", 3 * d, w.hidden);
            let inputs = vec![s.tensor(&[1, 3 * d]), s.tensor(&[1, w.hidden]), s.tensor(&[1, w.hidden])];
            let ph = s.tensor(&[1, w.hidden]);
            let pc = s.tensor(&[1, w.hidden]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let next = cell.step(g, v[0], LstmState { h: v[1], c: v[2] })?;
                let a = project(g, next.h, &ph)?;
                let b = project(g, next.c, &pc)?;
                g.add(a, b)
            })
        }
        "glu_fusion" => {
            let fuse = Linear::new(&mut s.init(), "fuse", d + w.hidden, d, true);
            let inputs = vec![
                s.tensor(&[1, d]),
                s.tensor(&[1, w.hidden]),
                s.tensor(&[1, d]),
                s.tensor(&[1, w.hidden]),
            ];
            let proj = s.tensor(&[1, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let cat = g.concat_cols(v)?;
                let gated = glu(g, cat)?;
                let y = fuse.forward(g, gated)?;
                project(g, y, &proj)
            })
        }
        "flatten_indicator" => {
            let fl = FlattenIndicator::new(&mut s.init(), "flatten", d, w.hidden, FlattenActivation::Relu);
            let inputs = vec![s.tensor(&[w.m, d])];
            let proj = s.tensor(&[1, d]);
            s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = fl.forward(g, v[0])?;
                project(g, y, &proj)
            })
        }
        "decode_step" | "story_loss" => {
            let (decoder, table) = {
                let mut init = s.init();
                let dec = Decoder::new(
                    &mut init,
                    "decoder",
                    DecoderDims {
                        d,
                        hidden: w.hidden,
                        heads: w.heads,
                        vocab: w.vocab,
                        regional_keys: RegionalKeys::Full,
                    },
                )?;
                let table = init.uniform("word_emb", &[w.vocab, d], 1.0);
                (dec, table)
            };
            let inputs = vec![
                s.tensor(&[1, d]),
                s.tensor(&[1, d]),
                s.tensor(&[1, d]),
                s.tensor(&[w.m, d]),
            ];
            let ctx = |v: &[Var]| Context {
                k_bar: v[0],
                r_bar: v[1],
                a_tilde: v[2],
                r_full: v[3],
            };
            if name == "decode_step" {
                let prev = s.rng.gen_range(0..w.vocab);
                let proj = s.tensor(&[1, w.vocab]);
                s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                    let state = decoder.zero_state(g);
                    let t = g.param(table);
                    let word = g.gather_rows(t, &[prev])?;
                    // Two steps, so the recurrent state path is covered.
                    let (_, state) = decoder.decode_step(g, &state, &ctx(v), word, BnMode::Train)?;
                    let (logits, _) = decoder.decode_step(g, &state, &ctx(v), word, BnMode::Train)?;
                    project(g, logits, &proj)
                })
            } else {
                let words: Vec<usize> = (0..3).map(|_| s.rng.gen_range(4..w.vocab)).collect();
                s.run(name, inputs, move |g: &mut Graph<'_, f64>, v: &[Var]| {
                    Ok(decoder.sentence_loss(g, table, &ctx(v), &words, 12, BnMode::Train)?.0)
                })
            }
        }
        other => Err(KagsError::Precondition(format!(
            "unknown gradient check `{other}`; registered: {}",
            CHECKS.join(", ")
        ))),
    }
}

/// Runs one named check, or every registered check when `only` is `None`.
pub fn run_suite(only: Option<&str>, seed: u64, widths: &Widths) -> Result<Vec<GradCheckReport>> {
    match only {
        Some(name) => Ok(vec![run_check(name, seed, widths)?]),
        None => CHECKS.iter().map(|n| run_check(n, seed, widths)).collect(),
    }
}
