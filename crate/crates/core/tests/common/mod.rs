//! Measurements shared by the per-area integration tests and the acceptance
//! suite. Each returns the observed deviation so callers pick the bound.
#![allow(dead_code)]

use kags::attention::{AttentionUnit, MultiHead};
use kags::autodiff::{softmax_rows, BnMode, Graph, Var};
use kags::config::RegionalKeys;
use kags::decoder::{Context, Decoder, DecoderDims, DecoderStepper};
use kags::gradcheck::suite::Widths;
use kags::gsm::{sop_covariance, sop_forward, Gsm, SopParams};
use kags::params::{Init, ParamId, ParamStore};
use kags::search::{self, Hypothesis, StepModel};
use kags::tensor::Tensor;
use kags::vocab::{BOS, EOS};
use kags::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Rows of `t` reordered so that row `i` of the result is row `perm[i]`.
pub fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let w = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::new(vec![perm.len(), w], data).unwrap()
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn row_sum_error(t: &Tensor<f64>) -> f64 {
    (0..t.shape()[0])
        .map(|i| (t.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn params_f64(seed: u64, build: impl FnOnce(&mut Init<'_>)) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(&mut Init::new(&mut store, &mut rng));
    store.cast()
}

/// Largest `|Σ row − 1|` of softmax over wide-range logits, and the largest
/// change when a constant is added to every row.
pub fn softmax_errors(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[8, 60], 20.0);
    let p = softmax_rows(&x).unwrap();
    let c = rng.gen_range(-50.0..50.0);
    let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect()).unwrap();
    (row_sum_error(&p), p.max_abs_diff(&softmax_rows(&shifted).unwrap()))
}

/// Largest row-sum error over every head's attention weights.
pub fn attention_row_sum_error(seed: u64, w: &Widths) -> f64 {
    let mut mh = None;
    let store = params_f64(seed, |init| {
        mh = Some(MultiHead::new(init, "mha", w.d, w.d, w.d, w.heads, w.d / w.heads));
    });
    let mh = mh.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    let mut g = Graph::new(&store);
    let q = g.input(rand_tensor(&mut rng, &[w.k, w.d], 1.0));
    let kv = g.input(rand_tensor(&mut rng, &[w.m, w.d], 1.0));
    let (_, weights) = mh.forward_with_weights(&mut g, q, kv, kv).unwrap();
    weights.iter().map(|&h| row_sum_error(g.value(h))).fold(0.0, f64::max)
}

fn attention_unit(seed: u64, w: &Widths) -> (ParamStore<f64>, AttentionUnit) {
    let mut unit = None;
    let store = params_f64(seed, |init| {
        unit = Some(AttentionUnit::new(init, "unit", w.d, w.d, w.heads).unwrap());
    });
    (store, unit.unwrap())
}

/// `max |SA(P·f) − P·SA(f)|` over one random row permutation, in training
/// and inference normalisation.
pub fn self_attention_equivariance_error(seed: u64, w: &Widths) -> f64 {
    let (store, unit) = attention_unit(seed, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A);
    let f = rand_tensor(&mut rng, &[w.m, w.d], 1.0);
    let perm = permutation(&mut rng, w.m);
    let mut worst = 0.0f64;
    for mode in [BnMode::Train, BnMode::Eval] {
        let mut g = Graph::new(&store);
        let a = g.input(f.clone());
        let b = g.input(permute_rows(&f, &perm));
        let ya = unit.self_attend(&mut g, a, mode).unwrap();
        let yb = unit.self_attend(&mut g, b, mode).unwrap();
        worst = worst.max(permute_rows(g.value(ya), &perm).max_abs_diff(g.value(yb)));
    }
    worst
}

/// Cross-attention under a joint key/value row permutation (output must not
/// change) and a query row permutation (output rows must follow).
pub fn cross_attention_errors(seed: u64, w: &Widths) -> (f64, f64) {
    let (store, unit) = attention_unit(seed, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3C);
    let q = rand_tensor(&mut rng, &[w.k, w.d], 1.0);
    let kv = rand_tensor(&mut rng, &[w.m, w.d], 1.0);
    let pk = permutation(&mut rng, w.m);
    let pq = permutation(&mut rng, w.k);
    let mut g = Graph::new(&store);
    let (vq, vkv) = (g.input(q.clone()), g.input(kv.clone()));
    let base = unit.cross_attend(&mut g, vq, vkv, BnMode::Eval).unwrap();
    let vkv_p = g.input(permute_rows(&kv, &pk));
    let kv_perm = unit.cross_attend(&mut g, vq, vkv_p, BnMode::Eval).unwrap();
    let vq_p = g.input(permute_rows(&q, &pq));
    let q_perm = unit.cross_attend(&mut g, vq_p, vkv, BnMode::Eval).unwrap();
    (
        g.value(base).max_abs_diff(g.value(kv_perm)),
        permute_rows(g.value(base), &pq).max_abs_diff(g.value(q_perm)),
    )
}

fn sop_params(seed: u64, d: usize, c: usize) -> (ParamStore<f64>, SopParams) {
    let mut sop = None;
    let store = params_f64(seed, |init| sop = Some(SopParams::new(init, "sop", d, c).unwrap()));
    (store, sop.unwrap())
}

/// `max |SOP(x) − SOP(P·x)|` over a random permutation of the `h·w` positions.
pub fn sop_spatial_error(seed: u64, w: &Widths) -> f64 {
    let (store, sop) = sop_params(seed, w.d, w.reduced);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let (h, wd) = w.grid;
    let flat = rand_tensor(&mut rng, &[h * wd, w.d], 1.0);
    let perm = permutation(&mut rng, h * wd);
    let mut g = Graph::new(&store);
    let a = g.input(flat.reshape(&[h, wd, w.d]).unwrap());
    let b = g.input(permute_rows(&flat, &perm).reshape(&[h, wd, w.d]).unwrap());
    let ya = sop_forward(&mut g, a, &sop).unwrap();
    let yb = sop_forward(&mut g, b, &sop).unwrap();
    g.value(ya).max_abs_diff(g.value(yb))
}

/// `max |GSM(grids) − GSM(permuted grids)|` over a random image order.
pub fn gsm_order_error(seed: u64, w: &Widths) -> f64 {
    let mut gsm = None;
    let store = params_f64(seed, |init| gsm = Some(Gsm::new(init, "gsm", w.d, w.reduced).unwrap()));
    let gsm = gsm.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x99);
    let grids: Vec<Tensor<f64>> = (0..w.images)
        .map(|_| rand_tensor(&mut rng, &[w.grid.0, w.grid.1, w.d], 1.0))
        .collect();
    let perm = permutation(&mut rng, w.images);
    let mut g = Graph::new(&store);
    let a: Vec<Var> = grids.iter().map(|t| g.input(t.clone())).collect();
    let b: Vec<Var> = perm.iter().map(|&i| g.input(grids[i].clone())).collect();
    let ya = gsm.forward(&mut g, &a).unwrap();
    let yb = gsm.forward(&mut g, &b).unwrap();
    g.value(ya).max_abs_diff(g.value(yb))
}

/// Covariance of a random `h×w×d` grid under `d → c` reduction: its largest
/// asymmetry and its smallest eigenvalue from an independent symmetric
/// eigensolver.
pub fn covariance_checks(seed: u64, h: usize, wd: usize, d: usize, c: usize) -> (f64, f64) {
    let (store, sop) = sop_params(seed, d, c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let mut g = Graph::new(&store);
    let x = g.input(rand_tensor(&mut rng, &[h, wd, d], 1.0));
    let cov = sop_covariance(&mut g, x, &sop).unwrap();
    let cov = g.value(cov).clone();
    let asym = (0..c)
        .flat_map(|i| (0..c).map(move |j| (i, j)))
        .map(|(i, j)| (cov.at(i, j) - cov.at(j, i)).abs())
        .fold(0.0, f64::max);
    let m = nalgebra::DMatrix::from_row_slice(c, c, cov.data());
    let min_eig = m.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    (asym, min_eig)
}

/// A decoder with seeded random weights at the given widths, plus random
/// encoder contexts for one image.
pub struct RandomDecoder {
    pub store: ParamStore<f32>,
    pub decoder: Decoder,
    pub table: ParamId,
    pub context: [Tensor<f32>; 4],
}

impl RandomDecoder {
    pub fn new(seed: u64, w: &Widths) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (decoder, table) = {
            let mut init = Init::new(&mut store, &mut rng);
            let dims = DecoderDims {
                d: w.d,
                hidden: w.hidden,
                heads: w.heads,
                vocab: w.vocab,
                regional_keys: RegionalKeys::Full,
            };
            let dec = Decoder::new(&mut init, "decoder", dims).unwrap();
            let table = init.uniform("word_emb", &[w.vocab, w.d], 1.0);
            (dec, table)
        };
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
        let mut t = |rows: usize| rand_tensor(&mut ctx_rng, &[rows, w.d], 1.0).cast::<f32>();
        let context = [t(1), t(1), t(1), t(w.m)];
        RandomDecoder {
            store,
            decoder,
            table,
            context,
        }
    }

    /// Decodes with `beam` (1 runs greedy search, 0 means plain greedy).
    pub fn decode(&self, beam: usize, max_len: usize) -> Result<Hypothesis> {
        let mut g = Graph::new(&self.store);
        let v: Vec<Var> = self.context.iter().map(|t| g.constant(t.clone())).collect();
        let mut stepper = DecoderStepper {
            decoder: &self.decoder,
            graph: &mut g,
            table: self.table,
            ctx: Context {
                k_bar: v[0],
                r_bar: v[1],
                a_tilde: v[2],
                r_full: v[3],
            },
        };
        match beam {
            0 => search::greedy(&mut stepper, max_len),
            b => search::beam(&mut stepper, b, max_len),
        }
    }
}

/// Beam 1 against greedy, and beam 3 against greedy, over `n` random
/// decoders: (token-identical count, beam-3-not-worse count).
pub fn decoder_equivalences(n: u64, w: &Widths, max_len: usize) -> (usize, usize) {
    let results: Vec<(bool, bool)> = (0..n)
        .map(|seed| {
            let rd = RandomDecoder::new(1000 + seed, w);
            let greedy = rd.decode(0, max_len).unwrap();
            let b1 = rd.decode(1, max_len).unwrap();
            let b3 = rd.decode(3, max_len).unwrap();
            (b1.tokens == greedy.tokens, b3.log_prob >= greedy.log_prob)
        })
        .collect();
    (
        results.iter().filter(|r| r.0).count(),
        results.iter().filter(|r| r.1).count(),
    )
}

/// Next-token probabilities keyed by the previous token, over
/// `{pad, bos, eos, a, b, c}`.
pub struct ToyModel {
    pub rows: Vec<Vec<f64>>,
}

impl StepModel for ToyModel {
    type State = ();

    fn initial(&mut self) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, _: &(), token: usize) -> Result<(Vec<f64>, ())> {
        Ok((self.rows[token].iter().map(|p| p.ln()).collect(), ()))
    }
}

/// Greedy picks `a` first, but ending after `b` is the most probable story.
pub fn three_token_toy() -> ToyModel {
    let u = vec![1.0 / 6.0; 6];
    ToyModel {
        rows: vec![
            u.clone(),
            vec![0.0, 0.0, 0.05, 0.5, 0.4, 0.05],
            u,
            vec![0.0, 0.0, 0.3, 0.3, 0.2, 0.2],
            vec![0.0, 0.0, 0.9, 0.04, 0.03, 0.03],
            vec![0.0, 0.0, 0.1, 0.3, 0.3, 0.3],
        ],
    }
}

/// Best sequence by exhaustive enumeration of every path of at most
/// `max_len` steps, scored like beam search: paths that end emit the end
/// token, the rest stop at the length bound.
pub fn exhaustive_best<M: StepModel>(model: &mut M, max_len: usize) -> Result<Hypothesis> {
    fn walk<M: StepModel>(
        m: &mut M,
        state: &M::State,
        last: usize,
        prefix: &mut Vec<usize>,
        lp: f64,
        left: usize,
        best: &mut Option<Hypothesis>,
    ) -> Result<()> {
        if left == 0 {
            offer(best, Hypothesis {
                tokens: prefix.clone(),
                log_prob: lp,
                finished: false,
            });
            return Ok(());
        }
        let (lps, next) = m.step(state, last)?;
        for (tok, &l) in lps.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            if tok == EOS {
                offer(best, Hypothesis {
                    tokens: prefix.clone(),
                    log_prob: lp + l,
                    finished: true,
                });
            } else {
                prefix.push(tok);
                walk(m, &next, tok, prefix, lp + l, left - 1, best)?;
                prefix.pop();
            }
        }
        Ok(())
    }
    fn offer(best: &mut Option<Hypothesis>, h: Hypothesis) {
        let better = match best {
            None => true,
            Some(b) => h.log_prob > b.log_prob || (h.log_prob == b.log_prob && h.tokens < b.tokens),
        };
        if better {
            *best = Some(h);
        }
    }
    let init = model.initial()?;
    let mut best = None;
    walk(model, &init, BOS, &mut Vec::new(), 0.0, max_len, &mut best)?;
    Ok(best.expect("at least one path"))
}

/// A checkpoint with non-trivial Adam moments: scaled model, two synthetic
/// albums, one epoch.
pub fn trained_checkpoint(dir: &std::path::Path) -> kags::checkpoint::Checkpoint {
    use kags::data::synth::{synth, SynthSpec};
    let spec = SynthSpec {
        albums: 2,
        ..SynthSpec::default()
    };
    synth(dir, &spec, 5).unwrap();
    let cfg = kags::config::RunConfig::scaled();
    let data = kags::train::load_dataset(&cfg, &dir.join("manifest.jsonl"), &dir.join("knowledge.tsv")).unwrap();
    let mut t = kags::train::Trainer::new(&cfg, data.vocab, data.knowledge).unwrap();
    t.train_epoch(&data.albums).unwrap();
    t.checkpoint()
}

/// Decodes every prefix length in `cuts` and a single-bit flip at every
/// position in `flips`; returns the first corruption that was accepted or
/// whose error does not point inside the file.
pub fn corruption_escapes<T>(
    bytes: &[u8],
    cuts: impl IntoIterator<Item = usize>,
    flips: impl IntoIterator<Item = (usize, u8)>,
    decode: impl Fn(&[u8]) -> Result<T>,
    flip_may_pass: bool,
) -> Option<String> {
    let located = |r: Result<T>, what: String| -> Option<String> {
        match r {
            Err(kags::KagsError::Format { offset, .. }) if offset <= bytes.len() => None,
            Err(e) => Some(format!("{what}: unlocated error {e}")),
            Ok(_) => Some(format!("{what}: accepted")),
        }
    };
    for n in cuts {
        if let Some(bad) = located(decode(&bytes[..n]), format!("truncated to {n}")) {
            return Some(bad);
        }
    }
    for (pos, bit) in flips {
        let mut b = bytes.to_vec();
        b[pos] ^= 1 << (bit % 8);
        let r = decode(&b);
        if flip_may_pass && r.is_ok() {
            continue;
        }
        if let Some(bad) = located(r, format!("bit {bit} of byte {pos} flipped")) {
            return Some(bad);
        }
    }
    None
}
