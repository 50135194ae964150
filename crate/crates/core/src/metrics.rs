//! Corpus metrics over multi-reference stories: BLEU-1..4, ROUGE-L, CIDEr-D.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::parse_manifest;
use crate::error::{KagsError, Result};
use crate::par;
use crate::vocab::tokenize;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn from_text(candidate: &str, references: &[&str]) -> Self {
        EvalPair {
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

fn check_corpus(corpus: &[EvalPair]) -> Result<()> {
    if corpus.is_empty() {
        return Err(KagsError::Precondition("empty candidate corpus".into()));
    }
    if let Some(i) = corpus.iter().position(|p| p.references.is_empty()) {
        return Err(KagsError::Precondition(format!("pair {i} has no reference")));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-pooled BLEU statistics: clipped matches and candidate n-gram
/// totals per order, candidate length and closest-reference length.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuCounts {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

fn pair_counts(pair: &EvalPair, max_n: usize) -> BleuCounts {
    let c = pair.candidate.len();
    // Closest reference length; the shorter one wins ties.
    let ref_len = pair
        .references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0);
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for n in 1..=max_n {
        let cand = ngram_counts(&pair.candidate, n);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in &pair.references {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        for (g, k) in &cand {
            matches[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
            totals[n - 1] += k;
        }
    }
    BleuCounts {
        matches,
        totals,
        cand_len: c,
        ref_len,
    }
}

pub fn bleu_counts(corpus: &[EvalPair], max_n: usize) -> Result<BleuCounts> {
    check_corpus(corpus)?;
    if !(1..=4).contains(&max_n) {
        return Err(KagsError::Precondition(format!("BLEU order {max_n} outside 1..=4")));
    }
    let per_pair = par::map(corpus, |p| pair_counts(p, max_n));
    let mut acc = BleuCounts {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        ..Default::default()
    };
    for s in &per_pair {
        for k in 0..max_n {
            acc.matches[k] += s.matches[k];
            acc.totals[k] += s.totals[k];
        }
        acc.cand_len += s.cand_len;
        acc.ref_len += s.ref_len;
    }
    Ok(acc)
}

/// Corpus BLEU-`n`: clipped n-gram precisions pooled over the corpus,
/// geometric mean over orders 1..=n, brevity penalty `min(1, e^{1-r/c})`.
pub fn bleu(corpus: &[EvalPair], n: usize) -> Result<f64> {
    let s = bleu_counts(corpus, n)?;
    if s.cand_len == 0 || s.matches.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..n)
        .map(|k| (s.matches[k] as f64 / s.totals[k] as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = (1.0 - s.ref_len as f64 / s.cand_len as f64).exp().min(1.0);
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure of one candidate against one reference.
pub fn rouge_l_f(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over pairs of the best `F_1.2` over references.
pub fn rouge_l(corpus: &[EvalPair]) -> Result<f64> {
    check_corpus(corpus)?;
    let scores = par::map(corpus, |p| {
        p.references
            .iter()
            .map(|r| rouge_l_f(&p.candidate, r, ROUGE_BETA))
            .fold(0.0, f64::max)
    });
    Ok(scores.iter().sum::<f64>() / corpus.len() as f64)
}

type Ngram = Vec<String>;

fn all_ngrams(tokens: &[String]) -> BTreeMap<Ngram, usize> {
    let mut out = BTreeMap::new();
    for n in 1..=CIDER_MAX_N {
        for (g, k) in ngram_counts(tokens, n) {
            out.insert(g.to_vec(), k);
        }
    }
    out
}

struct TfIdf {
    vec: Vec<BTreeMap<Ngram, f64>>,
    norm: Vec<f64>,
    /// Bigram count, used by the length penalty.
    length: usize,
}

fn tf_idf(counts: &BTreeMap<Ngram, usize>, df: &BTreeMap<Ngram, f64>, log_docs: f64) -> TfIdf {
    let mut vec: Vec<BTreeMap<Ngram, f64>> = vec![BTreeMap::new(); CIDER_MAX_N];
    let mut norm = vec![0.0; CIDER_MAX_N];
    let mut length = 0;
    for (g, &tf) in counts {
        let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
        let n = g.len() - 1;
        let w = tf as f64 * (log_docs - d);
        norm[n] += w * w;
        vec[n].insert(g.clone(), w);
        if n == 1 {
            length += tf;
        }
    }
    TfIdf {
        vec,
        norm: norm.into_iter().map(f64::sqrt).collect(),
        length,
    }
}

fn cider_sim(hyp: &TfIdf, refv: &TfIdf) -> f64 {
    let delta = hyp.length as f64 - refv.length as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_N {
        let mut val = 0.0;
        for (g, &h) in &hyp.vec[n] {
            let r = refv.vec[n].get(g).copied().unwrap_or(0.0);
            val += h.min(r) * r;
        }
        if hyp.norm[n] != 0.0 && refv.norm[n] != 0.0 {
            val /= hyp.norm[n] * refv.norm[n];
        }
        total += val * penalty;
    }
    total / CIDER_MAX_N as f64
}

/// Corpus CIDEr-D (×10 convention, before any ×100 report scaling). The
/// idf weights come from the references of the whole corpus.
pub fn cider_d(corpus: &[EvalPair]) -> Result<f64> {
    check_corpus(corpus)?;
    if corpus.len() < 2 {
        return Err(KagsError::Precondition(
            "CIDEr-D needs at least 2 pairs: with one document every n-gram has idf log(1/1) = 0".into(),
        ));
    }
    let ref_counts: Vec<Vec<BTreeMap<Ngram, usize>>> =
        par::map(corpus, |p| p.references.iter().map(|r| all_ngrams(r)).collect());
    let mut df: BTreeMap<Ngram, f64> = BTreeMap::new();
    for refs in &ref_counts {
        let seen: BTreeSet<&Ngram> = refs.iter().flat_map(|r| r.keys()).collect();
        for g in seen {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_docs = (corpus.len() as f64).ln();
    let pairs: Vec<(&EvalPair, &Vec<BTreeMap<Ngram, usize>>)> = corpus.iter().zip(&ref_counts).collect();
    let scores = par::map(&pairs, |(p, refs)| {
        let hyp = tf_idf(&all_ngrams(&p.candidate), &df, log_docs);
        let sum: f64 = refs
            .iter()
            .map(|r| cider_sim(&hyp, &tf_idf(r, &df, log_docs)))
            .sum();
        sum / refs.len() as f64 * 10.0
    });
    Ok(scores.iter().sum::<f64>() / corpus.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricReport {
    pub fn compute(corpus: &[EvalPair]) -> Result<Self> {
        Ok(MetricReport {
            bleu1: bleu(corpus, 1)?,
            bleu2: bleu(corpus, 2)?,
            bleu3: bleu(corpus, 3)?,
            bleu4: bleu(corpus, 4)?,
            rouge_l: rouge_l(corpus)?,
            cider: cider_d(corpus)?,
        })
    }

    /// The same report on the ×100 scale.
    pub fn scaled(&self) -> Self {
        MetricReport {
            bleu1: self.bleu1 * 100.0,
            bleu2: self.bleu2 * 100.0,
            bleu3: self.bleu3 * 100.0,
            bleu4: self.bleu4 * 100.0,
            rouge_l: self.rouge_l * 100.0,
            cider: self.cider * 100.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.scaled())?)
    }
}

/// Aligned table on the ×100 scale; METEOR is not computed.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.scaled();
        let cols = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr-D"];
        let vals = [
            format!("{:.1}", s.bleu1),
            format!("{:.1}", s.bleu2),
            format!("{:.1}", s.bleu3),
            format!("{:.1}", s.bleu4),
            "-".to_string(),
            format!("{:.1}", s.rouge_l),
            format!("{:.1}", s.cider),
        ];
        let header: Vec<String> = cols.iter().map(|c| format!("{c:>8}")).collect();
        let row: Vec<String> = vals.iter().map(|v| format!("{v:>8}")).collect();
        writeln!(f, "{}", header.join(" "))?;
        write!(f, "{}", row.join(" "))
    }
}

/// One generated story.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub album_id: String,
    pub sentences: Vec<String>,
    pub log_prob: f64,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| KagsError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| KagsError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalUnit {
    /// Each story's sentences are concatenated before scoring.
    Story,
    /// Sentence `i` of a prediction is scored against sentence `i` of each reference.
    Sentence,
}

/// Joins predictions to manifest references and builds the scoring corpus.
pub fn join_corpus(
    predictions: &[Prediction],
    references: &BTreeMap<String, Vec<Vec<String>>>,
    unit: EvalUnit,
) -> Result<Vec<EvalPair>> {
    if predictions.is_empty() {
        return Err(KagsError::Precondition("no predictions to evaluate".into()));
    }
    let missing: Vec<&str> = predictions
        .iter()
        .filter(|p| !references.contains_key(&p.album_id))
        .map(|p| p.album_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(KagsError::Join(format!(
            "albums missing from manifest: {}",
            missing.join(", ")
        )));
    }
    let mut corpus = Vec::new();
    for p in predictions {
        let refs = &references[&p.album_id];
        match unit {
            EvalUnit::Story => corpus.push(EvalPair {
                candidate: tokenize(&p.sentences.join(" ")),
                references: refs.iter().map(|r| tokenize(&r.join(" "))).collect(),
            }),
            EvalUnit::Sentence => {
                for (i, s) in p.sentences.iter().enumerate() {
                    corpus.push(EvalPair {
                        candidate: tokenize(s),
                        references: refs
                            .iter()
                            .filter_map(|r| r.get(i))
                            .map(|r| tokenize(r))
                            .collect(),
                    });
                }
            }
        }
    }
    Ok(corpus)
}

pub fn evaluate_stories(
    predictions: &Path,
    manifest: &Path,
    n_images: usize,
    unit: EvalUnit,
) -> Result<MetricReport> {
    let preds = read_predictions(predictions)?;
    let refs: BTreeMap<String, Vec<Vec<String>>> = parse_manifest(manifest, n_images)?
        .into_iter()
        .map(|a| (a.album_id, a.references))
        .collect();
    MetricReport::compute(&join_corpus(&preds, &refs, unit)?)
}
