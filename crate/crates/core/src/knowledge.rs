//! Weighted concept graph: loading, per-image retrieval and triple embedding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{KagsError, Result};
use crate::nn::Linear;
use crate::tensor::{Float, Tensor};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub weight: f64,
}

impl ConceptTriple {
    pub fn tokens(&self) -> [&str; 3] {
        [&self.head, &self.relation, &self.tail]
    }
}

/// Multi-word entities become single underscore-joined tokens.
pub fn entity_token(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join("_")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeGraph {
    by_head: BTreeMap<String, Vec<ConceptTriple>>,
}

fn by_weight_then_name(a: &ConceptTriple, b: &ConceptTriple) -> std::cmp::Ordering {
    b.weight
        .total_cmp(&a.weight)
        .then_with(|| a.relation.cmp(&b.relation))
        .then_with(|| a.tail.cmp(&b.tail))
}

impl KnowledgeGraph {
    pub fn from_triples(triples: impl IntoIterator<Item = ConceptTriple>) -> Self {
        let mut best: HashMap<(String, String, String), f64> = HashMap::new();
        for t in triples {
            let w = best.entry((t.head, t.relation, t.tail)).or_insert(t.weight);
            *w = w.max(t.weight);
        }
        let mut by_head: BTreeMap<String, Vec<ConceptTriple>> = BTreeMap::new();
        for ((head, relation, tail), weight) in best {
            by_head.entry(head.clone()).or_default().push(ConceptTriple {
                head,
                relation,
                tail,
                weight,
            });
        }
        for list in by_head.values_mut() {
            list.sort_by(by_weight_then_name);
        }
        KnowledgeGraph { by_head }
    }

    /// Parses `head<TAB>relation<TAB>tail<TAB>weight` lines; `#` starts a comment line.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut triples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |msg: String| KagsError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg,
            };
            if fields.len() != 4 {
                return Err(parse_err(format!(
                    "expected 4 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let [head, relation, tail] = [fields[0], fields[1], fields[2]].map(entity_token);
            if head.is_empty() || relation.is_empty() || tail.is_empty() {
                return Err(parse_err("empty entity or relation".into()));
            }
            let weight: f64 = fields[3]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad weight `{}`", fields[3])))?;
            if !weight.is_finite() {
                return Err(parse_err(format!("bad weight `{}`", fields[3])));
            }
            if weight < 0.0 {
                return Err(KagsError::Validation(format!(
                    "{}:{lineno}: negative weight {weight}",
                    path.display()
                )));
            }
            triples.push(ConceptTriple {
                head,
                relation,
                tail,
                weight,
            });
        }
        Ok(Self::from_triples(triples))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KagsError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn is_empty(&self) -> bool {
        self.by_head.is_empty()
    }

    pub fn edges(&self, head: &str) -> &[ConceptTriple] {
        self.by_head.get(head).map_or(&[], Vec::as_slice)
    }

    pub fn triples(&self) -> impl Iterator<Item = &ConceptTriple> {
        self.by_head.values().flatten()
    }

    /// Top `k_max` triples over all labels, by weight; ties go to the earlier
    /// label, then relation and tail order.
    pub fn retrieve_concepts(&self, labels: &[String], k_max: usize) -> Vec<ConceptTriple> {
        let mut seen = BTreeSet::new();
        let mut cands: Vec<(usize, &ConceptTriple)> = Vec::new();
        for (li, label) in labels.iter().enumerate() {
            let label = entity_token(label);
            if seen.insert(label.clone()) {
                cands.extend(self.edges(&label).iter().map(|t| (li, t)));
            }
        }
        cands.sort_by(|(la, a), (lb, b)| {
            b.weight
                .total_cmp(&a.weight)
                .then(la.cmp(lb))
                .then_with(|| by_weight_then_name(a, b))
        });
        cands.into_iter().take(k_max).map(|(_, t)| t.clone()).collect()
    }

    /// The vocabulary plus every entity and relation token of the graph.
    pub fn extend_vocabulary(&self, vocab: &Vocabulary) -> Vocabulary {
        vocab.extend_with(self.triples().flat_map(|t| t.tokens()))
    }
}

/// Embeds each triple as `proj(mean(emb[head], emb[relation], emb[tail]))`,
/// then zero-pads to exactly `k_max` rows.
pub fn embed_concepts<T: Float>(
    g: &mut Graph<'_, T>,
    triples: &[ConceptTriple],
    vocab: &Vocabulary,
    table: Var,
    proj: &Linear,
    k_max: usize,
) -> Result<Var> {
    let d = proj.d_out;
    let used = triples.len().min(k_max);
    if used == 0 {
        return Ok(g.constant(Tensor::zeros(&[k_max, d])));
    }
    let ids: Vec<usize> = triples[..used]
        .iter()
        .flat_map(|t| t.tokens().map(|s| vocab.id(s)))
        .collect();
    let words = g.gather_rows(table, &ids)?;
    let mut avg = Tensor::zeros(&[used, 3 * used]);
    for r in 0..used {
        for c in 0..3 {
            avg.data_mut()[r * 3 * used + 3 * r + c] = T::of(1.0 / 3.0);
        }
    }
    let avg = g.constant(avg);
    let means = g.matmul(avg, words)?;
    let rows = proj.forward(g, means)?;
    if used == k_max {
        return Ok(rows);
    }
    let pad = g.constant(Tensor::zeros(&[k_max - used, d]));
    g.concat_rows(&[rows, pad])
}
