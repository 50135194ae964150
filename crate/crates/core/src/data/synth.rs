//! Deterministic synthetic albums for desk-scale runs.
//!
//! Sentences come from a small template grammar. Each image carries the two
//! nouns of its sentence as labels, and its features are noisy copies of
//! per-noun prototypes, so both the visual and the knowledge paths carry
//! signal about the words to produce.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kagf;
use super::manifest::{write_manifest, ImageLine, ManifestLine};
use crate::error::{KagsError, Result};
use crate::knowledge::ConceptTriple;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

const NOUNS: [&str; 12] = [
    "dog", "cat", "ball", "park", "beach", "car", "tree", "bird", "cake", "boat", "house", "child",
];
const ADJECTIVES: [&str; 6] = ["happy", "small", "red", "old", "big", "quiet"];
const VERBS: [&str; 6] = ["runs", "sits", "plays", "waits", "sleeps", "jumps"];
const RELATIONS: [&str; 4] = ["related_to", "at_location", "is_a", "used_for"];
const TAILS: [&str; 10] = [
    "animal", "toy", "outdoors", "water", "road", "nature", "sky", "food", "home", "fun",
];
const EDGES_PER_NOUN: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub albums: usize,
    pub n_images: usize,
    pub m_boxes: usize,
    pub grid: usize,
    pub feature_dim: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            albums: 4,
            n_images: 5,
            m_boxes: 8,
            grid: 4,
            feature_dim: 128,
        }
    }
}

pub struct SynthData {
    pub manifest: Vec<ManifestLine>,
    /// Feature files keyed by path relative to the output directory.
    pub features: Vec<(String, Tensor<f32>)>,
    pub knowledge: Vec<ConceptTriple>,
}

fn sentence(rng: &mut ChaCha8Rng, n1: &str, n2: &str) -> String {
    let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
    let verb = VERBS[rng.gen_range(0..VERBS.len())];
    match rng.gen_range(0..4) {
        0 => format!("the {adj} {n1} {verb} near the {n2} ."),
        1 => format!("a {n1} {verb} by the {adj} {n2} ."),
        2 => format!("we saw the {n1} and the {n2} ."),
        _ => format!("the {n1} {verb} in the {adj} {n2} !"),
    }
}

fn noisy(rng: &mut ChaCha8Rng, proto: Option<&[f32]>, amp: f32, out: &mut Vec<f32>, dim: usize) {
    for j in 0..dim {
        let base = proto.map_or(0.0, |p| p[j]);
        out.push(base + amp * rng.gen_range(-1.0f32..1.0));
    }
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    if spec.albums == 0 || spec.n_images == 0 || spec.m_boxes == 0 || spec.grid == 0 || spec.feature_dim == 0 {
        return Err(KagsError::Precondition("synthetic sizes must be positive".into()));
    }
    let mut rng = stream(seed, Stream::Synth);
    let dim = spec.feature_dim;
    let protos: Vec<Vec<f32>> = NOUNS
        .iter()
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();

    let mut knowledge = Vec::new();
    for noun in NOUNS {
        let mut tails: Vec<&str> = TAILS.to_vec();
        tails.shuffle(&mut rng);
        for tail in tails.into_iter().take(EDGES_PER_NOUN) {
            let relation = RELATIONS[rng.gen_range(0..RELATIONS.len())];
            let weight = (rng.gen_range(50..500) as f64) / 100.0;
            knowledge.push(ConceptTriple {
                head: noun.to_string(),
                relation: relation.to_string(),
                tail: tail.to_string(),
                weight,
            });
        }
    }

    let mut manifest = Vec::with_capacity(spec.albums);
    let mut features = Vec::new();
    for a in 0..spec.albums {
        let album_id = format!("album_{a:03}");
        let mut images = Vec::with_capacity(spec.n_images);
        let mut story = Vec::with_capacity(spec.n_images);
        for i in 0..spec.n_images {
            let n1 = rng.gen_range(0..NOUNS.len());
            let n2 = (n1 + rng.gen_range(1..NOUNS.len())) % NOUNS.len();
            story.push(sentence(&mut rng, NOUNS[n1], NOUNS[n2]));

            let positions = spec.grid * spec.grid;
            let mut conv = Vec::with_capacity(positions * dim);
            for _ in 0..positions {
                let proto = match rng.gen_range(0..3) {
                    0 => Some(protos[n1].as_slice()),
                    1 => Some(protos[n2].as_slice()),
                    _ => None,
                };
                noisy(&mut rng, proto, 0.3, &mut conv, dim);
            }
            let mut regions = Vec::with_capacity(spec.m_boxes * dim);
            for m in 0..spec.m_boxes {
                let proto = match m % 3 {
                    0 => Some(protos[n1].as_slice()),
                    1 => Some(protos[n2].as_slice()),
                    _ => None,
                };
                noisy(&mut rng, proto, 0.3, &mut regions, dim);
            }
            let stem = format!("features/{album_id}_{i}");
            let conv_path = format!("{stem}_conv.kagf");
            let regions_path = format!("{stem}_regions.kagf");
            features.push((conv_path.clone(), Tensor::new(vec![spec.grid, spec.grid, dim], conv)?));
            features.push((regions_path.clone(), Tensor::new(vec![spec.m_boxes, dim], regions)?));
            images.push(ImageLine {
                image_id: format!("{album_id}_{i}"),
                conv: conv_path,
                regions: regions_path,
                labels: vec![NOUNS[n1].to_string(), NOUNS[n2].to_string()],
            });
        }
        manifest.push(ManifestLine {
            album_id,
            images,
            references: vec![story],
        });
    }
    Ok(SynthData {
        manifest,
        features,
        knowledge,
    })
}

pub fn knowledge_tsv(triples: &[ConceptTriple]) -> String {
    let mut out = String::from("# head\trelation\ttail\tweight\n");
    for t in triples {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.2}", t.head, t.relation, t.tail, t.weight);
    }
    out
}

/// Writes `manifest.jsonl`, `knowledge.tsv` and `features/` under `dir`.
pub fn write(dir: &Path, data: &SynthData) -> Result<()> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| KagsError::io(&feat_dir, e))?;
    for (rel, tensor) in &data.features {
        kagf::write_feature_file(&dir.join(rel), tensor)?;
    }
    let kpath = dir.join("knowledge.tsv");
    fs::write(&kpath, knowledge_tsv(&data.knowledge)).map_err(|e| KagsError::io(&kpath, e))?;
    write_manifest(&dir.join("manifest.jsonl"), &data.manifest)
}

pub fn synth(dir: &Path, spec: &SynthSpec, seed: u64) -> Result<()> {
    write(dir, &generate(spec, seed)?)
}
