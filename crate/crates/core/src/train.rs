//! Teacher-forced training: per-album gradients, Adam, checkpoints and logs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::autodiff::{BnMode, BnUpdate, Graph, Var, BN_MOMENTUM};
use crate::checkpoint::{Checkpoint, Metadata};
use crate::config::RunConfig;
use crate::data::manifest::{parse_manifest, AlbumRecord};
use crate::error::{KagsError, Result};
use crate::knowledge::KnowledgeGraph;
use crate::model::{AlbumInput, Model};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Summed negative log-likelihood of `targets` under row-wise `logits`,
/// skipping masked-out positions.
pub fn story_loss<T: crate::tensor::Float>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var> {
    g.cross_entropy_sum(logits, targets, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, lr: f64, weight_decay: f64, decoupled: bool) -> Self {
        let zeros: Vec<Tensor<f32>> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Adam {
            lr,
            weight_decay,
            decoupled,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(KagsError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let (lr, wd) = (self.lr, self.weight_decay);
        for (i, grad) in grads.iter().enumerate() {
            let id = ParamId(i);
            if !store.entry(id).trainable {
                continue;
            }
            let Some(grad) = grad else { continue };
            let p = store.get_mut(id);
            if grad.shape() != p.shape() {
                return Err(KagsError::Contract(format!(
                    "gradient shape {:?} for parameter of shape {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let mut g = g as f64;
                let mut wv = *w as f64;
                if self.decoupled {
                    wv *= 1.0 - lr * wd;
                } else {
                    g += wd * wv;
                }
                let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * g;
                let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                *w = (wv - lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Folds BatchNorm batch statistics into the running buffers in order.
pub fn apply_bn_updates(store: &mut ParamStore<f32>, updates: &[BnUpdate<f32>]) {
    let mom = BN_MOMENTUM as f32;
    for u in updates {
        for (id, batch) in [(u.mean_id, &u.batch_mean), (u.var_id, &u.batch_var_unbiased)] {
            let buf = store.get_mut(id).data_mut();
            for (r, &b) in buf.iter_mut().zip(batch) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
    }
}

pub struct BatchGrad {
    pub loss: f64,
    pub tokens: usize,
    pub grads: Vec<Option<Tensor<f32>>>,
    pub bn: Vec<BnUpdate<f32>>,
}

/// Loss and gradients of one batch, encoded in a single graph so BatchNorm
/// sees the whole batch.
pub fn batch_gradient(model: &Model, store: &ParamStore<f32>, albums: &[&AlbumInput]) -> Result<BatchGrad> {
    let mut g = Graph::new(store);
    let (loss, tokens) = model.batch_loss(&mut g, albums, BnMode::Train)?;
    let value = g.value(loss).data()[0] as f64;
    g.backward(loss)?;
    Ok(BatchGrad {
        loss: value,
        tokens,
        grads: g.take_param_grads(),
        bn: g.take_bn_updates(),
    })
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchStats {
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
}

impl Trainer {
    pub fn new(config: &RunConfig, vocab: Vocabulary, knowledge: KnowledgeGraph) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream(config.seed, Stream::Init);
        let model = Model::new(config, vocab, knowledge, &mut store, &mut rng)?;
        let adam = Adam::new(&store, config.lr, config.weight_decay, config.decoupled_weight_decay);
        Ok(Trainer {
            model,
            store,
            adam,
            epoch: 0,
        })
    }

    /// One clipped Adam step on the batch loss, then the BatchNorm
    /// running-statistics update.
    pub fn train_batch(&mut self, batch: &[&AlbumInput]) -> Result<BatchStats> {
        let BatchGrad {
            loss,
            tokens,
            grads: mut total,
            bn,
        } = batch_gradient(&self.model, &self.store, batch)?;
        let grad_norm = clip_global_norm(&mut total, self.model.config.grad_clip);
        self.adam.step(&mut self.store, &total)?;
        apply_bn_updates(&mut self.store, &bn);
        Ok(BatchStats { loss, tokens, grad_norm })
    }

    /// One pass over `albums` in a seeded shuffled order.
    pub fn train_epoch(&mut self, albums: &[AlbumInput]) -> Result<BatchStats> {
        let mut order: Vec<usize> = (0..albums.len()).collect();
        let mut rng = stream(self.model.config.seed, Stream::Shuffle);
        // each epoch reads its own window of the shuffle stream
        rng.set_word_pos((self.epoch as u128) << 32);
        order.shuffle(&mut rng);
        let mut sum = BatchStats {
            loss: 0.0,
            tokens: 0,
            grad_norm: 0.0,
        };
        for chunk in order.chunks(self.model.config.batch_size) {
            let batch: Vec<&AlbumInput> = chunk.iter().map(|&i| &albums[i]).collect();
            let s = self.train_batch(&batch)?;
            sum.loss += s.loss;
            sum.tokens += s.tokens;
            sum.grad_norm = sum.grad_norm.max(s.grad_norm);
        }
        self.epoch += 1;
        Ok(sum)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        for (i, e) in self.store.entries().iter().enumerate() {
            if e.trainable {
                tensors.push((format!("adam.m/{}", e.name), self.adam.m[i].clone()));
                tensors.push((format!("adam.v/{}", e.name), self.adam.v[i].clone()));
            }
        }
        Checkpoint {
            meta: Metadata {
                config: self.model.config.clone(),
                vocabulary: self.model.vocab.clone(),
                step: self.adam.step,
                epoch: self.epoch,
                knowledge: self.model.knowledge.triples().cloned().collect(),
            },
            tensors,
        }
    }

    /// Rebuilds a trainer from a checkpoint; every parameter and moment must
    /// be present with its expected shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        let kg = KnowledgeGraph::from_triples(meta.knowledge.iter().cloned());
        let mut t = Trainer::new(&meta.config, meta.vocabulary.clone(), kg)?;
        for i in 0..t.store.len() {
            let (name, trainable) = {
                let e = &t.store.entries()[i];
                (e.name.clone(), e.trainable)
            };
            let fetch = |key: &str| {
                ckpt.tensor(key)
                    .cloned()
                    .ok_or_else(|| KagsError::Validation(format!("checkpoint lacks tensor `{key}`")))
            };
            t.store.assign(&name, fetch(&name)?)?;
            if trainable {
                for (slot, key) in [(&mut t.adam.m[i], format!("adam.m/{name}")), (&mut t.adam.v[i], format!("adam.v/{name}"))] {
                    let v = fetch(&key)?;
                    if v.shape() != slot.shape() {
                        return Err(KagsError::Validation(format!("moment `{key}` has shape {:?}", v.shape())));
                    }
                    *slot = v;
                }
            }
        }
        t.adam.step = meta.step;
        t.epoch = meta.epoch;
        Ok(t)
    }

    /// Loads a checkpoint, requiring it to agree with `expected` on every
    /// structural key.
    pub fn load_against(path: &Path, expected: &RunConfig) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        expected.check_compatible(&ckpt.meta.config)?;
        Self::from_checkpoint(&ckpt)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub tokens: usize,
    pub seconds: f64,
}

pub struct Dataset {
    pub records: Vec<AlbumRecord>,
    pub albums: Vec<AlbumInput>,
    pub vocab: Vocabulary,
    pub knowledge: KnowledgeGraph,
}

/// Parses the manifest and knowledge file, builds the extended vocabulary
/// and loads every album's features.
pub fn load_dataset(config: &RunConfig, manifest: &Path, knowledge: &Path) -> Result<Dataset> {
    let records = parse_manifest(manifest, config.n_images)?;
    let kg = KnowledgeGraph::load(knowledge)?;
    let vocab = Vocabulary::build(
        records.iter().flat_map(|r| r.references.iter().flatten().map(String::as_str)),
        config.vocab_min_count,
    );
    let vocab = kg.extend_vocabulary(&vocab);
    let albums = par::map(&records, |r| AlbumInput::load(r, &kg, &vocab, config.k_relations))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        records,
        albums,
        vocab,
        knowledge: kg,
    })
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub checkpoint: PathBuf,
    pub log: Vec<EpochLog>,
    pub parameters: usize,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.kagc";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Trains for `config.epochs`, writing `checkpoint.kagc` after every epoch
/// and one JSON log line per epoch to `train_log.jsonl`. The log starts with
/// a line giving the trainable parameter count.
pub fn train(config: &RunConfig, manifest: &Path, knowledge: &Path, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let data = load_dataset(config, manifest, knowledge)?;
    if data.albums.is_empty() {
        return Err(KagsError::Precondition("manifest has no albums".into()));
    }
    fs::create_dir_all(out).map_err(|e| KagsError::io(out, e))?;
    let mut trainer = Trainer::new(config, data.vocab, data.knowledge)?;
    let parameters = trainer.store.trainable_count();
    let log_path = out.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|e| KagsError::io(&log_path, e))?;
    let header = serde_json::json!({ "parameters": parameters, "albums": data.albums.len(), "vocab": trainer.model.vocab.len() });
    writeln!(log_file, "{header}").map_err(|e| KagsError::io(&log_path, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let start = Instant::now();
        let s = trainer.train_epoch(&data.albums)?;
        let line = EpochLog {
            epoch: trainer.epoch,
            mean_loss: s.loss / s.tokens.max(1) as f64,
            tokens: s.tokens,
            seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(log_file, "{}", serde_json::to_string(&line)?).map_err(|e| KagsError::io(&log_path, e))?;
        log.push(line);
        trainer.checkpoint().save(&ckpt_path)?;
    }
    if config.epochs == 0 {
        trainer.checkpoint().save(&ckpt_path)?;
    }
    Ok(TrainOutcome {
        trainer,
        checkpoint: ckpt_path,
        log,
        parameters,
    })
}
