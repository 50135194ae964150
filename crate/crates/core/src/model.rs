//! The full storytelling model: feature projection, knowledge concepts,
//! cascade attention, group pooling and the story decoder.

use rand_chacha::ChaCha8Rng;

use crate::attention::Cca;
use crate::autodiff::{BnMode, Graph, Var};
use crate::config::RunConfig;
use crate::data::kagf::read_feature_file;
use crate::data::manifest::AlbumRecord;
use crate::decoder::{teacher_forcing, Context, Decoder, DecoderDims, DecoderStepper, FlattenIndicator};
use crate::error::{KagsError, Result};
use crate::gsm::{class_activation_map, Gsm};
use crate::knowledge::{embed_concepts, ConceptTriple, KnowledgeGraph};
use crate::nn::Linear;
use crate::params::{Init, ParamId, ParamStore};
use crate::search::{self, Hypothesis};
use crate::tensor::{Float, Tensor};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug)]
pub struct ImageInput {
    /// `h×w×feature_dim` convolutional grid.
    pub conv: Tensor<f32>,
    /// `M×feature_dim` region features.
    pub regions: Tensor<f32>,
    pub concepts: Vec<ConceptTriple>,
}

#[derive(Clone, Debug)]
pub struct AlbumInput {
    pub album_id: String,
    pub images: Vec<ImageInput>,
    /// Token ids per reference story, per image.
    pub references: Vec<Vec<Vec<usize>>>,
}

impl AlbumInput {
    /// Reads the feature files of `record` and retrieves its concepts.
    pub fn load(record: &AlbumRecord, kg: &KnowledgeGraph, vocab: &Vocabulary, k_max: usize) -> Result<Self> {
        let images = record
            .images
            .iter()
            .map(|img| {
                Ok(ImageInput {
                    conv: read_feature_file(&img.conv)?,
                    regions: read_feature_file(&img.regions)?,
                    concepts: kg.retrieve_concepts(&img.labels, k_max),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let references = record
            .references
            .iter()
            .map(|story| story.iter().map(|s| vocab.encode(s)).collect())
            .collect();
        Ok(AlbumInput {
            album_id: record.album_id.clone(),
            images,
            references,
        })
    }
}

/// Encoder outputs for one album, inside a graph.
pub struct Encoded {
    pub contexts: Vec<Context>,
    /// Projected convolutional grids, `h·w × d` each.
    pub grids: Vec<Var>,
    pub grid_shapes: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub knowledge: KnowledgeGraph,
    pub project: Linear,
    pub word_emb: ParamId,
    pub concept_proj: Linear,
    pub cca: Cca,
    pub gsm: Gsm,
    pub flatten_knowledge: FlattenIndicator,
    pub flatten_regions: FlattenIndicator,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(
        config: &RunConfig,
        vocab: Vocabulary,
        knowledge: KnowledgeGraph,
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        let mut init = Init::new(store, rng);
        let project = Linear::new(&mut init, "project", c.feature_dim, d, true);
        let word_emb = init.uniform("word_emb", &[vocab.len(), d], (3.0 / d as f32).sqrt());
        let concept_proj = Linear::new(&mut init, "concept_proj", d, d, true);
        let cca = Cca::new(&mut init, "cca", c.cca_layers, d, c.n_heads)?;
        let gsm = Gsm::new(&mut init, "gsm", d, c.reduced_channels())?;
        let flatten_knowledge =
            FlattenIndicator::new(&mut init, "flatten_knowledge", d, c.d_hidden, c.flatten_activation);
        let flatten_regions =
            FlattenIndicator::new(&mut init, "flatten_regions", d, c.d_hidden, c.flatten_activation);
        let decoder = Decoder::new(
            &mut init,
            "decoder",
            DecoderDims {
                d,
                hidden: c.d_hidden,
                heads: c.n_heads,
                vocab: vocab.len(),
                regional_keys: c.regional_ca_keys,
            },
        )?;
        Ok(Model {
            config: c.clone(),
            vocab,
            knowledge,
            project,
            word_emb,
            concept_proj,
            cca,
            gsm,
            flatten_knowledge,
            flatten_regions,
            decoder,
        })
    }

    fn check_image(&self, img: &ImageInput) -> Result<(usize, usize)> {
        let f = self.config.feature_dim;
        let (h, w) = match img.conv.shape() {
            [h, w, c] if *c == f => (*h, *w),
            s => {
                return Err(KagsError::dim(
                    "project_feature",
                    format!("conv grid {s:?}, expected h×w×{f}"),
                ))
            }
        };
        match img.regions.shape() {
            [m, c] if *m == self.config.m_boxes && *c == f => Ok((h, w)),
            s => Err(KagsError::dim(
                "project_feature",
                format!("regions {s:?}, expected {}×{f}", self.config.m_boxes),
            )),
        }
    }

    pub fn encode<T: Float>(&self, g: &mut Graph<'_, T>, album: &AlbumInput, mode: BnMode) -> Result<Encoded> {
        Ok(self.encode_batch(g, &[album], mode)?.remove(0))
    }

    /// Encodes several albums in one graph. The cascade's BatchNorm
    /// statistics span every image of every album in the call.
    pub fn encode_batch<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        albums: &[&AlbumInput],
        mode: BnMode,
    ) -> Result<Vec<Encoded>> {
        let table = g.param(self.word_emb);
        let mut ks = Vec::new();
        let mut rs = Vec::new();
        let mut per_album = Vec::with_capacity(albums.len());
        for album in albums {
            if album.images.len() != self.config.n_images {
                return Err(KagsError::dim(
                    "encode",
                    format!(
                        "album `{}` has {} images, expected {}",
                        album.album_id,
                        album.images.len(),
                        self.config.n_images
                    ),
                ));
            }
            let mut grids = Vec::with_capacity(album.images.len());
            let mut grid_shapes = Vec::with_capacity(album.images.len());
            for img in &album.images {
                let (h, w) = self.check_image(img)?;
                let conv = g.constant(img.conv.reshape(&[h * w, self.config.feature_dim])?.cast());
                grids.push(self.project.forward(g, conv)?);
                grid_shapes.push((h, w));
                let regions = g.constant(img.regions.cast());
                rs.push(self.project.forward(g, regions)?);
                ks.push(embed_concepts(
                    g,
                    &img.concepts,
                    &self.vocab,
                    table,
                    &self.concept_proj,
                    self.config.k_relations,
                )?);
            }
            per_album.push((grids, grid_shapes));
        }
        let (ks, rs) = self.cca.forward_many(g, &ks, &rs, mode)?;
        let mut out = Vec::with_capacity(albums.len());
        let mut kr = ks.into_iter().zip(rs);
        for (grids, grid_shapes) in per_album {
            let a_tilde = self.gsm.forward(g, &grids)?;
            let mut contexts = Vec::with_capacity(grids.len());
            for (k, r) in kr.by_ref().take(grids.len()) {
                contexts.push(Context {
                    k_bar: self.flatten_knowledge.forward(g, k)?,
                    r_bar: self.flatten_regions.forward(g, r)?,
                    a_tilde,
                    r_full: r,
                });
            }
            out.push(Encoded {
                contexts,
                grids,
                grid_shapes,
            });
        }
        Ok(out)
    }

    /// Summed teacher-forced cross-entropy over every reference sentence of
    /// the album, and the number of predicted tokens.
    pub fn album_loss<T: Float>(&self, g: &mut Graph<'_, T>, album: &AlbumInput, mode: BnMode) -> Result<(Var, usize)> {
        self.batch_loss(g, &[album], mode)
    }

    /// Summed loss over a batch of albums encoded together.
    pub fn batch_loss<T: Float>(&self, g: &mut Graph<'_, T>, albums: &[&AlbumInput], mode: BnMode) -> Result<(Var, usize)> {
        let encoded = self.encode_batch(g, albums, mode)?;
        let mut terms = Vec::new();
        let mut tokens = 0;
        for (album, enc) in albums.iter().zip(&encoded) {
            if album.references.is_empty() {
                return Err(KagsError::Precondition(format!(
                    "album `{}` has no reference story",
                    album.album_id
                )));
            }
            for story in &album.references {
                for (ctx, words) in enc.contexts.iter().zip(story) {
                    let (l, n) = self.decoder.sentence_loss(
                        g,
                        self.word_emb,
                        ctx,
                        words,
                        self.config.max_sentence_len,
                        mode,
                    )?;
                    terms.push(l);
                    tokens += n;
                }
            }
        }
        let Some((&first, rest)) = terms.split_first() else {
            return Err(KagsError::Precondition("empty batch".into()));
        };
        let mut total = first;
        for &t in rest {
            total = g.add(total, t)?;
        }
        Ok((total, tokens))
    }

    /// Inference-mode argmax hits against every reference token (end token
    /// included), and the token count.
    pub fn teacher_forced_accuracy<T: Float>(&self, store: &ParamStore<T>, album: &AlbumInput) -> Result<(usize, usize)> {
        let mut g = Graph::new(store);
        let enc = self.encode(&mut g, album, BnMode::Eval)?;
        let (mut hits, mut total) = (0, 0);
        for story in &album.references {
            for (ctx, words) in enc.contexts.iter().zip(story) {
                let (inputs, targets) = teacher_forcing(words, self.config.max_sentence_len);
                let mut state = self.decoder.zero_state(&mut g);
                let table = g.param(self.word_emb);
                for (&inp, &tgt) in inputs.iter().zip(&targets) {
                    let w = g.gather_rows(table, &[inp])?;
                    let (logits, next) = self.decoder.decode_step(&mut g, &state, ctx, w, BnMode::Eval)?;
                    let row = g.value(logits).data();
                    let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                    hits += usize::from(best == tgt);
                    total += 1;
                    state = next;
                }
            }
        }
        Ok((hits, total))
    }

    /// Decodes one sentence per image; `beam == 1` is greedy decoding.
    pub fn generate<T: Float>(
        &self,
        store: &ParamStore<T>,
        album: &AlbumInput,
        beam: usize,
    ) -> Result<Vec<Hypothesis>> {
        if beam == 0 {
            return Err(KagsError::Precondition("beam size must be at least 1".into()));
        }
        let mut g = Graph::new(store);
        let enc = self.encode(&mut g, album, BnMode::Eval)?;
        let max_len = self.config.max_sentence_len;
        let mut out = Vec::with_capacity(enc.contexts.len());
        for ctx in enc.contexts {
            let mut stepper = DecoderStepper {
                decoder: &self.decoder,
                graph: &mut g,
                table: self.word_emb,
                ctx,
            };
            out.push(if beam == 1 {
                search::greedy(&mut stepper, max_len)?
            } else {
                search::beam(&mut stepper, beam, max_len)?
            });
        }
        Ok(out)
    }

    /// Class activation map of every image against the album aggregation.
    pub fn class_activation_maps(&self, store: &ParamStore<f32>, album: &AlbumInput) -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::new(store);
        let enc = self.encode(&mut g, album, BnMode::Eval)?;
        let a = g.value(enc.contexts[0].a_tilde).clone();
        enc.grids
            .iter()
            .zip(&enc.grid_shapes)
            .map(|(&c, &(h, w))| {
                let grid = g.value(c).reshape(&[h, w, self.config.d_model])?;
                class_activation_map(&grid, &a)
            })
            .collect()
    }
}
