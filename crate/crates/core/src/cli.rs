//! Command-line front end: `synth`, `train`, `generate`, `eval`,
//! `gradcheck` and `cam`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::manifest::parse_manifest;
use crate::data::synth::{synth, SynthSpec};
use crate::error::{KagsError, Result};
use crate::gradcheck::suite::{run_suite, Widths};
use crate::metrics::{evaluate_stories, EvalUnit, Prediction};
use crate::model::AlbumInput;
use crate::par;
use crate::train::{train, Trainer};

#[derive(Debug, Parser)]
#[command(name = "kags", version, about = "Knowledge-enriched visual storytelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size model.
    Full,
    /// Small widths for desk-scale runs.
    Scaled,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (features, manifest, knowledge graph).
    Synth {
        #[arg(long)]
        albums: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        images: usize,
        #[arg(long, default_value_t = 8)]
        boxes: usize,
        #[arg(long, default_value_t = 4)]
        grid: usize,
        #[arg(long, default_value_t = 128)]
        feature_dim: usize,
    },
    /// Train a model and write `checkpoint.kagc` and `train_log.jsonl`.
    Train {
        /// JSON run configuration; flags below override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base configuration when no file is given.
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        knowledge: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Decode one story per album and write predictions as JSON lines.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against the manifest references.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Images per album in the manifest.
        #[arg(long, default_value_t = 5)]
        images: usize,
        /// Score sentence by sentence instead of whole stories.
        #[arg(long)]
        per_sentence: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export class activation maps as CSV, one file per image.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on invalid input or usage, 2 on internal failure.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Ok(v) = std::env::var("KAGS_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) => {
                par::init_threads(n);
            }
            Err(_) => {
                eprintln!("error: KAGS_THREADS must be a non-negative integer, got `{v}`");
                return 1;
            }
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth {
            albums,
            out,
            seed,
            images,
            boxes,
            grid,
            feature_dim,
        } => {
            let spec = SynthSpec {
                albums,
                n_images: images,
                m_boxes: boxes,
                grid,
                feature_dim,
            };
            synth(&out, &spec, seed)?;
            println!("wrote {albums} albums to {}", out.display());
        }
        Command::Train {
            config,
            preset,
            manifest,
            knowledge,
            out,
            epochs,
            seed,
            lr,
            batch_size,
        } => {
            let mut c = match (config, preset) {
                (Some(path), _) => RunConfig::load(&path)?,
                (None, Preset::Full) => RunConfig::default(),
                (None, Preset::Scaled) => RunConfig::scaled(),
            };
            if let Some(v) = epochs {
                c.epochs = v;
            }
            if let Some(v) = seed {
                c.seed = v;
            }
            if let Some(v) = lr {
                c.lr = v;
            }
            if let Some(v) = batch_size {
                c.batch_size = v;
            }
            let outcome = train(&c, &manifest, &knowledge, &out)?;
            println!("parameters {}", outcome.parameters);
            for l in &outcome.log {
                println!("epoch {:>4}  mean loss {:.4}", l.epoch, l.mean_loss);
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Generate {
            checkpoint,
            manifest,
            beam,
            out,
        } => {
            let preds = generate_predictions(&checkpoint, &manifest, beam)?;
            write_predictions(&out, &preds)?;
            println!("wrote {} stories to {}", preds.len(), out.display());
        }
        Command::Eval {
            predictions,
            manifest,
            images,
            per_sentence,
            json,
        } => {
            let unit = if per_sentence { EvalUnit::Sentence } else { EvalUnit::Story };
            let report = evaluate_stories(&predictions, &manifest, images, unit)?;
            println!("{report}");
            if let Some(path) = json {
                fs::write(&path, report.to_json()? + "\n").map_err(|e| KagsError::io(&path, e))?;
            }
        }
        Command::Gradcheck { module, seed } => {
            let reports = run_suite(module.as_deref(), seed, &Widths::scaled())?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                eprintln!("error: {failed} gradient check(s) failed");
                return Ok(2);
            }
        }
        Command::Cam {
            checkpoint,
            manifest,
            out,
        } => {
            let n = export_cams(&checkpoint, &manifest, &out)?;
            println!("wrote {n} maps to {}", out.display());
        }
    }
    Ok(0)
}

fn load_trainer(checkpoint: &Path) -> Result<Trainer> {
    Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)
}

fn load_albums(t: &Trainer, manifest: &Path) -> Result<Vec<AlbumInput>> {
    let c = &t.model.config;
    let mut records = parse_manifest(manifest, c.n_images)?;
    records.sort_by(|a, b| a.album_id.cmp(&b.album_id));
    par::map(&records, |r| AlbumInput::load(r, &t.model.knowledge, &t.model.vocab, c.k_relations))
        .into_iter()
        .collect()
}

/// Decodes every album of the manifest, ordered by album id.
pub fn generate_predictions(checkpoint: &Path, manifest: &Path, beam: usize) -> Result<Vec<Prediction>> {
    let t = load_trainer(checkpoint)?;
    let albums = load_albums(&t, manifest)?;
    par::map(&albums, |a| {
        let hyps = t.model.generate(&t.store, a, beam)?;
        Ok(Prediction {
            album_id: a.album_id.clone(),
            sentences: hyps.iter().map(|h| t.model.vocab.decode(&h.tokens)).collect(),
            log_prob: hyps.iter().map(|h| h.log_prob).sum(),
        })
    })
    .into_iter()
    .collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| KagsError::io(path, e))
}

/// Writes `{album_id}_{image}.csv` maps (`h` rows of `w` values) under `out`
/// and returns how many were written.
pub fn export_cams(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<usize> {
    let t = load_trainer(checkpoint)?;
    let albums = load_albums(&t, manifest)?;
    fs::create_dir_all(out).map_err(|e| KagsError::io(out, e))?;
    let mut n = 0;
    for a in &albums {
        for (i, map) in t.model.class_activation_maps(&t.store, a)?.iter().enumerate() {
            let (h, w) = (map.shape()[0], map.shape()[1]);
            let mut csv = String::new();
            for r in 0..h {
                let row: Vec<String> = (0..w).map(|c| map.data()[r * w + c].to_string()).collect();
                let _ = writeln!(csv, "{}", row.join(","));
            }
            let path = out.join(format!("{}_{i}.csv", a.album_id));
            fs::write(&path, csv).map_err(|e| KagsError::io(&path, e))?;
            n += 1;
        }
    }
    Ok(n)
}
