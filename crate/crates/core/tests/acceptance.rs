//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use kags::checkpoint::Checkpoint;
use kags::config::RunConfig;
use kags::data::kagf;
use kags::data::synth::{synth, SynthSpec};
use kags::decoder::teacher_forcing;
use kags::gradcheck::suite::{run_suite, Widths};
use kags::metrics::{bleu, rouge_l, EvalPair, MetricReport};
use kags::par;
use kags::search;
use kags::tensor::Tensor;
use kags::train::{load_dataset, Trainer};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let widths = Widths::scaled();
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    for seed in 0..5 {
        for r in run_suite(None, seed, &widths).map_err(|e| e.to_string())? {
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, r.op_name.clone());
            }
            if !r.passed {
                failures.push(format!("{} seed {seed} ({:.2e})", r.op_name, r.max_rel_error));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failures.is_empty() && secs < 120.0,
        format!(
            "5 seeds, max rel err {:.2e} ({}), {secs:.1} s for all seeds{}",
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn invariances() -> Outcome {
    let w = Widths::scaled();
    let seeds = 0..20u64;
    let max = |f: &dyn Fn(u64) -> f64| seeds.clone().map(f).fold(0.0, f64::max);
    let softmax = max(&|s| softmax_errors(s).0);
    let shift = max(&|s| softmax_errors(s).1);
    let attn = max(&|s| attention_row_sum_error(s, &w));
    let sa = max(&|s| self_attention_equivariance_error(s, &w));
    let ca = max(&|s| cross_attention_errors(s, &w).0);
    let sop = max(&|s| sop_spatial_error(s, &w));
    let gsm = max(&|s| gsm_order_error(s, &w));
    let mut asym = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for s in seeds.clone() {
        for (h, wd, c) in [(2, 2, 6), (1, 3, 4), (w.grid.0, w.grid.1, w.reduced)] {
            let d = if c == w.reduced { w.d } else { 8 };
            let (a, e) = covariance_checks(s, h, wd, d, c);
            asym = asym.max(a);
            min_eig = min_eig.min(e);
        }
    }
    check(
        softmax < 1e-6 && shift < 1e-6 && attn < 1e-6 && sa < 1e-5 && ca < 1e-5 && sop < 1e-5 && gsm < 1e-5 && asym < 1e-6 && min_eig >= -1e-6,
        format!(
            "row sums {softmax:.1e}/{attn:.1e}, shift {shift:.1e}, SA {sa:.1e}, CA {ca:.1e}, SOP {sop:.1e}, GSM {gsm:.1e}, cov asym {asym:.1e}, min eig {min_eig:.1e}"
        ),
    )
}

fn memorization() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    synth(dir.path(), &SynthSpec::default(), 11).map_err(|e| e.to_string())?;
    let cfg = RunConfig::scaled();
    let data = load_dataset(&cfg, &dir.path().join("manifest.jsonl"), &dir.path().join("knowledge.tsv"))
        .map_err(|e| e.to_string())?;
    let vocab = data.vocab.len();
    let mut t = Trainer::new(&cfg, data.vocab, data.knowledge).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (mut acc, mut exact, mut epochs) = (0.0, 0, 0);
    while epochs < 500 {
        t.train_epoch(&data.albums).map_err(|e| e.to_string())?;
        epochs += 1;
        if epochs % 25 != 0 {
            continue;
        }
        let (mut hits, mut total) = (0, 0);
        exact = 0;
        for a in &data.albums {
            let (h, n) = t.model.teacher_forced_accuracy(&t.store, a).map_err(|e| e.to_string())?;
            hits += h;
            total += n;
            let gen = t.model.generate(&t.store, a, 1).map_err(|e| e.to_string())?;
            let same = gen.iter().zip(&a.references[0]).all(|(g, r)| {
                let (_, targets) = teacher_forcing(r, cfg.max_sentence_len);
                g.finished && g.tokens == targets[..targets.len() - 1]
            });
            exact += usize::from(same);
        }
        acc = hits as f64 / total as f64;
        if acc >= 0.95 && exact >= 3 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        acc >= 0.95 && exact >= 3 && secs < 300.0,
        format!(
            "{} albums, |V|={vocab}, {epochs} epochs, token accuracy {:.1}%, {exact}/{} exact stories, {secs:.1} s",
            data.albums.len(),
            acc * 100.0,
            data.albums.len()
        ),
    )
}

fn decoder_equivalence() -> Outcome {
    let (same, not_worse) = decoder_equivalences(100, &Widths::scaled(), 12);
    let best = exhaustive_best(&mut three_token_toy(), 4).map_err(|e| e.to_string())?;
    let beam2 = search::beam(&mut three_token_toy(), 2, 4).map_err(|e| e.to_string())?;
    let toy = beam2.tokens == best.tokens && (beam2.log_prob - best.log_prob).abs() < 1e-12;
    check(
        same == 100 && not_worse == 100 && toy,
        format!(
            "beam 1 = greedy {same}/100, beam 3 >= greedy {not_worse}/100, toy beam 2 optimal: {toy}"
        ),
    )
}

fn metric_oracles() -> Outcome {
    let f: serde_json::Value =
        serde_json::from_str(include_str!("fixtures/metric_corpus.json")).map_err(|e| e.to_string())?;
    let pairs: Vec<EvalPair> = f["stories20"]["pairs"]
        .as_array()
        .ok_or("fixture has no pairs")?
        .iter()
        .map(|p| {
            let refs: Vec<&str> = p["references"].as_array().unwrap().iter().map(|r| r.as_str().unwrap()).collect();
            EvalPair::from_text(p["candidate"].as_str().unwrap(), &refs)
        })
        .collect();
    let got = serde_json::to_value(MetricReport::compute(&pairs).map_err(|e| e.to_string())?).unwrap();
    let mut worst = 0.0f64;
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"] {
        let want = f["stories20"]["expected"][key].as_f64().ok_or("missing expected value")?;
        worst = worst.max((got[key].as_f64().unwrap() - want).abs());
    }
    let hand = [EvalPair::from_text("the cat sat", &["the cat sat down"])];
    let b1 = bleu(&hand, 1).map_err(|e| e.to_string())?;
    let rl = rouge_l(&hand).map_err(|e| e.to_string())?;
    let (db, dr) = ((b1 - (-1.0f64 / 3.0).exp()).abs(), (rl - 0.8356).abs());
    check(
        worst < 1e-4 && db < 1e-4 && dr < 1e-4,
        format!(
            "{} pairs, max fixture deviation {worst:.1e}; BLEU-1 {b1:.6} (dev {db:.1e}), ROUGE-L {rl:.6} (dev {dr:.1e})",
            pairs.len()
        ),
    )
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data: Vec<f32> = (0..7 * 7 * 2048).map(|i| ((i * 7919) % 10007) as f32 / 977.0 - 5.0).collect();
    let grid = Tensor::new(vec![7, 7, 2048], data).map_err(|e| e.to_string())?;
    let path = dir.path().join("grid.kagf");
    kagf::write_feature_file(&path, &grid).map_err(|e| e.to_string())?;
    let back = kagf::read_feature_file(&path).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let kagf_ok = back.shape() == grid.shape() && bits(&back) == bits(&grid);

    let ckpt = trained_checkpoint(&dir.path().join("data"));
    let cpath = dir.path().join("c.kagc");
    ckpt.save(&cpath).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&cpath).map_err(|e| e.to_string())?;
    let kagc_ok = loaded.meta == ckpt.meta
        && loaded.tensors.len() == ckpt.tensors.len()
        && loaded.tensors.iter().zip(&ckpt.tensors).all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape() && bits(a) == bits(b));

    let small = kagf::encode(&Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.25, -0.0]).unwrap());
    let kagf_bad = corruption_escapes(&small, 0..small.len(), (0..7).map(|p| (p, 3)), kagf::decode, false);
    let bytes = ckpt.encode().map_err(|e| e.to_string())?;
    let n = bytes.len();
    let step = (n / 300).max(1);
    let kagc_bad = corruption_escapes(
        &bytes,
        (0..n).step_by(step),
        (0..n).step_by(step / 2 + 1).map(|p| (p, (p % 8) as u8)),
        Checkpoint::decode,
        false,
    );
    check(
        kagf_ok && kagc_ok && kagf_bad.is_none() && kagc_bad.is_none(),
        format!(
            "KAGF 7x7x2048 bitwise: {kagf_ok}; KAGC {} tensors bitwise: {kagc_ok}; corruptions located: {}",
            ckpt.tensors.len(),
            match (&kagf_bad, &kagc_bad) {
                (None, None) => "all".to_string(),
                (a, b) => format!("{a:?} {b:?}"),
            }
        ),
    )
}

fn run_pipeline(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let kags = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(env!("CARGO_BIN_EXE_kags")).args(args).output().map_err(|e| e.to_string())?;
        if o.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
        }
    };
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, run) = (root.join("data"), root.join("run"));
    let manifest = data.join("manifest.jsonl");
    let (ckpt, preds, json) = (run.join("checkpoint.kagc"), root.join("preds.jsonl"), root.join("metrics.json"));
    kags(&["synth", "--albums", "4", "--out", &s(&data), "--seed", "11"])?;
    kags(&[
        "train", "--preset", "scaled", "--manifest", &s(&manifest), "--knowledge", &s(&data.join("knowledge.tsv")),
        "--out", &s(&run), "--epochs", "5",
    ])?;
    kags(&["generate", "--checkpoint", &s(&ckpt), "--manifest", &s(&manifest), "--out", &s(&preds)])?;
    kags(&["eval", "--predictions", &s(&preds), "--manifest", &s(&manifest), "--json", &s(&json)])?;
    [ckpt, preds, json]
        .iter()
        .map(|p| Ok((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).map_err(|e| e.to_string())?)))
        .collect()
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let first = run_pipeline(a.path())?;
    let second = run_pipeline(b.path())?;
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    check(
        differing.is_empty(),
        format!(
            "{} artefacts ({}) compared across two runs; differing: {:?}",
            first.len(),
            first.iter().map(|(n, b)| format!("{n} {} B", b.len())).collect::<Vec<_>>().join(", "),
            differing
        ),
    )
}

fn full_size() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::default();
    let spec = SynthSpec {
        albums: 2,
        n_images: cfg.n_images,
        m_boxes: cfg.m_boxes,
        grid: 7,
        feature_dim: cfg.feature_dim,
    };
    synth(dir.path(), &spec, 3).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let data = load_dataset(&cfg, &dir.path().join("manifest.jsonl"), &dir.path().join("knowledge.tsv"))
        .map_err(|e| e.to_string())?;
    let mut t = Trainer::new(&cfg, data.vocab, data.knowledge).map_err(|e| e.to_string())?;
    let params = t.store.trainable_count();
    let batch: Vec<_> = data.albums.iter().collect();
    let stats = t.train_batch(&batch).map_err(|e| e.to_string())?;
    println!("full-size parameters {params}");
    check(
        stats.loss.is_finite() && stats.grad_norm.is_finite() && stats.grad_norm > 0.0,
        format!(
            "d={} heads={} cca layers={} K={} M={} N={} hidden={} beam={}: {params} parameters, batch loss {:.3}, grad norm {:.3}, {:.1} s",
            cfg.d_model, cfg.n_heads, cfg.cca_layers, cfg.k_relations, cfg.m_boxes, cfg.n_images, cfg.d_hidden, cfg.beam_size,
            stats.loss / stats.tokens as f64, stats.grad_norm, start.elapsed().as_secs_f64()
        ),
    )
}

#[test]
fn acceptance() {
    par::init_threads(1);
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("invariance suite", invariances),
        ("memorization", memorization),
        ("decoder equivalences", decoder_equivalence),
        ("metric oracles", metric_oracles),
        ("format round trips", format_round_trips),
        ("determinism", determinism),
        ("full-size shapes", full_size),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let took = Duration::from_secs_f64(start.elapsed().as_secs_f64());
        match outcome {
            Ok(d) => println!("criterion {}: PASS  {name}: {d} [{took:.1?}]", i + 1),
            Err(d) => {
                println!("criterion {}: FAIL  {name}: {d} [{took:.1?}]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
