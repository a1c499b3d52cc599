//! Full desk-scale pipeline: generate, pretrain, finetune every task, report.
//!
//! `cargo run --release --example desk -- key=value ...` with keys
//! `seed`, `clips`, `width`, `layers`, `lr`, `pre_epochs`, `ft_epochs`,
//! `batch`, `patch`, `frames`, `heads`, `tasks` (comma separated) and `scratch` (skip pretraining).

use std::collections::HashMap;
use std::time::Instant;

use lavender::metrics::best_constant_caption;
use lavender::model::{Model, ModelConfig};
use lavender::synthgen::{generate_corpus, GenConfig};
use lavender::tasks::TaskTag;
use lavender::text::VocabConfig;
use lavender::trainer::{evaluate, evaluate_zero_shot, finetune, pretrain, ClipStore, Route, TaskDataset, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: &str| args.get(k).cloned().unwrap_or_else(|| d.to_string());
    let seed: u64 = get("seed", "0").parse()?;
    let t0 = Instant::now();
    let corpus = generate_corpus(&GenConfig {
        n_clips: get("clips", "500").parse()?,
        seed,
        ..GenConfig::default()
    })?;
    let vocab = corpus.build_vocab(&VocabConfig::default())?;
    let clips = ClipStore::from_corpus(&corpus)?;
    println!("corpus: {} clips, vocab {}, {:.1}s", corpus.entries.len(), vocab.len(), t0.elapsed().as_secs_f64());

    let mcfg = ModelConfig {
        width: get("width", "32").parse()?,
        layers: get("layers", "2").parse()?,
        vocab_size: vocab.len(),
        vision_feature_dim: get("width", "32").parse()?,
        patch_height: get("patch", "8").parse()?,
        patch_width: get("patch", "8").parse()?,
        frames: get("frames", "4").parse()?,
        heads: get("heads", "4").parse()?,
        ..ModelConfig::default()
    };
    let lr: f64 = get("lr", "1e-3").parse()?;
    let batch: usize = get("batch", "16").parse()?;
    let mut model = Model::new(mcfg, seed)?;
    if get("scratch", "0") == "0" {
        let t = Instant::now();
        let pairs = TaskDataset::from_corpus(&corpus, &vocab, TaskTag::Mlm);
        let cfg = TrainConfig {
            lr,
            epochs: get("pre_epochs", "5").parse()?,
            batch_size: batch,
            seed,
            ..TrainConfig::default()
        };
        let out = pretrain(model, &pairs.train, &clips, &vocab, &cfg, &Route::Unified)?;
        for r in out.history.iter().filter(|r| r.task.ends_with("/epoch")) {
            println!("  pretrain epoch {} loss {:.4}", r.epoch, r.loss);
        }
        println!("pretrain {:.1}s", t.elapsed().as_secs_f64());
        model = out.model;
        let mc = TaskDataset::from_corpus(&corpus, &vocab, TaskTag::McQa);
        let (_, e) = evaluate_zero_shot(&model, &Route::Unified, "zs", TaskTag::McQa, &mc.test, &clips, &vocab, &cfg.eval)?;
        println!("zero-shot mc {:.1}", e.value);
    }
    let tasks = get("tasks", "oe_qa,mc_qa,fib,retrieval,caption");
    let ft_epochs: usize = get("ft_epochs", "10").parse()?;
    for name in tasks.split(',') {
        let task = TaskTag::parse(name).ok_or("unknown task")?;
        let t = Instant::now();
        let ds = TaskDataset::from_corpus(&corpus, &vocab, task);
        let cfg = TrainConfig {
            lr,
            epochs: ft_epochs,
            batch_size: batch,
            seed,
            ..TrainConfig::default()
        };
        let out = finetune(model.clone(), &ds, &clips, &vocab, &cfg, &Route::Unified)?;
        let (_, e) = evaluate(&out.best, &Route::Unified, &ds.name, task, &ds.test, &clips, &vocab, cfg.decoration, &cfg.eval)?;
        let curve: Vec<String> = out
            .history
            .iter()
            .filter(|r| r.task.ends_with("/epoch"))
            .map(|r| format!("{:.2}/{:.0}", r.loss, r.eval.values().next().copied().unwrap_or(f64::NAN)))
            .collect();
        println!("{name}: test {:.2} {:?} (best epoch {}) {:.1}s", e.value, e.details, out.best_epoch, t.elapsed().as_secs_f64());
        println!("  {}", curve.join(" "));
        if task == TaskTag::Caption {
            let pool: Vec<&str> = ds.train.iter().map(|s| match &s.kind {
                lavender::trainer::SampleKind::Pair { caption, .. } => caption.as_str(),
                _ => "",
            }).collect();
            let refs: Vec<Vec<String>> = ds.test.iter().map(|s| vec![s.gold()]).collect();
            let refs: Vec<Vec<&str>> = refs.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
            let (c, v) = best_constant_caption(&pool, &refs)?;
            println!("  best constant caption {v:.2}: {c}");
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
