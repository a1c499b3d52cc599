//! Acceptance suite. One line per criterion:
//!
//! `cargo test --release --test acceptance` runs everything;
//! `... -- 4 7` runs only criteria 4 and 7. Failures are reported but only
//! turn into a non-zero exit with `LAVENDER_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lavender::metrics::{best_constant_caption, meta_average};
use lavender::model::{AttentionMode, BaselineHeads, Checkpoint, Model, ModelConfig, ParamCounts};
use lavender::synthgen::{generate_corpus, Corpus, GenConfig, MC_CHOICES};
use lavender::tasks::{
    argmax_first, build_mlm, decode_caption, infer_mc, mask_logits, masked_loss, p_true, rank_retrieval, score_vtm,
    vtm_example, zero_shot_mc, ClipRef, MaskedExample, MaskingConfig, TaskTag, MAX_CHOICES,
};
use lavender::tensor::IGNORE;
use lavender::text::{TokenSeq, VocabConfig, Vocabulary, CLS, MASK, SEP};
use lavender::trainer::{
    contamination_filter, evaluate, evaluate_zero_shot, finetune, multitask, pretrain, ClipStore, EvalConfig, Route,
    Sample, SampleKind, TaskDataset, TrainConfig,
};
use lavender::vision::{PatchGrid, VideoClip};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_clip(id: &str, h: usize, w: usize, frames: usize, rng: &mut ChaCha8Rng) -> VideoClip {
    let px = (0..frames * h * w * 3).map(|_| rng.gen::<f32>()).collect();
    VideoClip::new(id, h, w, frames, px).unwrap()
}

fn grid_of(clip: &VideoClip, cfg: &ModelConfig, frames: &[usize]) -> PatchGrid {
    lavender::vision::patchify(clip, frames, cfg.patch_height, cfg.patch_width).unwrap()
}

fn small_corpus(n: usize, seed: u64) -> (Corpus, Vocabulary, ClipStore) {
    let corpus = generate_corpus(&GenConfig {
        n_clips: n,
        seed,
        ..GenConfig::default()
    })
    .unwrap();
    let vocab = corpus.build_vocab(&VocabConfig::default()).unwrap();
    let clips = ClipStore::from_corpus(&corpus).unwrap();
    (corpus, vocab, clips)
}

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        width: 16,
        layers: 2,
        heads: 2,
        vision_feature_dim: 16,
        vocab_size: vocab,
        max_text_len: 64,
        ..ModelConfig::default()
    }
}

fn causal_example(input: Vec<u32>) -> MaskedExample {
    let n = input.len();
    MaskedExample {
        clip: ClipRef::default(),
        labels: vec![IGNORE; n],
        mask_positions: vec![n - 1],
        input,
        mode: AttentionMode::Seq2seqCausal,
        task: TaskTag::Caption,
        decoration: None,
    }
}

// 1 ─ full-model gradient check

fn crit1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ModelConfig {
        frames: 4,
        ..tiny_config(40)
    };
    let mut model = Model::new(cfg.clone(), 5).unwrap();
    // non-trivial values everywhere, including gains and biases
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * rng.gen_range(-1.0..1.0);
        }
    }
    let clip = random_clip("g", 32, 32, 4, &mut rng);
    let grid = grid_of(&clip, &cfg, &[0, 1, 2, 3]);
    let words: Vec<u32> = (0..6).map(|_| rng.gen_range(17..40)).collect();
    let mut input = vec![CLS];
    input.extend(&words);
    input.push(SEP);
    let mut labels = vec![IGNORE; 8];
    labels[2] = words[1] as i64;
    labels[5] = words[4] as i64;
    input[2] = MASK;
    let ex = MaskedExample {
        clip: ClipRef::default(),
        input,
        mask_positions: vec![2, 5],
        labels,
        mode: AttentionMode::Bidirectional,
        task: TaskTag::Mlm,
        decoration: None,
    };
    let loss_of = |m: &Model| -> f64 {
        let mut s = m.session();
        let v = s.video_features(&grid).unwrap();
        let l = masked_loss(&mut s, v, &ex).unwrap().unwrap();
        s.tape.value(l).item()
    };
    let mut s = model.session();
    let v = s.video_features(&grid).unwrap();
    let l = masked_loss(&mut s, v, &ex).unwrap().unwrap();
    let grads = s.backward(l).unwrap();
    drop(s);
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    let (eps, floor) = (1e-5, 1e-6);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for id in ids {
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.params().get(id).value.len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params().get(id).value.data()[i];
            model.params_mut().get_mut(id).value.data_mut()[i] = orig + eps;
            let up = loss_of(&model);
            model.params_mut().get_mut(id).value.data_mut()[i] = orig - eps;
            let down = loss_of(&model);
            model.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let n = (up - down) / (2.0 * eps);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            checked += 1;
            if err > worst.0 || err.is_nan() {
                worst = (err, format!("{}[{i}] analytic {a:.3e} numeric {n:.3e}", model.params().get(id).name));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst.0 < 1e-3 && secs < 60.0,
        format!("{checked} coordinates, max rel err {:.2e} at {}, {secs:.1}s", worst.0, worst.1),
    )
}

// 2 ─ masking statistics

fn crit2() -> Outcome {
    let (_, vocab, _) = small_corpus(20, 1);
    let words = vocab.word_ids();
    let cfg = MaskingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut eligible, mut selected, mut masked, mut random, mut kept) = (0usize, 0usize, 0usize, 0usize, 0usize);
    while eligible < 200_000 {
        let seq: Vec<u32> = (0..38).map(|_| words[rng.gen_range(0..words.len())]).collect();
        let ts = TokenSeq::from_words(&seq);
        let ex = build_mlm(ClipRef::default(), &ts, &cfg, &vocab, &mut rng).unwrap();
        eligible += seq.len();
        for &p in &ex.mask_positions {
            selected += 1;
            let orig = ex.labels[p] as u32;
            match ex.input[p] {
                MASK => masked += 1,
                t if t == orig => kept += 1,
                _ => random += 1,
            }
        }
    }
    let rate = selected as f64 / eligible as f64;
    let f = |n: usize| n as f64 / selected as f64;
    let (m, r, k) = (f(masked), f(random), f(kept));
    check(
        (rate - 0.15).abs() <= 0.005 && (m - 0.8).abs() <= 0.01 && (r - 0.1).abs() <= 0.01 && (k - 0.1).abs() <= 0.01,
        format!("{eligible} eligible, rate {rate:.4}, mask/random/keep {m:.4}/{r:.4}/{k:.4}"),
    )
}

// 3 ─ causality of caption attention

fn crit3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for case in 0..100 {
        let cfg = tiny_config(40);
        let model = Model::new(cfg.clone(), case).unwrap();
        let clip = random_clip("c", 32, 32, 4, &mut rng);
        let grid = grid_of(&clip, &cfg, &[0, 1, 2, 3]);
        let n = rng.gen_range(3..20);
        let mut text: Vec<u32> = vec![CLS];
        text.extend((1..n).map(|_| rng.gen_range(17..40)));
        let i = rng.gen_range(0..n);
        let logits_at = |t: &[u32]| -> Vec<f64> {
            let mut s = model.session();
            let enc = s.encode(&grid, t, t.len(), AttentionMode::Seq2seqCausal).unwrap();
            let h = s.rows(enc.hidden, &[enc.text_row(i)]).unwrap();
            let l = s.mlm_logits(h).unwrap();
            s.tape.value(l).data().to_vec()
        };
        let before = logits_at(&text);
        let mut other = text.clone();
        for t in other.iter_mut().skip(i + 1) {
            *t = rng.gen_range(5..40);
        }
        let after = logits_at(&other);
        if before.iter().zip(&after).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures += 1;
        }
    }
    check(failures == 0, format!("{failures} of 100 triples changed"))
}

// 4 ─ greedy decoding equals repeated single-mask prediction

fn crit4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut lengths = Vec::new();
    for case in 0..50 {
        let cfg = tiny_config(40);
        let mut model = Model::new(cfg.clone(), 100 + case).unwrap();
        // a random output bias makes sequences of varied length
        let b = model.params().by_name("mlm_head.out.b").unwrap();
        for v in model.params_mut().get_mut(b).value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let clip = random_clip("d", 32, 32, 4, &mut rng);
        let grid = grid_of(&clip, &cfg, &[0, 1, 2, 3]);
        let out = decode_caption(&model, &grid, &[CLS], 50).unwrap();
        let mut oracle = Vec::new();
        loop {
            let mut input = vec![CLS];
            input.extend(&oracle);
            input.push(MASK);
            let logits = &mask_logits(&model, &grid, &causal_example(input)).unwrap()[0];
            let next = argmax_first(logits) as u32;
            if next == SEP || oracle.len() == 50 {
                break;
            }
            oracle.push(next);
        }
        if out != oracle {
            mismatches += 1;
        }
        lengths.push(out.len());
    }
    // stop rules: a head that always prefers [SEP], and one that never does
    let cfg = tiny_config(40);
    let mut model = Model::new(cfg.clone(), 9).unwrap();
    let b = model.params().by_name("mlm_head.out.b").unwrap();
    let clip = random_clip("s", 32, 32, 4, &mut rng);
    let grid = grid_of(&clip, &cfg, &[0, 1, 2, 3]);
    model.params_mut().get_mut(b).value.data_mut()[SEP as usize] = 1e3;
    let at_sep = decode_caption(&model, &grid, &[CLS], 50).unwrap();
    model.params_mut().get_mut(b).value.data_mut()[SEP as usize] = -1e3;
    model.params_mut().get_mut(b).value.data_mut()[20] = 1e3;
    let at_cap = decode_caption(&model, &grid, &[CLS], 50).unwrap();
    let (lo, hi) = (lengths.iter().min().unwrap(), lengths.iter().max().unwrap());
    check(
        mismatches == 0 && at_sep.is_empty() && at_cap.len() == 50 && at_cap.iter().all(|&t| t == 20),
        format!(
            "{mismatches} of 50 mismatched (lengths {lo}..={hi}); forced stop gives {} tokens, forced run gives {}",
            at_sep.len(),
            at_cap.len()
        ),
    )
}

// 5 ─ rankings equal brute-force sorts of independent scores

fn crit5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for case in 0..100 {
        let cfg = ModelConfig {
            patch_height: 16,
            patch_width: 16,
            frames: 2,
            ..tiny_config(40)
        };
        let model = Model::new(cfg.clone(), 200 + case).unwrap();
        if case % 2 == 0 {
            let n = rng.gen_range(2..7);
            let clips: Vec<VideoClip> = (0..n).map(|k| random_clip(&format!("c{k}"), 32, 32, 2, &mut rng)).collect();
            let grids: Vec<PatchGrid> = clips.iter().map(|c| grid_of(c, &cfg, &[0, 1])).collect();
            let words: Vec<u32> = (0..rng.gen_range(2..8)).map(|_| rng.gen_range(17..40)).collect();
            let q = vtm_example(ClipRef::default(), &words, true, TaskTag::Retrieval);
            let cands: Vec<(&str, &PatchGrid)> = clips.iter().map(|c| c.id()).zip(grids.iter()).collect();
            let ranked = rank_retrieval(&model, &q, &cands).unwrap();
            let mut brute: Vec<(f64, String)> =
                cands.iter().map(|(id, g)| (score_vtm(&model, g, &words).unwrap(), id.to_string())).collect();
            brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let got: Vec<(f64, String)> = ranked.into_iter().map(|r| (r.score, r.id)).collect();
            if got != brute {
                bad += 1;
            }
        } else {
            let clip = random_clip("m", 32, 32, 2, &mut rng);
            let grid = grid_of(&clip, &cfg, &[0, 1]);
            let question: Vec<u32> = (0..4).map(|_| rng.gen_range(17..40)).collect();
            let answers: Vec<Vec<u32>> = (0..rng.gen_range(2..6)).map(|_| vec![rng.gen_range(17..40)]).collect();
            let (best, scores) = zero_shot_mc(&model, &grid, &question, &answers).unwrap();
            let brute: Vec<f64> = answers
                .iter()
                .map(|a| {
                    let mut w = question.clone();
                    w.push(SEP);
                    w.extend(a);
                    p_true(&model, &grid, &vtm_example(ClipRef::default(), &w, true, TaskTag::Vtm)).unwrap()
                })
                .collect();
            let mut arg = 0;
            for (i, s) in brute.iter().enumerate() {
                if *s > brute[arg] {
                    arg = i;
                }
            }
            if scores != brute || best != arg {
                bad += 1;
            }
        }
    }
    check(bad == 0, format!("{bad} of 100 cases differ"))
}

// 6 ─ restricted argmax over answer digits

fn crit6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = 60;
    let digit = |i: usize| Vocabulary::digit(i) as usize;
    let mut bad = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=MAX_CHOICES);
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let idx = infer_mc(&logits, k);
        let mut perturbed = logits.clone();
        for (t, x) in perturbed.iter_mut().enumerate() {
            if !(0..k).any(|i| digit(i) == t) {
                *x += rng.gen_range(-100.0..100.0);
            }
        }
        if idx >= k || infer_mc(&perturbed, k) != idx {
            bad += 1;
        }
    }
    check(bad == 0, format!("{bad} of 1000 vectors violate the contract"))
}

// desk pipeline shared by 7, 9 and 10

#[derive(Clone, Debug)]
struct Desk {
    clips: usize,
    width: usize,
    layers: usize,
    heads: usize,
    patch: usize,
    lr: f64,
    batch: usize,
    pre_epochs: usize,
    ft_epochs: BTreeMap<TaskTag, usize>,
}

impl Desk {
    fn reference() -> Self {
        Self {
            clips: 500,
            width: 32,
            layers: 2,
            heads: 4,
            patch: 8,
            lr: 2e-3,
            batch: 8,
            pre_epochs: 10,
            ft_epochs: [
                (TaskTag::OeQa, 10),
                (TaskTag::McQa, 12),
                (TaskTag::Fib, 12),
                (TaskTag::Retrieval, 8),
                (TaskTag::Caption, 8),
            ]
            .into_iter()
            .collect(),
        }
    }

    fn model(&self, vocab: &Vocabulary, seed: u64) -> Model {
        Model::new(
            ModelConfig {
                width: self.width,
                layers: self.layers,
                heads: self.heads,
                vision_feature_dim: self.width,
                vocab_size: vocab.len(),
                patch_height: self.patch,
                patch_width: self.patch,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn train(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs,
            batch_size: self.batch,
            seed,
            ..TrainConfig::default()
        }
    }
}

struct World {
    corpus: Corpus,
    vocab: Vocabulary,
    clips: ClipStore,
}

impl World {
    fn new(n: usize, seed: u64) -> Self {
        let (corpus, vocab, clips) = small_corpus(n, seed);
        Self { corpus, vocab, clips }
    }

    fn dataset(&self, task: TaskTag) -> TaskDataset {
        TaskDataset::from_corpus(&self.corpus, &self.vocab, task)
    }
}

fn pretrained(desk: &Desk, w: &World, seed: u64) -> Model {
    let pairs = w.dataset(TaskTag::Mlm);
    let cfg = desk.train(desk.pre_epochs, seed);
    pretrain(desk.model(&w.vocab, seed), &pairs.train, &w.clips, &w.vocab, &cfg, &Route::Unified)
        .unwrap()
        .model
}

/// Test metric per task after finetuning `start` on each task separately.
fn finetune_all(desk: &Desk, w: &World, start: &Model, seed: u64) -> BTreeMap<TaskTag, f64> {
    let mut out = BTreeMap::new();
    for (&task, &epochs) in &desk.ft_epochs {
        let ds = w.dataset(task);
        let cfg = desk.train(epochs, seed);
        let ft = finetune(start.clone(), &ds, &w.clips, &w.vocab, &cfg, &Route::Unified).unwrap();
        let (_, e) = evaluate(&ft.best, &Route::Unified, &ds.name, task, &ds.test, &w.clips, &w.vocab, cfg.decoration, &cfg.eval).unwrap();
        let v = if task == TaskTag::Retrieval { e.details["r1"] } else { e.value };
        out.insert(task, v);
    }
    out
}

fn crit7() -> Outcome {
    let t0 = Instant::now();
    let desk = Desk::reference();
    let w = World::new(desk.clips, 0);
    let model = pretrained(&desk, &w, 0);
    let m = finetune_all(&desk, &w, &model, 0);
    let caption = w.dataset(TaskTag::Caption);
    let pool: Vec<&str> = caption
        .train
        .iter()
        .filter_map(|s| match &s.kind {
            SampleKind::Pair { caption, .. } => Some(caption.as_str()),
            _ => None,
        })
        .collect();
    let refs: Vec<Vec<String>> = caption.test.iter().map(|s| vec![s.gold()]).collect();
    let refs: Vec<Vec<&str>> = refs.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
    let (_, constant) = best_constant_caption(&pool, &refs).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (oe, mc, r1, cap) = (m[&TaskTag::OeQa], m[&TaskTag::McQa], m[&TaskTag::Retrieval], m[&TaskTag::Caption]);
    check(
        oe >= 90.0 && mc >= 90.0 && r1 >= 20.0 && cap > constant && secs <= 900.0,
        format!(
            "oe {oe:.1}% (>=90), mc {mc:.1}% (>=90), fib {:.1}%, R@1 {r1:.1}% (>=20), CIDEr {cap:.1} vs constant {constant:.1}, {secs:.0}s (<=900)",
            m[&TaskTag::Fib]
        ),
    )
}

// 8 ─ parameter accounting

fn expected_counts(c: &ModelConfig, oe_answers: Option<usize>) -> ParamCounts {
    let d = c.width;
    let f = c.ffn_mult * d;
    let v = c.vocab_size;
    let layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
    let backbone = v * d + c.max_text_len * d + 2 * d // text embeddings and their norm
        + c.patch_len() * d + d + 2 * d // patch projection and its norm
        + c.grid_cells() * d + c.max_frames * d
        + c.layers * layer;
    let mlm_head = (d * d + d) + 2 * d + d * v + v;
    let mlp = |out: usize| d * d + d + d * out + out;
    let baseline = match oe_answers {
        Some(n) => vec![
            (lavender::model::BaselineKind::VtmBinary, mlp(1)),
            (lavender::model::BaselineKind::McClassifier, mlp(MC_CHOICES)),
            (lavender::model::BaselineKind::OeClassifier, mlp(n)),
        ],
        None => Vec::new(),
    };
    ParamCounts {
        backbone,
        mlm_head,
        baseline,
    }
}

fn crit8() -> Outcome {
    let w = World::new(40, 8);
    let tasks = [TaskTag::Retrieval, TaskTag::McQa, TaskTag::OeQa, TaskTag::Fib, TaskTag::Caption];
    let datasets: Vec<TaskDataset> = tasks.iter().map(|&t| w.dataset(t)).collect();
    let cfg = ModelConfig {
        patch_height: 16,
        patch_width: 16,
        frames: 2,
        ..tiny_config(w.vocab.len())
    };
    let tc = TrainConfig {
        lr: 1e-3,
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let small_eval = EvalConfig {
        max_items: Some(4),
        decode_steps: 5,
        ..EvalConfig::default()
    };

    let unified = multitask(Model::new(cfg.clone(), 1).unwrap(), &datasets, &w.clips, &w.vocab, &tc, &Route::Unified).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mt.ckpt");
    Checkpoint::new(unified.model.clone(), 0).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model;
    let got = loaded.param_count();
    let want = expected_counts(&cfg, None);
    let file_params: usize = loaded.params().iter().map(|(_, p)| p.value.len()).sum();
    let mut evaluated = 0;
    for ds in &datasets {
        if evaluate(&loaded, &Route::Unified, &ds.name, ds.task, &ds.test, &w.clips, &w.vocab, tc.decoration, &small_eval).is_ok() {
            evaluated += 1;
        }
    }

    let mut answers: Vec<String> = datasets.iter().filter(|d| matches!(d.task, TaskTag::OeQa | TaskTag::Fib)).flat_map(|d| d.answer_vocab()).collect();
    answers.sort();
    answers.dedup();
    let bcfg = ModelConfig {
        baseline_heads: Some(BaselineHeads {
            mc_choices: MC_CHOICES,
            oe_answers: answers.len(),
        }),
        ..cfg.clone()
    };
    let route = Route::Baseline { answers: answers.clone() };
    let base = multitask(Model::new(bcfg, 1).unwrap(), &datasets, &w.clips, &w.vocab, &tc, &route).unwrap();
    let bgot = base.model.param_count();
    let bwant = expected_counts(&cfg, Some(answers.len()));
    let p = want.backbone;
    let h = want.mlm_head;
    check(
        got == want
            && got.total() == p + h
            && file_params == p + h
            && got.head_count() == 1
            && evaluated == tasks.len()
            && bgot == bwant
            && bgot.head_count() == 4
            && bgot.backbone == p,
        format!(
            "unified {} = P {p} + H {h} ({evaluated}/{} tasks from one file); baseline {} = P + {} heads {:?}",
            got.total(),
            tasks.len(),
            bgot.total(),
            bgot.head_count(),
            std::iter::once(bgot.mlm_head).chain(bgot.baseline.iter().map(|x| x.1)).collect::<Vec<_>>()
        ),
    )
}

// 9 and 10 ─ pretraining benefit and zero-shot behaviour over five seeds

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Smaller than the reference run so five seeds, each with and without
/// pretraining, fit in one test pass.
fn seeds_desk() -> Desk {
    Desk {
        clips: 200,
        pre_epochs: 5,
        ft_epochs: Desk::reference().ft_epochs.into_keys().map(|t| (t, 3)).collect(),
        ..Desk::reference()
    }
}

fn crit9_10(which: &[u32]) -> Vec<(u32, Outcome)> {
    let desk = seeds_desk();
    let w = World::new(desk.clips, 0);
    let mc = w.dataset(TaskTag::McQa);
    let oe = w.dataset(TaskTag::OeQa);
    let mut wins = 0;
    let mut rows = Vec::new();
    let mut zs = Vec::new();
    let mut untrained = Vec::new();
    let ecfg = EvalConfig::default();
    let answers = oe.answer_vocab();
    for &seed in &SEEDS {
        let pre = pretrained(&desk, &w, seed);
        let (_, z) = evaluate_zero_shot(&pre, &Route::Unified, "zs", TaskTag::McQa, &mc.test, &w.clips, &w.vocab, &ecfg).unwrap();
        zs.push(z.value);
        let heads = BaselineHeads {
            mc_choices: MC_CHOICES,
            oe_answers: answers.len(),
        };
        let base = pre.with_baseline_heads(heads, seed).unwrap();
        let route = Route::Baseline { answers: answers.clone() };
        let (_, u) = evaluate_zero_shot(&base, &route, "zs", TaskTag::OeQa, &oe.test, &w.clips, &w.vocab, &ecfg).unwrap();
        untrained.push(u.value);
        if which.contains(&9) {
            let with = meta_average(&finetune_all(&desk, &w, &pre, seed).values().copied().collect::<Vec<_>>()).unwrap();
            let scratch = desk.model(&w.vocab, seed);
            let without = meta_average(&finetune_all(&desk, &w, &scratch, seed).values().copied().collect::<Vec<_>>()).unwrap();
            if with > without {
                wins += 1;
            }
            rows.push(format!("{with:.1}/{without:.1}"));
        }
    }
    let mut out = Vec::new();
    if which.contains(&9) {
        out.push((9, check(wins >= 4, format!("pretrained beats scratch in {wins}/5 seeds (meta-ave {})", rows.join(" ")))));
    }
    if which.contains(&10) {
        let chance = 100.0 / MC_CHOICES as f64;
        // the most frequent test answer bounds what a constant guess can score
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for s in &oe.test {
            *freq.entry(s.gold()).or_default() += 1;
        }
        let oe_chance = 100.0 * *freq.values().max().unwrap() as f64 / oe.test.len() as f64;
        let mean = zs.iter().sum::<f64>() / zs.len() as f64;
        out.push((
            10,
            check(
                mean >= 1.5 * chance && untrained.iter().all(|&u| u <= oe_chance),
                format!(
                    "zero-shot mc mean {mean:.1}% (>= {:.0}%) per seed {zs:?}; untrained baseline oe {untrained:?} (chance <= {oe_chance:.1}%)",
                    1.5 * chance
                ),
            ),
        ));
    }
    out
}

// 11 ─ contamination filter

fn crit11() -> Outcome {
    let w = World::new(60, 11);
    let ds = w.dataset(TaskTag::OeQa);
    let held: Vec<&[Sample]> = vec![&ds.val, &ds.test];
    let clean = ds.train.clone();
    let (kept, report) = contamination_filter(clean.clone(), &held);
    let untouched = kept == clean && report.removed.is_empty();
    // plant copies of held-out samples under fresh ids
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut planted = clean.clone();
    let mut expected = Vec::new();
    for k in 0..15 {
        let src = if k % 2 == 0 { &ds.val } else { &ds.test };
        let mut s = src[rng.gen_range(0..src.len())].clone();
        s.id = format!("planted{k}");
        expected.push((s.id.clone(), s.clip.clone()));
        let at = rng.gen_range(0..=planted.len());
        planted.insert(at, s);
    }
    let (kept, report) = contamination_filter(planted, &held);
    let mut removed = report.removed.clone();
    removed.sort();
    expected.sort();
    let exact = kept == clean && removed == expected;
    let (again, report2) = contamination_filter(kept.clone(), &held);
    let idempotent = again == kept && report2.removed.is_empty();
    check(
        untouched && exact && idempotent,
        format!("clean split untouched: {untouched}; {} of 15 planted removed exactly: {exact}; idempotent: {idempotent}", removed.len()),
    )
}

// 12 ─ byte-identical reruns of every command

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lavender"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn run_all(root: &Path) -> Result<(), String> {
    let s = |p: &str| root.join(p).to_string_lossy().into_owned();
    std::fs::write(
        root.join("small.toml"),
        "[model]\nwidth = 16\nlayers = 1\nheads = 2\nvision_feature_dim = 16\npatch_height = 16\npatch_width = 16\nframes = 2\n\n[train]\nepochs = 1\nbatch_size = 4\n",
    )
    .map_err(|e| e.to_string())?;
    let (cfg, corpus) = (s("small.toml"), s("corpus"));
    run_cli(&["gen", "--n", "24", "--seed", "5", "--out", &corpus])?;
    let common = |cmd: &'static str, out: String| vec![cmd.to_string(), "--config".into(), cfg.clone(), "--corpus".into(), corpus.clone(), "--out".into(), out];
    let pre = common("pretrain", s("pre"));
    run_cli(&pre.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut ft = common("finetune", s("ft"));
    ft.extend(["--task", "oe_qa", "--init"].map(String::from));
    ft.push(s("pre/model.ckpt"));
    run_cli(&ft.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut mt = common("multitask", s("mt"));
    mt.extend(["--tasks", "mc_qa,fib,caption", "--variant", "prompt"].map(String::from));
    run_cli(&mt.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut bl = common("finetune", s("bl"));
    bl.extend(["--task", "mc_qa", "--baseline"].map(String::from));
    run_cli(&bl.iter().map(String::as_str).collect::<Vec<_>>())?;
    run_cli(&["eval", "--checkpoint", &s("ft/model.ckpt"), "--corpus", &corpus, "--task", "oe_qa", "--out", &s("ev")])?;
    run_cli(&["zeroshot", "--checkpoint", &s("pre/model.ckpt"), "--corpus", &corpus, "--task", "mc_qa", "--out", &s("zs")])?;
    run_cli(&["report", &s("ft"), &s("mt"), &s("ev"), "--out", &s("report.json")])?;
    Ok(())
}

fn crit12() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path())?;
    run_all(b.path())?;
    let files = [
        "corpus/manifest.jsonl",
        "corpus/vocab.txt",
        "pre/model.ckpt",
        "pre/history.jsonl",
        "ft/model.ckpt",
        "ft/metrics.json",
        "ft/predictions.jsonl",
        "mt/model.ckpt",
        "mt/metrics.json",
        "bl/model.ckpt",
        "bl/metrics.json",
        "ev/metrics.json",
        "ev/predictions.jsonl",
        "zs/metrics.json",
        "report.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok() || !a.path().join(f).is_file())
        .collect();
    check(differing.is_empty(), format!("{} artifacts compared, differing or missing: {differing:?}", files.len()))
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let singles: [(u32, fn() -> Outcome); 9] = [
        (1, crit1),
        (2, crit2),
        (3, crit3),
        (4, crit4),
        (5, crit5),
        (6, crit6),
        (8, crit8),
        (11, crit11),
        (12, crit12),
    ];
    for (n, f) in singles {
        if n == 8 && want(7) {
            let t = Instant::now();
            let r = crit7();
            report(7, &r, t);
            results.push((7, r));
        }
        if want(n) {
            let t = Instant::now();
            let r = f();
            report(n, &r, t);
            results.push((n, r));
        }
        if n == 8 {
            let which: Vec<u32> = [9, 10].into_iter().filter(|&k| want(k)).collect();
            if !which.is_empty() {
                let t = Instant::now();
                for (k, r) in crit9_10(&which) {
                    report(k, &r, t);
                    results.push((k, r));
                }
            }
        }
    }
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} criteria run, {failed} failed", results.len());
    if failed > 0 && std::env::var("LAVENDER_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn report(n: u32, r: &Outcome, t: Instant) {
    let secs = t.elapsed().as_secs_f64();
    match r {
        Ok(d) => println!("criterion {n:>2}: PASS  {d}  [{secs:.1}s]"),
        Err(d) => println!("criterion {n:>2}: FAIL  {d}  [{secs:.1}s]"),
    }
}
