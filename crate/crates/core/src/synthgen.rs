//! Procedural corpus of moving shapes with templated annotations.
//!
//! Each clip shows one to three flat-colored shapes on a gray background,
//! each either still or moving in a straight line. Captions, questions and
//! answers are pure functions of the scene, so every annotation can be
//! recovered from the pixels.
//!
//! Rasterisation: pixel `(x, y)` is sampled at its centre `(x + 0.5, y + 0.5)`.
//! For an object centred at `(cx, cy)` with half-size `h`:
//!
//! * square: `|px - cx| <= h` and `|py - cy| <= h`
//! * circle: `(px - cx)² + (py - cy)² <= h²`
//! * triangle (apex up): `cy - h <= py <= cy + h` and
//!   `|px - cx| <= (py - cy + h) / 2`
//!
//! Centres live on a quarter-pixel grid and speeds are multiples of a quarter
//! pixel per frame, so after any whole-pixel displacement the raster is an
//! exact translate of the first frame.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::{TaskTag, BLANK};
use crate::text::{TextError, VocabConfig, Vocabulary};
use crate::vision::{VideoClip, VisionError, STORED_FRAMES};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("could not find {wanted} distinct scenes after {tries} attempts")]
    Exhausted { wanted: usize, tries: usize },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Self::Circle, Self::Square, Self::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Self::Red, Self::Green, Self::Blue, Self::Yellow, Self::White];
    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::White => "white",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [1.0, 0.0, 0.0],
            Self::Green => [0.0, 1.0, 0.0],
            Self::Blue => [0.0, 0.0, 1.0],
            Self::Yellow => [1.0, 1.0, 0.0],
            Self::White => [1.0, 1.0, 1.0],
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 5] = [Self::Left, Self::Right, Self::Up, Self::Down, Self::Still];
    /// Answer word of a direction question.
    pub fn word(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Right => "right",
            Self::Up => "up",
            Self::Down => "down",
            Self::Still => "still",
        }
    }
    /// Unit displacement per frame in image coordinates (y grows downward).
    pub fn direction(self) -> (f64, f64) {
        match self {
            Self::Left => (-1.0, 0.0),
            Self::Right => (1.0, 0.0),
            Self::Up => (0.0, -1.0),
            Self::Down => (0.0, 1.0),
            Self::Still => (0.0, 0.0),
        }
    }
    fn phrase(self) -> String {
        match self {
            Self::Still => "stays still".into(),
            m => format!("moves {}", m.word()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    /// Pixels per frame; zero when still.
    pub speed: f64,
    /// Centre at frame 0.
    pub x: f64,
    pub y: f64,
    pub half: f64,
}

impl ObjectSpec {
    pub fn center(&self, t: usize) -> (f64, f64) {
        let (dx, dy) = self.motion.direction();
        let d = self.speed * t as f64;
        (self.x + dx * d, self.y + dy * d)
    }

    pub fn covers(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center(t);
        let h = self.half;
        match self.shape {
            Shape::Square => (px - cx).abs() <= h && (py - cy).abs() <= h,
            Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= h * h,
            Shape::Triangle => py >= cy - h && py <= cy + h && (px - cx).abs() <= (py - cy + h) / 2.0,
        }
    }

    /// Bounding box `(x0, y0, x1, y1)` swept over `frames` frames.
    pub fn swept_bbox(&self, frames: usize) -> (f64, f64, f64, f64) {
        let (ax, ay) = self.center(0);
        let (bx, by) = self.center(frames - 1);
        (
            ax.min(bx) - self.half,
            ay.min(by) - self.half,
            ax.max(bx) + self.half,
            ay.max(by) + self.half,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: f32,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 3 {
            return Err(SynthError::Scene(format!("{} objects", self.objects.len())));
        }
        let mut seen = HashSet::new();
        for o in &self.objects {
            if !seen.insert((o.shape, o.color)) {
                return Err(SynthError::Scene("two objects share shape and color".into()));
            }
            let (x0, y0, x1, y1) = o.swept_bbox(STORED_FRAMES);
            if x0 < 0.0 || y0 < 0.0 || x1 > self.width as f64 || y1 > self.height as f64 {
                return Err(SynthError::Scene(format!(
                    "{} {} leaves the frame",
                    o.color.word(),
                    o.shape.word()
                )));
            }
        }
        Ok(())
    }

    /// Objects in caption order (by color).
    pub fn ordered(&self) -> Vec<&ObjectSpec> {
        let mut v: Vec<&ObjectSpec> = self.objects.iter().collect();
        v.sort_by_key(|o| (o.color, o.shape));
        v
    }

    pub fn caption(&self) -> String {
        self.ordered()
            .iter()
            .map(|o| format!("the {} {} {}", o.color.word(), o.shape.word(), o.motion.phrase()))
            .collect::<Vec<_>>()
            .join(" and ")
    }

    fn shape_count(&self, s: Shape) -> usize {
        self.objects.iter().filter(|o| o.shape == s).count()
    }

    fn color_count(&self, c: Color) -> usize {
        self.objects.iter().filter(|o| o.color == c).count()
    }
}

/// Draws the 32 stored frames of a scene.
pub fn render(id: &str, scene: &SceneSpec) -> Result<VideoClip> {
    scene.validate()?;
    let (h, w) = (scene.height, scene.width);
    let mut px = vec![scene.background; STORED_FRAMES * h * w * 3];
    for t in 0..STORED_FRAMES {
        for o in &scene.objects {
            let rgb = o.color.rgb();
            let (x0, y0, x1, y1) = o.swept_bbox(STORED_FRAMES);
            let ys = (y0.floor().max(0.0) as usize)..(y1.ceil() as usize).min(h);
            for y in ys {
                for x in (x0.floor().max(0.0) as usize)..(x1.ceil() as usize).min(w) {
                    if o.covers(t, x as f64 + 0.5, y as f64 + 0.5) {
                        let i = ((t * h + y) * w + x) * 3;
                        px[i..i + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
    }
    Ok(VideoClip::new(id, h, w, STORED_FRAMES, px)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McRecord {
    pub question: String,
    pub answers: Vec<String>,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FibRecord {
    pub sentence: String,
    pub answer: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Self::Train, Self::Val, Self::Test];
}

/// Number of choices in every multiple-choice question.
pub const MC_CHOICES: usize = 5;

/// Open-ended questions, one multiple-choice question and one fill-in-blank
/// sentence for a scene.
pub fn make_qa(scene: &SceneSpec, rng: &mut impl Rng) -> (Vec<QaPair>, McRecord, FibRecord) {
    let objs = scene.ordered();
    let n = objs.len();
    let mut oe = vec![QaPair {
        question: "how many objects are there".into(),
        answer: n.to_string(),
    }];
    let o = objs[rng.gen_range(0..n)];
    // color alone identifies an object only when no other object shares it
    let color_ref = if scene.color_count(o.color) == 1 {
        format!("the {} object", o.color.word())
    } else {
        format!("the {} {}", o.color.word(), o.shape.word())
    };
    if scene.color_count(o.color) == 1 {
        oe.push(QaPair {
            question: format!("what shape is {color_ref}"),
            answer: o.shape.word().into(),
        });
    }
    let o2 = objs[rng.gen_range(0..n)];
    oe.push(QaPair {
        question: format!("which way does the {} {} move", o2.color.word(), o2.shape.word()),
        answer: o2.motion.word().into(),
    });
    let unique_shapes: Vec<&ObjectSpec> = objs.iter().copied().filter(|o| scene.shape_count(o.shape) == 1).collect();
    if let Some(o3) = unique_shapes.choose(rng) {
        oe.push(QaPair {
            question: format!("what color is the {}", o3.shape.word()),
            answer: o3.color.word().into(),
        });
    }

    let gold = rng.gen_range(0..MC_CHOICES);
    let (question, truth, domain): (String, &str, Vec<&str>) = match unique_shapes.choose(rng) {
        Some(o) if rng.gen_bool(0.5) => (
            format!("what is the color of the {}", o.shape.word()),
            o.color.word(),
            Color::ALL.iter().map(|c| c.word()).collect(),
        ),
        _ => {
            let o = objs[rng.gen_range(0..n)];
            (
                format!("which way does the {} {} move", o.color.word(), o.shape.word()),
                o.motion.word(),
                Motion::ALL.iter().map(|m| m.word()).collect(),
            )
        }
    };
    let mut distractors: Vec<&str> = domain.into_iter().filter(|a| *a != truth).collect();
    distractors.shuffle(rng);
    let mut answers: Vec<String> = distractors[..MC_CHOICES - 1].iter().map(|s| s.to_string()).collect();
    answers.insert(gold, truth.to_string());
    let mc = McRecord { question, answers, gold };

    let caption = scene.caption();
    let words: Vec<&str> = caption.split(' ').collect();
    let attribute = |w: &str| {
        Color::ALL.iter().any(|c| c.word() == w)
            || Shape::ALL.iter().any(|s| s.word() == w)
            || Motion::ALL.iter().any(|m| m.word() == w)
    };
    let slots: Vec<usize> = (0..words.len()).filter(|&i| attribute(words[i])).collect();
    let at = slots[rng.gen_range(0..slots.len())];
    let mut blanked = words.clone();
    blanked[at] = BLANK;
    let fib = FibRecord {
        sentence: blanked.join(" "),
        answer: words[at].to_string(),
    };
    (oe, mc, fib)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_clips: usize,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
    pub height: usize,
    pub width: usize,
    pub half_size: f64,
    /// Allowed speeds of moving objects, pixels per frame.
    pub speeds: Vec<f64>,
    pub max_objects: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_clips: 500,
            seed: 0,
            splits: [0.8, 0.1, 0.1],
            height: 32,
            width: 32,
            half_size: 4.0,
            speeds: vec![0.5, 0.75],
            max_objects: 3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.splits.iter().sum();
        if self.splits.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::Config(format!("split fractions {:?} do not sum to 1", self.splits)));
        }
        if self.n_clips == 0 {
            return Err(SynthError::Config("n_clips must be positive".into()));
        }
        if !(1..=3).contains(&self.max_objects) {
            return Err(SynthError::Config("max_objects must be 1, 2 or 3".into()));
        }
        if self.speeds.is_empty() || self.speeds.iter().any(|s| *s <= 0.0 || (s * 4.0).fract() != 0.0) {
            return Err(SynthError::Config("speeds must be positive multiples of 0.25".into()));
        }
        let travel = self.speeds.iter().cloned().fold(0.0, f64::max) * (STORED_FRAMES - 1) as f64;
        let room = self.height.min(self.width) as f64 - 2.0 * self.half_size;
        if self.half_size <= 0.0 || travel > room {
            return Err(SynthError::Config(format!(
                "objects of half-size {} cannot travel {travel} px in a {}×{} frame",
                self.half_size, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Clip counts per split.
    pub fn split_sizes(&self) -> [usize; 3] {
        let train = (self.splits[0] * self.n_clips as f64).round() as usize;
        let val = ((self.splits[1] * self.n_clips as f64).round() as usize).min(self.n_clips - train);
        [train, val, self.n_clips - train - val]
    }
}

fn quarter(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let (a, b) = ((lo * 4.0).ceil() as i64, (hi * 4.0).floor() as i64);
    rng.gen_range(a..=b) as f64 / 4.0
}

fn overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    // one pixel of clearance keeps shapes from touching
    a.0 < b.2 + 1.0 && b.0 < a.2 + 1.0 && a.1 < b.3 + 1.0 && b.1 < a.3 + 1.0
}

/// Draws a random valid scene, or `None` if placement failed.
pub fn sample_scene(cfg: &GenConfig, rng: &mut impl Rng) -> Option<SceneSpec> {
    let count = rng.gen_range(1..=cfg.max_objects);
    let mut objects: Vec<ObjectSpec> = Vec::new();
    let h = cfg.half_size;
    let last = (STORED_FRAMES - 1) as f64;
    let mut colors = Color::ALL.to_vec();
    colors.shuffle(rng);
    for color in colors.into_iter().take(count) {
        let shape = Shape::ALL[rng.gen_range(0..3)];
        let motion = Motion::ALL[rng.gen_range(0..5)];
        let speed = if motion == Motion::Still {
            0.0
        } else {
            cfg.speeds[rng.gen_range(0..cfg.speeds.len())]
        };
        let (dx, dy) = motion.direction();
        let travel = speed * last;
        let range = |d: f64, extent: usize| {
            let lo = h + if d < 0.0 { travel } else { 0.0 };
            let hi = extent as f64 - h - if d > 0.0 { travel } else { 0.0 };
            (lo, hi)
        };
        let (xl, xh) = range(dx, cfg.width);
        let (yl, yh) = range(dy, cfg.height);
        let mut placed = None;
        for _ in 0..20 {
            let o = ObjectSpec {
                shape,
                color,
                motion,
                speed,
                x: quarter(rng, xl, xh),
                y: quarter(rng, yl, yh),
                half: h,
            };
            let bb = o.swept_bbox(STORED_FRAMES);
            if objects.iter().all(|p| !overlap(p.swept_bbox(STORED_FRAMES), bb)) {
                placed = Some(o);
                break;
            }
        }
        objects.push(placed?);
    }
    let background = rng.gen_range(8..=16) as f32 / 40.0;
    Some(SceneSpec {
        height: cfg.height,
        width: cfg.width,
        background,
        objects,
    })
}

/// One annotated clip in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clip_file: String,
    pub split: Split,
    pub caption: String,
    pub oe: Vec<QaPair>,
    pub mc: McRecord,
    pub fib: FibRecord,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: GenConfig,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "corpus.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CLIP_DIR: &str = "clips";

fn derive_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    // splitmix64 over the triple
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt.wrapping_mul(0xD1B5_4A32_D192_ED69);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples `n_clips` scenes with pairwise distinct captions and annotates
/// them. Clip `i` draws from its own seed stream, so annotation of a clip
/// depends only on `(seed, i, attempt)`.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let max_attempts = 200;
    let mut captions = HashSet::new();
    let sizes = cfg.split_sizes();
    let mut entries = Vec::with_capacity(cfg.n_clips);
    let mut tries = 0;
    for i in 0..cfg.n_clips {
        let mut found = None;
        for attempt in 0..max_attempts {
            tries += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64, attempt));
            let Some(scene) = sample_scene(cfg, &mut rng) else { continue };
            let caption = scene.caption();
            if captions.contains(&caption) {
                continue;
            }
            captions.insert(caption.clone());
            found = Some((scene, caption, rng));
            break;
        }
        let Some((scene, caption, mut rng)) = found else {
            return Err(SynthError::Exhausted {
                wanted: cfg.n_clips,
                tries,
            });
        };
        let (oe, mc, fib) = make_qa(&scene, &mut rng);
        let split = if i < sizes[0] {
            Split::Train
        } else if i < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
        let id = format!("clip{i:05}");
        entries.push(ManifestEntry {
            clip_file: format!("{CLIP_DIR}/{id}.vclp"),
            id,
            split,
            caption,
            oe,
            mc,
            fib,
            scene,
        });
    }
    Ok(Corpus {
        config: cfg.clone(),
        entries,
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn render(&self, entry: &ManifestEntry) -> Result<VideoClip> {
        render(&entry.id, &entry.scene)
    }

    /// Every sentence the vocabulary should cover: annotations of all splits
    /// plus the task prompts.
    pub fn texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.push(e.caption.clone());
            for q in &e.oe {
                out.push(q.question.clone());
                out.push(q.answer.clone());
            }
            out.push(e.mc.question.clone());
            out.extend(e.mc.answers.iter().cloned());
            out.push(e.fib.sentence.replace(BLANK, &e.fib.answer));
        }
        out.extend(TaskTag::ALL.iter().filter_map(|t| t.prompt()).map(String::from));
        out
    }

    pub fn build_vocab(&self, cfg: &VocabConfig) -> Result<Vocabulary> {
        let texts = self.texts();
        Ok(Vocabulary::build(texts.iter().map(String::as_str), cfg)?)
    }

    /// Writes `corpus.json`, `manifest.jsonl`, `vocab.txt` and one clip file
    /// per entry under `dir`. Clips render in parallel.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(CLIP_DIR))?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)? + "\n")?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST_FILE))?);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        self.build_vocab(&VocabConfig::default())?.save(&dir.join(VOCAB_FILE))?;
        self.entries.par_iter().try_for_each(|e| -> Result<()> {
            self.render(e)?.save(&dir.join(&e.clip_file))?;
            Ok(())
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: GenConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let f = std::io::BufReader::new(std::fs::File::open(dir.join(MANIFEST_FILE))?);
        let mut entries = Vec::new();
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| SynthError::Manifest(format!("line {}: {err}", n + 1)))?;
            entries.push(e);
        }
        Ok(Self { config, entries })
    }

    pub fn clip_path(dir: &Path, entry: &ManifestEntry) -> PathBuf {
        dir.join(&entry.clip_file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(shape: Shape, color: Color, motion: Motion, speed: f64) -> SceneSpec {
        let (dx, dy) = motion.direction();
        SceneSpec {
            height: 32,
            width: 32,
            background: 0.3,
            objects: vec![ObjectSpec {
                shape,
                color,
                motion,
                speed,
                x: 16.0 - 8.0 * dx,
                y: 16.0 - 8.0 * dy,
                half: 3.0,
            }],
        }
    }

    fn centroid(clip: &VideoClip, t: usize, bg: f32) -> (f64, f64, usize) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0);
        for y in 0..clip.height() {
            for x in 0..clip.width() {
                if clip.pixel(t, y, x) != [bg; 3] {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (sx / n as f64, sy / n as f64, n)
    }

    #[test]
    fn still_object_gives_identical_frames() {
        let clip = render("s", &one(Shape::Circle, Color::Red, Motion::Still, 0.0)).unwrap();
        for t in 1..STORED_FRAMES {
            assert_eq!(clip.frame(t), clip.frame(0));
        }
    }

    #[test]
    fn centroid_moves_at_the_stated_speed() {
        for motion in [Motion::Left, Motion::Right, Motion::Up, Motion::Down] {
            for speed in [0.25, 0.5] {
                for shape in Shape::ALL {
                    let scene = one(shape, Color::Blue, motion, speed);
                    let clip = render("m", &scene).unwrap();
                    let (x0, y0, n0) = centroid(&clip, 0, 0.3);
                    let (dx, dy) = motion.direction();
                    for t in (0..STORED_FRAMES).filter(|t| (speed * *t as f64).fract() == 0.0) {
                        let (x, y, n) = centroid(&clip, t, 0.3);
                        assert_eq!(n, n0);
                        assert!((x - x0 - dx * speed * t as f64).abs() < 1e-9);
                        assert!((y - y0 - dy * speed * t as f64).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn render_is_deterministic_and_rejects_escapes() {
        let s = one(Shape::Triangle, Color::Yellow, Motion::Right, 0.5);
        assert_eq!(render("a", &s).unwrap(), render("a", &s).unwrap());
        let mut far = s.clone();
        far.objects[0].x = 25.0;
        assert!(matches!(render("a", &far), Err(SynthError::Scene(_))));
    }

    #[test]
    fn captions_are_canonical() {
        let mut s = one(Shape::Square, Color::Blue, Motion::Left, 0.25);
        s.objects.push(ObjectSpec {
            shape: Shape::Circle,
            color: Color::Red,
            motion: Motion::Still,
            speed: 0.0,
            x: 5.0,
            y: 5.0,
            half: 3.0,
        });
        assert_eq!(s.caption(), "the red circle stays still and the blue square moves left");
    }

    #[test]
    fn qa_templates() {
        let s = one(Shape::Circle, Color::Red, Motion::Up, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (oe, mc, fib) = make_qa(&s, &mut rng);
        assert!(oe.len() >= 3);
        assert!(oe.contains(&QaPair {
            question: "what shape is the red object".into(),
            answer: "circle".into()
        }));
        assert!(oe.contains(&QaPair {
            question: "how many objects are there".into(),
            answer: "1".into()
        }));
        assert_eq!(mc.answers.len(), MC_CHOICES);
        let mut uniq = mc.answers.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), MC_CHOICES);
        assert!(s.caption().split(' ').any(|w| w == fib.answer));
        assert_eq!(fib.sentence.matches(BLANK).count(), 1);
        assert_eq!(fib.sentence.replace(BLANK, &fib.answer), s.caption());
    }

    #[test]
    fn mc_gold_index_is_uniform() {
        let cfg = GenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; MC_CHOICES];
        let n = 10_000;
        let mut drawn = 0;
        while drawn < n {
            let Some(scene) = sample_scene(&cfg, &mut rng) else { continue };
            let (_, mc, _) = make_qa(&scene, &mut rng);
            counts[mc.gold] += 1;
            drawn += 1;
            assert_eq!(
                mc.answers[mc.gold],
                truth_of(&scene, &mc.question),
                "{}",
                mc.question
            );
        }
        let p = 1.0 / MC_CHOICES as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    /// Independent answer oracle reading the scene.
    fn truth_of(scene: &SceneSpec, question: &str) -> String {
        let words: Vec<&str> = question.split(' ').collect();
        if question.starts_with("which way does the") {
            let (c, s) = (words[4], words[5]);
            let o = scene.objects.iter().find(|o| o.color.word() == c && o.shape.word() == s).unwrap();
            o.motion.word().into()
        } else {
            let s = words.last().unwrap();
            let o = scene.objects.iter().find(|o| o.shape.word() == *s).unwrap();
            o.color.word().into()
        }
    }

    #[test]
    fn corpus_splits_and_determinism() {
        let cfg = GenConfig {
            n_clips: 100,
            seed: 7,
            ..GenConfig::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        assert_eq!(a.split(Split::Train).len(), 80);
        assert_eq!(a.split(Split::Val).len(), 10);
        assert_eq!(a.split(Split::Test).len(), 10);
        let mut caps: Vec<&str> = a.entries.iter().map(|e| e.caption.as_str()).collect();
        caps.sort();
        caps.dedup();
        assert_eq!(caps.len(), 100);
        assert_eq!(a, generate_corpus(&cfg).unwrap());
        let bad = GenConfig {
            splits: [0.5, 0.1, 0.1],
            ..cfg
        };
        assert!(matches!(generate_corpus(&bad), Err(SynthError::Config(_))));
    }

    #[test]
    fn answers_are_single_vocabulary_words() {
        let cfg = GenConfig {
            n_clips: 60,
            ..GenConfig::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        let v = c.build_vocab(&VocabConfig::default()).unwrap();
        for e in &c.entries {
            let answers = e.oe.iter().map(|q| q.answer.as_str()).chain(e.mc.answers.iter().map(String::as_str)).chain([e.fib.answer.as_str()]);
            for a in answers {
                assert_eq!(crate::text::split_words(a).len(), 1);
                assert!(v.id(a).is_some(), "{a}");
            }
        }
    }

    #[test]
    fn pixels_determine_color_answers() {
        let cfg = GenConfig {
            n_clips: 40,
            seed: 3,
            ..GenConfig::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        for e in &c.entries {
            let clip = c.render(e).unwrap();
            let mut present = HashSet::new();
            for y in 0..32 {
                for x in 0..32 {
                    if let Some(col) = Color::ALL.iter().find(|c| c.rgb() == clip.pixel(0, y, x)) {
                        present.insert(*col);
                    }
                }
            }
            let expect: HashSet<Color> = e.scene.objects.iter().map(|o| o.color).collect();
            assert_eq!(present, expect);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_clips: 12,
            ..GenConfig::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
        let e = &c.entries[3];
        let clip = VideoClip::load(&e.id, &Corpus::clip_path(dir.path(), e)).unwrap();
        assert_eq!(clip, c.render(e).unwrap());
        assert!(Vocabulary::load(&dir.path().join(VOCAB_FILE)).is_ok());
    }
}
