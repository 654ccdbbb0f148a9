//! Synthetic "videos" with template captions and exact grounding.
//!
//! Each scene places 1-3 objects (a noun with an attribute) on distinct cells
//! of a g×g grid. Every frame is rendered as a grid of codebook vectors plus
//! Gaussian noise; frames outside an object's span show background instead.
//! Captions follow the grammar
//! `a <attr> <noun> [and a <attr> <noun>] [then a <attr> <noun>]`, where
//! objects joined by "and" share the opening frames (listed in noun order)
//! and the "then" object owns the remaining frames.

use std::borrow::Cow;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::saliency::image_mode_sequence;
use crate::seq2seq::checkpoint::{decode_f64s, encode_f64s};
use crate::seq2seq::{DescriptorSequence, Grid, Pooling, Vocabulary};

pub const NOUNS: [&str; 8] = ["ball", "cube", "cone", "ring", "star", "disk", "cup", "box"];
pub const ATTRIBUTES: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const FUNCTION_WORDS: [&str; 3] = ["a", "and", "then"];

/// Hard upper bound on pairwise cosine similarity between codebook vectors.
pub const MAX_CODE_COSINE: f64 = 0.5;

/// The closed vocabulary of the caption grammar.
pub fn vocabulary() -> Vocabulary {
    let words: Vec<&str> = FUNCTION_WORDS
        .iter()
        .chain(ATTRIBUTES.iter())
        .chain(NOUNS.iter())
        .copied()
        .collect();
    Vocabulary::new(&words).expect("fixed grammar words are distinct")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub grid: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise: f64,
    /// Fewest frames on either side of a "then" split.
    pub min_span: usize,
    pub d_feat: usize,
    pub pooling: Pooling,
    pub codebook_seed: u64,
    /// Standard deviation of the codebook entries.
    pub code_scale: f64,
    /// Rejection threshold on pairwise |cosine|, at most [`MAX_CODE_COSINE`].
    pub code_cosine: f64,
    /// Norm of the background code relative to an object code.
    pub background_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: 4,
            frames: 8,
            min_objects: 1,
            max_objects: 3,
            noise: 0.05,
            min_span: 4,
            d_feat: 24,
            pooling: Pooling::Mean,
            codebook_seed: 1234,
            code_scale: 16.0,
            code_cosine: 0.3,
            background_scale: 0.1,
        }
    }
}

impl SynthConfig {
    /// Single-frame scenes for image mode.
    pub fn image() -> Self {
        SynthConfig {
            frames: 1,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.frames == 0 || self.d_feat == 0 {
            return Err(Error::Config(
                "grid, frames and d_feat must be positive".into(),
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 3 {
            return Err(Error::Config(
                "object count range must lie within 1..=3".into(),
            ));
        }
        if self.max_objects > self.grid * self.grid {
            return Err(Error::contract(format!(
                "{} objects cannot occupy distinct cells of a {}x{} grid",
                self.max_objects, self.grid, self.grid
            )));
        }
        if !(self.noise >= 0.0) || !(self.background_scale >= 0.0) || !(self.code_scale > 0.0) {
            return Err(Error::Config(
                "noise and scales must be non-negative".into(),
            ));
        }
        if !(self.code_cosine > 0.0 && self.code_cosine <= MAX_CODE_COSINE) {
            return Err(Error::Config(format!(
                "code_cosine must lie in (0, {MAX_CODE_COSINE}]"
            )));
        }
        Ok(())
    }

    /// Whether a "then" clause fits: both parts need `min_span` frames.
    pub fn allows_then(&self) -> bool {
        self.min_span > 0 && self.frames >= 2 * self.min_span
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Fixed feature vector per (noun, attribute) pair plus a background code.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCodebook {
    codes: Vec<Vec<f64>>,
    background: Vec<f64>,
}

impl FeatureCodebook {
    /// Draws standard-normal codes, rejecting any whose cosine similarity
    /// with an earlier code reaches [`MAX_CODE_COSINE`].
    pub fn generate(
        seed: u64,
        d_feat: usize,
        code_scale: f64,
        max_cosine: f64,
        background_scale: f64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let total = NOUNS.len() * ATTRIBUTES.len() + 1;
        let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(total);
        let mut attempts = 0;
        while accepted.len() < total {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!(
                    "cannot draw {total} codes of dimension {d_feat} with cosine < {max_cosine}"
                )));
            }
            let v: Vec<f64> = (0..d_feat)
                .map(|_| code_scale * normal.sample(&mut rng))
                .collect();
            if accepted.iter().all(|c| cosine(c, &v).abs() < max_cosine) {
                accepted.push(v);
            }
        }
        let mut background = accepted.pop().expect("background drawn last");
        background.iter_mut().for_each(|x| *x *= background_scale);
        Ok(FeatureCodebook {
            codes: accepted,
            background,
        })
    }

    pub fn for_config(config: &SynthConfig) -> Result<Self> {
        Self::generate(
            config.codebook_seed,
            config.d_feat,
            config.code_scale,
            config.code_cosine,
            config.background_scale,
        )
    }

    pub fn code(&self, noun: usize, attr: usize) -> &[f64] {
        &self.codes[noun * ATTRIBUTES.len() + attr]
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    /// Largest pairwise |cosine| among object and background codes.
    pub fn max_cosine(&self) -> f64 {
        let all: Vec<&Vec<f64>> = self
            .codes
            .iter()
            .chain(std::iter::once(&self.background))
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                worst = worst.max(cosine(all[i], all[j]).abs());
            }
        }
        worst
    }

    /// Nearest code by Euclidean distance: `Some((noun, attr))` or `None` for
    /// background.
    pub fn classify(&self, feature: &[f64]) -> Option<(usize, usize)> {
        let dist = |c: &[f64]| {
            c.iter()
                .zip(feature)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        let mut best = (dist(&self.background), None);
        for noun in 0..NOUNS.len() {
            for attr in 0..ATTRIBUTES.len() {
                let d = dist(self.code(noun, attr));
                if d < best.0 {
                    best = (d, Some((noun, attr)));
                }
            }
        }
        best.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct SceneObject {
    pub noun: usize,
    pub attr: usize,
    /// (row, column) on the grid.
    pub cell: (usize, usize),
    /// Inclusive frame span.
    pub span: (usize, usize),
}

/// Ground truth for one noun phrase of the caption.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhraseTruth {
    pub object: usize,
    /// Caption positions of the phrase tokens ("a", attribute, noun).
    pub tokens: Vec<usize>,
    pub attr_pos: usize,
    pub noun_pos: usize,
    /// Row-major indices of the cells the object occupies.
    pub cells: Vec<usize>,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    pub grid: usize,
    pub frames: usize,
    /// Objects in caption order.
    pub objects: Vec<SceneObject>,
    pub caption: Vec<String>,
    pub truth: Vec<PhraseTruth>,
}

impl Scene {
    /// Caption and ground truth derived from objects listed in caption order.
    /// An object whose span starts after the first object's span is the
    /// "then" clause.
    fn from_objects(grid: usize, frames: usize, objects: Vec<SceneObject>) -> Self {
        let mut caption: Vec<String> = Vec::new();
        let mut truth = Vec::with_capacity(objects.len());
        for (j, o) in objects.iter().enumerate() {
            if j > 0 {
                let connector = if o.span.0 > objects[0].span.0 {
                    "then"
                } else {
                    "and"
                };
                caption.push(connector.into());
            }
            let start = caption.len();
            caption.push("a".into());
            caption.push(ATTRIBUTES[o.attr].into());
            caption.push(NOUNS[o.noun].into());
            truth.push(PhraseTruth {
                object: j,
                tokens: vec![start, start + 1, start + 2],
                attr_pos: start + 1,
                noun_pos: start + 2,
                cells: vec![o.cell.0 * grid + o.cell.1],
                span: o.span,
            });
        }
        Scene {
            grid,
            frames,
            objects,
            caption,
            truth,
        }
    }

    /// Identity of the layout and caption, used to keep splits disjoint.
    pub fn key(&self) -> String {
        let mut k = String::new();
        for o in &self.objects {
            write!(
                k,
                "{}:{}:{}:{}:{}:{};",
                o.noun, o.attr, o.cell.0, o.cell.1, o.span.0, o.span.1
            )
            .unwrap();
        }
        k.push('|');
        k.push_str(&self.caption.join(" "));
        k
    }

    /// Objects visible only in part of the video.
    pub fn span_restricted(&self) -> impl Iterator<Item = &PhraseTruth> {
        let last = self.frames - 1;
        self.truth.iter().filter(move |t| t.span != (0, last))
    }
}

/// A scene with its rendered descriptor sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub features: DescriptorSequence,
}

/// What the encoder reads: pooled frames, or the cells of a single-frame
/// scene scanned row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    #[default]
    Video,
    Image,
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(InputMode::Video),
            "image" => Ok(InputMode::Image),
            other => Err(Error::Config(format!("unknown input mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputMode::Video => "video",
            InputMode::Image => "image",
        })
    }
}

impl Sample {
    pub fn model_input(&self, mode: InputMode) -> Result<Cow<'_, DescriptorSequence>> {
        match mode {
            InputMode::Video => Ok(Cow::Borrowed(&self.features)),
            InputMode::Image => Ok(Cow::Owned(image_mode(self)?)),
        }
    }
}

fn sample_layout(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Vec<SceneObject> {
    let k = rng.random_range(config.min_objects..=config.max_objects);
    let mut nouns: Vec<usize> = (0..NOUNS.len()).collect();
    nouns.shuffle(rng);
    let mut cells: Vec<usize> = (0..config.grid * config.grid).collect();
    cells.shuffle(rng);
    let last = config.frames - 1;
    let with_then = config.allows_then() && (k == 3 || (k == 2 && rng.random_bool(0.5)));
    let split = if with_then {
        rng.random_range(config.min_span..=config.frames - config.min_span)
    } else {
        config.frames
    };
    let mut objects: Vec<SceneObject> = (0..k)
        .map(|j| {
            let attr = rng.random_range(0..ATTRIBUTES.len());
            let cell = cells[j];
            let span = if with_then && j == k - 1 {
                (split, last)
            } else {
                (0, split - 1)
            };
            SceneObject {
                noun: nouns[j],
                attr,
                cell: (cell / config.grid, cell % config.grid),
                span,
            }
        })
        .collect();
    let n_and = if with_then { k - 1 } else { k };
    objects[..n_and].sort_by_key(|o| o.noun);
    objects
}

fn render(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    codebook: &FeatureCodebook,
    objects: &[SceneObject],
) -> Result<Vec<Grid>> {
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::Config(e.to_string()))?;
    let g = config.grid;
    (0..config.frames)
        .map(|f| {
            let cells = (0..g * g)
                .map(|idx| {
                    let occupant = objects
                        .iter()
                        .find(|o| o.cell.0 * g + o.cell.1 == idx && o.span.0 <= f && f <= o.span.1);
                    let base = match occupant {
                        Some(o) => codebook.code(o.noun, o.attr),
                        None => codebook.background(),
                    };
                    base.iter()
                        .map(|&v| {
                            if config.noise > 0.0 {
                                v + noise.sample(rng)
                            } else {
                                v
                            }
                        })
                        .collect()
                })
                .collect();
            Grid::new(g, cells)
        })
        .collect()
}

/// Generates one scene from `seed`.
pub fn generate_scene(seed: u64, config: &SynthConfig) -> Result<(Scene, DescriptorSequence)> {
    config.validate()?;
    let codebook = FeatureCodebook::for_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scene_with(&mut rng, config, &codebook)
}

fn scene_with(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    codebook: &FeatureCodebook,
) -> Result<(Scene, DescriptorSequence)> {
    let objects = sample_layout(rng, config);
    let grids = render(rng, config, codebook, &objects)?;
    let scene = Scene::from_objects(config.grid, config.frames, objects);
    Ok((
        scene,
        DescriptorSequence::from_grids(grids, config.pooling)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates three disjoint splits. Scenes whose (layout, caption) key was
/// already produced are redrawn, so no pair repeats across or within splits.
pub fn generate_dataset(
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    config: &SynthConfig,
) -> Result<Dataset> {
    config.validate()?;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::contract("every split needs at least one scene"));
    }
    let codebook = FeatureCodebook::for_config(config)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut draw = |n: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::contract(
                    "scene space too small for the requested split sizes",
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            let (scene, features) = scene_with(&mut rng, config, &codebook)?;
            if seen.insert(scene.key()) {
                out.push(Sample { scene, features });
            }
        }
        Ok(out)
    };
    let train = draw(n_train)?;
    let val = draw(n_val)?;
    let test = draw(n_test)?;
    Ok(Dataset { train, val, test })
}

/// Row-major scan of a single-frame scene into a cell sequence.
///
/// Ground-truth cell indices carry over unchanged: cell (a, b) becomes item
/// `a·g + b`.
pub fn image_mode(sample: &Sample) -> Result<DescriptorSequence> {
    if sample.scene.frames != 1 {
        return Err(Error::contract(format!(
            "image mode needs a single frame, scene has {}",
            sample.scene.frames
        )));
    }
    let grid = sample
        .features
        .grid(0)
        .ok_or_else(|| Error::contract("scene has no spatial grid"))?;
    let rows: Vec<Vec<Vec<f64>>> = (0..grid.size())
        .map(|a| (0..grid.size()).map(|b| grid.cell(a, b).to_vec()).collect())
        .collect();
    image_mode_sequence(&rows)
}

const DATASET_MAGIC: &str = "# capsal-dataset v1";

/// One line per scene:
/// `g<TAB>m<TAB>K<TAB>d<TAB>objects<TAB>caption<TAB>payload`, where objects
/// are `noun:attr:row:col:start:end` joined by commas, the caption is
/// space-separated, and the payload is the hex of every cell feature
/// (frame-major, then row-major cells).
pub fn write_samples(samples: &[Sample], pooling: Pooling) -> String {
    let mut out = format!("{DATASET_MAGIC} pooling={pooling}\n");
    for s in samples {
        let sc = &s.scene;
        let objects: Vec<String> = sc
            .objects
            .iter()
            .map(|o| {
                format!(
                    "{}:{}:{}:{}:{}:{}",
                    NOUNS[o.noun], ATTRIBUTES[o.attr], o.cell.0, o.cell.1, o.span.0, o.span.1
                )
            })
            .collect();
        let grids = s.features.grids().expect("synthetic samples carry grids");
        let mut payload = String::new();
        for g in grids {
            for c in g.cells() {
                payload.push_str(&encode_f64s(c));
            }
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            sc.grid,
            sc.frames,
            sc.objects.len(),
            s.features.dim(),
            objects.join(","),
            sc.caption.join(" "),
            payload
        )
        .unwrap();
    }
    out
}

fn parse_index(list: &[&str], word: &str) -> Result<usize> {
    list.iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::format(format!("unknown word {word:?}")))
}

pub fn read_samples(text: &str) -> Result<Vec<Sample>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let pooling = header
        .strip_prefix(DATASET_MAGIC)
        .and_then(|rest| rest.trim().strip_prefix("pooling="))
        .ok_or_else(|| Error::format("missing dataset header"))?
        .parse::<Pooling>()?;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad integer {s:?}")))
    };
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::format(format!(
                "line {}: expected 7 fields",
                lineno + 2
            )));
        }
        let (g, m, k, d) = (num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?);
        let mut objects = Vec::with_capacity(k);
        for o in f[4].split(',').filter(|s| !s.is_empty()) {
            let p: Vec<&str> = o.split(':').collect();
            if p.len() != 6 {
                return Err(Error::format(format!("bad object {o:?}")));
            }
            objects.push(SceneObject {
                noun: parse_index(&NOUNS, p[0])?,
                attr: parse_index(&ATTRIBUTES, p[1])?,
                cell: (num(p[2])?, num(p[3])?),
                span: (num(p[4])?, num(p[5])?),
            });
        }
        if objects.len() != k {
            return Err(Error::format("object count does not match header"));
        }
        let scene = Scene::from_objects(g, m, objects);
        if scene.caption.join(" ") != f[5] {
            return Err(Error::format(format!(
                "caption {:?} does not match objects",
                f[5]
            )));
        }
        let values = decode_f64s(f[6])?;
        if values.len() != m * g * g * d {
            return Err(Error::format("feature payload size does not match header"));
        }
        let grids = values
            .chunks(g * g * d)
            .map(|frame| Grid::new(g, frame.chunks(d).map(<[f64]>::to_vec).collect()))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            scene,
            features: DescriptorSequence::from_grids(grids, pooling)?,
        });
    }
    Ok(out)
}

pub fn save_samples(samples: &[Sample], pooling: Pooling, path: &Path) -> Result<()> {
    std::fs::write(path, write_samples(samples, pooling))?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    read_samples(&std::fs::read_to_string(path)?)
}
