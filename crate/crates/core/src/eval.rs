//! Localization and captioning metrics.
//!
//! Pointing game: a hit when the most salient cell lies inside the ground
//! truth region. Attention correctness: the share of normalized saliency mass
//! inside the region. Both are reported per word category and per noun
//! phrase, next to random, center and uniform baselines.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::argmax_lowest;
use crate::saliency::{
    batch_probe, is_degenerate, phrase_saliency, phrase_spatial, ProbeOptions, Query, QueryMode,
    SaliencyMap,
};
use crate::seq2seq::Model;
use crate::synthworld::{InputMode, Sample, Scene};

/// Cells of a g×g grid (row-major indices) with an optional frame span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BoundingRegion {
    grid: usize,
    cells: Vec<usize>,
    span: Option<(usize, usize)>,
}

impl BoundingRegion {
    pub fn new(grid: usize, cells: Vec<usize>, span: Option<(usize, usize)>) -> Result<Self> {
        if grid == 0 || cells.is_empty() || cells.iter().any(|&c| c >= grid * grid) {
            return Err(Error::contract(
                "region cells must be non-empty and inside the grid",
            ));
        }
        if let Some((s, e)) = span {
            if s > e {
                return Err(Error::contract("region span must satisfy start <= end"));
            }
        }
        Ok(BoundingRegion { grid, cells, span })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn span(&self) -> Option<(usize, usize)> {
        self.span
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.cells.contains(&cell)
    }

    /// |region| / g², the expected score of uniform pointing or attention.
    pub fn coverage(&self) -> f64 {
        self.cells.len() as f64 / (self.grid * self.grid) as f64
    }
}

fn check_row(row: &[f64], region: &BoundingRegion) -> Result<()> {
    let r = region.grid * region.grid;
    if row.len() != r {
        return Err(Error::contract(format!(
            "map has {} cells but region grid has {r}",
            row.len()
        )));
    }
    Ok(())
}

/// Hit when the argmax cell (lowest index on ties) lies in the region. A
/// degenerate all-0.5 row is a miss.
pub fn pointing_game(row: &[f64], region: &BoundingRegion) -> Result<bool> {
    check_row(row, region)?;
    if is_degenerate(row) {
        return Ok(false);
    }
    Ok(region.contains(argmax_lowest(row)))
}

/// Uniformly random pointing.
#[derive(Debug, Clone)]
pub struct RandomBaseline {
    rng: ChaCha8Rng,
}

impl RandomBaseline {
    pub fn new(seed: u64) -> Self {
        RandomBaseline {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn point(&mut self, grid: usize) -> usize {
        self.rng.random_range(0..grid * grid)
    }
}

/// The central cell; for even g the upper-left of the four central cells.
pub fn center_cell(grid: usize) -> usize {
    let c = (grid - 1) / 2;
    c * grid + c
}

/// Whether a row sums to one within 1e-9 with no negative entries.
pub fn is_stochastic(row: &[f64]) -> bool {
    row.iter().all(|&v| v >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

/// Saliency mass inside the region after normalizing the row to sum 1.
pub fn attention_correctness(row: &[f64], region: &BoundingRegion) -> Result<f64> {
    check_row(row, region)?;
    if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Numeric(
            "attention row must be finite and non-negative".into(),
        ));
    }
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("attention row has no mass".into()));
    }
    if region.cells.len() == row.len() {
        return Ok(1.0);
    }
    let inside: f64 = region.cells.iter().map(|&c| row[c]).sum();
    Ok(inside / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    Lowest,
    Random(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub hits: usize,
    pub misses: usize,
}

impl Tally {
    pub fn record(&mut self, hit: bool) {
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.hits + self.misses
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.hits as f64 / self.total() as f64
        }
    }

    pub fn merge(&mut self, other: Tally) {
        self.hits += other.hits;
        self.misses += other.misses;
    }
}

fn argmax_with(row: &[f64], rng: Option<&mut ChaCha8Rng>) -> usize {
    match rng {
        None => argmax_lowest(row),
        Some(rng) => {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ties: Vec<usize> = (0..row.len()).filter(|&i| row[i] == max).collect();
            ties[rng.random_range(0..ties.len())]
        }
    }
}

/// For every noun phrase of the scene, a hit when the most salient frame of
/// its noun word falls inside the object's span. With `restricted_only`,
/// objects visible in every frame are skipped.
pub fn temporal_localization(
    map: &SaliencyMap,
    scene: &Scene,
    tie: TieBreak,
    restricted_only: bool,
) -> Result<Tally> {
    let mut rng = match tie {
        TieBreak::Lowest => None,
        TieBreak::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut tally = Tally::default();
    let last = scene.frames - 1;
    for t in &scene.truth {
        if restricted_only && t.span == (0, last) {
            continue;
        }
        let row = map
            .temporal_alpha
            .get(t.noun_pos)
            .ok_or_else(|| Error::contract("map does not cover the caption"))?;
        if row.len() != scene.frames {
            return Err(Error::contract("map frame count differs from scene"));
        }
        let f = argmax_with(row, rng.as_mut());
        tally.record(t.span.0 <= f && f <= t.span.1);
    }
    Ok(tally)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptionAccuracy {
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub scenes: usize,
}

/// Position-aligned matches over the longer of the two captions.
pub fn token_accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    let longest = truth.len().max(predicted.len());
    if longest == 0 {
        return 1.0;
    }
    let same = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    same as f64 / longest as f64
}

/// Greedy captions compared with the template captions.
pub fn caption_accuracy(
    model: &Model,
    samples: &[Sample],
    max_len: usize,
    mode: InputMode,
) -> Result<CaptionAccuracy> {
    let vocab = &model.params().vocab;
    let scores: Vec<(bool, f64)> = samples
        .par_iter()
        .map(|s| {
            let truth = vocab.encode(&s.scene.caption).ids;
            let pred = model.greedy_caption(&*s.model_input(mode)?, max_len)?;
            Ok((pred == truth, token_accuracy(&truth, &pred)))
        })
        .collect::<Result<_>>()?;
    let n = scores.len().max(1) as f64;
    Ok(CaptionAccuracy {
        exact_match: scores.iter().filter(|s| s.0).count() as f64 / n,
        token_accuracy: scores.iter().map(|s| s.1).sum::<f64>() / n,
        scenes: samples.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryScores {
    pub category: String,
    pub pointing: Tally,
    pub pointing_accuracy: f64,
    pub attention_correctness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineRow {
    pub name: String,
    pub pointing_accuracy: Option<f64>,
    pub attention_correctness: Option<f64>,
    pub temporal_localization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenes: usize,
    /// noun, attribute and whole-phrase rows; "phrase" is the per-NP average.
    pub categories: Vec<CategoryScores>,
    pub temporal_localization: Tally,
    pub temporal_accuracy: f64,
    pub caption: CaptionAccuracy,
    pub baselines: Vec<BaselineRow>,
}

impl EvalReport {
    pub fn category(&self, name: &str) -> Option<&CategoryScores> {
        self.categories.iter().find(|c| c.category == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        writeln!(out, "scenes: {}", self.scenes).unwrap();
        writeln!(
            out,
            "caption exact-match: {:.4}  token accuracy: {:.4}",
            self.caption.exact_match, self.caption.token_accuracy
        )
        .unwrap();
        writeln!(out).unwrap();
        writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>10}",
            "method", "pointing", "attn-corr", "temporal"
        )
        .unwrap();
        for c in &self.categories {
            let temporal = (c.category == "noun").then_some(self.temporal_accuracy);
            writeln!(
                out,
                "{:<16} {:>10} {:>10} {:>10}",
                format!("ours/{}", c.category),
                fmt(Some(c.pointing_accuracy)),
                fmt(Some(c.attention_correctness)),
                fmt(temporal)
            )
            .unwrap();
        }
        for b in &self.baselines {
            writeln!(
                out,
                "{:<16} {:>10} {:>10} {:>10}",
                b.name,
                fmt(b.pointing_accuracy),
                fmt(b.attention_correctness),
                fmt(b.temporal_localization)
            )
            .unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub seed: u64,
    pub mode: InputMode,
    pub max_caption_len: usize,
    pub probe: ProbeOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 7,
            mode: InputMode::Video,
            max_caption_len: 20,
            probe: ProbeOptions::default(),
        }
    }
}

/// Frame used for spatial scoring of an object: the middle of its span.
pub fn spatial_frame_for(span: (usize, usize)) -> usize {
    (span.0 + span.1) / 2
}

#[derive(Debug, Default, Clone)]
struct SceneScores {
    // noun, attribute, phrase
    pointing: [Tally; 3],
    correctness: [Vec<f64>; 3],
    temporal: Tally,
    regions: Vec<BoundingRegion>,
    spans: Vec<((usize, usize), usize)>,
}

/// Saliency of the ground-truth caption for one scene.
pub fn scene_saliency(
    model: &Model,
    sample: &Sample,
    mode: InputMode,
    probe: ProbeOptions,
) -> Result<SaliencyMap> {
    let query = Query::new(&model.params().vocab, &sample.scene.caption, Vec::new())?;
    batch_probe(
        model,
        &*sample.model_input(mode)?,
        &query,
        QueryMode::Query,
        probe,
    )
}

/// Video scenes are scored on the spatial map of one frame per object; in
/// image mode the temporal map over the scanned cells is the spatial map.
fn score_scene(
    model: &Model,
    index: usize,
    sample: &Sample,
    options: EvalOptions,
) -> Result<SceneScores> {
    let scene = &sample.scene;
    let image = options.mode == InputMode::Image;
    let probe = ProbeOptions {
        spatial: !image,
        ..options.probe
    };
    let map = scene_saliency(model, sample, options.mode, probe)?;
    let mut out = SceneScores::default();
    for t in &scene.truth {
        let frame = spatial_frame_for(t.span);
        let region = BoundingRegion::new(scene.grid, t.cells.clone(), Some(t.span))?;
        let groups: [Vec<usize>; 3] = [vec![t.noun_pos], vec![t.attr_pos], t.tokens.clone()];
        for (k, group) in groups.iter().enumerate() {
            let row = if image {
                phrase_saliency(&map, group)?.scaled
            } else {
                phrase_spatial(&map, group, frame)?.scaled
            };
            out.pointing[k].record(pointing_game(&row, &region)?);
            out.correctness[k].push(attention_correctness(&row, &region)?);
        }
        out.regions.push(region);
    }
    if !image {
        let tie = TieBreak::Random(options.seed.wrapping_add(index as u64));
        out.temporal = temporal_localization(&map, scene, tie, true)?;
        out.spans = scene
            .span_restricted()
            .map(|t| (t.span, scene.frames))
            .collect();
    }
    Ok(out)
}

/// Scores every sample. Scenes are processed in parallel and reduced in
/// input order.
pub fn evaluate(model: &Model, samples: &[Sample], options: EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    let per_scene: Vec<SceneScores> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| score_scene(model, i, s, options))
        .collect::<Result<_>>()?;
    let names = ["noun", "attribute", "phrase"];
    let mut categories = Vec::with_capacity(3);
    for (k, name) in names.iter().enumerate() {
        let mut tally = Tally::default();
        let mut ac = Vec::new();
        for s in &per_scene {
            tally.merge(s.pointing[k]);
            ac.extend_from_slice(&s.correctness[k]);
        }
        categories.push(CategoryScores {
            category: name.to_string(),
            pointing: tally,
            pointing_accuracy: tally.accuracy(),
            attention_correctness: ac.iter().sum::<f64>() / ac.len().max(1) as f64,
        });
    }
    let mut temporal = Tally::default();
    for s in &per_scene {
        temporal.merge(s.temporal);
    }
    let regions: Vec<&BoundingRegion> = per_scene.iter().flat_map(|s| s.regions.iter()).collect();
    let spans: Vec<((usize, usize), usize)> = per_scene
        .iter()
        .flat_map(|s| s.spans.iter().copied())
        .collect();
    let caption = caption_accuracy(model, samples, options.max_caption_len, options.mode)?;
    Ok(EvalReport {
        scenes: samples.len(),
        categories,
        temporal_localization: temporal,
        temporal_accuracy: temporal.accuracy(),
        caption,
        baselines: baselines(&regions, &spans, options.seed),
    })
}

/// Random and center pointing, uniform attention, and the uniform-frame
/// expectation of temporal localization, over the same regions.
pub fn baselines(
    regions: &[&BoundingRegion],
    spans: &[((usize, usize), usize)],
    seed: u64,
) -> Vec<BaselineRow> {
    let mut random = RandomBaseline::new(seed);
    let mut rand_tally = Tally::default();
    let mut center_tally = Tally::default();
    for r in regions {
        rand_tally.record(r.contains(random.point(r.grid)));
        center_tally.record(r.contains(center_cell(r.grid)));
    }
    let n = regions.len().max(1) as f64;
    let uniform_ac = regions.iter().map(|r| r.coverage()).sum::<f64>() / n;
    let uniform_temporal = if spans.is_empty() {
        None
    } else {
        Some(
            spans
                .iter()
                .map(|&((s, e), m)| (e - s + 1) as f64 / m as f64)
                .sum::<f64>()
                / spans.len() as f64,
        )
    };
    vec![
        BaselineRow {
            name: "random".into(),
            pointing_accuracy: Some(rand_tally.accuracy()),
            attention_correctness: None,
            temporal_localization: None,
        },
        BaselineRow {
            name: "center".into(),
            pointing_accuracy: Some(center_tally.accuracy()),
            attention_correctness: None,
            temporal_localization: None,
        },
        BaselineRow {
            name: "uniform".into(),
            pointing_accuracy: None,
            attention_correctness: Some(uniform_ac),
            temporal_localization: uniform_temporal,
        },
    ]
}
