//! Per-word saliency by single-descriptor probing.
//!
//! A probe replaces the whole input by one descriptor (a frame, or one cell
//! of a frame's grid) and decodes the query with teacher forcing. The loss of
//! word w under probe i is `-ln q_i(w)`; per word, losses are rescaled to
//! [0, 1] (low loss = salient) and the temporal rows are softmax-normalized.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, softmax, Distribution};
use crate::seq2seq::{DescriptorSequence, Model, Vocabulary, BOS};

/// One probe descriptor: a whole item, or one grid cell (row-major index) of
/// an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Item(usize),
    Cell { item: usize, cell: usize },
}

fn probe_vector(seq: &DescriptorSequence, probe: Probe) -> Result<&[f64]> {
    match probe {
        Probe::Item(i) => {
            if i >= seq.len() {
                return Err(Error::contract(format!("item {i} out of range")));
            }
            Ok(seq.item(i))
        }
        Probe::Cell { item, cell } => {
            let grid = seq
                .grid(item)
                .ok_or_else(|| Error::contract("spatial probe needs a stored grid"))?;
            grid.cells()
                .get(cell)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::contract(format!("cell {cell} out of range")))
        }
    }
}

/// `q_i(y_t | prefix)` from a model that only sees the probe descriptor.
pub fn probe_distribution(
    model: &Model,
    seq: &DescriptorSequence,
    probe: Probe,
    prefix: &[usize],
) -> Result<Distribution> {
    let single = DescriptorSequence::from_items(vec![probe_vector(seq, probe)?.to_vec()])?;
    let encoding = model.encode(&single)?;
    if model.params().has_attention() {
        Ok(model.soft_attention_decode(&encoding, prefix)?.dist)
    } else {
        Ok(model.decode_distribution(&encoding.z, prefix)?.dist)
    }
}

/// Information loss of `w` under `q`: `-ln q(w)`.
pub fn word_loss(q: &Distribution, w: usize) -> f64 {
    -q.prob(w).ln()
}

/// Maps losses to [0, 1] with the lowest loss at 1. An all-equal row maps to
/// 0.5 everywhere.
pub fn scale_losses(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|&x| (max - x) / range).collect()
}

/// True when every value in the row is the degenerate 0.5 produced by
/// [`scale_losses`] on an all-equal row.
pub fn is_degenerate(scaled: &[f64]) -> bool {
    scaled.len() > 1 && scaled.iter().all(|&v| v == 0.5)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PhraseGroup {
    pub label: String,
    pub positions: Vec<usize>,
}

/// Sentence to explain, with optional phrase groups over its positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Query {
    pub words: Vec<String>,
    #[serde(skip)]
    pub ids: Vec<usize>,
    /// Words outside the vocabulary (explained as UNK).
    pub unk: Vec<bool>,
    pub phrases: Vec<PhraseGroup>,
}

impl Query {
    pub fn new<S: AsRef<str>>(
        vocab: &Vocabulary,
        words: &[S],
        phrases: Vec<PhraseGroup>,
    ) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::contract("query must contain at least one word"));
        }
        for p in &phrases {
            if p.positions.is_empty() || p.positions.iter().any(|&i| i >= words.len()) {
                return Err(Error::contract(format!(
                    "phrase {:?} must name positions within the sentence",
                    p.label
                )));
            }
        }
        let enc = vocab.encode(words);
        Ok(Query {
            words: words.iter().map(|w| w.as_ref().to_string()).collect(),
            ids: enc.ids,
            unk: enc.unk,
            phrases,
        })
    }

    /// Query over model-generated token ids.
    pub fn from_ids(vocab: &Vocabulary, ids: &[usize]) -> Result<Self> {
        let words: Vec<String> =
            ids.iter()
                .map(|&i| {
                    vocab.token(i).map(str::to_string).ok_or_else(|| {
                        Error::Vocabulary(format!("token id {i} outside vocabulary"))
                    })
                })
                .collect::<Result<_>>()?;
        Query::new(vocab, &words, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// BOS followed by every query word: n+1 decoder inputs.
    fn decoder_tokens(&self) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(self.ids.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Predicted,
    Query,
}

/// Spatial saliency of one frame: per word, one value per grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialFrame {
    pub frame: usize,
    pub grid: usize,
    /// n × r losses.
    pub raw: Vec<Vec<f64>>,
    /// n × r values in [0, 1].
    pub scaled: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyMap {
    pub mode: QueryMode,
    pub words: Vec<String>,
    pub unk: Vec<bool>,
    pub phrases: Vec<PhraseGroup>,
    /// n × m losses.
    pub temporal_raw: Vec<Vec<f64>>,
    pub temporal_scaled: Vec<Vec<f64>>,
    pub temporal_alpha: Vec<Vec<f64>>,
    /// One entry per frame when spatial saliency was computed.
    pub spatial: Option<Vec<SpatialFrame>>,
}

fn alpha_row(scaled: &[f64]) -> Vec<f64> {
    softmax(scaled)
        .expect("scaled losses are finite and non-empty")
        .probs()
        .to_vec()
}

impl SaliencyMap {
    fn assemble(
        query: &Query,
        mode: QueryMode,
        temporal_raw: Vec<Vec<f64>>,
        spatial_raw: Option<Vec<(usize, Vec<Vec<f64>>)>>,
    ) -> Self {
        let temporal_scaled: Vec<Vec<f64>> = temporal_raw.iter().map(|r| scale_losses(r)).collect();
        let temporal_alpha = temporal_scaled.iter().map(|r| alpha_row(r)).collect();
        let spatial = spatial_raw.map(|frames| {
            frames
                .into_iter()
                .enumerate()
                .map(|(i, (grid, raw))| spatial_frame(i, grid, raw))
                .collect()
        });
        SaliencyMap {
            mode,
            words: query.words.clone(),
            unk: query.unk.clone(),
            phrases: query.phrases.clone(),
            temporal_raw,
            temporal_scaled,
            temporal_alpha,
            spatial,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.temporal_raw.first().map_or(0, Vec::len)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn spatial_frame(frame: usize, grid: usize, raw: Vec<Vec<f64>>) -> SpatialFrame {
    let scaled = raw.iter().map(|r| scale_losses(r)).collect();
    SpatialFrame {
        frame,
        grid,
        raw,
        scaled,
    }
}

fn losses_for(query: &Query, dists: &[Distribution]) -> Vec<f64> {
    query
        .ids
        .iter()
        .enumerate()
        .map(|(t, &w)| word_loss(&dists[t], w))
        .collect()
}

/// Temporal saliency computed one probe and one prefix at a time.
pub fn temporal_saliency(
    model: &Model,
    seq: &DescriptorSequence,
    query: &Query,
    mode: QueryMode,
) -> Result<SaliencyMap> {
    let raw = sequential_rows(model, seq, query, |i| Probe::Item(i), seq.len())?;
    Ok(SaliencyMap::assemble(query, mode, raw, None))
}

/// n × count losses from independent probe passes, one per (word, probe).
fn sequential_rows(
    model: &Model,
    seq: &DescriptorSequence,
    query: &Query,
    probe: impl Fn(usize) -> Probe,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    if query.is_empty() {
        return Err(Error::contract("query must contain at least one word"));
    }
    let tokens = query.decoder_tokens();
    (0..query.len())
        .map(|t| {
            (0..count)
                .map(|i| {
                    let q = probe_distribution(model, seq, probe(i), &tokens[..=t])?;
                    Ok(word_loss(&q, query.ids[t]))
                })
                .collect()
        })
        .collect()
}

/// Spatial saliency of frame `frame`, one probe per cell.
pub fn spatial_saliency(
    model: &Model,
    seq: &DescriptorSequence,
    query: &Query,
    frame: usize,
) -> Result<SpatialFrame> {
    let grid = seq
        .grid(frame)
        .ok_or_else(|| Error::contract(format!("frame {frame} has no stored grid")))?;
    let r = grid.cell_count();
    let raw = sequential_rows(
        model,
        seq,
        query,
        |cell| Probe::Cell { item: frame, cell },
        r,
    )?;
    Ok(spatial_frame(frame, grid.size(), raw))
}

/// Sequential reference for [`batch_probe`]: every temporal probe and, when
/// grids are stored and `spatial` is set, every cell probe of every frame.
pub fn sequential_probe(
    model: &Model,
    seq: &DescriptorSequence,
    query: &Query,
    mode: QueryMode,
    spatial: bool,
) -> Result<SaliencyMap> {
    let mut map = temporal_saliency(model, seq, query, mode)?;
    if spatial && seq.grids().is_some() {
        map.spatial = Some(
            (0..seq.len())
                .map(|f| spatial_saliency(model, seq, query, f))
                .collect::<Result<_>>()?,
        );
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeOptions {
    pub spatial: bool,
    /// Largest number of probe sequences decoded in one batch.
    pub max_batch: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            spatial: true,
            max_batch: 512,
        }
    }
}

/// All probes of a query in batched forward passes.
///
/// The r·m + m single-descriptor sequences (m frames plus r cells per frame)
/// are decoded together with teacher forcing over BOS and the n query words,
/// so the model performs exactly (r·m + m)·(n + 1) decoder step evaluations.
/// Chunks of `max_batch` sequences run in parallel; rows never interact, so
/// the result does not depend on chunking.
pub fn batch_probe(
    model: &Model,
    seq: &DescriptorSequence,
    query: &Query,
    mode: QueryMode,
    options: ProbeOptions,
) -> Result<SaliencyMap> {
    if query.is_empty() {
        return Err(Error::contract("query must contain at least one word"));
    }
    if options.max_batch == 0 {
        return Err(Error::contract("max_batch must be positive"));
    }
    let m = seq.len();
    let mut probes: Vec<&[f64]> = seq.items().iter().map(Vec::as_slice).collect();
    let grids = if options.spatial { seq.grids() } else { None };
    if let Some(grids) = grids {
        for g in grids {
            probes.extend(g.cells().iter().map(Vec::as_slice));
        }
    }
    let tokens = query.decoder_tokens();
    let chunks: Vec<&[&[f64]]> = probes.chunks(options.max_batch).collect();
    let losses: Vec<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            let batch: Vec<Vec<&[f64]>> = chunk.iter().map(|p| vec![*p]).collect();
            let dists = model.teacher_forced_batch(&batch, &tokens)?;
            Ok(dists.iter().map(|d| losses_for(query, d)).collect())
        })
        .collect::<Result<_>>()?;
    // per probe, n losses
    let per_probe: Vec<Vec<f64>> = losses.into_iter().flatten().collect();
    let n = query.len();
    let transpose = |range: std::ops::Range<usize>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|t| per_probe[range.clone()].iter().map(|l| l[t]).collect())
            .collect()
    };
    let temporal_raw = transpose(0..m);
    let spatial_raw = grids.map(|grids| {
        let mut offset = m;
        grids
            .iter()
            .map(|g| {
                let r = g.cell_count();
                let rows = transpose(offset..offset + r);
                offset += r;
                (g.size(), rows)
            })
            .collect()
    });
    Ok(SaliencyMap::assemble(
        query,
        mode,
        temporal_raw,
        spatial_raw,
    ))
}

/// Aggregated saliency of a group of words.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhraseSaliency {
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
}

fn sum_rows(rows: &[Vec<f64>], group: &[usize]) -> Result<Vec<f64>> {
    if group.is_empty() {
        return Err(Error::contract("phrase group must be non-empty"));
    }
    let width = rows.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; width];
    for &t in group {
        let row = rows
            .get(t)
            .ok_or_else(|| Error::contract(format!("word index {t} out of range")))?;
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(sum)
}

/// Temporal phrase saliency: summed raw word losses, then rescaled.
pub fn phrase_saliency(map: &SaliencyMap, group: &[usize]) -> Result<PhraseSaliency> {
    let raw = sum_rows(&map.temporal_raw, group)?;
    let scaled = scale_losses(&raw);
    Ok(PhraseSaliency { raw, scaled })
}

/// Spatial phrase saliency over the cells of `frame`.
pub fn phrase_spatial(map: &SaliencyMap, group: &[usize], frame: usize) -> Result<PhraseSaliency> {
    let frames = map
        .spatial
        .as_ref()
        .ok_or_else(|| Error::contract("map has no spatial saliency"))?;
    let f = frames
        .get(frame)
        .ok_or_else(|| Error::contract(format!("frame {frame} out of range")))?;
    let raw = sum_rows(&f.raw, group)?;
    let scaled = scale_losses(&raw);
    Ok(PhraseSaliency { raw, scaled })
}

/// `D_KL(p || q_i)` of the next-word distribution after `prefix`, for every
/// item: how well each descriptor alone represents the full input.
pub fn representativeness(
    model: &Model,
    seq: &DescriptorSequence,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let p = model.next_word_distribution(seq, prefix)?;
    (0..seq.len())
        .map(|i| {
            let q = probe_distribution(model, seq, Probe::Item(i), prefix)?;
            kl_divergence(p.probs(), q.probs())
        })
        .collect()
}

/// Row-major scan of a g×g grid into a g²-item sequence: cell (a, b) becomes
/// item `a·g + b`.
pub fn image_mode_sequence(rows: &[Vec<Vec<f64>>]) -> Result<DescriptorSequence> {
    let g = rows.len();
    if g == 0 || rows.iter().any(|r| r.len() != g) {
        return Err(Error::contract("image grid must be square and non-empty"));
    }
    DescriptorSequence::from_items(rows.iter().flatten().cloned().collect())
}

/// Binary graymap of a g×g map in [0, 1], each cell drawn as a `cell_px`
/// square. 0 is black (low saliency), 255 white.
pub fn to_pgm(values: &[f64], grid: usize, cell_px: usize) -> Result<Vec<u8>> {
    if grid == 0 || values.len() != grid * grid || cell_px == 0 {
        return Err(Error::contract("map size does not match grid"));
    }
    let side = grid * cell_px;
    let mut header = String::new();
    write!(header, "P5\n{side} {side}\n255\n").unwrap();
    let mut out = header.into_bytes();
    for y in 0..side {
        for x in 0..side {
            let v = values[(y / cell_px) * grid + x / cell_px];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}
