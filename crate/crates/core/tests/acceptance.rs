//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use capsal::eval::{baselines, caption_accuracy, center_cell, BoundingRegion, RandomBaseline};
use capsal::numerics::{kl_divergence, one_hot, softmax};
use capsal::saliency::{
    batch_probe, is_degenerate, phrase_saliency, phrase_spatial, probe_distribution, scale_losses,
    sequential_probe, word_loss, Probe, ProbeOptions, Query, QueryMode, SaliencyMap,
};
use capsal::seq2seq::{checkpoint, EncoderKind, Model, BOS};
use capsal::synthworld::{load_samples, InputMode};
use capsal::training::Example;
use common::{gradient_check, random_grid_seq, random_seq, toy_params, toy_vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const WORDS: [&str; 4] = ["a", "red", "ball", "then"];

fn random_query(rng: &mut ChaCha8Rng, n: usize) -> Query {
    let words: Vec<&str> = (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect();
    Query::new(&toy_vocab(), &words, Vec::new()).unwrap()
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let seqs: Vec<_> = [3, 1, 4]
        .iter()
        .map(|&m| random_seq(&mut rng, m, 3))
        .collect();
    let targets = [vec![0, 4, 5, 6, 1], vec![0, 6, 1], vec![0, 4, 7, 4, 6, 1]];
    let batch: Vec<Example> = seqs
        .iter()
        .zip(&targets)
        .map(|(seq, target)| Example { seq, target })
        .collect();
    let mut tensors = 0;
    for (attention, encoder) in [
        (Some(3), EncoderKind::Lstm),
        (None, EncoderKind::Lstm),
        (None, EncoderKind::Mean),
    ] {
        let params = toy_params(17, attention, encoder);
        for (name, err) in gradient_check(&params, &batch, 1e-5) {
            tensors += 1;
            if err > worst {
                worst = err;
                worst_name = name;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{tensors} tensors, worst relative error {worst:.2e} ({worst_name}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn word_loss_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let v = rng.random_range(2..60);
        let spread = rng.random_range(0.1..30.0);
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-spread..spread)).collect();
        let q = softmax(&logits).unwrap();
        let w = rng.random_range(0..v);
        let kl = kl_divergence(&one_hot(v, w), q.probs()).unwrap();
        let p = one_hot(v, w);
        let direct: f64 = p
            .iter()
            .zip(q.probs())
            .filter(|(pk, _)| **pk > 0.0)
            .map(|(pk, qk)| pk * (pk / qk).ln())
            .sum();
        let loss = word_loss(&q, w);
        worst = worst.max((loss - kl).abs()).max((loss - direct).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("1000 distributions, max |difference| {worst:.2e}"),
    )
}

fn batch_equivalence(maps: &mut Vec<SaliencyMap>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut counts_ok = true;
    let mut detail = Vec::new();
    for (g, m, n) in [(2, 4, 5), (3, 8, 7), (4, 1, 6)] {
        for attention in [None, Some(3)] {
            let params = toy_params(rng.random(), attention, EncoderKind::Lstm);
            let model = Model::new(&params);
            let seq = random_grid_seq(&mut rng, g, m, 3);
            let query = random_query(&mut rng, n);
            let reference = sequential_probe(&model, &seq, &query, QueryMode::Query, true).unwrap();
            model.reset_decoder_steps();
            let map = batch_probe(
                &model,
                &seq,
                &query,
                QueryMode::Query,
                ProbeOptions::default(),
            )
            .unwrap();
            let steps = model.decoder_steps();
            let expected = (g * g * m + m) * (n + 1);
            counts_ok &= steps == expected;
            worst = worst.max(max_abs_diff(&map.temporal_raw, &reference.temporal_raw));
            worst = worst.max(max_abs_diff(&map.temporal_alpha, &reference.temporal_alpha));
            let (a, b) = (
                map.spatial.as_ref().unwrap(),
                reference.spatial.as_ref().unwrap(),
            );
            for (fa, fb) in a.iter().zip(b) {
                worst = worst.max(max_abs_diff(&fa.raw, &fb.raw));
                worst = worst.max(max_abs_diff(&fa.scaled, &fb.scaled));
            }
            if attention.is_none() {
                detail.push(format!("({g},{m},{n}) steps {steps}/{expected}"));
            }
            maps.push(map);
        }
    }
    outcome(
        worst <= 1e-9 && counts_ok,
        format!("{}; max |difference| {worst:.2e}", detail.join(", ")),
    )
}

fn phrase_additivity(maps: &mut Vec<SaliencyMap>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let params = toy_params(rng.random(), None, EncoderKind::Lstm);
        let model = Model::new(&params);
        let (g, m, n) = (
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(1..7),
        );
        let seq = random_grid_seq(&mut rng, g, m, 3);
        let query = random_query(&mut rng, n);
        let map = batch_probe(
            &model,
            &seq,
            &query,
            QueryMode::Query,
            ProbeOptions::default(),
        )
        .unwrap();
        let size = rng.random_range(1..=n);
        let mut group: Vec<usize> = (0..n).collect();
        for i in 0..size {
            let j = rng.random_range(i..n);
            group.swap(i, j);
        }
        group.truncate(size);
        let temporal = phrase_saliency(&map, &group).unwrap();
        for i in 0..m {
            let sum: f64 = group.iter().map(|&t| map.temporal_raw[t][i]).sum();
            worst = worst.max((temporal.raw[i] - sum).abs());
        }
        let frame = rng.random_range(0..m);
        let spatial = phrase_spatial(&map, &group, frame).unwrap();
        let rows = &map.spatial.as_ref().unwrap()[frame].raw;
        for c in 0..g * g {
            let sum: f64 = group.iter().map(|&t| rows[t][c]).sum();
            worst = worst.max((spatial.raw[c] - sum).abs());
        }
        maps.push(map);
    }
    outcome(
        worst <= 1e-12,
        format!("100 cases, max |difference| {worst:.2e}"),
    )
}

fn endpoints_or_degenerate(row: &[f64]) -> bool {
    if row.len() == 1 {
        return row[0] == 0.5;
    }
    is_degenerate(row)
        || (row.contains(&0.0) && row.contains(&1.0) && row.iter().all(|v| (0.0..=1.0).contains(v)))
}

fn normalization(maps: &[SaliencyMap]) -> Outcome {
    let mut alpha_err = 0.0f64;
    let mut rows = 0;
    let mut bad = 0;
    for map in maps {
        for row in &map.temporal_alpha {
            alpha_err = alpha_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let spatial = map.spatial.iter().flatten().flat_map(|f| &f.scaled);
        for row in map.temporal_scaled.iter().chain(spatial) {
            rows += 1;
            bad += usize::from(!endpoints_or_degenerate(row));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for _ in 0..1000 {
        let len = rng.random_range(1..20);
        let raw: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random_bool(0.2) {
                    1.5
                } else {
                    rng.random_range(0.0..10.0)
                }
            })
            .collect();
        rows += 1;
        bad += usize::from(!endpoints_or_degenerate(&scale_losses(&raw)));
    }
    let constant = scale_losses(&[2.0; 6]);
    bad += usize::from(!is_degenerate(&constant));
    outcome(
        alpha_err <= 1e-9 && bad == 0,
        format!(
            "{} maps, {rows} scaled rows, {bad} bad, max |sum alpha - 1| {alpha_err:.2e}",
            maps.len()
        ),
    )
}

fn full_input_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut checked = 0;
    let mut mismatches = 0;
    for (attention, encoder) in [
        (None, EncoderKind::Lstm),
        (Some(3), EncoderKind::Lstm),
        (None, EncoderKind::Mean),
    ] {
        for _ in 0..20 {
            let params = toy_params(rng.random(), attention, encoder);
            let model = Model::new(&params);
            let seq = random_seq(&mut rng, 1, 3);
            let len = rng.random_range(0..6);
            let prefix: Vec<usize> = std::iter::once(BOS)
                .chain((0..len).map(|_| rng.random_range(4..8)))
                .collect();
            let probe = probe_distribution(&model, &seq, Probe::Item(0), &prefix).unwrap();
            let full = model.next_word_distribution(&seq, &prefix).unwrap();
            checked += 1;
            let same = probe.probs().len() == full.probs().len()
                && probe
                    .probs()
                    .iter()
                    .zip(full.probs())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            mismatches += usize::from(!same);
        }
    }
    outcome(
        mismatches == 0,
        format!("{checked} cases, {mismatches} not bitwise identical"),
    )
}

fn baseline_sanity() -> Outcome {
    let g = 4;
    let region = BoundingRegion::new(g, vec![5, 6, 10], None).unwrap();
    let expected = region.coverage();
    let mut random = RandomBaseline::new(808);
    let n = 10_000;
    let hits = (0..n).filter(|_| region.contains(random.point(g))).count();
    let acc = hits as f64 / n as f64;
    let se = (expected * (1.0 - expected) / n as f64).sqrt();
    let z = (acc - expected).abs() / se;
    let regions = [&region, &region];
    let a = baselines(&regions, &[((0, 3), 8)], 1);
    let b = baselines(&regions, &[((0, 3), 8)], 2);
    let center = |rows: &[capsal::eval::BaselineRow]| {
        rows.iter()
            .find(|r| r.name == "center")
            .map(|r| r.pointing_accuracy)
    };
    let deterministic =
        center_cell(g) == center_cell(g) && center(&a) == center(&b) && center(&a).is_some();
    outcome(
        z < 3.0 && deterministic,
        format!(
            "random {acc:.4} vs {expected:.4} ({z:.2} SE); center cell {} deterministic: {deterministic}",
            center_cell(g)
        ),
    )
}

fn capsal(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_capsal"))
        .args(args)
        .env_remove("CAPSAL_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "capsal {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth, train, eval and one saliency export with the default configuration.
fn pipeline(root: &Path) -> Result<Duration, String> {
    if root.exists() {
        std::fs::remove_dir_all(root).map_err(|e| e.to_string())?;
    }
    let start = Instant::now();
    let (data, run) = (root.join("data"), root.join("run"));
    let (model, test) = (run.join("model.ckpt"), data.join("test.tsv"));
    capsal(&["synth", "--out", s(&data)])?;
    capsal(&["train", "--data", s(&data), "--out", s(&run)])?;
    capsal(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        s(&test),
        "--out",
        s(&root.join("eval")),
    ])?;
    capsal(&[
        "saliency",
        "--model",
        s(&model),
        "--data",
        s(&test),
        "--index",
        "0",
        "--use-predicted",
        "--spatial",
        "--out",
        s(&root.join("saliency")),
    ])?;
    Ok(start.elapsed())
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn end_to_end(root: &Path) -> Result<(Outcome, f64), String> {
    let elapsed = pipeline(root)?;
    let report = read_json(&root.join("eval/report.json"))?;
    let num = |v: &Value| v.as_f64().unwrap_or(f64::NAN);
    let exact = num(&report["caption"]["exact_match"]);
    let categories = report["categories"].as_array().cloned().unwrap_or_default();
    let noun = categories
        .iter()
        .find(|c| c["category"] == "noun")
        .ok_or("report has no noun category")?;
    let pointing = num(&noun["pointing_accuracy"]);
    let correctness = num(&noun["attention_correctness"]);
    let random = report["baselines"]
        .as_array()
        .and_then(|b| b.iter().find(|r| r["name"] == "random"))
        .map(|r| num(&r["pointing_accuracy"]))
        .ok_or("report has no random baseline")?;
    let temporal = num(&report["temporal_accuracy"]);
    let uniform_region = 1.0 / 16.0;
    let uniform_temporal = report["baselines"]
        .as_array()
        .and_then(|b| b.iter().find(|r| r["name"] == "uniform"))
        .map(|r| num(&r["temporal_localization"]))
        .ok_or("report has no uniform baseline")?;
    let log = std::fs::read_to_string(root.join("run/train.log")).map_err(|e| e.to_string())?;
    let best_val = log
        .lines()
        .filter_map(|l| l.split('\t').nth(2)?.parse::<f64>().ok())
        .fold(f64::INFINITY, f64::min);

    let checks = [
        exact >= 0.90,
        pointing >= 0.60 && pointing >= 5.0 * random.max(uniform_region),
        correctness >= 3.0 * uniform_region,
        temporal >= 0.70 && temporal > uniform_temporal,
        elapsed < Duration::from_secs(15 * 60),
    ];
    let detail = format!(
        "exact-match {exact:.3}; noun pointing {pointing:.3} (random {random:.3}); \
         attention correctness {correctness:.3} (uniform {uniform_region:.4}); \
         temporal {temporal:.3} (uniform {uniform_temporal:.3}); best val loss {best_val:.3}; \
         pipeline {:.0}s",
        elapsed.as_secs_f64()
    );
    Ok((outcome(checks.iter().all(|&c| c), detail), exact))
}

fn attention_parity(root: &Path, base_exact: f64) -> Result<Outcome, String> {
    let data = root.join("data");
    let out = root.join("attention");
    capsal(&[
        "train",
        "--set",
        "attention=16",
        "--data",
        s(&data),
        "--out",
        s(&out),
    ])?;
    let params = checkpoint::load(&out.join("model.ckpt")).map_err(|e| e.to_string())?;
    let samples = load_samples(&data.join("test.tsv")).map_err(|e| e.to_string())?;
    let acc = caption_accuracy(&Model::new(&params), &samples, 20, InputMode::Video)
        .map_err(|e| e.to_string())?;
    let gap = acc.exact_match - base_exact;
    Ok(outcome(
        gap.abs() <= 0.05,
        format!(
            "attention exact-match {:.3} vs base {base_exact:.3} (difference {gap:+.3})",
            acc.exact_match
        ),
    ))
}

fn determinism(first: &Path, second: &Path) -> Result<Outcome, String> {
    pipeline(second)?;
    let files = [
        "data/train.tsv",
        "data/test.tsv",
        "run/model.ckpt",
        "run/train.log",
        "eval/report.json",
        "eval/report.txt",
        "saliency/saliency.json",
    ];
    let mut differ = Vec::new();
    for f in files {
        let a = std::fs::read(first.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(second.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            differ.push(f);
        }
    }
    Ok(outcome(
        differ.is_empty(),
        if differ.is_empty() {
            format!("{} artifacts byte-identical across two runs", files.len())
        } else {
            format!("differing: {}", differ.join(", "))
        },
    ))
}

fn report(n: usize, name: &str, result: Result<Outcome, String>, failed: &mut usize) {
    let o = result.unwrap_or_else(|e| outcome(false, e));
    *failed += usize::from(!o.pass);
    println!(
        "{} {n:>2} {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut failed = 0;
    let mut maps = Vec::new();
    report(
        1,
        "gradient correctness",
        Ok(gradient_correctness()),
        &mut failed,
    );
    report(
        2,
        "word loss equals one-hot KL",
        Ok(word_loss_reduction()),
        &mut failed,
    );
    report(
        3,
        "batched probing",
        Ok(batch_equivalence(&mut maps)),
        &mut failed,
    );
    report(
        4,
        "phrase additivity",
        Ok(phrase_additivity(&mut maps)),
        &mut failed,
    );
    report(5, "normalization", Ok(normalization(&maps)), &mut failed);
    report(
        6,
        "full-input consistency",
        Ok(full_input_consistency()),
        &mut failed,
    );
    let first = root.join("run1");
    let e2e = end_to_end(&first);
    let base_exact = e2e.as_ref().ok().map(|(_, e)| *e);
    report(
        7,
        "end-to-end synthetic run",
        e2e.map(|(o, _)| o),
        &mut failed,
    );
    report(8, "baseline sanity", Ok(baseline_sanity()), &mut failed);
    let parity = match base_exact {
        Some(e) => attention_parity(&first, e),
        None => Err("base pipeline did not complete".into()),
    };
    report(9, "soft-attention parity", parity, &mut failed);
    report(
        10,
        "determinism",
        determinism(&first, &root.join("run2")),
        &mut failed,
    );
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
