//! Command-line pipeline: synth → train → caption / saliency / eval.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{RunConfig, KEYS};

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::saliency::{
    batch_probe, to_pgm, PhraseGroup, ProbeOptions, Query, QueryMode, SaliencyMap,
};
use crate::seq2seq::{checkpoint, DescriptorSequence, Encoding, Model, ModelParams, BOS};
use crate::synthworld::{
    generate_dataset, load_samples, save_samples, vocabulary, InputMode, Sample,
};
use crate::training::{frame_target, train, Example, TrainStatus};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "CAPSAL_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "capsal",
    version,
    about = "Caption-guided saliency on synthetic scenes"
)]
pub struct Cli {
    /// Config file of key=value lines (default: $CAPSAL_CONFIG, else built-in defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set epochs=5`. May be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test splits.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a captioner on a synthesized dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print greedy captions for the scenes of a dataset file.
    Caption {
        #[command(flatten)]
        input: ModelInput,
        /// Caption only this scene.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Explain a caption of one scene.
    Saliency(SaliencyArgs),
    /// Score localization and captioning on a dataset file.
    Eval {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// List config keys with their defaults.
    Keys,
}

#[derive(Debug, Args)]
pub struct ModelInput {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset file (e.g. test.tsv).
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Scene index within the dataset file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Sentence to explain (any words; unknown ones are flagged).
    #[arg(
        long,
        conflicts_with = "use_predicted",
        required_unless_present = "use_predicted"
    )]
    pub query: Option<String>,
    /// Explain the model's own greedy caption.
    #[arg(long)]
    pub use_predicted: bool,
    /// Also compute per-cell maps and write graymaps.
    #[arg(long)]
    pub spatial: bool,
    /// Phrase groups as `label:i,j;label:k` over 0-based word positions.
    #[arg(long)]
    pub phrases: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolves the configuration: file (flag or environment), then overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut config = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        config.set_pair(pair)?;
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_split(path: &Path) -> Result<Vec<Sample>> {
    load_samples(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })
}

fn load_model(path: &Path) -> Result<ModelParams> {
    checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })
}

pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let config = resolve_config(&cli)?;
    match cli.command {
        Command::Synth { out } => cmd_synth(&config, &out, stdout),
        Command::Train { data, out } => cmd_train(&config, &data, &out, stdout),
        Command::Caption { input, index } => cmd_caption(&config, &input, index, stdout),
        Command::Saliency(args) => cmd_saliency(&config, &args, stdout),
        Command::Eval { input, out } => cmd_eval(&config, &input, &out, stdout),
        Command::Keys => {
            for (k, v, doc) in KEYS {
                writeln!(stdout, "{k}={v}\t# {doc}")?;
            }
            Ok(())
        }
    }
}

pub fn cmd_synth(config: &RunConfig, out: &Path, stdout: &mut dyn std::io::Write) -> Result<()> {
    let synth = config.synth()?;
    let (seed, n_train, n_val, n_test) = config.splits()?;
    let ds = generate_dataset(seed, n_train, n_val, n_test, &synth)?;
    create_dir(out)?;
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        save_samples(split, synth.pooling, &out.join(format!("{name}.tsv")))?;
    }
    config.echo_into(out)?;
    writeln!(
        stdout,
        "wrote {n_train}/{n_val}/{n_test} scenes to {}",
        out.display()
    )?;
    Ok(())
}

pub fn cmd_train(
    config: &RunConfig,
    data: &Path,
    out: &Path,
    stdout: &mut dyn std::io::Write,
) -> Result<()> {
    let mode = config.input_mode()?;
    let vocab = vocabulary();
    let prepare = |name: &str| -> Result<(Vec<Sample>, Vec<Vec<usize>>)> {
        let samples = load_split(&data.join(format!("{name}.tsv")))?;
        let targets = samples
            .iter()
            .map(|s| frame_target(&vocab.encode(&s.scene.caption).ids))
            .collect();
        Ok((samples, targets))
    };
    let (train_samples, train_targets) = prepare("train")?;
    let (val_samples, val_targets) = prepare("val")?;
    let train_inputs = inputs(&train_samples, mode)?;
    let val_inputs = inputs(&val_samples, mode)?;
    let train_set = examples(&train_inputs, &train_targets);
    let val_set = examples(&val_inputs, &val_targets);

    let mut model_config = config.model()?;
    model_config.d_feat = train_inputs[0].dim();
    let init = ModelParams::init(model_config, vocab, config.init_seed()?)?;
    create_dir(out)?;
    config.echo_into(out)?;
    let mut log = String::new();
    let outcome = train(init, &train_set, &val_set, &config.train()?, |entry, _| {
        log.push_str(&entry.to_line());
        log.push('\n');
        eprintln!("{}", entry.to_line());
    })?;
    std::fs::write(out.join("train.log"), &log)?;
    checkpoint::save(&outcome.best, &out.join("model.ckpt"))?;
    match outcome.status {
        TrainStatus::Completed => {
            writeln!(
                stdout,
                "best epoch {} written to {}",
                outcome.best_epoch,
                out.join("model.ckpt").display()
            )?;
            Ok(())
        }
        TrainStatus::Diverged { epoch, reason } => Err(Error::Numeric(format!(
            "training diverged at epoch {epoch}: {reason}; best checkpoint kept"
        ))),
    }
}

fn examples<'a>(seqs: &'a [DescriptorSequence], targets: &'a [Vec<usize>]) -> Vec<Example<'a>> {
    seqs.iter()
        .zip(targets)
        .map(|(seq, target)| Example { seq, target })
        .collect()
}

fn inputs(samples: &[Sample], mode: InputMode) -> Result<Vec<DescriptorSequence>> {
    if samples.is_empty() {
        return Err(Error::contract("dataset split is empty"));
    }
    samples
        .iter()
        .map(|s| s.model_input(mode).map(|c| c.into_owned()))
        .collect()
}

fn check_model_matches(params: &ModelParams, samples: &[Sample], mode: InputMode) -> Result<()> {
    let d = samples
        .first()
        .ok_or_else(|| Error::contract("dataset file has no scenes"))?
        .model_input(mode)?
        .dim();
    if d != params.config.d_feat {
        return Err(Error::contract(format!(
            "descriptor dimension {d} does not match checkpoint d_feat {}",
            params.config.d_feat
        )));
    }
    Ok(())
}

pub fn cmd_caption(
    config: &RunConfig,
    input: &ModelInput,
    index: Option<usize>,
    stdout: &mut dyn std::io::Write,
) -> Result<()> {
    let params = load_model(&input.model)?;
    let samples = load_split(&input.data)?;
    let mode = config.input_mode()?;
    check_model_matches(&params, &samples, mode)?;
    let model = Model::new(&params);
    let max_len = config.eval()?.max_caption_len;
    let chosen: Vec<usize> = match index {
        Some(i) if i >= samples.len() => {
            return Err(Error::contract(format!(
                "scene {i} out of range ({} scenes)",
                samples.len()
            )))
        }
        Some(i) => vec![i],
        None => (0..samples.len()).collect(),
    };
    for i in chosen {
        let ids = model.greedy_caption(&*samples[i].model_input(mode)?, max_len)?;
        writeln!(stdout, "{i}\t{}", params.vocab.decode(&ids).join(" "))?;
    }
    Ok(())
}

/// Parses `label:1,2;label:3` into phrase groups.
pub fn parse_phrases(text: &str) -> Result<Vec<PhraseGroup>> {
    text.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (label, positions) = p
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("phrase {p:?} must look like label:i,j")))?;
            let positions = positions
                .split(',')
                .map(|i| {
                    i.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!("bad word position {i:?} in phrase {label:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PhraseGroup {
                label: label.trim().to_string(),
                positions,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct PhraseExport {
    label: String,
    positions: Vec<usize>,
    temporal_raw: Vec<f64>,
    temporal_scaled: Vec<f64>,
}

#[derive(Serialize)]
struct SaliencyExport<'a> {
    scene: usize,
    #[serde(flatten)]
    map: &'a SaliencyMap,
    phrase_maps: Vec<PhraseExport>,
    /// Soft-attention weights of attention checkpoints, one row per word.
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_alpha: Option<Vec<Vec<f64>>>,
}

pub fn cmd_saliency(
    config: &RunConfig,
    args: &SaliencyArgs,
    stdout: &mut dyn std::io::Write,
) -> Result<()> {
    let params = load_model(&args.input.model)?;
    let samples = load_split(&args.input.data)?;
    let mode = config.input_mode()?;
    check_model_matches(&params, &samples, mode)?;
    let sample = samples.get(args.index).ok_or_else(|| {
        Error::contract(format!(
            "scene {} out of range ({} scenes)",
            args.index,
            samples.len()
        ))
    })?;
    let seq = sample.model_input(mode)?;
    let model = Model::new(&params);
    let options = config.eval()?;
    let phrases = match &args.phrases {
        Some(text) => parse_phrases(text)?,
        None => Vec::new(),
    };
    let (query, qmode) = match (&args.query, args.use_predicted) {
        (Some(text), false) => {
            let words: Vec<&str> = text.split_whitespace().collect();
            (
                Query::new(&params.vocab, &words, phrases)?,
                QueryMode::Query,
            )
        }
        (None, true) => {
            let ids = model.greedy_caption(&seq, options.max_caption_len)?;
            if ids.is_empty() {
                return Err(Error::contract("the predicted caption is empty"));
            }
            let mut q = Query::from_ids(&params.vocab, &ids)?;
            q = Query::new(&params.vocab, &q.words, phrases)?;
            (q, QueryMode::Predicted)
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --query and --use-predicted".into(),
            ))
        }
    };
    let probe = ProbeOptions {
        spatial: args.spatial,
        max_batch: options.probe.max_batch,
    };
    let map = batch_probe(&model, &seq, &query, qmode, probe)?;
    let phrase_maps = query
        .phrases
        .iter()
        .map(|g| {
            let p = crate::saliency::phrase_saliency(&map, &g.positions)?;
            Ok(PhraseExport {
                label: g.label.clone(),
                positions: g.positions.clone(),
                temporal_raw: p.raw,
                temporal_scaled: p.scaled,
            })
        })
        .collect::<Result<_>>()?;
    let attention_alpha = if params.has_attention() {
        let encoding: Encoding = model.encode(&seq)?;
        let tokens: Vec<usize> = std::iter::once(BOS)
            .chain(query.ids.iter().copied())
            .collect();
        let mut alphas = model.soft_attention_decode(&encoding, &tokens)?.alphas;
        alphas.truncate(query.len());
        Some(alphas)
    } else {
        None
    };
    create_dir(&args.out)?;
    config.echo_into(&args.out)?;
    let export = SaliencyExport {
        scene: args.index,
        map: &map,
        phrase_maps,
        attention_alpha,
    };
    std::fs::write(
        args.out.join("saliency.json"),
        serde_json::to_string_pretty(&export)?,
    )?;
    let mut images = 0;
    if let Some(frames) = &map.spatial {
        let px = config.heatmap_px()?;
        for f in frames {
            for (t, row) in f.scaled.iter().enumerate() {
                let name = format!(
                    "word{t:02}_{}_frame{:02}.pgm",
                    sanitize(&query.words[t]),
                    f.frame
                );
                std::fs::write(args.out.join(name), to_pgm(row, f.grid, px)?)?;
                images += 1;
            }
        }
    }
    for (word, unk) in query.words.iter().zip(&query.unk) {
        writeln!(stdout, "{word}\t{}", if *unk { "unk" } else { "ok" })?;
    }
    if images > 0 {
        writeln!(
            stdout,
            "wrote saliency.json and {images} graymaps to {}",
            args.out.display()
        )?;
    } else {
        writeln!(stdout, "wrote saliency.json to {}", args.out.display())?;
    }
    Ok(())
}

fn sanitize(word: &str) -> String {
    word.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

pub fn cmd_eval(
    config: &RunConfig,
    input: &ModelInput,
    out: &Path,
    stdout: &mut dyn std::io::Write,
) -> Result<()> {
    let params = load_model(&input.model)?;
    let samples = load_split(&input.data)?;
    let options = config.eval()?;
    check_model_matches(&params, &samples, options.mode)?;
    for s in &samples {
        let enc = params.vocab.encode(&s.scene.caption);
        if let Some(pos) = enc.unk.iter().position(|&u| u) {
            return Err(Error::Vocabulary(format!(
                "caption word {:?} is not in the checkpoint vocabulary",
                s.scene.caption[pos]
            )));
        }
    }
    let model = Model::new(&params);
    let report = evaluate(&model, &samples, options)?;
    create_dir(out)?;
    config.echo_into(out)?;
    let table = report.to_table();
    std::fs::write(out.join("report.txt"), &table)?;
    std::fs::write(out.join("report.json"), report.to_json()?)?;
    write!(stdout, "{table}")?;
    Ok(())
}

/// Single-line, machine-parsable error message.
pub fn error_line(err: &Error) -> String {
    let msg = err
        .to_string()
        .replace('\\', "\\\\")
        .replace('"', "\\\"")
        .replace('\n', " ");
    format!("error: kind={} msg=\"{msg}\"", err.kind())
}
