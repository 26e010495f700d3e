use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use mtlse::probes::{
    aux_length, aux_word_content, aux_word_order, cosine_eval, extract_features, extract_sentence_features,
    write_probe_report, EncoderTag, ProbeConfig, ProbeKind, ProbeReportRow, Representation, ScoredPair,
};
use mtlse::textdata::{tokenize, Dataset, Example, Vocabulary};
use mtlse::trainer::{
    grad_check_config, load_checkpoint, prepare_data, save_checkpoint, train_multitask_with, write_metrics,
    TrainConfig, DEFAULT_EPS, DESK_GRADCHECK_CONFIG,
};
use mtlse::{Error, Result};

#[derive(Parser)]
#[command(name = "mtlse", version, about = "Multi-task BiLSTM-Max sentence encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, metrics.csv and manifest.txt to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode sentences (one per line) or tab-separated sentence pairs to a feature CSV.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// shared, private:<task>, concat or concat:<task>
        #[arg(long, default_value = "shared")]
        encoder: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run an auxiliary probe on sentences (one per line).
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = ["length", "content", "order"])]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "shared")]
        encoder: String,
        /// logistic or mlp-<hidden>
        #[arg(long, default_value = "mlp-512")]
        probe: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Optional probe report CSV.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Spearman correlation of cosine similarities with gold scores (tab-separated pairs).
    EvalSts {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "shared")]
        encoder: String,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        /// Defaults to a two-task ASP desk configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Framework(_) | Error::InvalidArgument(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train { config, out, seed } => train(&config, &out, seed),
        Command::Encode {
            model,
            input,
            encoder,
            output,
        } => encode(&model, &input, &encoder, &output),
        Command::Probe {
            model,
            task,
            data,
            encoder,
            probe,
            seed,
            output,
        } => probe_cmd(&model, &task, &data, &encoder, &probe, seed, output.as_deref()),
        Command::EvalSts { model, pairs, encoder } => eval_sts(&model, &pairs, &encoder),
        Command::Gradcheck { config, eps } => gradcheck(config.as_deref(), eps),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Writes a run manifest. Metadata lines are comments, so a training manifest
/// is itself a valid config that reproduces the run.
fn write_manifest(path: &Path, command: &str, paths: &[(&str, &Path)], seed: Option<u64>, body: &str) -> Result<()> {
    let mut text = format!("# command: {command}\n# started: {} (unix seconds)\n", timestamp());
    for (k, p) in paths {
        text.push_str(&format!("# {k}: {}\n", p.display()));
    }
    if let Some(s) = seed {
        text.push_str(&format!("# seed: {s}\n"));
    }
    text.push_str(body);
    fs::write(path, text).map_err(io_err(path))
}

fn train(config: &Path, out: &Path, seed: Option<u64>) -> Result<u8> {
    let mut cfg = TrainConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_manifest(
        &out.join("manifest.txt"),
        "train",
        &[("config", config), ("out", out)],
        Some(cfg.seed),
        &cfg.to_text(),
    )?;
    let data = prepare_data(&cfg)?;
    let outcome = train_multitask_with(&cfg, &data, &mut |state, rows| {
        let devs: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.task, r.dev_acc)).collect();
        eprintln!("epoch {:>3} lr {:.3e} dev {}", state.epoch, rows[0].lr, devs.join(" "));
    })?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&outcome.model, &ckpt)?;
    write_metrics(&out.join("metrics.csv"), &outcome.metrics)?;
    println!(
        "trained {} epochs; best mean dev accuracy {:.4} at epoch {}; checkpoint {}",
        outcome.state.epoch,
        outcome.state.best_dev.unwrap_or(0.0),
        outcome.state.best_epoch.unwrap_or(0),
        ckpt.display()
    );
    Ok(0)
}

fn encode_line(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    vocab.encode(&tokenize(text))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

fn encode(model_path: &Path, input: &Path, encoder: &str, output: &Path) -> Result<u8> {
    let tag: EncoderTag = encoder.parse()?;
    let model = load_checkpoint(model_path)?;
    tag.sentence_dim(&model)?;
    let lines = read_lines(input)?;
    if lines.is_empty() {
        return Err(Error::Data(format!("{}: no input lines", input.display())));
    }
    let manifest = PathBuf::from(format!("{}.manifest.txt", output.display()));
    write_manifest(
        &manifest,
        "encode",
        &[("model", model_path), ("input", input), ("output", output)],
        None,
        &format!("# encoder: {tag}\n"),
    )?;
    let pairs = lines[0].contains('\t');
    let features = if pairs {
        let mut examples = Vec::with_capacity(lines.len());
        for (n, l) in lines.iter().enumerate() {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() < 2 {
                return Err(Error::Data(format!("{}:{}: expected a tab-separated pair", input.display(), n + 1)));
            }
            examples.push(Example {
                task: String::new(),
                tokens1: encode_line(&model.vocab, cols[0]),
                tokens2: encode_line(&model.vocab, cols[1]),
                label: 0,
            });
        }
        extract_features(&model, &Dataset { task: String::new(), examples }, &tag)?
    } else {
        let sentences: Vec<Vec<usize>> = lines.iter().map(|l| encode_line(&model.vocab, l)).collect();
        extract_sentence_features(&model, &sentences, &tag)?
    };
    features.write_csv(output)?;
    println!("wrote {} × {} features to {}", features.len(), features.dim(), output.display());
    Ok(0)
}

fn probe_cmd(
    model_path: &Path,
    task: &str,
    data: &Path,
    encoder: &str,
    probe: &str,
    seed: u64,
    output: Option<&Path>,
) -> Result<u8> {
    let tag: EncoderTag = encoder.parse()?;
    let kind: ProbeKind = probe.parse()?;
    let model = load_checkpoint(model_path)?;
    tag.sentence_dim(&model)?;
    let sentences: Vec<Vec<usize>> = read_lines(data)?.iter().map(|l| encode_line(&model.vocab, l)).collect();
    if let Some(out) = output {
        write_manifest(
            &PathBuf::from(format!("{}.manifest.txt", out.display())),
            "probe",
            &[("model", model_path), ("data", data), ("output", out)],
            Some(seed),
            &format!("# task: {task}\n# encoder: {tag}\n# probe: {kind}\n"),
        )?;
    }
    let cfg = ProbeConfig {
        kind,
        ..ProbeConfig::logistic(seed)
    };
    let rep = Representation::Encoder { model: &model, tag: &tag };
    let result = match task {
        "length" => aux_length(&rep, &sentences, &cfg)?,
        "content" => aux_word_content(&rep, &model.embeddings, &sentences, &cfg)?,
        "order" => aux_word_order(&rep, &model.embeddings, &sentences, &cfg)?,
        other => return Err(Error::Config(format!("unknown probe task {other:?}"))),
    };
    if let Some(out) = output {
        let row = |metric: &str, value| ProbeReportRow {
            probe: format!("{task}/{kind}"),
            encoder_tag: tag.to_string(),
            metric: metric.into(),
            value,
            seed,
        };
        write_probe_report(
            out,
            &[row("train_accuracy", result.train_accuracy), row("test_accuracy", result.test_accuracy)],
        )?;
    }
    println!("accuracy={}", result.test_accuracy);
    Ok(0)
}

fn eval_sts(model_path: &Path, pairs_path: &Path, encoder: &str) -> Result<u8> {
    let tag: EncoderTag = encoder.parse()?;
    let model = load_checkpoint(model_path)?;
    tag.sentence_dim(&model)?;
    let mut pairs = Vec::new();
    for (n, l) in read_lines(pairs_path)?.iter().enumerate() {
        let cols: Vec<&str> = l.split('\t').collect();
        let gold = cols.get(2).and_then(|g| g.trim().parse::<f64>().ok());
        let (Some(gold), true) = (gold, cols.len() == 3) else {
            return Err(Error::Data(format!(
                "{}:{}: expected sentence1<TAB>sentence2<TAB>score",
                pairs_path.display(),
                n + 1
            )));
        };
        pairs.push(ScoredPair {
            first: encode_line(&model.vocab, cols[0]),
            second: encode_line(&model.vocab, cols[1]),
            gold,
        });
    }
    let (rho, _) = cosine_eval(&model, &tag, &pairs)?;
    println!("pairs={}", pairs.len());
    println!("spearman={rho}");
    Ok(0)
}

fn gradcheck(config: Option<&Path>, eps: f64) -> Result<u8> {
    let cfg = match config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::from_text(DESK_GRADCHECK_CONFIG, Path::new("."), "desk gradcheck config")?,
    };
    let report = grad_check_config(&cfg, eps)?;
    println!("{report}");
    if report.max_rel() < GRADCHECK_TOLERANCE {
        Ok(0)
    } else {
        eprintln!("gradient check failed: max relative error {:.3e} ≥ {GRADCHECK_TOLERANCE:e}", report.max_rel());
        Ok(4)
    }
}
