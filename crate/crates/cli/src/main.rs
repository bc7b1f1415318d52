use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use voxc_core::audio::{load_manifest, load_wav, synth_corpus, SynthSpec, UtteranceRecord};
use voxc_core::config::Config;
use voxc_core::decode::{beam_decode, frames_of, NGramLm};
use voxc_core::report::eval_report;
use voxc_core::speaker::{enroll, identify, ProfileStore};
use voxc_core::train::{finetune_run, pretrain_run, write_metrics, Checkpoint};

const SEED_ENV: &str = "VOXC_SEED";

#[derive(Parser)]
#[command(name = "voxc", version, about = "Self-supervised speech recognition and speaker identification")]
struct Cli {
    /// JSON config; commands that read a checkpoint default to its stored config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and VOXC_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic tone corpus (WAVs plus manifest).
    Synth(SynthArgs),
    /// Self-supervised pretraining from scratch.
    Pretrain(PretrainArgs),
    /// CTC fine-tuning of a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Train a word n-gram language model.
    LmTrain(LmTrainArgs),
    /// Transcribe one WAV file.
    Decode(DecodeArgs),
    /// WER report over a manifest, bucketed by duration.
    Eval(EvalArgs),
    /// Build speaker profiles from labelled utterances.
    Enroll(EnrollArgs),
    /// Identify the speaker of one WAV file.
    Identify(IdentifyArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    min_duration: Option<f64>,
    #[arg(long)]
    max_duration: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Per-step metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    head_lr: Option<f64>,
    #[arg(long)]
    body_lr: Option<f64>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct LmTrainArgs {
    /// Text corpus, one sentence per line.
    #[arg(long, conflicts_with = "manifest")]
    corpus: Option<PathBuf>,
    /// Use the transcripts of a manifest as the corpus.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args)]
struct DecodeOpts {
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    lm_weight: Option<f64>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    wav: Option<PathBuf>,
    #[command(flatten)]
    opts: DecodeOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for buckets.csv and decodes.tsv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    bucket_seconds: Option<f64>,
    #[command(flatten)]
    opts: DecodeOpts,
}

#[derive(Args)]
struct EnrollArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output profile store (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IdentifyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn need<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().with_context(|| format!("missing required input {flag}"))
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a seed"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

/// Resolves the config: `--config`, else `fallback`, else defaults; then the
/// seed overrides. Flag overrides are applied by each command.
fn base_config(cli_config: &Option<PathBuf>, seed: Option<u64>, fallback: Option<&Config>) -> Result<Config> {
    let mut cfg = match (cli_config, fallback) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(c)) => c.clone(),
        (None, None) => Config::default(),
    };
    if let Some(s) = seed_from_env()? {
        cfg.seed = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T: Copy>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn load_records(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let records = load_manifest(path)?;
    log::info!("{}: {} utterances", path.display(), records.len());
    Ok(records)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn apply_decode_opts(cfg: &mut Config, opts: &DecodeOpts) -> Result<Option<NGramLm>> {
    set(&mut cfg.decode.beam_width, opts.beam_width);
    set(&mut cfg.decode.lm_weight, opts.lm_weight);
    cfg.validate()?;
    opts.lm
        .as_ref()
        .map(|p| NGramLm::load(p).with_context(|| format!("loading language model {}", p.display())))
        .transpose()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let out = need(&a.out, "--out")?;
            let cfg = base_config(&cli.config, cli.seed, None)?;
            let mut spec = SynthSpec {
                seed: cfg.seed,
                ..SynthSpec::default()
            };
            set(&mut spec.n_speakers, a.speakers);
            set(&mut spec.utterances_per_speaker, a.utterances);
            set(&mut spec.duration_range.0, a.min_duration);
            set(&mut spec.duration_range.1, a.max_duration);
            let manifest = synth_corpus(&spec, out)?;
            println!("{}", manifest.display());
        }
        Command::Pretrain(a) => {
            let manifest = need(&a.manifest, "--manifest")?;
            let out = need(&a.out, "--out")?;
            let mut cfg = base_config(&cli.config, cli.seed, None)?;
            set(&mut cfg.pretrain.steps, a.steps);
            set(&mut cfg.pretrain.batch_size, a.batch_size);
            set(&mut cfg.pretrain.peak_lr, a.lr);
            cfg.validate()?;
            let records = load_records(manifest)?;
            let (ck, metrics) = pretrain_run(&cfg, &records, cfg.seed)?;
            ck.save(out)?;
            if let Some(m) = &a.metrics {
                write_metrics(m, &metrics)?;
            }
            println!("{}\t{}", out.display(), ck.fingerprint());
        }
        Command::Finetune(a) => {
            let ck_path = need(&a.checkpoint, "--checkpoint")?;
            let manifest = need(&a.manifest, "--manifest")?;
            let out = need(&a.out, "--out")?;
            let pre = load_checkpoint(ck_path)?;
            let mut cfg = base_config(&cli.config, cli.seed, Some(&pre.config))?;
            set(&mut cfg.finetune.steps, a.steps);
            set(&mut cfg.finetune.batch_size, a.batch_size);
            set(&mut cfg.finetune.head_lr, a.head_lr);
            set(&mut cfg.finetune.body_lr, a.body_lr);
            cfg.validate()?;
            let records = load_records(manifest)?;
            let (ck, metrics) = finetune_run(&cfg, &pre, &records, cfg.seed)?;
            ck.save(out)?;
            if let Some(m) = &a.metrics {
                write_metrics(m, &metrics)?;
            }
            println!("{}\t{}", out.display(), ck.fingerprint());
        }
        Command::LmTrain(a) => {
            let out = need(&a.out, "--out")?;
            let mut cfg = base_config(&cli.config, cli.seed, None)?;
            set(&mut cfg.lm.order, a.order);
            cfg.validate()?;
            let corpus = match (&a.corpus, &a.manifest) {
                (Some(p), _) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                (None, Some(m)) => load_records(m)?
                    .iter()
                    .map(|r| r.transcript.as_str())
                    .collect::<Vec<_>>()
                    .join("\n"),
                (None, None) => bail!("missing required input --corpus or --manifest"),
            };
            let lm = NGramLm::train(&corpus, cfg.lm.order, cfg.lm.backoff)?;
            lm.save(out)?;
            println!("{}\t{} words", out.display(), lm.vocab().len());
        }
        Command::Decode(a) => {
            let ck_path = need(&a.checkpoint, "--checkpoint")?;
            let wav = need(&a.wav, "--wav")?;
            let ck = load_checkpoint(ck_path)?;
            let mut cfg = base_config(&cli.config, cli.seed, Some(&ck.config))?;
            let lm = apply_decode_opts(&mut cfg, &a.opts)?;
            let vocab = ck
                .vocab
                .as_ref()
                .filter(|_| ck.model.has_ctc_head())
                .context("checkpoint has no CTC head; fine-tune it first")?;
            let lp = ck.model.ctc_log_probs(&load_wav(wav)?)?;
            let decoded = beam_decode(&frames_of(&lp), vocab, lm.as_ref(), &cfg.decode)?;
            println!("{}", decoded.text.split_whitespace().collect::<Vec<_>>().join(" "));
        }
        Command::Eval(a) => {
            let ck_path = need(&a.checkpoint, "--checkpoint")?;
            let manifest = need(&a.manifest, "--manifest")?;
            let ck = load_checkpoint(ck_path)?;
            let mut cfg = base_config(&cli.config, cli.seed, Some(&ck.config))?;
            set(&mut cfg.report.bucket_seconds, a.bucket_seconds);
            let lm = apply_decode_opts(&mut cfg, &a.opts)?;
            let records = load_records(manifest)?;
            let report = eval_report(&ck, &records, lm.as_ref(), &cfg.decode, cfg.report.bucket_seconds)?;
            let csv = report.buckets_csv();
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let write = |name: &str, text: &str| {
                    let p = dir.join(name);
                    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
                };
                write("buckets.csv", &csv)?;
                write("decodes.tsv", &report.dump_tsv())?;
            }
            print!("{csv}");
            println!("aggregate_wer,{}", report.aggregate_text());
        }
        Command::Enroll(a) => {
            let ck_path = need(&a.checkpoint, "--checkpoint")?;
            let manifest = need(&a.manifest, "--manifest")?;
            let out = need(&a.out, "--out")?;
            let ck = load_checkpoint(ck_path)?;
            let records = load_records(manifest)?;
            let store = enroll(&ck, &records)?;
            store.save(out)?;
            for p in store.profiles.values() {
                println!("{}\t{}", p.speaker_id, p.n_enrolled);
            }
        }
        Command::Identify(a) => {
            let ck_path = need(&a.checkpoint, "--checkpoint")?;
            let profiles = need(&a.profiles, "--profiles")?;
            let wav = need(&a.wav, "--wav")?;
            let ck = load_checkpoint(ck_path)?;
            let mut cfg = base_config(&cli.config, cli.seed, Some(&ck.config))?;
            set(&mut cfg.speaker.threshold, a.threshold);
            cfg.validate()?;
            let store = ProfileStore::load(profiles)?;
            let id = identify(&ck, &store, wav, cfg.speaker.threshold)?;
            let margin = id.margin.map_or_else(|| "N/A".to_string(), |m| m.to_string());
            println!("{}\t{}\t{}", id.label(), id.similarity, margin);
        }
    }
    Ok(())
}
