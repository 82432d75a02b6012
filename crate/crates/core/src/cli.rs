//! The `msgcoop` command line.
//!
//! Exit codes: 0 on success, 1 for domain errors (bad config file, missing
//! input, failed check), 2 for usage errors (unknown verb or flag, invalid
//! flag value). Results go to stdout, diagnostics to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::descriptions::{
    fetch_all, load_records, read_cassette, save_records, records_to_json, DescriptionClient,
    DescriptionRecord, DescriptionRequest, FixtureClient, HttpChatClient, LiveConfig, ReplayClient,
};
use crate::diagnostics::{gradcheck, selftest, ToyShape};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate, generate_dataset, zero_shot_baseline, EvalReport, SyntheticDataset};
use crate::trainer::{ablate, resume, train, AblationAxis, Checkpoint, Guidance, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "msgcoop", version, about = "Multi-prompt semantic-guided context optimization")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect raw class descriptions from fixtures, a live endpoint or a cassette.
    GenerateDescriptions(GenerateArgs),
    /// Keep the k most mutually similar descriptions of every class.
    Filter(FilterArgs),
    /// Train the context bank and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the zero-shot template) on base and novel classes.
    Eval(EvalArgs),
    /// Sweep one setting and tabulate base/novel/HM.
    Ablate(AblateArgs),
    /// Finite-difference check of the analytic gradient on a toy problem.
    Gradcheck(GradcheckArgs),
    /// Run the built-in property suite.
    Selftest(SelftestArgs),
}

/// Every configuration key as a flag; each overrides `--config`.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    /// Key-value config file (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting preset before the file and flags: desk or paper.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, allow_hyphen_values = true)]
    prompts: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    context_len: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    vocab_size: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    token_dim: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    hidden_dim: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    embed_dim: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    feature_dim: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    identity_image: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    sigma_init: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lr: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    momentum: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    schedule: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    epochs: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    batch_size: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    classes: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    shots: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    test_per_class: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    sigma_data: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    prototypes: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    prototype_scale: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lambda_sg: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lambda_div: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    k: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    samples_per_template: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    encoder_seed: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    data_seed: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    init_seed: Option<String>,
    /// Sets the encoder, data and init seeds together.
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    guidance: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    init_template: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    handcrafted_template: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    zero_shot_template: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let fields: [(&'static str, &Option<String>); 33] = [
            ("prompts", &self.prompts),
            ("context_len", &self.context_len),
            ("vocab_size", &self.vocab_size),
            ("token_dim", &self.token_dim),
            ("hidden_dim", &self.hidden_dim),
            ("embed_dim", &self.embed_dim),
            ("feature_dim", &self.feature_dim),
            ("identity_image", &self.identity_image),
            ("tau", &self.tau),
            ("sigma_init", &self.sigma_init),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("schedule", &self.schedule),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("classes", &self.classes),
            ("shots", &self.shots),
            ("test_per_class", &self.test_per_class),
            ("sigma_data", &self.sigma_data),
            ("prototypes", &self.prototypes),
            ("prototype_scale", &self.prototype_scale),
            ("lambda_sg", &self.lambda_sg),
            ("lambda_div", &self.lambda_div),
            ("k", &self.k),
            ("samples_per_template", &self.samples_per_template),
            ("encoder_seed", &self.encoder_seed),
            ("data_seed", &self.data_seed),
            ("init_seed", &self.init_seed),
            ("seed", &self.seed),
            ("guidance", &self.guidance),
            ("init_template", &self.init_template),
            ("handcrafted_template", &self.handcrafted_template),
            ("zero_shot_template", &self.zero_shot_template),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    /// Preset, then file, then flags. File problems are domain errors; a bad
    /// flag value is a usage error naming the flag.
    fn resolve(&self) -> std::result::Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig::preset(&self.preset).map_err(|e| Failure::Usage(format!("--preset: {e}")))?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Domain(Error::io(path, e)))?;
            cfg.apply_kv(&text).map_err(Failure::Domain)?;
            cfg.validate().map_err(Failure::Domain)?;
        }
        for (key, value) in self.overrides() {
            let flag = format!("--{}", key.replace('_', "-"));
            let usage = |e: Error| Failure::Usage(format!("invalid value {value:?} for {flag}: {e}"));
            cfg.set(key, value).map_err(usage)?;
            let keys: &[&str] = if key == "seed" {
                &["encoder_seed", "data_seed", "init_seed"]
            } else {
                std::slice::from_ref(&key)
            };
            for k in keys {
                cfg.check_field(k).map_err(usage)?;
            }
            if key == "lr" && cfg.lr <= 0.0 {
                return Err(usage(Error::InvalidConfig("lr must be > 0".into())));
            }
        }
        cfg.validate()
            .map_err(|e| Failure::Usage(format!("inconsistent flags: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// fixture (synthetic or --fixtures file), live, or replay.
    #[arg(long, default_value = "fixture")]
    source: String,
    /// Class names; defaults to every class of the dataset.
    #[arg(long = "class")]
    class_names: Vec<String>,
    #[arg(long, default_value = "objects")]
    category: String,
    /// Dataset file whose classes are described; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Description records to serve as fixtures.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// JSONL cassette: appended to by `live`, read by `replay`.
    #[arg(long)]
    cassette: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    descriptions: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Write the dataset used for training here.
    #[arg(long)]
    save_dataset: Option<PathBuf>,
    /// Description records; synthetic fixtures when absent.
    #[arg(long)]
    descriptions: Option<PathBuf>,
    /// Continue this checkpoint up to the configured epoch count.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "checkpoint.json")]
    checkpoint: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; regenerated from the checkpoint config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Score the zero-shot template instead of the learned context.
    #[arg(long)]
    zero_shot: bool,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append a CSV row with this label to --csv.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    label: String,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// N, lambda_div or guidance.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    descriptions: Option<PathBuf>,
    /// Directory for `ablation_<axis>.csv` and `.svg`.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Domain(Error),
    /// A check ran and did not pass; its result is already on stdout.
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `argv` (program name first), runs the verb and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = cli.threads.max(1);
    let outcome = match cli.command {
        Command::GenerateDescriptions(a) => generate_descriptions(a, threads),
        Command::Filter(a) => filter(a),
        Command::Train(a) => train_cmd(a, threads),
        Command::Eval(a) => eval_cmd(a, threads),
        Command::Ablate(a) => ablate_cmd(a, threads),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Selftest(a) => selftest_cmd(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Check) => 1,
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn load_or_generate(path: Option<&Path>, config: &TrainConfig, encoder: &FrozenEncoder) -> Result<SyntheticDataset> {
    match path {
        Some(p) => SyntheticDataset::load(p),
        None => generate_dataset(&config.dataset_spec(), encoder),
    }
}

/// Description records for training: the given file, or synthetic fixtures
/// when guidance needs them and none were given.
fn training_records(
    path: Option<&Path>,
    config: &TrainConfig,
    dataset: &SyntheticDataset,
) -> Result<Vec<DescriptionRecord>> {
    match path {
        Some(p) => load_records(p),
        None if config.guidance == Guidance::Llm => dataset.description_fixtures(config.samples_per_template),
        None => Ok(Vec::new()),
    }
}

fn generate_descriptions(a: GenerateArgs, threads: usize) -> Outcome {
    let config = a.config.resolve()?;
    let samples = config.samples_per_template;
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let mut dataset = None;
    let names: Vec<String> = if a.class_names.is_empty() {
        let ds = load_or_generate(a.dataset.as_deref(), &config, &encoder)?;
        let names = ds.classes.iter().map(|c| c.name.clone()).collect();
        dataset = Some(ds);
        names
    } else {
        a.class_names.clone()
    };
    let client: Box<dyn DescriptionClient> = match a.source.as_str() {
        "fixture" => {
            let records = match (&a.fixtures, &dataset) {
                (Some(p), _) => load_records(p)?,
                (None, Some(ds)) => ds.description_fixtures(samples)?,
                (None, None) => {
                    return Err(Failure::Usage(
                        "--source fixture with --class needs --fixtures".into(),
                    ))
                }
            };
            Box::new(FixtureClient::new(&records, samples))
        }
        "live" => {
            let mut live = LiveConfig::from_env()?;
            live.cassette = a.cassette.clone();
            Box::new(HttpChatClient::new(live)?)
        }
        "replay" => {
            let path = a
                .cassette
                .as_ref()
                .ok_or_else(|| Failure::Usage("--source replay needs --cassette".into()))?;
            Box::new(ReplayClient::new(&read_cassette(path)?))
        }
        other => {
            return Err(Failure::Usage(format!(
                "--source must be fixture, live or replay, got {other:?}"
            )))
        }
    };
    let category = if dataset.is_some() && a.fixtures.is_none() {
        crate::eval::SYNTHETIC_CATEGORY.to_string()
    } else {
        a.category.clone()
    };
    let requests: Vec<DescriptionRequest> = names
        .iter()
        .map(|n| DescriptionRequest::new(n, &category, samples))
        .collect();
    let raw = fetch_all(&requests, client.as_ref(), a.max_in_flight.max(threads))?;
    let records: Vec<DescriptionRecord> = names
        .into_iter()
        .zip(raw)
        .map(|(class, raw)| DescriptionRecord {
            class,
            category: category.clone(),
            raw,
            selected: vec![],
            mean_sims: vec![],
        })
        .collect();
    emit(&records_to_json(&records)?, a.out.as_deref())?;
    Ok(())
}

fn filter(a: FilterArgs) -> Outcome {
    let config = a.config.resolve()?;
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let records = load_records(&a.descriptions)?
        .into_iter()
        .map(|r| r.filtered(config.k, &encoder))
        .collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(p) => save_records(p, &records)?,
        None => emit(&records_to_json(&records)?, None)?,
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, threads: usize) -> Outcome {
    let config = a.config.resolve()?;
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let dataset = load_or_generate(a.dataset.as_deref(), &config, &encoder)?;
    if let Some(p) = &a.save_dataset {
        dataset.save(p)?;
    }
    let records = training_records(a.descriptions.as_deref(), &config, &dataset)?;
    let checkpoint = match &a.resume {
        Some(p) => resume(&Checkpoint::load(p)?, &config, &encoder, &dataset, &records, threads)?,
        None => train(&config, &encoder, &dataset, &records, threads)?,
    };
    checkpoint.save(&a.checkpoint)?;
    if let Some(p) = &a.metrics {
        std::fs::write(p, checkpoint.metrics_csv()).map_err(|e| Error::io(p, e))?;
    }
    let summary = serde_json::json!({
        "checkpoint": a.checkpoint,
        "epochs": checkpoint.epoch,
        "first": checkpoint.history.first(),
        "last": checkpoint.history.last(),
        "diversity_disabled": checkpoint.diversity_disabled,
    });
    emit(&summary.to_string(), None)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs, threads: usize) -> Outcome {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let config = &checkpoint.config;
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let dataset = load_or_generate(a.dataset.as_deref(), config, &encoder)?;
    let report: EvalReport = if a.zero_shot {
        zero_shot_baseline(&encoder, &dataset, &config.zero_shot_template, config.tau, threads)?
    } else {
        evaluate(&checkpoint.bank, &encoder, &dataset, config.tau, threads)?
    };
    if let Some(p) = &a.out {
        report.save(p)?;
    }
    if let Some(p) = &a.csv {
        let mut text = if p.exists() {
            std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?
        } else {
            format!("{}\n", EvalReport::CSV_HEADER)
        };
        text.push_str(&report.csv_row(&a.label));
        text.push('\n');
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    emit(&report.to_json()?, None)?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs, threads: usize) -> Outcome {
    let config = a.config.resolve()?;
    let axis: AblationAxis = a
        .axis
        .parse()
        .map_err(|e: Error| Failure::Usage(format!("--axis: {e}")))?;
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let dataset = load_or_generate(a.dataset.as_deref(), &config, &encoder)?;
    // The guidance sweep may switch llm on even if the base config has it off.
    let records = match &a.descriptions {
        Some(p) => load_records(p)?,
        None => dataset.description_fixtures(config.samples_per_template)?,
    };
    let table = ablate(&config, axis, &a.values, &encoder, &dataset, &records, threads)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let stem = format!("ablation_{}", axis.name());
    table.write_csv(&a.out_dir.join(format!("{stem}.csv")))?;
    if let Err(e) = table.write_svg(&a.out_dir.join(format!("{stem}.svg"))) {
        log::warn!("plot not written, CSV only: {e}");
    }
    emit(table.to_csv().trim_end(), None)?;
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    let shape = ToyShape::default();
    let r = gradcheck(&shape, a.seed)?;
    let pass = r.max_rel_error < 1e-4;
    let line = serde_json::json!({
        "max_rel_error": r.max_rel_error,
        "worst_coordinate": r.worst_coordinate,
        "coordinates": r.coordinates,
        "pass": pass,
    });
    emit(&line.to_string(), None)?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn selftest_cmd(a: SelftestArgs) -> Outcome {
    let results = selftest(a.seed)?;
    let mut all = true;
    for r in &results {
        all &= r.passed;
        emit(
            &format!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail),
            None,
        )?;
    }
    if all {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["msgcoop", "frobnicate"]), 2);
        assert_eq!(run(["msgcoop", "train", "--no-such-flag"]), 2);
        assert_eq!(run(["msgcoop", "train", "--lr", "-1"]), 2);
        assert_eq!(run(["msgcoop", "train", "--epochs", "0"]), 2);
        assert_eq!(run(["msgcoop", "train", "--guidance", "oracle"]), 2);
    }

    #[test]
    fn missing_files_exit_1() {
        assert_eq!(run(["msgcoop", "eval", "--checkpoint", "/nonexistent/c.json"]), 1);
        assert_eq!(run(["msgcoop", "train", "--config", "/nonexistent/cfg.txt"]), 1);
    }

    #[test]
    fn seed_flag_sets_all_seeds() {
        let args = ConfigArgs {
            seed: Some("5".into()),
            preset: "desk".into(),
            ..ConfigArgs::default()
        };
        let cfg = args.resolve().ok().unwrap();
        assert_eq!((cfg.encoder_seed, cfg.data_seed, cfg.init_seed), (5, 5, 5));
    }
}
