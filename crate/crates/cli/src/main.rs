//! `sonarmatch` command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;

use sonarmatch::architectures::{ArchConfig, ArchId, ModelSpec};
use sonarmatch::dataset::{self, synthetic, DatasetFormat, PairDataset};
use sonarmatch::ensemble::ensemble_average;
use sonarmatch::evaluation::{self, ReportEntry, ScoreSet};
use sonarmatch::training::{self, search, SearchSpace, TrainConfig, TrainedModel};
use sonarmatch::uncertainty::{self, McConfig, RankDirection};
use sonarmatch::Error;

/// Largest disagreement tolerated between the two AUC routes.
const AUC_ROUTE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "sonarmatch", version, about = "Learned matching of forward-looking sonar patch pairs")]
struct Cli {
    /// Directory that relative dataset paths are resolved against.
    #[arg(long, env = "SONARMATCH_DATA_DIR", global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert published archive splits into the raw binary format.
    Prepare {
        /// Archive files, one per split; the file stem names the split.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Score checkpoints on a test set and write ROC reports.
    Evaluate {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        format: Option<FormatArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo dropout scores and the most and least certain pairs.
    Mcdropout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        format: Option<FormatArg>,
        #[arg(long, default_value_t = uncertainty::DEFAULT_PASSES)]
        passes: usize,
        /// Pairs shown in each thumbnail grid.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average probability score files.
    Ensemble {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random hyper-parameter search.
    Hpsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Write a synthetic dataset in the raw binary format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = dataset::DEFAULT_PATCH_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum FormatArg {
    Archive,
    Raw,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 1,
                Error::Divergence { .. } => 3,
                _ => 2,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    arch: ArchId,
    /// Overrides of the architecture defaults.
    #[serde(default)]
    model: BTreeMap<String, Value>,
    /// Overrides of the training defaults.
    #[serde(default)]
    train: BTreeMap<String, Value>,
    train_data: PathBuf,
    #[serde(default)]
    format: Option<DatasetFormat>,
    /// Stratified subset of the training data, in pairs.
    #[serde(default)]
    subset: Option<usize>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Fully validated experiment, ready to run.
struct Experiment {
    model: ArchConfig,
    spec: ModelSpec,
    train: TrainConfig,
    train_data: PathBuf,
    format: DatasetFormat,
    subset: Option<usize>,
    out_dir: PathBuf,
}

fn resolve(data_dir: Option<&Path>, path: &Path) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() && !path.exists() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn infer_format(path: &Path, explicit: Option<DatasetFormat>) -> DatasetFormat {
    explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("h5" | "hdf5" | "hdf" | "mat") => DatasetFormat::PublishedArchive,
        _ => DatasetFormat::RawBinary,
    })
}

fn format_of(arg: Option<FormatArg>) -> Option<DatasetFormat> {
    arg.map(|f| match f {
        FormatArg::Archive => DatasetFormat::PublishedArchive,
        FormatArg::Raw => DatasetFormat::RawBinary,
    })
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        }))
    }
}

fn load_experiment(path: &Path, data_dir: Option<&Path>, o: &TrainOverrides) -> CliResult<Experiment> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut assignment: BTreeMap<String, Value> = BTreeMap::new();
    assignment.extend(cfg.model.into_iter().map(|(k, v)| (format!("model.{k}"), v)));
    assignment.extend(cfg.train.into_iter().map(|(k, v)| (format!("train.{k}"), v)));
    let seed = o.seed.or(cfg.seed);
    let flags = [
        ("train.seed", seed.map(Value::from)),
        ("train.max_epochs", o.epochs.map(Value::from)),
        ("train.learning_rate", o.learning_rate.map(Value::from)),
        ("train.batch_size", o.batch_size.map(Value::from)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            assignment.insert(k.to_string(), v);
        }
    }
    let (model, train) =
        search::apply_assignment(&ArchConfig::default_for(cfg.arch), &TrainConfig::defaults_for(cfg.arch), &assignment)?;
    let spec = model.build()?;
    let train_data = resolve(data_dir, &cfg.train_data);
    require_file(&train_data)?;
    let out_dir = o
        .out
        .clone()
        .or(cfg.out_dir)
        .ok_or_else(|| CliError::Usage("no output directory: set out_dir in the config or pass --out".into()))?;
    Ok(Experiment {
        format: infer_format(&train_data, cfg.format),
        model,
        spec,
        train,
        train_data,
        subset: cfg.subset,
        out_dir,
    })
}

/// Loads the training data in the label convention the model trains on.
fn training_data(exp: &Experiment) -> CliResult<PairDataset> {
    let mut data = dataset::load_dataset(&exp.train_data, exp.format)?;
    if let Some(n) = exp.subset {
        data = data.stratified_subset(n, sonarmatch::seeds::derive(exp.train.seed, "subset"));
    }
    if data.orientation() != exp.spec.label_orientation {
        data = dataset::flip_labels(&data);
    }
    Ok(data)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn write_history(model: &TrainedModel, path: &Path) -> CliResult<()> {
    let mut text = String::from("epoch,train_loss,val_auc\n");
    for r in &model.history {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_auc));
    }
    write_text(path, &text)
}

fn write_resolved(exp: &Experiment, path: &Path) -> CliResult<()> {
    let v = serde_json::json!({ "model": exp.model, "train": exp.train });
    write_text(path, &serde_json::to_string_pretty(&v).map_err(Error::from)?)
}

fn cmd_prepare(data_dir: Option<&Path>, inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    let inputs: Vec<PathBuf> = inputs.iter().map(|p| resolve(data_dir, p)).collect();
    for p in &inputs {
        require_file(p)?;
    }
    let mut loaded = Vec::new();
    for p in &inputs {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("split").to_string();
        loaded.push((name, dataset::load_dataset(p, DatasetFormat::PublishedArchive)?));
    }
    create_dir(out)?;
    let mut counts = Vec::new();
    for (name, d) in &loaded {
        dataset::write_raw_binary(d, out.join(format!("{name}.smp")))?;
        counts.push(format!("{name}={}", d.len()));
    }
    println!("{}", counts.join(" "));
    Ok(())
}

fn cmd_train(data_dir: Option<&Path>, config: &Path, o: &TrainOverrides) -> CliResult<()> {
    let exp = load_experiment(config, data_dir, o)?;
    let data = training_data(&exp)?;
    let model = training::train_with_progress(exp.spec.clone(), &data, &exp.train, &mut |r| {
        eprintln!("epoch {:>3}  loss {:.5}  val_auc {:.4}", r.epoch, r.train_loss, r.val_auc);
    })?;
    create_dir(&exp.out_dir)?;
    training::save_checkpoint(&model, exp.out_dir.join("checkpoint"))?;
    write_history(&model, &exp.out_dir.join("history.csv"))?;
    write_resolved(&exp, &exp.out_dir.join("config.json"))?;
    let best = model.history.get(model.best_epoch.wrapping_sub(1)).map_or(f64::NAN, |r| r.val_auc);
    println!("arch={} best_epoch={} val_auc={best:.4}", exp.spec.arch_id, model.best_epoch);
    Ok(())
}

fn load_test(data_dir: Option<&Path>, test: &Path, format: Option<FormatArg>) -> CliResult<PairDataset> {
    let path = resolve(data_dir, test);
    require_file(&path)?;
    Ok(dataset::load_dataset(&path, infer_format(&path, format_of(format)))?)
}

fn unique_names(models: &[TrainedModel]) -> Vec<String> {
    let mut names = Vec::new();
    for m in models {
        let base = m.spec.arch_id.to_string();
        let mut name = base.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{base}_{k}");
            k += 1;
        }
        names.push(name);
    }
    names
}

fn cmd_evaluate(
    data_dir: Option<&Path>,
    checkpoints: &[PathBuf],
    test: &Path,
    format: Option<FormatArg>,
    out: &Path,
) -> CliResult<()> {
    for c in checkpoints {
        require_file(c)?;
    }
    let models: Vec<TrainedModel> =
        checkpoints.iter().map(|c| training::load_checkpoint(c, None)).collect::<Result<_, _>>()?;
    let data = load_test(data_dir, test, format)?;
    let names = unique_names(&models);
    let mut entries = Vec::new();
    let mut sets = Vec::new();
    for (m, name) in models.iter().zip(&names) {
        let scores = evaluation::score_dataset(m, &data)?;
        let roc = evaluation::auc_trapezoid(&scores)?;
        let oracle = evaluation::auc_pairwise_oracle(&scores)?;
        if (roc.auc - oracle).abs() > AUC_ROUTE_TOLERANCE {
            return Err(CliError::Core(Error::Validation(format!(
                "{name}: trapezoid AUC {} and pairwise AUC {oracle} disagree",
                roc.auc
            ))));
        }
        println!("{name} auc={:.6} auc_pairwise={oracle:.6} params={}", roc.auc, m.param_count()?);
        entries.push(ReportEntry { name: name.clone(), roc, params: m.param_count()? });
        sets.push((name.clone(), scores));
    }
    create_dir(out)?;
    for (name, s) in &sets {
        evaluation::write_scores_csv(s, out.join(format!("scores_{name}.csv")))?;
    }
    evaluation::write_prediction_table(&sets, out.join("predictions.csv"))?;
    evaluation::emit_report(&entries, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_mcdropout(
    data_dir: Option<&Path>,
    checkpoint: &Path,
    test: &Path,
    format: Option<FormatArg>,
    passes: usize,
    k: usize,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    if passes < 2 {
        return Err(CliError::Usage(format!("--passes must be at least 2, got {passes}")));
    }
    require_file(checkpoint)?;
    let model = training::load_checkpoint(checkpoint, None)?;
    let data = load_test(data_dir, test, format)?;
    if k > data.len() {
        return Err(CliError::Usage(format!("--k {k} exceeds the {} test pairs", data.len())));
    }
    let r = uncertainty::mc_dropout_scores(&model, &data, &McConfig { passes, seed, ..McConfig::default() })?;
    create_dir(out)?;
    uncertainty::write_mc_csv(&r, out.join("mc_dropout.csv"))?;
    let spread = r.entries.iter().filter(|e| e.std > 0.0).count();
    println!("pairs={} passes={} nonzero_std={spread}", r.entries.len(), r.passes);
    if k > 0 {
        for (dir, file) in [(RankDirection::Highest, "highest_std.png"), (RankDirection::Lowest, "lowest_std.png")] {
            let top = uncertainty::rank_by_std(&r, k, dir)?;
            uncertainty::write_thumbnail_grid(&data, &top, out.join(file))?;
        }
    }
    Ok(())
}

fn cmd_ensemble(inputs: &[PathBuf], weights: Option<&[f64]>, out: &Path) -> CliResult<()> {
    if inputs.len() < 2 {
        return Err(CliError::Usage("ensemble needs at least two score files".into()));
    }
    for p in inputs {
        require_file(p)?;
    }
    let members: Vec<ScoreSet> = inputs.iter().map(evaluation::read_scores_csv).collect::<Result<_, _>>()?;
    let combined = ensemble_average(&members, weights)?;
    for (p, m) in inputs.iter().zip(&members) {
        println!("{} auc={:.6}", p.display(), evaluation::auc_trapezoid(m)?.auc);
    }
    let auc = evaluation::auc_trapezoid(&combined)?.auc;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    evaluation::write_scores_csv(&combined, out)?;
    println!("ensemble auc={auc:.6}");
    Ok(())
}

fn cmd_hpsearch(data_dir: Option<&Path>, config: &Path, space_path: &Path, o: &TrainOverrides) -> CliResult<()> {
    let exp = load_experiment(config, data_dir, o)?;
    let text =
        fs::read_to_string(space_path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", space_path.display())))?;
    let space: SearchSpace =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", space_path.display())))?;
    space.validate()?;
    let data = training_data(&exp)?;
    let outcome = training::hyperparameter_search(&exp.model, &exp.train, &data, &space)?;
    create_dir(&exp.out_dir)?;
    search::write_leaderboard(&outcome.trials, &exp.out_dir)?;
    training::save_checkpoint(&outcome.best_model, exp.out_dir.join("best"))?;
    let best = outcome.best_trial();
    println!(
        "trials={} best_trial={} val_auc={:.4} assignment={}",
        outcome.trials.len(),
        best.trial,
        best.val_auc.unwrap_or(f64::NAN),
        serde_json::to_string(&best.assignment).map_err(Error::from)?
    );
    Ok(())
}

fn cmd_synth(out: &Path, pairs: usize, size: usize, seed: u64) -> CliResult<()> {
    let cfg = synthetic::SyntheticConfig { pairs, height: size, width: size, seed, ..Default::default() };
    let d = synthetic::generate(&cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    dataset::write_raw_binary(&d, out)?;
    println!("pairs={} matches={}", d.len(), d.match_count());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let data_dir = cli.data_dir.as_deref();
    match &cli.command {
        Command::Prepare { inputs, out } => cmd_prepare(data_dir, inputs, out),
        Command::Train { config, overrides } => cmd_train(data_dir, config, overrides),
        Command::Evaluate { checkpoints, test, format, out } => cmd_evaluate(data_dir, checkpoints, test, *format, out),
        Command::Mcdropout { checkpoint, test, format, passes, k, seed, out } => {
            cmd_mcdropout(data_dir, checkpoint, test, *format, *passes, *k, *seed, out)
        }
        Command::Ensemble { scores, weights, out } => cmd_ensemble(scores, weights.as_deref(), out),
        Command::Hpsearch { config, space, overrides } => cmd_hpsearch(data_dir, config, space, overrides),
        Command::Synth { out, pairs, size, seed } => cmd_synth(out, *pairs, *size, *seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
