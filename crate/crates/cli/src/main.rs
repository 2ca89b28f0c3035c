//! `metaprompt` batch driver: data generation, both training stages,
//! evaluation, prediction and ablation.
//!
//! Exit codes: 0 success, 1 validation error (bad flags or config), 2 runtime
//! error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use metaprompt::evalkit::{self, AblationData, AblationPlan, EvalReport, Split};
use metaprompt::training::{self, categories, check_disjoint, Checkpoint, Episode, MetricsLog, SupportPool};
use metaprompt::{Error, Model, Result, RunConfig};

const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const METRICS_FILE: &str = "metrics.log";
const SOURCE_CATEGORIES_META: &str = "source.categories";

#[derive(Parser, Debug)]
#[command(name = "metaprompt", version, about = "Composable meta-prompt few-shot segmentation (toy scale)")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat `key = value` config file, applied over defaults (or over the
    /// checkpoint's own config when one is loaded).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. `gen-data` defaults to `data.root`, other commands to `out`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic source/target dataset.
    GenData,
    /// Meta-train on `source-train`.
    TrainSource {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a checkpoint on `target-finetune` support pools.
    FinetuneTarget {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint, or a directory of saved predictions, against ground truth.
    Evaluate {
        #[command(flatten)]
        source: EvalSource,
        /// Comma-separated splits.
        #[arg(long, value_delimiter = ',', default_value = "target-test")]
        split: Vec<String>,
        /// Comma-separated shot counts; defaults to `eval.shots`.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
    },
    /// Write `<out>/<category>/<episode>/pred.png` for every episode of a split.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target-test")]
        split: String,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Train and score the full model and one variant per disabled switch.
    Ablate,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct EvalSource {
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    predictions: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn resolve(global: &Global, base: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match base {
        Some(text) => RunConfig::parse(text)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &global.config {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config { key: "config".into(), message: format!("{}: {e}", path.display()) })?;
        cfg.apply_text(&text)?;
    }
    for kv in &global.set {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(global: &Global) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn with_hint(root: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Dataset(m) => Error::Dataset(format!("{m} (generate one with `metaprompt gen-data --out {}`)", root.display())),
        other => other,
    }
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Episode>> {
    evalkit::load_episodes(&cfg.data_root, split).map_err(with_hint(&cfg.data_root))
}

fn load_pools(cfg: &RunConfig) -> Result<Vec<SupportPool>> {
    evalkit::load_support_pools(&cfg.data_root).map_err(with_hint(&cfg.data_root))
}

fn load_checkpoint(global: &Global, path: &Path) -> Result<(RunConfig, Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let cfg = resolve(global, Some(&ck.config))?;
    cfg.validate()?;
    let mut model = cfg.build_model()?;
    model.load_state(&ck)?;
    Ok((cfg, model, ck))
}

fn write_run(out: &Path, model: &Model, cfg: &RunConfig, meta: BTreeMap<String, String>, log: &MetricsLog) -> Result<()> {
    fs::create_dir_all(out)?;
    let ck = model.checkpoint(&cfg.render(), meta);
    let path = out.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    fs::write(out.join(METRICS_FILE), log.render())?;
    print!("{}", log.render());
    println!("checkpoint {} params-sha256 {}", path.display(), ck.digest());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData => gen_data(g),
        Command::TrainSource { epochs } => train_source(g, *epochs),
        Command::FinetuneTarget { checkpoint, epochs } => finetune_target(g, checkpoint, *epochs),
        Command::Evaluate { source, split, shots } => evaluate(g, source, split, shots),
        Command::Predict { checkpoint, split, shots } => predict(g, checkpoint, split, *shots),
        Command::Ablate => ablate(g),
    }
}

fn gen_data(g: &Global) -> Result<()> {
    let cfg = resolve(g, None)?;
    cfg.validate()?;
    let root = g.out.clone().unwrap_or_else(|| cfg.data_root.clone());
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        if dir.exists() {
            return Err(Error::Dataset(format!("{} already exists; remove it or pick another --out", dir.display())));
        }
    }
    let spec = cfg.synthetic_spec();
    let data = evalkit::generate_synthetic(&spec)?;
    evalkit::save_episodes(&root, Split::SourceTrain, &data.source_train)?;
    evalkit::save_episodes(&root, Split::SourceHeldout, &data.source_heldout)?;
    evalkit::save_support_pools(&root, &data.target_finetune)?;
    evalkit::save_episodes(&root, Split::TargetTest, &data.target_test)?;
    fs::write(root.join("lexicon.txt"), spec.lexicon().render())?;
    fs::write(root.join("config.txt"), cfg.render())?;
    println!(
        "wrote {} source-train, {} source-heldout, {} target-test episodes and {} support pools under {}",
        data.source_train.len(),
        data.source_heldout.len(),
        data.target_test.len(),
        data.target_finetune.len(),
        root.display()
    );
    Ok(())
}

fn train_source(g: &Global, epochs: Option<usize>) -> Result<()> {
    let mut cfg = resolve(g, None)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let episodes = load_split(&cfg, Split::SourceTrain)?;
    let mut model = cfg.build_model()?;
    let mut log = MetricsLog::new();
    training::train_source(&mut model, &episodes, &cfg.train_config(), &mut log)?;
    let cats = categories(episodes.iter().map(|e| e.category.as_str()));
    let meta = BTreeMap::from([
        ("stage".to_string(), "source".to_string()),
        (SOURCE_CATEGORIES_META.to_string(), cats.into_iter().collect::<Vec<_>>().join(", ")),
    ]);
    write_run(&out_dir(g), &model, &cfg, meta, &log)
}

fn finetune_target(g: &Global, checkpoint: &Path, epochs: Option<usize>) -> Result<()> {
    let (mut cfg, mut model, ck) = load_checkpoint(g, checkpoint)?;
    if let Some(e) = epochs {
        cfg.finetune.train.epochs = e;
        cfg.validate()?;
    }
    let pools = load_pools(&cfg)?;
    if let Some(src) = ck.meta.get(SOURCE_CATEGORIES_META) {
        let src = categories(src.split(',').map(str::trim).filter(|s| !s.is_empty()));
        check_disjoint(&src, &categories(pools.iter().map(|p| p.category.as_str())))?;
    }
    let mut log = MetricsLog::new();
    training::finetune_target(&mut model, &pools, &cfg.finetune_config(), &mut log)?;
    let mut meta = ck.meta.clone();
    meta.insert("stage".into(), "finetune".into());
    write_run(&out_dir(g), &model, &cfg, meta, &log)
}

fn evaluate(g: &Global, source: &EvalSource, splits: &[String], shots: &[usize]) -> Result<()> {
    let splits = splits.iter().map(|s| parse_split(s)).collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport::default();
    match (&source.checkpoint, &source.predictions) {
        (Some(path), _) => {
            let (cfg, model, _) = load_checkpoint(g, path)?;
            let shots = if shots.is_empty() { vec![cfg.eval_shots] } else { shots.to_vec() };
            for split in splits {
                let episodes = load_split(&cfg, split)?;
                for &k in &shots {
                    let outcome = evalkit::evaluate(&model, &episodes, k)?;
                    report.add_cell(split.dir_name(), k, outcome.miou);
                }
            }
        }
        (None, Some(dir)) => {
            let cfg = resolve(g, None)?;
            cfg.validate()?;
            let k = shots.first().copied().unwrap_or(cfg.eval_shots);
            for split in splits {
                let episodes = load_split(&cfg, split)?;
                let preds = evalkit::load_predictions(dir, &episodes)?;
                let gts = episodes
                    .iter()
                    .map(|e| e.query_mask.clone().ok_or_else(|| Error::Dataset(format!("episode `{}` has no query mask", e.id))))
                    .collect::<Result<Vec<_>>>()?;
                report.add_cell(split.dir_name(), k, evalkit::miou(&preds, &gts)?);
            }
        }
        (None, None) => unreachable!("clap requires one evaluation source"),
    }
    print!("{}", report.table());
    print!("{}", report.records());
    if let Some(out) = &g.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.txt"), report.table())?;
        fs::write(out.join("report.records"), report.records())?;
    }
    Ok(())
}

fn predict(g: &Global, checkpoint: &Path, split: &str, shots: Option<usize>) -> Result<()> {
    let split = parse_split(split)?;
    let (cfg, model, _) = load_checkpoint(g, checkpoint)?;
    let k = shots.unwrap_or(cfg.eval_shots);
    let out = out_dir(g);
    let episodes = load_split(&cfg, split)?;
    for ep in &episodes {
        let pred = model.predict(&ep.with_shots(k)?.without_query_mask())?;
        evalkit::save_mask(&evalkit::prediction_path(&out, ep), &pred)?;
    }
    info!("wrote {} predictions under {}", episodes.len(), out.display());
    println!("predictions {} {}", episodes.len(), out.display());
    Ok(())
}

fn ablate(g: &Global) -> Result<()> {
    let cfg = resolve(g, None)?;
    cfg.validate()?;
    let source = load_split(&cfg, Split::SourceTrain)?;
    let pools = if cfg.ablate_finetune { load_pools(&cfg)? } else { Vec::new() };
    let test = load_split(&cfg, Split::TargetTest)?;
    check_disjoint(
        &categories(source.iter().map(|e| e.category.as_str())),
        &categories(test.iter().map(|e| e.category.as_str()).chain(pools.iter().map(|p| p.category.as_str()))),
    )?;
    let plan = AblationPlan {
        model: cfg.model_config(),
        expander: cfg.llm.clone(),
        lexicon: cfg.lexicon()?,
        train: cfg.train_config(),
        finetune: cfg.ablate_finetune.then(|| cfg.finetune_config()),
        eval_shots: cfg.eval_shots,
    };
    let data = AblationData { source: &source, pools: &pools, test: &test };
    let (report, logs) = evalkit::run_ablation(&plan, &cfg.ablate_switches, &data)?;
    let out = out_dir(g);
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.txt"), report.table())?;
    fs::write(out.join("report.records"), report.records())?;
    for (label, log) in &logs {
        fs::write(out.join(format!("metrics.{label}.log")), log.render())?;
    }
    print!("{}", report.table());
    print!("{}", report.records());
    Ok(())
}
