use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pul::config::{load_config, load_synthetic_spec, to_text};
use pul::data_io::{
    generate_synthetic, load_dataset_any, load_model, save_dataset, save_model, split_labeled_ids, HistoryWriter,
    SyntheticSpec,
};
use pul::evaluation::{evaluate, EvalProtocol, RetrievalMetrics};
use pul::pul::{init_original_model, run_semi_supervised, StopReason};
use pul::{stream_rng, PulConfig, PulError, RngStream};

const EXIT_INVALID: u8 = 2;
const EXIT_MAX_ITERS: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "pul", version, about = "Progressive unsupervised learning on feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target benchmark.
    Generate {
        /// Benchmark spec file; built-in default when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the training samples of this many target ids as a
        /// labeled set, and the remaining samples as an unlabeled set.
        #[arg(long)]
        semi_ids: Option<usize>,
    },
    /// Train the original model on a labeled source dataset.
    Init {
        #[arg(long)]
        source: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run progressive unsupervised learning on a target dataset.
    Run {
        #[arg(long)]
        target: PathBuf,
        /// Original model checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Labeled target samples added to every iteration's training set.
        #[arg(long)]
        semi: Option<PathBuf>,
        /// Train on every clustered sample (no reliability selection).
        #[arg(long)]
        no_selection: bool,
        /// Evaluate after each iteration (needs --gallery too).
        #[arg(long, requires = "gallery")]
        query: Option<PathBuf>,
        #[arg(long, requires = "query")]
        gallery: Option<PathBuf>,
    },
    /// Evaluate a model on query/gallery sets (CMC rank-1/5/10/20 and mAP).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Keep same-identity same-camera gallery entries.
        #[arg(long)]
        no_camera_filter: bool,
        /// Metrics file; defaults to `<model>.metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus flag overrides; flags win over the file, the file wins
/// over built-in defaults.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> pul::Result<PulConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => PulConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_pul_iters = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &PulError) -> u8 {
    match err {
        PulError::Io(_) | PulError::Locked { .. } => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> pul::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PulError::Invariant(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn cmd_generate(spec: Option<&Path>, out: &Path, semi_ids: Option<usize>) -> pul::Result<()> {
    let spec = match spec {
        Some(p) => load_synthetic_spec(p)?,
        None => SyntheticSpec::default(),
    };
    let splits = generate_synthetic(&spec)?;
    fs::create_dir_all(out)?;
    let mut files = vec![
        ("source.puld", &splits.source),
        ("target_train.puld", &splits.target_train),
        ("target_query.puld", &splits.target_query),
        ("target_gallery.puld", &splits.target_gallery),
    ];
    let (unlabeled, labeled);
    if let Some(l) = semi_ids {
        (unlabeled, labeled) = split_labeled_ids(&splits.target_train, &splits.target_train_labels, l)?;
        if let Some(u) = &unlabeled {
            files.push(("target_unlabeled.puld", u));
        }
        if let Some(l) = &labeled {
            files.push(("target_labeled.puld", l));
        }
    }
    for (name, ds) in &files {
        save_dataset(out.join(name), ds)?;
    }
    write_json(
        &out.join("manifest.json"),
        &json!({
            "created_at": timestamp(),
            "spec": spec,
            "files": files.iter().map(|(n, d)| json!({"name": n, "samples": d.len(), "dim": d.dim()})).collect::<Vec<_>>(),
        }),
    )?;
    println!("wrote {} datasets to {}", files.len(), out.display());
    Ok(())
}

fn cmd_init(source: &Path, config: &ConfigArgs, out: &Path) -> pul::Result<()> {
    let cfg = config.resolve()?;
    let source = load_dataset_any(source)?;
    let mut rng = stream_rng(cfg.seed, RngStream::Init);
    let trained = init_original_model(&source, &cfg, &mut rng)?;
    save_model(out, &trained.model)?;
    println!(
        "original model: {} params, final source loss {:.4}, saved to {}",
        trained.model.num_params(),
        trained.final_loss(),
        out.display()
    );
    Ok(())
}

fn print_metrics(m: &RetrievalMetrics) {
    println!("rank-1   rank-5   rank-10  rank-20  mAP");
    println!(
        "{:<8.4} {:<8.4} {:<8.4} {:<8.4} {:.4}",
        m.rank1, m.rank5, m.rank10, m.rank20, m.map
    );
    if !m.skipped_queries.is_empty() {
        println!("skipped queries: {:?}", m.skipped_queries);
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    target: &Path,
    model: &Path,
    config: &ConfigArgs,
    out: &Path,
    semi: Option<&Path>,
    no_selection: bool,
    query: Option<&Path>,
    gallery: Option<&Path>,
) -> pul::Result<StopReason> {
    let mut cfg = config.resolve()?;
    if no_selection {
        cfg.selection_enabled = false;
    }
    let target = load_dataset_any(target)?;
    let original = load_model(model)?;
    let labeled = semi.map(load_dataset_any).transpose()?;
    let eval_sets = match (query, gallery) {
        (Some(q), Some(g)) => Some((load_dataset_any(q)?, load_dataset_any(g)?)),
        _ => None,
    };

    fs::create_dir_all(out)?;
    let mut history = HistoryWriter::open(out.join("history.jsonl"), true)?;
    let mut rng = stream_rng(cfg.seed, RngStream::Run);
    let mut hook = |m: &pul::EmbedModel| -> pul::Result<RetrievalMetrics> {
        let (q, g) = eval_sets.as_ref().unwrap();
        evaluate(q, g, m, EvalProtocol::default())
    };
    let run = run_semi_supervised(
        Some(&target),
        labeled.as_ref(),
        &original,
        &cfg,
        &mut rng,
        eval_sets.is_some().then_some(&mut hook as &mut pul::pul::EvalHook),
    )?;
    for record in run.history() {
        history.append(record)?;
        println!(
            "iter {:>2}  selected {:>5} ({:.3})  objective {:.4}  loss {:.4}{}",
            record.iter,
            record.selected_count,
            record.selected_fraction,
            record.kmeans_objective,
            record.train_loss,
            record.metrics.as_ref().map(|m| format!("  rank-1 {:.4}  mAP {:.4}", m.rank1, m.map)).unwrap_or_default()
        );
    }
    save_model(out.join("model.pulm"), run.model())?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "created_at": timestamp(),
            "config": cfg,
            "config_text": to_text(&cfg)?,
            "target_samples": target.len(),
            "labeled_samples": labeled.as_ref().map_or(0, |d| d.len()),
            "iterations": run.history().len(),
            "stop": run.stop,
        }),
    )?;
    println!("stopped after {} iterations: {:?}", run.history().len(), run.stop);
    Ok(run.stop)
}

fn cmd_eval(model: &Path, query: &Path, gallery: &Path, no_camera_filter: bool, out: Option<&Path>) -> pul::Result<()> {
    let m = load_model(model)?;
    let q = load_dataset_any(query)?;
    let g = load_dataset_any(gallery)?;
    let metrics = evaluate(&q, &g, &m, EvalProtocol { camera_filter: !no_camera_filter })?;
    print_metrics(&metrics);
    let record = serde_json::to_value(&metrics).map_err(|e| PulError::Invariant(e.to_string()))?;
    println!("{record}");
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = model.as_os_str().to_owned();
        p.push(".metrics.json");
        PathBuf::from(p)
    });
    write_json(&out, &record)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { spec, out, semi_ids } => cmd_generate(spec.as_deref(), out, *semi_ids).map(|_| 0),
        Command::Init { source, config, out } => cmd_init(source, config, out).map(|_| 0),
        Command::Run {
            target,
            model,
            config,
            out,
            semi,
            no_selection,
            query,
            gallery,
        } => cmd_run(
            target,
            model,
            config,
            out,
            semi.as_deref(),
            *no_selection,
            query.as_deref(),
            gallery.as_deref(),
        )
        .map(|stop| match stop {
            StopReason::Converged => 0,
            StopReason::MaxIterations => EXIT_MAX_ITERS,
        }),
        Command::Eval {
            model,
            query,
            gallery,
            no_camera_filter,
            out,
        } => cmd_eval(model, query, gallery, *no_camera_filter, out.as_deref()).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
