//! `nee`: generate trace data, train and evaluate engines, compose them
//! into graph algorithms, and export inspection data.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use nee::harness::{
    compose_dijkstra, compose_prim, evaluate_arithmetic, evaluate_generalization, run_ablation, train, EvalReport,
    ExactAdd, ExactMin, ExactUpdate, MergeSorter, Scale, Solver, TestMix, TrainConfig, TrainTask,
};
use nee::model::{load_checkpoint, save_checkpoint, ModelMode, Toggles};
use nee::traces::{
    gen_arithmetic_pairs, gen_graph, generate_dataset, holdout_for_count, write_dataset, write_dataset_json, ArithOp,
    ArithmeticSpec, DatasetSpec, DistributionSpec, GraphFamily, Task,
};
use nee::workbench::{export_attention, export_embeddings_pca, neighbor_interpolation_score};

#[derive(Parser)]
#[command(name = "nee", version, about = "Neural execution engine workbench")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "NEE_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Binary,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Markdown,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algorithm {
    Dijkstra,
    Prim,
    MergeSort,
}

#[derive(Subcommand)]
enum Command {
    /// Write a trace dataset.
    GenData {
        #[arg(long)]
        task: Task,
        /// Training episodes.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        validation: usize,
        /// Longest sequence, or most nodes for graph tasks.
        #[arg(long, default_value_t = 8)]
        max_len: usize,
        #[arg(long, default_value = "dataset.need")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: DataFormat,
    },
    /// Train a model from a TOML config and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "model.nee")]
        out: PathBuf,
        /// Also write the per-step loss curve as JSON.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Exact-match accuracy by length, or arithmetic accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long, value_delimiter = ',', default_value = "8,25,50,75,100")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Numbers kept for training when evaluating arithmetic.
        #[arg(long)]
        training_numbers: Option<usize>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a whole algorithm with engines (or exact stand-ins) as subroutines.
    Compose {
        #[arg(long, value_enum)]
        algorithm: Algorithm,
        /// Selection / merge engine; exact when absent.
        #[arg(long)]
        min: Option<PathBuf>,
        /// Addition engine for shortest paths; exact when absent.
        #[arg(long)]
        add: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Train one model per architecture variant and tabulate accuracy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "all_mod,vanilla,all_mod-C5")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 8)]
        length: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Write the attention row of every decode step as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated input numbers.
        #[arg(long, value_delimiter = ',')]
        input: Vec<u64>,
        #[arg(long, default_value = "attention.csv")]
        out: PathBuf,
    },
    /// Write a 3-D PCA of the number embeddings (JSON, or CSV by extension).
    ExportPca {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated held-out numbers to flag.
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<u64>,
        #[arg(long, default_value = "pca.json")]
        out: PathBuf,
    },
    /// Render JSON evaluation reports as one markdown document.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Training config file. Only `task` and `steps` are required; everything
/// else falls back to the scale's defaults.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    task: TrainTask,
    steps: u64,
    #[serde(default)]
    scale: Option<Scale>,
    batch_size: Option<usize>,
    warmup: Option<u64>,
    lr_scale: Option<f64>,
    eval_every: Option<u64>,
    patience: Option<usize>,
    train_count: Option<usize>,
    validation_count: Option<usize>,
    max_len: Option<usize>,
    /// Architecture variant such as `all_mod`, `vanilla` or `all_mod-C5`.
    variant: Option<String>,
    dim: Option<usize>,
    encoder_layers: Option<usize>,
    decoder_layers: Option<usize>,
    dropout: Option<f64>,
    /// Arithmetic only: numbers kept for training, the rest held out.
    training_numbers: Option<usize>,
    /// Share of close-number sequences in the training mix.
    close_fraction: Option<f64>,
}

fn load_train_config(path: &Path, seed: u64) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let f: TrainFile = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    let mut c = match f.scale.unwrap_or(Scale::Desk) {
        Scale::Desk => TrainConfig::desk(f.task, f.steps, seed),
        Scale::Paper => TrainConfig::paper(f.task, f.steps, seed),
    };
    macro_rules! set {
        ($($field:ident => $target:expr),* $(,)?) => {$(if let Some(v) = f.$field { $target = v; })*};
    }
    set!(
        batch_size => c.batch_size,
        warmup => c.warmup,
        lr_scale => c.lr_scale,
        eval_every => c.eval_every,
        patience => c.patience,
        train_count => c.data.train_count,
        validation_count => c.data.validation_count,
        max_len => c.data.max_len,
        dim => c.model.dim,
        encoder_layers => c.model.encoder_layers,
        decoder_layers => c.model.decoder_layers,
        dropout => c.model.dropout,
    );
    if let Some(v) = &f.variant {
        c.model.toggles = Toggles::from_variant(v).map_err(anyhow::Error::msg)?;
    }
    if let Some(cf) = f.close_fraction {
        c.data.distribution = DistributionSpec::mixed(cf);
    }
    if let Some(count) = f.training_numbers {
        let op = match f.task {
            TrainTask::Add => ArithOp::Add,
            TrainTask::Multiply => ArithOp::Multiply,
            _ => bail!("training_numbers only applies to arithmetic tasks"),
        };
        let holdout = holdout_for_count(count, c.data.width, seed)?;
        c.data.arithmetic = Some(ArithmeticSpec::new(op, c.data.width).with_holdout(holdout));
    }
    c.validate()?;
    Ok(c)
}

fn open_checkpoint(path: &Path) -> Result<nee::model::Checkpoint> {
    std::fs::metadata(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    Ok(load_checkpoint(path)?)
}

fn log(event: &str, fields: serde_json::Value) {
    let mut obj = serde_json::json!({ "event": event });
    if let (Some(o), serde_json::Value::Object(extra)) = (obj.as_object_mut(), fields) {
        o.extend(extra);
    }
    eprintln!("{obj}");
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(seed: u64, task: Task, n: usize, validation: usize, max_len: usize, out: &Path, format: DataFormat) -> Result<()> {
    let spec = match task {
        Task::Dijkstra | Task::Prim => DatasetSpec::graphs(task, max_len, n, validation),
        Task::Add => DatasetSpec { width: 8, ..DatasetSpec::sequences(task, 1, n, validation) },
        Task::Multiply => DatasetSpec { width: 12, ..DatasetSpec::sequences(task, 1, n, validation) },
        _ => DatasetSpec::sequences(task, max_len, n, validation),
    };
    log("gen-data", serde_json::json!({ "task": task.name(), "seed": seed }));
    let ds = generate_dataset(&spec, seed)?;
    match format {
        DataFormat::Binary => write_dataset(&ds, out)?,
        DataFormat::Json => std::fs::write(out, write_dataset_json(&ds)?)?,
    }
    log("written", serde_json::json!({ "path": out, "train": ds.train.len(), "validation": ds.validation.len() }));
    Ok(())
}

fn eval(
    seed: u64,
    checkpoint: &Path,
    task: Task,
    lengths: &[usize],
    n: usize,
    training_numbers: Option<usize>,
    format: ReportFormat,
    out: Option<&Path>,
) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let model = &ck.model;
    log("eval", serde_json::json!({ "config_hash": model.config.hash(), "seed": seed }));
    let text = match task {
        Task::SelectionSort => {
            let r = evaluate_generalization(model, solver_name(model), task, lengths, n, seed)?;
            render(&r, format)
        }
        Task::Merge => {
            let r = evaluate_generalization(&MergeSorter(model), "merge engine", task, lengths, n, seed)?;
            render(&r, format)
        }
        Task::Add | Task::Multiply => {
            let op = if task == Task::Add { ArithOp::Add } else { ArithOp::Multiply };
            let mut spec = ArithmeticSpec::new(op, model.config.width);
            if let Some(count) = training_numbers {
                spec = spec.with_holdout(holdout_for_count(count, model.config.width, seed)?);
            }
            let data = gen_arithmetic_pairs(&spec, seed)?;
            let pairs: Vec<_> = data.unseen_pairs.iter().chain(&data.unseen_numbers).copied().collect();
            let r = evaluate_arithmetic(model, op, &pairs)?;
            match format {
                ReportFormat::Markdown => r.to_markdown(),
                ReportFormat::Json => serde_json::to_string_pretty(&r)?,
            }
        }
        Task::Dijkstra | Task::Prim => bail!("use `compose` for graph algorithms"),
    };
    write_or_print(out, &text)
}

fn solver_name(model: &nee::model::Model) -> &'static str {
    match model.config.mode {
        ModelMode::Nee => "engine",
        ModelMode::Seq2seq => "baseline",
    }
}

fn render(r: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => r.to_markdown(),
        ReportFormat::Json => r.to_json(),
    }
}

fn compose(seed: u64, algorithm: Algorithm, min: Option<&Path>, add: Option<&Path>, size: usize, n: usize) -> Result<()> {
    let min_model = min.map(open_checkpoint).transpose()?.map(|c| c.model);
    let add_model = add.map(open_checkpoint).transpose()?.map(|c| c.model);
    for m in min_model.iter().chain(&add_model) {
        log("checkpoint", serde_json::json!({ "config_hash": m.config.hash() }));
    }
    let exact_select = ExactMin(ExactUpdate::Select);
    let exact_merge = ExactMin(ExactUpdate::Merge);
    let exact_add = ExactAdd(8);
    let mut correct = 0;
    for i in 0..n as u64 {
        let ok = match algorithm {
            Algorithm::MergeSort => {
                let engine: &dyn nee::harness::StepEngine = match &min_model {
                    Some(m) => m,
                    None => &exact_merge,
                };
                let input = nee::harness::test_inputs(&DistributionSpec::test(), size, 1, seed ^ i).remove(0);
                let mut want = input.clone();
                want.sort_unstable();
                MergeSorter(engine).solve_batch(&[input])?[0].output
                    == Some(want.into_iter().map(nee::numeral::Token::Num).collect())
            }
            Algorithm::Dijkstra | Algorithm::Prim => {
                let g = gen_graph(&GraphFamily::ErdosRenyi { p: 0.5 }, size, seed.wrapping_add(i))?;
                let g = g.induced(&g.component_of(0));
                let min: &dyn nee::harness::StepEngine = match &min_model {
                    Some(m) => m,
                    None => &exact_select,
                };
                if let Algorithm::Dijkstra = algorithm {
                    let add: &dyn nee::harness::AddEngine = match &add_model {
                        Some(m) => m,
                        None => &exact_add,
                    };
                    let want = compose_dijkstra(&exact_select, &exact_add, &g, 0)?;
                    compose_dijkstra(min, add, &g, 0).ok() == Some(want)
                } else {
                    let weight = |e: &[(usize, usize, u64)]| e.iter().map(|x| x.2).sum::<u64>();
                    let want = weight(&compose_prim(&exact_select, &g, 0)?);
                    compose_prim(min, &g, 0).ok().map(|e| weight(&e)) == Some(want)
                }
            }
        };
        correct += usize::from(ok);
    }
    println!("| algorithm | size | instances | exact % |\n|---|---:|---:|---:|");
    let name = match algorithm {
        Algorithm::Dijkstra => "shortest path",
        Algorithm::Prim => "minimum spanning tree",
        Algorithm::MergeSort => "merge sort",
    };
    println!("| {name} | {size} | {n} | {:.2} |", 100.0 * correct as f64 / n.max(1) as f64);
    Ok(())
}

fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut doc = String::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", p.display()))?;
        doc.push_str(&format!("## {}\n\n", p.file_stem().and_then(|s| s.to_str()).unwrap_or("report")));
        if let Ok(r) = serde_json::from_value::<EvalReport>(value.clone()) {
            doc.push_str(&r.to_markdown());
        } else if let Ok(r) = serde_json::from_value::<nee::harness::ArithmeticReport>(value.clone()) {
            doc.push_str(&r.to_markdown());
        } else if let Ok(r) = serde_json::from_value::<nee::harness::AblationTable>(value) {
            doc.push_str(&r.to_markdown());
        } else {
            bail!("{} is not a known report", p.display());
        }
        doc.push('\n');
    }
    write_or_print(out, &doc)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { task, n, validation, max_len, out, format } => {
            gen_data(seed, task, n, validation, max_len, &out, format)
        }
        Command::Train { config, out, losses } => {
            let c = load_train_config(&config, seed)?;
            log("train", serde_json::json!({ "config_hash": c.model.hash(), "seed": seed, "steps": c.steps }));
            let o = train(&c)?;
            for v in &o.validation {
                log("validation", serde_json::json!({ "step": v.step, "accuracy": v.accuracy }));
            }
            save_checkpoint(&o.checkpoint, &out)?;
            if let Some(p) = losses {
                std::fs::write(&p, serde_json::to_string(&o.losses)?)?;
            }
            log("written", serde_json::json!({ "path": out, "step": o.checkpoint.step }));
            Ok(())
        }
        Command::Eval { checkpoint, task, lengths, n, training_numbers, format, out } => {
            eval(seed, &checkpoint, task, &lengths, n, training_numbers, format, out.as_deref())
        }
        Command::Compose { algorithm, min, add, size, n } => {
            compose(seed, algorithm, min.as_deref(), add.as_deref(), size, n)
        }
        Command::Ablate { config, variants, length, n } => {
            let c = load_train_config(&config, seed)?;
            log("ablate", serde_json::json!({ "config_hash": c.model.hash(), "seed": seed }));
            let names: Vec<&str> = variants.iter().map(String::as_str).collect();
            let table = run_ablation(&c, &names, &TestMix::ALL, length, n)?;
            print!("{}", table.to_markdown());
            Ok(())
        }
        Command::ExportAttention { checkpoint, input, out } => {
            let ck = open_checkpoint(&checkpoint)?;
            log("checkpoint", serde_json::json!({ "config_hash": ck.model.config.hash() }));
            let rows = export_attention(&ck.model, &input, &out)?;
            log("written", serde_json::json!({ "path": out, "rows": rows.len() }));
            Ok(())
        }
        Command::ExportPca { checkpoint, holdout, out } => {
            let ck = open_checkpoint(&checkpoint)?;
            log("checkpoint", serde_json::json!({ "config_hash": ck.model.config.hash() }));
            let holdout: BTreeSet<u64> = holdout.into_iter().collect();
            let p = export_embeddings_pca(&ck.model, &holdout, &out)?;
            let mut fields = serde_json::json!({ "path": out, "explained": p.explained_total() });
            if !holdout.is_empty() {
                fields["neighbor_score"] = serde_json::json!(neighbor_interpolation_score(&ck.model, &holdout)?);
            }
            log("written", fields);
            Ok(())
        }
        Command::Report { inputs, out } => report(&inputs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": e.to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let not_found = e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
            });
            let kind = if not_found { "not_found" } else { "failed" };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            load_train_config(&path, 0).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
            n += 1;
        }
        assert!(n > 0);
    }
}
