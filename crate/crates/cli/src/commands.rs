use std::fs;
use std::io::{ErrorKind, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use tabtoken::data::{
    gen_synthetic_fourclass, load_csv, make_transfer_split, save_csv, DatasetTable, SchemaHint, SplitManifest,
    TransferSplit,
};
use tabtoken::experiment::{
    export_tokens, run_protocol, run_seed, subset_indices, token_geometry_report, GeometrySpec, MetricKind,
};
use tabtoken::seed::{derive, stream};
use tabtoken::transfer::{finetune, pretrain, reweight_finetune, Checkpoint};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{Cli, Command};

struct Ctx {
    quiet: bool,
}

impl Ctx {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[tabtoken] {}", msg.as_ref());
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Ctx { quiet: cli.quiet };
    match &cli.command {
        Command::GenSynthetic { n, out } => {
            let seed = cli.seed.unwrap_or(0);
            let table = gen_synthetic_fourclass(*n, seed)?;
            save_csv(&table, out)?;
            ctx.progress(format!("wrote {n} rows to {}", out.display()));
            Ok(())
        }
        Command::Split { config, out, tables } => {
            let cfg = load_config(config, cli.seed)?;
            let split = build_split(&cfg, &ctx)?;
            split.manifest.save(out)?;
            if let Some(dir) = tables {
                fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
                for (name, t) in [
                    ("pretrain", &split.pretrain),
                    ("validation", &split.validation),
                    ("pool", &split.downstream_pool),
                    ("test", &split.test),
                ] {
                    save_csv(t, &dir.join(format!("{name}.csv")))?;
                }
            }
            print_json(&json!({
                "d": split.overlap.d,
                "d_t": split.overlap.d_t,
                "s": split.overlap.s(),
                "rows": {
                    "pretrain": split.pretrain.n_rows(),
                    "validation": split.validation.n_rows(),
                    "pool": split.downstream_pool.n_rows(),
                    "test": split.test.n_rows(),
                },
            }))
        }
        Command::Pretrain { config, out } => {
            let cfg = load_config(config, cli.seed)?;
            let split = build_split(&cfg, &ctx)?;
            ctx.progress(format!(
                "pre-training {} on {} rows for {} epochs",
                cfg.pipeline.model.name(),
                split.pretrain.n_rows(),
                cfg.pipeline.pretrain.epochs
            ));
            let chk = pretrain(
                &split.pretrain,
                &split.validation,
                &cfg.pipeline,
                derive(cfg.seed, stream::PRETRAIN),
            )?;
            chk.save(out)?;
            let log = &chk.record.log;
            print_json(&json!({
                "best_epoch": log.best_epoch,
                "initial_objective": log.initial_objective,
                "final_objective": log.final_objective,
                "validation_score": log.validation_score,
            }))
        }
        Command::Finetune {
            config,
            pretrained,
            out,
        }
        | Command::ReweightFinetune {
            config,
            pretrained,
            out,
        } => {
            let cfg = load_config(config, cli.seed)?;
            let split = build_split(&cfg, &ctx)?;
            let chk = Checkpoint::load(pretrained)?;
            let shots = cfg.protocol.shots;
            let idx = subset_indices(&split, shots, cfg.seed, cfg.protocol.subset)?;
            let fewshot = split.downstream_pool.select_rows(&idx);
            let seed = run_seed(cfg.seed, 0);
            ctx.progress(format!(
                "fine-tuning on {} rows (subset {})",
                fewshot.n_rows(),
                cfg.protocol.subset
            ));
            let tuned = if matches!(cli.command, Command::Finetune { .. }) {
                finetune(&chk, &fewshot, &split.overlap, &cfg.pipeline, seed)?
            } else {
                reweight_finetune(&chk, &fewshot, cfg.reweight.n_new, &cfg.pipeline, seed)?
            };
            tuned.save(out)?;
            let metric = tuned.evaluate(&split.test, 1)?;
            print_json(&json!({
                "metric": MetricKind::for_task(&split.test.task),
                "test": metric,
                "transferred_rows": tuned.record.transferred_rows,
                "warm_started": tuned.record.warm_started.len(),
            }))
        }
        Command::RunProtocol {
            config,
            out,
            jobs,
            pretrained,
        } => {
            let cfg = load_config(config, cli.seed)?;
            let split = build_split(&cfg, &ctx)?;
            let plan = cfg.plan();
            let chk = pretrained.as_deref().map(Checkpoint::load).transpose()?;
            ctx.progress(format!(
                "running {} x {} {:?} runs on {} job(s)",
                plan.n_subsets, plan.n_seeds, plan.pipeline, jobs
            ));
            let report = run_protocol(&split, &plan, cfg.seed, *jobs, chk.as_ref())?;
            report.save(out)?;
            print_json(&json!({
                "metric": report.metric,
                "runs": report.records.len(),
                "mean": report.mean,
                "std": report.std,
            }))
        }
        Command::ExportTokens { checkpoint, out } => {
            let chk = Checkpoint::load(checkpoint)?;
            export_tokens(&chk, out)?;
            ctx.progress(format!(
                "wrote {} tokens to {}",
                chk.network.tokenizer.n_rows(),
                out.display()
            ));
            Ok(())
        }
        Command::TokenReport {
            checkpoint,
            out,
            geometry,
            synthetic,
            table,
            label,
        } => {
            let chk = Checkpoint::load(checkpoint)?;
            let spec = match (geometry, synthetic) {
                (Some(path), _) => {
                    let text =
                        fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
                }
                (None, true) => GeometrySpec::synthetic().restricted_to(chk.schema()),
                (None, false) => GeometrySpec::default(),
            };
            let raw = table
                .as_deref()
                .map(|p| load_for_checkpoint(&chk, p, label))
                .transpose()?;
            let report = token_geometry_report(&chk, &spec, raw.as_ref())?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::data(e.to_string()))?;
            match out {
                Some(path) => fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display()))),
                None => print_text(&text),
            }
        }
        Command::DefaultConfig => print_json(&RunConfig::default()),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> CliResult<DatasetTable> {
    let path = cfg
        .data
        .path
        .as_deref()
        .ok_or_else(|| CliError::config("data.path is required"))?;
    let hint = match &cfg.data.schema {
        Some(p) => SchemaHint::from_json_file(p)?,
        None => SchemaHint::default(),
    };
    Ok(load_csv(path, &hint, &cfg.data.label)?)
}

fn build_split(cfg: &RunConfig, ctx: &Ctx) -> CliResult<TransferSplit> {
    let full = load_data(cfg)?;
    let split = match &cfg.split.manifest {
        Some(p) => SplitManifest::load(p)?.apply(&full)?,
        None => make_transfer_split(&full, &cfg.split.overlap, cfg.seed)?,
    };
    ctx.progress(format!(
        "split: d={} d_t={} s={}; {} pretrain / {} validation / {} pool / {} test rows",
        split.overlap.d,
        split.overlap.d_t,
        split.overlap.s(),
        split.pretrain.n_rows(),
        split.validation.n_rows(),
        split.downstream_pool.n_rows(),
        split.test.n_rows()
    ));
    Ok(split)
}

/// Loads a raw CSV with the checkpoint's vocabulary and keeps its feature columns.
fn load_for_checkpoint(chk: &Checkpoint, path: &Path, label: &str) -> CliResult<DatasetTable> {
    let hint = SchemaHint::from_schema(chk.schema(), &chk.task);
    let table = load_csv(path, &hint, label)?;
    let cols = chk
        .schema()
        .iter()
        .map(|f| {
            table
                .feature_index(&f.name)
                .ok_or_else(|| CliError::data(format!("{}: missing column '{}'", path.display(), f.name)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(table.select_features(&cols))
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    print_text(&text)
}

/// Writes to stdout; a closed pipe is not an error.
fn print_text(text: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(CliError::data(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}
