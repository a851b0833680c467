//! Subcommand implementations. Every artifact embeds the resolved config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gencond::checkpoint::{load_checkpoint, save_checkpoint};
use gencond::condense::{synthesize_set, CondensedModel, Condenser, StepRecord};
use gencond::coreset::{coreset_baseline, CoresetMethod};
use gencond::data::{LabeledDataset, SampleSource, Split};
use gencond::eval::{cross_arch_eval, evaluate, read_results_csv, sort_rows, write_results_csv, EvalReport, ResultRow};
use gencond::nn::{FeatureNet, FeatureNetConfig};
use gencond::train::train_classifier;
use gencond::viz::Pca;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{resolve, resolve_over, RunConfig};
use crate::error::CliError;
use crate::plot::{write_scatter_csv, write_scatter_svg, PointKind, ScatterPoint};
use crate::{Command, Common};

pub const CHECKPOINT_FILE: &str = "checkpoint.gcnd";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const RUN_FILE: &str = "run.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const REPORT_FILE: &str = "report.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SCATTER_SVG: &str = "scatter.svg";
pub const SCATTER_CSV: &str = "scatter.csv";

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Condense { common } => cmd_condense(&common),
        Command::Evaluate {
            checkpoint,
            ipc,
            arch,
            common,
        } => cmd_evaluate(&checkpoint, ipc, arch.as_deref(), &common),
        Command::Baseline { method, ipc, common } => cmd_baseline(&method, ipc, &common),
        Command::Visualize { checkpoint, common } => cmd_visualize(&checkpoint, &common),
        Command::Report { results_dir } => cmd_report(&results_dir).map(|_| ()),
    }
}

/// `git describe` of the working directory, or `unknown`.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(gencond::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn run_id(out: &Path) -> String {
    out.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| out.display().to_string())
}

/// Appends rows to `results.csv` in `out`, keeping earlier rows.
fn append_results(out: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let path = out.join(RESULTS_FILE);
    let mut all = if path.exists() { read_results_csv(&path)? } else { Vec::new() };
    all.extend_from_slice(rows);
    write_results_csv(&path, &all)?;
    Ok(())
}

fn prepare(common: &Common, base: Option<&RunConfig>) -> Result<RunConfig, CliError> {
    let overrides = common.parsed_overrides()?;
    let cfg = match base {
        Some(b) => resolve_over(Some(b), common.config.as_deref(), &overrides, common.seed)?,
        None => resolve(common.config.as_deref(), &overrides, common.seed)?,
    };
    fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

/// The run config stored in a checkpoint, if it was written by this tool.
fn embedded_config(model: &CondensedModel) -> Option<RunConfig> {
    serde_json::from_value(model.config.clone()).ok()
}

fn load_model(path: &Path) -> Result<CondensedModel, CliError> {
    Ok(load_checkpoint(path)?)
}

fn check_model_matches(model: &CondensedModel, data: &LabeledDataset) -> Result<(), CliError> {
    if model.arch.num_classes != data.num_classes || model.arch.feature.image != data.image_shape() {
        return Err(CliError::usage(format!(
            "checkpoint is for {} classes of {:?}, dataset `{}` has {} classes of {:?}",
            model.arch.num_classes,
            model.arch.feature.image,
            data.name,
            data.num_classes,
            data.image_shape()
        )));
    }
    Ok(())
}

/// Trains a feature network on `data` with the extractor schedule.
fn train_extractor(cfg: &RunConfig, data: &LabeledDataset) -> Result<FeatureNet, CliError> {
    let net_cfg = FeatureNetConfig {
        image: data.image_shape(),
        width: cfg.networks.feature_width,
        depth: cfg.networks.feature_depth,
        num_classes: data.num_classes,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.condense.seed);
    let mut net = FeatureNet::new(net_cfg, &mut rng)?;
    train_classifier(&mut net, &data.images, &data.labels, &cfg.condense.extractor, &mut rng)?;
    Ok(net)
}

pub fn cmd_condense(common: &Common) -> Result<(), CliError> {
    let cfg = prepare(common, None)?;
    let out = &common.out;
    let train = cfg.dataset.load(Split::Train)?;
    write_json(&out.join(DATASET_FILE), &train.manifest("", ""))?;
    let started = Instant::now();
    let condense_cfg = cfg.condense_config();
    let total = condense_cfg.total_outer_steps();
    log::info!(
        "condensing {} ({} images, {} classes) for {total} outer steps",
        train.name,
        train.len(),
        train.num_classes
    );
    let mut metrics = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let mut io_error = None;
    let mut last: Option<StepRecord> = None;
    let condenser = Condenser::new(&train, condense_cfg, &cfg.networks, &cfg.codebook)?;
    let result = condenser.run(|rec| {
        last = Some(*rec);
        if io_error.is_none() {
            let line = serde_json::to_string(rec).expect("record serializes");
            if let Err(e) = writeln!(metrics, "{line}") {
                io_error = Some(e);
            }
        }
        if rec.step % 50 == 0 {
            log::info!("step {}/{total}: L_con {:.4}", rec.step, rec.con);
        }
    });
    metrics.flush()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let mut model = result?;
    let git = git_describe();
    model.config = cfg.to_json();
    model.provenance.git_describe = git.clone();
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    write_json(
        &out.join(RUN_FILE),
        &json!({
            "command": "condense",
            "config": cfg,
            "seed": cfg.condense.seed,
            "dataset": train.manifest("", ""),
            "wall_clock_secs": started.elapsed().as_secs_f64(),
            "steps": total,
            "final_losses": last,
            "param_count": model.param_count(),
            "git_describe": git,
            "artifacts": [CHECKPOINT_FILE, METRICS_FILE, DATASET_FILE],
        }),
    )?;
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn cmd_evaluate(checkpoint: &Path, ipc: Option<usize>, arch: Option<&str>, common: &Common) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let cfg = prepare(common, embedded_config(&model).as_ref())?;
    let ipc = ipc.unwrap_or(model.arch.ipc);
    if ipc == 0 || ipc > model.arch.ipc {
        return Err(CliError::usage(format!(
            "ipc {ipc} not in [1, {}] of the stored codebook",
            model.arch.ipc
        )));
    }
    let test = cfg.dataset.load(Split::Test)?;
    check_model_matches(&model, &test)?;
    let archs: Vec<String> = arch
        .unwrap_or(&cfg.eval.arch)
        .split(',')
        .map(|a| a.trim().to_owned())
        .filter(|a| !a.is_empty())
        .collect();
    let started = Instant::now();
    let reports = cross_arch_eval(&model, &test, &archs, ipc, &cfg.eval)?;
    let rows: Vec<ResultRow> = reports.iter().map(|r| ResultRow::from_report(r, run_id(&common.out))).collect();
    write_report(&common.out, "evaluate", &cfg, &reports, json!({ "checkpoint": checkpoint }), started)?;
    append_results(&common.out, &rows)?;
    print_rows(&rows);
    Ok(())
}

fn write_report(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    reports: &[EvalReport],
    extra: serde_json::Value,
    started: Instant,
) -> Result<(), CliError> {
    write_json(
        &out.join(REPORT_FILE),
        &json!({
            "command": command,
            "config": cfg,
            "seed": cfg.eval.seed_base,
            "reports": reports,
            "details": extra,
            "wall_clock_secs": started.elapsed().as_secs_f64(),
            "git_describe": git_describe(),
        }),
    )
}

pub fn cmd_baseline(method: &str, ipc: usize, common: &Common) -> Result<(), CliError> {
    let method: CoresetMethod = method.parse()?;
    let cfg = prepare(common, None)?;
    let train = cfg.dataset.load(Split::Train)?;
    let test = cfg.dataset.load(Split::Test)?;
    let extractor = match method {
        CoresetMethod::Random => None,
        _ => Some(train_extractor(&cfg, &train)?),
    };
    let started = Instant::now();
    let set = coreset_baseline(&train, method, ipc, extractor.as_ref(), cfg.condense.seed)?;
    let selected: Vec<usize> = set
        .sources
        .iter()
        .filter_map(|s| match s {
            SampleSource::Real { index } => Some(*index),
            SampleSource::Code { .. } => None,
        })
        .collect();
    let mut report = evaluate(&set, &test, &cfg.eval)?;
    report.method = format!("coreset:{method}");
    let row = ResultRow::from_report(&report, run_id(&common.out));
    write_report(
        &common.out,
        "baseline",
        &cfg,
        std::slice::from_ref(&report),
        json!({ "method": method, "ipc": ipc, "selected_indices": selected }),
        started,
    )?;
    append_results(&common.out, std::slice::from_ref(&row))?;
    print_rows(std::slice::from_ref(&row));
    Ok(())
}

pub fn cmd_visualize(checkpoint: &Path, common: &Common) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let cfg = prepare(common, embedded_config(&model).as_ref())?;
    let train = cfg.dataset.load(Split::Train)?;
    check_model_matches(&model, &train)?;
    let ipc = cfg.visualize.ipc.unwrap_or(model.arch.ipc);
    let set = synthesize_set(&model, ipc)?;
    let trained;
    let net = match &model.extractor {
        Some(net) => net,
        None => {
            trained = train_extractor(&cfg, &train)?;
            &trained
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.condense.seed);
    let count = cfg.visualize.real_sample.min(train.len());
    let mut real_idx = index::sample(&mut rng, train.len(), count).into_vec();
    real_idx.sort_unstable();
    let real_feats = net.infer(&train.gather(&real_idx), 256)?.0;
    let syn_feats = net.infer(&set.images, 256)?.0;
    let pca = Pca::fit(&real_feats, 2)?;
    let real_xy = pca.transform(&real_feats)?;
    let syn_xy = pca.transform(&syn_feats)?;
    let mut points = Vec::with_capacity(real_idx.len() + set.len());
    for (i, &idx) in real_idx.iter().enumerate() {
        points.push(ScatterPoint {
            kind: PointKind::Real,
            class: train.labels[idx],
            index: idx,
            x: real_xy.row(i)[0],
            y: real_xy.row(i)[1],
        });
    }
    for (i, src) in set.sources.iter().enumerate() {
        let code = match src {
            SampleSource::Code { code, .. } => *code,
            SampleSource::Real { index } => *index,
        };
        points.push(ScatterPoint {
            kind: PointKind::Synthetic,
            class: set.labels[i],
            index: code,
            x: syn_xy.row(i)[0],
            y: syn_xy.row(i)[1],
        });
    }
    let out = &common.out;
    write_scatter_csv(&out.join(SCATTER_CSV), &points)?;
    write_scatter_svg(
        &out.join(SCATTER_SVG),
        &points,
        &format!("{}: real (dots) vs synthetic (triangles)", train.name),
    )?;
    write_json(
        &out.join("visualize.json"),
        &json!({
            "command": "visualize",
            "config": cfg,
            "seed": cfg.condense.seed,
            "checkpoint": checkpoint,
            "ipc": ipc,
            "real_indices": real_idx,
            "explained_variance": pca.variances,
            "artifacts": [SCATTER_SVG, SCATTER_CSV],
        }),
    )?;
    println!("wrote {} ({} points)", out.join(SCATTER_SVG).display(), points.len());
    Ok(())
}

fn collect_results(dir: &Path, found: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_results(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == RESULTS_FILE) {
            found.push(path);
        }
    }
    Ok(())
}

fn format_table(rows: &[ResultRow]) -> String {
    let mut out = format!(
        "{:<16} {:>4} {:<20} {:<10} {:>16} {:>5} {:>6}  {}\n",
        "dataset", "ipc", "method", "arch", "acc % (mean±std)", "runs", "epochs", "run_id"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>4} {:<20} {:<10} {:>16} {:>5} {:>6}  {}\n",
            r.dataset,
            r.ipc,
            r.method,
            r.arch,
            format!("{:.2}±{:.2}", 100.0 * r.mean, 100.0 * r.std),
            r.runs,
            r.epochs,
            r.run_id
        ));
    }
    out
}

fn print_rows(rows: &[ResultRow]) {
    print!("{}", format_table(rows));
}

/// Aggregates rows and writes `summary.csv`. Returns the sorted rows.
pub fn cmd_report(dir: &Path) -> Result<Vec<ResultRow>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::load(dir, "not a directory"));
    }
    let mut files = Vec::new();
    collect_results(dir, &mut files)?;
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_results_csv(f)?);
    }
    if rows.is_empty() {
        println!("no results under {}", dir.display());
        return Ok(rows);
    }
    sort_rows(&mut rows);
    print_rows(&rows);
    write_results_csv(&dir.join(SUMMARY_FILE), &rows)?;
    Ok(rows)
}
