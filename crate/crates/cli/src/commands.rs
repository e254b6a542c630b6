//! Subcommand implementations: generate, run, plot, flops, validate.
//!
//! Every run writes a manifest holding the effective-config hash and seeds,
//! which is enough to reproduce the outputs bit for bit. Reports carry no
//! wall-clock fields, so repeated runs of one config are byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use driftsel_core::flops::{select_flops, train_flops, CostModel, SelectionMethod};
use driftsel_core::model::{Checkpoint, ModelConfig};
use driftsel_core::protocol::{
    derive_seed, pretrain_base, run_protocol_from, stage_data, ProtocolReport,
    write_summary,
};
use driftsel_core::stream::{generate_stream, EventStream};
use driftsel_core::{Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::plot;

/// File names inside a run's output directory.
const STREAM_DEFAULT: &str = "stream.jsonl";
const EFFECTIVE_CONFIG: &str = "effective_config.toml";
const MANIFEST: &str = "manifest.json";
const PRETRAIN_CHECKPOINT: &str = "pretrain_checkpoint.json";
const REPORT_JSON: &str = "report.json";
const REPORT_JSONL: &str = "report.jsonl";
const SUMMARY: &str = "summary.txt";

/// Reproducibility record written next to every artifact set.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config_sha256: &'a str,
    seed: u64,
    world_seed: u64,
    version: &'a str,
    files: Vec<&'a str>,
}

fn write_manifest(dir: &Path, hash: &str, cfg: &ExperimentConfig, files: Vec<&str>) -> Result<()> {
    let manifest = Manifest {
        config_sha256: hash,
        seed: cfg.protocol.seed,
        world_seed: cfg.world.seed,
        version: env!("CARGO_PKG_VERSION"),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest serialization: {e}")))?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(())
}

/// Stored config hash of a previous run in `dir`, if any.
fn previous_hash(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    Some(v.get("config_sha256")?.as_str()?.to_string())
}

fn stream_path(cfg: &ExperimentConfig, dir: &Path) -> PathBuf {
    let name = if cfg.output.stream_file.is_empty() {
        STREAM_DEFAULT
    } else {
        cfg.output.stream_file.as_str()
    };
    dir.join(name)
}

/// Generates the stream, or reloads a previously written file when its
/// contents match the configured world (regeneration is cheap and exact, so
/// a mismatch means the file belongs to a different config).
fn obtain_stream(cfg: &ExperimentConfig, dir: &Path) -> Result<EventStream> {
    let stream = generate_stream(&cfg.world, cfg.stream.start, cfg.stream_end())?;
    let path = stream_path(cfg, dir);
    if path.exists() {
        let file = fs::File::open(&path)?;
        let on_disk = EventStream::read_events(std::io::BufReader::new(file), cfg.stream.start)?;
        if on_disk.events != stream.events {
            return Err(Error::data(format!(
                "{} does not match the configured world; delete it or change output.dir",
                path.display()
            )));
        }
    }
    Ok(stream)
}

/// `generate`: write the event stream and a manifest.
pub fn cmd_generate(cfg: &ExperimentConfig, hash: &str, config_dir: &Path) -> Result<()> {
    let dir = cfg.output_dir(config_dir);
    fs::create_dir_all(&dir)?;
    let stream = generate_stream(&cfg.world, cfg.stream.start, cfg.stream_end())?;
    let path = stream_path(cfg, &dir);
    let mut file = std::io::BufWriter::new(fs::File::create(&path)?);
    stream.write_events(&mut file)?;
    file.flush()?;
    write_manifest(&dir, hash, cfg, vec![EFFECTIVE_CONFIG, MANIFEST, &cfg.output.stream_file])?;
    println!(
        "wrote {} events ({} months, {} users, catalog {}) to {}",
        stream.events.len(),
        stream.catalog_size_at.len(),
        stream.users_at.values().max().copied().unwrap_or(0),
        stream.catalog_size_at.values().max().copied().unwrap_or(0),
        path.display()
    );
    Ok(())
}

/// `validate`: schema and semantic checks only; prints the planned shape.
pub fn cmd_validate(cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    println!("config ok (sha256 {})", &hash[..12]);
    println!(
        "  world: {} users, catalog {}, drift {}",
        cfg.world.num_users, cfg.world.initial_catalog, cfg.world.drift_rate
    );
    println!(
        "  protocol: {} interval(s) of {} month(s) from {}",
        cfg.protocol.horizon, cfg.protocol.interval_months, cfg.protocol.pretrain_end
    );
    println!("  arms: {}", cfg.arms.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(", "));
    Ok(())
}

/// `run --dry-run`: the arm-by-interval matrix, without any training.
fn print_plan(cfg: &ExperimentConfig, stream: &EventStream) -> Result<()> {
    let staged = stage_data(stream, &cfg.protocol)?;
    println!("pretrain: {} chunks before {}", staged.pretrain.len(), cfg.protocol.pretrain_end);
    println!("{:<20} {:>9} {:>11} {:>11} {:>11}", "interval", "window", "pool", "refs", "eval");
    for iv in &staged.intervals {
        println!(
            "{:<20} {:>9} {:>11} {:>11} {:>11}",
            format!("{} .. {}", cfg.protocol.boundary(iv.t), cfg.protocol.boundary(iv.t + 1)),
            iv.t,
            iv.pool.len(),
            iv.ref_candidates.len().min(cfg.protocol.ref_size),
            iv.eval.len(),
        );
    }
    for arm in &cfg.arms {
        println!("arm {:<20} x {} interval(s)", arm.name, staged.intervals.len());
    }
    Ok(())
}

/// `run`: the full pipeline — stream, pretrain (or resume), every arm and
/// interval, reports, summary, manifest.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    hash: &str,
    config_dir: &Path,
    effective: &str,
    resume: bool,
    dry_run: bool,
) -> Result<()> {
    let dir = cfg.output_dir(config_dir);
    fs::create_dir_all(&dir)?;
    let stream = obtain_stream(cfg, &dir)?;

    if dry_run {
        return print_plan(cfg, &stream);
    }

    let same_config = previous_hash(&dir).as_deref() == Some(hash);
    if resume && same_config && dir.join(REPORT_JSON).exists() {
        println!("run already complete in {}; nothing to do", dir.display());
        return Ok(());
    }

    // Pretraining is the expensive one-off stage; resume restores it from
    // its checkpoint and replays the (deterministic) interval work.
    let ck_path = dir.join(PRETRAIN_CHECKPOINT);
    let loss_path = dir.join("pretrain_loss.json");
    let (base, pretrain_loss) = if resume && same_config && ck_path.exists() && loss_path.exists() {
        println!("resuming from {}", ck_path.display());
        let ck = Checkpoint::load(&ck_path)?;
        let loss: Vec<f64> = serde_json::from_str(&fs::read_to_string(&loss_path)?)
            .map_err(|e| Error::data(format!("pretrain loss trace: {e}")))?;
        (ck.model, loss)
    } else {
        let (model, loss) = pretrain_base(&stream, &cfg.model, &cfg.protocol)?;
        let seed = derive_seed(cfg.protocol.seed, "pretrain", 0, 0);
        Checkpoint::new(model.clone(), seed, 0).save(&ck_path)?;
        fs::write(
            &loss_path,
            serde_json::to_string(&loss).map_err(|e| Error::data(e.to_string()))? + "\n",
        )?;
        (model, loss)
    };

    let report = run_protocol_from(base, pretrain_loss, &stream, &cfg.protocol, &cfg.arms)?;
    write_reports(&report, &dir)?;

    // Persist the stream alongside the reports when generate was skipped.
    let spath = stream_path(cfg, &dir);
    if !spath.exists() {
        let mut file = std::io::BufWriter::new(fs::File::create(&spath)?);
        stream.write_events(&mut file)?;
        file.flush()?;
    }
    fs::write(dir.join(EFFECTIVE_CONFIG), effective)?;
    write_manifest(
        &dir,
        hash,
        cfg,
        vec![
            EFFECTIVE_CONFIG,
            MANIFEST,
            &cfg.output.stream_file,
            PRETRAIN_CHECKPOINT,
            REPORT_JSON,
            REPORT_JSONL,
            SUMMARY,
        ],
    )?;

    let mut summary = Vec::new();
    write_summary(&report, &mut summary)?;
    print!("{}", String::from_utf8_lossy(&summary));
    println!("reports written to {}", dir.display());
    Ok(())
}

fn write_reports(report: &ProtocolReport, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::data(format!("report serialization: {e}")))?;
    fs::write(dir.join(REPORT_JSON), json + "\n")?;

    // One line per (arm, interval): append-safe during long runs.
    let mut jsonl = String::new();
    for arm in &report.arms {
        for row in &arm.intervals {
            jsonl.push_str(
                &serde_json::to_string(row).map_err(|e| Error::data(e.to_string()))?,
            );
            jsonl.push('\n');
        }
    }
    fs::write(dir.join(REPORT_JSONL), jsonl)?;

    let mut summary = Vec::new();
    write_summary(report, &mut summary)?;
    fs::write(dir.join(SUMMARY), summary)?;
    Ok(())
}

/// `plot`: curves, scatter, and the error-reduction table from a run's
/// report directory.
pub fn cmd_plot(report_dir: &Path) -> Result<()> {
    let path = report_dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::data(format!("no {} in {}", REPORT_JSON, report_dir.display())))?;
    let report: ProtocolReport =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;

    let plots = report_dir.join("plots");
    fs::create_dir_all(&plots)?;
    for metric in plot::metrics_of(&report) {
        let svg = plot::curves_svg(&report, metric);
        fs::write(plots.join(format!("{}.svg", metric.label())), svg)?;
    }
    fs::write(plots.join("flops_vs_ndcg.svg"), plot::flops_scatter_svg(&report))?;

    match plot::error_reduction_csv(&report) {
        Ok(csv) => fs::write(plots.join("error_reduction.csv"), csv)?,
        // Table depends on both reference arms; skip with a notice.
        Err(e) => println!("skipping error-reduction table: {e}"),
    }
    println!("plots written to {}", plots.display());
    Ok(())
}

/// `flops`: the analytic per-method cost table for one cost model.
#[allow(clippy::too_many_arguments)]
pub fn cmd_flops(
    model: &ModelConfig,
    events: usize,
    n: usize,
    r: usize,
    k: usize,
    epochs: usize,
) -> Result<()> {
    let f_fwd = driftsel_core::model::analytic_hidden_flops(model, events);
    let cm = CostModel::new(f_fwd, model.dim, 4 * model.dim, n, r, k, epochs);
    println!(
        "cost model: F_fwd {:.4e} (dim {}, depth {}, {} events), n {}, r {}, k {}, epochs {}",
        f_fwd, model.dim, model.depth, events, n, r, k, epochs
    );
    println!(
        "{:<10} {:>14} {:>14} {:>14} {:>10}",
        "method", "select", "train", "total", "vs_repsim"
    );
    let repsim = select_flops(SelectionMethod::RepSim, &cm)?;
    let train = train_flops(k, &cm);
    for method in [
        SelectionMethod::Random,
        SelectionMethod::TokenBag,
        SelectionMethod::RepSim,
        SelectionMethod::GradSim,
    ] {
        let sel = select_flops(method, &cm)?;
        println!(
            "{:<10} {:>14.4e} {:>14.4e} {:>14.4e} {:>10.3}",
            format!("{method:?}"),
            sel,
            train,
            sel + train,
            if repsim > 0.0 { sel / repsim } else { 0.0 }
        );
    }
    Ok(())
}
