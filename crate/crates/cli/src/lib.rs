//! Commands behind the `probanet` binary.
//!
//! Output layout of `train --out DIR`:
//!
//! ```text
//! DIR/resolved-config.txt
//! DIR/summary.csv
//! DIR/seed-<s>/<baseline|probanet>/resolved-config.txt
//! DIR/seed-<s>/<baseline|probanet>/metrics.csv
//! DIR/seed-<s>/<baseline|probanet>/heatmap-c<k>-s<step>.pgm
//! DIR/seed-<s>/<baseline|probanet>/overlay-c<k>-s<step>.ppm
//! ```
//!
//! Heatmaps are taken on the run's first held-out scene. Every file is a
//! pure function of the config and seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use probanet::config::{ExperimentConfig, RESOLVED_CONFIG_FILE};
use probanet::gate::complexity_report;
use probanet::gradcheck::{run_gradcheck, GradcheckOptions, TOLERANCE};
use probanet::heatmap::{channel_pgm, gate_weights, overlay_ppm};
use probanet::train::{
    eval_scenes, experiment_seeds, run_many, run_steps, summary_row, Model, RunResult, TrainConfig,
    SUMMARY_HEADER,
};
use probanet::{Error, Result};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Exit status for an error surfaced by a command.
pub fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) | Error::ConfigParse { .. } | Error::Domain(_) => EXIT_USAGE,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn say(out: &mut impl Write, line: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Runs the gradient suite and prints one row per op. Returns whether
/// every op passed.
pub fn cmd_gradcheck(opts: &GradcheckOptions, out: &mut impl Write) -> Result<bool> {
    let report = run_gradcheck(opts)?;
    say(
        out,
        format_args!(
            "{:<22}{:>14}  status (tolerance {TOLERANCE:e}, step {:e}, {} seeds)",
            "op", "worst rel err", opts.step, opts.seeds
        ),
    )?;
    for r in &report {
        let status = if r.passed() { "ok" } else { "FAIL" };
        say(
            out,
            format_args!("{:<22}{:>14.3e}  {status}", r.op, r.worst),
        )?;
    }
    let failed: Vec<&str> = report
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.op)
        .collect();
    if failed.is_empty() {
        say(out, format_args!("all {} ops passed", report.len()))?;
    } else {
        say(out, format_args!("gradcheck failed: {}", failed.join(", ")))?;
    }
    Ok(failed.is_empty())
}

pub fn cmd_count(
    channels: usize,
    anchors: usize,
    reduction: usize,
    height: usize,
    width: usize,
    out: &mut impl Write,
) -> Result<()> {
    let report = complexity_report(channels, anchors, reduction, height, width)?;
    write!(out, "{report}").map_err(|e| Error::io("<stdout>", e))
}

/// Which variants `train` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variants {
    Both,
    Baseline,
    Probanet,
}

impl Variants {
    fn flags(self) -> &'static [bool] {
        match self {
            Variants::Both => &[false, true],
            Variants::Baseline => &[false],
            Variants::Probanet => &[true],
        }
    }
}

pub fn variant_name(probanet_enabled: bool) -> &'static str {
    if probanet_enabled {
        "probanet"
    } else {
        "baseline"
    }
}

pub fn run_dir(out: &Path, seed: u64, probanet_enabled: bool) -> PathBuf {
    out.join(format!("seed-{seed}"))
        .join(variant_name(probanet_enabled))
}

pub fn heatmap_paths(dir: &Path, channel: usize, step: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("heatmap-c{channel}-s{step}.pgm")),
        dir.join(format!("overlay-c{channel}-s{step}.ppm")),
    )
}

/// Writes the heatmap pair of each channel in `channels` for `model`.
fn write_heatmaps(
    dir: &Path,
    cfg: &ExperimentConfig,
    model: &Model,
    step: usize,
    channels: impl IntoIterator<Item = usize>,
) -> Result<Vec<PathBuf>> {
    let scene = eval_scenes(&cfg.sim, &cfg.train)?.swap_remove(0);
    let t2 = gate_weights(model, &scene)?;
    let grid = cfg.sim.anchor_grid();
    let mut written = Vec::new();
    for k in channels {
        let (pgm, ppm) = heatmap_paths(dir, k, step);
        write_file(&pgm, channel_pgm(&t2, k)?)?;
        write_file(&ppm, overlay_ppm(&scene, &grid, &t2, k)?)?;
        written.extend([pgm, ppm]);
    }
    Ok(written)
}

/// The single-run config recorded next to a run's artifacts.
fn run_config(cfg: &ExperimentConfig, train: &TrainConfig) -> ExperimentConfig {
    ExperimentConfig {
        sim: cfg.sim.clone(),
        train: train.clone(),
        seeds: 1,
    }
}

fn write_run(out_dir: &Path, cfg: &ExperimentConfig, result: &RunResult) -> Result<()> {
    let train = &result.config;
    let dir = run_dir(out_dir, result.seed, train.probanet_enabled);
    create_dir(&dir)?;
    run_config(cfg, train).save(&dir.join(RESOLVED_CONFIG_FILE))?;
    write_file(&dir.join(METRICS_FILE), result.log.to_csv())?;
    write_heatmaps(
        &dir,
        &run_config(cfg, train),
        &result.state.model,
        result.state.step,
        0..cfg.sim.anchor_grid().channels(),
    )?;
    Ok(())
}

/// Trains the selected variants on `seeds` consecutive seeds and writes
/// every artifact under `out_dir`.
pub fn cmd_train(
    config: Option<&Path>,
    out_dir: &Path,
    variants: Variants,
    seeds: Option<usize>,
    out: &mut impl Write,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = seeds {
        cfg.seeds = n;
    }
    cfg.validate()?;
    create_dir(out_dir)?;
    cfg.save(&out_dir.join(RESOLVED_CONFIG_FILE))?;

    let seeds = experiment_seeds(cfg.train.seed, cfg.seeds);
    let base = &cfg.train;
    let configs: Vec<TrainConfig> = seeds
        .iter()
        .flat_map(|&seed| {
            variants
                .flags()
                .iter()
                .map(move |&probanet_enabled| TrainConfig {
                    seed,
                    probanet_enabled,
                    ..base.clone()
                })
        })
        .collect();
    let results = run_many(&cfg.sim, &configs)?;

    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    let per_seed = variants.flags().len();
    for (seed, runs) in seeds.iter().zip(results.chunks(per_seed)) {
        for r in runs {
            write_run(out_dir, &cfg, r)?;
        }
        let pick = |enabled: bool| runs.iter().find(|r| r.config.probanet_enabled == enabled);
        let row = summary_row(*seed, pick(false), pick(true));
        say(out, format_args!("{row}"))?;
        summary.push_str(&row);
        summary.push('\n');
    }
    write_file(&out_dir.join(SUMMARY_FILE), summary)?;
    say(
        out,
        format_args!("wrote {} runs under {}", results.len(), out_dir.display()),
    )
}

/// Replays a run from its recorded config up to `step` and writes the
/// heatmap pair for `channel` into the run directory.
pub fn cmd_heatmap(
    run: &Path,
    channel: usize,
    step: Option<usize>,
    out: &mut impl Write,
) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::load(&run.join(RESOLVED_CONFIG_FILE))?;
    let total = cfg.train.total_steps();
    let step = step.unwrap_or(total);
    if step > total {
        return Err(Error::Config(format!(
            "step {step} is past the end of the run ({total} steps)"
        )));
    }
    let anchors = cfg.sim.anchor_grid().channels();
    if channel >= anchors {
        return Err(Error::Config(format!(
            "channel {channel} out of range (run has {anchors} anchor channels)"
        )));
    }
    let result = run_steps(&cfg.sim, &cfg.train, step)?;
    let written = write_heatmaps(run, &cfg, &result.state.model, step, [channel])?;
    for p in &written {
        say(out, format_args!("{}", p.display()))?;
    }
    Ok(written)
}
