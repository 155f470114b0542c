use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use probanet::config::ExperimentConfig;
use probanet::train::{MetricsLog, METRICS_HEADER, SUMMARY_HEADER};

fn probanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probanet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SHORT: &str = "epochs = 1\nsteps_per_epoch = 40\nseeds = 2\n";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn train(dir: &Path, config: &str, out: &str, extra: &[&str]) -> Output {
    let out = dir.join(out);
    let mut args = vec!["train", "--config", config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    probanet(&args)
}

#[test]
fn count_matches_table_one() {
    let o = probanet(&[
        "count",
        "--channels",
        "512",
        "--anchors",
        "18",
        "--reduction",
        "16",
        "--height",
        "38",
        "--width",
        "50",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("params 17504 (0.07 MB), macs 32224000 (0.03 G)"));
}

#[test]
fn count_trivial_instance() {
    let o = probanet(&[
        "count",
        "--channels",
        "1",
        "--anchors",
        "1",
        "--reduction",
        "1",
        "--height",
        "1",
        "--width",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("params 4 "));
    assert!(stdout(&o).contains("macs 2 "));
}

#[test]
fn count_rejects_indivisible_reduction() {
    let o = probanet(&["count", "--channels", "512", "--reduction", "15"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("multiple"));
}

#[test]
fn gradcheck_default_passes() {
    let o = probanet(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("all 10 ops passed"));
}

#[test]
fn gradcheck_coarse_step_fails_and_names_ops() {
    let o = probanet(&["gradcheck", "--eps", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let line = text.lines().last().unwrap();
    assert!(line.starts_with("gradcheck failed: "), "{line}");
    assert!(line.contains("sigmoid"));
}

#[test]
fn gradcheck_single_op() {
    let o = probanet(&["gradcheck", "--op", "sigmoid"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("sigmoid"));
    assert!(!text.contains("hadamard"));
    assert!(text.contains("all 1 ops passed"));
}

#[test]
fn gradcheck_bad_arguments_are_usage_errors() {
    for args in [
        &["gradcheck", "--op", "softmax"][..],
        &["gradcheck", "--eps", "0"],
        &["gradcheck", "--shape", "6x6"],
        &["frobnicate"],
    ] {
        assert_eq!(probanet(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let o = train(dir.path(), &cfg, "out", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");

    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], SUMMARY_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));

    for seed in 0..2 {
        for variant in ["baseline", "probanet"] {
            let run = out.join(format!("seed-{seed}/{variant}"));
            let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
            assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
            assert_eq!(MetricsLog::from_csv(&csv).unwrap().records.len(), 40);
            let cfg = ExperimentConfig::load(&run.join("resolved-config.txt")).unwrap();
            assert_eq!(cfg.train.seed, seed);
            assert_eq!(cfg.train.probanet_enabled, variant == "probanet");
            for k in 0..9 {
                assert!(run.join(format!("heatmap-c{k}-s40.pgm")).is_file());
                assert!(run.join(format!("overlay-c{k}-s40.ppm")).is_file());
            }
        }
    }
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "# short run\nth = 0.25\nepochs = 1\nsteps_per_epoch = 5\nseeds = 1\n",
    );
    assert_eq!(train(dir.path(), &cfg, "out", &[]).status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("out/resolved-config.txt")).unwrap();
    let parsed = ExperimentConfig::parse(&text, "resolved").unwrap();
    assert_eq!(parsed.train.th, 0.25);
    assert_eq!(parsed.train.total_steps(), 5);
    assert_eq!(parsed.render(), text);
    assert_eq!(text.lines().count(), ExperimentConfig::keys().count());
}

#[test]
fn train_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    assert_eq!(train(dir.path(), &cfg, "a", &[]).status.code(), Some(0));
    assert_eq!(train(dir.path(), &cfg, "b", &[]).status.code(), Some(0));
    let mut compared = 0;
    for entry in walk(&dir.path().join("a")) {
        let rel = entry.strip_prefix(dir.path().join("a")).unwrap();
        let other = dir.path().join("b").join(rel);
        assert_eq!(
            fs::read(&entry).unwrap(),
            fs::read(&other).unwrap(),
            "{rel:?}"
        );
        compared += 1;
    }
    assert_eq!(compared, 2 + 4 * (2 + 18));
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn seeds_flag_sets_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\nsteps_per_epoch = 3\nseeds = 2\n");
    assert_eq!(
        train(dir.path(), &cfg, "out", &["--seeds", "10"])
            .status
            .code(),
        Some(0)
    );
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 11);
    let resolved = ExperimentConfig::load(&dir.path().join("out/resolved-config.txt")).unwrap();
    assert_eq!(resolved.seeds, 10);
}

#[test]
fn single_variant_leaves_other_columns_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\nsteps_per_epoch = 4\nseeds = 1\n");
    assert_eq!(
        train(dir.path(), &cfg, "out", &["--baseline"])
            .status
            .code(),
        Some(0)
    );
    let out = dir.path().join("out");
    assert!(out.join("seed-0/baseline/metrics.csv").is_file());
    assert!(!out.join("seed-0/probanet").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row.len(), 8);
    assert!(!row[1].is_empty() && !row[4].is_empty() && !row[6].is_empty());
    assert!(row[2].is_empty() && row[3].is_empty() && row[5].is_empty() && row[7].is_empty());
}

#[test]
fn bad_config_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeds = 1\n\nlearning_rate = fast\n");
    let o = train(dir.path(), &cfg, "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("exp.cfg:3:"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "seeds = 1\nmomentum_typo = 0.9\n");
    let o = train(dir.path(), &cfg, "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("exp.cfg:2: unknown key `momentum_typo`"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = train(dir.path(), &cfg, "file/out", &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let missing = dir.path().join("missing.cfg");
    let o = probanet(&["train", "--config", missing.to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn heatmap_replay_matches_training_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\nsteps_per_epoch = 30\nseeds = 1\n");
    assert_eq!(
        train(dir.path(), &cfg, "out", &["--probanet"])
            .status
            .code(),
        Some(0)
    );
    let run = dir.path().join("out/seed-0/probanet");
    let final_pgm = fs::read(run.join("heatmap-c4-s30.pgm")).unwrap();
    let final_ppm = fs::read(run.join("overlay-c4-s30.ppm")).unwrap();
    fs::remove_file(run.join("heatmap-c4-s30.pgm")).unwrap();

    let r = run.to_str().unwrap();
    let o = probanet(&["heatmap", "--run", r, "--channel", "4", "--step", "30"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(run.join("heatmap-c4-s30.pgm")).unwrap(), final_pgm);
    assert_eq!(fs::read(run.join("overlay-c4-s30.ppm")).unwrap(), final_ppm);

    let o = probanet(&["heatmap", "--run", r, "--channel", "2", "--step", "10"]);
    assert_eq!(o.status.code(), Some(0));
    let early = fs::read(run.join("heatmap-c2-s10.pgm")).unwrap();
    assert!(early.starts_with(b"P5\n# channel 2; per-image min-max normalization"));
    assert!(early.len() > 16 * 16);
}

#[test]
fn heatmap_rejects_missing_channel_or_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\nsteps_per_epoch = 5\nseeds = 1\n");
    assert_eq!(
        train(dir.path(), &cfg, "out", &["--probanet"])
            .status
            .code(),
        Some(0)
    );
    let r = dir.path().join("out/seed-0/probanet");
    let r = r.to_str().unwrap();
    for args in [
        &["heatmap", "--run", r, "--channel", "9"][..],
        &["heatmap", "--run", r, "--channel", "0", "--step", "6"],
        &["heatmap", "--run", r],
    ] {
        assert_eq!(probanet(args).status.code(), Some(2), "{args:?}");
    }
    let missing = dir.path().join("nope");
    let o = probanet(&[
        "heatmap",
        "--run",
        missing.to_str().unwrap(),
        "--channel",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(3));
}
