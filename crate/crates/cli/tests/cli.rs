//! End-to-end tests of the `segrank` binary: exit codes, subcommand
//! behavior, and determinism across worker counts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segrank_core::volgrid::{write_volume, Geometry, LabelVolume};
use segrank_testkit::{generate, write_config, DatasetSpec, GeneratedDataset};

fn segrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segrank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn segrank_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_segrank"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: GeneratedDataset,
    config: PathBuf,
    output: PathBuf,
}

fn fixture(spec: &DatasetSpec) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let dataset = generate(&root, spec).unwrap();
    let output = root.join("out");
    let config = root.join("run.json");
    write_config(&config, &dataset, &output, 4242, 6, 80).unwrap();
    Fixture {
        _dir: dir,
        root,
        dataset,
        config,
        output,
    }
}

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        cases: 6,
        teams: vec![
            ("team_a".to_string(), 0.02),
            ("team_b".to_string(), 0.12),
            ("team_c".to_string(), 0.3),
        ],
        ..DatasetSpec::default()
    }
}

#[test]
fn evaluate_writes_all_reports_and_is_worker_invariant() {
    let f = fixture(&small_spec());
    let cfg = f.config.to_str().unwrap();

    let out = segrank(&["evaluate", "--config", cfg, "--workers", "1"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for file in [
        "metrics.csv",
        "leaderboard.csv",
        "bootstrap.json",
        "significance.csv",
        "strata.csv",
        "dendrogram.newick",
        "run_manifest.json",
    ] {
        assert!(f.output.join(file).exists(), "{file} missing");
    }
    assert!(!f.output.join(".partial").exists());
    let first: Vec<Vec<u8>> = ["metrics.csv", "leaderboard.csv", "bootstrap.json"]
        .iter()
        .map(|n| fs::read(f.output.join(n)).unwrap())
        .collect();

    // rerun into a second directory with 8 workers set via environment
    let out2_dir = f.root.join("out2");
    let out = segrank_env(
        &[
            "evaluate",
            "--config",
            cfg,
            "--output",
            out2_dir.to_str().unwrap(),
        ],
        &[("SEGRANK_WORKERS", "8")],
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for (n, expected) in ["metrics.csv", "leaderboard.csv", "bootstrap.json"]
        .iter()
        .zip(&first)
    {
        assert_eq!(&fs::read(out2_dir.join(n)).unwrap(), expected, "{n} differs");
    }
}

#[test]
fn rank_reproduces_hand_computed_leaderboard() {
    // tie on mean rank (dice favors a > b > c, surface dice the reverse),
    // broken by tumor dice: a 0.9 > b 0.8 > c 0.7
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let preds = dir.path().join("preds");
    fs::create_dir_all(&data).unwrap();
    fs::create_dir_all(&preds).unwrap();
    let output = dir.path().join("out");
    fs::create_dir_all(&output).unwrap();

    let mut csv = String::from("team_id,case_id,composite_idx,hec,dice,surface_dice\n");
    let rows = [
        ("team_a", 0.9, 0.7),
        ("team_b", 0.8, 0.8),
        ("team_c", 0.7, 0.9),
    ];
    for (team, dice, surface) in rows {
        for hec in ["kidney_and_masses", "masses", "tumor"] {
            csv.push_str(&format!(
                "{team},case_1,0,{hec},{dice:.6},{surface:.6}\n"
            ));
        }
    }
    fs::write(output.join("metrics.csv"), csv).unwrap();

    let config = dir.path().join("run.json");
    fs::write(
        &config,
        format!(
            r#"{{"dataset_root":{:?},"predictions_root":{:?},"output_dir":{:?}}}"#,
            data.display().to_string(),
            preds.display().to_string(),
            output.display().to_string()
        ),
    )
    .unwrap();

    let out = segrank(&["rank", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let leaderboard = fs::read_to_string(output.join("leaderboard.csv")).unwrap();
    let lines: Vec<&str> = leaderboard.lines().collect();
    assert!(lines[1].starts_with("1,team_a,"));
    assert!(lines[2].starts_with("2,team_b,"));
    assert!(lines[3].starts_with("3,team_c,"));
    // all mean ranks tied at 2.0
    for line in &lines[1..] {
        assert_eq!(line.split(',').nth(6).unwrap(), "2.000000");
    }
}

#[test]
fn incremental_stages_rerun_from_saved_metrics() {
    let f = fixture(&small_spec());
    let cfg = f.config.to_str().unwrap();
    assert!(segrank(&["evaluate", "--config", cfg]).status.success());

    let before = fs::read(f.output.join("significance.csv")).unwrap();
    fs::remove_file(f.output.join("significance.csv")).unwrap();
    let out = segrank(&["significance", "--config", cfg]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert_eq!(fs::read(f.output.join("significance.csv")).unwrap(), before);

    let out = segrank(&["cluster", "--config", cfg]);
    assert!(out.status.success());
    assert!(stdout(&out).trim_end().ends_with(';'));

    let out = segrank(&["bootstrap", "--config", cfg]);
    assert!(out.status.success());

    let out = segrank(&["strata", "--config", cfg, "--teams", "team_a,team_b"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("tumor_size_cm"));
}

#[test]
fn stale_metrics_detected_after_dataset_change() {
    let f = fixture(&small_spec());
    let cfg = f.config.to_str().unwrap();
    assert!(segrank(&["evaluate", "--config", cfg]).status.success());

    // touch one case manifest: fingerprint no longer matches
    let manifest = f.dataset.dataset_root.join("case_00000.json");
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push('\n');
    fs::write(&manifest, text).unwrap();

    let out = segrank(&["rank", "--config", cfg]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("stale"));
}

#[test]
fn sample_is_exhaustive_when_k_exceeds_composite_count() {
    // 2 ROIs x 3 delineations = 9 composites; K=10 from write_config... use
    // a single-kidney dataset instead: 3 ROIs -> 27; ask for K=30 via --config
    let f = fixture(&DatasetSpec {
        cases: 1,
        ..small_spec()
    });
    let config = f.root.join("exhaustive.json");
    write_config(&config, &f.dataset, &f.output, 7, 30, 10).unwrap();
    let out = segrank(&[
        "sample",
        "--config",
        config.to_str().unwrap(),
        "--case",
        "case_00000",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let value: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(value["composite_count"], 27);
    let selectors = value["selectors"].as_array().unwrap();
    assert_eq!(selectors.len(), 27, "K >= R^N must enumerate all");
    assert_eq!(selectors[0], serde_json::json!([0, 0, 0]));
    assert_eq!(selectors[26], serde_json::json!([2, 2, 2]));

    // seed override changes nothing for exhaustive sampling
    let again = segrank(&[
        "sample",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "999",
        "--case",
        "case_00000",
    ]);
    let v2: serde_json::Value = serde_json::from_str(&stdout(&again)).unwrap();
    assert_eq!(v2["selectors"], value["selectors"]);
}

fn write_identical_delineation_case(data: &Path) {
    let g = Geometry::new([6, 6, 6], [1.0, 1.0, 1.0]).unwrap();
    let mut labels = vec![0u8; g.voxel_count()];
    for idx in [43, 44, 50, 79] {
        labels[idx] = 1;
    }
    let mask = LabelVolume::new(g, labels).unwrap();
    let case_dir = data.join("case_x");
    fs::create_dir_all(&case_dir).unwrap();
    write_volume(&mask, case_dir.join("tumor_0.json")).unwrap();
    write_volume(&mask, case_dir.join("tumor_1.json")).unwrap();
    write_volume(&mask, case_dir.join("tumor_2.json")).unwrap();
    let reference = LabelVolume::new(g, vec![0u8; g.voxel_count()]).unwrap();
    write_volume(&reference, case_dir.join("reference.json")).unwrap();
    fs::write(
        data.join("case_x.json"),
        r#"{"case_id":"case_x","reference":"case_x/reference.json","rois":[
            {"instance_id":"t","class":2,"delineations":
             ["case_x/tumor_0.json","case_x/tumor_1.json","case_x/tumor_2.json"]}]}"#,
    )
    .unwrap();
}

#[test]
fn agreement_on_identical_delineations_prints_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let preds = dir.path().join("preds");
    fs::create_dir_all(&data).unwrap();
    fs::create_dir_all(&preds).unwrap();
    write_identical_delineation_case(&data);
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        format!(
            r#"{{"dataset_root":{:?},"predictions_root":{:?},"output_dir":{:?}}}"#,
            data.display().to_string(),
            preds.display().to_string(),
            dir.path().join("out").display().to_string()
        ),
    )
    .unwrap();

    let out = segrank(&[
        "agreement",
        "--config",
        config.to_str().unwrap(),
        "--case",
        "case_x",
        "--class",
        "tumor",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "1.00");

    // absent class in this case -> data error
    let out = segrank(&[
        "agreement",
        "--config",
        config.to_str().unwrap(),
        "--case",
        "case_x",
        "--class",
        "cyst",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn postprocess_applies_configured_rules() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let preds = dir.path().join("preds");
    fs::create_dir_all(&data).unwrap();
    fs::create_dir_all(&preds).unwrap();
    let g = Geometry::new([8, 8, 8], [1.0, 1.0, 1.0]).unwrap();
    let mut labels = vec![0u8; g.voxel_count()];
    labels[0] = 2; // lone tumor speck, far below any threshold
    let v = LabelVolume::new(g, labels).unwrap();
    let input = dir.path().join("pred.json");
    write_volume(&v, &input).unwrap();

    let config = dir.path().join("run.json");
    fs::write(
        &config,
        format!(
            r#"{{"dataset_root":{:?},"predictions_root":{:?},"output_dir":{:?},
                "postprocess":{{"enabled":true,
                   "min_voxels":{{"kidney":1,"tumor":5,"cyst":1}},
                   "require_lesion_kidney_contact":false,"connectivity":26}}}}"#,
            data.display().to_string(),
            preds.display().to_string(),
            dir.path().join("out").display().to_string()
        ),
    )
    .unwrap();

    let dest = dir.path().join("cleaned.json");
    let out = segrank(&[
        "postprocess",
        "--config",
        config.to_str().unwrap(),
        input.to_str().unwrap(),
        dest.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let cleaned = segrank_core::volgrid::read_volume(&dest).unwrap();
    assert!(cleaned.labels().iter().all(|&c| c == 0));
}

#[test]
fn heatmap_counts_every_team_prediction() {
    let f = fixture(&small_spec());
    let out = segrank(&[
        "heatmap",
        "--config",
        f.config.to_str().unwrap(),
        "--case",
        "case_00002",
        "--class",
        "tumor",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let path = PathBuf::from(stdout(&out).trim());
    let heat = segrank_core::volgrid::read_count_volume(&path).unwrap();
    let max = heat.counts.iter().max().copied().unwrap();
    assert!(max >= 1 && max <= 3, "counts bounded by team count, got {max}");
}

#[test]
fn exit_codes_distinguish_config_and_data_errors() {
    // unreadable config -> 2
    let out = segrank(&["evaluate", "--config", "/nonexistent/run.json"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let preds = dir.path().join("preds");
    fs::create_dir_all(&data).unwrap();
    fs::create_dir_all(&preds).unwrap();

    // invalid alpha -> config error (2)
    let config = dir.path().join("bad.json");
    fs::write(
        &config,
        format!(
            r#"{{"dataset_root":{:?},"predictions_root":{:?},"output_dir":{:?},
                "stats":{{"bootstrap_samples":10,"alpha":2.0,"significance_metric":"tumor_dice"}}}}"#,
            data.display().to_string(),
            preds.display().to_string(),
            dir.path().join("out").display().to_string()
        ),
    )
    .unwrap();
    let out = segrank(&["evaluate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    // malformed config JSON -> 2
    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{not json").unwrap();
    let out = segrank(&["evaluate", "--config", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // valid config, missing case -> data error (3)
    let good = dir.path().join("good.json");
    write_identical_delineation_case(&data);
    fs::write(
        &good,
        format!(
            r#"{{"dataset_root":{:?},"predictions_root":{:?},"output_dir":{:?}}}"#,
            data.display().to_string(),
            preds.display().to_string(),
            dir.path().join("out").display().to_string()
        ),
    )
    .unwrap();
    let out = segrank(&[
        "agreement",
        "--config",
        good.to_str().unwrap(),
        "--case",
        "case_missing",
        "--class",
        "tumor",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));

    // unknown flag -> clap usage error (2)
    let out = segrank(&["evaluate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn incomplete_team_excluded_with_warning() {
    let f = fixture(&small_spec());
    // delete one of team_c's predictions
    fs::remove_file(
        f.dataset
            .predictions_root
            .join("team_c")
            .join("case_00003.json"),
    )
    .unwrap();
    let out = segrank(&["evaluate", "--config", f.config.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("team_c"));
    assert!(stderr(&out).contains("case_00003"));
    let leaderboard = fs::read_to_string(f.output.join("leaderboard.csv")).unwrap();
    assert!(!leaderboard.contains("team_c"));
}
