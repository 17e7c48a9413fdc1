use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ifsl(args: &[&str], data: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ifsl"));
    cmd.args(args).env_remove("IFSL_DATA_DIR");
    if let Some(d) = data {
        cmd.env("IFSL_DATA_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_dataset(tmp: &TempDir) -> std::path::PathBuf {
    let data = tmp.path().join("data");
    ok(&ifsl(
        &["generate", "--classes", "4", "--images-per-class", "3", "--seed", "5"],
        Some(&data),
    ));
    data
}

fn metric(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")))
        .unwrap_or_else(|| panic!("{key} missing from report:\n{report}"))
        .parse()
        .unwrap()
}

fn write_config(tmp: &TempDir, body: &str) -> std::path::PathBuf {
    let path = tmp.path().join("run.toml");
    fs::write(&path, format!("[data]\nclasses = 4\nimages_per_class = 3\nseed = 5\n{body}")).unwrap();
    path
}

#[test]
fn generate_writes_manifest_from_env_dir() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(&tmp);
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("shapeworld 1"));
    assert_eq!(manifest.lines().filter(|l| l.starts_with("image ")).count(), 12);
}

#[test]
fn untrained_model_sits_near_base_rate() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(&tmp);
    let ckpt = tmp.path().join("untrained.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    ok(&ifsl(&["train", "--steps", "0", "--checkpoint", ckpt_s], Some(&data)));
    let episodes = tmp.path().join("episodes.csv");
    let pred = tmp.path().join("pred");
    let out = ok(&ifsl(
        &[
            "eval",
            "--checkpoint",
            ckpt_s,
            "--episodes",
            "40",
            "--episodes-csv",
            episodes.to_str().unwrap(),
            "--predictions",
            pred.to_str().unwrap(),
        ],
        Some(&data),
    ));
    let er = metric(&out, "exact_ratio");
    // Best constant answer: always "present" or always "absent".
    let rows: Vec<String> = fs::read_to_string(&episodes).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 40);
    let present = rows.iter().filter(|r| r.split(',').nth(3) == Some("1")).count() as f64 / 40.0;
    let base = present.max(1.0 - present);
    assert!(er <= base + 0.1, "untrained ER {er} vs base rate {base}");

    let maps: Vec<_> = fs::read_dir(&pred).unwrap().collect();
    assert_eq!(maps.len(), 40);
    let (_, _, values) = ifsl::harness::io::read_pgm(&pred.join("episode_00000.pgm")).unwrap();
    assert!(values.iter().all(|&v| (1..=2).contains(&v)));
}

#[test]
fn one_way_model_evaluates_two_way() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(&tmp);
    let ckpt = tmp.path().join("m.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    ok(&ifsl(&["train", "--steps", "1", "--checkpoint", ckpt_s], Some(&data)));
    let pred = tmp.path().join("pred2");
    let report = tmp.path().join("report.csv");
    ok(&ifsl(
        &[
            "eval",
            "--checkpoint",
            ckpt_s,
            "--n-way",
            "2",
            "--episodes",
            "6",
            "--report",
            report.to_str().unwrap(),
            "--predictions",
            pred.to_str().unwrap(),
        ],
        Some(&data),
    ));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(metric(&text, "episodes"), 6.0);
    for entry in fs::read_dir(&pred).unwrap() {
        let (_, _, values) = ifsl::harness::io::read_pgm(&entry.unwrap().path()).unwrap();
        assert!(values.iter().all(|&v| (1..=3).contains(&v)));
    }
}

#[test]
fn training_is_reproducible_and_logs_losses() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(&tmp);
    let config = write_config(&tmp, "[train]\nsteps = 2\nbatch_size = 2\nlr = 1e-4\n");
    let mut ckpts = Vec::new();
    for run in ["a", "b"] {
        let ckpt = tmp.path().join(format!("{run}.ckpt"));
        let log = tmp.path().join(format!("{run}.csv"));
        ok(&ifsl(
            &[
                "--config",
                config.to_str().unwrap(),
                "train",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--log",
                log.to_str().unwrap(),
            ],
            Some(&data),
        ));
        let lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
        assert_eq!(lines[0], "step,loss");
        assert_eq!(lines.len(), 3);
        ckpts.push((fs::read(&ckpt).unwrap(), lines));
    }
    assert_eq!(ckpts[0], ckpts[1]);
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(&tmp);

    let unknown_key = write_config(&tmp, "[train]\nsteps = 1\nwarmup = 3\n");
    let out = ifsl(&["--config", unknown_key.to_str().unwrap(), "train"], Some(&data));
    assert_eq!(out.status.code(), Some(2));

    let out = ifsl(&["train", "--steps", "1"], None);
    assert_eq!(out.status.code(), Some(2), "missing data dir");

    let out = ifsl(&["train", "--loss", "hinge"], Some(&data));
    assert_eq!(out.status.code(), Some(2));

    let out = ifsl(&["generate", "--classes", "6"], Some(&tmp.path().join("bad")));
    assert_eq!(out.status.code(), Some(2), "6 classes do not split into 4 folds");

    let out = ifsl(&["eval", "--checkpoint", tmp.path().join("absent.ckpt").to_str().unwrap()], Some(&data));
    assert_ne!(out.status.code(), Some(0));

    let out = ifsl(&["params", "--plan", "0,2"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn params_reports_reference_plans() {
    let out = ok(&ifsl(&["params"], None));
    assert!(out.contains("all checks passed"), "{out}");
    let out = ok(&ifsl(&["params", "--plan", "4,6,3"], None));
    assert!(out.contains("within"), "{out}");
}

#[test]
fn oracle_and_verify_pass() {
    let out = ok(&ifsl(&["oracle"], None));
    assert!(out.contains("all checks passed"));
    let out = ok(&ifsl(&["verify", "--points", "4"], None));
    assert!(out.contains("all checks passed"));
    assert!(!out.contains("FAIL"));
}
