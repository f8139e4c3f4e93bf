use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fraclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fraclab"))
        .args(args)
        .output()
        .expect("spawn fraclab")
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

/// Bundled config text with relative nonlinearity paths made absolute, so it
/// can be edited and written elsewhere.
fn bundled_text(name: &str) -> String {
    let dir = bundled("").display().to_string();
    fs::read_to_string(bundled(name))
        .unwrap()
        .replace("\"truth_", &format!("\"{dir}/truth_"))
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .find(|l| l.starts_with("{\"error\""))
        .unwrap_or_else(|| panic!("no JSON error on stderr: {text}"));
    serde_json::from_str(line).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files.extend(files_in(&path));
        } else {
            files.push(path);
        }
    }
    files.sort();
    files
}

fn assert_same_tree(a: &Path, b: &Path) {
    let (fa, fb) = (files_in(a), files_in(b));
    let rel = |d: &Path, f: &[PathBuf]| -> Vec<PathBuf> {
        f.iter()
            .map(|p| p.strip_prefix(d).unwrap().to_path_buf())
            .collect()
    };
    assert_eq!(rel(a, &fa), rel(b, &fb));
    for (x, y) in fa.iter().zip(&fb) {
        assert!(
            fs::read(x).unwrap() == fs::read(y).unwrap(),
            "{} differs",
            x.display()
        );
    }
}

#[test]
fn malformed_config_exits_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    let text: String = bundled_text("solve_heat.toml")
        .lines()
        .filter(|l| !l.starts_with("omega"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&cfg, text).unwrap();
    let out_dir = tmp.path().join("out");
    let out = fraclab(&[
        "run",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_error(&out);
    assert_eq!(err["error"]["kind"], "ConfigError");
    assert!(err["error"]["message"].as_str().unwrap().contains("omega"));
    assert!(!out_dir.exists());
}

#[test]
fn wave_below_one_half_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("wave.toml");
    let text = bundled_text("solve_wave.toml");
    let text: String = text
        .lines()
        .map(|l| {
            if l.starts_with("s = ") {
                "s = 0.4".to_string()
            } else {
                l.to_string()
            }
        })
        .map(|l| l + "\n")
        .collect();
    fs::write(&cfg, text).unwrap();
    let out_dir = tmp.path().join("out");
    let out = fraclab(&[
        "solve-wave",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr_error(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .to_string();
    assert!(msg.contains("1/2 < s < 1"), "{msg}");
    assert!(!out_dir.exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = fraclab(&["solve-heat", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn large_data_reports_smallness_and_leaves_no_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("big.toml");
    let text =
        bundled_text("solve_heat.toml").replace("amplitude = 3.0 }]", "amplitude = 3000.0 }]");
    fs::write(&cfg, text).unwrap();
    let out_dir = tmp.path().join("out");
    let out = fraclab(&[
        "run",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_error(&out);
    assert_eq!(err["error"]["kind"], "SmallnessError");
    assert!(err["error"]["hint"].is_string());
    let leftovers = if out_dir.exists() {
        files_in(&out_dir)
    } else {
        Vec::new()
    };
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn solve_heat_writes_artifacts_with_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("heat");
    let out = fraclab(&["solve-heat", "--out", path_str(&out_dir), "--seed", "11"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["provenance"]["task"], "solve-heat");
    assert_eq!(manifest["provenance"]["seed"], 11);
    assert_eq!(
        manifest["provenance"]["config_hash"]
            .as_str()
            .unwrap()
            .len(),
        64
    );
    for entry in manifest["files"].as_array().unwrap() {
        assert!(
            out_dir.join(entry["path"].as_str().unwrap()).exists(),
            "{entry}"
        );
    }

    let csv = fs::read_to_string(out_dir.join("u.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    let prov: Value = serde_json::from_str(header.trim_start_matches("# ")).unwrap();
    assert_eq!(prov, manifest["provenance"]);

    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 65);
    let values: Vec<f64> = rows
        .iter()
        .flat_map(|r| r.split(',').skip(1))
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(values.iter().all(|v| v.is_finite()));
    assert!(values.iter().any(|v| *v > 0.0));
}

#[test]
fn results_do_not_depend_on_thread_count_or_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (dir, threads) in dirs.iter().zip(["1", "4", "1"]) {
        let out = fraclab(&["dn", "--out", path_str(dir), "--threads", threads]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_same_tree(&dirs[0], &dirs[1]);
    assert_same_tree(&dirs[0], &dirs[2]);
}

#[test]
fn recovery_meets_tolerance_and_replays_from_records() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("record.toml");
    fs::write(&cfg, bundled_text("recover_heat.toml") + "record = true\n").unwrap();
    let first = tmp.path().join("first");
    let out = fraclab(&[
        "recover",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&first),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let jets: Value =
        serde_json::from_str(&fs::read_to_string(first.join("jets.json")).unwrap()).unwrap();
    let report = fs::read_to_string(first.join("report.txt")).unwrap();
    let errors: Vec<&str> = report
        .lines()
        .filter(|l| l.contains("error against ground truth"))
        .collect();
    assert_eq!(errors.len(), 2, "{report}");
    for line in errors {
        let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(err <= 0.15, "{line}");
    }
    assert!(jets["data"].is_object() || jets["data"].is_array());
    assert!(first.join("records").is_dir());

    let replay_cfg = tmp.path().join("replay.toml");
    let text = bundled_text("recover_heat.toml").replace(
        "oracle = \"synthetic\"",
        &format!(
            "oracle = \"records\"\nrecords = \"{}\"",
            first.join("records").display()
        ),
    );
    fs::write(&replay_cfg, text).unwrap();
    let second = tmp.path().join("second");
    let out = fraclab(&[
        "recover",
        "--config",
        path_str(&replay_cfg),
        "--out",
        path_str(&second),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in ["jet_c2.csv", "jet_c3.csv"] {
        let strip = |d: &Path| -> Vec<String> {
            fs::read_to_string(d.join(name))
                .unwrap()
                .lines()
                .skip(2)
                .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
                .collect()
        };
        assert_eq!(strip(&first), strip(&second), "{name}");
    }
}

#[test]
fn plot_renders_svg_figures() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("heat");
    assert!(fraclab(&["solve-heat", "--out", path_str(&out_dir)])
        .status
        .success());
    let out = fraclab(&["plot", "--out", path_str(&out_dir)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let svgs = files_in(&out_dir.join("plots"));
    assert!(!svgs.is_empty());
    for svg in svgs {
        let text = fs::read_to_string(&svg).unwrap();
        assert!(
            text.starts_with("<svg") || text.contains("<svg"),
            "{}",
            svg.display()
        );
    }
}

#[test]
fn verify_runs_a_section_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("verify.toml");
    fs::write(
        &cfg,
        "task = \"verify\"\nseed = 7\n\n[verify]\nsections = [\"maximum\", \"dn-equality\"]\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("verify");
    let out = fraclab(&[
        "verify",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().count() >= 2);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    assert!(out_dir.join("verify.txt").exists());
}
