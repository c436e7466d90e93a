use std::fs;
use std::path::Path;
use std::process::Command;

fn gmocp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gmocp"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn synthetic_config(out: &Path, policy: &str, seeds: &str) -> String {
    format!(
        r#"{{"policy": "{policy}",
            "policy_params": {{"N": 2, "J": 2}},
            "stream": {{"synthetic": {{"n_labels": 5, "horizon": 120, "batch_size": 20,
                "schedule": "sudden", "master_seed": 3,
                "model_profiles": [{{"quality": "high"}}, {{"quality": "medium"}}, {{"quality": "low"}}]}}}},
            "seeds": {seeds},
            "output": "{}"}}"#,
        out.display()
    )
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn run_writes_results_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &synthetic_config(&out, "gmocp", "[1, 2]"));
    let status = gmocp().args(["run", "--config"]).arg(&cfg).arg("--trace").status().unwrap();
    assert!(status.success());
    let rows = lines(&out.join("results.csv"));
    assert_eq!(rows[0], "policy,N,J,seed,coverage,avg_width,single_width,runtime,width_under_k");
    assert_eq!(rows.len(), 3);
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"gmocp_N2_J2\""));
    assert!(summary.contains("\"mean\"") && summary.contains("\"std\""));
    assert!(out.join("trace_gmocp_N2_J2_seed1.csv").exists());
    assert_eq!(lines(&out.join("trace_gmocp_N2_J2_seed2.csv")).len(), 121);
}

#[test]
fn identical_invocations_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let cfg = write_config(dir.path(), &format!("{run}.json"), &synthetic_config(&out, "egmocp", "[4, 5, 6]"));
        assert!(gmocp().args(["run", "--config"]).arg(&cfg).status().unwrap().success());
        outputs.push((
            fs::read(out.join("results.csv")).unwrap(),
            fs::read(out.join("summary.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn resume_skips_completed_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let first = write_config(dir.path(), "first.json", &synthetic_config(&out, "mocp", "[1]"));
    assert!(gmocp().args(["run", "--config"]).arg(&first).status().unwrap().success());
    let before = lines(&out.join("results.csv"));

    let both = write_config(dir.path(), "both.json", &synthetic_config(&out, "mocp", "[1, 2]"));
    assert!(gmocp().args(["run", "--resume", "--config"]).arg(&both).status().unwrap().success());
    let after = lines(&out.join("results.csv"));
    assert_eq!(after.len(), 3);
    assert_eq!(after[..2], before[..]);

    // A fresh run over the same seeds reproduces the resumed file.
    let fresh_out = dir.path().join("fresh");
    let fresh = write_config(dir.path(), "fresh.json", &synthetic_config(&fresh_out, "mocp", "[1, 2]"));
    assert!(gmocp().args(["run", "--config"]).arg(&fresh).status().unwrap().success());
    assert_eq!(lines(&fresh_out.join("results.csv")), after);
}

#[test]
fn sweep_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &synthetic_config(&out, "gmocp", "[1, 2]"));
    let status = gmocp()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--grid", "N=1,3,5", "J=1,2,4"])
        .status()
        .unwrap();
    assert!(status.success());
    let rows = lines(&out.join("results.csv"));
    assert_eq!(rows.len(), 1 + 9 * 2);
    assert!(rows.iter().any(|r| r.starts_with("gmocp,5,4,2,")));
}

#[test]
fn oracle_exit_codes() {
    let ok = gmocp()
        .args(["oracle", "quantile", "--instances", "50"])
        .output()
        .unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("PASS quantile"));
    let bad = gmocp().args(["oracle", "median"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown oracle"));
}

#[test]
fn generated_stream_file_replays_the_synthetic_run() {
    let dir = tempfile::tempdir().unwrap();
    let synth_out = dir.path().join("synth");
    let cfg = write_config(dir.path(), "c.json", &synthetic_config(&synth_out, "gmocp", "[7]"));
    let stream = dir.path().join("stream.csv");
    assert!(gmocp()
        .args(["gen-stream", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&stream)
        .status()
        .unwrap()
        .success());
    let stream_lines = lines(&stream);
    assert_eq!(stream_lines[0], "t,true_label,severity,model_id,p_0,p_1,p_2,p_3,p_4");
    assert_eq!(stream_lines.len(), 1 + 120 * 3);
    assert!(gmocp().args(["run", "--config"]).arg(&cfg).status().unwrap().success());

    let file_out = dir.path().join("file");
    let file_cfg = write_config(
        dir.path(),
        "f.json",
        &format!(
            r#"{{"policy": "gmocp", "policy_params": {{"N": 2, "J": 2}},
                "stream": {{"file": "{}"}}, "seeds": [7], "output": "{}"}}"#,
            stream.display(),
            file_out.display()
        ),
    );
    assert!(gmocp().args(["run", "--config"]).arg(&file_cfg).status().unwrap().success());
    assert_eq!(lines(&file_out.join("results.csv")), lines(&synth_out.join("results.csv")));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = gmocp().args(["run", "--config", "/nonexistent/c.json"]).output().unwrap();
    assert!(!missing.status.success());

    let out = dir.path().join("out");
    let no_seeds = write_config(dir.path(), "c.json", &synthetic_config(&out, "gmocp", "[]"));
    let r = gmocp().args(["run", "--config"]).arg(&no_seeds).output().unwrap();
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("seeds"));

    let bad_stream = dir.path().join("bad.csv");
    fs::write(&bad_stream, "t,true_label,severity,model_id,p_0,p_1\n1,0,0,0,0.9,0.3\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "b.json",
        &format!(
            r#"{{"policy": "mocp", "stream": {{"file": "{}"}}, "seeds": [1], "output": "{}"}}"#,
            bad_stream.display(),
            out.display()
        ),
    );
    let r = gmocp().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("sum"), "{}", String::from_utf8_lossy(&r.stderr));

    let grid = gmocp()
        .args(["sweep", "--config"])
        .arg(dir.path().join("c.json"))
        .args(["--grid", "K=1"])
        .output()
        .unwrap();
    assert!(!grid.status.success());
}
