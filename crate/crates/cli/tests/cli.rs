use std::path::Path;
use std::process::{Command, Output};

fn pcapsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcapsim"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn pcapsim")
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn lists_bundled_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let out = pcapsim(&["list-scenarios"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["cass-latency-jump", "geo-consistency-all", "micro-knobs"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
}

#[test]
fn runs_a_small_scenario_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("tiny.toml");
    std::fs::write(
        &file,
        r#"
name = "tiny"
seed = 1
duration_s = 20

[sla]
kind = "consistency"
p_ic_sla = 0.2
t_c = 0
t_a = 50

[controller]
window = 200

[cluster]
n_keys = 10
throughput_ops_per_s = 200

[cluster.delay]
kind = "constant"
one_way = 2
"#,
    )
    .unwrap();
    let out = pcapsim(&["run", "tiny.toml", "--out", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("variant,segment,"));
    let res = dir.path().join("res");
    assert_eq!(
        first_line(&res.join("timeline.csv")),
        "iter,sim_time,p_ic,p_ua,read_delay_us,repair_rate,alpha,p_opt"
    );
    assert!(first_line(&res.join("summary.csv")).starts_with("variant,segment,start,alpha"));
    assert!(res.join("scatter.csv").exists());
}

#[test]
fn same_seed_same_files() {
    let dir = tempfile::tempdir().unwrap();
    for o in ["a", "b"] {
        let out = pcapsim(&["run", "micro-knobs", "--seed", "5", "--out", o], dir.path());
        assert!(out.status.success());
    }
    let read = |o: &str| std::fs::read_to_string(dir.path().join(o).join("timeline.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn malformed_scenario_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "name = \"bad\"\nduration_s = -3\n").unwrap();
    let out = pcapsim(&["run", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(!String::from_utf8(out.stderr).unwrap().is_empty());

    let out = pcapsim(&["run", "no-such-scenario"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn verify_runs_selected_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let out = pcapsim(&["verify", "--only", "1,2"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 2, "{text}");
}
