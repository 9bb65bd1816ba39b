use std::path::PathBuf;
use std::process::Command;

fn cdc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cdc"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cdc-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn gen_corpus_writes_programs() {
    let dir = scratch("corpus");
    let out = dir.join("c.jsonl");
    let s = cdc()
        .args(["gen-corpus", "--kind", "security", "--size", "20", "--seed", "3", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(s.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 20);
}

#[test]
fn verify_quick_passes() {
    let o = cdc().args(["verify", "--quick"]).output().unwrap();
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn small_run_and_metrics_agree() {
    let dir = scratch("run");
    let cfg = dir.join("run.json");
    std::fs::write(
        &cfg,
        r#"{
            "schedule": { "T": 8 },
            "denoiser": { "corpus": { "kind": "security", "size": 200, "len": 32, "vulnerability_rate": 0.5 }, "feedback": true },
            "operator": "mdfi",
            "suite": { "kind": "security", "tasks": 6 }
        }"#,
    )
    .unwrap();
    let out = dir.join("out");
    let o = cdc().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out).env("CDC_SEED", "5").output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let live: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(live["tasks"], 6);
    assert!(out.join("report.json").is_file());
    assert_eq!(std::fs::read_dir(out.join("traces")).unwrap().count(), 6);

    let m = cdc().args(["metrics", "--traces"]).arg(&out).output().unwrap();
    assert!(m.status.success(), "{}", String::from_utf8_lossy(&m.stderr));
    let rebuilt: serde_json::Value = serde_json::from_slice(&m.stdout).unwrap();
    assert_eq!(rebuilt, live);
}
