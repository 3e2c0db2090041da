mod common;

use std::path::Path;
use std::process::{Command, Output};

use cpl_harness::config::{ArchiveSource, DataSource, RunConfig};
use cpl_harness::experiment::REPORT_FILE;
use cpl_harness::metrics::MetricsReport;

fn cpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpl")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = d.join("spec.json");
    std::fs::write(&spec, serde_json::to_string(&common::tiny_spec(0)).unwrap()).unwrap();

    let (a, b) = (d.join("a.cple"), d.join("b.cple"));
    for out in [&a, &b] {
        let o = cpl(&["gen-data", "--spec", s(&spec), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let j = d.join("a.jsonl");
    assert_eq!(code(&cpl(&["gen-data", "--spec", s(&spec), "--out", s(&j), "--format", "jsonl"])), 0);

    let config = RunConfig {
        data: DataSource::Archive(ArchiveSource {
            features: "a.cple".into(),
            prompts: None,
            meta: None,
        }),
        ..common::tiny_config(0)
    };
    let cfg = d.join("run.json");
    config.write(&cfg).unwrap();
    let run = d.join("run");
    let o = cpl(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed: MetricsReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, MetricsReport::read(&run.join(REPORT_FILE)).unwrap());

    let o = cpl(&["eval", "--run", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let again: MetricsReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(again.splits, printed.splits);
    let o = cpl(&["eval", "--run", s(&run), "--split", "unseen"]);
    let unseen: MetricsReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(unseen.splits.len(), 1);
    assert_eq!(unseen.splits[0], *printed.split("unseen").unwrap());

    let heat = d.join("heat.csv");
    assert_eq!(code(&cpl(&["heatmap", "--run", s(&run), "--out", s(&heat)])), 0);
    assert!(std::fs::read_to_string(&heat).unwrap().lines().count() > 1);

    let sim = d.join("sim.csv");
    assert_eq!(code(&cpl(&["simmat", "--config", s(&cfg), "--out", s(&sim)])), 0);
    let text = std::fs::read_to_string(&sim).unwrap();
    assert_eq!(text.lines().count(), 4 * 4 + 1);

    let sweep = d.join("sweep");
    let o = cpl(&["train", "--config", s(&cfg), "--out", s(&sweep), "--set", "epochs=1", "--sweep", "sampler=bertscore,random"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(sweep.join("sampler=random").join(REPORT_FILE).exists());
    assert!(sweep.join("sampler=bertscore").join(REPORT_FILE).exists());
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let write = |name: &str, text: &str| {
        let p = d.join(name);
        std::fs::write(&p, text).unwrap();
        p
    };

    let bad_key = write("bad.json", r#"{"lamda": 1}"#);
    assert_eq!(code(&cpl(&["train", "--config", s(&bad_key), "--out", s(&d.join("r1"))])), 2);
    let bad_value = write("tau.json", r#"{"tau": -1}"#);
    assert_eq!(code(&cpl(&["train", "--config", s(&bad_value), "--out", s(&d.join("r2"))])), 2);
    let spec = write("spec.json", r#"{"spurious_dims": 40}"#);
    assert_eq!(code(&cpl(&["gen-data", "--spec", s(&spec), "--out", s(&d.join("x.cple"))])), 2);

    let missing = write("missing.json", r#"{"data": {"archive": {"features": "nope.cple"}}, "encoder": {}}"#);
    assert_eq!(code(&cpl(&["train", "--config", s(&missing), "--out", s(&d.join("r3"))])), 3);
    std::fs::write(d.join("trunc.cple"), b"CPLE\x01\x00\x00\x00").unwrap();
    let trunc = write("trunc.json", r#"{"data": {"archive": {"features": "trunc.cple"}}, "encoder": {}}"#);
    let o = cpl(&["train", "--config", s(&trunc), "--out", s(&d.join("r4"))]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
    assert_eq!(code(&cpl(&["eval", "--run", s(&d.join("nothing"))])), 2);

    // cosines over a temperature this small overflow single precision
    let config = RunConfig {
        tau: 1e-40,
        ..common::tiny_config(0)
    };
    let cfg = d.join("blowup.json");
    config.write(&cfg).unwrap();
    let o = cpl(&["train", "--config", s(&cfg), "--out", s(&d.join("r5"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
