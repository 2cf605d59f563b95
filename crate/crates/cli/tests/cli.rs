mod common;

use common::{describe, kineta, s, Pipeline};

#[test]
fn exit_codes() {
    let out = kineta(&["datagen", "--out", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2), "{}", describe(&out));

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let out = kineta(&["--set", "diffusion.lambda_kp=-1", "datagen", "--out", s(&d)]);
    assert_eq!(out.status.code(), Some(2), "{}", describe(&out));
    let out = kineta(&["--set", "sampler.rounds=0", "datagen", "--out", s(&d)]);
    assert_eq!(out.status.code(), Some(2), "{}", describe(&out));

    let missing = dir.path().join("nope");
    let out = kineta(&["train-aligner", "--data", s(&missing), "--out", s(&d)]);
    assert_eq!(out.status.code(), Some(2), "{}", describe(&out));

    // Output below a regular file cannot be created: a runtime failure.
    let file = dir.path().join("plain");
    std::fs::write(&file, b"x").unwrap();
    let out = kineta(&["decompose", "--text", "walk then wave", "--rules", "--out", s(&file.join("p.json"))]);
    assert_eq!(out.status.code(), Some(1), "{}", describe(&out));
}

#[test]
fn datagen_writes_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let out = kineta(&["datagen", "--count", "25", "--seed", "1", "--out", s(&d)]);
    assert!(out.status.success(), "{}", describe(&out));
    let manifest: toml::Table = std::fs::read_to_string(d.join("manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["count"].as_integer(), Some(25));
    assert_eq!(manifest["records"].as_array().unwrap().len(), 25);
    assert!(d.join("config.toml").is_file());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("METRIC ") && l.contains("\"records\":25")), "{stdout}");
}

#[test]
fn decompose_uses_rules_without_endpoint() {
    let out = kineta(&["decompose", "--text", "a person walks forward and then waves"]);
    assert!(out.status.success(), "{}", describe(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["source"], "rules");
    assert_eq!(v["parts"].as_array().unwrap().len(), 2);
}

#[test]
fn pipeline_commands() {
    let p = Pipeline::build();

    // One refinement round is plain sampling.
    let common = ["--model", s(&p.model), "--prompt", "a person walks forward then waves", "--frames", "30", "--seed", "5"];
    let sample_out = p.path("s.kmo");
    let refine_out = p.path("r.kmo");
    let mut args = vec!["sample"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--out", s(&sample_out)]);
    p.run(&args);
    let mut args = vec!["refine"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--rounds", "1", "--out", s(&refine_out)]);
    p.run(&args);
    assert_eq!(std::fs::read(&sample_out).unwrap(), std::fs::read(&refine_out).unwrap());
    assert!(!p.path("s.kmo.INCOMPLETE").exists());

    // Extraction of a generated motion.
    let kp = p.path("s.csv");
    p.run(&["extract-kp", "--motion", s(&sample_out), "--out", s(&kp)]);
    let text = std::fs::read_to_string(&kp).unwrap();
    assert_eq!(text.lines().count(), 31);
    assert!(text.starts_with("frame,root.vel.x"));

    // Evaluation: one row per system plus the real row.
    let report = p.path("report.csv");
    let system = format!("m={}", s(&p.model));
    p.run(&[
        "eval", "--system", &system, "--refine", "m", "--evaluator", s(&p.evaluator), "--test", s(&p.test), "--out",
        s(&report),
    ]);
    let csv = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3, "{csv}");
    assert!(rows[1].starts_with("real,") && rows[2].starts_with("m,"));
    assert!(p.path("report.toml").is_file());

    let table_dir = p.path("table");
    let out = p.run(&["report", "--input", s(&report), "--input", s(&p.path("report.toml")), "--out", s(&table_dir)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("| system |"));
    assert!(table_dir.join("table.md").is_file() && table_dir.join("fid.csv").is_file());

    // A refine that names no evaluated system is rejected before any work.
    let out = kineta(&[
        "eval", "--system", &system, "--refine", "other", "--evaluator", s(&p.evaluator), "--test", s(&p.test),
        "--out", s(&p.path("bad.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", describe(&out));
}
