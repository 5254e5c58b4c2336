// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cuekit::activations::{
    write_dump, ActivationRecord, DumpManifest, FeatureId, LayerActivations,
};
use cuekit::selection::SelectionResult;
use cuekit::toymodel::WorldConfig;

fn cuekit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cuekit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = cuekit(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// synth (small) + select + prototypes.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n-per-label", "20"]);
    ok(dir.path(), &["select"]);
    ok(dir.path(), &["prototypes"]);
    dir
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(p: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        if p.is_dir() {
            for e in fs::read_dir(p).unwrap() {
                walk(&e.unwrap().path(), out);
            }
        } else {
            out.insert(p.to_path_buf(), fs::read(p).unwrap());
        }
    }
    let mut out = BTreeMap::new();
    walk(root, &mut out);
    out
}

#[test]
fn pipeline_composes_end_to_end() {
    let dir = prepared();
    let out = dir.path();
    ok(out, &["steer-build"]);
    ok(
        out,
        &[
            "steer-run",
            "--generations",
            "6",
            "--new-tokens",
            "6",
            "--alphas",
            "0.5,1",
        ],
    );
    ok(out, &["bias"]);
    ok(out, &["report"]);

    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next(),
        Some("condition,label,n,faithfulness,rarity,fluency")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 16);
    let cells: BTreeSet<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    for c in ["implicit", "explicit", "steer-implicit", "steer-explicit"] {
        for l in ["north", "south", "east", "west"] {
            assert!(cells.contains(&(c, l)), "missing row {c},{l}");
        }
    }
    for r in &rows {
        assert_eq!(r[2], "6");
        for v in &r[3..] {
            let x: f64 = v.parse().unwrap();
            assert!((1.0..=10.0).contains(&x), "score {x} out of range");
        }
    }

    let pairwise = fs::read_to_string(out.join("pairwise.csv")).unwrap();
    assert_eq!(pairwise.lines().count(), 4);
    let summary = fs::read_to_string(out.join("bias_summary.csv")).unwrap();
    // 2 unsteered + 2 steered x 2 alphas, per target.
    assert_eq!(summary.lines().count(), 1 + 4 * 6);

    for cmd in [
        "synth",
        "select",
        "prototypes",
        "steer-build",
        "steer-run",
        "bias",
        "report",
    ] {
        let m: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(out.join(format!("manifests/{cmd}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(m["command"], cmd);
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        assert!(!m["outputs"].as_array().unwrap().is_empty());
    }
}

#[test]
fn selection_leads_with_structured_features() {
    let dir = prepared();
    let sel = SelectionResult::load(dir.path().join("selection.json")).unwrap();
    let world: WorldConfig =
        serde_json::from_str(&fs::read_to_string(dir.path().join("world.json")).unwrap()).unwrap();
    let spec = world.planted;
    let structured = spec.structured();
    let planted = spec.all_planted();
    assert!(!sel.is_empty());
    for f in sel.features() {
        assert!(
            structured.contains(&f),
            "noise feature {f} selected at rho 0.1"
        );
    }
    assert!(sel.features().iter().any(|f| planted.contains(f)));
    // The ranking puts every informative feature ahead of every noise feature.
    let informative: BTreeSet<FeatureId> = planted.union(&spec.all_shared()).copied().collect();
    let head: BTreeSet<FeatureId> = sel.ranked[..informative.len()]
        .iter()
        .map(|s| s.feature)
        .collect();
    assert_eq!(head, informative);
}

#[test]
fn alpha_zero_matches_unsteered() {
    let dir = prepared();
    let out = dir.path();
    ok(out, &["steer-build", "--target", "south"]);
    ok(
        out,
        &[
            "steer-run",
            "--target",
            "south",
            "--alphas",
            "0",
            "--generations",
            "5",
            "--new-tokens",
            "8",
        ],
    );
    let r = out.join("responses");
    for (steered, plain) in [
        ("steer-implicit", "implicit"),
        ("steer-explicit", "explicit"),
    ] {
        for f in ["records.bin", "manifest.json", "generations.jsonl"] {
            let a = fs::read(r.join(steered).join("south/a0").join(f)).unwrap();
            let b = fs::read(r.join(plain).join("south").join(f)).unwrap();
            assert_eq!(a, b, "{steered} vs {plain}: {f} differs");
        }
    }
}

#[test]
fn rerun_is_byte_identical() {
    let dir = prepared();
    let out = dir.path();
    ok(out, &["steer-build"]);
    let first = snapshot(out);
    ok(out, &["synth", "--n-per-label", "20"]);
    ok(out, &["select"]);
    ok(out, &["prototypes"]);
    ok(out, &["steer-build"]);
    assert_eq!(first, snapshot(out));
}

#[test]
fn seed_changes_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["synth", "--n-per-label", "5"]);
    ok(b.path(), &["synth", "--n-per-label", "5", "--seed", "9"]);
    let ra = fs::read(a.path().join("dump/records.bin")).unwrap();
    let rb = fs::read(b.path().join("dump/records.bin")).unwrap();
    assert_ne!(ra, rb);
}

#[test]
fn missing_inputs_exit_3_and_name_the_artifact() {
    let empty = tempfile::tempdir().unwrap();
    let o = cuekit(empty.path(), &["select"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("dump"), "{}", stderr(&o));

    let o = cuekit(empty.path(), &["steer-run"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("world.json"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n-per-label", "10"]);
    ok(dir.path(), &["select"]);
    let o = cuekit(dir.path(), &["bias"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("prototypes.json"), "{}", stderr(&o));

    ok(dir.path(), &["prototypes"]);
    let o = cuekit(dir.path(), &["report"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("responses"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    let dir = prepared();
    let out = dir.path();
    for args in [
        &["select", "--rho", "0"][..],
        &["select", "--rho", "1.5"],
        &["select", "--scheme", "bogus"],
        &["steer-run", "--alphas", "-1"],
        &["bias", "--condition", "sideways"],
        &["steer-build", "--layer-stride", "0"],
        &["steer-build", "--target", "atlantis"],
        &["select", "--no-such-flag"],
    ] {
        let o = cuekit(out, args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn uninformative_dump_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DumpManifest::new("fixture", vec![(0, 4, 2)]).unwrap();
    let acts = LayerActivations::from_entries(vec![(1, 2.0)]).unwrap();
    let recs: Vec<ActivationRecord> = (0..6)
        .map(|i| {
            ActivationRecord::new(format!("r{i}"), if i % 2 == 0 { "a" } else { "b" })
                .with_layer(0, acts.clone())
        })
        .collect();
    write_dump(dir.path().join("dump"), &manifest, &recs).unwrap();
    let o = cuekit(dir.path(), &["select"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn probe_writes_report_and_confusions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["synth", "--n-per-label", "20"]);
    ok(out, &["probe", "--epochs", "50"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("probe_report.json")).unwrap()).unwrap();
    assert_eq!(report["layers"].as_array().unwrap().len(), 2);
    for l in 0..2 {
        let csv = fs::read_to_string(out.join(format!("probe_confusion_L{l}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }
}

#[test]
fn explicit_dump_flag_biases_one_set() {
    let dir = prepared();
    let out = dir.path();
    let dump = out.join("dump");
    ok(out, &["bias", "--dump", dump.to_str().unwrap()]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("bias_report.json")).unwrap()).unwrap();
    assert_eq!(report["per_response"].as_array().unwrap().len(), 80);
    assert!(out.join("bias_report_heatmap.csv").exists());
}
