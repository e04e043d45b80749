use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moe_congestion::traces::{write_trace_file, RoutingTrace};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_moe-congestion"));
    c.env_remove("MOE_CONGESTION_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

fn fixture(name: &str) -> String {
    format!(
        "{}/../core/tests/fixtures/{name}",
        env!("CARGO_MANIFEST_DIR")
    )
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name).to_str().unwrap().to_string();
    let mut args = vec!["trace-gen", path.as_str()];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

#[test]
fn fit_recovers_planted_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let t = gen(
        dir.path(),
        "t.moer",
        &[
            "--gamma",
            "10",
            "--layers",
            "3",
            "--batches",
            "40",
            "--tokens-per-batch",
            "500",
        ],
    );
    let v = json(&["--json", "fit", &t]);
    let g = v["gamma_eff"].as_f64().unwrap();
    assert!((g - 10.0).abs() < 1.0, "{g}");
    assert_eq!(v["layers"].as_array().unwrap().len(), 3);

    let table = ok(&["fit", &t, "--layers", "1-2"]);
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("layer\tgamma_eff"));
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1\t") && rows[2].starts_with("2\t"));
}

#[test]
fn explicit_part_is_alpha_times_experts() {
    let dir = tempfile::tempdir().unwrap();
    let t = gen(
        dir.path(),
        "t.moer",
        &["--experts", "64", "--top-k", "8", "--layers", "1"],
    );
    let v = json(&["--json", "fit", &t, "--alpha", "0.01"]);
    let layer = &v["layers"][0];
    assert!((layer["gamma_explicit"].as_f64().unwrap() - 0.64).abs() < 1e-12);
    let eff = layer["gamma_eff"].as_f64().unwrap();
    let imp = layer["gamma_implicit"].as_f64().unwrap();
    assert!((eff - 0.64 - imp).abs() < 1e-12);
}

#[test]
fn constant_logits_fail_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.moer");
    let trace = RoutingTrace::new(4, 1, 1, 1.0, None, vec![0.25; 40 * 4], vec![0, 20, 40]).unwrap();
    write_trace_file(&trace, &path).unwrap();
    let out = run(&["fit", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("degenerate quality"), "{err}");
}

#[test]
fn corrupt_trace_reports_the_format_error() {
    let out = run(&["trace-info", &fixture("truncated_logits.moer")]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("logits"), "{err}");
}

#[test]
fn one_cluster_multitype_equals_single() {
    let dir = tempfile::tempdir().unwrap();
    let t = gen(dir.path(), "t.moer", &["--layers", "2"]);
    let v = json(&["--json", "eval", &t, "--clusters", "1"]);
    let names: Vec<String> = ["mfg_single", "mfg_multitype"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let header = ok(&["eval", &t, "--clusters", "1"]);
    let cols: Vec<&str> = header.lines().next().unwrap().split('\t').collect();
    let si = cols.iter().position(|c| *c == names[0]).unwrap() - 1;
    let mi = cols.iter().position(|c| *c == names[1]).unwrap() - 1;
    for layer in v["report"]["layers"].as_array().unwrap() {
        let l1 = layer["l1"].as_array().unwrap();
        let (s, m) = (l1[si].as_f64().unwrap(), l1[mi].as_f64().unwrap());
        assert!((s - m).abs() < 1e-6, "{s} vs {m}");
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(
        dir.path(),
        "a.moer",
        &["--types", "2", "--type-offset", "5"],
    );
    let b = gen(
        dir.path(),
        "b.moer",
        &["--types", "2", "--type-offset", "5"],
    );
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.moer");
    ok(&[
        "--seed",
        "7",
        "trace-gen",
        c.to_str().unwrap(),
        "--types",
        "2",
        "--type-offset",
        "5",
    ]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let outputs: Vec<Vec<u8>> = ["o1", "o2"]
        .iter()
        .map(|o| {
            let out = dir.path().join(o);
            ok(&[
                "--out-dir",
                out.to_str().unwrap(),
                "eval",
                &a,
                "--clusters",
                "2",
            ]);
            ok(&[
                "--out-dir",
                out.to_str().unwrap(),
                "fit",
                &a,
                "--bootstrap",
                "50",
            ]);
            let mut bytes = std::fs::read(out.join("eval.tsv")).unwrap();
            bytes.extend(std::fs::read(out.join("fit.tsv")).unwrap());
            bytes
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);

    let one_thread = bin()
        .env("MOE_CONGESTION_THREADS", "1")
        .args(["fit", &a, "--bootstrap", "50"])
        .output()
        .unwrap();
    assert!(one_thread.status.success());
    assert_eq!(
        one_thread.stdout,
        ok(&["fit", &a, "--bootstrap", "50"]).into_bytes()
    );
}

#[test]
fn failed_command_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = run(&[
        "--out-dir",
        out.to_str().unwrap(),
        "fit",
        &fixture("bad_magic.moer"),
    ]);
    assert!(!status.status.success());
    assert!(!out.exists());

    let target = dir.path().join("t.moer");
    let bad = run(&[
        "trace-gen",
        target.to_str().unwrap(),
        "--gamma",
        "1,2,3",
        "--layers",
        "2",
    ]);
    assert!(!bad.status.success());
    assert!(!target.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn full_top_k_has_zero_bounds() {
    let dir = tempfile::tempdir().unwrap();
    // Every expert is dispatched for every token, which the sampler cannot
    // plant, so the trace is built directly.
    let logits: Vec<f32> = (0..200 * 2 * 4)
        .map(|i| ((i * 37) % 11) as f32 * 0.1 + (i % 4) as f32)
        .collect();
    let trace = RoutingTrace::new(4, 2, 4, 1.0, None, logits, vec![0, 100, 200]).unwrap();
    let t = dir.path().join("t.moer");
    write_trace_file(&trace, &t).unwrap();
    let table = ok(&["diagnose", t.to_str().unwrap()]);
    let mut lines = table.lines();
    let cols: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let k = cols.iter().position(|c| *c == "topk_bound").unwrap();
    let km = cols.iter().position(|c| *c == "K/M").unwrap();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[k], "0.0000");
        assert_eq!(f[km], "1.0000");
    }
}

#[test]
fn dynamics_on_precomputed_series() {
    let table = ok(&[
        "dynamics",
        "--series",
        &fixture("olmoe_series.csv"),
        "--experts",
        "64",
    ]);
    assert!(table.contains("# peak 38.8 at step 40000"), "{table}");
    assert!(table.contains("# labels agree with input 20/20"));

    let v = json(&[
        "--json",
        "dynamics",
        "--series",
        &fixture("openmoe_series.csv"),
    ]);
    assert_eq!(v["labels_agree"]["agree"], v["labels_agree"]["labelled"]);
    let labels: Vec<&str> = v["series"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["phase"].as_str().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "dormant",
            "dormant",
            "dormant",
            "surge",
            "surge",
            "relaxation"
        ]
    );
}

#[test]
fn dynamics_on_manifest_writes_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::new();
    for (i, g) in ["8", "25", "18", "6"].iter().enumerate() {
        let name = format!("c{i}.moer");
        gen(
            dir.path(),
            &name,
            &["--gamma", g, "--layers", "2", "--alpha", "0.01"],
        );
        manifest.push_str(&format!("{},4000,{name},-,16,2\n", (i + 1) * 100));
    }
    let mpath: PathBuf = dir.path().join("series.csv");
    std::fs::write(&mpath, manifest).unwrap();
    let out = dir.path().join("out");
    ok(&[
        "--out-dir",
        out.to_str().unwrap(),
        "dynamics",
        mpath.to_str().unwrap(),
        "--bootstrap",
        "50",
    ]);
    let plot: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("plot.json")).unwrap()).unwrap();
    let pts = plot.as_array().unwrap();
    assert_eq!(pts.len(), 4);
    let peak = pts
        .iter()
        .max_by(|a, b| {
            a["gamma_eff"]
                .as_f64()
                .partial_cmp(&b["gamma_eff"].as_f64())
                .unwrap()
        })
        .unwrap();
    assert_eq!(peak["step"], 200);
    assert!(pts.iter().all(|p| p["ci_low"].is_f64()));
    assert_eq!(pts[3]["phase"], "relaxation");
    assert!(std::fs::read_to_string(out.join("dynamics.tsv"))
        .unwrap()
        .contains("# peak"));
}

#[test]
fn synth_reports_every_trial() {
    let v = json(&[
        "--json",
        "synth",
        "--gammas",
        "10,20",
        "--trials",
        "3",
        "--experts",
        "16",
    ]);
    assert_eq!(v["trials"].as_array().unwrap().len(), 6);
    assert!(v["median_error"].as_f64().unwrap() < 1.0);
}
