use std::path::Path;
use std::process::{Command, Output};

use coattendwg::data::{load_features, parse_trace_csv, Dataset, FeatureRecord};
use coattendwg::{ModelConfig, ModelParams, Tensor};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coattendwg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "dim = 8\nfusion_heads = 2\nrefine_heads = 2\nlr = 1e-3\nmax_epochs = 2\n";

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let o = run(
        &["synth", "--task", "linear", "--samples", "60", "--text-dim", "4", "--image-dim", "3", "--out", "d.tsv"],
        dir.path(),
    );
    assert!(o.status.success());
    dir
}

#[test]
fn synth_writes_a_loadable_file() {
    let dir = fixture();
    let ds = load_features(dir.path().join("d.tsv")).unwrap();
    assert_eq!((ds.len(), ds.text_dim, ds.image_dim, ds.num_classes), (60, 4, 3, 2));
}

#[test]
fn train_eval_trace() {
    let dir = fixture();
    let p = dir.path();
    let o = run(&["train", "--data", "d.tsv", "--config", "small.cfg", "--out", "m.json", "--log", "log.jsonl"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(p.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["val_loss"].is_number());
    }
    let model = ModelParams::from_json(&std::fs::read_to_string(p.join("m.json")).unwrap()).unwrap();
    assert_eq!((model.text_dim(), model.image_dim(), model.num_classes()), (4, 3, 2));

    let o = run(&["eval", "--model", "m.json", "--data", "d.tsv", "--json"], p);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["samples"], 60);

    let o = run(&["trace", "--model", "m.json", "--data", "d.tsv", "--out", "t.csv"], p);
    assert!(o.status.success());
    let rows = parse_trace_csv(std::fs::File::open(p.join("t.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().filter(|r| r.kind.as_str() == "label").count(), 60);
}

#[test]
fn eval_of_a_perfect_predictor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        dim: 8,
        fusion_heads: 2,
        refine_heads: 2,
        text_dim: Some(2),
        image_dim: Some(2),
        num_classes: Some(2),
        ..ModelConfig::default()
    };
    let mut model = ModelParams::new(&cfg).unwrap();
    let w = model.store.find("classifier.weight").unwrap();
    let b = model.store.find("classifier.bias").unwrap();
    model.store.set(w, Tensor::zeros(&[2, 8])).unwrap();
    model.store.set(b, Tensor::new(vec![2], vec![0.0, 5.0]).unwrap()).unwrap();
    std::fs::write(dir.path().join("m.json"), model.to_json().unwrap()).unwrap();
    let ds = Dataset {
        records: (0..5)
            .map(|k| FeatureRecord {
                id: format!("p{k}"),
                text: vec![k as f64, 1.0],
                image: vec![0.5, -(k as f64)],
                label: 1,
            })
            .collect(),
        ..Dataset::new(2, 2, 2)
    };
    ds.save(dir.path().join("d.tsv")).unwrap();
    let o = run(&["eval", "--model", "m.json", "--data", "d.tsv"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "accuracy\t1.0000"), "{}", stdout(&o));
}

#[test]
fn gradcheck_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("max rel err"));
    let o = run(&["gradcheck", "--tol", "1e-30"], dir.path());
    assert_eq!(o.status.code(), Some(7));
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let dir = fixture();
    let o = run(
        &["ablate", "--data", "d.tsv", "--config", "small.cfg", "--variants", "full;no_EF;no_CA,no_XA"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let labels: Vec<&str> = out.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["Full", "w/o EF", "w/o CA+XA"]);
}

#[test]
fn exit_codes() {
    let dir = fixture();
    let p = dir.path();
    std::fs::write(p.join("bad.cfg"), "depth = 3\n").unwrap();
    std::fs::write(p.join("bad.tsv"), "D_text=1 D_img=1 C=2\nx\t0\t1,2\t1\n").unwrap();
    std::fs::write(p.join("hot.cfg"), format!("{SMALL}lr = 1e308\n").replace("lr = 1e-3\n", "")).unwrap();
    let cases: [(&[&str], i32); 6] = [
        (&["frobnicate"], 2),
        (&["train", "--data", "d.tsv"], 2),
        (&["eval", "--model", "missing.json", "--data", "d.tsv"], 3),
        (&["train", "--data", "d.tsv", "--config", "bad.cfg", "--out", "m.json"], 4),
        (&["train", "--data", "bad.tsv", "--out", "m.json"], 5),
        (&["train", "--data", "d.tsv", "--config", "hot.cfg", "--out", "m.json"], 6),
    ];
    for (args, code) in cases {
        let o = run(args, p);
        assert_eq!(o.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
