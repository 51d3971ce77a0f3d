use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nmn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nmn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&["--seed", "5", "make-synth", "--n", "30", "--avg-degree", "4", "--dim", "8", "--noise", "0.01", "--out", p(dir)]);
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(nmn(&[]).status.code(), Some(1));
    assert_eq!(nmn(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(nmn(&["stats", "--in", "/nonexistent/dir"]).status.code(), Some(2));
    assert_eq!(nmn(&["--float64=false", "stats", "--in", "."]).status.code(), Some(1));
}

#[test]
fn stats_and_degree_diff_on_isomorphic_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data);
    let stats: serde_json::Value = serde_json::from_str(&ok(&["stats", "--in", p(&data)])).unwrap();
    assert_eq!(stats["g1"]["num_entities"], 30);
    assert_eq!(stats["g1"]["num_triples"], stats["g2"]["num_triples"]);
    assert_eq!(stats["gold_pairs"], 30);
    let csv = ok(&["degree-diff", "--in", p(&data)]);
    let first = csv.lines().nth(1).unwrap();
    assert!(first.ends_with(",30"), "{csv}");
}

#[test]
fn sparsify_writes_floor_of_kept_triples() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let out = tmp.path().join("s");
    synth(&data);
    let before = fs::read_to_string(data.join("triples_1")).unwrap().lines().count();
    ok(&["--seed", "2", "sparsify", "--in", p(&data), "--keep", "0.5", "--side", "1", "--out", p(&out)]);
    let after = fs::read_to_string(out.join("triples_1")).unwrap().lines().count();
    assert_eq!(after, before / 2);
    assert_eq!(
        fs::read(data.join("triples_2")).unwrap(),
        fs::read(out.join("triples_2")).unwrap()
    );
}

#[test]
fn train_then_evaluate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data);
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "# tiny run\nmax_epochs=3\nneighbor_dim=4\nt=5\nK=3\n").unwrap();
    let mut reports = Vec::new();
    for run in 0..2 {
        let ckpt = tmp.path().join(format!("m{run}.ckpt"));
        let log = tmp.path().join(format!("log{run}.jsonl"));
        ok(&["--seed", "9", "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt), "--log", p(&log)]);
        let lines = fs::read_to_string(&log).unwrap();
        for line in lines.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["loss"].as_f64().unwrap() >= 0.0);
        }
        let ranks = tmp.path().join(format!("ranks{run}.csv"));
        let report = ok(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--ranks", p(&ranks)]);
        let v: serde_json::Value = serde_json::from_str(&report).unwrap();
        let h1 = v["hits"]["1"].as_f64().unwrap();
        let h10 = v["hits"]["10"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&h1) && h1 <= h10);
        assert_eq!(v["buckets"].as_array().unwrap().len(), 4);
        reports.push((fs::read(&ckpt).unwrap(), report, fs::read(&ranks).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);

    let ckpt = tmp.path().join("m0.ckpt");
    let gold = fs::read_to_string(data.join("ref_ent_ids")).unwrap();
    let (a, b) = gold.lines().next().unwrap().split_once('\t').unwrap();
    let att = ok(&["dump-attention", "--checkpoint", p(&ckpt), "--data", p(&data), "--pair", a, b]);
    assert!(att.starts_with("left_neighbor_name,right_neighbor_name,a_pq\n"));
}

#[test]
fn invalid_config_fails_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data);
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "gamma=-1\n").unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    let out = nmn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!ckpt.exists());
}
