use std::path::Path;
use std::process::{Command, Output};

use hloc::format::{load_map, load_queries, read_results};

const BIN: &str = env!("CARGO_BIN_EXE_hloc");

fn hloc(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("HLOC_THREADS").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    synth_queries(dir, "12", extra)
}

fn synth_queries(dir: &Path, num_queries: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "synth",
        "--out-dir",
        s(dir),
        "--num-places",
        "3",
        "--keyframes-per-place",
        "6",
        "--landmarks-per-place",
        "400",
        "--num-queries",
        num_queries,
        "--aliasing-pairs",
        "0:1",
    ];
    args.extend_from_slice(extra);
    hloc(&args)
}

#[test]
fn synth_index_localize_eval_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("world");
    assert!(synth(&w, &[]).status.success());
    let (map, idx, queries, res, out) = (
        w.join("map.json"),
        w.join("index.bin"),
        w.join("queries.json"),
        w.join("results.jsonl"),
        w.join("eval"),
    );
    assert_eq!(load_map(&map).unwrap().num_keyframes(), 18);

    let o = hloc(&["index", "--map", s(&map), "--dim", "8", "--out", s(&idx)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("18 keyframes"));

    let o = hloc(&[
        "localize", "--map", s(&map), "--index", s(&idx), "--queries", s(&queries), "--out", s(&res),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = read_results(&res).unwrap();
    let ids: Vec<u64> = results.iter().map(|r| r.query_id).collect();
    let expected: Vec<u64> = load_queries(&queries).unwrap().queries.iter().map(|q| q.id).collect();
    assert_eq!(ids, expected);
    assert!(results.iter().filter(|r| r.is_localized()).count() > 6);

    let o = hloc(&[
        "eval", "--results", s(&res), "--queries", s(&queries), "--out-dir", s(&out), "--map", s(&map),
        "--index", s(&idx),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    for label in ["Recall@0.1m (%)", "Precision@0.1m (%)", "Median error (m)", "retrieval recall@1"] {
        assert!(table.contains(label), "{table}");
    }
    for f in ["metrics.csv", "stats.csv", "recall_at_n.csv", "cumulative_errors.csv", "timings.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let o = hloc(&[
        "localize", "--map", s(&map), "--index", s(&idx), "--queries", s(&queries), "--out", s(&res), "--mode",
        "direct",
    ]);
    assert!(o.status.success());
    assert!(read_results(&res).unwrap().iter().all(|r| r.places_evaluated == 1));
}

#[test]
fn synth_is_byte_identical_on_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(synth(&a, &["--seed", "77"]).status.success());
    assert!(synth(&b, &["--seed", "77"]).status.success());
    for f in ["map.json", "map.local.bin", "map.global.bin", "queries.json", "queries.local.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn empty_query_file_gives_empty_results() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    assert!(synth_queries(w, "0", &[]).status.success());
    let (map, idx, res) = (w.join("map.json"), w.join("index.bin"), w.join("r.jsonl"));
    assert!(hloc(&["index", "--map", s(&map), "--dim", "4", "--out", s(&idx)]).status.success());
    let o = hloc(&[
        "localize", "--map", s(&map), "--index", s(&idx), "--queries", s(&w.join("queries.json")), "--out",
        s(&res),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_results(&res).unwrap().is_empty());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    let missing = w.join("missing.json");
    let o = hloc(&["index", "--map", s(&missing), "--out", s(&w.join("i"))]);
    assert_eq!(o.status.code(), Some(3));

    assert!(synth(w, &["--global-dim", "16"]).status.success());
    let map = w.join("map.json");
    let o = hloc(&["index", "--map", s(&map), "--dim", "17", "--out", s(&w.join("i"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = hloc(&["index", "--map", s(&map), "--bogus"]);
    assert_eq!(o.status.code(), Some(2));

    let o = hloc(&["synth", "--out-dir", s(w), "--num-places", "0"]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(w.join("broken.json"), "{ not json").unwrap();
    let o = hloc(&["index", "--map", s(&w.join("broken.json")), "--out", s(&w.join("i"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(BIN)
        .args(["index", "--map", s(&map), "--dim", "4", "--out", s(&w.join("i"))])
        .env("HLOC_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand() {
    let o = hloc(&["--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["index", "localize", "eval", "synth"] {
        assert!(text.contains(sub));
    }
    let o = hloc(&["localize", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--num-priors", "--epsilon", "--mode", "--min-inliers", "[default: 10]", "[default: 3]"] {
        assert!(text.contains(flag), "{flag}");
    }
}
