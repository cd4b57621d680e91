//! Replays recorded annotator responses and compares the built benchmark
//! against a stored golden file. Set `AVEM_UPDATE_GOLDEN=1` to re-record.

use std::path::PathBuf;

use avem_core::annotator::{FixtureReplay, Recorder, SyntheticAnnotator};
use avem_core::bench::{build_benchmark, BenchConfig};
use avem_core::io;
use avem_core::world::{synthesize_corpus, CorpusSpec};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/bench_golden")
}

#[test]
fn replayed_build_matches_golden_items() {
    let corpus = synthesize_corpus(&CorpusSpec { videos: 20, ..CorpusSpec::default() }, 11);
    let cfg = BenchConfig { seed: 11, ..BenchConfig::default() };
    let dir = data_dir();
    if std::env::var_os("AVEM_UPDATE_GOLDEN").is_some() {
        let rec = Recorder::new(SyntheticAnnotator);
        let out = build_benchmark(&corpus.manifest, &corpus.store, &rec, &cfg);
        std::fs::create_dir_all(&dir).unwrap();
        rec.save_dir(&dir).unwrap();
        io::write_jsonl(&dir.join("items.jsonl"), &out.items).unwrap();
    }
    let replay = FixtureReplay::load_dir(&dir).expect("recorded fixtures");
    let out = build_benchmark(&corpus.manifest, &corpus.store, &replay, &cfg);
    assert!(out.rejects.is_empty(), "replay missed requests: {:?}", out.rejects);
    let golden = std::fs::read_to_string(dir.join("items.jsonl")).unwrap();
    let got = io::to_jsonl(&out.items).unwrap();
    // Provenance names the answering client, which differs between recording and replay.
    let strip = |s: &str| -> Vec<serde_json::Value> {
        s.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                for step in v["provenance"].as_array_mut().unwrap() {
                    step.as_object_mut().unwrap().remove("annotator");
                }
                v
            })
            .collect()
    };
    assert_eq!(strip(&got), strip(&golden));
    assert!(!out.items.is_empty());
}
