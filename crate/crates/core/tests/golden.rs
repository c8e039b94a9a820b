//! The hand-written RecSys fixture must prepare to the committed bytes.
//! Set `DTAIN_BLESS=1` to rewrite the expected files after an intended change.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use dtain::cli::{sha256_hex, RunConfig};
use dtain::data::{parse_recsys, prepare, write_trails};

const FILES: [&str; 4] = ["train.jsonl", "test.jsonl", "vocab.csv", "summary.json"];

fn expected(name: &str) -> Vec<u8> {
    fs::read(common::fixture_dir().join("expected").join(name)).unwrap()
}

fn run_prepare(out: &Path) {
    let dir = common::fixture_dir();
    let status = Command::new(env!("CARGO_BIN_EXE_dtain"))
        .arg("prepare")
        .arg("--config")
        .arg(dir.join("prepare.toml"))
        .arg("--clicks")
        .arg(dir.join("clicks.dat"))
        .arg("--buys")
        .arg(dir.join("buys.dat"))
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn cli_output_matches_golden_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_prepare(a.path());
    run_prepare(b.path());
    if std::env::var_os("DTAIN_BLESS").is_some() {
        for f in FILES {
            fs::copy(a.path().join(f), common::fixture_dir().join("expected").join(f)).unwrap();
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    for f in FILES {
        let bytes = fs::read(a.path().join(f)).unwrap();
        assert_eq!(
            bytes,
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
        assert!(bytes == expected(f), "{f} differs from the golden copy");
        assert_eq!(manifest["files"][f], sha256_hex(&bytes));
    }
    assert_eq!(manifest["seed"], 11);
}

#[test]
fn library_output_matches_golden_files() {
    let dir = common::fixture_dir();
    let cfg = RunConfig::resolve(Some(&dir.join("prepare.toml")), &[], None).unwrap();
    let log = parse_recsys(dir.join("clicks.dat"), dir.join("buys.dat")).unwrap();
    let data = prepare(&log, &cfg.prepare, cfg.seed).unwrap();
    let mut train = Vec::new();
    write_trails(&mut train, &data.train).unwrap();
    let mut test = Vec::new();
    write_trails(&mut test, &data.test).unwrap();
    assert!(train == expected("train.jsonl"));
    assert!(test == expected("test.jsonl"));
    assert_eq!(data.vocab.to_csv().unwrap().into_bytes(), expected("vocab.csv"));
}

#[test]
fn golden_trails_follow_the_cutting_rules() {
    let text = String::from_utf8(expected("train.jsonl")).unwrap()
        + &String::from_utf8(expected("test.jsonl")).unwrap();
    let line = |id: &str| {
        text.lines()
            .find(|l| l.starts_with(&format!("{{\"id\":\"{id}\",")))
            .map(str::to_string)
    };
    // 101: clicks on categories 1 and 2, then the blacklisted S
    // click; only the two earlier clicks survive and the purchase label stays.
    // 2014-04-01T09:00:00Z is epoch 1396342800.
    assert_eq!(
        line("101").unwrap(),
        r#"{"id":"101","label":1,"prediction_time":1396342950.0,"events":[[1,1396342800.0],[2,1396342950.0]]}"#
    );
    // 102 opens with the blacklisted click and is dropped entirely.
    assert_eq!(line("102"), None);
    // 122 is cut before S, so its last category-1 click is gone.
    assert!(line("122")
        .unwrap()
        .ends_with(r#""events":[[4,1396695600.0],[1,1396695900.0]]}"#));
    // 105's uncategorized item occurs once and falls below min_count.
    assert!(line("105").unwrap().contains("[[0,"));

    let summary: serde_json::Value = serde_json::from_slice(&expected("summary.json")).unwrap();
    assert_eq!(summary["sessions"], 30);
    assert_eq!(summary["dropped_empty_after_cut"], 1);
    assert_eq!(summary["cut_trails"], 5);
    assert_eq!(summary["positives"], 6);
    assert_eq!(summary["positive_rate"], 0.25);
}
