use clap::Parser;

use super::*;

#[test]
fn overrides_reach_nested_fields() {
    let cfg = RunConfig::resolve(
        None,
        &[
            "train.epochs=3".into(),
            "train.learning_rate = 0.01".into(),
            "model.head_layers=[8, 4]".into(),
            "model_kind=gru_attn".into(),
            "prepare.blacklist=[\"cat:S\"]".into(),
        ],
        Some(9),
    )
    .unwrap();
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.learning_rate, 0.01);
    assert_eq!(cfg.model.head_layers, vec![8, 4]);
    assert_eq!(cfg.model_kind, ModelKind::GruAttn);
    assert_eq!(cfg.prepare.blacklist, vec!["cat:S".to_string()]);
    assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
}

#[test]
fn file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "seed = 4\n[train]\nepochs = 2\nbatch_size = 32\n").unwrap();
    let cfg = RunConfig::resolve(Some(&path), &["train.epochs=5".into()], None).unwrap();
    assert_eq!((cfg.train.epochs, cfg.train.batch_size, cfg.seed), (5, 32, 4));
    assert_eq!(cfg.train.seed, 4);
}

#[test]
fn unknown_or_malformed_keys_are_rejected() {
    for bad in [
        "train.epochz=3",
        "nonsense=1",
        "train",
        "train..epochs=1",
        "seed.x=1",
    ] {
        let err = RunConfig::resolve(None, &[bad.into()], None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{bad}: {err:?}");
    }
}

#[test]
fn command_line_parses() {
    let cli = Cli::try_parse_from([
        "dtain",
        "train",
        "--data",
        "d",
        "--out",
        "o",
        "--model",
        "cnn",
        "--set",
        "train.epochs=1",
        "--seed",
        "3",
    ])
    .unwrap();
    match cli.command {
        Command::Train { common, model, .. } => {
            assert_eq!(model, Some(ModelKind::Cnn));
            assert_eq!(common.overrides, vec!["train.epochs=1".to_string()]);
            assert_eq!(common.seed, Some(3));
        }
        other => panic!("parsed as {other:?}"),
    }
    assert!(Cli::try_parse_from(["dtain", "train", "--data", "d", "--out", "o", "--model", "lstm"]).is_err());
}

#[test]
fn explanation_rows_are_right_aligned() {
    let ids = vec!["a".to_string(), "b".to_string()];
    let rows = vec![vec![Some(0.25), Some(0.75)], vec![Some(1.0), None, Some(0.5)]];
    let text = explanation_csv("attention", &ids, &rows, 4).unwrap();
    assert_eq!(
        text,
        "attention,pos_-3,pos_-2,pos_-1,pos_-0\n\
         a,,,0.25,0.75\n\
         b,,1,,0.5\n"
    );
}

#[test]
fn digests_are_hex_sha256() {
    assert_eq!(
        sha256_hex(b"abc"),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}
