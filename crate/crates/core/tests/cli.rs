use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn prism(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PRISM_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "model = \"synthetic\"\n\
[data.synthetic]\ntrain_samples = 120\ntest_samples = 24\nheight = 8\nwidth = 8\nclasses = 3\n\
[fed]\nnum_clients = 4\nactive_per_round = 2\nrounds = 3\n\
[train]\nlocal_epochs = 1\nbatch_size = 16\n";

#[test]
fn run_writes_artifacts_and_inspect_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
    let o = prism(
        &[
            "run", "exp.toml", "-q", "--method", "origdrop", "--keep", "0.5", "-o", "out",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("method origdrop"));
    let out = dir.path().join("out");
    for f in [
        "config.toml",
        "shards.jsonl",
        "metrics.jsonl",
        "timings.jsonl",
        "checkpoint.bin",
        "summary.json",
        "summary.txt",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let cfg = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("keep_ratio = 0.5"));
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().next().unwrap().contains("\"init\""));
    assert_eq!(metrics.lines().filter(|l| l.contains("\"train\"")).count(), 3);

    let o = prism(&["inspect", "out/checkpoint.bin", "--top", "3"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("rounds 3") && text.contains("effective rank"), "{text}");

    let o = prism(&["plot", "out", "--metric", "rank", "-o", "rank.svg"], dir.path());
    assert!(o.status.success());
    assert!(fs::read_to_string(dir.path().join("rank.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn output_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_prism"))
        .args(["run", "exp.toml", "-q", "--rounds", "1"])
        .current_dir(dir.path())
        .env("PRISM_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from-env/summary.json").is_file());
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let o = prism(&["run", "--set", "fed.bogus=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert_eq!(prism(&["run", "missing.toml"], dir.path()).status.code(), Some(4));
    assert_eq!(
        prism(&["cost", "--method", "dropout"], dir.path()).status.code(),
        Some(2)
    );
    fs::write(dir.path().join("bad.bin"), b"not a checkpoint").unwrap();
    assert_eq!(prism(&["inspect", "bad.bin"], dir.path()).status.code(), Some(4));
}

#[test]
fn cost_table_for_resnet() {
    let o = prism(&["cost", "--keep", "0.2"], Path::new("."));
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("11173962"), "{text}");
    let row = text.lines().find(|l| l.trim_start().starts_with("0.20")).unwrap();
    assert!(row.contains("4.5"), "{row}");
}

#[test]
fn synth_writes_loadable_idx() {
    let dir = tempfile::tempdir().unwrap();
    let o = prism(
        &[
            "synth",
            "-o",
            "d",
            "--train",
            "50",
            "--test",
            "10",
            "--size",
            "6",
            "--classes",
            "5",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let d = dir.path().join("d");
    let train = prism_core::data::load_idx(d.join("train-images.idx"), d.join("train-labels.idx")).unwrap();
    assert_eq!((train.len(), train.shape(), train.num_classes), (50, [1, 6, 6], 5));
    let cfg = "model = \"synthetic\"\n[data]\nkind = \"idx\"\ntrain_images = \"d/train-images.idx\"\n\
         train_labels = \"d/train-labels.idx\"\ntest_images = \"d/test-images.idx\"\ntest_labels = \"d/test-labels.idx\"\n\
         [fed]\nnum_clients = 2\nactive_per_round = 2\nrounds = 1\n";
    fs::write(dir.path().join("idx.toml"), cfg).unwrap();
    let o = prism(&["run", "idx.toml", "-q", "-o", "r"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let cfg = prism_core::config::ExperimentConfig::load(Some(&path), &[]);
        assert!(cfg.is_ok(), "{}: {:?}", path.display(), cfg.err());
        n += 1;
    }
    assert!(n >= 2);

    // The commented-out capacity tiers are valid too.
    let text = fs::read_to_string(root.join("resnet-cifar.toml")).unwrap();
    let tiers: String = text
        .lines()
        .map(|l| {
            l.strip_prefix("# ")
                .filter(|_| l.contains('=') || l.contains("[["))
                .unwrap_or(l)
        })
        .collect::<Vec<_>>()
        .join("\n");
    let cfg = prism_core::config::ExperimentConfig::parse(&tiers, &[]).unwrap();
    assert_eq!(cfg.fed.profile.len(), 2);
}
