use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1

[dataset]
n_classes = 3
train_per_class = 4
test_per_class = 3
n_subjects = 3
canonical_len = 16
embed_dim = 8
raw_multiples = [3, 3, 2]

[model]
hidden = 12
projector_hidden = 10
prior_hidden = 10

[pretrain]
epochs = 3
batch_size = 8

[adapt]
epochs = 2
batch_size = 4
"#;

fn fslab(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fslab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env("MINDSHOT_THREADS", "2")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_succeeds_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = fslab(&["gen-data"], &cfg, &dir.path().join("a"));
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert!(dir.path().join("a/data/manifest.json").exists());
    let b = fslab(&["gen-data"], &cfg, &dir.path().join("b"));
    let sha = |o: &Output| {
        stdout(o)
            .lines()
            .find(|l| l.contains("sha256"))
            .map(String::from)
    };
    assert!(sha(&a).is_some());
    assert_eq!(sha(&a), sha(&b));
    assert_eq!(
        std::fs::read(dir.path().join("a/data/manifest.json")).unwrap(),
        std::fs::read(dir.path().join("b/data/manifest.json")).unwrap()
    );
}

#[test]
fn invalid_config_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dataset]\nn_clases = 3\n");
    let o = fslab(&["gen-data"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_clases"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_exits_3_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = fslab(&["pretrain"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}

#[test]
fn stages_chain_rerun_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    for args in [
        &["gen-data"][..],
        &["pretrain"],
        &["select", "--strategy", "kda_min"],
        &["adapt", "--supervision", "amp"],
        &["eval", "--supervision", "amp"],
        &["adapt", "--subset", "selected", "--strategy", "kda_min"],
        &["eval", "--subset", "selected", "--strategy", "kda_min"],
    ] {
        let o = fslab(args, &cfg, &out);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    assert!(out.join("eval/amp-1shot-first/eval_report.json").exists());
    assert!(out
        .join("eval/fourier-1shot-kda_min/eval_report.json")
        .exists());

    let again = fslab(&["adapt", "--supervision", "amp"], &cfg, &out);
    assert!(stdout(&again).contains("skipped"), "{}", stdout(&again));
    assert_eq!(fslab(&["verify"], &cfg, &out).status.code(), Some(0));

    let bad = fslab(&["adapt", "--subset", "sideways"], &cfg, &out);
    assert_eq!(bad.status.code(), Some(2));

    std::fs::write(out.join("pretrain/extra.bin"), "x").unwrap();
    let v = fslab(&["verify"], &cfg, &out);
    assert_eq!(v.status.code(), Some(3));
    assert!(stderr(&v).contains("pretrain/extra.bin"));
}

#[test]
fn ablate_writes_one_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = fslab(&["ablate", "--axis", "adapter_depth"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablate/adapter_depth/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    let bad = fslab(&["ablate", "--axis", "width"], &cfg, &out);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn run_produces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = fslab(&["run"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for t in ["supervision", "few_shot", "selection"] {
        assert!(out.join(format!("report/tables/{t}.csv")).exists());
    }
    let again = fslab(&["run"], &cfg, &out);
    assert!(
        stdout(&again).lines().all(|l| l.contains("skipped")),
        "{}",
        stdout(&again)
    );
}
