use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mtlse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlse")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
framework = SP
hidden = 4
embed_dim = 6
mlp_hidden = 8
batch_size = 16
max_epochs = 2
task.overlap.synth = shared-overlap
task.overlap.train_size = 48
task.overlap.dev_size = 16
task.marker.synth = private-marker:1
task.marker.train_size = 48
task.marker.dev_size = 16
";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny config once into `dir/run` and returns the checkpoint path.
fn trained(dir: &Path) -> PathBuf {
    let cfg = write(dir, "tiny.cfg", TINY);
    let out = dir.join("run");
    let o = mtlse(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("model.ckpt")
}

#[test]
fn train_writes_artifacts_and_manifest_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    let run = ckpt.parent().unwrap();
    for f in ["model.ckpt", "model.ckpt.vocab", "metrics.csv", "manifest.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("# command: train"));
    assert!(manifest.contains("# seed: 1"));

    let again = dir.path().join("again");
    let o = mtlse(&["train", "--config", s(&run.join("manifest.txt")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let out = dir.path().join("s7");
    let o = mtlse(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("manifest.txt")).unwrap().contains("seed = 7"));
}

#[test]
fn config_and_data_errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = mtlse(&["train", "--config", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.cfg"));
    assert_eq!(stderr(&o).trim().lines().count(), 1);

    let bad = write(dir.path(), "bad.cfg", "framework = SP\nlearning_rate = 3\n");
    let o = mtlse(&["train", "--config", s(&bad), "--out", s(&dir.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2));

    let data = write(
        dir.path(),
        "data.cfg",
        "task.t.labels = a,b\ntask.t.train = missing_train.tsv\ntask.t.dev = missing_dev.tsv\n",
    );
    let o = mtlse(&["train", "--config", s(&data), "--out", s(&dir.path().join("z"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = mtlse(&["train", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn encode_probe_and_eval_sts() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());

    let sentences: String = (0..40)
        .map(|i| {
            let len = 4 + i % 7;
            let words: Vec<String> = (0..len).map(|j| format!("w{}", (i * 3 + j) % 24)).collect();
            format!("{} x{}\n", words.join(" "), i % 6)
        })
        .collect();
    let sents = write(dir.path(), "sents.txt", &sentences);
    let csv = dir.path().join("sents.csv");
    let o = mtlse(&["encode", "--model", s(&ckpt), "--input", s(&sents), "--output", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "id,tag=shared,D=8");
    assert_eq!(text.lines().count(), 41);

    let pairs = write(dir.path(), "pairs.tsv", "w1 w2 x1\tw3 x1\nw4 x2\tw5 w6 x3\n");
    let pcsv = dir.path().join("pairs.csv");
    let o = mtlse(&[
        "encode", "--model", s(&ckpt), "--input", s(&pairs), "--encoder", "concat:marker", "--output", s(&pcsv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(&pcsv).unwrap().starts_with("id,tag=concat:marker,D=64\n"));

    let o = mtlse(&["encode", "--model", s(&ckpt), "--input", s(&sents), "--encoder", "private", "--output", s(&csv)]);
    assert_eq!(o.status.code(), Some(2));

    let report = dir.path().join("probe.csv");
    let o = mtlse(&[
        "probe", "--model", s(&ckpt), "--task", "length", "--data", s(&sents), "--probe", "logistic", "--output",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let acc: f64 = stdout(&o).trim().strip_prefix("accuracy=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let rows = fs::read_to_string(&report).unwrap();
    assert!(rows.starts_with("probe,encoder_tag,metric,value,seed\n"));

    let scored = write(
        dir.path(),
        "sts.tsv",
        "w1 w2 x1\tw1 w2 x1\t5\nw1 x2\tw9 w10 w11 x4\t1\nw3 w4 x3\tw3 w5 x3\t3.5\nw6 x5\tw7 w8 x0\t2\n",
    );
    let o = mtlse(&["eval-sts", "--model", s(&ckpt), "--pairs", s(&scored)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let last = stdout(&o).trim().lines().last().unwrap().to_string();
    let rho: f64 = last.strip_prefix("spearman=").unwrap().parse().unwrap();
    assert!((-1.0..=1.0).contains(&rho));

    let malformed = write(dir.path(), "bad.tsv", "only one column\n");
    let o = mtlse(&["eval-sts", "--model", s(&ckpt), "--pairs", s(&malformed)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 5);
    fs::write(&ckpt, bytes).unwrap();
    let sents = write(dir.path(), "s.txt", "w1 w2\n");
    let o = mtlse(&["encode", "--model", s(&ckpt), "--input", s(&sents), "--output", s(&dir.path().join("o.csv"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn gradcheck_on_the_desk_config() {
    let o = mtlse(&["gradcheck"]);
    let out = stdout(&o);
    assert!(out.contains("max relative error:"), "{out}");
    assert!(o.status.success(), "{out}");
}
