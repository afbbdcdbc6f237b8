use std::path::Path;
use std::process::{Command, Output};

use promptseg::dataio::{save_dataset, Sample};
use promptseg::image::{ClassMap, GrayImage};
use promptseg::segnet::{NetConfig, Network};

fn promptseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .current_dir(dir)
        .env_remove("PROMPTSEG_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = promptseg(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap()
}

const SMALL: &[&str] = &["--epochs", "20", "--set", "base_width=2", "--set", "batch_size=2", "--set", "oneshot_steps=1"];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

#[test]
fn usage_errors_exit_2_and_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(promptseg(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(promptseg(dir.path(), &["synth", "--out", "d", "--bogus"]).status.code(), Some(2));
    assert_eq!(promptseg(dir.path(), &["synth"]).status.code(), Some(2));
    let o = promptseg(dir.path(), &["train-oneshot", "--out", "o", "--data", "missing"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# desk run\nepochs=20\ntau=-1\n").unwrap();
    let o = promptseg(dir.path(), &["train-oneshot", "--out", "o", "--config", "run.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("tau"), "{err}");
}

#[test]
fn synth_is_byte_identical_and_seeded_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str| ["synth", "--out", out, "--count", "12", "--size", "64", "--family", "a", "--seed", "7"];
    ok(d, &args("one"));
    ok(d, &args("two"));
    for entry in std::fs::read_dir(d.join("one")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(std::fs::read(d.join("one").join(&name)).unwrap(), std::fs::read(d.join("two").join(&name)).unwrap());
    }
    let o = Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .current_dir(d)
        .env("PROMPTSEG_SEED", "7")
        .args(["synth", "--out", "env", "--count", "12", "--size", "64", "--family", "a"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(read(d, "env/manifest.txt"), read(d, "one/manifest.txt"));
    assert_eq!(std::fs::read(d.join("env/a_000.img.pgm")).unwrap(), std::fs::read(d.join("one/a_000.img.pgm")).unwrap());
}

#[test]
fn manifest_replay_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data", "--count", "6", "--size", "32", "--family", "b", "--seed", "3"]);
    ok(d, &with_small(&["train-oneshot", "--out", "first", "--data", "data", "--fold", "1", "--tau", "0.5", "--seed", "4"]));
    ok(d, &["train-oneshot", "--out", "again", "--manifest", "first/manifest.txt"]);
    for f in ["manifest.txt", "loss.csv", "metrics.csv"] {
        assert_eq!(read(d, &format!("first/{f}")), read(d, &format!("again/{f}")), "{f}");
    }
    assert_eq!(std::fs::read(d.join("first/weights.pseg")).unwrap(), std::fs::read(d.join("again/weights.pseg")).unwrap());
    assert!(read(d, "first/manifest.txt").contains("tau=5e-1"));

    let o = promptseg(d, &["eval", "--out", "x", "--manifest", "first/manifest.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-oneshot"));

    ok(d, &["synth", "--out", "data", "--count", "6", "--size", "32", "--family", "b", "--seed", "5"]);
    let o = promptseg(d, &["train-oneshot", "--out", "stale", "--manifest", "first/manifest.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash"));
}

#[test]
fn train_partial_emits_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data", "--count", "6", "--size", "32", "--seed", "1"]);
    ok(d, &with_small(&["train-partial", "--out", "tp", "--data", "data", "--fold", "2"]));
    for f in ["stage1/weights.pseg", "stage2/weights.pseg", "stage1/loss.csv", "stage2/loss.csv", "metrics.csv"] {
        assert!(d.join("tp").join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_dir(d.join("tp/pseudo")).unwrap().count(), 2 * 4);
    let m = read(d, "tp/manifest.txt");
    assert!(m.contains("run.pseudo_agreement=") && m.contains("prompt."), "{m}");
}

/// Depth-1, width-2 U-Net wired to pass `x > 0.5` straight through the skip
/// path: channel 0 carries relu(x - 0.5), channel 1 relu(0.5 - x).
fn threshold_network() -> Network {
    let mut net = Network::build(NetConfig { depth: 1, base_width: 2, ..NetConfig::default() }).unwrap();
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    for n in &names {
        net.param_mut(n).unwrap().data_mut().fill(0.0);
    }
    let mut tap = |name: &str, c_in: usize, oc: usize, ic: usize, v: f64| {
        let w = net.param_mut(&format!("{name}.weight")).unwrap();
        let k = (w.numel() / (w.shape()[0] * c_in)).max(1);
        w.data_mut()[(oc * c_in + ic) * k + k / 2] = v;
    };
    tap("enc0.conv1", 1, 0, 0, 1.0);
    tap("enc0.conv1", 1, 1, 0, -1.0);
    for c in 0..2 {
        tap("enc0.conv2", 2, c, c, 1.0);
        tap("dec0.conv1", 6, c, 4 + c, 1.0);
        tap("dec0.conv2", 2, c, c, 1.0);
    }
    tap("head", 2, 1, 0, 1.0);
    tap("head", 2, 1, 1, -1.0);
    tap("head", 2, 0, 0, -1.0);
    tap("head", 2, 0, 1, 1.0);
    net.param_mut("enc0.conv1.bias").unwrap().data_mut().copy_from_slice(&[-0.5, 0.5]);
    net
}

#[test]
fn eval_of_a_perfect_copy_model_reports_100() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let samples: Vec<Sample> = (0..4)
        .map(|k| {
            let bytes: Vec<u8> = (0..256).map(|i| ((i * 37 + k * 11) % 256) as u8).collect();
            let image = GrayImage::new(16, 16, bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
            let label = ClassMap::new(16, 16, bytes.iter().map(|&b| u8::from(b > 127)).collect()).unwrap();
            Sample::new(image, label, format!("t{k}")).unwrap()
        })
        .collect();
    save_dataset(&samples, &d.join("data")).unwrap();
    std::fs::create_dir_all(d.join("model")).unwrap();
    threshold_network().save(&d.join("model/weights.pseg")).unwrap();
    ok(d, &["eval", "--out", "ev", "--weights", "model/weights.pseg", "--data", "data", "--mode", "plain"]);
    let csv = read(d, "ev/metrics.csv");
    assert!(csv.contains("dsc,average,0,100.00"), "{csv}");
    assert!(csv.contains("dsc,membrane,0,100.00"), "{csv}");
    ok(d, &["infer", "--out", "masks", "--weights", "model/weights.pseg", "--data", "data"]);
    let mask = promptseg::dataio::read_label(&d.join("masks/t2.mask.pgm"), 2).unwrap();
    assert_eq!(mask, samples[2].label);
}
