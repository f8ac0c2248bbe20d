use std::path::Path;
use std::process::{Command, Output};

fn afn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afn"))
        .args(args)
        .env("AFN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn total(csv: &str) -> usize {
    csv.lines()
        .find_map(|l| l.strip_prefix("total,"))
        .expect("total row")
        .parse()
        .unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(afn(&["params", "--bogus"]).status.code(), Some(1));
    assert_eq!(afn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(afn(&[]).status.code(), Some(1));
    let help = afn(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("gradcheck"));
}

#[test]
fn runtime_errors_exit_2() {
    let o = afn(&["params", "-a", "afn9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("AFN-9"));
    assert_eq!(afn(&["eval", "-w", "/nonexistent.afnw", "-m", "/nonexistent.txt"]).status.code(), Some(2));
}

#[test]
fn params_delta_is_the_attention_head() {
    let basic = afn(&["params", "-a", "basic"]);
    let afn1 = afn(&["params", "-a", "afn1"]);
    assert!(basic.status.success() && afn1.status.success());
    assert_eq!(total(&stdout(&basic)), 311_290);
    assert_eq!(total(&stdout(&afn1)) - total(&stdout(&basic)), 33_850);
    let all = afn(&["params", "-a", "basic", "--mode", "all"]);
    assert!(total(&stdout(&all)) > 311_290);
}

#[test]
fn rf_of_basic_is_29() {
    let o = afn(&["rf", "-a", "basic"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let row = text.lines().find(|l| l.starts_with("layer8,")).unwrap();
    assert_eq!(row, "layer8,29,29,29,29,29,29");
}

#[test]
fn gradcheck_filtered_passes() {
    let o = afn(&["gradcheck", "--seeds", "2", "--filter", "softmax"]);
    assert_eq!(o.status.code(), Some(0));
    let line = stdout(&o);
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(v["name"], "softmax");
    assert_eq!(v["passed"], true);
    assert_eq!(afn(&["gradcheck", "--filter", "nothing-matches"]).status.code(), Some(2));
}

const PHANTOMS: &str = r#"
[phantom]
grid = [20, 20, 20]
background_mean = 0.0
background_noise = 0.1
seed = 5

[class1]
count = 1
radius_min = 3
radius_max = 4
intensity_mean = 1.0
texture_frequency = 0.2
texture_amplitude = 0.1

[class2]
count = 1
radius_min = 4
radius_max = 5
intensity_mean = -1.0
texture_frequency = 0.1
texture_amplitude = 0.1
"#;

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn generate_train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("phantoms.toml"), PHANTOMS);
    let gen = afn(&[
        "gen-phantoms",
        "-c",
        d.join("phantoms.toml").to_str().unwrap(),
        "-n",
        "2",
        "-o",
        d.join("vols").to_str().unwrap(),
    ]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert_eq!(stdout(&gen).lines().count(), 2);
    let manifest = d.join("vols/manifest.txt");
    assert!(manifest.exists());

    write(
        &d.join("train.toml"),
        "profile = \"desk\"\n\n[model]\nchannels = [3, 3, 4, 4]\n\n[train]\nepochs = 2\nsteps_per_epoch = 2\nsegment = 12\n\n[data]\nmanifest = \"vols/manifest.txt\"\nout_dir = \"run\"\n",
    );
    let cfg = d.join("train.toml");
    let tr = afn(&["train", "-c", cfg.to_str().unwrap()]);
    assert!(tr.status.success(), "{}", String::from_utf8_lossy(&tr.stderr));
    let lines: Vec<serde_json::Value> = stdout(&tr).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "step", "loss", "lr", "seconds"] {
        assert!(lines[1].get(key).is_some(), "missing {key}");
    }
    let weights = d.join("run/model.afnw");
    assert!(weights.exists() && d.join("run/optimizer.afns").exists());
    assert_eq!(std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap(), stdout(&tr));

    write(&cfg, &std::fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 3"));
    let resumed = afn(&["train", "-c", cfg.to_str().unwrap(), "--resume"]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    let line: serde_json::Value = serde_json::from_str(stdout(&resumed).trim()).unwrap();
    assert_eq!(line["epoch"], 2);
    assert_eq!(line["step"], 6);

    let ev = afn(&["eval", "-w", weights.to_str().unwrap(), "-m", manifest.to_str().unwrap(), "--window", "12"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let csv = stdout(&ev);
    assert!(csv.starts_with("volume_id,class_name,dice\n"));
    assert!(csv.lines().any(|l| l.starts_with("mean,overall,")));

    let out = d.join("att");
    let ex = afn(&[
        "export-attention",
        "-w",
        weights.to_str().unwrap(),
        "-i",
        d.join("vols/phantom_000.afnv").to_str().unwrap(),
        "-l",
        "layer4",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(ex.status.success(), "{}", String::from_utf8_lossy(&ex.stderr));
    assert_eq!(stdout(&ex).lines().count(), 2);
    assert!(out.join("phantom_000_layer4_k2_r6.afnv").exists());
    let bad = afn(&[
        "export-attention",
        "-w",
        weights.to_str().unwrap(),
        "-i",
        d.join("vols/phantom_000.afnv").to_str().unwrap(),
        "-l",
        "layer1",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}
