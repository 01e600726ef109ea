use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
mode = "segmentation"
seed = 7
precision = "f32"
timesteps = 10

[data]
sizes = { train = 16, val = 4, test = 4 }
generate = true

[data.scene]
height = 8
width = 8
min_shape_size = 2
seed = 3

[e2e.model]
base_channels = 4
channel_mults = [1, 2]
groups = 2

[e2e.train]
steps = 4
batch_size = 4
eval_every = 2

[denoiser.model]
base_channels = 4
channel_mults = [1, 2]
groups = 2
time_embed_dim = 8

[denoiser.train]
steps = 4
batch_size = 4
eval_every = 2

[eval]
sample_batch = 3
"#;

fn rsddpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsddpm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// train-e2e then train-diffusion into `out`; returns the two checkpoint paths.
fn train_both(cfg: &Path, out: &Path) -> (PathBuf, PathBuf) {
    let o = rsddpm(&["train-e2e", "--config", s(cfg), "--out", s(out)]);
    assert!(o.status.success(), "{}", text(&o));
    let e2e = out.join("e2e.ckpt");
    let o = rsddpm(&["train-diffusion", "--config", s(cfg), "--out", s(out), "--ckpt", s(&e2e)]);
    assert!(o.status.success(), "{}", text(&o));
    (e2e, out.join("denoiser.ckpt"))
}

#[test]
fn verify_passes_with_named_checks() {
    let o = rsddpm(&["verify"]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(0), "{t}");
    let passes = t.lines().filter(|l| l.starts_with("[PASS]")).count();
    assert!(passes >= 10, "{t}");
    assert!(t.contains("measured") && t.contains("tolerance"));
}

#[cfg(debug_assertions)]
#[test]
fn verify_catches_injected_alpha_for_alpha_bar() {
    let o = rsddpm(&["verify", "--inject-mutation", "alpha-for-alpha-bar"]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(1), "{t}");
    let line = t.lines().find(|l| l.contains("posterior_mean_identity")).unwrap();
    assert!(line.starts_with("[FAIL]"), "{line}");
}

#[test]
fn unknown_config_key_is_a_usage_error_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &TINY.replace("timesteps = 10", "timesteps = 10\ntimestep = 3"));
    let o = rsddpm(&["train-e2e", "--config", s(&cfg), "--out", s(dir.path())]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(2), "{t}");
    assert!(t.contains("timestep") && t.contains("line"), "{t}");
}

#[test]
fn missing_dataset_path_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &TINY.replace("generate = true", "generate = false"));
    let o = rsddpm(&["train-e2e", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("data.path"));
}

#[test]
fn bad_usage_exits_with_two() {
    assert_eq!(rsddpm(&["no-such-verb"]).status.code(), Some(2));
    assert_eq!(rsddpm(&["eval", "--seed", "abc"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_rsddpm"))
        .arg("verify")
        .env("RSDDPM_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn segmentation_diffusion_requires_end_to_end_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let o = rsddpm(&["train-diffusion", "--config", s(&cfg), "--out", s(dir.path())]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(2), "{t}");
    assert!(t.contains("end-to-end"), "{t}");
}

#[test]
fn restoration_trains_without_end_to_end_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY.replace("mode = \"segmentation\"", "mode = \"restoration\"");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let o = rsddpm(&["train-diffusion", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", text(&o));
    let o = rsddpm(&[
        "eval",
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
        "--ckpt",
        s(&dir.path().join("denoiser.ckpt")),
    ]);
    let t = text(&o);
    assert!(o.status.success(), "{t}");
    assert!(t.contains("input,test,") && t.contains("ensemble,test,"), "{t}");
}

#[test]
fn training_log_is_monotone_finite_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    train_both(&cfg, dir.path());
    for log in ["e2e_train.jsonl", "diffusion_train.jsonl"] {
        let body = fs::read_to_string(dir.path().join(log)).unwrap();
        let mut last = 0;
        for line in body.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let step = v["step"].as_u64().unwrap();
            assert!(step > last);
            last = step;
            assert!(v["loss"].as_f64().unwrap().is_finite());
            assert!(v["wall_time"].as_f64().is_some());
            assert_eq!(v["seed"].as_u64(), Some(7));
        }
        assert_eq!(last, 4);
    }
}

#[test]
fn full_pipeline_is_consistent_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (e2e_a, den_a) = train_both(&cfg, &a);
    let (e2e_b, den_b) = train_both(&cfg, &b);
    assert_eq!(fs::read(&e2e_a).unwrap(), fs::read(&e2e_b).unwrap());
    assert_eq!(fs::read(&den_a).unwrap(), fs::read(&den_b).unwrap());

    for out in [&a, &b] {
        let o = rsddpm(&["infer", "--config", s(&cfg), "--out", s(out), "--ckpt", s(&e2e_a), "--ckpt", s(&den_a)]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let names = |d: &Path| {
        let mut v: Vec<String> = fs::read_dir(d.join("images"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    let files = names(&a);
    assert_eq!(files, names(&b));
    // 4 test inputs, 5 tensors each, as raw dumps and PGM previews.
    assert_eq!(files.iter().filter(|f| f.ends_with("_combined.rst")).count(), 4);
    assert_eq!(files.len(), 4 * 5 * 2);
    for f in &files {
        assert_eq!(fs::read(a.join("images").join(f)).unwrap(), fs::read(b.join("images").join(f)).unwrap());
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("infer.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"].as_u64(), Some(7));

    // The combined dump is the midpoint of the two learners' dumps.
    let read = |p: PathBuf| -> Vec<f32> {
        let bytes = fs::read(p).unwrap();
        let n = bytes.len();
        bytes[n - 8 * 8 * 4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    for f in files.iter().filter(|f| f.ends_with("_combined.rst")) {
        let stem = f.trim_end_matches("_combined.rst");
        let c = read(a.join("images").join(f));
        let xh = read(a.join("images").join(format!("{stem}_x_hat.rst")));
        let xb = read(a.join("images").join(format!("{stem}_x_bar.rst")));
        for i in 0..c.len() {
            assert!((c[i] - 0.5 * (xh[i] + xb[i])).abs() <= 1e-6);
        }
    }

    let o = rsddpm(&["eval", "--config", s(&cfg), "--out", s(&a), "--ckpt", s(&e2e_a), "--ckpt", s(&den_a)]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,split,iou,dice,mse,psnr,n_images");
    assert_eq!(lines.len(), 4);
    for (line, method) in lines[1..].iter().zip(["e2e", "diffusion", "ensemble"]) {
        assert!(line.starts_with(&format!("{method},test,")), "{line}");
        let mse: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!(mse.is_finite());
    }
    let per = fs::read_to_string(a.join("metrics_per_image.csv")).unwrap();
    assert_eq!(per.lines().count(), 1 + 3 * 4);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["seed"].as_u64(), Some(7));
}

#[test]
fn corrupted_or_mismatched_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let o = rsddpm(&["train-e2e", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", text(&o));
    let ck = dir.path().join("e2e.ckpt");

    let f64_cfg = write_config(dir.path(), "d.toml", &TINY.replace("precision = \"f32\"", "precision = \"f64\""));
    let o = rsddpm(&["train-diffusion", "--config", s(&f64_cfg), "--out", s(dir.path()), "--ckpt", s(&ck)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("precision mismatch"), "{}", text(&o));

    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let o = rsddpm(&["train-diffusion", "--config", s(&cfg), "--out", s(dir.path()), "--ckpt", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("digest"), "{}", text(&o));
}

#[test]
fn saved_dataset_can_replace_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let data = dir.path().join("data");
    let o = rsddpm(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(o.status.success(), "{}", text(&o));
    let body = TINY.replace(
        "generate = true",
        &format!("generate = false\npath = {:?}", data.to_str().unwrap()),
    );
    let from_disk = write_config(dir.path(), "disk.toml", &body);
    let x = dir.path().join("x");
    let y = dir.path().join("y");
    let o = rsddpm(&["train-e2e", "--config", s(&cfg), "--out", s(&x)]);
    assert!(o.status.success(), "{}", text(&o));
    let o = rsddpm(&["train-e2e", "--config", s(&from_disk), "--out", s(&y)]);
    assert!(o.status.success(), "{}", text(&o));
    // Same weights; only the embedded config text differs.
    let load = |p: PathBuf| resddpm_ckpt_params(&fs::read(p).unwrap());
    assert_eq!(load(x.join("e2e.ckpt")), load(y.join("e2e.ckpt")));
}

/// Parameter payload of a checkpoint: everything after the model record.
fn resddpm_ckpt_params(bytes: &[u8]) -> Vec<u8> {
    let mut pos = 8 + 2;
    let skip_str = |pos: &mut usize| {
        let n = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
        *pos += 4 + n;
    };
    skip_str(&mut pos);
    pos += 8;
    skip_str(&mut pos);
    skip_str(&mut pos);
    bytes[pos..bytes.len() - 32].to_vec()
}
