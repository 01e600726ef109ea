//! The configuration files shipped at the workspace root describe exactly
//! the built-in benchmark runs, and the archived reference results agree
//! with their checkpoints.

use std::path::Path;

use resddpm::config::RunConfig;

fn shipped(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap()
}

#[test]
fn segmentation_file_matches_default() {
    assert_eq!(shipped("segmentation.toml"), RunConfig::segmentation_default());
}

#[test]
fn restoration_file_matches_default() {
    assert_eq!(shipped("restoration.toml"), RunConfig::restoration_default());
}

fn results() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../results")
}

fn reference(run: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(results().join(format!("{run}_reference.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn shipped_checkpoints_verify_and_match_recorded_digests() {
    use resddpm::io::Checkpoint;
    for (run, files) in [
        ("segmentation", &["e2e", "denoiser"][..]),
        ("restoration", &["denoiser"][..]),
    ] {
        let v = reference(run);
        for f in files {
            let ck = Checkpoint::<f32>::load(&results().join(run).join(format!("{f}.ckpt"))).unwrap();
            assert_eq!(hex::encode(ck.digest()), v[format!("{f}_digest")].as_str().unwrap(), "{run}/{f}");
            assert_eq!(ck.timesteps, 1000);
        }
    }
}

#[test]
fn shipped_reference_metrics_show_the_ensemble_gain() {
    let seg = reference("segmentation");
    let (e2e, ens) = (&seg["metrics"]["e2e"], &seg["metrics"]["ensemble"]);
    assert!(ens["iou"].as_f64().unwrap() >= e2e["iou"].as_f64().unwrap());
    assert!(ens["mse"].as_f64().unwrap() <= e2e["mse"].as_f64().unwrap());
    let res = reference("restoration");
    assert!(res["metrics"]["ensemble"]["mse"].as_f64().unwrap() < res["metrics"]["input"]["mse"].as_f64().unwrap());
}
