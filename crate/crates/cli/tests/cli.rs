use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_featgraft"))
}

fn scenes() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn generate_writes_artifacts_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scenes().join("template.json");
    let pet = scenes().join("pet.json");
    let args = |out: &Path| {
        vec![
            "generate".to_string(),
            "--scene".into(),
            scene.display().to_string(),
            "--ref".into(),
            format!("{}:pet", pet.display()),
            "--steps".into(),
            "6".into(),
            "--seed".into(),
            "4".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut first = args(&a);
    first.extend(["--dump-stages".into(), "--record-dir".into(), dir.path().join("traj").display().to_string()]);
    let out = bin().args(&first).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&bin().args(args(&b)).output().unwrap()), 0);

    for name in ["generated.png", "collage.png", "report.json", "stage01_erased_pet.png"] {
        assert!(a.join(name).exists(), "{name}");
    }
    assert!(dir.path().join("traj/manifest.json").exists());
    assert_eq!(
        std::fs::read(a.join("generated.png")).unwrap(),
        std::fs::read(b.join("generated.png")).unwrap()
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["invert_calls"], 1);
    assert_eq!(report["retained_popcounts"].as_array().unwrap().len(), 6 * 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    for bad in [
        vec!["generate", "--demo", "1", "--tau", "1.5", "--out", out],
        vec!["generate", "--demo", "1", "--omega", "2", "--out", out],
        vec!["generate", "--demo", "1", "--steps", "0", "--out", out],
        vec!["generate", "--demo", "1", "--variant", "nope", "--out", out],
        vec!["generate", "--out", out],
    ] {
        let o = run(&bad);
        assert_eq!(code(&o), 2, "{bad:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn stage_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scenes().join("template.json");
    let pet = format!("{}:ghost", scenes().join("pet.json").display());
    let out = dir.path().join("o");
    let o = run(&[
        "generate",
        "--scene",
        scene.to_str().unwrap(),
        "--ref",
        &pet,
        "--steps",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ghost"));
}

#[test]
fn sweep_viz_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("tau.csv");
    let o = run(&[
        "sweep", "--demo", "2", "--steps", "4", "--axis", "tau", "--values=-1,0.2,0.99", "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "axis_value,retained_mean,retained_min,align_score,seed");
    assert_eq!(lines.count(), 3);

    let svg = dir.path().join("m.svg");
    let o = run(&["match-viz", "--demo", "2", "--steps", "4", "--step", "3", "--block", "1", "--out", svg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let gen_dir = dir.path().join("g");
    assert_eq!(code(&run(&["generate", "--demo", "2", "--steps", "4", "--out", gen_dir.to_str().unwrap()])), 0);
    let image = gen_dir.join("generated.png");
    let o = run(&["eval", "--demo", "2", "--image", image.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let scores: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let s = scores["subject"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&s));
}
