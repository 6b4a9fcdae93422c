use std::process::{Command, Output};

fn srgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srgs"))
        .args(args)
        .output()
        .expect("run srgs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&srgs(&["--help"])), 0);
    assert_eq!(code(&srgs(&["train", "--help"])), 0);
    assert_eq!(code(&srgs(&[])), 1);
    assert_eq!(code(&srgs(&["frobnicate"])), 1);
    assert_eq!(code(&srgs(&["eval", "-d", "x"])), 1);
}

#[test]
fn bad_configuration_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let out = out.to_str().unwrap();
    let r = srgs(&["generate", "--set", "dataset.num_views=2", "-o", out]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("num_views"));
    assert_eq!(code(&srgs(&["generate", "--set", "dataset.nonsense=1", "-o", out])), 1);
    assert_eq!(code(&srgs(&["generate", "--set", "no_equals_sign", "-o", out])), 1);

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train\niterations = 5").unwrap();
    assert_eq!(code(&srgs(&["generate", "-c", cfg.to_str().unwrap(), "-o", out])), 1);
    assert!(!dir.path().join("data").exists());
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    let r = srgs(&["train", "-d", &p("nowhere"), "-o", &p("out")]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("nowhere"));

    let data = p("data");
    let args = [
        "generate",
        "--set",
        "dataset.hr_width=44",
        "--set",
        "dataset.hr_height=44",
        "--set",
        "dataset.gaussians=20",
        "-o",
        &data,
    ];
    assert_eq!(code(&srgs(&args)), 0);
    assert_eq!(code(&srgs(&["eval", "-d", &data, "-s", &p("missing.txt")])), 2);
    let gt = format!("{data}/gt_scene.txt");
    let r = srgs(&["eval", "-d", &data, "-s", &gt]);
    assert_eq!(code(&r), 0);
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("arm,"));
    assert_eq!(
        code(&srgs(&[
            "render",
            "-d",
            &data,
            "-s",
            &gt,
            "-o",
            &p("r"),
            "--views",
            "99"
        ])),
        1
    );
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            srgs::harness::ExperimentConfig::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}
