use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vdes_core::synth::{registration_pair, write_cesm_fixture, FixtureSpec};
use vdes_core::{load_image, ImageGrid};

fn vdes(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdes"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&vdes(dir.path(), &[])), 2);
    assert_eq!(code(&vdes(dir.path(), &["no-such-command"])), 2);
    assert_eq!(code(&vdes(dir.path(), &["register", "--bins", "many"])), 2);
}

#[test]
fn domain_errors_exit_one_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = vdes(dir.path(), &["denoise", "--in", "missing.png", "--out", "x.png"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:") && err.contains("missing.png"), "{err}");
    assert!(!dir.path().join("x.png").exists());
}

#[test]
fn version_names_the_model_format() {
    let o = vdes(Path::new("."), &["--version"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("model format 1"));
}

#[test]
fn register_recovers_a_written_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (r, f) = registration_pair(64, (4, 0), 10, 31);
    r.save_png(dir.path().join("ref.png")).unwrap();
    f.save_png(dir.path().join("flo.png")).unwrap();
    let o = vdes(
        dir.path(),
        &["register", "--ref", "ref.png", "--flo", "flo.png", "--out", "t.json", "--aligned", "a.png"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    assert_eq!((v["tx"].as_i64(), v["ty"].as_i64()), (Some(4), Some(0)));
    assert_eq!(load_image(dir.path().join("a.png")).unwrap().dims(), (64, 64));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (r, f) = registration_pair(48, (-2, 3), 8, 5);
    r.save_png(dir.path().join("ref.png")).unwrap();
    f.save_png(dir.path().join("flo.png")).unwrap();
    fs::write(
        dir.path().join("preds.csv"),
        "run_id,sample_id,true_label,pred_label\n0,a,1,1\n0,b,0,1\n1,a,1,1\n1,b,0,0\n",
    )
    .unwrap();
    let mut seen = Vec::new();
    for threads in ["1", "4"] {
        let t = |name: &str| format!("{name}{threads}");
        let steps: [Vec<String>; 3] = [
            ["register", "--ref", "ref.png", "--flo", "flo.png", "--out"].map(String::from).into_iter().chain([t("r.json")]).collect(),
            ["denoise", "--in", "flo.png", "--out"].map(String::from).into_iter().chain([t("d.png")]).collect(),
            ["eval", "--preds", "preds.csv", "--per-run", "--out"].map(String::from).into_iter().chain([t("e.txt")]).collect(),
        ];
        for s in &steps {
            let mut args = vec!["--threads", threads];
            args.extend(s.iter().map(String::as_str));
            assert_eq!(code(&vdes(dir.path(), &args)), 0, "{args:?}");
        }
        seen.push(["r.json", "d.png", "e.txt"].map(|n| fs::read(dir.path().join(t(n))).unwrap()));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn bundled_fixture_matches_its_generator() {
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cesm6");
    let dir = tempfile::tempdir().unwrap();
    let views = write_cesm_fixture(dir.path(), &FixtureSpec::default()).unwrap();
    assert_eq!(views.len() * 2 + 1, fs::read_dir(&bundled).unwrap().count());
    for entry in fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap();
        if path.extension().is_some_and(|e| e == "png") {
            let a: ImageGrid = load_image(&path).unwrap();
            assert_eq!(a, load_image(bundled.join(name)).unwrap(), "{name:?}");
        } else {
            assert_eq!(fs::read(&path).unwrap(), fs::read(bundled.join(name)).unwrap());
        }
    }
}
