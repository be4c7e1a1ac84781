use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vipdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vipdet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn generate_train_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("clips");
    let o = vipdet(&["gen-data", "--n", "2", "--seed", "4", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert!(data.join("inpainted/clip_001/mask.pgm").exists());
    assert!(data.join("authentic/clip_000/frame_000.ppm").exists());

    let cfg = write_config(
        tmp.path(),
        &format!("data.dir = {}\noptim.iters = 2\noptim.batch = 2\ntrain.eval_every = 0\n", data.display()),
    );
    let out = tmp.path().join("run");
    let o = vipdet(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let log = fs::read_to_string(out.join("metrics.log")).unwrap();
    assert!(log.starts_with("iter 0 loss "), "{log}");
    assert!(log.contains("eval 2 "));

    let ckpt = out.join("checkpoint.mpck");
    let o = vipdet(&["eval", "--config", &cfg, "--ckpt", ckpt.to_str().unwrap(), "--jpeg", "70"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.starts_with("clip_id miou f1 frame_score"));
    assert!(text.contains("inpainted/clip_001"));
    assert!(text.lines().last().unwrap().starts_with("mean "));

    let o = vipdet(&[
        "freq-dump",
        "--clip",
        data.join("inpainted/clip_000").to_str().unwrap(),
        "--out",
        tmp.path().join("bands").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(tmp.path().join("bands/band_high.ppm").exists());
}

#[test]
fn complexity_presets() {
    let o = vipdet(&["complexity", "--preset", "desk"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("703795"), "{}", stdout(&o));
    assert_eq!(vipdet(&["complexity", "--preset", "huge"]).status.code(), Some(1));
}

#[test]
fn unknown_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "optim.lr_encoderr = 0.1\n");
    let o = vipdet(&["train", "--config", &cfg, "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr_encoderr"));
}

#[test]
fn nan_learning_rate_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "optim.lr_decoder = NaN\noptim.iters = 2\ndata.clips = 1\n");
    let o = vipdet(&["train", "--config", &cfg, "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}

#[test]
fn primitive_gradcheck_passes() {
    let o = vipdet(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
