use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bevloc::bev::BevConfig;
use bevloc::invariants::tiny_model_config;
use bevloc_cli::plot::{self, Layout};

fn bevloc(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bevloc"));
    cmd.args(args).env_remove("BEVLOC_SEED").env("RUST_LOG", "warn");
    if let Some(s) = env_seed {
        cmd.env("BEVLOC_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let o = bevloc(&["eval", "--stepz", "10"], None);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&bevloc(&[], None)), 1);
    assert_eq!(code(&bevloc(&["frobnicate"], None)), 1);
    assert_eq!(code(&bevloc(&["gen-world", "--seed", "abc"], None)), 1);
    // Missing required inputs are usage errors too.
    let o = bevloc(&["eval", "--data", "/no/such/dir"], None);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    for args in [
        &["--help"][..],
        &["eval", "--help"],
        &["plot", "--help"],
        &["--version"],
    ] {
        assert_eq!(code(&bevloc(args, None)), 0, "{args:?}");
    }
    let o = bevloc(&["eval", "--help"], None);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--steps", "--sr-trans", "--sr-yaw", "--config"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

fn world_seed(path: &Path) -> u64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["seed"].as_u64().unwrap()
}

#[test]
fn seed_precedence_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 20, "extent": 80}"#).unwrap();
    for flag in [None, Some("30")] {
        for use_cfg in [false, true] {
            for env in [None, Some("10")] {
                let out = dir.path().join("w.json");
                let mut args = vec!["gen-world", "--out", p(&out)];
                if let Some(f) = flag {
                    args.extend(["--seed", f]);
                }
                if use_cfg {
                    args.extend(["--config", p(&cfg)]);
                }
                let o = bevloc(&args, env);
                assert_eq!(code(&o), 0, "{}", stderr(&o));
                let want = match (flag, use_cfg, env) {
                    (Some(_), _, _) => 30,
                    (None, true, _) => 20,
                    (None, false, Some(_)) => 10,
                    (None, false, None) => 0,
                };
                assert_eq!(world_seed(&out), want, "flag {flag:?} config {use_cfg} env {env:?}");
            }
        }
    }
}

#[test]
fn resolved_settings_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.json");
    let o = Command::new(env!("CARGO_BIN_EXE_bevloc"))
        .args(["gen-world", "--seed", "4", "--out", p(&out)])
        .env_remove("BEVLOC_SEED")
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let log = stderr(&o);
    assert!(log.contains("gen-world settings"), "{log}");
    assert!(log.contains("\"seed\":4") && log.contains("\"extent\":100"), "{log}");
}

#[test]
fn bad_config_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "sead": 2}"#).unwrap();
    let o = bevloc(&["gen-world", "--config", p(&cfg)], None);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("\"sead\""), "{}", stderr(&o));
    fs::write(&cfg, "{not json").unwrap();
    assert_eq!(code(&bevloc(&["gen-world", "--config", p(&cfg)], None)), 1);
    assert_eq!(code(&bevloc(&["gen-world"], Some("minus one"))), 1);
}

fn gen_data(dir: &Path, frames: &str) -> Output {
    bevloc(
        &[
            "gen-data",
            "--out",
            p(dir),
            "--frames",
            frames,
            "--beams",
            "120",
            "--seed",
            "3",
            "--world-seed",
            "5",
        ],
        None,
    )
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&gen_data(&a, "25")), 0);
    assert_eq!(code(&gen_data(&b, "25")), 0);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 25 + 3);
    assert!(fa == fb, "dataset directories differ");
    for name in ["world.json", "meta.json", "poses.csv", "clouds/000024.bin"] {
        assert!(fa.iter().any(|(n, _)| n == Path::new(name)), "{name} missing");
    }
}

fn tiny_model_json(dir: &Path) -> PathBuf {
    let mut cfg = tiny_model_config();
    cfg.bev = BevConfig {
        half_window: 12.8,
        grid_resolution: 0.8,
        ..cfg.bev
    };
    let path = dir.join("model.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn generate_train_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen_data(&data, "24")), 0);

    let bev = dir.path().join("bev");
    let o = bevloc(
        &[
            "make-bev",
            "--data",
            p(&data),
            "--out",
            p(&bev),
            "--output-side",
            "64",
            "--grid-resolution",
            "0.8",
            "--png",
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(bev.join("000000.f32").exists() && bev.join("000023.png").exists());
    assert_eq!(fs::metadata(bev.join("000007.f32")).unwrap().len(), 4 * 64 * 64);

    let model = dir.path().join("m.bvdl");
    let cfg = tiny_model_json(dir.path());
    let o = bevloc(
        &[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&model),
            "--model-config",
            p(&cfg),
            "--epochs",
            "2",
            "--warmup-epochs",
            "1",
            "--batch-size",
            "4",
        ],
        Some("2"),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(model.exists());

    let eval = dir.path().join("eval");
    let o = bevloc(
        &[
            "eval",
            "--checkpoint",
            p(&model),
            "--data",
            p(&data),
            "--steps",
            "10",
            "--out",
            p(&eval),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["frame_count"], 20);
    assert_eq!(report["steps"], 10);
    assert!(report["hz"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(eval.join("per_frame.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "frame_id,x,y,yaw,pred_x,pred_y,pred_yaw,e_t,e_y,success"
    );
    assert_eq!(csv.lines().count(), 21);

    let plots = dir.path().join("plots");
    let o = bevloc(
        &[
            "plot",
            "--per-frame",
            p(&eval.join("per_frame.csv")),
            "--out",
            p(&plots),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["trajectory.svg", "trajectory.png", "yaw_heatmap.svg", "yaw_heatmap.png"] {
        assert!(plots.join(f).exists(), "{f}");
    }
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen_data(&data, "8")), 0);
    let junk = dir.path().join("junk.bvdl");
    fs::write(&junk, b"BVDL but not really").unwrap();
    let o = bevloc(&["eval", "--checkpoint", p(&junk), "--data", p(&data)], None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint error"), "{}", stderr(&o));
    // A world that cannot host the loop corridor.
    let o = bevloc(
        &["gen-world", "--extent=-5", "--out", p(&dir.path().join("w.json"))],
        None,
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn read_png(path: &Path) -> (usize, usize, Vec<u8>) {
    let dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(path).unwrap()));
    let mut r = dec.read_info().unwrap();
    let mut buf = vec![0; r.output_buffer_size().unwrap()];
    let info = r.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width as usize, info.height as usize, buf)
}

#[test]
fn plot_colors_follow_success() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("per_frame.csv");
    // Frame 1: e_t = 1 m, e_y = 1 deg. Frame 2: e_t = 3 m.
    let one = 1f64.to_radians();
    let text = format!(
        "frame_id,x,y,yaw,pred_x,pred_y,pred_yaw,e_t,e_y,success\n\
         0,-40,-40,0,-40,-40,0,0,0,1\n\
         1,0,0,0,1,0,{one},1,1,1\n\
         2,30,10,0,33,10,0,3,0,0\n\
         3,40,40,0,40,40,0,0,0,1\n"
    );
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("plots");
    let o = bevloc(
        &["plot", "--per-frame", p(&csv), "--out", p(&out), "--format", "png"],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!out.join("trajectory.svg").exists());
    let (w, h, px) = read_png(&out.join("trajectory.png"));
    let layout = Layout::fit(&[[-40.0, -40.0], [0.0, 0.0], [30.0, 10.0], [40.0, 40.0]], w, h);
    let at = |p: [f64; 2]| {
        let (x, y) = layout.to_px(p);
        let i = 3 * (y as usize * w + x as usize);
        [px[i], px[i + 1], px[i + 2]]
    };
    assert_eq!(at([0.0, 0.0]), plot::SUCCESS);
    assert_eq!(at([30.0, 10.0]), plot::FAILURE);
}

#[test]
fn selftest_passes() {
    let o = bevloc(&["selftest"], None);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}{}", stderr(&o));
    assert!(out.contains("PASS mfa equivariance"));
    assert!(!out.contains("FAIL"));
}
