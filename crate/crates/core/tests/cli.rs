use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use stylestego::data::{save_png, toy_content, toy_style};

const TINY: &str = "\
crop_size = 32
msg_len = 8
batch = 1
save_every = 1
base_width = 2
secret_channels = 2
head_width = 2
extractor_width = 2
disc_width = 2
disc_layers = 2
res_blocks = 1
reduction = 2
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (content, style) = (dir.path().join("content"), dir.path().join("style"));
        fs::create_dir_all(&content).unwrap();
        fs::create_dir_all(&style).unwrap();
        for i in 0..3 {
            save_png(&content.join(format!("c{i}.png")), &toy_content(i, 40)).unwrap();
        }
        save_png(&style.join("s0.png"), &toy_style(0, 40)).unwrap();
        let conf = format!("{TINY}content_dir = {}\nstyle_dir = {}\n", content.display(), style.display());
        fs::write(dir.path().join("tiny.conf"), conf).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_stylestego")).args(args).current_dir(self.dir.path()).output().unwrap()
    }

    /// Trains `iterations` steps into `out/` and returns the final checkpoint.
    fn train(&self, out: &str, iterations: u64) -> PathBuf {
        let o = self.run(&["--config", "tiny.conf", "train", "--out", out, "--iterations", &iterations.to_string()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        self.path(out).join("final.ckpt")
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_error(o: &Output, code: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<_> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error[{code}]: ")), "{err}");
}

fn content_image(ws: &Workspace) -> String {
    let p = ws.path("probe.png");
    save_png(&p, &toy_content(50, 32)).unwrap();
    p.display().to_string()
}

#[test]
fn train_one_iteration_writes_one_row() {
    let ws = Workspace::new();
    let o = ws.run(&["--config", "tiny.conf", "--seed", "3", "train", "--out", "run", "--iterations", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("# resolved config") && out.contains("seed = 3") && out.contains("iterations = 1"), "{out}");
    let csv = fs::read_to_string(ws.path("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(ws.path("run/final.ckpt").exists());
    assert!(fs::read_to_string(ws.path("run/config.txt")).unwrap().contains("seed = 3"));
}

#[test]
fn usage_errors_exit_two() {
    let ws = Workspace::new();
    let o = ws.run(&["train", "--out", "x", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_error(&o, "usage");
    let o = ws.run(&["--config", "tiny.conf", "train", "--out", "x", "--set", "warp_speed=9"]);
    assert_eq!(o.status.code(), Some(1));
    assert_error(&o, "config");
    let o = ws.run(&["--config", "missing.conf", "train", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn embed_extract_contract() {
    let ws = Workspace::new();
    let ckpt = ws.train("run", 2);
    let ckpt = ckpt.to_str().unwrap();
    let content = content_image(&ws);
    fs::write(ws.path("msg.txt"), "10110010\n").unwrap();

    let embed = |out: &str, msg: &str| ws.run(&["embed", "--checkpoint", ckpt, "--content", &content, "--message", msg, "--key", "7", "--out", out]);
    let o = embed("a.png", "msg.txt");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("capacity 8 bits") && stdout(&o).contains("payload 8 bits"));
    assert!(embed("b.png", "msg.txt").status.success());
    assert_eq!(fs::read(ws.path("a.png")).unwrap(), fs::read(ws.path("b.png")).unwrap());

    assert_error(&embed("a.jpg", "msg.txt"), "image");
    assert!(!ws.path("a.jpg").exists());
    fs::write(ws.path("empty.txt"), "\n").unwrap();
    assert_error(&embed("e.png", "empty.txt"), "message");
    fs::write(ws.path("long.txt"), "101100101").unwrap();
    let o = embed("l.png", "long.txt");
    assert_error(&o, "capacity");
    assert!(stderr(&o).contains('8'));

    let extract = |stego: &str, key: &str, out: &str, fmt: &str| {
        ws.run(&["extract", "--checkpoint", ckpt, "--stego", stego, "--key", key, "--len", "8", "--out", out, "--format", fmt])
    };
    assert!(extract("a.png", "7", "x1.txt", "bits").status.success());
    assert!(extract("a.png", "7", "x2.txt", "bits").status.success());
    let bits = fs::read_to_string(ws.path("x1.txt")).unwrap();
    assert_eq!(bits, fs::read_to_string(ws.path("x2.txt")).unwrap());
    assert_eq!(bits.trim().len(), 8);
    assert!(bits.trim().chars().all(|c| c == '0' || c == '1'));
    assert!(extract("a.png", "7", "x3.txt", "hex").status.success());
    assert!(fs::read_to_string(ws.path("x3.txt")).unwrap().starts_with("hex:"));

    let png = fs::read(ws.path("a.png")).unwrap();
    fs::write(ws.path("cut.png"), &png[..png.len() / 2]).unwrap();
    assert_error(&extract("cut.png", "7", "x4.txt", "bits"), "image");
    save_png(&ws.path("odd.png"), &toy_content(1, 40)).unwrap();
    assert_error(&extract("odd.png", "7", "x5.txt", "bits"), "shape");
    let o = ws.run(&["extract", "--checkpoint", ckpt, "--stego", "a.png", "--len", "0", "--out", "z.txt"]);
    assert_error(&o, "message");
}

#[test]
fn eval_scenarios_need_enough_checkpoints() {
    let ws = Workspace::new();
    let ckpt = ws.train("run", 2);
    let ckpt = ckpt.to_str().unwrap();
    let o = ws.run(&["eval", "--checkpoint", ckpt, "--scenario", "ignorant"]);
    assert_error(&o, "evaluation");
    let o = ws.run(&["eval", "--checkpoint", ckpt, "--scenario", "sideways"]);
    assert!(!o.status.success());

    let step1 = ws.path("run/step_1.ckpt");
    let o = ws.run(&[
        "eval", "--checkpoint", step1.to_str().unwrap(), "--checkpoint", ckpt, "--trials", "3", "--report", "r.json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("r.json")).unwrap()).unwrap();
    assert_eq!(report["bit_accuracy"]["trials"], 3);
    assert!(report["divergence"].as_f64().unwrap() > 0.0);
}

#[test]
fn ablate_emits_three_rows() {
    let ws = Workspace::new();
    let o = ws.run(&["--config", "tiny.conf", "ablate", "--seeds", "0", "--iterations", "1", "--trials", "2", "--report", "a.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("a.json")).unwrap()).unwrap();
    let rows = report["ablation"].as_array().unwrap();
    let names: Vec<_> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["attention-only", "filters-only", "both"]);
    for name in names {
        assert!(stdout(&o).contains(name));
    }
}
