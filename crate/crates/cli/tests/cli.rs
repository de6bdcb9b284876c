use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridattn::grid::read_gfm;
use gridattn::patch::{write_ppm, RgbImage};
use tempfile::TempDir;

fn gridattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridattn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gridattn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    gridattn(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tissue(rows: usize, cols: usize) -> RgbImage {
    RgbImage::from_fn(rows, cols, |r, c| [(r % 180) as u8, (c % 200) as u8, ((r * c) % 150) as u8])
}

/// A small synthetic dataset with a trained checkpoint and its report.
struct Trained {
    dir: TempDir,
}

impl Trained {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&["synth", "--out-dir", s(&data), "--n-train", "16", "--n-test", "8", "--min-size", "4", "--max-size", "6"]);
        let t = Trained { dir };
        t.train("model.ckpt", "cv.tsv");
        t
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, ckpt: &str, report: &str) -> Output {
        let (manifest, ckpt, report) = (self.path("data/train.tsv"), self.path(ckpt), self.path(report));
        let args = [
            "--threads", "1", "train",
            s(&manifest),
            s(&ckpt),
            s(&report),
            "--epochs", "2", "--batch", "8", "--h", "4", "--folds", "2", "--inits", "1", "--no-augment",
        ];
        let out = gridattn(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

#[test]
fn extract_tiles_the_tissue_bounding_box() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("slide.ppm");
    write_ppm(&tissue(448, 672), &img).unwrap();
    let out = dir.path().join("slide.gfm");
    ok(&["extract", s(&img), s(&out), "--k", "8", "--lowres"]);
    let g = read_gfm(&out).unwrap();
    assert_eq!((g.rows(), g.cols(), g.depth()), (2, 3, 8));
    let low = read_gfm(dir.path().join("slide.4um.gfm")).unwrap();
    assert_eq!((low.rows(), low.cols()), (1, 1));

    let white = dir.path().join("white.ppm");
    write_ppm(&RgbImage::from_fn(224, 224, |_, _| [255, 255, 255]), &white).unwrap();
    assert_eq!(code(&["extract", s(&white), s(&dir.path().join("w.gfm"))]), 2);
}

#[test]
fn train_rejects_bad_configurations() {
    let t = Trained::new();
    let manifest = t.path("data/train.tsv");
    let ckpt = t.path("bad.ckpt");
    let report = t.path("bad.tsv");
    let base = ["train", s(&manifest), s(&ckpt), s(&report), "--epochs", "1"];
    assert_eq!(code(&[&base[..], &["--folds", "1"]].concat()), 2);
    assert_eq!(code(&[&base[..], &["--h", "16"]].concat()), 2);
    assert!(!ckpt.exists());

    let help = ok(&["train", "--help"]);
    for needle in ["default: 35", "default: 64", "0.001", "max,min"] {
        assert!(help.contains(needle), "{needle}");
    }
}

#[test]
fn eval_scores_and_compares() {
    let t = Trained::new();
    let out = ok(&["eval", s(&t.path("data/test.tsv")), s(&t.path("model.ckpt")), "--report", s(&t.path("pred.tsv"))]);
    let mut fields = out.split('\t');
    assert_eq!(fields.next(), Some("auc"));
    let auc: f64 = fields.next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(fs::read_to_string(t.path("pred.tsv")).unwrap().lines().count(), 2 + 8);

    let cv = t.path("cv.tsv");
    assert_eq!(code(&["eval", "--compare", s(&cv), s(&cv)]), 2);

    let reg = t.path("reg");
    ok(&["synth", "--out-dir", s(&reg), "--n-train", "4", "--n-test", "4", "--task", "regression", "--min-size", "4", "--max-size", "5"]);
    assert_eq!(code(&["eval", s(&reg.join("test.tsv")), s(&t.path("model.ckpt"))]), 2);
}

#[test]
fn viz_writes_heat_maps() {
    let t = Trained::new();
    let grid = t.path("data/test/00016.gfm");
    let ckpt = t.path("model.ckpt");
    let pgm = t.path("cam.pgm");
    ok(&["viz", s(&ckpt), s(&grid), s(&pgm), "--gradcam", "--scale", "2"]);
    let g = read_gfm(&grid).unwrap();
    let bytes = fs::read(&pgm).unwrap();
    let header = format!("P5\n{} {}\n255\n", g.cols() * 2, g.rows() * 2);
    assert!(bytes.starts_with(header.as_bytes()));
    assert_eq!(bytes.len(), header.len() + g.grid.cells() * 4);

    ok(&["viz", s(&ckpt), s(&grid), s(&t.path("att.pgm")), "--mode", "min", "--channel", "3"]);
    assert_eq!(code(&["viz", s(&ckpt), s(&grid), s(&t.path("x.pgm")), "--channel", "999"]), 2);
}

#[test]
fn synth_writes_reproducible_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--out-dir", s(&a), "--seed", "4"]);
    ok(&["synth", "--out-dir", s(&b), "--seed", "4"]);
    assert_eq!(fs::read_dir(a.join("train")).unwrap().count(), 200);
    assert_eq!(fs::read_dir(a.join("test")).unwrap().count(), 100);
    for name in ["train.tsv", "test.tsv", "train/00000.gfm", "train/00199.gfm", "test/00250.gfm"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    ok(&["synth", "--out-dir", s(&dir.path().join("c")), "--mu", "0", "--n-train", "4", "--n-test", "2"]);
    assert_eq!(code(&["synth", "--out-dir", s(&dir.path().join("d")), "--mu", "-1"]), 2);
}

#[test]
fn training_is_byte_reproducible() {
    let t = Trained::new();
    t.train("again.ckpt", "again.tsv");
    assert_eq!(fs::read(t.path("model.ckpt")).unwrap(), fs::read(t.path("again.ckpt")).unwrap());
    assert_eq!(fs::read(t.path("cv.tsv")).unwrap(), fs::read(t.path("again.tsv")).unwrap());
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["extract", "pack", "train", "eval", "viz", "synth"] {
        assert!(!ok(&[sub, "--help"]).is_empty());
    }
    assert_eq!(code(&["bogus"]), 2);
}
