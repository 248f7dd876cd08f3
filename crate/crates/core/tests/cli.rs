use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use d2s::io::{read_dataset_dir, read_frame, write_dataset_dir};

const TINY: &str = "
scene.points = 120
scene.dim = 16
frames.train = 6
frames.test = 3
frames.unlabeled = 3
net.layers = 1
net.heads = 2
net.head_hidden = 16
train.batch_size = 2
train.stage1_iters = 12
train.stage2_iters = 4
train.update_iters = 4
ransac.max_iterations = 200
";

fn d2s(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2s")).args(args).output().expect("run d2s")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    (dir, cfg)
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "test", "unlabeled"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(split)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for n in names {
            out.push((n.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&n).unwrap()));
        }
    }
    out
}

#[test]
fn synth_writes_splits_deterministically() {
    let (dir, cfg) = setup("");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = d2s(&["synth", "--config", p(&cfg), "--seed", "5", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read_dataset_dir(&a.join("train")).unwrap().len(), 6);
    assert_eq!(read_dataset_dir(&a.join("test")).unwrap().len(), 3);
    let tree = tree_bytes(&a);
    assert_eq!(tree.len(), 12);
    assert_eq!(tree, tree_bytes(&b));
    for (_, bytes) in tree_bytes(&a).iter().skip(9) {
        let flags = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        assert_eq!(flags & 1, 0);
    }
    assert!(fs::read_to_string(a.join("scene.txt")).unwrap().contains("diameter = "));

    let c = dir.path().join("c");
    d2s(&["synth", "--config", p(&cfg), "--seed", "6", "--out", p(&c)]);
    assert_ne!(tree_bytes(&a), tree_bytes(&c));
}

#[test]
fn default_preset_frame_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = d2s(&["synth", "--out", p(&out)]);
    assert!(o.status.success());
    let count = |s: &str| fs::read_dir(out.join(s)).unwrap().count();
    assert_eq!((count("train"), count("test"), count("unlabeled")), (100, 50, 50));
}

#[test]
fn train_eval_localize_update() {
    let (dir, cfg) = setup("");
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.d2sm");
    let cfg = p(&cfg);
    assert!(d2s(&["synth", "--config", cfg, "--out", p(&data)]).status.success());

    let o = d2s(&["train", p(&data), "--config", cfg, "--seed", "3", "--out", p(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let again = dir.path().join("again.d2sm");
    d2s(&["train", p(&data), "--config", cfg, "--seed", "3", "--out", p(&again)]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    let test = data.join("test");
    let o = d2s(&["eval", p(&ckpt), p(&test), "--config", cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.contains("recall:") && summary.contains("frames: 3"), "{summary}");

    let report = dir.path().join("report");
    let o = d2s(&[
        "eval", p(&ckpt), p(&test), "--config", cfg, "--min-recall", "101", "--no-filter", "--out", p(&report),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_to_string(report.join("records.txt")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(report.join("curve.txt")).unwrap().lines().count(), 102);

    let frame = test.join("frame_00000.d2sf");
    let o = d2s(&["localize", p(&ckpt), p(&frame), "--no-filter", "--config", cfg]);
    if o.status.success() {
        let fields: Vec<f64> = String::from_utf8_lossy(&o.stdout)
            .split_whitespace()
            .map(|x| x.parse().unwrap())
            .collect();
        assert_eq!(fields.len(), 13);
    } else {
        assert_eq!(o.status.code(), Some(1));
    }

    let pseudo = dir.path().join("pseudo");
    write_dataset_dir(&pseudo, &read_dataset_dir(&data.join("train")).unwrap()[..2]).unwrap();
    let updated = dir.path().join("updated.d2sm");
    let o = d2s(&["update", p(&ckpt), p(&data), p(&pseudo), "--config", cfg, "--out", p(&updated)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_ne!(fs::read(&ckpt).unwrap(), fs::read(&updated).unwrap());

    let other = dir.path().join("deeper.cfg");
    fs::write(&other, TINY.replace("net.layers = 1", "net.layers = 2")).unwrap();
    let o = d2s(&["update", p(&ckpt), p(&data), p(&pseudo), "--config", p(&other), "--out", p(&updated)]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("architecture mismatch"), "{err}");
}

#[test]
fn pseudo_label_identity_admits_with_full_count() {
    let (dir, cfg) = setup("scene.unreliable_fraction = 0\n");
    let data = dir.path().join("data");
    assert!(d2s(&["synth", "--config", p(&cfg), "--out", p(&data)]).status.success());
    let train_frame = read_frame(&data.join("train").join("frame_00002.d2sf")).unwrap();
    let k = train_frame.len();
    let unlabeled = dir.path().join("unlabeled");
    write_dataset_dir(&unlabeled, &[train_frame.stripped()]).unwrap();

    let out = dir.path().join("pseudo");
    let o = d2s(&["pseudo-label", p(&data), p(&unlabeled), "--out", p(&out)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("frames_admitted 1"), "{text}");
    assert!(text.contains(&format!("mean_s {k}.00")), "{text}");
    let admitted = read_dataset_dir(&out).unwrap();
    assert_eq!(admitted[0].labels, train_frame.labels);
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup("");
    assert_eq!(d2s(&[]).status.code(), Some(2));
    assert_eq!(d2s(&["synth"]).status.code(), Some(2));
    assert_eq!(d2s(&["eval", "a", "b", "--bogus"]).status.code(), Some(2));
    assert_eq!(d2s(&["--help"]).status.code(), Some(0));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.colour = red\n").unwrap();
    let o = d2s(&["synth", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));

    let missing = dir.path().join("missing.d2sm");
    assert_eq!(d2s(&["localize", p(&missing), p(&missing)]).status.code(), Some(3));

    let data = dir.path().join("data");
    d2s(&["synth", "--config", p(&cfg), "--out", p(&data)]);
    let frame = data.join("test").join("frame_00001.d2sf");
    let mut bytes = fs::read(&frame).unwrap();
    bytes[40] ^= 0x10;
    fs::write(&frame, bytes).unwrap();
    let ckpt = dir.path().join("m.d2sm");
    let o = d2s(&["train", p(&data.join("test")), "--config", p(&cfg), "--out", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at byte"), "{}", String::from_utf8_lossy(&o.stderr));
}
