use std::path::Path;
use std::process::{Command, Output};

use mtglab_core::env::{generate_scene, write_scene, SceneKindTag, SceneSpec};

fn mtglab(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mtglab"));
    cmd.args(args).current_dir(dir);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("MTGLAB_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const TINY: &[&str] = &[
    "--cond-dim", "16", "--latent-dim", "8", "--velocity-dim", "8", "--hidden-dim", "8", "--max-steps", "2",
    "--batch-size", "2",
];

/// Dataset and a briefly trained checkpoint in `dir`.
fn prepared(dir: &Path) {
    let o = mtglab(dir, &["gen-data", "--out", "data.jsonl", "--scenes", "6", "--seed", "2"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut args = vec!["train", "--data", "data.jsonl", "--out", "run"];
    args.extend_from_slice(TINY);
    let o = mtglab(dir, &args, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let help = mtglab(p, &["--help"], &[]);
    assert_eq!(help.status.code(), Some(0));
    for sub in ["gen-data", "train", "eval", "infer", "plot"] {
        assert!(stdout(&help).contains(sub), "help lists {sub}");
    }
    assert_eq!(mtglab(p, &["--version"], &[]).status.code(), Some(0));
    assert_eq!(mtglab(p, &["fly"], &[]).status.code(), Some(2));
    let missing = mtglab(p, &["gen-data"], &[]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("--out"));
    let absent = mtglab(p, &["eval", "--data", "nope.jsonl", "--ground-truth"], &[]);
    assert_eq!(absent.status.code(), Some(1));
    assert!(stderr(&absent).starts_with("error:"));
    let bad_kind = mtglab(p, &["train", "--data", "nope.jsonl", "--out", "x", "--kind", "gan"], &[]);
    assert_ne!(bad_kind.status.code(), Some(0));
}

#[test]
fn flag_beats_environment_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("lab.cfg"), "# defaults\nscenes = 5\nout = data.jsonl\ntrain_fraction = 0.6\n").unwrap();
    let base = ["--config", "lab.cfg", "gen-data"];
    let o = mtglab(p, &base, &[]);
    assert!(stdout(&o).starts_with("wrote 5 scenes (3 train, 2 test)"), "{}", stdout(&o));
    let o = mtglab(p, &base, &[("MTGLAB_SCENES", "4")]);
    assert!(stdout(&o).starts_with("wrote 4 scenes"), "{}", stdout(&o));
    let mut args = base.to_vec();
    args.extend(["--scenes", "6"]);
    let o = mtglab(p, &args, &[("MTGLAB_SCENES", "4")]);
    assert!(stdout(&o).starts_with("wrote 6 scenes"), "{}", stdout(&o));
    let o = mtglab(p, &base, &[("MTGLAB_SCENES", "many")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("MTGLAB_SCENES"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "scenes = 5\nlearning_rate = 0.1\n").unwrap();
    let o = mtglab(dir.path(), &["--config", "bad.cfg", "gen-data", "--out", "d.jsonl"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2") && stderr(&o).contains("learning-rate"), "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoints_and_log() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let run = dir.path().join("run");
    for f in ["model.ckpt", "checkpoint.ckpt", "train.log.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "total", "kl", "coverage", "diversity", "traversability"] {
            assert!(v.get(key).is_some(), "{key} in {line}");
        }
    }
}

#[test]
fn eval_reports_ground_truth_and_models() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let o = mtglab(
        dir.path(),
        &["eval", "--data", "data.jsonl", "--ground-truth", "--ckpt", "run/model.ckpt", "--no-timing", "--out", "r.jsonl"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let file = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = file.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["name"], "ground-truth");
    assert_eq!(rows[0]["r_n"], 0.0);
    assert!((rows[0]["r_c"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(rows.iter().all(|r| r.get("t_ms").is_none()));
    assert!(stdout(&o).starts_with(&file));
    assert!(stdout(&o).contains("run/model.ckpt"));
}

#[test]
fn infer_prints_trajectories_with_confidence() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let o = mtglab(dir.path(), &["infer", "--ckpt", "run/model.ckpt", "--data", "data.jsonl"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["kind"], "mtg");
    let trajs = v["trajectories"].as_array().unwrap();
    assert_eq!(trajs.len(), 6);
    assert!(trajs.iter().all(|t| t.as_array().unwrap().len() == 16));
    let conf = v["confidence"].as_array().unwrap();
    assert_eq!(conf.len(), 6);
    assert!(conf.iter().all(|c| (0.0..=1.0).contains(&c.as_f64().unwrap())));

    let scene = generate_scene(&SceneSpec::sample(SceneKindTag::Junction, 4)).unwrap();
    let file = std::fs::File::create(dir.path().join("j.scene")).unwrap();
    write_scene(file, &scene.grid, &scene.pose, 4).unwrap();
    let o = mtglab(dir.path(), &["infer", "--ckpt", "run/model.ckpt", "--scene", "j.scene"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again = mtglab(dir.path(), &["infer", "--ckpt", "run/model.ckpt", "--scene", "j.scene"], &[]);
    assert_eq!(o.stdout, again.stdout);

    let both = mtglab(dir.path(), &["infer", "--ckpt", "run/model.ckpt", "--scene", "j.scene", "--data", "data.jsonl"], &[]);
    assert_eq!(both.status.code(), Some(2));
    let range = mtglab(dir.path(), &["infer", "--ckpt", "run/model.ckpt", "--data", "data.jsonl", "--index", "99"], &[]);
    assert_eq!(range.status.code(), Some(2));
}

fn stroked_paths(svg: &str, color: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).unwrap();
    doc.descendants()
        .filter(|n| n.has_tag_name("polyline") || n.has_tag_name("path"))
        .filter(|n| n.attribute("stroke") == Some(color) || n.ancestors().any(|a| a.attribute("stroke") == Some(color)))
        .count()
}

#[test]
fn plot_draws_ground_truth_and_generated_layers() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let o = mtglab(
        dir.path(),
        &["plot", "--data", "data.jsonl", "--ckpt", "run/model.ckpt", "--out", "s.svg", "--layers", "grid,gt,generated,beams"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("s.svg")).unwrap();
    assert!(stroked_paths(&svg, "#ffd400") >= 1, "yellow ground truth");
    assert_eq!(stroked_paths(&svg, "#8b3fd9"), 6, "purple generated");
    let doc = roxmltree::Document::parse(&svg).unwrap();
    for id in ["grid", "beams", "ground-truth", "generated"] {
        assert!(doc.descendants().any(|n| n.attribute("id") == Some(id)), "group {id}");
    }

    let o = mtglab(dir.path(), &["plot", "--data", "data.jsonl", "--out", "gt.svg", "--layers", "gt"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("gt.svg")).unwrap();
    assert_eq!(stroked_paths(&svg, "#8b3fd9"), 0);
    assert!(stroked_paths(&svg, "#ffd400") >= 1);

    let o = mtglab(dir.path(), &["plot", "--data", "data.jsonl", "--out", "x.svg", "--layers", "sky"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = mtglab(dir.path(), &["plot", "--data", "data.jsonl", "--out", "x.svg", "--scale", "0"], &[]);
    assert_eq!(o.status.code(), Some(2));
}
