use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfrf::dataio::save_checkpoint;
use dfrf::model::{ModelConfig, ModelState};

fn dfrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfrf"))
        .args(args)
        .env("DFRF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dfrf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "gen-data",
        "--out",
        s(&out),
        "--seed",
        &seed.to_string(),
        "--frames",
        "8",
        "--resolution",
        "16",
        "--condition-dim",
        "4",
    ]);
    out
}

fn listing(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", 3);
    let b = gen(dir.path(), "b", 3);
    let (la, lb) = (listing(&a), listing(&b));
    assert_eq!(la.len(), 1 + 2 * 8);
    assert_eq!(la, lb);
    // regenerating into the same directory gives the same files
    gen(dir.path(), "a", 3);
    assert_eq!(listing(&a), la);
}

#[test]
fn train_finetune_render_eval_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let (s0, s1, s2) = (gen(p, "s0", 0), gen(p, "s1", 1), gen(p, "s2", 2));
    let config = p.join("run.toml");
    fs::write(&config, "model = \"desk\"\n[train]\nrays_per_batch = 16\nsamples_per_ray = 6\nlog_every = 2\n").unwrap();
    let base = p.join("base");
    ok(&[
        "train-base", "--scene", s(&s0), "--scene", s(&s1), "--out", s(&base), "--config", s(&config),
        "--coarse-iters", "3", "--joint-iters", "3", "--seed", "4",
    ]);
    for f in ["checkpoint.dfrf", "coarse.dfrf", "joint.dfrf", "train.jsonl", "config.toml"] {
        assert!(base.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(base.join("train.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let iters: Vec<u64> = records.iter().map(|r| r["iteration"].as_u64().unwrap()).collect();
    assert_eq!(iters, vec![2, 3, 5, 6]);
    for key in ["stage", "l_mse", "l_reg", "total", "wall_ms"] {
        assert!(records[0].get(key).is_some(), "{key}");
    }
    let saved = fs::read_to_string(base.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 4") && saved.contains("coarse_iters = 3"));

    let tuned = p.join("tuned");
    let base_ck = base.join("checkpoint.dfrf");
    let base_bytes = fs::read(&base_ck).unwrap();
    ok(&[
        "finetune", "--checkpoint", s(&base_ck), "--scene", s(&s2), "--out", s(&tuned), "--iters", "2",
        "--clip-frames", "6", "--rays", "16", "--samples", "6",
    ]);
    assert_eq!(fs::read(&base_ck).unwrap(), base_bytes);
    let ck = tuned.join("checkpoint.dfrf");

    let render = |out: &Path| {
        ok(&[
            "render", "--checkpoint", s(&ck), "--scene", s(&s2), "--out", s(out), "--frames", "6-7", "--samples",
            "6", "--chunk", "50",
        ])
    };
    let (r1, r2) = (p.join("r1"), p.join("r2"));
    render(&r1);
    render(&r2);
    let l1 = listing(&r1);
    assert_eq!(l1.iter().map(|(n, _)| n.to_str().unwrap().to_string()).collect::<Vec<_>>(), ["00006.png", "00007.png"]);
    assert_eq!(l1, listing(&r2));

    let table = ok(&["eval", "--scene", s(&s2), "--renders", s(&r1)]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "frame\tpsnr\tssim");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("6\t") && lines[3].starts_with("mean\t"));
    let psnr: f64 = lines[1].split('\t').nth(1).unwrap().parse().unwrap();
    assert!(psnr > 0.0 && psnr < 99.0);

    // driving from an external condition file, two frames from camera 3
    let cond = p.join("drive.txt");
    fs::write(&cond, "0.1 0.2 0.3 0.4\n0.9 0.8 0.7 0.6\n").unwrap();
    let driven = p.join("driven");
    ok(&["render", "--checkpoint", s(&ck), "--scene", s(&s2), "--out", s(&driven), "--conditions", s(&cond), "--camera", "3", "--samples", "6"]);
    assert_eq!(listing(&driven).len(), 2);
}

#[test]
fn zero_density_renders_evaluate_to_the_psnr_cap_against_backgrounds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let scene = gen(p, "scene", 5);
    let ck = p.join("zero.dfrf");
    save_checkpoint(&ModelState::<f32>::init(ModelConfig::desk(4), 0).zero_density(), &ck).unwrap();
    let renders = p.join("renders");
    ok(&["render", "--checkpoint", s(&ck), "--scene", s(&scene), "--out", s(&renders), "--frames", "4,5,7", "--samples", "4"]);
    let table = ok(&["eval", "--scene", s(&scene), "--renders", s(&renders), "--target", "backgrounds", "--out", s(p)]);
    for row in table.lines().skip(1) {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[1], "99.0000", "{row}");
        assert_eq!(cols[2], "1.000000", "{row}");
    }
    assert_eq!(fs::read_to_string(p.join("eval.tsv")).unwrap(), table);
}

#[test]
fn gradcheck_passes_on_fresh_initialization() {
    let out = ok(&["gradcheck"]);
    assert!(out.lines().count() > 6);
    assert!(out.lines().skip(1).all(|l| l.ends_with("\tpass")), "{out}");
}

#[test]
fn exit_codes_and_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(dfrf(&["render", "--bogus"]).status.code(), Some(1));
    assert_eq!(dfrf(&[]).status.code(), Some(1));
    assert_eq!(dfrf(&["--help"]).status.code(), Some(0));

    let out = p.join("out");
    let missing = dfrf(&["train-base", "--scene", s(&p.join("nope")), "--scene", s(&p.join("nope")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing file"));

    let scene = gen(p, "scene", 1);
    let bad = p.join("bad.toml");
    fs::write(&bad, "[train]\nlambda = -1.0\n").unwrap();
    let r = dfrf(&["train-base", "--scene", s(&scene), "--scene", s(&scene), "--out", s(&out), "--config", s(&bad)]);
    assert_eq!(r.status.code(), Some(1));
    let r = dfrf(&["train-base", "--scene", s(&scene), "--out", s(&out), "--coarse-iters", "1", "--joint-iters", "0"]);
    assert_eq!(r.status.code(), Some(2), "a single scene is infeasible");
    assert!(!out.exists() || fs::read_dir(&out).unwrap().next().is_none(), "no partial outputs");

    let garbage = p.join("garbage.dfrf");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let r = dfrf(&["render", "--checkpoint", s(&garbage), "--scene", s(&scene), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bad magic"));

    let r = Command::new(env!("CARGO_BIN_EXE_dfrf")).arg("gradcheck").env("DFRF_THREADS", "zero").output().unwrap();
    assert_eq!(r.status.code(), Some(1));
}
