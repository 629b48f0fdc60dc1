use std::fs;
use std::path::Path;
use std::process::Command;

use protomatch_core::features::{
    save_features, save_manifest, save_tokens, CandidateEntry, Manifest, ManifestEntry,
};
use protomatch_core::{BBox, FeatureMap, GridSpec, TokenEmbeddings};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_protomatch"));
    c.env_remove("PROTOMATCH_SEED");
    c
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, n_test: usize) {
    let (code, _, err) = run(&[
        "synth",
        "--preset",
        "desk",
        "--n",
        &n.to_string(),
        "--n-test",
        &n_test.to_string(),
        "--out",
        p(dir),
    ]);
    assert_eq!(code, 0, "{err}");
}

/// Three examples on a 2x2 grid of 20 px patches whose evidence boxes give
/// IoU 0.6, 0.4 and 0.55 against patch 0.
fn vlas_fixture(dir: &Path) {
    let grid = GridSpec::from_patches(2, 2, 20).unwrap();
    let f = FeatureMap::new(
        ndarray::Array1::zeros(2),
        ndarray::Array2::from_shape_fn((4, 2), |(i, j)| (i + j + 1) as f32),
        grid,
    )
    .unwrap();
    save_features(&f, dir.join("f.pvf")).unwrap();
    let q = TokenEmbeddings::new(ndarray::Array2::from_elem((1, 2), 1.0)).unwrap();
    save_tokens(&q, dir.join("q.pvt")).unwrap();
    let heights = [12, 8, 11];
    let examples = heights
        .iter()
        .enumerate()
        .map(|(i, h)| ManifestEntry {
            qa_id: Some(format!("q{i}")),
            image_id: "img".into(),
            features_path: "f.pvf".into(),
            question_path: "q.pvt".into(),
            candidates: vec![CandidateEntry::Coord {
                bbox: BBox::new(0, 0, 20, 20).unwrap(),
            }],
            correct_index: 0,
            evidence_box: Some(BBox::new(0, 0, 20, *h).unwrap()),
        })
        .collect();
    save_manifest(
        &Manifest {
            box_convention: None,
            examples,
        },
        dir.join("m.json"),
    )
    .unwrap();
    fs::create_dir_all(dir.join("matches")).unwrap();
    for i in 0..3 {
        fs::write(
            dir.join(format!("matches/q{i}.json")),
            r#"[{"prototype":0,"score":0.9,"selections":[{"t":0,"patch":0,"subpatch":0,"sim":0.9}]}]"#,
        )
        .unwrap();
    }
}

#[test]
fn vlas_three_example_fixture() {
    let dir = tempfile::tempdir().unwrap();
    vlas_fixture(dir.path());
    let out = dir.path().join("report.json");
    let (code, _, err) = run(&[
        "vlas",
        "--manifest",
        p(&dir.path().join("m.json")),
        "--matches",
        p(&dir.path().join("matches")),
        "--theta",
        "0.5",
        "--vlas-k",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["hits"], 2);
    assert_eq!(v["n_qa"], 3);
    assert_eq!(v["score"].as_f64().unwrap(), 2.0 / 3.0);
    assert_eq!(v["k_semantics"], "top_k_patches");
    let ious: Vec<f64> = v["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["iou"].as_f64().unwrap())
        .collect();
    assert_eq!(ious, vec![0.6, 0.4, 0.55]);
}

#[test]
fn match_output_is_valid_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 3, 0);
    let feats = dir.path().join("features/train_0000.pvf");
    let question = dir.path().join("questions/train_0000.pvt");
    let mut outputs = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = dir.path().join(name);
        let (code, _, err) = run(&[
            "match",
            "--preset",
            "desk",
            "--features",
            p(&feats),
            "--question",
            p(&question),
            "--out",
            p(&out),
        ]);
        assert_eq!(code, 0, "{err}");
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let v: serde_json::Value = serde_json::from_slice(&outputs[0]).unwrap();
    let protos = v.as_array().unwrap();
    assert_eq!(protos.len(), 4);
    for (i, m) in protos.iter().enumerate() {
        assert_eq!(m["prototype"], i);
        assert!(m["score"].is_f64());
        for (t, s) in m["selections"].as_array().unwrap().iter().enumerate() {
            assert_eq!(s["t"], t);
            assert!(s["patch"].as_u64().unwrap() < 64);
            assert!(s["subpatch"].as_u64().unwrap() < 3);
            assert!(s["sim"].is_f64());
        }
    }

    // the top selection of every prototype is a planted patch
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("synth_report.json")).unwrap()).unwrap();
    let planted: Vec<u64> = report["train"]["records"][0]["planted"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .collect();
    for m in protos {
        assert!(planted.contains(&m["selections"][0]["patch"].as_u64().unwrap()));
    }
}

#[test]
fn match_then_vlas_reproduces_generator_hit_rate() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 0, 30);
    let m = dir.path().join("test.json");
    let matches = dir.path().join("matches");
    let (code, _, err) = run(&[
        "match",
        "--preset",
        "desk",
        "--manifest",
        p(&m),
        "--out",
        p(&matches),
    ]);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("synth_report.json")).unwrap()).unwrap();
    for k in ["1", "3"] {
        let out = dir.path().join(format!("vlas{k}.json"));
        let (code, _, err) = run(&[
            "vlas",
            "--preset",
            "desk",
            "--manifest",
            p(&m),
            "--matches",
            p(&matches),
            "--vlas-k",
            k,
            "--out",
            p(&out),
        ]);
        assert_eq!(code, 0, "{err}");
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
        let key = if k == "1" { "hits_at_1" } else { "hits_at_k" };
        assert_eq!(v["hits"], report["test"][key], "K={k}");
    }
}

#[test]
fn explain_draws_one_plus_k_rects() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 0);
    for top in [1, 3] {
        let out = dir.path().join(format!("e{top}.svg"));
        let (code, _, err) = run(&[
            "explain",
            "--preset",
            "desk",
            "--manifest",
            p(&dir.path().join("train.json")),
            "--index",
            "1",
            "--top",
            &top.to_string(),
            "--out",
            p(&out),
        ]);
        assert_eq!(code, 0, "{err}");
        let svg = fs::read_to_string(&out).unwrap();
        assert!(svg.starts_with("<svg ") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect ").count(), 1 + top);
        assert_eq!(svg.matches("/>").count(), 1 + top);
        let side: serde_json::Value =
            serde_json::from_slice(&fs::read(out.with_extension("json")).unwrap()).unwrap();
        assert_eq!(side["qa_id"], "train_0001");
        assert_eq!(side["patches"].as_array().unwrap().len(), top);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // infeasible: 2 patches cannot host 3 sub-patches
    let f = FeatureMap::new(
        ndarray::Array1::zeros(2),
        ndarray::Array2::from_elem((2, 2), 1.0),
        GridSpec::from_patches(1, 2, 16).unwrap(),
    )
    .unwrap();
    save_features(&f, d.join("small.pvf")).unwrap();
    let q = TokenEmbeddings::new(ndarray::Array2::from_elem((2, 3), 1.0)).unwrap();
    save_tokens(&q, d.join("q.pvt")).unwrap();
    let (code, _, _) = run(&[
        "match",
        "--m",
        "1",
        "--k",
        "3",
        "--features",
        p(&d.join("small.pvf")),
        "--question",
        p(&d.join("q.pvt")),
        "--out",
        p(&d.join("o.json")),
    ]);
    assert_eq!(code, 3);

    fs::write(d.join("garbage.pvf"), b"PVF1\x01\x00").unwrap();
    let (code, _, err) = run(&[
        "match",
        "--features",
        p(&d.join("garbage.pvf")),
        "--question",
        p(&d.join("q.pvt")),
        "--out",
        p(&d.join("o.json")),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("format error"), "{err}");

    fs::write(d.join("bad.json"), "{\"examples\": [{\"image_id\": 3}]}").unwrap();
    let (code, _, _) = run(&["eval", "--manifest", p(&d.join("bad.json"))]);
    assert_eq!(code, 2);

    let (code, _, _) = run(&[
        "vlas",
        "--manifest",
        p(&d.join("bad.json")),
        "--theta",
        "2",
        "--out",
        "x",
    ]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["bench", "--grid", "10x10x3"]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["no-such-command"]);
    assert_eq!(code, 2);
    assert!(!d.join("o.json").exists());
}

#[test]
fn synth_zero_examples_gives_empty_manifests() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 0, 0);
    for name in ["train.json", "test.json"] {
        let m = protomatch_core::features::load_manifest(dir.path().join(name)).unwrap();
        assert!(m.examples.is_empty());
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn seed_flag_env_and_config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let go = |out: &str, seed_flag: Option<&str>, env: Option<&str>, config: Option<&str>| {
        let mut c = bin();
        c.args([
            "synth",
            "--preset",
            "desk",
            "--n",
            "2",
            "--n-test",
            "0",
            "--out",
            p(&d.join(out)),
        ]);
        if let Some(s) = seed_flag {
            c.args(["--seed", s]);
        }
        if let Some(cfg) = config {
            c.args(["--config", cfg]);
        }
        if let Some(e) = env {
            c.env("PROTOMATCH_SEED", e);
        }
        assert!(c.output().unwrap().status.success());
        tree(&d.join(out))
    };
    let default = go("a", None, None, None);
    assert_eq!(default, go("b", Some("42"), None, None));
    assert_eq!(
        go("c", None, Some("7"), None),
        go("d", Some("7"), None, None)
    );
    assert_ne!(default, go("e", Some("7"), None, None));
    assert_eq!(
        go("f", None, None, Some(r#"{"seed": 7}"#)),
        go("g", Some("7"), None, None)
    );
    // a flag beats the config file
    assert_eq!(go("h", Some("42"), None, Some(r#"{"seed": 7}"#)), default);
}
