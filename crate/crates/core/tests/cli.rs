#![allow(clippy::approx_constant)]

mod common;

use std::fs;

use common::{golden, p, panoafford, vocab_file, write_pft};
use panoafford::numerics::pft;
use panoafford::Tensor;

#[test]
fn golden_forward_output_is_stable() {
    if std::env::var_os("PANOAFFORD_BLESS").is_some() {
        common::bless_golden();
    }
    let g = golden();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.pft");
    let r = panoafford(&[
        "forward",
        "--features",
        p(&g.features),
        "--text",
        p(&g.text),
        "--params",
        p(&g.params),
        "--config",
        p(&g.config),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let got = pft::read(&out).unwrap();
    let want = pft::read(&g.output).unwrap();
    assert_eq!(got.shape(), &[3, 56, 112]);
    assert!(got.max_abs_diff(&want) <= 1e-5);
}

#[test]
fn forward_is_reproducible_and_exports_pgm() {
    let g = golden();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "forward",
            "--features",
            p(&g.features),
            "--text",
            p(&g.text),
            "--config",
            p(&g.config),
            "--out",
            p(&out),
        ];
        args.extend_from_slice(extra);
        let r = panoafford(&args);
        assert_eq!(r.code, 0, "{}", r.stderr);
        fs::read(out).unwrap()
    };
    let pgm = dir.path().join("pgm");
    let saved = dir.path().join("params");
    let a = run("a.pft", &["--pgm", p(&pgm), "--save-params", p(&saved)]);
    let b = run("b.pft", &["--params", p(&saved)]);
    assert_eq!(a, b);
    // parameters initialized from the config seed match the committed ones
    assert_eq!(a, run("c.pft", &["--params", p(&g.params)]));
    let header = fs::read(pgm.join("sit.pgm")).unwrap();
    assert!(header.starts_with(b"P5\n112 56\n255\n"));
}

#[test]
fn forward_shape_mismatch_exits_1_and_missing_params_exits_2() {
    let g = golden();
    let dir = tempfile::tempdir().unwrap();
    let bad = write_pft(&dir.path().join("f.pft"), &Tensor::zeros(&[31, 16]));
    let out = dir.path().join("o.pft");
    let r = panoafford(&[
        "forward",
        "--features",
        p(&bad),
        "--text",
        p(&g.text),
        "--config",
        p(&g.config),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.code, 1);
    let r = panoafford(&[
        "forward",
        "--features",
        p(&g.features),
        "--text",
        p(&g.text),
        "--config",
        p(&g.config),
        "--params",
        p(&dir.path().join("nope")),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.code, 2);
}

fn annotation_file(dir: &std::path::Path, name: &str, json: &str) -> std::path::PathBuf {
    let f = dir.join(name);
    fs::write(&f, json).unwrap();
    f
}

#[test]
fn gen_supervision_contract() {
    let dir = tempfile::tempdir().unwrap();
    let classes = vocab_file(dir.path(), &["grasp", "sit"]);
    let ann = annotation_file(
        dir.path(),
        "a.json",
        r#"{"image":"room","width":40,"height":20,"annotations":[{"affordance":"sit","points":[[37,6]]}]}"#,
    );
    let out = dir.path().join("gt.pft");
    let r = panoafford(&[
        "gen-supervision",
        "--annotations",
        p(&ann),
        "--classes",
        p(&classes),
        "--sigma",
        "2",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let t = pft::read(&out).unwrap();
    assert_eq!(t.shape(), &[2, 20, 40]);
    let sit = Tensor::new(vec![20 * 40], t.row(1).to_vec()).unwrap();
    assert_eq!(sit.argmax(), 6 * 40 + 37);
    assert!(t.row(0).iter().all(|&v| v == 0.0));

    let empty = annotation_file(
        dir.path(),
        "e.json",
        r#"{"image":"e","width":8,"height":4,"annotations":[]}"#,
    );
    let r = panoafford(&[
        "gen-supervision",
        "--annotations",
        p(&empty),
        "--classes",
        p(&classes),
        "--sigma",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.code, 0);
    assert!(r.stderr.contains("no keypoints"));
    assert!(pft::read(&out).unwrap().data().iter().all(|&v| v == 0.0));

    let bad = annotation_file(dir.path(), "b.json", "{not json");
    let r = panoafford(&[
        "gen-supervision",
        "--annotations",
        p(&bad),
        "--classes",
        p(&classes),
        "--sigma",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.code, 2);

    let unknown = annotation_file(
        dir.path(),
        "u.json",
        r#"{"image":"u","width":8,"height":4,"annotations":[{"affordance":"juggle","points":[[1,1]]}]}"#,
    );
    let r = panoafford(&[
        "gen-supervision",
        "--annotations",
        p(&unknown),
        "--classes",
        p(&classes),
        "--sigma",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("juggle"));
}

#[test]
fn eval_contract() {
    let dir = tempfile::tempdir().unwrap();
    let classes = vocab_file(dir.path(), &["grasp", "sit"]);
    let anns = dir.path().join("anns");
    fs::create_dir(&anns).unwrap();
    let preds = dir.path().join("preds");
    fs::create_dir(&preds).unwrap();
    for (id, u, v) in [("r1", 3, 5), ("r2", 30, 10), ("r3", 16, 2)] {
        let f = annotation_file(
            &anns,
            &format!("{id}.json"),
            &format!(
                r#"{{"image":"{id}","width":32,"height":16,"annotations":[{{"affordance":"sit","points":[[{u},{v}]]}},{{"affordance":"grasp","points":[[{},{v}]]}}]}}"#,
                (u + 9) % 32
            ),
        );
        let r = panoafford(&[
            "gen-supervision",
            "--annotations",
            p(&f),
            "--classes",
            p(&classes),
            "--sigma",
            "2",
            "--out",
            p(&preds.join(format!("{id}.pft"))),
        ]);
        assert_eq!(r.code, 0);
    }
    let eval = |report: &str, jobs: &str| {
        let path = dir.path().join(report);
        let r = panoafford(&[
            "eval",
            "--pred",
            p(&preds),
            "--annotations",
            p(&anns),
            "--classes",
            p(&classes),
            "--sigma",
            "2",
            "--report",
            p(&path),
            "--jobs",
            jobs,
        ]);
        (r, path)
    };
    let (r1, j1) = eval("one.json", "1");
    let (r8, j8) = eval("eight.json", "8");
    assert_eq!(r1.code, 0, "{}", r1.stderr);
    assert_eq!(r8.code, 0);
    assert_eq!(fs::read(&j1).unwrap(), fs::read(&j8).unwrap());
    assert_eq!(
        fs::read(j1.with_extension("csv")).unwrap(),
        fs::read(j8.with_extension("csv")).unwrap()
    );
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&j1).unwrap()).unwrap();
    assert!(report["overall"]["sim"].as_f64().unwrap() >= 0.999);
    assert_eq!(report["per_image"].as_array().unwrap().len(), 6);

    fs::remove_file(preds.join("r2.pft")).unwrap();
    let (r, path) = eval("missing.json", "2");
    assert_eq!(r.code, 1);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    assert_eq!(report["skipped"][0]["image_id"], "r2");

    let empty = dir.path().join("none");
    fs::create_dir(&empty).unwrap();
    let r = panoafford(&[
        "eval",
        "--pred",
        p(&empty),
        "--annotations",
        p(&anns),
        "--classes",
        p(&classes),
        "--sigma",
        "2",
        "--report",
        p(&dir.path().join("empty.json")),
    ]);
    assert_eq!(r.code, 1);
}

#[test]
fn demo_train_contract() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    let r = panoafford(&["demo-train", "--steps", "0", "--trace", p(&trace)]);
    assert_eq!(r.code, 0);
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 2);
    let r = panoafford(&["demo-train", "--weights", "1,oops,0"]);
    assert_eq!(r.code, 1);
    let r = panoafford(&["demo-train", "--weights", "1,1"]);
    assert_eq!(r.code, 1);
    let out = dir.path().join("logits.pft");
    let r = panoafford(&["demo-train", "--steps", "20", "--out", p(&out)]);
    assert_eq!(r.code, 0);
    assert_eq!(pft::read(&out).unwrap().shape(), &[32, 64]);
}

#[test]
fn inspect_affinity_contract() {
    let dir = tempfile::tempdir().unwrap();
    let feats = write_pft(
        &dir.path().join("f.pft"),
        &Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.7071, 0.7071]]).unwrap(),
    );
    let acts = write_pft(
        &dir.path().join("a.pft"),
        &Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap(),
    );
    let out = dir.path().join("r.pft");
    let aff = dir.path().join("s.pft");
    let r = panoafford(&[
        "inspect-affinity",
        "--features",
        p(&feats),
        "--topk",
        "1",
        "--class-activations",
        p(&acts),
        "--out",
        p(&out),
        "--affinity-out",
        p(&aff),
        "--no-clamp",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.stdout.trim(), r#"{"seeds":[[2]]}"#);
    let refined = pft::read(&out).unwrap();
    for (g, w) in refined.data().iter().zip([1.2733, 2.2733, 3.3864]) {
        assert!((g - w).abs() <= 1e-4);
    }

    let eye = write_pft(&dir.path().join("eye.pft"), &Tensor::eye(3));
    let r = panoafford(&[
        "inspect-affinity",
        "--features",
        p(&eye),
        "--topk",
        "2",
        "--class-activations",
        p(&acts),
        "--out",
        p(&out),
        "--affinity-out",
        p(&aff),
    ]);
    assert_eq!(r.code, 0);
    assert_eq!(pft::read(&aff).unwrap(), Tensor::eye(3));

    let r = panoafford(&[
        "inspect-affinity",
        "--features",
        p(&eye),
        "--topk",
        "4",
        "--class-activations",
        p(&acts),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.code, 1);
}

#[test]
fn augment_contract() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_pft(
        &dir.path().join("img.pft"),
        &Tensor::from_fn(&[3, 10, 20], |i| (i % 7) as f32),
    );
    let maps = write_pft(
        &dir.path().join("maps.pft"),
        &Tensor::from_fn(&[2, 10, 20], |i| (i % 5) as f32 / 4.0),
    );
    let prefix = |name: &str| format!("{}/{name}_", dir.path().display());
    let r = panoafford(&[
        "augment",
        "--image",
        p(&image),
        "--maps",
        p(&maps),
        "--identity",
        "--out-prefix",
        &prefix("id"),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(
        fs::read(prefix("id") + "image.pft").unwrap(),
        fs::read(&image).unwrap()
    );
    assert_eq!(
        fs::read(prefix("id") + "maps.pft").unwrap(),
        fs::read(&maps).unwrap()
    );

    for run in ["a", "b"] {
        let r = panoafford(&[
            "augment",
            "--image",
            p(&image),
            "--maps",
            p(&maps),
            "--seed",
            "42",
            "--out-prefix",
            &prefix(run),
        ]);
        assert_eq!(r.code, 0);
    }
    for f in ["image.pft", "maps.pft", "params.json"] {
        assert_eq!(
            fs::read(prefix("a") + f).unwrap(),
            fs::read(prefix("b") + f).unwrap()
        );
    }

    let r = panoafford(&[
        "augment",
        "--image",
        p(&image),
        "--maps",
        p(&maps),
        "--seed",
        "1",
        "--out-prefix",
        &format!("{}/no/such/dir/x_", dir.path().display()),
    ]);
    assert_eq!(r.code, 2);
}

#[test]
fn unknown_flags_are_rejected() {
    assert_eq!(panoafford(&["demo-train", "--bogus"]).code, 1);
    assert_eq!(panoafford(&["--help"]).code, 0);
}
