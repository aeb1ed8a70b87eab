//! Exit codes, config layering and file outputs of the `docpipe` binary.

mod common;

use std::path::Path;

use common::*;

fn tiny_eval(dir: &Path) -> (String, String) {
    let (gt, pred) = (dir.join("gt"), dir.join("pred"));
    std::fs::create_dir_all(&gt).unwrap();
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::write(gt.join("a.txt"), "0,0,10,0,10,10,0,10,hi\n").unwrap();
    std::fs::write(pred.join("a.txt"), "0.9;0,0,10,0,10,10,0,10\n").unwrap();
    (gt.display().to_string(), pred.display().to_string())
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(docpipe(&["--bogus"], &[]).status.code(), Some(2));
    assert_eq!(docpipe(&["detect"], &[]).status.code(), Some(2));
    assert_eq!(docpipe(&["classify", "/nonexistent/page.png"], &[]).status.code(), Some(2));
    assert_eq!(docpipe(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = tiny_eval(dir.path());
    let args = ["eval", "--gt", gt.as_str(), "--predictions", pred.as_str()];
    let out = docpipe(&args, &[("DOCPIPE_SERVICE__PORT", "0")]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[detection]\nno_such_key = 1\n").unwrap();
    let mut with_cfg = vec!["--config", bad.to_str().unwrap()];
    with_cfg.extend(args);
    let out = docpipe(&with_cfg, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let mut bad_flag = args.to_vec();
    bad_flag.extend(["--iou-thresh", "1.5"]);
    assert_eq!(docpipe(&bad_flag, &[]).status.code(), Some(2));
}

#[test]
fn flag_beats_env_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = tiny_eval(dir.path());
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[eval]\niou_thresh = 0.6\n").unwrap();
    let iou = |with_file: bool, env: &[(&str, &str)], flag: Option<&str>| {
        let mut args = Vec::new();
        if with_file {
            args.extend(["--config", cfg.to_str().unwrap()]);
        }
        args.extend(["eval", "--gt", gt.as_str(), "--predictions", pred.as_str()]);
        if let Some(f) = flag {
            args.extend(["--iou-thresh", f]);
        }
        let out = docpipe(&args, env);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        field(&stdout(&out), "iou_thresh").unwrap().to_string()
    };
    let env = [("DOCPIPE_EVAL__IOU_THRESH", "0.7")];
    assert_eq!(iou(false, &[], None), "0.5");
    assert_eq!(iou(true, &[], None), "0.6");
    assert_eq!(iou(true, &env, None), "0.7");
    assert_eq!(iou(true, &env, Some("0.8")), "0.8");
}

#[test]
fn failing_file_exits_1_and_others_still_run() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("a.png"), &bench_page(1));
    std::fs::write(dir.path().join("b.png"), b"not a png").unwrap();
    let out = docpipe(&["classify", dir.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("a.png"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("b.png"));
}

#[test]
fn detect_writes_prediction_files_usable_by_eval() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    for i in 0..3 {
        write_png(&images.join(format!("p{i}.png")), &bench_page(i));
    }
    let preds = dir.path().join("preds");
    let out = docpipe(
        &["--workers", "2", "detect", images.to_str().unwrap(), "--out", preds.to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    let counts: Vec<usize> = stdout(&out).lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(counts, vec![1, 2, 3]);
    let p1 = std::fs::read_to_string(preds.join("p1.txt")).unwrap();
    assert_eq!(p1.lines().count(), 2);
    assert!(p1.lines().all(|l| l.starts_with("0.9000;")));

    // The predictions evaluated against themselves as ground truth.
    let gt = dir.path().join("gt");
    std::fs::create_dir_all(&gt).unwrap();
    for i in 0..3 {
        let lines: String = std::fs::read_to_string(preds.join(format!("p{i}.txt")))
            .unwrap()
            .lines()
            .map(|l| format!("{},text\n", l.split_once(';').unwrap().1))
            .collect();
        std::fs::write(gt.join(format!("p{i}.txt")), lines).unwrap();
    }
    let report = dir.path().join("report.json");
    let out = docpipe(
        &[
            "eval",
            "--gt",
            gt.to_str().unwrap(),
            "--images",
            images.to_str().unwrap(),
            "--report-out",
            report.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(field(&stdout(&out), "f_measure"), Some("1.0000"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["tp"], 6);
    assert!(json["timing"]["wall_clock_s"].is_number());
}

#[test]
fn det_params_file_overrides_detection() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("p.png"), &bench_page(3));
    let params = dir.path().join("det.toml");
    // Blocks are 10 px tall, 20 px in the detector frame.
    std::fs::write(&params, "min_height = 40.0\n").unwrap();
    let input = dir.path().join("p.png");
    let out_dir = dir.path().join("out");
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = extra.to_vec();
        args.extend(["detect", input.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        let out = docpipe(&args, &[]);
        assert_eq!(out.status.code(), Some(0));
        stdout(&out).trim().rsplit('\t').next().unwrap().to_string()
    };
    assert_eq!(run(&[]), "4");
    assert_eq!(run(&["--det-params", params.to_str().unwrap()]), "0");
}

#[test]
fn preprocess_dumps_three_stages() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("page.png");
    write_png(&input, &bench_page(0));
    let stages = dir.path().join("stages");
    let out = docpipe(&["preprocess", input.to_str().unwrap(), "--dump-stages", stages.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["01_gray.png", "02_sr.png", "03_clahe.png"] {
        assert!(stages.join("page").join(name).is_file(), "{name}");
    }
}

#[test]
fn summarize_adds_a_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_classification_corpus(dir.path());
    let doc = dir.path().join("docs/doc07.png");
    let out = docpipe(
        &["--config", cfg.to_str().unwrap(), "classify", doc.to_str().unwrap(), "--summarize", "--labels", "Report,Invoice"],
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    let line = stdout(&out);
    let cols: Vec<&str> = line.trim_end().split('\t').collect();
    assert_eq!(cols[1], "Report");
    assert_eq!(cols[2].split(',').count(), 2);
    assert_eq!(cols[3], PREMISES[1][2]);
}
