//! Out-of-process backends driven against the bundled stub runner.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use docpipe_core::backends::protocol::{Frame, OP_DETECT, OP_PING};
use docpipe_core::backends::subprocess::{image_tensor, maps_from_frame};
use docpipe_core::backends::{
    Detector, NliScorer, Recognizer, SubprocessClient, SubprocessDetector, SubprocessNli, SubprocessPool,
    SubprocessRecognizer, SubprocessSummarizer, SubprocessUpscaler, Summarizer,
};
use docpipe_core::error::BackendError;
use docpipe_core::geometry::Polygon;
use docpipe_core::imaging::{bicubic_upscale, GrayImage, Upscaler};

fn runner(args: &[&str]) -> Vec<String> {
    std::iter::once(env!("CARGO_BIN_EXE_docpipe-stub-runner"))
        .chain(args.iter().copied())
        .map(String::from)
        .collect()
}

fn pool(args: &[&str]) -> Arc<SubprocessPool> {
    Arc::new(SubprocessPool::new(runner(args), 1, Duration::from_secs(10)))
}

fn kill(pid: u32) {
    let status = std::process::Command::new("kill").args(["-9", &pid.to_string()]).status().unwrap();
    assert!(status.success());
    std::thread::sleep(Duration::from_millis(100));
}

fn page() -> GrayImage {
    GrayImage::from_fn(64, 48, |x, y| if (10..40).contains(&x) && (8..20).contains(&y) { 0 } else { 255 }).unwrap()
}

#[test]
fn ping_and_echoed_ids() {
    let client = SubprocessClient::new(runner(&[]), Duration::from_secs(10));
    assert!(client.child_pid().is_none(), "spawn is lazy");
    client.ping().unwrap();
    assert!(client.child_pid().is_some());
    let resp = client.call(Frame::new(OP_PING, 999)).unwrap();
    assert!(resp.tensors.is_empty());
}

#[test]
fn killed_child_fails_one_call_then_recovers() {
    let client = SubprocessClient::new(runner(&[]), Duration::from_secs(10));
    let req = || Frame::new(OP_DETECT, 0).with_tensor(image_tensor("image", &page()));
    client.call(req()).unwrap();
    let first = client.child_pid().unwrap();
    kill(first);

    let err = client.call(req()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable(_)), "{err}");
    assert!(client.child_pid().is_none());

    for _ in 0..3 {
        client.call(req()).unwrap();
    }
    assert_ne!(client.child_pid().unwrap(), first);
}

#[test]
fn slow_child_times_out_and_is_replaced() {
    let client = SubprocessClient::new(runner(&["--delay-ms", "1500"]), Duration::from_millis(300));
    let start = Instant::now();
    let err = client.call(Frame::new("summarize", 0).with_string("text", "a b")).unwrap_err();
    assert_eq!(err, BackendError::Timeout(Duration::from_millis(300)));
    assert!(start.elapsed() < Duration::from_secs(5));
    assert!(client.child_pid().is_none());
}

#[test]
fn launch_failure_is_unavailable() {
    let client = SubprocessClient::new(vec!["/nonexistent/runner".into()], Duration::from_secs(1));
    assert!(matches!(client.ping(), Err(BackendError::Unavailable(_))));
}

#[test]
fn runner_errors_surface_as_remote_with_child_kept() {
    let client = SubprocessClient::new(runner(&[]), Duration::from_secs(10));
    let err = client.call(Frame::new("nli", 0).with_string("premise", "x")).unwrap_err();
    assert!(matches!(err, BackendError::Remote(ref m) if m.contains("hypothesis")), "{err}");
    assert!(client.child_pid().is_some());
}

#[test]
fn bad_runner_flag_reports_stderr() {
    let client = SubprocessClient::new(runner(&["--bogus"]), Duration::from_secs(10));
    let msg = client.ping().unwrap_err().to_string();
    assert!(msg.contains("bogus"), "{msg}");
}

#[test]
fn adapters_match_in_process_stubs() {
    let p = pool(&["--ink", "128"]);
    let img = page();

    let recognizer = SubprocessRecognizer::new(p.clone());
    let polys = vec![Polygon::rect(10.0, 8.0, 30.0, 12.0).unwrap()];
    assert_eq!(recognizer.recognize(&img, &polys).unwrap(), vec![String::new()]);
    assert!(recognizer.recognize(&img, &[]).unwrap().is_empty());

    let nli = SubprocessNli::new(p.clone());
    let l = nli.score("invoice total", "This text is about Invoice").unwrap();
    assert_eq!((l.entailment, l.contradiction, l.neutral), (8.0, 0.0, 0.0));

    let words: Vec<String> = (0..40).map(|i| i.to_string()).collect();
    let s = SubprocessSummarizer::new(p.clone()).summarize(&words.join(" ")).unwrap();
    assert_eq!(s, format!("{}…", words[..30].join(" ")));

    let up = SubprocessUpscaler::new(p.clone(), 2);
    assert_eq!(up.upscale(&img).unwrap(), bicubic_upscale(&img, 2));

    let maps = SubprocessDetector::new(p).infer_maps(&img).unwrap();
    assert_eq!((maps.width(), maps.height()), (64, 48));
    assert_eq!(maps.prob()[10 * 64 + 20], 0.9);
    assert_eq!(maps.prob()[0], 0.05);
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/detect_golden.frame")
}

/// The golden detect response was recorded once from the stub runner; set
/// `DOCPIPE_UPDATE_GOLDEN=1` to re-record it.
#[test]
fn detect_response_matches_golden_bit_exact() {
    let client = SubprocessClient::new(runner(&["--planted", "4,4,20,8;30,20,24,10"]), Duration::from_secs(10));
    let mut resp = client
        .call(Frame::new(OP_DETECT, 0).with_tensor(image_tensor("image", &page())))
        .unwrap();
    resp.id = 0;
    let bytes = resp.encode();
    if std::env::var_os("DOCPIPE_UPDATE_GOLDEN").is_some() {
        std::fs::write(golden_path(), &bytes).unwrap();
    }
    let golden = std::fs::read(golden_path()).expect("golden fixture present");
    assert_eq!(bytes, golden);
    let golden = Frame::decode(&golden).unwrap();
    let maps = maps_from_frame(&golden, 64, 48).unwrap();
    assert_eq!(maps.prob()[5 * 64 + 5], 0.9);
    assert!(maps.thresh().unwrap().iter().all(|&t| t == 0.3));
}
