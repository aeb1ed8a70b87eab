//! Synthetic corpora and process helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use docpipe_core::imaging::ColorImage;

pub const LABELS: [&str; 4] = ["Invoice", "Report", "Letter", "Form"];

/// Five premises per category; each only hits its own category's keywords.
pub const PREMISES: [[&str; 5]; 4] = [
    [
        "invoice total due",
        "amount of the payment and balance",
        "bill subtotal tax",
        "invoice amount due now",
        "payment total balance",
    ],
    [
        "annual report for the fiscal year",
        "quarterly analysis findings",
        "revenue results report",
        "annual revenue analysis",
        "fiscal findings and results",
    ],
    [
        "dear sir sincerely yours",
        "kind regards from this letter",
        "yours faithfully",
        "dear madam correspondence follows",
        "sincerely with regards",
    ],
    [
        "application form signature",
        "applicant must fill each field",
        "tick the checkbox on the form",
        "signature field for the applicant",
        "fill the application form",
    ],
];

pub const PAGE_W: usize = 320;
pub const PAGE_H: usize = 240;
const CELL_W: usize = 64;
const CELL_H: usize = 60;
const BLOCK_W: usize = 40;
const BLOCK_H: usize = 12;

/// Cell `[x, y, w, h]` holding document `i`'s single text block (5 x 4 grid).
pub fn cell(i: usize) -> [usize; 4] {
    [(i % 5) * CELL_W, (i / 5) * CELL_H, CELL_W, CELL_H]
}

/// White page with one dark block centered in cell `i`.
pub fn document_page(i: usize) -> ColorImage {
    let [cx, cy, _, _] = cell(i);
    let (bx, by) = (cx + (CELL_W - BLOCK_W) / 2, cy + (CELL_H - BLOCK_H) / 2);
    let mut img = ColorImage::filled(PAGE_W, PAGE_H, [255, 255, 255]).unwrap();
    for y in by..by + BLOCK_H {
        for x in bx..bx + BLOCK_W {
            img.set(x, y, [20, 20, 20]);
        }
    }
    img
}

/// Expected label of document `i`.
pub fn document_label(i: usize) -> &'static str {
    LABELS[i / 5]
}

/// Writes the 20 document pages and a config whose recognizer table maps each
/// cell to its premise. Returns the config path.
pub fn write_classification_corpus(dir: &Path) -> PathBuf {
    std::fs::create_dir_all(dir.join("docs")).unwrap();
    let mut toml = String::from("[detector]\nimpl = \"stub\"\nstub_mode = \"ink\"\nink_threshold = 128\n\n");
    for i in 0..20 {
        write_png(&dir.join(format!("docs/doc{i:02}.png")), &document_page(i));
        let [x, y, w, h] = cell(i);
        toml.push_str(&format!(
            "[[recognizer.table]]\nrect = [{x}.0, {y}.0, {w}.0, {h}.0]\ntext = \"{}\"\n\n",
            PREMISES[i / 5][i % 5]
        ));
    }
    let path = dir.join("classify.toml");
    std::fs::write(&path, toml).unwrap();
    path
}

/// Pages with a varying number of dark blocks for throughput runs.
pub fn bench_page(i: usize) -> ColorImage {
    let mut img = ColorImage::filled(160, 120, [250, 250, 250]).unwrap();
    for b in 0..=(i % 4) {
        let (bx, by) = (8 + (b % 2) * 72, 10 + (b / 2) * 50 + (i % 3) * 4);
        for y in by..by + 10 {
            for x in bx..bx + 48 {
                img.set(x, y, [10, 10, 10]);
            }
        }
    }
    img
}

pub fn write_png(path: &Path, img: &ColorImage) {
    std::fs::write(path, img.encode_png().unwrap()).unwrap();
}

pub fn docpipe(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_docpipe"));
    cmd.args(args).env_remove("DOCPIPE_LOG");
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("DOCPIPE_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("docpipe runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Value of a `key: value` line.
pub fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix(": "))
}

/// Path of the stub runner binary from the core crate, building it if needed.
pub fn stub_runner() -> PathBuf {
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_docpipe"));
    let path = exe.parent().unwrap().join("docpipe-stub-runner");
    if !path.exists() {
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let status = Command::new(cargo)
            .args(["build", "-p", "docpipe-core", "--bin", "docpipe-stub-runner"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    path
}
