//! Model runner that serves the stub backends over stdio.
//!
//! Usage: docpipe-stub-runner [--ink <level>] [--planted x,y,w,h[;x,y,w,h...]] [--delay-ms <n>]

use std::io::{self, BufReader, BufWriter};
use std::process::ExitCode;
use std::time::Duration;

use docpipe_core::backends::runner::{serve, StubHandler};
use docpipe_core::backends::StubDetector;

fn parse_rects(s: &str) -> Result<Vec<[usize; 4]>, String> {
    s.split(';')
        .filter(|r| !r.trim().is_empty())
        .map(|r| {
            let v = r
                .split(',')
                .map(|c| c.trim().parse::<usize>().map_err(|_| format!("bad rect `{r}`")))
                .collect::<Result<Vec<_>, _>>()?;
            <[usize; 4]>::try_from(v).map_err(|_| format!("rect `{r}` needs 4 values"))
        })
        .collect()
}

fn parse_args() -> Result<StubHandler, String> {
    let mut handler = StubHandler::default();
    let mut args = std::env::args().skip(1);
    while let Some(flag) = args.next() {
        let mut value = || args.next().ok_or_else(|| format!("{flag} needs a value"));
        match flag.as_str() {
            "--ink" => {
                let level = value()?.parse().map_err(|_| "--ink takes 0..255".to_string())?;
                handler.detector = StubDetector::ink(level);
            }
            "--planted" => handler.detector = StubDetector::planted(parse_rects(&value()?)?),
            "--delay-ms" => {
                let ms = value()?.parse().map_err(|_| "--delay-ms takes an integer".to_string())?;
                handler.delay = Duration::from_millis(ms);
            }
            other => return Err(format!("unknown flag `{other}`")),
        }
    }
    Ok(handler)
}

fn main() -> ExitCode {
    let handler = match parse_args() {
        Ok(h) => h,
        Err(e) => {
            eprintln!("docpipe-stub-runner: {e}");
            return ExitCode::from(2);
        }
    };
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    match serve(&mut input, &mut output, |f| handler.handle(f)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("docpipe-stub-runner: {e}");
            ExitCode::FAILURE
        }
    }
}
