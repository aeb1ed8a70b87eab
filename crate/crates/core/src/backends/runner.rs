//! Server half of the protocol: a request loop any Rust model runner can reuse,
//! and a handler that serves the stub backends.

use std::io::{Read, Write};
use std::time::Duration;

use super::protocol::{
    read_frame, write_frame, Frame, ERROR_KEY, OP_DETECT, OP_NLI, OP_PING, OP_RECOGNIZE,
    OP_SUMMARIZE, OP_UPSCALE,
};
use super::subprocess::{
    image_from_frame, image_tensor, logits_tensor, maps_to_frame, polygons_from_frame,
};
use super::{Detector, LexiconNli, NliScorer, Recognizer, StubDetector, StubRecognizer, Summarizer, TruncatingSummarizer};
use crate::error::ProtocolError;
use crate::imaging::bicubic_upscale;

/// Answers requests until the input stream ends.
///
/// `ping` is answered directly with an empty frame; every other op goes to
/// `handler`, whose `Err` becomes a response carrying an `error` string.
pub fn serve<R: Read, W: Write>(
    input: &mut R,
    output: &mut W,
    mut handler: impl FnMut(&Frame) -> Result<Frame, String>,
) -> Result<(), ProtocolError> {
    while let Some(req) = read_frame(input)? {
        let resp = if req.op == OP_PING {
            req.reply()
        } else {
            match handler(&req) {
                Ok(mut resp) => {
                    resp.op = req.op.clone();
                    resp.id = req.id;
                    resp
                }
                Err(msg) => req.reply().with_string(ERROR_KEY, msg),
            }
        };
        write_frame(output, &resp).map_err(|e| ProtocolError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Serves every op from the stub backends.
pub struct StubHandler {
    pub detector: StubDetector,
    pub recognizer: StubRecognizer,
    pub nli: LexiconNli,
    pub summarizer: TruncatingSummarizer,
    /// Sleep before answering each non-ping request.
    pub delay: Duration,
}

impl Default for StubHandler {
    fn default() -> Self {
        Self {
            detector: StubDetector::ink(128),
            recognizer: StubRecognizer::default(),
            nli: LexiconNli::default(),
            summarizer: TruncatingSummarizer::default(),
            delay: Duration::ZERO,
        }
    }
}

impl StubHandler {
    pub fn handle(&self, req: &Frame) -> Result<Frame, String> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let reply = req.reply();
        match req.op.as_str() {
            OP_DETECT => {
                let img = image_from_frame(req, "image")?;
                let maps = self.detector.infer_maps(&img).map_err(|e| e.to_string())?;
                Ok(maps_to_frame(reply, &maps))
            }
            OP_RECOGNIZE => {
                let img = image_from_frame(req, "image")?;
                let polys = polygons_from_frame(req)?;
                let texts = self.recognizer.recognize(&img, &polys).map_err(|e| e.to_string())?;
                Ok(texts
                    .into_iter()
                    .enumerate()
                    .fold(reply, |f, (i, t)| f.with_string(format!("text.{i}"), t)))
            }
            OP_NLI => {
                let premise = req.string("premise").ok_or("missing `premise`")?;
                let hypothesis = req.string("hypothesis").ok_or("missing `hypothesis`")?;
                let logits = self.nli.score(premise, hypothesis).map_err(|e| e.to_string())?;
                Ok(reply.with_tensor(logits_tensor(&logits)))
            }
            OP_SUMMARIZE => {
                let text = req.string("text").ok_or("missing `text`")?;
                let summary = self.summarizer.summarize(text).map_err(|e| e.to_string())?;
                Ok(reply.with_string("summary", summary))
            }
            OP_UPSCALE => {
                let img = image_from_frame(req, "image")?;
                let scale: usize = req
                    .string("scale")
                    .ok_or("missing `scale`")?
                    .parse()
                    .map_err(|_| "bad `scale`".to_string())?;
                Ok(reply.with_tensor(image_tensor("image", &bicubic_upscale(&img, scale))))
            }
            other => Err(format!("unknown op `{other}`")),
        }
    }
}
