//! Framed tensor exchange with external model runners.
//!
//! A frame on the wire is a 4-byte little-endian header length, a JSON header
//! `{op, id, tensors: [{name, dtype, shape}], strings: [{name, value}]}`, then
//! the raw little-endian bytes of every tensor concatenated in header order.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::ProtocolError;

pub const MAX_HEADER_BYTES: usize = 16 << 20;
pub const MAX_PAYLOAD_BYTES: usize = 1 << 30;

pub const OP_DETECT: &str = "detect";
pub const OP_RECOGNIZE: &str = "recognize";
pub const OP_NLI: &str = "nli";
pub const OP_SUMMARIZE: &str = "summarize";
pub const OP_UPSCALE: &str = "upscale";
pub const OP_PING: &str = "ping";

/// Name of the string a runner sets to report a failed request.
pub const ERROR_KEY: &str = "error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedString {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    op: String,
    id: u64,
    tensors: Vec<TensorSpec>,
    strings: Vec<NamedString>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self, ProtocolError> {
        let t = Self {
            name: name.into(),
            dtype,
            shape,
            data,
        };
        let want = t.byte_len().ok_or_else(|| ProtocolError::Framing("tensor shape overflows".into()))?;
        if want != t.data.len() {
            return Err(ProtocolError::Framing(format!(
                "tensor `{}` has {} bytes, shape {:?} needs {want}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn from_u8(name: impl Into<String>, shape: Vec<usize>, values: &[u8]) -> Result<Self, ProtocolError> {
        Self::new(name, DType::U8, shape, values.to_vec())
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self, ProtocolError> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, DType::F32, shape, data)
    }

    fn byte_len(&self) -> Option<usize> {
        element_count(&self.shape)?.checked_mul(self.dtype.size())
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        (self.dtype == DType::U8).then_some(self.data.as_slice())
    }

    pub fn to_f32(&self) -> Option<Vec<f32>> {
        (self.dtype == DType::F32).then(|| {
            self.data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub op: String,
    pub id: u64,
    pub tensors: Vec<Tensor>,
    pub strings: Vec<NamedString>,
}

impl Frame {
    pub fn new(op: impl Into<String>, id: u64) -> Self {
        Self {
            op: op.into(),
            id,
            tensors: Vec::new(),
            strings: Vec::new(),
        }
    }

    pub fn with_tensor(mut self, t: Tensor) -> Self {
        self.tensors.push(t);
        self
    }

    pub fn with_string(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.strings.push(NamedString {
            name: name.into(),
            value: value.into(),
        });
        self
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn string(&self, name: &str) -> Option<&str> {
        self.strings.iter().find(|s| s.name == name).map(|s| s.value.as_str())
    }

    /// Response skeleton echoing this frame's op and id.
    pub fn reply(&self) -> Frame {
        Frame::new(self.op.clone(), self.id)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            op: self.op.clone(),
            id: self.id,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorSpec {
                    name: t.name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                })
                .collect(),
            strings: self.strings.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(4 + header.len() + payload);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame, ProtocolError> {
        let mut cursor = io::Cursor::new(bytes);
        let frame = read_frame(&mut cursor)?
            .ok_or_else(|| ProtocolError::Framing("empty input".into()))?;
        if cursor.position() as usize != bytes.len() {
            return Err(ProtocolError::Framing(format!(
                "{} trailing bytes after frame",
                bytes.len() - cursor.position() as usize
            )));
        }
        Ok(frame)
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), ProtocolError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Framing(format!("truncated {what}")),
        _ => ProtocolError::Io(e.to_string()),
    })
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before the
/// first length byte; a stream ending anywhere else is a framing error.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, ProtocolError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Framing("truncated length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ProtocolError::Io(e.to_string())),
        }
    }
    let header_len = u32::from_le_bytes(len) as usize;
    if header_len == 0 || header_len > MAX_HEADER_BYTES {
        return Err(ProtocolError::Framing(format!("bad header length {header_len}")));
    }
    let mut header = vec![0u8; header_len];
    read_exact_or(r, &mut header, "header")?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| ProtocolError::Header(e.to_string()))?;

    let mut total = 0usize;
    let mut sizes = Vec::with_capacity(header.tensors.len());
    for spec in &header.tensors {
        let n = element_count(&spec.shape)
            .and_then(|c| c.checked_mul(spec.dtype.size()))
            .ok_or_else(|| ProtocolError::Framing(format!("tensor `{}` shape overflows", spec.name)))?;
        total = total
            .checked_add(n)
            .filter(|&t| t <= MAX_PAYLOAD_BYTES)
            .ok_or_else(|| ProtocolError::Framing("payload too large".into()))?;
        sizes.push(n);
    }
    let mut payload = vec![0u8; total];
    read_exact_or(r, &mut payload, "payload")?;

    let mut offset = 0;
    let tensors = header
        .tensors
        .into_iter()
        .zip(sizes)
        .map(|(spec, n)| {
            let data = payload[offset..offset + n].to_vec();
            offset += n;
            Tensor {
                name: spec.name,
                dtype: spec.dtype,
                shape: spec.shape,
                data,
            }
        })
        .collect();
    Ok(Some(Frame {
        op: header.op,
        id: header.id,
        tensors,
        strings: header.strings,
    }))
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Frame {
        Frame::new("detect", 7)
            .with_tensor(Tensor::from_u8("image", vec![2, 3], &[1, 2, 3, 4, 5, 6]).unwrap())
            .with_tensor(Tensor::from_f32("prob", vec![2], &[0.5, -1.25]).unwrap())
            .with_string("note", "hi")
    }

    #[test]
    fn layout_is_length_header_payload() {
        let bytes = sample().encode();
        let header_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + header_len]).unwrap();
        assert_eq!(header["op"], "detect");
        assert_eq!(header["id"], 7);
        assert_eq!(header["tensors"][1]["dtype"], "f32");
        assert_eq!(bytes.len(), 4 + header_len + 6 + 8);
        assert_eq!(&bytes[4 + header_len..4 + header_len + 6], &[1, 2, 3, 4, 5, 6]);
        assert_eq!(&bytes[bytes.len() - 4..], &(-1.25f32).to_le_bytes());
    }

    #[test]
    fn round_trip() {
        let f = sample();
        assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
        assert_eq!(f.tensor("prob").unwrap().to_f32().unwrap(), vec![0.5, -1.25]);
    }

    #[test]
    fn truncation_is_a_framing_error() {
        let bytes = sample().encode();
        for cut in [2, 10, bytes.len() - 1] {
            assert!(matches!(Frame::decode(&bytes[..cut]), Err(ProtocolError::Framing(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Frame::decode(&extra).is_err());
    }

    #[test]
    fn stream_end_between_frames_is_clean() {
        let mut stream = sample().encode();
        stream.extend(Frame::new("ping", 8).encode());
        let mut r = io::Cursor::new(stream);
        assert_eq!(read_frame(&mut r).unwrap().unwrap().id, 7);
        assert_eq!(read_frame(&mut r).unwrap().unwrap().op, "ping");
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn tensor_size_checked() {
        assert!(Tensor::from_u8("x", vec![2, 2], &[0; 3]).is_err());
        assert!(Tensor::new("x", DType::F32, vec![1], vec![0; 4]).is_ok());
    }

    #[test]
    fn bad_header_length() {
        let mut bytes = vec![0u8, 0, 0, 0];
        assert!(matches!(Frame::decode(&bytes), Err(ProtocolError::Framing(_))));
        bytes = (u32::MAX).to_le_bytes().to_vec();
        assert!(matches!(Frame::decode(&bytes), Err(ProtocolError::Framing(_))));
    }
}
