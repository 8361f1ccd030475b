//! Binary containers.
//!
//! `ETGT` holds one tensor:
//!
//! ```text
//! magic "ETGT" | version u16 | dtype u16 (0 f32, 1 f64) | ndim u32 | dims u64 * ndim | payload
//! ```
//!
//! Sectioned files (`ETGA` head assets, `ETGC` checkpoints) share one
//! layout:
//!
//! ```text
//! magic [4] | version u16 | reserved u16 | count u32
//! count * ( name_len u16 | name | kind u8 | body_len u64 | body )
//! ```
//!
//! where a body is an `ETGT` blob, a list of u64, UTF-8 text or opaque
//! bytes. Everything is little-endian. Readers report the byte offset at
//! which a file stops making sense.

use std::fmt;

use talkhead_core::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"ETGT";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("byte {offset}: {reason}")]
pub struct FormatError {
    pub offset: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u16 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

/// Decoded tensor before any finiteness or shape policy is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn into_tensor(self) -> Result<Tensor, String> {
        Tensor::new(self.dims, self.data).map_err(|e| e.to_string())
    }
}

/// Cursor over a byte slice that knows its absolute position.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self::at(bytes, 0)
    }

    /// Reader whose offsets are reported relative to `base`.
    pub fn at(bytes: &'a [u8], base: u64) -> Self {
        Self { bytes, pos: 0, base }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn fail<T>(&self, reason: impl Into<String>) -> Result<T, FormatError> {
        Err(FormatError {
            offset: self.offset(),
            reason: reason.into(),
        })
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left (file ends at byte {})",
                self.remaining(),
                self.base + self.bytes.len() as u64
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], FormatError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N, what)?);
        Ok(a)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.array::<1>(what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn is_done(&self) -> bool {
        self.remaining() == 0
    }
}

pub fn encode_tensor(dims: &[usize], data: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * dims.len() + dtype.size() * data.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => data
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn tensor_bytes(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    encode_tensor(t.dims(), t.data(), dtype)
}

/// Read one tensor from the cursor.
pub fn read_tensor(r: &mut Reader<'_>) -> Result<RawTensor, FormatError> {
    let magic = r.array::<4>("tensor magic")?;
    if magic != TENSOR_MAGIC {
        return r.fail(format!("bad tensor magic {:?}", String::from_utf8_lossy(&magic)));
    }
    let version = r.u16("tensor version")?;
    if version != TENSOR_VERSION {
        return r.fail(format!("unsupported tensor version {version}"));
    }
    let dtype = match r.u16("dtype")? {
        0 => Dtype::F32,
        1 => Dtype::F64,
        c => return r.fail(format!("unknown dtype code {c}")),
    };
    let ndim = r.u32("ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        let d = r.u64("dimension")?;
        dims.push(usize::try_from(d).or_else(|_| r.fail(format!("dimension {d} does not fit in memory")))?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(())
        .or_else(|_| r.fail("element count overflows"))?;
    let bytes = count
        .checked_mul(dtype.size())
        .ok_or(())
        .or_else(|_| r.fail("payload size overflows"))?;
    let payload = r.take(bytes, "tensor payload")?;
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    Ok(RawTensor { dtype, dims, data })
}

/// Decode a whole `ETGT` file.
pub fn decode_tensor(bytes: &[u8]) -> Result<RawTensor, FormatError> {
    let mut r = Reader::new(bytes);
    let t = read_tensor(&mut r)?;
    if !r.is_done() {
        return r.fail(format!("{} trailing bytes after tensor payload", r.remaining()));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Tensor(Vec<u8>),
    Indices(Vec<u64>),
    Text(String),
    Bytes(Vec<u8>),
}

impl Body {
    fn kind(&self) -> u8 {
        match self {
            Body::Tensor(_) => 0,
            Body::Indices(_) => 1,
            Body::Text(_) => 2,
            Body::Bytes(_) => 3,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Body::Tensor(_) => "tensor",
            Body::Indices(_) => "indices",
            Body::Text(_) => "text",
            Body::Bytes(_) => "bytes",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Body::Tensor(b) | Body::Bytes(b) => b.len(),
            Body::Indices(v) => 8 * v.len(),
            Body::Text(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub body: Body,
    /// Where the body starts in the file it was read from.
    pub offset: u64,
}

/// A sectioned file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u16,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(magic: [u8; 4], version: u16) -> Self {
        Self {
            magic,
            version,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, body: Body) {
        self.sections.push(Section {
            name: name.into(),
            body,
            offset: 0,
        });
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push(name, Body::Tensor(tensor_bytes(t, Dtype::F64)));
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.body.kind());
            out.extend_from_slice(&(s.body.len() as u64).to_le_bytes());
            match &s.body {
                Body::Tensor(b) | Body::Bytes(b) => out.extend_from_slice(b),
                Body::Indices(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Body::Text(t) => out.extend_from_slice(t.as_bytes()),
            }
        }
        out
    }

    /// Parse a container whose magic must be `magic`.
    pub fn decode(bytes: &[u8], magic: [u8; 4], version: u16) -> Result<Self, FormatError> {
        Self::decode_at(bytes, 0, magic, version)
    }

    /// Like [`Container::decode`] for a container embedded at `base`.
    pub fn decode_at(bytes: &[u8], base: u64, magic: [u8; 4], version: u16) -> Result<Self, FormatError> {
        let mut r = Reader::at(bytes, base);
        let m = r.array::<4>("magic")?;
        if m != magic {
            return Err(FormatError {
                offset: base,
                reason: format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(&magic),
                    String::from_utf8_lossy(&m)
                ),
            });
        }
        let v = r.u16("version")?;
        if v != version {
            return r.fail(format!("unsupported version {v} (expected {version})"));
        }
        let reserved = r.u16("reserved field")?;
        if reserved != 0 {
            return r.fail("reserved field must be zero");
        }
        let count = r.u32("section count")?;
        let mut sections = Vec::new();
        for k in 0..count {
            let len = r.u16("section name length")? as usize;
            let name = r.take(len, &format!("name of section {k}"))?;
            let name = String::from_utf8(name.to_vec()).or_else(|_| r.fail("section name is not UTF-8"))?;
            let kind = r.u8("section kind")?;
            let body_len = r.u64("section length")?;
            let body_len = usize::try_from(body_len).or_else(|_| r.fail("section too large"))?;
            let offset = r.offset();
            let raw = r.take(body_len, &format!("body of section '{name}'"))?;
            let body = match kind {
                0 => Body::Tensor(raw.to_vec()),
                1 => {
                    if body_len % 8 != 0 {
                        return Err(FormatError {
                            offset,
                            reason: format!("index section '{name}' length {body_len} is not a multiple of 8"),
                        });
                    }
                    Body::Indices(
                        raw.chunks_exact(8)
                            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
                            .collect(),
                    )
                }
                2 => Body::Text(String::from_utf8(raw.to_vec()).map_err(|_| FormatError {
                    offset,
                    reason: format!("text section '{name}' is not UTF-8"),
                })?),
                3 => Body::Bytes(raw.to_vec()),
                k => {
                    return Err(FormatError {
                        offset: offset - 9,
                        reason: format!("unknown section kind {k}"),
                    })
                }
            };
            sections.push(Section { name, body, offset });
        }
        if !r.is_done() {
            return r.fail(format!("{} trailing bytes after the last section", r.remaining()));
        }
        Ok(Self {
            magic,
            version,
            sections,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Section, FormatError> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| FormatError {
                offset: 0,
                reason: format!("missing section '{name}'"),
            })
    }

    fn wrong_kind<T>(s: &Section, want: &str) -> Result<T, FormatError> {
        Err(FormatError {
            offset: s.offset,
            reason: format!("section '{}' holds {}, expected {want}", s.name, s.body.kind_name()),
        })
    }

    pub fn raw_tensor(&self, name: &str) -> Result<RawTensor, FormatError> {
        let s = self.get(name)?;
        match &s.body {
            Body::Tensor(b) => {
                let mut r = Reader::at(b, s.offset);
                let t = read_tensor(&mut r)?;
                if !r.is_done() {
                    return r.fail(format!("trailing bytes in tensor section '{name}'"));
                }
                Ok(t)
            }
            _ => Self::wrong_kind(s, "tensor"),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor, FormatError> {
        let s = self.get(name)?;
        self.raw_tensor(name)?.into_tensor().map_err(|reason| FormatError {
            offset: s.offset,
            reason: format!("section '{name}': {reason}"),
        })
    }

    pub fn indices(&self, name: &str) -> Result<&[u64], FormatError> {
        let s = self.get(name)?;
        match &s.body {
            Body::Indices(v) => Ok(v),
            _ => Self::wrong_kind(s, "indices"),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str, FormatError> {
        let s = self.get(name)?;
        match &s.body {
            Body::Text(t) => Ok(t),
            _ => Self::wrong_kind(s, "text"),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<(&[u8], u64), FormatError> {
        let s = self.get(name)?;
        match &s.body {
            Body::Bytes(b) => Ok((b, s.offset)),
            _ => Self::wrong_kind(s, "bytes"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_header_layout() {
        let b = encode_tensor(&[2, 1], &[1.5, -2.0], Dtype::F64);
        assert_eq!(&b[..4], b"ETGT");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 1);
        assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[28..36].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 28 + 16);
        let f = encode_tensor(&[3], &[0.25, 1.0, -8.0], Dtype::F32);
        assert_eq!(f.len(), 20 + 12);
        assert_eq!(decode_tensor(&f).unwrap().data, vec![0.25, 1.0, -8.0]);
    }

    #[test]
    fn truncation_reports_offset() {
        let b = encode_tensor(&[4], &[1.0; 4], Dtype::F64);
        let e = decode_tensor(&b[..30]).unwrap_err();
        assert_eq!(e.offset, 20);
        assert!(e.reason.contains("truncated"), "{e}");
        let mut c = Container::new(*b"ETGA", 1);
        c.push("x", Body::Text("hello".into()));
        c.push("t", Body::Tensor(b.clone()));
        let enc = c.encode();
        let e = Container::decode(&enc[..enc.len() - 3], *b"ETGA", 1).unwrap_err();
        assert!(e.reason.contains("section 't'"), "{e}");
        let e = Container::decode(&enc, *b"ETGC", 1).unwrap_err();
        assert_eq!(e.offset, 0);
    }

    #[test]
    fn container_round_trip() {
        let mut c = Container::new(*b"ETGC", 3);
        c.push("a", Body::Indices(vec![1, 2, u64::MAX]));
        c.push("b", Body::Bytes(vec![9, 8, 7]));
        c.push_tensor("c", &Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
        let enc = c.encode();
        let d = Container::decode(&enc, *b"ETGC", 3).unwrap();
        assert_eq!(d.encode(), enc);
        assert_eq!(d.indices("a").unwrap(), &[1, 2, u64::MAX]);
        assert_eq!(d.tensor("c").unwrap().data(), &[0.1, 0.2]);
        assert!(d.text("a").is_err());
        assert!(d.get("zzz").is_err());
    }
}
