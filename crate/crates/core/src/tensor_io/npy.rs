//! Reading and writing 3-D float tensors in the numpy `.npy` format.
//!
//! Only little-endian `<f4` and `<f8` payloads in C order are accepted. `<f8`
//! data is narrowed to `f32` on read. Writing always produces version 1.0,
//! `<f4`, C order, with the header padded so the payload starts on a 64-byte
//! boundary.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

/// The npy magic number.
pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

const ALIGNMENT: usize = 64;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("negative value at flat index {0}")]
    NegativeValue(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dense `(layers, heads, tokens)` tensor of attention weights, row-major with
/// the token index varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self, NpyError> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(NpyError::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The attention row for captured-layer slot `layer` and head `head`.
    pub fn row(&self, layer: usize, head: usize) -> &[f32] {
        let [_, heads, tokens] = self.shape;
        let start = (layer * heads + head) * tokens;
        &self.data[start..start + tokens]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize) -> &mut [f32] {
        let [_, heads, tokens] = self.shape;
        let start = (layer * heads + head) * tokens;
        &mut self.data[start..start + tokens]
    }

    /// Checks that every value is finite and nonnegative.
    pub fn validate_attention(&self) -> Result<(), NpyError> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(NpyError::NonFiniteValue(i));
            }
            if v < 0.0 {
                return Err(NpyError::NegativeValue(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

#[derive(Debug)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// A value in the python-literal header dictionary.
#[derive(Debug, Clone, PartialEq)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

struct DictParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> DictParser<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, what: &str) -> NpyError {
        NpyError::MalformedHeader(format!("{what} at byte {} of header dict", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), NpyError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn string(&mut self) -> Result<String, NpyError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn integer(&mut self) -> Result<usize, NpyError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected integer"));
        }
        // Tolerate the `L` suffix older python 2 writers emit.
        if self.src.get(self.pos) == Some(&b'L') {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.trim_end_matches('L').parse().ok())
            .ok_or_else(|| self.err("integer out of range"))
    }

    fn value(&mut self) -> Result<Literal, NpyError> {
        match self.peek() {
            Some(b'\'' | b'"') => self.string().map(Literal::Str),
            Some(b'(') => {
                self.pos += 1;
                let mut dims = Vec::new();
                loop {
                    if self.peek() == Some(b')') {
                        self.pos += 1;
                        break;
                    }
                    dims.push(self.integer()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected ',' or ')' in shape")),
                    }
                }
                Ok(Literal::Tuple(dims))
            }
            _ => {
                let rest = &self.src[self.pos..];
                if rest.starts_with(b"True") {
                    self.pos += 4;
                    Ok(Literal::Bool(true))
                } else if rest.starts_with(b"False") {
                    self.pos += 5;
                    Ok(Literal::Bool(false))
                } else {
                    Err(self.err("unrecognised literal"))
                }
            }
        }
    }

    fn dict(mut self) -> Result<Vec<(String, Literal)>, NpyError> {
        self.expect(b'{')?;
        let mut entries = Vec::new();
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            let value = self.value()?;
            entries.push((key, value));
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        if self.peek().is_some() {
            return Err(self.err("trailing characters after dict"));
        }
        Ok(entries)
    }
}

fn parse_header_dict(text: &str) -> Result<Header, NpyError> {
    let entries = DictParser::new(text).dict()?;
    let lookup = |key: &str| {
        entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| NpyError::MalformedHeader(format!("missing key '{key}'")))
    };

    let dtype = match lookup("descr")? {
        Literal::Str(d) => match d.as_str() {
            "<f4" => Dtype::F4,
            "<f8" => Dtype::F8,
            other => return Err(NpyError::UnsupportedDtype(other.to_string())),
        },
        _ => return Err(NpyError::MalformedHeader("'descr' is not a string".into())),
    };
    match lookup("fortran_order")? {
        Literal::Bool(false) => {}
        Literal::Bool(true) => {
            return Err(NpyError::UnsupportedDtype("fortran_order arrays".into()));
        }
        _ => {
            return Err(NpyError::MalformedHeader(
                "'fortran_order' is not a bool".into(),
            ))
        }
    }
    let shape = match lookup("shape")? {
        Literal::Tuple(dims) => dims,
        _ => return Err(NpyError::MalformedHeader("'shape' is not a tuple".into())),
    };
    Ok(Header { dtype, shape })
}

fn read_header(bytes: &[u8]) -> Result<(Header, usize), NpyError> {
    if bytes.len() < 10 || bytes[..6] != MAGIC {
        return Err(NpyError::MalformedHeader("missing \\x93NUMPY magic".into()));
    }
    let (header_len, prefix) = match (bytes[6], bytes[7]) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10usize),
        (2, 0) => {
            if bytes.len() < 12 {
                return Err(NpyError::MalformedHeader("truncated v2 preamble".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        (major, minor) => {
            return Err(NpyError::MalformedHeader(format!(
                "unsupported version {major}.{minor}"
            )))
        }
    };
    let end = prefix
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| NpyError::MalformedHeader("header length exceeds file".into()))?;
    let text = std::str::from_utf8(&bytes[prefix..end])
        .map_err(|_| NpyError::MalformedHeader("header is not valid text".into()))?;
    Ok((parse_header_dict(text.trim_end())?, end))
}

/// Decodes an npy byte buffer into a validated attention tensor.
pub fn decode_npy(bytes: &[u8]) -> Result<Tensor3, NpyError> {
    let (header, offset) = read_header(bytes)?;
    let shape: [usize; 3] = header.shape.as_slice().try_into().map_err(|_| {
        NpyError::ShapeMismatch(format!(
            "expected 3 dimensions, header declares {:?}",
            header.shape
        ))
    })?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| NpyError::ShapeMismatch(format!("shape {shape:?} overflows")))?;
    let payload = &bytes[offset..];
    let width = header.dtype.width();
    if count.checked_mul(width) != Some(payload.len()) {
        return Err(NpyError::ShapeMismatch(format!(
            "shape {shape:?} needs {} payload bytes, file has {}",
            count.saturating_mul(width),
            payload.len()
        )));
    }
    let data: Vec<f32> = match header.dtype {
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
    };
    let tensor = Tensor3 { shape, data };
    tensor.validate_attention()?;
    Ok(tensor)
}

/// Encodes a tensor as npy version 1.0, `<f4`, C order.
pub fn encode_npy(tensor: &Tensor3) -> Vec<u8> {
    let [a, b, c] = tensor.shape;
    let mut dict =
        format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({a}, {b}, {c}), }}");
    // magic + version + u16 length + dict + newline must be a multiple of ALIGNMENT
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGNMENT - unpadded % ALIGNMENT) % ALIGNMENT;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + dict.len() + tensor.data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor3, NpyError> {
    decode_npy(&fs::read(path)?)
}

pub fn write_npy(tensor: &Tensor3, path: impl AsRef<Path>) -> Result<(), NpyError> {
    fs::write(path, encode_npy(tensor))?;
    Ok(())
}
