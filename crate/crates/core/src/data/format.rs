//! Little-endian binary formats for patch tokens (`PTOK`) and prompt embeddings (`TEMB`).
//!
//! ```text
//! PTOK | u32 version=1 | u32 P | u32 d   | P*d f32 (token-major)
//! TEMB | u32 version=1 | u32 d_t         | d_t f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::film::normalize_prompt;
use crate::numeric::Tensor;

pub const TOKEN_MAGIC: &[u8; 4] = b"PTOK";
pub const PROMPT_MAGIC: &[u8; 4] = b"TEMB";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Sequential little-endian reader over an in-memory file.
pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(format_err(
                self.path,
                self.pos,
                format!(
                    "truncated: expected {n} more bytes, found {} (file length {})",
                    self.remaining(),
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != expected {
            return Err(format_err(
                self.path,
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, supported: u32) -> Result<u32> {
        let at = self.pos;
        let v = self.u32()?;
        if v != supported {
            return Err(format_err(
                self.path,
                at,
                format!("unsupported version {v}, expected {supported}"),
            ));
        }
        Ok(v)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(format_err(
                self.path,
                self.pos,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes via a temporary sibling and rename, so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// `(P, d)` from a token-file header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenHeader {
    pub tokens: usize,
    pub channels: usize,
}

fn parse_token_header(reader: &mut Reader<'_>) -> Result<TokenHeader> {
    reader.magic(TOKEN_MAGIC)?;
    reader.version(FORMAT_VERSION)?;
    let tokens = reader.u32()? as usize;
    let channels = reader.u32()? as usize;
    Ok(TokenHeader { tokens, channels })
}

/// Reads only the 16-byte header.
pub fn read_token_header(path: &Path) -> Result<TokenHeader> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = Vec::with_capacity(16);
    Read::take(&mut f, 16)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    parse_token_header(&mut Reader::new(path, &head))
}

/// A `P x d` token matrix.
pub fn read_token_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(path, &bytes);
    let h = parse_token_header(&mut r)?;
    let count = h.tokens * h.channels;
    if r.remaining() != count * 4 {
        return Err(format_err(
            path,
            r.pos(),
            format!(
                "expected {} payload bytes for P={} d={}, found {}",
                count * 4,
                h.tokens,
                h.channels,
                r.remaining()
            ),
        ));
    }
    let data = r.f32s(count)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("token file {}", path.display())));
    }
    Tensor::from_vec(&[h.tokens, h.channels], data)
}

pub fn encode_token_file(tokens: &Tensor<f32>) -> Result<Vec<u8>> {
    let (p, d) = tokens.dims2()?;
    let mut buf = Vec::with_capacity(16 + p * d * 4);
    buf.extend_from_slice(TOKEN_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(p as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    push_f32s(&mut buf, tokens.data());
    Ok(buf)
}

pub fn write_token_file(path: &Path, tokens: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_token_file(tokens)?)
}

/// Prompt vector exactly as stored, without normalization.
pub fn read_prompt_file_raw(path: &Path) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(PROMPT_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let dim = r.u32()? as usize;
    let v = r.f32s(dim)?;
    r.finish()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("prompt file {}", path.display())));
    }
    Ok(v)
}

/// Prompt embedding, L2-normalized on load.
pub fn read_prompt_file(path: &Path) -> Result<Vec<f32>> {
    normalize_prompt(&read_prompt_file_raw(path)?)
}

/// Like [`read_prompt_file`] but rejects a width other than `expected_dim`.
pub fn read_prompt_file_expect(path: &Path, expected_dim: usize) -> Result<Vec<f32>> {
    let v = read_prompt_file(path)?;
    if v.len() != expected_dim {
        return Err(Error::config(format!(
            "prompt {} has width {}, expected {expected_dim}",
            path.display(),
            v.len()
        )));
    }
    Ok(v)
}

pub fn write_prompt_file(path: &Path, prompt: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + prompt.len() * 4);
    buf.extend_from_slice(PROMPT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(prompt.len() as u32).to_le_bytes());
    push_f32s(&mut buf, prompt);
    write_atomic(path, &buf)
}
