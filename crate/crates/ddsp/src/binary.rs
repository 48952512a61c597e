//! Little-endian binary formats: network checkpoints and Gram caches.
//!
//! Checkpoint layout:
//!
//! ```text
//! magic  b"DDSPCKPT"
//! u32    version (1)
//! u32    kind (1 = separator, 2 = matcher)
//! u32    sources (1 for matchers)
//! u32    hop, frames, harmonics, order, sample_rate, mel_bands
//! u32    hidden layer count, then one u32 per hidden width
//! u64    weight count, then that many f64
//! ```
//!
//! Gram cache layout:
//!
//! ```text
//! magic  b"DDSPGRAM"
//! u32    version (1)
//! u32    dim
//! u32    representation tag
//! [u8;32] SHA-256 of the anchor as little-endian f64
//! f64 x dim      anchor
//! f64 x dim*dim  row-major matrix
//! ```

use std::path::Path;

use ddsp_core::separation::SeparatorConfig;
use ddsp_core::soundmatch::{GramMatrix, MatcherConfig};
use ddsp_core::spectral::RepresentationKind;
use ddsp_core::synth::FrameConfig;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"DDSPCKPT";
const GRAM_MAGIC: &[u8; 8] = b"DDSPGRAM";
const VERSION: u32 = 1;

/// Architecture stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    Separator(SeparatorConfig),
    Matcher(MatcherConfig),
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::Separator(c) => c.fmt(f),
            Architecture::Matcher(c) => c.fmt(f),
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "file is truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length 4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length 8")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("length 8"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn push_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn to_u32(v: usize) -> u32 {
    u32::try_from(v).expect("architecture sizes fit in u32")
}

pub fn encode_checkpoint(arch: &Architecture, weights: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * weights.len());
    out.extend_from_slice(CKPT_MAGIC);
    let (kind, sources, frame, sr, mel, hidden) = match arch {
        Architecture::Separator(c) => (1u32, c.sources, c.frame, c.sample_rate, c.mel_bands, &c.hidden),
        Architecture::Matcher(c) => (2u32, 1, c.frame, c.sample_rate, c.mel_bands, &c.hidden),
    };
    let header = [
        VERSION,
        kind,
        to_u32(sources),
        to_u32(frame.hop),
        to_u32(frame.frames),
        to_u32(frame.harmonics),
        to_u32(frame.order),
        sr,
        to_u32(mel),
        to_u32(hidden.len()),
    ];
    header.iter().chain(hidden.iter().map(|&h| to_u32(h)).collect::<Vec<_>>().iter()).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    push_f64s(&mut out, weights);
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(Architecture, Vec<f64>)> {
    let mut r = Reader { path, buf: bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let kind = r.u32()?;
    let sources = r.u32()? as usize;
    let frame = FrameConfig { hop: r.u32()? as usize, frames: r.u32()? as usize, harmonics: r.u32()? as usize, order: r.u32()? as usize };
    let sample_rate = r.u32()?;
    let mel_bands = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    if n_hidden > 64 {
        return Err(Error::format(path, "implausible hidden layer count"));
    }
    let hidden = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let arch = match kind {
        1 => Architecture::Separator(SeparatorConfig { sources, frame, sample_rate, mel_bands, hidden }),
        2 => Architecture::Matcher(MatcherConfig { frame, sample_rate, mel_bands, hidden }),
        k => return Err(Error::format(path, format!("unknown network kind {k}"))),
    };
    let n = usize::try_from(r.u64()?).map_err(|_| Error::format(path, "weight count overflow"))?;
    let weights = r.f64s(n)?;
    r.finish()?;
    Ok((arch, weights))
}

pub fn write_checkpoint(path: &Path, arch: &Architecture, weights: &[f64]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(arch, weights)).map_err(Error::io(path))
}

pub fn read_checkpoint(path: &Path) -> Result<(Architecture, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_checkpoint(path, &bytes)
}

/// SHA-256 over the little-endian bytes of `theta`.
pub fn theta_hash(theta: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in theta {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn encode_gram(g: &GramMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(56 + 8 * (g.dim + g.data.len()));
    out.extend_from_slice(GRAM_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(g.dim).to_le_bytes());
    out.extend_from_slice(&g.kind.tag().to_le_bytes());
    out.extend_from_slice(&theta_hash(&g.anchor));
    push_f64s(&mut out, &g.anchor);
    push_f64s(&mut out, &g.data);
    out
}

pub fn decode_gram(path: &Path, bytes: &[u8]) -> Result<GramMatrix> {
    let mut r = Reader { path, buf: bytes, pos: 0 };
    if r.take(8)? != GRAM_MAGIC {
        return Err(Error::format(path, "not a Gram cache (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported Gram cache version {version}")));
    }
    let dim = r.u32()? as usize;
    let kind = RepresentationKind::from_tag(r.u32()?)?;
    let hash: [u8; 32] = r.take(32)?.try_into().expect("length 32");
    let anchor = r.f64s(dim)?;
    if theta_hash(&anchor) != hash {
        return Err(Error::format(path, "anchor does not match the recorded parameter hash"));
    }
    let data = r.f64s(dim * dim)?;
    r.finish()?;
    Ok(GramMatrix { dim, data, anchor, kind })
}

pub fn write_gram(path: &Path, g: &GramMatrix) -> Result<()> {
    std::fs::write(path, encode_gram(g)).map_err(Error::io(path))
}

pub fn read_gram(path: &Path) -> Result<GramMatrix> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_gram(path, &bytes)
}
