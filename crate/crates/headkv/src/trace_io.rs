//! Binary trace files.
//!
//! All scalars are little-endian.
//!
//! ```text
//! header  "HKVT" version:u32 layers:u32 heads:u32 d:u32 height:u32 width:u32
//!         conditional_len:u32 seed:u64
//! step    0x01 step:u32, then per head (layer-major):
//!         cache_len:u32 flag:u8 query:[f64; d]
//!         if flag == 1: len:u32 positions:[u32; len] probs:[f64; len]
//! end     0xFF crc32:u32   (CRC-32/ISO-HDLC of every preceding byte)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use headkv_core::cache::{GridSpec, HeadLayout};
use headkv_core::trace::{AttentionTrace, HeadAttention, HeadStep, StepRecord, TraceHeader};

pub const MAGIC: [u8; 4] = *b"HKVT";
pub const VERSION: u32 = 1;
const TAG_STEP: u8 = 0x01;
const TAG_END: u8 = 0xFF;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a trace file: bad magic at byte 0")]
    BadMagic,
    #[error("unsupported trace version {found} at byte 4 (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated trace: needed {needed} more bytes at byte {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch at byte {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { offset: usize, stored: u32, computed: u32 },
    #[error("unknown record tag {tag:#04x} at byte {offset}")]
    BadTag { offset: usize, tag: u8 },
    #[error("malformed trace at byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("{0} trailing bytes after checksum")]
    Trailing(usize),
}

pub fn encode(trace: &AttentionTrace) -> Vec<u8> {
    let h = &trace.header;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        h.layout.num_layers as u32,
        h.layout.num_heads as u32,
        h.grid.head_dim as u32,
        h.grid.height as u32,
        h.grid.width as u32,
        h.grid.conditional_len as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&h.seed.to_le_bytes());
    for rec in &trace.steps {
        out.push(TAG_STEP);
        out.extend_from_slice(&(rec.step as u32).to_le_bytes());
        for head in &rec.heads {
            out.extend_from_slice(&(head.cache_len as u32).to_le_bytes());
            out.push(head.attention.is_some() as u8);
            for x in &head.query {
                out.extend_from_slice(&x.to_le_bytes());
            }
            if let Some(att) = &head.attention {
                out.extend_from_slice(&(att.probs.len() as u32).to_le_bytes());
                for &p in &att.positions {
                    out.extend_from_slice(&(p as u32).to_le_bytes());
                }
                for p in &att.probs {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
        }
    }
    out.push(TAG_END);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(TraceError::Truncated { offset: self.pos, needed: n - rest });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TraceError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TraceError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TraceError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn malformed(&self, msg: impl Into<String>) -> TraceError {
        TraceError::Malformed { offset: self.pos, msg: msg.into() }
    }
}

pub fn decode(buf: &[u8]) -> Result<AttentionTrace, TraceError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| TraceError::BadMagic)? != MAGIC {
        return Err(TraceError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TraceError::Version { found: version });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [layers, heads, head_dim, height, width, conditional_len] = dims;
    let seed = r.u64()?;
    let grid = GridSpec::new(height, width, conditional_len, head_dim)
        .map_err(|e| TraceError::Malformed { offset: 8, msg: e.to_string() })?;
    let layout = HeadLayout::new(layers, heads);
    let mut trace = AttentionTrace::new(TraceHeader { layout, grid, seed });

    loop {
        let at = r.pos;
        match r.u8()? {
            TAG_STEP => {
                let step = r.u32()? as usize;
                if trace.steps.last().is_some_and(|s| s.step >= step) {
                    return Err(TraceError::Malformed { offset: at + 1, msg: format!("step {step} out of order") });
                }
                let mut hs = Vec::new();
                for _ in 0..layout.len() {
                    let cache_len = r.u32()? as usize;
                    let flag = r.u8()?;
                    if flag > 1 {
                        return Err(TraceError::Malformed { offset: r.pos - 1, msg: format!("attention flag {flag}") });
                    }
                    let query = r.f64s(head_dim)?;
                    let attention = if flag == 1 {
                        let len = r.u32()? as usize;
                        let positions = r.take(len.checked_mul(4).ok_or_else(|| r.malformed("length overflow"))?)?;
                        let positions = positions
                            .chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                            .collect();
                        Some(HeadAttention { positions, probs: r.f64s(len)? })
                    } else {
                        None
                    };
                    hs.push(HeadStep { query, cache_len, attention });
                }
                trace.steps.push(StepRecord { step, heads: hs });
            }
            TAG_END => {
                let computed = crc32fast::hash(&buf[..r.pos]);
                let crc_at = r.pos;
                let stored = r.u32()?;
                if stored != computed {
                    return Err(TraceError::Checksum { offset: crc_at, stored, computed });
                }
                if r.pos != buf.len() {
                    return Err(TraceError::Trailing(buf.len() - r.pos));
                }
                return Ok(trace);
            }
            tag => return Err(TraceError::BadTag { offset: at, tag }),
        }
    }
}

pub fn write_file(path: &Path, trace: &AttentionTrace) -> Result<(), TraceError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(trace))?;
    f.flush()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<AttentionTrace, TraceError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AttentionTrace {
        let grid = GridSpec::new(2, 3, 1, 2).unwrap();
        let mut t = AttentionTrace::new(TraceHeader { layout: HeadLayout::new(1, 2), grid, seed: 42 });
        t.steps.push(StepRecord {
            step: 0,
            heads: vec![
                HeadStep {
                    query: vec![0.5, -1.0],
                    cache_len: 2,
                    attention: Some(HeadAttention { positions: vec![0, 1], probs: vec![0.25, 0.75] }),
                },
                HeadStep { query: vec![f64::MIN_POSITIVE, 3.0], cache_len: 2, attention: None },
            ],
        });
        t
    }

    #[test]
    fn layout_is_as_documented() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"HKVT");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[40], TAG_STEP);
        // header 40 + tag 1 + step 4 + head0 (4+1+16+4+8+16) + head1 (4+1+16) + end 1 + crc 4
        assert_eq!(bytes.len(), 40 + 5 + 49 + 21 + 5);
        assert_eq!(bytes[bytes.len() - 5], TAG_END);
    }

    #[test]
    fn round_trip() {
        let t = sample();
        assert_eq!(decode(&encode(&t)).unwrap(), t);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode(&sample());
        for n in 0..bytes.len() {
            assert!(decode(&bytes[..n]).is_err(), "prefix of {n} bytes decoded");
        }
    }

    #[test]
    fn flipped_bit_fails_checksum() {
        let mut bytes = encode(&sample());
        bytes[50] ^= 0x10;
        assert!(matches!(decode(&bytes), Err(TraceError::Checksum { .. })));
    }
}
