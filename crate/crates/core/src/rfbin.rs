//! `rfbin`: little-endian container for RF frames and delay-compensated tensors.
//!
//! ```text
//! magic "RFBIN001"
//! kind u8 (1 = RF frame, 2 = delayed tensor) | dtype u8 | reserved u16
//! probe: channels u64, pitch, fc, fs, c, cycles (f64 each)
//! kind 1: t0 f64, provenance_len u32, provenance bytes
//! kind 2: depth_px u64, lateral_px u64, z_min, z_max, x_min, x_max (f64 each)
//! rank u32, dims u64 * rank
//! payload (row-major)
//! checksum u64 (first 8 bytes of SHA-256 over everything above)
//! ```
//!
//! Only the f64 dtype is written; f32 payloads are accepted on read.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::checksum::checksum64;
use crate::error::{Error, Result};
use crate::geometry::{DelayedTensor, ImageGrid};
use crate::neural::DType;
use crate::phantom::{ProbeConfig, RfFrame};

pub const MAGIC: &[u8; 8] = b"RFBIN001";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Frame = 1,
    Delayed = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RfbinFile {
    Frame(RfFrame),
    Delayed(DelayedTensor),
}

fn put_probe(out: &mut Vec<u8>, p: &ProbeConfig) {
    out.extend_from_slice(&(p.num_channels as u64).to_le_bytes());
    for v in [p.pitch, p.center_frequency, p.sampling_frequency, p.speed_of_sound, p.pulse_cycles] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn header(kind: Kind, probe: &ProbeConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(kind as u8);
    out.push(DType::F64 as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    put_probe(&mut out, probe);
    out
}

fn finish(mut out: Vec<u8>, dims: &[usize], payload: impl Iterator<Item = f64>) -> Vec<u8> {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let sum = checksum64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn encode_frame(frame: &RfFrame) -> Vec<u8> {
    let mut out = header(Kind::Frame, &frame.probe);
    out.extend_from_slice(&frame.t0.to_le_bytes());
    out.extend_from_slice(&(frame.provenance.len() as u32).to_le_bytes());
    out.extend_from_slice(frame.provenance.as_bytes());
    let (rows, cols) = frame.samples.dim();
    finish(out, &[rows, cols], frame.samples.iter().copied())
}

pub fn encode_delayed(t: &DelayedTensor) -> Vec<u8> {
    let g = &t.grid;
    let mut out = header(Kind::Delayed, &g.probe);
    out.extend_from_slice(&(g.depth_px as u64).to_le_bytes());
    out.extend_from_slice(&(g.lateral_px as u64).to_le_bytes());
    for v in [g.z_min, g.z_max, g.x_min, g.x_max] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let (m, n, c) = t.shape();
    finish(out, &[m, n, c], t.data.iter().copied())
}

pub fn encode(file: &RfbinFile) -> Vec<u8> {
    match file {
        RfbinFile::Frame(f) => encode_frame(f),
        RfbinFile::Delayed(t) => encode_delayed(t),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("rfbin header runs past the end of the file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size does not fit in memory".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<RfbinFile> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Integrity("rfbin file is truncated".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not an rfbin file (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if checksum64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Integrity("rfbin checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let kind = c.u8()?;
    let dtype = DType::from_code(c.u8()?)?;
    if !matches!(dtype, DType::F32 | DType::F64) {
        return Err(Error::Format(format!("unsupported sample dtype {dtype:?}")));
    }
    let _reserved = c.take(2)?;
    let probe = ProbeConfig {
        num_channels: c.usize()?,
        pitch: c.f64()?,
        center_frequency: c.f64()?,
        sampling_frequency: c.f64()?,
        speed_of_sound: c.f64()?,
        pulse_cycles: c.f64()?,
    };
    probe.validate()?;

    let file = match kind {
        1 => {
            let t0 = c.f64()?;
            let len = c.u32()? as usize;
            let provenance = String::from_utf8(c.take(len)?.to_vec())
                .map_err(|_| Error::Format("provenance is not UTF-8".into()))?;
            let dims = read_dims(&mut c, 2)?;
            let data = read_payload(&mut c, dtype, &dims)?;
            if dims[1] != probe.num_channels {
                return Err(Error::shape("frame channel count differs from the probe"));
            }
            let samples = Array2::from_shape_vec((dims[0], dims[1]), data).expect("length checked");
            RfbinFile::Frame(RfFrame { samples, t0, probe, provenance })
        }
        2 => {
            let (depth_px, lateral_px) = (c.usize()?, c.usize()?);
            let (z_min, z_max, x_min, x_max) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?);
            let grid = ImageGrid::new(probe, depth_px, lateral_px, (z_min, z_max), (x_min, x_max))?;
            let dims = read_dims(&mut c, 3)?;
            let data = read_payload(&mut c, dtype, &dims)?;
            let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data).expect("length checked");
            RfbinFile::Delayed(DelayedTensor::new(data, grid)?)
        }
        other => return Err(Error::Format(format!("unknown rfbin kind {other}"))),
    };
    if c.pos != body.len() {
        return Err(Error::Format("payload length does not match the declared shape".into()));
    }
    Ok(file)
}

fn read_dims(c: &mut Cursor<'_>, rank: usize) -> Result<Vec<usize>> {
    let stored = c.u32()? as usize;
    if stored != rank {
        return Err(Error::Format(format!("expected rank {rank}, found {stored}")));
    }
    (0..rank).map(|_| c.usize()).collect()
}

fn read_payload(c: &mut Cursor<'_>, dtype: DType, dims: &[usize]) -> Result<Vec<f64>> {
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let bytes = count
        .checked_mul(dtype.size())
        .filter(|&b| b == c.buf.len() - c.pos)
        .ok_or_else(|| Error::Format("payload length does not match the declared shape".into()))?;
    let raw = c.take(bytes)?;
    Ok(match dtype {
        DType::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64).collect(),
        _ => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect(),
    })
}

pub fn read(path: impl AsRef<Path>) -> Result<RfbinFile> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, file: &RfbinFile) -> Result<()> {
    std::fs::write(path, encode(file))?;
    Ok(())
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<RfFrame> {
    match read(path)? {
        RfbinFile::Frame(f) => Ok(f),
        RfbinFile::Delayed(_) => Err(Error::Format("expected an RF frame, found a delayed tensor".into())),
    }
}
