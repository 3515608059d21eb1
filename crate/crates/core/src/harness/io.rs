//! Binary PPM frames and raw depth grids.

use std::path::Path;

use autodiff::Tensor;

use crate::{invalid, Error, Result};

const DEPTH_MAGIC: &[u8; 8] = b"STD4DDEP";

/// Quantizes an `[H, W, 3]` image in `[0, 1]` to P6 bytes.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return invalid(format!("PPM images must be [H, W, 3], got {s:?}"));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

fn header_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(&buf[start..*pos])
}

pub fn decode_ppm(buf: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if header_token(buf, &mut pos)? != b"P6" {
        return Err(Error::Format("not a binary PPM".into()));
    }
    let mut num = || -> Result<usize> {
        std::str::from_utf8(header_token(buf, &mut pos)?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PPM header field".into()))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(Error::Format(format!("unsupported PPM depth {max}")));
    }
    pos += 1;
    let body = buf.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * 3 {
        return Err(Error::Format(format!(
            "PPM body has {} bytes, expected {}",
            body.len(),
            w * h * 3
        )));
    }
    Ok(Tensor::new(
        [h, w, 3],
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    )?)
}

/// 16-byte header (magic, width, height as little-endian `u32`) followed by
/// little-endian `f32` values.
pub fn encode_depth(depth: &Tensor) -> Result<Vec<u8>> {
    let s = depth.shape();
    if s.len() != 2 {
        return invalid(format!("depth maps must be [H, W], got {s:?}"));
    }
    let mut out = Vec::with_capacity(16 + 4 * depth.numel());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(s[1] as u32).to_le_bytes());
    out.extend_from_slice(&(s[0] as u32).to_le_bytes());
    for &v in depth.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < 16 || &buf[..8] != DEPTH_MAGIC {
        return Err(Error::Format("not a depth grid".into()));
    }
    let w = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(buf[12..16].try_into().expect("4 bytes")) as usize;
    if buf.len() != 16 + 4 * w * h {
        return Err(Error::Format(
            "depth grid size does not match its header".into(),
        ));
    }
    let data = buf[16..]
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new([h, w], data)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `[V, T, H, W, 3]` frames as `v{view}_t{frame}.ppm` under `dir`.
pub fn write_video(dir: &Path, video: &Tensor) -> Result<()> {
    let s = video.shape();
    if s.len() != 5 {
        return invalid(format!("videos must be [V, T, H, W, 3], got {s:?}"));
    }
    for v in 0..s[0] {
        let view = video.index_axis0(v)?;
        for t in 0..s[1] {
            write_bytes(
                &dir.join(format!("v{v}_t{t}.ppm")),
                &encode_ppm(&view.index_axis0(t)?)?,
            )?;
        }
    }
    Ok(())
}

/// Reads `v{view}_t{frame}.ppm` under `dir` back into `[V, T, H, W, 3]`.
pub fn read_video(dir: &Path, views: usize, frames: usize) -> Result<Tensor> {
    let mut vs = Vec::with_capacity(views);
    for v in 0..views {
        let seq = (0..frames)
            .map(|t| decode_ppm(&read_bytes(&dir.join(format!("v{v}_t{t}.ppm")))?))
            .collect::<Result<Vec<_>>>()?;
        vs.push(Tensor::stack(&seq)?);
    }
    Ok(Tensor::stack(&vs)?)
}
