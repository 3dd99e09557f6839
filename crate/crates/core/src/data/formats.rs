//! `.flo` flow files, PFM float maps, PPM (P6) images and PGM (P5) masks.
//!
//! PFM stores one channel as `Pf` and three as `PF`. Two-channel maps are
//! written as `PF` with a zero third channel; four-channel maps as a `Pf`
//! image with the channel planes stacked vertically, channel 0 on top.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const FLO_MAGIC: &[u8; 4] = b"PIEH";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn truncated(offset: usize, what: &str, need: usize, have: usize) -> Error {
    Error::parse(
        offset,
        format!("truncated {what}: expected {need} bytes, found {have}"),
    )
}

pub fn encode_flo(flow: &Tensor) -> Result<Vec<u8>> {
    let s = flow.shape();
    if s.c != 2 {
        return Err(Error::shape("encode_flo", format!("flow {s} must have 2 channels")));
    }
    let mut out = Vec::with_capacity(12 + 4 * s.len());
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(s.w as i32).to_le_bytes());
    out.extend_from_slice(&(s.h as i32).to_le_bytes());
    for i in 0..s.plane() {
        out.extend_from_slice(&flow.data()[i].to_le_bytes());
        out.extend_from_slice(&flow.data()[s.plane() + i].to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(truncated(0, ".flo header", 12, bytes.len()));
    }
    if &bytes[..4] != FLO_MAGIC {
        return Err(Error::parse(0, format!("bad .flo magic {:?}", &bytes[..4])));
    }
    let dim = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let (w, h) = (dim(4), dim(8));
    if w <= 0 || h <= 0 {
        return Err(Error::parse(4, format!("non-positive .flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 8 * w * h;
    let body = &bytes[12..];
    if body.len() != need {
        return Err(if body.len() < need {
            truncated(12, ".flo data", need, body.len())
        } else {
            Error::parse(12 + need, format!("{} trailing bytes", body.len() - need))
        });
    }
    let plane = w * h;
    let mut data = vec![0f32; 2 * plane];
    for (i, px) in body.chunks_exact(8).enumerate() {
        data[i] = f32::from_le_bytes(px[..4].try_into().expect("4 bytes"));
        data[plane + i] = f32::from_le_bytes(px[4..].try_into().expect("4 bytes"));
    }
    Tensor::from_vec(Shape::new(2, h, w), data)
}

pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    write_file(path, &encode_flo(flow)?)
}

pub fn read_flo(path: &Path) -> Result<Tensor> {
    decode_flo(&read_file(path)?)
}

/// Whitespace-separated header tokens of the netpbm family.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, "unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::parse(start, "non-ASCII header"))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let start = self.pos;
        let t = self.token()?;
        t.parse().map_err(|_| Error::parse(start, format!("bad {what} `{t}`")))
    }

    /// Skip the single whitespace byte that ends the header.
    fn body(&mut self) -> Result<usize> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::parse(self.pos, "missing whitespace before data"));
        }
        Ok(self.pos + 1)
    }
}

fn check_body(bytes: &[u8], start: usize, need: usize, what: &str) -> Result<()> {
    let have = bytes.len() - start;
    if have < need {
        return Err(truncated(start, what, need, have));
    }
    if have > need {
        return Err(Error::parse(start + need, format!("{} trailing bytes", have - need)));
    }
    Ok(())
}

/// Raw PFM image: `Pf` gives one channel, `PF` three.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor> {
    let mut hd = Header { bytes, pos: 0 };
    let c = match hd.token()? {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::parse(0, format!("bad PFM magic `{m}`"))),
    };
    let w: usize = hd.number("width")?;
    let h: usize = hd.number("height")?;
    let scale: f32 = hd.number("scale")?;
    if w == 0 || h == 0 {
        return Err(Error::parse(0, format!("empty PFM size {w}x{h}")));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(hd.pos, format!("bad PFM scale {scale}")));
    }
    let little = scale < 0.0;
    let start = hd.body()?;
    check_body(bytes, start, 4 * c * w * h, "PFM data")?;
    let mut t = Tensor::zeros(Shape::new(c, h, w));
    for (k, v) in bytes[start..].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = v.try_into().expect("4 bytes");
        let val = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let ch = k % c;
        let px = k / c;
        // rows are stored bottom to top
        let (row, x) = (px / w, px % w);
        t.set(ch, h - 1 - row, x, val);
    }
    Ok(t)
}

/// PFM bytes for a 1- or 3-channel map, little-endian.
pub fn encode_pfm(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    let magic = match s.c {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::shape("encode_pfm", format!("{c} channels; PFM holds 1 or 3"))),
    };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", s.w, s.h).into_bytes();
    out.reserve(4 * s.len());
    for row in (0..s.h).rev() {
        for x in 0..s.w {
            for c in 0..s.c {
                out.extend_from_slice(&t.get(c, row, x).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Encode a 1-, 2-, 3- or 4-channel target map.
pub fn encode_map(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    match s.c {
        1 | 3 => encode_pfm(t),
        2 => encode_pfm(&t.concat(&Tensor::zeros(Shape::new(1, s.h, s.w)))?),
        4 => encode_pfm(&Tensor::from_vec(Shape::new(1, 4 * s.h, s.w), t.data().to_vec())?),
        c => Err(Error::shape("encode_map", format!("{c} channels not storable"))),
    }
}

/// Decode a map written by [`encode_map`] with `channels` channels.
pub fn decode_map(bytes: &[u8], channels: usize) -> Result<Tensor> {
    let raw = decode_pfm(bytes)?;
    let s = raw.shape();
    match (channels, s.c) {
        (1, 1) | (3, 3) => Ok(raw),
        (2, 3) => raw.slice_channels(0..2),
        (4, 1) if s.h % 4 == 0 => Tensor::from_vec(Shape::new(4, s.h / 4, s.w), raw.into_vec()),
        _ => Err(Error::parse(0, format!("PFM with {} channels and height {} cannot hold {channels} channels", s.c, s.h))),
    }
}

pub fn write_map(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_map(t)?)
}

pub fn read_map(path: &Path, channels: usize) -> Result<Tensor> {
    decode_map(&read_file(path)?, channels)
}

/// 8-bit binary PPM of a `[3, H, W]` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::shape("encode_ppm", format!("image {s} must have 3 channels")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

fn netpbm_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut hd = Header { bytes, pos: 0 };
    let m = hd.token()?;
    if m != magic {
        return Err(Error::parse(0, format!("bad magic `{m}`, expected `{magic}`")));
    }
    let w: usize = hd.number("width")?;
    let h: usize = hd.number("height")?;
    let max: usize = hd.number("maxval")?;
    if max != 255 {
        return Err(Error::parse(hd.pos, format!("only 8-bit maxval 255 is supported, got {max}")));
    }
    Ok((w, h, hd.body()?))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, start) = netpbm_header(bytes, "P6")?;
    check_body(bytes, start, 3 * w * h, "PPM data")?;
    let body = &bytes[start..];
    Ok(Tensor::from_fn(Shape::new(3, h, w), |c, y, x| body[3 * (y * w + x) + c] as f32 / 255.0))
}

/// PGM mask: 255 where valid, 0 elsewhere.
pub fn encode_pgm_mask(mask: &Tensor) -> Result<Vec<u8>> {
    let s = mask.shape();
    if s.c != 1 {
        return Err(Error::shape("encode_pgm_mask", format!("mask {s} must have 1 channel")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(mask.data().iter().map(|&v| if v != 0.0 { 255u8 } else { 0 }));
    Ok(out)
}

/// Any nonzero byte reads as valid.
pub fn decode_pgm_mask(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, start) = netpbm_header(bytes, "P5")?;
    check_body(bytes, start, w * h, "PGM data")?;
    Tensor::from_vec(
        Shape::new(1, h, w),
        bytes[start..].iter().map(|&b| if b > 0 { 1.0 } else { 0.0 }).collect(),
    )
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_file(path, &encode_ppm(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read_file(path)?)
}

pub fn write_pgm_mask(path: &Path, mask: &Tensor) -> Result<()> {
    write_file(path, &encode_pgm_mask(mask)?)
}

pub fn read_pgm_mask(path: &Path) -> Result<Tensor> {
    decode_pgm_mask(&read_file(path)?)
}
