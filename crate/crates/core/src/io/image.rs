//! Binary PPM (P6) and PGM (P5) export/import for [0,1] float images.
//!
//! Color images are (h, w, 3) tensors, single-channel maps (h, w, 1).
//! Quantization is round(clamp(v)·255); readers return v/255, so a
//! write-read cycle is exact on the 256-level lattice.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pnm<W: Write>(w: &mut W, img: &Tensor<f32>, channels: usize, magic: &str) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[2] != channels {
        return Err(Error::shape(format!(
            "expected (h, w, {channels}) image, got {s:?}"
        )));
    }
    let (h, wd) = (s[0], s[1]);
    write!(w, "{magic}\n{wd} {h}\n255\n")?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pnm(&mut w, img, 3, "P6")?;
    w.flush()?;
    Ok(())
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pnm(&mut w, map, 1, "P5")?;
    w.flush()?;
    Ok(())
}

/// One whitespace-delimited header token, skipping '#' comments.
fn next_token<R: Read>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::format("truncated image header"));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if in_comment {
            if c == b'\n' {
                in_comment = false;
            }
            continue;
        }
        if c == b'#' && tok.is_empty() {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

fn read_pnm<R: Read>(r: &mut R, channels: usize, magic: &str) -> Result<Tensor<f32>> {
    let m = next_token(r)?;
    if m != magic {
        return Err(Error::format(format!("bad image magic {m:?}, expected {magic:?}")));
    }
    let w: usize = next_token(r)?
        .parse()
        .map_err(|_| Error::format("bad image width"))?;
    let h: usize = next_token(r)?
        .parse()
        .map_err(|_| Error::format("bad image height"))?;
    let maxval: usize = next_token(r)?
        .parse()
        .map_err(|_| Error::format("bad image maxval"))?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(Error::format(format!("implausible image dimensions {w}x{h}")));
    }
    let mut buf = vec![0u8; w * h * channels];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("truncated image data")
        } else {
            Error::Io(e)
        }
    })?;
    let data: Vec<f32> = buf.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(vec![h, w, channels], data)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    read_pnm(&mut r, 3, "P6")
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    read_pnm(&mut r, 1, "P5")
}
