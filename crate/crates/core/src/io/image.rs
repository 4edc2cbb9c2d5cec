//! Grayscale images: binary PGM (8-bit, for viewing) and little-endian PFM (lossless `f32`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn plane(x: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = x.hw()?;
    if h * w != x.numel() || h == 0 || w == 0 {
        return Err(Error::shape("save_image", format!("need a single plane, got {:?}", x.shape())));
    }
    Ok((h, w))
}

/// Header fields separated by whitespace, `#` comments allowed between them.
/// Returns the fields and the offset just past the single byte that ends the last one.
fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::with_capacity(count);
    let mut i = 0;
    while fields.len() < count {
        match bytes.get(i) {
            None => return Err(Error::format(i as u64, "truncated header")),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    if i >= bytes.len() {
        return Err(Error::format(i as u64, "header not terminated"));
    }
    Ok((fields, i + 1))
}

fn dims(fields: &[String]) -> Result<(usize, usize)> {
    let parse = |s: &String| s.parse::<usize>().ok().filter(|&v| v > 0);
    match (parse(&fields[1]), parse(&fields[2])) {
        (Some(w), Some(h)) => Ok((h, w)),
        _ => Err(Error::format(0, format!("bad dimensions {} x {}", fields[1], fields[2]))),
    }
}

/// Values are clipped to `[0, 1]` and rounded to the nearest of 256 levels.
pub fn save_pgm(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    let (h, w) = plane(x)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(x.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

/// `[H, W]` tensor with values `level / maxval`.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (fields, start) = header_fields(&bytes, 4)?;
    if fields[0] != "P5" {
        return Err(Error::format(0, format!("expected P5, found {:?}", fields[0])));
    }
    let (h, w) = dims(&fields)?;
    let maxval: u32 = fields[3]
        .parse()
        .ok()
        .filter(|m| (1..=255).contains(m))
        .ok_or_else(|| Error::format(0, format!("maxval {} is not an 8-bit level", fields[3])))?;
    let body = &bytes[start..];
    if body.len() != h * w {
        return Err(Error::format(
            (start + body.len().min(h * w)) as u64,
            format!("expected {} pixel bytes, found {}", h * w, body.len()),
        ));
    }
    Tensor::new(vec![h, w], body.iter().map(|&b| b as f64 / maxval as f64).collect())
}

/// Single-channel PFM with negative scale (little-endian); rows are stored bottom to top.
pub fn save_pfm(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    let (h, w) = plane(x)?;
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in (0..h).rev() {
        for v in &x.data()[row * w..(row + 1) * w] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (fields, start) = header_fields(&bytes, 4)?;
    if fields[0] != "Pf" {
        return Err(Error::format(0, format!("expected grayscale Pf, found {:?}", fields[0])));
    }
    let (h, w) = dims(&fields)?;
    let scale: f64 = fields[3]
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::format(0, format!("bad scale {:?}", fields[3])))?;
    let body = &bytes[start..];
    if body.len() != 4 * h * w {
        return Err(Error::format(
            (start + body.len().min(4 * h * w)) as u64,
            format!("expected {} data bytes, found {}", 4 * h * w, body.len()),
        ));
    }
    let mut data = vec![0.0; h * w];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (h - 1 - k / w, k % w);
        data[row * w + col] = v as f64;
    }
    Tensor::new(vec![h, w], data)
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

/// Dispatches on the `.pgm` / `.pfm` extension.
pub fn save_image(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "pgm" => save_pgm(path, x),
        "pfm" => save_pfm(path, x),
        other => Err(Error::contract(format!("unsupported image extension {other:?}"))),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "pgm" => load_pgm(path),
        "pfm" => load_pfm(path),
        other => Err(Error::contract(format!("unsupported image extension {other:?}"))),
    }
}
