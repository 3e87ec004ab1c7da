use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary PGM (`P5`, maxval 255) from a `(1, H, W)` tensor in `[0, 1]`.
/// Values are clamped, scaled by 255 and rounded half-up.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::format("PGM", format!("expected a (1, H, W) image, got {s:?}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[2], s[1]).into_bytes();
    out.extend(img.data().iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0 + 0.5).floor() as u8
    }));
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PGM", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v: &usize| v > 0)
        .ok_or_else(|| Error::format("PGM", format!("bad {what}")))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P5" {
        return Err(Error::format("PGM", "not a binary PGM (magic P5)"));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            "PGM",
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = bytes
        .get(pos + 1..)
        .filter(|b| b.len() == w * h)
        .ok_or_else(|| Error::format("PGM", format!("raster is not {w}x{h} bytes")))?;
    Ok(Tensor::new(
        vec![1, h, w],
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    )?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)?).map_err(|e| Error::file(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::format(path.display().to_string(), msg),
        other => other,
    })
}
