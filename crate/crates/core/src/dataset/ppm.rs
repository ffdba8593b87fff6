use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parse a binary P6 image with maxval 255 into `[3, H, W]`, values `v/255`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, format!("header ends before {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "P6" {
        return Err(bad(path, format!("expected P6, found `{magic}`")));
    }
    let num = |s: String, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(path, format!("invalid {what} `{s}`")))
    };
    let w = num(token("width")?, "width")?;
    let h = num(token("height")?, "height")?;
    let maxval = num(token("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(bad(path, format!("maxval {maxval} unsupported (need 255)")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad(path, "missing separator after maxval"));
    }
    let payload = &bytes[pos + 1..];
    let n = w * h;
    if payload.len() < 3 * n {
        return Err(bad(path, format!("payload has {} bytes, need {}", payload.len(), 3 * n)));
    }
    let mut data = vec![0f32; 3 * n];
    for (i, px) in payload[..3 * n].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Serialize 8-bit RGB pixels (row-major, interleaved) as P6.
pub fn encode_ppm_u8(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * w * h, "pixel buffer size");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Quantize a `[3, H, W]` image in `[0, 1]` to P6 (round to nearest).
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_ppm", format!("need [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = img.data();
    let mut rgb = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            rgb.push((d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(encode_ppm_u8(w, h, &rgb))
}

pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}
