//! Portable FloatMap (PFM) images: lossless float RGB for renders and
//! environment maps. Written little-endian (`scale = -1.0`), rows
//! bottom-to-top per the format.

use std::fs;
use std::path::Path;

use hscat_core::lighting::EnvMap;
use hscat_core::render::Image;

use crate::error::{HscatError, Result};

fn encode(width: usize, height: usize, data: &[[f64; 3]]) -> Vec<u8> {
    let mut out = format!("PF\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(width * height * 12);
    for row in (0..height).rev() {
        for col in 0..width {
            for c in 0..3 {
                out.extend_from_slice(&(data[row * width + col][c] as f32).to_le_bytes());
            }
        }
    }
    out
}

fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let bad = |msg: &str| HscatError::Format(format!("pfm: {msg}"));
    // Three whitespace-terminated header tokens: type, "w h", scale.
    let mut at = 0;
    let mut token = || -> Result<String> {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..at])
            .map_err(|_| bad("non-ascii header"))?
            .to_string();
        at += 1; // single whitespace terminator
        Ok(tok)
    };
    if token()? != "PF" {
        return Err(bad("expected color 'PF' header"));
    }
    let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token()?.parse().map_err(|_| bad("bad scale"))?;
    if width == 0 || height == 0 {
        return Err(bad("empty dimensions"));
    }
    let little = scale < 0.0;
    let need = width * height * 12;
    if bytes.len() < at + need {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![[0.0f64; 3]; width * height];
    let mut off = at;
    for row in (0..height).rev() {
        for col in 0..width {
            for c in 0..3 {
                let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
                let v = if little {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                data[row * width + col][c] = v as f64;
                off += 4;
            }
        }
    }
    Ok((width, height, data))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img.width, img.height, &img.data)).map_err(|e| HscatError::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| HscatError::io(path, e))?;
    let (width, height, data) = decode(&bytes)?;
    Ok(Image {
        width,
        height,
        data,
    })
}

pub fn write_envmap(path: &Path, map: &EnvMap) -> Result<()> {
    fs::write(path, encode(map.width, map.height, &map.data)).map_err(|e| HscatError::io(path, e))
}

pub fn read_envmap(path: &Path) -> Result<EnvMap> {
    let bytes = fs::read(path).map_err(|e| HscatError::io(path, e))?;
    let (width, height, data) = decode(&bytes)?;
    Ok(EnvMap::new(width, height, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrip_is_exact_in_f32() {
        let mut img = Image::zeros(3, 2);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = [i as f64 * 0.125, 1.0 - i as f64 * 0.0625, 0.5];
        }
        let bytes = encode(img.width, img.height, &img.data);
        let (w, h, data) = decode(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(data, img.data);
    }

    #[test]
    fn rejects_grayscale_header() {
        assert!(decode(b"Pf\n2 2\n-1.0\n").is_err());
    }
}
