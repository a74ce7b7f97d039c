//! 8-bit PNG previews of HDR renders (gamma 2.2, values clamped to [0, 1]).

use std::path::Path;

use hscat_core::render::Image;

use crate::error::{HscatError, Result};

const GAMMA: f64 = 2.2;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0).powf(1.0 / GAMMA) * 255.0).round() as u8
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(img.data.len() * 3);
    for px in &img.data {
        buf.extend_from_slice(&[to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]);
    }
    image::save_buffer_with_format(
        path,
        &buf,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| HscatError::Format(format!("png encode {}: {e}", path.display())))
}
