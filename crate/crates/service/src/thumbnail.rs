//! PNG renders of stored HSV observation images.

use reid_core::image::HsvImage;

use crate::error::ServiceError;

/// 8-bit RGB pixels, row-major, from the standard HSV to RGB conversion.
pub fn rgb8(image: &HsvImage) -> Vec<u8> {
    image.to_rgb().into_iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn encode_png(image: &HsvImage) -> Result<Vec<u8>, ServiceError> {
    image.check_shape()?;
    let (w, h) = (u32::try_from(image.w), u32::try_from(image.h));
    let (Ok(w), Ok(h)) = (w, h) else {
        return Err(ServiceError::BadRequest("image too large for PNG".into()));
    };
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| ServiceError::Io(std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&rgb8(image)).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}
