//! 8-bit pixmap/graymap reading and writing.

use std::path::Path;

use std::fs::File;
use std::io::BufWriter;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::frontend::Image;
use crate::tensor::Tensor;

fn format_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Format {
            what: "portable anymap",
            reason: format!("{}: {other}", path.display()),
        },
    }
}

fn write(path: &Path, width: usize, height: usize, bytes: &[u8], gray: bool) -> Result<()> {
    let (channels, subtype, color) = if gray {
        (1, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (3, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    if bytes.len() != width * height * channels {
        return Err(Error::InvalidArgument(format!(
            "{} bytes do not form a {width}x{height} image with {channels} channels",
            bytes.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| format_err(path, e))
}

/// Binary (P6) pixmap.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write(path, width, height, rgb, false)
}

/// Binary (P5) graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write(path, width, height, gray, true)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let mut reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.set_format(ImageFormat::Pnm);
    reader.decode().map_err(|e| format_err(path, e))
}

/// Returns `(width, height, rgb bytes)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = open(path)?.into_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// Returns `(width, height, gray bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = open(path)?.into_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn image_from_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Image> {
    let data = rgb.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(Tensor::new(vec![height, width, 3], data)?)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let (w, h, rgb) = read_ppm(path)?;
    image_from_rgb(w, h, &rgb)
}
