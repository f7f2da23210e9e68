//! 8-bit binary PPM / PGM reading and writing.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageReader, RgbImage};

use crate::error::{Error, Result};

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn encode(width: u32, height: u32, data: &[u8], subtype: PnmSubtype, color: ExtendedColorType) -> Vec<u8> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(data, width, height, color)
        .expect("in-memory PNM encoding");
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let sub = PnmSubtype::Pixmap(SampleEncoding::Binary);
    encode(img.width(), img.height(), img.as_raw(), sub, ExtendedColorType::Rgb8)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let sub = PnmSubtype::Graymap(SampleEncoding::Binary);
    encode(img.width(), img.height(), img.as_raw(), sub, ExtendedColorType::L8)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    super::write_atomic(path, &encode_ppm(img))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    super::write_atomic(path, &encode_pgm(img))
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| data_err(path, e))?
        .decode()
        .map_err(|e| data_err(path, e))
}

/// Any PPM (or PNG) image as 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(decode(path)?.into_rgb8())
}

/// Any PGM (or PNG) image as 8-bit luminance.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(decode(path)?.into_luma8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 70, 255 - x as u8]));
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(read_rgb(&path).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(4, 6, |x, y| image::Luma([if (x + y) % 2 == 0 { 255 } else { 0 }]));
        let path = dir.path().join("m.pgm");
        write_pgm(&path, &img).unwrap();
        assert!(std::fs::read(&path).unwrap().starts_with(b"P5"));
        assert_eq!(read_gray(&path).unwrap(), img);
    }

    #[test]
    fn corrupt_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\n\x01\x02").unwrap();
        assert!(matches!(read_rgb(&path), Err(Error::Data(_))));
        assert!(matches!(read_rgb(&dir.path().join("missing.ppm")), Err(Error::Io { .. })));
    }
}
