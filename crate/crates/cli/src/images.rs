//! Decoding to the in-memory `[0, 1]` RGB contract and lossless PNG output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use arreid_core::{Image, ImageShape};
use image::imageops::FilterType;
use image::RgbImage;

fn to_image(rgb: &RgbImage) -> Result<Image> {
    let shape = ImageShape::new(rgb.height() as usize, rgb.width() as usize)?;
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::new(shape, 3, data)?)
}

fn decode(path: &Path) -> Result<RgbImage> {
    // grayscale and alpha inputs collapse to plain RGB here
    Ok(image::open(path)
        .with_context(|| format!("decoding {}", path.display()))?
        .to_rgb8())
}

/// Native-size RGB image.
pub fn load(path: &Path) -> Result<Image> {
    to_image(&decode(path)?)
}

/// Bilinear resize to `shape`.
pub fn load_resized(path: &Path, shape: ImageShape) -> Result<Image> {
    let rgb = decode(path)?;
    if rgb.height() as usize == shape.height && rgb.width() as usize == shape.width {
        return to_image(&rgb);
    }
    let resized = image::imageops::resize(&rgb, shape.width as u32, shape.height as u32, FilterType::Triangle);
    to_image(&resized)
}

pub fn to_bytes(img: &Image) -> Vec<u8> {
    img.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// Writes 8-bit RGB with one tEXt chunk per `(key, value)`.
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8], text: &[(String, String)]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.clone(), v.clone())?;
    }
    let mut writer = enc.write_header()?;
    writer.write_image_data(rgb)?;
    writer.finish()?;
    Ok(())
}

pub fn write(path: &Path, img: &Image, text: &[(String, String)]) -> Result<()> {
    write_rgb(path, img.shape.width, img.shape.height, &to_bytes(img), text)
}

/// tEXt chunks of a PNG, in file order.
#[cfg(test)]
pub fn read_text(path: &Path) -> Result<Vec<(String, String)>> {
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let reader = decoder.read_info()?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_keeps_pixels_and_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let shape = ImageShape::new(3, 5).unwrap();
        let data: Vec<f64> = (0..45).map(|i| (i * 5) as f64 / 255.0).collect();
        let img = Image::new(shape, 3, data).unwrap();
        let text = vec![("config_hash".to_string(), "abc".to_string())];
        write(&path, &img, &text).unwrap();
        assert_eq!(load(&path).unwrap(), img);
        assert_eq!(read_text(&path).unwrap(), text);
    }

    #[test]
    fn resize_hits_target_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.png");
        write(&path, &Image::filled(ImageShape::new(10, 20).unwrap(), 3, 0.5), &[]).unwrap();
        let out = load_resized(&path, ImageShape::new(4, 6).unwrap()).unwrap();
        assert_eq!((out.shape.height, out.shape.width), (4, 6));
        assert!(out.data.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));
    }
}
