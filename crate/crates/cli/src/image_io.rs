//! 8-bit PNG reading and writing.
//!
//! Only 8-bit RGB and RGBA files are accepted. Alpha is discarded on read,
//! without compositing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};
use taylorir::metrics::ImageU8;

use crate::CliError;

fn png_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Image { path: path.to_path_buf(), msg: msg.to_string() }
}

pub fn png_read(path: &Path) -> Result<ImageU8, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let info = reader.info();
    if info.bit_depth != BitDepth::Eight {
        return Err(png_err(path, format!("unsupported bit depth {:?}, only 8-bit images are read", info.bit_depth)));
    }
    let channels = match info.color_type {
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(png_err(path, "palette (indexed colour) images are not supported")),
        ColorType::Grayscale | ColorType::GrayscaleAlpha => {
            return Err(png_err(path, "grayscale images are not supported"))
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf[..frame.buffer_size()].chunks(frame.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            rgb.extend_from_slice(&px[..3]);
        }
    }
    Ok(ImageU8::new(h, w, rgb)?)
}

pub fn png_write(path: &Path, img: &ImageU8) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(img.data()).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}
