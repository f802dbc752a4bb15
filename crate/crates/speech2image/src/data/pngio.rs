//! PNG encode/decode plus conversions between 8-bit RGB and the [-1, 1]
//! float tensors the models consume.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Contract(format!(
            "rgb buffer {} bytes, expected {}",
            rgb.len(),
            width * height * 3
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Data(format!("png header: {e}")))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Data(format!("png body: {e}")))?;
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|px| [px[0], px[1], px[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    Ok((w, h, rgb))
}

/// Planar [3, h, w] floats in [-1, 1] -> interleaved 8-bit RGB.
pub fn tensor_to_rgb(img: &Tensor<f32>) -> Vec<u8> {
    let s = img.shape();
    assert!(s.len() == 3 && s[0] == 3, "expected [3, h, w], got {s:?}");
    let (h, w) = (s[1], s[2]);
    let v = img.to_vec();
    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let f = v[(c * h + y) * w + x].clamp(-1.0, 1.0);
                rgb[(y * w + x) * 3 + c] = ((f + 1.0) * 0.5 * 255.0).round() as u8;
            }
        }
    }
    rgb
}

/// Interleaved 8-bit RGB -> planar [3, h, w] floats in [-1, 1].
/// 0 maps exactly to -1 and 255 exactly to +1.
pub fn rgb_to_tensor(width: usize, height: usize, rgb: &[u8]) -> Tensor<f32> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut data = vec![0f32; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let v = rgb[(y * width + x) * 3 + c] as f32 / 255.0;
                data[(c * height + y) * width + x] = v * 2.0 - 1.0;
            }
        }
    }
    Tensor::from_vec(data, &[3, height, width])
}

/// Tile images (all [3, h, w]) into a `cols`-wide contact sheet.
pub fn tile_sheet(images: &[Tensor<f32>], cols: usize) -> (usize, usize, Vec<u8>) {
    assert!(!images.is_empty() && cols > 0);
    let s = images[0].shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let rows = images.len().div_ceil(cols);
    let (sheet_w, sheet_h) = (cols * w, rows * h);
    let mut sheet = vec![0u8; sheet_w * sheet_h * 3];
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.shape(), s.as_slice(), "mixed tile sizes");
        let rgb = tensor_to_rgb(img);
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            let dst = ((r * h + y) * sheet_w + c * w) * 3;
            let src = y * w * 3;
            sheet[dst..dst + w * 3].copy_from_slice(&rgb[src..src + w * 3]);
        }
    }
    (sheet_w, sheet_h, sheet)
}
