use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;

use crate::error::{CliError, CliResult};

/// Writes `values` as an 8-bit grayscale PNG, mapping `[lo, hi]` to `[0, 255]`.
pub fn write_gray_png(path: &Path, values: &Array2<f32>, lo: f32, hi: f32) -> CliResult<()> {
    let io_err = |e: &dyn std::fmt::Display| CliError::usage(format!("cannot write {}: {e}", path.display()));
    let (h, w) = values.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = values
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = File::create(path).map_err(|e| io_err(&e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| io_err(&e))?;
    writer.write_image_data(&pixels).map_err(|e| io_err(&e))?;
    writer.finish().map_err(|e| io_err(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_dimensions_and_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let a = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f32 / 14.0);
        write_gray_png(&path, &a, 0.0, 1.0).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (5, 3));
        assert_eq!(buf[0], 0);
        assert_eq!(buf[14], 255);
    }
}
