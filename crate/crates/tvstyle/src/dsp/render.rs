//! Grayscale PNG rendering of matrices (spectrograms, similarity maps).

use std::path::Path;

use tvstyle_core::MelSpectrogram;

use crate::error::Result;

/// Renders `rows x cols` row-major values; row 0 is drawn at the bottom.
pub fn write_png_matrix(path: &Path, rows: usize, cols: usize, values: &[f32], lo: f32, hi: f32) -> Result<()> {
    let span = (hi - lo).max(f32::EPSILON);
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in (0..rows).rev() {
        for c in 0..cols {
            let v = ((values[r * cols + c] - lo) / span).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(())
}

/// Low frequencies at the bottom, time running left to right.
pub fn write_spectrogram_png(path: &Path, m: &MelSpectrogram) -> Result<()> {
    write_png_matrix(path, m.n_mels(), m.n_frames(), m.values(), -1.0, 1.0)
}
