//! 8-bit RGB PNG IO and the PSNR/SSIM metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::diffmath::{Real, Tensor};

use super::DataError;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Decodes a PNG into `[H, W, 3]` values `v / 255`. Alpha is dropped and
/// grayscale is replicated across channels.
pub fn read_png(path: &Path) -> Result<Tensor<f64>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let png_err = |e: png::DecodingError| DataError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| DataError::Png {
        path: path.to_path_buf(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut data = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        let line = &buf[row * info.line_size..];
        for col in 0..w {
            let px = &line[col * channels..(col + 1) * channels];
            let rgb = if channels >= 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
            data.extend(rgb.iter().map(|&b| b as f64 / 255.0));
        }
    }
    Ok(Tensor::new(&[h, w, 3], data))
}

/// Encodes `[H, W, 3]` values in `[0, 1]` as 8-bit RGB, rounding half up.
pub fn write_png<T: Real>(path: &Path, image: &Tensor<T>) -> Result<(), DataError> {
    let s = image.shape();
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.f64().clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect();
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let png_err = |e: png::EncodingError| DataError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), s[1] as u32, s[0] as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn check_shapes(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(), DataError> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(DataError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP`] when `mse < 1e-10`.
pub fn psnr(img: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64, DataError> {
    check_shapes(img, reference)?;
    let n = img.len() as f64;
    let mse = img
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5) and channels,
/// with `K1 = 0.01`, `K2 = 0.03` and dynamic range 1. The window shrinks to
/// the largest odd size that fits smaller images.
pub fn ssim(img: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64, DataError> {
    check_shapes(img, reference)?;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (x, y) = (img.data(), reference.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for top in 0..=h - size {
            for left in 0..=w - size {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let k = g[i] * g[j];
                        let idx = ((top + i) * w + left + j) * 3 + ch;
                        let (a, b) = (x[idx], y[idx]);
                        mx += k * a;
                        my += k * b;
                        xx += k * a * a;
                        yy += k * b * b;
                        xy += k * a * b;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[h, w, 3], (0..h * w * 3).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let bytes: Vec<f64> = (0..5 * 7 * 3).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let img = Tensor::new(&[5, 7, 3], bytes);
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
        let as_f32: Tensor<f32> = img.convert();
        write_png(&path, &as_f32).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }

    #[test]
    fn png_rounds_half_up_and_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let img = Tensor::new(&[1, 2, 3], vec![0.5 / 255.0, 1.49 / 255.0, -0.2, 1.7, 0.5, 1.0]);
        write_png(&path, &img).unwrap();
        let back: Vec<u8> = read_png(&path).unwrap().data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, vec![1, 1, 0, 255, 128, 255]);
    }

    #[test]
    fn missing_png_is_reported_as_missing() {
        let err = read_png(Path::new("/nonexistent/a.png")).unwrap_err();
        assert_eq!(err.code(), "missing-file");
    }

    #[test]
    fn psnr_values() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let base = Tensor::full(&[8, 8, 3], 0.3);
        let shifted = Tensor::full(&[8, 8, 3], 0.4);
        assert!((psnr(&shifted, &base).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &random_image(8, 9, 2)).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = random_image(24, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // pattern that avoids mid-gray: every value is far from 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pattern: Vec<f64> = (0..24 * 20 * 3)
            .map(|_| if rng.random::<bool>() { rng.random_range(0.0..0.2) } else { rng.random_range(0.8..1.0) })
            .collect();
        let img = Tensor::new(&[24, 20, 3], pattern);
        let inv = img.map(|v| 1.0 - v);
        assert!(ssim(&img, &inv).unwrap() < 0.1);
    }

    #[test]
    fn ssim_single_window_matches_direct_formula() {
        let a = random_image(11, 11, 5);
        let b = random_image(11, 11, 6);
        let g = gaussian_window(11, 1.5);
        let mut want = 0.0;
        for ch in 0..3 {
            let px = |t: &Tensor<f64>, i: usize, j: usize| t.data()[(i * 11 + j) * 3 + ch];
            let wsum = |f: &dyn Fn(usize, usize) -> f64| {
                let mut s = 0.0;
                for i in 0..11 {
                    for j in 0..11 {
                        s += g[i] * g[j] * f(i, j);
                    }
                }
                s
            };
            let mx = wsum(&|i, j| px(&a, i, j));
            let my = wsum(&|i, j| px(&b, i, j));
            let vx = wsum(&|i, j| (px(&a, i, j) - mx).powi(2));
            let vy = wsum(&|i, j| (px(&b, i, j) - my).powi(2));
            let cov = wsum(&|i, j| (px(&a, i, j) - mx) * (px(&b, i, j) - my));
            let (c1, c2) = (1e-4, 9e-4);
            want += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)) / 3.0;
        }
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }
}
