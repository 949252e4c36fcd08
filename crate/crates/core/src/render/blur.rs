use image::RgbImage;

const WEIGHT_BITS: u32 = 16;

/// Integer Gaussian kernel of radius `ceil(3 sigma)` whose weights sum to
/// exactly `1 << 16`.
pub(crate) fn kernel(sigma: f64) -> Vec<u64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let scale = (1u64 << WEIGHT_BITS) as f64;
    let mut weights: Vec<u64> = raw
        .iter()
        .map(|w| (w / total * scale).round() as u64)
        .collect();
    let sum: u64 = weights.iter().sum();
    let center = radius as usize;
    // push the rounding residue into the center tap
    weights[center] = (weights[center] as i64 + (1i64 << WEIGHT_BITS) - sum as i64) as u64;
    weights
}

/// Separable Gaussian blur with clamp-to-edge sampling, in fixed point so
/// the output is identical on every platform.
pub(crate) fn gaussian_blur(src: &RgbImage, sigma: f64) -> RgbImage {
    let (w, h) = src.dimensions();
    let (wu, hu) = (w as usize, h as usize);
    let weights = kernel(sigma);
    let radius = (weights.len() / 2) as i64;
    let data = src.as_raw();

    // horizontal pass keeps 8 fractional bits
    let mut mid = vec![0u32; wu * hu * 3];
    for y in 0..hu {
        let row = y * wu * 3;
        for x in 0..wu {
            let mut acc = [0u64; 3];
            for (k, wt) in weights.iter().enumerate() {
                let sx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                let idx = row + sx * 3;
                for c in 0..3 {
                    acc[c] += wt * data[idx + c] as u64;
                }
            }
            for c in 0..3 {
                mid[row + x * 3 + c] =
                    ((acc[c] + (1 << (WEIGHT_BITS - 9))) >> (WEIGHT_BITS - 8)) as u32;
            }
        }
    }

    let mut out = RgbImage::new(w, h);
    let buf: &mut [u8] = &mut out;
    let shift = WEIGHT_BITS + 8;
    for y in 0..hu {
        for x in 0..wu {
            let mut acc = [0u64; 3];
            for (k, wt) in weights.iter().enumerate() {
                let sy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                let idx = (sy * wu + x) * 3;
                for c in 0..3 {
                    acc[c] += wt * mid[idx + c] as u64;
                }
            }
            let o = (y * wu + x) * 3;
            for c in 0..3 {
                buf[o + c] = ((acc[c] + (1 << (shift - 1))) >> shift).min(255) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for sigma in [0.5, 1.0, 2.0, 3.7, 8.0] {
            let k = kernel(sigma);
            assert_eq!(k.iter().sum::<u64>(), 1 << WEIGHT_BITS);
            let n = k.len();
            for i in 0..n / 2 {
                assert_eq!(k[i], k[n - 1 - i]);
            }
            assert_eq!(n as i64, 2 * (3.0 * sigma).ceil() as i64 + 1);
        }
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = RgbImage::from_pixel(17, 9, image::Rgb([37, 200, 255]));
        assert_eq!(gaussian_blur(&img, 2.5), img);
    }

    #[test]
    fn impulse_spreads_symmetrically() {
        let mut img = RgbImage::new(21, 21);
        img.put_pixel(10, 10, image::Rgb([255, 255, 255]));
        let out = gaussian_blur(&img, 2.0);
        let c = out.get_pixel(10, 10)[0];
        assert!(c < 255 && c > 0);
        assert_eq!(out.get_pixel(8, 10), out.get_pixel(12, 10));
        assert_eq!(out.get_pixel(10, 8), out.get_pixel(10, 12));
        assert_eq!(out.get_pixel(8, 10), out.get_pixel(10, 8));
    }
}
