use super::tensor::{Scalar, Tensor};
use crate::image::GrayImage;

/// Source coordinate of output sample `i` when resampling `src` samples to
/// `dst` with pixel centres aligned. Returns (lower index, upper index, weight).
#[inline]
pub(crate) fn bilinear_tap(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resampling of a row-major `sw` x `sh` raster to `dw` x `dh`.
pub(crate) fn resize_bilinear(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let xs: Vec<_> = (0..dw).map(|x| bilinear_tap(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let (y0, y1, fy) = bilinear_tap(y, sh, dh);
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Scales intensities to [0, 1] and resamples bilinearly to `target`
/// (height, width) without padding. Output shape is (1, h, w).
///
/// Panics if either target side is below 32.
pub fn preprocess<T: Scalar>(img: &GrayImage, target: (usize, usize)) -> Tensor<T> {
    let (th, tw) = target;
    assert!(th >= 32 && tw >= 32, "preprocess target {th}x{tw} is below 32x32");
    let scaled: Vec<f64> = img.pixels().iter().map(|&p| p as f64 / 255.0).collect();
    let resized = if (img.width(), img.height()) == (tw, th) {
        scaled
    } else {
        resize_bilinear(&scaled, img.width(), img.height(), tw, th)
    };
    Tensor::from_vec(&[1, th, tw], resized.into_iter().map(T::lit).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_white_maps_to_ones() {
        let img = GrayImage::filled(96, 103, 255).unwrap();
        let t = preprocess::<f32>(&img, (128, 128));
        assert_eq!(t.shape(), &[1, 128, 128]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deterministic_and_in_range() {
        let img = GrayImage::from_fn(96, 103, |x, y| ((x * 7 + y * 3) % 256) as u8).unwrap();
        let a = preprocess::<f64>(&img, (128, 128));
        assert_eq!(a, preprocess::<f64>(&img, (128, 128)));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_size_is_plain_scaling() {
        let img = GrayImage::from_fn(32, 32, |x, _| x as u8 * 8).unwrap();
        let t = preprocess::<f64>(&img, (32, 32));
        assert_eq!(t.data()[3], 24.0 / 255.0);
    }

    #[test]
    fn horizontal_ramp_stays_monotone() {
        let img = GrayImage::from_fn(40, 40, |x, _| (x * 6) as u8).unwrap();
        let t = preprocess::<f64>(&img, (64, 80));
        let row = &t.data()[..80];
        assert!(row.windows(2).all(|w| w[1] >= w[0]));
    }
}
