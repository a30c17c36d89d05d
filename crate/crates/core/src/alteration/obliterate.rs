use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{auto_center, severity_index, AlterationError, AlterationKind, AlterationResult, AlterationSpec};
use crate::image::{GrayImage, Mask};
use crate::seed;

/// Target painted-foreground fraction per severity tier.
const AREA_RANGES: [(f64, f64); 3] = [(0.02, 0.05), (0.05, 0.12), (0.12, 0.25)];
/// Stroke half-thickness range per severity tier.
const STROKE_RADIUS: [(i64, i64); 3] = [(1, 1), (1, 2), (2, 3)];
/// Pixels within this Chebyshev distance of a dark pixel count as foreground.
const FOREGROUND_REACH: usize = 4;

/// Ridge-bearing region: pixels whose (2r+1)^2 neighbourhood holds a pixel
/// darker than 128.
pub fn foreground_mask(img: &GrayImage) -> Mask {
    let (w, h) = (img.width(), img.height());
    // integral image of dark pixels
    let mut integral = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += (img.get(x, y) < 128) as u32;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let r = FOREGROUND_REACH;
    let mut mask = Mask::empty(w, h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
            mask.set(x, y, s > 0);
        }
    }
    mask
}

struct Painter<'a> {
    out: GrayImage,
    mask: Mask,
    fg: &'a Mask,
    painted_fg: usize,
}

impl Painter<'_> {
    fn paint(&mut self, x: i64, y: i64, rng: &mut ChaCha8Rng) {
        if x < 0 || y < 0 || x >= self.out.width() as i64 || y >= self.out.height() as i64 {
            return;
        }
        let (x, y) = (x as usize, y as usize);
        if self.mask.get(x, y) {
            return;
        }
        self.mask.set(x, y, true);
        self.out.set(x, y, 255 - rng.gen_range(0..=30u8));
        if self.fg.get(x, y) {
            self.painted_fg += 1;
        }
    }

    fn stamp(&mut self, cx: f64, cy: f64, radius: i64, rng: &mut ChaCha8Rng) {
        let (ix, iy) = (cx.round() as i64, cy.round() as i64);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= radius * radius {
                    self.paint(ix + dx, iy + dy, rng);
                }
            }
        }
    }

    /// A random foreground pixel not yet painted.
    fn unpainted_fg(&self, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
        let (w, h) = (self.out.width(), self.out.height());
        for _ in 0..64 {
            let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
            if self.fg.get(x, y) && !self.mask.get(x, y) {
                return Some((x, y));
            }
        }
        (0..w * h)
            .map(|i| (i % w, i / w))
            .find(|&(x, y)| self.fg.get(x, y) && !self.mask.get(x, y))
    }
}

/// Paints seeded scratch strokes and burn blobs until the requested fraction
/// of the foreground is covered. The mask is exactly the painted set.
pub fn obliterate(src: &GrayImage, spec: &AlterationSpec) -> Result<AlterationResult, AlterationError> {
    spec.check(AlterationKind::Obliteration, src)?;
    let (w, h) = (src.width(), src.height());
    let sev = severity_index(spec.severity);
    let mut rng = seed::rng(spec.seed);

    let mut fg = foreground_mask(src);
    if fg.area() == 0 {
        fg = Mask::from_image(&GrayImage::filled(w, h, 255)?);
    }
    let fg_count = fg.area();

    let center = match spec.center {
        Some(c) => c,
        None => auto_center(&mut rng, w, h, 0).expect("image is at least 32x32"),
    };
    let (r_lo, r_hi) = STROKE_RADIUS[sev];
    let target = match spec.magnitude {
        Some(m) => m,
        None => {
            let (lo, hi) = AREA_RANGES[sev];
            // keep one worst-case stamp of headroom below the tier ceiling
            let stamp = ((2 * r_hi + 1) * (2 * r_hi + 1)) as f64 / fg_count as f64;
            let top = (hi - stamp).max(lo);
            rng.gen_range(lo..=top)
        }
    };
    let target_px = ((target * fg_count as f64).ceil() as usize).clamp(1, fg_count);

    let mut p = Painter { out: src.clone(), mask: Mask::empty(w, h), fg: &fg, painted_fg: 0 };

    // burn blobs, together at most 40% of the budget; the first sits on the center
    let blobs = rng.gen_range(0..=2usize);
    for b in 0..blobs {
        let budget = 0.4 * target_px as f64 / blobs as f64;
        let a = (budget / std::f64::consts::PI).sqrt() * rng.gen_range(0.7..1.0);
        let ratio: f64 = rng.gen_range(0.5..1.0);
        let (major, minor) = (a / ratio.sqrt(), a * ratio.sqrt());
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (bx, by) = if b == 0 {
            (center.0 as f64, center.1 as f64)
        } else {
            match p.unpainted_fg(&mut rng) {
                Some((x, y)) => (x as f64, y as f64),
                None => break,
            }
        };
        let (c, s) = (theta.cos(), theta.sin());
        let reach = major.ceil() as i64 + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (fx, fy) = (dx as f64, dy as f64);
                let u = (c * fx + s * fy) / major;
                let v = (-s * fx + c * fy) / minor;
                if u * u + v * v <= 1.0 {
                    p.paint(bx as i64 + dx, by as i64 + dy, &mut rng);
                }
            }
        }
        if p.painted_fg >= target_px {
            break;
        }
    }

    // scratches: polylines walked in half-pixel steps, stopping the moment the target is met
    'strokes: while p.painted_fg < target_px {
        let Some((sx, sy)) = p.unpainted_fg(&mut rng) else { break };
        let radius = rng.gen_range(r_lo..=r_hi);
        let vertices = rng.gen_range(3..=6);
        let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let (mut x, mut y) = (sx as f64, sy as f64);
        p.stamp(x, y, radius, &mut rng);
        for _ in 1..vertices {
            let len = rng.gen_range(8.0..25.0);
            heading += rng.gen_range(-0.6..0.6);
            let (dx, dy) = (heading.cos() * 0.5, heading.sin() * 0.5);
            for _ in 0..(len * 2.0) as usize {
                if p.painted_fg >= target_px {
                    break 'strokes;
                }
                x += dx;
                y += dy;
                p.stamp(x, y, radius, &mut rng);
            }
        }
    }

    let mut resolved = *spec;
    resolved.center = Some(center);
    resolved.magnitude = Some(target);
    Ok(AlterationResult { image: p.out, mask: p.mask, spec: resolved })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alteration::{synth_fingerprint, Pattern};
    use crate::dataset::Severity;

    fn painted_fraction(src: &GrayImage, mask: &Mask) -> f64 {
        let fg = foreground_mask(src);
        let both = (0..src.height())
            .flat_map(|y| (0..src.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| fg.get(x, y) && mask.get(x, y))
            .count();
        both as f64 / fg.area() as f64
    }

    #[test]
    fn deterministic() {
        let img = synth_fingerprint(96, 103, Pattern::Whorl, 4);
        let spec = AlterationSpec::new(AlterationKind::Obliteration, Severity::Medium, 11);
        assert_eq!(obliterate(&img, &spec).unwrap(), obliterate(&img, &spec).unwrap());
    }

    #[test]
    fn severity_ranges_hold() {
        for (sev, (lo, hi)) in Severity::GRADED.into_iter().zip(AREA_RANGES) {
            for seed in 0..20 {
                let img = synth_fingerprint(96, 103, Pattern::ALL[seed as usize % 3], seed);
                let spec = AlterationSpec::new(AlterationKind::Obliteration, sev, seed * 7 + 1);
                let r = obliterate(&img, &spec).unwrap();
                let f = painted_fraction(&img, &r.mask);
                assert!(f >= lo && f <= hi, "{sev:?} seed {seed}: {f}");
            }
        }
    }

    #[test]
    fn explicit_fraction_is_met() {
        let img = synth_fingerprint(96, 103, Pattern::Concentric, 2);
        let spec = AlterationSpec::new(AlterationKind::Obliteration, Severity::Easy, 5).with_magnitude(0.4);
        let r = obliterate(&img, &spec).unwrap();
        let f = painted_fraction(&img, &r.mask);
        assert!((0.4..0.41).contains(&f), "{f}");
        assert_eq!(r.spec.magnitude, Some(0.4));
    }

    #[test]
    fn outside_mask_untouched_and_painted_values_bright() {
        let img = synth_fingerprint(96, 103, Pattern::Loop, 9);
        let r = obliterate(&img, &AlterationSpec::new(AlterationKind::Obliteration, Severity::Hard, 3)).unwrap();
        for y in 0..img.height() {
            for x in 0..img.width() {
                if r.mask.get(x, y) {
                    assert!(r.image.get(x, y) >= 225);
                } else {
                    assert_eq!(r.image.get(x, y), img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn blank_image_treated_as_all_foreground() {
        let img = GrayImage::filled(40, 40, 255).unwrap();
        let r = obliterate(&img, &AlterationSpec::new(AlterationKind::Obliteration, Severity::Easy, 1)).unwrap();
        assert!(r.mask.area() > 0);
    }
}
