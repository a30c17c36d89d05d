use super::{auto_center, severity_index, AlterationError, AlterationKind, AlterationResult, AlterationSpec};
use crate::image::{GrayImage, Mask};
use crate::seed;

/// Disk radius as a fraction of min(width, height), per severity tier.
const RADIUS_FRACTION: [f64; 3] = [0.15, 0.25, 0.35];
/// Default angle in degrees per severity tier.
const DEFAULT_ANGLE: [f64; 3] = [45.0, 90.0, 180.0];

fn snap(v: f64) -> f64 {
    for exact in [-1.0, 0.0, 1.0] {
        if (v - exact).abs() < 1e-12 {
            return exact;
        }
    }
    v
}

fn bilinear(src: &GrayImage, x: f64, y: f64) -> u8 {
    let x = x.clamp(0.0, (src.width() - 1) as f64);
    let y = y.clamp(0.0, (src.height() - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(src.width() - 1), (y0 + 1).min(src.height() - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = src.get(x0, y0) as f64 * (1.0 - fx) + src.get(x1, y0) as f64 * fx;
    let bot = src.get(x0, y1) as f64 * (1.0 - fx) + src.get(x1, y1) as f64 * fx;
    (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8
}

/// Re-plants the disk around the center rotated by the spec angle. Each
/// destination pixel in the disk reads the source at its position rotated
/// by -angle; everything outside the disk is copied.
pub fn central_rotate(src: &GrayImage, spec: &AlterationSpec) -> Result<AlterationResult, AlterationError> {
    spec.check(AlterationKind::CentralRotation, src)?;
    let (w, h) = (src.width(), src.height());
    let sev = severity_index(spec.severity);
    let radius = (RADIUS_FRACTION[sev] * w.min(h) as f64).round() as usize;
    let mut rng = seed::rng(spec.seed);

    let (cx, cy) = match spec.center {
        Some(c) => c,
        None => auto_center(&mut rng, w, h, radius).ok_or(AlterationError::DiskOutOfBounds {
            cx: w / 2,
            cy: h / 2,
            radius,
            width: w,
            height: h,
        })?,
    };
    if cx < radius || cy < radius || cx + radius >= w || cy + radius >= h {
        return Err(AlterationError::DiskOutOfBounds { cx, cy, radius, width: w, height: h });
    }
    let angle = spec.magnitude.unwrap_or(DEFAULT_ANGLE[sev]);

    let theta = (-angle).to_radians();
    let (c, s) = (snap(theta.cos()), snap(theta.sin()));
    let r = radius as i64;
    let mut out = src.clone();
    let mut mask = Mask::empty(w, h);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (x, y) = ((cx as i64 + dx) as usize, (cy as i64 + dy) as usize);
            mask.set(x, y, true);
            let sx = cx as f64 + c * dx as f64 - s * dy as f64;
            let sy = cy as f64 + s * dx as f64 + c * dy as f64;
            let v = if spec.bilinear {
                bilinear(src, sx, sy)
            } else {
                let ix = (sx.round() as i64).clamp(0, w as i64 - 1) as usize;
                let iy = (sy.round() as i64).clamp(0, h as i64 - 1) as usize;
                src.get(ix, iy)
            };
            out.set(x, y, v);
        }
    }

    let mut resolved = *spec;
    resolved.center = Some((cx, cy));
    resolved.magnitude = Some(angle);
    Ok(AlterationResult { image: out, mask, spec: resolved })
}
