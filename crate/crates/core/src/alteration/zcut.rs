use super::{auto_center, severity_index, AlterationError, AlterationKind, AlterationResult, AlterationSpec};
use crate::image::{GrayImage, Mask};
use crate::seed;

/// Square half-size as a fraction of min(width, height), per severity tier.
const HALF_FRACTION: [f64; 3] = [0.12, 0.20, 0.30];
/// Intensity removed along the scar.
const SEAM_DARKENING: u8 = 40;

/// Swaps the two triangles of the square around the center (split along the
/// anti-diagonal) by point reflection through the center, then darkens the
/// Z-shaped scar: top edge, anti-diagonal, bottom edge.
pub fn z_cut(src: &GrayImage, spec: &AlterationSpec) -> Result<AlterationResult, AlterationError> {
    spec.check(AlterationKind::ZCut, src)?;
    let (w, h) = (src.width(), src.height());
    let sev = severity_index(spec.severity);
    let half = match spec.magnitude {
        Some(m) => m as usize,
        None => ((HALF_FRACTION[sev] * w.min(h) as f64).round() as usize).max(4),
    };
    let mut rng = seed::rng(spec.seed);
    let (cx, cy) = match spec.center {
        Some(c) => c,
        None => auto_center(&mut rng, w, h, half).ok_or(AlterationError::SquareOutOfBounds {
            cx: w / 2,
            cy: h / 2,
            half,
            width: w,
            height: h,
        })?,
    };
    if cx < half || cy < half || cx + half >= w || cy + half >= h {
        return Err(AlterationError::SquareOutOfBounds { cx, cy, half, width: w, height: h });
    }

    let s = half as i64;
    let at = |dx: i64, dy: i64| ((cx as i64 + dx) as usize, (cy as i64 + dy) as usize);
    let mut out = src.clone();
    let mut mask = Mask::empty(w, h);
    for dy in -s..=s {
        for dx in -s..=s {
            let (x, y) = at(dx, dy);
            mask.set(x, y, true);
            if dx + dy != 0 {
                let (sx, sy) = at(-dx, -dy);
                out.set(x, y, src.get(sx, sy));
            }
        }
    }
    if spec.seam {
        let mut darken = |dx: i64, dy: i64| {
            let (x, y) = at(dx, dy);
            out.set(x, y, out.get(x, y).saturating_sub(SEAM_DARKENING));
        };
        for d in -s..=s {
            darken(d, -s);
            darken(d, s);
        }
        // the diagonal's end points are already on the edges
        for d in (-s + 1)..s {
            darken(d, -d);
        }
    }

    let mut resolved = *spec;
    resolved.center = Some((cx, cy));
    resolved.magnitude = Some(half as f64);
    Ok(AlterationResult { image: out, mask, spec: resolved })
}
