//! Procedural ridge patterns standing in for real scans, and a generator
//! for complete labelled datasets of real and altered prints.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply, AlterationError, AlterationKind, AlterationSpec};
use crate::dataset::{
    render_socofing_name, Finger, Gender, Hand, Manifest, ManifestEntry, RecordLabel, Scheme, Severity,
    MANIFEST_FILE,
};
use crate::image::{GrayImage, CANONICAL_HEIGHT, CANONICAL_WIDTH};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Concentric,
    Loop,
    Whorl,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Concentric, Pattern::Loop, Pattern::Whorl];
}

/// Rendering knobs beyond the pattern family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthStyle {
    pub pattern: Pattern,
    /// Ridge period range in pixels; the period is drawn uniformly from it.
    pub period: (f64, f64),
    /// Mirror the pattern horizontally (loop slant, whorl handedness).
    pub mirror: bool,
}

impl SynthStyle {
    pub fn plain(pattern: Pattern) -> Self {
        Self { pattern, period: (6.0, 10.0), mirror: false }
    }
}

/// Ridge phase at offset (dx, dy) from the core, in pixels.
fn phase(pattern: Pattern, dx: f64, dy: f64, period: f64) -> f64 {
    match pattern {
        Pattern::Concentric => dx.hypot(dy),
        // circles above the core, parallel ridges below: a hairpin turn
        Pattern::Loop => {
            if dy < 0.0 {
                dx.hypot(dy)
            } else {
                dx.abs()
            }
        }
        // one full period per turn keeps the phase continuous: a spiral
        Pattern::Whorl => dx.hypot(dy) + period * dy.atan2(dx) / TAU,
    }
}

pub fn synth_fingerprint(width: usize, height: usize, pattern: Pattern, seed: u64) -> GrayImage {
    synth_fingerprint_styled(width, height, &SynthStyle::plain(pattern), seed)
}

/// Renders `128 + 127 cos(2 pi phase / period)`, thresholds at 128, applies a
/// 3x3 box blur and whitens everything outside the inscribed ellipse.
///
/// Panics if either side is below 32.
pub fn synth_fingerprint_styled(width: usize, height: usize, style: &SynthStyle, seed: u64) -> GrayImage {
    assert!(width >= 32 && height >= 32, "synthetic prints need at least 32x32 pixels");
    let mut rng = seed::rng(seed);
    let (plo, phi) = style.period;
    let period = if phi > plo { rng.gen_range(plo..phi) } else { plo };
    let core_x = width as f64 * (0.5 + rng.gen_range(-0.1..0.1));
    let core_y = height as f64 * (0.5 + rng.gen_range(-0.1..0.1));
    // slight tilt so loops lean like real ones; mirrored prints lean the other way
    let tilt: f64 = rng.gen_range(0.1..0.4) * if style.mirror { -1.0 } else { 1.0 };
    let (ct, st) = (tilt.cos(), tilt.sin());

    let mut binary = vec![0u8; width * height];
    for y in 0..height {
        for x in 0..width {
            let (mut dx, dy0) = (x as f64 + 0.5 - core_x, y as f64 + 0.5 - core_y);
            if style.mirror {
                dx = -dx;
            }
            let (rx, ry) = (ct * dx - st * dy0, st * dx + ct * dy0);
            let p = phase(style.pattern, rx, ry, period);
            let intensity = 128.0 + 127.0 * (2.0 * PI * p / period).cos();
            binary[y * width + x] = if intensity < 128.0 { 0 } else { 255 };
        }
    }

    let (ax, ay) = (width as f64 * 0.48, height as f64 * 0.48);
    let (ex, ey) = (width as f64 / 2.0, height as f64 / 2.0);
    GrayImage::from_fn(width, height, |x, y| {
        let (u, v) = ((x as f64 + 0.5 - ex) / ax, (y as f64 + 0.5 - ey) / ay);
        if u * u + v * v > 1.0 {
            return 255;
        }
        let (mut sum, mut taps) = (0u32, 0u32);
        for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                sum += binary[ny * width + nx] as u32;
                taps += 1;
            }
        }
        ((sum + taps / 2) / taps) as u8
    })
    .expect("dimensions checked above")
}

/// Style of a synthetic finger: denser ridges for female subjects, mirrored
/// geometry for left hands, and a per-finger pattern prior.
fn style_for(label: &RecordLabel, rng: &mut impl Rng) -> SynthStyle {
    let period = match label.gender {
        Gender::Female => (6.0, 8.0),
        Gender::Male => (8.0, 10.0),
    };
    // relative weights over (Concentric, Loop, Whorl)
    let weights: [u32; 3] = match label.finger {
        Finger::Thumb => [2, 3, 5],
        Finger::Index => [3, 4, 3],
        Finger::Middle => [2, 6, 2],
        Finger::Ring => [2, 3, 5],
        Finger::Little => [2, 7, 1],
    };
    let draw = rng.gen_range(0..weights.iter().sum::<u32>());
    let pattern = if draw < weights[0] {
        Pattern::Concentric
    } else if draw < weights[0] + weights[1] {
        Pattern::Loop
    } else {
        Pattern::Whorl
    };
    SynthStyle { pattern, period, mirror: label.hand == Hand::Left }
}

fn write_png(root: &Path, rel: &Path, img: &GrayImage) -> Result<(), AlterationError> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|source| AlterationError::Io { path: dir.display().to_string(), source })?;
    }
    img.save_png(&path)?;
    Ok(())
}

fn slash(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

/// Generates `n_subjects` synthetic subjects at 96x103: ten real prints each
/// (two hands, five fingers; odd ids male, even ids female) plus one altered
/// copy per (kind, severity). Images and masks are PNG files under
/// `out_dir`, indexed by `out_dir/manifest.json`.
pub fn make_synth_dataset(n_subjects: u32, out_dir: &Path, seed: u64) -> Result<Manifest, AlterationError> {
    if n_subjects == 0 {
        return Err(AlterationError::InvalidSpec("n_subjects must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|source| AlterationError::Io { path: out_dir.display().to_string(), source })?;

    let fingers: Vec<(u32, Hand, Finger)> = (1..=n_subjects)
        .flat_map(|s| Hand::ALL.into_iter().flat_map(move |h| Finger::ALL.into_iter().map(move |f| (s, h, f))))
        .collect();

    let per_finger: Vec<Vec<ManifestEntry>> = fingers
        .par_iter()
        .map(|&(subject_id, hand, finger)| -> Result<Vec<ManifestEntry>, AlterationError> {
            let gender = if subject_id % 2 == 1 { Gender::Male } else { Gender::Female };
            let base_label = RecordLabel {
                subject_id,
                gender,
                hand,
                finger,
                alteration: crate::dataset::Alteration::Real,
                severity: Severity::None,
            };
            let finger_seed = seed::derive(seed, &[subject_id as u64, hand as u64, finger as u64]);
            let mut rng = seed::rng(finger_seed);
            let style = style_for(&base_label, &mut rng);
            let base = synth_fingerprint_styled(CANONICAL_WIDTH, CANONICAL_HEIGHT, &style, rng.gen());

            let mut entries = Vec::with_capacity(10);
            let rel = render_socofing_name(&base_label, "png");
            write_png(out_dir, &rel, &base)?;
            entries.push(ManifestEntry { path: slash(&rel), label: base_label, mask: None });

            for kind in AlterationKind::ALL {
                for severity in Severity::GRADED {
                    let label = RecordLabel { alteration: kind.label(), severity, ..base_label };
                    let spec_seed = seed::derive(finger_seed, &[kind as u64 + 1, severity as u64]);
                    let result = apply(&base, &AlterationSpec::new(kind, severity, spec_seed))?;
                    let rel = render_socofing_name(&label, "png");
                    let mask_rel = Path::new("masks").join(&rel);
                    write_png(out_dir, &rel, &result.image)?;
                    write_png(out_dir, &mask_rel, &result.mask.to_image())?;
                    entries.push(ManifestEntry { path: slash(&rel), label, mask: Some(slash(&mask_rel)) });
                }
            }
            Ok(entries)
        })
        .collect::<Result<_, _>>()?;

    let mut entries: Vec<ManifestEntry> = per_finger.into_iter().flatten().collect();
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { root: out_dir.to_path_buf(), scheme: Scheme::Explicit, entries };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alteration::foreground_mask;

    fn inside_ellipse(w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
        let (ax, ay) = (w as f64 * 0.48, h as f64 * 0.48);
        (0..h).flat_map(move |y| (0..w).map(move |x| (x, y))).filter(move |&(x, y)| {
            let (u, v) = ((x as f64 + 0.5 - w as f64 / 2.0) / ax, (y as f64 + 0.5 - h as f64 / 2.0) / ay);
            u * u + v * v <= 1.0
        })
    }

    #[test]
    fn canonical_size_and_determinism() {
        let a = synth_fingerprint(96, 103, Pattern::Concentric, 1);
        assert_eq!((a.width(), a.height()), (96, 103));
        assert_eq!(a, synth_fingerprint(96, 103, Pattern::Concentric, 1));
        assert_ne!(a, synth_fingerprint(96, 103, Pattern::Concentric, 2));
    }

    #[test]
    fn dark_fraction_inside_ellipse() {
        for seed in 0..100u64 {
            let pattern = Pattern::ALL[seed as usize % 3];
            let img = synth_fingerprint(96, 103, pattern, seed);
            let px: Vec<u8> = inside_ellipse(96, 103).map(|(x, y)| img.get(x, y)).collect();
            let dark = px.iter().filter(|&&p| p < 128).count() as f64 / px.len() as f64;
            assert!((0.3..=0.7).contains(&dark), "seed {seed} {pattern:?}: {dark}");
        }
    }

    #[test]
    fn background_outside_ellipse() {
        let img = synth_fingerprint(64, 64, Pattern::Whorl, 5);
        assert_eq!(img.get(0, 0), 255);
        assert_eq!(img.get(63, 63), 255);
        let fg = foreground_mask(&img);
        assert!(fg.area() > 64 * 64 / 2);
    }

    #[test]
    fn small_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_synth_dataset(1, dir.path(), 9).unwrap();
        assert_eq!(m.len(), 100);
        assert_eq!(m.entries.iter().filter(|e| e.label.alteration.is_real()).count(), 10);
        for (i, e) in m.entries.iter().enumerate() {
            assert!(m.image_path(i).is_file());
            assert_eq!(e.mask.is_some(), !e.label.alteration.is_real());
            e.label.validate().unwrap();
        }
        let reloaded = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(reloaded.entries, m.entries);
        assert!(matches!(make_synth_dataset(0, dir.path(), 9), Err(AlterationError::InvalidSpec(_))));
    }
}
