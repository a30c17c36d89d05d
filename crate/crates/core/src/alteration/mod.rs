//! Synthetic fingerprint alterations (obliteration, central rotation, Z-cut)
//! with ground-truth masks, plus a procedural ridge-pattern generator.
//!
//! The geometry (radii, angles, area fractions, seam darkening) is this
//! module's own definition of the three alteration procedures; it is an
//! approximation of how altered prints look, not a reproduction of any
//! particular generator.

mod obliterate;
mod rotate;
mod synth;
mod zcut;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Severity;
use crate::image::{GrayImage, Mask};

pub use obliterate::{foreground_mask, obliterate};
pub use rotate::central_rotate;
pub use synth::{make_synth_dataset, synth_fingerprint, synth_fingerprint_styled, Pattern, SynthStyle};
pub use zcut::z_cut;

/// Alterations are only defined on fingerprint-scale rasters.
pub const MIN_ALTERATION_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum AlterationError {
    #[error("invalid alteration spec: {0}")]
    InvalidSpec(String),
    #[error("image {width}x{height} is smaller than {MIN_ALTERATION_SIDE}x{MIN_ALTERATION_SIDE}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("disk of radius {radius} around ({cx}, {cy}) does not fit a {width}x{height} image")]
    DiskOutOfBounds { cx: usize, cy: usize, radius: usize, width: usize, height: usize },
    #[error("square of half-size {half} around ({cx}, {cy}) does not fit a {width}x{height} image")]
    SquareOutOfBounds { cx: usize, cy: usize, half: usize, width: usize, height: usize },
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AlterationError {
    /// True for errors caused by the geometry not fitting the image.
    pub fn is_geometry(&self) -> bool {
        matches!(
            self,
            AlterationError::ImageTooSmall { .. }
                | AlterationError::DiskOutOfBounds { .. }
                | AlterationError::SquareOutOfBounds { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlterationKind {
    Obliteration,
    CentralRotation,
    ZCut,
}

impl AlterationKind {
    pub const ALL: [AlterationKind; 3] =
        [AlterationKind::Obliteration, AlterationKind::CentralRotation, AlterationKind::ZCut];

    pub fn label(self) -> crate::dataset::Alteration {
        match self {
            AlterationKind::Obliteration => crate::dataset::Alteration::Obliteration,
            AlterationKind::CentralRotation => crate::dataset::Alteration::CentralRotation,
            AlterationKind::ZCut => crate::dataset::Alteration::ZCut,
        }
    }
}

/// Parameters of one alteration. `center` and `magnitude` are drawn from the
/// seed when `None`. Magnitude means: target painted fraction of the
/// foreground (obliteration), angle in degrees (central rotation), square
/// half-size in pixels (Z-cut).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlterationSpec {
    pub kind: AlterationKind,
    pub severity: Severity,
    pub seed: u64,
    pub center: Option<(usize, usize)>,
    pub magnitude: Option<f64>,
    /// Z-cut only: darken the Z-shaped scar.
    pub seam: bool,
    /// Central rotation only: bilinear instead of nearest-neighbour sampling.
    pub bilinear: bool,
}

impl AlterationSpec {
    pub fn new(kind: AlterationKind, severity: Severity, seed: u64) -> Self {
        Self { kind, severity, seed, center: None, magnitude: None, seam: true, bilinear: false }
    }

    pub fn with_center(mut self, x: usize, y: usize) -> Self {
        self.center = Some((x, y));
        self
    }

    pub fn with_magnitude(mut self, m: f64) -> Self {
        self.magnitude = Some(m);
        self
    }

    pub fn without_seam(mut self) -> Self {
        self.seam = false;
        self
    }

    fn check(&self, expected: AlterationKind, src: &GrayImage) -> Result<(), AlterationError> {
        if self.kind != expected {
            return Err(AlterationError::InvalidSpec(format!(
                "expected a {expected:?} spec, got {:?}",
                self.kind
            )));
        }
        if self.severity == Severity::None {
            return Err(AlterationError::InvalidSpec("severity must be Easy, Medium or Hard".into()));
        }
        if let Some(m) = self.magnitude {
            let ok = match self.kind {
                AlterationKind::CentralRotation => m > 0.0 && m <= 180.0,
                AlterationKind::ZCut => m >= 4.0 && m.fract() == 0.0,
                AlterationKind::Obliteration => m > 0.0 && m <= 0.5,
            };
            if !ok || !m.is_finite() {
                return Err(AlterationError::InvalidSpec(format!(
                    "magnitude {m} out of range for {:?}",
                    self.kind
                )));
            }
        }
        if src.width() < MIN_ALTERATION_SIDE || src.height() < MIN_ALTERATION_SIDE {
            return Err(AlterationError::ImageTooSmall { width: src.width(), height: src.height() });
        }
        if let Some((x, y)) = self.center {
            if x >= src.width() || y >= src.height() {
                return Err(AlterationError::InvalidSpec(format!("center ({x}, {y}) outside image")));
            }
        }
        Ok(())
    }
}

/// Output of an alteration. Every pixel that differs from the source lies
/// inside `mask`; `spec` has `center` and `magnitude` filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct AlterationResult {
    pub image: GrayImage,
    pub mask: Mask,
    pub spec: AlterationSpec,
}

pub fn apply(src: &GrayImage, spec: &AlterationSpec) -> Result<AlterationResult, AlterationError> {
    match spec.kind {
        AlterationKind::Obliteration => obliterate(src, spec),
        AlterationKind::CentralRotation => central_rotate(src, spec),
        AlterationKind::ZCut => z_cut(src, spec),
    }
}

/// Picks an automatic center uniformly from the central 40% x 40% box,
/// restricted to centers where a shape of half-extent `half` fits.
pub(crate) fn auto_center(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    half: usize,
) -> Option<(usize, usize)> {
    let axis = |rng: &mut ChaCha8Rng, n: usize| -> Option<usize> {
        let lo = ((0.3 * n as f64).ceil() as usize).max(half);
        let hi = ((0.7 * n as f64).floor() as usize).min(n.checked_sub(1 + half)?);
        (lo <= hi).then(|| rng.gen_range(lo..=hi))
    };
    let x = axis(rng, width);
    let y = axis(rng, height);
    Some((x?, y?))
}

pub(crate) fn severity_index(s: Severity) -> usize {
    match s {
        Severity::Easy => 0,
        Severity::Medium => 1,
        Severity::Hard => 2,
        Severity::None => unreachable!("checked by AlterationSpec::check"),
    }
}
