//! Grad-CAM heatmaps, overlays and a mask-based localization score.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, ImageError, Mask, RgbImage};
use crate::nn::{preprocess, resize_bilinear, Model, NetworkError, Scalar, Tensor};
use crate::task::Task;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Which class score to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ClassChoice {
    /// The predicted (argmax) class.
    #[default]
    Auto,
    Index(usize),
}

/// Heat in [0, 1] over the input image's pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub width: usize,
    pub height: usize,
    pub heat: Vec<f64>,
    pub task: Task,
    pub class_index: usize,
    pub source_layer: String,
}

impl ActivationMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.heat[y * self.width + x]
    }

    /// 8-bit rendering, value = round(255 heat).
    pub fn to_gray(&self) -> Result<GrayImage, ExplainError> {
        let px = self.heat.iter().map(|&h| (255.0 * h).round().clamp(0.0, 255.0) as u8).collect();
        Ok(GrayImage::new(self.width, self.height, px)?)
    }

    pub fn save_heat_png(&self, path: &Path) -> Result<(), ExplainError> {
        Ok(self.to_gray()?.save_png(path)?)
    }
}

/// ReLU of the gradient-weighted sum of `c` feature maps of size `h` x `w`,
/// where each map's weight is the spatial mean of its gradient.
pub fn weighted_maps(maps: &[f64], grads: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(maps.len(), c * h * w);
    assert_eq!(grads.len(), c * h * w);
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for k in 0..c {
        let weight = grads[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (o, &a) in out.iter_mut().zip(&maps[k * hw..(k + 1) * hw]) {
            *o += weight * a;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Min-max normalization to [0, 1]; a constant raster becomes all zeros.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Grad-CAM for `img` on `task`. `layer` defaults to the last feature map of
/// the backbone.
pub fn grad_cam<T: Scalar>(
    model: &Model<T>,
    img: &GrayImage,
    task: Task,
    class: ClassChoice,
    layer: Option<&str>,
) -> Result<ActivationMap, ExplainError> {
    model.head(task)?;
    let (h, w) = model.config().input_size;
    let x: Tensor<T> = preprocess(img, (h, w));
    let x = Tensor::from_vec(&[1, 1, h, w], x.into_data());
    let layer = layer.map_or_else(|| model.last_layer().to_string(), str::to_string);
    let class_index = match class {
        ClassChoice::Index(c) => c,
        ClassChoice::Auto => {
            let logits = model.forward(&x, task)?;
            crate::training::predictions(&logits)[0]
        }
    };
    let (maps, grads, _) = model.layer_gradient(&x, task, class_index, &layer)?;
    let [c, fh, fw] = [maps.shape()[0], maps.shape()[1], maps.shape()[2]];
    let to64 = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>();
    let raw = weighted_maps(&to64(&maps), &to64(&grads), c, fh, fw);
    let up = resize_bilinear(&raw, fw, fh, img.width(), img.height());
    Ok(ActivationMap {
        width: img.width(),
        height: img.height(),
        heat: normalize(&up),
        task,
        class_index,
        source_layer: layer,
    })
}

/// Jet colormap, `t` in [0, 1].
pub fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends the jet-coloured heat over `img` with per-pixel opacity
/// `alpha * heat`.
pub fn overlay(img: &GrayImage, map: &ActivationMap, alpha: f64) -> Result<RgbImage, ExplainError> {
    if (img.width(), img.height()) != (map.width, map.height) {
        return Err(ExplainError::ShapeMismatch(format!(
            "image {}x{} vs map {}x{}",
            img.width(),
            img.height(),
            map.width,
            map.height
        )));
    }
    let alpha = alpha.clamp(0.0, 1.0);
    let mut data = Vec::with_capacity(3 * img.pixels().len());
    for (&g, &h) in img.pixels().iter().zip(&map.heat) {
        let a = alpha * h;
        let color = jet(h);
        for c in color {
            data.push(((1.0 - a) * g as f64 + a * c as f64).round() as u8);
        }
    }
    Ok(RgbImage { width: img.width(), height: img.height(), data })
}

/// Mean heat inside `mask` over mean heat everywhere. All-zero heat scores 1.
pub fn localization_score(map: &ActivationMap, mask: &Mask) -> Result<f64, ExplainError> {
    if (mask.width(), mask.height()) != (map.width, map.height) {
        return Err(ExplainError::ShapeMismatch(format!(
            "mask {}x{} vs map {}x{}",
            mask.width(),
            mask.height(),
            map.width,
            map.height
        )));
    }
    let area = mask.area();
    if area == 0 {
        return Err(ExplainError::EmptyMask);
    }
    let total: f64 = map.heat.iter().sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let inside: f64 = map.heat.iter().zip(mask.bits()).filter(|(_, &b)| b).map(|(&h, _)| h).sum();
    Ok((inside / area as f64) / (total / map.heat.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BlockConfig, ModelConfig};
    use proptest::prelude::*;

    fn map(width: usize, height: usize, heat: Vec<f64>) -> ActivationMap {
        ActivationMap { width, height, heat, task: Task::Alteration, class_index: 0, source_layer: "embed".into() }
    }

    #[test]
    fn two_maps_weighted_by_mean_gradient() {
        let maps = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let grads = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let heat = normalize(&weighted_maps(&maps, &grads, 2, 2, 2));
        assert_eq!(heat, vec![1.0, 0.0, 0.0, 0.0]);
        let up = normalize(&resize_bilinear(&weighted_maps(&maps, &grads, 2, 2, 2), 2, 2, 6, 6));
        assert_eq!(up[0], 1.0);
        assert!(up.iter().all(|&v| v <= 1.0));
        assert_eq!(up[35], 0.0);
    }

    #[test]
    fn constant_map_is_zero() {
        let heat = normalize(&weighted_maps(&[1.0; 9], &[1.0; 9], 1, 3, 3));
        assert!(heat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ten_hot_pixels_score_ten() {
        let mut mask = Mask::empty(10, 10);
        let mut heat = vec![0.0; 100];
        for i in 0..10 {
            mask.set(i, i, true);
            heat[i * 10 + i] = 1.0;
        }
        let s = localization_score(&map(10, 10, heat), &mask).unwrap();
        assert!((s - 10.0).abs() < 1e-12);
    }

    #[test]
    fn score_conventions() {
        let mut mask = Mask::empty(4, 4);
        mask.set(1, 1, true);
        assert!((localization_score(&map(4, 4, vec![0.3; 16]), &mask).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(localization_score(&map(4, 4, vec![0.0; 16]), &mask).unwrap(), 1.0);
        assert!(matches!(localization_score(&map(4, 4, vec![0.0; 16]), &Mask::empty(4, 4)), Err(ExplainError::EmptyMask)));
        assert!(matches!(
            localization_score(&map(4, 4, vec![0.0; 16]), &Mask::empty(3, 4)),
            Err(ExplainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn overlay_blend() {
        let img = GrayImage::from_fn(9, 8, |x, y| (x * 20 + y * 7) as u8).unwrap();
        let gray: Vec<u8> = img.pixels().iter().flat_map(|&g| [g, g, g]).collect();
        let mut heat = vec![0.0; 72];
        assert_eq!(overlay(&img, &map(9, 8, heat.clone()), 1.0).unwrap().data, gray);
        heat[10] = 1.0;
        let hot = map(9, 8, heat);
        assert_eq!(overlay(&img, &hot, 0.0).unwrap().data, gray);
        assert_eq!(overlay(&img, &hot, 1.0).unwrap().get(1, 1), jet(1.0));
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert!(matches!(overlay(&img, &map(8, 9, vec![0.0; 72]), 0.5), Err(ExplainError::ShapeMismatch(_))));
    }

    #[test]
    fn gray_rendering_rounds() {
        let mut heat = vec![0.0; 64];
        heat[0] = 0.5;
        heat[1] = 1.0;
        let g = map(8, 8, heat).to_gray().unwrap();
        assert_eq!(&g.pixels()[..3], &[128, 255, 0]);
        assert!(map(2, 1, vec![0.5, 1.0]).to_gray().is_err());
    }

    #[test]
    fn grad_cam_on_small_model() {
        let cfg = ModelConfig {
            input_size: (32, 32),
            stem_channels: 4,
            inception_blocks: vec![BlockConfig::uniform(1, 2)],
            embedding_dim: 6,
            ..ModelConfig::toy()
        };
        let m = Model::<f64>::build(&cfg, &[Task::Alteration], 5).unwrap();
        let img = crate::alteration::synth_fingerprint(40, 44, crate::alteration::Pattern::Whorl, 3);
        let a = grad_cam(&m, &img, Task::Alteration, ClassChoice::Auto, None).unwrap();
        assert_eq!((a.width, a.height), (40, 44));
        assert_eq!(a.source_layer, "embed");
        assert!(a.heat.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = a.heat.iter().cloned().fold(0.0, f64::max);
        assert!(max == 1.0 || max == 0.0);
        assert_eq!(a, grad_cam(&m, &img, Task::Alteration, ClassChoice::Auto, None).unwrap());
        let b = grad_cam(&m, &img, Task::Alteration, ClassChoice::Index(2), Some("block.0")).unwrap();
        assert_eq!((b.class_index, b.source_layer.as_str()), (2, "block.0"));
        assert!(matches!(
            grad_cam(&m, &img, Task::Gender, ClassChoice::Auto, None),
            Err(ExplainError::Network(NetworkError::MissingHead(Task::Gender)))
        ));
    }

    proptest! {
        #[test]
        fn normalized_heat_is_bounded_and_idempotent(raw in proptest::collection::vec(-5.0f64..5.0, 1..64)) {
            let n = normalize(&raw);
            prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(normalize(&n), n);
        }

        #[test]
        fn score_is_scale_invariant(
            raw in proptest::collection::vec(0.0f64..3.0, 36),
            bits in proptest::collection::vec(any::<bool>(), 36),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(bits.iter().any(|&b| b));
            let mut mask = Mask::empty(6, 6);
            for (i, &b) in bits.iter().enumerate() {
                mask.set(i % 6, i / 6, b);
            }
            let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
            let a = localization_score(&map(6, 6, normalize(&raw)), &mask).unwrap();
            let b = localization_score(&map(6, 6, normalize(&scaled)), &mask).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
