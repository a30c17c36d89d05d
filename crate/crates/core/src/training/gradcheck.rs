use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::{Model, Scalar, Tensor};
use crate::seed;
use crate::task::Task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    pub max_coords: usize,
    pub seed: u64,
    /// Evaluate in f64 regardless of the model's element type.
    pub mode64: bool,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is numerically zero are judged by absolute error.
    pub floor: f64,
    /// When a probe at `step` lands in a different ReLU / max-pool region
    /// than the base point, retry that coordinate with the step divided by
    /// 10 (down to `step * 1e-4`).
    pub kink_aware: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, max_coords: 1000, seed: 0, mode64: true, floor: 1e-7, kink_aware: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: usize,
    /// Fraction of coordinates with relative error at most 1e-3.
    pub within_1e3: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Coordinates whose nominal step crossed a kink.
    pub kinked: usize,
    pub smallest_step: f64,
}

/// Compares analytic gradients from [`Model::loss_and_grads`] with central
/// finite differences on a seeded sample of coordinates.
pub fn grad_check<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    task: Task,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    if opts.mode64 {
        let m = model.cast::<f64>();
        let b = batch.cast::<f64>();
        let grads = m.loss_and_grads(&b, labels, task)?.grads;
        check_against(&m, &b, labels, task, &grads, opts)
    } else {
        let grads = model.loss_and_grads(batch, labels, task)?.grads;
        check_against(model, batch, labels, task, &grads, opts)
    }
}

/// Like [`grad_check`] but judges the supplied gradients, which lets callers
/// confirm that the harness notices wrong ones.
pub fn check_against<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    task: Task,
    grads: &BTreeMap<String, Tensor<T>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    let coords = sample_coords(grads, opts.max_coords, opts.seed);
    let mut probe = model.clone();
    let base = if opts.kink_aware { Some(probe.loss_with_signature(batch, labels, task)?.1) } else { None };
    let mut worst = (0.0f64, None);
    let mut good = 0usize;
    let mut kinked = 0usize;
    let mut smallest_step = opts.step;
    for (name, idx) in &coords {
        let original = probe.param(name).expect("gradient names are parameters").data()[*idx];
        let mut step = opts.step;
        let numeric = loop {
            let h = T::lit(step);
            let mut at = |x: T| -> Result<(T, Option<u64>), TrainError> {
                probe.param_mut(name).unwrap().data_mut()[*idx] = x;
                Ok(match base {
                    Some(_) => {
                        let (l, sig) = probe.loss_with_signature(batch, labels, task)?;
                        (l, Some(sig))
                    }
                    None => (probe.loss(batch, labels, task)?, None),
                })
            };
            let (up, sig_up) = at(original + h)?;
            let (down, sig_down) = at(original - h)?;
            probe.param_mut(name).unwrap().data_mut()[*idx] = original;
            let numeric = ((up - down) / (h + h)).to_f64().unwrap();
            let smooth = sig_up == base && sig_down == base;
            if smooth || step <= opts.step * 1.0001e-4 {
                break numeric;
            }
            if step == opts.step {
                kinked += 1;
            }
            step /= 10.0;
            smallest_step = smallest_step.min(step);
        };

        let analytic = grads[name].data()[*idx].to_f64().unwrap();
        let denom = numeric.abs().max(analytic.abs()).max(opts.floor);
        let rel = (numeric - analytic).abs() / denom;
        let rel = if rel.is_finite() { rel } else { f64::MAX };
        if rel <= 1e-3 {
            good += 1;
        }
        if worst.1.is_none() || rel > worst.0 {
            worst = (rel, Some((name.clone(), *idx)));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        coords: coords.len(),
        within_1e3: if coords.is_empty() { 1.0 } else { good as f64 / coords.len() as f64 },
        worst: worst.1,
        kinked,
        smallest_step,
    })
}

/// One coordinate from every tensor first (while the budget allows), the
/// rest uniformly without replacement over all remaining coordinates.
fn sample_coords<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>, max: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = seed::rng(seed);
    let tensors: Vec<(&String, usize)> = grads.iter().map(|(n, t)| (n, t.len())).filter(|&(_, l)| l > 0).collect();
    let total: usize = tensors.iter().map(|&(_, l)| l).sum();
    let budget = max.min(total);
    let mut picked = std::collections::BTreeSet::new();
    for (t, &(_, len)) in tensors.iter().enumerate().take(budget) {
        picked.insert((t, sample(&mut rng, len, 1).index(0)));
    }
    let offsets: Vec<usize> = tensors
        .iter()
        .scan(0, |acc, &(_, l)| {
            let o = *acc;
            *acc += l;
            Some(o)
        })
        .collect();
    for flat in sample(&mut rng, total, total.min(budget * 2 + 16)).into_iter() {
        if picked.len() >= budget {
            break;
        }
        let t = offsets.partition_point(|&o| o <= flat) - 1;
        picked.insert((t, flat - offsets[t]));
    }
    picked.into_iter().map(|(t, i)| (tensors[t].0.clone(), i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BlockConfig, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: (32, 32),
            stem_channels: 4,
            inception_blocks: vec![BlockConfig::uniform(1, 2), BlockConfig::uniform(2, 2)],
            embedding_dim: 6,
            ..ModelConfig::toy()
        }
    }

    fn batch(seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = seed::rng(seed);
        Tensor::from_vec(&[2, 1, 32, 32], (0..2048).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn healthy_model_passes() {
        let m = Model::<f64>::build(&tiny(), &[Task::Alteration], 3).unwrap();
        let opts = GradCheckOptions { max_coords: 150, ..Default::default() };
        let r = grad_check(&m, &batch(1), &[1, 3], Task::Alteration, &opts).unwrap();
        assert_eq!(r.coords, 150);
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let m = Model::<f64>::build(&tiny(), &[Task::Alteration], 3).unwrap();
        let x = batch(1);
        let mut grads = m.loss_and_grads(&x, &[1, 3], Task::Alteration).unwrap().grads;
        for v in grads.get_mut("block.1.dbl.1.conv.weight").unwrap().data_mut() {
            *v *= 1.1;
        }
        let opts = GradCheckOptions { max_coords: 60, ..Default::default() };
        let r = check_against(&m, &x, &[1, 3], Task::Alteration, &grads, &opts).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
        assert_eq!(r.worst.unwrap().0, "block.1.dbl.1.conv.weight");
    }

    #[test]
    fn plain_differences_trip_on_kinks() {
        let m = Model::<f64>::build(&tiny(), &[Task::Alteration], 3).unwrap();
        let plain = GradCheckOptions { max_coords: 120, step: 1e-2, kink_aware: false, ..Default::default() };
        let p = grad_check(&m, &batch(1), &[1, 3], Task::Alteration, &plain).unwrap();
        assert_eq!(p.kinked, 0);
        assert!(p.max_rel_error > 1e-2, "{p:?}");
        let aware = GradCheckOptions { kink_aware: true, ..plain };
        let a = grad_check(&m, &batch(1), &[1, 3], Task::Alteration, &aware).unwrap();
        assert!(a.kinked > 0 && a.smallest_step < 1e-2, "{a:?}");
        assert!(a.max_rel_error < p.max_rel_error / 5.0, "{a:?} vs {p:?}");
    }

    #[test]
    fn zero_batch_is_finite() {
        let m = Model::<f64>::build(&tiny(), &[Task::Gender], 3).unwrap();
        let x = Tensor::zeros(&[2, 1, 32, 32]);
        let opts = GradCheckOptions { max_coords: 40, ..Default::default() };
        let r = grad_check(&m, &x, &[0, 0], Task::Gender, &opts).unwrap();
        assert!(r.max_rel_error.is_finite());
    }

    #[test]
    fn sampling_covers_every_tensor() {
        let m = Model::<f64>::build(&tiny(), &[Task::Gender], 3).unwrap();
        let grads = m.loss_and_grads(&batch(2), &[0, 1], Task::Gender).unwrap().grads;
        let coords = sample_coords(&grads, 500, 9);
        assert_eq!(coords.len(), 500);
        for name in grads.keys() {
            assert!(coords.iter().any(|(n, _)| n == name), "{name}");
        }
        assert_eq!(coords, sample_coords(&grads, 500, 9));
    }
}
