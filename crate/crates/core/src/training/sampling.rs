use rand::seq::SliceRandom;

use super::TrainError;
use crate::seed;

/// Class-balanced epoch: every class is shuffled (seeded) and truncated to
/// the smallest class count, then each batch takes `batch_size / n_classes`
/// indices from every class. `labels[i]` is the class of sample `i`.
pub fn undersample_epoch(
    labels: &[usize],
    n_classes: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if n_classes < 2 {
        return Err(TrainError::Config("undersampling needs at least two classes".into()));
    }
    if batch_size == 0 || !batch_size.is_multiple_of(n_classes) {
        return Err(TrainError::Config(format!("batch size {batch_size} is not a multiple of {n_classes} classes")));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        let bucket = per_class
            .get_mut(c)
            .ok_or_else(|| TrainError::Config(format!("label {c} outside [0, {n_classes})")))?;
        bucket.push(i);
    }
    if let Some(empty) = per_class.iter().position(Vec::is_empty) {
        return Err(TrainError::DegenerateClass(empty));
    }
    let min = per_class.iter().map(Vec::len).min().unwrap();
    for (c, idx) in per_class.iter_mut().enumerate() {
        idx.shuffle(&mut seed::rng(seed::derive(seed, &[c as u64])));
        idx.truncate(min);
    }
    let q = batch_size / n_classes;
    let n_batches = min * n_classes / batch_size;
    let mut order_rng = seed::rng(seed::derive(seed, &[u64::MAX]));
    Ok((0..n_batches)
        .map(|b| {
            let mut batch: Vec<usize> = per_class.iter().flat_map(|idx| idx[b * q..(b + 1) * q].iter().copied()).collect();
            batch.shuffle(&mut order_rng);
            batch
        })
        .collect())
}

/// Seeded shuffle of `0..n` cut into batches of `batch_size`. A trailing
/// partial batch is dropped unless it is the only one.
pub fn shuffled_epoch(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < batch_size) {
        batches.pop();
    }
    batches
}
