//! Deterministic stratified train/validation/test partitioning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::label::RecordLabel;
use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.5, val: 0.2, test: 0.3 }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let f = self.as_array();
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidFractions(format!(
                "{:?} must be nonnegative and sum to 1",
                f
            )));
        }
        Ok(())
    }

    fn nonzero_parts(&self) -> usize {
        self.as_array().iter().filter(|&&x| x > 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Stratified by (alteration, severity); a subject may appear in several parts.
    #[default]
    ByImage,
    /// Whole subjects are assigned to one part.
    BySubject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" | "validation" => Ok(SplitPart::Validation),
            "test" => Ok(SplitPart::Test),
            other => Err(format!("unknown split {other:?} (train|val|test)")),
        }
    }
}

impl std::fmt::Display for SplitPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitPart::Train => "train",
            SplitPart::Validation => "val",
            SplitPart::Test => "test",
        })
    }
}

/// Entry indices per part, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<usize>,
    #[serde(rename = "val")]
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string(self)
            .map_err(|source| DatasetError::Json { path: path.display().to_string(), source })?;
        std::fs::write(path, json + "\n")
            .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let raw = std::fs::read(path)
            .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        serde_json::from_slice(&raw)
            .map_err(|source| DatasetError::Json { path: path.display().to_string(), source })
    }

    /// Checks disjointness and coverage of `0..n`.
    pub fn check_partition(&self, n: usize) -> Result<(), String> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= n {
                return Err(format!("index {i} out of range for {n} entries"));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(format!("index {i} assigned twice"));
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(format!("index {i} unassigned")),
            None => Ok(()),
        }
    }
}

/// Largest-remainder apportionment of `n` items over the three fractions.
/// Ties go to the earlier part.
pub fn apportion(n: usize, fractions: &SplitFractions) -> [usize; 3] {
    let f = fractions.as_array();
    let mut counts = [0usize; 3];
    let mut rema = [0f64; 3];
    for i in 0..3 {
        let mut q = n as f64 * f[i];
        if (q - q.round()).abs() < 1e-9 {
            q = q.round();
        }
        counts[i] = q.floor() as usize;
        rema[i] = q - q.floor();
    }
    let left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rema[b].partial_cmp(&rema[a]).unwrap().then(a.cmp(&b)));
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

fn assign_group(
    members: &mut [usize],
    counts: [usize; 3],
    rng: &mut ChaCha8Rng,
    out: &mut [Vec<usize>; 3],
) {
    members.shuffle(rng);
    let mut it = members.iter().copied();
    for (part, &c) in counts.iter().enumerate() {
        out[part].extend(it.by_ref().take(c));
    }
}

/// Splits entry indices stratified by (alteration, severity).
pub fn split_manifest(
    labels: &[RecordLabel],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitAssignment, DatasetError> {
    fractions.validate()?;
    let mut strata: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        strata.entry(l.stratum()).or_default().push(i);
    }
    let needed = fractions.nonzero_parts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for ((alteration, severity), members) in strata.iter_mut() {
        if members.len() < needed {
            return Err(DatasetError::DegenerateStratum(format!(
                "{alteration}/{severity} has {} entries, need {needed}",
                members.len()
            )));
        }
        let counts = apportion(members.len(), &fractions);
        assign_group(members, counts, &mut rng, &mut parts);
    }
    Ok(finish(seed, parts))
}

/// Subject-disjoint variant: subjects are apportioned, then all of a
/// subject's entries follow it.
pub fn split_by_subject(
    labels: &[RecordLabel],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitAssignment, DatasetError> {
    fractions.validate()?;
    let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_subject.entry(l.subject_id).or_default().push(i);
    }
    let needed = fractions.nonzero_parts();
    if by_subject.len() < needed {
        return Err(DatasetError::DegenerateStratum(format!(
            "{} subjects, need {needed}",
            by_subject.len()
        )));
    }
    let mut subjects: Vec<usize> = (0..by_subject.len()).collect();
    let groups: Vec<&Vec<usize>> = by_subject.values().collect();
    let counts = apportion(subjects.len(), &fractions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: [Vec<usize>; 3] = Default::default();
    assign_group(&mut subjects, counts, &mut rng, &mut chosen);
    let parts = chosen.map(|subs| subs.iter().flat_map(|&s| groups[s].iter().copied()).collect());
    Ok(finish(seed, parts))
}

fn finish(seed: u64, parts: [Vec<usize>; 3]) -> SplitAssignment {
    let [mut train, mut validation, mut test] = parts;
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    SplitAssignment { seed, train, validation, test }
}

pub fn split(
    labels: &[RecordLabel],
    fractions: SplitFractions,
    seed: u64,
    mode: SplitMode,
) -> Result<SplitAssignment, DatasetError> {
    match mode {
        SplitMode::ByImage => split_manifest(labels, fractions, seed),
        SplitMode::BySubject => split_by_subject(labels, fractions, seed),
    }
}
