use serde::{Deserialize, Serialize};

use crate::dataset::{Alteration, Finger, Gender, Hand, RecordLabel};

/// Classification target. Class indices follow [`Task::class_names`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Fakeness,
    Alteration,
    Gender,
    Hand,
    Finger,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Fakeness, Task::Alteration, Task::Gender, Task::Hand, Task::Finger];

    pub fn name(self) -> &'static str {
        match self {
            Task::Fakeness => "fakeness",
            Task::Alteration => "alteration",
            Task::Gender => "gender",
            Task::Hand => "hand",
            Task::Finger => "finger",
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Fakeness => &["Altered", "Real"],
            Task::Alteration => &["Obl", "Cr", "Z-cut", "Real"],
            Task::Gender => &["Male", "Female"],
            Task::Hand => &["Left", "Right"],
            Task::Finger => &["Thumb", "Index", "Middle", "Ring", "Little"],
        }
    }

    pub fn n_classes(self) -> usize {
        self.class_names().len()
    }

    /// Index of the class reported as "positive" in binary metrics.
    pub fn positive_class(self) -> Option<usize> {
        match self {
            Task::Fakeness => Some(0),
            Task::Gender | Task::Hand => Some(0),
            _ => None,
        }
    }

    pub fn class_of(self, label: &RecordLabel) -> usize {
        match self {
            Task::Fakeness => usize::from(label.alteration.is_real()),
            Task::Alteration => Alteration::ALL.iter().position(|&a| a == label.alteration).unwrap(),
            Task::Gender => Gender::ALL.iter().position(|&g| g == label.gender).unwrap(),
            Task::Hand => Hand::ALL.iter().position(|&h| h == label.hand).unwrap(),
            Task::Finger => Finger::ALL.iter().position(|&f| f == label.finger).unwrap(),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task {s:?} (fakeness, alteration, gender, hand, finger)"))
    }
}
