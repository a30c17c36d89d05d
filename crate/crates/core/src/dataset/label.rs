use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Hand {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Little,
}

/// Alteration applied to an impression. The declaration order is the class
/// order of the four-way alteration task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Alteration {
    Obliteration,
    CentralRotation,
    ZCut,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    None,
    Easy,
    Medium,
    Hard,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];
}

impl Hand {
    pub const ALL: [Hand; 2] = [Hand::Left, Hand::Right];
}

impl Finger {
    pub const ALL: [Finger; 5] =
        [Finger::Thumb, Finger::Index, Finger::Middle, Finger::Ring, Finger::Little];
}

impl Alteration {
    pub const ALL: [Alteration; 4] = [
        Alteration::Obliteration,
        Alteration::CentralRotation,
        Alteration::ZCut,
        Alteration::Real,
    ];
    pub const ALTERED: [Alteration; 3] =
        [Alteration::Obliteration, Alteration::CentralRotation, Alteration::ZCut];

    pub fn is_real(self) -> bool {
        self == Alteration::Real
    }
}

impl Severity {
    pub const GRADED: [Severity; 3] = [Severity::Easy, Severity::Medium, Severity::Hard];
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for Alteration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Ground truth attached to one impression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecordLabel {
    pub subject_id: u32,
    pub gender: Gender,
    pub hand: Hand,
    pub finger: Finger,
    pub alteration: Alteration,
    pub severity: Severity,
}

impl RecordLabel {
    /// Checks `subject_id > 0` and `alteration == Real <=> severity == None`.
    pub fn validate(&self) -> Result<(), String> {
        if self.subject_id == 0 {
            return Err("subject_id must be positive".into());
        }
        if self.alteration.is_real() != (self.severity == Severity::None) {
            return Err(format!(
                "alteration {:?} is inconsistent with severity {:?}",
                self.alteration, self.severity
            ));
        }
        Ok(())
    }

    /// Stratification key used by the splitter.
    pub fn stratum(&self) -> (Alteration, Severity) {
        (self.alteration, self.severity)
    }
}
