//! File naming convention of the public SOCOFing release:
//! `Real/1__M_Left_index_finger.BMP`, `Altered/Altered-Hard/1__M_Left_index_finger_Zcut.BMP`.

use std::path::{Path, PathBuf};

use super::label::{Alteration, Finger, Gender, Hand, RecordLabel, Severity};
use super::DatasetError;

fn malformed(reason: impl Into<String>) -> DatasetError {
    DatasetError::MalformedName(reason.into())
}

/// True for `.bmp`/`.png` in any letter case.
pub fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("bmp") || e.eq_ignore_ascii_case("png"))
        .unwrap_or(false)
}

fn severity_of_component(component: &str) -> Option<Severity> {
    component
        .split(['-', '_', ' '])
        .find_map(|tok| match tok.to_ascii_lowercase().as_str() {
            "easy" => Some(Severity::Easy),
            "medium" => Some(Severity::Medium),
            "hard" => Some(Severity::Hard),
            _ => None,
        })
}

/// Parses a SOCOFing-style path. The basename carries subject, gender, hand,
/// finger and an optional alteration token; severity comes from the nearest
/// `Easy`/`Medium`/`Hard` directory component.
pub fn parse_socofing_name(path: &Path) -> Result<RecordLabel, DatasetError> {
    if !has_image_extension(path) {
        return Err(malformed(format!("{}: not a .bmp/.png file", path.display())));
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| malformed("non UTF-8 file name"))?;
    let (id, rest) = stem
        .split_once("__")
        .ok_or_else(|| malformed(format!("{stem}: missing '__' after subject id")))?;
    let subject_id: u32 = id
        .parse()
        .map_err(|_| malformed(format!("{stem}: subject id {id:?} is not an integer")))?;
    if subject_id == 0 {
        return Err(malformed(format!("{stem}: subject id must be positive")));
    }

    let tokens: Vec<&str> = rest.split('_').collect();
    if tokens.len() != 4 && tokens.len() != 5 {
        return Err(malformed(format!("{stem}: expected 4 or 5 tokens after id, got {}", tokens.len())));
    }
    let gender = match tokens[0] {
        "M" | "m" => Gender::Male,
        "F" | "f" => Gender::Female,
        t => return Err(malformed(format!("{stem}: unknown gender {t:?}"))),
    };
    let hand = match tokens[1].to_ascii_lowercase().as_str() {
        "left" => Hand::Left,
        "right" => Hand::Right,
        t => return Err(malformed(format!("{stem}: unknown hand {t:?}"))),
    };
    let finger = match tokens[2].to_ascii_lowercase().as_str() {
        "thumb" => Finger::Thumb,
        "index" => Finger::Index,
        "middle" => Finger::Middle,
        "ring" => Finger::Ring,
        "little" => Finger::Little,
        t => return Err(malformed(format!("{stem}: unknown finger {t:?}"))),
    };
    if !tokens[3].eq_ignore_ascii_case("finger") {
        return Err(malformed(format!("{stem}: expected 'finger', got {:?}", tokens[3])));
    }
    let alteration = match tokens.get(4).map(|t| t.to_ascii_lowercase()) {
        None => Alteration::Real,
        Some(t) => match t.as_str() {
            "obl" => Alteration::Obliteration,
            "cr" => Alteration::CentralRotation,
            "zcut" => Alteration::ZCut,
            _ => return Err(malformed(format!("{stem}: unknown alteration token {t:?}"))),
        },
    };

    let severity = if alteration.is_real() {
        Severity::None
    } else {
        path.parent()
            .into_iter()
            .flat_map(|p| p.components().rev())
            .filter_map(|c| c.as_os_str().to_str())
            .find_map(severity_of_component)
            .ok_or_else(|| {
                malformed(format!("{}: altered image outside an Easy/Medium/Hard directory", path.display()))
            })?
    };

    Ok(RecordLabel { subject_id, gender, hand, finger, alteration, severity })
}

/// Inverse of [`parse_socofing_name`]: relative path `<dir>/<name>.<ext>`.
pub fn render_socofing_name(label: &RecordLabel, ext: &str) -> PathBuf {
    let g = match label.gender {
        Gender::Male => "M",
        Gender::Female => "F",
    };
    let h = match label.hand {
        Hand::Left => "Left",
        Hand::Right => "Right",
    };
    let f = match label.finger {
        Finger::Thumb => "thumb",
        Finger::Index => "index",
        Finger::Middle => "middle",
        Finger::Ring => "ring",
        Finger::Little => "little",
    };
    let suffix = match label.alteration {
        Alteration::Real => "",
        Alteration::Obliteration => "_Obl",
        Alteration::CentralRotation => "_CR",
        Alteration::ZCut => "_Zcut",
    };
    let dir = match label.severity {
        Severity::None => "Real",
        Severity::Easy => "Altered-Easy",
        Severity::Medium => "Altered-Medium",
        Severity::Hard => "Altered-Hard",
    };
    PathBuf::from(dir).join(format!("{}__{g}_{h}_{f}_finger{suffix}.{ext}", label.subject_id))
}
