use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    /// The predicted intention stands.
    Keep,
    StayStill,
    Class(usize),
}

/// A validated three-part answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementDecision {
    pub correct: bool,
    /// `None` when `correct`.
    pub immobility: Option<bool>,
    pub correction: Correction,
}

impl RefinementDecision {
    pub const KEEP: Self = Self {
        correct: true,
        immobility: None,
        correction: Correction::Keep,
    };
    pub const STAY_STILL: Self = Self {
        correct: false,
        immobility: Some(true),
        correction: Correction::StayStill,
    };

    pub fn class(c: usize) -> Self {
        Self {
            correct: false,
            immobility: Some(false),
            correction: Correction::Class(c),
        }
    }
}

impl fmt::Display for RefinementDecision {
    /// Canonical answer text.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.correction {
            Correction::Keep => write!(f, r#"["yes","None","None"]"#),
            Correction::StayStill => write!(f, r#"["no","yes","stay still"]"#),
            Correction::Class(c) => write!(f, r#"["no","no","{c}"]"#),
        }
    }
}

/// Parses an answer such as `["no", "no", "2"]`.
///
/// Values are case-insensitive and may carry surrounding whitespace.
/// `intentions` is the number of selectable class indices; `stay_still`
/// says whether the immobility answer is available.
pub fn parse_answer(text: &str, intentions: usize, stay_still: bool) -> Result<RefinementDecision> {
    let fields: Vec<String> = serde_json::from_str(text.trim())
        .map_err(|e| Error::Answer(format!("not a list of strings ({e}): {text:?}")))?;
    let [q1, q2, q3] = <[String; 3]>::try_from(fields)
        .map_err(|f| Error::Answer(format!("expected 3 elements, found {}", f.len())))?;
    let norm = |s: &str| s.trim().to_lowercase();
    let (q1, q2, q3) = (norm(&q1), norm(&q2), norm(&q3));
    let decision = match (q1.as_str(), q2.as_str()) {
        ("yes", "none") if q3 == "none" => RefinementDecision::KEEP,
        ("yes", _) => {
            return Err(Error::Answer(format!(
                "a \"yes\" first answer requires \"None\" for the others, got {q2:?}, {q3:?}"
            )))
        }
        ("no", "yes") if q3 == "stay still" => {
            if !stay_still {
                return Err(Error::Answer("\"stay still\" is not an available intention".into()));
            }
            RefinementDecision::STAY_STILL
        }
        ("no", "yes") => {
            return Err(Error::Answer(format!("\"yes\" second answer requires \"stay still\", got {q3:?}")))
        }
        ("no", "no") => {
            let c: usize = q3
                .parse()
                .map_err(|_| Error::Answer(format!("third answer {q3:?} is not a class index")))?;
            if c >= intentions {
                return Err(Error::Answer(format!("class index {c} outside 0..{intentions}")));
            }
            RefinementDecision::class(c)
        }
        ("no", other) => return Err(Error::Answer(format!("second answer {other:?} after \"no\""))),
        (other, _) => return Err(Error::Answer(format!("first answer {other:?} is not yes/no"))),
    };
    Ok(decision)
}
