// SPDX-License-Identifier: Apache-2.0

//! Exit codes: 0 success, 2 config or validation, 3 numerical failure, 4 I/O.

use std::fmt;
use std::path::Path;

use g2kin::Error;

pub const CONFIG: u8 = 2;
pub const NUMERICAL: u8 = 3;
pub const IO: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Failure {
            code: NUMERICAL,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Failure {
            code: IO,
            message: format!("{}: {e}", path.display()),
        }
    }

    /// Library error with the file it came from.
    pub fn at(path: &Path, e: Error) -> Self {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Exit code for a library error, judged by its innermost cause.
pub fn code_of(e: &Error) -> u8 {
    match e.root() {
        Error::Invalid { .. }
        | Error::PowerOutOfRange { .. }
        | Error::Unsorted { .. }
        | Error::EventBudget { .. }
        | Error::Parse(_) => CONFIG,
        Error::Io(_) => IO,
        Error::Degenerate(_)
        | Error::NoSolution(_)
        | Error::Ambiguous { .. }
        | Error::Unidentifiable(_)
        | Error::NotConverged { .. }
        | Error::CalibrationFailed(_)
        | Error::RankDeficient(_)
        | Error::Stage { .. } => NUMERICAL,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: code_of(&e),
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_tags_do_not_hide_the_cause() {
        let e = Error::Stage {
            stage: "calibrate",
            source: Box::new(Error::CalibrationFailed("flat".into())),
        };
        assert_eq!(code_of(&e), NUMERICAL);
        let e = Error::Stage {
            stage: "simulate",
            source: Box::new(Error::Io("disk full".into())),
        };
        assert_eq!(code_of(&e), IO);
        assert_eq!(Failure::from(e).message, "simulate: I/O error: disk full");
    }
}
