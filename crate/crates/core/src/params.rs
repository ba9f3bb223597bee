//! Serde helpers for parameters that accept either a number or a keyword
//! such as `"auto"` or `"off"`.

use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
pub(crate) enum NumberOrKeyword {
    Number(f64),
    Keyword(String),
}

impl NumberOrKeyword {
    pub(crate) fn expect_keyword(self, allowed: &[&str]) -> Result<String, String> {
        match self {
            NumberOrKeyword::Keyword(k) if allowed.contains(&k.as_str()) => Ok(k),
            NumberOrKeyword::Keyword(k) => Err(format!(
                "unknown keyword `{k}`, expected a number or one of {allowed:?}"
            )),
            NumberOrKeyword::Number(v) => Err(format!("unexpected number {v}")),
        }
    }

    pub(crate) fn as_count(v: f64) -> Result<usize, String> {
        if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(format!("{v} is not a nonnegative integer"))
        }
    }
}
