//! Exact costs. Budgets and charges are `Rational64` end to end and travel
//! through text as `"p/q"` strings.

use num_rational::Rational64;
use num_traits::ToPrimitive;

use crate::error::{Error, Result};

pub type Cost = Rational64;

/// Parses `"p/q"` or a bare integer `"p"`.
pub fn parse_rational(text: &str) -> Result<Cost> {
    let text = text.trim();
    let bad = || Error::Config(format!("invalid rational `{text}`, expected \"p/q\""));
    let (num, den) = match text.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (text, "1"),
    };
    let num: i64 = num.parse().map_err(|_| bad())?;
    let den: i64 = den.parse().map_err(|_| bad())?;
    if den == 0 {
        return Err(bad());
    }
    Ok(Rational64::new(num, den))
}

/// Always `p/q`, even for integers.
pub fn format_rational(r: &Cost) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

pub fn to_f64(r: &Cost) -> f64 {
    r.to_f64().expect("i64 ratio converts to f64")
}

/// `floor(a / b)` for positive `b`.
pub fn floor_div(a: &Cost, b: &Cost) -> i64 {
    (a / b).floor().to_integer()
}

/// Serde adapter storing a [`Cost`] as a `"p/q"` string.
pub mod serde_str {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{format_rational, parse_rational, Cost};

    pub fn serialize<S: Serializer>(value: &Cost, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_rational(value))
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Text(String),
        Integer(i64),
    }

    /// Accepts `"p/q"` strings and bare integers.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Cost, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Text(text) => parse_rational(&text).map_err(serde::de::Error::custom),
            Repr::Integer(n) => Ok(Cost::from_integer(n)),
        }
    }
}
