use std::fmt;
use std::str::FromStr;

/// Five-digit county FIPS code. Displays zero-padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fips(pub u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FipsParseError(pub String);

impl fmt::Display for FipsParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid FIPS code `{}`", self.0)
    }
}

impl std::error::Error for FipsParseError {}

impl FromStr for Fips {
    type Err = FipsParseError;

    /// Accepts "08013", "8013" and the "8013.0" form some exports use.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let digits = t.strip_suffix(".0").unwrap_or(t);
        if digits.is_empty() || digits.len() > 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(FipsParseError(s.to_string()));
        }
        let v: u32 = digits.parse().map_err(|_| FipsParseError(s.to_string()))?;
        if v == 0 {
            return Err(FipsParseError(s.to_string()));
        }
        Ok(Fips(v))
    }
}

impl fmt::Display for Fips {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:05}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_common_forms() {
        assert_eq!("08013".parse::<Fips>().unwrap(), Fips(8013));
        assert_eq!("8013".parse::<Fips>().unwrap(), Fips(8013));
        assert_eq!("8013.0".parse::<Fips>().unwrap(), Fips(8013));
        assert_eq!(Fips(8013).to_string(), "08013");
    }

    #[test]
    fn rejects_garbage() {
        for s in ["", "abc", "123456", "0", "-1", "12.5"] {
            assert!(s.parse::<Fips>().is_err(), "{s}");
        }
    }
}
