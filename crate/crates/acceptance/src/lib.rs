//! Verdict lines for the acceptance suite.

use std::fmt;
use std::io::Write;

/// Outcome of one acceptance criterion next to its reference figure.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: u8,
    pub title: &'static str,
    pub pass: bool,
    pub desk: String,
    pub reference: &'static str,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} criterion {:>2} {:<28} desk: {} | reference: {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.desk,
            self.reference
        )
    }
}

impl Verdict {
    /// Writes the line straight to stdout so it shows up even when the
    /// test harness captures output, then fails the test if red.
    pub fn emit(&self) {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{self}");
        let _ = out.flush();
        assert!(self.pass, "{self}");
    }
}

pub fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let v = Verdict {
            id: 4,
            title: "spectral vs baseline",
            pass: false,
            desk: pct(0.19),
            reference: "1.7%",
        };
        let s = v.to_string();
        assert!(s.starts_with("FAIL criterion  4 spectral vs baseline"));
        assert!(s.ends_with("desk: 19.0% | reference: 1.7%"));
    }
}
