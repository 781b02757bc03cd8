//! Uniform pass/fail reporting for hypothesis suites.

use std::fmt;

/// One named check with its verdict and a human-readable witness string on
/// failure (ids, iterate indices, offending boxes).
#[derive(Clone, Debug, serde::Serialize)]
pub struct CheckItem {
    pub name: String,
    pub pass: bool,
    pub details: String,
}

impl CheckItem {
    pub fn pass(name: impl Into<String>, details: impl Into<String>) -> Self {
        CheckItem {
            name: name.into(),
            pass: true,
            details: details.into(),
        }
    }

    pub fn fail(name: impl Into<String>, details: impl Into<String>) -> Self {
        CheckItem {
            name: name.into(),
            pass: false,
            details: details.into(),
        }
    }

    pub fn of(name: impl Into<String>, pass: bool, details: impl Into<String>) -> Self {
        CheckItem {
            name: name.into(),
            pass,
            details: details.into(),
        }
    }
}

/// A named batch of checks.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct Report {
    pub items: Vec<CheckItem>,
}

impl Report {
    pub fn new() -> Self {
        Report { items: Vec::new() }
    }

    pub fn push(&mut self, item: CheckItem) {
        self.items.push(item);
    }

    pub fn all_pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }

    pub fn failures(&self) -> Vec<&CheckItem> {
        self.items.iter().filter(|i| !i.pass).collect()
    }

    pub fn merge(&mut self, other: Report) {
        self.items.extend(other.items);
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for item in &self.items {
            writeln!(
                f,
                "[{}] {}{}",
                if item.pass { "PASS" } else { "FAIL" },
                item.name,
                if item.details.is_empty() {
                    String::new()
                } else {
                    format!(" — {}", item.details)
                }
            )?;
        }
        Ok(())
    }
}
