use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{CdcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecurityClass {
    Source,
    Sink,
    Sanitizer,
}

/// Function classes for the toy security analysis.
///
/// These sets are a stand-in for real CWE sink catalogs; they are not derived
/// from any real-language taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRegistry {
    pub sources: BTreeSet<String>,
    pub sinks: BTreeSet<String>,
    pub sanitizers: BTreeSet<String>,
    pub pure: BTreeSet<String>,
    /// Sinks whose identifier argument must be preceded by `check ( id ) ;` in the same block.
    pub guarded_sinks: BTreeSet<String>,
}

impl Default for FunctionRegistry {
    fn default() -> Self {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            sources: set(&["input"]),
            sinks: set(&["exec", "query"]),
            sanitizers: set(&["escape"]),
            pure: set(&["inc", "dbl"]),
            guarded_sinks: set(&["exec", "query"]),
        }
    }
}

impl FunctionRegistry {
    pub fn validate(&self) -> Result<()> {
        let overlap = self
            .sources
            .intersection(&self.sinks)
            .chain(self.sources.intersection(&self.sanitizers))
            .chain(self.sinks.intersection(&self.sanitizers))
            .next();
        if let Some(name) = overlap {
            return Err(CdcError::Config(format!(
                "function {name:?} is in more than one security class"
            )));
        }
        if let Some(g) = self.guarded_sinks.iter().find(|g| !self.sinks.contains(*g)) {
            return Err(CdcError::Config(format!("guarded sink {g:?} is not a sink")));
        }
        Ok(())
    }

    pub fn class_of(&self, func: &str) -> Option<SecurityClass> {
        if self.sources.contains(func) {
            Some(SecurityClass::Source)
        } else if self.sinks.contains(func) {
            Some(SecurityClass::Sink)
        } else if self.sanitizers.contains(func) {
            Some(SecurityClass::Sanitizer)
        } else {
            None
        }
    }

    pub fn requires_guard(&self, sink: &str) -> bool {
        self.guarded_sinks.contains(sink)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sets_are_disjoint() {
        let r = FunctionRegistry::default();
        r.validate().unwrap();
        assert_eq!(r.class_of("input"), Some(SecurityClass::Source));
        assert_eq!(r.class_of("exec"), Some(SecurityClass::Sink));
        assert_eq!(r.class_of("escape"), Some(SecurityClass::Sanitizer));
        assert_eq!(r.class_of("inc"), None);
    }

    #[test]
    fn overlapping_sets_fail_validation() {
        let mut r = FunctionRegistry::default();
        r.sanitizers.insert("exec".into());
        assert!(r.validate().is_err());
    }
}
