//! Offline `target: neg1, neg2, ...` lexicon files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses one record per line. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (target, rest) = line.split_once(':').ok_or_else(|| Error::invalid(format!("lexicon line {}: missing `:`", lineno + 1)))?;
            let target = target.trim();
            if target.is_empty() {
                return Err(Error::invalid(format!("lexicon line {}: empty target", lineno + 1)));
            }
            let negatives = rest.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect();
            entries.insert(target.to_lowercase(), negatives);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, target: &str, negatives: &[&str]) {
        self.entries.insert(target.to_lowercase(), negatives.iter().map(|s| s.to_string()).collect());
    }

    pub fn get(&self, target: &str) -> Option<&[String]> {
        self.entries.get(&target.trim().to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}: {}\n", v.join(", "))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let lex = Lexicon::parse("# comment\nDog: grass, person , fence\n\nroad: car\n").unwrap();
        assert_eq!(lex.get("dog").unwrap(), ["grass", "person", "fence"]);
        assert_eq!(lex.get("ROAD").unwrap(), ["car"]);
        assert_eq!(Lexicon::parse(&lex.render()).unwrap(), lex);
        assert!(Lexicon::parse("no colon here").is_err());
    }
}
