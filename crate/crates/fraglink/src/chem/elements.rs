//! Element parameter table: covalent radii, van der Waals radii and valence
//! caps, loaded from the data file shipped with the crate so every derived
//! number is reproducible from the repository alone.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{FraglinkError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementInfo {
    /// Single-bond covalent radius, Å.
    pub covalent_radius: f64,
    /// Van der Waals radius, Å.
    pub vdw_radius: f64,
    /// Degree cap used by the validity check.
    pub max_valence: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementTable {
    entries: BTreeMap<String, ElementInfo>,
}

const BUILTIN_TABLE: &str = include_str!("../../data/elements.tsv");

impl ElementTable {
    /// The table from `data/elements.tsv`.
    pub fn builtin() -> &'static ElementTable {
        static TABLE: OnceLock<ElementTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            ElementTable::parse(BUILTIN_TABLE).expect("builtin element table parses")
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(FraglinkError::Parse {
                    line: lineno + 1,
                    message: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| FraglinkError::Parse {
                    line: lineno + 1,
                    message: format!("bad number {s:?}"),
                })
            };
            let covalent_radius = parse_f(fields[1])?;
            let vdw_radius = parse_f(fields[2])?;
            let max_valence = fields[3].parse::<usize>().map_err(|_| FraglinkError::Parse {
                line: lineno + 1,
                message: format!("bad valence {:?}", fields[3]),
            })?;
            if covalent_radius <= 0.0 || vdw_radius <= 0.0 {
                return Err(FraglinkError::Parse {
                    line: lineno + 1,
                    message: "radii must be positive".into(),
                });
            }
            entries.insert(
                fields[0].to_string(),
                ElementInfo { covalent_radius, vdw_radius, max_valence },
            );
        }
        Ok(ElementTable { entries })
    }

    pub fn get(&self, symbol: &str) -> Result<&ElementInfo> {
        self.entries
            .get(symbol)
            .ok_or_else(|| FraglinkError::UnknownAtomType(symbol.to_string()))
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.entries.contains_key(symbol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_covers_organic_set() {
        let t = ElementTable::builtin();
        for sym in ["H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I"] {
            assert!(t.contains(sym), "missing {sym}");
        }
        let c = t.get("C").unwrap();
        assert_eq!(c.covalent_radius, 0.76);
        assert_eq!(c.vdw_radius, 1.70);
        assert_eq!(c.max_valence, 4);
    }

    #[test]
    fn unknown_symbol_errors() {
        assert!(matches!(
            ElementTable::builtin().get("Xx"),
            Err(FraglinkError::UnknownAtomType(_))
        ));
    }

    #[test]
    fn rejects_malformed_rows() {
        assert!(ElementTable::parse("C 0.76 1.70").is_err());
        assert!(ElementTable::parse("C 0.76 nope 4").is_err());
        assert!(ElementTable::parse("C -1 1.70 4").is_err());
    }
}
