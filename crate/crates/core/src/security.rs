//! Tradeable claims: conjunctions of proposition literals.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::structure::{Assignment, CarrollStructure, PropId, StructureError};

/// A literal `(proposition, polarity)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Literal {
    pub prop: PropId,
    pub value: bool,
}

/// A conjunction of literals, at most one per proposition, kept sorted by id.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Security {
    literals: Vec<Literal>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SecurityError {
    #[error("security has no literals")]
    Empty,
    #[error("proposition {0} appears twice with opposite polarity")]
    Contradictory(PropId),
    #[error("malformed literal `{0}`")]
    Malformed(String),
    #[error(transparent)]
    Structure(#[from] StructureError),
}

impl Security {
    pub fn new<I: IntoIterator<Item = (PropId, bool)>>(lits: I) -> Result<Self, SecurityError> {
        let mut literals: Vec<Literal> = lits
            .into_iter()
            .map(|(prop, value)| Literal { prop, value })
            .collect();
        literals.sort();
        literals.dedup();
        if literals.is_empty() {
            return Err(SecurityError::Empty);
        }
        for w in literals.windows(2) {
            if w[0].prop == w[1].prop {
                return Err(SecurityError::Contradictory(w[0].prop));
            }
        }
        Ok(Security { literals })
    }

    /// Single positive literal `prop = true`.
    pub fn yes(prop: PropId) -> Self {
        Security {
            literals: vec![Literal { prop, value: true }],
        }
    }

    pub fn no(prop: PropId) -> Self {
        Security {
            literals: vec![Literal { prop, value: false }],
        }
    }

    pub fn literal(prop: PropId, value: bool) -> Self {
        Security {
            literals: vec![Literal { prop, value }],
        }
    }

    /// The security paying out exactly on `a`.
    pub fn outcome(a: &Assignment) -> Self {
        Security {
            literals: (0..a.len())
                .map(|i| {
                    let prop = PropId(i as u32);
                    Literal {
                        prop,
                        value: a.get(prop),
                    }
                })
                .collect(),
        }
    }

    pub fn literals(&self) -> &[Literal] {
        &self.literals
    }

    pub fn props(&self) -> impl Iterator<Item = PropId> + '_ {
        self.literals.iter().map(|l| l.prop)
    }

    pub fn is_single(&self) -> bool {
        self.literals.len() == 1
    }

    /// `(mask, value)` such that `a` satisfies the security iff
    /// `a.bits() & mask == value`.
    pub fn mask(&self) -> (u64, u64) {
        self.literals.iter().fold((0, 0), |(m, v), l| {
            let bit = 1u64 << l.prop.0;
            (m | bit, if l.value { v | bit } else { v })
        })
    }

    #[inline]
    pub fn matches(&self, a: &Assignment) -> bool {
        let (m, v) = self.mask();
        a.bits() & m == v
    }

    /// Ensures every referenced proposition exists in `s`.
    pub fn check(&self, s: &CarrollStructure) -> Result<(), SecurityError> {
        for l in &self.literals {
            if s.get(l.prop).is_none() {
                return Err(StructureError::UnknownEndpoint(l.prop).into());
            }
        }
        Ok(())
    }

    /// Parses `A`, `!A`, `A=F`, `A=T` literals joined by `&`.
    pub fn parse(text: &str, s: &CarrollStructure) -> Result<Self, SecurityError> {
        let mut lits = Vec::new();
        for raw in text.split('&') {
            let tok = raw.trim();
            if tok.is_empty() {
                return Err(SecurityError::Malformed(text.to_string()));
            }
            let (name, value) = if let Some(rest) = tok.strip_prefix('!') {
                (rest.trim(), false)
            } else if let Some((n, v)) = tok.split_once('=') {
                let value = match v.trim() {
                    "T" | "t" | "true" | "1" => true,
                    "F" | "f" | "false" | "0" => false,
                    _ => return Err(SecurityError::Malformed(tok.to_string())),
                };
                (n.trim(), value)
            } else {
                (tok, true)
            };
            lits.push((s.lookup(name)?, value));
        }
        Self::new(lits)
    }

    pub fn display<'a>(&'a self, s: &'a CarrollStructure) -> SecurityDisplay<'a> {
        SecurityDisplay { sec: self, s }
    }
}

pub struct SecurityDisplay<'a> {
    sec: &'a Security,
    s: &'a CarrollStructure,
}

impl fmt::Display for SecurityDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.sec.literals.iter().enumerate() {
            if i > 0 {
                f.write_str("&")?;
            }
            let name = self.s.get(l.prop).map(|p| p.name.as_str()).unwrap_or("?");
            if !l.value {
                f.write_str("!")?;
            }
            f.write_str(name)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::Relation;

    fn abr() -> CarrollStructure {
        let mut s = CarrollStructure::new();
        let a = s.add_atomic("A", "").unwrap();
        let b = s.add_atomic("B", "").unwrap();
        s.add_paired("r", b, a, Relation::Nand).unwrap();
        s
    }

    #[test]
    fn parse_and_display_round_trip() {
        let s = abr();
        let sec = Security::parse("r & !B & A=T", &s).unwrap();
        assert_eq!(sec.literals().len(), 3);
        assert_eq!(sec.display(&s).to_string(), "A&!B&r");
        assert_eq!(Security::parse("A&!B&r", &s).unwrap(), sec);
    }

    #[test]
    fn contradictions_rejected() {
        let s = abr();
        assert!(matches!(
            Security::parse("A&!A", &s),
            Err(SecurityError::Contradictory(_))
        ));
        assert!(matches!(
            Security::parse("Q", &s),
            Err(SecurityError::Structure(StructureError::UnknownName(_)))
        ));
        assert!(matches!(Security::parse("A&", &s), Err(SecurityError::Malformed(_))));
    }

    #[test]
    fn matching_counts() {
        let s = abr();
        let o = s.enumerate_outcomes().unwrap();
        let a = Security::yes(s.lookup("A").unwrap());
        assert_eq!(o.iter().filter(|w| a.matches(w)).count(), 3);
        let ab = Security::parse("A&B", &s).unwrap();
        assert_eq!(o.iter().filter(|w| ab.matches(w)).count(), 1);
    }

    #[test]
    fn serde_is_a_literal_list() {
        let sec = Security::new([(PropId(1), false), (PropId(0), true)]).unwrap();
        let json = serde_json::to_string(&sec).unwrap();
        assert_eq!(json, r#"[{"prop":0,"value":true},{"prop":1,"value":false}]"#);
        let back: Security = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sec);
    }
}
