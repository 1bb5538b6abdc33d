//! Proposition networks and the feasible outcome space they induce.
//!
//! A [`CarrollStructure`] holds atomic propositions plus *paired*
//! propositions: edges that are themselves tradeable propositions and that,
//! when true, switch on a logical relation between their endpoints. The
//! feasible outcomes are the truth assignments satisfying every edge
//! constraint, enumerated in lexicographic order of proposition insertion
//! (false before true).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper bound on the number of enumerated outcomes.
pub const DEFAULT_OUTCOME_CAP: usize = 1 << 20;

/// Assignments are packed into a `u64`, one bit per proposition.
pub const MAX_PROPOSITIONS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StructureError {
    #[error("proposition name must be non-empty")]
    EmptyName,
    #[error("duplicate proposition name `{0}`")]
    DuplicateName(String),
    #[error("unknown proposition `{0}`")]
    UnknownName(String),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(PropId),
    #[error("source `{0}` of a paired proposition must be atomic")]
    NonAtomicSource(String),
    #[error("paired proposition source and target are both `{0}`")]
    SelfReference(String),
    #[error("hyperedge needs at least 3 distinct members, got {0}")]
    HyperEdgeTooSmall(usize),
    #[error("hyperedge member `{0}` must be atomic")]
    NonAtomicMember(String),
    #[error("hyperedge member `{0}` listed twice")]
    DuplicateMember(String),
    #[error("outcome space exceeds cap of {cap} outcomes")]
    OutcomeSpaceTooLarge { cap: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PropId(pub u32);

impl PropId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub(crate) fn bit(self) -> u64 {
        1u64 << self.0
    }
}

impl fmt::Display for PropId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Logical relation carried by a binary paired proposition `r = (source, target)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    /// `¬(r ∧ source ∧ target)`.
    Nand,
    /// `r ⇒ (source ⇒ target)`.
    Support,
    /// `r ⇒ (source ⇔ target)`.
    Equivalence,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Nand => "nand",
            Relation::Support => "support",
            Relation::Equivalence => "equivalence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nand" => Some(Relation::Nand),
            "support" => Some(Relation::Support),
            "equivalence" | "equiv" => Some(Relation::Equivalence),
            _ => None,
        }
    }

    #[inline]
    pub fn allows(self, edge: bool, source: bool, target: bool) -> bool {
        match self {
            Relation::Nand => !(edge && source && target),
            Relation::Support => target || !source || !edge,
            Relation::Equivalence => !edge || source == target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropKind {
    Atomic,
    Paired {
        source: PropId,
        target: PropId,
        relation: Relation,
    },
    /// Switchable n-way NAND over atomic members: `¬(r ∧ m1 ∧ … ∧ mk)`.
    HyperNand { members: Vec<PropId> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposition {
    pub id: PropId,
    pub name: String,
    pub label: String,
    #[serde(flatten)]
    pub kind: PropKind,
}

impl Proposition {
    pub fn is_atomic(&self) -> bool {
        matches!(self.kind, PropKind::Atomic)
    }

    /// Propositions this one constrains (empty for atomics).
    pub fn endpoints(&self) -> Vec<PropId> {
        match &self.kind {
            PropKind::Atomic => Vec::new(),
            PropKind::Paired { source, target, .. } => vec![*source, *target],
            PropKind::HyperNand { members } => members.clone(),
        }
    }

    /// Whether this proposition's own constraint holds under `a`. Atomics are
    /// always satisfied.
    pub fn constraint_satisfied(&self, a: &Assignment) -> bool {
        let me = a.get(self.id);
        match &self.kind {
            PropKind::Atomic => true,
            PropKind::Paired {
                source,
                target,
                relation,
            } => relation.allows(me, a.get(*source), a.get(*target)),
            PropKind::HyperNand { members } => !(me && members.iter().all(|m| a.get(*m))),
        }
    }
}

/// One total truth assignment over a structure's propositions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment {
    bits: u64,
    len: u8,
}

impl Assignment {
    pub fn from_bits(bits: u64, len: usize) -> Self {
        debug_assert!(len <= MAX_PROPOSITIONS);
        let mask = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
        Assignment {
            bits: bits & mask,
            len: len as u8,
        }
    }

    pub fn from_values(values: &[bool]) -> Self {
        let bits = values
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, v)| if *v { acc | (1 << i) } else { acc });
        Self::from_bits(bits, values.len())
    }

    #[inline]
    pub fn get(&self, id: PropId) -> bool {
        self.bits & id.bit() != 0
    }

    pub fn set(&mut self, id: PropId, value: bool) {
        if value {
            self.bits |= id.bit();
        } else {
            self.bits &= !id.bit();
        }
    }

    #[inline]
    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.bits & (1 << i) != 0).collect()
    }
}

/// Ordered list of feasible assignments plus a reverse index.
#[derive(Clone, Debug, Default)]
pub struct OutcomeSpace {
    outcomes: Vec<Assignment>,
    index: HashMap<u64, usize>,
}

impl OutcomeSpace {
    fn from_outcomes(outcomes: Vec<Assignment>) -> Self {
        let index = outcomes
            .iter()
            .enumerate()
            .map(|(i, a)| (a.bits(), i))
            .collect();
        OutcomeSpace { outcomes, index }
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn get(&self, i: usize) -> &Assignment {
        &self.outcomes[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Assignment> {
        self.outcomes.iter()
    }

    pub fn as_slice(&self) -> &[Assignment] {
        &self.outcomes
    }

    pub fn index_of(&self, a: &Assignment) -> Option<usize> {
        self.index.get(&a.bits()).copied()
    }

    pub(crate) fn index_of_bits(&self, bits: u64) -> Option<usize> {
        self.index.get(&bits).copied()
    }
}

impl PartialEq for OutcomeSpace {
    fn eq(&self, other: &Self) -> bool {
        self.outcomes == other.outcomes
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StructureRepr {
    propositions: Vec<Proposition>,
    outcome_cap: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "StructureRepr", try_from = "StructureRepr")]
pub struct CarrollStructure {
    props: Vec<Proposition>,
    by_name: HashMap<String, PropId>,
    incident: Vec<Vec<PropId>>,
    outcome_cap: usize,
}

impl PartialEq for CarrollStructure {
    fn eq(&self, other: &Self) -> bool {
        self.props == other.props && self.outcome_cap == other.outcome_cap
    }
}

impl Default for CarrollStructure {
    fn default() -> Self {
        Self::new()
    }
}

impl From<CarrollStructure> for StructureRepr {
    fn from(s: CarrollStructure) -> Self {
        StructureRepr {
            propositions: s.props,
            outcome_cap: s.outcome_cap,
        }
    }
}

impl TryFrom<StructureRepr> for CarrollStructure {
    type Error = StructureError;

    fn try_from(repr: StructureRepr) -> Result<Self, Self::Error> {
        let mut s = CarrollStructure::with_outcome_cap(repr.outcome_cap);
        for (i, p) in repr.propositions.into_iter().enumerate() {
            if p.id.index() != i {
                return Err(StructureError::UnknownEndpoint(p.id));
            }
            s.push(p.name, p.label, p.kind)?;
        }
        Ok(s)
    }
}

impl CarrollStructure {
    pub fn new() -> Self {
        Self::with_outcome_cap(DEFAULT_OUTCOME_CAP)
    }

    pub fn with_outcome_cap(cap: usize) -> Self {
        CarrollStructure {
            props: Vec::new(),
            by_name: HashMap::new(),
            incident: Vec::new(),
            outcome_cap: cap,
        }
    }

    pub fn outcome_cap(&self) -> usize {
        self.outcome_cap
    }

    pub fn set_outcome_cap(&mut self, cap: usize) {
        self.outcome_cap = cap;
    }

    pub fn len(&self) -> usize {
        self.props.len()
    }

    pub fn is_empty(&self) -> bool {
        self.props.is_empty()
    }

    pub fn get(&self, id: PropId) -> Option<&Proposition> {
        self.props.get(id.index())
    }

    pub fn propositions(&self) -> &[Proposition] {
        &self.props
    }

    pub fn ids(&self) -> impl Iterator<Item = PropId> + '_ {
        self.props.iter().map(|p| p.id)
    }

    pub fn id_of(&self, name: &str) -> Option<PropId> {
        self.by_name.get(name).copied()
    }

    pub fn lookup(&self, name: &str) -> Result<PropId, StructureError> {
        self.id_of(name)
            .ok_or_else(|| StructureError::UnknownName(name.to_string()))
    }

    pub fn name(&self, id: PropId) -> &str {
        &self.props[id.index()].name
    }

    /// Paired propositions that have `id` as an endpoint.
    pub fn incident_edges(&self, id: PropId) -> &[PropId] {
        &self.incident[id.index()]
    }

    pub fn add_atomic(&mut self, name: &str, label: &str) -> Result<PropId, StructureError> {
        let label = if label.is_empty() { name } else { label };
        self.push(name.to_string(), label.to_string(), PropKind::Atomic)
    }

    pub fn add_paired(
        &mut self,
        name: &str,
        source: PropId,
        target: PropId,
        relation: Relation,
    ) -> Result<PropId, StructureError> {
        self.push(
            name.to_string(),
            name.to_string(),
            PropKind::Paired {
                source,
                target,
                relation,
            },
        )
    }

    pub fn add_hyper_nand(
        &mut self,
        name: &str,
        members: &[PropId],
    ) -> Result<PropId, StructureError> {
        self.push(
            name.to_string(),
            name.to_string(),
            PropKind::HyperNand {
                members: members.to_vec(),
            },
        )
    }

    fn push(
        &mut self,
        name: String,
        label: String,
        kind: PropKind,
    ) -> Result<PropId, StructureError> {
        if name.is_empty() {
            return Err(StructureError::EmptyName);
        }
        if self.by_name.contains_key(&name) {
            return Err(StructureError::DuplicateName(name));
        }
        if self.props.len() >= MAX_PROPOSITIONS {
            return Err(StructureError::OutcomeSpaceTooLarge {
                cap: self.outcome_cap,
            });
        }
        match &kind {
            PropKind::Atomic => {}
            PropKind::Paired { source, target, .. } => {
                let src = self.get(*source).ok_or(StructureError::UnknownEndpoint(*source))?;
                self.get(*target).ok_or(StructureError::UnknownEndpoint(*target))?;
                if !src.is_atomic() {
                    return Err(StructureError::NonAtomicSource(src.name.clone()));
                }
                if source == target {
                    return Err(StructureError::SelfReference(src.name.clone()));
                }
            }
            PropKind::HyperNand { members } => {
                if members.len() < 3 {
                    return Err(StructureError::HyperEdgeTooSmall(members.len()));
                }
                for (i, m) in members.iter().enumerate() {
                    let p = self.get(*m).ok_or(StructureError::UnknownEndpoint(*m))?;
                    if !p.is_atomic() {
                        return Err(StructureError::NonAtomicMember(p.name.clone()));
                    }
                    if members[..i].contains(m) {
                        return Err(StructureError::DuplicateMember(p.name.clone()));
                    }
                }
            }
        }
        let id = PropId(self.props.len() as u32);
        let prop = Proposition {
            id,
            name: name.clone(),
            label,
            kind,
        };
        self.incident.push(Vec::new());
        for e in prop.endpoints() {
            self.incident[e.index()].push(id);
        }
        self.by_name.insert(name, id);
        self.props.push(prop);
        Ok(id)
    }

    /// Whether every paired proposition's constraint holds under `a`.
    pub fn is_feasible(&self, a: &Assignment) -> bool {
        a.len() == self.len() && self.props.iter().all(|p| p.constraint_satisfied(a))
    }

    /// All feasible assignments in canonical order.
    pub fn enumerate_outcomes(&self) -> Result<OutcomeSpace, StructureError> {
        let n = self.props.len();
        let mut out = Vec::new();
        let mut a = Assignment::from_bits(0, n);
        self.dfs(0, &mut a, &mut out)?;
        Ok(OutcomeSpace::from_outcomes(out))
    }

    fn dfs(
        &self,
        i: usize,
        a: &mut Assignment,
        out: &mut Vec<Assignment>,
    ) -> Result<(), StructureError> {
        if i == self.props.len() {
            if out.len() >= self.outcome_cap {
                return Err(StructureError::OutcomeSpaceTooLarge {
                    cap: self.outcome_cap,
                });
            }
            out.push(*a);
            return Ok(());
        }
        let prop = &self.props[i];
        for value in [false, true] {
            a.set(prop.id, value);
            // endpoints always precede the edge, so the edge's constraint is
            // fully determined once it is assigned
            if prop.constraint_satisfied(a) {
                self.dfs(i + 1, a, out)?;
            }
        }
        a.set(prop.id, false);
        Ok(())
    }

    /// Whether the incidence graph (propositions as vertices, each paired
    /// proposition joined to its endpoints) is acyclic.
    pub fn is_tree(&self) -> bool {
        let mut uf = UnionFind::new(self.props.len());
        for p in &self.props {
            for e in p.endpoints() {
                if !uf.union(p.id.index(), e.index()) {
                    return false;
                }
            }
        }
        true
    }

    /// Whether adding a paired proposition over `endpoints` keeps the
    /// incidence graph acyclic.
    pub fn would_remain_tree(&self, endpoints: &[PropId]) -> bool {
        if !self.is_tree() {
            return false;
        }
        let mut uf = UnionFind::new(self.props.len() + 1);
        for p in &self.props {
            for e in p.endpoints() {
                uf.union(p.id.index(), e.index());
            }
        }
        let new = self.props.len();
        endpoints.iter().all(|e| uf.union(new, e.index()))
    }

    /// Connected components of the incidence graph, each sorted by id, in
    /// order of their smallest member.
    pub fn components(&self) -> Vec<Vec<PropId>> {
        let mut uf = UnionFind::new(self.props.len());
        for p in &self.props {
            for e in p.endpoints() {
                uf.union(p.id.index(), e.index());
            }
        }
        let mut groups: Vec<Vec<PropId>> = Vec::new();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        for p in &self.props {
            let root = uf.find(p.id.index());
            let k = *slot.entry(root).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[k].push(p.id);
        }
        groups
    }

    /// Non-fatal observations about the structure: currently chains of
    /// paired propositions nested more than one level deep.
    pub fn validation_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for p in &self.props {
            if let PropKind::Paired { target, .. } = p.kind {
                if let Some(PropKind::Paired { target: inner, .. }) =
                    self.get(target).map(|t| &t.kind)
                {
                    if matches!(self.get(*inner).map(|t| &t.kind), Some(PropKind::Paired { .. }))
                    {
                        warnings.push(format!(
                            "`{}` nests more than one paired proposition deep via `{}`",
                            p.name,
                            self.name(target)
                        ));
                    }
                }
            }
        }
        warnings
    }

    /// Renders `a` as `name=T`/`name=F` pairs.
    pub fn describe(&self, a: &Assignment) -> String {
        self.props
            .iter()
            .map(|p| format!("{}={}", p.name, if a.get(p.id) { 'T' } else { 'F' }))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already connected.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}
