//! Segmented markets: the structure is split into bounded parts that share
//! single linking propositions, each part runs its own LMSR, and link prices
//! are reconciled after every trade with phantom purchases.
//!
//! A *block* is an edge proposition together with its endpoints; every block
//! lives in exactly one part. A proposition whose block sits in another part
//! enters a part as an unconstrained atomic.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lmsr::{Account, MarketError, MarketState, TradeReceipt, TraderId};
use crate::scalar::Scalar;
use crate::security::Security;
use crate::structure::{CarrollStructure, PropId, PropKind, Relation, StructureError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("structure is not a tree")]
    NotATree,
    #[error("part size {m} too small: a block needs {needed} propositions")]
    MTooSmall { m: usize, needed: usize },
    #[error("security `{0}` spans more than one part")]
    CrossPartSecurity(String),
    #[error("no pair of parts shares two linking propositions")]
    NoCycle,
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("structures or liquidity differ between segmented and exact markets")]
    Mismatch,
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Structure(#[from] StructureError),
}

pub type SegResult<T> = Result<T, SegmentationError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    /// Global ids in ascending order.
    pub props: Vec<PropId>,
    /// Edge propositions whose constraint is enforced in this part.
    pub blocks: Vec<PropId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub parts: (usize, usize),
    pub prop: PropId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub parts: Vec<Part>,
    pub links: Vec<Link>,
    pub max_part_size: usize,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Builds a partition from explicit proposition sets. Each block goes to
    /// the first part holding all its members; links are all shared props.
    pub fn from_parts(structure: &CarrollStructure, sets: &[Vec<PropId>]) -> SegResult<Self> {
        let mut parts: Vec<Part> = sets
            .iter()
            .map(|s| {
                let mut props = s.clone();
                props.sort();
                props.dedup();
                Part {
                    props,
                    blocks: Vec::new(),
                }
            })
            .collect();
        let mut seen = vec![false; structure.len()];
        for p in &parts {
            for id in &p.props {
                let slot = seen
                    .get_mut(id.index())
                    .ok_or_else(|| SegmentationError::InvalidPartition(format!("unknown {id}")))?;
                *slot = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(SegmentationError::InvalidPartition(format!(
                "`{}` is in no part",
                structure.name(PropId(i as u32))
            )));
        }
        for prop in structure.propositions() {
            if prop.is_atomic() {
                continue;
            }
            let mut members = prop.endpoints();
            members.push(prop.id);
            let home = parts
                .iter()
                .position(|p| members.iter().all(|m| p.props.binary_search(m).is_ok()))
                .ok_or_else(|| {
                    SegmentationError::InvalidPartition(format!(
                        "no part holds the whole block of `{}`",
                        prop.name
                    ))
                })?;
            parts[home].blocks.push(prop.id);
        }
        let max = parts.iter().map(|p| p.props.len()).max().unwrap_or(0);
        let mut links = Vec::new();
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                for id in &parts[i].props {
                    if parts[j].props.binary_search(id).is_ok() {
                        links.push(Link {
                            parts: (i, j),
                            prop: *id,
                        });
                    }
                }
            }
        }
        Ok(Partition {
            parts,
            links,
            max_part_size: max,
        })
    }

    /// Links incident to `part`, as `(neighbour, prop)`.
    pub fn neighbours(&self, part: usize) -> Vec<(usize, PropId)> {
        self.links
            .iter()
            .filter_map(|l| {
                if l.parts.0 == part {
                    Some((l.parts.1, l.prop))
                } else if l.parts.1 == part {
                    Some((l.parts.0, l.prop))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Lowest-index part containing every prop in `props`.
    pub fn home_of(&self, props: &[PropId]) -> Option<usize> {
        self.parts
            .iter()
            .position(|p| props.iter().all(|id| p.props.binary_search(id).is_ok()))
    }

    /// First pair of parts sharing at least two links.
    pub fn cyclic_pair(&self) -> Option<((usize, usize), PropId, PropId)> {
        for (i, l) in self.links.iter().enumerate() {
            if let Some(m) = self.links[i + 1..].iter().find(|k| k.parts == l.parts) {
                return Some((l.parts, l.prop, m.prop));
            }
        }
        None
    }
}

/// Accumulated pending set hanging below one proposition.
#[derive(Default)]
struct Pending {
    props: Vec<PropId>,
    /// Edge propositions whose blocks travel with this set.
    blocks: Vec<PropId>,
    /// Finished child parts whose parent is whichever part absorbs this set.
    children: Vec<(usize, PropId)>,
}

impl Pending {
    fn absorb(&mut self, other: Pending) {
        self.props.extend(other.props);
        self.blocks.extend(other.blocks);
        self.children.extend(other.children);
    }
}

/// Splits a tree structure into parts of at most `m` propositions, packing
/// blocks bottom-up and cutting the largest pending subtree whenever a part
/// would overflow. Deterministic for a given structure and `m`.
pub fn partition_tree(structure: &CarrollStructure, m: usize) -> SegResult<Partition> {
    if !structure.is_tree() {
        return Err(SegmentationError::NotATree);
    }
    let n = structure.len();
    let widest = structure
        .propositions()
        .iter()
        .map(|p| if p.is_atomic() { 1 } else { p.endpoints().len() + 1 })
        .max()
        .unwrap_or(1);
    if m < 3 || widest > m {
        return Err(SegmentationError::MTooSmall {
            m,
            needed: widest.max(3),
        });
    }

    // incidence tree adjacency
    let mut adj: Vec<Vec<PropId>> = vec![Vec::new(); n];
    for p in structure.propositions() {
        for e in p.endpoints() {
            adj[p.id.index()].push(e);
            adj[e.index()].push(p.id);
        }
    }
    let mut parent: Vec<Option<PropId>> = vec![None; n];
    let mut order = Vec::with_capacity(n);
    let mut roots = Vec::new();
    let mut visited = vec![false; n];
    for start in 0..n {
        if visited[start] {
            continue;
        }
        roots.push(PropId(start as u32));
        visited[start] = true;
        let mut stack = vec![PropId(start as u32)];
        while let Some(x) = stack.pop() {
            order.push(x);
            let mut next: Vec<PropId> = adj[x.index()]
                .iter()
                .copied()
                .filter(|y| !visited[y.index()])
                .collect();
            next.sort();
            for y in next.into_iter().rev() {
                visited[y.index()] = true;
                parent[y.index()] = Some(x);
                stack.push(y);
            }
        }
    }

    // each block hangs from the member closest to its component root
    let mut blocks_at: Vec<Vec<PropId>> = vec![Vec::new(); n];
    for p in structure.propositions() {
        if p.is_atomic() {
            continue;
        }
        let top = match parent[p.id.index()] {
            Some(up) if p.endpoints().contains(&up) => up,
            _ => p.id,
        };
        blocks_at[top.index()].push(p.id);
    }

    let mut parts: Vec<Part> = Vec::new();
    let mut links: Vec<(usize, PropId, Option<usize>)> = Vec::new();
    let mut pend: Vec<Option<Pending>> = (0..n).map(|_| None).collect();

    let finish = |set: Pending, parts: &mut Vec<Part>, links: &mut Vec<(usize, PropId, Option<usize>)>| {
        let k = parts.len();
        let mut props = set.props;
        props.sort();
        props.dedup();
        let mut blocks = set.blocks;
        blocks.sort();
        parts.push(Part { props, blocks });
        for (child, prop) in set.children {
            links.push((child, prop, Some(k)));
        }
        k
    };

    for &x in order.iter().rev() {
        // one group per block hanging from x, holding its other members' sets
        let mut groups: Vec<(PropId, Vec<(PropId, Pending)>)> = Vec::new();
        for &e in &blocks_at[x.index()] {
            let mut members = vec![e];
            members.extend(structure.get(e).expect("known").endpoints());
            let sets = members
                .into_iter()
                .filter(|y| *y != x)
                .map(|y| (y, pend[y.index()].take().expect("children processed first")))
                .collect();
            groups.push((e, sets));
        }
        let size = |g: &(PropId, Vec<(PropId, Pending)>)| -> usize {
            g.1.iter().map(|(_, s)| s.props.len()).sum()
        };
        let mut total = 1 + groups.iter().map(size).sum::<usize>();
        while total > m {
            let best = groups
                .iter()
                .enumerate()
                .flat_map(|(gi, g)| g.1.iter().enumerate().map(move |(ci, c)| (gi, ci, c)))
                .filter(|(_, _, (_, s))| s.props.len() >= 2)
                .max_by(|a, b| {
                    a.2 .1
                        .props
                        .len()
                        .cmp(&b.2 .1.props.len())
                        .then(b.2 .0.cmp(&a.2 .0))
                })
                .map(|(gi, ci, _)| (gi, ci));
            let Some((gi, ci)) = best else { break };
            let y = groups[gi].1[ci].0;
            let set = std::mem::take(&mut groups[gi].1[ci].1);
            total -= set.props.len() - 1;
            let k = finish(set, &mut parts, &mut links);
            groups[gi].1[ci].1 = Pending {
                props: vec![y],
                blocks: Vec::new(),
                children: vec![(k, y)],
            };
        }
        // still too wide: split x's blocks into sibling parts joined at x
        let mut mine = Pending {
            props: vec![x],
            blocks: Vec::new(),
            children: Vec::new(),
        };
        for g in groups {
            let gsize = size(&g);
            if mine.props.len() + gsize > m && !mine.blocks.is_empty() {
                let full = std::mem::replace(
                    &mut mine,
                    Pending {
                        props: vec![x],
                        blocks: Vec::new(),
                        children: Vec::new(),
                    },
                );
                let k = finish(full, &mut parts, &mut links);
                mine.children.push((k, x));
            }
            mine.blocks.push(g.0);
            for (_, set) in g.1 {
                mine.absorb(set);
            }
        }
        pend[x.index()] = Some(mine);
    }

    // pack component roots first-fit in order
    let mut open: Option<Pending> = None;
    for r in roots {
        let set = pend[r.index()].take().expect("root processed");
        match open.as_mut() {
            Some(o) if o.props.len() + set.props.len() <= m => o.absorb(set),
            _ => {
                if let Some(o) = open.take() {
                    finish(o, &mut parts, &mut links);
                }
                open = Some(set);
            }
        }
    }
    if let Some(o) = open {
        finish(o, &mut parts, &mut links);
    }

    let links = links
        .into_iter()
        .map(|(child, prop, parent)| {
            let parent = parent.expect("every cut is absorbed");
            Link {
                parts: (child.min(parent), child.max(parent)),
                prop,
            }
        })
        .collect();
    Ok(Partition {
        parts,
        links,
        max_part_size: m,
    })
}

/// One part's local market plus the global/local id maps.
#[derive(Clone, Debug)]
struct PartMarket<T: Scalar> {
    market: MarketState<T>,
    local: BTreeMap<PropId, PropId>,
}

impl<T: Scalar> PartMarket<T> {
    fn to_local(&self, sec: &Security) -> Security {
        Security::new(sec.literals().iter().map(|l| (self.local[&l.prop], l.value)))
            .expect("non-empty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomEntry<T> {
    pub part: usize,
    pub prop: PropId,
    pub shares: T,
}

#[derive(Clone, Debug)]
pub struct SegmentedMarket<T: Scalar = f64> {
    structure: CarrollStructure,
    partition: Partition,
    parts: Vec<PartMarket<T>>,
    b: T,
    ledger: BTreeMap<TraderId, Account<T>>,
    phantom_log: Vec<PhantomEntry<T>>,
    last_home: Option<usize>,
}

fn sub_structure(structure: &CarrollStructure, part: &Part) -> SegResult<(CarrollStructure, BTreeMap<PropId, PropId>)> {
    let mut s = CarrollStructure::with_outcome_cap(structure.outcome_cap());
    let mut local = BTreeMap::new();
    for id in &part.props {
        let p = structure.get(*id).expect("partition over this structure");
        let kind = if part.blocks.contains(id) {
            p.kind.clone()
        } else {
            PropKind::Atomic
        };
        let lid = match kind {
            PropKind::Atomic => s.add_atomic(&p.name, &p.label)?,
            PropKind::Paired {
                source,
                target,
                relation,
            } => s.add_paired(&p.name, local[&source], local[&target], relation)?,
            PropKind::HyperNand { members } => {
                let ms: Vec<PropId> = members.iter().map(|m| local[m]).collect();
                s.add_hyper_nand(&p.name, &ms)?
            }
        };
        local.insert(*id, lid);
    }
    Ok((s, local))
}

impl<T: Scalar> SegmentedMarket<T> {
    /// Builds the part markets and calibrates link prices so every part's
    /// marginals match the unsegmented market with `q ≡ 0`.
    pub fn new(structure: CarrollStructure, partition: Partition, b: T) -> SegResult<Self> {
        let mut parts = Vec::with_capacity(partition.len());
        for p in &partition.parts {
            let (s, local) = sub_structure(&structure, p)?;
            parts.push(PartMarket {
                market: MarketState::new(s, b)?,
                local,
            });
        }
        let mut seg = SegmentedMarket {
            structure,
            partition,
            parts,
            b,
            ledger: BTreeMap::new(),
            phantom_log: Vec::new(),
            last_home: None,
        };
        seg.calibrate()?;
        Ok(seg)
    }

    pub fn structure(&self) -> &CarrollStructure {
        &self.structure
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn b(&self) -> T {
        self.b
    }

    pub fn phantom_log(&self) -> &[PhantomEntry<T>] {
        &self.phantom_log
    }

    pub fn part_market(&self, i: usize) -> &MarketState<T> {
        &self.parts[i].market
    }

    pub fn total_outcomes(&self) -> usize {
        self.parts.iter().map(|p| p.market.outcomes().len()).sum()
    }

    pub fn add_trader(&mut self, id: &str, cash: T) -> SegResult<()> {
        if self.ledger.contains_key(id) {
            return Err(MarketError::DuplicateTrader(id.to_string()).into());
        }
        self.ledger.insert(
            id.to_string(),
            Account {
                cash,
                deposited: cash,
                holdings: BTreeMap::new(),
            },
        );
        Ok(())
    }

    pub fn account(&self, id: &str) -> SegResult<&Account<T>> {
        self.ledger
            .get(id)
            .ok_or_else(|| MarketError::UnknownTrader(id.to_string()).into())
    }

    /// Breadth-first spanning forest over parts: `(part, parent, link)`.
    fn spanning_order(&self, start: &[usize]) -> Vec<(usize, Option<(usize, PropId)>)> {
        let k = self.partition.len();
        let mut seen = vec![false; k];
        let mut out = Vec::new();
        let roots: Vec<usize> = start.iter().copied().chain(0..k).collect();
        for r in roots {
            if seen[r] {
                continue;
            }
            seen[r] = true;
            out.push((r, None));
            let mut queue = VecDeque::from([r]);
            while let Some(p) = queue.pop_front() {
                for (nb, prop) in self.partition.neighbours(p) {
                    if !seen[nb] {
                        seen[nb] = true;
                        out.push((nb, Some((p, prop))));
                        queue.push_back(nb);
                    }
                }
            }
        }
        out
    }

    fn calibrate(&mut self) -> SegResult<()> {
        let order = self.spanning_order(&[]);
        // upward: each child's view of the link becomes a factor in its parent
        for (child, up) in order.iter().rev() {
            if let Some((parent, prop)) = up {
                let p = self.link_price(*child, *prop)?;
                let logit = p.ln() - (-p).ln_1p();
                let shares = self.b * logit;
                self.phantom(*parent, *prop, shares)?;
            }
        }
        // downward: children adopt the parent's now-exact link price
        for (child, up) in order.iter() {
            if let Some((parent, prop)) = up {
                let target = self.link_price(*parent, *prop)?;
                self.phantom_to(*child, *prop, target)?;
            }
        }
        Ok(())
    }

    fn link_price(&self, part: usize, prop: PropId) -> SegResult<T> {
        let pm = &self.parts[part];
        Ok(pm.market.price(&Security::yes(pm.local[&prop]))?)
    }

    fn phantom(&mut self, part: usize, prop: PropId, shares: T) -> SegResult<()> {
        let pm = &mut self.parts[part];
        pm.market
            .apply_phantom(&Security::yes(pm.local[&prop]), shares, "link")?;
        self.phantom_log.push(PhantomEntry { part, prop, shares });
        Ok(())
    }

    fn phantom_to(&mut self, part: usize, prop: PropId, target: T) -> SegResult<T> {
        let pm = &mut self.parts[part];
        let shares = pm
            .market
            .phantom_to_price(&Security::yes(pm.local[&prop]), target, "link")?;
        self.phantom_log.push(PhantomEntry { part, prop, shares });
        Ok(shares)
    }

    /// Price of a single proposition, read from the lowest part holding it.
    pub fn price_literal(&self, prop: PropId) -> SegResult<T> {
        let part = self
            .partition
            .home_of(&[prop])
            .ok_or_else(|| SegmentationError::InvalidPartition(format!("{prop} in no part")))?;
        self.link_price(part, prop)
    }

    pub fn price(&self, sec: &Security) -> SegResult<T> {
        let home = self.home(sec)?;
        let pm = &self.parts[home];
        Ok(pm.market.price(&pm.to_local(sec))?)
    }

    fn home(&self, sec: &Security) -> SegResult<usize> {
        sec.check(&self.structure).map_err(MarketError::from)?;
        let props: Vec<PropId> = sec.props().collect();
        self.partition.home_of(&props).ok_or_else(|| {
            SegmentationError::CrossPartSecurity(sec.display(&self.structure).to_string())
        })
    }

    /// Trades in the home part, then reconciles every link outward.
    pub fn execute_trade(
        &mut self,
        trader: &str,
        sec: &Security,
        shares: T,
    ) -> SegResult<TradeReceipt<T>> {
        let home = self.home(sec)?;
        let acct = self.account(trader)?;
        let held = acct.holding(sec);
        let mut shares = shares;
        if shares < T::zero() && -shares > held {
            if -shares > held + T::lit(1e-12) * held.abs().max(T::one()) {
                return Err(MarketError::InsufficientHoldings {
                    needed: (-shares).as_f64(),
                    available: held.as_f64(),
                }
                .into());
            }
            shares = -held;
        }
        let local = self.parts[home].to_local(sec);
        let cost = self.parts[home].market.trade_cost(&local, shares)?;
        if cost > acct.cash + T::lit(1e-12) * acct.cash.abs().max(T::one()) {
            return Err(MarketError::InsufficientCash {
                needed: cost.as_f64(),
                available: acct.cash.as_f64(),
            }
            .into());
        }
        let price_before = self.parts[home].market.price(&local)?;
        self.parts[home].market.apply_external(&local, shares)?;
        self.reconcile_from(home)?;
        let acct = self.ledger.get_mut(trader).expect("checked");
        acct.cash -= cost;
        let h = acct.holdings.entry(sec.clone()).or_insert_with(T::zero);
        *h += shares;
        if *h == T::zero() {
            acct.holdings.remove(sec);
        }
        self.last_home = Some(home);
        let price_after = self.parts[home].market.price(&local)?;
        Ok(TradeReceipt {
            trader: trader.to_string(),
            security: sec.clone(),
            shares,
            cash_delta: -cost,
            price_before,
            price_after,
        })
    }

    /// Breadth-first equalisation away from `home`. Every link to a newly
    /// reached part is matched, in link order.
    fn reconcile_from(&mut self, home: usize) -> SegResult<()> {
        let k = self.partition.len();
        let mut seen = vec![false; k];
        seen[home] = true;
        let mut queue = VecDeque::from([home]);
        while let Some(p) = queue.pop_front() {
            let mut by_nb: BTreeMap<usize, Vec<PropId>> = BTreeMap::new();
            for (nb, prop) in self.partition.neighbours(p) {
                if !seen[nb] {
                    by_nb.entry(nb).or_default().push(prop);
                }
            }
            for (nb, props) in by_nb {
                seen[nb] = true;
                for prop in props {
                    let target = self.link_price(p, prop)?;
                    self.phantom_to(nb, prop, target)?;
                }
                queue.push_back(nb);
            }
        }
        Ok(())
    }

    /// Largest link-price disagreement across all links.
    pub fn max_link_gap(&self) -> SegResult<T> {
        let mut gap = T::zero();
        for l in &self.partition.links {
            let a = self.link_price(l.parts.0, l.prop)?;
            let b = self.link_price(l.parts.1, l.prop)?;
            gap = gap.max((a - b).abs());
        }
        Ok(gap)
    }

    /// Proceeds of selling the trader's holdings one security at a time on a
    /// scratch copy.
    pub fn liquidation_value(&self, trader: &str) -> SegResult<T> {
        let holdings: Vec<(Security, T)> = self
            .account(trader)?
            .holdings
            .iter()
            .map(|(s, n)| (s.clone(), *n))
            .collect();
        let mut scratch = self.clone();
        let mut total = T::zero();
        for (sec, n) in holdings {
            let r = scratch.execute_trade(trader, &sec, -n)?;
            total += r.cash_delta;
        }
        Ok(total)
    }

    /// Alternately re-equalises the two links of the first doubly linked
    /// pair, adjusting the part that did not host the last trade.
    pub fn iterate_cycles(&mut self, tolerance: T, max_iterations: usize) -> SegResult<IterationReport> {
        let ((p1, p2), l1, l2) = self.partition.cyclic_pair().ok_or(SegmentationError::NoCycle)?;
        let (home, other) = if self.last_home == Some(p2) {
            (p2, p1)
        } else {
            (p1, p2)
        };
        let gaps = |s: &Self| -> SegResult<[f64; 2]> {
            let g1 = (s.link_price(home, l1)? - s.link_price(other, l1)?).abs();
            let g2 = (s.link_price(home, l2)? - s.link_price(other, l2)?).abs();
            Ok([g1.as_f64(), g2.as_f64()])
        };
        let mut trace = vec![gaps(self)?];
        let tol = tolerance.as_f64();
        let mut converged = trace[0][0] < tol && trace[0][1] < tol;
        let mut iterations = 0;
        while !converged && iterations < max_iterations {
            for l in [l1, l2] {
                let target = self.link_price(home, l)?;
                self.phantom_to(other, l, target)?;
            }
            iterations += 1;
            let g = gaps(self)?;
            converged = g[0] < tol && g[1] < tol;
            trace.push(g);
        }
        Ok(IterationReport {
            parts: (home, other),
            links: (l1, l2),
            gaps: trace,
            iterations,
            converged,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// `(home, adjusted)` parts.
    pub parts: (usize, usize),
    pub links: (PropId, PropId),
    /// Link gaps before the first iteration and after each one.
    pub gaps: Vec<[f64; 2]>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptTrade {
    pub trader: TraderId,
    pub security: Security,
    pub shares: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub per_trade_max_price_gap: Vec<f64>,
    pub per_trade_max_link_gap: Vec<f64>,
    pub max_price_gap: f64,
    pub final_liquidation_gap: BTreeMap<TraderId, f64>,
    pub max_liquidation_gap: f64,
    pub phantom_log_size: usize,
    /// Script steps rejected by the exact market (and therefore skipped).
    pub skipped: usize,
}

/// Largest single-literal price difference, checking every part that holds
/// each proposition.
pub fn max_price_gap<T: Scalar>(seg: &SegmentedMarket<T>, exact: &MarketState<T>) -> SegResult<f64> {
    let mut gap = 0.0f64;
    for (i, part) in seg.partition.parts.iter().enumerate() {
        for id in &part.props {
            let a = seg.link_price(i, *id)?;
            let b = exact.price(&Security::yes(*id))?;
            gap = gap.max((a - b).abs().as_f64());
        }
    }
    Ok(gap)
}

/// Runs `script` on both markets and measures how far they drift apart.
pub fn compare_exact<T: Scalar>(
    seg: &mut SegmentedMarket<T>,
    exact: &mut MarketState<T>,
    script: &[ScriptTrade],
) -> SegResult<DivergenceReport> {
    if seg.structure != *exact.structure() || seg.b != exact.b() {
        return Err(SegmentationError::Mismatch);
    }
    let mut per_trade = Vec::new();
    let mut per_link = Vec::new();
    let mut skipped = 0;
    for step in script {
        let shares = T::lit(step.shares);
        match exact.execute_trade(&step.trader, &step.security, shares) {
            Ok(r) => {
                seg.execute_trade(&step.trader, &step.security, r.shares)?;
            }
            Err(MarketError::InsufficientCash { .. } | MarketError::InsufficientHoldings { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        per_trade.push(max_price_gap(seg, exact)?);
        per_link.push(seg.max_link_gap()?.as_f64());
    }
    let mut liq = BTreeMap::new();
    for id in exact.ledger().keys() {
        if seg.ledger.contains_key(id) {
            let a = seg.liquidation_value(id)?;
            let b = exact.liquidation_value(id)?;
            liq.insert(id.clone(), (a - b).abs().as_f64());
        }
    }
    let max_price_gap = per_trade.iter().copied().fold(max_price_gap(seg, exact)?, f64::max);
    Ok(DivergenceReport {
        max_price_gap,
        per_trade_max_price_gap: per_trade,
        per_trade_max_link_gap: per_link,
        max_liquidation_gap: liq.values().copied().fold(0.0, f64::max),
        final_liquidation_gap: liq,
        phantom_log_size: seg.phantom_log.len(),
        skipped,
    })
}

/// The two doubly linked worst-case constructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CyclicCase {
    /// `L`, `L'` tied by one heavily bought equivalence edge.
    Tied,
    /// `L ≡ X1 ≡ X2 ≡ X3 ≡ L'` through four heavily bought equivalence edges.
    Chained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicLabReport {
    pub case: CyclicCase,
    pub propositions: usize,
    pub exact_outcomes: usize,
    pub settle: IterationReport,
    pub after_push: IterationReport,
    /// Single-literal price divergence vs the exact market after the push and
    /// the iteration, when the exact market was small enough to build.
    pub divergence_before_iteration: Option<f64>,
    pub divergence_after_iteration: Option<f64>,
    pub phantom_log_size: usize,
}

/// Builds a worst case: part one holds `A`, `L`, `L'` with a Support edge
/// `A → L` and a NAND edge on `A, L'`; part two ties `L` and `L'` through
/// equivalence edges. The ties and part-one edges are bought up, then a
/// purchase of `A` drives `L` and `L'` apart.
pub fn cyclic_worst_case(
    case: CyclicCase,
    tie_shares: f64,
    push_shares: f64,
    tolerance: f64,
    max_iterations: usize,
) -> SegResult<CyclicLabReport> {
    let mut s = CarrollStructure::new();
    let a = s.add_atomic("A", "")?;
    let l = s.add_atomic("L", "")?;
    let lp = s.add_atomic("L'", "")?;
    let e1 = s.add_paired("e1", a, l, Relation::Support)?;
    let e2 = s.add_paired("e2", a, lp, Relation::Nand)?;
    let mut p2 = vec![l, lp];
    let mut ties = Vec::new();
    match case {
        CyclicCase::Tied => {
            ties.push(s.add_paired("eq", l, lp, Relation::Equivalence)?);
        }
        CyclicCase::Chained => {
            let mut chain = vec![l];
            for i in 1..=3 {
                chain.push(s.add_atomic(&format!("X{i}"), "")?);
            }
            chain.push(lp);
            p2.extend_from_slice(&chain[1..4]);
            for (i, w) in chain.windows(2).enumerate() {
                ties.push(s.add_paired(&format!("eq{}", i + 1), w[0], w[1], Relation::Equivalence)?);
            }
        }
    }
    p2.extend(ties.iter().copied());
    let p1 = vec![a, l, lp, e1, e2];
    let partition = Partition::from_parts(&s, &[p1, p2])?;
    let mut seg = SegmentedMarket::<f64>::new(s.clone(), partition, 1.0)?;
    seg.add_trader("lab", 1e6)?;
    let exact = if s.len() <= 16 {
        let mut m = MarketState::<f64>::new(s.clone(), 1.0)?;
        m.add_trader("lab", 1e6)?;
        Some(m)
    } else {
        None
    };
    let mut exact = exact;
    let mut run = |sec: Security, n: f64, seg: &mut SegmentedMarket<f64>| -> SegResult<()> {
        seg.execute_trade("lab", &sec, n)?;
        if let Some(m) = exact.as_mut() {
            m.execute_trade("lab", &sec, n)?;
        }
        Ok(())
    };
    for t in &ties {
        run(Security::yes(*t), tie_shares, &mut seg)?;
    }
    run(Security::yes(e1), tie_shares, &mut seg)?;
    run(Security::yes(e2), tie_shares, &mut seg)?;
    let settle = seg.iterate_cycles(tolerance, max_iterations)?;
    run(Security::yes(a), push_shares, &mut seg)?;
    let before = match &exact {
        Some(m) => Some(max_price_gap(&seg, m)?),
        None => None,
    };
    let after_push = seg.iterate_cycles(tolerance, max_iterations)?;
    let after = match &exact {
        Some(m) => Some(max_price_gap(&seg, m)?),
        None => None,
    };
    Ok(CyclicLabReport {
        case,
        propositions: s.len(),
        exact_outcomes: exact.as_ref().map(|m| m.outcomes().len()).unwrap_or(0),
        settle,
        after_push,
        divergence_before_iteration: before,
        divergence_after_iteration: after,
        phantom_log_size: seg.phantom_log.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::UnionFind;
    use std::collections::BTreeSet;

    fn members(p: &Part) -> BTreeSet<PropId> {
        p.props.iter().copied().collect()
    }

    /// `a0 - e0 - a1 - e1 - ... - a{k}` with NAND edges.
    fn path(atomics: usize) -> CarrollStructure {
        let mut s = CarrollStructure::new();
        let ids: Vec<PropId> = (0..atomics)
            .map(|i| s.add_atomic(&format!("a{i}"), "").unwrap())
            .collect();
        for (i, w) in ids.windows(2).enumerate() {
            s.add_paired(&format!("e{i}"), w[0], w[1], Relation::Nand).unwrap();
        }
        s
    }

    fn check_partition(s: &CarrollStructure, p: &Partition) {
        let mut covered = BTreeSet::new();
        for part in &p.parts {
            assert!(part.props.len() <= p.max_part_size);
            covered.extend(part.props.iter().copied());
        }
        assert_eq!(covered.len(), s.len());
        let mut blocks = BTreeSet::new();
        for part in &p.parts {
            for b in &part.blocks {
                assert!(blocks.insert(*b), "block placed twice");
                let prop = s.get(*b).unwrap();
                for e in prop.endpoints() {
                    assert!(part.props.contains(&e));
                }
            }
        }
        let edges = s.propositions().iter().filter(|p| !p.is_atomic()).count();
        assert_eq!(blocks.len(), edges);
        // linked parts share exactly their link
        for l in &p.links {
            let shared: Vec<_> = members(&p.parts[l.parts.0])
                .intersection(&members(&p.parts[l.parts.1]))
                .copied()
                .collect();
            assert_eq!(shared, vec![l.prop]);
        }
        // the parts holding any prop are connected by links on that prop
        for id in s.ids() {
            let holders: Vec<usize> = (0..p.len()).filter(|i| p.parts[*i].props.contains(&id)).collect();
            let mut uf = UnionFind::new(p.len());
            for l in p.links.iter().filter(|l| l.prop == id) {
                uf.union(l.parts.0, l.parts.1);
            }
            let root = uf.find(holders[0]);
            assert!(holders.iter().all(|h| uf.find(*h) == root), "{id} not connected");
        }
        let mut uf = UnionFind::new(p.len());
        for l in &p.links {
            assert!(uf.union(l.parts.0, l.parts.1), "links must form a forest");
        }
    }

    #[test]
    fn small_structure_is_one_part() {
        let s = path(3);
        let p = partition_tree(&s, 6).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p.links.is_empty());
    }

    #[test]
    fn eleven_path_needs_three_parts_at_six() {
        let s = path(6);
        assert_eq!(s.len(), 11);
        let p = partition_tree(&s, 6).unwrap();
        check_partition(&s, &p);
        assert_eq!(p.len(), 3);
        let p7 = partition_tree(&s, 7).unwrap();
        check_partition(&s, &p7);
        assert_eq!(p7.len(), 2);
        assert_eq!(p7.links.len(), 1);
    }

    #[test]
    fn star_of_chains() {
        let mut s = CarrollStructure::new();
        let hub = s.add_atomic("H", "").unwrap();
        for c in 0..3 {
            let mut prev = hub;
            for i in 0..2 {
                let x = s.add_atomic(&format!("c{c}x{i}"), "").unwrap();
                s.add_paired(&format!("c{c}e{i}"), x, prev, Relation::Support).unwrap();
                prev = x;
            }
        }
        let p = partition_tree(&s, 7).unwrap();
        check_partition(&s, &p);
        assert_eq!(p.len(), 4);
        let hub_part = p.home_of(&[hub]).unwrap();
        assert_eq!(p.neighbours(hub_part).len(), 3);
        for i in (0..p.len()).filter(|i| *i != hub_part) {
            let nb = p.neighbours(i);
            assert_eq!(nb.len(), 1);
            assert_eq!(nb[0].0, hub_part);
        }
        // narrower parts split the hub itself; still a valid partition
        check_partition(&s, &partition_tree(&s, 5).unwrap());
    }

    #[test]
    fn rejects_cycles_and_small_m() {
        let mut s = path(3);
        s.add_paired("c", PropId(0), PropId(2), Relation::Nand).unwrap();
        assert_eq!(partition_tree(&s, 6), Err(SegmentationError::NotATree));
        assert!(matches!(
            partition_tree(&path(3), 2),
            Err(SegmentationError::MTooSmall { .. })
        ));
    }

    #[test]
    fn calibrated_prices_match_exact() {
        let s = path(6);
        let p = partition_tree(&s, 5).unwrap();
        let seg = SegmentedMarket::<f64>::new(s.clone(), p, 1.0).unwrap();
        let exact = MarketState::<f64>::new(s, 1.0).unwrap();
        assert!(max_price_gap(&seg, &exact).unwrap() < 1e-12);
        assert!(seg.max_link_gap().unwrap() < 1e-12);
    }

    #[test]
    fn trades_track_exact_market() {
        let s = path(7);
        let p = partition_tree(&s, 5).unwrap();
        let mut seg = SegmentedMarket::<f64>::new(s.clone(), p, 1.5).unwrap();
        let mut exact = MarketState::<f64>::new(s.clone(), 1.5).unwrap();
        seg.add_trader("t", 100.0).unwrap();
        exact.add_trader("t", 100.0).unwrap();
        let script: Vec<ScriptTrade> = (0..s.len())
            .map(|i| ScriptTrade {
                trader: "t".into(),
                security: Security::literal(PropId(i as u32), i % 3 != 0),
                shares: 1.0 + i as f64 * 0.3,
            })
            .collect();
        let rep = compare_exact(&mut seg, &mut exact, &script).unwrap();
        assert!(rep.max_price_gap < 1e-9, "{rep:?}");
        assert!(rep.max_liquidation_gap < 1e-9);
        assert!(rep.per_trade_max_link_gap.iter().all(|g| *g < 1e-9));
        assert_eq!(rep.skipped, 0);
    }

    #[test]
    fn cross_part_security_rejected() {
        let s = path(6);
        let p = partition_tree(&s, 5).unwrap();
        let mut seg = SegmentedMarket::<f64>::new(s, p, 1.0).unwrap();
        seg.add_trader("t", 10.0).unwrap();
        let sec = Security::new([(PropId(0), true), (PropId(5), true)]).unwrap();
        assert!(matches!(
            seg.execute_trade("t", &sec, 1.0),
            Err(SegmentationError::CrossPartSecurity(_))
        ));
    }

    #[test]
    fn acyclic_iteration_is_no_cycle() {
        let s = path(6);
        let p = partition_tree(&s, 5).unwrap();
        let mut seg = SegmentedMarket::<f64>::new(s, p, 1.0).unwrap();
        assert_eq!(seg.iterate_cycles(1e-9, 10), Err(SegmentationError::NoCycle));
    }

    #[test]
    fn cyclic_lab_runs() {
        for case in [CyclicCase::Tied, CyclicCase::Chained] {
            let r = cyclic_worst_case(case, 10.0, 5.0, 1e-10, 200).unwrap();
            assert!(!r.after_push.gaps.is_empty());
            assert!(r.divergence_after_iteration.is_some());
        }
    }

    /// Random tree: each step adds an atomic, usually wired by a fresh edge
    /// to an existing proposition.
    fn random_tree(steps: &[(bool, usize, u8)]) -> CarrollStructure {
        let mut s = CarrollStructure::new();
        s.add_atomic("p0", "").unwrap();
        for (i, (wire, target, rel)) in steps.iter().enumerate() {
            let x = s.add_atomic(&format!("p{}", s.len()), "").unwrap();
            if *wire {
                let tgt = PropId((*target % (s.len() - 1)) as u32);
                let rel = [Relation::Nand, Relation::Support, Relation::Equivalence][*rel as usize % 3];
                s.add_paired(&format!("r{i}"), x, tgt, rel).unwrap();
            }
        }
        s
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]
        #[test]
        fn segmented_trees_are_exact(
            steps in proptest::collection::vec((proptest::bool::weighted(0.85), 0usize..20, 0u8..3), 1..7),
            m in 5usize..=10,
            trades in proptest::collection::vec((0usize..20, proptest::bool::ANY, 0.1f64..3.0), 1..25),
            b in 0.5f64..3.0,
        ) {
            let s = random_tree(&steps);
            let p = partition_tree(&s, m).unwrap();
            check_partition(&s, &p);
            let mut seg = SegmentedMarket::<f64>::new(s.clone(), p, b).unwrap();
            let mut exact = MarketState::<f64>::new(s.clone(), b).unwrap();
            seg.add_trader("t", 1e4).unwrap();
            exact.add_trader("t", 1e4).unwrap();
            let script: Vec<ScriptTrade> = trades
                .iter()
                .map(|(i, v, n)| ScriptTrade {
                    trader: "t".into(),
                    security: Security::literal(PropId((*i % s.len()) as u32), *v),
                    shares: *n,
                })
                .collect();
            let rep = compare_exact(&mut seg, &mut exact, &script).unwrap();
            proptest::prop_assert!(rep.max_price_gap < 1e-9, "{:?}", rep);
            proptest::prop_assert!(rep.max_liquidation_gap < 1e-8);
            proptest::prop_assert!(rep.per_trade_max_link_gap.iter().all(|g| *g < 1e-9));
        }
    }
}
