//! Live mutation of an open market: new atomic propositions and new edges.
//!
//! Every mutation re-enumerates the extended structure and maps each new
//! outcome back to the prior outcome obtained by forgetting the new
//! proposition, so per-outcome quantities are inherited unchanged before the
//! mutation-specific initialisation is applied. Mutations run on a copy and
//! only replace the market on success.

use serde::{Deserialize, Serialize};

use crate::lmsr::{MarketError, MarketResult, MarketState, TraderId};
use crate::scalar::{golden_ratio, Scalar};
use crate::security::Security;
use crate::structure::{CarrollStructure, OutcomeSpace, PropId, PropKind, Relation};

/// Default lower bound on the negative-initialisation constant `K`.
pub const NEGATIVE_INIT_FLOOR: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    AddAtomic,
    AddEdgeNegativeInit,
    AddEdgeGoldenRatio,
    GrowLeafGoldenRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceAudit<T> {
    pub security: String,
    pub before: T,
    pub after: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationReceipt<T> {
    pub kind: MutationKind,
    pub payer: TraderId,
    /// Propositions created, in insertion order.
    pub new_props: Vec<PropId>,
    pub fee_charged: T,
    /// Every prior single literal plus every security held in the ledger.
    pub prices: Vec<PriceAudit<T>>,
    pub worst_case_loss_delta: T,
    /// Price of the last created proposition right after the mutation.
    pub new_price: T,
    pub max_prior_drift: T,
    pub max_liquidation_drift: T,
}

/// Edge kinds accepted by the negative-initialisation path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EdgeSpec {
    Paired {
        source: PropId,
        target: PropId,
        relation: Relation,
    },
    HyperNand {
        members: Vec<PropId>,
    },
}

impl EdgeSpec {
    fn kind(&self) -> PropKind {
        match self {
            EdgeSpec::Paired {
                source,
                target,
                relation,
            } => PropKind::Paired {
                source: *source,
                target: *target,
                relation: *relation,
            },
            EdgeSpec::HyperNand { members } => PropKind::HyperNand {
                members: members.clone(),
            },
        }
    }

    fn endpoints(&self) -> Vec<PropId> {
        match self {
            EdgeSpec::Paired { source, target, .. } => vec![*source, *target],
            EdgeSpec::HyperNand { members } => members.clone(),
        }
    }
}

struct Audit<T: Scalar> {
    secs: Vec<Security>,
    before: Vec<T>,
    liq_before: Vec<(TraderId, T)>,
    wcl_before: T,
}

impl<T: Scalar> Audit<T> {
    fn take(m: &MarketState<T>) -> Self {
        let mut secs: Vec<Security> = m.structure().ids().map(Security::yes).collect();
        for acct in m.ledger().values() {
            for s in acct.holdings.keys() {
                if !secs.contains(s) {
                    secs.push(s.clone());
                }
            }
        }
        let before = secs
            .iter()
            .map(|s| m.price(s).unwrap_or_else(|_| T::nan()))
            .collect();
        let liq_before = m
            .ledger()
            .keys()
            .map(|id| (id.clone(), m.liquidation_value(id).unwrap_or_else(|_| T::nan())))
            .collect();
        Audit {
            secs,
            before,
            liq_before,
            wcl_before: m.worst_case_loss(),
        }
    }

    fn finish(
        self,
        m: &MarketState<T>,
        kind: MutationKind,
        payer: &str,
        new_props: Vec<PropId>,
        fee: T,
    ) -> MarketResult<MutationReceipt<T>> {
        let mut drift = T::zero();
        let prices = self
            .secs
            .iter()
            .zip(&self.before)
            .map(|(s, b)| {
                let after = m.price(s).unwrap_or_else(|_| T::nan());
                if b.is_finite() && after.is_finite() {
                    drift = drift.max((after - *b).abs());
                }
                PriceAudit {
                    security: s.display(m.structure()).to_string(),
                    before: *b,
                    after,
                }
            })
            .collect();
        let mut liq_drift = T::zero();
        for (id, before) in &self.liq_before {
            let after = m.liquidation_value(id)?;
            liq_drift = liq_drift.max((after - *before).abs());
        }
        let last = *new_props.last().expect("mutation creates a proposition");
        Ok(MutationReceipt {
            kind,
            payer: payer.to_string(),
            new_props,
            fee_charged: fee,
            prices,
            worst_case_loss_delta: m.worst_case_loss() - self.wcl_before,
            new_price: m.price(&Security::yes(last))?,
            max_prior_drift: drift,
            max_liquidation_drift: liq_drift,
        })
    }
}

/// Copy of `m` over `structure`, which must be `m`'s structure plus one
/// appended proposition. Each new outcome inherits its parent's quantities.
fn extend<T: Scalar>(m: &MarketState<T>, structure: CarrollStructure) -> MarketResult<MarketState<T>> {
    let new_id = PropId((structure.len() - 1) as u32);
    let outcomes: OutcomeSpace = structure.enumerate_outcomes()?;
    let parent: Vec<usize> = outcomes
        .iter()
        .map(|a| {
            m.outcomes
                .index_of_bits(a.bits() & !(1u64 << new_id.0))
                .expect("restriction of a feasible outcome is feasible")
        })
        .collect();
    let remap = |v: &[T]| -> Vec<T> { parent.iter().map(|i| v[*i]).collect() };
    let mut out = m.clone();
    out.q = remap(&m.q);
    out.initial_q = remap(&m.initial_q);
    out.phantom_q = remap(&m.phantom_q);
    out.external_q = remap(&m.external_q);
    out.structure = structure;
    out.outcomes = outcomes;
    Ok(out)
}

fn ensure_open<T: Scalar>(m: &MarketState<T>) -> MarketResult<()> {
    if m.is_resolved() {
        return Err(MarketError::MarketClosed);
    }
    Ok(())
}

/// Adds an unconstrained atomic proposition, charging `b ln 2`.
pub fn add_atomic_live<T: Scalar>(
    m: &mut MarketState<T>,
    name: &str,
    label: &str,
    payer: &str,
) -> MarketResult<MutationReceipt<T>> {
    ensure_open(m)?;
    let fee = m.b() * T::LN_2();
    m.check_fee(payer, fee)?;
    let audit = Audit::take(m);
    let mut s = m.structure().clone();
    let id = s.add_atomic(name, label)?;
    let mut next = extend(m, s)?;
    next.charge(payer, fee)?;
    let receipt = audit.finish(&next, MutationKind::AddAtomic, payer, vec![id], fee)?;
    *m = next;
    Ok(receipt)
}

/// Adds an edge whose own `true` literal starts at `−K·b` shares. The payer
/// covers the resulting increase in worst-case loss.
pub fn add_edge_negative_init<T: Scalar>(
    m: &mut MarketState<T>,
    name: &str,
    edge: EdgeSpec,
    k: T,
    payer: &str,
) -> MarketResult<MutationReceipt<T>> {
    add_edge_negative_init_with_floor(m, name, edge, k, T::lit(NEGATIVE_INIT_FLOOR), payer)
}

pub fn add_edge_negative_init_with_floor<T: Scalar>(
    m: &mut MarketState<T>,
    name: &str,
    edge: EdgeSpec,
    k: T,
    floor: T,
    payer: &str,
) -> MarketResult<MutationReceipt<T>> {
    ensure_open(m)?;
    if !(k >= floor) || !k.is_finite() {
        return Err(MarketError::NegativeInitTooSmall {
            k: k.as_f64(),
            floor: floor.as_f64(),
        });
    }
    m.account(payer)?;
    let audit = Audit::take(m);
    let mut s = m.structure().clone();
    let id = push_edge(&mut s, name, &edge)?;
    let mut next = extend(m, s)?;
    next.bump_initial(&Security::yes(id), -k * m.b());
    let fee = next.worst_case_loss() - audit.wcl_before;
    next.charge(payer, fee)?;
    let receipt = audit.finish(&next, MutationKind::AddEdgeNegativeInit, payer, vec![id], fee)?;
    *m = next;
    Ok(receipt)
}

fn push_edge(s: &mut CarrollStructure, name: &str, edge: &EdgeSpec) -> MarketResult<PropId> {
    let id = match edge.kind() {
        PropKind::Paired {
            source,
            target,
            relation,
        } => s.add_paired(name, source, target, relation),
        PropKind::HyperNand { members } => s.add_hyper_nand(name, &members),
        PropKind::Atomic => return Err(MarketError::InvalidEdge("atomic is not an edge".into())),
    };
    id.map_err(|e| MarketError::InvalidEdge(e.to_string()))
}

/// Adds a NAND edge between two existing propositions, raising the shares of
/// the edge and both endpoints by `b ln φ`. The payer is charged the cost
/// difference. Only allowed while the structure stays a tree.
pub fn add_edge_golden_ratio<T: Scalar>(
    m: &mut MarketState<T>,
    name: &str,
    source: PropId,
    target: PropId,
    payer: &str,
) -> MarketResult<MutationReceipt<T>> {
    ensure_open(m)?;
    m.account(payer)?;
    let audit = Audit::take(m);
    let next = golden_edge(m, name, source, target)?;
    let fee = next.cost() - m.cost();
    let mut next = next;
    next.charge(payer, fee)?;
    let receipt = audit.finish(&next, MutationKind::AddEdgeGoldenRatio, payer, vec![PropId((next.structure().len() - 1) as u32)], fee)?;
    *m = next;
    Ok(receipt)
}

fn golden_edge<T: Scalar>(
    m: &MarketState<T>,
    name: &str,
    source: PropId,
    target: PropId,
) -> MarketResult<MarketState<T>> {
    let edge = EdgeSpec::Paired {
        source,
        target,
        relation: Relation::Nand,
    };
    if !m.structure().would_remain_tree(&edge.endpoints()) {
        return Err(MarketError::NotATree);
    }
    let mut s = m.structure().clone();
    let id = push_edge(&mut s, name, &edge)?;
    let mut next = extend(m, s)?;
    let step = m.b() * golden_ratio::<T>().ln();
    for p in [id, source, target] {
        next.bump_initial(&Security::yes(p), step);
    }
    Ok(next)
}

/// Grows a new leaf: an atomic proposition `leaf` plus a golden-ratio NAND
/// edge `edge` from it to `anchor`, as a single mutation. The payer is
/// charged the combined cost difference.
pub fn grow_leaf_golden_ratio<T: Scalar>(
    m: &mut MarketState<T>,
    leaf: &str,
    edge: &str,
    anchor: PropId,
    payer: &str,
) -> MarketResult<MutationReceipt<T>> {
    ensure_open(m)?;
    m.account(payer)?;
    if m.structure().get(anchor).is_none() {
        return Err(MarketError::InvalidEdge(format!("unknown anchor {anchor}")));
    }
    let audit = Audit::take(m);
    let mut s = m.structure().clone();
    let leaf_id = s.add_atomic(leaf, leaf)?;
    let grown = extend(m, s)?;
    let next = golden_edge(&grown, edge, leaf_id, anchor)?;
    let fee = next.cost() - m.cost();
    let mut next = next;
    next.charge(payer, fee)?;
    let edge_id = PropId((next.structure().len() - 1) as u32);
    let receipt = audit.finish(
        &next,
        MutationKind::GrowLeafGoldenRatio,
        payer,
        vec![leaf_id, edge_id],
        fee,
    )?;
    *m = next;
    Ok(receipt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fresh(names: &[&str], b: f64) -> MarketState<f64> {
        let mut s = CarrollStructure::new();
        for n in names {
            s.add_atomic(n, "").unwrap();
        }
        let mut m = MarketState::<f64>::new(s, b).unwrap();
        m.add_trader("p", 100.0).unwrap();
        m.add_trader("t", 100.0).unwrap();
        m
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn atomic_fee_is_b_ln_2() {
        let mut m = fresh(&["A"], 1.0);
        let r = add_atomic_live(&mut m, "B", "", "p").unwrap();
        assert!((r.fee_charged - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert_eq!(r.new_price, 0.5);
        assert_eq!(m.outcomes().len(), 4);
        assert!((r.worst_case_loss_delta - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn atomic_after_trading_preserves_everything() {
        let mut s = CarrollStructure::new();
        let a = s.add_atomic("A", "").unwrap();
        let b = s.add_atomic("B", "").unwrap();
        let r = s.add_paired("r", b, a, Relation::Nand).unwrap();
        let mut m = MarketState::<f64>::new(s, 2.0).unwrap();
        m.add_trader("p", 100.0).unwrap();
        m.add_trader("t", 100.0).unwrap();
        m.execute_trade("t", &Security::yes(r), 3.0).unwrap();
        m.execute_trade("t", &Security::parse("A&!B", m.structure()).unwrap(), 1.5)
            .unwrap();
        let rec = add_atomic_live(&mut m, "C", "", "p").unwrap();
        assert!(rec.max_prior_drift < 1e-12);
        assert!(rec.max_liquidation_drift < 1e-12);
        assert!((rec.new_price - 0.5).abs() < 1e-12);
        assert!(m.residuals().identity < 1e-12);
    }

    #[test]
    fn atomic_insufficient_cash_leaves_market_untouched() {
        let mut m = fresh(&["A"], 1000.0);
        let before = m.to_json();
        assert!(matches!(
            add_atomic_live(&mut m, "B", "", "p"),
            Err(MarketError::InsufficientCash { .. })
        ));
        assert_eq!(m.to_json(), before);
    }

    #[test]
    fn negative_init_k10() {
        let mut m = fresh(&["A", "B"], 1.0);
        let edge = EdgeSpec::Paired {
            source: PropId(1),
            target: PropId(0),
            relation: Relation::Nand,
        };
        let rec = add_edge_negative_init(&mut m, "r", edge, 10.0, "p").unwrap();
        assert!(rec.new_price < 5e-4);
        assert!(rec.max_prior_drift < 1e-4);
        assert!(rec.fee_charged > 0.0);
        assert!((rec.fee_charged - rec.worst_case_loss_delta).abs() < 1e-12);
        assert_eq!(m.outcomes().len(), 7);
    }

    #[test]
    fn negative_init_floor_enforced() {
        let mut m = fresh(&["A", "B"], 1.0);
        let edge = EdgeSpec::Paired {
            source: PropId(1),
            target: PropId(0),
            relation: Relation::Nand,
        };
        assert!(matches!(
            add_edge_negative_init(&mut m, "r", edge.clone(), 2.0, "p"),
            Err(MarketError::NegativeInitTooSmall { .. })
        ));
        let bad = EdgeSpec::Paired {
            source: PropId(0),
            target: PropId(0),
            relation: Relation::Nand,
        };
        assert!(matches!(
            add_edge_negative_init(&mut m, "r", bad, 10.0, "p"),
            Err(MarketError::InvalidEdge(_))
        ));
    }

    #[test]
    fn negative_init_drift_shrinks_with_k() {
        let mut drifts = Vec::new();
        for k in [5.0, 10.0, 20.0] {
            let mut m = fresh(&["A", "B"], 1.0);
            m.execute_trade("t", &Security::yes(PropId(0)), 2.0).unwrap();
            let edge = EdgeSpec::Paired {
                source: PropId(1),
                target: PropId(0),
                relation: Relation::Support,
            };
            drifts.push(add_edge_negative_init(&mut m, "r", edge, k, "p").unwrap().max_prior_drift);
        }
        assert!(drifts[0] > drifts[1] && drifts[1] > drifts[2]);
    }

    #[test]
    fn hyper_negative_init() {
        let mut m = fresh(&["A", "B", "C"], 1.0);
        let edge = EdgeSpec::HyperNand {
            members: vec![PropId(0), PropId(1), PropId(2)],
        };
        add_edge_negative_init(&mut m, "h", edge, 8.0, "p").unwrap();
        assert_eq!(m.outcomes().len(), 15);
    }

    #[test]
    fn golden_edge_between_fresh_atomics() {
        let mut m = fresh(&["A", "B"], 1.0);
        let rec = add_edge_golden_ratio(&mut m, "r", PropId(1), PropId(0), "p").unwrap();
        let phi: f64 = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((rec.new_price - 0.5).abs() < 1e-12);
        // ln(φ⁴ / 2)
        assert!((rec.fee_charged - (phi.powi(4) / 2.0).ln()).abs() < 1e-12);
        assert!(rec.max_prior_drift < 1e-12);
    }

    #[test]
    fn golden_leaf_costs_four_ln_phi() {
        let mut m = fresh(&["A"], 3.0);
        let rec = grow_leaf_golden_ratio(&mut m, "X", "e", PropId(0), "p").unwrap();
        let phi: f64 = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((rec.fee_charged - 12.0 * phi.ln()).abs() < 1e-12);
        assert!((rec.new_price - 0.5).abs() < 1e-12);
        assert_eq!(rec.new_props, vec![PropId(1), PropId(2)]);
        assert!((m.price(&Security::yes(PropId(1))).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn golden_rejects_cycles() {
        let mut m = fresh(&["A", "B"], 1.0);
        add_edge_golden_ratio(&mut m, "r", PropId(1), PropId(0), "p").unwrap();
        let before = m.to_json();
        assert!(matches!(
            add_edge_golden_ratio(&mut m, "s", PropId(1), PropId(0), "p"),
            Err(MarketError::NotATree)
        ));
        assert_eq!(m.to_json(), before);
    }

    proptest! {
        #[test]
        fn atomic_addition_invariance(
            trades in prop::collection::vec((0u32..3, any::<bool>(), 0.1f64..4.0), 0..20),
            b in 0.5f64..5.0,
        ) {
            let mut s = CarrollStructure::new();
            let a = s.add_atomic("A", "").unwrap();
            let bb = s.add_atomic("B", "").unwrap();
            s.add_paired("r", bb, a, Relation::Support).unwrap();
            let mut m = MarketState::<f64>::new(s, b).unwrap();
            m.add_trader("p", 100.0).unwrap();
            m.add_trader("t", 1000.0).unwrap();
            for (p, v, n) in trades {
                let _ = m.execute_trade("t", &Security::literal(PropId(p), v), n);
            }
            let rec = add_atomic_live(&mut m, "C", "", "p").unwrap();
            prop_assert!(rec.max_prior_drift < 1e-9);
            prop_assert!(rec.max_liquidation_drift < 1e-9);
            prop_assert!((rec.fee_charged - b * 2f64.ln()).abs() < 1e-12);
            prop_assert!((rec.worst_case_loss_delta - b * 2f64.ln()).abs() < 1e-9);
        }
    }
}
