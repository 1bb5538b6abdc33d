//! Exact combinatorial LMSR market maker over an enumerated outcome space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{log_add_exp, log_sum_exp, Scalar};
use crate::security::{Security, SecurityError};
use crate::structure::{Assignment, CarrollStructure, OutcomeSpace, StructureError};

pub type TraderId = String;

/// Relative slack used when comparing cash and share balances.
const BALANCE_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("liquidity parameter must be positive and finite, got {0}")]
    InvalidLiquidity(f64),
    #[error("unknown trader `{0}`")]
    UnknownTrader(String),
    #[error("trader `{0}` already exists")]
    DuplicateTrader(String),
    #[error("security `{0}` is degenerate for this market")]
    DegenerateSecurity(String),
    #[error("invalid security: {0}")]
    InvalidSecurity(#[from] SecurityError),
    #[error("insufficient cash: need {needed}, have {available}")]
    InsufficientCash { needed: f64, available: f64 },
    #[error("insufficient holdings: need {needed}, have {available}")]
    InsufficientHoldings { needed: f64, available: f64 },
    #[error("target price {0} outside (0, 1)")]
    TargetOutOfRange(f64),
    #[error("share quantity {0} is not finite")]
    NonFiniteShares(f64),
    #[error("outcome is not feasible in this market")]
    InfeasibleOutcome,
    #[error("market is resolved")]
    MarketClosed,
    #[error("structure would not be a tree")]
    NotATree,
    #[error("invalid edge: {0}")]
    InvalidEdge(String),
    #[error("negative-init constant {k} below floor {floor}")]
    NegativeInitTooSmall { k: f64, floor: f64 },
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Structure(#[from] StructureError),
}

pub type MarketResult<T> = Result<T, MarketError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Account<T> {
    pub cash: T,
    /// Cash credited from outside the market (initial funding and deposits).
    pub deposited: T,
    pub holdings: BTreeMap<Security, T>,
}

impl<T: Scalar> Account<T> {
    pub fn holding(&self, sec: &Security) -> T {
        self.holdings.get(sec).copied().unwrap_or_else(T::zero)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeReceipt<T> {
    pub trader: TraderId,
    pub security: Security,
    pub shares: T,
    /// Negative when the trader paid.
    pub cash_delta: T,
    pub price_before: T,
    pub price_after: T,
}

/// A share adjustment made by the mechanism itself and credited to nobody.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecord<T> {
    pub security: Security,
    pub shares: T,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantResiduals {
    /// max |q - (q0 + holdings + phantoms + external)|
    pub identity: f64,
    /// |Σ_ω p_ω - 1|
    pub normalization: f64,
    /// |Σ trader cash + maker net cash - Σ deposits|
    pub cash_conservation: f64,
}

#[derive(Clone, Debug)]
pub struct MarketState<T: Scalar = f64> {
    pub(crate) structure: CarrollStructure,
    pub(crate) outcomes: OutcomeSpace,
    pub(crate) b: T,
    pub(crate) q: Vec<T>,
    pub(crate) initial_q: Vec<T>,
    pub(crate) phantom_q: Vec<T>,
    pub(crate) external_q: Vec<T>,
    pub(crate) ledger: BTreeMap<TraderId, Account<T>>,
    pub(crate) maker_cash_in: T,
    pub(crate) maker_paid_out: T,
    pub(crate) burned_value: T,
    pub(crate) phantom_log: Vec<PhantomRecord<T>>,
    pub(crate) resolved: Option<Assignment>,
}

impl<T: Scalar> MarketState<T> {
    /// Fresh market with `q⁰ ≡ 0`.
    pub fn new(structure: CarrollStructure, b: T) -> MarketResult<Self> {
        if !(b > T::zero()) || !b.is_finite() {
            return Err(MarketError::InvalidLiquidity(b.as_f64()));
        }
        let outcomes = structure.enumerate_outcomes()?;
        let n = outcomes.len();
        Ok(MarketState {
            structure,
            outcomes,
            b,
            q: vec![T::zero(); n],
            initial_q: vec![T::zero(); n],
            phantom_q: vec![T::zero(); n],
            external_q: vec![T::zero(); n],
            ledger: BTreeMap::new(),
            maker_cash_in: T::zero(),
            maker_paid_out: T::zero(),
            burned_value: T::zero(),
            phantom_log: Vec::new(),
            resolved: None,
        })
    }

    pub fn structure(&self) -> &CarrollStructure {
        &self.structure
    }

    pub fn outcomes(&self) -> &OutcomeSpace {
        &self.outcomes
    }

    pub fn b(&self) -> T {
        self.b
    }

    pub fn q(&self) -> &[T] {
        &self.q
    }

    pub fn initial_q(&self) -> &[T] {
        &self.initial_q
    }

    pub fn phantom_q(&self) -> &[T] {
        &self.phantom_q
    }

    pub fn ledger(&self) -> &BTreeMap<TraderId, Account<T>> {
        &self.ledger
    }

    pub fn account(&self, trader: &str) -> MarketResult<&Account<T>> {
        self.ledger
            .get(trader)
            .ok_or_else(|| MarketError::UnknownTrader(trader.to_string()))
    }

    pub fn cash(&self, trader: &str) -> MarketResult<T> {
        Ok(self.account(trader)?.cash)
    }

    pub fn holding(&self, trader: &str, sec: &Security) -> MarketResult<T> {
        Ok(self.account(trader)?.holding(sec))
    }

    pub fn maker_cash_in(&self) -> T {
        self.maker_cash_in
    }

    pub fn maker_paid_out(&self) -> T {
        self.maker_paid_out
    }

    pub fn burned_value(&self) -> T {
        self.burned_value
    }

    pub fn phantom_log(&self) -> &[PhantomRecord<T>] {
        &self.phantom_log
    }

    pub fn is_resolved(&self) -> bool {
        self.resolved.is_some()
    }

    pub fn add_trader(&mut self, id: &str, cash: T) -> MarketResult<()> {
        if self.ledger.contains_key(id) {
            return Err(MarketError::DuplicateTrader(id.to_string()));
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

    pub fn deposit(&mut self, id: &str, amount: T) -> MarketResult<()> {
        let acct = self
            .ledger
            .get_mut(id)
            .ok_or_else(|| MarketError::UnknownTrader(id.to_string()))?;
        acct.cash += amount;
        acct.deposited += amount;
        Ok(())
    }

    /// Charges a mechanism fee, credited to the maker.
    pub(crate) fn charge(&mut self, id: &str, amount: T) -> MarketResult<()> {
        let acct = self
            .ledger
            .get_mut(id)
            .ok_or_else(|| MarketError::UnknownTrader(id.to_string()))?;
        if !affordable(amount, acct.cash) {
            return Err(MarketError::InsufficientCash {
                needed: amount.as_f64(),
                available: acct.cash.as_f64(),
            });
        }
        acct.cash -= amount;
        self.maker_cash_in += amount;
        Ok(())
    }

    pub(crate) fn check_fee(&self, id: &str, amount: T) -> MarketResult<()> {
        let cash = self.cash(id)?;
        if !affordable(amount, cash) {
            return Err(MarketError::InsufficientCash {
                needed: amount.as_f64(),
                available: cash.as_f64(),
            });
        }
        Ok(())
    }

    /// `C(q) = b ln Σ exp(q_ω / b)`.
    pub fn cost(&self) -> T {
        self.cost_at(&self.q)
    }

    pub fn cost_at(&self, q: &[T]) -> T {
        let b = self.b;
        b * log_sum_exp(q.iter().map(|x| *x / b))
    }

    /// `(ln Σ_{ω∈S} e^{q_ω/b}, ln Σ_{ω∉S} e^{q_ω/b})`.
    fn split(&self, sec: &Security) -> (T, T) {
        let (m, v) = sec.mask();
        let b = self.b;
        let inside = self
            .outcomes
            .iter()
            .zip(&self.q)
            .filter(move |(a, _)| a.bits() & m == v)
            .map(move |(_, q)| *q / b);
        let outside = self
            .outcomes
            .iter()
            .zip(&self.q)
            .filter(move |(a, _)| a.bits() & m != v)
            .map(move |(_, q)| *q / b);
        (log_sum_exp(inside), log_sum_exp(outside))
    }

    fn checked_split(&self, sec: &Security) -> MarketResult<(T, T)> {
        sec.check(&self.structure)?;
        let (lin, lout) = self.split(sec);
        if lin == T::neg_infinity() || lout == T::neg_infinity() {
            return Err(MarketError::DegenerateSecurity(
                sec.display(&self.structure).to_string(),
            ));
        }
        Ok((lin, lout))
    }

    /// Number of outcomes in which `sec` pays.
    pub fn support_size(&self, sec: &Security) -> usize {
        self.outcomes.iter().filter(|a| sec.matches(a)).count()
    }

    pub fn price(&self, sec: &Security) -> MarketResult<T> {
        let (lin, lout) = self.checked_split(sec)?;
        Ok(sigmoid(lin - lout))
    }

    /// Per-outcome prices in canonical order.
    pub fn outcome_prices(&self) -> Vec<T> {
        let b = self.b;
        let z = log_sum_exp(self.q.iter().map(|x| *x / b));
        self.q.iter().map(|x| (*x / b - z).exp()).collect()
    }

    /// `C(q + shares·1_S) − C(q)`.
    pub fn trade_cost(&self, sec: &Security, shares: T) -> MarketResult<T> {
        let (lin, lout) = self.checked_split(sec)?;
        Ok(self.cost_delta(lin, lout, shares))
    }

    fn cost_delta(&self, lin: T, lout: T, shares: T) -> T {
        let b = self.b;
        let before = log_add_exp(lin, lout);
        let after = log_add_exp(lin + shares / b, lout);
        b * (after - before)
    }

    fn ensure_open(&self) -> MarketResult<()> {
        if self.resolved.is_some() {
            Err(MarketError::MarketClosed)
        } else {
            Ok(())
        }
    }

    pub fn execute_trade(
        &mut self,
        trader: &str,
        sec: &Security,
        shares: T,
    ) -> MarketResult<TradeReceipt<T>> {
        self.ensure_open()?;
        if !shares.is_finite() {
            return Err(MarketError::NonFiniteShares(shares.as_f64()));
        }
        let (lin, lout) = self.checked_split(sec)?;
        let acct = self.account(trader)?;
        let held = acct.holding(sec);
        let mut shares = shares;
        if shares < T::zero() {
            let need = -shares;
            if need > held + slack(held) {
                return Err(MarketError::InsufficientHoldings {
                    needed: need.as_f64(),
                    available: held.as_f64(),
                });
            }
            if need > held {
                shares = -held;
            }
        }
        let cost = self.cost_delta(lin, lout, shares);
        if !affordable(cost, acct.cash) {
            return Err(MarketError::InsufficientCash {
                needed: cost.as_f64(),
                available: acct.cash.as_f64(),
            });
        }
        let price_before = sigmoid(lin - lout);
        self.bump(sec, shares);
        let acct = self.ledger.get_mut(trader).expect("checked above");
        acct.cash -= cost;
        let h = acct.holdings.entry(sec.clone()).or_insert_with(T::zero);
        *h += shares;
        if *h == T::zero() {
            acct.holdings.remove(sec);
        }
        self.maker_cash_in += cost;
        let price_after = self.price(sec)?;
        Ok(TradeReceipt {
            trader: trader.to_string(),
            security: sec.clone(),
            shares,
            cash_delta: -cost,
            price_before,
            price_after,
        })
    }

    /// Sells the trader's whole holding of `sec`.
    pub fn sell_all(&mut self, trader: &str, sec: &Security) -> MarketResult<TradeReceipt<T>> {
        let held = self.holding(trader, sec)?;
        self.execute_trade(trader, sec, -held)
    }

    /// Adds `shares` to `q_ω` for every ω ∈ S.
    pub(crate) fn bump(&mut self, sec: &Security, shares: T) {
        let (m, v) = sec.mask();
        for (a, q) in self.outcomes.iter().zip(self.q.iter_mut()) {
            if a.bits() & m == v {
                *q += shares;
            }
        }
    }

    fn bump_vec(&mut self, which: VecKind, sec: &Security, shares: T) {
        let (m, v) = sec.mask();
        let target = match which {
            VecKind::Phantom => &mut self.phantom_q,
            VecKind::External => &mut self.external_q,
            VecKind::Initial => &mut self.initial_q,
        };
        for (a, q) in self.outcomes.iter().zip(target.iter_mut()) {
            if a.bits() & m == v {
                *q += shares;
            }
        }
    }

    /// Shares of `sec` purchasable for exactly `cash`.
    pub fn shares_for_cash(&self, sec: &Security, cash: T) -> MarketResult<T> {
        let p = self.price(sec)?;
        let b = self.b;
        Ok(b * ((cash / b).exp_m1() / p).ln_1p())
    }

    /// Signed share quantity of `sec` that moves its price to `target`.
    pub fn buy_to_price(&self, sec: &Security, target: T) -> MarketResult<T> {
        if !(target > T::zero() && target < T::one()) {
            return Err(MarketError::TargetOutOfRange(target.as_f64()));
        }
        let (lin, lout) = self.checked_split(sec)?;
        Ok(self.b * (logit(target) + lout - lin))
    }

    /// Mechanism-side share adjustment credited to no trader.
    pub fn apply_phantom(&mut self, sec: &Security, shares: T, reason: &str) -> MarketResult<()> {
        self.ensure_open()?;
        self.checked_split(sec)?;
        self.bump(sec, shares);
        self.bump_vec(VecKind::Phantom, sec, shares);
        self.phantom_log.push(PhantomRecord {
            security: sec.clone(),
            shares,
            reason: reason.to_string(),
        });
        Ok(())
    }

    /// Phantom purchase moving `sec` to `target`. Returns the shares applied.
    pub fn phantom_to_price(&mut self, sec: &Security, target: T, reason: &str) -> MarketResult<T> {
        let delta = self.buy_to_price(sec, target)?;
        self.apply_phantom(sec, delta, reason)?;
        Ok(delta)
    }

    /// Share movement whose owner is tracked outside this market (used by
    /// segmented markets). Returns the cost difference.
    pub fn apply_external(&mut self, sec: &Security, shares: T) -> MarketResult<T> {
        self.ensure_open()?;
        let (lin, lout) = self.checked_split(sec)?;
        let cost = self.cost_delta(lin, lout, shares);
        self.bump(sec, shares);
        self.bump_vec(VecKind::External, sec, shares);
        Ok(cost)
    }

    /// Adds `shares` to the initial quantities (and to q) on `sec`.
    pub(crate) fn bump_initial(&mut self, sec: &Security, shares: T) {
        self.bump(sec, shares);
        self.bump_vec(VecKind::Initial, sec, shares);
    }

    /// Per-outcome expansion of one trader's holdings.
    pub fn held_q(&self, trader: &str) -> MarketResult<Vec<T>> {
        Ok(self.expand(&self.account(trader)?.holdings))
    }

    /// Per-outcome expansion of every ledger holding.
    pub fn held_total(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.q.len()];
        for acct in self.ledger.values() {
            for (x, h) in out.iter_mut().zip(self.expand(&acct.holdings)) {
                *x += h;
            }
        }
        out
    }

    fn expand(&self, holdings: &BTreeMap<Security, T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.q.len()];
        for (sec, n) in holdings {
            let (m, v) = sec.mask();
            for (a, x) in self.outcomes.iter().zip(out.iter_mut()) {
                if a.bits() & m == v {
                    *x += *n;
                }
            }
        }
        out
    }

    /// `C(q) − C(q − holdings)`: proceeds of selling the whole portfolio as
    /// one bundle.
    pub fn liquidation_value(&self, trader: &str) -> MarketResult<T> {
        let held = self.held_q(trader)?;
        if held.iter().all(|h| *h == T::zero()) {
            return Ok(T::zero());
        }
        let rest: Vec<T> = self.q.iter().zip(&held).map(|(q, h)| *q - *h).collect();
        Ok(self.cost() - self.cost_at(&rest))
    }

    /// Bound on the maker's resolution shortfall given the initial
    /// quantities: `C(q⁰) + max_ω max(0, −q⁰_ω)`.
    pub fn worst_case_loss(&self) -> T {
        let neg = self
            .initial_q
            .iter()
            .fold(T::zero(), |acc, q| acc.max(-*q));
        self.cost_at(&self.initial_q) + neg
    }

    /// Bound on the maker's shortfall from the current state onward, counting
    /// phantom quantities: `C(q) − net cash + max_ω (held_ω − q_ω)`.
    pub fn solvency_exposure(&self) -> T {
        let held = self.held_total();
        let gap = held
            .iter()
            .zip(&self.q)
            .fold(T::neg_infinity(), |acc, (h, q)| acc.max(*h - *q));
        self.cost() - (self.maker_cash_in - self.maker_paid_out) + gap
    }

    /// Scales every ledger holding by `1 − beta`, removing the burned shares
    /// from `q`. Returns the drop in `C(q)`.
    pub fn burn_holdings(&mut self, beta: T) -> MarketResult<T> {
        self.ensure_open()?;
        if beta <= T::zero() {
            return Ok(T::zero());
        }
        let held = self.held_total();
        let before = self.cost();
        for (q, h) in self.q.iter_mut().zip(&held) {
            *q -= beta * *h;
        }
        let keep = T::one() - beta;
        for acct in self.ledger.values_mut() {
            for h in acct.holdings.values_mut() {
                *h *= keep;
            }
        }
        let burned = before - self.cost();
        self.burned_value += burned;
        Ok(burned)
    }

    /// Pays out on `outcome` and closes the market.
    pub fn resolve(&mut self, outcome: &Assignment) -> MarketResult<BTreeMap<TraderId, T>> {
        self.ensure_open()?;
        if self.outcomes.index_of(outcome).is_none() || outcome.len() != self.structure.len() {
            return Err(MarketError::InfeasibleOutcome);
        }
        let mut payouts = BTreeMap::new();
        let mut total = T::zero();
        for (id, acct) in self.ledger.iter_mut() {
            let pay: T = acct
                .holdings
                .iter()
                .filter(|(s, _)| s.matches(outcome))
                .map(|(_, n)| *n)
                .sum();
            acct.cash += pay;
            total += pay;
            payouts.insert(id.clone(), pay);
        }
        self.maker_paid_out += total;
        self.resolved = Some(*outcome);
        Ok(payouts)
    }

    /// Maker loss if the market resolved at outcome index `i` now.
    pub fn maker_loss_at(&self, i: usize) -> T {
        let held = self.held_total();
        held[i] - (self.maker_cash_in - self.maker_paid_out)
    }

    pub fn residuals(&self) -> InvariantResiduals {
        let held = self.held_total();
        let identity = (0..self.q.len())
            .map(|i| {
                let rebuilt =
                    self.initial_q[i] + held[i] + self.phantom_q[i] + self.external_q[i];
                (self.q[i] - rebuilt).abs().as_f64()
            })
            .fold(0.0, f64::max);
        let total: T = self.outcome_prices().into_iter().sum();
        let normalization = (total - T::one()).abs().as_f64();
        let cash: T = self.ledger.values().map(|a| a.cash).sum();
        let deposits: T = self.ledger.values().map(|a| a.deposited).sum();
        let cash_conservation =
            (cash + self.maker_cash_in - self.maker_paid_out - deposits).abs().as_f64();
        InvariantResiduals {
            identity,
            normalization,
            cash_conservation,
        }
    }

    pub fn snapshot(&self) -> Snapshot<T> {
        Snapshot {
            structure: self.structure.clone(),
            b: self.b,
            q: self.q.clone(),
            initial_q: self.initial_q.clone(),
            phantom_q: self.phantom_q.clone(),
            external_q: self.external_q.clone(),
            ledger: self
                .ledger
                .iter()
                .map(|(id, a)| {
                    (
                        id.clone(),
                        AccountRepr {
                            cash: a.cash,
                            deposited: a.deposited,
                            holdings: a
                                .holdings
                                .iter()
                                .map(|(s, n)| HoldingRepr {
                                    security: s.clone(),
                                    shares: *n,
                                })
                                .collect(),
                        },
                    )
                })
                .collect(),
            maker_cash_in: self.maker_cash_in,
            maker_paid_out: self.maker_paid_out,
            burned_value: self.burned_value,
            phantom_log: self.phantom_log.clone(),
            resolved: self.resolved.map(|a| a.values()),
        }
    }

    pub fn from_snapshot(s: Snapshot<T>) -> MarketResult<Self> {
        let mut m = MarketState::new(s.structure, s.b)?;
        let n = m.outcomes.len();
        for v in [&s.q, &s.initial_q, &s.phantom_q, &s.external_q] {
            if v.len() != n {
                return Err(MarketError::Snapshot(format!(
                    "vector of length {} for {} outcomes",
                    v.len(),
                    n
                )));
            }
        }
        m.q = s.q;
        m.initial_q = s.initial_q;
        m.phantom_q = s.phantom_q;
        m.external_q = s.external_q;
        m.ledger = s
            .ledger
            .into_iter()
            .map(|(id, a)| {
                (
                    id,
                    Account {
                        cash: a.cash,
                        deposited: a.deposited,
                        holdings: a
                            .holdings
                            .into_iter()
                            .map(|h| (h.security, h.shares))
                            .collect(),
                    },
                )
            })
            .collect();
        m.maker_cash_in = s.maker_cash_in;
        m.maker_paid_out = s.maker_paid_out;
        m.burned_value = s.burned_value;
        m.phantom_log = s.phantom_log;
        m.resolved = s.resolved.map(|v| Assignment::from_values(&v));
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> MarketResult<Self> {
        let snap: Snapshot<T> =
            serde_json::from_str(text).map_err(|e| MarketError::Snapshot(e.to_string()))?;
        Self::from_snapshot(snap)
    }
}

#[derive(Clone, Copy)]
enum VecKind {
    Phantom,
    External,
    Initial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldingRepr<T> {
    pub security: Security,
    pub shares: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountRepr<T> {
    pub cash: T,
    pub deposited: T,
    pub holdings: Vec<HoldingRepr<T>>,
}

/// Serializable market state. Vectors follow the canonical outcome order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot<T> {
    pub structure: CarrollStructure,
    pub b: T,
    pub q: Vec<T>,
    pub initial_q: Vec<T>,
    pub phantom_q: Vec<T>,
    pub external_q: Vec<T>,
    pub ledger: BTreeMap<TraderId, AccountRepr<T>>,
    pub maker_cash_in: T,
    pub maker_paid_out: T,
    pub burned_value: T,
    pub phantom_log: Vec<PhantomRecord<T>>,
    pub resolved: Option<Vec<bool>>,
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn logit<T: Scalar>(p: T) -> T {
    p.ln() - (-p).ln_1p()
}

fn slack<T: Scalar>(x: T) -> T {
    T::lit(BALANCE_SLACK) * x.abs().max(T::one())
}

fn affordable<T: Scalar>(cost: T, cash: T) -> bool {
    cost <= cash + slack(cash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::{PropId, Relation};
    use proptest::prelude::*;

    fn single(b: f64) -> (MarketState<f64>, Security) {
        let mut s = CarrollStructure::new();
        let a = s.add_atomic("A", "").unwrap();
        let mut m = MarketState::new(s, b).unwrap();
        m.add_trader("t", 100.0).unwrap();
        (m, Security::yes(a))
    }

    fn nand() -> MarketState<f64> {
        let mut s = CarrollStructure::new();
        let a = s.add_atomic("A", "").unwrap();
        let b = s.add_atomic("B", "").unwrap();
        s.add_paired("r", b, a, Relation::Nand).unwrap();
        let mut m = MarketState::new(s, 1.0).unwrap();
        m.add_trader("t", 1000.0).unwrap();
        m.add_trader("u", 1000.0).unwrap();
        m
    }

    #[test]
    fn fresh_cost_is_b_log_n() {
        let (m, _) = single(1.0);
        assert!((m.cost() - 2f64.ln()).abs() < 1e-15);
        let m = nand();
        assert!((m.cost() - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cost_oracles() {
        let (mut m, _) = single(1.0);
        m.q = vec![0.0, 1.0];
        // ln(e + 1)
        assert!((m.cost() - 1.313_261_687_518_222_8).abs() < 1e-15);
        m.q = vec![3.0, 3.0];
        assert!((m.cost() - (3.0 + 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn price_oracles() {
        let (mut m, a) = single(1.0);
        assert_eq!(m.price(&a).unwrap(), 0.5);
        m.q = vec![0.0, 1.0];
        assert!((m.price(&a).unwrap() - 0.731_058_578_630_004_9).abs() < 1e-15);

        let m = nand();
        let s = m.structure();
        let sec = Security::parse("A&B&!r", s).unwrap();
        assert!((m.price(&sec).unwrap() - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_rejected() {
        let m = nand();
        let s = m.structure();
        let all_true = Security::parse("A&B&r", s).unwrap();
        assert!(matches!(
            m.price(&all_true),
            Err(MarketError::DegenerateSecurity(_))
        ));
        assert!(matches!(
            m.price(&Security::yes(PropId(9))),
            Err(MarketError::InvalidSecurity(_))
        ));
    }

    #[test]
    fn first_trade_cost_oracle() {
        let (mut m, a) = single(1.0);
        let r = m.execute_trade("t", &a, 1.0).unwrap();
        // ln(e + 1) − ln 2
        assert!((-r.cash_delta - 0.620_114_506_958_278_5).abs() < 1e-15);
        assert!(r.price_after > r.price_before);
        let back = m.execute_trade("t", &a, -1.0).unwrap();
        assert!((back.cash_delta + r.cash_delta).abs() < 1e-15);
        assert!(m.account("t").unwrap().holdings.is_empty());
    }

    #[test]
    fn naked_short_and_overspend_rejected() {
        let (mut m, a) = single(1.0);
        assert!(matches!(
            m.execute_trade("t", &a, -1.0),
            Err(MarketError::InsufficientHoldings { .. })
        ));
        assert!(matches!(
            m.execute_trade("t", &a, 500.0),
            Err(MarketError::InsufficientCash { .. })
        ));
        assert!(matches!(
            m.execute_trade("x", &a, 1.0),
            Err(MarketError::UnknownTrader(_))
        ));
    }

    #[test]
    fn buy_to_price_oracle() {
        let (m, a) = single(1.0);
        let d = m.buy_to_price(&a, 0.75).unwrap();
        assert!((d - 3f64.ln()).abs() < 1e-15);
        assert_eq!(m.buy_to_price(&a, 0.5).unwrap(), 0.0);
        assert!(matches!(
            m.buy_to_price(&a, 1.0),
            Err(MarketError::TargetOutOfRange(_))
        ));
    }

    #[test]
    fn worst_case_loss_oracles() {
        let (mut m, _) = single(1.0);
        assert!((m.worst_case_loss() - 2f64.ln()).abs() < 1e-15);
        m.initial_q = vec![0.0, -10.0];
        assert!((m.worst_case_loss() - 10.000_045_398_899_218).abs() < 1e-12);
    }

    #[test]
    fn resolution_payouts() {
        let mut m = nand();
        let s = m.structure().clone();
        let a = Security::yes(s.lookup("A").unwrap());
        m.execute_trade("t", &a, 3.0).unwrap();
        let o = m.outcomes().clone();
        let yes = o.iter().find(|w| a.matches(w)).copied().unwrap();
        let mut m2 = m.clone();
        assert_eq!(m2.resolve(&yes).unwrap()["t"], 3.0);
        let no = o.iter().find(|w| !a.matches(w)).copied().unwrap();
        assert_eq!(m.resolve(&no).unwrap()["t"], 0.0);
        assert!(matches!(
            m.execute_trade("t", &a, 1.0),
            Err(MarketError::MarketClosed)
        ));
        let infeasible = Assignment::from_values(&[true, true, true]);
        assert!(matches!(
            m2.clone().resolve(&infeasible),
            Err(MarketError::MarketClosed)
        ));
        let mut m3 = nand();
        assert!(matches!(
            m3.resolve(&infeasible),
            Err(MarketError::InfeasibleOutcome)
        ));
    }

    #[test]
    fn liquidation_equals_cost_after_single_buy() {
        let mut m = nand();
        let s = m.structure().clone();
        let sec = Security::parse("A&!r", &s).unwrap();
        let r = m.execute_trade("t", &sec, 2.5).unwrap();
        assert!((m.liquidation_value("t").unwrap() + r.cash_delta).abs() < 1e-13);
        assert_eq!(m.liquidation_value("u").unwrap(), 0.0);
    }

    #[test]
    fn shares_for_cash_spends_exactly() {
        let mut m = nand();
        let s = m.structure().clone();
        let sec = Security::yes(s.lookup("r").unwrap());
        let n = m.shares_for_cash(&sec, 0.37).unwrap();
        let r = m.execute_trade("t", &sec, n).unwrap();
        assert!((r.cash_delta + 0.37).abs() < 1e-13);
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let mut m = nand();
        let s = m.structure().clone();
        m.execute_trade("t", &Security::parse("A&!B", &s).unwrap(), 1.7)
            .unwrap();
        m.apply_phantom(&Security::yes(PropId(2)), 0.3, "test").unwrap();
        let json = m.to_json();
        let back = MarketState::<f64>::from_json(&json).unwrap();
        assert_eq!(back.q, m.q);
        assert_eq!(back.ledger, m.ledger);
        assert_eq!(back.to_json(), json);
    }

    #[test]
    fn burn_preserves_identity() {
        let mut m = nand();
        let s = m.structure().clone();
        let a = Security::yes(s.lookup("A").unwrap());
        m.execute_trade("t", &a, 4.0).unwrap();
        let burned = m.burn_holdings(0.25).unwrap();
        assert!(burned > 0.0);
        assert_eq!(m.holding("t", &a).unwrap(), 3.0);
        assert!(m.residuals().identity < 1e-12);
    }

    #[test]
    fn f32_market_prices() {
        let mut s = CarrollStructure::new();
        let a = s.add_atomic("A", "").unwrap();
        let mut m = MarketState::<f32>::new(s, 1.0).unwrap();
        m.add_trader("t", 10.0).unwrap();
        m.execute_trade("t", &Security::yes(a), 1.0).unwrap();
        assert!((m.price(&Security::yes(a)).unwrap() - 0.731_058_6).abs() < 1e-6);
    }

    #[test]
    fn extreme_quantities_stay_finite() {
        let mut m = nand();
        let n = m.q.len();
        m.q = (0..n).map(|i| if i % 2 == 0 { 1e4 } else { -1e4 }).collect();
        assert!(m.cost().is_finite());
        let total: f64 = m.outcome_prices().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    fn literal_strategy() -> impl Strategy<Value = Vec<(u32, bool)>> {
        prop::collection::vec((0u32..3, any::<bool>()), 1..3)
    }

    proptest! {
        #[test]
        fn round_trips_net_zero(
            trades in prop::collection::vec((literal_strategy(), 0.01f64..5.0), 1..12),
            b in 0.5f64..5.0,
        ) {
            let mut m = nand();
            m.b = b;
            let mut done = Vec::new();
            for (lits, n) in trades {
                let Ok(sec) = Security::new(lits.into_iter().map(|(p, v)| (PropId(p), v))) else { continue };
                if let Ok(r) = m.execute_trade("t", &sec, n) {
                    done.push(r);
                }
                let total: f64 = m.outcome_prices().iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
            for r in done.iter().rev() {
                m.execute_trade("t", &r.security, -r.shares).unwrap();
            }
            prop_assert!((m.cash("t").unwrap() - 1000.0).abs() < 1e-9);
            prop_assert!(m.residuals().identity < 1e-9);
        }

        #[test]
        fn buy_to_price_hits_target(
            q in prop::collection::vec(-20.0f64..20.0, 7),
            t in 0.001f64..0.999,
            lit in 0u32..3,
        ) {
            let mut m = nand();
            m.q = q;
            let sec = Security::yes(PropId(lit));
            let d = m.buy_to_price(&sec, t).unwrap();
            m.bump(&sec, d);
            prop_assert!((m.price(&sec).unwrap() - t).abs() < 1e-10);
        }

        #[test]
        fn solvency_bound_exhaustive(
            trades in prop::collection::vec((literal_strategy(), -3.0f64..6.0), 0..15),
        ) {
            let mut m = nand();
            for (lits, n) in trades {
                let Ok(sec) = Security::new(lits.into_iter().map(|(p, v)| (PropId(p), v))) else { continue };
                let who = if n > 2.0 { "u" } else { "t" };
                let _ = m.execute_trade(who, &sec, n);
            }
            let wcl = m.worst_case_loss();
            for i in 0..m.outcomes().len() {
                prop_assert!(m.maker_loss_at(i) <= wcl + 1e-9);
                let mut r = m.clone();
                let w = *r.outcomes().get(i);
                r.resolve(&w).unwrap();
                prop_assert!(r.maker_paid_out() - r.maker_cash_in() <= wcl + 1e-9);
            }
        }

        #[test]
        fn purchase_monotonicity(n in 0.01f64..10.0, lit in 0u32..3) {
            let mut m = nand();
            let sec = Security::yes(PropId(lit));
            let other = Security::no(PropId(lit));
            let p0 = m.price(&sec).unwrap();
            m.execute_trade("t", &sec, n).unwrap();
            let p1 = m.price(&sec).unwrap();
            prop_assert!(p1 > p0);
            m.execute_trade("u", &other, n).unwrap();
            prop_assert!(m.price(&sec).unwrap() < p1);
        }
    }
}
