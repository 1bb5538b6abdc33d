//! Restake as a phantom purchase, plus the attack lab built around it.
//!
//! A restake on the triple `(A, r, B)`, where `r` is a NAND edge between `A`
//! and its counterpoint `B`, spends cash on `r` and then pushes the price of
//! `A` back to where it was before that purchase with mechanism-owned
//! shares. Under [`FundingMode::BurnFunded`] a uniform fraction of every
//! ledger holding is burned first so the maker's exposure does not grow.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lmsr::{MarketError, MarketState, TraderId};
use crate::programmable::{add_atomic_live, add_edge_golden_ratio};
use crate::scalar::Scalar;
use crate::security::Security;
use crate::structure::{CarrollStructure, PropId, PropKind, Relation};

/// Precision of the burn-fraction bisection.
pub const BURN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LeverageError {
    #[error("trader `{0}` holds no positive position in A")]
    NoAPosition(String),
    #[error("cash {requested} exceeds available {available}")]
    InsufficientCash { requested: f64, available: f64 },
    #[error("propositions do not form a NAND triple")]
    NotANandTriple,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Market(#[from] MarketError),
}

pub type LevResult<T> = Result<T, LeverageError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FundingMode {
    Unfunded,
    BurnFunded,
}

impl FundingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "burn" | "burn_funded" | "burnfunded" => Some(FundingMode::BurnFunded),
            "unfunded" => Some(FundingMode::Unfunded),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestakeEvent<T> {
    pub trader: TraderId,
    pub a: Security,
    pub r: Security,
    pub b: Security,
    pub cash_spent: T,
    pub r_shares_bought: T,
    pub phantom_a_shares: T,
    pub funding_mode: FundingMode,
    pub burn_fraction: T,
    /// Drop in `C(q)` caused by the burn.
    pub burned_value: T,
    /// Change in maker exposure over the whole restake.
    pub exposure_delta: T,
    pub price_a_before: T,
    pub price_a_after: T,
    pub price_b_before: T,
    pub price_b_after: T,
}

/// Checks that `r` is a NAND edge joining `a` and `b`.
pub fn check_triple(s: &CarrollStructure, a: PropId, r: PropId, b: PropId) -> LevResult<()> {
    match s.get(r).map(|p| &p.kind) {
        Some(PropKind::Paired {
            source,
            target,
            relation: Relation::Nand,
        }) if (*source == a && *target == b) || (*source == b && *target == a) => Ok(()),
        _ => Err(LeverageError::NotANandTriple),
    }
}

/// Buys `r` with `cash`, then restores the price of `A` with phantom shares.
pub fn restake<T: Scalar>(
    m: &mut MarketState<T>,
    trader: &str,
    a: PropId,
    r: PropId,
    b: PropId,
    cash: T,
    mode: FundingMode,
) -> LevResult<RestakeEvent<T>> {
    check_triple(m.structure(), a, r, b)?;
    let (sa, sr, sb) = (Security::yes(a), Security::yes(r), Security::yes(b));
    if m.holding(trader, &sa)? <= T::zero() {
        return Err(LeverageError::NoAPosition(trader.to_string()));
    }
    let available = m.cash(trader)?;
    if cash < T::zero() || cash > available {
        return Err(LeverageError::InsufficientCash {
            requested: cash.as_f64(),
            available: available.as_f64(),
        });
    }
    let price_a_before = m.price(&sa)?;
    let price_b_before = m.price(&sb)?;
    let mut event = RestakeEvent {
        trader: trader.to_string(),
        a: sa.clone(),
        r: sr.clone(),
        b: sb.clone(),
        cash_spent: T::zero(),
        r_shares_bought: T::zero(),
        phantom_a_shares: T::zero(),
        funding_mode: mode,
        burn_fraction: T::zero(),
        burned_value: T::zero(),
        exposure_delta: T::zero(),
        price_a_before,
        price_a_after: price_a_before,
        price_b_before,
        price_b_after: price_b_before,
    };
    if cash == T::zero() {
        return Ok(event);
    }
    let exposure0 = m.solvency_exposure();
    let shares = m.shares_for_cash(&sr, cash)?;
    let receipt = m.execute_trade(trader, &sr, shares)?;

    // burn β, then restore A; exposure must not exceed its starting value
    let settle = |base: &MarketState<T>, beta: T| -> LevResult<(MarketState<T>, T, T)> {
        let mut next = base.clone();
        let burned = next.burn_holdings(beta)?;
        let delta = next.buy_to_price(&sa, price_a_before)?;
        next.apply_phantom(&sa, delta, "restake")?;
        Ok((next, delta, burned))
    };
    let beta = match mode {
        FundingMode::Unfunded => T::zero(),
        FundingMode::BurnFunded => {
            let over = |beta: T| -> LevResult<bool> {
                Ok(settle(m, beta)?.0.solvency_exposure() > exposure0)
            };
            if !over(T::zero())? {
                T::zero()
            } else {
                let (mut lo, mut hi) = (T::zero(), T::one());
                let tol = T::lit(BURN_TOLERANCE);
                while hi - lo > tol {
                    let mid = (lo + hi) / T::lit(2.0);
                    if over(mid)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi.min(T::one() - tol)
            }
        }
    };
    let (next, delta, burned) = settle(m, beta)?;
    *m = next;
    event.cash_spent = -receipt.cash_delta;
    event.r_shares_bought = receipt.shares;
    event.phantom_a_shares = delta;
    event.burn_fraction = beta;
    event.burned_value = burned;
    event.exposure_delta = m.solvency_exposure() - exposure0;
    event.price_a_after = m.price(&sa)?;
    event.price_b_after = m.price(&sb)?;
    Ok(event)
}

/// The `{A, B, r = NAND(B, A)}` template used by the attack lab.
pub fn nand_template() -> (CarrollStructure, PropId, PropId, PropId) {
    let mut s = CarrollStructure::new();
    let a = s.add_atomic("A", "claim").expect("fresh");
    let b = s.add_atomic("B", "counterpoint").expect("fresh");
    let r = s.add_paired("r", b, a, Relation::Nand).expect("fresh");
    (s, a, b, r)
}

/// Moves the price of a single literal to `target` using only purchases:
/// the complement literal is bought when the price must fall.
pub fn push_price<T: Scalar>(
    m: &mut MarketState<T>,
    trader: &str,
    prop: PropId,
    target: T,
) -> Result<(), MarketError> {
    let delta = m.buy_to_price(&Security::yes(prop), target)?;
    if delta > T::zero() {
        m.execute_trade(trader, &Security::yes(prop), delta)?;
    } else if delta < T::zero() {
        m.execute_trade(trader, &Security::no(prop), -delta)?;
    }
    Ok(())
}

/// Trader value: cash plus bundle liquidation value.
pub fn trader_value<T: Scalar>(m: &MarketState<T>, trader: &str) -> Result<T, MarketError> {
    Ok(m.cash(trader)? + m.liquidation_value(trader)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub label: String,
    pub price_a: f64,
    pub price_b: f64,
    pub price_r: f64,
    pub cash: BTreeMap<TraderId, f64>,
    pub holdings_value: BTreeMap<TraderId, f64>,
    pub maker_net_cash: f64,
    pub burned_value: f64,
    pub phantom_a: f64,
    /// |Σ trader cash + maker net cash − Σ deposits|
    pub zero_sum_residual: f64,
}

fn trace_step<T: Scalar>(m: &MarketState<T>, label: &str, ids: (PropId, PropId, PropId)) -> TraceStep {
    let (a, b, r) = ids;
    let p = |id| m.price(&Security::yes(id)).map(|x| x.as_f64()).unwrap_or(f64::NAN);
    let phantom_a = m
        .phantom_log()
        .iter()
        .filter(|x| x.security == Security::yes(a))
        .map(|x| x.shares.as_f64())
        .sum();
    TraceStep {
        label: label.to_string(),
        price_a: p(a),
        price_b: p(b),
        price_r: p(r),
        cash: m
            .ledger()
            .iter()
            .map(|(id, acct)| (id.clone(), acct.cash.as_f64()))
            .collect(),
        holdings_value: m
            .ledger()
            .keys()
            .map(|id| (id.clone(), m.liquidation_value(id).map(|v| v.as_f64()).unwrap_or(f64::NAN)))
            .collect(),
        maker_net_cash: (m.maker_cash_in() - m.maker_paid_out()).as_f64(),
        burned_value: m.burned_value().as_f64(),
        phantom_a,
        zero_sum_residual: m.residuals().cash_conservation,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Total attacker capital.
    pub c: f64,
    /// Share of `c` reserved for the restake.
    pub frac_to_leave: f64,
    /// Share of the remainder spent directly on `A`; the rest pumps `B`.
    pub a_frac: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> LevResult<()> {
        let unit = 0.0..=1.0;
        if !(self.c > 0.0 && self.c.is_finite())
            || !unit.contains(&self.frac_to_leave)
            || !unit.contains(&self.a_frac)
        {
            return Err(LeverageError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config: AttackConfig,
    pub mode: FundingMode,
    /// Price of `A` when all of `c` goes straight into `A`.
    pub p_a: f64,
    /// Price of `A` at the end of the split path.
    pub p_a_prime: f64,
    pub ria_margin: f64,
    /// Attacker value at the end of the attack path minus `c`.
    pub coalition_pnl: f64,
    /// Capital the attack path ends up giving away: `max(0, −pnl)`.
    pub loss_budget_used: f64,
    pub restaked: bool,
    pub restake: Option<RestakeEvent<f64>>,
    pub trace: Vec<TraceStep>,
}

const ATTACKER: &str = "x";

/// Baseline versus split attack path on fresh NAND-triple markets.
pub fn ria_attack(config: AttackConfig, b: f64, mode: FundingMode) -> LevResult<AttackReport> {
    config.validate()?;
    let (s, a, bb, r) = nand_template();
    let ids = (a, bb, r);
    let sa = Security::yes(a);
    let sb = Security::yes(bb);

    let mut base = MarketState::<f64>::new(s.clone(), b)?;
    base.add_trader(ATTACKER, config.c)?;
    let n = base.shares_for_cash(&sa, config.c)?;
    base.execute_trade(ATTACKER, &sa, n)?;
    let p_a = base.price(&sa)?;

    let mut m = MarketState::<f64>::new(s, b)?;
    m.add_trader(ATTACKER, config.c)?;
    let mut trace = vec![trace_step(&m, "start", ids)];
    let reserve = config.c * config.frac_to_leave;
    let rest = config.c - reserve;
    let c_a = rest * config.a_frac;
    let c_b = rest - c_a;
    if c_b > 0.0 {
        let n = m.shares_for_cash(&sb, c_b)?;
        m.execute_trade(ATTACKER, &sb, n)?;
        trace.push(trace_step(&m, "pump B", ids));
    }
    if c_a > 0.0 {
        let n = m.shares_for_cash(&sa, c_a)?;
        m.execute_trade(ATTACKER, &sa, n)?;
        trace.push(trace_step(&m, "buy A", ids));
    }
    let mut event = None;
    if reserve > 0.0 && m.holding(ATTACKER, &sa)? > 0.0 {
        let spend = reserve.min(m.cash(ATTACKER)?);
        event = Some(restake(&mut m, ATTACKER, a, r, bb, spend, mode)?);
        trace.push(trace_step(&m, "restake", ids));
    }
    if m.holding(ATTACKER, &sb)? > 0.0 {
        m.sell_all(ATTACKER, &sb)?;
        trace.push(trace_step(&m, "exit B", ids));
    }
    let cash = m.cash(ATTACKER)?;
    if cash > 1e-15 {
        let n = m.shares_for_cash(&sa, cash)?;
        m.execute_trade(ATTACKER, &sa, n)?;
        trace.push(trace_step(&m, "sweep into A", ids));
    }
    let p_a_prime = m.price(&sa)?;
    let pnl = trader_value(&m, ATTACKER)? - config.c;
    Ok(AttackReport {
        config,
        mode,
        p_a,
        p_a_prime,
        ria_margin: p_a - p_a_prime,
        coalition_pnl: pnl,
        loss_budget_used: (-pnl).max(0.0),
        restaked: event.is_some(),
        restake: event,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub frac_to_leave: f64,
    pub a_frac: f64,
    pub p_a: f64,
    pub p_a_prime: f64,
    pub ria_margin: f64,
    pub loss_budget_used: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiaSweepReport {
    pub c: f64,
    pub b: f64,
    pub grid: usize,
    pub mode: FundingMode,
    pub seed: u64,
    pub cells: Vec<SweepCell>,
    pub min_margin: f64,
    pub argmin: (f64, f64),
    pub ria_proof: bool,
}

/// Evenly spaced points over `[lo, hi]`, endpoints included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Runs [`ria_attack`] over an `n × n` grid of `(frac_to_leave, a_frac)`.
pub fn ria_sweep(c: f64, b: f64, grid: usize, mode: FundingMode, seed: u64) -> LevResult<RiaSweepReport> {
    let axis = linspace(0.0, 1.0, grid);
    let mut cells = Vec::with_capacity(grid * grid);
    for &f in &axis {
        for &af in &axis {
            let rep = ria_attack(
                AttackConfig {
                    c,
                    frac_to_leave: f,
                    a_frac: af,
                    seed,
                },
                b,
                mode,
            )?;
            cells.push(SweepCell {
                frac_to_leave: f,
                a_frac: af,
                p_a: rep.p_a,
                p_a_prime: rep.p_a_prime,
                ria_margin: rep.ria_margin,
                loss_budget_used: rep.loss_budget_used,
            });
        }
    }
    let worst = cells
        .iter()
        .min_by(|x, y| x.ria_margin.total_cmp(&y.ria_margin))
        .cloned();
    let (min_margin, argmin) = worst
        .map(|w| (w.ria_margin, (w.frac_to_leave, w.a_frac)))
        .unwrap_or((0.0, (0.0, 0.0)));
    Ok(RiaSweepReport {
        c,
        b,
        grid,
        mode,
        seed,
        cells,
        min_margin,
        argmin,
        ria_proof: min_margin >= -1e-9,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationFreeReport {
    pub c: f64,
    pub b: f64,
    pub a_frac: f64,
    pub mode: FundingMode,
    /// Fees paid to create `B` and `r`: the least the attack can cost.
    pub attack_cost_floor: f64,
    pub affordable: bool,
    pub p_a0: f64,
    pub res: f64,
    pub sig: f64,
    pub res_le_sig: bool,
}

/// Starting from a market on `A` alone, the attacker creates the counterpoint
/// `B` and the edge `r` (paying both creation fees out of `c`), spends
/// `a_frac` of what is left on `A` and restakes the rest. `B` is never
/// traded.
pub fn manipulation_free_variation(
    c: f64,
    b: f64,
    a_frac: f64,
    mode: FundingMode,
) -> LevResult<ManipulationFreeReport> {
    if !(c > 0.0) || !(0.0..=1.0).contains(&a_frac) {
        return Err(LeverageError::InvalidConfig(format!("c={c} a_frac={a_frac}")));
    }
    let mut s = CarrollStructure::new();
    let a = s.add_atomic("A", "claim").map_err(MarketError::from)?;
    let sa = Security::yes(a);
    let fresh = MarketState::<f64>::new(s.clone(), b)?;
    let p_a0 = fresh.price(&sa)?;

    let mut direct = fresh.clone();
    direct.add_trader(ATTACKER, c)?;
    let n = direct.shares_for_cash(&sa, c)?;
    direct.execute_trade(ATTACKER, &sa, n)?;
    let sig = direct.price(&sa)? - p_a0;

    let mut m = fresh;
    m.add_trader(ATTACKER, c)?;
    let floor = {
        let mut probe = m.clone();
        probe.deposit(ATTACKER, 1e9)?;
        let f1 = add_atomic_live(&mut probe, "B", "counterpoint", ATTACKER)?.fee_charged;
        let f2 = add_edge_golden_ratio(&mut probe, "r", PropId(1), a, ATTACKER)?.fee_charged;
        f1 + f2
    };
    if floor >= c {
        return Ok(ManipulationFreeReport {
            c,
            b,
            a_frac,
            mode,
            attack_cost_floor: floor,
            affordable: false,
            p_a0,
            res: 0.0,
            sig,
            res_le_sig: true,
        });
    }
    let bb = add_atomic_live(&mut m, "B", "counterpoint", ATTACKER)?.new_props[0];
    let r = add_edge_golden_ratio(&mut m, "r", bb, a, ATTACKER)?.new_props[0];
    let left = m.cash(ATTACKER)?;
    let c_a = left * a_frac;
    if c_a > 0.0 {
        let n = m.shares_for_cash(&sa, c_a)?;
        m.execute_trade(ATTACKER, &sa, n)?;
    }
    let rest = m.cash(ATTACKER)?;
    if rest > 0.0 && m.holding(ATTACKER, &sa)? > 0.0 {
        restake(&mut m, ATTACKER, a, r, bb, rest, mode)?;
    }
    let res = m.price(&sa)? - p_a0;
    Ok(ManipulationFreeReport {
        c,
        b,
        a_frac,
        mode,
        attack_cost_floor: floor,
        affordable: true,
        p_a0,
        res,
        sig,
        res_le_sig: res <= sig + 1e-9,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionParams {
    pub b: f64,
    /// Shares of `B` bought by an unrelated bystander before the script.
    pub bystander_b_shares: f64,
    /// Alice's own stake in `A`.
    pub alice_a_shares: f64,
    /// Balice's (the sockpuppet's) stake in `A`.
    pub balice_a_shares: f64,
    /// Cash Alice puts into `r`.
    pub r_cash: f64,
    pub mode: FundingMode,
    /// When false Alice buys `r` with plain LMSR trades (control run).
    pub restake: bool,
    pub seed: u64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        ExtractionParams {
            b: 1.0,
            bystander_b_shares: 20.0,
            alice_a_shares: 1.0,
            balice_a_shares: 2.0,
            r_cash: 0.3,
            mode: FundingMode::BurnFunded,
            restake: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub params: ExtractionParams,
    pub coalition_pnl: f64,
    pub bystander_value_change: f64,
    pub restake: Option<RestakeEvent<f64>>,
    pub trace: Vec<TraceStep>,
    pub max_zero_sum_residual: f64,
}

const FUNDING: f64 = 1e3;

/// Alice and her sockpuppet Balice both hold `A`; Alice restakes into `r`,
/// Balice exits `A` at the propped-up price, then Alice exits everything.
pub fn capital_extraction_attack(p: ExtractionParams) -> LevResult<ExtractionReport> {
    let (s, a, bb, r) = nand_template();
    let ids = (a, bb, r);
    let (sa, sb, sr) = (Security::yes(a), Security::yes(bb), Security::yes(r));
    let mut m = MarketState::<f64>::new(s, p.b)?;
    for t in ["alice", "balice", "carol"] {
        m.add_trader(t, FUNDING)?;
    }
    let mut trace = vec![trace_step(&m, "start", ids)];
    if p.bystander_b_shares > 0.0 {
        m.execute_trade("carol", &sb, p.bystander_b_shares)?;
        trace.push(trace_step(&m, "bystander buys B", ids));
    }
    let carol0 = trader_value(&m, "carol")?;
    if p.alice_a_shares > 0.0 {
        m.execute_trade("alice", &sa, p.alice_a_shares)?;
        trace.push(trace_step(&m, "alice buys A", ids));
    }
    if p.balice_a_shares > 0.0 {
        m.execute_trade("balice", &sa, p.balice_a_shares)?;
        trace.push(trace_step(&m, "balice buys A", ids));
    }
    let mut event = None;
    if p.r_cash > 0.0 {
        if p.restake && m.holding("alice", &sa)? > 0.0 {
            event = Some(restake(&mut m, "alice", a, r, bb, p.r_cash, p.mode)?);
            trace.push(trace_step(&m, "alice restakes into r", ids));
        } else {
            let n = m.shares_for_cash(&sr, p.r_cash)?;
            m.execute_trade("alice", &sr, n)?;
            trace.push(trace_step(&m, "alice buys r", ids));
        }
    }
    if m.holding("balice", &sa)? > 0.0 {
        m.sell_all("balice", &sa)?;
        trace.push(trace_step(&m, "balice sells A", ids));
    }
    if m.holding("alice", &sr)? > 0.0 {
        m.sell_all("alice", &sr)?;
        trace.push(trace_step(&m, "alice sells r", ids));
    }
    if m.holding("alice", &sa)? > 0.0 {
        m.sell_all("alice", &sa)?;
        trace.push(trace_step(&m, "alice sells A", ids));
    }
    let pnl = m.cash("alice")? + m.cash("balice")? - 2.0 * FUNDING;
    let max_residual = trace
        .iter()
        .map(|t| t.zero_sum_residual)
        .fold(0.0, f64::max);
    Ok(ExtractionReport {
        params: p,
        coalition_pnl: pnl,
        bystander_value_change: trader_value(&m, "carol")? - carol0,
        restake: event,
        trace,
        max_zero_sum_residual: max_residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    pub b: f64,
    /// Price of `B` set by the world before the restaker enters.
    pub b_initial: f64,
    /// Stake in `A` bought before the restake.
    pub stake: f64,
    /// Cash restaked (or spent directly on `A` by the comparison trader).
    pub kappa: f64,
    /// Half-width of the `ΔB` and `Δr` axes.
    pub span: f64,
    pub grid: usize,
    pub mode: FundingMode,
    pub seed: u64,
}

impl Default for SurfaceParams {
    fn default() -> Self {
        SurfaceParams {
            b: 1.0,
            b_initial: 0.6,
            stake: 0.5,
            kappa: 0.5,
            span: 0.25,
            grid: 5,
            mode: FundingMode::BurnFunded,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSlice {
    pub r_initial: f64,
    pub delta_b: Vec<f64>,
    pub delta_r: Vec<f64>,
    /// `advantage[i][j]` at `(delta_b[i], delta_r[j])`: restaker value minus
    /// direct-`A` buyer value. `None` where the move was unreachable.
    pub advantage: Vec<Vec<Option<f64>>>,
    pub unreachable: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceVerdicts {
    pub prop1_nonincreasing_in_delta_b: bool,
    pub bonus_nonpositive_when_b_rises: bool,
    pub prop2_nondecreasing_in_delta_r: bool,
    pub bonus_nonpositive_when_r_falls: bool,
    pub double_vindication_bonus_positive: bool,
    pub double_vindication_is_maximum: bool,
    pub zero_move_advantage: Option<f64>,
    pub double_vindication_advantage: Option<f64>,
    pub maximum: Option<(f64, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonusSurfaceReport {
    pub params: SurfaceParams,
    pub slices: Vec<SurfaceSlice>,
    /// Verdicts for the first slice.
    pub verdicts: SurfaceVerdicts,
}

const WORLD: &str = "world";
const RESTAKER: &str = "t";

/// Drives `B` and `r` to the requested prices by alternating purchases.
fn move_world(m: &mut MarketState<f64>, bb: PropId, r: PropId, tb: f64, tr: f64) -> Result<bool, MarketError> {
    if !(tb > 0.0 && tb < 1.0 && tr > 0.0 && tr < 1.0) {
        return Ok(false);
    }
    for _ in 0..2000 {
        push_price(m, WORLD, bb, tb)?;
        push_price(m, WORLD, r, tr)?;
        let gb = (m.price(&Security::yes(bb))? - tb).abs();
        if gb < 1e-13 {
            return Ok(true);
        }
    }
    Ok(false)
}

fn surface_cell(
    p: &SurfaceParams,
    r_initial: f64,
    db: f64,
    dr: f64,
) -> LevResult<Option<f64>> {
    let (s, a, bb, r) = nand_template();
    let sa = Security::yes(a);
    let mut m = MarketState::<f64>::new(s, p.b)?;
    m.add_trader(WORLD, 1e9)?;
    m.add_trader(RESTAKER, p.stake + p.kappa)?;
    if !move_world(&mut m, bb, r, p.b_initial, r_initial)? {
        return Ok(None);
    }
    let n = m.shares_for_cash(&sa, p.stake)?;
    m.execute_trade(RESTAKER, &sa, n)?;
    let b_ref = m.price(&Security::yes(bb))?;
    let r_ref = m.price(&Security::yes(r))?;
    let mut with = m.clone();
    let mut without = m;
    restake(&mut with, RESTAKER, a, r, bb, p.kappa, p.mode)?;
    let n = without.shares_for_cash(&sa, p.kappa)?;
    without.execute_trade(RESTAKER, &sa, n)?;
    for mk in [&mut with, &mut without] {
        if !move_world(mk, bb, r, b_ref + db, r_ref + dr)? {
            return Ok(None);
        }
    }
    Ok(Some(trader_value(&with, RESTAKER)? - trader_value(&without, RESTAKER)?))
}

/// Restaker advantage over a direct-`A` buyer across exogenous moves of the
/// counterpoint and edge prices, for each initial edge price.
pub fn restake_bonus_surface(p: SurfaceParams, r_initials: &[f64]) -> LevResult<BonusSurfaceReport> {
    if p.grid < 2 || r_initials.is_empty() {
        return Err(LeverageError::InvalidConfig("grid must be ≥ 2 with at least one r_initial".into()));
    }
    let axis = linspace(-p.span, p.span, p.grid);
    let mut slices = Vec::new();
    for &r0 in r_initials {
        let mut adv = vec![vec![None; axis.len()]; axis.len()];
        let mut unreachable = Vec::new();
        for (i, db) in axis.iter().enumerate() {
            for (j, dr) in axis.iter().enumerate() {
                adv[i][j] = surface_cell(&p, r0, *db, *dr)?;
                if adv[i][j].is_none() {
                    unreachable.push((i, j));
                }
            }
        }
        slices.push(SurfaceSlice {
            r_initial: r0,
            delta_b: axis.clone(),
            delta_r: axis.clone(),
            advantage: adv,
            unreachable,
        });
    }
    let verdicts = verdicts(&slices[0]);
    Ok(BonusSurfaceReport {
        params: p,
        slices,
        verdicts,
    })
}

fn verdicts(s: &SurfaceSlice) -> SurfaceVerdicts {
    const EPS: f64 = 1e-12;
    let n = s.delta_b.len();
    let adv = &s.advantage;
    let mut prop1 = true;
    let mut prop2 = true;
    let mut b_rises = true;
    let mut r_falls = true;
    for i in 0..n {
        for j in 0..n {
            let Some(v) = adv[i][j] else { continue };
            if i + 1 < n {
                if let Some(w) = adv[i + 1][j] {
                    prop1 &= w <= v + EPS;
                }
            }
            if j + 1 < n {
                if let Some(w) = adv[i][j + 1] {
                    prop2 &= w >= v - EPS;
                }
            }
            if s.delta_b[i] >= 0.0 {
                b_rises &= v <= EPS;
            }
            if s.delta_r[j] <= 0.0 {
                r_falls &= v <= EPS;
            }
        }
    }
    let dv = adv[0][n - 1];
    let zero = if n % 2 == 1 { adv[n / 2][n / 2] } else { None };
    let maximum = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter_map(|(i, j)| adv[i][j].map(|v| (s.delta_b[i], s.delta_r[j], v)))
        .max_by(|x, y| x.2.total_cmp(&y.2));
    SurfaceVerdicts {
        prop1_nonincreasing_in_delta_b: prop1,
        bonus_nonpositive_when_b_rises: b_rises,
        prop2_nondecreasing_in_delta_r: prop2,
        bonus_nonpositive_when_r_falls: r_falls,
        double_vindication_bonus_positive: dv.is_some_and(|v| v > 0.0),
        double_vindication_is_maximum: match (dv, maximum) {
            (Some(v), Some(mx)) => v >= mx.2 - EPS,
            _ => false,
        },
        zero_move_advantage: zero,
        double_vindication_advantage: dv,
        maximum,
    }
}
