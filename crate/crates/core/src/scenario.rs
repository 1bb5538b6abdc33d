//! Scenario files: a structure block, a market block, an optional partition
//! block and a script of verbs, plus the runner that turns them into a
//! deterministic [`RunReport`].
//!
//! ```text
//! [structure]
//! atomic A "the claim"
//! atomic B "the counterpoint"
//! edge r nand B A
//!
//! [market]
//! b 1.0
//! trader alice 100
//! seed 7
//!
//! [script]
//! trade alice A 2.5
//! quote A
//! grow atomic C payer=alice
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::leverage::{
    capital_extraction_attack, restake, ria_attack, ria_sweep, AttackConfig, ExtractionParams,
    ExtractionReport, FundingMode, LeverageError, RestakeEvent, RiaSweepReport, AttackReport,
};
use crate::lmsr::{MarketError, MarketState, Snapshot, TradeReceipt};
use crate::programmable::{
    add_atomic_live, add_edge_golden_ratio, add_edge_negative_init, grow_leaf_golden_ratio, EdgeSpec,
    MutationReceipt,
};
use crate::security::{Security, SecurityError};
use crate::segmentation::{
    compare_exact, partition_tree, DivergenceReport, Partition, ScriptTrade, SegmentationError,
    SegmentedMarket,
};
use crate::structure::{Assignment, CarrollStructure, PropId, Relation, StructureError};

/// Name of the generator behind `random-trades`, recorded in every report.
pub const PRNG_ALGORITHM: &str = "ChaCha8Rng";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("{}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))]
    Parse(Vec<ParseError>),
    #[error("line {line}: {message}")]
    Runtime { line: usize, message: String },
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PartitionSpec {
    MaxSize(usize),
    Manual(Vec<Vec<String>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "kebab-case")]
pub enum Verb {
    Trade {
        trader: String,
        security: String,
        shares: f64,
    },
    SellAll {
        trader: String,
        security: String,
    },
    Quote {
        security: String,
    },
    GrowAtomic {
        id: String,
        label: String,
        payer: String,
    },
    GrowEdgeNeg {
        id: String,
        relation: Relation,
        source: String,
        target: String,
        k: f64,
        payer: String,
    },
    GrowEdgePhi {
        id: String,
        source: String,
        target: String,
        payer: String,
    },
    GrowLeafPhi {
        leaf: String,
        edge: String,
        anchor: String,
        payer: String,
    },
    Restake {
        trader: String,
        a: String,
        r: String,
        b: String,
        cash: f64,
        mode: FundingMode,
    },
    AttackRia {
        c: f64,
        grid: Option<usize>,
        frac_to_leave: f64,
        a_frac: f64,
        mode: FundingMode,
    },
    AttackExtract {
        mode: FundingMode,
        restake: bool,
    },
    Resolve {
        outcome: String,
    },
    Snapshot,
    RandomTrades {
        n: usize,
        traders: Vec<String>,
        max_shares: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptLine {
    pub line: usize,
    pub verb: Verb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub structure: CarrollStructure,
    pub b: f64,
    pub traders: Vec<(String, f64)>,
    pub seed: u64,
    pub partition: Option<PartitionSpec>,
    pub script: Vec<ScriptLine>,
}

/// Splits on whitespace, keeping double-quoted runs together (quotes removed).
fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_quote = false;
    let mut had_quote = false;
    for ch in line.chars() {
        match ch {
            '"' => {
                in_quote = !in_quote;
                had_quote = true;
            }
            c if c.is_whitespace() && !in_quote => {
                if !cur.is_empty() || had_quote {
                    out.push(std::mem::take(&mut cur));
                }
                had_quote = false;
            }
            c => cur.push(c),
        }
    }
    if in_quote {
        return Err("unterminated quote".into());
    }
    if !cur.is_empty() || had_quote {
        out.push(cur);
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quote = !in_quote,
            '#' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Structure,
    Market,
    Partition,
    Script,
}

struct Parser {
    errors: Vec<ParseError>,
    props: BTreeSet<String>,
    traders: BTreeSet<String>,
}

impl Parser {
    fn err(&mut self, line: usize, message: impl Into<String>) {
        self.errors.push(ParseError {
            line,
            message: message.into(),
        });
    }

    fn need_prop(&mut self, line: usize, name: &str) {
        if !self.props.contains(name) {
            self.err(line, format!("undeclared proposition `{name}`"));
        }
    }

    fn need_trader(&mut self, line: usize, name: &str) {
        if !self.traders.contains(name) {
            self.err(line, format!("undeclared trader `{name}`"));
        }
    }

    /// Checks every proposition named in a security expression.
    fn need_security(&mut self, line: usize, text: &str) {
        for raw in text.split('&') {
            let tok = raw.trim();
            let name = tok
                .strip_prefix('!')
                .unwrap_or(tok)
                .split('=')
                .next()
                .unwrap_or("")
                .trim();
            if name.is_empty() {
                self.err(line, format!("malformed security `{text}`"));
            } else {
                self.need_prop(line, name);
            }
        }
    }

    fn new_prop(&mut self, line: usize, name: &str) {
        if !self.props.insert(name.to_string()) {
            self.err(line, format!("duplicate proposition `{name}`"));
        }
    }
}

fn parse_f64(p: &mut Parser, line: usize, s: &str, what: &str) -> f64 {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => {
            p.err(line, format!("invalid {what} `{s}`"));
            0.0
        }
    }
}

fn parse_relation(p: &mut Parser, line: usize, s: &str) -> Relation {
    Relation::parse(s).unwrap_or_else(|| {
        p.err(line, format!("unknown edge kind `{s}`"));
        Relation::Nand
    })
}

fn parse_mode(p: &mut Parser, line: usize, s: Option<&str>) -> FundingMode {
    match s {
        None => FundingMode::BurnFunded,
        Some(s) => FundingMode::parse(s).unwrap_or_else(|| {
            p.err(line, format!("unknown funding mode `{s}`"));
            FundingMode::BurnFunded
        }),
    }
}

/// Splits `key=value` tokens from positional ones.
fn split_kv(tokens: &[String]) -> (Vec<&str>, BTreeMap<String, String>) {
    let mut pos = Vec::new();
    let mut kv = BTreeMap::new();
    for t in tokens {
        match t.split_once('=') {
            Some((k, v)) if !k.is_empty() && !k.contains('&') && !v.is_empty() && !matches!(v, "T" | "F" | "t" | "f" | "true" | "false" | "0" | "1") => {
                kv.insert(k.to_string(), v.to_string());
            }
            _ => pos.push(t.as_str()),
        }
    }
    (pos, kv)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut p = Parser {
        errors: Vec::new(),
        props: BTreeSet::new(),
        traders: BTreeSet::new(),
    };
    let mut structure = CarrollStructure::new();
    let mut seen_structure = false;
    let mut seen_market = false;
    let mut b = None;
    let mut traders = Vec::new();
    let mut seed = 0u64;
    let mut partition: Option<PartitionSpec> = None;
    let mut script = Vec::new();
    let mut section = Section::None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = strip_comment(raw).trim();
        if body.is_empty() {
            continue;
        }
        if body.starts_with('[') && body.ends_with(']') {
            section = match &body[1..body.len() - 1] {
                "structure" => {
                    seen_structure = true;
                    Section::Structure
                }
                "market" => {
                    seen_market = true;
                    Section::Market
                }
                "partition" => Section::Partition,
                "script" => Section::Script,
                other => {
                    p.err(line, format!("unknown section `[{other}]`"));
                    Section::None
                }
            };
            continue;
        }
        let tokens = match tokenize(body) {
            Ok(t) => t,
            Err(e) => {
                p.err(line, e);
                continue;
            }
        };
        let head = tokens[0].as_str();
        match section {
            Section::None => p.err(line, "statement outside any section"),
            Section::Structure => parse_structure_line(&mut p, &mut structure, line, &tokens),
            Section::Market => match (head, tokens.len()) {
                ("b", 2) => b = Some(parse_f64(&mut p, line, &tokens[1], "liquidity")),
                ("trader", 3) => {
                    let cash = parse_f64(&mut p, line, &tokens[2], "cash");
                    if !p.traders.insert(tokens[1].clone()) {
                        p.err(line, format!("duplicate trader `{}`", tokens[1]));
                    }
                    traders.push((tokens[1].clone(), cash));
                }
                ("seed", 2) => match tokens[1].parse() {
                    Ok(s) => seed = s,
                    Err(_) => p.err(line, format!("invalid seed `{}`", tokens[1])),
                },
                ("outcome_cap", 2) => match tokens[1].parse() {
                    Ok(c) => structure.set_outcome_cap(c),
                    Err(_) => p.err(line, format!("invalid outcome cap `{}`", tokens[1])),
                },
                _ => p.err(line, format!("unknown market statement `{body}`")),
            },
            Section::Partition => match head {
                "M" | "max" if tokens.len() == 2 => match tokens[1].parse() {
                    Ok(m) => partition = Some(PartitionSpec::MaxSize(m)),
                    Err(_) => p.err(line, format!("invalid part size `{}`", tokens[1])),
                },
                "part" if tokens.len() >= 2 => {
                    for t in &tokens[1..] {
                        p.need_prop(line, t);
                    }
                    let set = tokens[1..].to_vec();
                    match partition.as_mut() {
                        Some(PartitionSpec::Manual(parts)) => parts.push(set),
                        _ => partition = Some(PartitionSpec::Manual(vec![set])),
                    }
                }
                _ => p.err(line, format!("unknown partition statement `{body}`")),
            },
            Section::Script => {
                if let Some(verb) = parse_verb(&mut p, line, &tokens) {
                    script.push(ScriptLine { line, verb });
                }
            }
        }
    }
    if !seen_structure || structure.is_empty() {
        return Err(ScenarioError::Parse(vec![ParseError {
            line: 0,
            message: "missing structure block".into(),
        }]));
    }
    if !seen_market {
        p.err(0, "missing market block");
    }
    let b = match b {
        Some(b) if b > 0.0 => b,
        Some(b) => {
            p.err(0, format!("liquidity must be positive, got {b}"));
            1.0
        }
        None => {
            if seen_market {
                p.err(0, "market block has no `b`");
            }
            1.0
        }
    };
    if !p.errors.is_empty() {
        p.errors.sort_by_key(|e| e.line);
        return Err(ScenarioError::Parse(p.errors));
    }
    Ok(Scenario {
        structure,
        b,
        traders,
        seed,
        partition,
        script,
    })
}

fn parse_structure_line(p: &mut Parser, s: &mut CarrollStructure, line: usize, t: &[String]) {
    let lookup = |p: &mut Parser, s: &CarrollStructure, name: &str| -> Option<PropId> {
        let id = s.id_of(name);
        if id.is_none() {
            p.err(line, format!("undeclared proposition `{name}`"));
        }
        id
    };
    let result: Result<(), StructureError> = match t[0].as_str() {
        "atomic" if t.len() == 2 || t.len() == 3 => {
            let label = t.get(2).map(String::as_str).unwrap_or("");
            s.add_atomic(&t[1], label).map(|_| ())
        }
        "edge" if t.len() == 5 => {
            let rel = parse_relation(p, line, &t[2]);
            let (Some(src), Some(dst)) = (lookup(p, s, &t[3]), lookup(p, s, &t[4])) else {
                return;
            };
            s.add_paired(&t[1], src, dst, rel).map(|_| ())
        }
        "hyperedge" if t.len() >= 6 => {
            if !t[2].eq_ignore_ascii_case("nand") {
                p.err(line, format!("unknown hyperedge kind `{}`", t[2]));
                return;
            }
            let members: Option<Vec<PropId>> = t[3..].iter().map(|m| lookup(p, s, m)).collect();
            let Some(members) = members else { return };
            s.add_hyper_nand(&t[1], &members).map(|_| ())
        }
        _ => {
            p.err(line, format!("unknown structure statement `{}`", t.join(" ")));
            return;
        }
    };
    match result {
        Ok(()) => {
            p.props.insert(t[1].clone());
        }
        Err(e) => p.err(line, e.to_string()),
    }
}

fn parse_verb(p: &mut Parser, line: usize, tokens: &[String]) -> Option<Verb> {
    let (pos, kv) = split_kv(tokens);
    let head = pos.first().copied().unwrap_or("");
    let known_keys = |p: &mut Parser, allowed: &[&str]| {
        for k in kv.keys() {
            if !allowed.contains(&k.as_str()) {
                p.err(line, format!("unknown option `{k}` for `{head}`"));
            }
        }
    };
    let payer = |p: &mut Parser| -> String {
        match kv.get("payer") {
            Some(t) => {
                p.need_trader(line, t);
                t.clone()
            }
            None => {
                p.err(line, "missing payer=<trader>");
                String::new()
            }
        }
    };
    let num = |p: &mut Parser, key: &str, default: Option<f64>| -> f64 {
        match (kv.get(key), default) {
            (Some(v), _) => parse_f64(p, line, v, key),
            (None, Some(d)) => d,
            (None, None) => {
                p.err(line, format!("missing {key}=<value>"));
                0.0
            }
        }
    };
    let verb = match (head, pos.len()) {
        ("trade", 4) => {
            known_keys(p, &[]);
            p.need_trader(line, pos[1]);
            p.need_security(line, pos[2]);
            Verb::Trade {
                trader: pos[1].into(),
                security: pos[2].into(),
                shares: parse_f64(p, line, pos[3], "share quantity"),
            }
        }
        ("sell-all", 3) => {
            known_keys(p, &[]);
            p.need_trader(line, pos[1]);
            p.need_security(line, pos[2]);
            Verb::SellAll {
                trader: pos[1].into(),
                security: pos[2].into(),
            }
        }
        ("quote", 2) => {
            known_keys(p, &[]);
            p.need_security(line, pos[1]);
            Verb::Quote {
                security: pos[1].into(),
            }
        }
        ("grow", _) => return parse_grow(p, line, &pos, &kv, payer, num),
        ("restake", 5) => {
            known_keys(p, &["cash", "mode"]);
            p.need_trader(line, pos[1]);
            for x in &pos[2..5] {
                p.need_prop(line, x);
            }
            Verb::Restake {
                trader: pos[1].into(),
                a: pos[2].into(),
                r: pos[3].into(),
                b: pos[4].into(),
                cash: num(p, "cash", None),
                mode: parse_mode(p, line, kv.get("mode").map(String::as_str)),
            }
        }
        ("attack", 2) if pos[1] == "ria" => {
            known_keys(p, &["c", "grid", "mode", "frac_to_leave", "a_frac"]);
            let grid = kv.get("grid").and_then(|g| {
                g.parse().ok().or_else(|| {
                    p.err(line, format!("invalid grid `{g}`"));
                    None
                })
            });
            Verb::AttackRia {
                c: num(p, "c", None),
                grid,
                frac_to_leave: num(p, "frac_to_leave", Some(0.5)),
                a_frac: num(p, "a_frac", Some(0.5)),
                mode: parse_mode(p, line, kv.get("mode").map(String::as_str)),
            }
        }
        ("attack", 2) if pos[1] == "extract" => {
            known_keys(p, &["mode", "restake"]);
            let restake = match kv.get("restake").map(String::as_str) {
                None | Some("on") | Some("yes") => true,
                Some("off") | Some("no") => false,
                Some(other) => {
                    p.err(line, format!("invalid restake flag `{other}`"));
                    true
                }
            };
            Verb::AttackExtract {
                mode: parse_mode(p, line, kv.get("mode").map(String::as_str)),
                restake,
            }
        }
        ("resolve", n) if n >= 2 => {
            known_keys(p, &[]);
            // tokens may be `A=T` pairs which split_kv leaves positional
            let outcome = pos[1..].join("&");
            p.need_security(line, &outcome);
            Verb::Resolve { outcome }
        }
        ("snapshot", 1) => {
            known_keys(p, &[]);
            Verb::Snapshot
        }
        ("random-trades", 1) => {
            known_keys(p, &["n", "traders", "max"]);
            let n = match kv.get("n").map(|v| v.parse::<usize>()) {
                Some(Ok(n)) => n,
                _ => {
                    p.err(line, "missing or invalid n=<count>");
                    0
                }
            };
            let traders: Vec<String> = match kv.get("traders") {
                Some(list) => list.split(',').map(str::to_string).collect(),
                None => p.traders.iter().cloned().collect(),
            };
            for t in &traders {
                p.need_trader(line, t);
            }
            if traders.is_empty() {
                p.err(line, "random-trades needs at least one trader");
            }
            Verb::RandomTrades {
                n,
                traders,
                max_shares: num(p, "max", Some(3.0)),
            }
        }
        _ => {
            p.err(line, format!("unknown or malformed verb `{}`", tokens.join(" ")));
            return None;
        }
    };
    Some(verb)
}

fn parse_grow(
    p: &mut Parser,
    line: usize,
    pos: &[&str],
    kv: &BTreeMap<String, String>,
    payer: impl Fn(&mut Parser) -> String,
    num: impl Fn(&mut Parser, &str, Option<f64>) -> f64,
) -> Option<Verb> {
    let kind = pos.get(1).copied().unwrap_or("");
    let verb = match (kind, pos.len()) {
        ("atomic", 3) | ("atomic", 4) => {
            p.new_prop(line, pos[2]);
            Verb::GrowAtomic {
                id: pos[2].into(),
                label: pos.get(3).copied().unwrap_or("").into(),
                payer: payer(p),
            }
        }
        ("edge-neg", 6) => {
            let relation = parse_relation(p, line, pos[3]);
            p.need_prop(line, pos[4]);
            p.need_prop(line, pos[5]);
            p.new_prop(line, pos[2]);
            Verb::GrowEdgeNeg {
                id: pos[2].into(),
                relation,
                source: pos[4].into(),
                target: pos[5].into(),
                k: num(p, "K", None),
                payer: payer(p),
            }
        }
        ("edge-phi", 5) => {
            p.need_prop(line, pos[3]);
            p.need_prop(line, pos[4]);
            p.new_prop(line, pos[2]);
            Verb::GrowEdgePhi {
                id: pos[2].into(),
                source: pos[3].into(),
                target: pos[4].into(),
                payer: payer(p),
            }
        }
        ("leaf-phi", 5) => {
            p.need_prop(line, pos[4]);
            p.new_prop(line, pos[2]);
            p.new_prop(line, pos[3]);
            Verb::GrowLeafPhi {
                leaf: pos[2].into(),
                edge: pos[3].into(),
                anchor: pos[4].into(),
                payer: payer(p),
            }
        }
        _ => {
            p.err(line, format!("malformed grow verb `{}`", pos.join(" ")));
            return None;
        }
    };
    for k in kv.keys() {
        if k != "payer" && k != "K" {
            p.err(line, format!("unknown option `{k}` for `grow`"));
        }
    }
    Some(verb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepResult {
    Trade(TradeReceipt<f64>),
    Quote { security: String, price: f64 },
    Mutation(MutationReceipt<f64>),
    Restake(RestakeEvent<f64>),
    RiaAttack(AttackReport),
    RiaSweep(RiaSweepReport),
    Extraction(ExtractionReport),
    Resolve { outcome: String, payouts: BTreeMap<String, f64> },
    Snapshot(Box<Snapshot<f64>>),
    RandomTrades {
        algorithm: String,
        seed: u64,
        receipts: Vec<TradeReceipt<f64>>,
        rejected: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub line: usize,
    pub result: StepResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub cash: f64,
    pub holdings: BTreeMap<String, f64>,
    pub liquidation_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantSummary {
    pub normalization: f64,
    pub zero_sum: f64,
    pub identity: f64,
    /// Largest maker loss over feasible outcomes (realised loss once resolved).
    pub max_maker_loss: f64,
    pub worst_case_loss: f64,
    pub solvency: bool,
    pub passed: bool,
}

pub const INVARIANT_TOLERANCE: f64 = 1e-9;

impl InvariantSummary {
    pub fn of(m: &MarketState<f64>) -> Self {
        let r = m.residuals();
        let max_loss = if m.is_resolved() {
            m.maker_paid_out() - m.maker_cash_in()
        } else {
            (0..m.outcomes().len())
                .map(|i| m.maker_loss_at(i))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let wcl = m.worst_case_loss();
        let solvency = max_loss <= wcl + INVARIANT_TOLERANCE;
        let passed = solvency
            && r.normalization < INVARIANT_TOLERANCE
            && r.cash_conservation < INVARIANT_TOLERANCE
            && r.identity < INVARIANT_TOLERANCE;
        InvariantSummary {
            normalization: r.normalization,
            zero_sum: r.cash_conservation,
            identity: r.identity,
            max_maker_loss: max_loss,
            worst_case_loss: wcl,
            solvency,
            passed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aborted {
    pub line: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub prng: String,
    pub b: f64,
    pub propositions: Vec<String>,
    pub warnings: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub aborted: Option<Aborted>,
    pub final_prices: BTreeMap<String, Option<f64>>,
    pub final_ledger: BTreeMap<String, LedgerEntry>,
    pub invariants: InvariantSummary,
}

fn security(m: &MarketState<f64>, text: &str) -> Result<Security, String> {
    Security::parse(text, m.structure()).map_err(|e: SecurityError| e.to_string())
}

fn prop(m: &MarketState<f64>, name: &str) -> Result<PropId, String> {
    m.structure().lookup(name).map_err(|e| e.to_string())
}

/// Builds the scenario's market with its declared traders.
pub fn build_market(sc: &Scenario) -> Result<MarketState<f64>, ScenarioError> {
    let mut m = MarketState::new(sc.structure.clone(), sc.b)?;
    for (id, cash) in &sc.traders {
        m.add_trader(id, *cash)?;
    }
    Ok(m)
}

/// Runs the script on a fresh market. Hard errors abort the run; the partial
/// report is still returned with `aborted` set.
pub fn run(sc: &Scenario, seed: Option<u64>) -> Result<(RunReport, MarketState<f64>), ScenarioError> {
    let seed = seed.unwrap_or(sc.seed);
    let mut m = build_market(sc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::new();
    let mut quotes: Vec<String> = Vec::new();
    let mut aborted = None;
    for sl in &sc.script {
        match step(&mut m, &sl.verb, &mut rng, seed, &mut quotes) {
            Ok(result) => steps.push(StepRecord {
                line: sl.line,
                result,
            }),
            Err(error) => {
                aborted = Some(Aborted {
                    line: sl.line,
                    error,
                });
                break;
            }
        }
    }
    let final_prices = quotes
        .iter()
        .map(|q| {
            let p = security(&m, q).ok().and_then(|s| m.price(&s).ok());
            (q.clone(), p)
        })
        .collect();
    let final_ledger = m
        .ledger()
        .iter()
        .map(|(id, acct)| {
            (
                id.clone(),
                LedgerEntry {
                    cash: acct.cash,
                    holdings: acct
                        .holdings
                        .iter()
                        .map(|(s, n)| (s.display(m.structure()).to_string(), *n))
                        .collect(),
                    liquidation_value: m.liquidation_value(id).unwrap_or(f64::NAN),
                },
            )
        })
        .collect();
    let report = RunReport {
        seed,
        prng: PRNG_ALGORITHM.to_string(),
        b: sc.b,
        propositions: m.structure().propositions().iter().map(|p| p.name.clone()).collect(),
        warnings: m.structure().validation_warnings(),
        steps,
        aborted,
        final_prices,
        final_ledger,
        invariants: InvariantSummary::of(&m),
    };
    Ok((report, m))
}

fn step(
    m: &mut MarketState<f64>,
    verb: &Verb,
    rng: &mut ChaCha8Rng,
    seed: u64,
    quotes: &mut Vec<String>,
) -> Result<StepResult, String> {
    let lev = |e: LeverageError| e.to_string();
    let mk = |e: MarketError| e.to_string();
    Ok(match verb {
        Verb::Trade {
            trader,
            security: s,
            shares,
        } => {
            let sec = security(m, s)?;
            StepResult::Trade(m.execute_trade(trader, &sec, *shares).map_err(mk)?)
        }
        Verb::SellAll { trader, security: s } => {
            let sec = security(m, s)?;
            StepResult::Trade(m.sell_all(trader, &sec).map_err(mk)?)
        }
        Verb::Quote { security: s } => {
            let sec = security(m, s)?;
            if !quotes.contains(s) {
                quotes.push(s.clone());
            }
            StepResult::Quote {
                security: s.clone(),
                price: m.price(&sec).map_err(mk)?,
            }
        }
        Verb::GrowAtomic { id, label, payer } => {
            StepResult::Mutation(add_atomic_live(m, id, label, payer).map_err(mk)?)
        }
        Verb::GrowEdgeNeg {
            id,
            relation,
            source,
            target,
            k,
            payer,
        } => {
            let edge = EdgeSpec::Paired {
                source: prop(m, source)?,
                target: prop(m, target)?,
                relation: *relation,
            };
            StepResult::Mutation(add_edge_negative_init(m, id, edge, *k, payer).map_err(mk)?)
        }
        Verb::GrowEdgePhi {
            id,
            source,
            target,
            payer,
        } => {
            let (s, t) = (prop(m, source)?, prop(m, target)?);
            StepResult::Mutation(add_edge_golden_ratio(m, id, s, t, payer).map_err(mk)?)
        }
        Verb::GrowLeafPhi {
            leaf,
            edge,
            anchor,
            payer,
        } => {
            let a = prop(m, anchor)?;
            StepResult::Mutation(grow_leaf_golden_ratio(m, leaf, edge, a, payer).map_err(mk)?)
        }
        Verb::Restake {
            trader,
            a,
            r,
            b,
            cash,
            mode,
        } => {
            let (a, r, b) = (prop(m, a)?, prop(m, r)?, prop(m, b)?);
            StepResult::Restake(restake(m, trader, a, r, b, *cash, *mode).map_err(lev)?)
        }
        Verb::AttackRia {
            c,
            grid,
            frac_to_leave,
            a_frac,
            mode,
        } => match grid {
            Some(n) => StepResult::RiaSweep(ria_sweep(*c, 1.0, *n, *mode, seed).map_err(lev)?),
            None => StepResult::RiaAttack(
                ria_attack(
                    AttackConfig {
                        c: *c,
                        frac_to_leave: *frac_to_leave,
                        a_frac: *a_frac,
                        seed,
                    },
                    1.0,
                    *mode,
                )
                .map_err(lev)?,
            ),
        },
        Verb::AttackExtract { mode, restake } => StepResult::Extraction(
            capital_extraction_attack(ExtractionParams {
                mode: *mode,
                restake: *restake,
                seed,
                ..Default::default()
            })
            .map_err(lev)?,
        ),
        Verb::Resolve { outcome } => {
            let sec = security(m, outcome)?;
            if sec.literals().len() != m.structure().len() {
                return Err("resolve needs a value for every proposition".into());
            }
            let values: Vec<bool> = sec.literals().iter().map(|l| l.value).collect();
            let a = Assignment::from_values(&values);
            let payouts = m.resolve(&a).map_err(mk)?;
            StepResult::Resolve {
                outcome: m.structure().describe(&a),
                payouts,
            }
        }
        Verb::Snapshot => StepResult::Snapshot(Box::new(m.snapshot())),
        Verb::RandomTrades {
            n,
            traders,
            max_shares,
        } => {
            let (receipts, rejected) = random_trades(m, rng, *n, traders, *max_shares)?;
            StepResult::RandomTrades {
                algorithm: PRNG_ALGORITHM.to_string(),
                seed,
                receipts,
                rejected,
            }
        }
    })
}

/// Single-literal trades: mostly buys, sometimes partial sells of an
/// existing holding. Unaffordable draws are counted and skipped.
pub fn random_trades(
    m: &mut MarketState<f64>,
    rng: &mut ChaCha8Rng,
    n: usize,
    traders: &[String],
    max_shares: f64,
) -> Result<(Vec<TradeReceipt<f64>>, usize), String> {
    let mut receipts = Vec::new();
    let mut rejected = 0;
    for _ in 0..n {
        let t = &traders[rng.gen_range(0..traders.len())];
        let held: Vec<(Security, f64)> = m
            .account(t)
            .map_err(|e| e.to_string())?
            .holdings
            .iter()
            .map(|(s, h)| (s.clone(), *h))
            .collect();
        let (sec, shares) = if !held.is_empty() && rng.gen_bool(0.3) {
            let (s, h) = &held[rng.gen_range(0..held.len())];
            (s.clone(), -h * rng.gen_range(0.1..=1.0))
        } else {
            let p = PropId(rng.gen_range(0..m.structure().len()) as u32);
            (
                Security::literal(p, rng.gen_bool(0.5)),
                rng.gen_range(0.05..=max_shares.max(0.05)),
            )
        };
        match m.execute_trade(t, &sec, shares) {
            Ok(r) => receipts.push(r),
            Err(MarketError::InsufficientCash { .. } | MarketError::InsufficientHoldings { .. }) => {
                rejected += 1
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok((receipts, rejected))
}

/// Trade script for segmentation comparisons: the scenario's trade verbs in
/// order, with `random-trades` expanded against the exact market.
pub fn trade_script(sc: &Scenario, seed: Option<u64>) -> Result<Vec<ScriptTrade>, ScenarioError> {
    let seed = seed.unwrap_or(sc.seed);
    let mut m = build_market(sc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for sl in &sc.script {
        let rt = |message: String| ScenarioError::Runtime {
            line: sl.line,
            message,
        };
        match &sl.verb {
            Verb::Trade {
                trader,
                security: s,
                shares,
            } => {
                let sec = security(&m, s).map_err(rt)?;
                m.execute_trade(trader, &sec, *shares)
                    .map_err(|e| rt(e.to_string()))?;
                out.push(ScriptTrade {
                    trader: trader.clone(),
                    security: sec,
                    shares: *shares,
                });
            }
            Verb::SellAll { trader, security: s } => {
                let sec = security(&m, s).map_err(rt)?;
                let r = m.sell_all(trader, &sec).map_err(|e| rt(e.to_string()))?;
                out.push(ScriptTrade {
                    trader: trader.clone(),
                    security: sec,
                    shares: r.shares,
                });
            }
            Verb::RandomTrades {
                n,
                traders,
                max_shares,
            } => {
                let (receipts, _) =
                    random_trades(&mut m, &mut rng, *n, traders, *max_shares).map_err(rt)?;
                out.extend(receipts.into_iter().map(|r| ScriptTrade {
                    trader: r.trader,
                    security: r.security,
                    shares: r.shares,
                }));
            }
            Verb::Quote { .. } | Verb::Snapshot => {}
            other => {
                return Err(rt(format!(
                    "verb `{}` is not supported in segmentation comparisons",
                    serde_json::to_value(other)
                        .ok()
                        .and_then(|v| v["verb"].as_str().map(str::to_string))
                        .unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRun {
    pub seed: u64,
    pub prng: String,
    pub partition: Partition,
    pub part_outcomes: Vec<usize>,
    pub exact_outcomes: usize,
    pub report: DivergenceReport,
}

/// Runs the scenario's trades on the exact market and on a segmented one.
/// `max_part` overrides the scenario's partition block.
pub fn compare_segmentation(
    sc: &Scenario,
    max_part: Option<usize>,
    seed: Option<u64>,
) -> Result<SegmentationRun, ScenarioError> {
    let script = trade_script(sc, seed)?;
    let partition = match (max_part, sc.partition.as_ref()) {
        (Some(m), _) | (None, Some(&PartitionSpec::MaxSize(m))) => partition_tree(&sc.structure, m)?,
        (None, Some(PartitionSpec::Manual(sets))) => {
            let ids = sets
                .iter()
                .map(|set| {
                    set.iter()
                        .map(|n| sc.structure.lookup(n).map_err(MarketError::from))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            Partition::from_parts(&sc.structure, &ids)?
        }
        (None, None) => {
            return Err(ScenarioError::Runtime {
                line: 0,
                message: "no part size given and no [partition] block".into(),
            })
        }
    };
    let mut seg = SegmentedMarket::new(sc.structure.clone(), partition.clone(), sc.b)?;
    for (id, cash) in &sc.traders {
        seg.add_trader(id, *cash)?;
    }
    let mut exact = build_market(sc)?;
    let report = compare_exact(&mut seg, &mut exact, &script)?;
    Ok(SegmentationRun {
        seed: seed.unwrap_or(sc.seed),
        prng: PRNG_ALGORITHM.to_string(),
        part_outcomes: (0..partition.len())
            .map(|i| seg.part_market(i).outcomes().len())
            .collect(),
        partition,
        exact_outcomes: exact.outcomes().len(),
        report,
    })
}
