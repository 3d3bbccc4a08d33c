//! Abstract vulnerability patterns and the node scoring mechanism.
//!
//! A pattern table splits mnemonics into three roles: state loading (SL),
//! state operation (SO) and state storage (SS). A chain of CFG nodes matches
//! when an SL, an SO and an SS instruction occur in that order along it.
//! Every node on a matching chain is scored `xi`; every other node `nu`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cfg::Cfg;
use crate::disasm::Instruction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VulnClass {
    Reentrancy,
    Timestamp,
    #[serde(rename = "txorigin")]
    TxOrigin,
    Delegatecall,
}

impl VulnClass {
    pub const ALL: [VulnClass; 4] = [
        VulnClass::Reentrancy,
        VulnClass::Timestamp,
        VulnClass::TxOrigin,
        VulnClass::Delegatecall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VulnClass::Reentrancy => "reentrancy",
            VulnClass::Timestamp => "timestamp",
            VulnClass::TxOrigin => "txorigin",
            VulnClass::Delegatecall => "delegatecall",
        }
    }

    /// Column heading used in metric tables.
    pub fn display_name(self) -> &'static str {
        match self {
            VulnClass::Reentrancy => "Reentrancy",
            VulnClass::Timestamp => "Timestamp",
            VulnClass::TxOrigin => "TX.Origin",
            VulnClass::Delegatecall => "Delegatecall",
        }
    }
}

impl fmt::Display for VulnClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VulnClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "reentrancy" => Ok(VulnClass::Reentrancy),
            "timestamp" => Ok(VulnClass::Timestamp),
            "txorigin" | "origin" => Ok(VulnClass::TxOrigin),
            "delegatecall" => Ok(VulnClass::Delegatecall),
            _ => Err(Error::Config(format!("unknown vulnerability class `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PatternTag {
    Sl,
    So,
    Ss,
}

/// Subset of {SL, SO, SS}.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TagSet(u8);

impl TagSet {
    pub const EMPTY: TagSet = TagSet(0);

    fn bit(tag: PatternTag) -> u8 {
        match tag {
            PatternTag::Sl => 1,
            PatternTag::So => 2,
            PatternTag::Ss => 4,
        }
    }

    pub fn insert(&mut self, tag: PatternTag) {
        self.0 |= Self::bit(tag);
    }

    pub fn contains(self, tag: PatternTag) -> bool {
        self.0 & Self::bit(tag) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn tags(self) -> Vec<PatternTag> {
        [PatternTag::Sl, PatternTag::So, PatternTag::Ss]
            .into_iter()
            .filter(|&t| self.contains(t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternTable {
    pub vuln_class: VulnClass,
    pub sl: BTreeSet<String>,
    pub so: BTreeSet<String>,
    pub ss: BTreeSet<String>,
}

const DEFAULT_SO: [&str; 12] = [
    "ADD", "SUB", "MUL", "DIV", "LT", "GT", "EQ", "ISZERO", "AND", "OR", "XOR", "NOT",
];
const DEFAULT_SS: [&str; 3] = ["SSTORE", "MSTORE", "MSTORE8"];

fn set_of(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl PatternTable {
    pub fn new(
        vuln_class: VulnClass,
        sl: BTreeSet<String>,
        so: BTreeSet<String>,
        ss: BTreeSet<String>,
    ) -> Result<Self> {
        let table = Self {
            vuln_class,
            sl,
            so,
            ss,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn default_for(vuln_class: VulnClass) -> Self {
        let sl: &[&str] = match vuln_class {
            VulnClass::Reentrancy => &["CALLVALUE", "CALL"],
            VulnClass::Timestamp => &["TIMESTAMP"],
            VulnClass::TxOrigin => &["ORIGIN"],
            VulnClass::Delegatecall => &["DELEGATECALL"],
        };
        Self {
            vuln_class,
            sl: set_of(sl),
            so: set_of(&DEFAULT_SO),
            ss: set_of(&DEFAULT_SS),
        }
    }

    pub fn defaults() -> Vec<PatternTable> {
        VulnClass::ALL.iter().map(|&c| Self::default_for(c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let class = self.vuln_class;
        for (name, set) in [("sl", &self.sl), ("so", &self.so), ("ss", &self.ss)] {
            if set.is_empty() {
                return Err(Error::Config(format!("{class}: pattern set `{name}` is empty")));
            }
        }
        let overlaps = self
            .sl
            .intersection(&self.so)
            .chain(self.sl.intersection(&self.ss))
            .chain(self.so.intersection(&self.ss))
            .next();
        if let Some(m) = overlaps {
            return Err(Error::Config(format!(
                "{class}: mnemonic `{m}` appears in more than one pattern set"
            )));
        }
        Ok(())
    }

    pub fn classify_mnemonic(&self, mnemonic: &str) -> TagSet {
        let mut tags = TagSet::EMPTY;
        if self.sl.contains(mnemonic) {
            tags.insert(PatternTag::Sl);
        }
        if self.so.contains(mnemonic) {
            tags.insert(PatternTag::So);
        }
        if self.ss.contains(mnemonic) {
            tags.insert(PatternTag::Ss);
        }
        tags
    }

    /// Every mnemonic mentioned by the table.
    pub fn mnemonics(&self) -> impl Iterator<Item = &String> {
        self.sl.iter().chain(&self.so).chain(&self.ss)
    }
}

pub fn classify_instruction(instr: &Instruction, table: &PatternTable) -> TagSet {
    table.classify_mnemonic(instr.mnemonic())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct TableFile {
    sl: Vec<String>,
    so: Vec<String>,
    ss: Vec<String>,
}

/// Loads tables from TOML, one section per class:
///
/// ```toml
/// [reentrancy]
/// sl = ["CALLVALUE", "CALL"]
/// so = ["ADD", "SUB"]
/// ss = ["SSTORE"]
/// ```
///
/// Classes without a section keep their default table.
pub fn parse_pattern_tables(text: &str) -> Result<Vec<PatternTable>> {
    let raw: BTreeMap<String, TableFile> =
        toml::from_str(text).map_err(|e| Error::Config(format!("pattern tables: {e}")))?;
    let mut tables: BTreeMap<VulnClass, PatternTable> = VulnClass::ALL
        .iter()
        .map(|&c| (c, PatternTable::default_for(c)))
        .collect();
    for (key, file) in raw {
        let class: VulnClass = key.parse()?;
        let to_set = |v: Vec<String>| v.into_iter().map(|m| m.to_ascii_uppercase()).collect();
        let table = PatternTable::new(class, to_set(file.sl), to_set(file.so), to_set(file.ss))?;
        tables.insert(class, table);
    }
    Ok(tables.into_values().collect())
}

pub fn load_pattern_tables(path: &Path) -> Result<Vec<PatternTable>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pattern_tables(&text)
}

pub fn pattern_tables_to_toml(tables: &[PatternTable]) -> String {
    let map: BTreeMap<&str, TableFile> = tables
        .iter()
        .map(|t| {
            (
                t.vuln_class.as_str(),
                TableFile {
                    sl: t.sl.iter().cloned().collect(),
                    so: t.so.iter().cloned().collect(),
                    ss: t.ss.iter().cloned().collect(),
                },
            )
        })
        .collect();
    toml::to_string(&map).expect("tables serialize")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeChain {
    pub node_indices: Vec<usize>,
}

/// Simple DFS descents from `root` of up to `l` edges. A chain ends when it
/// reaches `l + 1` nodes or every successor is already on it.
pub fn enumerate_chains(cfg: &Cfg, root: usize, l: usize) -> Vec<NodeChain> {
    let mut out = Vec::new();
    let mut path = vec![root];
    descend(cfg, l + 1, &mut path, &mut |p| {
        out.push(NodeChain {
            node_indices: p.to_vec(),
        })
    });
    out
}

fn descend(cfg: &Cfg, max_len: usize, path: &mut Vec<usize>, emit: &mut impl FnMut(&[usize])) {
    if path.len() >= max_len {
        emit(path);
        return;
    }
    let last = *path.last().expect("non-empty path");
    let mut extended = false;
    for &next in cfg.successors(last) {
        if path.contains(&next) {
            continue;
        }
        extended = true;
        path.push(next);
        descend(cfg, max_len, path, emit);
        path.pop();
    }
    if !extended {
        emit(path);
    }
}

/// SL, then SO, then SS, in chain order and instruction order within a node.
pub fn match_chain(chain: &NodeChain, cfg: &Cfg, table: &PatternTable) -> bool {
    let tags = chain
        .node_indices
        .iter()
        .flat_map(|&i| cfg.blocks[i].instructions.iter())
        .map(|instr| classify_instruction(instr, table));
    match_tags(tags)
}

fn match_tags(tags: impl Iterator<Item = TagSet>) -> bool {
    let wanted = [PatternTag::Sl, PatternTag::So, PatternTag::Ss];
    let mut next = 0;
    for t in tags {
        if t.contains(wanted[next]) {
            next += 1;
            if next == wanted.len() {
                return true;
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub xi: f64,
    pub nu: f64,
    pub l: usize,
    pub feature_dim: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            xi: 1.0,
            nu: 0.0,
            l: 2,
            feature_dim: 64,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0 && self.nu < 0.5 && self.xi > 0.5 && self.xi <= 1.0) {
            return Err(Error::Config(format!(
                "scores need 0 <= nu < 0.5 < xi <= 1 (got xi={}, nu={})",
                self.xi, self.nu
            )));
        }
        if !(1..=5).contains(&self.l) {
            return Err(Error::Config(format!("chain depth l must be 1..=5 (got {})", self.l)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeScores {
    pub scores: Vec<f64>,
    /// n x D, row i is `scores[i]` repeated.
    pub features: Array2<f64>,
    /// Which nodes landed on a matched chain.
    pub matched: Vec<bool>,
    pub matched_chains: Vec<NodeChain>,
}

/// Nodes that lie on at least one chain matching `table`.
pub fn matched_nodes(cfg: &Cfg, table: &PatternTable, l: usize) -> (Vec<bool>, Vec<NodeChain>) {
    let n = cfg.node_count();
    let mut matched = vec![false; n];
    let mut chains = Vec::new();
    for root in 0..n {
        for chain in enumerate_chains(cfg, root, l) {
            if match_chain(&chain, cfg, table) {
                for &i in &chain.node_indices {
                    matched[i] = true;
                }
                chains.push(chain);
            }
        }
    }
    (matched, chains)
}

pub fn score_nodes(cfg: &Cfg, table: &PatternTable, config: &ScoreConfig) -> NodeScores {
    let (matched, matched_chains) = matched_nodes(cfg, table, config.l);
    scores_from_mask(matched, matched_chains, config)
}

pub(crate) fn scores_from_mask(
    matched: Vec<bool>,
    matched_chains: Vec<NodeChain>,
    config: &ScoreConfig,
) -> NodeScores {
    let scores: Vec<f64> = matched
        .iter()
        .map(|&m| if m { config.xi } else { config.nu })
        .collect();
    let features = Array2::from_shape_fn((scores.len(), config.feature_dim), |(i, _)| scores[i]);
    NodeScores {
        scores,
        features,
        matched,
        matched_chains,
    }
}

/// Classes for which at least one chain of depth `l` matches.
pub fn triage_contract(cfg: &Cfg, tables: &[PatternTable], l: usize) -> BTreeSet<VulnClass> {
    tables
        .iter()
        .filter(|table| {
            (0..cfg.node_count()).any(|root| {
                enumerate_chains(cfg, root, l)
                    .iter()
                    .any(|c| match_chain(c, cfg, table))
            })
        })
        .map(|t| t.vuln_class)
        .collect()
}
