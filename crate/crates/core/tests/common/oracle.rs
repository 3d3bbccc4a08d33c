//! Independent reference implementations used to cross-check the library.

use std::collections::BTreeSet;

use evmhunt_core::avp::PatternTable;
use evmhunt_core::cfg::{BasicBlock, Cfg, TerminatorKind};
use evmhunt_core::disasm::{opcode_by_mnemonic, Instruction};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Cancun mnemonic for a byte, written out from the published opcode list.
pub fn reference_mnemonic(b: u8) -> String {
    let fixed: &[(u8, &str)] = &[
        (0x00, "STOP"),
        (0x01, "ADD"),
        (0x02, "MUL"),
        (0x03, "SUB"),
        (0x04, "DIV"),
        (0x05, "SDIV"),
        (0x06, "MOD"),
        (0x07, "SMOD"),
        (0x08, "ADDMOD"),
        (0x09, "MULMOD"),
        (0x0a, "EXP"),
        (0x0b, "SIGNEXTEND"),
        (0x10, "LT"),
        (0x11, "GT"),
        (0x12, "SLT"),
        (0x13, "SGT"),
        (0x14, "EQ"),
        (0x15, "ISZERO"),
        (0x16, "AND"),
        (0x17, "OR"),
        (0x18, "XOR"),
        (0x19, "NOT"),
        (0x1a, "BYTE"),
        (0x1b, "SHL"),
        (0x1c, "SHR"),
        (0x1d, "SAR"),
        (0x20, "KECCAK256"),
        (0x30, "ADDRESS"),
        (0x31, "BALANCE"),
        (0x32, "ORIGIN"),
        (0x33, "CALLER"),
        (0x34, "CALLVALUE"),
        (0x35, "CALLDATALOAD"),
        (0x36, "CALLDATASIZE"),
        (0x37, "CALLDATACOPY"),
        (0x38, "CODESIZE"),
        (0x39, "CODECOPY"),
        (0x3a, "GASPRICE"),
        (0x3b, "EXTCODESIZE"),
        (0x3c, "EXTCODECOPY"),
        (0x3d, "RETURNDATASIZE"),
        (0x3e, "RETURNDATACOPY"),
        (0x3f, "EXTCODEHASH"),
        (0x40, "BLOCKHASH"),
        (0x41, "COINBASE"),
        (0x42, "TIMESTAMP"),
        (0x43, "NUMBER"),
        (0x44, "PREVRANDAO"),
        (0x45, "GASLIMIT"),
        (0x46, "CHAINID"),
        (0x47, "SELFBALANCE"),
        (0x48, "BASEFEE"),
        (0x49, "BLOBHASH"),
        (0x4a, "BLOBBASEFEE"),
        (0x50, "POP"),
        (0x51, "MLOAD"),
        (0x52, "MSTORE"),
        (0x53, "MSTORE8"),
        (0x54, "SLOAD"),
        (0x55, "SSTORE"),
        (0x56, "JUMP"),
        (0x57, "JUMPI"),
        (0x58, "PC"),
        (0x59, "MSIZE"),
        (0x5a, "GAS"),
        (0x5b, "JUMPDEST"),
        (0x5c, "TLOAD"),
        (0x5d, "TSTORE"),
        (0x5e, "MCOPY"),
        (0x5f, "PUSH0"),
        (0xf0, "CREATE"),
        (0xf1, "CALL"),
        (0xf2, "CALLCODE"),
        (0xf3, "RETURN"),
        (0xf4, "DELEGATECALL"),
        (0xf5, "CREATE2"),
        (0xfa, "STATICCALL"),
        (0xfd, "REVERT"),
        (0xfe, "INVALID"),
        (0xff, "SELFDESTRUCT"),
    ];
    if let Some((_, m)) = fixed.iter().find(|(v, _)| *v == b) {
        return m.to_string();
    }
    match b {
        0x60..=0x7f => format!("PUSH{}", b - 0x5f),
        0x80..=0x8f => format!("DUP{}", b - 0x7f),
        0x90..=0x9f => format!("SWAP{}", b - 0x8f),
        0xa0..=0xa4 => format!("LOG{}", b - 0xa0),
        _ => "INVALID".to_string(),
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct RefInstr {
    pub offset: usize,
    pub mnemonic: String,
    pub immediate: Vec<u8>,
    pub truncated: bool,
}

pub fn reference_disassemble(code: &[u8]) -> Vec<RefInstr> {
    let mut out = Vec::new();
    let mut pc = 0;
    while pc < code.len() {
        let b = code[pc];
        let width = if (0x60..=0x7f).contains(&b) { (b - 0x5f) as usize } else { 0 };
        let mut immediate: Vec<u8> = code.iter().skip(pc + 1).take(width).copied().collect();
        let truncated = immediate.len() < width;
        while immediate.len() < width {
            immediate.push(0);
        }
        out.push(RefInstr {
            offset: pc,
            mnemonic: reference_mnemonic(b),
            immediate,
            truncated,
        });
        pc += 1 + width;
    }
    out
}

pub fn as_reference(seq: &[Instruction]) -> Vec<RefInstr> {
    seq.iter()
        .map(|i| RefInstr {
            offset: i.offset,
            mnemonic: i.mnemonic().to_string(),
            immediate: i.immediate.clone(),
            truncated: i.truncated,
        })
        .collect()
}

/// Bytecode built from jump-heavy fragments so that many jumps resolve.
pub fn random_program(rng: &mut ChaCha8Rng, max_fragments: usize) -> Vec<u8> {
    let fragments = rng.random_range(1..=max_fragments);
    let mut code = Vec::new();
    for _ in 0..fragments {
        match rng.random_range(0..10) {
            0 | 1 => code.push(0x5b),
            2 | 3 => {
                // PUSH1 <small target> JUMP/JUMPI
                code.push(0x60);
                code.push(rng.random_range(0..64));
                code.push(if rng.random_bool(0.5) { 0x56 } else { 0x57 });
            }
            4 => {
                code.push(0x61);
                code.push(0);
                code.push(rng.random_range(0..64));
                code.push(0x80 + rng.random_range(0..2));
                code.push(0x56);
            }
            5 => code.push([0x00, 0xf3, 0xfd, 0xfe][rng.random_range(0..4)]),
            6 => code.push([0x50, 0x90, 0x80, 0x01, 0x35][rng.random_range(0..5)]),
            _ => code.push(rng.random()),
        }
    }
    code
}

pub fn block(index: usize, mnemonics: &[&str]) -> BasicBlock {
    let instructions = mnemonics
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let op = opcode_by_mnemonic(m).expect("known mnemonic");
            Instruction {
                offset: index * 100 + k,
                op,
                immediate: vec![0; op.immediate_len as usize],
                truncated: false,
            }
        })
        .collect();
    BasicBlock {
        index,
        start_offset: index * 100,
        terminator_kind: TerminatorKind::Fallthrough,
        instructions,
    }
}

/// A graph description independent of [`Cfg`]: per-node mnemonics and edges.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub nodes: Vec<Vec<&'static str>>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl RandomGraph {
    pub fn to_cfg(&self) -> Cfg {
        let blocks = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, m)| block(i, m))
            .collect();
        Cfg::from_parts(blocks, self.edges.iter().copied()).expect("valid edges")
    }

    /// Node `i` moves to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> RandomGraph {
        let mut nodes = vec![Vec::new(); self.nodes.len()];
        for (i, m) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = m.clone();
        }
        RandomGraph {
            nodes,
            edges: self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
        }
    }
}

pub const GRAPH_POOL: [&str; 12] = [
    "CALLVALUE", "CALL", "ORIGIN", "TIMESTAMP", "SUB", "ADD", "EQ", "SSTORE", "MSTORE", "POP", "DUP1", "JUMPDEST",
];

pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize, edge_prob: f64) -> RandomGraph {
    let n = rng.random_range(1..=max_nodes);
    let nodes = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=4);
            (0..len).map(|_| GRAPH_POOL[rng.random_range(0..GRAPH_POOL.len())]).collect()
        })
        .collect();
    let mut edges = BTreeSet::new();
    for a in 0..n {
        for b in 0..n {
            if rng.random_bool(edge_prob) {
                edges.insert((a, b));
            }
        }
    }
    RandomGraph { nodes, edges }
}

/// SL, SO, SS at positions `p < q < r` of the concatenated mnemonics.
fn ordered_triple(mnemonics: &[&str], table: &PatternTable) -> bool {
    let n = mnemonics.len();
    for p in 0..n {
        if !table.sl.contains(mnemonics[p]) {
            continue;
        }
        for q in p + 1..n {
            if !table.so.contains(mnemonics[q]) {
                continue;
            }
            if mnemonics[q + 1..].iter().any(|m| table.ss.contains(*m)) {
                return true;
            }
        }
    }
    false
}

/// Marks every node on some simple edge-connected sequence of at most
/// `l + 1` nodes whose instructions contain SL, SO, SS in order.
pub fn oracle_matched(g: &RandomGraph, table: &PatternTable, l: usize) -> Vec<bool> {
    let n = g.nodes.len();
    let mut matched = vec![false; n];
    for len in 1..=l + 1 {
        let total = n.pow(len as u32);
        for code in 0..total {
            let mut seq = Vec::with_capacity(len);
            let mut c = code;
            for _ in 0..len {
                seq.push(c % n);
                c /= n;
            }
            let distinct: BTreeSet<_> = seq.iter().collect();
            if distinct.len() != len || seq.windows(2).any(|w| !g.edges.contains(&(w[0], w[1]))) {
                continue;
            }
            let concat: Vec<&str> = seq.iter().flat_map(|&i| g.nodes[i].iter().copied()).collect();
            if ordered_triple(&concat, table) {
                for &i in &seq {
                    matched[i] = true;
                }
            }
        }
    }
    matched
}
