//! Synthetic labeled contracts with a known vulnerability pattern.
//!
//! Every contract is a run of basic blocks laid out in byte order. Blocks
//! after the first open with `JUMPDEST`, and control only moves forward
//! (fallthrough or `PUSH2 target; JUMP[I]`), so every graph is acyclic and
//! every jump resolves.
//!
//! Positives carry three consecutive stage blocks (state load, operation,
//! store) connected by control flow. Negatives drop one stage, reverse the
//! stage order, or carry no stage blocks at all. Filler blocks use only
//! opcodes outside every default pattern table.

use ndarray::Array1;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::avp::{PatternTable, VulnClass};
use crate::disasm::{opcode_by_mnemonic, op, ContractBytecode};

use super::dataset::SampleRecord;

/// Opcodes that never appear in any default pattern table.
pub const NEUTRAL_OPS: [&str; 22] = [
    "PUSH1",
    "DUP1",
    "DUP2",
    "SWAP1",
    "POP",
    "MLOAD",
    "SLOAD",
    "CALLER",
    "ADDRESS",
    "GAS",
    "KECCAK256",
    "MOD",
    "EXP",
    "CALLDATASIZE",
    "CALLDATALOAD",
    "NUMBER",
    "CHAINID",
    "SHL",
    "SHR",
    "BALANCE",
    "MSIZE",
    "CODESIZE",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    pub vuln_class: VulnClass,
    /// Pattern-free blocks added to every contract.
    pub noise_blocks: usize,
    pub seed: u64,
    pub teacher_dim: usize,
    /// Per-coordinate standard deviation around the label's cluster centre.
    pub teacher_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pos: 400,
            n_neg: 400,
            vuln_class: VulnClass::Reentrancy,
            noise_blocks: 8,
            seed: 42,
            teacher_dim: 32,
            teacher_noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Load,
    Operate,
    Store,
}

#[derive(Debug, Clone, Copy)]
enum Term {
    Fall,
    Jump(usize),
    Jumpi(usize),
    Stop,
}

struct Block {
    body: Vec<u8>,
    term: Term,
}

fn opcode(name: &str) -> u8 {
    opcode_by_mnemonic(name)
        .unwrap_or_else(|| panic!("unknown mnemonic {name}"))
        .byte_value
}

fn push_neutral(rng: &mut ChaCha8Rng, body: &mut Vec<u8>, count: usize) {
    for _ in 0..count {
        let name = *NEUTRAL_OPS.choose(rng).expect("non-empty");
        body.push(opcode(name));
        if name == "PUSH1" {
            body.push(rng.random());
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, set: &'a std::collections::BTreeSet<String>) -> &'a str {
    let items: Vec<&String> = set.iter().collect();
    items.choose(rng).expect("non-empty pattern set")
}

fn stage_body(rng: &mut ChaCha8Rng, stage: Stage, table: &PatternTable) -> Vec<u8> {
    let mut body = Vec::new();
    match stage {
        Stage::Load => {
            let n = rng.random_range(0..=2);
            push_neutral(rng, &mut body, n);
            body.push(opcode(pick(rng, &table.sl)));
            let n = rng.random_range(0..=2);
            push_neutral(rng, &mut body, n);
        }
        Stage::Operate => {
            let n = rng.random_range(0..=1);
            push_neutral(rng, &mut body, n);
            for _ in 0..rng.random_range(1..=3) {
                body.push(opcode(pick(rng, &table.so)));
            }
            let n = rng.random_range(0..=1);
            push_neutral(rng, &mut body, n);
        }
        Stage::Store => {
            let n = rng.random_range(0..=2);
            push_neutral(rng, &mut body, n);
            body.push(opcode(pick(rng, &table.ss)));
            let n = rng.random_range(0..=1);
            push_neutral(rng, &mut body, n);
        }
    }
    body
}

fn forward_target(rng: &mut ChaCha8Rng, from: usize, lo: usize, last: usize) -> Option<usize> {
    let lo = lo.max(from + 1);
    let hi = (from + 4).min(last);
    (lo <= hi).then(|| rng.random_range(lo..=hi))
}

/// `stages` are laid out consecutively at a random position among the filler.
fn build_contract(rng: &mut ChaCha8Rng, stages: &[Stage], noise_blocks: usize, table: &PatternTable) -> Vec<u8> {
    let at = rng.random_range(0..=noise_blocks);
    let mut bodies: Vec<(Vec<u8>, bool)> = Vec::new();
    for i in 0..noise_blocks + stages.len() {
        if i >= at && i < at + stages.len() {
            let stage = stages[i - at];
            // Stage blocks must reach the next stage block.
            let linked = i + 1 < at + stages.len();
            bodies.push((stage_body(rng, stage, table), linked));
        } else {
            let mut body = Vec::new();
            let n = rng.random_range(2..=6);
            push_neutral(rng, &mut body, n);
            bodies.push((body, false));
        }
    }
    let last = bodies.len() - 1;
    let blocks: Vec<Block> = bodies
        .into_iter()
        .enumerate()
        .map(|(i, (body, linked))| {
            let term = if i == last {
                Term::Stop
            } else if linked {
                match rng.random_range(0..4) {
                    0 => Term::Jump(i + 1),
                    1 => forward_target(rng, i, i + 2, last).map_or(Term::Fall, Term::Jumpi),
                    _ => Term::Fall,
                }
            } else {
                match rng.random_range(0..10) {
                    0..=3 => Term::Fall,
                    4..=6 => forward_target(rng, i, i + 1, last).map_or(Term::Fall, Term::Jump),
                    _ => forward_target(rng, i, i + 1, last).map_or(Term::Fall, Term::Jumpi),
                }
            };
            Block { body, term }
        })
        .collect();
    assemble(&blocks)
}

fn term_len(term: Term) -> usize {
    match term {
        Term::Fall => 0,
        Term::Jump(_) => 4,
        Term::Jumpi(_) => 5,
        Term::Stop => 1,
    }
}

fn assemble(blocks: &[Block]) -> Vec<u8> {
    let mut starts = Vec::with_capacity(blocks.len());
    let mut offset = 0;
    for (i, b) in blocks.iter().enumerate() {
        starts.push(offset);
        offset += usize::from(i > 0) + b.body.len() + term_len(b.term);
    }
    let mut code = Vec::with_capacity(offset);
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            code.push(op::JUMPDEST);
        }
        code.extend_from_slice(&b.body);
        let push_target = |code: &mut Vec<u8>, t: usize| {
            let at = starts[t] as u16;
            code.push(op::PUSH2);
            code.extend_from_slice(&at.to_be_bytes());
        };
        match b.term {
            Term::Fall => {}
            Term::Jump(t) => {
                push_target(&mut code, t);
                code.push(op::JUMP);
            }
            Term::Jumpi(t) => {
                code.push(opcode("CALLDATASIZE"));
                push_target(&mut code, t);
                code.push(op::JUMPI);
            }
            Term::Stop => code.push(op::STOP),
        }
    }
    code
}

fn negative_stages(rng: &mut ChaCha8Rng) -> Vec<Stage> {
    use Stage::*;
    match rng.random_range(0..5) {
        0 => vec![],
        1 => vec![Store, Operate, Load],
        2 => vec![Operate, Store],
        3 => vec![Load, Store],
        _ => vec![Load, Operate],
    }
}

/// Deterministic under `config.seed`.
pub fn synth_dataset(config: &SynthConfig) -> Vec<SampleRecord> {
    let table = PatternTable::default_for(config.vuln_class);
    let mut code_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut teacher_rng = ChaCha8Rng::seed_from_u64(config.seed);
    teacher_rng.set_stream(1);
    let centre = |rng: &mut ChaCha8Rng| -> Array1<f64> {
        Array1::from_shape_simple_fn(config.teacher_dim, || StandardNormal.sample(rng))
    };
    let centres = [centre(&mut teacher_rng), centre(&mut teacher_rng)];

    let class = config.vuln_class.as_str();
    let mut out = Vec::with_capacity(config.n_pos + config.n_neg);
    for (label, count) in [(true, config.n_pos), (false, config.n_neg)] {
        for i in 0..count {
            let stages = if label {
                vec![Stage::Load, Stage::Operate, Stage::Store]
            } else {
                negative_stages(&mut code_rng)
            };
            let raw = build_contract(&mut code_rng, &stages, config.noise_blocks, &table);
            let noise: Array1<f64> = Array1::from_shape_simple_fn(config.teacher_dim, || {
                let z: f64 = StandardNormal.sample(&mut teacher_rng);
                z * config.teacher_noise
            });
            let id = format!("{class}-{}-{i:04}", if label { "pos" } else { "neg" });
            out.push(SampleRecord {
                bytecode: ContractBytecode::new(id.clone(), raw),
                id,
                label,
                vuln_class: config.vuln_class,
                teacher: (config.teacher_dim > 0).then(|| &centres[label as usize] + &noise),
            });
        }
    }
    out
}
