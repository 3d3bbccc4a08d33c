//! Basic-block partitioning and control-flow recovery.
//!
//! Jump targets are recovered by a small abstract interpretation: each stack
//! cell is either a known constant or unknown, constants move through
//! PUSH/DUP/SWAP/POP, and block entry states are joined across fallthrough and
//! resolved jump edges until nothing changes (or the pass cap is hit).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::disasm::{disassemble, op, ContractBytecode, Instruction, InstructionSeq};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminatorKind {
    Fallthrough,
    Jump,
    Jumpi,
    Halt,
    Invalid,
}

impl TerminatorKind {
    fn of(last: &Instruction) -> Self {
        let info = &last.op;
        if info.byte_value == op::JUMP {
            TerminatorKind::Jump
        } else if info.is_branch {
            TerminatorKind::Jumpi
        } else if info.is_invalid() {
            TerminatorKind::Invalid
        } else if info.is_terminator {
            TerminatorKind::Halt
        } else {
            TerminatorKind::Fallthrough
        }
    }

    /// Whether control may continue into the next block in offset order.
    pub fn falls_through(self) -> bool {
        matches!(self, TerminatorKind::Fallthrough | TerminatorKind::Jumpi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BasicBlock {
    pub index: usize,
    pub start_offset: usize,
    #[serde(rename = "terminator")]
    pub terminator_kind: TerminatorKind,
    pub instructions: InstructionSeq,
}

impl BasicBlock {
    pub fn starts_with_jumpdest(&self) -> bool {
        self.instructions
            .first()
            .is_some_and(|i| i.op.is_jumpdest())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum UnresolvedReason {
    #[serde(rename = "not-jumpdest")]
    NotJumpdest,
    #[serde(rename = "unknown-target")]
    UnknownTarget,
}

impl UnresolvedReason {
    pub fn as_str(self) -> &'static str {
        match self {
            UnresolvedReason::NotJumpdest => "not-jumpdest",
            UnresolvedReason::UnknownTarget => "unknown-target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnresolvedJump {
    pub block: usize,
    pub reason: UnresolvedReason,
    /// The constant target, when there was one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<u64>,
}

/// Limits for jump resolution. `max_passes = None` means `4 * n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolveConfig {
    pub max_passes: Option<usize>,
    pub max_stack_depth: usize,
}

impl Default for ResolveConfig {
    fn default() -> Self {
        Self {
            max_passes: None,
            max_stack_depth: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JumpResolution {
    pub edges: BTreeSet<(usize, usize)>,
    pub unresolved: Vec<UnresolvedJump>,
    /// Full sweeps over the blocks before the fixpoint (or the cap) was reached.
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cfg {
    pub blocks: Vec<BasicBlock>,
    pub edges: BTreeSet<(usize, usize)>,
    /// Subset of `edges` produced by resolved JUMP/JUMPI targets.
    pub jump_edges: BTreeSet<(usize, usize)>,
    pub unresolved: Vec<UnresolvedJump>,
    successors: Vec<Vec<usize>>,
}

impl Cfg {
    /// Assembles a graph from explicit parts. Every endpoint must be a valid index.
    pub fn from_parts(
        blocks: Vec<BasicBlock>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let edges: BTreeSet<_> = edges.into_iter().collect();
        Self::assemble(blocks, edges, BTreeSet::new(), Vec::new())
    }

    fn assemble(
        blocks: Vec<BasicBlock>,
        edges: BTreeSet<(usize, usize)>,
        jump_edges: BTreeSet<(usize, usize)>,
        unresolved: Vec<UnresolvedJump>,
    ) -> Result<Self> {
        let n = blocks.len();
        let mut successors = vec![Vec::new(); n];
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return Err(Error::Shape(format!(
                    "edge ({i}, {j}) out of range for {n} blocks"
                )));
            }
            successors[i].push(j);
        }
        Ok(Self {
            blocks,
            edges,
            jump_edges,
            unresolved,
            successors,
        })
    }

    pub fn node_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Successors in ascending index order.
    pub fn successors(&self, node: usize) -> &[usize] {
        &self.successors[node]
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct View<'a> {
            blocks: &'a [BasicBlock],
            edges: Vec<[usize; 2]>,
            unresolved: &'a [UnresolvedJump],
        }
        let view = View {
            blocks: &self.blocks,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            unresolved: &self.unresolved,
        };
        serde_json::to_value(view).expect("cfg view serializes")
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph cfg {\n  node [shape=box, fontname=\"monospace\"];\n");
        for block in &self.blocks {
            let mut label = format!("B{} @{:#x}\\l", block.index, block.start_offset);
            for instr in &block.instructions {
                let _ = write!(label, "{instr}\\l");
            }
            let _ = writeln!(out, "  n{} [label=\"{}\"];", block.index, label);
        }
        for &(i, j) in &self.edges {
            let style = if self.jump_edges.contains(&(i, j)) {
                ""
            } else {
                " [style=dashed]"
            };
            let _ = writeln!(out, "  n{i} -> n{j}{style};");
        }
        out.push_str("}\n");
        out
    }
}

/// Cuts a sequence at every JUMPDEST and after every JUMP, JUMPI, halt or INVALID.
pub fn split_blocks(seq: &[Instruction]) -> Vec<BasicBlock> {
    let mut blocks: Vec<BasicBlock> = Vec::new();
    let mut current: Vec<Instruction> = Vec::new();

    let flush = |current: &mut Vec<Instruction>, blocks: &mut Vec<BasicBlock>| {
        if let Some(last) = current.last() {
            let terminator_kind = TerminatorKind::of(last);
            blocks.push(BasicBlock {
                index: blocks.len(),
                start_offset: current[0].offset,
                terminator_kind,
                instructions: std::mem::take(current),
            });
        }
    };

    for instr in seq {
        if instr.op.is_jumpdest() {
            flush(&mut current, &mut blocks);
        }
        let ends = instr.op.is_terminator || instr.op.is_branch;
        current.push(instr.clone());
        if ends {
            flush(&mut current, &mut blocks);
        }
    }
    flush(&mut current, &mut blocks);
    blocks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AbsVal {
    Const(u64),
    /// A constant too wide to be a code offset.
    Wide,
    Top,
}

impl AbsVal {
    fn join(self, other: AbsVal) -> AbsVal {
        match (self, other) {
            (AbsVal::Const(a), AbsVal::Const(b)) if a == b => self,
            _ => AbsVal::Top,
        }
    }
}

/// Known top-of-stack cells; `last()` is the top. Cells below are unknown.
type AbsStack = Vec<AbsVal>;

struct Simulator {
    max_depth: usize,
}

impl Simulator {
    fn pop(stack: &mut AbsStack) -> AbsVal {
        stack.pop().unwrap_or(AbsVal::Top)
    }

    fn push(&self, stack: &mut AbsStack, v: AbsVal) {
        stack.push(v);
        if stack.len() > self.max_depth {
            stack.remove(0);
        }
    }

    fn ensure_depth(stack: &mut AbsStack, depth: usize) {
        if stack.len() < depth {
            let pad = depth - stack.len();
            stack.splice(0..0, std::iter::repeat_n(AbsVal::Top, pad));
        }
    }

    /// Runs a block; returns the exit stack and the jump target cell, if any.
    fn run(&self, block: &BasicBlock, entry: &AbsStack) -> (AbsStack, Option<AbsVal>) {
        let mut stack = entry.clone();
        let mut target = None;
        for instr in &block.instructions {
            let info = &instr.op;
            let b = info.byte_value;
            if b == op::JUMP {
                target = Some(Self::pop(&mut stack));
            } else if b == op::JUMPI {
                target = Some(Self::pop(&mut stack));
                Self::pop(&mut stack);
            } else if info.is_push() {
                let v = match instr.immediate_u64() {
                    Some(c) => AbsVal::Const(c),
                    None => AbsVal::Wide,
                };
                self.push(&mut stack, v);
            } else if info.is_dup() {
                let n = (b - op::DUP1 + 1) as usize;
                Self::ensure_depth(&mut stack, n);
                let v = stack[stack.len() - n];
                self.push(&mut stack, v);
            } else if info.is_swap() {
                let n = (b - op::SWAP1 + 1) as usize;
                Self::ensure_depth(&mut stack, n + 1);
                let top = stack.len() - 1;
                stack.swap(top, top - n);
            } else {
                for _ in 0..info.stack_in {
                    Self::pop(&mut stack);
                }
                for _ in 0..info.stack_out {
                    self.push(&mut stack, AbsVal::Top);
                }
            }
        }
        (stack, target)
    }
}

fn join_into(slot: &mut Option<AbsStack>, incoming: &AbsStack) -> bool {
    match slot {
        None => {
            *slot = Some(incoming.clone());
            true
        }
        Some(existing) => {
            let len = existing.len().min(incoming.len());
            let a = &existing[existing.len() - len..];
            let b = &incoming[incoming.len() - len..];
            let joined: AbsStack = a.iter().zip(b).map(|(x, y)| x.join(*y)).collect();
            if joined != *existing {
                *existing = joined;
                true
            } else {
                false
            }
        }
    }
}

/// Resolves constant JUMP/JUMPI targets. Returns only jump edges; fallthrough
/// edges are added by [`build_cfg`].
pub fn resolve_jump_targets(blocks: &[BasicBlock], config: &ResolveConfig) -> JumpResolution {
    let n = blocks.len();
    if n == 0 {
        return JumpResolution::default();
    }
    let jumpdests: BTreeMap<u64, usize> = blocks
        .iter()
        .filter(|b| b.starts_with_jumpdest())
        .map(|b| (b.start_offset as u64, b.index))
        .collect();
    let sim = Simulator {
        max_depth: config.max_stack_depth.max(1),
    };
    let cap = config.max_passes.unwrap_or(4 * n).max(1);

    let jump_succ = |target: Option<AbsVal>| match target {
        Some(AbsVal::Const(c)) => jumpdests.get(&c).copied(),
        _ => None,
    };

    let mut entry: Vec<Option<AbsStack>> = vec![None; n];
    entry[0] = Some(Vec::new());
    let mut passes = 0;
    loop {
        let mut changed = false;
        for (b, block) in blocks.iter().enumerate() {
            let Some(state) = entry[b].clone() else {
                continue;
            };
            let (exit, target) = sim.run(block, &state);
            if block.terminator_kind.falls_through() && b + 1 < n {
                changed |= join_into(&mut entry[b + 1], &exit);
            }
            if let Some(s) = jump_succ(target) {
                changed |= join_into(&mut entry[s], &exit);
            }
        }
        passes += 1;
        if passes >= cap {
            break;
        }
        if !changed {
            // Code only reachable through unresolved jumps starts from an unknown stack.
            match entry.iter().position(Option::is_none) {
                Some(orphan) => entry[orphan] = Some(Vec::new()),
                None => break,
            }
        }
    }

    let mut edges = BTreeSet::new();
    let mut unresolved = Vec::new();
    let empty = AbsStack::new();
    for (b, block) in blocks.iter().enumerate() {
        if !matches!(
            block.terminator_kind,
            TerminatorKind::Jump | TerminatorKind::Jumpi
        ) {
            continue;
        }
        let state = entry[b].as_ref().unwrap_or(&empty);
        let (_, target) = sim.run(block, state);
        match target {
            Some(AbsVal::Const(c)) => match jumpdests.get(&c) {
                Some(&s) => {
                    edges.insert((b, s));
                }
                None => unresolved.push(UnresolvedJump {
                    block: b,
                    reason: UnresolvedReason::NotJumpdest,
                    target: Some(c),
                }),
            },
            Some(AbsVal::Wide) => unresolved.push(UnresolvedJump {
                block: b,
                reason: UnresolvedReason::NotJumpdest,
                target: None,
            }),
            _ => unresolved.push(UnresolvedJump {
                block: b,
                reason: UnresolvedReason::UnknownTarget,
                target: None,
            }),
        }
    }
    JumpResolution {
        edges,
        unresolved,
        passes,
    }
}

pub fn build_cfg(code: &ContractBytecode) -> Cfg {
    build_cfg_with(code, &ResolveConfig::default())
}

pub fn build_cfg_with(code: &ContractBytecode, config: &ResolveConfig) -> Cfg {
    let seq = disassemble(code);
    cfg_from_instructions(&seq, config)
}

pub fn cfg_from_instructions(seq: &[Instruction], config: &ResolveConfig) -> Cfg {
    let blocks = split_blocks(seq);
    let resolution = resolve_jump_targets(&blocks, config);
    let mut edges = resolution.edges.clone();
    for block in &blocks {
        if block.terminator_kind.falls_through() && block.index + 1 < blocks.len() {
            edges.insert((block.index, block.index + 1));
        }
    }
    Cfg::assemble(blocks, edges, resolution.edges, resolution.unresolved)
        .expect("edges built from block indices")
}
