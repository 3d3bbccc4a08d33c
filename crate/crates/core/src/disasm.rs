//! EVM bytecode decoding.
//!
//! The opcode table follows the Cancun instruction set. Bytes with no
//! assigned instruction decode to `INVALID`, which halts execution just like
//! the designated `0xfe` opcode.

use std::fmt;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Static description of a single opcode byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpcodeInfo {
    pub byte_value: u8,
    pub mnemonic: &'static str,
    /// Inline data bytes following the opcode; nonzero only for PUSH1..PUSH32.
    pub immediate_len: u8,
    /// STOP, RETURN, REVERT, SELFDESTRUCT, INVALID and JUMP.
    pub is_terminator: bool,
    /// JUMPI.
    pub is_branch: bool,
    pub stack_in: u8,
    pub stack_out: u8,
    /// False for bytes that only decode to INVALID because nothing is assigned.
    pub is_defined: bool,
}

impl OpcodeInfo {
    pub fn is_jumpdest(&self) -> bool {
        self.byte_value == op::JUMPDEST
    }

    pub fn is_push(&self) -> bool {
        (op::PUSH0..=op::PUSH32).contains(&self.byte_value)
    }

    pub fn is_dup(&self) -> bool {
        (op::DUP1..=op::DUP16).contains(&self.byte_value)
    }

    pub fn is_swap(&self) -> bool {
        (op::SWAP1..=op::SWAP16).contains(&self.byte_value)
    }

    /// Halting instructions other than JUMP: STOP, RETURN, REVERT, SELFDESTRUCT, INVALID.
    pub fn is_halt(&self) -> bool {
        self.is_terminator && self.byte_value != op::JUMP
    }

    pub fn is_invalid(&self) -> bool {
        self.byte_value == op::INVALID || !self.is_defined
    }
}

/// Byte values of the opcodes the analysis refers to by name.
pub mod op {
    pub const STOP: u8 = 0x00;
    pub const ADD: u8 = 0x01;
    pub const SUB: u8 = 0x03;
    pub const EQ: u8 = 0x14;
    pub const ISZERO: u8 = 0x15;
    pub const AND: u8 = 0x16;
    pub const ORIGIN: u8 = 0x32;
    pub const CALLER: u8 = 0x33;
    pub const CALLVALUE: u8 = 0x34;
    pub const CALLDATALOAD: u8 = 0x35;
    pub const TIMESTAMP: u8 = 0x42;
    pub const POP: u8 = 0x50;
    pub const MLOAD: u8 = 0x51;
    pub const MSTORE: u8 = 0x52;
    pub const SLOAD: u8 = 0x54;
    pub const SSTORE: u8 = 0x55;
    pub const JUMP: u8 = 0x56;
    pub const JUMPI: u8 = 0x57;
    pub const JUMPDEST: u8 = 0x5b;
    pub const PUSH0: u8 = 0x5f;
    pub const PUSH1: u8 = 0x60;
    pub const PUSH2: u8 = 0x61;
    pub const PUSH32: u8 = 0x7f;
    pub const DUP1: u8 = 0x80;
    pub const DUP16: u8 = 0x8f;
    pub const SWAP1: u8 = 0x90;
    pub const SWAP16: u8 = 0x9f;
    pub const CALL: u8 = 0xf1;
    pub const RETURN: u8 = 0xf3;
    pub const DELEGATECALL: u8 = 0xf4;
    pub const REVERT: u8 = 0xfd;
    pub const INVALID: u8 = 0xfe;
    pub const SELFDESTRUCT: u8 = 0xff;
}

const PUSH_NAMES: [&str; 32] = [
    "PUSH1", "PUSH2", "PUSH3", "PUSH4", "PUSH5", "PUSH6", "PUSH7", "PUSH8", "PUSH9", "PUSH10",
    "PUSH11", "PUSH12", "PUSH13", "PUSH14", "PUSH15", "PUSH16", "PUSH17", "PUSH18", "PUSH19",
    "PUSH20", "PUSH21", "PUSH22", "PUSH23", "PUSH24", "PUSH25", "PUSH26", "PUSH27", "PUSH28",
    "PUSH29", "PUSH30", "PUSH31", "PUSH32",
];
const DUP_NAMES: [&str; 16] = [
    "DUP1", "DUP2", "DUP3", "DUP4", "DUP5", "DUP6", "DUP7", "DUP8", "DUP9", "DUP10", "DUP11",
    "DUP12", "DUP13", "DUP14", "DUP15", "DUP16",
];
const SWAP_NAMES: [&str; 16] = [
    "SWAP1", "SWAP2", "SWAP3", "SWAP4", "SWAP5", "SWAP6", "SWAP7", "SWAP8", "SWAP9", "SWAP10",
    "SWAP11", "SWAP12", "SWAP13", "SWAP14", "SWAP15", "SWAP16",
];
const LOG_NAMES: [&str; 5] = ["LOG0", "LOG1", "LOG2", "LOG3", "LOG4"];

const fn simple(byte_value: u8, mnemonic: &'static str, stack_in: u8, stack_out: u8) -> OpcodeInfo {
    OpcodeInfo {
        byte_value,
        mnemonic,
        immediate_len: 0,
        is_terminator: false,
        is_branch: false,
        stack_in,
        stack_out,
        is_defined: true,
    }
}

const fn halting(byte_value: u8, mnemonic: &'static str, stack_in: u8) -> OpcodeInfo {
    let mut info = simple(byte_value, mnemonic, stack_in, 0);
    info.is_terminator = true;
    info
}

#[rustfmt::skip]
const fn build(b: u8) -> OpcodeInfo {
    match b {
        0x00 => halting(b, "STOP", 0),
        0x01 => simple(b, "ADD", 2, 1),
        0x02 => simple(b, "MUL", 2, 1),
        0x03 => simple(b, "SUB", 2, 1),
        0x04 => simple(b, "DIV", 2, 1),
        0x05 => simple(b, "SDIV", 2, 1),
        0x06 => simple(b, "MOD", 2, 1),
        0x07 => simple(b, "SMOD", 2, 1),
        0x08 => simple(b, "ADDMOD", 3, 1),
        0x09 => simple(b, "MULMOD", 3, 1),
        0x0a => simple(b, "EXP", 2, 1),
        0x0b => simple(b, "SIGNEXTEND", 2, 1),
        0x10 => simple(b, "LT", 2, 1),
        0x11 => simple(b, "GT", 2, 1),
        0x12 => simple(b, "SLT", 2, 1),
        0x13 => simple(b, "SGT", 2, 1),
        0x14 => simple(b, "EQ", 2, 1),
        0x15 => simple(b, "ISZERO", 1, 1),
        0x16 => simple(b, "AND", 2, 1),
        0x17 => simple(b, "OR", 2, 1),
        0x18 => simple(b, "XOR", 2, 1),
        0x19 => simple(b, "NOT", 1, 1),
        0x1a => simple(b, "BYTE", 2, 1),
        0x1b => simple(b, "SHL", 2, 1),
        0x1c => simple(b, "SHR", 2, 1),
        0x1d => simple(b, "SAR", 2, 1),
        0x20 => simple(b, "KECCAK256", 2, 1),
        0x30 => simple(b, "ADDRESS", 0, 1),
        0x31 => simple(b, "BALANCE", 1, 1),
        0x32 => simple(b, "ORIGIN", 0, 1),
        0x33 => simple(b, "CALLER", 0, 1),
        0x34 => simple(b, "CALLVALUE", 0, 1),
        0x35 => simple(b, "CALLDATALOAD", 1, 1),
        0x36 => simple(b, "CALLDATASIZE", 0, 1),
        0x37 => simple(b, "CALLDATACOPY", 3, 0),
        0x38 => simple(b, "CODESIZE", 0, 1),
        0x39 => simple(b, "CODECOPY", 3, 0),
        0x3a => simple(b, "GASPRICE", 0, 1),
        0x3b => simple(b, "EXTCODESIZE", 1, 1),
        0x3c => simple(b, "EXTCODECOPY", 4, 0),
        0x3d => simple(b, "RETURNDATASIZE", 0, 1),
        0x3e => simple(b, "RETURNDATACOPY", 3, 0),
        0x3f => simple(b, "EXTCODEHASH", 1, 1),
        0x40 => simple(b, "BLOCKHASH", 1, 1),
        0x41 => simple(b, "COINBASE", 0, 1),
        0x42 => simple(b, "TIMESTAMP", 0, 1),
        0x43 => simple(b, "NUMBER", 0, 1),
        0x44 => simple(b, "PREVRANDAO", 0, 1),
        0x45 => simple(b, "GASLIMIT", 0, 1),
        0x46 => simple(b, "CHAINID", 0, 1),
        0x47 => simple(b, "SELFBALANCE", 0, 1),
        0x48 => simple(b, "BASEFEE", 0, 1),
        0x49 => simple(b, "BLOBHASH", 1, 1),
        0x4a => simple(b, "BLOBBASEFEE", 0, 1),
        0x50 => simple(b, "POP", 1, 0),
        0x51 => simple(b, "MLOAD", 1, 1),
        0x52 => simple(b, "MSTORE", 2, 0),
        0x53 => simple(b, "MSTORE8", 2, 0),
        0x54 => simple(b, "SLOAD", 1, 1),
        0x55 => simple(b, "SSTORE", 2, 0),
        0x56 => halting(b, "JUMP", 1),
        0x57 => {
            let mut info = simple(b, "JUMPI", 2, 0);
            info.is_branch = true;
            info
        }
        0x58 => simple(b, "PC", 0, 1),
        0x59 => simple(b, "MSIZE", 0, 1),
        0x5a => simple(b, "GAS", 0, 1),
        0x5b => simple(b, "JUMPDEST", 0, 0),
        0x5c => simple(b, "TLOAD", 1, 1),
        0x5d => simple(b, "TSTORE", 2, 0),
        0x5e => simple(b, "MCOPY", 3, 0),
        0x5f => simple(b, "PUSH0", 0, 1),
        0x60..=0x7f => {
            let k = b - 0x60;
            let mut info = simple(b, PUSH_NAMES[k as usize], 0, 1);
            info.immediate_len = k + 1;
            info
        }
        0x80..=0x8f => {
            let k = b - 0x80;
            simple(b, DUP_NAMES[k as usize], k + 1, k + 2)
        }
        0x90..=0x9f => {
            let k = b - 0x90;
            simple(b, SWAP_NAMES[k as usize], k + 2, k + 2)
        }
        0xa0..=0xa4 => {
            let k = b - 0xa0;
            simple(b, LOG_NAMES[k as usize], k + 2, 0)
        }
        0xf0 => simple(b, "CREATE", 3, 1),
        0xf1 => simple(b, "CALL", 7, 1),
        0xf2 => simple(b, "CALLCODE", 7, 1),
        0xf3 => halting(b, "RETURN", 2),
        0xf4 => simple(b, "DELEGATECALL", 6, 1),
        0xf5 => simple(b, "CREATE2", 4, 1),
        0xfa => simple(b, "STATICCALL", 6, 1),
        0xfd => halting(b, "REVERT", 2),
        0xfe => halting(b, "INVALID", 0),
        0xff => halting(b, "SELFDESTRUCT", 1),
        _ => {
            let mut info = halting(b, "INVALID", 0);
            info.is_defined = false;
            info
        }
    }
}

const fn build_table() -> [OpcodeInfo; 256] {
    let mut table = [simple(0, "", 0, 0); 256];
    let mut i = 0;
    while i < 256 {
        table[i] = build(i as u8);
        i += 1;
    }
    table
}

static OPCODES: [OpcodeInfo; 256] = build_table();

/// Total over all byte values.
pub fn decode_opcode(byte_value: u8) -> OpcodeInfo {
    OPCODES[byte_value as usize]
}

/// Looks up a defined opcode by mnemonic. `INVALID` resolves to `0xfe`.
pub fn opcode_by_mnemonic(mnemonic: &str) -> Option<OpcodeInfo> {
    OPCODES
        .iter()
        .find(|info| info.is_defined && info.mnemonic == mnemonic)
        .copied()
}

/// A contract's raw code plus an identifier unique within a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractBytecode {
    pub id: String,
    pub raw: Vec<u8>,
}

impl ContractBytecode {
    pub fn new(id: impl Into<String>, raw: Vec<u8>) -> Self {
        Self { id: id.into(), raw }
    }

    /// Parses hex text: optional `0x` prefix, whitespace anywhere is ignored.
    pub fn from_hex(id: impl Into<String>, text: &str) -> Result<Self> {
        Ok(Self::new(id, parse_hex(text)?))
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

pub fn parse_hex(text: &str) -> Result<Vec<u8>> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let digits = compact
        .strip_prefix("0x")
        .or_else(|| compact.strip_prefix("0X"))
        .unwrap_or(&compact);
    if !digits.len().is_multiple_of(2) {
        return Err(Error::Hex(format!(
            "odd number of hex digits ({})",
            digits.len()
        )));
    }
    hex::decode(digits).map_err(|e| Error::Hex(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub offset: usize,
    pub op: OpcodeInfo,
    /// Exactly `op.immediate_len` bytes, zero-padded when the code ends early.
    pub immediate: Vec<u8>,
    pub truncated: bool,
}

impl Instruction {
    pub fn mnemonic(&self) -> &'static str {
        self.op.mnemonic
    }

    /// Offset of the following instruction.
    pub fn next_offset(&self) -> usize {
        self.offset + 1 + self.op.immediate_len as usize
    }

    /// The immediate as an integer if it fits in 64 bits.
    pub fn immediate_u64(&self) -> Option<u64> {
        let significant: &[u8] = {
            let first = self.immediate.iter().position(|&b| b != 0);
            match first {
                Some(i) => &self.immediate[i..],
                None => &[],
            }
        };
        if significant.len() > 8 {
            return None;
        }
        Some(significant.iter().fold(0u64, |acc, &b| (acc << 8) | b as u64))
    }

    /// Opcode byte followed by the immediate.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.op.byte_value);
        out.extend_from_slice(&self.immediate);
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04x}: {}", self.offset, self.op.mnemonic)?;
        if !self.immediate.is_empty() {
            write!(f, " 0x{}", hex::encode(&self.immediate))?;
        }
        Ok(())
    }
}

impl Serialize for Instruction {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Instruction", 4)?;
        s.serialize_field("offset", &self.offset)?;
        s.serialize_field("mnemonic", self.op.mnemonic)?;
        if self.immediate.is_empty() {
            s.serialize_field("immediate", &Option::<String>::None)?;
        } else {
            s.serialize_field("immediate", &Some(format!("0x{}", hex::encode(&self.immediate))))?;
        }
        s.serialize_field("truncated", &self.truncated)?;
        s.end()
    }
}

pub type InstructionSeq = Vec<Instruction>;

pub fn disassemble(code: &ContractBytecode) -> InstructionSeq {
    disassemble_bytes(&code.raw)
}

pub fn disassemble_bytes(code: &[u8]) -> InstructionSeq {
    let mut out = Vec::new();
    let mut pc = 0;
    while pc < code.len() {
        let op = decode_opcode(code[pc]);
        let len = op.immediate_len as usize;
        let start = pc + 1;
        let end = (start + len).min(code.len());
        let mut immediate = code[start..end].to_vec();
        let truncated = immediate.len() < len;
        immediate.resize(len, 0);
        out.push(Instruction {
            offset: pc,
            op,
            immediate,
            truncated,
        });
        pc = start + len;
    }
    out
}

/// Re-serializes a sequence. Reproduces the input exactly when nothing was truncated.
pub fn assemble(seq: &[Instruction]) -> Vec<u8> {
    let mut out = Vec::new();
    for instr in seq {
        instr.encode(&mut out);
    }
    out
}

/// Removes a trailing Solidity metadata blob: `L` bytes starting with a CBOR
/// map header, followed by `L` as a big-endian u16. Identity otherwise.
pub fn strip_trailing_metadata(code: &ContractBytecode) -> ContractBytecode {
    let raw = &code.raw;
    let n = raw.len();
    let stripped = if n >= 2 {
        let len = u16::from_be_bytes([raw[n - 2], raw[n - 1]]) as usize;
        let total = len + 2;
        // Major type 5 (map) occupies 0xa0..=0xbf.
        if len > 0 && total <= n && (0xa0..=0xbf).contains(&raw[n - total]) {
            Some(raw[..n - total].to_vec())
        } else {
            None
        }
    } else {
        None
    };
    ContractBytecode {
        id: code.id.clone(),
        raw: stripped.unwrap_or_else(|| raw.clone()),
    }
}
