//! Active-message and configuration-memory word formats.
//!
//! Every message on the mesh is a single 70-bit flit:
//!
//! ```text
//!  69..66  65..62  61..58  57..54  53..51  50     49     48     47..32  31..16  15..0
//!  R1      R2      R3      N_PC    Opcode  Res_c  Op1_c  Op2_c  Result  Op1     Op2
//! ```
//!
//! Fields pack most-significant first in that order. The three 4-bit
//! destination slots name PEs on the mesh; `N_PC` indexes the replicated
//! configuration memory, whose 10-bit entries use the same packing idea:
//!
//! ```text
//!  9..7    6..3   2      1      0
//!  Opcode  N_PC   Res_c  Op1_c  Op2_c
//! ```
//!
//! On the wire a 70-bit word travels as 9 bytes, big-endian, top two bits
//! zero.

use serde::{Deserialize, Serialize};

/// Config-memory index reserved to mark the end of an instruction chain.
/// PE identifiers use the full 4-bit range, so chain termination cannot be
/// signalled through a destination; the config memory holds at most 8
/// entries, leaving indices 8..16 free.
pub const CHAIN_END: u8 = 15;

/// Operation carried by a message, 3 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Opcode {
    Nop = 0,
    Load = 1,
    Stream = 2,
    Add = 3,
    Sub = 4,
    Mul = 5,
    Div = 6,
    /// Load-modify-store accumulate into a local address.
    Acc = 7,
}

impl Opcode {
    pub fn from_bits(bits: u8) -> Opcode {
        match bits & 0x7 {
            0 => Opcode::Nop,
            1 => Opcode::Load,
            2 => Opcode::Stream,
            3 => Opcode::Add,
            4 => Opcode::Sub,
            5 => Opcode::Mul,
            6 => Opcode::Div,
            _ => Opcode::Acc,
        }
    }

    pub fn bits(self) -> u8 {
        self as u8
    }

    /// LOAD, STREAM and ACC touch a PE's data memory.
    pub fn is_memory_class(self) -> bool {
        matches!(self, Opcode::Load | Opcode::Stream | Opcode::Acc)
    }

    /// ADD, SUB, MUL and DIV execute on the ALU.
    pub fn is_alu_class(self) -> bool {
        matches!(self, Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Div)
    }
}

/// Tags whether an operand slot holds a local word address or an immediate
/// value. Encodes in one bit: ADDRESS = 1, VALUE = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperandTag {
    Value,
    Address,
}

impl OperandTag {
    pub fn from_bit(bit: u8) -> OperandTag {
        if bit & 1 == 1 {
            OperandTag::Address
        } else {
            OperandTag::Value
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            OperandTag::Value => 0,
            OperandTag::Address => 1,
        }
    }

    pub fn is_address(self) -> bool {
        matches!(self, OperandTag::Address)
    }
}

/// One in-flight instruction-carrying message.
///
/// `r1` is the current first destination; `r2` and `r3` follow in rotation
/// order. `result`, `op1` and `op2` are 16-bit payload words whose meaning
/// (address vs value) is given by the `*_c` tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveMessage {
    pub r1: u8,
    pub r2: u8,
    pub r3: u8,
    pub n_pc: u8,
    pub opcode: Opcode,
    pub res_c: OperandTag,
    pub op1_c: OperandTag,
    pub op2_c: OperandTag,
    pub result: u16,
    pub op1: u16,
    pub op2: u16,
}

impl ActiveMessage {
    pub fn zero() -> ActiveMessage {
        ActiveMessage {
            r1: 0,
            r2: 0,
            r3: 0,
            n_pc: 0,
            opcode: Opcode::Nop,
            res_c: OperandTag::Value,
            op1_c: OperandTag::Value,
            op2_c: OperandTag::Value,
            result: 0,
            op1: 0,
            op2: 0,
        }
    }
}

/// One 10-bit configuration-memory entry. Morphing a message fetches the
/// entry selected by the message's `n_pc` and overwrites opcode, flags and
/// `n_pc` from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub opcode: Opcode,
    /// Index of the successor entry, or [`CHAIN_END`].
    pub n_pc: u8,
    pub res_c: OperandTag,
    pub op1_c: OperandTag,
    pub op2_c: OperandTag,
}

impl ConfigEntry {
    pub fn zero() -> ConfigEntry {
        ConfigEntry {
            opcode: Opcode::Nop,
            n_pc: 0,
            res_c: OperandTag::Value,
            op1_c: OperandTag::Value,
            op2_c: OperandTag::Value,
        }
    }
}

/// Packs a message into its 70-bit word (low 70 bits of the return value).
pub fn encode_am(msg: &ActiveMessage) -> u128 {
    debug_assert!(msg.r1 < 16 && msg.r2 < 16 && msg.r3 < 16 && msg.n_pc < 16);
    let mut w: u128 = 0;
    w |= (msg.r1 as u128) << 66;
    w |= (msg.r2 as u128) << 62;
    w |= (msg.r3 as u128) << 58;
    w |= (msg.n_pc as u128) << 54;
    w |= (msg.opcode.bits() as u128) << 51;
    w |= (msg.res_c.bit() as u128) << 50;
    w |= (msg.op1_c.bit() as u128) << 49;
    w |= (msg.op2_c.bit() as u128) << 48;
    w |= (msg.result as u128) << 32;
    w |= (msg.op1 as u128) << 16;
    w |= msg.op2 as u128;
    w
}

/// Inverse of [`encode_am`]; every 70-bit pattern is syntactically valid.
pub fn decode_am(word: u128) -> ActiveMessage {
    ActiveMessage {
        r1: ((word >> 66) & 0xf) as u8,
        r2: ((word >> 62) & 0xf) as u8,
        r3: ((word >> 58) & 0xf) as u8,
        n_pc: ((word >> 54) & 0xf) as u8,
        opcode: Opcode::from_bits(((word >> 51) & 0x7) as u8),
        res_c: OperandTag::from_bit(((word >> 50) & 1) as u8),
        op1_c: OperandTag::from_bit(((word >> 49) & 1) as u8),
        op2_c: OperandTag::from_bit(((word >> 48) & 1) as u8),
        result: ((word >> 32) & 0xffff) as u16,
        op1: ((word >> 16) & 0xffff) as u16,
        op2: (word & 0xffff) as u16,
    }
}

/// Wire form: 9 bytes big-endian, top 2 bits zero.
pub fn am_to_wire(msg: &ActiveMessage) -> [u8; 9] {
    let w = encode_am(msg);
    let mut out = [0u8; 9];
    for (i, b) in out.iter_mut().enumerate() {
        *b = ((w >> (8 * (8 - i))) & 0xff) as u8;
    }
    out
}

pub fn am_from_wire(bytes: &[u8; 9]) -> ActiveMessage {
    let mut w: u128 = 0;
    for b in bytes {
        w = (w << 8) | *b as u128;
    }
    decode_am(w & ((1u128 << 70) - 1))
}

/// Consumes the first destination: r1 <- r2, r2 <- r3, r3 <- old r1. All
/// other fields are untouched; three applications are the identity.
pub fn rotate_destinations(msg: &ActiveMessage) -> ActiveMessage {
    ActiveMessage {
        r1: msg.r2,
        r2: msg.r3,
        r3: msg.r1,
        ..*msg
    }
}

pub fn encode_config(entry: &ConfigEntry) -> u16 {
    debug_assert!(entry.n_pc < 16);
    ((entry.opcode.bits() as u16) << 7)
        | ((entry.n_pc as u16) << 3)
        | ((entry.res_c.bit() as u16) << 2)
        | ((entry.op1_c.bit() as u16) << 1)
        | entry.op2_c.bit() as u16
}

pub fn decode_config(word: u16) -> ConfigEntry {
    ConfigEntry {
        opcode: Opcode::from_bits(((word >> 7) & 0x7) as u8),
        n_pc: ((word >> 3) & 0xf) as u8,
        res_c: OperandTag::from_bit(((word >> 2) & 1) as u8),
        op1_c: OperandTag::from_bit(((word >> 1) & 1) as u8),
        op2_c: OperandTag::from_bit((word & 1) as u8),
    }
}
