//! One processing element: data memory, AM queue, configuration memory,
//! compute unit and decode unit (dereference and streaming modes).
//!
//! The engine drives these units phase by phase; everything here is the
//! per-PE state plus the single-cycle unit semantics.

use crate::am::{ActiveMessage, Opcode, OperandTag, CHAIN_END};
use crate::compiler::{ConfigTable, StreamMeta};
use crate::noc::InFlight;
use crate::tensor::PeId;
use std::collections::{BTreeMap, VecDeque};
use std::fmt;

pub const DATA_WORDS: usize = 512;
pub const AM_QUEUE_CAPACITY: usize = 116;

/// Simulation fault: a message addressed memory outside the PE's data
/// array. Compiled programs never do this; reaching it means a broken
/// placement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimFault {
    pub pe: PeId,
    pub addr: u32,
    pub what: &'static str,
}

impl fmt::Display for SimFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PE{}: {} at address {}", self.pe, self.what, self.addr)
    }
}

impl std::error::Error for SimFault {}

/// 16-bit two's-complement ALU. ADD/SUB/MUL wrap; DIV is the truncated
/// signed quotient with a zero divisor yielding zero, keeping the function
/// total and traces deterministic.
pub fn compute_execute(opcode: Opcode, op1: u16, op2: u16) -> u16 {
    let a = op1 as i16;
    let b = op2 as i16;
    let r = match opcode {
        Opcode::Add => a.wrapping_add(b),
        Opcode::Sub => a.wrapping_sub(b),
        Opcode::Mul => a.wrapping_mul(b),
        Opcode::Div => {
            if b == 0 {
                0
            } else {
                a.wrapping_div(b)
            }
        }
        other => panic!("compute unit cannot execute {other:?}"),
    };
    r as u16
}

/// An active streaming-mode decode: one derived message per cycle for
/// `meta.count` consecutive words from `base`.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub template: ActiveMessage,
    pub base: u16,
    pub meta: StreamMeta,
    pub next: u16,
}

impl StreamState {
    pub fn done(&self) -> bool {
        self.next >= self.meta.count
    }
}

/// Per-cycle unit occupancy. The data memory is dual-port: one read and
/// one write per cycle, shared by whatever fires that cycle.
#[derive(Debug, Clone, Copy, Default)]
pub struct CycleUnits {
    pub alu: bool,
    pub decode: bool,
    pub mem_read: bool,
    pub mem_write: bool,
    /// The decode unit is held by an active stream this cycle rather than
    /// by a delivered instruction; the stream may still derive at cycle
    /// end. A stream whose outbox is blocked yields the unit instead.
    pub stream_claim: bool,
    /// Set when any unit actually performed work (busy statistics).
    pub worked: bool,
}

#[derive(Debug, Clone)]
pub struct PeState {
    pub id: PeId,
    pub data_memory: Vec<u16>,
    pub am_queue: VecDeque<ActiveMessage>,
    /// Static AMs beyond the queue capacity, refilled from off-chip while
    /// execution runs.
    pub backing: VecDeque<ActiveMessage>,
    pub queue_capacity: usize,
    pub stream: Option<StreamState>,
    /// The one dynamic AM awaiting injection.
    pub outbox: Option<InFlight>,
    /// Delivered messages whose unit or outbox was busy on arrival; the
    /// Input NIC accepts unconditionally and retries these each cycle.
    /// Refusing instead wedges the mesh: a stream can hold the decode unit
    /// for its whole drain, and blocked deliveries then clog the very
    /// buffers its outbox needs.
    pub pending: VecDeque<ActiveMessage>,
    pub units: CycleUnits,
    /// Compiler-written streaming metadata, keyed by base address.
    pub stream_table: BTreeMap<u16, StreamMeta>,
    /// Idle signal history: quiet at the end of each of the two previous
    /// cycles.
    pub was_idle: (bool, bool),
}

impl PeState {
    pub fn new(id: PeId, data_words: usize, queue_capacity: usize) -> PeState {
        PeState {
            id,
            data_memory: vec![0; data_words],
            am_queue: VecDeque::new(),
            backing: VecDeque::new(),
            queue_capacity,
            stream: None,
            outbox: None,
            pending: VecDeque::new(),
            units: CycleUnits::default(),
            stream_table: BTreeMap::new(),
            was_idle: (true, true),
        }
    }

    pub fn begin_cycle(&mut self) {
        self.units = CycleUnits::default();
    }

    /// An intermediate PE may absorb an en-route instruction only when it
    /// is genuinely idle: no unit fired this cycle, nothing awaits
    /// injection or retry, its own compiled work is exhausted, and it was
    /// already quiet over the two previous cycles (the idle detector
    /// carries that much latency, so momentary stalls in a saturated
    /// fabric do not advertise an idle ALU). A PE that still holds static
    /// AMs is merely stalled, not idle.
    pub fn idle_for_enroute(&self) -> bool {
        self.was_idle.0
            && self.was_idle.1
            && !self.units.alu
            && !self.units.decode
            && self.outbox.is_none()
            && self.pending.is_empty()
            && self.am_queue.is_empty()
            && self.backing.is_empty()
            && !self.units.worked
    }

    /// End-of-cycle snapshot feeding the idle-signal history.
    pub fn latch_idle(&mut self) {
        let quiet = !self.units.worked
            && self.outbox.is_none()
            && self.pending.is_empty()
            && self.am_queue.is_empty()
            && self.backing.is_empty()
            && self.stream.is_none();
        self.was_idle = (quiet, self.was_idle.0);
    }

    pub fn has_work(&self) -> bool {
        !self.am_queue.is_empty()
            || !self.backing.is_empty()
            || self.stream.is_some()
            || self.outbox.is_some()
            || !self.pending.is_empty()
    }

    fn check_addr(&self, addr: u32, what: &'static str) -> Result<(), SimFault> {
        if addr as usize >= self.data_memory.len() {
            Err(SimFault {
                pe: self.id,
                addr,
                what,
            })
        } else {
            Ok(())
        }
    }

    pub fn read_word(&self, addr: u16) -> Result<u16, SimFault> {
        self.check_addr(addr as u32, "load out of range")?;
        Ok(self.data_memory[addr as usize])
    }

    /// Dereference mode: the single address-tagged operand is replaced by
    /// the word it points at, its tag flipping to VALUE.
    pub fn decode_dereference(&mut self, msg: &ActiveMessage) -> Result<ActiveMessage, SimFault> {
        let mut out = *msg;
        match (msg.op1_c, msg.op2_c) {
            (OperandTag::Address, OperandTag::Value) => {
                out.op1 = self.read_word(msg.op1)?;
                out.op1_c = OperandTag::Value;
            }
            (OperandTag::Value, OperandTag::Address) => {
                out.op2 = self.read_word(msg.op2)?;
                out.op2_c = OperandTag::Value;
            }
            other => panic!("dereference needs exactly one address operand, got {other:?}"),
        }
        Ok(out)
    }

    /// ACC: read-modify-write accumulate op1 into the result address. The
    /// forwarded message carries the updated word as op1.
    pub fn accumulate(&mut self, msg: &ActiveMessage) -> Result<ActiveMessage, SimFault> {
        self.check_addr(msg.result as u32, "accumulate out of range")?;
        let old = self.data_memory[msg.result as usize] as i16;
        let sum = old.wrapping_add(msg.op1 as i16) as u16;
        self.data_memory[msg.result as usize] = sum;
        let mut out = *msg;
        out.op1 = sum;
        out.op1_c = OperandTag::Value;
        Ok(out)
    }

    /// Starts streaming mode for a STREAM message. op2 carries the base
    /// address; the compiler's stream table supplies count and per-element
    /// coordinates. Faults when the window leaves the data array.
    pub fn start_stream(&mut self, msg: &ActiveMessage) -> Result<(), SimFault> {
        assert!(self.stream.is_none(), "decode unit already streaming");
        let base = msg.op2;
        let meta = self
            .stream_table
            .get(&base)
            .cloned()
            .unwrap_or_else(|| panic!("PE{}: no stream metadata at base {base}", self.id));
        assert!(meta.count >= 1, "stream count must be positive");
        self.check_addr(base as u32 + meta.count as u32 - 1, "stream out of range")?;
        self.stream = Some(StreamState {
            template: *msg,
            base,
            meta,
            next: 0,
        });
        Ok(())
    }

    /// Emits the next derived message of the active stream: the streamed
    /// word replaces op2 as a value, and the element coordinate offsets the
    /// remaining address operand (op1 when it is an address, otherwise the
    /// result slot).
    pub fn stream_derive(&mut self) -> Result<ActiveMessage, SimFault> {
        let state = self.stream.as_mut().expect("no active stream");
        let t = state.next;
        let addr = state.base + t;
        let word = self.data_memory[addr as usize];
        let coord = state.meta.coords.get(t as usize).copied().unwrap_or(t);
        let mut out = state.template;
        out.op2 = word;
        out.op2_c = OperandTag::Value;
        if state.template.op1_c.is_address() {
            out.op1 = state.template.op1.wrapping_add(coord);
        } else if state.template.res_c.is_address() {
            out.result = state.template.result.wrapping_add(coord);
        }
        state.next += 1;
        if state.done() {
            self.stream = None;
        }
        Ok(out)
    }

    /// Tops the AM queue back up from the off-chip backing store. Returns
    /// the number of entries moved, bounded by `budget`.
    pub fn refill_queue(&mut self, budget: usize) -> usize {
        let mut moved = 0;
        while moved < budget && self.am_queue.len() < self.queue_capacity {
            match self.backing.pop_front() {
                Some(m) => {
                    self.am_queue.push_back(m);
                    moved += 1;
                }
                None => break,
            }
        }
        moved
    }
}

/// Result of finishing one instruction: either the chain retires or the
/// message morphs into its successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOutcome {
    Retired,
    Forward(ActiveMessage),
}

/// Fuses a completed message with its next configuration entry: opcode,
/// tags and n_pc come from config[n_pc]. `rotate` consumes the leading
/// destination; it applies when a memory-class instruction executed at its
/// destination, never for en-route ALU execution (the message still has to
/// reach its pending sites).
pub fn morph_or_retire(table: &ConfigTable, msg: &ActiveMessage, rotate: bool) -> MorphOutcome {
    if msg.n_pc == CHAIN_END {
        return MorphOutcome::Retired;
    }
    let entry = table.entry(msg.n_pc);
    let mut out = *msg;
    out.opcode = entry.opcode;
    out.n_pc = entry.n_pc;
    out.res_c = entry.res_c;
    out.op1_c = entry.op1_c;
    out.op2_c = entry.op2_c;
    if rotate {
        out = crate::am::rotate_destinations(&out);
    }
    MorphOutcome::Forward(out)
}
