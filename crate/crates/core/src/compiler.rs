//! Kernel lowering: descriptor -> replicated configuration table, plus
//! static-AM generation from placement data (the static compiler and the
//! lightweight runtime manager).
//!
//! Descriptors stand in for the post-front-end dataflow graph: each
//! template is one instruction of the per-iteration body, with dependency
//! edges between templates.

use crate::am::{
    am_to_wire, encode_config, ActiveMessage, ConfigEntry, Opcode, OperandTag, CHAIN_END,
};
use crate::tensor::{CsrMatrix, PeId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

pub const CONFIG_CAPACITY: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompileError {
    /// Dependency edges form a cycle; the descriptor is invalid.
    CycleDetected,
    /// More templates than the 8-entry configuration memory holds.
    CapacityExceeded { templates: usize },
    EmptyDescriptor,
    /// A referenced tensor coordinate has no placement.
    UnplacedElement { tensor: &'static str, row: usize, col: usize },
    DimensionMismatch(String),
}

impl fmt::Display for CompileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompileError::CycleDetected => write!(f, "dependency edges form a cycle"),
            CompileError::CapacityExceeded { templates } => write!(
                f,
                "{templates} templates exceed the {CONFIG_CAPACITY}-entry configuration memory"
            ),
            CompileError::EmptyDescriptor => write!(f, "descriptor has no templates"),
            CompileError::UnplacedElement { tensor, row, col } => {
                write!(f, "{tensor}({row},{col}) referenced but never placed")
            }
            CompileError::DimensionMismatch(m) => write!(f, "dimension mismatch: {m}"),
        }
    }
}

impl std::error::Error for CompileError {}

/// One instruction template: the opcode plus the operand tags the message
/// carries while this step is pending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelTemplate {
    pub opcode: Opcode,
    pub res_c: OperandTag,
    pub op1_c: OperandTag,
    pub op2_c: OperandTag,
}

impl KernelTemplate {
    pub fn new(opcode: Opcode, res_c: OperandTag, op1_c: OperandTag, op2_c: OperandTag) -> Self {
        KernelTemplate {
            opcode,
            res_c,
            op1_c,
            op2_c,
        }
    }
}

/// Per-iteration instruction DAG for one kernel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelDescriptor {
    pub name: String,
    pub templates: Vec<KernelTemplate>,
    /// (from, to) template-index pairs.
    pub edges: Vec<(usize, usize)>,
}

impl KernelDescriptor {
    /// Straight-line chain in declaration order.
    pub fn chain(name: &str, templates: Vec<KernelTemplate>) -> KernelDescriptor {
        let edges = (1..templates.len()).map(|i| (i - 1, i)).collect();
        KernelDescriptor {
            name: name.to_string(),
            templates,
            edges,
        }
    }

    pub fn from_json(text: &str) -> Result<KernelDescriptor, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serialization cannot fail")
    }
}

/// ASAP schedule: templates ordered by level (1 + max predecessor level,
/// sources at 0), declaration order breaking ties. Returns the template
/// order and the level of each template.
pub fn asap_order(desc: &KernelDescriptor) -> Result<(Vec<usize>, Vec<usize>), CompileError> {
    let n = desc.templates.len();
    let mut indegree = vec![0usize; n];
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(from, to) in &desc.edges {
        assert!(from < n && to < n, "edge endpoint out of range");
        indegree[to] += 1;
        succs[from].push(to);
    }

    let mut level = vec![0usize; n];
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut done = 0usize;
    while let Some(i) = ready.pop() {
        done += 1;
        for &s in &succs[i] {
            level[s] = level[s].max(level[i] + 1);
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(s);
            }
        }
    }
    if done != n {
        return Err(CompileError::CycleDetected);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (level[i], i));
    Ok((order, level))
}

/// The replicated configuration memory: up to 8 entries, identical on
/// every PE, chained through `n_pc` starting at entry 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigTable {
    pub entries: Vec<ConfigEntry>,
}

impl ConfigTable {
    pub fn entry(&self, n_pc: u8) -> ConfigEntry {
        self.entries[n_pc as usize]
    }

    /// Length of the chain beginning at entry 0.
    pub fn chain_len(&self) -> usize {
        let mut len = 0;
        let mut pc = 0u8;
        loop {
            len += 1;
            pc = self.entries[pc as usize].n_pc;
            if pc == CHAIN_END {
                return len;
            }
            assert!((pc as usize) < self.entries.len(), "n_pc out of table");
            assert!(len <= CONFIG_CAPACITY, "config chain cycles");
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialization cannot fail")
    }

    pub fn words(&self) -> Vec<u16> {
        self.entries.iter().map(encode_config).collect()
    }
}

/// Lowers a descriptor: entry k holds the k-th ASAP-ordered template's
/// opcode and tags; n_pc links each entry to the next, the last holding
/// CHAIN_END.
pub fn lower_kernel(desc: &KernelDescriptor) -> Result<ConfigTable, CompileError> {
    if desc.templates.is_empty() {
        return Err(CompileError::EmptyDescriptor);
    }
    let (order, _) = asap_order(desc)?;
    if order.len() > CONFIG_CAPACITY {
        return Err(CompileError::CapacityExceeded {
            templates: order.len(),
        });
    }
    let last = order.len() - 1;
    let entries = order
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let tpl = &desc.templates[t];
            ConfigEntry {
                opcode: tpl.opcode,
                n_pc: if k == last { CHAIN_END } else { (k + 1) as u8 },
                res_c: tpl.res_c,
                op1_c: tpl.op1_c,
                op2_c: tpl.op2_c,
            }
        })
        .collect();
    Ok(ConfigTable { entries })
}

/// Destination and payload slots for one static AM, resolved from the
/// placement maps by the kernel builder.
#[derive(Debug, Clone, Copy)]
pub struct AmFields {
    pub op1: u16,
    /// PE holding the dependent second operand.
    pub r1: PeId,
    /// Local address of that operand (or stream base).
    pub op2: u16,
    /// PE holding the result element.
    pub r2: PeId,
    /// Local address of the result element.
    pub result: u16,
    /// Third-tensor PE where the kernel has one; builders pass r2 otherwise.
    pub r3: PeId,
}

/// Precompiled AM-queue contents, one ordered sequence per PE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticAmStream {
    pub per_pe: Vec<Vec<ActiveMessage>>,
}

impl StaticAmStream {
    pub fn total(&self) -> usize {
        self.per_pe.iter().map(Vec::len).sum()
    }

    /// Wire dump: one hex-encoded 9-byte word per line, grouped by PE.
    pub fn to_wire_dump(&self) -> String {
        let mut out = String::new();
        for (pe, stream) in self.per_pe.iter().enumerate() {
            for msg in stream {
                let bytes = am_to_wire(msg);
                out.push_str(&format!("pe{pe} "));
                for b in bytes {
                    out.push_str(&format!("{b:02x}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Runtime-manager static-AM generation: one message per first-tensor
/// nonzero, enqueued on the PE owning that nonzero, carrying entry 0's
/// opcode and tags and entry 0's successor as its `n_pc`. `fields` resolves
/// placements per nonzero; returning `Ok(None)` skips the element (the
/// compile-time early termination for absent partners).
pub fn generate_static_ams<F>(
    first: &CsrMatrix,
    queue_owner: &dyn Fn(usize) -> PeId,
    table: &ConfigTable,
    pe_count: usize,
    mut fields: F,
) -> Result<StaticAmStream, CompileError>
where
    F: FnMut(usize, usize, i16) -> Result<Option<AmFields>, CompileError>,
{
    let entry0 = table.entry(0);
    let mut per_pe = vec![Vec::new(); pe_count];
    for (r, c, v) in first.iter() {
        let Some(slots) = fields(r, c, v)? else {
            continue;
        };
        let msg = ActiveMessage {
            r1: slots.r1,
            r2: slots.r2,
            r3: slots.r3,
            n_pc: entry0.n_pc,
            opcode: entry0.opcode,
            res_c: entry0.res_c,
            op1_c: entry0.op1_c,
            op2_c: entry0.op2_c,
            result: slots.result,
            op1: slots.op1,
            op2: slots.op2,
        };
        per_pe[queue_owner(r) as usize].push(msg);
    }
    Ok(StaticAmStream { per_pe })
}

/// Streaming-mode side metadata the compiler writes next to a PE's data:
/// element count and the coordinate of each streamed word, as the scanner
/// hardware would produce them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamMeta {
    pub count: u16,
    pub coords: Vec<u16>,
}

/// Per-PE map from stream base address to its metadata.
pub type StreamTable = BTreeMap<(PeId, u16), StreamMeta>;

/// Everything the machine needs loaded before execution starts.
#[derive(Debug, Clone)]
pub struct CompiledProgram {
    pub table: ConfigTable,
    pub static_ams: StaticAmStream,
    /// Per-PE (address, word) preload list for the data memories.
    pub memory_init: Vec<Vec<(u16, u16)>>,
    pub stream_table: StreamTable,
}
