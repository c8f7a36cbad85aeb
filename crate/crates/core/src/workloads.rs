//! Kernel builders and independent reference oracles for SpMV, SpMSpM,
//! SpM+SpM, SDDMM and dense MatMul.
//!
//! A builder partitions the tensors, places them across the PE memories,
//! lowers the kernel's instruction chain into the configuration table and
//! generates the static-AM queues. The oracle for each kernel is a direct
//! reference computation on the same quantized values, touching none of
//! the simulator machinery, so final memories compare bit-exactly.

use crate::am::OperandTag::{Address, Value};
use crate::am::Opcode;
use crate::compiler::{
    generate_static_ams, lower_kernel, AmFields, CompileError, CompiledProgram, KernelDescriptor,
    KernelTemplate, StreamMeta, StreamTable,
};
use crate::engine::Machine;
use crate::tensor::{
    cluster_rows_dissimilarity, partition_nnz_balanced, place_partitions, scan_row_coordinates,
    CsrMatrix, DenseMatrix, PartitionMap, PeId, PlacementError, PlacementMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    NnzBalanced,
    Dissimilarity,
}

impl std::str::FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Placement, String> {
        match s {
            "nnz_balanced" => Ok(Placement::NnzBalanced),
            "dissimilarity" => Ok(Placement::Dissimilarity),
            other => Err(format!(
                "unknown placement {other:?} (nnz_balanced | dissimilarity)"
            )),
        }
    }
}

#[derive(Debug)]
pub enum BuildError {
    Compile(CompileError),
    Placement(PlacementError),
}

impl fmt::Display for BuildError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BuildError::Compile(e) => write!(f, "{e}"),
            BuildError::Placement(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for BuildError {}

impl From<CompileError> for BuildError {
    fn from(e: CompileError) -> Self {
        BuildError::Compile(e)
    }
}

impl From<PlacementError> for BuildError {
    fn from(e: PlacementError) -> Self {
        BuildError::Placement(e)
    }
}

fn dim_err(msg: String) -> BuildError {
    BuildError::Compile(CompileError::DimensionMismatch(msg))
}

/// A compiled kernel plus the oracle-computed words every output cell must
/// hold when the run completes.
#[derive(Debug, Clone)]
pub struct BuiltKernel {
    pub name: String,
    pub descriptor: KernelDescriptor,
    pub program: CompiledProgram,
    /// (pe, address, expected word) per output element.
    pub expected: Vec<(PeId, u16, u16)>,
}

impl BuiltKernel {
    /// Compares final PE memories against the oracle values.
    pub fn verify(&self, machine: &Machine) -> Result<(), String> {
        for &(pe, addr, want) in &self.expected {
            let got = machine.pes[pe as usize].data_memory[addr as usize];
            if got != want {
                return Err(format!(
                    "{}: PE{pe}[{addr}] holds {:#06x}, oracle says {:#06x}",
                    self.name, got, want
                ));
            }
        }
        Ok(())
    }
}

/// Tensor slots used to qualify placement coordinates.
const SLOT_OUT: u8 = 0;
const SLOT_CO: u8 = 1;
const SLOT_CO2: u8 = 2;

/// Wrapping 16-bit helpers shared by the oracles.
fn wmul(a: i16, b: i16) -> i16 {
    a.wrapping_mul(b)
}

fn wadd(a: i16, b: i16) -> i16 {
    a.wrapping_add(b)
}

pub fn oracle_spmv(x: &CsrMatrix, y: &[i16]) -> Vec<i16> {
    let mut z = vec![0i16; x.rows];
    for (r, c, v) in x.iter() {
        z[r] = wadd(z[r], wmul(v, y[c]));
    }
    z
}

/// Row-wise reference product with a dense accumulator row, mirroring the
/// machine's dense output allocation.
pub fn oracle_spmspm(a: &CsrMatrix, b: &CsrMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zero(a.rows, b.cols);
    for (r, k, av) in a.iter() {
        for (j, bv) in b.row_entries(k) {
            let cell = out.at(r, j);
            out.set(r, j, wadd(cell, wmul(av, bv)));
        }
    }
    out
}

pub fn oracle_spadd(a: &CsrMatrix, b: &CsrMatrix) -> BTreeMap<(usize, usize), i16> {
    let mut out = BTreeMap::new();
    for (r, c, v) in a.iter() {
        let e = out.entry((r, c)).or_insert(0i16);
        *e = wadd(*e, v);
    }
    for (r, c, v) in b.iter() {
        let e = out.entry((r, c)).or_insert(0i16);
        *e = wadd(*e, v);
    }
    out
}

/// Dense product evaluated only at the mask's nonzero coordinates.
pub fn oracle_sddmm(s: &CsrMatrix, u: &DenseMatrix, v: &DenseMatrix) -> BTreeMap<(usize, usize), i16> {
    let d = u.cols;
    let mut out = BTreeMap::new();
    for (r, c, _) in s.iter() {
        let mut dot = 0i16;
        for t in 0..d {
            dot = wadd(dot, wmul(u.at(r, t), v.at(t, c)));
        }
        out.insert((r, c), dot);
    }
    out
}

/// Plain triple loop, structurally unlike the machine's row-wise streams.
pub fn oracle_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zero(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0i16;
            for k in 0..a.cols {
                acc = wadd(acc, wmul(a.at(i, k), b.at(k, j)));
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Uniform contiguous k-way split of `len` positions.
fn uniform_boundaries(len: usize, n: usize) -> Vec<usize> {
    let chunk = len.div_ceil(n).max(1);
    let mut b = Vec::with_capacity(n + 1);
    b.push(0);
    for i in 1..=n {
        b.push((i * chunk).min(len));
    }
    b
}

fn part_of_uniform(boundaries: &[usize], pos: usize) -> usize {
    boundaries[1..].partition_point(|&b| b <= pos)
}

/// Chooses the first-tensor row partition per the placement strategy.
fn first_tensor_parts(
    x: &CsrMatrix,
    pes: usize,
    placement: Placement,
    owner: &dyn Fn(usize) -> usize,
) -> PartitionMap {
    match placement {
        Placement::NnzBalanced => partition_nnz_balanced(x, pes),
        Placement::Dissimilarity => cluster_rows_dissimilarity(x, pes, owner),
    }
}

/// Affinity of each first-tensor partition with each output block: the
/// number of its nonzeros that feed rows of that block.
fn row_affinity(
    x: &CsrMatrix,
    parts: &PartitionMap,
    out_block_of_row: &dyn Fn(usize) -> usize,
    pes: usize,
) -> Vec<Vec<usize>> {
    let mut shared = vec![vec![0usize; pes]; pes];
    for r in 0..x.rows {
        shared[parts.part_of(r)][out_block_of_row(r)] += x.row_nnz(r);
    }
    shared
}

pub fn build_spmv(
    x: &CsrMatrix,
    y: &[i16],
    pes: usize,
    mem_words: usize,
    placement: Placement,
) -> Result<BuiltKernel, BuildError> {
    if y.len() != x.cols {
        return Err(dim_err(format!(
            "vector has {} entries for a {}-column matrix",
            y.len(),
            x.cols
        )));
    }
    let descriptor = KernelDescriptor::chain(
        "spmv",
        vec![
            KernelTemplate::new(Opcode::Load, Address, Value, Address),
            KernelTemplate::new(Opcode::Mul, Address, Value, Value),
            KernelTemplate::new(Opcode::Acc, Address, Value, Value),
        ],
    );
    let table = lower_kernel(&descriptor)?;

    // Output rows follow the matrix's nnz-balanced split, block i on PE i.
    let z_parts = partition_nnz_balanced(x, pes);
    let z_block = |r: usize| z_parts.part_of(r);

    let mut pm = PlacementMap::new();
    let mut memory_init = vec![Vec::new(); pes];
    for pe in 0..pes {
        for r in z_parts.rows_of(pe, x.rows) {
            let addr = pm.place((SLOT_OUT, r, 0), pe as PeId, mem_words)?;
            memory_init[pe].push((addr, 0u16));
        }
    }

    // The dense vector splits uniformly; its partitions land by affinity
    // with the output blocks they feed.
    let y_bounds = uniform_boundaries(y.len(), pes);
    let mut y_affinity = vec![vec![0usize; pes]; pes];
    for (r, c, _) in x.iter() {
        y_affinity[part_of_uniform(&y_bounds, c)][z_block(r)] += 1;
    }
    let y_pe = place_partitions(&y_affinity);
    for q in 0..pes {
        let pe = y_pe[q];
        for c in y_bounds[q]..y_bounds[q + 1] {
            let addr = pm.place((SLOT_CO, 0, c), pe, mem_words)?;
            memory_init[pe as usize].push((addr, y[c] as u16));
        }
    }

    let y_owner = |c: usize| y_pe[part_of_uniform(&y_bounds, c)] as usize;
    let x_parts = first_tensor_parts(x, pes, placement, &y_owner);
    let x_pe = place_partitions(&row_affinity(x, &x_parts, &z_block, pes));
    let queue_owner = |r: usize| x_pe[x_parts.part_of(r)];

    let static_ams = generate_static_ams(x, &queue_owner, &table, pes, |r, c, v| {
        let (y_pe, y_addr) = pm.lookup((SLOT_CO, 0, c)).ok_or(CompileError::UnplacedElement {
            tensor: "vec",
            row: 0,
            col: c,
        })?;
        let (z_pe, z_addr) = pm.lookup((SLOT_OUT, r, 0)).ok_or(CompileError::UnplacedElement {
            tensor: "out",
            row: r,
            col: 0,
        })?;
        Ok(Some(AmFields {
            op1: v as u16,
            r1: y_pe,
            op2: y_addr,
            r2: z_pe,
            result: z_addr,
            r3: z_pe,
        }))
    })?;

    let z = oracle_spmv(x, y);
    let expected = (0..x.rows)
        .map(|r| {
            let (pe, addr) = pm.lookup((SLOT_OUT, r, 0)).unwrap();
            (pe, addr, z[r] as u16)
        })
        .collect();

    Ok(BuiltKernel {
        name: "spmv".into(),
        descriptor,
        program: CompiledProgram {
            table,
            static_ams,
            memory_init,
            stream_table: StreamTable::new(),
        },
        expected,
    })
}

/// Shared machinery for the row-wise product kernels: SpMSpM over CSR
/// inputs and dense MatMul (every element explicit).
fn build_rowwise_product(
    name: &str,
    a: &CsrMatrix,
    b: &CsrMatrix,
    pes: usize,
    mem_words: usize,
    placement: Placement,
) -> Result<BuiltKernel, BuildError> {
    if a.cols != b.rows {
        return Err(dim_err(format!(
            "inner dimensions disagree: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let descriptor = KernelDescriptor::chain(
        name,
        vec![
            KernelTemplate::new(Opcode::Stream, Address, Value, Address),
            KernelTemplate::new(Opcode::Mul, Address, Value, Value),
            KernelTemplate::new(Opcode::Acc, Address, Value, Value),
        ],
    );
    let table = lower_kernel(&descriptor)?;

    // Output rows are dense accumulator arrays on the PE of their block.
    let z_parts = partition_nnz_balanced(a, pes);
    let z_block = |r: usize| z_parts.part_of(r);
    let mut pm = PlacementMap::new();
    let mut memory_init = vec![Vec::new(); pes];
    let mut out_base = vec![0u16; a.rows];
    for pe in 0..pes {
        for r in z_parts.rows_of(pe, a.rows) {
            for j in 0..b.cols {
                let addr = pm.place((SLOT_OUT, r, j), pe as PeId, mem_words)?;
                if j == 0 {
                    out_base[r] = addr;
                }
                memory_init[pe].push((addr, 0u16));
            }
        }
    }

    // B rows split by nonzero balance and land by affinity: a partition's
    // weight toward block i counts the B words streamed on behalf of i's
    // output rows.
    let b_parts = partition_nnz_balanced(b, pes);
    let mut b_affinity = vec![vec![0usize; pes]; pes];
    for (r, k, _) in a.iter() {
        b_affinity[b_parts.part_of(k)][z_block(r)] += b.row_nnz(k);
    }
    let b_pe = place_partitions(&b_affinity);
    let mut b_base = vec![0u16; b.rows];
    let mut stream_table = StreamTable::new();
    for q in 0..pes {
        let pe = b_pe[q];
        for k in b_parts.rows_of(q, b.rows) {
            if b.row_nnz(k) == 0 {
                continue;
            }
            let coords = scan_row_coordinates(b, k);
            let mut first = None;
            for (j, w) in b.row_entries(k) {
                let addr = pm.place((SLOT_CO, k, j), pe, mem_words)?;
                first.get_or_insert(addr);
                memory_init[pe as usize].push((addr, w as u16));
            }
            b_base[k] = first.unwrap();
            stream_table.insert(
                (pe, b_base[k]),
                StreamMeta {
                    count: b.row_nnz(k) as u16,
                    coords: coords.iter().map(|&c| c as u16).collect(),
                },
            );
        }
    }

    let b_owner = |k: usize| b_pe[b_parts.part_of(k)] as usize;
    let a_parts = first_tensor_parts(a, pes, placement, &b_owner);
    let a_pe = place_partitions(&row_affinity(a, &a_parts, &z_block, pes));
    let queue_owner = |r: usize| a_pe[a_parts.part_of(r)];

    let static_ams = generate_static_ams(a, &queue_owner, &table, pes, |r, k, v| {
        if b.row_nnz(k) == 0 {
            // No partner row: the chain is dropped at compile time.
            return Ok(None);
        }
        let stream_pe = b_pe[b_parts.part_of(k)];
        let (z_pe, _) = pm.lookup((SLOT_OUT, r, 0)).unwrap();
        Ok(Some(AmFields {
            op1: v as u16,
            r1: stream_pe,
            op2: b_base[k],
            r2: z_pe,
            result: out_base[r],
            r3: z_pe,
        }))
    })?;

    let z = oracle_spmspm(a, b);
    let mut expected = Vec::with_capacity(a.rows * b.cols);
    for r in 0..a.rows {
        for j in 0..b.cols {
            let (pe, addr) = pm.lookup((SLOT_OUT, r, j)).unwrap();
            expected.push((pe, addr, z.at(r, j) as u16));
        }
    }

    Ok(BuiltKernel {
        name: name.into(),
        descriptor,
        program: CompiledProgram {
            table,
            static_ams,
            memory_init,
            stream_table,
        },
        expected,
    })
}

pub fn build_spmspm(
    a: &CsrMatrix,
    b: &CsrMatrix,
    pes: usize,
    mem_words: usize,
    placement: Placement,
) -> Result<BuiltKernel, BuildError> {
    build_rowwise_product("spmspm", a, b, pes, mem_words, placement)
}

pub fn build_spadd(
    a: &CsrMatrix,
    b: &CsrMatrix,
    pes: usize,
    mem_words: usize,
    placement: Placement,
) -> Result<BuiltKernel, BuildError> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(dim_err(format!(
            "cannot add {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let descriptor = KernelDescriptor::chain(
        "spadd",
        vec![KernelTemplate::new(Opcode::Acc, Address, Value, Value)],
    );
    let table = lower_kernel(&descriptor)?;

    // Output pattern is the union; B preloads into the output cells and
    // A's nonzeros accumulate on top.
    let union_triples: Vec<(usize, usize, i16)> = {
        let mut cells: BTreeMap<(usize, usize), i16> = BTreeMap::new();
        for (r, c, _) in a.iter() {
            cells.entry((r, c)).or_insert(0);
        }
        for (r, c, v) in b.iter() {
            *cells.entry((r, c)).or_insert(0) = v;
        }
        cells.into_iter().map(|((r, c), v)| (r, c, v)).collect()
    };
    let union = CsrMatrix::from_triples(a.rows, a.cols, &union_triples);

    let z_parts = partition_nnz_balanced(&union, pes);
    let z_block = |r: usize| z_parts.part_of(r);
    let mut pm = PlacementMap::new();
    let mut memory_init = vec![Vec::new(); pes];
    for pe in 0..pes {
        for r in z_parts.rows_of(pe, union.rows) {
            for (c, v) in union.row_entries(r) {
                let addr = pm.place((SLOT_OUT, r, c), pe as PeId, mem_words)?;
                memory_init[pe].push((addr, v as u16));
            }
        }
    }

    let out_owner = |c: usize| c % pes.max(1);
    let a_parts = first_tensor_parts(a, pes, placement, &out_owner);
    let a_pe = place_partitions(&row_affinity(a, &a_parts, &z_block, pes));
    let queue_owner = |r: usize| a_pe[a_parts.part_of(r)];

    let static_ams = generate_static_ams(a, &queue_owner, &table, pes, |r, c, v| {
        let (pe, addr) = pm.lookup((SLOT_OUT, r, c)).ok_or(CompileError::UnplacedElement {
            tensor: "out",
            row: r,
            col: c,
        })?;
        Ok(Some(AmFields {
            op1: v as u16,
            r1: pe,
            op2: 0,
            r2: pe,
            result: addr,
            r3: pe,
        }))
    })?;

    let sums = oracle_spadd(a, b);
    let expected = sums
        .iter()
        .map(|(&(r, c), &v)| {
            let (pe, addr) = pm.lookup((SLOT_OUT, r, c)).unwrap();
            (pe, addr, v as u16)
        })
        .collect();

    Ok(BuiltKernel {
        name: "spadd".into(),
        descriptor,
        program: CompiledProgram {
            table,
            static_ams,
            memory_init,
            stream_table: StreamTable::new(),
        },
        expected,
    })
}

pub fn build_sddmm(
    s: &CsrMatrix,
    u: &DenseMatrix,
    v: &DenseMatrix,
    pes: usize,
    mem_words: usize,
    placement: Placement,
) -> Result<BuiltKernel, BuildError> {
    if u.rows != s.rows || v.cols != s.cols || u.cols != v.rows {
        return Err(dim_err(format!(
            "mask {}x{} against {}x{} and {}x{}",
            s.rows, s.cols, u.rows, u.cols, v.rows, v.cols
        )));
    }
    let d = u.cols;
    let descriptor = KernelDescriptor::chain(
        "sddmm",
        vec![
            KernelTemplate::new(Opcode::Stream, Address, Address, Address),
            KernelTemplate::new(Opcode::Load, Address, Address, Value),
            KernelTemplate::new(Opcode::Mul, Address, Value, Value),
            KernelTemplate::new(Opcode::Acc, Address, Value, Value),
        ],
    );
    let table = lower_kernel(&descriptor)?;

    let z_parts = partition_nnz_balanced(s, pes);
    let z_block = |r: usize| z_parts.part_of(r);
    let mut pm = PlacementMap::new();
    let mut memory_init = vec![Vec::new(); pes];
    for pe in 0..pes {
        for r in z_parts.rows_of(pe, s.rows) {
            for (c, _) in s.row_entries(r) {
                let addr = pm.place((SLOT_OUT, r, c), pe as PeId, mem_words)?;
                memory_init[pe].push((addr, 0u16));
            }
        }
    }

    // U rows split uniformly and stream locally; V columns split uniformly
    // and are stored column-contiguous for the dereference leg.
    let u_bounds = uniform_boundaries(u.rows, pes);
    let mut u_affinity = vec![vec![0usize; pes]; pes];
    for (r, _, _) in s.iter() {
        u_affinity[part_of_uniform(&u_bounds, r)][z_block(r)] += d;
    }
    let u_pe = place_partitions(&u_affinity);
    let mut u_base = vec![0u16; u.rows];
    let mut stream_table = StreamTable::new();
    for q in 0..pes {
        let pe = u_pe[q];
        for r in u_bounds[q]..u_bounds[q + 1] {
            for t in 0..d {
                let addr = pm.place((SLOT_CO, r, t), pe, mem_words)?;
                if t == 0 {
                    u_base[r] = addr;
                }
                memory_init[pe as usize].push((addr, u.at(r, t) as u16));
            }
            if d > 0 {
                stream_table.insert(
                    (pe, u_base[r]),
                    StreamMeta {
                        count: d as u16,
                        coords: (0..d as u16).collect(),
                    },
                );
            }
        }
    }

    let v_bounds = uniform_boundaries(v.cols, pes);
    let mut v_affinity = vec![vec![0usize; pes]; pes];
    for (r, c, _) in s.iter() {
        v_affinity[part_of_uniform(&v_bounds, c)][z_block(r)] += d;
    }
    let v_pe = place_partitions(&v_affinity);
    let mut v_base = vec![0u16; v.cols];
    for q in 0..pes {
        let pe = v_pe[q];
        for c in v_bounds[q]..v_bounds[q + 1] {
            for t in 0..d {
                let addr = pm.place((SLOT_CO2, t, c), pe, mem_words)?;
                if t == 0 {
                    v_base[c] = addr;
                }
                memory_init[pe as usize].push((addr, v.at(t, c) as u16));
            }
        }
    }

    let u_owner = |r: usize| u_pe[part_of_uniform(&u_bounds, r)] as usize;
    let s_parts = first_tensor_parts(s, pes, placement, &u_owner);
    let s_pe = place_partitions(&row_affinity(s, &s_parts, &z_block, pes));
    let queue_owner = |r: usize| s_pe[s_parts.part_of(r)];

    let static_ams = generate_static_ams(s, &queue_owner, &table, pes, |r, c, _| {
        if d == 0 {
            return Ok(None);
        }
        let (o_pe, o_addr) = pm.lookup((SLOT_OUT, r, c)).unwrap();
        Ok(Some(AmFields {
            op1: v_base[c],
            r1: u_pe[part_of_uniform(&u_bounds, r)],
            op2: u_base[r],
            r2: v_pe[part_of_uniform(&v_bounds, c)],
            result: o_addr,
            r3: o_pe,
        }))
    })?;

    let dots = oracle_sddmm(s, u, v);
    let expected = dots
        .iter()
        .map(|(&(r, c), &val)| {
            let (pe, addr) = pm.lookup((SLOT_OUT, r, c)).unwrap();
            (pe, addr, val as u16)
        })
        .collect();

    Ok(BuiltKernel {
        name: "sddmm".into(),
        descriptor,
        program: CompiledProgram {
            table,
            static_ams,
            memory_init,
            stream_table,
        },
        expected,
    })
}

fn dense_to_full_csr(m: &DenseMatrix) -> CsrMatrix {
    let triples: Vec<(usize, usize, i16)> = (0..m.rows)
        .flat_map(|r| (0..m.cols).map(move |c| (r, c, m.at(r, c))))
        .collect();
    CsrMatrix::from_triples(m.rows, m.cols, &triples)
}

pub fn build_dense_matmul(
    a: &DenseMatrix,
    b: &DenseMatrix,
    pes: usize,
    mem_words: usize,
    placement: Placement,
) -> Result<BuiltKernel, BuildError> {
    if a.cols != b.rows {
        return Err(dim_err(format!(
            "inner dimensions disagree: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    // Every element is treated as a nonzero; the row-wise chain machinery
    // then runs unchanged.
    let ac = dense_to_full_csr(a);
    let bc = dense_to_full_csr(b);
    let mut built = build_rowwise_product("matmul", &ac, &bc, pes, mem_words, placement)?;
    let reference = oracle_matmul(a, b);
    for (i, &(_, _, word)) in built.expected.iter().enumerate() {
        let (r, j) = (i / b.cols, i % b.cols);
        assert_eq!(
            word as i16,
            reference.at(r, j),
            "row-wise and triple-loop references disagree"
        );
    }
    built.name = "matmul".into();
    Ok(built)
}

/// Seeded random CSR with independent per-cell occupancy.
pub fn random_csr(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> CsrMatrix {
    let mut triples = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if rng.gen_bool(density) {
                triples.push((r, c, rng.gen_range(-50i16..=50)));
            }
        }
    }
    CsrMatrix::from_triples(rows, cols, &triples)
}

pub fn random_dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix {
        rows,
        cols,
        vals: (0..rows * cols).map(|_| rng.gen_range(-50i16..=50)).collect(),
    }
}

pub fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<i16> {
    (0..len).map(|_| rng.gen_range(-50i16..=50)).collect()
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The skew benchmark: one output row collects more than half of all
/// accumulations while the rest of the matrix stays thin.
pub fn skew_spmv_instance(seed: u64) -> (CsrMatrix, Vec<i16>) {
    let mut rng = seeded_rng(seed);
    let rows = 32;
    let cols = 64;
    let mut triples = Vec::new();
    for c in 0..cols {
        triples.push((0, c, rng.gen_range(-9i16..=9)));
    }
    for r in 1..rows {
        let c0 = rng.gen_range(0..cols / 2);
        let c1 = rng.gen_range(cols / 2..cols);
        triples.push((r, c0, rng.gen_range(-9i16..=9)));
        triples.push((r, c1, rng.gen_range(-9i16..=9)));
    }
    let x = CsrMatrix::from_triples(rows, cols, &triples);
    let hot = x.row_nnz(0);
    assert!(hot * 2 >= x.nnz(), "hot row must carry at least half the accumulations");
    let y = random_vector(&mut rng, cols);
    (x, y)
}

/// Slices a SpMV problem into row tiles, each compiled independently.
pub fn build_spmv_tiles(
    x: &CsrMatrix,
    y: &[i16],
    tile_rows: usize,
    pes: usize,
    mem_words: usize,
    placement: Placement,
) -> Result<Vec<BuiltKernel>, BuildError> {
    assert!(tile_rows >= 1);
    let mut tiles = Vec::new();
    let mut r0 = 0;
    while r0 < x.rows {
        let r1 = (r0 + tile_rows).min(x.rows);
        tiles.push(build_spmv(&x.row_slice(r0, r1), y, pes, mem_words, placement)?);
        r0 = r1;
    }
    Ok(tiles)
}
