//! CSR tensors, nnz-balanced and dissimilarity-aware partitioning, element
//! placement, and the bit-vector metadata scanner.

pub mod mtx;

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Compressed sparse row matrix with 16-bit word values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub rowptr: Vec<usize>,
    pub col: Vec<usize>,
    pub vals: Vec<i16>,
}

impl CsrMatrix {
    pub fn empty(rows: usize, cols: usize) -> CsrMatrix {
        CsrMatrix {
            rows,
            cols,
            rowptr: vec![0; rows + 1],
            col: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Builds from coordinate triples; duplicates within a row are summed
    /// (wrapping), entries sorted by (row, col).
    pub fn from_triples(rows: usize, cols: usize, triples: &[(usize, usize, i16)]) -> CsrMatrix {
        let mut per_row: Vec<BTreeMap<usize, i16>> = vec![BTreeMap::new(); rows];
        for &(r, c, v) in triples {
            assert!(r < rows && c < cols, "triple ({r},{c}) out of bounds");
            let slot = per_row[r].entry(c).or_insert(0);
            *slot = slot.wrapping_add(v);
        }
        let mut rowptr = Vec::with_capacity(rows + 1);
        let mut col = Vec::new();
        let mut vals = Vec::new();
        rowptr.push(0);
        for row in &per_row {
            for (&c, &v) in row {
                col.push(c);
                vals.push(v);
            }
            rowptr.push(col.len());
        }
        CsrMatrix {
            rows,
            cols,
            rowptr,
            col,
            vals,
        }
    }

    pub fn identity(n: usize) -> CsrMatrix {
        let triples: Vec<_> = (0..n).map(|i| (i, i, 1i16)).collect();
        CsrMatrix::from_triples(n, n, &triples)
    }

    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.rowptr[r + 1] - self.rowptr[r]
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, i16)> + '_ {
        let span = self.rowptr[r]..self.rowptr[r + 1];
        span.map(move |k| (self.col[k], self.vals[k]))
    }

    /// Iterates all nonzeros in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, i16)> + '_ {
        (0..self.rows).flat_map(move |r| self.row_entries(r).map(move |(c, v)| (r, c, v)))
    }

    /// Sub-matrix holding rows `r0..r1`, used for row tiling.
    pub fn row_slice(&self, r0: usize, r1: usize) -> CsrMatrix {
        assert!(r0 <= r1 && r1 <= self.rows);
        let lo = self.rowptr[r0];
        let hi = self.rowptr[r1];
        CsrMatrix {
            rows: r1 - r0,
            cols: self.cols,
            rowptr: self.rowptr[r0..=r1].iter().map(|p| p - lo).collect(),
            col: self.col[lo..hi].to_vec(),
            vals: self.vals[lo..hi].to_vec(),
        }
    }

    pub fn check_invariants(&self) -> bool {
        if self.rowptr.len() != self.rows + 1 || self.rowptr[0] != 0 {
            return false;
        }
        if *self.rowptr.last().unwrap() != self.col.len() || self.col.len() != self.vals.len() {
            return false;
        }
        if self.rowptr.windows(2).any(|w| w[0] > w[1]) {
            return false;
        }
        for r in 0..self.rows {
            let cols = &self.col[self.rowptr[r]..self.rowptr[r + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return false;
            }
            if cols.iter().any(|&c| c >= self.cols) {
                return false;
            }
        }
        true
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("CSR serialization cannot fail")
    }
}

/// Dense row-major matrix in the same 16-bit value domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub vals: Vec<i16>,
}

impl DenseMatrix {
    pub fn zero(rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix {
            rows,
            cols,
            vals: vec![0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> i16 {
        self.vals[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: i16) {
        self.vals[r * self.cols + c] = v;
    }
}

/// Row-to-PE assignment, either as contiguous row boundaries or as an
/// explicit per-row cluster map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionMap {
    /// `boundaries[i]..boundaries[i+1]` is the row range of partition i.
    Contiguous { boundaries: Vec<usize> },
    /// `assignment[row]` names the owning partition.
    Clustered { assignment: Vec<usize>, parts: usize },
}

impl PartitionMap {
    pub fn parts(&self) -> usize {
        match self {
            PartitionMap::Contiguous { boundaries } => boundaries.len() - 1,
            PartitionMap::Clustered { parts, .. } => *parts,
        }
    }

    /// Partition owning `row`.
    pub fn part_of(&self, row: usize) -> usize {
        match self {
            PartitionMap::Contiguous { boundaries } => {
                // boundaries are nondecreasing; partition_point gives the
                // first boundary strictly beyond the row.
                boundaries[1..].partition_point(|&b| b <= row)
            }
            PartitionMap::Clustered { assignment, .. } => assignment[row],
        }
    }

    /// Rows of partition `p`, in ascending order.
    pub fn rows_of(&self, p: usize, total_rows: usize) -> Vec<usize> {
        match self {
            PartitionMap::Contiguous { boundaries } => (boundaries[p]..boundaries[p + 1]).collect(),
            PartitionMap::Clustered { assignment, .. } => (0..total_rows)
                .filter(|&r| assignment[r] == p)
                .collect(),
        }
    }
}

/// Splits rows into N contiguous partitions with roughly nnz/N nonzeros
/// each, by a single scan of the row pointer array.
pub fn partition_nnz_balanced(x: &CsrMatrix, n: usize) -> PartitionMap {
    assert!(n >= 1, "need at least one partition");
    let target = (x.nnz().div_ceil(n)).max(1);
    let mut boundaries = Vec::with_capacity(n + 1);
    boundaries.push(0);
    let mut running = 0usize;
    for r in 0..x.rows {
        running += x.row_nnz(r);
        if running >= target && boundaries.len() < n {
            boundaries.push(r + 1);
            running = 0;
        }
    }
    while boundaries.len() < n + 1 {
        boundaries.push(x.rows);
    }
    PartitionMap::Contiguous { boundaries }
}

/// Memory banks touched by a row, derived from its column indices.
pub fn accessed_banks(x: &CsrMatrix, row: usize, owner: &dyn Fn(usize) -> usize) -> BTreeSet<usize> {
    x.row_entries(row).map(|(c, _)| owner(c)).collect()
}

/// Cardinality of the symmetric difference of two bank sets.
pub fn dissimilarity(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> usize {
    a.symmetric_difference(b).count()
}

/// Greedy agglomerative row clustering: rows are processed in descending
/// nnz order and join the open cluster (below the ceil(nnz/N) capacity)
/// with minimum average dissimilarity to its current members, empty
/// clusters counting as average 0; ties go to the lowest cluster index.
pub fn cluster_rows_dissimilarity(
    x: &CsrMatrix,
    n: usize,
    owner: &dyn Fn(usize) -> usize,
) -> PartitionMap {
    assert!(n >= 1, "need at least one cluster");
    let banks: Vec<BTreeSet<usize>> = (0..x.rows).map(|r| accessed_banks(x, r, owner)).collect();
    let capacity = (x.nnz().div_ceil(n)).max(1);

    let mut order: Vec<usize> = (0..x.rows).collect();
    order.sort_by_key(|&r| (std::cmp::Reverse(x.row_nnz(r)), r));

    let mut assignment = vec![0usize; x.rows];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut load = vec![0usize; n];

    for &r in &order {
        let mut best: Option<(f64, usize)> = None;
        for k in 0..n {
            let open = load[k] < capacity || x.row_nnz(r) == 0;
            if !open {
                continue;
            }
            let avg = if members[k].is_empty() {
                0.0
            } else {
                let total: usize = members[k]
                    .iter()
                    .map(|&m| dissimilarity(&banks[r], &banks[m]))
                    .sum();
                total as f64 / members[k].len() as f64
            };
            if best.map_or(true, |(b, _)| avg < b) {
                best = Some((avg, k));
            }
        }
        // All clusters at capacity can only happen for zero-nnz rows,
        // which the `open` test already admits everywhere.
        let (_, k) = best.expect("at least one cluster accepts the row");
        assignment[r] = k;
        members[k].push(r);
        load[k] += x.row_nnz(r);
    }

    PartitionMap::Clustered {
        assignment,
        parts: n,
    }
}

/// Identifier of one processing element.
pub type PeId = u8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementError {
    pub pe: PeId,
    pub needed: usize,
    pub capacity: usize,
}

impl fmt::Display for PlacementError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "placement overflows PE{} data memory ({} words > {} capacity); tile the problem",
            self.pe, self.needed, self.capacity
        )
    }
}

impl std::error::Error for PlacementError {}

/// Tensor-qualified element coordinate: (tensor slot, row, col). One
/// placement table covers every memory-resident tensor of a kernel, so
/// the per-PE address counters interleave correctly.
pub type ElemKey = (u8, usize, usize);

/// Element-coordinate to (PE, local word address) table with per-PE
/// next-free-address counters.
#[derive(Debug, Clone, Default)]
pub struct PlacementMap {
    map: BTreeMap<ElemKey, (PeId, u16)>,
    next_free: BTreeMap<PeId, u16>,
}

impl PlacementMap {
    pub fn new() -> PlacementMap {
        PlacementMap::default()
    }

    /// Next free address on `pe` without claiming it.
    pub fn next_addr(&self, pe: PeId) -> u16 {
        self.next_free.get(&pe).copied().unwrap_or(0)
    }

    /// Places one element at the next free address of `pe`.
    pub fn place(&mut self, key: ElemKey, pe: PeId, capacity: usize) -> Result<u16, PlacementError> {
        let addr = self.next_addr(pe);
        if addr as usize >= capacity {
            return Err(PlacementError {
                pe,
                needed: addr as usize + 1,
                capacity,
            });
        }
        let prev = self.map.insert(key, (pe, addr));
        assert!(prev.is_none(), "coordinate placed twice: {key:?}");
        self.next_free.insert(pe, addr + 1);
        Ok(addr)
    }

    pub fn lookup(&self, key: ElemKey) -> Option<(PeId, u16)> {
        self.map.get(&key).copied()
    }

    pub fn words_on(&self, pe: PeId) -> usize {
        self.next_addr(pe) as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ElemKey, &(PeId, u16))> {
        self.map.iter()
    }
}

/// Greedy dependency-aware partition-to-PE assignment. Output partitions
/// sit on PEs 0..N-1 in order; for each PE in turn the unassigned input
/// partition sharing the most referenced elements with that output
/// partition is chosen, ties broken by lowest partition index.
///
/// `shared[p][i]` counts the elements of input partition `p` referenced by
/// output partition `i`. Returns `pe_of_partition`.
pub fn place_partitions(shared: &[Vec<usize>]) -> Vec<PeId> {
    let parts = shared.len();
    let mut pe_of = vec![0 as PeId; parts];
    let mut taken = vec![false; parts];
    for pe in 0..parts {
        let mut best: Option<(usize, usize)> = None;
        for (p, row) in shared.iter().enumerate() {
            if taken[p] {
                continue;
            }
            let score = row[pe];
            if best.map_or(true, |(s, _)| score > s) {
                best = Some((score, p));
            }
        }
        let (_, p) = best.expect("one partition per PE");
        taken[p] = true;
        pe_of[p] = pe as PeId;
    }
    pe_of
}

/// 128-element occupancy block handled by the sparse metadata scanner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitVectorBlock {
    pub mask: u128,
    pub base: usize,
}

impl BitVectorBlock {
    pub fn population(&self) -> usize {
        self.mask.count_ones() as usize
    }
}

/// Coordinates base+k for every set bit k, ascending.
pub fn scan_bitvector(block: &BitVectorBlock) -> Vec<usize> {
    let mut coords = Vec::with_capacity(block.population());
    let mut mask = block.mask;
    while mask != 0 {
        let k = mask.trailing_zeros() as usize;
        coords.push(block.base + k);
        mask &= mask - 1;
    }
    coords
}

/// Packs the column coordinates of one CSR row into scanner blocks and
/// scans them back out. The compiler uses this to materialize per-row
/// coordinate streams the way the scanner hardware would.
pub fn scan_row_coordinates(x: &CsrMatrix, row: usize) -> Vec<usize> {
    let mut blocks: BTreeMap<usize, u128> = BTreeMap::new();
    for (c, _) in x.row_entries(row) {
        *blocks.entry(c / 128).or_insert(0) |= 1u128 << (c % 128);
    }
    let mut coords = Vec::with_capacity(x.row_nnz(row));
    for (blk, mask) in blocks {
        coords.extend(scan_bitvector(&BitVectorBlock {
            mask,
            base: blk * 128,
        }));
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_with_row_nnz(counts: &[usize], cols: usize) -> CsrMatrix {
        let mut triples = Vec::new();
        for (r, &k) in counts.iter().enumerate() {
            for c in 0..k {
                triples.push((r, c, 1i16));
            }
        }
        CsrMatrix::from_triples(counts.len(), cols, &triples)
    }

    #[test]
    fn balanced_partition_uniform_rows() {
        let x = matrix_with_row_nnz(&[1; 8], 4);
        match partition_nnz_balanced(&x, 4) {
            PartitionMap::Contiguous { boundaries } => {
                assert_eq!(boundaries, vec![0, 2, 4, 6, 8]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn balanced_partition_greedy_scan() {
        let x = matrix_with_row_nnz(&[4, 0, 0, 0, 1, 1, 1, 1], 8);
        match partition_nnz_balanced(&x, 2) {
            PartitionMap::Contiguous { boundaries } => {
                assert_eq!(boundaries, vec![0, 1, 8]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn balanced_partition_empty_matrix() {
        let x = CsrMatrix::empty(0, 0);
        match partition_nnz_balanced(&x, 3) {
            PartitionMap::Contiguous { boundaries } => {
                assert_eq!(boundaries, vec![0, 0, 0, 0]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn balanced_partition_respects_capacity_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rows = rng.gen_range(1..60);
            let cols = rng.gen_range(1..60);
            let mut triples = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if rng.gen_bool(0.2) {
                        triples.push((r, c, 1i16));
                    }
                }
            }
            let x = CsrMatrix::from_triples(rows, cols, &triples);
            let n = rng.gen_range(1..=16);
            let parts = partition_nnz_balanced(&x, n);
            let max_row = (0..rows).map(|r| x.row_nnz(r)).max().unwrap_or(0);
            let target = x.nnz().div_ceil(n);
            for p in 0..n {
                let load: usize = parts.rows_of(p, rows).iter().map(|&r| x.row_nnz(r)).sum();
                assert!(load <= target + max_row.saturating_sub(1));
            }
            // Rows covered exactly once.
            let mut seen = vec![false; rows];
            for p in 0..n {
                for r in parts.rows_of(p, rows) {
                    assert!(!seen[r]);
                    seen[r] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn accessed_banks_from_columns() {
        let x = CsrMatrix::from_triples(3, 8, &[(1, 0, 1), (1, 1, 1), (2, 0, 1), (2, 2, 1), (2, 5, 1)]);
        let owner = |c: usize| c / 2;
        assert!(accessed_banks(&x, 0, &owner).is_empty());
        assert_eq!(accessed_banks(&x, 1, &owner), BTreeSet::from([0]));
        assert_eq!(accessed_banks(&x, 2, &owner), BTreeSet::from([0, 1, 2]));
    }

    #[test]
    fn dissimilarity_is_symmetric_difference() {
        let a = BTreeSet::from([0, 1]);
        let b = BTreeSet::from([1, 2]);
        assert_eq!(dissimilarity(&a, &b), 2);
        assert_eq!(dissimilarity(&a, &a), 0);
        assert_eq!(dissimilarity(&BTreeSet::from([0]), &BTreeSet::from([1])), 2);
    }

    #[test]
    fn dissimilarity_triangle_inequality() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> BTreeSet<usize> {
                (0..8).filter(|_| rng.gen_bool(0.5)).collect()
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            assert!(dissimilarity(&a, &c) <= dissimilarity(&a, &b) + dissimilarity(&b, &c));
        }
    }

    #[test]
    fn clustering_single_cluster() {
        let x = matrix_with_row_nnz(&[2, 3, 1], 4);
        let parts = cluster_rows_dissimilarity(&x, 1, &|c| c);
        assert_eq!(parts.rows_of(0, 3), vec![0, 1, 2]);
    }

    #[test]
    fn clustering_separates_disjoint_bank_groups() {
        // Rows 0-1 touch bank 0 only, rows 2-3 bank 1 only, equal nnz.
        let x = CsrMatrix::from_triples(
            4,
            4,
            &[
                (0, 0, 1),
                (0, 1, 1),
                (1, 0, 1),
                (1, 1, 1),
                (2, 2, 1),
                (2, 3, 1),
                (3, 2, 1),
                (3, 3, 1),
            ],
        );
        let owner = |c: usize| c / 2;
        let parts = cluster_rows_dissimilarity(&x, 2, &owner);
        let cluster_of = |r: usize| parts.part_of(r);
        assert_eq!(cluster_of(0), cluster_of(1));
        assert_eq!(cluster_of(2), cluster_of(3));
        assert_ne!(cluster_of(0), cluster_of(2));

        // Brute force over all 2-partitions: minimize summed intra-cluster
        // average dissimilarity under the nnz capacity bound.
        let banks: Vec<_> = (0..4).map(|r| accessed_banks(&x, r, &owner)).collect();
        let capacity = x.nnz().div_ceil(2);
        let mut best_cost = f64::INFINITY;
        let mut best_masks = Vec::new();
        for mask in 0u32..16 {
            let c0: Vec<usize> = (0..4).filter(|r| mask & (1 << r) != 0).collect();
            let c1: Vec<usize> = (0..4).filter(|r| mask & (1 << r) == 0).collect();
            let load = |c: &[usize]| -> usize { c.iter().map(|&r| x.row_nnz(r)).sum() };
            if load(&c0) > capacity || load(&c1) > capacity {
                continue;
            }
            let cost = |c: &[usize]| -> f64 {
                let mut total = 0.0;
                let mut pairs = 0.0;
                for i in 0..c.len() {
                    for j in i + 1..c.len() {
                        total += dissimilarity(&banks[c[i]], &banks[c[j]]) as f64;
                        pairs += 1.0;
                    }
                }
                if pairs == 0.0 {
                    0.0
                } else {
                    total / pairs
                }
            };
            let total = cost(&c0) + cost(&c1);
            if total < best_cost {
                best_cost = total;
                best_masks = vec![mask];
            } else if total == best_cost {
                best_masks.push(mask);
            }
        }
        // The greedy assignment must be one of the brute-force optima.
        let greedy_mask: u32 = (0..4).filter(|&r| cluster_of(r) == 0).map(|r| 1 << r).sum();
        assert!(
            best_masks.contains(&greedy_mask) || best_masks.contains(&(!greedy_mask & 0xf)),
            "greedy {greedy_mask:#x} not among optima {best_masks:?}"
        );
    }

    #[test]
    fn clustering_identical_rows_respects_capacity() {
        let x = matrix_with_row_nnz(&[2; 6], 2);
        let parts = cluster_rows_dissimilarity(&x, 2, &|c| c);
        let capacity = x.nnz().div_ceil(2);
        for p in 0..2 {
            let load: usize = parts.rows_of(p, 6).iter().map(|&r| x.row_nnz(r)).sum();
            assert!(load <= capacity + 2);
        }
    }

    #[test]
    fn clustering_is_deterministic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut triples = Vec::new();
        for r in 0..20 {
            for c in 0..20 {
                if rng.gen_bool(0.3) {
                    triples.push((r, c, 1i16));
                }
            }
        }
        let x = CsrMatrix::from_triples(20, 20, &triples);
        let owner = |c: usize| c % 4;
        let a = cluster_rows_dissimilarity(&x, 4, &owner);
        let b = cluster_rows_dissimilarity(&x, 4, &owner);
        assert_eq!(a, b);
    }

    #[test]
    fn placement_greedy_affinity() {
        // Diagonal case: X_i feeds only Z_i.
        let shared = vec![
            vec![5, 0, 0],
            vec![0, 4, 0],
            vec![0, 0, 7],
        ];
        assert_eq!(place_partitions(&shared), vec![0, 1, 2]);

        // Crossed case: X_1 feeds Z_0, X_0 feeds Z_1.
        let shared = vec![vec![0, 9], vec![9, 0]];
        assert_eq!(place_partitions(&shared), vec![1, 0]);
    }

    #[test]
    fn placement_addresses_dense_from_zero() {
        let mut pm = PlacementMap::new();
        for i in 0..5 {
            let addr = pm.place((0, 0, i), 2, 512).unwrap();
            assert_eq!(addr, i as u16);
        }
        // A second tensor on the same PE continues the counter.
        assert_eq!(pm.place((1, 0, 0), 2, 512).unwrap(), 5);
        assert_eq!(pm.words_on(2), 6);
        let err = {
            let mut pm = PlacementMap::new();
            pm.place((0, 0, 0), 1, 1).unwrap();
            pm.place((0, 0, 1), 1, 1).unwrap_err()
        };
        assert_eq!(err.capacity, 1);
    }

    #[test]
    fn bitvector_scan() {
        assert!(scan_bitvector(&BitVectorBlock { mask: 0, base: 0 }).is_empty());
        let block = BitVectorBlock {
            mask: (1u128 << 127) | 1,
            base: 256,
        };
        assert_eq!(scan_bitvector(&block), vec![256, 383]);
    }

    #[test]
    fn bitvector_density_floor() {
        // 16 nonzeros within 128 elements clears the 12% density bound the
        // scanner is sized for.
        let block = BitVectorBlock {
            mask: 0xffff,
            base: 0,
        };
        assert_eq!(scan_bitvector(&block).len(), 16);
        assert!(16.0 / 128.0 >= 0.12);
    }

    #[test]
    fn scanner_reproduces_row_coordinates() {
        let x = CsrMatrix::from_triples(
            2,
            300,
            &[(0, 0, 1), (0, 129, 1), (0, 299, 1), (1, 5, 1)],
        );
        assert_eq!(scan_row_coordinates(&x, 0), vec![0, 129, 299]);
        assert_eq!(scan_row_coordinates(&x, 1), vec![5]);
    }
}
