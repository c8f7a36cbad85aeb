//! The cycle loop: advances every PE and router in lockstep phases,
//! detects global idle, runs tiles sequentially, and gathers metrics.
//!
//! Each cycle runs five phases; phase k reads only phase k-1 state of
//! other nodes, so node evaluation order inside a phase cannot change the
//! outcome:
//!
//! 1. PE units fire: active decode streams hold their unit, and a head
//!    static AM destined for its own PE is consumed straight from the
//!    queue (the queue is local to the PE, no network transit involved).
//! 2. The AM NIC offers one message to the router injection port: the
//!    pending dynamic AM first, else the next static AM, gated by the
//!    bubble rule. Dynamic AMs always go through the router, so a
//!    self-destined one loops via the LOCAL port and pays its bandwidth.
//!    A drained outbox lets an active stream derive its next message.
//! 3. Route computation, separable allocation and the en-route hook.
//! 4. Crossbar traversal, LOCAL deliveries (the delivered instruction
//!    executes this cycle) and diverted en-route executions.
//! 5. On/off flag exchange, statistics, off-chip queue refill.

use crate::am::{encode_am, ActiveMessage, Opcode, OperandTag, CHAIN_END};
use crate::compiler::{CompiledProgram, ConfigTable};
use crate::fabric::{compute_execute, morph_or_retire, MorphOutcome, PeState, SimFault};
use crate::noc::{
    allocate, can_inject, route_candidates, choose_output, west_turn_legal, Coord, InFlight, Port,
    RouterState, PORTS,
};
use crate::tensor::PeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full machine: en-route execution enabled.
    Nexus,
    /// Ablation: no in-network computation.
    Tia,
    /// Ablation: no in-network computation, static AMs detour through a
    /// seeded random intermediate PE inside the source/destination
    /// bounding box.
    TiaValiant,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Nexus => "nexus",
            Mode::Tia => "tia",
            Mode::TiaValiant => "tia_valiant",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Mode, String> {
        match s {
            "nexus" => Ok(Mode::Nexus),
            "tia" => Ok(Mode::Tia),
            "tia_valiant" | "tia-valiant" => Ok(Mode::TiaValiant),
            other => Err(format!("unknown mode {other:?} (nexus | tia | tia_valiant)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub width: usize,
    pub height: usize,
    pub mode: Mode,
    pub seed: u64,
    pub cycle_ceiling: u64,
    pub data_words: usize,
    pub queue_capacity: usize,
    /// Off-chip loading bandwidth in bytes per cycle; None is instantaneous.
    pub bandwidth: Option<u64>,
    pub tile_rows: Option<usize>,
    #[serde(default)]
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            width: 4,
            height: 4,
            mode: Mode::Nexus,
            seed: 0,
            cycle_ceiling: 10_000_000,
            data_words: 512,
            queue_capacity: 116,
            bandwidth: None,
            tile_rows: None,
            trace: false,
        }
    }
}

impl SimConfig {
    pub fn pe_count(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err("mesh dimensions must be positive".into());
        }
        if self.pe_count() > 16 {
            return Err("4-bit destination ids limit the mesh to 16 PEs".into());
        }
        if self.cycle_ceiling == 0 {
            return Err("cycle ceiling must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    /// The cycle ceiling was hit with work still pending.
    Timeout,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileStats {
    pub load_cycles: u64,
    pub exec_cycles: u64,
}

/// Metric bundle for one run, serialized as the versioned stats document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub schema: String,
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub outcome: Outcome,
    pub cycles: u64,
    pub busy_cycles: Vec<u64>,
    pub fabric_utilization: f64,
    pub alu_execs: u64,
    pub in_network_execs: u64,
    pub in_network_fraction: f64,
    pub stalls_by_port: BTreeMap<String, u64>,
    pub stall_total: u64,
    pub flit_hops: u64,
    pub traffic_bits: u64,
    pub chains_started: u64,
    pub chains_retired: u64,
    pub injections: u64,
    pub deliveries: u64,
    pub diverts: u64,
    pub tiles: Vec<TileStats>,
}

pub const STATS_SCHEMA: &str = "nexus-stats/1";

impl SimStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialization cannot fail")
    }

    pub fn busy_csv(&self) -> String {
        let mut out = String::from("pe,busy_cycles,total_cycles\n");
        for (pe, busy) in self.busy_cycles.iter().enumerate() {
            out.push_str(&format!("{pe},{busy},{}\n", self.cycles));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeEventKind {
    Load,
    StreamStart,
    StreamDerive,
    Alu(Opcode),
    Acc,
    Nop,
    Retire,
    Inject,
}

impl fmt::Display for PeEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeEventKind::Load => write!(f, "load"),
            PeEventKind::StreamStart => write!(f, "stream_start"),
            PeEventKind::StreamDerive => write!(f, "stream_derive"),
            PeEventKind::Alu(op) => write!(f, "alu_{}", format!("{op:?}").to_lowercase()),
            PeEventKind::Acc => write!(f, "acc"),
            PeEventKind::Nop => write!(f, "nop"),
            PeEventKind::Retire => write!(f, "retire"),
            PeEventKind::Inject => write!(f, "inject"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopAction {
    Traverse,
    Deliver,
    Divert,
    Stall,
}

impl fmt::Display for HopAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HopAction::Traverse => write!(f, "traverse"),
            HopAction::Deliver => write!(f, "deliver"),
            HopAction::Divert => write!(f, "divert"),
            HopAction::Stall => write!(f, "stall"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Pe {
        cycle: u64,
        pe: PeId,
        kind: PeEventKind,
        word: u128,
    },
    Hop {
        cycle: u64,
        router: PeId,
        input: Port,
        action: HopAction,
    },
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceEvent::Pe { cycle, pe, kind, word } => {
                write!(f, "{cycle} pe{pe} {kind} {word:018x}")
            }
            TraceEvent::Hop {
                cycle,
                router,
                input,
                action,
            } => write!(f, "{cycle} r{router} {} {action}", input.name()),
        }
    }
}

#[derive(Debug, Default, Clone)]
struct Counters {
    alu_execs: u64,
    in_network_execs: u64,
    flit_hops: u64,
    chains_started: u64,
    chains_retired: u64,
    injections: u64,
    deliveries: u64,
    diverts: u64,
}

pub struct Machine {
    pub config: SimConfig,
    pub table: ConfigTable,
    pub pes: Vec<PeState>,
    pub routers: Vec<RouterState>,
    pub cycle: u64,
    busy: Vec<u64>,
    counters: Counters,
    rng: ChaCha8Rng,
    refill_budget_bytes: u64,
    pub trace: Vec<TraceEvent>,
}

impl Machine {
    pub fn new(config: SimConfig, program: &CompiledProgram) -> Machine {
        config.validate().expect("invalid simulator configuration");
        let n = config.pe_count();
        let mut pes: Vec<PeState> = (0..n)
            .map(|id| PeState::new(id as PeId, config.data_words, config.queue_capacity))
            .collect();
        for (pe, stream) in program.static_ams.per_pe.iter().enumerate() {
            for (i, msg) in stream.iter().enumerate() {
                if i < config.queue_capacity {
                    pes[pe].am_queue.push_back(*msg);
                } else {
                    pes[pe].backing.push_back(*msg);
                }
            }
        }
        for (pe, words) in program.memory_init.iter().enumerate() {
            for &(addr, word) in words {
                pes[pe].data_memory[addr as usize] = word;
            }
        }
        for (&(pe, base), meta) in &program.stream_table {
            pes[pe as usize].stream_table.insert(base, meta.clone());
        }
        let seed = config.seed;
        Machine {
            config,
            table: program.table.clone(),
            pes,
            routers: vec![RouterState::new(); n],
            cycle: 0,
            busy: vec![0; n],
            counters: Counters::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            refill_budget_bytes: 0,
            trace: Vec::new(),
        }
    }

    fn coord(&self, id: PeId) -> Coord {
        Coord::of(id, self.config.width)
    }

    pub fn is_idle(&self) -> bool {
        self.pes.iter().all(|pe| !pe.has_work()) && self.routers.iter().all(RouterState::is_empty)
    }

    fn record_pe(&mut self, pe: PeId, kind: PeEventKind, msg: &ActiveMessage) {
        if self.config.trace {
            self.trace.push(TraceEvent::Pe {
                cycle: self.cycle,
                pe,
                kind,
                word: encode_am(msg),
            });
        }
    }

    fn record_hop(&mut self, router: PeId, input: Port, action: HopAction) {
        if self.config.trace {
            self.trace.push(TraceEvent::Hop {
                cycle: self.cycle,
                router,
                input,
                action,
            });
        }
    }

    /// Whether the PE can take a message of this shape for execution in
    /// the current cycle. Drives the LOCAL output mask and the static
    /// handoff. `vacating` marks the outbox's own message being delivered
    /// over the direct injection path: its successor reuses the slot it
    /// frees, so the outbox-free requirement is waived.
    fn pe_can_execute(&self, pe: usize, msg: &ActiveMessage, vacating: bool) -> bool {
        let p = &self.pes[pe];
        let outbox_ok = vacating || p.outbox.is_none();
        let retiring = msg.n_pc == CHAIN_END;
        match msg.opcode {
            Opcode::Nop => retiring || outbox_ok,
            op if op.is_alu_class() => !p.units.alu && (retiring || outbox_ok),
            Opcode::Load => !p.units.decode && !p.units.mem_read && outbox_ok,
            Opcode::Stream => {
                !p.units.decode && p.stream.is_none() && !p.units.mem_read && outbox_ok
            }
            Opcode::Acc => {
                !p.units.decode
                    && !p.units.mem_read
                    && !p.units.mem_write
                    && (retiring || outbox_ok)
            }
            _ => unreachable!(),
        }
    }

    /// Executes one message on this PE's units in the current cycle,
    /// filling the outbox with the morphed successor or retiring the
    /// chain. Caller has already checked `pe_can_execute`.
    fn execute_on_pe(&mut self, pe: usize, inflight: InFlight) -> Result<(), SimFault> {
        let msg = inflight.msg;
        let (out, rotate) = match msg.opcode {
            Opcode::Nop => {
                self.record_pe(pe as PeId, PeEventKind::Nop, &msg);
                (msg, false)
            }
            op if op.is_alu_class() => {
                let result = compute_execute(op, msg.op1, msg.op2);
                let mut out = msg;
                out.op1 = result;
                out.op1_c = OperandTag::Value;
                self.pes[pe].units.alu = true;
                self.pes[pe].units.worked = true;
                self.counters.alu_execs += 1;
                self.record_pe(pe as PeId, PeEventKind::Alu(op), &out);
                (out, false)
            }
            Opcode::Load => {
                let out = self.pes[pe].decode_dereference(&msg)?;
                let u = &mut self.pes[pe].units;
                u.decode = true;
                u.mem_read = true;
                u.worked = true;
                self.record_pe(pe as PeId, PeEventKind::Load, &out);
                (out, true)
            }
            Opcode::Stream => {
                self.pes[pe].start_stream(&msg)?;
                // One static AM fans out into `count` derived chains, each
                // retiring on its own; account for the extra ones here.
                let count = self.pes[pe].stream.as_ref().unwrap().meta.count;
                self.counters.chains_started += count as u64 - 1;
                let u = &mut self.pes[pe].units;
                u.decode = true;
                u.mem_read = true;
                u.worked = true;
                self.record_pe(pe as PeId, PeEventKind::StreamStart, &msg);
                let derived = self.pes[pe].stream_derive()?;
                self.record_pe(pe as PeId, PeEventKind::StreamDerive, &derived);
                (derived, true)
            }
            Opcode::Acc => {
                let out = self.pes[pe].accumulate(&msg)?;
                let u = &mut self.pes[pe].units;
                u.decode = true;
                u.mem_read = true;
                u.mem_write = true;
                u.worked = true;
                self.record_pe(pe as PeId, PeEventKind::Acc, &out);
                (out, true)
            }
            _ => unreachable!(),
        };
        match morph_or_retire(&self.table, &out, rotate) {
            MorphOutcome::Retired => {
                self.counters.chains_retired += 1;
                self.record_pe(pe as PeId, PeEventKind::Retire, &out);
            }
            MorphOutcome::Forward(next) => {
                debug_assert!(self.pes[pe].outbox.is_none());
                self.pes[pe].outbox = Some(InFlight::direct(next));
            }
        }
        Ok(())
    }

    /// Valiant intermediate destination inside the source/destination
    /// bounding box. Routing stays west-first legal across both legs only
    /// if every westward hop comes first, so westbound messages randomize
    /// the row within the destination column; eastbound ones may use the
    /// whole box.
    fn sample_waypoint(&mut self, src: PeId, dest: PeId) -> Option<PeId> {
        if self.config.mode != Mode::TiaValiant {
            return None;
        }
        let a = self.coord(src);
        let b = self.coord(dest);
        let (y0, y1) = (a.y.min(b.y), a.y.max(b.y));
        let wx = if b.x >= a.x {
            self.rng.gen_range(a.x..=b.x)
        } else {
            b.x
        };
        let wy = self.rng.gen_range(y0..=y1);
        Some(Coord { x: wx, y: wy }.id(self.config.width))
    }

    pub fn step(&mut self) -> Result<(), SimFault> {
        let n = self.config.pe_count();
        for pe in &mut self.pes {
            pe.begin_cycle();
        }

        // Phase 1: an active stream claims the decode unit while its
        // outbox path is clear (it yields when blocked, so deliveries can
        // still use the unit); deferred deliveries retry; a head static AM
        // destined for its own PE is consumed directly.
        for pe in 0..n {
            if self.pes[pe].stream.is_some() && self.pes[pe].outbox.is_none() {
                self.pes[pe].units.decode = true;
                self.pes[pe].units.stream_claim = true;
            }
            if let Some(head) = self.pes[pe].pending.front().copied() {
                if self.pe_can_execute(pe, &head, false) {
                    self.pes[pe].pending.pop_front();
                    self.execute_on_pe(pe, InFlight::direct(head))?;
                }
                continue;
            }
            if self.pes[pe].stream.is_some() || self.pes[pe].outbox.is_some() {
                continue;
            }
            let Some(head) = self.pes[pe].am_queue.front().copied() else {
                continue;
            };
            if head.r1 as usize != pe || !self.pe_can_execute(pe, &head, false) {
                continue;
            }
            self.pes[pe].am_queue.pop_front();
            self.counters.chains_started += 1;
            self.execute_on_pe(pe, InFlight::direct(head))?;
        }

        // Phase 2: buffered injection under the bubble rule. The pending
        // dynamic AM goes first; with the outbox clear, the next static AM
        // follows. Self-destined dynamic AMs skip the buffer and instead
        // bid for the LOCAL output on the direct injection path below.
        for pe in 0..n {
            if let Some(inflight) = self.pes[pe].outbox {
                if inflight.msg.r1 as usize != pe
                    && can_inject(self.routers[pe].occupancy(Port::Local))
                {
                    self.pes[pe].outbox = None;
                    self.routers[pe].push(Port::Local, inflight);
                    self.counters.injections += 1;
                    self.record_pe(pe as PeId, PeEventKind::Inject, &inflight.msg);
                }
            } else if let Some(head) = self.pes[pe].am_queue.front().copied() {
                if head.r1 as usize != pe && can_inject(self.routers[pe].occupancy(Port::Local)) {
                    self.pes[pe].am_queue.pop_front();
                    self.counters.chains_started += 1;
                    let waypoint = self.sample_waypoint(pe as PeId, head.r1);
                    let inflight = InFlight { msg: head, waypoint };
                    self.routers[pe].push(Port::Local, inflight);
                    self.counters.injections += 1;
                    self.record_pe(pe as PeId, PeEventKind::Inject, &head);
                }
            }
        }

        // Phases 3 and 4 per router: route, allocate, divert, traverse,
        // deliver. Cross-router arrivals are deferred and occupancies are
        // snapshotted, so every router sees only start-of-cycle state of
        // its neighbours regardless of evaluation order.
        let occupancy_at_start: Vec<[usize; 5]> = self
            .routers
            .iter()
            .map(|r| {
                let mut occ = [0usize; 5];
                for p in PORTS {
                    occ[p.index()] = r.occupancy(p);
                }
                occ
            })
            .collect();
        let mut arrivals: Vec<(usize, Port, InFlight)> = Vec::new();
        for r in 0..n {
            let cur = self.coord(r as PeId);

            // Route computation over buffered heads. Reaching the Valiant
            // waypoint clears it and re-aims at the architectural
            // destination.
            let mut requests: [Option<Port>; 5] = [None; 5];
            for port in PORTS {
                let Some(head) = self.routers[r].buffers[port.index()].front_mut() else {
                    continue;
                };
                if head.waypoint == Some(r as PeId) {
                    head.waypoint = None;
                }
                let target = head.target();
                let dest = Coord::of(target, self.config.width);
                let cands = route_candidates(cur, dest);
                let flags = self.routers[r].output_on;
                requests[port.index()] = Some(choose_output(&cands, &|p| flags[p.index()]));
            }

            // The Input NIC accepts every delivered message (deferring it
            // when units are busy), so the LOCAL output is never masked.
            let flags = self.routers[r].output_on;
            let grants = allocate(&requests, &|p| flags[p.index()]);

            // Direct injection path: the crossbar takes the outbox as an
            // unbuffered sixth input at the lowest priority. This is how a
            // pending dynamic AM drains when the buffered path is clogged,
            // and the only path a self-destined one takes; without it the
            // outbox, the local buffer and the LOCAL output can deadlock
            // against each other.
            // The escape is masked by true downstream occupancy, not the
            // stale flag, and may take any productive candidate with room:
            // a full outbox gates deliveries at this PE, so it must drain
            // whenever a slot exists anywhere or congested rings of
            // blocked outboxes never resolve.
            let mut direct_grant: Option<Port> = None;
            if let Some(pending) = self.pes[r].outbox {
                let dest = Coord::of(pending.target(), self.config.width);
                if dest == cur {
                    let taken = grants.iter().any(|g| *g == Some(Port::Local));
                    if !taken && self.pe_can_execute(r, &pending.msg, true) {
                        direct_grant = Some(Port::Local);
                    }
                } else {
                    for dir in route_candidates(cur, dest) {
                        if grants.iter().any(|g| *g == Some(dir)) {
                            continue;
                        }
                        let neighbor = cur.step(dir).id(self.config.width) as usize;
                        if occupancy_at_start[neighbor][dir.opposite().index()]
                            < crate::noc::BUFFER_SLOTS
                        {
                            direct_grant = Some(dir);
                            break;
                        }
                    }
                }
            }

            // En-route hook: one ALU-class head granted a through-port may
            // execute here instead, when the whole PE is idle this cycle.
            let mut divert_input: Option<Port> = None;
            if self.config.mode == Mode::Nexus
                && self.pes[r].idle_for_enroute()
                && direct_grant.is_none()
                && !grants.iter().any(|g| *g == Some(Port::Local))
            {
                for port in [Port::North, Port::East, Port::South, Port::West] {
                    let Some(out) = grants[port.index()] else {
                        continue;
                    };
                    if out == Port::Local {
                        continue;
                    }
                    let head = self.routers[r].buffers[port.index()].front().unwrap();
                    if head.msg.opcode.is_alu_class()
                        && !head.msg.op1_c.is_address()
                        && !head.msg.op2_c.is_address()
                    {
                        divert_input = Some(port);
                        break;
                    }
                }
            }

            // Phase 4 for this router.
            let mut popped = [false; 5];
            for port in PORTS {
                let Some(out) = grants[port.index()] else {
                    continue;
                };
                if divert_input == Some(port) {
                    let inflight = self.routers[r].buffers[port.index()].pop_front().unwrap();
                    popped[port.index()] = true;
                    self.counters.diverts += 1;
                    self.counters.in_network_execs += 1;
                    self.record_hop(r as PeId, port, HopAction::Divert);
                    self.execute_on_pe(r, inflight)?;
                    continue;
                }
                match out {
                    Port::Local => {
                        let inflight = self.routers[r].buffers[port.index()].pop_front().unwrap();
                        popped[port.index()] = true;
                        self.counters.deliveries += 1;
                        self.record_hop(r as PeId, port, HopAction::Deliver);
                        if self.pe_can_execute(r, &inflight.msg, false) {
                            self.execute_on_pe(r, inflight)?;
                        } else {
                            self.pes[r].pending.push_back(inflight.msg);
                        }
                    }
                    dir => {
                        assert!(
                            dir != Port::West || west_turn_legal(port),
                            "illegal west-first turn: {} input to west output at router {r}",
                            port.name()
                        );
                        let inflight = self.routers[r].buffers[port.index()].pop_front().unwrap();
                        popped[port.index()] = true;
                        let neighbor = cur.step(dir).id(self.config.width) as usize;
                        arrivals.push((neighbor, dir.opposite(), inflight));
                        self.counters.flit_hops += 1;
                        self.record_hop(r as PeId, port, HopAction::Traverse);
                    }
                }
            }

            // Direct-path traversal or delivery of the pending dynamic AM.
            // Re-verify local acceptance: a buffered delivery just above
            // may have taken the units since the grant was computed.
            if let Some(out) = direct_grant {
                let still_ok = match out {
                    Port::Local => {
                        let msg = self.pes[r].outbox.as_ref().unwrap().msg;
                        self.pe_can_execute(r, &msg, true)
                    }
                    _ => true,
                };
                if still_ok {
                    let inflight = self.pes[r].outbox.take().unwrap();
                    self.counters.injections += 1;
                    self.record_pe(r as PeId, PeEventKind::Inject, &inflight.msg);
                    match out {
                        Port::Local => {
                            self.counters.deliveries += 1;
                            self.record_hop(r as PeId, Port::Local, HopAction::Deliver);
                            self.execute_on_pe(r, inflight)?;
                        }
                        dir => {
                            let neighbor = cur.step(dir).id(self.config.width) as usize;
                            arrivals.push((neighbor, dir.opposite(), inflight));
                            self.counters.flit_hops += 1;
                            self.record_hop(r as PeId, Port::Local, HopAction::Traverse);
                        }
                    }
                }
            }

            // Ungranted buffered heads are congestion.
            for port in PORTS {
                if !popped[port.index()] && !self.routers[r].buffers[port.index()].is_empty() {
                    self.routers[r].stalls[port.index()] += 1;
                    self.record_hop(r as PeId, port, HopAction::Stall);
                }
            }
        }

        for (router, port, inflight) in arrivals {
            self.routers[router].push(port, inflight);
        }

        // End-of-cycle stream derivation: with the outbox clear and the
        // memory read port unused, the stream produces its next message
        // for injection next cycle. A delivered instruction that took the
        // decode unit this cycle wins over a yielded stream.
        for pe in 0..n {
            if self.pes[pe].stream.is_none() || self.pes[pe].outbox.is_some() {
                continue;
            }
            let u = self.pes[pe].units;
            if u.mem_read || (u.decode && !u.stream_claim) {
                continue;
            }
            let derived = self.pes[pe].stream_derive()?;
            let u = &mut self.pes[pe].units;
            u.decode = true;
            u.mem_read = true;
            u.worked = true;
            self.record_pe(pe as PeId, PeEventKind::StreamDerive, &derived);
            match morph_or_retire(&self.table, &derived, true) {
                MorphOutcome::Retired => {
                    self.counters.chains_retired += 1;
                    self.record_pe(pe as PeId, PeEventKind::Retire, &derived);
                }
                MorphOutcome::Forward(next) => {
                    self.pes[pe].outbox = Some(InFlight::direct(next));
                }
            }
        }

        // Phase 5: flag exchange (1-cycle delay), statistics, refill.
        for r in 0..n {
            self.routers[r].update_input_flags();
        }
        for r in 0..n {
            let cur = self.coord(r as PeId);
            for dir in [Port::North, Port::East, Port::South, Port::West] {
                let on_edge = match dir {
                    Port::North => cur.y == 0,
                    Port::South => cur.y + 1 == self.config.height,
                    Port::West => cur.x == 0,
                    Port::East => cur.x + 1 == self.config.width,
                    Port::Local => false,
                };
                if on_edge {
                    continue;
                }
                let neighbor = cur.step(dir).id(self.config.width) as usize;
                self.routers[r].output_on[dir.index()] =
                    self.routers[neighbor].input_on[dir.opposite().index()];
            }
        }
        for pe in 0..n {
            if self.pes[pe].units.worked {
                self.busy[pe] += 1;
            }
            self.pes[pe].latch_idle();
        }
        self.refill_queues();
        self.cycle += 1;
        Ok(())
    }

    /// Off-chip refill of AM queues, overlapping execution. Infinite
    /// bandwidth refills everything; otherwise a byte budget accrues per
    /// cycle and each queue entry costs its 9-byte wire size.
    fn refill_queues(&mut self) {
        match self.config.bandwidth {
            None => {
                for pe in &mut self.pes {
                    pe.refill_queue(usize::MAX);
                }
            }
            Some(b) => {
                self.refill_budget_bytes += b;
                let mut entries = (self.refill_budget_bytes / 9) as usize;
                self.refill_budget_bytes %= 9;
                for pe in &mut self.pes {
                    if entries == 0 {
                        break;
                    }
                    entries -= pe.refill_queue(entries);
                }
            }
        }
    }

    /// Steps until global idle or the cycle ceiling.
    pub fn run_until_idle(&mut self) -> Result<Outcome, SimFault> {
        while !self.is_idle() {
            if self.cycle >= self.config.cycle_ceiling {
                return Ok(Outcome::Timeout);
            }
            self.step()?;
        }
        Ok(Outcome::Completed)
    }

    pub fn collect_stats(&self, outcome: Outcome) -> SimStats {
        let n = self.config.pe_count() as u64;
        let busy_total: u64 = self.busy.iter().sum();
        let mut stalls_by_port = BTreeMap::new();
        for port in PORTS {
            let total: u64 = self.routers.iter().map(|r| r.stalls[port.index()]).sum();
            stalls_by_port.insert(port.name().to_string(), total);
        }
        let stall_total = stalls_by_port.values().sum();
        let c = &self.counters;
        SimStats {
            schema: STATS_SCHEMA.to_string(),
            mode: self.config.mode,
            width: self.config.width,
            height: self.config.height,
            seed: self.config.seed,
            outcome,
            cycles: self.cycle,
            busy_cycles: self.busy.clone(),
            fabric_utilization: if self.cycle == 0 {
                0.0
            } else {
                busy_total as f64 / (self.cycle * n) as f64
            },
            alu_execs: c.alu_execs,
            in_network_execs: c.in_network_execs,
            in_network_fraction: if c.alu_execs == 0 {
                0.0
            } else {
                c.in_network_execs as f64 / c.alu_execs as f64
            },
            stalls_by_port,
            stall_total,
            flit_hops: c.flit_hops,
            traffic_bits: 70 * c.flit_hops,
            chains_started: c.chains_started,
            chains_retired: c.chains_retired,
            injections: c.injections,
            deliveries: c.deliveries,
            diverts: c.diverts,
            tiles: Vec::new(),
        }
    }

    pub fn run_to_stats(&mut self) -> Result<SimStats, SimFault> {
        let outcome = self.run_until_idle()?;
        Ok(self.collect_stats(outcome))
    }

    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        for ev in &self.trace {
            out.push_str(&ev.to_string());
            out.push('\n');
        }
        out
    }
}

/// Runs data tiles sequentially: each tile charges its data-memory load
/// time at the configured bandwidth (AM-queue refill overlaps execution),
/// then executes to idle. `sink` sees each finished tile's machine for
/// output extraction.
pub fn run_tiled(
    tiles: &[CompiledProgram],
    config: &SimConfig,
    mut sink: impl FnMut(usize, &Machine),
) -> Result<SimStats, SimFault> {
    assert!(!tiles.is_empty(), "need at least one tile");
    let mut merged: Option<SimStats> = None;
    for (i, tile) in tiles.iter().enumerate() {
        let tile_bytes: u64 = tile
            .memory_init
            .iter()
            .map(|words| 2 * words.len() as u64)
            .sum();
        let load_cycles = match config.bandwidth {
            None => 0,
            Some(b) => tile_bytes.div_ceil(b),
        };
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(i as u64);
        let mut machine = Machine::new(cfg, tile);
        let outcome = machine.run_until_idle()?;
        let stats = machine.collect_stats(outcome);
        sink(i, &machine);

        let tile_entry = TileStats {
            load_cycles,
            exec_cycles: stats.cycles,
        };
        match merged.as_mut() {
            None => {
                let mut s = stats;
                s.cycles += load_cycles;
                s.tiles.push(tile_entry);
                merged = Some(s);
            }
            Some(acc) => {
                acc.cycles += load_cycles + stats.cycles;
                if stats.outcome == Outcome::Timeout {
                    acc.outcome = Outcome::Timeout;
                }
                for (b, add) in acc.busy_cycles.iter_mut().zip(&stats.busy_cycles) {
                    *b += add;
                }
                acc.alu_execs += stats.alu_execs;
                acc.in_network_execs += stats.in_network_execs;
                for (k, v) in &stats.stalls_by_port {
                    *acc.stalls_by_port.get_mut(k).unwrap() += v;
                }
                acc.stall_total += stats.stall_total;
                acc.flit_hops += stats.flit_hops;
                acc.traffic_bits += stats.traffic_bits;
                acc.chains_started += stats.chains_started;
                acc.chains_retired += stats.chains_retired;
                acc.injections += stats.injections;
                acc.deliveries += stats.deliveries;
                acc.diverts += stats.diverts;
                acc.tiles.push(tile_entry);
            }
        }
    }
    let mut stats = merged.unwrap();
    let n = (config.pe_count() as u64).max(1);
    let busy_total: u64 = stats.busy_cycles.iter().sum();
    stats.fabric_utilization = if stats.cycles == 0 {
        0.0
    } else {
        busy_total as f64 / (stats.cycles * n) as f64
    };
    stats.in_network_fraction = if stats.alu_execs == 0 {
        0.0
    } else {
        stats.in_network_execs as f64 / stats.alu_execs as f64
    };
    Ok(stats)
}
