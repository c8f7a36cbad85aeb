//! Cycle-level mesh router: west-first route computation, two-stage
//! separable allocation, on/off backpressure and bubble injection.
//!
//! Coordinates grow east in x and south in y; a PE id is `y * width + x`.
//! Input port names give the side a message entered from, so a message
//! heading east arrives on its next router's WEST port. West-first
//! legality therefore reads: the WEST output is reachable only from the
//! EAST input (continuing west) or from injection.

use crate::am::ActiveMessage;
use crate::tensor::PeId;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const BUFFER_SLOTS: usize = 3;
/// OFF is signalled upstream when free slots drop to this level.
pub const T_OFF: usize = 1;
/// ON is signalled once free slots recover to this level.
pub const T_ON: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Port {
    Local,
    North,
    East,
    South,
    West,
}

pub const PORTS: [Port; 5] = [Port::Local, Port::North, Port::East, Port::South, Port::West];

impl Port {
    pub fn index(self) -> usize {
        match self {
            Port::Local => 0,
            Port::North => 1,
            Port::East => 2,
            Port::South => 3,
            Port::West => 4,
        }
    }

    /// Input port a message lands on after leaving through `self`.
    pub fn opposite(self) -> Port {
        match self {
            Port::Local => Port::Local,
            Port::North => Port::South,
            Port::East => Port::West,
            Port::South => Port::North,
            Port::West => Port::East,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Port::Local => "local",
            Port::North => "north",
            Port::East => "east",
            Port::South => "south",
            Port::West => "west",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coord {
    pub x: usize,
    pub y: usize,
}

impl Coord {
    pub fn of(id: PeId, width: usize) -> Coord {
        Coord {
            x: id as usize % width,
            y: id as usize / width,
        }
    }

    pub fn id(self, width: usize) -> PeId {
        (self.y * width + self.x) as PeId
    }

    pub fn manhattan(self, other: Coord) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    pub fn step(self, dir: Port) -> Coord {
        match dir {
            Port::North => Coord { x: self.x, y: self.y - 1 },
            Port::South => Coord { x: self.x, y: self.y + 1 },
            Port::East => Coord { x: self.x + 1, y: self.y },
            Port::West => Coord { x: self.x - 1, y: self.y },
            Port::Local => self,
        }
    }
}

/// A message in flight, together with the simulator-side Valiant waypoint
/// it must clear before heading to its first architectural destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InFlight {
    pub msg: ActiveMessage,
    pub waypoint: Option<PeId>,
}

impl InFlight {
    pub fn direct(msg: ActiveMessage) -> InFlight {
        InFlight { msg, waypoint: None }
    }

    /// PE this message is currently routing toward.
    pub fn target(&self) -> PeId {
        self.waypoint.unwrap_or(self.msg.r1)
    }
}

/// West-first candidate outputs from `cur` toward `dest`: a destination
/// strictly west forces WEST; otherwise the productive subset of
/// {NORTH, SOUTH, EAST}; equal coordinates deliver locally.
pub fn route_candidates(cur: Coord, dest: Coord) -> Vec<Port> {
    if cur == dest {
        return vec![Port::Local];
    }
    if dest.x < cur.x {
        return vec![Port::West];
    }
    let mut cands = Vec::with_capacity(2);
    if dest.x > cur.x {
        cands.push(Port::East);
    }
    if dest.y < cur.y {
        cands.push(Port::North);
    }
    if dest.y > cur.y {
        cands.push(Port::South);
    }
    cands
}

/// Congestion-adaptive selection: prefer candidates whose downstream flag
/// is ON, ties broken in the fixed order EAST > NORTH > SOUTH.
pub fn choose_output(candidates: &[Port], output_on: &dyn Fn(Port) -> bool) -> Port {
    let rank = |p: Port| match p {
        Port::East => 0,
        Port::North => 1,
        Port::South => 2,
        Port::West => 3,
        Port::Local => 4,
    };
    let mut best = candidates[0];
    let mut best_key = (!output_on(best), rank(best));
    for &p in &candidates[1..] {
        let key = (!output_on(p), rank(p));
        if key < best_key {
            best = p;
            best_key = key;
        }
    }
    best
}

pub fn route_compute(cur: Coord, dest: Coord, output_on: &dyn Fn(Port) -> bool) -> Port {
    let cands = route_candidates(cur, dest);
    choose_output(&cands, output_on)
}

/// Bubble rule: injection needs two free slots in the local input buffer
/// so one network-wide bubble always survives; through-traffic needs only
/// the one slot the on/off control guarantees.
pub fn can_inject(local_occupancy: usize) -> bool {
    BUFFER_SLOTS - local_occupancy >= 2
}

/// Legal input ports for a grant on the WEST output under west-first.
pub fn west_turn_legal(input: Port) -> bool {
    matches!(input, Port::East | Port::Local)
}

/// Two-stage separable allocation. `requests[i]` is the output wanted by
/// input i's buffered head; `output_open[o]` folds the downstream on/off
/// flag (and local acceptance for the LOCAL output). Stage 1 arbitrates
/// each output by fixed input priority LOCAL > NORTH > EAST > SOUTH >
/// WEST; stage 2 keeps at most one grant per input.
pub fn allocate(
    requests: &[Option<Port>; 5],
    output_open: &dyn Fn(Port) -> bool,
) -> [Option<Port>; 5] {
    const INPUT_PRIORITY: [Port; 5] = [Port::Local, Port::North, Port::East, Port::South, Port::West];

    let mut output_winner: [Option<usize>; 5] = [None; 5];
    for &input in &INPUT_PRIORITY {
        let i = input.index();
        if let Some(out) = requests[i] {
            if !output_open(out) {
                continue;
            }
            let o = out.index();
            if output_winner[o].is_none() {
                output_winner[o] = Some(i);
            }
        }
    }

    let mut grants: [Option<Port>; 5] = [None; 5];
    for (o, winner) in output_winner.iter().enumerate() {
        if let Some(i) = winner {
            // Stage 2: one grant per input. Each input requested a single
            // output, so the first grant stands.
            if grants[*i].is_none() {
                grants[*i] = Some(PORTS[o]);
            }
        }
    }
    grants
}

/// Five input buffers plus the congestion-control state of one router.
#[derive(Debug, Clone)]
pub struct RouterState {
    pub buffers: [VecDeque<InFlight>; 5],
    /// Flags advertised by downstream neighbours for each output direction,
    /// as latched at the end of the previous cycle. true = ON.
    pub output_on: [bool; 5],
    /// Flags this router sends upstream for each of its input buffers.
    pub input_on: [bool; 5],
    pub stalls: [u64; 5],
}

impl RouterState {
    pub fn new() -> RouterState {
        RouterState {
            buffers: Default::default(),
            output_on: [true; 5],
            input_on: [true; 5],
            stalls: [0; 5],
        }
    }

    pub fn occupancy(&self, p: Port) -> usize {
        self.buffers[p.index()].len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.iter().all(VecDeque::is_empty)
    }

    /// Pushes an arrival, faulting on overflow (on/off makes that
    /// unreachable; the check backs the fuzz campaign).
    pub fn push(&mut self, p: Port, m: InFlight) {
        assert!(
            self.occupancy(p) < BUFFER_SLOTS,
            "router buffer overflow on {} input",
            p.name()
        );
        self.buffers[p.index()].push_back(m);
    }

    /// Recomputes the upstream flags from end-of-cycle occupancy.
    pub fn update_input_flags(&mut self) {
        for p in PORTS {
            let free = BUFFER_SLOTS - self.occupancy(p);
            self.input_on[p.index()] = if free <= T_OFF {
                false
            } else {
                debug_assert!(free >= T_ON);
                true
            };
        }
    }
}

impl Default for RouterState {
    fn default() -> Self {
        RouterState::new()
    }
}
