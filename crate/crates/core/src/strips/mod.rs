//! Grounded propositional STRIPS: bit-vector states, ground actions,
//! progression, complete-state regression, plan simulation, search, and
//! PDDL text I/O.
//!
//! Propositions are indexed 0..F and named `z0..z{F-1}` in PDDL output.
//! A state fixes every proposition, so regression here is the deterministic
//! complete-state variant: each bit of an action is classified as a positive
//! precondition, a negative precondition, or prevail (unchanged).

pub mod pddl;
pub mod search;

use std::fmt;

pub use search::{
    astar, astar_with_stats, bfs_shortest_length, Heuristic, Plan, SearchLimits, SearchResult,
    SearchStats,
};

/// Fixed-width bit vector over propositions z0..z{width-1}.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct State {
    width: usize,
    blocks: Vec<u64>,
}

impl State {
    pub fn zeros(width: usize) -> State {
        State { width, blocks: vec![0; width.div_ceil(64)] }
    }

    pub fn from_bools(bits: &[bool]) -> State {
        let mut s = State::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                s.set(i, true);
            }
        }
        s
    }

    /// Parses "0011" with z0 as the leftmost character.
    pub fn from_str01(text: &str) -> Result<State, String> {
        let mut bits = Vec::with_capacity(text.len());
        for (i, c) in text.chars().enumerate() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                other => return Err(format!("position {i}: expected 0 or 1, found {other:?}")),
            }
        }
        Ok(State::from_bools(&bits))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, bit: usize) -> bool {
        debug_assert!(bit < self.width);
        self.blocks[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn set(&mut self, bit: usize, value: bool) {
        debug_assert!(bit < self.width);
        let mask = 1u64 << (bit % 64);
        if value {
            self.blocks[bit / 64] |= mask;
        } else {
            self.blocks[bit / 64] &= !mask;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.blocks.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().enumerate().flat_map(|(bi, &block)| {
            let mut rest = block;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let tz = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(bi * 64 + tz)
            })
        })
    }

    pub fn to_str01(&self) -> String {
        (0..self.width).map(|i| if self.get(i) { '1' } else { '0' }).collect()
    }

    /// true iff every listed bit is set.
    pub fn contains_all(&self, bits: &[usize]) -> bool {
        bits.iter().all(|&b| self.get(b))
    }

    /// true iff at least one listed bit is set.
    pub fn contains_any(&self, bits: &[usize]) -> bool {
        bits.iter().any(|&b| self.get(b))
    }

    pub(crate) fn blocks(&self) -> &[u64] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [u64] {
        &mut self.blocks
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "State({})", self.to_str01())
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_str01())
    }
}

/// Ground action with positive/negative preconditions and add/delete effects,
/// all as sorted proposition-index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundAction {
    pub name: String,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    pub add: Vec<usize>,
    pub del: Vec<usize>,
}

fn normalize(mut set: Vec<usize>) -> Vec<usize> {
    set.sort_unstable();
    set.dedup();
    set
}

fn disjoint(a: &[usize], b: &[usize]) -> bool {
    // Both sorted; walk in lockstep.
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return false,
        }
    }
    true
}

impl GroundAction {
    /// Sorts and deduplicates each set. Panics if pos/neg or add/del overlap;
    /// conflicting inputs are a construction bug, not a runtime condition.
    pub fn new(
        name: impl Into<String>,
        pos: Vec<usize>,
        neg: Vec<usize>,
        add: Vec<usize>,
        del: Vec<usize>,
    ) -> GroundAction {
        let name = name.into();
        let (pos, neg) = (normalize(pos), normalize(neg));
        let (add, del) = (normalize(add), normalize(del));
        assert!(disjoint(&pos, &neg), "action {name}: pos and neg preconditions overlap");
        assert!(disjoint(&add, &del), "action {name}: add and delete effects overlap");
        GroundAction { name, pos, neg, add, del }
    }

    pub fn max_bit(&self) -> Option<usize> {
        [&self.pos, &self.neg, &self.add, &self.del]
            .iter()
            .filter_map(|set| set.last().copied())
            .max()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum StripsError {
    #[error("step {step}: action {action:?} is not applicable ({violated})")]
    Inapplicable { step: usize, action: String, violated: String },
    #[error("action {action:?}: bit {bit} is not classified as positive, negative, or prevail")]
    UnclassifiedBit { action: String, bit: usize },
    #[error("action {action:?}: bit {bit} is classified more than once")]
    AmbiguousBit { action: String, bit: usize },
    #[error("plan step {step} names unknown action {action:?}")]
    UnknownAction { step: usize, action: String },
    #[error("goal literal sets overlap on bit {bit}")]
    GoalConflict { bit: usize },
    #[error("proposition index {bit} is out of range for width {width}")]
    BitOutOfRange { bit: usize, width: usize },
}

pub fn is_applicable(s: &State, a: &GroundAction) -> bool {
    s.contains_all(&a.pos) && !s.contains_any(&a.neg)
}

fn violated_literals(s: &State, a: &GroundAction) -> String {
    let mut parts = Vec::new();
    for &b in &a.pos {
        if !s.get(b) {
            parts.push(format!("z{b} required true"));
        }
    }
    for &b in &a.neg {
        if s.get(b) {
            parts.push(format!("z{b} required false"));
        }
    }
    parts.join(", ")
}

/// Successor state (s minus del) union add. Errors if the action is
/// inapplicable.
pub fn progress(s: &State, a: &GroundAction) -> Result<State, StripsError> {
    progress_at(s, a, 0)
}

fn progress_at(s: &State, a: &GroundAction, step: usize) -> Result<State, StripsError> {
    if !is_applicable(s, a) {
        return Err(StripsError::Inapplicable {
            step,
            action: a.name.clone(),
            violated: violated_literals(s, a),
        });
    }
    let mut t = s.clone();
    for &b in &a.del {
        t.set(b, false);
    }
    for &b in &a.add {
        t.set(b, true);
    }
    Ok(t)
}

/// Deterministic predecessor of t under complete-state regression: bit f is 1
/// if f is a positive precondition, 0 if negative, and copies t_f if f is in
/// the prevail set. Every bit must fall in exactly one of the three classes.
pub fn regress_complete(
    t: &State,
    a: &GroundAction,
    prevail: &[usize],
) -> Result<State, StripsError> {
    let width = t.width();
    // 0 = unseen, 1 = pos, 2 = neg, 3 = prevail
    let mut class = vec![0u8; width];
    let mut classify = |bits: &[usize], tag: u8| -> Result<(), StripsError> {
        for &b in bits {
            if b >= width {
                return Err(StripsError::BitOutOfRange { bit: b, width });
            }
            if class[b] != 0 {
                return Err(StripsError::AmbiguousBit { action: a.name.clone(), bit: b });
            }
            class[b] = tag;
        }
        Ok(())
    };
    classify(&a.pos, 1)?;
    classify(&a.neg, 2)?;
    classify(prevail, 3)?;
    let mut s = State::zeros(width);
    for (b, &c) in class.iter().enumerate() {
        let value = match c {
            1 => true,
            2 => false,
            3 => t.get(b),
            _ => return Err(StripsError::UnclassifiedBit { action: a.name.clone(), bit: b }),
        };
        s.set(b, value);
    }
    Ok(s)
}

/// Applies the actions in order, returning every visited state (init first).
/// Stops at the first inapplicable step with its index and violated literals.
pub fn simulate<'a>(
    init: &State,
    steps: impl IntoIterator<Item = &'a GroundAction>,
) -> Result<Vec<State>, StripsError> {
    let mut trace = vec![init.clone()];
    for (step, a) in steps.into_iter().enumerate() {
        let next = progress_at(trace.last().unwrap(), a, step)?;
        trace.push(next);
    }
    Ok(trace)
}

/// Grounded planning problem: F propositions, a fixed action set, a complete
/// initial state, and a partial goal given as positive/negative literal sets.
#[derive(Clone, Debug)]
pub struct PlanningProblem {
    pub f_bits: usize,
    pub actions: Vec<GroundAction>,
    pub init: State,
    pub goal_pos: Vec<usize>,
    pub goal_neg: Vec<usize>,
}

impl PlanningProblem {
    pub fn new(
        f_bits: usize,
        actions: Vec<GroundAction>,
        init: State,
        goal_pos: Vec<usize>,
        goal_neg: Vec<usize>,
    ) -> Result<PlanningProblem, StripsError> {
        assert_eq!(init.width(), f_bits, "initial state width must match the problem");
        let goal_pos = normalize(goal_pos);
        let goal_neg = normalize(goal_neg);
        for sets in [&goal_pos, &goal_neg] {
            if let Some(&bit) = sets.iter().find(|&&b| b >= f_bits) {
                return Err(StripsError::BitOutOfRange { bit, width: f_bits });
            }
        }
        if let Some(&bit) = goal_pos.iter().find(|b| goal_neg.binary_search(b).is_ok()) {
            return Err(StripsError::GoalConflict { bit });
        }
        for a in &actions {
            if let Some(bit) = a.max_bit().filter(|&m| m >= f_bits) {
                return Err(StripsError::BitOutOfRange { bit, width: f_bits });
            }
        }
        Ok(PlanningProblem { f_bits, actions, init, goal_pos, goal_neg })
    }

    pub fn goal_entailed(&self, s: &State) -> bool {
        s.contains_all(&self.goal_pos) && !s.contains_any(&self.goal_neg)
    }

    /// Number of unsatisfied goal literals.
    pub fn goal_count(&self, s: &State) -> usize {
        let missing = self.goal_pos.iter().filter(|&&b| !s.get(b)).count();
        let extra = self.goal_neg.iter().filter(|&&b| s.get(b)).count();
        missing + extra
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.name == name)
    }

    /// Resolves a plan given as action names and simulates it from init.
    pub fn simulate_named(&self, names: &[String]) -> Result<Vec<State>, StripsError> {
        let mut steps = Vec::with_capacity(names.len());
        for (step, name) in names.iter().enumerate() {
            let idx = self
                .action_index(name)
                .ok_or_else(|| StripsError::UnknownAction { step, action: name.clone() })?;
            steps.push(&self.actions[idx]);
        }
        simulate(&self.init, steps)
    }

    pub fn simulate_plan(&self, plan: &Plan) -> Result<Vec<State>, StripsError> {
        simulate(&self.init, plan.steps.iter().map(|&i| &self.actions[i]))
    }
}
