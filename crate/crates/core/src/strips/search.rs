//! Forward state-space search over a grounded problem: A* with a blind or
//! goal-count heuristic, plus a breadth-first oracle used to cross-check
//! optimal plan lengths on small spaces.

use std::cmp::Reverse;
use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::time::Instant;

use super::{PlanningProblem, State};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heuristic {
    /// h = 0 everywhere. Admissible, so plans are shortest.
    Blind,
    /// h = number of unsatisfied goal literals. Not admissible when a single
    /// action can satisfy several literals, so plans may be suboptimal.
    GoalCount,
}

#[derive(Clone, Copy, Debug)]
pub struct SearchLimits {
    pub max_expansions: usize,
    pub max_seconds: Option<f64>,
}

impl Default for SearchLimits {
    fn default() -> SearchLimits {
        SearchLimits { max_expansions: 1_000_000, max_seconds: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    /// Indices into the problem's action list, in execution order.
    pub steps: Vec<usize>,
}

impl Plan {
    pub fn cost(&self) -> usize {
        self.steps.len()
    }

    pub fn names(&self, problem: &PlanningProblem) -> Vec<String> {
        self.steps.iter().map(|&i| problem.actions[i].name.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SearchResult {
    Solved(Plan),
    /// Every reachable state was expanded without satisfying the goal.
    Exhausted,
    /// The expansion or wall-clock budget ran out first.
    Timeout,
}

impl SearchResult {
    pub fn outcome_label(&self) -> &'static str {
        match self {
            SearchResult::Solved(_) => "solved",
            SearchResult::Exhausted => "exhausted",
            SearchResult::Timeout => "timeout",
        }
    }

    pub fn plan(&self) -> Option<&Plan> {
        match self {
            SearchResult::Solved(p) => Some(p),
            _ => None,
        }
    }
}

/// Action lowered to block masks over the problem width for fast applicability
/// and successor computation.
struct MaskedAction {
    pos: Vec<u64>,
    neg: Vec<u64>,
    add: Vec<u64>,
    del_cleared: Vec<u64>,
}

fn mask_of(bits: &[usize], width: usize) -> Vec<u64> {
    let mut m = vec![0u64; width.div_ceil(64)];
    for &b in bits {
        m[b / 64] |= 1 << (b % 64);
    }
    m
}

fn compile_actions(problem: &PlanningProblem) -> Vec<MaskedAction> {
    problem
        .actions
        .iter()
        .map(|a| MaskedAction {
            pos: mask_of(&a.pos, problem.f_bits),
            neg: mask_of(&a.neg, problem.f_bits),
            add: mask_of(&a.add, problem.f_bits),
            del_cleared: mask_of(&a.del, problem.f_bits).iter().map(|b| !b).collect(),
        })
        .collect()
}

impl MaskedAction {
    fn applicable(&self, s: &State) -> bool {
        s.blocks()
            .iter()
            .zip(&self.pos)
            .zip(&self.neg)
            .all(|((&b, &p), &n)| b & p == p && b & n == 0)
    }

    fn apply(&self, s: &State) -> State {
        let mut t = s.clone();
        for ((b, &dc), &a) in t.blocks_mut().iter_mut().zip(&self.del_cleared).zip(&self.add) {
            *b = *b & dc | a;
        }
        t
    }
}

fn heuristic_value(problem: &PlanningProblem, h: Heuristic, s: &State) -> usize {
    match h {
        Heuristic::Blind => 0,
        Heuristic::GoalCount => problem.goal_count(s),
    }
}

/// Work performed by one search call. Expansions are deterministic for a
/// fixed problem; seconds are wall clock and are not.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchStats {
    pub expansions: usize,
    pub seconds: f64,
}

/// A* over the grounded transition system. Ties on f are broken by lower h,
/// then by insertion order, which keeps results reproducible.
pub fn astar(problem: &PlanningProblem, heuristic: Heuristic, limits: SearchLimits) -> SearchResult {
    astar_with_stats(problem, heuristic, limits).0
}

/// Same search, also reporting how much work it did.
pub fn astar_with_stats(
    problem: &PlanningProblem,
    heuristic: Heuristic,
    limits: SearchLimits,
) -> (SearchResult, SearchStats) {
    let actions = compile_actions(problem);
    let start = Instant::now();

    // Node bookkeeping: parent node + the action taken to reach it.
    let mut states: Vec<State> = vec![problem.init.clone()];
    let mut parents: Vec<Option<(usize, usize)>> = vec![None];
    let mut best_g: HashMap<State, (usize, usize)> = HashMap::new();
    best_g.insert(problem.init.clone(), (0, 0));

    let mut open: BinaryHeap<Reverse<(usize, usize, u64, usize)>> = BinaryHeap::new();
    let h0 = heuristic_value(problem, heuristic, &problem.init);
    let mut seq = 0u64;
    open.push(Reverse((h0, h0, seq, 0)));

    let mut expansions = 0usize;
    while let Some(Reverse((_f, _h, _seq, node))) = open.pop() {
        let g = match best_g.get(&states[node]) {
            Some(&(best, best_node)) if best_node == node => best,
            // A cheaper route to this state was found after the push.
            _ => continue,
        };
        if problem.goal_entailed(&states[node]) {
            let mut steps = Vec::new();
            let mut cur = node;
            while let Some((parent, action)) = parents[cur] {
                steps.push(action);
                cur = parent;
            }
            steps.reverse();
            let stats = SearchStats { expansions, seconds: start.elapsed().as_secs_f64() };
            return (SearchResult::Solved(Plan { steps }), stats);
        }
        if expansions >= limits.max_expansions {
            let stats = SearchStats { expansions, seconds: start.elapsed().as_secs_f64() };
            return (SearchResult::Timeout, stats);
        }
        if let Some(limit) = limits.max_seconds {
            if expansions % 1024 == 0 && start.elapsed().as_secs_f64() > limit {
                let stats = SearchStats { expansions, seconds: start.elapsed().as_secs_f64() };
                return (SearchResult::Timeout, stats);
            }
        }
        expansions += 1;

        for (ai, ma) in actions.iter().enumerate() {
            if !ma.applicable(&states[node]) {
                continue;
            }
            let succ = ma.apply(&states[node]);
            let succ_g = g + 1;
            match best_g.entry(succ.clone()) {
                Entry::Occupied(mut e) => {
                    if succ_g >= e.get().0 {
                        continue;
                    }
                    let child = states.len();
                    e.insert((succ_g, child));
                }
                Entry::Vacant(e) => {
                    e.insert((succ_g, states.len()));
                }
            }
            let child = states.len();
            states.push(succ);
            parents.push(Some((node, ai)));
            let h = heuristic_value(problem, heuristic, &states[child]);
            seq += 1;
            open.push(Reverse((succ_g + h, h, seq, child)));
        }
    }
    let stats = SearchStats { expansions, seconds: start.elapsed().as_secs_f64() };
    (SearchResult::Exhausted, stats)
}

/// Length of a shortest plan by plain breadth-first search, or None when the
/// goal is unreachable. Independent of the A* machinery above on purpose.
pub fn bfs_shortest_length(problem: &PlanningProblem) -> Option<usize> {
    let actions = compile_actions(problem);
    let mut dist: HashMap<State, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    dist.insert(problem.init.clone(), 0);
    queue.push_back(problem.init.clone());
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        if problem.goal_entailed(&s) {
            return Some(d);
        }
        for ma in &actions {
            if !ma.applicable(&s) {
                continue;
            }
            let t = ma.apply(&s);
            if let Entry::Vacant(e) = dist.entry(t.clone()) {
                e.insert(d + 1);
                queue.push_back(t);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strips::GroundAction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Hypercube moves: one action flips each bit in each direction, so the
    /// shortest plan length between complete states is the Hamming distance.
    fn hypercube(width: usize, init: State, goal_pos: Vec<usize>, goal_neg: Vec<usize>) -> PlanningProblem {
        let mut actions = Vec::new();
        for b in 0..width {
            actions.push(GroundAction::new(format!("set-z{b}"), vec![], vec![b], vec![b], vec![]));
            actions.push(GroundAction::new(format!("clear-z{b}"), vec![b], vec![], vec![], vec![b]));
        }
        PlanningProblem::new(width, actions, init, goal_pos, goal_neg).unwrap()
    }

    #[test]
    fn trivial_goal_yields_the_empty_plan() {
        let p = hypercube(3, State::from_str01("010").unwrap(), vec![1], vec![0]);
        match astar(&p, Heuristic::Blind, SearchLimits::default()) {
            SearchResult::Solved(plan) => assert!(plan.steps.is_empty()),
            other => panic!("expected a plan, got {other:?}"),
        }
    }

    #[test]
    fn blind_search_finds_hamming_distance_on_the_hypercube() {
        let init = State::from_str01("00000").unwrap();
        let p = hypercube(5, init, vec![0, 2, 4], vec![1, 3]);
        let result = astar(&p, Heuristic::Blind, SearchLimits::default());
        let plan = result.plan().expect("solvable");
        assert_eq!(plan.cost(), 3);
        let trace = p.simulate_plan(plan).unwrap();
        assert!(p.goal_entailed(trace.last().unwrap()));
    }

    #[test]
    fn goal_count_heuristic_still_reaches_the_goal() {
        let init = State::from_str01("0000000").unwrap();
        let p = hypercube(7, init, (0..7).collect(), vec![]);
        let result = astar(&p, Heuristic::GoalCount, SearchLimits::default());
        let plan = result.plan().expect("solvable");
        let trace = p.simulate_plan(plan).unwrap();
        assert!(p.goal_entailed(trace.last().unwrap()));
        // One bit flips per action here, so goal count stays admissible and
        // the plan is still shortest.
        assert_eq!(plan.cost(), 7);
    }

    #[test]
    fn no_actions_means_exhausted() {
        let p = PlanningProblem::new(
            2,
            vec![],
            State::from_str01("00").unwrap(),
            vec![0],
            vec![],
        )
        .unwrap();
        assert_eq!(astar(&p, Heuristic::Blind, SearchLimits::default()), SearchResult::Exhausted);
        assert_eq!(bfs_shortest_length(&p), None);
    }

    #[test]
    fn expansion_budget_reports_timeout() {
        let init = State::from_str01("0000000000").unwrap();
        let p = hypercube(10, init, (0..10).collect(), vec![]);
        let limits = SearchLimits { max_expansions: 3, max_seconds: None };
        assert_eq!(astar(&p, Heuristic::Blind, limits), SearchResult::Timeout);
    }

    #[test]
    fn blind_plans_match_the_breadth_first_oracle_on_random_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for case in 0..60 {
            let width = rng.gen_range(3..=6);
            let n_actions = rng.gen_range(3..=10);
            let mut actions = Vec::new();
            for i in 0..n_actions {
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                let mut add = Vec::new();
                let mut del = Vec::new();
                for b in 0..width {
                    match rng.gen_range(0..5) {
                        0 => pos.push(b),
                        1 => neg.push(b),
                        _ => {}
                    }
                    match rng.gen_range(0..4) {
                        0 => add.push(b),
                        1 => del.push(b),
                        _ => {}
                    }
                }
                actions.push(GroundAction::new(format!("a{i}"), pos, neg, add, del));
            }
            let init_bits: Vec<bool> = (0..width).map(|_| rng.gen_bool(0.5)).collect();
            let mut goal_pos = Vec::new();
            let mut goal_neg = Vec::new();
            for b in 0..width {
                match rng.gen_range(0..4) {
                    0 => goal_pos.push(b),
                    1 => goal_neg.push(b),
                    _ => {}
                }
            }
            let p = PlanningProblem::new(
                width,
                actions,
                State::from_bools(&init_bits),
                goal_pos,
                goal_neg,
            )
            .unwrap();
            let oracle = bfs_shortest_length(&p);
            match astar(&p, Heuristic::Blind, SearchLimits::default()) {
                SearchResult::Solved(plan) => {
                    assert_eq!(Some(plan.cost()), oracle, "case {case}: length mismatch");
                    let trace = p.simulate_plan(&plan).unwrap();
                    assert!(p.goal_entailed(trace.last().unwrap()), "case {case}");
                }
                SearchResult::Exhausted => assert_eq!(oracle, None, "case {case}"),
                SearchResult::Timeout => panic!("case {case}: tiny space timed out"),
            }
        }
    }

    #[test]
    fn search_is_deterministic() {
        let init = State::from_str01("000000").unwrap();
        let p = hypercube(6, init, vec![1, 3, 5], vec![0]);
        let a = astar(&p, Heuristic::Blind, SearchLimits::default());
        let b = astar(&p, Heuristic::Blind, SearchLimits::default());
        assert_eq!(a, b);
    }
}
