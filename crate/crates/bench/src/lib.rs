//! Shared fixtures for the benchmark targets.

use pixplan::strips::{GroundAction, PlanningProblem, State};

/// Cells toggled by pressing (r, c) on an n x n lights grid: the cell and
/// its orthogonal neighbors, as bit indices in row-major order.
pub fn pressed_cells(n: usize, r: usize, c: usize) -> Vec<usize> {
    let mut touched = vec![r * n + c];
    if r > 0 {
        touched.push((r - 1) * n + c);
    }
    if r + 1 < n {
        touched.push((r + 1) * n + c);
    }
    if c > 0 {
        touched.push(r * n + c - 1);
    }
    if c + 1 < n {
        touched.push(r * n + c + 1);
    }
    touched.sort_unstable();
    touched
}

/// Grounded lights-out press actions. A press toggles its cells, and a
/// toggle is an xor effect, so each press grounds into 2^k variants keyed
/// by which of the k touched bits are currently set.
pub fn lights_actions(n: usize) -> Vec<GroundAction> {
    let mut actions = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let touched = pressed_cells(n, r, c);
            for mask in 0..(1u32 << touched.len()) {
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                let mut add = Vec::new();
                let mut del = Vec::new();
                for (i, &b) in touched.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        pos.push(b);
                        del.push(b);
                    } else {
                        neg.push(b);
                        add.push(b);
                    }
                }
                actions.push(GroundAction::new(format!("press-{r}-{c}-v{mask}"), pos, neg, add, del));
            }
        }
    }
    actions
}

/// A solvable all-off instance: the init is the state reached from dark by
/// pressing each cell index in `presses`, so the instance is solvable in
/// at most `presses.len()` steps.
pub fn lights_problem(n: usize, presses: &[usize]) -> PlanningProblem {
    let f = n * n;
    let mut bits = vec![false; f];
    for &p in presses {
        for b in pressed_cells(n, p / n, p % n) {
            bits[b] = !bits[b];
        }
    }
    PlanningProblem::new(f, lights_actions(n), State::from_bools(&bits), Vec::new(), (0..f).collect())
        .expect("well-formed problem")
}
