//! Turns a trained transition model into a grounded STRIPS domain.
//!
//! Effects come from probing the apply head with all-zero and all-one latent
//! vectors: since each output bit is an affine function of its input bit in
//! eval mode, the two probes fully determine the per-bit behavior (always
//! set, always clear, copy, or flip). Preconditions come either from the
//! intersection of observed predecessor states (ad-hoc) or from probing the
//! regression head the same way. Bits that flip are XOR bits and are compiled
//! away by splitting the action per possible pre-value.

use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};

use crate::models::{CubeSpace, TrainedModel};
use crate::strips::pddl::{emit_domain, emit_problem};
use crate::strips::{is_applicable, progress, GroundAction, State};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("action {label}: {bits} xor bits would expand into 2^{bits} variants; refusing above {MAX_XOR_BITS}")]
    TooManyXorBits { label: usize, bits: usize },
    #[error("dataset contains no transitions")]
    EmptyDataset,
    #[error("image shape {got:?} does not match the model's {expected:?}")]
    ShapeMismatch { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("label {label} has no observed transitions")]
    UnusedLabel { label: usize },
}

/// Refuse to expand an action with more xor bits than this; 2^20 variants is
/// already past anything a planner will digest.
pub const MAX_XOR_BITS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Ama1,
    Ama3Adhoc,
    Ama4Regression,
}

/// One action as read off the network, before xor compilation. The xor sets
/// are disjoint from the monotone sets they shadow; after compilation no xor
/// bits remain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractedAction {
    pub label: usize,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    /// Bits whose precondition is "unchanged by this action". Empty for
    /// ad-hoc preconditions, which leave unconstrained bits unconstrained.
    pub prevail: Vec<usize>,
    pub add: Vec<usize>,
    pub del: Vec<usize>,
    pub xor_effect_bits: Vec<usize>,
    pub xor_precondition_bits: Vec<usize>,
    pub provenance: Provenance,
}

impl ExtractedAction {
    pub fn name(&self) -> String {
        format!("a{}", self.label)
    }

    pub fn xor_bits(&self) -> Vec<usize> {
        let mut bits = self.xor_effect_bits.clone();
        for &b in &self.xor_precondition_bits {
            if !bits.contains(&b) {
                bits.push(b);
            }
        }
        bits.sort_unstable();
        bits
    }
}

/// Determinized latent view of a transition dataset.
#[derive(Clone, Debug)]
pub struct LatentDataset {
    pub z0: Array2<f64>,
    pub z1: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn f_bits(&self) -> usize {
        self.z0.ncols()
    }
}

pub fn encode_dataset(
    model: &mut CubeSpace,
    x0: &Array4<f64>,
    x1: &Array4<f64>,
) -> LatentDataset {
    LatentDataset {
        z0: model.encode_bits(x0),
        z1: model.encode_bits(x1),
        labels: model.action_labels(x0, x1),
    }
}

fn row_to_string01(row: ndarray::ArrayView1<f64>) -> String {
    row.iter().map(|&v| if v >= 0.5 { '1' } else { '0' }).collect()
}

pub fn row_to_state(row: ndarray::ArrayView1<f64>) -> State {
    let bits: Vec<bool> = row.iter().map(|&v| v >= 0.5).collect();
    State::from_bools(&bits)
}

/// One grounded action per distinct latent transition: the full predecessor
/// as the precondition, the bit differences as effects.
pub fn ama1_translate(z0: &Array2<f64>, z1: &Array2<f64>) -> Vec<GroundAction> {
    let mut seen: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut actions = Vec::new();
    for (r0, r1) in z0.outer_iter().zip(z1.outer_iter()) {
        let name = format!("action-{}-{}", row_to_string01(r0), row_to_string01(r1));
        if !seen.insert(name.clone()) {
            continue;
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut add = Vec::new();
        let mut del = Vec::new();
        for (b, (&v0, &v1)) in r0.iter().zip(r1.iter()).enumerate() {
            let (b0, b1) = (v0 >= 0.5, v1 >= 0.5);
            if b0 {
                pos.push(b);
            } else {
                neg.push(b);
            }
            if !b0 && b1 {
                add.push(b);
            } else if b0 && !b1 {
                del.push(b);
            }
        }
        actions.push(GroundAction::new(name, pos, neg, add, del));
    }
    actions
}

/// Distinct labels the determinized action head actually selects, sorted.
pub fn prune_unused(labels: &[usize]) -> Vec<usize> {
    let mut used: Vec<usize> = labels.to_vec();
    used.sort_unstable();
    used.dedup();
    used
}

/// Classifies each bit from the two probe outputs: `probe0[b]` is the output
/// bit when every input bit is 0, `probe1[b]` when every input bit is 1.
/// Returns (always-1 bits, always-0 bits, flip bits); copy bits are in none.
fn classify_probes(probe0: &Array1<f64>, probe1: &Array1<f64>) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut set = Vec::new();
    let mut clear = Vec::new();
    let mut flip = Vec::new();
    for (b, (&p0, &p1)) in probe0.iter().zip(probe1.iter()).enumerate() {
        match (p0 >= 0.5, p1 >= 0.5) {
            (true, true) => set.push(b),
            (false, false) => clear.push(b),
            (true, false) => flip.push(b),
            (false, true) => {}
        }
    }
    (set, clear, flip)
}

/// Effects of one action from apply-head probes:
/// add = bits set from the all-zero probe, del = bits cleared from the
/// all-one probe, and bits claiming both become xor effect bits.
pub fn extract_effects(model: &mut CubeSpace, label: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let f = model.lat.f_bits;
    let zeros = Array2::zeros((1, f));
    let ones = Array2::from_elem((1, f), 1.0);
    let probe0 = model.apply_bits(&zeros, &[label]).row(0).to_owned();
    let probe1 = model.apply_bits(&ones, &[label]).row(0).to_owned();
    classify_probes(&probe0, &probe1)
}

/// Preconditions as the literal intersection of every observed predecessor
/// with this label: a bit constant across all of them becomes a positive or
/// negative precondition, anything else stays unconstrained. Deliberately
/// blind to disjunctive structure.
pub fn extract_preconditions_adhoc(
    data: &LatentDataset,
    label: usize,
) -> Result<(Vec<usize>, Vec<usize>), ExtractError> {
    let f = data.f_bits();
    let mut always_one = vec![true; f];
    let mut always_zero = vec![true; f];
    let mut seen = false;
    for (row, &l) in data.z0.outer_iter().zip(&data.labels) {
        if l != label {
            continue;
        }
        seen = true;
        for (b, &v) in row.iter().enumerate() {
            if v >= 0.5 {
                always_zero[b] = false;
            } else {
                always_one[b] = false;
            }
        }
    }
    if !seen {
        return Err(ExtractError::UnusedLabel { label });
    }
    let pos = (0..f).filter(|&b| always_one[b]).collect();
    let neg = (0..f).filter(|&b| always_zero[b]).collect();
    Ok((pos, neg))
}

/// Preconditions from regression-head probes: pos = bits forced to 1, neg =
/// bits forced to 0, prevail = bits copied from the successor, and bits
/// claiming both signs become xor precondition bits.
pub fn extract_preconditions_regression(
    model: &mut CubeSpace,
    label: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
    let f = model.lat.f_bits;
    let zeros = Array2::zeros((1, f));
    let ones = Array2::from_elem((1, f), 1.0);
    let probe0 = model.regress_bits(&zeros, &[label]).row(0).to_owned();
    let probe1 = model.regress_bits(&ones, &[label]).row(0).to_owned();
    let (pos, neg, xor) = classify_probes(&probe0, &probe1);
    let constrained = |b: &usize| {
        pos.binary_search(b).is_ok() || neg.binary_search(b).is_ok() || xor.binary_search(b).is_ok()
    };
    let prevail = (0..f).filter(|b| !constrained(b)).collect();
    (pos, neg, prevail, xor)
}

/// Reads one action off the model. Ad-hoc preconditions when the model has no
/// regression head, probed regression preconditions otherwise.
pub fn extract_action(
    model: &mut CubeSpace,
    data: &LatentDataset,
    label: usize,
) -> Result<ExtractedAction, ExtractError> {
    let (add, del, xor_effect_bits) = extract_effects(model, label);
    if model.bidirectional() {
        let (pos, neg, prevail, xor_precondition_bits) =
            extract_preconditions_regression(model, label);
        Ok(ExtractedAction {
            label,
            pos,
            neg,
            prevail,
            add,
            del,
            xor_effect_bits,
            xor_precondition_bits,
            provenance: Provenance::Ama4Regression,
        })
    } else {
        let (pos, neg) = extract_preconditions_adhoc(data, label)?;
        Ok(ExtractedAction {
            label,
            pos,
            neg,
            prevail: Vec::new(),
            add,
            del,
            xor_effect_bits,
            xor_precondition_bits: Vec::new(),
            provenance: Provenance::Ama3Adhoc,
        })
    }
}

/// A prevail bit that the effect head nonetheless modifies, with how the
/// conflict was resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrevailDefect {
    pub label: usize,
    pub bit: usize,
    pub effect_was_add: bool,
    pub resolution: PrevailResolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrevailResolution {
    /// All observed predecessors agree the bit flips: precondition pinned to
    /// the pre-flip value, effect kept.
    PinnedFlip,
    /// All observed predecessors already satisfy the effect: precondition
    /// pinned there, vacuous effect dropped.
    DroppedVacuous,
    /// Both pre-values observed; the effect cannot be monotone, so it is
    /// dropped and the bit stays prevail. This loses transitions and marks a
    /// model defect.
    DroppedConflicting,
}

/// Resolves prevail-precondition bits that carry a monotone effect. The
/// regression head says "unchanged" while the apply head changes the bit, so
/// the observed predecessors with this label decide: if they all sit at the
/// pre-flip value the precondition is pinned and the effect kept; if they all
/// sit at the post value the effect was vacuous and is dropped; mixed
/// observations drop the effect and record a defect.
pub fn reconcile_prevail(action: &mut ExtractedAction, data: &LatentDataset) -> Vec<PrevailDefect> {
    let mut defects = Vec::new();
    let observed: Vec<ndarray::ArrayView1<f64>> = data
        .z0
        .outer_iter()
        .zip(&data.labels)
        .filter(|&(_, &l)| l == action.label)
        .map(|(row, _)| row)
        .collect();
    if observed.is_empty() {
        return defects;
    }
    let mut resolve = |bit: usize, is_add: bool, action: &mut ExtractedAction| {
        let mut saw_zero = false;
        let mut saw_one = false;
        for row in &observed {
            if row[bit] >= 0.5 {
                saw_one = true;
            } else {
                saw_zero = true;
            }
        }
        // With an add effect the pre-flip value is 0; with a delete it is 1.
        let (flip_only, vacuous_only) = if is_add { (saw_zero && !saw_one, saw_one && !saw_zero) } else { (saw_one && !saw_zero, saw_zero && !saw_one) };
        let effects = if is_add { &mut action.add } else { &mut action.del };
        let resolution = if flip_only {
            action.prevail.retain(|&b| b != bit);
            if is_add {
                action.neg.push(bit);
                action.neg.sort_unstable();
            } else {
                action.pos.push(bit);
                action.pos.sort_unstable();
            }
            PrevailResolution::PinnedFlip
        } else if vacuous_only {
            action.prevail.retain(|&b| b != bit);
            effects.retain(|&b| b != bit);
            if is_add {
                action.pos.push(bit);
                action.pos.sort_unstable();
            } else {
                action.neg.push(bit);
                action.neg.sort_unstable();
            }
            PrevailResolution::DroppedVacuous
        } else {
            effects.retain(|&b| b != bit);
            PrevailResolution::DroppedConflicting
        };
        defects.push(PrevailDefect { label: action.label, bit, effect_was_add: is_add, resolution });
    };
    let conflicted_adds: Vec<usize> =
        action.add.iter().filter(|b| action.prevail.contains(b)).copied().collect();
    let conflicted_dels: Vec<usize> =
        action.del.iter().filter(|b| action.prevail.contains(b)).copied().collect();
    for bit in conflicted_adds {
        resolve(bit, true, action);
    }
    for bit in conflicted_dels {
        resolve(bit, false, action);
    }
    defects
}

/// Expands xor bits away. Each free xor bit doubles the action: one variant
/// per pre-value, with the matching precondition and the flip effect. A bit
/// that is xor in both the effect and the precondition still splits once. A
/// bit already pinned by a monotone precondition does not split; it only
/// gains the flip effect its pinned value implies. The flip effect is never
/// added over an existing monotone effect on the same bit.
pub fn compile_xor(actions: &[ExtractedAction]) -> Result<Vec<GroundAction>, ExtractError> {
    let mut out = Vec::new();
    for action in actions {
        let xor_bits = action.xor_bits();
        let mut free = Vec::new();
        let mut pinned = Vec::new();
        for &b in &xor_bits {
            if action.pos.contains(&b) {
                pinned.push((b, true));
            } else if action.neg.contains(&b) {
                pinned.push((b, false));
            } else {
                free.push(b);
            }
        }
        if free.len() > MAX_XOR_BITS {
            return Err(ExtractError::TooManyXorBits { label: action.label, bits: free.len() });
        }
        for mask in 0u32..1 << free.len() {
            let mut pos = action.pos.clone();
            let mut neg = action.neg.clone();
            let mut add = action.add.clone();
            let mut del = action.del.clone();
            let flip = |bit: usize, value: bool, add: &mut Vec<usize>, del: &mut Vec<usize>| {
                if add.contains(&bit) || del.contains(&bit) {
                    return;
                }
                if value {
                    del.push(bit);
                } else {
                    add.push(bit);
                }
            };
            let mut suffix = String::new();
            for (i, &b) in free.iter().enumerate() {
                let value = mask >> i & 1 == 1;
                suffix.push(if value { '1' } else { '0' });
                if value {
                    pos.push(b);
                } else {
                    neg.push(b);
                }
                flip(b, value, &mut add, &mut del);
            }
            for &(b, value) in &pinned {
                flip(b, value, &mut add, &mut del);
            }
            let name = if free.is_empty() {
                action.name()
            } else {
                format!("{}-x{}", action.name(), suffix)
            };
            out.push(GroundAction::new(name, pos, neg, add, del));
        }
    }
    Ok(out)
}

/// How well the compiled actions reproduce the model's own successor
/// predictions on the training transitions. Only transitions the model
/// predicts exactly (apply(z0) = z1) are checked; for each, the variant of
/// the assigned label that is applicable at z0 must progress it to exactly
/// z1. Mismatches are listed, never dropped.
#[derive(Clone, Debug, Default)]
pub struct FidelityReport {
    /// Transitions where the model's successor prediction was exact.
    pub checked: usize,
    /// Of those, transitions the compiled action set reproduces.
    pub matched: usize,
    pub mismatches: Vec<FidelityMismatch>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FidelityMismatch {
    pub transition: usize,
    pub label: usize,
    pub reason: FidelityFailure,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FidelityFailure {
    NoApplicableVariant,
    WrongSuccessor { got: String, want: String },
}

impl FidelityReport {
    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.matched as f64 / self.checked as f64
        }
    }
}

pub fn check_fidelity(
    model: &mut CubeSpace,
    data: &LatentDataset,
    compiled: &[GroundAction],
) -> FidelityReport {
    let predicted = model.apply_bits(&data.z0, &data.labels);
    let mut report = FidelityReport::default();
    for (i, ((r0, r1), pred)) in data
        .z0
        .outer_iter()
        .zip(data.z1.outer_iter())
        .zip(predicted.outer_iter())
        .enumerate()
    {
        if r1
            .iter()
            .zip(pred.iter())
            .any(|(&a, &b)| (a >= 0.5) != (b >= 0.5))
        {
            continue;
        }
        report.checked += 1;
        let label = data.labels[i];
        let s0 = row_to_state(r0);
        let s1 = row_to_state(r1);
        let prefix = format!("a{label}");
        let candidates = compiled.iter().filter(|a| {
            a.name == prefix || a.name.starts_with(&format!("{prefix}-x"))
        });
        let mut applied = None;
        for a in candidates {
            if is_applicable(&s0, a) {
                applied = Some(progress(&s0, a).unwrap());
                break;
            }
        }
        match applied {
            None => report.mismatches.push(FidelityMismatch {
                transition: i,
                label,
                reason: FidelityFailure::NoApplicableVariant,
            }),
            Some(got) if got != s1 => report.mismatches.push(FidelityMismatch {
                transition: i,
                label,
                reason: FidelityFailure::WrongSuccessor {
                    got: got.to_str01(),
                    want: s1.to_str01(),
                },
            }),
            Some(_) => report.matched += 1,
        }
    }
    report
}

#[derive(Clone, Debug)]
pub struct ActionStats {
    pub label: usize,
    pub xor_effect_bits: usize,
    pub xor_precondition_bits: usize,
    pub variants: usize,
}

#[derive(Clone, Debug)]
pub struct ExtractionReport {
    pub f_bits: usize,
    /// Label capacity of the action head.
    pub labels_total: usize,
    /// Labels the dataset actually selects (actions before compilation).
    pub labels_used: usize,
    /// Grounded actions after xor compilation.
    pub actions_compiled: usize,
    pub per_action: Vec<ActionStats>,
    pub defects: Vec<PrevailDefect>,
    pub fidelity: FidelityReport,
}

impl ExtractionReport {
    pub fn mean_xor_effect_bits(&self) -> f64 {
        if self.per_action.is_empty() {
            return 0.0;
        }
        self.per_action.iter().map(|a| a.xor_effect_bits as f64).sum::<f64>()
            / self.per_action.len() as f64
    }

    pub fn mean_xor_precondition_bits(&self) -> f64 {
        if self.per_action.is_empty() {
            return 0.0;
        }
        self.per_action.iter().map(|a| a.xor_precondition_bits as f64).sum::<f64>()
            / self.per_action.len() as f64
    }

    /// Tab-separated: one summary line, then one row per used label.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# f_bits={} labels_total={} labels_used={} actions_compiled={} mean_xor_effects={:.4} mean_xor_preconditions={:.4} fidelity={:.4} defects={}\n",
            self.f_bits,
            self.labels_total,
            self.labels_used,
            self.actions_compiled,
            self.mean_xor_effect_bits(),
            self.mean_xor_precondition_bits(),
            self.fidelity.fraction(),
            self.defects.len(),
        ));
        out.push_str("label\txor_effect_bits\txor_precondition_bits\tvariants\n");
        for a in &self.per_action {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                a.label, a.xor_effect_bits, a.xor_precondition_bits, a.variants
            ));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct DomainArtifacts {
    pub domain_text: String,
    pub actions: Vec<GroundAction>,
    pub extracted: Vec<ExtractedAction>,
    pub report: ExtractionReport,
}

/// Full extraction pipeline: encode the dataset, prune unused labels, read
/// each surviving action off the network, reconcile prevail conflicts,
/// compile xor bits away, and emit the domain.
pub fn generate_domain(
    model: &mut CubeSpace,
    x0: &Array4<f64>,
    x1: &Array4<f64>,
    domain_name: &str,
) -> Result<DomainArtifacts, ExtractError> {
    if x0.shape()[0] == 0 {
        return Err(ExtractError::EmptyDataset);
    }
    let data = encode_dataset(model, x0, x1);
    generate_domain_from_latent(model, &data, domain_name)
}

pub fn generate_domain_from_latent(
    model: &mut CubeSpace,
    data: &LatentDataset,
    domain_name: &str,
) -> Result<DomainArtifacts, ExtractError> {
    if data.is_empty() {
        return Err(ExtractError::EmptyDataset);
    }
    let used = prune_unused(&data.labels);
    let mut extracted = Vec::with_capacity(used.len());
    let mut defects = Vec::new();
    for &label in &used {
        let mut action = extract_action(model, data, label)?;
        defects.extend(reconcile_prevail(&mut action, data));
        extracted.push(action);
    }
    let actions = compile_xor(&extracted)?;
    let fidelity = check_fidelity(model, data, &actions);
    let per_action = extracted
        .iter()
        .map(|a| {
            let prefix = a.name();
            let variants = actions
                .iter()
                .filter(|g| g.name == prefix || g.name.starts_with(&format!("{prefix}-x")))
                .count();
            ActionStats {
                label: a.label,
                xor_effect_bits: a.xor_effect_bits.len(),
                xor_precondition_bits: a.xor_precondition_bits.len(),
                variants,
            }
        })
        .collect();
    let report = ExtractionReport {
        f_bits: data.f_bits(),
        labels_total: model.lat.actions,
        labels_used: used.len(),
        actions_compiled: actions.len(),
        per_action,
        defects,
        fidelity,
    };
    let domain_text = emit_domain(domain_name, data.f_bits(), &actions);
    Ok(DomainArtifacts { domain_text, actions, extracted, report })
}

/// Encodes a pre-normalized image pair into a problem file. The goal is the
/// complete literal assignment of the goal state, so exactly one latent state
/// satisfies it.
pub fn generate_problem(
    model: &mut TrainedModel,
    x_init: ArrayView3<f64>,
    x_goal: ArrayView3<f64>,
    problem_name: &str,
    domain_name: &str,
) -> Result<String, ExtractError> {
    let expected = model.net().image_shape;
    let dims = |s: &[usize]| (s[0], s[1], s[2]);
    for got in [dims(x_init.shape()), dims(x_goal.shape())] {
        if got != expected {
            return Err(ExtractError::ShapeMismatch { expected, got });
        }
    }
    let mut batch = Array4::zeros((2, expected.0, expected.1, expected.2));
    batch.index_axis_mut(Axis(0), 0).assign(&x_init);
    batch.index_axis_mut(Axis(0), 1).assign(&x_goal);
    let z = model.encode_bits(&batch);
    let init = row_to_state(z.row(0));
    let goal = row_to_state(z.row(1));
    let goal_pos: Vec<usize> = goal.ones().collect();
    let goal_neg: Vec<usize> = (0..goal.width()).filter(|&b| !goal.get(b)).collect();
    Ok(emit_problem(problem_name, domain_name, &init, &goal_pos, &goal_neg))
}
