//! PDDL text I/O for grounded propositional domains.
//!
//! Output is grounded STRIPS with zero-ary predicates z0..z{F-1} and the
//! :negative-preconditions requirement. The emitter is deterministic and the
//! parser accepts both `:precondition`/`:effect` and the plural spellings, so
//! emit -> parse -> emit reaches a fixpoint after one pass.

use std::fmt::Write as _;

use super::{GroundAction, PlanningProblem, State, StripsError};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}, column {col}: {msg}")]
pub struct PddlError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Pos {
    line: usize,
    col: usize,
}

impl Pos {
    fn err(self, msg: impl Into<String>) -> PddlError {
        PddlError { line: self.line, col: self.col, msg: msg.into() }
    }
}

#[derive(Debug)]
enum Sexp {
    Atom(String, Pos),
    List(Vec<Sexp>, Pos),
}

impl Sexp {
    fn pos(&self) -> Pos {
        match self {
            Sexp::Atom(_, p) | Sexp::List(_, p) => *p,
        }
    }
}

#[derive(Debug)]
enum Token {
    LParen(Pos),
    RParen(Pos),
    Atom(String, Pos),
}

fn lex(text: &str) -> Result<Vec<Token>, PddlError> {
    let mut tokens = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        let pos = Pos { line, col };
        match c {
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                col += 1;
            }
            ';' => {
                // Comment to end of line.
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                    col += 1;
                }
            }
            '(' => {
                chars.next();
                col += 1;
                tokens.push(Token::LParen(pos));
            }
            ')' => {
                chars.next();
                col += 1;
                tokens.push(Token::RParen(pos));
            }
            _ => {
                let mut atom = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' || c == ';' {
                        break;
                    }
                    atom.push(c);
                    chars.next();
                    col += 1;
                }
                tokens.push(Token::Atom(atom, pos));
            }
        }
    }
    Ok(tokens)
}

fn parse_sexp(tokens: &[Token], at: &mut usize) -> Result<Sexp, PddlError> {
    match tokens.get(*at) {
        None => {
            Err(PddlError { line: 0, col: 0, msg: "unexpected end of input".into() })
        }
        Some(Token::Atom(s, pos)) => {
            *at += 1;
            Ok(Sexp::Atom(s.clone(), *pos))
        }
        Some(Token::RParen(pos)) => Err(pos.err("unexpected closing parenthesis")),
        Some(Token::LParen(pos)) => {
            let open = *pos;
            *at += 1;
            let mut items = Vec::new();
            loop {
                match tokens.get(*at) {
                    None => return Err(open.err("unclosed parenthesis")),
                    Some(Token::RParen(_)) => {
                        *at += 1;
                        return Ok(Sexp::List(items, open));
                    }
                    _ => items.push(parse_sexp(tokens, at)?),
                }
            }
        }
    }
}

fn parse_single(text: &str) -> Result<Sexp, PddlError> {
    let tokens = lex(text)?;
    let mut at = 0;
    if tokens.is_empty() {
        return Err(PddlError { line: 1, col: 1, msg: "empty input".into() });
    }
    let sexp = parse_sexp(&tokens, &mut at)?;
    if let Some(extra) = tokens.get(at) {
        let pos = match extra {
            Token::LParen(p) | Token::RParen(p) | Token::Atom(_, p) => *p,
        };
        return Err(pos.err("trailing content after the top-level form"));
    }
    Ok(sexp)
}

fn keyword_eq(atom: &str, keyword: &str) -> bool {
    atom.eq_ignore_ascii_case(keyword)
}

fn prop_name(bit: usize) -> String {
    format!("z{bit}")
}

/// Accepts exactly the names the emitter produces: "z" followed by a decimal
/// index without leading zeros.
fn parse_prop(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('z')?;
    if digits.is_empty() || (digits.len() > 1 && digits.starts_with('0')) {
        return None;
    }
    digits.parse().ok()
}

const CHUNK: usize = 12;

fn push_chunked(out: &mut String, head: &str, items: &[String], indent: &str) {
    out.push_str(head);
    for (i, item) in items.iter().enumerate() {
        if i > 0 && i % CHUNK == 0 {
            out.push('\n');
            out.push_str(indent);
        } else {
            out.push(' ');
        }
        out.push_str(item);
    }
    out.push(')');
    out.push('\n');
}

fn literal_text(bit: usize, positive: bool) -> String {
    if positive {
        format!("({})", prop_name(bit))
    } else {
        format!("(not ({}))", prop_name(bit))
    }
}

/// Literals of a condition or effect in proposition order, positive form
/// first when a bit appears with both signs (it never does for valid input).
fn ordered_literals(positive: &[usize], negative: &[usize]) -> Vec<String> {
    let mut bits: Vec<(usize, bool)> = positive
        .iter()
        .map(|&b| (b, true))
        .chain(negative.iter().map(|&b| (b, false)))
        .collect();
    bits.sort_unstable_by_key(|&(b, pos)| (b, !pos));
    bits.into_iter().map(|(b, pos)| literal_text(b, pos)).collect()
}

pub fn emit_domain(name: &str, f_bits: usize, actions: &[GroundAction]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "(define (domain {name})");
    out.push_str("  (:requirements :strips :negative-preconditions)\n");
    let preds: Vec<String> = (0..f_bits).map(|b| format!("({})", prop_name(b))).collect();
    push_chunked(&mut out, "  (:predicates", &preds, "               ");
    for a in actions {
        let _ = writeln!(out, "  (:action {}", a.name);
        push_chunked(&mut out, "   :precondition (and", &ordered_literals(&a.pos, &a.neg), "        ");
        let mut effect = String::new();
        push_chunked(&mut effect, "   :effect (and", &ordered_literals(&a.add, &a.del), "        ");
        // The action form closes on the effect line.
        out.push_str(effect.trim_end());
        out.push_str(")\n");
    }
    out.push_str(")\n");
    out
}

pub fn emit_problem(
    name: &str,
    domain_name: &str,
    init: &State,
    goal_pos: &[usize],
    goal_neg: &[usize],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "(define (problem {name})");
    let _ = writeln!(out, "  (:domain {domain_name})");
    let true_props: Vec<String> = init.ones().map(|b| format!("({})", prop_name(b))).collect();
    push_chunked(&mut out, "  (:init", &true_props, "         ");
    let mut goal = String::new();
    push_chunked(&mut goal, "  (:goal (and", &ordered_literals(goal_pos, goal_neg), "        ");
    out.push_str(goal.trim_end());
    out.push_str(")\n");
    out.push_str(")\n");
    out
}

#[derive(Debug)]
pub struct ParsedDomain {
    pub name: String,
    pub f_bits: usize,
    pub actions: Vec<GroundAction>,
}

#[derive(Debug)]
pub struct ParsedProblem {
    pub name: String,
    pub domain: String,
    pub init_true: Vec<usize>,
    pub goal_pos: Vec<usize>,
    pub goal_neg: Vec<usize>,
}

fn expect_list<'a>(sexp: &'a Sexp, what: &str) -> Result<(&'a [Sexp], Pos), PddlError> {
    match sexp {
        Sexp::List(items, pos) => Ok((items, *pos)),
        Sexp::Atom(a, pos) => Err(pos.err(format!("expected {what}, found atom {a:?}"))),
    }
}

fn expect_atom<'a>(sexp: &'a Sexp, what: &str) -> Result<(&'a str, Pos), PddlError> {
    match sexp {
        Sexp::Atom(a, pos) => Ok((a, *pos)),
        Sexp::List(_, pos) => Err(pos.err(format!("expected {what}, found a list"))),
    }
}

/// Parses `(define ({kind} {name}) item*)`, returning the name and the items.
fn parse_define<'a>(sexp: &'a Sexp, kind: &str) -> Result<(String, &'a [Sexp]), PddlError> {
    let (items, pos) = expect_list(sexp, "a (define ...) form")?;
    let mut iter = items.iter();
    let head = iter.next().ok_or_else(|| pos.err("empty form, expected define"))?;
    let (head, head_pos) = expect_atom(head, "the define keyword")?;
    if !keyword_eq(head, "define") {
        return Err(head_pos.err(format!("expected define, found {head:?}")));
    }
    let header = iter.next().ok_or_else(|| pos.err(format!("missing ({kind} name) header")))?;
    let (header_items, header_pos) = expect_list(header, &format!("({kind} name)"))?;
    if header_items.len() != 2 {
        return Err(header_pos.err(format!("expected ({kind} name)")));
    }
    let (tag, tag_pos) = expect_atom(&header_items[0], kind)?;
    if !keyword_eq(tag, kind) {
        return Err(tag_pos.err(format!("expected {kind}, found {tag:?}")));
    }
    let (name, _) = expect_atom(&header_items[1], "a name")?;
    Ok((name.to_string(), &items[2..]))
}

/// Parses one literal: `(zK)` or `(not (zK))`. Returns (bit, positive).
fn parse_literal(sexp: &Sexp) -> Result<(usize, bool), PddlError> {
    let (items, pos) = expect_list(sexp, "a literal")?;
    if items.is_empty() {
        return Err(pos.err("empty literal"));
    }
    let (head, head_pos) = expect_atom(&items[0], "a predicate or not")?;
    if keyword_eq(head, "not") {
        if items.len() != 2 {
            return Err(pos.err("not takes exactly one literal"));
        }
        let (bit, positive) = parse_literal(&items[1])?;
        if !positive {
            return Err(pos.err("doubly negated literal"));
        }
        return Ok((bit, false));
    }
    if items.len() != 1 {
        return Err(head_pos.err(format!("predicate {head:?} takes no arguments")));
    }
    match parse_prop(head) {
        Some(bit) => Ok((bit, true)),
        None => Err(head_pos.err(format!("unknown predicate {head:?}, expected z<index>"))),
    }
}

/// Parses a conjunction: `(and L*)`, a bare literal, or `(and)` for empty.
fn parse_condition(sexp: &Sexp) -> Result<(Vec<usize>, Vec<usize>), PddlError> {
    let (items, _) = expect_list(sexp, "a condition")?;
    let literals: Vec<&Sexp> = match items.first() {
        Some(Sexp::Atom(head, _)) if keyword_eq(head, "and") => items[1..].iter().collect(),
        _ => vec![sexp],
    };
    let mut pos_bits = Vec::new();
    let mut neg_bits = Vec::new();
    for lit in literals {
        let (bit, positive) = parse_literal(lit)?;
        let (own, other) = if positive {
            (&mut pos_bits, &neg_bits)
        } else {
            (&mut neg_bits, &pos_bits)
        };
        if other.contains(&bit) {
            return Err(lit.pos().err(format!("z{bit} appears with both signs")));
        }
        if !own.contains(&bit) {
            own.push(bit);
        }
    }
    pos_bits.sort_unstable();
    neg_bits.sort_unstable();
    Ok((pos_bits, neg_bits))
}

fn section_tag(items: &[Sexp]) -> Option<&str> {
    match items.first() {
        Some(Sexp::Atom(tag, _)) if tag.starts_with(':') => Some(tag),
        _ => None,
    }
}

pub fn parse_domain(text: &str) -> Result<ParsedDomain, PddlError> {
    let sexp = parse_single(text)?;
    let (name, body) = parse_define(&sexp, "domain")?;
    let mut f_bits: Option<usize> = None;
    let mut actions = Vec::new();
    for section in body {
        let (items, pos) = expect_list(section, "a domain section")?;
        let tag = section_tag(items).ok_or_else(|| pos.err("expected a :keyword section"))?;
        if keyword_eq(tag, ":requirements") {
            for req in &items[1..] {
                let (flag, flag_pos) = expect_atom(req, "a requirement flag")?;
                if !flag.starts_with(':') {
                    return Err(flag_pos.err(format!("bad requirement {flag:?}")));
                }
            }
        } else if keyword_eq(tag, ":predicates") {
            let mut seen = Vec::new();
            for pred in &items[1..] {
                let (bit, positive) = parse_literal(pred)?;
                if !positive {
                    return Err(pred.pos().err("negated predicate declaration"));
                }
                if seen.contains(&bit) {
                    return Err(pred.pos().err(format!("duplicate predicate z{bit}")));
                }
                seen.push(bit);
            }
            seen.sort_unstable();
            if seen.iter().enumerate().any(|(i, &b)| i != b) {
                return Err(pos.err("predicates must be exactly z0..z{n-1}"));
            }
            f_bits = Some(seen.len());
        } else if keyword_eq(tag, ":action") {
            let (action_name, _) =
                expect_atom(items.get(1).ok_or_else(|| pos.err("action without a name"))?, "an action name")?;
            let mut pre: Option<(Vec<usize>, Vec<usize>)> = None;
            let mut eff: Option<(Vec<usize>, Vec<usize>)> = None;
            let mut at = 2;
            while at < items.len() {
                let (key, key_pos) = expect_atom(&items[at], "an action keyword")?;
                let value = items
                    .get(at + 1)
                    .ok_or_else(|| key_pos.err(format!("{key} without a value")))?;
                if keyword_eq(key, ":precondition") || keyword_eq(key, ":preconditions") {
                    pre = Some(parse_condition(value)?);
                } else if keyword_eq(key, ":effect") || keyword_eq(key, ":effects") {
                    eff = Some(parse_condition(value)?);
                } else if keyword_eq(key, ":parameters") {
                    let (params, params_pos) = expect_list(value, "a parameter list")?;
                    if !params.is_empty() {
                        return Err(params_pos.err("only grounded actions are supported"));
                    }
                } else {
                    return Err(key_pos.err(format!("unsupported action keyword {key}")));
                }
                at += 2;
            }
            let (pos_bits, neg_bits) = pre.ok_or_else(|| pos.err("action without a precondition"))?;
            let (add_bits, del_bits) = eff.ok_or_else(|| pos.err("action without an effect"))?;
            actions.push(GroundAction::new(action_name, pos_bits, neg_bits, add_bits, del_bits));
        } else {
            return Err(pos.err(format!("unsupported domain section {tag}")));
        }
    }
    let f_bits = f_bits.ok_or_else(|| sexp.pos().err("domain has no :predicates section"))?;
    for a in &actions {
        if let Some(bit) = a.max_bit().filter(|&m| m >= f_bits) {
            return Err(sexp.pos().err(format!(
                "action {:?} uses z{bit} but only z0..z{} are declared",
                a.name,
                f_bits - 1
            )));
        }
    }
    Ok(ParsedDomain { name, f_bits, actions })
}

pub fn parse_problem(text: &str) -> Result<ParsedProblem, PddlError> {
    let sexp = parse_single(text)?;
    let (name, body) = parse_define(&sexp, "problem")?;
    let mut domain: Option<String> = None;
    let mut init_true: Option<Vec<usize>> = None;
    let mut goal: Option<(Vec<usize>, Vec<usize>)> = None;
    for section in body {
        let (items, pos) = expect_list(section, "a problem section")?;
        let tag = section_tag(items).ok_or_else(|| pos.err("expected a :keyword section"))?;
        if keyword_eq(tag, ":domain") {
            if items.len() != 2 {
                return Err(pos.err(":domain takes exactly one name"));
            }
            let (dname, _) = expect_atom(&items[1], "a domain name")?;
            domain = Some(dname.to_string());
        } else if keyword_eq(tag, ":init") {
            let mut bits = Vec::new();
            for lit in &items[1..] {
                let (bit, positive) = parse_literal(lit)?;
                if !positive {
                    return Err(lit
                        .pos()
                        .err("negative literal in :init; false propositions are implicit"));
                }
                if !bits.contains(&bit) {
                    bits.push(bit);
                }
            }
            bits.sort_unstable();
            init_true = Some(bits);
        } else if keyword_eq(tag, ":goal") {
            if items.len() != 2 {
                return Err(pos.err(":goal takes exactly one condition"));
            }
            goal = Some(parse_condition(&items[1])?);
        } else {
            return Err(pos.err(format!("unsupported problem section {tag}")));
        }
    }
    let domain = domain.ok_or_else(|| sexp.pos().err("problem has no :domain section"))?;
    let init_true = init_true.ok_or_else(|| sexp.pos().err("problem has no :init section"))?;
    let (goal_pos, goal_neg) = goal.ok_or_else(|| sexp.pos().err("problem has no :goal section"))?;
    Ok(ParsedProblem { name, domain, init_true, goal_pos, goal_neg })
}

impl ParsedProblem {
    /// Builds the in-memory problem against a parsed domain, applying the
    /// closed-world reading of :init.
    pub fn assemble(&self, domain: &ParsedDomain) -> Result<PlanningProblem, StripsError> {
        let mut init = State::zeros(domain.f_bits);
        for &bit in &self.init_true {
            if bit >= domain.f_bits {
                return Err(StripsError::BitOutOfRange { bit, width: domain.f_bits });
            }
            init.set(bit, true);
        }
        PlanningProblem::new(
            domain.f_bits,
            domain.actions.clone(),
            init,
            self.goal_pos.clone(),
            self.goal_neg.clone(),
        )
    }
}

/// Parses a plan file: one `(action-name)` form per line, `;` comments and
/// blank lines ignored. This is the format common planners write.
pub fn parse_plan_file(text: &str) -> Result<Vec<String>, PddlError> {
    let tokens = lex(text)?;
    let mut at = 0;
    let mut names = Vec::new();
    while at < tokens.len() {
        let sexp = parse_sexp(&tokens, &mut at)?;
        let (items, pos) = expect_list(&sexp, "a plan step")?;
        if items.len() != 1 {
            return Err(pos.err("plan steps must be a single grounded action name"));
        }
        let (name, _) = expect_atom(&items[0], "an action name")?;
        names.push(name.to_string());
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example_action() -> GroundAction {
        GroundAction::new("action-0011-0101", vec![2, 3], vec![0, 1], vec![1], vec![2])
    }

    #[test]
    fn the_four_bit_action_emits_its_exact_literal_lists() {
        let text = emit_domain("latent", 4, &[example_action()]);
        assert!(
            text.contains(":precondition (and (not (z0)) (not (z1)) (z2) (z3))"),
            "precondition line missing in:\n{text}"
        );
        assert!(
            text.contains(":effect (and (z1) (not (z2)))"),
            "effect line missing in:\n{text}"
        );
        assert!(text.contains("(:requirements :strips :negative-preconditions)"));
        assert!(text.contains("(:action action-0011-0101"));
    }

    #[test]
    fn domain_round_trip_preserves_structure() {
        let actions = vec![
            example_action(),
            GroundAction::new("empty", vec![], vec![], vec![], vec![]),
        ];
        let text = emit_domain("latent", 4, &actions);
        let parsed = parse_domain(&text).unwrap();
        assert_eq!(parsed.name, "latent");
        assert_eq!(parsed.f_bits, 4);
        assert_eq!(parsed.actions, actions);
        assert_eq!(emit_domain(&parsed.name, parsed.f_bits, &parsed.actions), text);
    }

    #[test]
    fn empty_domain_is_valid() {
        let text = emit_domain("void", 3, &[]);
        let parsed = parse_domain(&text).unwrap();
        assert!(parsed.actions.is_empty());
        assert_eq!(parsed.f_bits, 3);
    }

    #[test]
    fn problem_round_trip_preserves_structure() {
        let init = State::from_str01("0011").unwrap();
        let text = emit_problem("case7", "latent", &init, &[1], &[2, 3]);
        let parsed = parse_problem(&text).unwrap();
        assert_eq!(parsed.name, "case7");
        assert_eq!(parsed.domain, "latent");
        assert_eq!(parsed.init_true, vec![2, 3]);
        assert_eq!(parsed.goal_pos, vec![1]);
        assert_eq!(parsed.goal_neg, vec![2, 3]);
        let domain = ParsedDomain { name: "latent".into(), f_bits: 4, actions: vec![example_action()] };
        let problem = parsed.assemble(&domain).unwrap();
        assert_eq!(problem.init, init);
        let again = emit_problem(&parsed.name, &parsed.domain, &problem.init, &parsed.goal_pos, &parsed.goal_neg);
        assert_eq!(again, text);
    }

    #[test]
    fn plural_section_spellings_are_accepted() {
        let text = "(define (domain latent)\n  (:requirements :strips :negative-preconditions)\n  (:predicates (z0) (z1) (z2) (z3))\n  (:action action-0011-0101\n   :preconditions (and (not (z0)) (not (z1)) (z2) (z3))\n   :effects (and (z1) (not (z2)))))\n";
        let parsed = parse_domain(text).unwrap();
        assert_eq!(parsed.actions, vec![example_action()]);
    }

    #[test]
    fn parse_errors_carry_positions() {
        let unclosed = "(define (domain d)\n  (:predicates (z0)";
        let err = parse_domain(unclosed).unwrap_err();
        assert_eq!((err.line, err.col), (2, 3), "{err}");
        assert!(err.msg.contains("unclosed"), "{err}");

        let double = "(define (domain d)\n  (:predicates (z0))\n  (:action a\n   :precondition (and (z0) (not (z0)))\n   :effect (and)))\n";
        let err = parse_domain(double).unwrap_err();
        assert_eq!(err.line, 4, "{err}");
        assert!(err.msg.contains("both signs"), "{err}");

        let bad_pred = "(define (domain d)\n  (:predicates (q0)))\n";
        let err = parse_domain(bad_pred).unwrap_err();
        assert!(err.msg.contains("unknown predicate"), "{err}");

        let neg_init = "(define (problem p)\n  (:domain d)\n  (:init (not (z0)))\n  (:goal (and)))\n";
        let err = parse_problem(neg_init).unwrap_err();
        assert_eq!(err.line, 3, "{err}");
    }

    #[test]
    fn emission_is_a_fixpoint_on_random_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..100 {
            let f_bits = rng.gen_range(1..=40);
            let n_actions = rng.gen_range(0..=12);
            let actions: Vec<GroundAction> = (0..n_actions)
                .map(|i| {
                    let mut sets = [const { Vec::new() }; 4];
                    for b in 0..f_bits {
                        match rng.gen_range(0..5) {
                            0 => sets[0].push(b),
                            1 => sets[1].push(b),
                            _ => {}
                        }
                        match rng.gen_range(0..5) {
                            0 => sets[2].push(b),
                            1 => sets[3].push(b),
                            _ => {}
                        }
                    }
                    let [pos, neg, add, del] = sets;
                    GroundAction::new(format!("a{i}"), pos, neg, add, del)
                })
                .collect();
            let first = emit_domain("fuzzed", f_bits, &actions);
            let parsed = parse_domain(&first).unwrap_or_else(|e| panic!("case {case}: {e}\n{first}"));
            let second = emit_domain(&parsed.name, parsed.f_bits, &parsed.actions);
            assert_eq!(first, second, "case {case}");
        }
    }

    #[test]
    fn plan_files_parse_names_and_comments() {
        let text = "(a1)\n(action-0011-0101)\n; cost = 2 (unit cost)\n";
        assert_eq!(parse_plan_file(text).unwrap(), vec!["a1".to_string(), "action-0011-0101".to_string()]);
        assert!(parse_plan_file("(a b)").is_err());
    }
}
