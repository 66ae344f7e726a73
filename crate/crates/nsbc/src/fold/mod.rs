//! Stratified default-rule sets: representation, structural checks,
//! decision-list classification, induction from a binarization table, and the
//! textual rule syntax.
//!
//! A rule-set is an ordered list of rules. `target(X,'c') :- body.` rules are
//! scanned in order and the first whose body holds classifies the input;
//! `ab<j>(X) :- body.` rules define the abnormality predicates that appear
//! negated in other bodies as exceptions.

mod learn;
mod parse;

pub use learn::learn_ruleset;
pub use parse::parse_ruleset;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub const MAX_EXCEPTION_DEPTH: usize = 3;

/// Hyperparameters of rule induction: `ratio` bounds false positives per
/// true positive in a rule's default part, `tail` is the minimum number of
/// training examples a rule must cover.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct FoldParams {
    pub ratio: f64,
    pub tail: usize,
}

impl FoldParams {
    /// Default hyperparameters for an `n`-row table.
    pub fn defaults_for(n: usize) -> Self {
        FoldParams { ratio: 0.5, tail: 2.max(n / 50) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio >= 0.0) || !self.ratio.is_finite() {
            return Err(Error::Config("fold.ratio must be a finite value >= 0".into()));
        }
        if self.tail < 1 {
            return Err(Error::Config("fold.tail must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Pred {
    /// A filter predicate, e.g. `f3` or a concept name like `sky1`.
    Filter(String),
    /// An abnormality predicate `ab<j>`.
    Ab(u32),
}

impl Pred {
    pub fn name(&self) -> String {
        match self {
            Pred::Filter(s) => s.clone(),
            Pred::Ab(j) => format!("ab{j}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Literal {
    pub pred: Pred,
    pub negated: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Head {
    /// `target(X,'<class>')`
    Target(String),
    /// `ab<j>(X)`
    Ab(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub head: Head,
    pub body: Vec<Literal>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

impl RuleSet {
    /// Distinct filter predicates across all bodies, in first-occurrence order.
    pub fn filter_predicates(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for rule in &self.rules {
            for lit in &rule.body {
                if let Pred::Filter(name) = &lit.pred {
                    if seen.insert(name.clone()) {
                        out.push(name.clone());
                    }
                }
            }
        }
        out
    }

    /// Class names appearing in rule heads, in first-occurrence order.
    pub fn classes(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for rule in &self.rules {
            if let Head::Target(c) = &rule.head {
                if seen.insert(c.clone()) {
                    out.push(c.clone());
                }
            }
        }
        out
    }

    /// Indices of the rules defining each abnormality predicate.
    fn ab_definitions(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, rule) in self.rules.iter().enumerate() {
            if let Head::Ab(j) = rule.head {
                map.entry(j).or_default().push(i);
            }
        }
        map
    }

    /// Structural invariants: every abnormality heads exactly one rule, no
    /// cycles through negation, every body predicate is a filter predicate or
    /// a defined abnormality.
    pub fn validate(&self) -> Result<()> {
        if !abx_uniqueness_check(self) {
            return Err(Error::NotStratified(
                "an abnormality predicate heads zero or several rules".into(),
            ));
        }
        if !stratification_check(self) {
            return Err(Error::NotStratified("cycle through negation".into()));
        }
        let defined = self.ab_definitions();
        for rule in &self.rules {
            for lit in &rule.body {
                if let Pred::Ab(j) = lit.pred {
                    if !defined.contains_key(&j) {
                        return Err(Error::UnknownPredicate(format!("ab{j}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy with filter predicates renamed through `names` (old -> new).
    /// Predicates absent from the map keep their name.
    pub fn rename_filters(&self, names: &BTreeMap<String, String>) -> RuleSet {
        let rules = self
            .rules
            .iter()
            .map(|rule| Rule {
                head: rule.head.clone(),
                body: rule
                    .body
                    .iter()
                    .map(|lit| Literal {
                        pred: match &lit.pred {
                            Pred::Filter(n) => {
                                Pred::Filter(names.get(n).cloned().unwrap_or_else(|| n.clone()))
                            }
                            other => other.clone(),
                        },
                        negated: lit.negated,
                    })
                    .collect(),
            })
            .collect();
        RuleSet { rules }
    }
}

/// True iff every abnormality predicate referenced or defined heads exactly
/// one rule.
pub fn abx_uniqueness_check(rs: &RuleSet) -> bool {
    let defs = rs.ab_definitions();
    if defs.values().any(|v| v.len() != 1) {
        return false;
    }
    // referenced but never defined also violates "exactly one"
    for rule in &rs.rules {
        for lit in &rule.body {
            if let Pred::Ab(j) = lit.pred {
                if !defs.contains_key(&j) {
                    return false;
                }
            }
        }
    }
    true
}

/// True iff the abnormality dependency graph has no cycle containing a
/// negated edge.
pub fn stratification_check(rs: &RuleSet) -> bool {
    // edges between ab predicates; filter predicates and target heads cannot
    // participate in cycles (they never head / never occur, respectively)
    let mut edges: Vec<(u32, u32, bool)> = Vec::new();
    for rule in &rs.rules {
        if let Head::Ab(from) = rule.head {
            for lit in &rule.body {
                if let Pred::Ab(to) = lit.pred {
                    edges.push((from, to, lit.negated));
                }
            }
        }
    }
    let reachable = |start: u32, goal: u32| -> bool {
        let mut stack = vec![start];
        let mut seen = BTreeSet::new();
        while let Some(node) = stack.pop() {
            if node == goal {
                return true;
            }
            if seen.insert(node) {
                for &(f, t, _) in &edges {
                    if f == node {
                        stack.push(t);
                    }
                }
            }
        }
        false
    };
    // a negated edge from -> to lies on a cycle iff `from` is reachable from `to`
    !edges.iter().any(|&(from, to, neg)| neg && reachable(to, from))
}

/// Resolves filter predicate names to positions in a binarized vector.
#[derive(Clone, Debug)]
pub struct PredicateBinding {
    cols: BTreeMap<String, usize>,
}

impl PredicateBinding {
    /// Raw filters `f1..fK` mapped to columns `0..K`.
    pub fn raw(k: usize) -> Self {
        PredicateBinding {
            cols: (0..k).map(|i| (crate::binarize::raw_filter_name(i), i)).collect(),
        }
    }

    /// Column names in position order (e.g. a table header or a label map's
    /// names listed by filter index).
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        PredicateBinding {
            cols: names.iter().enumerate().map(|(i, n)| (n.as_ref().to_string(), i)).collect(),
        }
    }

    /// Explicit name -> column pairs.
    pub fn from_pairs<I: IntoIterator<Item = (String, usize)>>(pairs: I) -> Self {
        PredicateBinding { cols: pairs.into_iter().collect() }
    }

    /// Labelled names resolve to their filter's column; raw `f<k>` names stay
    /// available for predicates the label map does not cover.
    pub fn from_label_positions(labels: &crate::semlabel::LabelMap) -> Self {
        let mut cols: BTreeMap<String, usize> = labels
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.filter))
            .collect();
        for e in &labels.entries {
            cols.entry(crate::binarize::raw_filter_name(e.filter)).or_insert(e.filter);
        }
        PredicateBinding { cols }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.cols.get(name).copied()
    }
}

enum AbMark {
    Visiting,
    Done(bool),
}

fn eval_body(
    rs: &RuleSet,
    defs: &BTreeMap<u32, Vec<usize>>,
    body: &[Literal],
    binvec: &[bool],
    binding: &PredicateBinding,
    marks: &mut BTreeMap<u32, AbMark>,
) -> Result<bool> {
    for lit in body {
        let value = match &lit.pred {
            Pred::Filter(name) => {
                let col = binding
                    .column(name)
                    .ok_or_else(|| Error::UnknownPredicate(name.clone()))?;
                *binvec
                    .get(col)
                    .ok_or_else(|| Error::shape("classify", format!("binvec misses column {col}")))?
            }
            Pred::Ab(j) => eval_ab(rs, defs, *j, binvec, binding, marks)?,
        };
        if value == lit.negated {
            return Ok(false);
        }
    }
    Ok(true)
}

fn eval_ab(
    rs: &RuleSet,
    defs: &BTreeMap<u32, Vec<usize>>,
    j: u32,
    binvec: &[bool],
    binding: &PredicateBinding,
    marks: &mut BTreeMap<u32, AbMark>,
) -> Result<bool> {
    match marks.get(&j) {
        Some(AbMark::Done(v)) => return Ok(*v),
        // in-progress revisit: least-fixpoint evaluation treats it as false
        Some(AbMark::Visiting) => return Ok(false),
        None => {}
    }
    let rule_idxs = defs
        .get(&j)
        .ok_or_else(|| Error::UnknownPredicate(format!("ab{j}")))?
        .clone();
    marks.insert(j, AbMark::Visiting);
    let mut value = false;
    for idx in rule_idxs {
        if eval_body(rs, defs, &rs.rules[idx].body, binvec, binding, marks)? {
            value = true;
            break;
        }
    }
    marks.insert(j, AbMark::Done(value));
    Ok(value)
}

/// First-fire-wins scan of the target rules. Returns the class and fired
/// rule index, or `None` when no rule fires (abstention).
pub fn classify<'a>(
    rs: &'a RuleSet,
    binvec: &[bool],
    binding: &PredicateBinding,
) -> Result<Option<(&'a str, usize)>> {
    let defs = rs.ab_definitions();
    let mut marks = BTreeMap::new();
    for (i, rule) in rs.rules.iter().enumerate() {
        if let Head::Target(class) = &rule.head {
            if eval_body(rs, &defs, &rule.body, binvec, binding, &mut marks)? {
                return Ok(Some((class.as_str(), i)));
            }
        }
    }
    Ok(None)
}

/// Canonical text form; `labels`, when given, renames filter predicates.
pub fn print_ruleset(rs: &RuleSet, labels: Option<&BTreeMap<String, String>>) -> String {
    let render = |rs: &RuleSet| {
        let mut out = String::new();
        for rule in &rs.rules {
            match &rule.head {
                Head::Target(c) => out.push_str(&format!("target(X,'{c}')")),
                Head::Ab(j) => out.push_str(&format!("ab{j}(X)")),
            }
            if !rule.body.is_empty() {
                out.push_str(" :- ");
                let lits: Vec<String> = rule
                    .body
                    .iter()
                    .map(|lit| {
                        let mut s = String::new();
                        if lit.negated {
                            s.push_str("not ");
                        }
                        s.push_str(&lit.pred.name());
                        s.push_str("(X)");
                        s
                    })
                    .collect();
                out.push_str(&lits.join(", "));
            }
            out.push_str(".\n");
        }
        out
    };
    match labels {
        Some(map) => render(&rs.rename_filters(map)),
        None => render(rs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(name: &str, negated: bool) -> Literal {
        Literal { pred: Pred::Filter(name.into()), negated }
    }

    fn ab_lit(j: u32, negated: bool) -> Literal {
        Literal { pred: Pred::Ab(j), negated }
    }

    #[test]
    fn classify_single_rule_fire_and_abstain() {
        let rs = RuleSet {
            rules: vec![Rule { head: Head::Target("c".into()), body: vec![lit("f1", false)] }],
        };
        let binding = PredicateBinding::raw(1);
        assert_eq!(classify(&rs, &[true], &binding).unwrap(), Some(("c", 0)));
        assert_eq!(classify(&rs, &[false], &binding).unwrap(), None);
    }

    #[test]
    fn exception_blocks_rule() {
        // target(X,c) :- f1(X), not ab1(X).  ab1(X) :- f2(X).
        let rs = RuleSet {
            rules: vec![
                Rule {
                    head: Head::Target("c".into()),
                    body: vec![lit("f1", false), ab_lit(1, true)],
                },
                Rule { head: Head::Ab(1), body: vec![lit("f2", false)] },
            ],
        };
        rs.validate().unwrap();
        let binding = PredicateBinding::raw(2);
        assert_eq!(classify(&rs, &[true, false], &binding).unwrap(), Some(("c", 0)));
        assert_eq!(classify(&rs, &[true, true], &binding).unwrap(), None);
    }

    #[test]
    fn classify_unknown_predicate_is_error() {
        let rs = RuleSet {
            rules: vec![Rule { head: Head::Target("c".into()), body: vec![lit("zebra", false)] }],
        };
        let binding = PredicateBinding::raw(1);
        assert!(classify(&rs, &[true], &binding).is_err());
    }

    #[test]
    fn self_negating_ab_fails_stratification() {
        let rs = RuleSet {
            rules: vec![Rule { head: Head::Ab(1), body: vec![ab_lit(1, true)] }],
        };
        assert!(!stratification_check(&rs));
        assert!(abx_uniqueness_check(&rs));
    }

    #[test]
    fn positive_ab_cycle_is_still_stratified() {
        let rs = RuleSet {
            rules: vec![
                Rule { head: Head::Ab(1), body: vec![ab_lit(2, false)] },
                Rule { head: Head::Ab(2), body: vec![ab_lit(1, false)] },
            ],
        };
        assert!(stratification_check(&rs));
        // least fixpoint: both false, so a rule guarded by `not ab1` fires
        let rs2 = RuleSet {
            rules: vec![
                Rule { head: Head::Target("c".into()), body: vec![ab_lit(1, true)] },
                rs.rules[0].clone(),
                rs.rules[1].clone(),
            ],
        };
        let binding = PredicateBinding::raw(0);
        assert_eq!(classify(&rs2, &[], &binding).unwrap(), Some(("c", 0)));
    }

    #[test]
    fn duplicate_ab_heads_fail_uniqueness() {
        let rs = RuleSet {
            rules: vec![
                Rule { head: Head::Ab(1), body: vec![lit("f1", false)] },
                Rule { head: Head::Ab(1), body: vec![lit("f2", false)] },
            ],
        };
        assert!(!abx_uniqueness_check(&rs));
    }

    #[test]
    fn negation_cycle_through_chain_detected() {
        // ab1 :- not ab2.  ab2 :- ab1.  (cycle ab1 -> ab2 -> ab1 with a negated edge)
        let rs = RuleSet {
            rules: vec![
                Rule { head: Head::Ab(1), body: vec![ab_lit(2, true)] },
                Rule { head: Head::Ab(2), body: vec![ab_lit(1, false)] },
            ],
        };
        assert!(!stratification_check(&rs));
    }

    #[test]
    fn print_canonical_forms() {
        let rs = RuleSet {
            rules: vec![
                Rule {
                    head: Head::Target("desert_road".into()),
                    body: vec![lit("f1", false), ab_lit(1, true)],
                },
                Rule { head: Head::Ab(1), body: vec![lit("f2", true)] },
                Rule { head: Head::Target("street".into()), body: vec![] },
            ],
        };
        let text = print_ruleset(&rs, None);
        assert_eq!(
            text,
            "target(X,'desert_road') :- f1(X), not ab1(X).\nab1(X) :- not f2(X).\ntarget(X,'street').\n"
        );
        let mut labels = BTreeMap::new();
        labels.insert("f1".to_string(), "sky1".to_string());
        let renamed = print_ruleset(&rs, Some(&labels));
        assert!(renamed.contains("sky1(X), not ab1(X)"));
        assert!(renamed.contains("not f2(X)"), "unmapped names stay");
    }
}
