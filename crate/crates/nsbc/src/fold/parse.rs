//! Parser for the textual rule syntax.
//!
//! One statement per `.`-terminated clause (statements may span lines):
//!
//! ```text
//! target(X,'<class>') :- <lit>{, <lit>}.
//! ab<j>(X) :- <lit>{, <lit>}.
//! ```
//!
//! `<lit>` is `[not ]<pred>(X)`. A tolerated two-argument variant encodes the
//! polarity in the argument: `<pred>(X,'1')` / `<pred>(X,'True')` is positive
//! and `<pred>(X,'0')` / `<pred>(X,'False')` negated; a leading `not` flips
//! it. Class names accept the backquote-apostrophe quoting style on input
//! (`` `kitchen' ``); output always uses plain apostrophes.

use crate::error::{Error, Result};

use super::{Head, Literal, Pred, Rule, RuleSet};

struct Scanner<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
    text: std::marker::PhantomData<&'a str>,
}

impl<'a> Scanner<'a> {
    fn new(text: &'a str) -> Self {
        Scanner {
            chars: text.chars().collect(),
            pos: 0,
            line: 1,
            col: 1,
            text: std::marker::PhantomData,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, col: self.col, msg: msg.into() }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        match self.peek() {
            Some(got) if got == c => {
                self.bump();
                Ok(())
            }
            Some(got) => Err(self.err(format!("expected `{c}`, found `{got}`"))),
            None => Err(self.err(format!("expected `{c}`, found end of input"))),
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() => {}
            Some(c) => return Err(self.err(format!("expected identifier, found `{c}`"))),
            None => return Err(self.err("expected identifier, found end of input")),
        }
        let mut out = String::new();
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            out.push(self.bump().unwrap());
        }
        Ok(out)
    }

    /// `'token'` or the paper's `` `token' `` style.
    fn quoted(&mut self) -> Result<String> {
        self.skip_ws();
        match self.peek() {
            Some('\'') | Some('`') => {
                self.bump();
            }
            Some(c) => return Err(self.err(format!("expected quoted token, found `{c}`"))),
            None => return Err(self.err("expected quoted token, found end of input")),
        }
        let mut out = String::new();
        loop {
            match self.peek() {
                Some('\'') => {
                    self.bump();
                    break;
                }
                Some(c) if c.is_ascii_alphanumeric() || c == '_' => {
                    out.push(self.bump().unwrap());
                }
                Some(c) => return Err(self.err(format!("invalid character `{c}` in quoted token"))),
                None => return Err(self.err("unterminated quoted token")),
            }
        }
        if out.is_empty() {
            return Err(self.err("empty quoted token"));
        }
        Ok(out)
    }

    fn variable(&mut self) -> Result<()> {
        let name = self.ident()?;
        if !name.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
            return Err(self.err(format!("expected a variable (uppercase), found `{name}`")));
        }
        Ok(())
    }
}

/// Splits `ab<j>` names; anything else is a filter predicate.
fn classify_pred(scanner: &Scanner, name: &str) -> Result<Pred> {
    if let Some(digits) = name.strip_prefix("ab") {
        if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
            let j: u32 = digits
                .parse()
                .map_err(|_| scanner.err(format!("abnormality index `{digits}` out of range")))?;
            if j == 0 {
                return Err(scanner.err("abnormality index must be >= 1"));
            }
            return Ok(Pred::Ab(j));
        }
    }
    Ok(Pred::Filter(name.to_string()))
}

/// Second-argument polarity: `'1'`/`'True'` positive, `'0'`/`'False'` negated.
fn arg_polarity(scanner: &Scanner, arg: &str) -> Result<bool> {
    match arg {
        "1" | "True" => Ok(true),
        "0" | "False" => Ok(false),
        other => Err(scanner.err(format!("unsupported predicate argument '{other}'"))),
    }
}

/// `(X)` or `(X,'<value>')`; returns the polarity carried by the argument.
fn parse_args(scanner: &mut Scanner) -> Result<bool> {
    scanner.expect('(')?;
    scanner.variable()?;
    scanner.skip_ws();
    let positive = if scanner.peek() == Some(',') {
        scanner.bump();
        let arg = scanner.quoted()?;
        arg_polarity(scanner, &arg)?
    } else {
        true
    };
    scanner.expect(')')?;
    Ok(positive)
}

fn parse_literal(scanner: &mut Scanner) -> Result<Literal> {
    let first = scanner.ident()?;
    let (negated_prefix, name) = if first == "not" {
        (true, scanner.ident()?)
    } else {
        (false, first)
    };
    let pred = classify_pred(scanner, &name)?;
    let positive_arg = parse_args(scanner)?;
    // leading `not` composes with the argument polarity; two negatives cancel
    Ok(Literal { pred, negated: negated_prefix ^ !positive_arg })
}

fn parse_rule(scanner: &mut Scanner) -> Result<Rule> {
    let name = scanner.ident()?;
    let head = if name == "target" {
        scanner.expect('(')?;
        scanner.variable()?;
        scanner.expect(',')?;
        let class = scanner.quoted()?;
        scanner.expect(')')?;
        Head::Target(class)
    } else {
        match classify_pred(scanner, &name)? {
            Pred::Ab(j) => {
                let positive = parse_args(scanner)?;
                if !positive {
                    return Err(scanner.err("abnormality head with negative argument"));
                }
                Head::Ab(j)
            }
            Pred::Filter(other) => {
                return Err(scanner.err(format!(
                    "rule head must be `target` or an abnormality predicate, found `{other}`"
                )));
            }
        }
    };
    scanner.skip_ws();
    let mut body = Vec::new();
    match scanner.peek() {
        Some('.') => {
            scanner.bump();
            return Ok(Rule { head, body });
        }
        Some(':') => {
            scanner.bump();
            scanner.expect('-')?;
        }
        Some(c) => return Err(scanner.err(format!("expected `:-` or `.`, found `{c}`"))),
        None => return Err(scanner.err("expected `:-` or `.`, found end of input")),
    }
    loop {
        body.push(parse_literal(scanner)?);
        scanner.skip_ws();
        match scanner.peek() {
            Some(',') => {
                scanner.bump();
            }
            Some('.') => {
                scanner.bump();
                break;
            }
            Some(c) => return Err(scanner.err(format!("expected `,` or `.`, found `{c}`"))),
            None => return Err(scanner.err("expected `,` or `.`, found end of input")),
        }
    }
    Ok(Rule { head, body })
}

/// Parse a full rule-set. Statements end at `.`; blank lines are ignored.
pub fn parse_ruleset(text: &str) -> Result<RuleSet> {
    let mut scanner = Scanner::new(text);
    let mut rules = Vec::new();
    loop {
        scanner.skip_ws();
        if scanner.peek().is_none() {
            break;
        }
        rules.push(parse_rule(&mut scanner)?);
    }
    Ok(RuleSet { rules })
}

#[cfg(test)]
mod tests {
    use super::super::print_ruleset;
    use super::*;

    #[test]
    fn simple_rule_roundtrips() {
        let text = "target(X,'bedroom') :- bed1(X).\n";
        let rs = parse_ruleset(text).unwrap();
        assert_eq!(print_ruleset(&rs, None), text);
    }

    #[test]
    fn backquote_class_quoting_accepted() {
        let rs = parse_ruleset("target(X,`kitchen') :- cabinet1_wall1(X), not ab4(X).\nab4(X) :- f1(X).\n")
            .unwrap();
        assert_eq!(rs.rules[0].head, Head::Target("kitchen".into()));
        assert_eq!(rs.rules[0].body[1], Literal { pred: Pred::Ab(4), negated: true });
    }

    #[test]
    fn two_argument_polarity_forms() {
        // bed3(X,'0') is a negated literal, mirror1(X,'1') a positive one
        let rs = parse_ruleset("target(X,'bathroom') :- bed3(X,'0'), mirror1(X,'1').\n").unwrap();
        assert_eq!(rs.rules[0].body[0], Literal { pred: Pred::Filter("bed3".into()), negated: true });
        assert_eq!(rs.rules[0].body[1], Literal { pred: Pred::Filter("mirror1".into()), negated: false });
    }

    #[test]
    fn leading_not_composes_with_argument() {
        // not bed4(X,'0') is double negation, i.e. positive
        let rs = parse_ruleset("target(X,'bedroom') :- not mirror1(X,'1'), not bed4(X,'0').\n").unwrap();
        assert_eq!(rs.rules[0].body[0], Literal { pred: Pred::Filter("mirror1".into()), negated: true });
        assert_eq!(rs.rules[0].body[1], Literal { pred: Pred::Filter("bed4".into()), negated: false });
    }

    #[test]
    fn ab_head_with_true_argument() {
        let rs = parse_ruleset("ab1(X,'True') :- not bed1(X,'1').\n").unwrap();
        assert_eq!(rs.rules[0].head, Head::Ab(1));
        assert_eq!(rs.rules[0].body[0], Literal { pred: Pred::Filter("bed1".into()), negated: true });
    }

    #[test]
    fn statements_may_span_lines() {
        let rs = parse_ruleset("ab6(X) :- not road8(X),\n    not road14(X), big1(X).\n").unwrap();
        assert_eq!(rs.rules[0].body.len(), 3);
    }

    #[test]
    fn empty_body_fact() {
        let rs = parse_ruleset("target(X,'c').\n").unwrap();
        assert!(rs.rules[0].body.is_empty());
    }

    #[test]
    fn print_of_exception_emits_not_abx_exactly() {
        let rs = parse_ruleset("target(X,'c') :- f1(X), not ab1(X).\nab1(X) :- f2(X).\n").unwrap();
        let text = print_ruleset(&rs, None);
        assert!(text.contains("not ab1(X)"));
    }

    #[test]
    fn syntax_errors_carry_line_and_column() {
        let err = parse_ruleset("target(X,'c') :- f1(X)\ntarget(X,'d').\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");

        let err = parse_ruleset("ab0(X) :- f1(X).\n").unwrap_err();
        assert!(err.to_string().contains("abnormality index"));

        let err = parse_ruleset("target(x,'c').\n").unwrap_err();
        assert!(err.to_string().contains("variable"));

        let err = parse_ruleset("f1(X) :- f2(X).\n").unwrap_err();
        assert!(err.to_string().contains("head"));
    }

    #[test]
    fn huge_ab_index_is_rejected_not_panicking() {
        let err = parse_ruleset("ab99999999999999999999(X).\n").unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn parse_print_parse_is_identity() {
        let text = "target(X,`bathroom') :- not bed3(X,'0'), sink1(X), not ab2(X).\nab2(X) :- bed1(X,'1').\n";
        let rs = parse_ruleset(text).unwrap();
        let printed = print_ruleset(&rs, None);
        let rs2 = parse_ruleset(&printed).unwrap();
        assert_eq!(rs, rs2);
        assert_eq!(print_ruleset(&rs2, None), printed);
    }
}
