//! Single-line reward expressions over the arm state `s` and named binary
//! features.
//!
//! Grammar, loosest to tightest binding:
//!
//! ```text
//! expr  := and ("or" and)*
//! and   := sum ("and" sum)*
//! sum   := prod (("+" | "-") prod)*
//! prod  := unary ("*" unary)*
//! unary := "-" unary | atom
//! atom  := number | "s" | feature | "(" expr ")"
//! ```
//!
//! `and` / `or` evaluate as `min` / `max`, which coincides with boolean logic
//! on `{0, 1}` operands. Feature names are matched against the caller's known
//! set, longest match first, so names such as `12_30-3pm` lex as one token.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at position {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

fn perr<T>(position: usize, message: impl Into<String>) -> std::result::Result<T, ParseError> {
    Err(ParseError { position, message: message.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Add | BinOp::Sub => 3,
            BinOp::Mul => 4,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    State,
    Feature(String),
    Neg(Box<Expr>),
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
}

const NEG_PRECEDENCE: u8 = 5;
const ATOM_PRECEDENCE: u8 = 6;

impl Expr {
    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary { op, .. } => op.precedence(),
            Expr::Neg(_) => NEG_PRECEDENCE,
            _ => ATOM_PRECEDENCE,
        }
    }

    pub fn eval(&self, state: f64, features: &BTreeMap<String, u8>) -> Result<f64> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::State => state,
            Expr::Feature(name) => match features.get(name) {
                Some(&v) => f64::from(v),
                None => return Err(Error::invalid(format!("arm has no feature {name:?}"))),
            },
            Expr::Neg(e) => -e.eval(state, features)?,
            Expr::Binary { op, lhs, rhs } => {
                let (a, b) = (lhs.eval(state, features)?, rhs.eval(state, features)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::And => a.min(b),
                    BinOp::Or => a.max(b),
                }
            }
        })
    }

    /// Visits every node in pre-order.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Neg(e) => e.walk(f),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.walk(f);
                rhs.walk(f);
            }
            _ => {}
        }
    }

    pub fn features(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| {
            if let Expr::Feature(name) = e {
                out.insert(name.as_str());
            }
        });
        out
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
            if parens {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::State => f.write_str("s"),
            Expr::Feature(name) => f.write_str(name),
            Expr::Neg(e) => {
                f.write_str("-")?;
                child(f, e, e.precedence() < NEG_PRECEDENCE)
            }
            Expr::Binary { op, lhs, rhs } => {
                let p = op.precedence();
                child(f, lhs, lhs.precedence() < p)?;
                write!(f, " {} ", op.symbol())?;
                // Left-associative: an equal-precedence right child keeps its parens.
                child(f, rhs, rhs.precedence() <= p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    State,
    Feature(String),
    And,
    Or,
    Plus,
    Minus,
    Star,
    LParen,
    RParen,
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn lex(src: &str, known: &BTreeSet<String>) -> std::result::Result<Vec<(usize, Tok)>, ParseError> {
    let mut toks = Vec::new();
    let mut i = 0;
    let bytes = src.as_bytes();
    while i < src.len() {
        let c = src[i..].chars().next().unwrap();
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        let start = i;
        if is_ident_char(c) {
            let rest = &src[i..];
            let feature = known
                .iter()
                .filter(|name| {
                    rest.starts_with(name.as_str())
                        && !rest[name.len()..].chars().next().is_some_and(is_ident_char)
                })
                .max_by_key(|name| name.len());
            if let Some(name) = feature {
                toks.push((start, Tok::Feature(name.clone())));
                i += name.len();
                continue;
            }
            if c.is_ascii_digit() {
                let mut j = i;
                while j < src.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j < src.len() && bytes[j] == b'.' {
                    j += 1;
                    while j < src.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                }
                if src[j..].chars().next().is_some_and(is_ident_char) {
                    let end = src[j..].find(|ch: char| !is_ident_char(ch) && ch != '-').map_or(src.len(), |k| j + k);
                    return perr(start, format!("unknown feature {:?}", &src[start..end]));
                }
                let v: f64 = src[i..j]
                    .parse()
                    .map_err(|_| ParseError { position: start, message: format!("bad number {:?}", &src[i..j]) })?;
                toks.push((start, Tok::Num(v)));
                i = j;
                continue;
            }
            let end = src[i..].find(|ch: char| !is_ident_char(ch)).map_or(src.len(), |k| i + k);
            let word = &src[i..end];
            let next_non_ws = src[end..].trim_start().chars().next();
            let tok = match word {
                "and" => Tok::And,
                "or" => Tok::Or,
                "s" => Tok::State,
                "return" => return perr(start, "the keyword `return` is not allowed"),
                _ if next_non_ws == Some('(') => {
                    return perr(start, format!("function calls are not allowed ({word:?})"))
                }
                _ => return perr(start, format!("unknown feature {word:?}")),
            };
            toks.push((start, tok));
            i = end;
            continue;
        }
        let tok = match c {
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => {
                if src[i + 1..].starts_with('*') {
                    return perr(start, "exponentiation is not allowed");
                }
                Tok::Star
            }
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '&' | '|' | '^' | '~' => {
                return perr(start, format!("bitwise operator {c:?} is not allowed; use `and` / `or`"))
            }
            '<' | '>' if src[i + 1..].starts_with(c) => {
                return perr(start, "bitwise shifts are not allowed")
            }
            other => return perr(start, format!("unexpected character {other:?}")),
        };
        toks.push((start, tok));
        i += c.len_utf8();
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> std::result::Result<Expr, ParseError> {
        let mut lhs = self.and()?;
        while self.eat(&Tok::Or) {
            lhs = Expr::binary(BinOp::Or, lhs, self.and()?);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> std::result::Result<Expr, ParseError> {
        let mut lhs = self.sum()?;
        while self.eat(&Tok::And) {
            lhs = Expr::binary(BinOp::And, lhs, self.sum()?);
        }
        Ok(lhs)
    }

    fn sum(&mut self) -> std::result::Result<Expr, ParseError> {
        let mut lhs = self.prod()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Expr::binary(op, lhs, self.prod()?);
        }
    }

    fn prod(&mut self) -> std::result::Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while self.eat(&Tok::Star) {
            lhs = Expr::binary(BinOp::Mul, lhs, self.unary()?);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> std::result::Result<Expr, ParseError> {
        if self.eat(&Tok::Minus) {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> std::result::Result<Expr, ParseError> {
        let at = self.offset();
        let Some(tok) = self.peek().cloned() else {
            return perr(at, "unexpected end of expression");
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::State => Ok(Expr::State),
            Tok::Feature(name) => Ok(Expr::Feature(name)),
            Tok::LParen => {
                let inner = self.expr()?;
                if !self.eat(&Tok::RParen) {
                    return perr(self.offset(), "expected `)`");
                }
                Ok(inner)
            }
            other => perr(at, format!("unexpected token {other:?}")),
        }
    }
}

/// A parsed reward expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardProgram {
    pub source: String,
    pub ast: Expr,
}

impl RewardProgram {
    pub fn reward(&self, state: u8, features: &BTreeMap<String, u8>) -> Result<f64> {
        let v = self.ast.eval(f64::from(state), features)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("reward {:?} is not finite", self.source)))
        }
    }

    /// Rewards at `s = 0` and `s = 1`, checking the program is nondecreasing
    /// in state for this feature vector.
    pub fn state_rewards(&self, features: &BTreeMap<String, u8>) -> Result<[f64; 2]> {
        let r = [self.reward(0, features)?, self.reward(1, features)?];
        if r[1] < r[0] {
            return Err(Error::ModelAssumption(format!(
                "reward {:?} decreases with state ({} at s=0, {} at s=1)",
                self.source, r[0], r[1]
            )));
        }
        Ok(r)
    }

    /// Canonical text: the printed AST.
    pub fn normalized(&self) -> String {
        self.ast.to_string()
    }
}

pub fn parse_reward(source: &str, known_features: &BTreeSet<String>) -> Result<RewardProgram> {
    if source.trim().is_empty() {
        return Err(ParseError { position: 0, message: "empty expression".into() }.into());
    }
    let toks = lex(source, known_features)?;
    let mut parser = Parser { toks, pos: 0, end: source.len() };
    let ast = parser.expr()?;
    if parser.pos != parser.toks.len() {
        return Err(ParseError { position: parser.offset(), message: "unexpected trailing input".into() }.into());
    }
    Ok(RewardProgram { source: source.to_string(), ast })
}
