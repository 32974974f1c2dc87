//! Events on `(mu_T, Q_T)`: conjunctions of affine constraints on finitely
//! many coordinates.
//!
//! ```text
//! event      := "all" | constraint (("&&" | "and") constraint)*
//! constraint := expr ("<=" | ">=" | "<" | ">") expr
//! expr       := ["-"] term (("+" | "-") term)*
//! term       := number ["*" atom] | atom
//! atom       := "mu[" state "]" | "Q[" state "," state "]"
//! ```
//!
//! State names are labels from the model's state space.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::markov::{Edge, Flow, Measure, StateSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Coord {
    Mu(usize),
    Q(Edge),
}

impl Coord {
    pub fn value(self, mu: &Measure, q: &Flow) -> f64 {
        match self {
            Coord::Mu(x) => mu.get(x),
            Coord::Q(e) => q.get(e),
        }
    }
}

/// `sum_i a_i x_i + c >= 0` (or `> 0` when strict).
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: BTreeMap<Coord, f64>,
    pub constant: f64,
    pub strict: bool,
}

impl Constraint {
    pub fn lhs(&self, mu: &Measure, q: &Flow) -> f64 {
        self.coeffs.iter().map(|(c, a)| a * c.value(mu, q)).sum::<f64>() + self.constant
    }

    pub fn holds(&self, mu: &Measure, q: &Flow) -> bool {
        let v = self.lhs(mu, q);
        if self.strict {
            v > 0.0
        } else {
            v >= 0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Event {
    pub constraints: Vec<Constraint>,
    source: String,
}

impl Event {
    /// The whole space.
    pub fn all() -> Self {
        Self { constraints: Vec::new(), source: "all".into() }
    }

    pub fn parse(src: &str, states: &StateSpace) -> Result<Self> {
        let src_trim = src.trim();
        if src_trim.eq_ignore_ascii_case("all") || src_trim.eq_ignore_ascii_case("true") || src_trim.is_empty() {
            return Ok(Self::all());
        }
        let mut p = Parser { toks: tokenize(src_trim)?, pos: 0, states };
        let mut constraints = vec![p.constraint()?];
        while p.eat(&Tok::And) {
            constraints.push(p.constraint()?);
        }
        if p.pos != p.toks.len() {
            return Err(Error::Parse(format!("unexpected trailing input in event `{src}`")));
        }
        Ok(Self { constraints, source: src_trim.to_string() })
    }

    pub fn holds(&self, mu: &Measure, q: &Flow) -> bool {
        self.constraints.iter().all(|c| c.holds(mu, q))
    }

    /// `sum_i max(0, -lhs_i)`: zero inside the (closed) event.
    pub fn violation(&self, mu: &Measure, q: &Flow) -> f64 {
        self.constraints.iter().map(|c| (-c.lhs(mu, q)).max(0.0)).sum()
    }

    pub fn is_all(&self) -> bool {
        self.constraints.is_empty()
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    /// Value and raw text; the raw text doubles as a state label.
    Num(f64, String),
    Ident(String),
    LBracket,
    RBracket,
    Comma,
    Plus,
    Minus,
    Star,
    Le,
    Ge,
    Lt,
    Gt,
    And,
}

fn tokenize(s: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = s.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' => i += 1,
            '[' => {
                toks.push(Tok::LBracket);
                i += 1
            }
            ']' => {
                toks.push(Tok::RBracket);
                i += 1
            }
            ',' => {
                toks.push(Tok::Comma);
                i += 1
            }
            '+' => {
                toks.push(Tok::Plus);
                i += 1
            }
            '-' => {
                toks.push(Tok::Minus);
                i += 1
            }
            '*' => {
                toks.push(Tok::Star);
                i += 1
            }
            '&' if chars.get(i + 1) == Some(&'&') => {
                toks.push(Tok::And);
                i += 2
            }
            '<' | '>' => {
                let eq = chars.get(i + 1) == Some(&'=');
                toks.push(match (c, eq) {
                    ('<', true) => Tok::Le,
                    ('<', false) => Tok::Lt,
                    ('>', true) => Tok::Ge,
                    _ => Tok::Gt,
                });
                i += if eq { 2 } else { 1 };
            }
            '"' => {
                let end = chars[i + 1..]
                    .iter()
                    .position(|&ch| ch == '"')
                    .ok_or_else(|| Error::Parse("unterminated quoted state name".into()))?;
                toks.push(Tok::Ident(chars[i + 1..i + 1 + end].iter().collect()));
                i += end + 2;
            }
            _ if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || chars[i] == 'e'
                        || chars[i] == 'E'
                        || ((chars[i] == '-' || chars[i] == '+') && matches!(chars[i - 1], 'e' | 'E')))
                {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let v = text.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{text}`")))?;
                toks.push(Tok::Num(v, text));
            }
            _ if c.is_alphanumeric() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                if word == "and" {
                    toks.push(Tok::And);
                } else {
                    toks.push(Tok::Ident(word));
                }
            }
            _ => return Err(Error::Parse(format!("unexpected character `{c}` in event"))),
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    states: &'a StateSpace,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: &Tok) -> Result<()> {
        if self.eat(t) {
            Ok(())
        } else {
            Err(Error::Parse(format!("expected {t:?}, found {:?}", self.peek())))
        }
    }

    fn number(&mut self) -> Option<f64> {
        if let Some(Tok::Num(v, _)) = self.peek() {
            let v = *v;
            self.pos += 1;
            Some(v)
        } else {
            None
        }
    }

    fn state(&mut self) -> Result<usize> {
        match self.peek().cloned() {
            Some(Tok::Ident(name)) | Some(Tok::Num(_, name)) => {
                self.pos += 1;
                self.states.index_of(&name)
            }
            other => Err(Error::Parse(format!("expected state name, found {other:?}"))),
        }
    }

    fn atom(&mut self) -> Result<Coord> {
        let name = match self.toks.get(self.pos).cloned() {
            Some(Tok::Ident(n)) => n,
            other => return Err(Error::Parse(format!("expected mu[..] or Q[..], found {other:?}"))),
        };
        self.pos += 1;
        self.expect(&Tok::LBracket)?;
        let coord = match name.as_str() {
            "mu" => Coord::Mu(self.state()?),
            "Q" | "q" => {
                let y = self.state()?;
                self.expect(&Tok::Comma)?;
                let z = self.state()?;
                Coord::Q((y, z))
            }
            _ => return Err(Error::Parse(format!("unknown coordinate `{name}`"))),
        };
        self.expect(&Tok::RBracket)?;
        Ok(coord)
    }

    /// Returns `(coeffs, constant)`.
    fn expr(&mut self) -> Result<(BTreeMap<Coord, f64>, f64)> {
        let mut coeffs = BTreeMap::new();
        let mut constant = 0.0;
        let mut sign = if self.eat(&Tok::Minus) { -1.0 } else { 1.0 };
        loop {
            if let Some(v) = self.number() {
                if self.eat(&Tok::Star) {
                    let c = self.atom()?;
                    *coeffs.entry(c).or_insert(0.0) += sign * v;
                } else {
                    constant += sign * v;
                }
            } else {
                let c = self.atom()?;
                *coeffs.entry(c).or_insert(0.0) += sign;
            }
            sign = if self.eat(&Tok::Plus) {
                1.0
            } else if self.eat(&Tok::Minus) {
                -1.0
            } else {
                break;
            };
        }
        Ok((coeffs, constant))
    }

    fn constraint(&mut self) -> Result<Constraint> {
        let (lc, lk) = self.expr()?;
        let (ge, strict) = match self.peek() {
            Some(Tok::Ge) => (true, false),
            Some(Tok::Gt) => (true, true),
            Some(Tok::Le) => (false, false),
            Some(Tok::Lt) => (false, true),
            other => return Err(Error::Parse(format!("expected comparison, found {other:?}"))),
        };
        self.pos += 1;
        let (rc, rk) = self.expr()?;
        // lhs - rhs >= 0, or rhs - lhs >= 0
        let s = if ge { 1.0 } else { -1.0 };
        let mut coeffs = BTreeMap::new();
        for (c, a) in lc {
            *coeffs.entry(c).or_insert(0.0) += s * a;
        }
        for (c, a) in rc {
            *coeffs.entry(c).or_insert(0.0) -= s * a;
        }
        coeffs.retain(|_, a| *a != 0.0);
        Ok(Constraint { coeffs, constant: s * (lk - rk), strict })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::ProbabilityMeasure;

    #[test]
    fn parses_simple_threshold() {
        let s = StateSpace::range(2);
        let e = Event::parse("mu[0] >= 0.7", &s).unwrap();
        assert_eq!(e.constraints.len(), 1);
        let hi = ProbabilityMeasure::new(vec![0.8, 0.2]).unwrap();
        let lo = ProbabilityMeasure::new(vec![0.6, 0.4]).unwrap();
        assert!(e.holds(&hi, &Flow::zero()));
        assert!(!e.holds(&lo, &Flow::zero()));
        assert!((e.violation(&lo, &Flow::zero()) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn parses_conjunction_with_flows_and_labels() {
        let s = StateSpace::new(["a", "b", "c"]).unwrap();
        let e = Event::parse("2*Q[a,b] - Q[b,a] <= 0.5 && mu[c] + mu[b] > 0.1 and -mu[a] >= -1", &s).unwrap();
        assert_eq!(e.constraints.len(), 3);
        let mu = ProbabilityMeasure::new(vec![0.5, 0.3, 0.2]).unwrap();
        let q = Flow::new([((0, 1), 0.4), ((1, 0), 0.4)]).unwrap();
        assert!(e.holds(&mu, &q));
        let q = Flow::new([((0, 1), 1.0), ((1, 0), 0.4)]).unwrap();
        assert!(!e.holds(&mu, &q));
    }

    #[test]
    fn whole_space() {
        let s = StateSpace::range(2);
        assert!(Event::parse("all", &s).unwrap().is_all());
        assert!(Event::parse("", &s).unwrap().holds(&ProbabilityMeasure::uniform(2), &Flow::zero()));
    }

    #[test]
    fn errors() {
        let s = StateSpace::range(2);
        assert!(Event::parse("mu[5] >= 1", &s).is_err());
        assert!(Event::parse("mu[0] 1", &s).is_err());
        assert!(Event::parse("nu[0] >= 1", &s).is_err());
        assert!(Event::parse("mu[0] >= 1 extra", &s).is_err());
    }

    #[test]
    fn scientific_notation() {
        let s = StateSpace::range(2);
        let e = Event::parse("mu[1] <= 1e-1", &s).unwrap();
        assert_eq!(e.constraints[0].constant, 0.1);
    }
}
