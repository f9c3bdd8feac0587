//! Terminal claim expressions.
//!
//! Grammar (usual precedence, left associative):
//!
//! ```text
//! expr   := cmp
//! cmp    := sum (("<" | "<=" | ">" | ">=" | "==" | "!=") sum)?
//! sum    := prod (("+" | "-") prod)*
//! prod   := unary (("*" | "/") unary)*
//! unary  := "-" unary | atom
//! atom   := number | var | func "(" expr ("," expr)* ")" | "(" expr ")"
//! var    := "S" ("[" int "]")? | "N" ("[" int "]")? | "M" ("[" int "]")? | "R"
//! func   := min | max | abs | exp | log
//! ```
//!
//! `S[i]` is terminal price i, `N` the total jump count, `N[j]` the count of
//! mark j, `M[k]` component k of the summed marks, `R` the regime state.
//! Comparisons yield 1 or 0. Indices are zero-based; bare `S` and `M` mean
//! index 0.

use crate::error::{Error, Result};
use crate::lattice::{LatticeModel, LeafState};

#[derive(Debug, Clone, PartialEq)]
enum Var {
    Price(usize),
    Jumps(Option<usize>),
    MarkSum(usize),
    Regime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Cmp(Cmp, Box<Node>, Box<Node>),
    Call(String, Vec<Node>),
}

/// Parsed claim expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Claim {
    source: String,
    root: Node,
}

impl Claim {
    pub fn parse(source: &str) -> Result<Self> {
        let mut p = Parser {
            src: source.as_bytes(),
            pos: 0,
        };
        let root = p.cmp()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Self {
            source: source.to_string(),
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Checks that every variable index exists on `model`.
    pub fn check(&self, model: &LatticeModel) -> Result<()> {
        fn walk(n: &Node, model: &LatticeModel) -> Result<()> {
            match n {
                Node::Num(_) => Ok(()),
                Node::Var(Var::Price(i)) if *i >= model.d() => {
                    Err(Error::Claim(format!("S[{i}] but the model has {} assets", model.d())))
                }
                Node::Var(Var::Jumps(Some(j))) if *j >= model.m() => {
                    Err(Error::Claim(format!("N[{j}] but the model has {} marks", model.m())))
                }
                Node::Var(Var::MarkSum(k)) if *k >= model.marks().mark_dim().max(1) => Err(
                    Error::Claim(format!("M[{k}] exceeds the mark dimension")),
                ),
                Node::Var(_) => Ok(()),
                Node::Neg(a) => walk(a, model),
                Node::Bin(_, a, b) | Node::Cmp(_, a, b) => {
                    walk(a, model)?;
                    walk(b, model)
                }
                Node::Call(_, args) => args.iter().try_for_each(|a| walk(a, model)),
            }
        }
        walk(&self.root, model)
    }

    pub fn eval(&self, leaf: &LeafState<'_>) -> f64 {
        eval(&self.root, leaf)
    }

    /// Claim values at every terminal node of `model`.
    pub fn terminal_values(&self, model: &LatticeModel) -> Result<Vec<f64>> {
        self.check(model)?;
        let v = model.terminal_values(|leaf| self.eval(leaf));
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Claim(format!(
                "`{}` is not finite at terminal node {i}",
                self.source
            )));
        }
        Ok(v)
    }
}

fn eval(n: &Node, leaf: &LeafState<'_>) -> f64 {
    match n {
        Node::Num(x) => *x,
        Node::Var(Var::Price(i)) => leaf.s[*i],
        Node::Var(Var::Jumps(None)) => leaf.jumps.iter().sum::<u32>() as f64,
        Node::Var(Var::Jumps(Some(j))) => leaf.jumps[*j] as f64,
        Node::Var(Var::MarkSum(k)) => leaf.mark_sum.get(*k).copied().unwrap_or(0.0),
        Node::Var(Var::Regime) => leaf.regime as f64,
        Node::Neg(a) => -eval(a, leaf),
        Node::Bin(op, a, b) => {
            let (x, y) = (eval(a, leaf), eval(b, leaf));
            match op {
                '+' => x + y,
                '-' => x - y,
                '*' => x * y,
                _ => x / y,
            }
        }
        Node::Cmp(op, a, b) => {
            let (x, y) = (eval(a, leaf), eval(b, leaf));
            let t = match op {
                Cmp::Lt => x < y,
                Cmp::Le => x <= y,
                Cmp::Gt => x > y,
                Cmp::Ge => x >= y,
                Cmp::Eq => x == y,
                Cmp::Ne => x != y,
            };
            if t {
                1.0
            } else {
                0.0
            }
        }
        Node::Call(f, args) => {
            let v: Vec<f64> = args.iter().map(|a| eval(a, leaf)).collect();
            match f.as_str() {
                "min" => v.into_iter().fold(f64::INFINITY, f64::min),
                "max" => v.into_iter().fold(f64::NEG_INFINITY, f64::max),
                "abs" => v[0].abs(),
                "exp" => v[0].exp(),
                _ => v[0].ln(),
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Claim(format!("{msg} at offset {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, s: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(s.as_bytes()) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<()> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{s}`")))
        }
    }

    fn cmp(&mut self) -> Result<Node> {
        let lhs = self.sum()?;
        let op = if self.eat("<=") {
            Cmp::Le
        } else if self.eat(">=") {
            Cmp::Ge
        } else if self.eat("==") {
            Cmp::Eq
        } else if self.eat("!=") {
            Cmp::Ne
        } else if self.eat("<") {
            Cmp::Lt
        } else if self.eat(">") {
            Cmp::Gt
        } else {
            return Ok(lhs);
        };
        let rhs = self.sum()?;
        Ok(Node::Cmp(op, Box::new(lhs), Box::new(rhs)))
    }

    fn sum(&mut self) -> Result<Node> {
        let mut lhs = self.prod()?;
        loop {
            match self.peek() {
                Some(c @ (b'+' | b'-')) => {
                    self.pos += 1;
                    let rhs = self.prod()?;
                    lhs = Node::Bin(c as char, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn prod(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(c @ (b'*' | b'/')) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Node::Bin(c as char, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat("-") {
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else {
            self.atom()
        }
    }

    fn index(&mut self) -> Result<Option<usize>> {
        if !self.eat("[") {
            return Ok(None);
        }
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        let idx = text
            .parse::<usize>()
            .map_err(|_| self.error("expected an index"))?;
        self.expect("]")?;
        Ok(Some(idx))
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            None => Err(self.error("unexpected end of expression")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.cmp()?;
                self.expect(")")?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len() {
                    let c = self.src[self.pos];
                    let exp_sign = (c == b'+' || c == b'-')
                        && matches!(self.src[self.pos - 1], b'e' | b'E');
                    if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
                text.parse::<f64>()
                    .map(Node::Num)
                    .map_err(|_| self.error(&format!("bad number `{text}`")))
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos])
                    .unwrap_or("")
                    .to_string();
                match name.as_str() {
                    "S" => Ok(Node::Var(Var::Price(self.index()?.unwrap_or(0)))),
                    "N" => Ok(Node::Var(Var::Jumps(self.index()?))),
                    "M" => Ok(Node::Var(Var::MarkSum(self.index()?.unwrap_or(0)))),
                    "R" => Ok(Node::Var(Var::Regime)),
                    "min" | "max" | "abs" | "exp" | "log" => {
                        self.expect("(")?;
                        let mut args = vec![self.cmp()?];
                        while self.eat(",") {
                            args.push(self.cmp()?);
                        }
                        self.expect(")")?;
                        let unary = !matches!(name.as_str(), "min" | "max");
                        if unary && args.len() != 1 {
                            return Err(self.error(&format!("`{name}` takes one argument")));
                        }
                        Ok(Node::Call(name, args))
                    }
                    _ => Err(Error::Claim(format!("unknown identifier `{name}`"))),
                }
            }
            Some(c) => Err(self.error(&format!("unexpected character `{}`", c as char))),
        }
    }
}
