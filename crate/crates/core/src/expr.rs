//! A small arithmetic expression language for nonlinearities.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := ('-' | '+') unary | power
//! power := atom ('^' unary)?            (right associative)
//! atom  := number | ident | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Variables are `s` (scalar argument) and `xi1 .. xiN` (vector argument).
//! Any other identifier is a named parameter (`p`, `lambda1`, ...) that must be
//! bound with [`Expr::bind`] before evaluation; `pi` is predefined. Functions:
//! `abs`, `min`, `max`, `exp`, `log`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Abs,
    Min,
    Max,
    Exp,
    Log,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "exp" => Func::Exp,
            "log" => Func::Log,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone)]
enum Node {
    Num(f64),
    S,
    Xi(usize),
    Param(String),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    fn eval(&self, s: f64, xi: &[f64]) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::S => s,
            Node::Xi(i) => xi.get(*i).copied().unwrap_or(f64::NAN),
            Node::Param(_) => f64::NAN,
            Node::Neg(a) => -a.eval(s, xi),
            Node::Bin(op, a, b) => {
                let (a, b) = (a.eval(s, xi), b.eval(s, xi));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                }
            }
            Node::Call(f, args) => {
                let a = args[0].eval(s, xi);
                match f {
                    Func::Abs => a.abs(),
                    Func::Exp => a.exp(),
                    Func::Log => a.ln(),
                    Func::Min => a.min(args[1].eval(s, xi)),
                    Func::Max => a.max(args[1].eval(s, xi)),
                }
            }
        }
    }

    fn visit(&self, f: &mut impl FnMut(&Node)) {
        f(self);
        match self {
            Node::Neg(a) => a.visit(f),
            Node::Bin(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Node::Call(_, args) => args.iter().for_each(|a| a.visit(f)),
            _ => {}
        }
    }

    fn bind(&mut self, name: &str, value: f64) {
        match self {
            Node::Param(n) if n == name => *self = Node::Num(value),
            Node::Neg(a) => a.bind(name, value),
            Node::Bin(_, a, b) => {
                a.bind(name, value);
                b.bind(name, value);
            }
            Node::Call(_, args) => args.iter_mut().for_each(|a| a.bind(name, value)),
            _ => {}
        }
    }
}

/// A parsed expression.
#[derive(Clone)]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr> {
        let tokens = lex(source)?;
        let mut parser = Parser { tokens, pos: 0 };
        let root = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(parse_error(tok.offset, format!("unexpected `{}`", tok.kind)));
        }
        let mut expr = Expr {
            source: source.to_owned(),
            root,
        };
        expr.bind("pi", std::f64::consts::PI);
        Ok(expr)
    }

    /// A constant expression.
    pub fn constant(value: f64) -> Expr {
        Expr {
            source: format!("{value}"),
            root: Node::Num(value),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Replaces every occurrence of the parameter `name` by `value`.
    pub fn bind(&mut self, name: &str, value: f64) {
        self.root.bind(name, value);
    }

    /// Parameters that are still unbound.
    pub fn unbound_params(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.root.visit(&mut |n| {
            if let Node::Param(name) = n {
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
        });
        out
    }

    pub fn uses_s(&self) -> bool {
        let mut found = false;
        self.root.visit(&mut |n| found |= matches!(n, Node::S));
        found
    }

    /// Largest `xiK` index referenced (1-based), 0 if none.
    pub fn max_xi(&self) -> usize {
        let mut m = 0;
        self.root.visit(&mut |n| {
            if let Node::Xi(i) = n {
                m = m.max(i + 1);
            }
        });
        m
    }

    pub fn is_constant(&self) -> bool {
        let mut var = false;
        self.root
            .visit(&mut |n| var |= matches!(n, Node::S | Node::Xi(_) | Node::Param(_)));
        !var
    }

    pub fn eval_scalar(&self, s: f64) -> f64 {
        self.root.eval(s, &[])
    }

    pub fn eval_vector(&self, xi: &[f64]) -> f64 {
        self.root.eval(f64::NAN, xi)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Sym(char),
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Num(v) => write!(f, "{v}"),
            TokKind::Ident(s) => f.write_str(s),
            TokKind::Sym(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    offset: usize,
}

fn parse_error(offset: usize, message: String) -> Error {
    Error::Parse {
        line: 1,
        column: offset + 1,
        message,
    }
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text
                .parse()
                .map_err(|_| parse_error(start, format!("bad number `{text}`")))?;
            out.push(Token {
                kind: TokKind::Num(v),
                offset: start,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                kind: TokKind::Ident(src[start..i].to_owned()),
                offset: start,
            });
        } else if "+-*/^(),".contains(c) {
            out.push(Token {
                kind: TokKind::Sym(c),
                offset: i,
            });
            i += 1;
        } else {
            return Err(parse_error(i, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn end_offset(&self) -> usize {
        self.tokens
            .last()
            .map(|t| t.offset + t.kind.to_string().len())
            .unwrap_or(0)
    }

    fn eat(&mut self, sym: char) -> bool {
        if matches!(self.peek(), Some(Token { kind: TokKind::Sym(c), .. }) if *c == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, sym: char) -> Result<()> {
        if self.eat(sym) {
            Ok(())
        } else {
            let off = self.peek().map(|t| t.offset).unwrap_or_else(|| self.end_offset());
            Err(parse_error(off, format!("expected `{sym}`")))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinOp::Add
            } else if self.eat('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                BinOp::Mul
            } else if self.eat('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Node> {
        let Some(tok) = self.peek().cloned() else {
            return Err(parse_error(self.end_offset(), "unexpected end of expression".into()));
        };
        self.pos += 1;
        match tok.kind {
            TokKind::Num(v) => Ok(Node::Num(v)),
            TokKind::Sym('(') => {
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            TokKind::Ident(name) => {
                if let Some(func) = Func::lookup(&name) {
                    self.expect('(')?;
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if args.len() != func.arity() {
                        return Err(parse_error(
                            tok.offset,
                            format!("`{name}` takes {} argument(s), got {}", func.arity(), args.len()),
                        ));
                    }
                    return Ok(Node::Call(func, args));
                }
                if name == "s" {
                    return Ok(Node::S);
                }
                if let Some(idx) = name.strip_prefix("xi").and_then(|d| d.parse::<usize>().ok()) {
                    if idx == 0 {
                        return Err(parse_error(tok.offset, "components are numbered from xi1".into()));
                    }
                    return Ok(Node::Xi(idx - 1));
                }
                Ok(Node::Param(name))
            }
            TokKind::Sym(c) => Err(parse_error(tok.offset, format!("unexpected `{c}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, s: f64) -> f64 {
        Expr::parse(src).unwrap().eval_scalar(s)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1+2*3", 0.0), 7.0);
        assert_eq!(ev("2^3^2", 0.0), 512.0);
        assert_eq!(ev("-2^2", 0.0), -4.0);
        assert_eq!(ev("(1+2)*3", 0.0), 9.0);
        assert_eq!(ev("8/2/2", 0.0), 2.0);
        assert!((ev("s^(-0.5)+0.1*s^0.5", 4.0) - (0.5 + 0.2)).abs() < 1e-15);
        assert!((ev("s^-0.5", 4.0) - 0.5).abs() < 1e-15);
        assert!((ev("1e-3*2", 0.0) - 2e-3).abs() < 1e-18);
    }

    #[test]
    fn functions_and_vector_vars() {
        let e = Expr::parse("max(abs(xi1), xi2) + min(1, exp(log(2)))").unwrap();
        assert_eq!(e.max_xi(), 2);
        assert!((e.eval_vector(&[-3.0, 1.0]) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn params_bind() {
        let mut e = Expr::parse("2*lambda1*s^(p-1)").unwrap();
        let mut un = e.unbound_params();
        un.sort();
        assert_eq!(un, vec!["lambda1".to_string(), "p".to_string()]);
        e.bind("p", 2.0);
        e.bind("lambda1", 3.0);
        assert!(e.unbound_params().is_empty());
        assert_eq!(e.eval_scalar(2.0), 12.0);
        assert!((ev("pi", 0.0) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_column() {
        match Expr::parse("1 + * 2") {
            Err(Error::Parse { column, .. }) => assert_eq!(column, 5),
            other => panic!("{other:?}"),
        }
        assert!(Expr::parse("min(1)").is_err());
        assert!(Expr::parse("(1+2").is_err());
        assert!(Expr::parse("s $ 2").is_err());
        assert!(Expr::parse("xi0").is_err());
    }
}
