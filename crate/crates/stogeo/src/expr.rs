//! Small arithmetic expression grammar for configuration fields:
//! `+ - * / ^ sin cos exp log`, numbers, parentheses, the time variable `t`
//! and chart coordinates `x0 .. x{d-1}`.

use std::fmt;

#[derive(Debug, Clone)]
pub enum Expr {
    Const(f64),
    Time,
    Coord(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
}

impl Expr {
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Time => t,
            Expr::Coord(i) => x[*i],
            Expr::Neg(e) => -e.eval(t, x),
            Expr::Add(a, b) => a.eval(t, x) + b.eval(t, x),
            Expr::Sub(a, b) => a.eval(t, x) - b.eval(t, x),
            Expr::Mul(a, b) => a.eval(t, x) * b.eval(t, x),
            Expr::Div(a, b) => a.eval(t, x) / b.eval(t, x),
            Expr::Pow(a, b) => a.eval(t, x).powf(b.eval(t, x)),
            Expr::Sin(e) => e.eval(t, x).sin(),
            Expr::Cos(e) => e.eval(t, x).cos(),
            Expr::Exp(e) => e.eval(t, x).exp(),
            Expr::Log(e) => e.eval(t, x).ln(),
        }
    }

    /// Exact symbolic derivative with respect to `t` (`var = None`) or a
    /// coordinate (`var = Some(i)`). Constant branches are short-circuited
    /// to keep the trees small.
    pub fn diff(&self, var: Option<usize>) -> Expr {
        use Expr::*;
        let is_zero = |e: &Expr| matches!(e, Const(c) if *c == 0.0);
        match self {
            Const(_) => Const(0.0),
            Time => Const(if var.is_none() { 1.0 } else { 0.0 }),
            Coord(i) => Const(if var == Some(*i) { 1.0 } else { 0.0 }),
            Neg(e) => {
                let d = e.diff(var);
                if is_zero(&d) {
                    Const(0.0)
                } else {
                    Neg(Box::new(d))
                }
            }
            Add(a, b) => {
                let (da, db) = (a.diff(var), b.diff(var));
                match (is_zero(&da), is_zero(&db)) {
                    (true, true) => Const(0.0),
                    (true, false) => db,
                    (false, true) => da,
                    _ => Add(Box::new(da), Box::new(db)),
                }
            }
            Sub(a, b) => {
                let (da, db) = (a.diff(var), b.diff(var));
                match (is_zero(&da), is_zero(&db)) {
                    (true, true) => Const(0.0),
                    (true, false) => Neg(Box::new(db)),
                    (false, true) => da,
                    _ => Sub(Box::new(da), Box::new(db)),
                }
            }
            Mul(a, b) => {
                let (da, db) = (a.diff(var), b.diff(var));
                let left = if is_zero(&da) {
                    None
                } else {
                    Some(Mul(Box::new(da), b.clone()))
                };
                let right = if is_zero(&db) {
                    None
                } else {
                    Some(Mul(a.clone(), Box::new(db)))
                };
                match (left, right) {
                    (None, None) => Const(0.0),
                    (Some(l), None) => l,
                    (None, Some(r)) => r,
                    (Some(l), Some(r)) => Add(Box::new(l), Box::new(r)),
                }
            }
            Div(a, b) => {
                let da = a.diff(var);
                let db = b.diff(var);
                Div(
                    Box::new(Sub(
                        Box::new(Mul(Box::new(da), b.clone())),
                        Box::new(Mul(a.clone(), Box::new(db))),
                    )),
                    Box::new(Mul(b.clone(), b.clone())),
                )
            }
            Pow(a, b) => {
                // constant exponent short-circuits to n a^(n-1) a'
                if let Const(n) = **b {
                    let da = a.diff(var);
                    if is_zero(&da) {
                        return Const(0.0);
                    }
                    return Mul(
                        Box::new(Mul(
                            Box::new(Const(n)),
                            Box::new(Pow(a.clone(), Box::new(Const(n - 1.0)))),
                        )),
                        Box::new(da),
                    );
                }
                let da = a.diff(var);
                let db = b.diff(var);
                Mul(
                    Box::new(self.clone()),
                    Box::new(Add(
                        Box::new(Mul(Box::new(db), Box::new(Log(a.clone())))),
                        Box::new(Div(Box::new(Mul(b.clone(), Box::new(da))), a.clone())),
                    )),
                )
            }
            Sin(e) => {
                let d = e.diff(var);
                if is_zero(&d) {
                    Const(0.0)
                } else {
                    Mul(Box::new(Cos(e.clone())), Box::new(d))
                }
            }
            Cos(e) => {
                let d = e.diff(var);
                if is_zero(&d) {
                    Const(0.0)
                } else {
                    Neg(Box::new(Mul(Box::new(Sin(e.clone())), Box::new(d))))
                }
            }
            Exp(e) => {
                let d = e.diff(var);
                if is_zero(&d) {
                    Const(0.0)
                } else {
                    Mul(Box::new(Exp(e.clone())), Box::new(d))
                }
            }
            Log(e) => {
                let d = e.diff(var);
                if is_zero(&d) {
                    Const(0.0)
                } else {
                    Div(Box::new(d), e.clone())
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: {}", self.position, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push((i, Tok::Plus));
                i += 1;
            }
            '-' => {
                out.push((i, Tok::Minus));
                i += 1;
            }
            '*' => {
                out.push((i, Tok::Star));
                i += 1;
            }
            '/' => {
                out.push((i, Tok::Slash));
                i += 1;
            }
            '^' => {
                out.push((i, Tok::Caret));
                i += 1;
            }
            '(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError {
                    position: start,
                    message: format!("bad number literal `{text}`"),
                })?;
                out.push((start, Tok::Num(v)));
            }
            'a'..='z' | 'A'..='Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(src[start..i].to_string())));
            }
            _ => {
                return Err(ParseError {
                    position: i,
                    message: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn bump(&mut self) -> Option<(usize, Tok)> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        let position = self
            .toks
            .get(self.pos)
            .map(|(p, _)| *p)
            .unwrap_or_else(|| self.toks.last().map(|(p, _)| p + 1).unwrap_or(0));
        ParseError {
            position,
            message: message.into(),
        }
    }

    fn parse_expr(&mut self, min_bp: u8) -> Result<Expr, ParseError> {
        let mut lhs = match self.bump() {
            Some((_, Tok::Num(v))) => Expr::Const(v),
            Some((pos, Tok::Ident(name))) => self.ident(&name, pos)?,
            Some((_, Tok::Minus)) => Expr::Neg(Box::new(self.parse_expr(5)?)),
            Some((_, Tok::Plus)) => self.parse_expr(5)?,
            Some((_, Tok::LParen)) => {
                let inner = self.parse_expr(0)?;
                match self.bump() {
                    Some((_, Tok::RParen)) => inner,
                    _ => return Err(self.err("expected `)`")),
                }
            }
            other => {
                return Err(ParseError {
                    position: other.map(|(p, _)| p).unwrap_or(0),
                    message: "expected an expression".into(),
                })
            }
        };
        loop {
            let (l_bp, r_bp, op) = match self.peek() {
                Some(Tok::Plus) => (1, 2, '+'),
                Some(Tok::Minus) => (1, 2, '-'),
                Some(Tok::Star) => (3, 4, '*'),
                Some(Tok::Slash) => (3, 4, '/'),
                Some(Tok::Caret) => (8, 7, '^'), // right-associative
                _ => break,
            };
            if l_bp < min_bp {
                break;
            }
            self.bump();
            let rhs = self.parse_expr(r_bp)?;
            lhs = match op {
                '+' => Expr::Add(Box::new(lhs), Box::new(rhs)),
                '-' => Expr::Sub(Box::new(lhs), Box::new(rhs)),
                '*' => Expr::Mul(Box::new(lhs), Box::new(rhs)),
                '/' => Expr::Div(Box::new(lhs), Box::new(rhs)),
                _ => Expr::Pow(Box::new(lhs), Box::new(rhs)),
            };
        }
        Ok(lhs)
    }

    fn ident(&mut self, name: &str, pos: usize) -> Result<Expr, ParseError> {
        match name {
            "t" => Ok(Expr::Time),
            "sin" | "cos" | "exp" | "log" => {
                match self.bump() {
                    Some((_, Tok::LParen)) => {}
                    _ => {
                        return Err(ParseError {
                            position: pos,
                            message: format!("`{name}` needs parenthesized argument"),
                        })
                    }
                }
                let arg = Box::new(self.parse_expr(0)?);
                match self.bump() {
                    Some((_, Tok::RParen)) => {}
                    _ => return Err(self.err("expected `)`")),
                }
                Ok(match name {
                    "sin" => Expr::Sin(arg),
                    "cos" => Expr::Cos(arg),
                    "exp" => Expr::Exp(arg),
                    _ => Expr::Log(arg),
                })
            }
            _ => {
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(i) = rest.parse::<usize>() {
                        if i < self.dim {
                            return Ok(Expr::Coord(i));
                        }
                        return Err(ParseError {
                            position: pos,
                            message: format!("coordinate x{i} exceeds model dimension {}", self.dim),
                        });
                    }
                }
                Err(ParseError {
                    position: pos,
                    message: format!("unknown identifier `{name}`"),
                })
            }
        }
    }
}

/// Parses an expression over `t, x0..x{dim-1}`.
pub fn parse(src: &str, dim: usize) -> Result<Expr, ParseError> {
    let toks = tokenize(src)?;
    if toks.is_empty() {
        return Err(ParseError {
            position: 0,
            message: "empty expression".into(),
        });
    }
    let mut p = Parser { toks, pos: 0, dim };
    let e = p.parse_expr(0)?;
    if p.pos != p.toks.len() {
        return Err(p.err("trailing tokens"));
    }
    Ok(e)
}
