//! A small closed-form expression grammar over the variables `x` and `t`.
//!
//! Supports constants, `pi`, `+ - * /`, integer powers with `^`, and the
//! functions `sin`, `cos`, `exp`. Expressions know how to differentiate
//! themselves symbolically, which is what the manufactured forcings and the
//! Neumann compatibility checks need.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    X,
    T,
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, i32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    T,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Config(format!(
                "unexpected trailing input in expression `{src}`"
            )));
        }
        Ok(e.simplify())
    }

    pub fn eval(&self, x: f64, t: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::X => x,
            Expr::T => t,
            Expr::Add(a, b) => a.eval(x, t) + b.eval(x, t),
            Expr::Sub(a, b) => a.eval(x, t) - b.eval(x, t),
            Expr::Mul(a, b) => a.eval(x, t) * b.eval(x, t),
            Expr::Div(a, b) => a.eval(x, t) / b.eval(x, t),
            Expr::Neg(a) => -a.eval(x, t),
            Expr::Pow(a, k) => a.eval(x, t).powi(*k),
            Expr::Sin(a) => a.eval(x, t).sin(),
            Expr::Cos(a) => a.eval(x, t).cos(),
            Expr::Exp(a) => a.eval(x, t).exp(),
        }
    }

    /// Symbolic partial derivative.
    pub fn derivative(&self, var: Var) -> Expr {
        use Expr::*;
        let d = |e: &Expr| e.derivative(var);
        match self {
            Const(_) => Const(0.0),
            X => Const(if var == Var::X { 1.0 } else { 0.0 }),
            T => Const(if var == Var::T { 1.0 } else { 0.0 }),
            Add(a, b) => Add(Box::new(d(a)), Box::new(d(b))),
            Sub(a, b) => Sub(Box::new(d(a)), Box::new(d(b))),
            Mul(a, b) => Add(
                Box::new(Mul(Box::new(d(a)), b.clone())),
                Box::new(Mul(a.clone(), Box::new(d(b)))),
            ),
            Div(a, b) => Div(
                Box::new(Sub(
                    Box::new(Mul(Box::new(d(a)), b.clone())),
                    Box::new(Mul(a.clone(), Box::new(d(b)))),
                )),
                Box::new(Pow(b.clone(), 2)),
            ),
            Neg(a) => Neg(Box::new(d(a))),
            Pow(a, k) => Mul(
                Box::new(Mul(
                    Box::new(Const(*k as f64)),
                    Box::new(Pow(a.clone(), k - 1)),
                )),
                Box::new(d(a)),
            ),
            Sin(a) => Mul(Box::new(Cos(a.clone())), Box::new(d(a))),
            Cos(a) => Neg(Box::new(Mul(Box::new(Sin(a.clone())), Box::new(d(a))))),
            Exp(a) => Mul(Box::new(Exp(a.clone())), Box::new(d(a))),
        }
        .simplify()
    }

    fn simplify(self) -> Expr {
        use Expr::*;
        match self {
            Add(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x + y),
                (Const(z), e) | (e, Const(z)) if z == 0.0 => e,
                (a, b) => Add(Box::new(a), Box::new(b)),
            },
            Sub(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x - y),
                (e, Const(z)) if z == 0.0 => e,
                (Const(z), e) if z == 0.0 => Neg(Box::new(e)).simplify(),
                (a, b) => Sub(Box::new(a), Box::new(b)),
            },
            Mul(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x * y),
                (Const(z), _) | (_, Const(z)) if z == 0.0 => Const(0.0),
                (Const(o), e) | (e, Const(o)) if o == 1.0 => e,
                (a, b) => Mul(Box::new(a), Box::new(b)),
            },
            Div(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) if y != 0.0 => Const(x / y),
                (e, Const(o)) if o == 1.0 => e,
                (a, b) => Div(Box::new(a), Box::new(b)),
            },
            Neg(a) => match a.simplify() {
                Const(x) => Const(-x),
                Neg(inner) => *inner,
                e => Neg(Box::new(e)),
            },
            Pow(a, k) => match (a.simplify(), k) {
                (_, 0) => Const(1.0),
                (e, 1) => e,
                (Const(x), k) => Const(x.powi(k)),
                (e, k) => Pow(Box::new(e), k),
            },
            Sin(a) => match a.simplify() {
                Const(x) => Const(x.sin()),
                e => Sin(Box::new(e)),
            },
            Cos(a) => match a.simplify() {
                Const(x) => Const(x.cos()),
                e => Cos(Box::new(e)),
            },
            Exp(a) => match a.simplify() {
                Const(x) => Const(x.exp()),
                e => Exp(Box::new(e)),
            },
            other => other,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::X => write!(f, "x"),
            Expr::T => write!(f, "t"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Pow(a, k) => write!(f, "({a}^{k})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
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

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let bytes: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            ' ' | '\t' | '\n' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '/' => {
                out.push(Token::Slash);
                i += 1;
            }
            '^' => {
                out.push(Token::Caret);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == '.'
                        || bytes[i] == 'e'
                        || bytes[i] == 'E'
                        || ((bytes[i] == '+' || bytes[i] == '-')
                            && i > start
                            && (bytes[i - 1] == 'e' || bytes[i - 1] == 'E')))
                {
                    i += 1;
                }
                let s: String = bytes[start..i].iter().collect();
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::Config(format!("bad number `{s}` in expression")))?;
                out.push(Token::Num(v));
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                out.push(Token::Ident(bytes[start..i].iter().collect()));
            }
            other => {
                return Err(Error::Config(format!(
                    "unexpected character `{other}` in expression"
                )))
            }
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

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(tok) = self.peek() {
            match tok {
                Token::Plus => {
                    self.next();
                    let rhs = self.term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Token::Minus => {
                    self.next();
                    let rhs = self.term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(tok) = self.peek() {
            match tok {
                Token::Star => {
                    self.next();
                    let rhs = self.unary()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Token::Slash => {
                    self.next();
                    let rhs = self.unary()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.next();
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.next();
            let neg = if matches!(self.peek(), Some(Token::Minus)) {
                self.next();
                true
            } else {
                false
            };
            match self.next() {
                Some(Token::Num(v)) => {
                    if v.fract() != 0.0 || v.abs() > i32::MAX as f64 {
                        return Err(Error::Config(format!(
                            "exponent must be an integer literal, got {v}"
                        )));
                    }
                    let k = v as i32 * if neg { -1 } else { 1 };
                    Ok(Expr::Pow(Box::new(base), k))
                }
                other => Err(Error::Config(format!(
                    "expected integer exponent after `^`, got {other:?}"
                ))),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Expr::Const(v)),
            Some(Token::Ident(name)) => match name.as_str() {
                "x" => Ok(Expr::X),
                "t" => Ok(Expr::T),
                "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                "sin" | "cos" | "exp" => {
                    match self.next() {
                        Some(Token::LParen) => {}
                        _ => {
                            return Err(Error::Config(format!(
                                "expected `(` after function `{name}`"
                            )))
                        }
                    }
                    let arg = self.expr()?;
                    match self.next() {
                        Some(Token::RParen) => {}
                        _ => {
                            return Err(Error::Config(format!(
                                "missing `)` after argument of `{name}`"
                            )))
                        }
                    }
                    let b = Box::new(arg);
                    Ok(match name.as_str() {
                        "sin" => Expr::Sin(b),
                        "cos" => Expr::Cos(b),
                        _ => Expr::Exp(b),
                    })
                }
                other => Err(Error::Config(format!(
                    "unknown identifier `{other}` in expression"
                ))),
            },
            Some(Token::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(e),
                    _ => Err(Error::Config("unbalanced parentheses".into())),
                }
            }
            other => Err(Error::Config(format!(
                "unexpected token {other:?} in expression"
            ))),
        }
    }
}
