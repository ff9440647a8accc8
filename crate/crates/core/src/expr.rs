//! Scalar expression trees over the chart coordinates `x1`, `x2`.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 'x1' | 'x2' | 'pi' | func '(' expr ')'
//!         | 'pow' '(' expr ',' expr ')' | '(' expr ')'
//! func   := 'exp' | 'sin' | 'cos' | 'sinh' | 'cosh'
//! ```
//!
//! Every expression is smooth wherever its quotients have nonvanishing
//! denominators and its non-integer powers have positive bases.

use std::fmt;

use crate::error::{Error, Result};
use crate::jet::Jet;

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Sinh(Box<Expr>),
    Cosh(Box<Expr>),
}

impl Expr {
    pub fn c(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn x1() -> Expr {
        Expr::Var(0)
    }

    pub fn x2() -> Expr {
        Expr::Var(1)
    }

    pub fn parse(src: &str) -> Result<Expr> {
        let mut p = Parser {
            src: src.as_bytes(),
            pos: 0,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err(format!("unexpected trailing input '{}'", &src[p.pos..])));
        }
        Ok(e)
    }

    fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            Expr::Neg(a) => a.as_const().map(|v| -v),
            _ => None,
        }
    }

    pub fn eval(&self, p: [f64; 2]) -> Result<f64> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => p[*i],
            Expr::Neg(a) => -a.eval(p)?,
            Expr::Add(a, b) => a.eval(p)? + b.eval(p)?,
            Expr::Sub(a, b) => a.eval(p)? - b.eval(p)?,
            Expr::Mul(a, b) => a.eval(p)? * b.eval(p)?,
            Expr::Div(a, b) => {
                let d = b.eval(p)?;
                if d == 0.0 {
                    return Err(Error::Eval(format!("division by zero in '{}'", self)));
                }
                a.eval(p)? / d
            }
            Expr::Pow(a, b) => {
                let base = a.eval(p)?;
                match b.as_const() {
                    Some(e) if e.fract() == 0.0 && e.abs() < 64.0 => base.powi(e as i32),
                    _ => {
                        if base <= 0.0 {
                            return Err(Error::Eval(format!(
                                "non-positive base {base} in real power '{}'",
                                self
                            )));
                        }
                        base.powf(b.eval(p)?)
                    }
                }
            }
            Expr::Exp(a) => a.eval(p)?.exp(),
            Expr::Sin(a) => a.eval(p)?.sin(),
            Expr::Cos(a) => a.eval(p)?.cos(),
            Expr::Sinh(a) => a.eval(p)?.sinh(),
            Expr::Cosh(a) => a.eval(p)?.cosh(),
        };
        Ok(v)
    }

    /// Evaluates the expression on jet-valued coordinates. Passing the
    /// coordinate jets of a base point yields the Taylor expansion there;
    /// passing arbitrary jets composes the expression with a map.
    pub fn eval_jet(&self, vars: &[Jet; 2]) -> Result<Jet> {
        let order = vars[0].order().min(vars[1].order());
        let j = match self {
            Expr::Const(c) => Jet::constant(*c, order),
            Expr::Var(i) => vars[*i].truncate(order),
            Expr::Neg(a) => -a.eval_jet(vars)?,
            Expr::Add(a, b) => a.eval_jet(vars)? + b.eval_jet(vars)?,
            Expr::Sub(a, b) => a.eval_jet(vars)? - b.eval_jet(vars)?,
            Expr::Mul(a, b) => a.eval_jet(vars)? * b.eval_jet(vars)?,
            Expr::Div(a, b) => {
                let d = b.eval_jet(vars)?;
                if d.value() == 0.0 {
                    return Err(Error::Eval(format!("division by zero in '{}'", self)));
                }
                a.eval_jet(vars)?.div(&d)
            }
            Expr::Pow(a, b) => {
                let base = a.eval_jet(vars)?;
                match b.as_const() {
                    Some(e) if e.fract() == 0.0 && e.abs() < 64.0 => {
                        if e < 0.0 && base.value() == 0.0 {
                            return Err(Error::Eval(format!("division by zero in '{}'", self)));
                        }
                        base.powi(e as i32)
                    }
                    Some(e) => {
                        if base.value() <= 0.0 {
                            return Err(Error::Eval(format!(
                                "non-positive base in real power '{}'",
                                self
                            )));
                        }
                        base.powf(e)
                    }
                    None => {
                        if base.value() <= 0.0 {
                            return Err(Error::Eval(format!(
                                "non-positive base in real power '{}'",
                                self
                            )));
                        }
                        (b.eval_jet(vars)? * base.ln()).exp()
                    }
                }
            }
            Expr::Exp(a) => a.eval_jet(vars)?.exp(),
            Expr::Sin(a) => a.eval_jet(vars)?.sin(),
            Expr::Cos(a) => a.eval_jet(vars)?.cos(),
            Expr::Sinh(a) => a.eval_jet(vars)?.sinh(),
            Expr::Cosh(a) => a.eval_jet(vars)?.cosh(),
        };
        Ok(j)
    }

    /// Taylor jet of the expression at `p` up to `order`.
    pub fn jet_at(&self, p: [f64; 2], order: usize) -> Result<Jet> {
        self.eval_jet(&[Jet::variable(0, p[0], order), Jet::variable(1, p[1], order)])
    }
}

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) | Expr::Div(..) => 2,
        Expr::Neg(..) => 3,
        Expr::Pow(..) => 4,
        _ => 5,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| -> fmt::Result {
            if prec(e) < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "({c:?})")
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, 4)
            }
            Expr::Add(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " + ")?;
                wrap(f, b, 2)
            }
            Expr::Sub(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " - ")?;
                wrap(f, b, 2)
            }
            Expr::Mul(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "*")?;
                wrap(f, b, 3)
            }
            Expr::Div(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "/")?;
                wrap(f, b, 3)
            }
            Expr::Pow(a, b) => write!(f, "pow({a}, {b})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Sinh(a) => write!(f, "sinh({a})"),
            Expr::Cosh(a) => write!(f, "cosh({a})"),
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: String) -> Error {
        Error::Parse { pos: self.pos, msg }
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

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            let found = self
                .peek()
                .map(|b| format!("'{}'", b as char))
                .unwrap_or_else(|| "end of input".into());
            Err(self.err(format!("expected '{}', found {found}", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.peek() == Some(b'+') {
            self.pos += 1;
            return self.unary();
        }
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let e = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(e)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("?");
                match name {
                    "x1" => Ok(Expr::Var(0)),
                    "x2" => Ok(Expr::Var(1)),
                    "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                    "pow" => {
                        self.expect(b'(')?;
                        let a = self.expr()?;
                        self.expect(b',')?;
                        let b = self.expr()?;
                        self.expect(b')')?;
                        Ok(Expr::Pow(Box::new(a), Box::new(b)))
                    }
                    "exp" | "sin" | "cos" | "sinh" | "cosh" => {
                        let name = name.to_string();
                        self.expect(b'(')?;
                        let a = Box::new(self.expr()?);
                        self.expect(b')')?;
                        Ok(match name.as_str() {
                            "exp" => Expr::Exp(a),
                            "sin" => Expr::Sin(a),
                            "cos" => Expr::Cos(a),
                            "sinh" => Expr::Sinh(a),
                            _ => Expr::Cosh(a),
                        })
                    }
                    other => {
                        self.pos = start;
                        Err(self.err(format!("unknown identifier '{other}'")))
                    }
                }
            }
            Some(c) => Err(self.err(format!("unexpected character '{}'", c as char))),
            None => Err(self.err("unexpected end of input".into())),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < s.len() && (s[self.pos] == b'+' || s[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < s.len() && s[self.pos].is_ascii_digit() {
                while self.pos < s.len() && s[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).unwrap_or("");
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| Error::Parse {
                pos: start,
                msg: format!("invalid number '{text}'"),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_evaluates() {
        let e = Expr::parse("1 + x1^2*sin(x2) - exp(-x2^3/6)/2").unwrap();
        let p = [0.7, 0.3];
        let expected = 1.0 + 0.49 * 0.3f64.sin() - (-0.027f64 / 6.0).exp() / 2.0;
        assert!((e.eval(p).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn power_binds_tighter_than_unary_minus() {
        let e = Expr::parse("-x1^2").unwrap();
        assert_eq!(e.eval([3.0, 0.0]).unwrap(), -9.0);
        let e = Expr::parse("pow(x1, 0.5)").unwrap();
        assert_eq!(e.eval([4.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn rejects_unknown_function_by_name() {
        let err = Expr::parse("1 + tan(x1)").unwrap_err();
        match err {
            Error::Parse { msg, .. } => assert!(msg.contains("tan"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Expr::parse("sin(x1").is_err());
        assert!(Expr::parse("x3").is_err());
    }

    #[test]
    fn display_round_trips() {
        for src in ["1 + x1^2*sin(x2)", "exp(-x2^3/6)", "-(x1 - 2)/cosh(x2)", "2^-1*x1"] {
            let e = Expr::parse(src).unwrap();
            let again = Expr::parse(&e.to_string()).unwrap();
            let p = [0.37, -0.81];
            assert_eq!(e.eval(p).unwrap(), again.eval(p).unwrap(), "{src}");
        }
    }

    #[test]
    fn jet_matches_closed_form_derivatives() {
        // f = sin(x1) * exp(2 x2): d^3/dx1 dx2^2 = cos(x1) * 4 exp(2 x2)
        let e = Expr::parse("sin(x1)*exp(2*x2)").unwrap();
        let p = [0.3, -0.2];
        let j = e.jet_at(p, 4).unwrap();
        let expected = p[0].cos() * 4.0 * (2.0 * p[1]).exp();
        assert!((j.derivative(1, 2) - expected).abs() < 1e-13);
        assert!((j.value() - e.eval(p).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn variable_exponent_uses_log() {
        let e = Expr::parse("pow(x1, x2)").unwrap();
        let j = e.jet_at([2.0, 3.0], 2).unwrap();
        assert!((j.value() - 8.0).abs() < 1e-13);
        // d/dx2 x1^x2 = x1^x2 ln x1
        assert!((j.derivative(0, 1) - 8.0 * 2f64.ln()).abs() < 1e-12);
    }
}
