//! Probe expression trees and their prefix text form, e.g. `(* u1 phi0)`.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use super::ProbeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    /// Realized control component `u[i]`.
    U(usize),
    /// Intended control component `uo[i]`.
    Uo(usize),
    /// State component `phi[i]`.
    Phi(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::U(i) => write!(f, "u{i}"),
            Var::Uo(i) => write!(f, "uo{i}"),
            Var::Phi(i) => write!(f, "phi{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Tanh(Box<Expr>),
}

/// Arguments a probe is evaluated at.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub u: &'a [f64],
    pub uo: &'a [f64],
    pub phi: &'a [f64],
}

impl Expr {
    pub fn u(i: usize) -> Self {
        Expr::Var(Var::U(i))
    }

    pub fn uo(i: usize) -> Self {
        Expr::Var(Var::Uo(i))
    }

    pub fn phi(i: usize) -> Self {
        Expr::Var(Var::Phi(i))
    }

    pub fn add(a: Expr, b: Expr) -> Self {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Self {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Self {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn pow(a: Expr, n: i32) -> Self {
        Expr::Pow(Box::new(a), n)
    }

    pub fn tanh(a: Expr) -> Self {
        Expr::Tanh(Box::new(a))
    }

    pub fn eval(&self, at: &Point<'_>) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => lookup(*v, at),
            Expr::Add(a, b) => a.eval(at) + b.eval(at),
            Expr::Sub(a, b) => a.eval(at) - b.eval(at),
            Expr::Mul(a, b) => a.eval(at) * b.eval(at),
            Expr::Pow(a, n) => powi(a.eval(at), *n),
            Expr::Tanh(a) => libm::tanh(a.eval(at)),
        }
    }

    /// Value and gradient with respect to `u`, accumulated into `grad`.
    pub fn eval_grad_u(&self, at: &Point<'_>, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.forward(at, grad)
    }

    // Forward-mode differentiation: returns the value and writes d/du into
    // `grad` (which must arrive zeroed).
    fn forward(&self, at: &Point<'_>, grad: &mut [f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => {
                if let Var::U(i) = v {
                    grad[*i] = 1.0;
                }
                lookup(*v, at)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                let sign = if matches!(self, Expr::Add(..)) { 1.0 } else { -1.0 };
                let mut gb = alloc::vec![0.0; grad.len()];
                let va = a.forward(at, grad);
                let vb = b.forward(at, &mut gb);
                for (g, x) in grad.iter_mut().zip(&gb) {
                    *g += sign * x;
                }
                va + sign * vb
            }
            Expr::Mul(a, b) => {
                let mut gb = alloc::vec![0.0; grad.len()];
                let va = a.forward(at, grad);
                let vb = b.forward(at, &mut gb);
                for (g, x) in grad.iter_mut().zip(&gb) {
                    *g = *g * vb + va * x;
                }
                va * vb
            }
            Expr::Pow(a, n) => {
                let va = a.forward(at, grad);
                let dv = if *n == 0 { 0.0 } else { *n as f64 * powi(va, n - 1) };
                grad.iter_mut().for_each(|g| *g *= dv);
                powi(va, *n)
            }
            Expr::Tanh(a) => {
                let va = a.forward(at, grad);
                let th = libm::tanh(va);
                let dv = 1.0 - th * th;
                grad.iter_mut().for_each(|g| *g *= dv);
                th
            }
        }
    }

    /// Every variable the expression mentions.
    pub fn variables(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<Var>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => out.push(*v),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Pow(a, _) | Expr::Tanh(a) => a.collect_vars(out),
        }
    }

    /// Whether any `u` variable occurs (syntactically).
    pub fn depends_on_u(&self) -> bool {
        self.variables().iter().any(|v| matches!(v, Var::U(_)))
    }

    pub fn parse(text: &str) -> Result<Self, ProbeError> {
        let tokens = tokenize(text);
        let mut pos = 0;
        let expr = parse_expr(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(ProbeError::Parse(alloc::format!("trailing input after expression in `{text}`")));
        }
        Ok(expr)
    }
}

fn lookup(v: Var, at: &Point<'_>) -> f64 {
    match v {
        Var::U(i) => at.u[i],
        Var::Uo(i) => at.uo[i],
        Var::Phi(i) => at.phi[i],
    }
}

fn powi(x: f64, n: i32) -> f64 {
    // libm has no powi; repeated multiplication keeps small powers exact.
    let mut acc = 1.0;
    for _ in 0..n.unsigned_abs() {
        acc *= x;
    }
    if n < 0 {
        1.0 / acc
    } else {
        acc
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // `{:?}` prints the shortest representation that round-trips.
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Add(a, b) => write!(f, "(+ {a} {b})"),
            Expr::Sub(a, b) => write!(f, "(- {a} {b})"),
            Expr::Mul(a, b) => write!(f, "(* {a} {b})"),
            Expr::Pow(a, n) => write!(f, "(^ {a} {n})"),
            Expr::Tanh(a) => write!(f, "(tanh {a})"),
        }
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '(' | ')' => {
                if !cur.is_empty() {
                    out.push(core::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    out.push(core::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn parse_expr(tokens: &[String], pos: &mut usize) -> Result<Expr, ProbeError> {
    let tok = tokens.get(*pos).ok_or_else(|| ProbeError::Parse("unexpected end of input".into()))?;
    *pos += 1;
    if tok == ")" {
        return Err(ProbeError::Parse("unexpected `)`".into()));
    }
    if tok != "(" {
        return parse_atom(tok);
    }
    let op = tokens.get(*pos).ok_or_else(|| ProbeError::Parse("missing operator".into()))?.clone();
    *pos += 1;
    let mut args = Vec::new();
    while tokens.get(*pos).map(String::as_str) != Some(")") {
        if *pos >= tokens.len() {
            return Err(ProbeError::Parse("unbalanced parentheses".into()));
        }
        if op == "^" && args.len() == 1 {
            let n = tokens[*pos]
                .parse::<i32>()
                .map_err(|_| ProbeError::Parse(alloc::format!("power exponent `{}` is not an integer", tokens[*pos])))?;
            *pos += 1;
            args.push(Expr::Const(n as f64));
            continue;
        }
        args.push(parse_expr(tokens, pos)?);
    }
    *pos += 1;
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(ProbeError::Parse(alloc::format!("`{op}` takes {n} arguments, got {}", args.len())))
        }
    };
    match op.as_str() {
        "+" | "*" if args.len() >= 2 => {
            let mut it = args.into_iter();
            let first = it.next().expect("len >= 2");
            Ok(it.fold(first, |acc, e| if op == "+" { Expr::add(acc, e) } else { Expr::mul(acc, e) }))
        }
        "+" | "*" => Err(ProbeError::Parse(alloc::format!("`{op}` takes at least 2 arguments"))),
        "-" => {
            arity(2)?;
            let mut it = args.into_iter();
            Ok(Expr::sub(it.next().expect("arity"), it.next().expect("arity")))
        }
        "^" => {
            arity(2)?;
            let mut it = args.into_iter();
            let base = it.next().expect("arity");
            let Some(Expr::Const(n)) = it.next() else { unreachable!("exponent parsed as integer") };
            Ok(Expr::pow(base, n as i32))
        }
        "tanh" => {
            arity(1)?;
            Ok(Expr::tanh(args.pop().expect("arity")))
        }
        other => Err(ProbeError::Parse(alloc::format!("unknown operator `{other}`"))),
    }
}

fn parse_atom(tok: &str) -> Result<Expr, ProbeError> {
    let index = |rest: &str| rest.parse::<usize>().ok();
    if let Some(i) = tok.strip_prefix("uo").and_then(index) {
        return Ok(Expr::uo(i));
    }
    if let Some(i) = tok.strip_prefix("u").and_then(index) {
        return Ok(Expr::u(i));
    }
    if let Some(i) = tok.strip_prefix("phi").and_then(index) {
        return Ok(Expr::phi(i));
    }
    match tok.parse::<f64>() {
        Ok(c) if c.is_finite() => Ok(Expr::Const(c)),
        _ => Err(ProbeError::Parse(alloc::format!("unknown token `{tok}`"))),
    }
}
