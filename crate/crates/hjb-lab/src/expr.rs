//! Coefficient expression language.
//!
//! Grammar (recursive descent, one token of lookahead):
//!
//! ```text
//! expr   := term (("+"|"-") term)*
//! term   := factor (("*"|"/") factor)*
//! factor := ["-"] atom ["^" integer]
//! atom   := number | ident | ident "(" expr ("," expr)* ")" | "(" expr ")"
//! ```
//!
//! Identifiers are the problem variables `t`, `x1..xd`, `y`, `z1..zm`,
//! `u1..uk`, the function names below, and any named constants supplied by
//! the scenario. Evaluation is total on finite inputs except division by
//! zero and square roots of negative numbers, which are reported as errors.

use crate::error::{Error, Result};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Sqrt,
    Exp,
    Sin,
    Cos,
    Tanh,
    Min,
    Max,
    Pos,
    Neg,
    Clamp,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "min" => Func::Min,
            "max" => Func::Max,
            "pos" => Func::Pos,
            "neg" => Func::Neg,
            "clamp" => Func::Clamp,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pos => "pos",
            Func::Neg => "neg",
            Func::Clamp => "clamp",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::Clamp => 3,
            _ => 1,
        }
    }
}

/// Problem variable, 0-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X(u8),
    Y,
    Z(u8),
    U(u8),
}

pub const USES_T: u8 = 1;
pub const USES_X: u8 = 2;
pub const USES_Y: u8 = 4;
pub const USES_Z: u8 = 8;
pub const USES_U: u8 = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Pow(Box<Expr>, u32),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// The variables an expression may legally reference: dims of the state,
/// noise and control spaces plus scenario-defined named constants.
#[derive(Debug, Clone)]
pub struct VarSpace {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub constants: Vec<(String, f64)>,
}

impl VarSpace {
    pub fn new(d: usize, m: usize, k: usize) -> Self {
        VarSpace {
            d,
            m,
            k,
            constants: Vec::new(),
        }
    }

    fn constant(&self, name: &str) -> Option<f64> {
        self.constants
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Evaluation point. Slices must be at least as long as the declared dims.
#[derive(Debug, Clone, Copy)]
pub struct EvalEnv<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    pub u: &'a [f64],
}

impl<'a> EvalEnv<'a> {
    pub fn state(t: f64, x: &'a [f64]) -> Self {
        EvalEnv {
            t,
            x,
            y: 0.0,
            z: &[],
            u: &[],
        }
    }
}

/// A parsed coefficient: expression tree plus a cached variable-usage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientExpr {
    root: Expr,
    mask: u8,
}

impl CoefficientExpr {
    pub fn constant(c: f64) -> Self {
        CoefficientExpr {
            root: Expr::Const(c),
            mask: 0,
        }
    }

    pub fn uses(&self, mask: u8) -> bool {
        self.mask & mask != 0
    }

    pub fn is_constant(&self) -> bool {
        self.mask == 0
    }

    pub fn eval(&self, env: &EvalEnv) -> Result<f64> {
        eval_node(&self.root, env)
    }

    /// Evaluates an expression known to depend only on (t, x).
    pub fn eval_tx(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.eval(&EvalEnv::state(t, x))
    }

    /// Replaces every occurrence of `t` with `t_sub` and scales every
    /// `z_j` by `z_scale`, then divides the whole expression by `divisor`
    /// (skipped when it is exactly 1). Used by the time-change transform.
    pub fn reparameterized(&self, t_sub: Option<&CoefficientExpr>, z_scale: f64, divisor: f64) -> Self {
        fn walk(e: &Expr, t_sub: Option<&Expr>, z_scale: f64) -> Expr {
            match e {
                Expr::Var(Var::T) => match t_sub {
                    Some(sub) => sub.clone(),
                    None => e.clone(),
                },
                Expr::Var(Var::Z(j)) if z_scale != 1.0 => Expr::Mul(
                    Box::new(Expr::Const(z_scale)),
                    Box::new(Expr::Var(Var::Z(*j))),
                ),
                Expr::Const(_) | Expr::Var(_) => e.clone(),
                Expr::Neg(a) => Expr::Neg(Box::new(walk(a, t_sub, z_scale))),
                Expr::Pow(a, n) => Expr::Pow(Box::new(walk(a, t_sub, z_scale)), *n),
                Expr::Add(a, b) => Expr::Add(
                    Box::new(walk(a, t_sub, z_scale)),
                    Box::new(walk(b, t_sub, z_scale)),
                ),
                Expr::Sub(a, b) => Expr::Sub(
                    Box::new(walk(a, t_sub, z_scale)),
                    Box::new(walk(b, t_sub, z_scale)),
                ),
                Expr::Mul(a, b) => Expr::Mul(
                    Box::new(walk(a, t_sub, z_scale)),
                    Box::new(walk(b, t_sub, z_scale)),
                ),
                Expr::Div(a, b) => Expr::Div(
                    Box::new(walk(a, t_sub, z_scale)),
                    Box::new(walk(b, t_sub, z_scale)),
                ),
                Expr::Call(f, args) => {
                    Expr::Call(*f, args.iter().map(|a| walk(a, t_sub, z_scale)).collect())
                }
            }
        }
        let mut root = walk(&self.root, t_sub.map(|c| &c.root), z_scale);
        if divisor != 1.0 {
            root = Expr::Div(Box::new(root), Box::new(Expr::Const(divisor)));
        }
        let mask = mask_of(&root);
        CoefficientExpr { root, mask }
    }

    /// Builds the affine map `c0 + (t - c1) / c2` as an expression.
    pub fn affine_time_map(c0: f64, c1: f64, c2: f64) -> Self {
        let root = Expr::Add(
            Box::new(Expr::Const(c0)),
            Box::new(Expr::Div(
                Box::new(Expr::Sub(
                    Box::new(Expr::Var(Var::T)),
                    Box::new(Expr::Const(c1)),
                )),
                Box::new(Expr::Const(c2)),
            )),
        );
        let mask = mask_of(&root);
        CoefficientExpr { root, mask }
    }
}

impl fmt::Display for CoefficientExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        print_node(&self.root, 0, f)
    }
}

/// Parses `text` against the variable space. Errors carry a byte offset.
pub fn parse_coefficient(text: &str, space: &VarSpace) -> Result<CoefficientExpr> {
    if text.trim().is_empty() {
        return Err(Error::ExprParse {
            offset: 0,
            msg: "empty expression".into(),
        });
    }
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        space,
    };
    let root = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(Error::ExprParse {
            offset: p.pos,
            msg: format!("unexpected trailing input {:?}", p.rest_snippet()),
        });
    }
    let root = fold(root);
    let mask = mask_of(&root);
    Ok(CoefficientExpr { root, mask })
}

// ---------------------------------------------------------------------------
// evaluation

fn eval_node(e: &Expr, env: &EvalEnv) -> Result<f64> {
    Ok(match e {
        Expr::Const(c) => *c,
        Expr::Var(v) => match v {
            Var::T => env.t,
            Var::X(i) => env.x[*i as usize],
            Var::Y => env.y,
            Var::Z(j) => env.z[*j as usize],
            Var::U(l) => env.u[*l as usize],
        },
        Expr::Neg(a) => -eval_node(a, env)?,
        Expr::Pow(a, n) => eval_node(a, env)?.powi(*n as i32),
        Expr::Add(a, b) => eval_node(a, env)? + eval_node(b, env)?,
        Expr::Sub(a, b) => eval_node(a, env)? - eval_node(b, env)?,
        Expr::Mul(a, b) => eval_node(a, env)? * eval_node(b, env)?,
        Expr::Div(a, b) => {
            let den = eval_node(b, env)?;
            if den == 0.0 {
                return Err(Error::ExprEval("division by zero".into()));
            }
            eval_node(a, env)? / den
        }
        Expr::Call(f, args) => {
            let a0 = eval_node(&args[0], env)?;
            match f {
                Func::Abs => a0.abs(),
                Func::Sqrt => {
                    if a0 < 0.0 {
                        return Err(Error::ExprEval(format!("sqrt of negative ({a0})")));
                    }
                    a0.sqrt()
                }
                Func::Exp => a0.exp(),
                Func::Sin => a0.sin(),
                Func::Cos => a0.cos(),
                Func::Tanh => a0.tanh(),
                Func::Pos => a0.max(0.0),
                Func::Neg => (-a0).max(0.0),
                Func::Min => a0.min(eval_node(&args[1], env)?),
                Func::Max => a0.max(eval_node(&args[1], env)?),
                Func::Clamp => {
                    let lo = eval_node(&args[1], env)?;
                    let hi = eval_node(&args[2], env)?;
                    a0.max(lo).min(hi)
                }
            }
        }
    })
}

fn mask_of(e: &Expr) -> u8 {
    match e {
        Expr::Const(_) => 0,
        Expr::Var(v) => match v {
            Var::T => USES_T,
            Var::X(_) => USES_X,
            Var::Y => USES_Y,
            Var::Z(_) => USES_Z,
            Var::U(_) => USES_U,
        },
        Expr::Neg(a) | Expr::Pow(a, _) => mask_of(a),
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            mask_of(a) | mask_of(b)
        }
        Expr::Call(_, args) => args.iter().fold(0, |m, a| m | mask_of(a)),
    }
}

/// Folds constant subtrees. Subtrees whose evaluation errors or overflows
/// are left intact so the error surfaces at evaluation time.
fn fold(e: Expr) -> Expr {
    let folded = match e {
        Expr::Const(_) | Expr::Var(_) => return e,
        Expr::Neg(a) => Expr::Neg(Box::new(fold(*a))),
        Expr::Pow(a, n) => Expr::Pow(Box::new(fold(*a)), n),
        Expr::Add(a, b) => Expr::Add(Box::new(fold(*a)), Box::new(fold(*b))),
        Expr::Sub(a, b) => Expr::Sub(Box::new(fold(*a)), Box::new(fold(*b))),
        Expr::Mul(a, b) => Expr::Mul(Box::new(fold(*a)), Box::new(fold(*b))),
        Expr::Div(a, b) => Expr::Div(Box::new(fold(*a)), Box::new(fold(*b))),
        Expr::Call(f, args) => Expr::Call(f, args.into_iter().map(fold).collect()),
    };
    if mask_of(&folded) == 0 {
        let env = EvalEnv::state(0.0, &[]);
        if let Ok(v) = eval_node(&folded, &env) {
            if v.is_finite() {
                return Expr::Const(v);
            }
        }
    }
    folded
}

// ---------------------------------------------------------------------------
// printing (minimal parentheses; re-parsing the output restores the tree)

const LVL_SUM: u8 = 0;
const LVL_PROD: u8 = 1;
const LVL_FACTOR: u8 = 2;

fn level(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => LVL_SUM,
        Expr::Mul(..) | Expr::Div(..) => LVL_PROD,
        Expr::Neg(_) | Expr::Pow(..) => LVL_FACTOR,
        Expr::Const(c) if *c < 0.0 => LVL_FACTOR,
        _ => 3,
    }
}

fn print_node(e: &Expr, min_level: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if level(e) < min_level {
        write!(f, "(")?;
        print_node(e, 0, f)?;
        return write!(f, ")");
    }
    match e {
        Expr::Const(c) => write!(f, "{c:?}"),
        Expr::Var(v) => match v {
            Var::T => write!(f, "t"),
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::Y => write!(f, "y"),
            Var::Z(j) => write!(f, "z{}", j + 1),
            Var::U(l) => write!(f, "u{}", l + 1),
        },
        Expr::Neg(a) => {
            write!(f, "-")?;
            // Operand of unary minus must be an atom or atom^int.
            print_node(a, LVL_FACTOR + 1, f)
        }
        Expr::Pow(a, n) => {
            print_node(a, LVL_FACTOR + 1, f)?;
            write!(f, "^{n}")
        }
        Expr::Add(a, b) => {
            print_node(a, LVL_SUM, f)?;
            write!(f, "+")?;
            print_node(b, LVL_PROD, f)
        }
        Expr::Sub(a, b) => {
            print_node(a, LVL_SUM, f)?;
            write!(f, "-")?;
            print_node(b, LVL_PROD, f)
        }
        Expr::Mul(a, b) => {
            print_node(a, LVL_PROD, f)?;
            write!(f, "*")?;
            print_node(b, LVL_FACTOR, f)
        }
        Expr::Div(a, b) => {
            print_node(a, LVL_PROD, f)?;
            write!(f, "/")?;
            print_node(b, LVL_FACTOR, f)
        }
        Expr::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                print_node(a, 0, f)?;
            }
            write!(f, ")")
        }
    }
}

// ---------------------------------------------------------------------------
// parser

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    space: &'a VarSpace,
}

impl<'a> Parser<'a> {
    fn rest_snippet(&self) -> String {
        let rest = &self.src[self.pos.min(self.src.len())..];
        let take = rest.len().min(12);
        String::from_utf8_lossy(&rest[..take]).into_owned()
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && (self.src[self.pos] as char).is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::ExprParse {
            offset,
            msg: msg.into(),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        let negated = if self.peek() == Some(b'-') {
            self.pos += 1;
            true
        } else {
            false
        };
        let mut node = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let at = self.pos;
            let n = self.integer().map_err(|_| {
                self.err(at, "expected a nonnegative integer exponent after '^'")
            })?;
            node = Expr::Pow(Box::new(node), n);
        }
        Ok(if negated { Expr::Neg(Box::new(node)) } else { node })
    }

    fn integer(&mut self) -> Result<u32> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, "expected digits"));
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .parse::<u32>()
            .map_err(|_| self.err(start, "integer exponent out of range"))
    }

    fn atom(&mut self) -> Result<Expr> {
        let c = self
            .peek()
            .ok_or_else(|| self.err(self.src.len(), "unexpected end of input"))?;
        if c == b'(' {
            self.pos += 1;
            let inner = self.expr()?;
            if self.peek() != Some(b')') {
                return Err(self.err(self.pos, "expected ')'"));
            }
            self.pos += 1;
            return Ok(inner);
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.number();
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            return self.ident();
        }
        Err(self.err(self.pos, format!("unexpected character {:?}", c as char)))
    }

    fn number(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        let mut saw_digit = false;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
            saw_digit = true;
        }
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
                saw_digit = true;
            }
        }
        if !saw_digit {
            return Err(self.err(start, "malformed number"));
        }
        if matches!(self.src.get(self.pos), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            let digits_start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits_start {
                // Not an exponent after all (e.g. an identifier boundary).
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| self.err(start, format!("malformed number {text:?}")))
    }

    fn ident(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && ((self.src[self.pos] as char).is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        if self.peek() == Some(b'(') {
            let func = Func::lookup(&name)
                .ok_or_else(|| self.err(start, format!("unknown function {name:?}")))?;
            self.pos += 1; // consume '('
            let mut args = vec![self.expr()?];
            while self.peek() == Some(b',') {
                self.pos += 1;
                args.push(self.expr()?);
            }
            if self.peek() != Some(b')') {
                return Err(self.err(self.pos, "expected ')' or ','"));
            }
            self.pos += 1;
            if args.len() != func.arity() {
                return Err(self.err(
                    start,
                    format!(
                        "{} takes {} argument(s), got {}",
                        func.name(),
                        func.arity(),
                        args.len()
                    ),
                ));
            }
            return Ok(Expr::Call(func, args));
        }
        self.resolve_var(&name, start)
    }

    fn resolve_var(&self, name: &str, offset: usize) -> Result<Expr> {
        match name {
            "t" => return Ok(Expr::Var(Var::T)),
            "y" => return Ok(Expr::Var(Var::Y)),
            _ => {}
        }
        for (prefix, dim, mk) in [
            ("x", self.space.d, Var::X as fn(u8) -> Var),
            ("z", self.space.m, Var::Z as fn(u8) -> Var),
            ("u", self.space.k, Var::U as fn(u8) -> Var),
        ] {
            if let Some(rest) = name.strip_prefix(prefix) {
                if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                    let idx: usize = rest
                        .parse()
                        .map_err(|_| self.err(offset, format!("bad index in {name:?}")))?;
                    if idx == 0 || idx > dim {
                        return Err(self.err(
                            offset,
                            format!("{name:?} out of range (1..={dim})"),
                        ));
                    }
                    return Ok(Expr::Var(mk((idx - 1) as u8)));
                }
            }
        }
        if let Some(v) = self.space.constant(name) {
            return Ok(Expr::Const(v));
        }
        Err(self.err(offset, format!("unknown identifier {name:?}")))
    }
}
