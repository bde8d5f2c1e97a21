//! Location/scale expressions over parent templates.
//!
//! Grammar (usual precedence, left associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | atom
//! atom   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'
//! ```
//!
//! Function calls are `sqrt`, `exp`, `log` and `softplus`. A unary minus
//! applied directly to a number literal folds into the constant.

use std::collections::BTreeSet;
use std::fmt;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sqrt,
    Exp,
    Log,
    Softplus,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sqrt" => Func::Sqrt,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "softplus" => Func::Softplus,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Softplus => "softplus",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Ref(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn constant(v: f64) -> Self {
        Expr::Const(v)
    }

    pub fn parent(name: impl Into<String>) -> Self {
        Expr::Ref(name.into())
    }

    pub fn call(f: Func, arg: Expr) -> Self {
        Expr::Call(f, Box::new(arg))
    }

    /// Names of referenced templates, sorted.
    pub fn refs(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Ref(n) => {
                out.insert(n.clone());
            }
            Expr::Neg(e) | Expr::Call(_, e) => e.collect_refs(out),
            Expr::Bin(_, a, b) => {
                a.collect_refs(out);
                b.collect_refs(out);
            }
        }
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            _ => None,
        }
    }

    /// Evaluates on `tape`, resolving references through `lookup`.
    pub fn eval(&self, tape: &Tape, lookup: &dyn Fn(&str) -> Option<Var>) -> Result<Var> {
        Ok(match self {
            Expr::Const(v) => tape.scalar(*v),
            Expr::Ref(n) => {
                lookup(n).ok_or_else(|| Error::contract(format!("no value bound for `{n}`")))?
            }
            Expr::Neg(e) => tape.neg(e.eval(tape, lookup)?),
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval(tape, lookup)?, b.eval(tape, lookup)?);
                match op {
                    BinOp::Add => tape.add(x, y)?,
                    BinOp::Sub => tape.sub(x, y)?,
                    BinOp::Mul => tape.mul(x, y)?,
                    BinOp::Div => tape.div(x, y)?,
                }
            }
            Expr::Call(f, e) => {
                let x = e.eval(tape, lookup)?;
                match f {
                    Func::Sqrt => tape.sqrt(x)?,
                    Func::Exp => tape.exp(x),
                    Func::Log => tape.log(x)?,
                    Func::Softplus => tape.softplus(x),
                }
            }
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Const(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 3,
            _ => 4,
        }
    }

    pub fn parse(src: &str) -> Result<Expr> {
        parse_expr_at(src, 1, 1)
    }
}

/// Parses an expression whose first character sits at `line:column` of a
/// larger document, so diagnostics point into that document.
pub(crate) fn parse_expr_at(src: &str, line: usize, column: usize) -> Result<Expr> {
    let tokens = lex(src, line, column)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        line,
        end_col: column + src.chars().count(),
    };
    let e = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(p.error_at(t.col, format!("unexpected `{}`", t.kind)));
    }
    Ok(e)
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => write!(f, "{v:?}"),
            Expr::Ref(n) => write!(f, "{n}"),
            Expr::Neg(e) => {
                if e.precedence() < 3 || matches!(**e, Expr::Const(_)) {
                    write!(f, "-({e})")
                } else {
                    write!(f, "-{e}")
                }
            }
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Bin(op, a, b) => {
                let p = self.precedence();
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                if a.precedence() < p {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " {sym} ")?;
                // Left associativity: equal precedence on the right needs parens.
                if b.precedence() <= p {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Sym(char),
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Num(v) => write!(f, "{v}"),
            TokKind::Ident(s) => write!(f, "{s}"),
            TokKind::Sym(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Clone, Debug)]
struct Token {
    kind: TokKind,
    col: usize,
}

fn lex(src: &str, line: usize, column: usize) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = column + i;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit()
            || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| Error::Parse {
                line,
                column: col,
                message: format!("invalid number `{text}`"),
            })?;
            out.push(Token {
                kind: TokKind::Num(v),
                col,
            });
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token {
                kind: TokKind::Ident(chars[start..i].iter().collect()),
                col,
            });
        } else if "+-*/()".contains(c) {
            out.push(Token {
                kind: TokKind::Sym(c),
                col,
            });
            i += 1;
        } else {
            return Err(Error::Parse {
                line,
                column: col,
                message: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    line: usize,
    end_col: usize,
}

const MAX_DEPTH: usize = 64;

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn error_at(&self, column: usize, message: String) -> Error {
        Error::Parse {
            line: self.line,
            column,
            message,
        }
    }

    fn eat_sym(&mut self, c: char) -> bool {
        if matches!(self.peek(), Some(Token { kind: TokKind::Sym(s), .. }) if *s == c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        self.expr_depth(0)
    }

    fn expr_depth(&mut self, depth: usize) -> Result<Expr> {
        if depth > MAX_DEPTH {
            let col = self.peek().map_or(self.end_col, |t| t.col);
            return Err(self.error_at(col, "expression nested too deeply".into()));
        }
        let mut lhs = self.term(depth)?;
        loop {
            let op = if self.eat_sym('+') {
                BinOp::Add
            } else if self.eat_sym('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term(depth)?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self, depth: usize) -> Result<Expr> {
        let mut lhs = self.unary(depth)?;
        loop {
            let op = if self.eat_sym('*') {
                BinOp::Mul
            } else if self.eat_sym('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary(depth)?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self, depth: usize) -> Result<Expr> {
        if depth > MAX_DEPTH {
            let col = self.peek().map_or(self.end_col, |t| t.col);
            return Err(self.error_at(col, "expression nested too deeply".into()));
        }
        if self.eat_sym('-') {
            if let Some(Token {
                kind: TokKind::Num(v),
                ..
            }) = self.peek()
            {
                let v = *v;
                self.pos += 1;
                return Ok(Expr::Const(-v));
            }
            let inner = self.unary(depth + 1)?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.atom(depth)
    }

    fn atom(&mut self, depth: usize) -> Result<Expr> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.error_at(self.end_col, "unexpected end of expression".into()));
        };
        self.pos += 1;
        match tok.kind {
            TokKind::Num(v) => Ok(Expr::Const(v)),
            TokKind::Ident(name) => {
                if self.eat_sym('(') {
                    let f = Func::from_name(&name).ok_or_else(|| {
                        self.error_at(tok.col, format!("unknown function `{name}`"))
                    })?;
                    let arg = self.expr_depth(depth + 1)?;
                    if !self.eat_sym(')') {
                        let col = self.peek().map_or(self.end_col, |t| t.col);
                        return Err(self.error_at(col, "expected `)`".into()));
                    }
                    Ok(Expr::call(f, arg))
                } else {
                    Ok(Expr::Ref(name))
                }
            }
            TokKind::Sym('(') => {
                let e = self.expr_depth(depth + 1)?;
                if !self.eat_sym(')') {
                    let col = self.peek().map_or(self.end_col, |t| t.col);
                    return Err(self.error_at(col, "expected `)`".into()));
                }
                Ok(e)
            }
            other => Err(self.error_at(tok.col, format!("unexpected `{other}`"))),
        }
    }
}
