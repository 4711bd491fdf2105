//! Expression language for the math representation of a candidate.
//!
//! Grammar (standard precedence, `^` binds tighter than unary minus):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Identifiers of the form `c<digits>` are free parameters; every other
//! identifier that is not a function call is a variable.

mod eval;
mod parser;
mod printer;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use eval::{evaluate, Frame};
pub use parser::{parse, parse_with, ParseOptions};
pub use printer::print;

/// Maximum accepted source length in bytes.
pub const MAX_SOURCE_BYTES: usize = 64 * 1024;
/// Default node cap for a single expression.
pub const DEFAULT_MAX_NODES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    pub(crate) fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

/// Built-in functions. `Grad1` is the time-ordered numerical derivative and
/// only evaluates on frames that carry a time ordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Min2,
    Max2,
    Grad1,
}

impl Func {
    pub const ALL: [Func; 11] = [
        Func::Sin,
        Func::Cos,
        Func::Tan,
        Func::Exp,
        Func::Log,
        Func::Sqrt,
        Func::Abs,
        Func::Tanh,
        Func::Min2,
        Func::Max2,
        Func::Grad1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Min2 => "min",
            Func::Max2 => "max",
            Func::Grad1 => "grad1",
        }
    }

    /// Resolves a call name. `min2`/`max2` are accepted as aliases.
    pub fn from_name(name: &str) -> Option<Func> {
        match name {
            "min2" => return Some(Func::Min2),
            "max2" => return Some(Func::Max2),
            _ => {}
        }
        Func::ALL.iter().copied().find(|f| f.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min2 | Func::Max2 => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Const(f64),
    Param(usize),
    Var(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(inner: Expr) -> Expr {
        Expr::Neg(Box::new(inner))
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Param(_) | Expr::Var(_) => 1,
            Expr::Neg(inner) => 1 + inner.node_count(),
            Expr::Binary(_, l, r) => 1 + l.node_count() + r.node_count(),
            Expr::Call(_, args) => 1 + args.iter().map(Expr::node_count).sum::<usize>(),
        }
    }

    /// Visits every node in pre-order.
    pub fn walk<'a>(&'a self, visit: &mut impl FnMut(&'a Expr)) {
        visit(self);
        match self {
            Expr::Const(_) | Expr::Param(_) | Expr::Var(_) => {}
            Expr::Neg(inner) => inner.walk(visit),
            Expr::Binary(_, l, r) => {
                l.walk(visit);
                r.walk(visit);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.walk(visit)),
        }
    }

    /// Variable names in order of first appearance.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        self.walk(&mut |node| {
            if let Expr::Var(name) = node {
                if !out.iter().any(|n| n == name) {
                    out.push(name.clone());
                }
            }
        });
        out
    }

    /// One past the largest parameter index, or 0 when parameter-free.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.walk(&mut |node| {
            if let Expr::Param(i) = node {
                count = count.max(i + 1);
            }
        });
        count
    }

    pub fn uses_function(&self, func: Func) -> bool {
        let mut found = false;
        self.walk(&mut |node| {
            if let Expr::Call(f, _) = node {
                found |= *f == func;
            }
        });
        found
    }
}

/// A parsed expression with its free-parameter count and variable list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub root: Expr,
    pub variables: Vec<String>,
    pub param_count: usize,
    pub source_text: String,
}

impl Skeleton {
    /// Builds a skeleton from a tree, deriving variables and parameter count.
    pub fn from_expr(root: Expr) -> Skeleton {
        let source_text = printer::print_expr(&root);
        Skeleton {
            variables: root.variables(),
            param_count: root.param_count(),
            root,
            source_text,
        }
    }

    /// Replaces the variable list with a declared ordering. Fails if the
    /// expression references a name that is not declared.
    pub fn declare_variables(&mut self, declared: &[String]) -> Result<(), ExprError> {
        for used in self.root.variables() {
            if !declared.contains(&used) {
                return Err(ExprError::UndeclaredVariable(used));
            }
        }
        self.variables = declared.to_vec();
        Ok(())
    }

    /// True when some declared variable never appears in the expression.
    pub fn is_degenerate(&self) -> bool {
        let used = self.root.variables();
        self.variables.iter().any(|v| !used.contains(v))
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }
}

impl fmt::Display for Skeleton {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print(self))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at position {position}: expected {}, found {found}", expected.join(" or "))]
    Syntax {
        /// 1-based character column.
        position: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("expression exceeds limit: {0}")]
    LimitExceeded(String),
    #[error("unknown function `{name}` at position {position}")]
    UnknownFunction { name: String, position: usize },
    #[error("empty expression")]
    Empty,
    #[error("variable `{0}` is not declared")]
    UndeclaredVariable(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("missing variable column `{0}`")]
    MissingVariable(String),
    #[error("expected {expected} parameters, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("column lengths differ: expected {expected}, got {got} for `{column}`")]
    LengthMismatch {
        column: String,
        expected: usize,
        got: usize,
    },
    #[error("frame has no rows")]
    EmptyFrame,
    #[error("grad1 requires time-ordered data")]
    NotTimeOrdered,
}
