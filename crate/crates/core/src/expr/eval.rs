use std::collections::HashMap;

use super::{BinOp, EvalError, Expr, Func, Skeleton};
use crate::evaluation::gradient_unchecked;

/// Read-only view of equal-length named columns, optionally carrying the
/// time ordinate that enables `grad1`.
#[derive(Debug, Clone)]
pub struct Frame<'a> {
    columns: HashMap<&'a str, &'a [f64]>,
    len: usize,
    time: Option<&'a [f64]>,
}

impl<'a> Frame<'a> {
    pub fn new<I>(columns: I) -> Result<Frame<'a>, EvalError>
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
    {
        let mut map = HashMap::new();
        let mut len = None;
        for (name, values) in columns {
            match len {
                None => len = Some(values.len()),
                Some(n) if n != values.len() => {
                    return Err(EvalError::LengthMismatch {
                        column: name.to_string(),
                        expected: n,
                        got: values.len(),
                    })
                }
                _ => {}
            }
            map.insert(name, values);
        }
        let len = len.unwrap_or(0);
        if len == 0 {
            return Err(EvalError::EmptyFrame);
        }
        Ok(Frame {
            columns: map,
            len,
            time: None,
        })
    }

    /// Attaches the sampling-time ordinate; rows must already be in time order.
    pub fn with_time(mut self, ordinate: &'a [f64]) -> Result<Frame<'a>, EvalError> {
        if ordinate.len() != self.len {
            return Err(EvalError::LengthMismatch {
                column: "<time>".into(),
                expected: self.len,
                got: ordinate.len(),
            });
        }
        self.time = Some(ordinate);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn column(&self, name: &str) -> Option<&'a [f64]> {
        self.columns.get(name).copied()
    }

    pub fn is_time_ordered(&self) -> bool {
        self.time.is_some()
    }
}

/// Evaluates a skeleton row-wise. Domain violations produce non-finite
/// entries rather than errors.
pub fn evaluate(skeleton: &Skeleton, params: &[f64], frame: &Frame<'_>) -> Result<Vec<f64>, EvalError> {
    if params.len() != skeleton.param_count {
        return Err(EvalError::ArityMismatch {
            expected: skeleton.param_count,
            got: params.len(),
        });
    }
    for name in &skeleton.variables {
        if frame.column(name).is_none() {
            return Err(EvalError::MissingVariable(name.clone()));
        }
    }
    eval_node(&skeleton.root, params, frame)
}

fn eval_node(node: &Expr, params: &[f64], frame: &Frame<'_>) -> Result<Vec<f64>, EvalError> {
    let n = frame.len;
    Ok(match node {
        Expr::Const(v) => vec![*v; n],
        Expr::Param(i) => {
            let value = *params.get(*i).ok_or(EvalError::ArityMismatch {
                expected: i + 1,
                got: params.len(),
            })?;
            vec![value; n]
        }
        Expr::Var(name) => frame
            .column(name)
            .ok_or_else(|| EvalError::MissingVariable(name.clone()))?
            .to_vec(),
        Expr::Neg(inner) => {
            let mut v = eval_node(inner, params, frame)?;
            v.iter_mut().for_each(|x| *x = -*x);
            v
        }
        Expr::Binary(op, lhs, rhs) => {
            let mut l = eval_node(lhs, params, frame)?;
            let r = eval_node(rhs, params, frame)?;
            let f: fn(f64, f64) -> f64 = match op {
                BinOp::Add => |a, b| a + b,
                BinOp::Sub => |a, b| a - b,
                BinOp::Mul => |a, b| a * b,
                BinOp::Div => |a, b| a / b,
                BinOp::Pow => f64::powf,
            };
            l.iter_mut().zip(&r).for_each(|(a, b)| *a = f(*a, *b));
            l
        }
        Expr::Call(func, args) => {
            let mut first = eval_node(&args[0], params, frame)?;
            match func {
                Func::Min2 | Func::Max2 => {
                    let second = eval_node(&args[1], params, frame)?;
                    let pick_min = *func == Func::Min2;
                    first.iter_mut().zip(&second).for_each(|(a, b)| {
                        *a = if a.is_nan() || b.is_nan() {
                            f64::NAN
                        } else if pick_min {
                            a.min(*b)
                        } else {
                            a.max(*b)
                        }
                    });
                    first
                }
                Func::Grad1 => {
                    let time = frame.time.ok_or(EvalError::NotTimeOrdered)?;
                    if n < 2 {
                        vec![f64::NAN; n]
                    } else {
                        gradient_unchecked(&first, time)
                    }
                }
                unary => {
                    let f: fn(f64) -> f64 = match unary {
                        Func::Sin => f64::sin,
                        Func::Cos => f64::cos,
                        Func::Tan => f64::tan,
                        Func::Exp => f64::exp,
                        Func::Log => f64::ln,
                        Func::Sqrt => f64::sqrt,
                        Func::Abs => f64::abs,
                        Func::Tanh => f64::tanh,
                        _ => unreachable!("binary and gradient functions handled above"),
                    };
                    first.iter_mut().for_each(|x| *x = f(*x));
                    first
                }
            }
        }
    })
}
