use super::{BinOp, Expr, Skeleton};

const UNARY_PREC: u8 = 3;
const ATOM_PREC: u8 = 5;

/// Canonical text: single spaces around binary operators, minimal parentheses.
pub fn print(skeleton: &Skeleton) -> String {
    print_expr(&skeleton.root)
}

pub(crate) fn print_expr(expr: &Expr) -> String {
    let mut out = String::new();
    write_expr(expr, &mut out);
    out
}

fn precedence(expr: &Expr) -> u8 {
    match expr {
        Expr::Const(v) if v.is_sign_negative() => UNARY_PREC,
        Expr::Const(_) | Expr::Param(_) | Expr::Var(_) | Expr::Call(..) => ATOM_PREC,
        Expr::Neg(_) => UNARY_PREC,
        Expr::Binary(op, _, _) => op.precedence(),
    }
}

fn format_number(v: f64) -> String {
    let magnitude = v.abs();
    if magnitude == 0.0 || (1e-5..1e16).contains(&magnitude) {
        format!("{v}")
    } else {
        format!("{v:?}")
    }
}

fn write_wrapped(expr: &Expr, wrap: bool, out: &mut String) {
    if wrap {
        out.push('(');
        write_expr(expr, out);
        out.push(')');
    } else {
        write_expr(expr, out);
    }
}

fn write_expr(expr: &Expr, out: &mut String) {
    match expr {
        Expr::Const(v) => out.push_str(&format_number(*v)),
        Expr::Param(i) => {
            out.push('c');
            out.push_str(&i.to_string());
        }
        Expr::Var(name) => out.push_str(name),
        Expr::Neg(inner) => {
            out.push('-');
            // A bare non-negative literal after `-` would re-parse as a negative constant.
            let wrap = match inner.as_ref() {
                Expr::Const(v) => !v.is_sign_negative(),
                other => precedence(other) < UNARY_PREC,
            };
            write_wrapped(inner, wrap, out);
        }
        Expr::Binary(op, lhs, rhs) => {
            let prec = op.precedence();
            let (wrap_l, wrap_r) = if *op == BinOp::Pow {
                (precedence(lhs) <= prec, precedence(rhs) < UNARY_PREC)
            } else {
                (precedence(lhs) < prec, precedence(rhs) <= prec)
            };
            write_wrapped(lhs, wrap_l, out);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            write_wrapped(rhs, wrap_r, out);
        }
        Expr::Call(func, args) => {
            out.push_str(func.name());
            out.push('(');
            for (i, arg) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(arg, out);
            }
            out.push(')');
        }
    }
}
