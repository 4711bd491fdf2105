use std::collections::BTreeSet;

use super::{BinOp, Expr, ExprError, Func, Skeleton, DEFAULT_MAX_NODES, MAX_SOURCE_BYTES};

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub max_nodes: usize,
    pub max_depth: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            max_nodes: DEFAULT_MAX_NODES,
            max_depth: 256,
        }
    }
}

/// Parses expression text with the default node cap.
pub fn parse(text: &str) -> Result<Skeleton, ExprError> {
    parse_with(text, ParseOptions::default())
}

pub fn parse_with(text: &str, options: ParseOptions) -> Result<Skeleton, ExprError> {
    if text.len() > MAX_SOURCE_BYTES {
        return Err(ExprError::LimitExceeded(format!(
            "source is {} bytes, limit is {MAX_SOURCE_BYTES}",
            text.len()
        )));
    }
    if text.trim().is_empty() {
        return Err(ExprError::Empty);
    }
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        depth: 0,
        nodes: 0,
        options,
    };
    let mut root = parser.expr()?;
    parser.expect_end()?;
    compact_params(&mut root);
    Ok(Skeleton {
        variables: root.variables(),
        param_count: root.param_count(),
        root,
        source_text: text.to_string(),
    })
}

/// Renumbers parameters so the used indices become 0..P-1, preserving order.
fn compact_params(root: &mut Expr) {
    let mut used = BTreeSet::new();
    root.walk(&mut |node| {
        if let Expr::Param(i) = node {
            used.insert(*i);
        }
    });
    if used.iter().copied().eq(0..used.len()) {
        return;
    }
    let order: Vec<usize> = used.into_iter().collect();
    renumber(root, &order);
}

fn renumber(node: &mut Expr, order: &[usize]) {
    match node {
        Expr::Param(i) => *i = order.binary_search(i).expect("collected index"),
        Expr::Const(_) | Expr::Var(_) => {}
        Expr::Neg(inner) => renumber(inner, order),
        Expr::Binary(_, l, r) => {
            renumber(l, order);
            renumber(r, order);
        }
        Expr::Call(_, args) => args.iter_mut().for_each(|a| renumber(a, order)),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(name) => format!("identifier `{name}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
        }
    }
}

struct Spanned {
    tok: Tok,
    /// 1-based column of the first character.
    column: usize,
}

fn tokenize(text: &str) -> Result<Vec<Spanned>, ExprError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let literal: String = chars[start..i].iter().collect();
            let value: f64 = literal.parse().map_err(|_| ExprError::Syntax {
                position: column,
                expected: vec!["number".into()],
                found: format!("`{literal}`"),
            })?;
            if !value.is_finite() {
                return Err(ExprError::LimitExceeded(format!(
                    "numeric literal `{literal}` is not finite"
                )));
            }
            out.push(Spanned {
                tok: Tok::Num(value),
                column,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Spanned {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                column,
            });
            continue;
        }
        let tok = match c {
            '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            other => {
                return Err(ExprError::Syntax {
                    position: column,
                    expected: vec!["operator".into(), "operand".into()],
                    found: format!("`{other}`"),
                })
            }
        };
        out.push(Spanned { tok, column });
        i += 1;
    }
    // End-of-input sentinel position.
    let end = chars.len() + 1;
    out.push(Spanned {
        tok: Tok::Op('\0'),
        column: end,
    });
    Ok(out)
}

fn param_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('c')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
    depth: usize,
    nodes: usize,
    options: ParseOptions,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn column(&self) -> usize {
        self.tokens[self.pos].column
    }

    fn at_end(&self) -> bool {
        self.pos == self.tokens.len() - 1
    }

    fn found(&self) -> String {
        if self.at_end() {
            "end of input".into()
        } else {
            self.peek().describe()
        }
    }

    fn error(&self, expected: &[&str]) -> ExprError {
        ExprError::Syntax {
            position: self.column(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: self.found(),
        }
    }

    fn bump(&mut self) {
        if !self.at_end() {
            self.pos += 1;
        }
    }

    fn node(&mut self, expr: Expr) -> Result<Expr, ExprError> {
        self.nodes += 1;
        if self.nodes > self.options.max_nodes {
            return Err(ExprError::LimitExceeded(format!(
                "more than {} nodes",
                self.options.max_nodes
            )));
        }
        Ok(expr)
    }

    fn enter(&mut self) -> Result<(), ExprError> {
        self.depth += 1;
        if self.depth > self.options.max_depth {
            return Err(ExprError::LimitExceeded(format!(
                "nesting deeper than {}",
                self.options.max_depth
            )));
        }
        Ok(())
    }

    fn expect_end(&self) -> Result<(), ExprError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.error(&["operator", "end of input"]))
        }
    }

    fn op_here(&self, candidates: &[char]) -> Option<char> {
        if self.at_end() {
            return None;
        }
        match self.peek() {
            Tok::Op(c) if candidates.contains(c) => Some(*c),
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        self.enter()?;
        let mut lhs = self.term()?;
        while let Some(c) = self.op_here(&['+', '-']) {
            self.bump();
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = self.node(Expr::binary(op, lhs, rhs))?;
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(c) = self.op_here(&['*', '/']) {
            self.bump();
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = self.node(Expr::binary(op, lhs, rhs))?;
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.op_here(&['-']).is_some() {
            self.enter()?;
            self.bump();
            let (operand, bare_literal) = self.unary_operand()?;
            self.depth -= 1;
            // `-2` is a negative literal; `-(2)` stays a negation node.
            return match operand {
                Expr::Const(v) if bare_literal => Ok(Expr::Const(-v)),
                other => self.node(Expr::neg(other)),
            };
        }
        self.power().map(|(e, _)| e)
    }

    fn unary_operand(&mut self) -> Result<(Expr, bool), ExprError> {
        if self.op_here(&['-']).is_some() {
            Ok((self.unary()?, false))
        } else {
            self.power()
        }
    }

    /// Returns the parsed power expression and whether it is a bare number.
    fn power(&mut self) -> Result<(Expr, bool), ExprError> {
        let (base, bare) = self.atom()?;
        if self.op_here(&['^']).is_some() {
            self.enter()?;
            self.bump();
            let exponent = self.unary()?;
            self.depth -= 1;
            return Ok((self.node(Expr::binary(BinOp::Pow, base, exponent))?, false));
        }
        Ok((base, bare))
    }

    fn atom(&mut self) -> Result<(Expr, bool), ExprError> {
        if self.at_end() {
            return Err(self.error(&["number", "identifier", "`(`", "`-`"]));
        }
        let column = self.column();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok((self.node(Expr::Const(v))?, true))
            }
            Tok::Ident(name) => {
                self.bump();
                if !self.at_end() && *self.peek() == Tok::LParen {
                    return Ok((self.call(&name, column)?, false));
                }
                let leaf = match param_index(&name) {
                    Some(i) => Expr::Param(i),
                    None => Expr::Var(name),
                };
                Ok((self.node(leaf)?, false))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                if self.at_end() || *self.peek() != Tok::RParen {
                    return Err(self.error(&["`)`", "operator"]));
                }
                self.bump();
                Ok((inner, false))
            }
            _ => Err(self.error(&["number", "identifier", "`(`", "`-`"])),
        }
    }

    fn call(&mut self, name: &str, column: usize) -> Result<Expr, ExprError> {
        let func = Func::from_name(name).ok_or_else(|| ExprError::UnknownFunction {
            name: name.to_string(),
            position: column,
        })?;
        self.enter()?;
        self.bump(); // '('
        let mut args = vec![self.expr()?];
        while !self.at_end() && *self.peek() == Tok::Comma {
            self.bump();
            args.push(self.expr()?);
        }
        if self.at_end() || *self.peek() != Tok::RParen {
            let expected: &[&str] = if args.len() < func.arity() {
                &["`,`"]
            } else {
                &["`)`"]
            };
            return Err(self.error(expected));
        }
        if args.len() != func.arity() {
            return Err(ExprError::Syntax {
                position: self.column(),
                expected: vec![format!("{} argument(s) to {}", func.arity(), func.name())],
                found: format!("{} argument(s)", args.len()),
            });
        }
        self.bump();
        self.depth -= 1;
        self.node(Expr::Call(func, args))
    }
}
