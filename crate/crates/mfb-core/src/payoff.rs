//! Payoff expression language shared by the pricer, the dual trainer and the
//! LP oracle.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := NUMBER | 'x'INT | fncall | '(' expr ')' ['^+']
//! fncall := ('max' | 'min' | 'sum' | 'avg' | 'pos') '(' expr (',' expr)* ')'
//! ```
//!
//! `(e)^+` is sugar for `pos(e)`. A leading `-` on a factor is accepted as
//! unary minus so that negative constants print and re-parse cleanly.
//! Asset variables are 1-based in text (`x1` is the first column) and every
//! expression is bound to a fixed market dimension at parse time.
//!
//! Printing is canonical: minimal parentheses, `.`-decimal numbers, `pos`
//! rendered as `(...)^+`. Canonical text re-parses to a structurally
//! identical tree, and printing is idempotent.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Expression tree. Variables hold 0-based column indices.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Max(Vec<Expr>),
    Min(Vec<Expr>),
    Sum(Vec<Expr>),
    Avg(Vec<Expr>),
    Pos(Box<Expr>),
}

/// A payoff bound to a market dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffExpr {
    root: Expr,
    dim: usize,
}

/// Payoff families used by the experiment definitions and config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinKind {
    CallOnMax,
    CallOnMin,
    PutOnMin,
    BasketCall,
    VanillaCall,
    VanillaPut,
}

impl PayoffExpr {
    /// Parse `text` and bind it to a `d`-asset market.
    pub fn parse(text: &str, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput(
                "payoffs must bind to at least one asset".into(),
            ));
        }
        let tokens = lex(text)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            dim: d,
        };
        let root = p.expr()?;
        match p.peek() {
            Token::Eof => Ok(PayoffExpr { root, dim: d }),
            t => Err(Error::PayoffParse {
                offset: p.offset(),
                msg: format!("unexpected {}", t.describe()),
            }),
        }
    }

    /// Constant payoff `c` on a `d`-asset market.
    pub fn constant(d: usize, c: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput(
                "payoffs must bind to at least one asset".into(),
            ));
        }
        if !c.is_finite() {
            return Err(Error::InvalidInput(format!(
                "constant payoff must be finite, got {c}"
            )));
        }
        Ok(PayoffExpr {
            root: Expr::Const(c),
            dim: d,
        })
    }

    /// Market dimension the expression is bound to.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Root of the expression tree.
    pub fn root(&self) -> &Expr {
        &self.root
    }

    /// Canonical text form.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        write_expr(&self.root, 0, &mut out);
        out
    }

    /// Evaluate on a batch (rows = samples, columns = assets).
    pub fn eval_batch(&self, data: &ArrayView2<f64>) -> Result<Array1<f64>> {
        if data.ncols() != self.dim {
            return Err(Error::InvalidInput(format!(
                "payoff is bound to {} assets but the batch has {} columns",
                self.dim,
                data.ncols()
            )));
        }
        eval_node(&self.root, data)
    }

    /// Evaluate a single joint sample.
    pub fn eval_row(&self, row: &[f64]) -> Result<f64> {
        let view = ArrayView2::from_shape((1, row.len()), row)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(self.eval_batch(&view)?[0])
    }
}

impl std::fmt::Display for PayoffExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_canonical_string())
    }
}

impl Serialize for PayoffExpr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_canonical_string())
    }
}

/// Construct a standard instrument payoff.
///
/// `assets` are 1-based indices into a `d`-asset market. Selector builtins
/// collapse a single-asset list to the bare variable, so e.g. a call-on-max
/// over `{2}` is structurally a vanilla call on `x2`.
pub fn builtin(d: usize, kind: BuiltinKind, assets: &[usize], strike: f64) -> Result<PayoffExpr> {
    if assets.is_empty() {
        return Err(Error::InvalidInput(
            "builtin payoffs need at least one asset".into(),
        ));
    }
    if !strike.is_finite() {
        return Err(Error::InvalidInput(format!(
            "strike must be finite, got {strike}"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for &a in assets {
        if a == 0 || a > d {
            return Err(Error::PayoffBinding(format!(
                "asset x{a} referenced but the market has {d} assets"
            )));
        }
        if !seen.insert(a) {
            return Err(Error::InvalidInput(format!(
                "asset x{a} listed twice in a builtin payoff"
            )));
        }
    }
    if matches!(kind, BuiltinKind::VanillaCall | BuiltinKind::VanillaPut) && assets.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "vanilla payoffs take exactly one asset, got {}",
            assets.len()
        )));
    }
    let vars: Vec<Expr> = assets.iter().map(|&a| Expr::Var(a - 1)).collect();
    let selector = |wrap: fn(Vec<Expr>) -> Expr, vars: Vec<Expr>| -> Expr {
        if vars.len() == 1 {
            vars.into_iter().next().unwrap()
        } else {
            wrap(vars)
        }
    };
    let k = Expr::Const(strike);
    let root = match kind {
        BuiltinKind::CallOnMax => Expr::Pos(Box::new(Expr::Sub(
            Box::new(selector(Expr::Max, vars)),
            Box::new(k),
        ))),
        BuiltinKind::CallOnMin => Expr::Pos(Box::new(Expr::Sub(
            Box::new(selector(Expr::Min, vars)),
            Box::new(k),
        ))),
        BuiltinKind::PutOnMin => Expr::Pos(Box::new(Expr::Sub(
            Box::new(k),
            Box::new(selector(Expr::Min, vars)),
        ))),
        BuiltinKind::BasketCall => Expr::Pos(Box::new(Expr::Sub(
            Box::new(selector(Expr::Avg, vars)),
            Box::new(k),
        ))),
        BuiltinKind::VanillaCall => Expr::Pos(Box::new(Expr::Sub(
            Box::new(vars.into_iter().next().unwrap()),
            Box::new(k),
        ))),
        BuiltinKind::VanillaPut => Expr::Pos(Box::new(Expr::Sub(
            Box::new(k),
            Box::new(vars.into_iter().next().unwrap()),
        ))),
    };
    Ok(PayoffExpr { root, dim: d })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn eval_node(e: &Expr, data: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let n = data.nrows();
    Ok(match e {
        Expr::Const(c) => Array1::from_elem(n, *c),
        Expr::Var(j) => data.column(*j).to_owned(),
        Expr::Add(a, b) => eval_node(a, data)? + eval_node(b, data)?,
        Expr::Sub(a, b) => eval_node(a, data)? - eval_node(b, data)?,
        Expr::Mul(a, b) => eval_node(a, data)? * eval_node(b, data)?,
        Expr::Div(a, b) => {
            let num = eval_node(a, data)?;
            let den = eval_node(b, data)?;
            if let Some(row) = den.iter().position(|&v| v == 0.0) {
                return Err(Error::PayoffEval {
                    row,
                    msg: "division by zero".into(),
                });
            }
            num / &den
        }
        Expr::Max(args) => fold_elementwise(args, data, f64::max)?,
        Expr::Min(args) => fold_elementwise(args, data, f64::min)?,
        Expr::Sum(args) => {
            let mut acc = eval_node(&args[0], data)?;
            for a in &args[1..] {
                acc += &eval_node(a, data)?;
            }
            acc
        }
        Expr::Avg(args) => {
            let mut acc = eval_node(&args[0], data)?;
            for a in &args[1..] {
                acc += &eval_node(a, data)?;
            }
            acc / args.len() as f64
        }
        Expr::Pos(a) => {
            let mut v = eval_node(a, data)?;
            v.mapv_inplace(|x| x.max(0.0));
            v
        }
    })
}

fn fold_elementwise(
    args: &[Expr],
    data: &ArrayView2<f64>,
    f: fn(f64, f64) -> f64,
) -> Result<Array1<f64>> {
    let mut acc = eval_node(&args[0], data)?;
    for a in &args[1..] {
        let next = eval_node(a, data)?;
        azip_inplace(&mut acc, &next, f);
    }
    Ok(acc)
}

fn azip_inplace(acc: &mut Array1<f64>, other: &Array1<f64>, f: fn(f64, f64) -> f64) {
    for (a, &b) in acc.iter_mut().zip(other.iter()) {
        *a = f(*a, b);
    }
}

// ---------------------------------------------------------------------------
// Canonical printing
// ---------------------------------------------------------------------------

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) | Expr::Div(..) => 2,
        _ => 3,
    }
}

fn write_expr(e: &Expr, min_prec: u8, out: &mut String) {
    let wrap = prec(e) < min_prec;
    if wrap {
        out.push('(');
    }
    match e {
        Expr::Const(c) => {
            // f64 Display is shortest-round-trip plain decimal, so canonical
            // numbers always re-lex under the grammar.
            out.push_str(&format!("{c}"));
        }
        Expr::Var(j) => out.push_str(&format!("x{}", j + 1)),
        Expr::Add(a, b) => {
            write_expr(a, 1, out);
            out.push_str(" + ");
            write_expr(b, 2, out);
        }
        Expr::Sub(a, b) => {
            write_expr(a, 1, out);
            out.push_str(" - ");
            write_expr(b, 2, out);
        }
        Expr::Mul(a, b) => {
            write_expr(a, 2, out);
            out.push_str(" * ");
            write_expr(b, 3, out);
        }
        Expr::Div(a, b) => {
            write_expr(a, 2, out);
            out.push_str(" / ");
            write_expr(b, 3, out);
        }
        Expr::Max(args) => write_call("max", args, out),
        Expr::Min(args) => write_call("min", args, out),
        Expr::Sum(args) => write_call("sum", args, out),
        Expr::Avg(args) => write_call("avg", args, out),
        Expr::Pos(a) => {
            out.push('(');
            write_expr(a, 0, out);
            out.push_str(")^+");
        }
    }
    if wrap {
        out.push(')');
    }
}

fn write_call(name: &str, args: &[Expr], out: &mut String) {
    out.push_str(name);
    out.push('(');
    for (i, a) in args.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write_expr(a, 0, out);
    }
    out.push(')');
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Var(usize), // 1-based as written
    Name(String),
    LParen,
    RParen,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    PosTag, // "^+"
    Eof,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Num(v) => format!("number {v}"),
            Token::Var(i) => format!("variable x{i}"),
            Token::Name(n) => format!("name '{n}'"),
            Token::LParen => "'('".into(),
            Token::RParen => "')'".into(),
            Token::Comma => "','".into(),
            Token::Plus => "'+'".into(),
            Token::Minus => "'-'".into(),
            Token::Star => "'*'".into(),
            Token::Slash => "'/'".into(),
            Token::PosTag => "'^+'".into(),
            Token::Eof => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Token, usize)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'(' => {
                out.push((Token::LParen, i));
                i += 1;
            }
            b')' => {
                out.push((Token::RParen, i));
                i += 1;
            }
            b',' => {
                out.push((Token::Comma, i));
                i += 1;
            }
            b'+' => {
                out.push((Token::Plus, i));
                i += 1;
            }
            b'-' => {
                out.push((Token::Minus, i));
                i += 1;
            }
            b'*' => {
                out.push((Token::Star, i));
                i += 1;
            }
            b'/' => {
                out.push((Token::Slash, i));
                i += 1;
            }
            b'^' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b'+' {
                    out.push((Token::PosTag, i));
                    i += 2;
                } else {
                    return Err(Error::PayoffParse {
                        offset: i,
                        msg: "'^' must be followed by '+'".into(),
                    });
                }
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    if i >= bytes.len() || !bytes[i].is_ascii_digit() {
                        return Err(Error::PayoffParse {
                            offset: i.min(bytes.len()),
                            msg: "expected digits after decimal point".into(),
                        });
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let lit = &text[start..i];
                let v: f64 = lit.parse().map_err(|_| Error::PayoffParse {
                    offset: start,
                    msg: format!("invalid number '{lit}'"),
                })?;
                if !v.is_finite() {
                    return Err(Error::PayoffParse {
                        offset: start,
                        msg: format!("number '{lit}' is out of range"),
                    });
                }
                out.push((Token::Num(v), start));
            }
            b'a'..=b'z' | b'A'..=b'Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = &text[start..i];
                if let Some(rest) = word.strip_prefix('x') {
                    if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                        let idx: usize = rest.parse().map_err(|_| Error::PayoffParse {
                            offset: start,
                            msg: format!("variable index '{rest}' is out of range"),
                        })?;
                        out.push((Token::Var(idx), start));
                        continue;
                    }
                }
                out.push((Token::Name(word.to_string()), start));
            }
            _ => {
                return Err(Error::PayoffParse {
                    offset: i,
                    msg: format!("unexpected character '{}'", text[i..].chars().next().unwrap()),
                });
            }
        }
    }
    out.push((Token::Eof, bytes.len()));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos].0
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].1
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].0.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: &Token, what: &str) -> Result<()> {
        if self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(Error::PayoffParse {
                offset: self.offset(),
                msg: format!("expected {what}, found {}", self.peek().describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Token::Plus => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Token::Minus => {
                    self.bump();
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
                Token::Star => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Token::Slash => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        if *self.peek() == Token::Minus {
            // Unary minus: folds into a constant when possible, otherwise
            // desugars to (0 - e).
            self.bump();
            let inner = self.factor()?;
            return Ok(match inner {
                Expr::Const(c) => Expr::Const(-c),
                e => Expr::Sub(Box::new(Expr::Const(0.0)), Box::new(e)),
            });
        }
        let offset = self.offset();
        match self.bump() {
            Token::Num(v) => Ok(Expr::Const(v)),
            Token::Var(idx) => {
                if idx == 0 || idx > self.dim {
                    Err(Error::PayoffBinding(format!(
                        "asset x{idx} referenced at offset {offset} but the market has {} assets",
                        self.dim
                    )))
                } else {
                    Ok(Expr::Var(idx - 1))
                }
            }
            Token::Name(name) => self.fncall(&name, offset),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect(&Token::RParen, "')'")?;
                if *self.peek() == Token::PosTag {
                    self.bump();
                    Ok(Expr::Pos(Box::new(inner)))
                } else {
                    Ok(inner)
                }
            }
            t => Err(Error::PayoffParse {
                offset,
                msg: format!("expected a number, variable, function or '(', found {}", t.describe()),
            }),
        }
    }

    fn fncall(&mut self, name: &str, offset: usize) -> Result<Expr> {
        let known = matches!(name, "max" | "min" | "sum" | "avg" | "pos");
        if !known {
            return Err(Error::PayoffParse {
                offset,
                msg: format!("unknown function '{name}'"),
            });
        }
        self.expect(&Token::LParen, "'(' after function name")?;
        let mut args = vec![self.expr()?];
        while *self.peek() == Token::Comma {
            self.bump();
            args.push(self.expr()?);
        }
        let close_offset = self.offset();
        self.expect(&Token::RParen, "')' or ','")?;
        if name == "pos" && args.len() != 1 {
            return Err(Error::PayoffParse {
                offset: close_offset,
                msg: format!("pos takes exactly one argument, got {}", args.len()),
            });
        }
        Ok(match name {
            "max" => Expr::Max(args),
            "min" => Expr::Min(args),
            "sum" => Expr::Sum(args),
            "avg" => Expr::Avg(args),
            "pos" => Expr::Pos(Box::new(args.into_iter().next().unwrap())),
            _ => unreachable!(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn parse3(text: &str) -> PayoffExpr {
        PayoffExpr::parse(text, 3).unwrap()
    }

    #[test]
    fn call_on_max_parses_to_expected_tree() {
        let p = parse3("(max(x1, x2, x3) - 6)^+");
        let expected = Expr::Pos(Box::new(Expr::Sub(
            Box::new(Expr::Max(vec![Expr::Var(0), Expr::Var(1), Expr::Var(2)])),
            Box::new(Expr::Const(6.0)),
        )));
        assert_eq!(*p.root(), expected);
    }

    #[test]
    fn eval_matches_hand_values() {
        let p = parse3("(max(x1, x2, x3) - 6)^+");
        assert_eq!(p.eval_row(&[10.0, 8.0, 5.0]).unwrap(), 4.0);
        assert_eq!(p.eval_row(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn basket_weights_are_uniform() {
        let p = PayoffExpr::parse("(avg(x1, x2, x3, x4, x5, x6) - 2)^+", 6).unwrap();
        let v = p.eval_row(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((v - (3.5 - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn unknown_asset_is_a_binding_error_with_index() {
        let err = PayoffExpr::parse("x7 - 1", 3).unwrap_err();
        match err {
            Error::PayoffBinding(msg) => {
                assert!(msg.contains("x7"), "message should name the asset: {msg}");
                assert!(msg.contains('3'), "message should name the dimension: {msg}");
            }
            other => panic!("expected a binding error, got {other:?}"),
        }
        assert!(matches!(
            PayoffExpr::parse("x0", 3).unwrap_err(),
            Error::PayoffBinding(_)
        ));
    }

    #[test]
    fn parse_errors_carry_offsets() {
        match PayoffExpr::parse("max(x1,", 3).unwrap_err() {
            Error::PayoffParse { offset, .. } => assert_eq!(offset, 7),
            other => panic!("unexpected {other:?}"),
        }
        match PayoffExpr::parse("x1 ^+", 3).unwrap_err() {
            Error::PayoffParse { offset, .. } => assert_eq!(offset, 3),
            other => panic!("unexpected {other:?}"),
        }
        match PayoffExpr::parse("max(x1)^+", 3).unwrap_err() {
            // The grammar allows '^+' only after a parenthesized group.
            Error::PayoffParse { offset, .. } => assert_eq!(offset, 7),
            other => panic!("unexpected {other:?}"),
        }
        match PayoffExpr::parse("2 $ 3", 3).unwrap_err() {
            Error::PayoffParse { offset, .. } => assert_eq!(offset, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn division_by_zero_identifies_the_row() {
        let p = PayoffExpr::parse("x1 / (x2 - 1)", 2).unwrap();
        let data = array![[1.0, 2.0], [1.0, 1.0], [1.0, 3.0]];
        match p.eval_batch(&data.view()).unwrap_err() {
            Error::PayoffEval { row, .. } => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn builtins_match_parsed_text() {
        let cases: Vec<(PayoffExpr, &str)> = vec![
            (
                builtin(3, BuiltinKind::CallOnMax, &[1, 2], 6.0).unwrap(),
                "(max(x1, x2) - 6)^+",
            ),
            (
                builtin(3, BuiltinKind::CallOnMin, &[1, 2, 3], 7.5).unwrap(),
                "(min(x1, x2, x3) - 7.5)^+",
            ),
            (
                builtin(3, BuiltinKind::PutOnMin, &[2, 3], 6.75).unwrap(),
                "(6.75 - min(x2, x3))^+",
            ),
            (
                builtin(6, BuiltinKind::BasketCall, &[1, 2, 3, 5, 6], 6.6).unwrap(),
                "(avg(x1, x2, x3, x5, x6) - 6.6)^+",
            ),
            (
                builtin(3, BuiltinKind::VanillaCall, &[2], 5.0).unwrap(),
                "(x2 - 5)^+",
            ),
            (
                builtin(3, BuiltinKind::VanillaPut, &[1], 12.0).unwrap(),
                "(12 - x1)^+",
            ),
        ];
        for (expr, text) in cases {
            let dim = expr.dim();
            assert_eq!(expr.to_canonical_string(), text);
            assert_eq!(expr, PayoffExpr::parse(text, dim).unwrap());
        }
    }

    #[test]
    fn single_asset_call_on_max_degrades_to_vanilla() {
        let a = builtin(3, BuiltinKind::CallOnMax, &[2], 6.0).unwrap();
        let b = builtin(3, BuiltinKind::VanillaCall, &[2], 6.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_strike_call_is_the_identity_on_the_column() {
        let c = builtin(2, BuiltinKind::VanillaCall, &[2], 0.0).unwrap();
        let data = array![[3.0, 7.0], [1.0, 0.25]];
        let v = c.eval_batch(&data.view()).unwrap();
        assert_eq!(v[0], 7.0);
        assert_eq!(v[1], 0.25);
    }

    #[test]
    fn builtin_rejects_bad_asset_lists() {
        assert!(builtin(3, BuiltinKind::CallOnMax, &[], 6.0).is_err());
        assert!(builtin(3, BuiltinKind::CallOnMax, &[4], 6.0).is_err());
        assert!(builtin(3, BuiltinKind::CallOnMax, &[0], 6.0).is_err());
        assert!(builtin(3, BuiltinKind::CallOnMax, &[1, 1], 6.0).is_err());
        assert!(builtin(3, BuiltinKind::VanillaCall, &[1, 2], 6.0).is_err());
        assert!(builtin(3, BuiltinKind::CallOnMax, &[1], f64::NAN).is_err());
    }

    #[test]
    fn corpus_round_trips_and_prints_idempotently() {
        let corpus = include_str!("../tests/fixtures/payoff_corpus.txt");
        let mut count = 0;
        for line in corpus.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            count += 1;
            let first = PayoffExpr::parse(line, 6)
                .unwrap_or_else(|e| panic!("corpus line '{line}' failed: {e}"));
            let printed = first.to_canonical_string();
            let second = PayoffExpr::parse(&printed, 6)
                .unwrap_or_else(|e| panic!("canonical '{printed}' failed: {e}"));
            assert_eq!(first, second, "reparse changed the tree for '{line}'");
            assert_eq!(
                printed,
                second.to_canonical_string(),
                "printing is not idempotent for '{line}'"
            );
        }
        assert!(count >= 30, "corpus has only {count} expressions");
    }

    #[test]
    fn negative_constants_print_and_reparse() {
        let p = PayoffExpr::constant(3, -3.0).unwrap();
        assert_eq!(p.to_canonical_string(), "-3");
        assert_eq!(PayoffExpr::parse("-3", 3).unwrap(), p);
        // Unary minus on a non-constant desugars to (0 - e) and stays stable.
        let q = PayoffExpr::parse("-(x1 + 1)", 3).unwrap();
        assert_eq!(q.to_canonical_string(), "0 - (x1 + 1)");
        assert_eq!(PayoffExpr::parse("0 - (x1 + 1)", 3).unwrap(), q);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_expr(depth: u32) -> BoxedStrategy<Expr> {
            let leaf = prop_oneof![
                (0usize..4).prop_map(Expr::Var),
                (-50.0f64..50.0).prop_map(|c| Expr::Const((c * 16.0).round() / 16.0)),
                any::<f64>()
                    .prop_filter("finite", |v| v.is_finite() && v.abs() < 1e9)
                    .prop_map(Expr::Const),
            ];
            if depth == 0 {
                return leaf.boxed();
            }
            let sub = arb_expr(depth - 1);
            prop_oneof![
                leaf,
                (sub.clone(), sub.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (sub.clone(), sub.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (sub.clone(), sub.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (sub.clone(), sub.clone()).prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
                prop::collection::vec(sub.clone(), 1..4).prop_map(Expr::Max),
                prop::collection::vec(sub.clone(), 1..4).prop_map(Expr::Min),
                prop::collection::vec(sub.clone(), 1..4).prop_map(Expr::Sum),
                prop::collection::vec(sub.clone(), 1..4).prop_map(Expr::Avg),
                sub.clone().prop_map(|a| Expr::Pos(Box::new(a))),
            ]
            .boxed()
        }

        proptest! {
            #[test]
            fn printing_reparses_to_the_same_tree(root in arb_expr(4)) {
                let expr = PayoffExpr { root, dim: 4 };
                let printed = expr.to_canonical_string();
                let back = PayoffExpr::parse(&printed, 4).unwrap();
                prop_assert_eq!(&expr, &back);
                prop_assert_eq!(printed, back.to_canonical_string());
            }

            #[test]
            fn builtin_payoffs_are_positively_homogeneous(
                strike in 0.5f64..20.0,
                lambda in 0.1f64..10.0,
                x in prop::collection::vec(0.01f64..40.0, 3),
            ) {
                for kind in [
                    BuiltinKind::CallOnMax,
                    BuiltinKind::CallOnMin,
                    BuiltinKind::PutOnMin,
                    BuiltinKind::BasketCall,
                    BuiltinKind::VanillaCall,
                ] {
                    let assets: &[usize] = if kind == BuiltinKind::VanillaCall {
                        &[1]
                    } else {
                        &[1, 2, 3]
                    };
                    let base = builtin(3, kind, assets, strike).unwrap();
                    let scaled = builtin(3, kind, assets, lambda * strike).unwrap();
                    let row: Vec<f64> = x.clone();
                    let scaled_row: Vec<f64> = x.iter().map(|v| lambda * v).collect();
                    let lhs = scaled.eval_row(&scaled_row).unwrap();
                    let rhs = lambda * base.eval_row(&row).unwrap();
                    prop_assert!(
                        (lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()),
                        "kind {:?}: {} vs {}", kind, lhs, rhs
                    );
                }
            }

            #[test]
            fn call_on_max_is_dominated_by_vanilla_sum(
                strike in 0.0f64..20.0,
                x in prop::collection::vec(0.01f64..40.0, 3),
            ) {
                let com = builtin(3, BuiltinKind::CallOnMax, &[1, 2, 3], strike).unwrap();
                let mut vanilla_sum = 0.0;
                for a in 1..=3 {
                    vanilla_sum += builtin(3, BuiltinKind::VanillaCall, &[a], strike)
                        .unwrap()
                        .eval_row(&x)
                        .unwrap();
                }
                prop_assert!(com.eval_row(&x).unwrap() <= vanilla_sum + 1e-12);
            }
        }
    }
}
