//! Algebraic metrics over distribution components, e.g.
//! `sidewalk / (sidewalk + road)`.
//!
//! Components are referenced by name, optionally with an `m_` prefix.
//! Division never fails: denominators smaller than [`DIV_GUARD`] in magnitude
//! are replaced by a sign-preserving `DIV_GUARD`, and the gradient treats the
//! guarded denominator as constant so it stays consistent with `eval`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DIV_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    pub(crate) fn new(offset: usize, message: impl Into<String>) -> Self {
        ParseError {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Component index.
    Var(usize),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

fn guard(d: f64) -> f64 {
    if d.abs() < DIV_GUARD {
        if d < 0.0 {
            -DIV_GUARD
        } else {
            DIV_GUARD
        }
    } else {
        d
    }
}

impl Expr {
    pub fn binary(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn eval(&self, m: &[f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => m[*i],
            Expr::Neg(e) => -e.eval(m),
            Expr::Binary(op, a, b) => {
                let (a, b) = (a.eval(m), b.eval(m));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / guard(b),
                }
            }
        }
    }

    /// Value and gradient with respect to every component.
    pub fn eval_grad(&self, m: &[f64]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; m.len()];
        let v = self.accumulate(m, 1.0, &mut g);
        (v, g)
    }

    pub fn grad(&self, m: &[f64]) -> Vec<f64> {
        self.eval_grad(m).1
    }

    /// Reverse-mode pass: adds `seed · ∂self/∂m` into `g` and returns the value.
    fn accumulate(&self, m: &[f64], seed: f64, g: &mut [f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => {
                g[*i] += seed;
                m[*i]
            }
            Expr::Neg(e) => -e.accumulate(m, -seed, g),
            Expr::Binary(op, a, b) => match op {
                BinOp::Add => a.accumulate(m, seed, g) + b.accumulate(m, seed, g),
                BinOp::Sub => a.accumulate(m, seed, g) - b.accumulate(m, -seed, g),
                BinOp::Mul => {
                    let (va, vb) = (a.eval(m), b.eval(m));
                    a.accumulate(m, seed * vb, g);
                    b.accumulate(m, seed * va, g);
                    va * vb
                }
                BinOp::Div => {
                    let raw = b.eval(m);
                    let d = guard(raw);
                    let va = a.accumulate(m, seed / d, g);
                    if raw.abs() >= DIV_GUARD {
                        b.accumulate(m, -seed * va / (d * d), g);
                    }
                    va / d
                }
            },
        }
    }

    /// Indices of referenced components, ascending and deduplicated.
    pub fn components(&self) -> Vec<usize> {
        fn walk(e: &Expr, out: &mut Vec<usize>) {
            match e {
                Expr::Num(_) => {}
                Expr::Var(i) => out.push(*i),
                Expr::Neg(e) => walk(e, out),
                Expr::Binary(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Source text that parses back to an equal tree.
    pub fn to_source(&self, names: &[String]) -> String {
        let mut s = String::new();
        self.write(names, &mut s);
        s
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Neg(_) => 3,
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 3,
            _ => 4,
        }
    }

    fn write(&self, names: &[String], out: &mut String) {
        use fmt::Write;
        let child = |e: &Expr, min: u8, out: &mut String| {
            if e.precedence() < min {
                out.push('(');
                e.write(names, out);
                out.push(')');
            } else {
                e.write(names, out);
            }
        };
        match self {
            Expr::Num(v) => {
                let _ = write!(out, "{v:?}");
            }
            Expr::Var(i) => out.push_str(&names[*i]),
            Expr::Neg(e) => {
                out.push('-');
                child(e, 3, out);
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                child(a, p, out);
                let _ = write!(out, " {} ", op.symbol());
                child(b, p + 1, out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(BinOp),
    Open,
    Close,
}

fn lex(src: &str) -> Result<Vec<(usize, Token)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' | b'-' | b'*' | b'/' => {
                let op = match c {
                    b'+' => BinOp::Add,
                    b'-' => BinOp::Sub,
                    b'*' => BinOp::Mul,
                    _ => BinOp::Div,
                };
                out.push((start, Token::Op(op)));
                i += 1;
            }
            b'(' => {
                out.push((start, Token::Open));
                i += 1;
            }
            b')' => {
                out.push((start, Token::Close));
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| ParseError::new(start, format!("malformed number '{text}'")))?;
                out.push((start, Token::Num(v)));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Token::Ident(src[start..i].to_string())));
            }
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                return Err(ParseError::new(start, format!("unexpected character '{ch}'")));
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
    names: &'a [String],
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ (BinOp::Add | BinOp::Sub))) = self.peek() {
            let op = *op;
            self.pos += 1;
            lhs = Expr::binary(op, lhs, self.term()?);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        while let Some(Token::Op(op @ (BinOp::Mul | BinOp::Div))) = self.peek() {
            let op = *op;
            self.pos += 1;
            lhs = Expr::binary(op, lhs, self.factor()?);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        let Some(tok) = self.peek().cloned() else {
            return Err(ParseError::new(offset, "expected an operand"));
        };
        self.pos += 1;
        match tok {
            Token::Op(BinOp::Sub) => Ok(Expr::Neg(Box::new(self.factor()?))),
            Token::Num(v) => Ok(Expr::Num(v)),
            Token::Ident(name) => resolve(&name, self.names)
                .map(Expr::Var)
                .ok_or_else(|| ParseError::new(offset, format!("unknown component '{name}'"))),
            Token::Open => {
                let inner = self.expr()?;
                match self.peek() {
                    Some(Token::Close) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    None => Err(ParseError::new(offset, "unbalanced parenthesis")),
                    Some(_) => Err(ParseError::new(self.offset(), "expected ')'")),
                }
            }
            Token::Close => Err(ParseError::new(offset, "unbalanced parenthesis")),
            Token::Op(op) => Err(ParseError::new(
                offset,
                format!("expected an operand before '{}'", op.symbol()),
            )),
        }
    }
}

fn resolve(name: &str, names: &[String]) -> Option<usize> {
    names
        .iter()
        .position(|n| n == name)
        .or_else(|| name.strip_prefix("m_").and_then(|s| names.iter().position(|n| n == s)))
}

/// Parses `src` against the component table `names`.
pub fn parse(src: &str, names: &[String]) -> Result<Expr, ParseError> {
    let tokens = lex(src)?;
    if tokens.is_empty() {
        return Err(ParseError::new(0, "empty expression"));
    }
    let mut p = Parser {
        tokens,
        pos: 0,
        end: src.len(),
        names,
    };
    let expr = p.expr()?;
    if let Some(tok) = p.peek() {
        let msg = if *tok == Token::Close {
            "unbalanced parenthesis"
        } else {
            "unexpected trailing input"
        };
        return Err(ParseError::new(p.offset(), msg));
    }
    Ok(expr)
}

/// A named, compiled metric ω over a fixed component table.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionMetric {
    pub name: String,
    pub source: String,
    pub expr: Expr,
    components: Vec<String>,
}

impl PerceptionMetric {
    pub fn new(name: &str, source: &str, components: &[String]) -> Result<Self, ParseError> {
        Ok(PerceptionMetric {
            name: name.to_string(),
            source: source.to_string(),
            expr: parse(source, components)?,
            components: components.to_vec(),
        })
    }

    /// Parses `name=expression`, or a bare expression named after its own text.
    pub fn from_definition(def: &str, components: &[String]) -> Result<Self, ParseError> {
        match def.split_once('=') {
            Some((name, src)) => {
                let offset = name.len() + 1 + (src.len() - src.trim_start().len());
                PerceptionMetric::new(name.trim(), src.trim(), components).map_err(|e| {
                    ParseError::new(e.offset + offset, e.message)
                })
            }
            None => PerceptionMetric::new(def.trim(), def.trim(), components),
        }
    }

    pub fn eval(&self, m: &[f64]) -> f64 {
        self.expr.eval(m)
    }

    pub fn grad(&self, m: &[f64]) -> Vec<f64> {
        self.expr.grad(m)
    }

    pub fn eval_grad(&self, m: &[f64]) -> (f64, Vec<f64>) {
        self.expr.eval_grad(m)
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    pub fn definition(&self) -> MetricDef {
        MetricDef {
            name: self.name.clone(),
            expr: self.source.clone(),
        }
    }
}

impl fmt::Display for PerceptionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.name, self.expr.to_source(&self.components))
    }
}

/// Serializable form of a metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricDef {
    pub name: String,
    pub expr: String,
}

/// The sidewalk-over-paved-surface ratio, if the table has both components.
pub fn walkability(components: &[String]) -> Option<PerceptionMetric> {
    PerceptionMetric::new("walkability", "sidewalk / (sidewalk + road)", components).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names() -> Vec<String> {
        ["sky", "building", "water", "road", "sidewalk", "surface", "tree"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn at(pairs: &[(usize, f64)]) -> Vec<f64> {
        let mut m = vec![0.0; 7];
        for &(i, v) in pairs {
            m[i] = v;
        }
        m
    }

    #[test]
    fn walkability_value_and_gradient() {
        let w = walkability(&names()).unwrap();
        let m = at(&[(3, 0.2), (4, 0.2)]);
        assert!((w.eval(&m) - 0.5).abs() < 1e-15);
        let g = w.grad(&m);
        // d/ds s/(s+r) = r/(s+r)^2, d/dr = -s/(s+r)^2
        assert!((g[4] - 1.25).abs() < 1e-12);
        assert!((g[3] + 1.25).abs() < 1e-12);
        assert_eq!(w.expr.components(), vec![3, 4]);
    }

    #[test]
    fn prefixed_names_resolve() {
        let a = parse("m_sidewalk / (m_sidewalk + m_road)", &names()).unwrap();
        let b = parse("sidewalk/(sidewalk+road)", &names()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn left_associative() {
        let e = parse("1 - tree - sky", &names()).unwrap();
        let expected = Expr::binary(
            BinOp::Sub,
            Expr::binary(BinOp::Sub, Expr::Num(1.0), Expr::Var(6)),
            Expr::Var(0),
        );
        assert_eq!(e, expected);
        let e = parse("8 / 4 / 2", &names()).unwrap();
        assert_eq!(e.eval(&[0.0; 7]), 1.0);
    }

    #[test]
    fn precedence_binds_products_tighter() {
        let e = parse("1 + 2 * 3 - 4 / 2", &names()).unwrap();
        assert_eq!(e.eval(&[0.0; 7]), 5.0);
        assert_eq!(parse("-2 * -3", &names()).unwrap().eval(&[0.0; 7]), 6.0);
    }

    #[test]
    fn simple_evaluations() {
        let n = names();
        assert_eq!(parse("0.25", &n).unwrap().eval(&at(&[(6, 0.9)])), 0.25);
        let e = parse("tree + sky", &n).unwrap();
        assert!((e.eval(&at(&[(6, 0.1), (0, 0.3)])) - 0.4).abs() < 1e-15);
        assert_eq!(parse("0.25", &n).unwrap().grad(&[0.1; 7]), vec![0.0; 7]);
        assert_eq!(parse("tree", &n).unwrap().grad(&[0.1; 7]), at(&[(6, 1.0)]));
        assert_eq!(parse("1e-2 * 3", &n).unwrap().eval(&[0.0; 7]), 0.03);
    }

    #[test]
    fn error_offsets() {
        let n = names();
        let ab = vec!["a".to_string(), "b".to_string()];
        assert_eq!(parse("a + * b", &ab).unwrap_err().offset, 4);
        assert!(parse("a + b", &ab).is_ok());
        let cases = [
            ("tree + * sky", 7),
            ("tree + bogus", 7),
            ("(tree + sky", 0),
            ("tree + sky)", 10),
            ("tree +", 6),
            ("tree sky", 5),
            ("", 0),
            ("   ", 0),
            ("tree $ sky", 5),
            ("()", 1),
        ];
        for (src, offset) in cases {
            let err = parse(src, &n).unwrap_err();
            assert_eq!(err.offset, offset, "{src:?}: {err}");
        }
    }

    #[test]
    fn division_guard_keeps_things_finite() {
        let n = names();
        let w = walkability(&n).unwrap();
        let zero = vec![0.0; 7];
        assert_eq!(w.eval(&zero), 0.0);
        assert!(w.grad(&zero).iter().all(|g| g.is_finite()));
        let e = parse("1 / (tree - tree)", &n).unwrap();
        assert!((e.eval(&zero) - 1e9).abs() < 1e-3);
        let e = parse("1 / (0 - 1e-12)", &n).unwrap();
        assert!((e.eval(&zero) + 1e9).abs() < 1e-3);
    }

    #[test]
    fn metric_definitions() {
        let n = names();
        let m = PerceptionMetric::from_definition("green = tree + 0.5 * surface", &n).unwrap();
        assert_eq!(m.name, "green");
        assert_eq!(m.source, "tree + 0.5 * surface");
        assert_eq!(m.to_string(), "green = tree + 0.5 * surface");
        let err = PerceptionMetric::from_definition("x = tree + nope", &n).unwrap_err();
        assert_eq!(err.offset, 11);
        let bare = PerceptionMetric::from_definition("tree", &n).unwrap();
        assert_eq!(bare.name, "tree");
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|v| Expr::Num(v as f64 / 100.0)),
            (0usize..7).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(5, 32, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::binary(BinOp::Add, a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::binary(BinOp::Sub, a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::binary(BinOp::Mul, a, b)),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::binary(BinOp::Div, a, b)),
            ]
        })
    }

    fn simplex_point() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, 7).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    /// Smallest |denominator| seen while evaluating `e` at `m`.
    fn min_denominator(e: &Expr, m: &[f64]) -> f64 {
        match e {
            Expr::Num(_) | Expr::Var(_) => f64::INFINITY,
            Expr::Neg(a) => min_denominator(a, m),
            Expr::Binary(op, a, b) => {
                let here = if *op == BinOp::Div { b.eval(m).abs() } else { f64::INFINITY };
                here.min(min_denominator(a, m)).min(min_denominator(b, m))
            }
        }
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let n = names();
            let text = e.to_source(&n);
            let parsed = parse(&text, &n).unwrap();
            prop_assert_eq!(&parsed, &e, "{}", text);
            prop_assert_eq!(parsed.to_source(&n), text);
        }

        #[test]
        fn gradient_matches_finite_differences(e in arb_expr(), m in simplex_point()) {
            let h = 1e-6;
            prop_assume!(min_denominator(&e, &m) > 1e-2);
            let (v, g) = e.eval_grad(&m);
            prop_assert!((v - e.eval(&m)).abs() <= 1e-12 * v.abs().max(1.0));
            for i in 0..7 {
                let mut p = m.clone();
                let mut q = m.clone();
                p[i] += h;
                q[i] -= h;
                prop_assume!(min_denominator(&e, &p) > 1e-2 && min_denominator(&e, &q) > 1e-2);
                let fd = (e.eval(&p) - e.eval(&q)) / (2.0 * h);
                let scale = g[i].abs().max(fd.abs()).max(1.0);
                prop_assert!((fd - g[i]).abs() / scale < 1e-5, "component {}: {} vs {}", i, g[i], fd);
            }
        }

        #[test]
        fn linear_combination(e1 in arb_expr(), e2 in arb_expr(), a in -5i32..5, b in -5i32..5,
                              m in simplex_point()) {
            let n = names();
            let src = format!("{a} * ({}) + {b} * ({})", e1.to_source(&n), e2.to_source(&n));
            let combo = parse(&src, &n).unwrap();
            let expected = a as f64 * e1.eval(&m) + b as f64 * e2.eval(&m);
            prop_assert!((combo.eval(&m) - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }
    }
}
