//! Architecture formulas, written output-first:
//! `FCx10(Softmax),FCx128(Abs),FCx128(Abs),BN`.
//!
//! Tokens are comma separated. `BN` is batch normalization, `FL` flatten and
//! `FCx<width>(<activation>)` a dense layer. A width may be parenthesized and
//! may use the multiplier `p`, as in `FCx(p*128)(Abs)`.

use minwidth::{Activation, Error, LayerSpec, Result};

/// Parse with width multiplier 1.
pub fn parse_formula(s: &str) -> Result<Vec<LayerSpec>> {
    parse_formula_scaled(s, 1)
}

/// Parse a formula, substituting `p` in width expressions. Returns layers
/// in input-to-output order.
pub fn parse_formula_scaled(s: &str, p: usize) -> Result<Vec<LayerSpec>> {
    if s.trim().is_empty() {
        return Err(Error::Parse {
            position: 0,
            reason: "empty formula".into(),
        });
    }
    let mut layers = Vec::new();
    let mut start = 0;
    for piece in s.split(',') {
        let lead = piece.len() - piece.trim_start().len();
        layers.push(parse_token(piece.trim(), start + lead, p)?);
        start += piece.len() + 1;
    }
    layers.reverse();
    Ok(layers)
}

fn err(position: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        position,
        reason: reason.into(),
    }
}

fn parse_token(tok: &str, pos: usize, p: usize) -> Result<LayerSpec> {
    if tok.is_empty() {
        return Err(err(pos, "empty layer token"));
    }
    if tok.eq_ignore_ascii_case("BN") {
        return Ok(LayerSpec::BatchNorm);
    }
    if tok.eq_ignore_ascii_case("FL") {
        return Ok(LayerSpec::Flatten);
    }
    let rest = strip_prefix_ci(tok, "FCx").ok_or_else(|| err(pos, format!("unknown layer token {tok:?}")))?;
    let mut at = pos + 3;

    let (width_expr, after) = if let Some(inner) = rest.strip_prefix('(') {
        let close = inner.find(')').ok_or_else(|| err(at, "unclosed width parenthesis"))?;
        at += 1;
        (&inner[..close], &inner[close + 1..])
    } else {
        let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
        (&rest[..end], &rest[end..])
    };
    let width = eval_width(width_expr.trim(), at, p)?;
    at = pos + (tok.len() - after.len());

    let after_trim = after.trim_start();
    at += after.len() - after_trim.len();
    let act_src = after_trim
        .strip_prefix('(')
        .and_then(|a| a.strip_suffix(')'))
        .ok_or_else(|| err(at, "expected (activation) after the width"))?;
    let activation = parse_activation(act_src.trim()).ok_or_else(|| err(at + 1, format!("unknown activation {act_src:?}")))?;
    if width == 0 {
        return Err(err(pos + 3, "layer width must be at least 1"));
    }
    Ok(LayerSpec::Dense { width, activation })
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    (s.len() >= prefix.len() && s.is_char_boundary(prefix.len()) && s[..prefix.len()].eq_ignore_ascii_case(prefix))
        .then(|| &s[prefix.len()..])
}

fn eval_width(expr: &str, pos: usize, p: usize) -> Result<usize> {
    let bad = || err(pos, format!("bad width {expr:?}"));
    let factor = |f: &str| -> Result<usize> {
        match f.trim() {
            "p" | "P" => Ok(p),
            n => n.parse::<usize>().map_err(|_| bad()),
        }
    };
    if expr.is_empty() {
        return Err(bad());
    }
    expr.split('*')
        .try_fold(1usize, |acc, f| acc.checked_mul(factor(f)?).ok_or_else(bad))
}

fn parse_activation(s: &str) -> Option<Activation> {
    match s.to_ascii_lowercase().as_str() {
        "abs" => Some(Activation::Abs),
        "relu" => Some(Activation::Relu),
        "linear" => Some(Activation::Linear),
        "softmax" => Some(Activation::Softmax),
        _ => None,
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Abs => "Abs",
        Activation::Relu => "ReLU",
        Activation::Linear => "Linear",
        Activation::Softmax => "Softmax",
    }
}

/// Render input-to-output layers as an output-first formula.
pub fn render(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .rev()
        .map(|l| match l {
            LayerSpec::BatchNorm => "BN".to_string(),
            LayerSpec::Flatten => "FL".to_string(),
            LayerSpec::Dense { width, activation } => format!("FCx{width}({})", activation_name(*activation)),
        })
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(width: usize, activation: Activation) -> LayerSpec {
        LayerSpec::Dense { width, activation }
    }

    #[test]
    fn regression_formula() {
        assert_eq!(
            parse_formula("FCx1(linear),FCx200(ReLU),BN").unwrap(),
            vec![LayerSpec::BatchNorm, dense(200, Activation::Relu), dense(1, Activation::Linear)]
        );
    }

    #[test]
    fn classification_formula() {
        let l = parse_formula("FCx10(Softmax),FCx128(Abs),FCx128(Abs),BN").unwrap();
        assert_eq!(
            l,
            vec![
                LayerSpec::BatchNorm,
                dense(128, Activation::Abs),
                dense(128, Activation::Abs),
                dense(10, Activation::Softmax)
            ]
        );
    }

    #[test]
    fn spaced_and_multiplied_forms() {
        let a = parse_formula_scaled("FCx10 (Softmax), FCx(p*128)(Abs), FCx(128*p) (Abs), BN, FL", 2).unwrap();
        assert_eq!(
            a,
            vec![
                LayerSpec::Flatten,
                LayerSpec::BatchNorm,
                dense(256, Activation::Abs),
                dense(256, Activation::Abs),
                dense(10, Activation::Softmax)
            ]
        );
    }

    #[test]
    fn zero_width_rejected() {
        assert!(matches!(parse_formula("FCx0(ReLU)"), Err(Error::Parse { position: 3, .. })));
    }

    #[test]
    fn errors_point_at_the_token() {
        match parse_formula("FCx10(Softmax),XX,BN") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 15),
            other => panic!("{other:?}"),
        }
        match parse_formula("FCx10(Softmax), FCx5(tanh)") {
            Err(Error::Parse { position, reason }) => {
                assert_eq!(position, 21);
                assert!(reason.contains("tanh"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_formula("").is_err());
        assert!(parse_formula("FCx10(Softmax),,BN").is_err());
        assert!(parse_formula("FCx(10(Abs)").is_err());
        assert!(parse_formula("FCxabc(Abs)").is_err());
        assert!(parse_formula("FCx10").is_err());
    }

    #[test]
    fn render_round_trips() {
        let s = "FCx10(Softmax),FCx128(Abs),FCx64(ReLU),FCx3(Linear),BN,FL";
        assert_eq!(render(&parse_formula(s).unwrap()), s);
    }
}
