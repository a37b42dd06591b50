//! Helpers for the compact `name:key=value,...` strings used in configs and
//! on the command line. Values may be parenthesised tuples such as
//! `a=(0.3,0.1)`; commas inside parentheses do not split arguments.

use crate::error::{parse_err, Result};

pub(crate) struct SpecString<'a> {
    pub input: &'a str,
    pub name: &'a str,
    pub args: Vec<(&'a str, &'a str)>,
}

pub(crate) fn split(input: &str) -> Result<SpecString<'_>> {
    let trimmed = input.trim();
    let (name, rest) = match trimmed.find(':') {
        Some(i) => (&trimmed[..i], &trimmed[i + 1..]),
        None => (trimmed, ""),
    };
    if name.is_empty() {
        return Err(parse_err(input, "missing name"));
    }
    let mut args = Vec::new();
    let mut depth = 0i32;
    let mut start = 0usize;
    let bytes = rest.as_bytes();
    for i in 0..=bytes.len() {
        let at_end = i == bytes.len();
        let c = if at_end { b',' } else { bytes[i] };
        match c {
            b'(' => depth += 1,
            b')' => depth -= 1,
            b',' if depth == 0 => {
                let piece = rest[start..i].trim();
                start = i + 1;
                if piece.is_empty() {
                    if at_end && args.is_empty() {
                        break;
                    }
                    return Err(parse_err(input, "empty argument"));
                }
                let eq = piece
                    .find('=')
                    .ok_or_else(|| parse_err(input, format!("argument '{piece}' lacks '='")))?;
                args.push((piece[..eq].trim(), piece[eq + 1..].trim()));
            }
            _ => {}
        }
        if depth < 0 {
            return Err(parse_err(input, "unbalanced parentheses"));
        }
    }
    if depth != 0 {
        return Err(parse_err(input, "unbalanced parentheses"));
    }
    Ok(SpecString { input, name, args })
}

impl<'a> SpecString<'a> {
    pub fn get(&self, key: &str) -> Option<&'a str> {
        self.args.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    pub fn require(&self, key: &str) -> Result<&'a str> {
        self.get(key)
            .ok_or_else(|| parse_err(self.input, format!("missing argument '{key}'")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.require(key)?;
        parse_f64(self.input, v)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse::<usize>()
            .map_err(|_| parse_err(self.input, format!("'{v}' is not a non-negative integer")))
    }

    pub fn only_keys(&self, allowed: &[&str]) -> Result<()> {
        for (k, _) in &self.args {
            if !allowed.iter().any(|a| a == k) {
                return Err(parse_err(self.input, format!("unknown argument '{k}'")));
            }
        }
        Ok(())
    }
}

pub(crate) fn parse_f64(input: &str, v: &str) -> Result<f64> {
    let x = match v {
        "pi" => std::f64::consts::PI,
        "2pi" => 2.0 * std::f64::consts::PI,
        _ => v
            .parse::<f64>()
            .map_err(|_| parse_err(input, format!("'{v}' is not a number")))?,
    };
    if !x.is_finite() {
        return Err(parse_err(input, format!("'{v}' is not finite")));
    }
    Ok(x)
}

/// Parses `(a,b,c)` or a bare scalar into a list of numbers.
pub(crate) fn parse_tuple(input: &str, v: &str) -> Result<Vec<f64>> {
    let inner = v
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .unwrap_or(v);
    inner
        .split(',')
        .map(|p| parse_f64(input, p.trim()))
        .collect()
}

pub(crate) fn parse_int_tuple(input: &str, v: &str) -> Result<Vec<i32>> {
    let inner = v
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .unwrap_or(v);
    inner
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<i32>()
                .map_err(|_| parse_err(input, format!("'{p}' is not an integer")))
        })
        .collect()
}

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_nested_tuples() {
        let s = split("trig:a=(0.3,0.1),k=2").unwrap();
        assert_eq!(s.name, "trig");
        assert_eq!(s.args, vec![("a", "(0.3,0.1)"), ("k", "2")]);
        assert_eq!(
            parse_tuple(s.input, s.get("a").unwrap()).unwrap(),
            vec![0.3, 0.1]
        );
    }

    #[test]
    fn bare_name_has_no_args() {
        let s = split("uniform").unwrap();
        assert_eq!(s.name, "uniform");
        assert!(s.args.is_empty());
    }

    #[test]
    fn rejects_malformed() {
        assert!(split("torus:d=5,,s=1").is_err());
        assert!(split("trig:a=(0.3").is_err());
        assert!(split(":x=1").is_err());
        assert!(split("torus:d").is_err());
    }
}
