//! Line-oriented text dump of an [`Mlp`]: a version header, the input width,
//! then per layer a shape line, a weight line and a bias line. Floats use the
//! shortest representation that parses back to the same bits.

use std::fmt::Write as _;

use super::matrix::Matrix;
use super::mlp::{Activation, Layer, Mlp};
use crate::error::{Error, Result};

pub const SNAPSHOT_HEADER: &str = "deltalab-mlp-snapshot v1";

pub fn to_snapshot(net: &Mlp) -> String {
    let mut out = String::new();
    writeln!(out, "{SNAPSHOT_HEADER}").unwrap();
    writeln!(out, "input {}", net.input_dim()).unwrap();
    writeln!(out, "layers {}", net.layers().len()).unwrap();
    for l in net.layers() {
        writeln!(out, "layer {} {} {}", l.out_dim(), l.in_dim(), l.activation.name()).unwrap();
        write_floats(&mut out, "w", l.weights.as_slice());
        write_floats(&mut out, "b", &l.bias);
    }
    out
}

fn write_floats(out: &mut String, tag: &str, values: &[f64]) {
    out.push_str(tag);
    for v in values {
        write!(out, " {v:?}").unwrap();
    }
    out.push('\n');
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_fields(&mut self, tag: &str) -> Result<(usize, Vec<&'a str>)> {
        let (i, line) = self.inner.next().ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("unexpected end of snapshot, expected '{tag}'"),
        })?;
        let mut fields = line.split_ascii_whitespace();
        match fields.next() {
            Some(t) if t == tag => Ok((i + 1, fields.collect())),
            other => Err(Error::Parse {
                line: i + 1,
                message: format!("expected '{tag}', found {:?}", other.unwrap_or("")),
            }),
        }
    }
}

fn parse_usize(line: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid integer {s:?}"),
    })
}

fn parse_floats(line: usize, fields: &[&str], expected: usize) -> Result<Vec<f64>> {
    if fields.len() != expected {
        return Err(Error::Parse {
            line,
            message: format!("expected {expected} values, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("invalid float {s:?}"),
            })
        })
        .collect()
}

pub fn from_snapshot(text: &str) -> Result<Mlp> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SNAPSHOT_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing header '{SNAPSHOT_HEADER}'"),
            })
        }
    }
    let mut lines = Lines { inner: lines };
    let (ln, f) = lines.next_fields("input")?;
    let input_dim = parse_usize(ln, f.first().copied().unwrap_or(""))?;
    let (ln, f) = lines.next_fields("layers")?;
    let count = parse_usize(ln, f.first().copied().unwrap_or(""))?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, f) = lines.next_fields("layer")?;
        if f.len() != 3 {
            return Err(Error::Parse {
                line: ln,
                message: "layer line needs <out> <in> <activation>".into(),
            });
        }
        let out = parse_usize(ln, f[0])?;
        let inp = parse_usize(ln, f[1])?;
        let act = Activation::from_name(f[2]).ok_or_else(|| Error::Parse {
            line: ln,
            message: format!("unknown activation {:?}", f[2]),
        })?;
        let (ln, f) = lines.next_fields("w")?;
        let w = parse_floats(ln, &f, out * inp)?;
        let (ln, f) = lines.next_fields("b")?;
        let b = parse_floats(ln, &f, out)?;
        layers.push(Layer::new(Matrix::from_vec(out, inp, w)?, b, act)?);
    }
    Mlp::new(input_dim, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::smallgrad::Architecture;
    use proptest::prelude::*;

    #[test]
    fn rejects_missing_header() {
        assert!(matches!(from_snapshot("input 2\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn reports_line_of_bad_value() {
        let net = Mlp::init(&Architecture::tanh_mlp(2, &[2], 1, Activation::Identity), &mut rng::stream(0, "s"));
        let text = to_snapshot(&net).replacen("b 0.0 0.0", "b 0.0 zz", 1);
        assert!(matches!(from_snapshot(&text), Err(Error::Parse { line: 6, .. })));
    }

    proptest! {
        #[test]
        fn round_trips_bitwise(seed in any::<u64>(), scale in -1e6f64..1e6, hidden in 1usize..6) {
            let mut net = Mlp::init(&Architecture::tanh_mlp(3, &[hidden], 2, Activation::Identity), &mut rng::stream(seed, "s"));
            for i in 0..net.param_count() {
                let v = *net.param_mut(i) * scale;
                *net.param_mut(i) = v;
            }
            let back = from_snapshot(&to_snapshot(&net)).unwrap();
            let a: Vec<u64> = net.params().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.params().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.architecture(), net.architecture());
        }
    }
}
