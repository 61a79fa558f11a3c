use std::fmt::Write;

use crate::numerics::Matrix;

/// Intermediates of one fused layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `heads × m`; empty when the visual stream ignores textual keys.
    pub lambda: Matrix,
    /// `n × m` similarity between textual and visual states.
    pub similarity: Matrix,
    /// `n × d` aggregated visual states.
    pub aggregated: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionTrace {
    pub layers: Vec<LayerTrace>,
}

impl FusionTrace {
    /// Plain-text dump, one block per layer.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "layer {l}");
            for h in 0..layer.lambda.rows() {
                for (q, v) in layer.lambda.row(h).iter().enumerate() {
                    let _ = writeln!(out, "lambda head={h} qrow={q} value={}", format_g9(*v));
                }
            }
            out.push_str("S\n");
            write_tsv(&mut out, &layer.similarity);
            out.push_str("Agg\n");
            write_tsv(&mut out, &layer.aggregated);
            out.push('\n');
        }
        out
    }
}

fn write_tsv(out: &mut String, m: &Matrix) {
    for r in 0..m.rows() {
        let cells: Vec<String> = m.row(r).iter().map(|&v| format_g9(v)).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
}

/// Formats with 9 significant digits, like C's `%.9g`.
pub fn format_g9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_printf() {
        assert_eq!(format_g9(0.375), "0.375");
        assert_eq!(format_g9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_g9(-2.0), "-2");
        assert_eq!(format_g9(123456789.0), "123456789");
        assert_eq!(format_g9(1234567890.0), "1.23456789e+09");
        assert_eq!(format_g9(1.5e-7), "1.5e-07");
        assert_eq!(format_g9(0.0001), "0.0001");
        assert_eq!(format_g9(0.999999999999), "1");
    }

    #[test]
    fn dump_layout() {
        let t = FusionTrace {
            layers: vec![LayerTrace {
                lambda: Matrix::from_rows(&[vec![0.25, 0.5]]),
                similarity: Matrix::from_rows(&[vec![1.0, 2.0]]),
                aggregated: Matrix::from_rows(&[vec![0.5, -1.0]]),
            }],
        };
        assert_eq!(
            t.dump(),
            "layer 0\nlambda head=0 qrow=0 value=0.25\nlambda head=0 qrow=1 value=0.5\nS\n1\t2\nAgg\n0.5\t-1\n\n"
        );
    }
}
