//! Plain-text dump of a program in sparse triplet sections.
//!
//! ```text
//! VARS <n>
//! <index> <name> <lower> <upper>
//! OBJ
//! Q <a> <b> <coef>        coef · x_a · x_b
//! C <a> <coef>
//! K <constant>
//! EQ <name> <rhs>
//! <var> <coef>
//! INEQ <name> <rhs>
//! <var> <coef>
//! SOC <name> <head offset> <components>
//! H <var> <coef>
//! D <k> <offset>
//! <k> <var> <coef>
//! END
//! ```

use std::fmt::Write;

use super::ConicProgram;

fn num(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:e}")
    }
}

pub fn to_text(p: &ConicProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "VARS {}", p.num_vars());
    for (k, v) in p.variables().iter().enumerate() {
        let _ = writeln!(out, "{} {} {} {}", k, v.name, num(v.lower), num(v.upper));
    }
    let _ = writeln!(out, "OBJ");
    for (&(a, b), &c) in p.quadratic_terms() {
        let _ = writeln!(out, "Q {} {} {}", a, b, num(c));
    }
    for (a, &c) in p.linear_terms().iter().enumerate() {
        if c != 0.0 {
            let _ = writeln!(out, "C {} {}", a, num(c));
        }
    }
    let _ = writeln!(out, "K {}", num(p.constant()));
    for r in p.eq_rows() {
        let _ = writeln!(out, "EQ {} {}", r.name, num(r.rhs));
        for &(v, c) in &r.terms {
            let _ = writeln!(out, "{} {}", v.0, num(c));
        }
    }
    for r in p.le_rows() {
        let _ = writeln!(out, "INEQ {} {}", r.name, num(r.rhs));
        for &(v, c) in &r.terms {
            let _ = writeln!(out, "{} {}", v.0, num(c));
        }
    }
    for s in p.soc_rows() {
        let _ = writeln!(out, "SOC {} {} {}", s.name, num(s.head_offset), s.components.len());
        for &(v, c) in &s.head {
            let _ = writeln!(out, "H {} {}", v.0, num(c));
        }
        for (k, (terms, d)) in s.components.iter().enumerate() {
            let _ = writeln!(out, "D {} {}", k, num(*d));
            for &(v, c) in terms {
                let _ = writeln!(out, "{} {} {}", k, v.0, num(c));
            }
        }
    }
    let _ = writeln!(out, "END");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_lists_every_section() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x", 0.0, f64::INFINITY).unwrap();
        let t = p.free_var("t").unwrap();
        p.add_quad(x, x, 1.0);
        p.add_linear(t, 1.0);
        p.add_eq("e", &[(x, 1.0)], 2.0).unwrap();
        p.add_le("i", &[(x, 1.0), (t, -1.0)], 0.0).unwrap();
        p.add_soc("s", t, vec![(vec![(x, 1.0)], 0.5)]).unwrap();
        let text = to_text(&p);
        for tag in ["VARS 2", "OBJ", "Q 0 0", "EQ e", "INEQ i", "SOC s 0e0 1", "H 1 1e0", "D 0", "END", "inf"] {
            assert!(text.contains(tag), "missing {tag} in\n{text}");
        }
    }
}
