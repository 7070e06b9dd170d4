//! Pretty-printer. Surface terms round-trip through the parser up to
//! alpha-renaming; trusted-computing-base nodes print with a `#(...)`
//! marker so they are visibly not surface syntax.

use crate::lattice::Lattice;
use crate::term::{Flavor, LabelBinOp, Term};

fn flavor_str(s: Flavor) -> &'static str {
    match s {
        Flavor::Fi => "fi",
        Flavor::Fs => "fs",
    }
}

pub fn pretty(lat: &Lattice, t: &Term) -> String {
    let mut out = String::new();
    write(lat, t, &mut out);
    out
}

/// Pretty form truncated for trace lines.
pub fn pretty_truncated(lat: &Lattice, t: &Term, max: usize) -> String {
    let mut s = pretty(lat, t);
    if s.len() > max {
        s.truncate(max);
    }
    s
}

fn write(lat: &Lattice, t: &Term, out: &mut String) {
    use Term::*;
    match t {
        True => out.push_str("(bool true)"),
        False => out.push_str("(bool false)"),
        Unit => out.push_str("(unit)"),
        LabelLit(l) => out.push_str(lat.label_name(*l)),
        Var(x) => {
            if lat.label(x).is_some() {
                out.push_str("(var ");
                out.push_str(x);
                out.push(')');
            } else {
                out.push_str(x);
            }
        }
        Lam(x, b) => wrap2(lat, out, "lam", x, b),
        App(f, a) => form(lat, out, "app", &[f, a]),
        Fix(f) => form(lat, out, "fix", &[f]),
        If(c, a, b) => form(lat, out, "if", &[c, a, b]),
        LabelOp(op, a, b) => {
            let name = match op {
                LabelBinOp::Join => "join",
                LabelBinOp::Meet => "meet",
                LabelBinOp::Flows => "flows",
            };
            out.push_str("(lop ");
            out.push_str(name);
            out.push(' ');
            write(lat, a, out);
            out.push(' ');
            write(lat, b, out);
            out.push(')');
        }
        Return(x) => form(lat, out, "return", &[x]),
        Bind(m, k) => form(lat, out, "bind", &[m, k]),
        GetLabel => out.push_str("(getLabel)"),
        Label(l, x) => form(lat, out, "label", &[l, x]),
        Unlabel(x) => form(lat, out, "unlabel", &[x]),
        LabelOf(x) => form(lat, out, "labelOf", &[x]),
        ToLabeled(l, x) => form(lat, out, "toLabeled", &[l, x]),
        NewRef(s, l, x) => flavored(lat, out, "newRef", *s, &[l, x]),
        ReadRef(s, r) => flavored(lat, out, "readRef", *s, &[r]),
        WriteRef(s, r, x) => flavored(lat, out, "writeRef", *s, &[r, x]),
        LabelOfRef(s, r) => flavored(lat, out, "labelOfRef", *s, &[r]),
        CopyRef(a, b) => form(lat, out, "copyRef", &[a, b]),
        Upgrade(r, l) => form(lat, out, "upgrade", &[r, l]),
        Downgrade(r, l) => form(lat, out, "downgrade", &[r, l]),
        WithRefs(v, x) => form(lat, out, "withRefs", &[v, x]),
        Fork(x) => form(lat, out, "fork", &[x]),
        Bag(elems) => {
            out.push_str("(bag");
            for e in elems {
                out.push(' ');
                write(lat, e, out);
            }
            out.push(')');
        }
        LioTcb(x) => tcb(lat, out, "LIO", &[x]),
        LbTcb(l, x) => {
            out.push_str("#(Lb ");
            out.push_str(lat.label_name(*l));
            out.push(' ');
            write(lat, x, out);
            out.push(')');
        }
        RefFiTcb(l, a) => {
            out.push_str("#(RefFi ");
            out.push_str(lat.label_name(*l));
            out.push_str(&format!(" {}", a.0));
            out.push(')');
        }
        RefFsTcb(a) => out.push_str(&format!("#(RefFs {})", a.0)),
        WrapTcb(x) => tcb(lat, out, "wrap", &[x]),
        Unwrap(x) => tcb(lat, out, "unwrap", &[x]),
        UpgradeStore(l) => tcb(lat, out, "upgradeStore", &[l]),
        WriteRefDiv(r, x) => tcb(lat, out, "writeRefDiv", &[r, x]),
        Diverge => out.push_str("<diverge>"),
        Bottom => out.push_str("<bottom>"),
        Hole => out.push_str("<hole>"),
    }
}

fn form(lat: &Lattice, out: &mut String, head: &str, parts: &[&Term]) {
    out.push('(');
    out.push_str(head);
    for p in parts {
        out.push(' ');
        write(lat, p, out);
    }
    out.push(')');
}

fn flavored(lat: &Lattice, out: &mut String, head: &str, s: Flavor, parts: &[&Term]) {
    out.push('(');
    out.push_str(head);
    out.push(' ');
    out.push_str(flavor_str(s));
    for p in parts {
        out.push(' ');
        write(lat, p, out);
    }
    out.push(')');
}

fn tcb(lat: &Lattice, out: &mut String, head: &str, parts: &[&Term]) {
    out.push_str("#(");
    out.push_str(head);
    for p in parts {
        out.push(' ');
        write(lat, p, out);
    }
    out.push(')');
}

fn wrap2(lat: &Lattice, out: &mut String, head: &str, x: &str, b: &Term) {
    out.push('(');
    out.push_str(head);
    out.push(' ');
    out.push_str(x);
    out.push(' ');
    write(lat, b, out);
    out.push(')');
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Lattice;
    use crate::parser::parse_program;
    use crate::term::{alpha_eq, build};

    #[test]
    fn fixed_renderings() {
        let lat = Lattice::two_point();
        let h = lat.label("H").unwrap();
        assert_eq!(pretty(&lat, &Term::Diverge), "<diverge>");
        assert_eq!(
            pretty(&lat, &build::lb(h, build::bool_lit(true))),
            "#(Lb H (bool true))"
        );
    }

    #[test]
    fn round_trip_surface_corpus() {
        let lat = Lattice::two_point();
        let corpus = [
            "(getLabel)",
            "(do (x <- (return (bool true))) (return (var x)))",
            "(label H (bool true))",
            "(do (r <- (newRef fs H (unit))) (readRef fs r) (writeRef fs r (unit)))",
            "(lam h (do (tmp <- (newRef fs L (unit))) (toLabeled H (do (b <- (readRef fs h)) (when b (writeRef fs tmp (unit))))) (bind (labelOfRef fs tmp) (lam l (return (lop flows H l))))))",
            "(withRefs (bag r s) (seq (upgrade r H) (downgrade s L)))",
            "(app (lam x (if x (fork (return (unit))) (return (unit)))) (bool false))",
            "(lop meet (lop join L H) L)",
            "(bind (toLabeled H (unlabel (var lv))) (lam y (return (labelOf y))))",
            "(copyRef (var a) (var b))",
        ];
        for src in corpus {
            let t1 = parse_program(&lat, src).unwrap();
            let printed = pretty(&lat, &t1);
            let t2 = parse_program(&lat, &printed)
                .unwrap_or_else(|e| panic!("reparse of `{printed}` failed: {e}"));
            assert!(alpha_eq(&t1, &t2), "round trip failed for {src}\n -> {printed}");
        }
    }

    #[test]
    fn variable_colliding_with_label_name_prints_escaped() {
        let lat = Lattice::two_point();
        let t = parse_program(&lat, "(lam H (var H))").unwrap();
        let printed = pretty(&lat, &t);
        let t2 = parse_program(&lat, &printed).unwrap();
        assert!(alpha_eq(&t, &t2), "{printed}");
    }
}
