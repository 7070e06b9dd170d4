//! Abstract syntax shared by every calculus variant.
//!
//! Constructors suffixed `Tcb` (and the internal nodes [`Term::Diverge`],
//! [`Term::Bottom`], [`Term::Hole`], [`Term::WriteRefDiv`],
//! [`Term::UpgradeStore`], [`Term::Unwrap`]) are trusted-computing-base
//! syntax: the surface parser never produces them, they only arise during
//! reduction, state setup, or the flow-insensitive embedding.

use std::collections::BTreeSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::lattice::Label;

pub type TermRef = Rc<Term>;

/// A store address. Flow-insensitive and flow-sensitive addresses are drawn
/// from one shared counter, so the two store domains are always disjoint.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Addr(pub u64);

/// Reference flavor: flow-insensitive or flow-sensitive.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Flavor {
    Fi,
    Fs,
}

/// Binary label operations.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LabelBinOp {
    Join,
    Meet,
    Flows,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Term {
    // Values.
    True,
    False,
    Unit,
    Lam(String, TermRef),
    LabelLit(Label),
    LioTcb(TermRef),
    LbTcb(Label, TermRef),
    RefFiTcb(Label, Addr),
    RefFsTcb(Addr),
    Bag(Vec<TermRef>),
    WrapTcb(TermRef),
    /// Inert placeholder used by the embedding; forcing it is a stuck redex.
    Bottom,
    /// Erasure hole; never evaluated.
    Hole,

    // Non-value terms.
    Var(String),
    App(TermRef, TermRef),
    Fix(TermRef),
    If(TermRef, TermRef, TermRef),
    LabelOp(LabelBinOp, TermRef, TermRef),
    Return(TermRef),
    Bind(TermRef, TermRef),
    GetLabel,
    Label(TermRef, TermRef),
    Unlabel(TermRef),
    LabelOf(TermRef),
    ToLabeled(TermRef, TermRef),
    NewRef(Flavor, TermRef, TermRef),
    ReadRef(Flavor, TermRef),
    WriteRef(Flavor, TermRef, TermRef),
    LabelOfRef(Flavor, TermRef),
    CopyRef(TermRef, TermRef),
    Upgrade(TermRef, TermRef),
    Downgrade(TermRef, TermRef),
    WithRefs(TermRef, TermRef),
    Fork(TermRef),
    /// The divergent term: no reduction rule, forcing it ends the run.
    Diverge,
    /// Sweeping upgrade of every visible flow-sensitive cell to the given
    /// label; inserted by the auto-upgrade variant of `unlabel`.
    UpgradeStore(TermRef),
    /// Flow-insensitive write that taints and diverges instead of erroring
    /// when its label check fails; used only inside the embedding of
    /// flow-sensitive writes.
    WriteRefDiv(TermRef, TermRef),
    /// Removes a [`Term::WrapTcb`] boundary marker.
    Unwrap(TermRef),
}

impl Term {
    pub fn is_value(&self) -> bool {
        match self {
            Term::True
            | Term::False
            | Term::Unit
            | Term::Lam(..)
            | Term::LabelLit(_)
            | Term::LioTcb(_)
            | Term::LbTcb(..)
            | Term::RefFiTcb(..)
            | Term::RefFsTcb(_)
            | Term::WrapTcb(_)
            | Term::Bottom
            | Term::Hole => true,
            Term::Bag(elems) => elems.iter().all(|e| e.is_value()),
            _ => false,
        }
    }

    /// Number of syntax nodes; used for size bounds and shrinking.
    pub fn size(&self) -> usize {
        let mut n = 1;
        self.for_each_child(|c| n += c.size());
        n
    }

    fn for_each_child(&self, mut f: impl FnMut(&Term)) {
        use Term::*;
        match self {
            True | False | Unit | LabelLit(_) | RefFiTcb(..) | RefFsTcb(_) | Bottom | Hole
            | Var(_) | GetLabel | Diverge => {}
            Lam(_, b) => f(b),
            LioTcb(t) | LbTcb(_, t) | WrapTcb(t) | Fix(t) | Return(t) | Unlabel(t)
            | LabelOf(t) | ReadRef(_, t) | LabelOfRef(_, t) | Fork(t) | UpgradeStore(t)
            | Unwrap(t) => f(t),
            Bag(elems) => elems.iter().for_each(|e| f(e)),
            App(a, b)
            | LabelOp(_, a, b)
            | Bind(a, b)
            | Label(a, b)
            | ToLabeled(a, b)
            | NewRef(_, a, b)
            | WriteRef(_, a, b)
            | CopyRef(a, b)
            | Upgrade(a, b)
            | Downgrade(a, b)
            | WithRefs(a, b)
            | WriteRefDiv(a, b) => {
                f(a);
                f(b);
            }
            If(a, b, c) => {
                f(a);
                f(b);
                f(c);
            }
        }
    }

    /// True if any node in the term satisfies the predicate.
    pub fn any_node(&self, pred: &impl Fn(&Term) -> bool) -> bool {
        if pred(self) {
            return true;
        }
        let mut found = false;
        self.for_each_child(|c| {
            if !found && c.any_node(pred) {
                found = true;
            }
        });
        found
    }

    /// True if the term contains trusted-computing-base syntax, i.e. nodes
    /// a surface program must not contain.
    pub fn contains_tcb(&self) -> bool {
        self.any_node(&|t| {
            matches!(
                t,
                Term::LioTcb(_)
                    | Term::LbTcb(..)
                    | Term::RefFiTcb(..)
                    | Term::RefFsTcb(_)
                    | Term::WrapTcb(_)
                    | Term::Bottom
                    | Term::Hole
                    | Term::Diverge
                    | Term::UpgradeStore(_)
                    | Term::WriteRefDiv(..)
                    | Term::Unwrap(_)
            )
        })
    }

    /// True if the term contains flow-sensitive syntax (the nodes the
    /// embedding must eliminate).
    pub fn contains_fs_nodes(&self) -> bool {
        self.any_node(&|t| {
            matches!(
                t,
                Term::NewRef(Flavor::Fs, ..)
                    | Term::ReadRef(Flavor::Fs, _)
                    | Term::WriteRef(Flavor::Fs, ..)
                    | Term::LabelOfRef(Flavor::Fs, _)
                    | Term::Upgrade(..)
                    | Term::Downgrade(..)
                    | Term::WithRefs(..)
                    | Term::RefFsTcb(_)
                    | Term::UpgradeStore(_)
            )
        })
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut acc = BTreeSet::new();
        self.collect_free(&mut Vec::new(), &mut acc);
        acc
    }

    fn collect_free(&self, bound: &mut Vec<String>, acc: &mut BTreeSet<String>) {
        match self {
            Term::Var(x) => {
                if !bound.iter().any(|b| b == x) {
                    acc.insert(x.clone());
                }
            }
            Term::Lam(x, b) => {
                bound.push(x.clone());
                b.collect_free(bound, acc);
                bound.pop();
            }
            other => other.for_each_child(|c| c.collect_free(bound, acc)),
        }
    }
}

static FRESH_VAR: AtomicU64 = AtomicU64::new(0);

/// A variable name guaranteed not to collide with any existing name.
pub fn fresh_var(hint: &str) -> String {
    let n = FRESH_VAR.fetch_add(1, Ordering::Relaxed);
    format!("{hint}%{n}")
}

/// Capture-avoiding substitution `{replacement/var} term`.
///
/// Bound variables are renamed only when the replacement actually has a
/// free occurrence of them, so substitution of closed terms (the only case
/// the machine performs) never renames and stays deterministic.
pub fn subst(term: &TermRef, var: &str, replacement: &TermRef) -> TermRef {
    let free = replacement.free_vars();
    subst_inner(term, var, replacement, &free)
}

fn subst_inner(
    term: &TermRef,
    var: &str,
    replacement: &TermRef,
    repl_free: &BTreeSet<String>,
) -> TermRef {
    use Term::*;
    let go = |t: &TermRef| subst_inner(t, var, replacement, repl_free);
    match &**term {
        Var(x) => {
            if x == var {
                replacement.clone()
            } else {
                term.clone()
            }
        }
        Lam(x, body) => {
            if x == var {
                term.clone()
            } else if repl_free.contains(x) {
                let fresh = fresh_var(x);
                let renamed = subst(body, x, &Rc::new(Var(fresh.clone())));
                Rc::new(Lam(fresh, subst_inner(&renamed, var, replacement, repl_free)))
            } else {
                Rc::new(Lam(x.clone(), go(body)))
            }
        }
        True | False | Unit | LabelLit(_) | RefFiTcb(..) | RefFsTcb(_) | Bottom | Hole
        | GetLabel | Diverge => term.clone(),
        LioTcb(t) => Rc::new(LioTcb(go(t))),
        LbTcb(l, t) => Rc::new(LbTcb(*l, go(t))),
        WrapTcb(t) => Rc::new(WrapTcb(go(t))),
        Bag(elems) => Rc::new(Bag(elems.iter().map(go).collect())),
        App(a, b) => Rc::new(App(go(a), go(b))),
        Fix(t) => Rc::new(Fix(go(t))),
        If(a, b, c) => Rc::new(If(go(a), go(b), go(c))),
        LabelOp(op, a, b) => Rc::new(LabelOp(*op, go(a), go(b))),
        Return(t) => Rc::new(Return(go(t))),
        Bind(a, b) => Rc::new(Bind(go(a), go(b))),
        Label(a, b) => Rc::new(Label(go(a), go(b))),
        Unlabel(t) => Rc::new(Unlabel(go(t))),
        LabelOf(t) => Rc::new(LabelOf(go(t))),
        ToLabeled(a, b) => Rc::new(ToLabeled(go(a), go(b))),
        NewRef(s, a, b) => Rc::new(NewRef(*s, go(a), go(b))),
        ReadRef(s, t) => Rc::new(ReadRef(*s, go(t))),
        WriteRef(s, a, b) => Rc::new(WriteRef(*s, go(a), go(b))),
        LabelOfRef(s, t) => Rc::new(LabelOfRef(*s, go(t))),
        CopyRef(a, b) => Rc::new(CopyRef(go(a), go(b))),
        Upgrade(a, b) => Rc::new(Upgrade(go(a), go(b))),
        Downgrade(a, b) => Rc::new(Downgrade(go(a), go(b))),
        WithRefs(a, b) => Rc::new(WithRefs(go(a), go(b))),
        Fork(t) => Rc::new(Fork(go(t))),
        UpgradeStore(t) => Rc::new(UpgradeStore(go(t))),
        WriteRefDiv(a, b) => Rc::new(WriteRefDiv(go(a), go(b))),
        Unwrap(t) => Rc::new(Unwrap(go(t))),
    }
}

/// Structural equality up to renaming of bound variables.
pub fn alpha_eq(a: &Term, b: &Term) -> bool {
    alpha_eq_inner(a, b, &mut Vec::new())
}

fn alpha_eq_inner(a: &Term, b: &Term, env: &mut Vec<(String, String)>) -> bool {
    use Term::*;
    match (a, b) {
        (Var(x), Var(y)) => match env.iter().rev().find(|(l, r)| l == x || r == y) {
            Some((l, r)) => l == x && r == y,
            None => x == y,
        },
        (Lam(x, bx), Lam(y, by)) => {
            env.push((x.clone(), y.clone()));
            let r = alpha_eq_inner(bx, by, env);
            env.pop();
            r
        }
        (True, True) | (False, False) | (Unit, Unit) | (GetLabel, GetLabel)
        | (Diverge, Diverge) | (Bottom, Bottom) | (Hole, Hole) => true,
        (LabelLit(l), LabelLit(m)) => l == m,
        (RefFiTcb(l, x), RefFiTcb(m, y)) => l == m && x == y,
        (RefFsTcb(x), RefFsTcb(y)) => x == y,
        (LioTcb(x), LioTcb(y))
        | (WrapTcb(x), WrapTcb(y))
        | (Fix(x), Fix(y))
        | (Return(x), Return(y))
        | (Unlabel(x), Unlabel(y))
        | (LabelOf(x), LabelOf(y))
        | (Fork(x), Fork(y))
        | (UpgradeStore(x), UpgradeStore(y))
        | (Unwrap(x), Unwrap(y)) => alpha_eq_inner(x, y, env),
        (LbTcb(l, x), LbTcb(m, y)) => l == m && alpha_eq_inner(x, y, env),
        (ReadRef(s, x), ReadRef(t, y)) | (LabelOfRef(s, x), LabelOfRef(t, y)) => {
            s == t && alpha_eq_inner(x, y, env)
        }
        (Bag(xs), Bag(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| alpha_eq_inner(x, y, env))
        }
        (App(a1, a2), App(b1, b2)) => {
            alpha_eq_inner(a1, b1, env) && alpha_eq_inner(a2, b2, env)
        }
        (LabelOp(o1, a1, a2), LabelOp(o2, b1, b2)) => {
            o1 == o2 && alpha_eq_inner(a1, b1, env) && alpha_eq_inner(a2, b2, env)
        }
        (Bind(a1, a2), Bind(b1, b2))
        | (Label(a1, a2), Label(b1, b2))
        | (ToLabeled(a1, a2), ToLabeled(b1, b2))
        | (CopyRef(a1, a2), CopyRef(b1, b2))
        | (Upgrade(a1, a2), Upgrade(b1, b2))
        | (Downgrade(a1, a2), Downgrade(b1, b2))
        | (WithRefs(a1, a2), WithRefs(b1, b2))
        | (WriteRefDiv(a1, a2), WriteRefDiv(b1, b2)) => {
            alpha_eq_inner(a1, b1, env) && alpha_eq_inner(a2, b2, env)
        }
        (NewRef(s, a1, a2), NewRef(t, b1, b2)) | (WriteRef(s, a1, a2), WriteRef(t, b1, b2)) => {
            s == t && alpha_eq_inner(a1, b1, env) && alpha_eq_inner(a2, b2, env)
        }
        (If(a1, a2, a3), If(b1, b2, b3)) => {
            alpha_eq_inner(a1, b1, env)
                && alpha_eq_inner(a2, b2, env)
                && alpha_eq_inner(a3, b3, env)
        }
        _ => false,
    }
}

/// Convenience constructors used by the embedding, desugarers and tests.
pub mod build {
    use super::*;

    pub fn var(x: &str) -> TermRef {
        Rc::new(Term::Var(x.to_string()))
    }
    pub fn lam(x: &str, body: TermRef) -> TermRef {
        Rc::new(Term::Lam(x.to_string(), body))
    }
    pub fn app(f: TermRef, a: TermRef) -> TermRef {
        Rc::new(Term::App(f, a))
    }
    pub fn bool_lit(b: bool) -> TermRef {
        Rc::new(if b { Term::True } else { Term::False })
    }
    pub fn unit() -> TermRef {
        Rc::new(Term::Unit)
    }
    pub fn label_lit(l: Label) -> TermRef {
        Rc::new(Term::LabelLit(l))
    }
    pub fn ret(t: TermRef) -> TermRef {
        Rc::new(Term::Return(t))
    }
    pub fn bind(m: TermRef, k: TermRef) -> TermRef {
        Rc::new(Term::Bind(m, k))
    }
    /// `m >>= \x. k`
    pub fn bind_to(m: TermRef, x: &str, k: TermRef) -> TermRef {
        bind(m, lam(x, k))
    }
    /// `m >> k` — sequence, result of `m` discarded.
    pub fn seq(m: TermRef, k: TermRef) -> TermRef {
        bind(m, lam(&fresh_var("_"), k))
    }
    pub fn if_(c: TermRef, t: TermRef, e: TermRef) -> TermRef {
        Rc::new(Term::If(c, t, e))
    }
    pub fn lop(op: LabelBinOp, a: TermRef, b: TermRef) -> TermRef {
        Rc::new(Term::LabelOp(op, a, b))
    }
    pub fn get_label() -> TermRef {
        Rc::new(Term::GetLabel)
    }
    pub fn label(l: TermRef, t: TermRef) -> TermRef {
        Rc::new(Term::Label(l, t))
    }
    pub fn unlabel(t: TermRef) -> TermRef {
        Rc::new(Term::Unlabel(t))
    }
    pub fn label_of(t: TermRef) -> TermRef {
        Rc::new(Term::LabelOf(t))
    }
    pub fn to_labeled(l: TermRef, t: TermRef) -> TermRef {
        Rc::new(Term::ToLabeled(l, t))
    }
    pub fn new_ref(s: Flavor, l: TermRef, t: TermRef) -> TermRef {
        Rc::new(Term::NewRef(s, l, t))
    }
    pub fn read_ref(s: Flavor, r: TermRef) -> TermRef {
        Rc::new(Term::ReadRef(s, r))
    }
    pub fn write_ref(s: Flavor, r: TermRef, t: TermRef) -> TermRef {
        Rc::new(Term::WriteRef(s, r, t))
    }
    pub fn label_of_ref(s: Flavor, r: TermRef) -> TermRef {
        Rc::new(Term::LabelOfRef(s, r))
    }
    pub fn copy_ref(a: TermRef, b: TermRef) -> TermRef {
        Rc::new(Term::CopyRef(a, b))
    }
    pub fn upgrade(r: TermRef, l: TermRef) -> TermRef {
        Rc::new(Term::Upgrade(r, l))
    }
    pub fn downgrade(r: TermRef, l: TermRef) -> TermRef {
        Rc::new(Term::Downgrade(r, l))
    }
    pub fn with_refs(bag: TermRef, t: TermRef) -> TermRef {
        Rc::new(Term::WithRefs(bag, t))
    }
    pub fn fork(t: TermRef) -> TermRef {
        Rc::new(Term::Fork(t))
    }
    pub fn bag(elems: Vec<TermRef>) -> TermRef {
        Rc::new(Term::Bag(elems))
    }
    pub fn ref_fi(l: Label, a: Addr) -> TermRef {
        Rc::new(Term::RefFiTcb(l, a))
    }
    pub fn ref_fs(a: Addr) -> TermRef {
        Rc::new(Term::RefFsTcb(a))
    }
    pub fn lb(l: Label, t: TermRef) -> TermRef {
        Rc::new(Term::LbTcb(l, t))
    }
    pub fn wrap(t: TermRef) -> TermRef {
        Rc::new(Term::WrapTcb(t))
    }
    pub fn unwrap(t: TermRef) -> TermRef {
        Rc::new(Term::Unwrap(t))
    }
    pub fn diverge() -> TermRef {
        Rc::new(Term::Diverge)
    }
    pub fn bottom() -> TermRef {
        Rc::new(Term::Bottom)
    }
    /// `when c t` — `if c then t else return ()`.
    pub fn when(c: TermRef, t: TermRef) -> TermRef {
        if_(c, t, ret(unit()))
    }
}

#[cfg(test)]
mod tests {
    use super::build::*;
    use super::*;

    #[test]
    fn subst_closed_replacement_never_renames() {
        // (\y. x) with x := true
        let t = lam("y", var("x"));
        let out = subst(&t, "x", &bool_lit(true));
        assert_eq!(*out, *lam("y", bool_lit(true)));
    }

    #[test]
    fn subst_avoids_capture() {
        // (\y. app x y) with x := y  must not capture the free y.
        let t = lam("y", app(var("x"), var("y")));
        let out = subst(&t, "x", &var("y"));
        if let Term::Lam(fresh, body) = &*out {
            assert_ne!(fresh, "y");
            assert_eq!(**body, *app(var("y"), var(fresh)));
        } else {
            panic!("expected lambda");
        }
    }

    #[test]
    fn alpha_eq_renamed_binders() {
        let a = lam("x", app(var("x"), var("z")));
        let b = lam("y", app(var("y"), var("z")));
        assert!(alpha_eq(&a, &b));
        let c = lam("y", app(var("z"), var("y")));
        assert!(!alpha_eq(&a, &c));
    }

    #[test]
    fn bag_of_values_is_value() {
        let lat = crate::lattice::Lattice::two_point();
        let h = lat.label("H").unwrap();
        assert!(bag(vec![ref_fs(Addr(0)), ref_fs(Addr(1))]).is_value());
        assert!(!bag(vec![read_ref(Flavor::Fs, ref_fs(Addr(0)))]).is_value());
        assert!(lb(h, diverge()).is_value());
        assert!(!Term::Diverge.is_value());
    }
}
