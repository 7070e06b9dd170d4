//! Simple types and a monomorphic unification-based checker.
//!
//! Lambdas carry no annotations, so checking infers types with unification
//! variables and rejects anything that does not resolve to a unique ground
//! type at the top level. The scoped-store form `withRefs` is checked under
//! a store typing restricted to the addresses named in a literal bag, so a
//! term cannot mention an address outside its declared store slice.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::term::{Addr, Flavor, LabelBinOp, Term, TermRef};

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Type {
    Bool,
    Unit,
    LabelTy,
    Arrow(Box<Type>, Box<Type>),
    Lio(Box<Type>),
    Labeled(Box<Type>),
    Ref(Flavor, Box<Type>),
    Bag(Vec<Type>),
    Var(u32),
}

impl Type {
    pub fn lio(t: Type) -> Type {
        Type::Lio(Box::new(t))
    }
    pub fn arrow(a: Type, b: Type) -> Type {
        Type::Arrow(Box::new(a), Box::new(b))
    }
    pub fn labeled(t: Type) -> Type {
        Type::Labeled(Box::new(t))
    }
    pub fn reference(s: Flavor, t: Type) -> Type {
        Type::Ref(s, Box::new(t))
    }

    pub fn is_ground(&self) -> bool {
        match self {
            Type::Bool | Type::Unit | Type::LabelTy => true,
            Type::Arrow(a, b) => a.is_ground() && b.is_ground(),
            Type::Lio(t) | Type::Labeled(t) | Type::Ref(_, t) => t.is_ground(),
            Type::Bag(ts) => ts.iter().all(|t| t.is_ground()),
            Type::Var(_) => false,
        }
    }
}

impl std::fmt::Display for Type {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Type::Bool => write!(f, "Bool"),
            Type::Unit => write!(f, "()"),
            Type::LabelTy => write!(f, "Label"),
            Type::Arrow(a, b) => write!(f, "({a} -> {b})"),
            Type::Lio(t) => write!(f, "(LIO {t})"),
            Type::Labeled(t) => write!(f, "(Labeled {t})"),
            Type::Ref(Flavor::Fi, t) => write!(f, "(Ref fi {t})"),
            Type::Ref(Flavor::Fs, t) => write!(f, "(Ref fs {t})"),
            Type::Bag(ts) => {
                write!(f, "<")?;
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ">")
            }
            Type::Var(v) => write!(f, "?{v}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("unbound variable `{0}`")]
    UnboundVar(String),
    #[error("address {0:?} is not in scope of the store typing")]
    UnboundAddr(Addr),
    #[error("cannot unify `{0}` with `{1}`")]
    Mismatch(String, String),
    #[error("occurs check failed: type would be infinite")]
    Occurs,
    #[error("bag elements must be flow-sensitive references, got `{0}`")]
    BagElement(String),
    #[error("type is not uniquely determined")]
    Ambiguous,
}

/// Store typing: address to content type, for both flavors.
pub type StoreTyping = BTreeMap<Addr, Type>;

/// Variable typing environment.
pub type TypeEnv = HashMap<String, Type>;

struct Infer {
    next: u32,
    subst: HashMap<u32, Type>,
}

impl Infer {
    fn fresh(&mut self) -> Type {
        self.next += 1;
        Type::Var(self.next - 1)
    }

    fn resolve(&self, t: &Type) -> Type {
        match t {
            Type::Var(v) => match self.subst.get(v) {
                Some(u) => self.resolve(&u.clone()),
                None => t.clone(),
            },
            Type::Arrow(a, b) => Type::arrow(self.resolve(a), self.resolve(b)),
            Type::Lio(a) => Type::lio(self.resolve(a)),
            Type::Labeled(a) => Type::labeled(self.resolve(a)),
            Type::Ref(s, a) => Type::reference(*s, self.resolve(a)),
            Type::Bag(ts) => Type::Bag(ts.iter().map(|t| self.resolve(t)).collect()),
            _ => t.clone(),
        }
    }

    fn occurs(&self, v: u32, t: &Type) -> bool {
        match self.resolve(t) {
            Type::Var(u) => u == v,
            Type::Arrow(a, b) => self.occurs(v, &a) || self.occurs(v, &b),
            Type::Lio(a) | Type::Labeled(a) | Type::Ref(_, a) => self.occurs(v, &a),
            Type::Bag(ts) => ts.iter().any(|t| self.occurs(v, t)),
            _ => false,
        }
    }

    fn unify(&mut self, a: &Type, b: &Type) -> Result<(), TypeError> {
        let (a, b) = (self.resolve(a), self.resolve(b));
        match (&a, &b) {
            (Type::Var(v), _) => {
                if a == b {
                    return Ok(());
                }
                if self.occurs(*v, &b) {
                    return Err(TypeError::Occurs);
                }
                self.subst.insert(*v, b);
                Ok(())
            }
            (_, Type::Var(_)) => self.unify(&b, &a),
            (Type::Bool, Type::Bool) | (Type::Unit, Type::Unit) | (Type::LabelTy, Type::LabelTy) => {
                Ok(())
            }
            (Type::Arrow(a1, a2), Type::Arrow(b1, b2)) => {
                self.unify(a1, b1)?;
                self.unify(a2, b2)
            }
            (Type::Lio(x), Type::Lio(y)) | (Type::Labeled(x), Type::Labeled(y)) => self.unify(x, y),
            (Type::Ref(s, x), Type::Ref(t, y)) if s == t => self.unify(x, y),
            (Type::Bag(xs), Type::Bag(ys)) if xs.len() == ys.len() => {
                for (x, y) in xs.iter().zip(ys) {
                    self.unify(x, y)?;
                }
                Ok(())
            }
            _ => Err(TypeError::Mismatch(a.to_string(), b.to_string())),
        }
    }
}

/// Infer the type of `t` under store typing `delta` and environment `gamma`.
///
/// Returns the resolved type; no groundness requirement is imposed here so
/// intermediate machine terms (which may contain `Diverge` placeholders)
/// check as well. Use [`typecheck_program`] for top-level programs.
pub fn typecheck(delta: &StoreTyping, gamma: &TypeEnv, t: &Term) -> Result<Type, TypeError> {
    let mut inf = Infer {
        next: 0,
        subst: HashMap::new(),
    };
    let mut gamma2: HashMap<String, Type> = gamma.clone();
    let ty = infer(&mut inf, delta, &mut gamma2, t)?;
    Ok(inf.resolve(&ty))
}

/// Typecheck a top-level program: must have some `LIO τ` type with τ ground.
pub fn typecheck_program(delta: &StoreTyping, t: &Term) -> Result<Type, TypeError> {
    let ty = typecheck(delta, &TypeEnv::new(), t)?;
    match &ty {
        Type::Lio(inner) if inner.is_ground() => Ok(ty),
        Type::Lio(_) => Err(TypeError::Ambiguous),
        _ => Err(TypeError::Mismatch(ty.to_string(), "(LIO _)".to_string())),
    }
}

fn infer(
    inf: &mut Infer,
    delta: &StoreTyping,
    gamma: &mut HashMap<String, Type>,
    t: &Term,
) -> Result<Type, TypeError> {
    use Term::*;
    match t {
        True | False => Ok(Type::Bool),
        Unit => Ok(Type::Unit),
        LabelLit(_) => Ok(Type::LabelTy),
        Var(x) => gamma
            .get(x)
            .cloned()
            .ok_or_else(|| TypeError::UnboundVar(x.clone())),
        Lam(x, body) => {
            let a = inf.fresh();
            let shadowed = gamma.insert(x.clone(), a.clone());
            let b = infer(inf, delta, gamma, body);
            match shadowed {
                Some(old) => {
                    gamma.insert(x.clone(), old);
                }
                None => {
                    gamma.remove(x);
                }
            }
            Ok(Type::arrow(a, b?))
        }
        App(f, a) => {
            let tf = infer(inf, delta, gamma, f)?;
            let ta = infer(inf, delta, gamma, a)?;
            let out = inf.fresh();
            inf.unify(&tf, &Type::arrow(ta, out.clone()))?;
            Ok(out)
        }
        Fix(f) => {
            let tf = infer(inf, delta, gamma, f)?;
            let a = inf.fresh();
            inf.unify(&tf, &Type::arrow(a.clone(), a.clone()))?;
            Ok(a)
        }
        If(c, th, el) => {
            let tc = infer(inf, delta, gamma, c)?;
            inf.unify(&tc, &Type::Bool)?;
            let tt = infer(inf, delta, gamma, th)?;
            let te = infer(inf, delta, gamma, el)?;
            inf.unify(&tt, &te)?;
            Ok(tt)
        }
        LabelOp(op, a, b) => {
            let ta = infer(inf, delta, gamma, a)?;
            let tb = infer(inf, delta, gamma, b)?;
            inf.unify(&ta, &Type::LabelTy)?;
            inf.unify(&tb, &Type::LabelTy)?;
            Ok(match op {
                LabelBinOp::Flows => Type::Bool,
                _ => Type::LabelTy,
            })
        }
        Return(x) => {
            let tx = infer(inf, delta, gamma, x)?;
            Ok(Type::lio(tx))
        }
        Bind(m, k) => {
            let tm = infer(inf, delta, gamma, m)?;
            let tk = infer(inf, delta, gamma, k)?;
            let a = inf.fresh();
            let b = inf.fresh();
            inf.unify(&tm, &Type::lio(a.clone()))?;
            inf.unify(&tk, &Type::arrow(a, Type::lio(b.clone())))?;
            Ok(Type::lio(b))
        }
        GetLabel => Ok(Type::lio(Type::LabelTy)),
        Label(l, x) => {
            let tl = infer(inf, delta, gamma, l)?;
            inf.unify(&tl, &Type::LabelTy)?;
            let tx = infer(inf, delta, gamma, x)?;
            Ok(Type::lio(Type::labeled(tx)))
        }
        Unlabel(x) => {
            let tx = infer(inf, delta, gamma, x)?;
            let a = inf.fresh();
            inf.unify(&tx, &Type::labeled(a.clone()))?;
            Ok(Type::lio(a))
        }
        LabelOf(x) => {
            let tx = infer(inf, delta, gamma, x)?;
            let a = inf.fresh();
            inf.unify(&tx, &Type::labeled(a))?;
            Ok(Type::LabelTy)
        }
        ToLabeled(l, m) => {
            let tl = infer(inf, delta, gamma, l)?;
            inf.unify(&tl, &Type::LabelTy)?;
            let tm = infer(inf, delta, gamma, m)?;
            let a = inf.fresh();
            inf.unify(&tm, &Type::lio(a.clone()))?;
            Ok(Type::lio(Type::labeled(a)))
        }
        NewRef(s, l, x) => {
            let tl = infer(inf, delta, gamma, l)?;
            inf.unify(&tl, &Type::LabelTy)?;
            let tx = infer(inf, delta, gamma, x)?;
            Ok(Type::lio(Type::reference(*s, tx)))
        }
        ReadRef(s, r) => {
            let tr = infer(inf, delta, gamma, r)?;
            let a = inf.fresh();
            inf.unify(&tr, &Type::reference(*s, a.clone()))?;
            Ok(Type::lio(a))
        }
        WriteRef(s, r, x) => {
            let tr = infer(inf, delta, gamma, r)?;
            let tx = infer(inf, delta, gamma, x)?;
            inf.unify(&tr, &Type::reference(*s, tx))?;
            Ok(Type::lio(Type::Unit))
        }
        WriteRefDiv(r, x) => {
            let tr = infer(inf, delta, gamma, r)?;
            let tx = infer(inf, delta, gamma, x)?;
            inf.unify(&tr, &Type::reference(Flavor::Fi, tx))?;
            Ok(Type::lio(Type::Unit))
        }
        LabelOfRef(s, r) => {
            let tr = infer(inf, delta, gamma, r)?;
            let a = inf.fresh();
            inf.unify(&tr, &Type::reference(*s, a))?;
            Ok(match s {
                Flavor::Fi => Type::LabelTy,
                Flavor::Fs => Type::lio(Type::LabelTy),
            })
        }
        CopyRef(r1, r2) => {
            let t1 = infer(inf, delta, gamma, r1)?;
            let t2 = infer(inf, delta, gamma, r2)?;
            let a = inf.fresh();
            inf.unify(&t1, &Type::reference(Flavor::Fi, a.clone()))?;
            inf.unify(&t2, &Type::reference(Flavor::Fi, a))?;
            Ok(Type::lio(Type::Unit))
        }
        Upgrade(r, l) | Downgrade(r, l) => {
            let tr = infer(inf, delta, gamma, r)?;
            let a = inf.fresh();
            inf.unify(&tr, &Type::reference(Flavor::Fs, a))?;
            let tl = infer(inf, delta, gamma, l)?;
            inf.unify(&tl, &Type::LabelTy)?;
            Ok(Type::lio(Type::Unit))
        }
        WithRefs(bag, m) => {
            // Restrict the store typing when the bag is a literal value, per
            // the scoped-store type rule.
            let restricted: Option<StoreTyping> = literal_bag_addrs(bag).map(|addrs| {
                delta
                    .iter()
                    .filter(|(a, _)| addrs.contains(a))
                    .map(|(a, t)| (*a, t.clone()))
                    .collect()
            });
            let delta2 = restricted.as_ref().unwrap_or(delta);
            let tb = infer(inf, delta2, gamma, bag)?;
            match inf.resolve(&tb) {
                Type::Bag(elems) => {
                    for e in &elems {
                        let e = inf.resolve(e);
                        match e {
                            Type::Ref(Flavor::Fs, _) | Type::Var(_) => {}
                            other => return Err(TypeError::BagElement(other.to_string())),
                        }
                    }
                }
                Type::Var(_) => {}
                other => return Err(TypeError::BagElement(other.to_string())),
            }
            let tm = infer(inf, delta2, gamma, m)?;
            let a = inf.fresh();
            inf.unify(&tm, &Type::lio(a.clone()))?;
            Ok(Type::lio(a))
        }
        Fork(m) => {
            let tm = infer(inf, delta, gamma, m)?;
            let a = inf.fresh();
            inf.unify(&tm, &Type::lio(a))?;
            Ok(Type::lio(Type::Unit))
        }
        Bag(elems) => {
            let mut tys = Vec::new();
            for e in elems {
                let te = infer(inf, delta, gamma, e)?;
                let a = inf.fresh();
                inf.unify(&te, &Type::reference(Flavor::Fs, a))?;
                tys.push(te);
            }
            Ok(Type::Bag(tys))
        }
        LioTcb(x) => {
            let tx = infer(inf, delta, gamma, x)?;
            Ok(Type::lio(tx))
        }
        LbTcb(_, x) => {
            let tx = infer(inf, delta, gamma, x)?;
            Ok(Type::labeled(tx))
        }
        RefFiTcb(_, a) => match delta.get(a) {
            Some(ct) => Ok(Type::reference(Flavor::Fi, ct.clone())),
            None => Err(TypeError::UnboundAddr(*a)),
        },
        RefFsTcb(a) => match delta.get(a) {
            Some(ct) => Ok(Type::reference(Flavor::Fs, ct.clone())),
            None => Err(TypeError::UnboundAddr(*a)),
        },
        WrapTcb(x) | Unwrap(x) => infer(inf, delta, gamma, x),
        UpgradeStore(l) => {
            let tl = infer(inf, delta, gamma, l)?;
            inf.unify(&tl, &Type::LabelTy)?;
            Ok(Type::lio(Type::Unit))
        }
        Diverge | Bottom | Hole => Ok(inf.fresh()),
    }
}

fn literal_bag_addrs(bag: &Term) -> Option<Vec<Addr>> {
    match bag {
        Term::Bag(elems) => {
            let mut addrs = Vec::new();
            for e in elems {
                match &**e {
                    Term::RefFsTcb(a) => addrs.push(*a),
                    _ => return None,
                }
            }
            Some(addrs)
        }
        _ => None,
    }
}

/// Reconstruct a store typing from store cells by iterating until every
/// cell's content resolves. Cells holding `Diverge`/`Bottom` placeholders
/// have no determinable type and are skipped.
pub fn infer_store_typing(cells: impl Iterator<Item = (Addr, TermRef)>) -> StoreTyping {
    let mut delta = StoreTyping::new();
    let mut pending: Vec<(Addr, TermRef)> = cells.collect();
    loop {
        let mut progressed = false;
        let mut still = Vec::new();
        for (a, t) in pending {
            match typecheck(&delta, &TypeEnv::new(), &t) {
                Ok(ty) if ty.is_ground() => {
                    delta.insert(a, ty);
                    progressed = true;
                }
                _ => still.push((a, t)),
            }
        }
        pending = still;
        if pending.is_empty() || !progressed {
            break;
        }
    }
    delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::build::*;

    fn check(t: &TermRef) -> Result<Type, TypeError> {
        typecheck(&StoreTyping::new(), &TypeEnv::new(), t)
    }

    #[test]
    fn return_bool_is_lio_bool() {
        assert_eq!(check(&ret(bool_lit(true))).unwrap(), Type::lio(Type::Bool));
    }

    #[test]
    fn identity_applied_at_bool() {
        let t = app(lam("x", var("x")), bool_lit(true));
        assert_eq!(check(&t).unwrap(), Type::Bool);
        // The lambda alone, applied at Bool, has Bool -> Bool.
        let mut inf = Infer {
            next: 0,
            subst: HashMap::new(),
        };
        let mut gamma = HashMap::new();
        let lam_t = lam("x", var("x"));
        let ty = infer(&mut inf, &StoreTyping::new(), &mut gamma, &lam_t).unwrap();
        inf.unify(&ty, &Type::arrow(Type::Bool, inf.fresh())).unwrap();
        assert_eq!(inf.resolve(&ty), Type::arrow(Type::Bool, Type::Bool));
    }

    #[test]
    fn withrefs_empty_bag_hides_addresses() {
        // withRefs <> (readRef fs #addr0) must fail: the store typing is
        // restricted to the empty bag, so addr 0 is unbound.
        let mut delta = StoreTyping::new();
        delta.insert(Addr(0), Type::Bool);
        let t = with_refs(bag(vec![]), read_ref(Flavor::Fs, ref_fs(Addr(0))));
        let err = typecheck(&delta, &TypeEnv::new(), &t).unwrap_err();
        assert!(matches!(err, TypeError::UnboundAddr(Addr(0))), "{err}");
        // With the address in the bag it checks fine.
        let t2 = with_refs(
            bag(vec![ref_fs(Addr(0))]),
            read_ref(Flavor::Fs, ref_fs(Addr(0))),
        );
        assert_eq!(
            typecheck(&delta, &TypeEnv::new(), &t2).unwrap(),
            Type::lio(Type::Bool)
        );
    }

    #[test]
    fn bag_elements_must_be_fs_refs() {
        let mut delta = StoreTyping::new();
        delta.insert(Addr(0), Type::Bool);
        let t = with_refs(bag(vec![bool_lit(true)]), ret(unit()));
        assert!(typecheck(&delta, &TypeEnv::new(), &t).is_err());
    }

    #[test]
    fn unbound_variable_fails() {
        assert!(matches!(check(&var("zzz")), Err(TypeError::UnboundVar(_))));
    }

    #[test]
    fn program_requires_ground_lio() {
        assert!(typecheck_program(&StoreTyping::new(), &ret(bool_lit(true))).is_ok());
        assert!(typecheck_program(&StoreTyping::new(), &bool_lit(true)).is_err());
    }

    #[test]
    fn labelof_fs_is_monadic_fi_is_pure() {
        let mut delta = StoreTyping::new();
        delta.insert(Addr(0), Type::Bool);
        delta.insert(Addr(1), Type::Bool);
        let lat = crate::lattice::Lattice::two_point();
        let h = lat.label("H").unwrap();
        let fi = label_of_ref(Flavor::Fi, ref_fi(h, Addr(0)));
        let fs = label_of_ref(Flavor::Fs, ref_fs(Addr(1)));
        assert_eq!(typecheck(&delta, &TypeEnv::new(), &fi).unwrap(), Type::LabelTy);
        assert_eq!(
            typecheck(&delta, &TypeEnv::new(), &fs).unwrap(),
            Type::lio(Type::LabelTy)
        );
    }
}
