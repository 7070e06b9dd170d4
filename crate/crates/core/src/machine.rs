//! Sequential small-step engine.
//!
//! One [`Machine::step`] performs exactly one reduction of the configuration
//! `<Σ | t>`: the term is decomposed along the bind spine (the monadic
//! evaluation context), the unique applicable rule fires, and rule premises
//! that fail label checks end the run with a monitor error. Two rules carry
//! big-step premises and therefore run a nested evaluation inside a single
//! step: `toLabeled` evaluates its body to completion, and the auto-upgrade
//! variant of `unlabel` first runs the store sweep. Nested evaluations share
//! the fuel budget of the enclosing run.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use crate::lattice::{Label, Lattice};
use crate::pretty::pretty_truncated;
use crate::term::{subst, Addr, Flavor, LabelBinOp, Term, TermRef};

/// Which rule family is enabled.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Calculus {
    Base,
    Fi,
    Fs,
    FsAu,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Security {
    Secure,
    /// Unsound reference policy: a flow-sensitive write always succeeds and
    /// raises the reference label to the current label. Exists to
    /// demonstrate the label-change covert channel.
    Naive,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VariantConfig {
    pub calculus: Calculus,
    pub security: Security,
    pub fuel: u64,
    /// `toLabeled` is struck from the calculus under the concurrent runtime.
    pub allow_tolabeled: bool,
    /// Collapse nested `withRefs` blocks (concurrent runtime only).
    pub withrefs_opt: bool,
    /// Test-only alternative for the flow-sensitive write check: require
    /// `l_cur ⊑ l` and `l_cur ⊑ l'` independently instead of
    /// `l_cur ⊑ l ⊔ l'`.
    pub split_write_check: bool,
}

pub const DEFAULT_FUEL: u64 = 100_000;

impl VariantConfig {
    pub fn new(calculus: Calculus, security: Security) -> Self {
        VariantConfig {
            calculus,
            security,
            fuel: DEFAULT_FUEL,
            allow_tolabeled: true,
            withrefs_opt: false,
            split_write_check: false,
        }
    }

    pub fn with_fuel(mut self, fuel: u64) -> Self {
        self.fuel = fuel;
        self
    }

    /// Configuration used by the concurrent scheduler for thread steps.
    pub fn concurrent(calculus: Calculus, security: Security) -> Self {
        VariantConfig {
            allow_tolabeled: false,
            withrefs_opt: true,
            ..VariantConfig::new(calculus, security)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiCell {
    pub label: Label,
    pub term: TermRef,
}

/// A flow-sensitive cell `Lb l_o (Lb l_d v)`: the mutable reference label
/// `l_d` is itself protected by the immutable label-on-the-label `l_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct FsCell {
    pub label_on_label: Label,
    pub label: Label,
    pub term: TermRef,
}

pub type FiStore = BTreeMap<Addr, FiCell>;
pub type FsStore = BTreeMap<Addr, FsCell>;

#[derive(Clone, Debug, PartialEq)]
pub struct MachineState {
    pub l_cur: Label,
    pub mu_fi: FiStore,
    pub mu_fs: FsStore,
    pub next_addr: u64,
    pub mode: VariantConfig,
}

impl MachineState {
    pub fn new(l_cur: Label, mode: VariantConfig) -> Self {
        MachineState {
            l_cur,
            mu_fi: FiStore::new(),
            mu_fs: FsStore::new(),
            next_addr: 0,
            mode,
        }
    }

    pub fn alloc(&mut self) -> Addr {
        let a = Addr(self.next_addr);
        self.next_addr += 1;
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    pub state: MachineState,
    pub term: TermRef,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ErrorKind {
    LabelCheck,
    StuckRedex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonitorErr {
    pub kind: ErrorKind,
    pub rule: &'static str,
    pub detail: String,
}

impl std::fmt::Display for MonitorErr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            ErrorKind::LabelCheck => "label check failed",
            ErrorKind::StuckRedex => "stuck redex",
        };
        write!(f, "{kind} in rule {}: {}", self.rule, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Value(TermRef, MachineState),
    Diverged(MachineState),
    MonitorError(MonitorErr, MachineState),
    FuelExhausted,
}

impl Outcome {
    pub fn kind_str(&self) -> &'static str {
        match self {
            Outcome::Value(..) => "value",
            Outcome::Diverged(_) => "diverged",
            Outcome::MonitorError(..) => "monitor-error",
            Outcome::FuelExhausted => "fuel-exhausted",
        }
    }

    pub fn final_state(&self) -> Option<&MachineState> {
        match self {
            Outcome::Value(_, s) | Outcome::Diverged(s) | Outcome::MonitorError(_, s) => Some(s),
            Outcome::FuelExhausted => None,
        }
    }
}

#[derive(Debug)]
pub enum StepResult {
    Next(Configuration),
    Terminal(Outcome),
    Fork { child: TermRef, cont: Configuration },
}

/// Collects one formatted line per step.
#[derive(Default, Debug)]
pub struct Tracer {
    pub lines: Vec<String>,
    step: u64,
}

impl Tracer {
    pub fn new() -> Self {
        Tracer::default()
    }
}

enum StepOut {
    Next(MachineState, TermRef, &'static str),
    Terminal(Outcome),
    Fork {
        child: TermRef,
        state: MachineState,
        term: TermRef,
        rule: &'static str,
    },
}

enum PureStop {
    Diverge,
    Stuck(String),
}

type PureStep = Result<(TermRef, &'static str), PureStop>;

pub struct Machine {
    pub lattice: Rc<Lattice>,
}

impl Machine {
    pub fn new(lattice: Rc<Lattice>) -> Self {
        Machine { lattice }
    }

    fn lbl(&self, l: Label) -> &str {
        self.lattice.label_name(l)
    }

    fn stuck(&self, state: MachineState, rule: &'static str, detail: impl Into<String>) -> StepOut {
        StepOut::Terminal(Outcome::MonitorError(
            MonitorErr {
                kind: ErrorKind::StuckRedex,
                rule,
                detail: detail.into(),
            },
            state,
        ))
    }

    fn label_check_fail(
        &self,
        state: MachineState,
        rule: &'static str,
        from: Label,
        to: Label,
    ) -> StepOut {
        let detail = format!("{} does not flow to {}", self.lbl(from), self.lbl(to));
        StepOut::Terminal(Outcome::MonitorError(
            MonitorErr {
                kind: ErrorKind::LabelCheck,
                rule,
                detail,
            },
            state,
        ))
    }

    fn calculus_at_least(&self, state: &MachineState, needed: Calculus) -> bool {
        state.mode.calculus >= needed
    }

    /// One small step of the pure (non-monadic) reduction relation,
    /// descending into the leftmost pure evaluation position.
    fn pure_step(&self, t: &TermRef) -> PureStep {
        use Term::*;
        let rebuild = |sub: PureStep, f: &dyn Fn(TermRef) -> Term| -> PureStep {
            let (t2, rule) = sub?;
            Ok((Rc::new(f(t2)), rule))
        };
        match &**t {
            Diverge => Err(PureStop::Diverge),
            Var(x) => Err(PureStop::Stuck(format!("unbound variable `{x}`"))),
            App(f, a) => {
                if !f.is_value() {
                    let (fa, aa) = (f.clone(), a.clone());
                    return rebuild(self.pure_step(&fa), &|f2| App(f2, aa.clone()));
                }
                match &**f {
                    Lam(x, body) => Ok((subst(body, x, a), "app")),
                    other => Err(PureStop::Stuck(format!(
                        "application of a non-function ({})",
                        describe(other)
                    ))),
                }
            }
            Fix(f) => {
                if !f.is_value() {
                    return rebuild(self.pure_step(f), &|f2| Fix(f2));
                }
                match &**f {
                    Lam(x, body) => Ok((subst(body, x, t), "fix")),
                    other => Err(PureStop::Stuck(format!(
                        "fix of a non-function ({})",
                        describe(other)
                    ))),
                }
            }
            If(c, th, el) => {
                if !c.is_value() {
                    let (t2, e2) = (th.clone(), el.clone());
                    return rebuild(self.pure_step(c), &|c2| If(c2, t2.clone(), e2.clone()));
                }
                match &**c {
                    True => Ok((th.clone(), "ifTrue")),
                    False => Ok((el.clone(), "ifFalse")),
                    other => Err(PureStop::Stuck(format!(
                        "if on a non-boolean ({})",
                        describe(other)
                    ))),
                }
            }
            LabelOp(op, a, b) => {
                if !a.is_value() {
                    let (op2, b2) = (*op, b.clone());
                    return rebuild(self.pure_step(a), &|a2| LabelOp(op2, a2, b2.clone()));
                }
                if !b.is_value() {
                    let (op2, a2) = (*op, a.clone());
                    return rebuild(self.pure_step(b), &|b2| LabelOp(op2, a2.clone(), b2));
                }
                match (&**a, &**b) {
                    (LabelLit(x), LabelLit(y)) => {
                        let out = match op {
                            LabelBinOp::Join => LabelLit(self.lattice.join(*x, *y)),
                            LabelBinOp::Meet => LabelLit(self.lattice.meet(*x, *y)),
                            LabelBinOp::Flows => {
                                if self.lattice.flows(*x, *y) {
                                    True
                                } else {
                                    False
                                }
                            }
                        };
                        Ok((Rc::new(out), "labelOp"))
                    }
                    _ => Err(PureStop::Stuck("label op on non-labels".into())),
                }
            }
            LabelOf(x) => {
                if !x.is_value() {
                    return rebuild(self.pure_step(x), &|x2| LabelOf(x2));
                }
                match &**x {
                    LbTcb(l, _) => Ok((Rc::new(LabelLit(*l)), "labelOf")),
                    other => Err(PureStop::Stuck(format!(
                        "labelOf of a non-labeled value ({})",
                        describe(other)
                    ))),
                }
            }
            LabelOfRef(Flavor::Fi, r) => {
                if !r.is_value() {
                    return rebuild(self.pure_step(r), &|r2| LabelOfRef(Flavor::Fi, r2));
                }
                match &**r {
                    RefFiTcb(l, _) => Ok((Rc::new(LabelLit(*l)), "labelOf-fi")),
                    other => Err(PureStop::Stuck(format!(
                        "labelOf-fi of a non-reference ({})",
                        describe(other)
                    ))),
                }
            }
            Unwrap(x) => {
                if !x.is_value() {
                    return rebuild(self.pure_step(x), &|x2| Unwrap(x2));
                }
                match &**x {
                    WrapTcb(inner) => Ok((inner.clone(), "unwrap")),
                    other => Err(PureStop::Stuck(format!(
                        "unwrap of a non-wrapped value ({})",
                        describe(other)
                    ))),
                }
            }
            Bag(elems) => {
                let idx = elems.iter().position(|e| !e.is_value());
                match idx {
                    Some(i) => {
                        let (sub, rule) = self.pure_step(&elems[i])?;
                        let mut elems2 = elems.clone();
                        elems2[i] = sub;
                        Ok((Rc::new(Bag(elems2)), rule))
                    }
                    None => Err(PureStop::Stuck("bag is already a value".into())),
                }
            }
            other if other.is_value() => {
                Err(PureStop::Stuck(format!("value in redex position ({})", describe(other))))
            }
            other => Err(PureStop::Stuck(format!(
                "monadic term in pure position ({})",
                describe(other)
            ))),
        }
    }

    /// Evaluate a pure evaluation position inside a monadic head.
    fn pure_in(
        &self,
        state: MachineState,
        sub: &TermRef,
        rebuild: impl FnOnce(TermRef) -> TermRef,
    ) -> StepOut {
        match self.pure_step(sub) {
            Ok((t2, rule)) => StepOut::Next(state, rebuild(t2), rule),
            Err(PureStop::Diverge) => StepOut::Terminal(Outcome::Diverged(state)),
            Err(PureStop::Stuck(msg)) => self.stuck(state, "pure", msg),
        }
    }

    /// Decompose along the bind spine and fire the rule at the bottom.
    fn step_spine(
        &self,
        state: MachineState,
        term: &TermRef,
        fuel: &mut u64,
        tracer: &mut Option<&mut Tracer>,
    ) -> StepOut {
        use Term::*;
        if let Bind(m, k) = &**term {
            if let LioTcb(t1) = &**m {
                return StepOut::Next(state, Rc::new(App(k.clone(), t1.clone())), "bind");
            }
            let k = k.clone();
            return match self.step_spine(state, m, fuel, tracer) {
                StepOut::Next(st, m2, rule) => StepOut::Next(st, Rc::new(Bind(m2, k)), rule),
                StepOut::Terminal(o) => StepOut::Terminal(o),
                StepOut::Fork {
                    child,
                    state,
                    term,
                    rule,
                } => StepOut::Fork {
                    child,
                    state,
                    term: Rc::new(Bind(term, k)),
                    rule,
                },
            };
        }
        self.step_head(state, term, fuel, tracer)
    }

    fn step_head(
        &self,
        mut state: MachineState,
        term: &TermRef,
        fuel: &mut u64,
        tracer: &mut Option<&mut Tracer>,
    ) -> StepOut {
        use Term::*;
        match &**term {
            Return(x) => StepOut::Next(state, Rc::new(LioTcb(x.clone())), "return"),
            GetLabel => {
                let l = state.l_cur;
                StepOut::Next(state, Rc::new(Return(Rc::new(LabelLit(l)))), "getLabel")
            }
            LioTcb(_) => self.stuck(state, "bind", "computation already finished".into()),
            Label(lt, body) => {
                if !lt.is_value() {
                    let body = body.clone();
                    return self.pure_in(state, lt, |l2| Rc::new(Label(l2, body)));
                }
                match &**lt {
                    LabelLit(l) => {
                        if !self.lattice.flows(state.l_cur, *l) {
                            return self.label_check_fail(state, "label", state.l_cur, *l);
                        }
                        StepOut::Next(
                            state,
                            Rc::new(Return(Rc::new(LbTcb(*l, body.clone())))),
                            "label",
                        )
                    }
                    _ => self.stuck(state, "label", "label argument is not a label"),
                }
            }
            Unlabel(x) => {
                if !x.is_value() {
                    return self.pure_in(state, x, |x2| Rc::new(Unlabel(x2)));
                }
                match &**x {
                    LbTcb(l, inner) => {
                        let l_new = self.lattice.join(state.l_cur, *l);
                        if state.mode.calculus == Calculus::FsAu {
                            let sweep = Rc::new(UpgradeStore(Rc::new(LabelLit(l_new))));
                            match self.run_sub(state, sweep, fuel, tracer) {
                                Ok((mut st2, _)) => {
                                    st2.l_cur = l_new;
                                    StepOut::Next(
                                        st2,
                                        Rc::new(Return(inner.clone())),
                                        "unlabel-au",
                                    )
                                }
                                Err(o) => StepOut::Terminal(o),
                            }
                        } else {
                            state.l_cur = l_new;
                            StepOut::Next(state, Rc::new(Return(inner.clone())), "unlabel")
                        }
                    }
                    other => self.stuck(
                        state,
                        "unlabel",
                        format!("unlabel of a non-labeled value ({})", describe(other)),
                    ),
                }
            }
            ToLabeled(lt, body) => {
                if !state.mode.allow_tolabeled {
                    return self.stuck(
                        state,
                        "toLabeled",
                        "toLabeled is not available in the concurrent runtime",
                    );
                }
                if !lt.is_value() {
                    let body = body.clone();
                    return self.pure_in(state, lt, |l2| Rc::new(ToLabeled(l2, body)));
                }
                let l = match &**lt {
                    LabelLit(l) => *l,
                    _ => return self.stuck(state, "toLabeled", "target is not a label"),
                };
                if !self.lattice.flows(state.l_cur, l) {
                    return self.label_check_fail(state, "toLabeled", state.l_cur, l);
                }
                let outer_l_cur = state.l_cur;
                match self.run_sub(state, body.clone(), fuel, tracer) {
                    Ok((inner_state, result)) => {
                        if !self.lattice.flows(inner_state.l_cur, l) {
                            let from = inner_state.l_cur;
                            return self.label_check_fail(inner_state, "toLabeled", from, l);
                        }
                        // Σ ⋉ Σ': outer current label, inner stores.
                        let merged = MachineState {
                            l_cur: outer_l_cur,
                            ..inner_state
                        };
                        StepOut::Next(
                            merged,
                            Rc::new(Label(Rc::new(LabelLit(l)), result)),
                            "toLabeled",
                        )
                    }
                    Err(o) => StepOut::Terminal(o),
                }
            }
            NewRef(s, lt, body) => {
                let rule = match s {
                    Flavor::Fi => "newRef-fi",
                    Flavor::Fs => "newRef-fs",
                };
                let needed = match s {
                    Flavor::Fi => Calculus::Fi,
                    Flavor::Fs => Calculus::Fs,
                };
                if !self.calculus_at_least(&state, needed) {
                    return self.stuck(state, rule, "not available in this calculus");
                }
                if !lt.is_value() {
                    let (s2, body) = (*s, body.clone());
                    return self.pure_in(state, lt, move |l2| Rc::new(NewRef(s2, l2, body)));
                }
                let l = match &**lt {
                    LabelLit(l) => *l,
                    _ => return self.stuck(state, rule, "label argument is not a label"),
                };
                if !self.lattice.flows(state.l_cur, l) {
                    return self.label_check_fail(state, rule, state.l_cur, l);
                }
                let a = state.alloc();
                match s {
                    Flavor::Fi => {
                        state.mu_fi.insert(
                            a,
                            FiCell {
                                label: l,
                                term: body.clone(),
                            },
                        );
                        StepOut::Next(state, Rc::new(Return(Rc::new(RefFiTcb(l, a)))), rule)
                    }
                    Flavor::Fs => {
                        state.mu_fs.insert(
                            a,
                            FsCell {
                                label_on_label: state.l_cur,
                                label: l,
                                term: body.clone(),
                            },
                        );
                        StepOut::Next(state, Rc::new(Return(Rc::new(RefFsTcb(a)))), rule)
                    }
                }
            }
            ReadRef(s, r) => {
                let rule = match s {
                    Flavor::Fi => "readRef-fi",
                    Flavor::Fs => "readRef-fs",
                };
                if !r.is_value() {
                    let s2 = *s;
                    return self.pure_in(state, r, move |r2| Rc::new(ReadRef(s2, r2)));
                }
                match (s, &**r) {
                    (Flavor::Fi, RefFiTcb(_, a)) => match state.mu_fi.get(a) {
                        Some(cell) => {
                            let lb = Rc::new(LbTcb(cell.label, cell.term.clone()));
                            StepOut::Next(state, Rc::new(Unlabel(lb)), rule)
                        }
                        None => self.stuck(state, rule, format!("dangling address {}", a.0)),
                    },
                    (Flavor::Fs, RefFsTcb(a)) => match state.mu_fs.get(a) {
                        Some(cell) => {
                            let l2 = self.lattice.join(cell.label_on_label, cell.label);
                            let lb = Rc::new(LbTcb(l2, cell.term.clone()));
                            StepOut::Next(state, Rc::new(Unlabel(lb)), rule)
                        }
                        None => self.stuck(
                            state,
                            rule,
                            format!("address {} not visible in this store", a.0),
                        ),
                    },
                    _ => self.stuck(state, rule, "read of a non-reference"),
                }
            }
            WriteRef(s, r, body) => {
                let rule = match s {
                    Flavor::Fi => "writeRef-fi",
                    Flavor::Fs => "writeRef-fs",
                };
                if !r.is_value() {
                    let (s2, body) = (*s, body.clone());
                    return self.pure_in(state, r, move |r2| Rc::new(WriteRef(s2, r2, body)));
                }
                match (s, &**r) {
                    (Flavor::Fi, RefFiTcb(l, a)) => {
                        if !self.lattice.flows(state.l_cur, *l) {
                            return self.label_check_fail(state, rule, state.l_cur, *l);
                        }
                        state.mu_fi.insert(
                            *a,
                            FiCell {
                                label: *l,
                                term: body.clone(),
                            },
                        );
                        StepOut::Next(state, Rc::new(Return(Rc::new(Unit))), rule)
                    }
                    (Flavor::Fs, RefFsTcb(a)) => {
                        let cell = match state.mu_fs.get(a) {
                            Some(c) => c.clone(),
                            None => {
                                return self.stuck(
                                    state,
                                    rule,
                                    format!("address {} not visible in this store", a.0),
                                )
                            }
                        };
                        match state.mode.security {
                            Security::Naive => {
                                let raised = self.lattice.join(cell.label, state.l_cur);
                                state.mu_fs.insert(
                                    *a,
                                    FsCell {
                                        label_on_label: cell.label_on_label,
                                        label: raised,
                                        term: body.clone(),
                                    },
                                );
                                StepOut::Next(state, Rc::new(Return(Rc::new(Unit))), rule)
                            }
                            Security::Secure => {
                                let allowed = if state.mode.split_write_check {
                                    self.lattice.flows(state.l_cur, cell.label_on_label)
                                        && self.lattice.flows(state.l_cur, cell.label)
                                } else {
                                    let bound =
                                        self.lattice.join(cell.label_on_label, cell.label);
                                    self.lattice.flows(state.l_cur, bound)
                                };
                                if allowed {
                                    state.mu_fs.insert(
                                        *a,
                                        FsCell {
                                            term: body.clone(),
                                            ..cell
                                        },
                                    );
                                    StepOut::Next(state, Rc::new(Return(Rc::new(Unit))), rule)
                                } else {
                                    // Taint with the label on the label, then diverge.
                                    let lb = Rc::new(LbTcb(cell.label_on_label, Rc::new(Diverge)));
                                    StepOut::Next(state, Rc::new(Unlabel(lb)), "writeRef-fs-fail")
                                }
                            }
                        }
                    }
                    _ => self.stuck(state, rule, "write to a non-reference"),
                }
            }
            WriteRefDiv(r, body) => {
                if !r.is_value() {
                    let body = body.clone();
                    return self.pure_in(state, r, move |r2| Rc::new(WriteRefDiv(r2, body)));
                }
                match &**r {
                    RefFiTcb(l, a) => {
                        if self.lattice.flows(state.l_cur, *l) {
                            state.mu_fi.insert(
                                *a,
                                FiCell {
                                    label: *l,
                                    term: body.clone(),
                                },
                            );
                            StepOut::Next(state, Rc::new(Return(Rc::new(Unit))), "writeRef-fi")
                        } else {
                            let lb = Rc::new(LbTcb(*l, Rc::new(Diverge)));
                            StepOut::Next(state, Rc::new(Unlabel(lb)), "writeRef-fi-div")
                        }
                    }
                    _ => self.stuck(state, "writeRef-fi-div", "write to a non-reference"),
                }
            }
            LabelOfRef(Flavor::Fs, r) => {
                if !r.is_value() {
                    return self.pure_in(state, r, |r2| Rc::new(LabelOfRef(Flavor::Fs, r2)));
                }
                match &**r {
                    RefFsTcb(a) => match state.mu_fs.get(a) {
                        Some(cell) => {
                            let lb =
                                Rc::new(LbTcb(cell.label_on_label, Rc::new(LabelLit(cell.label))));
                            StepOut::Next(state, Rc::new(Unlabel(lb)), "labelOf-fs")
                        }
                        None => self.stuck(
                            state,
                            "labelOf-fs",
                            format!("address {} not visible in this store", a.0),
                        ),
                    },
                    _ => self.stuck(state, "labelOf-fs", "labelOf of a non-reference"),
                }
            }
            CopyRef(r1, r2) => {
                if !r1.is_value() {
                    let r2c = r2.clone();
                    return self.pure_in(state, r1, move |a| Rc::new(CopyRef(a, r2c)));
                }
                if !r2.is_value() {
                    let r1c = r1.clone();
                    return self.pure_in(state, r2, move |b| Rc::new(CopyRef(r1c, b)));
                }
                match (&**r1, &**r2) {
                    (RefFiTcb(l1, a1), RefFiTcb(l2, a2)) => {
                        if !self.lattice.flows(*l1, *l2) {
                            return self.label_check_fail(state, "copyRef", *l1, *l2);
                        }
                        if !self.lattice.flows(state.l_cur, *l2) {
                            return self.label_check_fail(state, "copyRef", state.l_cur, *l2);
                        }
                        let v1 = match state.mu_fi.get(a1) {
                            Some(c) => c.term.clone(),
                            None => {
                                return self.stuck(
                                    state,
                                    "copyRef",
                                    format!("dangling address {}", a1.0),
                                )
                            }
                        };
                        state.mu_fi.insert(
                            *a2,
                            FiCell {
                                label: *l2,
                                term: v1,
                            },
                        );
                        StepOut::Next(state, Rc::new(Return(Rc::new(Unit))), "copyRef")
                    }
                    _ => self.stuck(state, "copyRef", "copy between non-fi-references"),
                }
            }
            Upgrade(r, lt) => {
                if !self.calculus_at_least(&state, Calculus::Fs) {
                    return self.stuck(state, "upgradeRef", "not available in this calculus");
                }
                if !r.is_value() {
                    let ltc = lt.clone();
                    return self.pure_in(state, r, move |r2| Rc::new(Upgrade(r2, ltc)));
                }
                if !lt.is_value() {
                    let rc = r.clone();
                    return self.pure_in(state, lt, move |l2| Rc::new(Upgrade(rc, l2)));
                }
                match (&**r, &**lt) {
                    (RefFsTcb(a), LabelLit(lp)) => {
                        let cell = match state.mu_fs.get(a) {
                            Some(c) => c.clone(),
                            None => {
                                return self.stuck(
                                    state,
                                    "upgradeRef",
                                    format!("address {} not visible in this store", a.0),
                                )
                            }
                        };
                        if !self.lattice.flows(state.l_cur, cell.label_on_label) {
                            return self.label_check_fail(
                                state,
                                "upgradeRef",
                                state.l_cur,
                                cell.label_on_label,
                            );
                        }
                        let raised = self.lattice.join(cell.label, *lp);
                        state.mu_fs.insert(
                            *a,
                            FsCell {
                                label: raised,
                                ..cell
                            },
                        );
                        StepOut::Next(state, Rc::new(Return(Rc::new(Unit))), "upgradeRef")
                    }
                    _ => self.stuck(state, "upgradeRef", "upgrade of a non-fs-reference"),
                }
            }
            Downgrade(r, lt) => {
                if !self.calculus_at_least(&state, Calculus::Fs) {
                    return self.stuck(state, "downgradeRef", "not available in this calculus");
                }
                if !r.is_value() {
                    let ltc = lt.clone();
                    return self.pure_in(state, r, move |r2| Rc::new(Downgrade(r2, ltc)));
                }
                if !lt.is_value() {
                    let rc = r.clone();
                    return self.pure_in(state, lt, move |l2| Rc::new(Downgrade(rc, l2)));
                }
                match (&**r, &**lt) {
                    (RefFsTcb(a), LabelLit(lp)) => {
                        let cell = match state.mu_fs.get(a) {
                            Some(c) => c.clone(),
                            None => {
                                return self.stuck(
                                    state,
                                    "downgradeRef",
                                    format!("address {} not visible in this store", a.0),
                                )
                            }
                        };
                        if !self.lattice.flows(state.l_cur, cell.label_on_label) {
                            return self.label_check_fail(
                                state,
                                "downgradeRef",
                                state.l_cur,
                                cell.label_on_label,
                            );
                        }
                        // New label l ⊔ (l'' ⊓ l'); contents destroyed.
                        let lowered = self.lattice.join(
                            cell.label_on_label,
                            self.lattice.meet(cell.label, *lp),
                        );
                        state.mu_fs.insert(
                            *a,
                            FsCell {
                                label_on_label: cell.label_on_label,
                                label: lowered,
                                term: Rc::new(Diverge),
                            },
                        );
                        StepOut::Next(state, Rc::new(Return(Rc::new(Unit))), "downgradeRef")
                    }
                    _ => self.stuck(state, "downgradeRef", "downgrade of a non-fs-reference"),
                }
            }
            WithRefs(bagt, body) => {
                if !self.calculus_at_least(&state, Calculus::Fs) {
                    return self.stuck(state, "withRefs-Ctx", "not available in this calculus");
                }
                if !bagt.is_value() {
                    let body = body.clone();
                    return self.pure_in(state, bagt, move |b2| Rc::new(WithRefs(b2, body)));
                }
                self.step_withrefs(state, bagt, body, fuel, tracer)
            }
            Fork(child) => {
                StepOut::Fork {
                    child: child.clone(),
                    state,
                    term: Rc::new(Return(Rc::new(Unit))),
                    rule: "forkLIO",
                }
            }
            UpgradeStore(lt) => {
                if !lt.is_value() {
                    return self.pure_in(state, lt, |l2| Rc::new(UpgradeStore(l2)));
                }
                let l = match &**lt {
                    LabelLit(l) => *l,
                    _ => return self.stuck(state, "upgradeStore", "sweep target is not a label"),
                };
                // t_1 >> ... >> t_n over the store in ascending address order.
                let upgrades: Vec<TermRef> = state
                    .mu_fs
                    .keys()
                    .map(|a| {
                        Rc::new(Upgrade(Rc::new(RefFsTcb(*a)), Rc::new(LabelLit(l)))) as TermRef
                    })
                    .collect();
                let chain = match upgrades.split_last() {
                    None => Rc::new(Return(Rc::new(Unit))) as TermRef,
                    Some((last, init)) => {
                        let mut acc = last.clone();
                        for t in init.iter().rev() {
                            acc = crate::term::build::seq(t.clone(), acc);
                        }
                        acc
                    }
                };
                StepOut::Next(state, chain, "upgradeStore")
            }
            Diverge => StepOut::Terminal(Outcome::Diverged(state)),
            _ => {
                // Pure head (app, fix, if, label ops, labelOf, unwrap, ...)
                // in monadic redex position.
                self.pure_in(state, term, |t2| t2)
            }
        }
    }

    fn step_withrefs(
        &self,
        state: MachineState,
        bagt: &TermRef,
        body: &TermRef,
        fuel: &mut u64,
        tracer: &mut Option<&mut Tracer>,
    ) -> StepOut {
        use Term::*;
        // Collapse nested blocks under the concurrent runtime.
        if state.mode.withrefs_opt {
            if let WithRefs(bag2, inner) = &**body {
                if bag2.is_value() {
                    let outer = match addrs(bagt) {
                        Ok(s) => s,
                        Err(e) => return self.stuck(state, "withRefs-Opt", e),
                    };
                    let inner_set = match addrs(bag2) {
                        Ok(s) => s,
                        Err(e) => return self.stuck(state, "withRefs-Opt", e),
                    };
                    let both: BTreeSet<Addr> = outer.intersection(&inner_set).copied().collect();
                    let collapsed = addrs_inv(&both);
                    let out = self.step_withrefs(state, &collapsed, inner, fuel, tracer);
                    return match out {
                        StepOut::Next(st, t, _) => StepOut::Next(st, t, "withRefs-Opt"),
                        other => other,
                    };
                }
            }
        }
        if body.is_value() {
            return StepOut::Next(state, body.clone(), "withRefs-Done");
        }
        let bag_addrs = match addrs(bagt) {
            Ok(s) => s,
            Err(e) => return self.stuck(state, "withRefs-Ctx", e),
        };
        let scope = addrs_plus_set(&state.mu_fs, &bag_addrs);
        let outer_fs = state.mu_fs.clone();
        let restricted: FsStore = state
            .mu_fs
            .iter()
            .filter(|(a, _)| scope.contains(a))
            .map(|(a, c)| (*a, c.clone()))
            .collect();
        let inner_state = MachineState {
            mu_fs: restricted,
            ..state
        };
        match self.step_spine(inner_state, body, fuel, tracer) {
            StepOut::Next(st, body2, _) => {
                let refreshed: BTreeSet<Addr> = st.mu_fs.keys().copied().collect();
                let bag2 = addrs_inv(&refreshed);
                let merged = merge_stores(st.mu_fs.clone(), &outer_fs);
                let state2 = MachineState {
                    mu_fs: merged,
                    ..st
                };
                StepOut::Next(state2, Rc::new(WithRefs(bag2, body2)), "withRefs-Ctx")
            }
            StepOut::Terminal(o) => StepOut::Terminal(merge_outcome(o, &outer_fs)),
            StepOut::Fork {
                child,
                state: st,
                term: body2,
                rule,
            } => {
                let refreshed: BTreeSet<Addr> = st.mu_fs.keys().copied().collect();
                let bag2 = addrs_inv(&refreshed);
                let merged = merge_stores(st.mu_fs.clone(), &outer_fs);
                let state2 = MachineState {
                    mu_fs: merged,
                    ..st
                };
                StepOut::Fork {
                    child,
                    state: state2,
                    term: Rc::new(WithRefs(bag2, body2)),
                    rule,
                }
            }
        }
    }

    /// Run a nested evaluation to a monadic value, sharing the caller's
    /// fuel. Returns the final state and the term inside the finished
    /// computation.
    fn run_sub(
        &self,
        state: MachineState,
        term: TermRef,
        fuel: &mut u64,
        tracer: &mut Option<&mut Tracer>,
    ) -> Result<(MachineState, TermRef), Outcome> {
        let mut state = state;
        let mut term = term;
        loop {
            if let Term::LioTcb(inner) = &*term {
                return Ok((state, inner.clone()));
            }
            if *fuel == 0 {
                return Err(Outcome::FuelExhausted);
            }
            *fuel -= 1;
            let prev_l_cur = state.l_cur;
            match self.step_spine(state, &term, fuel, tracer) {
                StepOut::Next(st, t, rule) => {
                    self.emit(tracer, rule, &st, &t);
                    if rule != "toLabeled" {
                        debug_assert!(
                            self.lattice.flows(prev_l_cur, st.l_cur),
                            "current label dropped in nested rule {rule}"
                        );
                    }
                    state = st;
                    term = t;
                }
                StepOut::Terminal(o) => return Err(o),
                StepOut::Fork { state, .. } => {
                    return Err(Outcome::MonitorError(
                        MonitorErr {
                            kind: ErrorKind::StuckRedex,
                            rule: "forkLIO",
                            detail: "fork is not available inside a nested evaluation".into(),
                        },
                        state,
                    ))
                }
            }
        }
    }

    fn emit(&self, tracer: &mut Option<&mut Tracer>, rule: &str, state: &MachineState, term: &Term) {
        if let Some(tr) = tracer {
            tr.step += 1;
            let line = format!(
                "step={} rule={} lcur={} term={}",
                tr.step,
                rule,
                self.lbl(state.l_cur),
                pretty_truncated(&self.lattice, term, 120)
            );
            tr.lines.push(line);
        }
    }

    /// Perform exactly one step of the configuration. Nested evaluations
    /// (inside `toLabeled` or an auto-upgrade sweep) draw fuel from the
    /// configuration's own budget.
    pub fn step(&self, cfg: Configuration) -> StepResult {
        let mut fuel = cfg.state.mode.fuel;
        let mut no_trace = None;
        match self.step_spine(cfg.state, &cfg.term, &mut fuel, &mut no_trace) {
            StepOut::Next(state, term, _) => StepResult::Next(Configuration { state, term }),
            StepOut::Terminal(o) => StepResult::Terminal(o),
            StepOut::Fork {
                child,
                state,
                term,
                ..
            } => StepResult::Fork {
                child,
                cont: Configuration { state, term },
            },
        }
    }

    pub fn run(&self, cfg: Configuration) -> Outcome {
        self.run_with(cfg, &mut None).0
    }

    pub fn run_traced(&self, cfg: Configuration, tracer: &mut Tracer) -> (Outcome, u64) {
        let mut t = Some(tracer);
        self.run_with(cfg, &mut t)
    }

    fn run_with(&self, cfg: Configuration, tracer: &mut Option<&mut Tracer>) -> (Outcome, u64) {
        let mut fuel = cfg.state.mode.fuel;
        let budget = fuel;
        let mut state = cfg.state;
        let mut term = cfg.term;
        loop {
            if let Term::LioTcb(inner) = &*term {
                // Force the result to weak head normal form so the outcome
                // carries an inspectable value.
                let mut v = inner.clone();
                loop {
                    if v.is_value() {
                        return (Outcome::Value(v, state), budget - fuel);
                    }
                    if fuel == 0 {
                        return (Outcome::FuelExhausted, budget);
                    }
                    fuel -= 1;
                    match self.pure_step(&v) {
                        Ok((v2, rule)) => {
                            let shown = Rc::new(Term::LioTcb(v2.clone()));
                            self.emit(tracer, rule, &state, &shown);
                            v = v2;
                        }
                        Err(PureStop::Diverge) => {
                            return (Outcome::Diverged(state), budget - fuel)
                        }
                        Err(PureStop::Stuck(msg)) => {
                            return (
                                Outcome::MonitorError(
                                    MonitorErr {
                                        kind: ErrorKind::StuckRedex,
                                        rule: "force",
                                        detail: msg,
                                    },
                                    state,
                                ),
                                budget - fuel,
                            )
                        }
                    }
                }
            }
            if term.is_value() {
                return (
                    Outcome::MonitorError(
                        MonitorErr {
                            kind: ErrorKind::StuckRedex,
                            rule: "run",
                            detail: "top-level term is not an LIO computation".into(),
                        },
                        state,
                    ),
                    budget - fuel,
                );
            }
            if fuel == 0 {
                return (Outcome::FuelExhausted, budget);
            }
            fuel -= 1;
            let prev_l_cur = state.l_cur;
            let prev_fs: Vec<(Addr, Label)> = if cfg!(debug_assertions) {
                state
                    .mu_fs
                    .iter()
                    .map(|(a, c)| (*a, c.label_on_label))
                    .collect()
            } else {
                Vec::new()
            };
            match self.step_spine(state, &term, &mut fuel, tracer) {
                StepOut::Next(st, t, rule) => {
                    self.emit(tracer, rule, &st, &t);
                    if cfg!(debug_assertions) {
                        self.assert_step_invariants(prev_l_cur, &prev_fs, &st, rule);
                    }
                    state = st;
                    term = t;
                }
                StepOut::Terminal(o) => return (o, budget - fuel),
                StepOut::Fork { state, .. } => {
                    return (
                        Outcome::MonitorError(
                            MonitorErr {
                                kind: ErrorKind::StuckRedex,
                                rule: "forkLIO",
                                detail: "fork requires the concurrent runtime".into(),
                            },
                            state,
                        ),
                        budget - fuel,
                    )
                }
            }
        }
    }

    /// Current-label monotonicity (except across a `toLabeled` boundary,
    /// which restores the label) and immutability of the label on the
    /// label of every flow-sensitive cell.
    fn assert_step_invariants(
        &self,
        prev_l_cur: Label,
        prev_fs: &[(Addr, Label)],
        state: &MachineState,
        rule: &str,
    ) {
        if rule != "toLabeled" {
            debug_assert!(
                self.lattice.flows(prev_l_cur, state.l_cur),
                "current label dropped from {} to {} in rule {rule}",
                self.lbl(prev_l_cur),
                self.lbl(state.l_cur),
            );
        }
        for (a, l_o) in prev_fs {
            if let Some(cell) = state.mu_fs.get(a) {
                debug_assert_eq!(
                    cell.label_on_label, *l_o,
                    "label on label changed for address {} in rule {rule}",
                    a.0
                );
            }
        }
    }

    /// Apply the upgrade rule to every cell of the flow-sensitive store in
    /// ascending address order, as the auto-upgrade sweep prescribes.
    pub fn upgrade_store(
        &self,
        state: MachineState,
        l: Label,
    ) -> Result<MachineState, Outcome> {
        let mut fuel = state.mode.fuel;
        let sweep = Rc::new(Term::UpgradeStore(Rc::new(Term::LabelLit(l))));
        let mut no_trace = None;
        self.run_sub(state, sweep, &mut fuel, &mut no_trace)
            .map(|(st, _)| st)
    }
}

fn describe(t: &Term) -> &'static str {
    use Term::*;
    match t {
        True | False => "boolean",
        Unit => "unit",
        Lam(..) => "lambda",
        LabelLit(_) => "label",
        LioTcb(_) => "computation",
        LbTcb(..) => "labeled value",
        RefFiTcb(..) => "fi reference",
        RefFsTcb(_) => "fs reference",
        Bag(_) => "bag",
        WrapTcb(_) => "wrapped reference",
        Bottom => "bottom placeholder",
        Hole => "erasure hole",
        Var(_) => "variable",
        App(..) => "application",
        Fix(_) => "fix",
        If(..) => "conditional",
        LabelOp(..) => "label operation",
        Return(_) => "return",
        Bind(..) => "bind",
        GetLabel => "getLabel",
        Label(..) => "label form",
        Unlabel(_) => "unlabel",
        LabelOf(_) => "labelOf",
        ToLabeled(..) => "toLabeled",
        NewRef(..) => "newRef",
        ReadRef(..) => "readRef",
        WriteRef(..) => "writeRef",
        LabelOfRef(..) => "labelOfRef",
        CopyRef(..) => "copyRef",
        Upgrade(..) => "upgrade",
        Downgrade(..) => "downgrade",
        WithRefs(..) => "withRefs",
        Fork(_) => "fork",
        Diverge => "diverge",
        UpgradeStore(_) => "upgradeStore",
        WriteRefDiv(..) => "writeRefDiv",
        Unwrap(_) => "unwrap",
    }
}

/// Top-level addresses of a literal bag of flow-sensitive references.
pub fn addrs(bag: &Term) -> Result<BTreeSet<Addr>, String> {
    match bag {
        Term::Bag(elems) => {
            let mut out = BTreeSet::new();
            for e in elems {
                match &**e {
                    Term::RefFsTcb(a) => {
                        out.insert(*a);
                    }
                    other => return Err(format!("bag element is not an fs reference: {}", describe(other))),
                }
            }
            Ok(out)
        }
        other => Err(format!("not a bag: {}", describe(other))),
    }
}

/// Canonical bag for an address set, sorted by address.
pub fn addrs_inv(set: &BTreeSet<Addr>) -> TermRef {
    Rc::new(Term::Bag(
        set.iter().map(|a| Rc::new(Term::RefFsTcb(*a)) as TermRef).collect(),
    ))
}

fn collect_fs_addrs(t: &Term, acc: &mut BTreeSet<Addr>) {
    if let Term::RefFsTcb(a) = t {
        acc.insert(*a);
    }
    match t {
        Term::Lam(_, b) => collect_fs_addrs(b, acc),
        Term::LioTcb(x)
        | Term::LbTcb(_, x)
        | Term::WrapTcb(x)
        | Term::Fix(x)
        | Term::Return(x)
        | Term::Unlabel(x)
        | Term::LabelOf(x)
        | Term::ReadRef(_, x)
        | Term::LabelOfRef(_, x)
        | Term::Fork(x)
        | Term::UpgradeStore(x)
        | Term::Unwrap(x) => collect_fs_addrs(x, acc),
        Term::Bag(elems) => elems.iter().for_each(|e| collect_fs_addrs(e, acc)),
        Term::App(a, b)
        | Term::LabelOp(_, a, b)
        | Term::Bind(a, b)
        | Term::Label(a, b)
        | Term::ToLabeled(a, b)
        | Term::NewRef(_, a, b)
        | Term::WriteRef(_, a, b)
        | Term::CopyRef(a, b)
        | Term::Upgrade(a, b)
        | Term::Downgrade(a, b)
        | Term::WithRefs(a, b)
        | Term::WriteRefDiv(a, b) => {
            collect_fs_addrs(a, acc);
            collect_fs_addrs(b, acc);
        }
        Term::If(a, b, c) => {
            collect_fs_addrs(a, acc);
            collect_fs_addrs(b, acc);
            collect_fs_addrs(c, acc);
        }
        _ => {}
    }
}

/// Closure of a value's addresses through the store, so arbitrarily nested
/// references are included.
pub fn addrs_plus(mu_fs: &FsStore, v: &Term) -> BTreeSet<Addr> {
    let mut roots = BTreeSet::new();
    match v {
        Term::RefFsTcb(a) => {
            roots.insert(*a);
        }
        Term::Bag(elems) => {
            for e in elems {
                if let Term::RefFsTcb(a) = &**e {
                    roots.insert(*a);
                }
            }
        }
        _ => return BTreeSet::new(),
    }
    addrs_plus_set(mu_fs, &roots)
}

fn addrs_plus_set(mu_fs: &FsStore, roots: &BTreeSet<Addr>) -> BTreeSet<Addr> {
    let mut seen = BTreeSet::new();
    let mut work: Vec<Addr> = roots.iter().copied().collect();
    while let Some(a) = work.pop() {
        if !seen.insert(a) {
            continue;
        }
        if let Some(cell) = mu_fs.get(&a) {
            let mut nested = BTreeSet::new();
            collect_fs_addrs(&cell.term, &mut nested);
            for b in nested {
                if !seen.contains(&b) {
                    work.push(b);
                }
            }
        }
    }
    seen
}

/// Merge flow-sensitive stores, left side winning on shared addresses.
pub fn merge_stores(left: FsStore, right: &FsStore) -> FsStore {
    let mut out = left;
    for (a, c) in right {
        out.entry(*a).or_insert_with(|| c.clone());
    }
    out
}

fn merge_outcome(o: Outcome, outer_fs: &FsStore) -> Outcome {
    match o {
        Outcome::Diverged(mut st) => {
            st.mu_fs = merge_stores(st.mu_fs, outer_fs);
            Outcome::Diverged(st)
        }
        Outcome::MonitorError(e, mut st) => {
            st.mu_fs = merge_stores(st.mu_fs, outer_fs);
            Outcome::MonitorError(e, st)
        }
        other => other,
    }
}
