//! Finite security lattices: join, meet, partial order, parsing and
//! printing of labels.
//!
//! Lattices are table-driven. A [`Lattice`] is built either from one of the
//! built-ins ([`Lattice::two_point`], [`Lattice::pu_three_point`]) or from a
//! config file ([`Lattice::from_config`]). All lattice laws are checked
//! exhaustively at load time, so a successfully constructed lattice never
//! produces a law violation at runtime.

use std::fmt;
use std::sync::atomic::{AtomicU16, Ordering};
use thiserror::Error;

static NEXT_LATTICE_ID: AtomicU16 = AtomicU16::new(0);

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("lattice config, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("lattice law violation: {0}")]
    Law(String),
    #[error("label from a different lattice used with lattice `{lattice}`")]
    ForeignLabel { lattice: String },
    #[error("unknown label name `{0}`")]
    UnknownLabel(String),
}

/// An element of a finite security lattice. Labels are small copyable
/// handles; all operations go through the owning [`Lattice`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label {
    lat: u16,
    idx: u8,
}

impl Label {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Label({}/{})", self.lat, self.idx)
    }
}

/// A finite lattice with precomputed order, join and meet tables.
#[derive(Debug)]
pub struct Lattice {
    id: u16,
    name: String,
    names: Vec<String>,
    leq: Vec<Vec<bool>>,
    join_tab: Vec<Vec<u8>>,
    meet_tab: Vec<Vec<u8>>,
}

impl Lattice {
    /// The built-in two-point lattice: `L` below `H`.
    pub fn two_point() -> Lattice {
        Lattice::build("two-point", &["L", "H"], &[("L", "H")])
            .expect("two-point lattice is well-formed")
    }

    /// The built-in three-point chain `L <= H <= P` used by the
    /// permissive-upgrade monitor, where `P` marks permissively
    /// upgraded variables.
    pub fn pu_three_point() -> Lattice {
        Lattice::build("pu-three-point", &["L", "H", "P"], &[("L", "H"), ("H", "P")])
            .expect("pu-three-point lattice is well-formed")
    }

    /// Parse a lattice from its config-file syntax:
    ///
    /// ```text
    /// elements: A B C
    /// order:
    ///   A <= B
    ///   B <= C
    /// ```
    ///
    /// The declared order pairs generate a reflexive-transitive closure;
    /// the result must be a partial order with total join/meet tables.
    pub fn from_config(name: &str, text: &str) -> Result<Lattice, LatticeError> {
        let mut elements: Vec<String> = Vec::new();
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut section = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            if let Some(rest) = line.strip_prefix("elements:") {
                section = Some("elements");
                elements.extend(rest.split_whitespace().map(|s| s.to_string()));
            } else if let Some(rest) = line.strip_prefix("order:") {
                section = Some("order");
                if !rest.trim().is_empty() {
                    pairs.push(Self::parse_pair(rest, lineno)?);
                }
            } else {
                match section {
                    Some("elements") => {
                        elements.extend(line.split_whitespace().map(|s| s.to_string()))
                    }
                    Some("order") => pairs.push(Self::parse_pair(line, lineno)?),
                    _ => {
                        return Err(LatticeError::Parse {
                            line: lineno,
                            msg: format!("expected `elements:` or `order:`, got `{line}`"),
                        })
                    }
                }
            }
        }
        if elements.is_empty() {
            return Err(LatticeError::Parse {
                line: 0,
                msg: "no elements declared".into(),
            });
        }
        let names: Vec<&str> = elements.iter().map(|s| s.as_str()).collect();
        let pairs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        Lattice::build(name, &names, &pairs)
    }

    fn parse_pair(line: &str, lineno: usize) -> Result<(String, String), LatticeError> {
        let mut it = line.split("<=");
        match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => Ok((a.trim().to_string(), b.trim().to_string())),
            _ => Err(LatticeError::Parse {
                line: lineno,
                msg: format!("expected `a <= b`, got `{line}`"),
            }),
        }
    }

    fn build(name: &str, elements: &[&str], pairs: &[(&str, &str)]) -> Result<Lattice, LatticeError> {
        let n = elements.len();
        if n > u8::MAX as usize {
            return Err(LatticeError::Law(format!("too many elements ({n})")));
        }
        for (i, e) in elements.iter().enumerate() {
            if elements[..i].contains(e) {
                return Err(LatticeError::Law(format!("duplicate element `{e}`")));
            }
        }
        let index = |e: &str| -> Result<usize, LatticeError> {
            elements
                .iter()
                .position(|x| *x == e)
                .ok_or_else(|| LatticeError::UnknownLabel(e.to_string()))
        };

        // Reflexive-transitive closure of the declared pairs.
        let mut leq = vec![vec![false; n]; n];
        for i in 0..n {
            leq[i][i] = true;
        }
        for (a, b) in pairs {
            leq[index(a)?][index(b)?] = true;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if leq[i][k] && leq[k][j] {
                        leq[i][j] = true;
                    }
                }
            }
        }

        // Antisymmetry.
        for i in 0..n {
            for j in 0..n {
                if i != j && leq[i][j] && leq[j][i] {
                    return Err(LatticeError::Law(format!(
                        "`{}` and `{}` are mutually ordered (antisymmetry violated)",
                        elements[i], elements[j]
                    )));
                }
            }
        }

        // Least upper bound and greatest lower bound for every pair.
        let mut join_tab = vec![vec![0u8; n]; n];
        let mut meet_tab = vec![vec![0u8; n]; n];
        for i in 0..n {
            for j in 0..n {
                let ubs: Vec<usize> = (0..n).filter(|&c| leq[i][c] && leq[j][c]).collect();
                let lub: Vec<usize> = ubs
                    .iter()
                    .copied()
                    .filter(|&c| ubs.iter().all(|&d| leq[c][d]))
                    .collect();
                match lub.as_slice() {
                    [c] => join_tab[i][j] = *c as u8,
                    [] => {
                        return Err(LatticeError::Law(format!(
                            "`{}` and `{}` have no least upper bound",
                            elements[i], elements[j]
                        )))
                    }
                    _ => {
                        return Err(LatticeError::Law(format!(
                            "`{}` and `{}` have multiple minimal upper bounds",
                            elements[i], elements[j]
                        )))
                    }
                }
                let lbs: Vec<usize> = (0..n).filter(|&c| leq[c][i] && leq[c][j]).collect();
                let glb: Vec<usize> = lbs
                    .iter()
                    .copied()
                    .filter(|&c| lbs.iter().all(|&d| leq[d][c]))
                    .collect();
                match glb.as_slice() {
                    [c] => meet_tab[i][j] = *c as u8,
                    [] => {
                        return Err(LatticeError::Law(format!(
                            "`{}` and `{}` have no greatest lower bound",
                            elements[i], elements[j]
                        )))
                    }
                    _ => {
                        return Err(LatticeError::Law(format!(
                            "`{}` and `{}` have multiple maximal lower bounds",
                            elements[i], elements[j]
                        )))
                    }
                }
            }
        }

        let lattice = Lattice {
            id: NEXT_LATTICE_ID.fetch_add(1, Ordering::Relaxed),
            name: name.to_string(),
            names: elements.iter().map(|s| s.to_string()).collect(),
            leq,
            join_tab,
            meet_tab,
        };
        lattice.check_laws()?;
        Ok(lattice)
    }

    /// Exhaustive law check over the finite carrier: commutativity,
    /// associativity, idempotence, absorption, and consistency of
    /// join/meet with the order.
    fn check_laws(&self) -> Result<(), LatticeError> {
        let ls = self.elements();
        for &a in &ls {
            if self.join(a, a) != a || self.meet(a, a) != a {
                return Err(LatticeError::Law("idempotence fails".into()));
            }
            for &b in &ls {
                if self.join(a, b) != self.join(b, a) || self.meet(a, b) != self.meet(b, a) {
                    return Err(LatticeError::Law("commutativity fails".into()));
                }
                if !self.flows(a, self.join(a, b)) || !self.flows(self.meet(a, b), a) {
                    return Err(LatticeError::Law("order consistency fails".into()));
                }
                if self.meet(a, self.join(a, b)) != a || self.join(a, self.meet(a, b)) != a {
                    return Err(LatticeError::Law("absorption fails".into()));
                }
                for &c in &ls {
                    if self.join(self.join(a, b), c) != self.join(a, self.join(b, c)) {
                        return Err(LatticeError::Law("join associativity fails".into()));
                    }
                    if self.meet(self.meet(a, b), c) != self.meet(a, self.meet(b, c)) {
                        return Err(LatticeError::Law("meet associativity fails".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn elements(&self) -> Vec<Label> {
        (0..self.names.len())
            .map(|i| Label {
                lat: self.id,
                idx: i as u8,
            })
            .collect()
    }

    /// Look up a label by its element name.
    pub fn label(&self, name: &str) -> Option<Label> {
        self.names.iter().position(|n| n == name).map(|i| Label {
            lat: self.id,
            idx: i as u8,
        })
    }

    pub fn label_name(&self, l: Label) -> &str {
        assert_eq!(l.lat, self.id, "foreign label passed to lattice `{}`", self.name);
        &self.names[l.idx as usize]
    }

    pub fn owns(&self, l: Label) -> bool {
        l.lat == self.id
    }

    fn check_own(&self, l: Label) -> Result<(), LatticeError> {
        if self.owns(l) {
            Ok(())
        } else {
            Err(LatticeError::ForeignLabel {
                lattice: self.name.clone(),
            })
        }
    }

    /// `a ⊑ b`. Panics if either label belongs to a different lattice;
    /// use [`Lattice::try_flows`] for a checked variant.
    #[track_caller]
    pub fn flows(&self, a: Label, b: Label) -> bool {
        self.try_flows(a, b).expect("mismatched lattices")
    }

    /// Least upper bound `a ⊔ b`.
    #[track_caller]
    pub fn join(&self, a: Label, b: Label) -> Label {
        self.try_join(a, b).expect("mismatched lattices")
    }

    /// Greatest lower bound `a ⊓ b`.
    #[track_caller]
    pub fn meet(&self, a: Label, b: Label) -> Label {
        self.try_meet(a, b).expect("mismatched lattices")
    }

    pub fn try_flows(&self, a: Label, b: Label) -> Result<bool, LatticeError> {
        self.check_own(a)?;
        self.check_own(b)?;
        Ok(self.leq[a.idx as usize][b.idx as usize])
    }

    pub fn try_join(&self, a: Label, b: Label) -> Result<Label, LatticeError> {
        self.check_own(a)?;
        self.check_own(b)?;
        Ok(Label {
            lat: self.id,
            idx: self.join_tab[a.idx as usize][b.idx as usize],
        })
    }

    pub fn try_meet(&self, a: Label, b: Label) -> Result<Label, LatticeError> {
        self.check_own(a)?;
        self.check_own(b)?;
        Ok(Label {
            lat: self.id,
            idx: self.meet_tab[a.idx as usize][b.idx as usize],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_order() {
        let lat = Lattice::two_point();
        let l = lat.label("L").unwrap();
        let h = lat.label("H").unwrap();
        assert!(lat.flows(l, h));
        assert!(!lat.flows(h, l));
        assert!(lat.flows(h, h));
        assert_eq!(lat.join(l, h), h);
        assert_eq!(lat.join(l, l), l);
        assert_eq!(lat.meet(l, h), l);
        assert_eq!(lat.meet(h, h), h);
    }

    #[test]
    fn pu_three_point_chain() {
        let lat = Lattice::pu_three_point();
        let l = lat.label("L").unwrap();
        let h = lat.label("H").unwrap();
        let p = lat.label("P").unwrap();
        assert!(lat.flows(l, h) && lat.flows(h, p) && lat.flows(l, p));
        assert!(!lat.flows(p, h));
        assert_eq!(lat.join(h, p), p);
        assert_eq!(lat.meet(l, p), l);
    }

    #[test]
    fn absorption_exhaustive() {
        for lat in [Lattice::two_point(), Lattice::pu_three_point()] {
            for a in lat.elements() {
                for b in lat.elements() {
                    assert_eq!(lat.meet(a, lat.join(a, b)), a);
                }
            }
        }
    }

    #[test]
    fn mismatched_lattices_is_usage_error() {
        let a = Lattice::two_point();
        let b = Lattice::two_point();
        let la = a.label("L").unwrap();
        let lb = b.label("H").unwrap();
        assert!(a.try_flows(la, lb).is_err());
        assert!(a.try_join(la, lb).is_err());
        assert!(a.try_meet(lb, la).is_err());
    }

    #[test]
    fn diamond_from_config() {
        let text = "elements: BOT A B TOP\norder:\n BOT <= A\n BOT <= B\n A <= TOP\n B <= TOP\n";
        let lat = Lattice::from_config("diamond", text).unwrap();
        let a = lat.label("A").unwrap();
        let b = lat.label("B").unwrap();
        let top = lat.label("TOP").unwrap();
        let bot = lat.label("BOT").unwrap();
        assert!(!lat.flows(a, b) && !lat.flows(b, a));
        assert_eq!(lat.join(a, b), top);
        assert_eq!(lat.meet(a, b), bot);
    }

    #[test]
    fn rejects_missing_lub() {
        // Two maximal incomparable elements: no join.
        let text = "elements: A B\norder:\n";
        let err = Lattice::from_config("broken", text).unwrap_err();
        assert!(matches!(err, LatticeError::Law(_)), "{err}");
    }

    #[test]
    fn rejects_antisymmetry_violation() {
        let text = "elements: A B\norder:\n A <= B\n B <= A\n";
        let err = Lattice::from_config("broken", text).unwrap_err();
        assert!(matches!(err, LatticeError::Law(_)), "{err}");
    }

    #[test]
    fn rejects_garbage_line() {
        let err = Lattice::from_config("broken", "noise\n").unwrap_err();
        assert!(matches!(err, LatticeError::Parse { .. }), "{err}");
    }
}
