//! Syntax of the quantum-control fragment: types, terms, unitaries,
//! valuations, the total order on basis values, matching and substitution.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex coefficient of a linear combination.
pub type Scalar = Complex64;

/// Variable names. Names starting with `%` are reserved for the machine.
pub type Name = String;

/// Default tolerance.
pub const DEFAULT_EPS: f64 = 1e-9;

// Zero bits mean "not overridden".
static TOLERANCE_BITS: AtomicU64 = AtomicU64::new(0);

/// Global numerical tolerance used by every approximate comparison.
pub fn eps() -> f64 {
    match TOLERANCE_BITS.load(AtomicOrdering::Relaxed) {
        0 => DEFAULT_EPS,
        bits => f64::from_bits(bits),
    }
}

/// Overrides the global tolerance.
pub fn set_eps(value: f64) {
    TOLERANCE_BITS.store(value.to_bits(), AtomicOrdering::Relaxed);
}

/// Pure types: `I`, `Q1 (+) Q2`, `Q1 (x) Q2` and `qnat`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PureType {
    Unit,
    Sum(Box<PureType>, Box<PureType>),
    Tensor(Box<PureType>, Box<PureType>),
    QNat,
}

impl PureType {
    pub fn sum(a: PureType, b: PureType) -> PureType {
        PureType::Sum(Box::new(a), Box::new(b))
    }

    pub fn tensor(a: PureType, b: PureType) -> PureType {
        PureType::Tensor(Box::new(a), Box::new(b))
    }

    /// `qbit = I (+) I`.
    pub fn qbit() -> PureType {
        PureType::sum(PureType::Unit, PureType::Unit)
    }

    /// Left-nested tensor of the given factors; the empty product is `I`.
    pub fn tensor_all(factors: &[PureType]) -> PureType {
        let mut it = factors.iter().cloned();
        match it.next() {
            None => PureType::Unit,
            Some(first) => it.fold(first, PureType::tensor),
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        match self {
            PureType::Unit => write!(f, "I"),
            PureType::QNat => write!(f, "qnat"),
            PureType::Sum(a, b) if **a == PureType::Unit && **b == PureType::Unit => write!(f, "qbit"),
            PureType::Sum(a, b) => {
                if prec > 0 {
                    write!(f, "(")?;
                }
                a.fmt_prec(f, 0)?;
                write!(f, " (+) ")?;
                b.fmt_prec(f, 1)?;
                if prec > 0 {
                    write!(f, ")")?;
                }
                Ok(())
            }
            PureType::Tensor(a, b) => {
                if prec > 1 {
                    write!(f, "(")?;
                }
                a.fmt_prec(f, 1)?;
                write!(f, " (x) ")?;
                b.fmt_prec(f, 2)?;
                if prec > 1 {
                    write!(f, ")")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for PureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// Terms of the quantum-control fragment.
#[derive(Clone, Debug, PartialEq)]
pub enum PureTerm {
    Star,
    Var(Name),
    InjL(Box<PureTerm>),
    InjR(Box<PureTerm>),
    Pair(Box<PureTerm>, Box<PureTerm>),
    Zero,
    Succ(Box<PureTerm>),
    Apply(Box<UnitaryExpr>, Box<PureTerm>),
    LinComb(Vec<(Scalar, PureTerm)>),
}

/// Unitary expressions.
#[derive(Clone, Debug, PartialEq)]
pub enum UnitaryExpr {
    /// Pattern-matching abstraction `{| b1 -> e1 | ... }`.
    Clauses(Vec<(PureTerm, PureTerm)>),
    Tensor(Box<UnitaryExpr>, Box<UnitaryExpr>),
    DirectSum(Box<UnitaryExpr>, Box<UnitaryExpr>),
    /// `Compose(second, first)` applies `first` and then `second`.
    Compose(Box<UnitaryExpr>, Box<UnitaryExpr>),
    Adjoint(Box<UnitaryExpr>),
    Ctrl(Box<UnitaryExpr>),
}

/// Ordered typing context of the pure fragment.
pub type PureContext = Vec<(Name, PureType)>;

/// Finite map from variables to expressions.
pub type Valuation = BTreeMap<Name, PureTerm>;

impl PureTerm {
    pub fn var(name: &str) -> PureTerm {
        PureTerm::Var(name.to_string())
    }

    pub fn inl(t: PureTerm) -> PureTerm {
        PureTerm::InjL(Box::new(t))
    }

    pub fn inr(t: PureTerm) -> PureTerm {
        PureTerm::InjR(Box::new(t))
    }

    pub fn pair(a: PureTerm, b: PureTerm) -> PureTerm {
        PureTerm::Pair(Box::new(a), Box::new(b))
    }

    pub fn succ(t: PureTerm) -> PureTerm {
        PureTerm::Succ(Box::new(t))
    }

    pub fn apply(u: UnitaryExpr, t: PureTerm) -> PureTerm {
        PureTerm::Apply(Box::new(u), Box::new(t))
    }

    /// `|0> = inl *`.
    pub fn ket0() -> PureTerm {
        PureTerm::inl(PureTerm::Star)
    }

    /// `|1> = inr *`.
    pub fn ket1() -> PureTerm {
        PureTerm::inr(PureTerm::Star)
    }

    /// `|n>` at `qnat`, that is `S^n 0`.
    pub fn nat(n: usize) -> PureTerm {
        PureTerm::shifted(PureTerm::Zero, n)
    }

    /// `S^k t`.
    pub fn shifted(t: PureTerm, k: usize) -> PureTerm {
        (0..k).fold(t, |acc, _| PureTerm::succ(acc))
    }

    /// Left-nested tuple; the empty tuple is `*`.
    pub fn tuple(items: Vec<PureTerm>) -> PureTerm {
        let mut it = items.into_iter();
        match it.next() {
            None => PureTerm::Star,
            Some(first) => it.fold(first, PureTerm::pair),
        }
    }

    /// Contains neither unitary application nor linear combination.
    pub fn is_basis(&self) -> bool {
        match self {
            PureTerm::Star | PureTerm::Var(_) | PureTerm::Zero => true,
            PureTerm::InjL(t) | PureTerm::InjR(t) | PureTerm::Succ(t) => t.is_basis(),
            PureTerm::Pair(a, b) => a.is_basis() && b.is_basis(),
            PureTerm::Apply(..) | PureTerm::LinComb(_) => false,
        }
    }

    /// Contains no unitary application.
    pub fn is_expression(&self) -> bool {
        match self {
            PureTerm::Star | PureTerm::Var(_) | PureTerm::Zero => true,
            PureTerm::InjL(t) | PureTerm::InjR(t) | PureTerm::Succ(t) => t.is_expression(),
            PureTerm::Pair(a, b) => a.is_expression() && b.is_expression(),
            PureTerm::Apply(..) => false,
            PureTerm::LinComb(es) => es.iter().all(|(_, t)| t.is_expression()),
        }
    }

    /// A sorted, zero-free combination of basis values.
    pub fn is_value(&self) -> bool {
        match self {
            PureTerm::LinComb(es) => {
                !es.is_empty()
                    && es.iter().all(|(a, t)| a.norm() > eps() && t.is_basis())
                    && es.windows(2).all(|w| basis_cmp(&w[0].1, &w[1].1) == Ordering::Less)
            }
            _ => false,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.free_vars().is_empty()
    }

    /// Free variables in order of occurrence, with repetitions.
    pub fn free_vars(&self) -> Vec<Name> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<Name>) {
        match self {
            PureTerm::Star | PureTerm::Zero => {}
            PureTerm::Var(x) => out.push(x.clone()),
            PureTerm::InjL(t) | PureTerm::InjR(t) | PureTerm::Succ(t) | PureTerm::Apply(_, t) => {
                t.collect_vars(out)
            }
            PureTerm::Pair(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            PureTerm::LinComb(es) => {
                for (_, t) in es {
                    t.collect_vars(out);
                }
            }
        }
    }

    /// Value of a closed qnat literal `S^n 0`.
    pub fn as_nat(&self) -> Option<usize> {
        match self {
            PureTerm::Zero => Some(0),
            PureTerm::Succ(t) => t.as_nat().map(|n| n + 1),
            _ => None,
        }
    }
}

fn rank(t: &PureTerm) -> u8 {
    match t {
        PureTerm::Var(_) => 0,
        PureTerm::Star => 1,
        PureTerm::InjL(_) => 2,
        PureTerm::InjR(_) => 3,
        PureTerm::Zero => 4,
        PureTerm::Succ(_) => 5,
        PureTerm::Pair(..) => 6,
        PureTerm::Apply(..) => 7,
        PureTerm::LinComb(_) => 8,
    }
}

fn scalar_cmp(a: &Scalar, b: &Scalar) -> Ordering {
    a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im))
}

/// Total order on raw terms extending the basis-value order.
///
/// Variables come first (by name), then `*`, `inl`, `inr`, `0`, `S` and
/// pairs; children are compared lexicographically. Terms with unitary
/// applications are ordered by their printed form, which is only used to
/// canonicalize sets.
pub fn basis_cmp(a: &PureTerm, b: &PureTerm) -> Ordering {
    use PureTerm::*;
    match (a, b) {
        (Var(x), Var(y)) => x.cmp(y),
        (Star, Star) | (Zero, Zero) => Ordering::Equal,
        (InjL(x), InjL(y)) | (InjR(x), InjR(y)) | (Succ(x), Succ(y)) => basis_cmp(x, y),
        (Pair(a1, a2), Pair(b1, b2)) => basis_cmp(a1, b1).then_with(|| basis_cmp(a2, b2)),
        (Apply(u, x), Apply(v, y)) => {
            format!("{u:?}").cmp(&format!("{v:?}")).then_with(|| basis_cmp(x, y))
        }
        (LinComb(xs), LinComb(ys)) => {
            for ((p, s), (q, t)) in xs.iter().zip(ys.iter()) {
                let c = scalar_cmp(p, q).then_with(|| basis_cmp(s, t));
                if c != Ordering::Equal {
                    return c;
                }
            }
            xs.len().cmp(&ys.len())
        }
        _ => rank(a).cmp(&rank(b)),
    }
}

/// Compares two basis values in the fixed total order.
pub fn basis_order(b1: &PureTerm, b2: &PureTerm) -> Result<Ordering> {
    for b in [b1, b2] {
        if !b.is_basis() {
            return Err(Error::Malformed(format!("`{b}` is not a basis value")));
        }
    }
    Ok(basis_cmp(b1, b2))
}

/// Checks that the variables of a pattern are pairwise distinct.
pub fn check_linear_pattern(p: &PureTerm) -> Result<()> {
    if !p.is_basis() {
        return Err(Error::MalformedPattern(format!("`{p}` is not a basis value")));
    }
    let mut vars = p.free_vars();
    vars.sort();
    if let Some(w) = vars.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::MalformedPattern(format!("variable `{}` occurs twice", w[0])));
    }
    Ok(())
}

/// Matches a closed basis value against a pattern.
///
/// Returns the smallest valuation `s` with `s(pattern) = subject`.
pub fn match_basis(pattern: &PureTerm, subject: &PureTerm) -> Result<Option<Valuation>> {
    check_linear_pattern(pattern)?;
    if !subject.is_basis() || !subject.is_closed() {
        return Err(Error::Malformed(format!("`{subject}` is not a closed basis value")));
    }
    let mut sigma = Valuation::new();
    Ok(match_into(pattern, subject, &mut sigma).then_some(sigma))
}

/// Matching without validation; the pattern must be linear.
pub(crate) fn match_into(pattern: &PureTerm, subject: &PureTerm, sigma: &mut Valuation) -> bool {
    use PureTerm::*;
    match (pattern, subject) {
        (Var(x), _) => {
            sigma.insert(x.clone(), subject.clone());
            true
        }
        (Star, Star) | (Zero, Zero) => true,
        (InjL(p), InjL(s)) | (InjR(p), InjR(s)) | (Succ(p), Succ(s)) => match_into(p, s, sigma),
        (Pair(p1, p2), Pair(s1, s2)) => match_into(p1, s1, sigma) && match_into(p2, s2, sigma),
        _ => false,
    }
}

/// Homomorphic substitution; every free variable must be in the support.
pub fn substitute(sigma: &Valuation, t: &PureTerm) -> Result<PureTerm> {
    use PureTerm::*;
    Ok(match t {
        Star => Star,
        Zero => Zero,
        Var(x) => sigma.get(x).cloned().ok_or_else(|| Error::Unbound(x.clone()))?,
        InjL(a) => PureTerm::inl(substitute(sigma, a)?),
        InjR(a) => PureTerm::inr(substitute(sigma, a)?),
        Succ(a) => PureTerm::succ(substitute(sigma, a)?),
        Pair(a, b) => PureTerm::pair(substitute(sigma, a)?, substitute(sigma, b)?),
        Apply(u, a) => PureTerm::Apply(u.clone(), Box::new(substitute(sigma, a)?)),
        LinComb(es) => LinComb(
            es.iter()
                .map(|(c, e)| Ok((*c, substitute(sigma, e)?)))
                .collect::<Result<Vec<_>>>()?,
        ),
    })
}

/// Formats a scalar so that it parses back to the same value.
pub fn format_scalar_exact(c: &Scalar) -> String {
    if c.im == 0.0 {
        format!("{:?}", c.re)
    } else if c.re == 0.0 {
        format!("{:?}i", c.im)
    } else if c.im < 0.0 || c.im.is_sign_negative() {
        format!("{:?}-{:?}i", c.re, -c.im)
    } else {
        format!("{:?}+{:?}i", c.re, c.im)
    }
}

/// Formats a scalar with a fixed number of decimals for human output.
pub fn format_scalar_short(c: &Scalar, digits: usize) -> String {
    let tiny = 0.5 * 10f64.powi(-(digits as i32));
    let re = if c.re.abs() < tiny { 0.0 } else { c.re };
    let im = if c.im.abs() < tiny { 0.0 } else { c.im };
    if im == 0.0 {
        format!("{re:.digits$}")
    } else if re == 0.0 {
        format!("{im:.digits$}i")
    } else if im < 0.0 {
        format!("{re:.digits$}-{:.digits$}i", -im)
    } else {
        format!("{re:.digits$}+{im:.digits$}i")
    }
}

impl PureTerm {
    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        // prec 0: sums allowed; 1: tensors allowed; 2: prefix application only.
        match self {
            PureTerm::Star => write!(f, "*"),
            PureTerm::Var(x) => write!(f, "{x}"),
            PureTerm::Zero => write!(f, "0"),
            PureTerm::InjL(t) => {
                write!(f, "inl ")?;
                t.fmt_prec(f, 2)
            }
            PureTerm::InjR(t) => {
                write!(f, "inr ")?;
                t.fmt_prec(f, 2)
            }
            PureTerm::Succ(t) => {
                write!(f, "S ")?;
                t.fmt_prec(f, 2)
            }
            PureTerm::Apply(u, t) => {
                write!(f, "({u}) ")?;
                t.fmt_prec(f, 2)
            }
            PureTerm::Pair(a, b) => {
                if prec > 1 {
                    write!(f, "(")?;
                }
                a.fmt_prec(f, 1)?;
                write!(f, " (x) ")?;
                b.fmt_prec(f, 2)?;
                if prec > 1 {
                    write!(f, ")")?;
                }
                Ok(())
            }
            PureTerm::LinComb(es) => {
                if prec > 0 {
                    write!(f, "(")?;
                }
                for (i, (c, t)) in es.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "[{}]*", format_scalar_exact(c))?;
                    t.fmt_prec(f, 1)?;
                }
                if prec > 0 {
                    write!(f, ")")?;
                }
                Ok(())
            }
        }
    }
}

/// Prints in the concrete syntax accepted by the parser.
impl fmt::Display for PureTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl UnitaryExpr {
    pub fn tensor(a: UnitaryExpr, b: UnitaryExpr) -> UnitaryExpr {
        UnitaryExpr::Tensor(Box::new(a), Box::new(b))
    }

    pub fn direct_sum(a: UnitaryExpr, b: UnitaryExpr) -> UnitaryExpr {
        UnitaryExpr::DirectSum(Box::new(a), Box::new(b))
    }

    /// `compose(second, first)` runs `first` then `second`.
    pub fn compose(second: UnitaryExpr, first: UnitaryExpr) -> UnitaryExpr {
        UnitaryExpr::Compose(Box::new(second), Box::new(first))
    }

    pub fn adjoint(u: UnitaryExpr) -> UnitaryExpr {
        UnitaryExpr::Adjoint(Box::new(u))
    }

    pub fn ctrl(u: UnitaryExpr) -> UnitaryExpr {
        UnitaryExpr::Ctrl(Box::new(u))
    }

    /// The identity `{| x -> x }`.
    pub fn identity() -> UnitaryExpr {
        UnitaryExpr::Clauses(vec![(PureTerm::var("x"), PureTerm::var("x"))])
    }

    /// Desugars `qif x then on_one else on_zero`.
    ///
    /// When both branches are clause lists the result is a single clause
    /// list prefixing `|0>` and `|1>`; otherwise the branches are combined
    /// through the distributivity isomorphism `qbit (x) Q ~ Q (+) Q`.
    pub fn qif(on_one: UnitaryExpr, on_zero: UnitaryExpr) -> UnitaryExpr {
        match (&on_one, &on_zero) {
            (UnitaryExpr::Clauses(ones), UnitaryExpr::Clauses(zeros)) => {
                let mut clauses = Vec::new();
                for (p, e) in zeros {
                    clauses.push((PureTerm::pair(PureTerm::ket0(), p.clone()), prefix_ket(PureTerm::ket0(), e)));
                }
                for (p, e) in ones {
                    clauses.push((PureTerm::pair(PureTerm::ket1(), p.clone()), prefix_ket(PureTerm::ket1(), e)));
                }
                UnitaryExpr::Clauses(clauses)
            }
            _ => {
                let dist = UnitaryExpr::Clauses(vec![
                    (PureTerm::pair(PureTerm::ket0(), PureTerm::var("x")), PureTerm::inl(PureTerm::var("x"))),
                    (PureTerm::pair(PureTerm::ket1(), PureTerm::var("y")), PureTerm::inr(PureTerm::var("y"))),
                ]);
                UnitaryExpr::compose(
                    UnitaryExpr::adjoint(dist.clone()),
                    UnitaryExpr::compose(UnitaryExpr::direct_sum(on_zero, on_one), dist),
                )
            }
        }
    }
}

/// `k (x) e`, pushed through linear combinations so that bodies keep
/// the shape produced by the qif sugar.
fn prefix_ket(k: PureTerm, e: &PureTerm) -> PureTerm {
    match e {
        PureTerm::LinComb(es) => {
            PureTerm::LinComb(es.iter().map(|(c, t)| (*c, PureTerm::pair(k.clone(), t.clone()))).collect())
        }
        other => PureTerm::pair(k, other.clone()),
    }
}

impl UnitaryExpr {
    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        // prec 0: composition; 1: direct sum; 2: tensor; 3: prefix.
        let paren = |f: &mut fmt::Formatter<'_>, need: bool, s: &dyn Fn(&mut fmt::Formatter<'_>) -> fmt::Result| {
            if need {
                write!(f, "(")?;
            }
            s(f)?;
            if need {
                write!(f, ")")?;
            }
            Ok(())
        };
        match self {
            UnitaryExpr::Clauses(cs) => {
                write!(f, "{{")?;
                for (p, e) in cs {
                    write!(f, "| {p} -> {e} ")?;
                }
                write!(f, "}}")
            }
            UnitaryExpr::Compose(a, b) => paren(f, prec > 0, &|f| {
                a.fmt_prec(f, 0)?;
                write!(f, " . ")?;
                b.fmt_prec(f, 1)
            }),
            UnitaryExpr::DirectSum(a, b) => paren(f, prec > 1, &|f| {
                a.fmt_prec(f, 1)?;
                write!(f, " (+) ")?;
                b.fmt_prec(f, 2)
            }),
            UnitaryExpr::Tensor(a, b) => paren(f, prec > 2, &|f| {
                a.fmt_prec(f, 2)?;
                write!(f, " (x) ")?;
                b.fmt_prec(f, 3)
            }),
            UnitaryExpr::Adjoint(u) => {
                write!(f, "adj ")?;
                u.fmt_prec(f, 3)
            }
            UnitaryExpr::Ctrl(u) => {
                write!(f, "ctrl ")?;
                u.fmt_prec(f, 3)
            }
        }
    }
}

impl fmt::Display for UnitaryExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ket(bits: &[u8]) -> PureTerm {
        PureTerm::tuple(bits.iter().map(|b| if *b == 0 { PureTerm::ket0() } else { PureTerm::ket1() }).collect())
    }

    #[test]
    fn order_examples() {
        assert_eq!(basis_order(&PureTerm::ket0(), &PureTerm::ket1()).unwrap(), Ordering::Less);
        assert_eq!(basis_order(&PureTerm::Zero, &PureTerm::nat(1)).unwrap(), Ordering::Less);
        assert_eq!(basis_order(&ket(&[0, 1]), &ket(&[0, 0])).unwrap(), Ordering::Greater);
        assert_eq!(basis_order(&PureTerm::var("z"), &PureTerm::Star).unwrap(), Ordering::Less);
        let lc = PureTerm::LinComb(vec![(Scalar::new(1.0, 0.0), PureTerm::Star)]);
        assert!(matches!(basis_order(&lc, &PureTerm::Star), Err(Error::Malformed(_))));
    }

    #[test]
    fn matching_examples() {
        let s = match_basis(&PureTerm::var("x"), &PureTerm::ket0()).unwrap().unwrap();
        assert_eq!(s["x"], PureTerm::ket0());
        let s = match_basis(&PureTerm::succ(PureTerm::var("x")), &PureTerm::nat(2)).unwrap().unwrap();
        assert_eq!(s["x"], PureTerm::nat(1));
        assert!(match_basis(&PureTerm::inl(PureTerm::var("b")), &PureTerm::ket1()).unwrap().is_none());
        let bad = PureTerm::pair(PureTerm::var("x"), PureTerm::var("x"));
        assert!(matches!(match_basis(&bad, &ket(&[0, 0])), Err(Error::MalformedPattern(_))));
    }

    #[test]
    fn substitution_examples() {
        let mut s = Valuation::new();
        s.insert("x".into(), PureTerm::ket0());
        assert_eq!(substitute(&s, &PureTerm::inl(PureTerm::var("x"))).unwrap(), PureTerm::inl(PureTerm::ket0()));
        let h = 1.0 / 2f64.sqrt();
        let t = PureTerm::LinComb(vec![(Scalar::new(h, 0.0), PureTerm::var("x")), (Scalar::new(h, 0.0), PureTerm::ket1())]);
        let want = PureTerm::LinComb(vec![(Scalar::new(h, 0.0), PureTerm::ket0()), (Scalar::new(h, 0.0), PureTerm::ket1())]);
        assert_eq!(substitute(&s, &t).unwrap(), want);
        assert_eq!(substitute(&s, &PureTerm::var("y")), Err(Error::Unbound("y".into())));
    }

    #[test]
    fn predicates() {
        let v = PureTerm::LinComb(vec![(Scalar::new(1.0, 0.0), PureTerm::ket0())]);
        assert!(v.is_value());
        assert!(!PureTerm::ket0().is_value());
        let unsorted = PureTerm::LinComb(vec![(Scalar::new(0.6, 0.0), PureTerm::ket1()), (Scalar::new(0.8, 0.0), PureTerm::ket0())]);
        assert!(!unsorted.is_value());
        assert!(unsorted.is_expression());
        assert!(!PureTerm::apply(UnitaryExpr::identity(), PureTerm::Star).is_expression());
    }

    fn closed_basis(depth: u32) -> impl Strategy<Value = PureTerm> {
        let leaf = prop_oneof![Just(PureTerm::Star), Just(PureTerm::Zero)];
        leaf.prop_recursive(depth, 32, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(PureTerm::inl),
                inner.clone().prop_map(PureTerm::inr),
                inner.clone().prop_map(PureTerm::succ),
                (inner.clone(), inner).prop_map(|(a, b)| PureTerm::pair(a, b)),
            ]
        })
    }

    /// Replaces some subterms of a closed basis value by fresh variables.
    fn abstract_some(t: &PureTerm, mask: &mut impl Iterator<Item = bool>, next: &mut usize) -> PureTerm {
        if mask.next().unwrap_or(false) {
            *next += 1;
            return PureTerm::Var(format!("v{next}"));
        }
        match t {
            PureTerm::InjL(a) => PureTerm::inl(abstract_some(a, mask, next)),
            PureTerm::InjR(a) => PureTerm::inr(abstract_some(a, mask, next)),
            PureTerm::Succ(a) => PureTerm::succ(abstract_some(a, mask, next)),
            PureTerm::Pair(a, b) => {
                let a = abstract_some(a, mask, next);
                PureTerm::pair(a, abstract_some(b, mask, next))
            }
            other => other.clone(),
        }
    }

    proptest! {
        #[test]
        fn match_then_substitute_roundtrips(b in closed_basis(4), mask in proptest::collection::vec(any::<bool>(), 16)) {
            let mut it = mask.into_iter();
            let mut n = 0;
            let pattern = abstract_some(&b, &mut it, &mut n);
            let sigma = match_basis(&pattern, &b).unwrap().expect("abstraction must match");
            prop_assert_eq!(substitute(&sigma, &pattern).unwrap(), b);
        }

        #[test]
        fn order_is_total_and_antisymmetric(a in closed_basis(3), b in closed_basis(3), c in closed_basis(3)) {
            let ab = basis_cmp(&a, &b);
            prop_assert_eq!(ab.reverse(), basis_cmp(&b, &a));
            prop_assert_eq!(ab == Ordering::Equal, a == b);
            if ab != Ordering::Greater && basis_cmp(&b, &c) != Ordering::Greater {
                prop_assert!(basis_cmp(&a, &c) != Ordering::Greater);
            }
        }
    }
}
