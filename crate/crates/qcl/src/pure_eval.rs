//! Normalization of closed pure terms to sorted combinations of basis
//! values, including forward and adjoint application of unitaries.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::pure_check::{typecheck_term, PureChecker};
use crate::pure_core::{basis_cmp, eps, format_scalar_short, match_into, substitute, PureTerm, Scalar, UnitaryExpr, Valuation};

/// Normal form of a closed term: strictly sorted, zero-free entries.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalValue {
    pub entries: Vec<(Scalar, PureTerm)>,
}

type Entries = Vec<(Scalar, PureTerm)>;

fn one() -> Scalar {
    Scalar::new(1.0, 0.0)
}

/// Sorts, merges equal basis values and drops negligible coefficients.
fn canonical(mut es: Entries) -> Entries {
    es.sort_by(|a, b| basis_cmp(&a.1, &b.1));
    let mut out: Entries = Vec::with_capacity(es.len());
    for (c, t) in es {
        match out.last_mut() {
            Some((c0, t0)) if *t0 == t => *c0 += c,
            _ => out.push((c, t)),
        }
    }
    out.retain(|(c, _)| c.norm() > eps());
    out
}

fn map_entries(es: Entries, f: impl Fn(PureTerm) -> PureTerm) -> Entries {
    es.into_iter().map(|(c, t)| (c, f(t))).collect()
}

fn product(xs: &Entries, ys: &Entries) -> Entries {
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for (a, s) in xs {
        for (b, t) in ys {
            out.push((a * b, PureTerm::pair(s.clone(), t.clone())));
        }
    }
    out
}

/// Expands an expression, open or closed, into a combination of basis
/// values using the vector-space rules (distributivity of injections,
/// successor and pairing, flattening of nested sums).
pub(crate) fn expand_open(e: &PureTerm) -> Result<Entries> {
    use PureTerm::*;
    let raw = match e {
        Star | Zero | Var(_) => vec![(one(), e.clone())],
        InjL(a) => map_entries(expand_open(a)?, PureTerm::inl),
        InjR(a) => map_entries(expand_open(a)?, PureTerm::inr),
        Succ(a) => map_entries(expand_open(a)?, PureTerm::succ),
        Pair(a, b) => product(&expand_open(a)?, &expand_open(b)?),
        LinComb(es) => {
            let mut out = Vec::new();
            for (c, t) in es {
                out.extend(expand_open(t)?.into_iter().map(|(d, s)| (c * d, s)));
            }
            out
        }
        Apply(..) => return Err(Error::Malformed(format!("`{e}` is not an expression"))),
    };
    Ok(canonical(raw))
}

impl NormalValue {
    pub fn from_entries(es: Vec<(Scalar, PureTerm)>) -> NormalValue {
        NormalValue { entries: canonical(es) }
    }

    pub fn basis(b: PureTerm) -> NormalValue {
        NormalValue { entries: vec![(one(), b)] }
    }

    /// The value as a term, always a linear combination.
    pub fn to_term(&self) -> PureTerm {
        PureTerm::LinComb(self.entries.clone())
    }

    /// Reads a term that is already in normal form.
    pub fn from_term(t: &PureTerm) -> Option<NormalValue> {
        t.is_value().then(|| match t {
            PureTerm::LinComb(es) => NormalValue { entries: es.clone() },
            _ => unreachable!(),
        })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.entries.iter().map(|(c, _)| c.norm_sqr()).sum()
    }

    /// Entrywise comparison within a tolerance.
    pub fn approx_eq(&self, other: &NormalValue, tol: f64) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, s), (b, t))| s == t && (a - b).norm() <= tol)
    }

    fn scaled(&self, k: Scalar) -> Entries {
        self.entries.iter().map(|(c, t)| (c * k, t.clone())).collect()
    }
}

/// Labels a closed basis value as a ket: qubits as binary digits, qnat
/// literals as numbers.
pub fn ket_label(b: &PureTerm) -> Option<String> {
    fn digits(b: &PureTerm) -> Option<String> {
        if *b == PureTerm::ket0() {
            return Some("0".into());
        }
        if *b == PureTerm::ket1() {
            return Some("1".into());
        }
        if let PureTerm::Pair(x, y) = b {
            return Some(digits(x)? + &digits(y)?);
        }
        None
    }
    if let Some(d) = digits(b) {
        return Some(d);
    }
    if let Some(n) = b.as_nat() {
        return Some(n.to_string());
    }
    match b {
        PureTerm::Pair(x, y) => Some(format!("{},{}", ket_label(x)?, ket_label(y)?)),
        _ => None,
    }
}

impl NormalValue {
    /// Human-readable form such as `[0.7071]*|00> + [0.7071]*|11>`.
    pub fn pretty(&self, digits: usize) -> String {
        self.entries
            .iter()
            .map(|(c, t)| {
                let label = ket_label(t).map(|l| format!("|{l}>")).unwrap_or_else(|| format!("({t})"));
                format!("[{}]*{}", format_scalar_short(c, digits), label)
            })
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

impl fmt::Display for NormalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.pretty(4))
    }
}

/// Expands a closed expression to its normal form.
pub fn expand_to_basis(e: &PureTerm) -> Result<NormalValue> {
    if !e.is_closed() {
        return Err(Error::Malformed(format!("`{e}` is not closed")));
    }
    typecheck_term(&vec![], e)?;
    Ok(NormalValue { entries: expand_open(e)? })
}

/// Applies `u` to a normal value (linear extension of the clause rule).
pub fn apply_unitary(u: &UnitaryExpr, v: &NormalValue) -> Result<NormalValue> {
    Ok(NormalValue { entries: apply_entries(u, &v.entries, false)? })
}

/// Applies the adjoint of `u` to a normal value.
pub fn apply_adjoint(u: &UnitaryExpr, v: &NormalValue) -> Result<NormalValue> {
    Ok(NormalValue { entries: apply_entries(u, &v.entries, true)? })
}

fn apply_entries(u: &UnitaryExpr, es: &Entries, adjoint: bool) -> Result<Entries> {
    let mut out = Vec::new();
    for (c, b) in es {
        let r = if adjoint { adjoint_basis(u, b)? } else { forward_basis(u, b)? };
        out.extend(r.into_iter().map(|(d, t)| (c * d, t)));
    }
    Ok(canonical(out))
}

fn no_match(u: &UnitaryExpr, b: &PureTerm) -> Error {
    Error::Internal(format!("no clause of `{u}` matches `{b}`"))
}

fn split_pair<'a>(u: &UnitaryExpr, b: &'a PureTerm) -> Result<(&'a PureTerm, &'a PureTerm)> {
    match b {
        PureTerm::Pair(x, y) => Ok((x, y)),
        _ => Err(no_match(u, b)),
    }
}

fn forward_basis(u: &UnitaryExpr, b: &PureTerm) -> Result<Entries> {
    match u {
        UnitaryExpr::Clauses(cs) => {
            for (p, e) in cs {
                let mut sigma = Valuation::new();
                if match_into(p, b, &mut sigma) {
                    return expand_open(&substitute(&sigma, e)?);
                }
            }
            Err(no_match(u, b))
        }
        UnitaryExpr::Tensor(u1, u2) => {
            let (x, y) = split_pair(u, b)?;
            Ok(canonical(product(&forward_basis(u1, x)?, &forward_basis(u2, y)?)))
        }
        UnitaryExpr::DirectSum(u1, u2) => match b {
            PureTerm::InjL(x) => Ok(map_entries(forward_basis(u1, x)?, PureTerm::inl)),
            PureTerm::InjR(y) => Ok(map_entries(forward_basis(u2, y)?, PureTerm::inr)),
            _ => Err(no_match(u, b)),
        },
        UnitaryExpr::Compose(second, first) => apply_entries(second, &forward_basis(first, b)?, false),
        UnitaryExpr::Adjoint(v) => adjoint_basis(v, b),
        UnitaryExpr::Ctrl(v) => controlled(u, v, b, false),
    }
}

fn controlled(u: &UnitaryExpr, v: &UnitaryExpr, b: &PureTerm, adjoint: bool) -> Result<Entries> {
    let (ctl, target) = split_pair(u, b)?;
    if *ctl == PureTerm::ket0() {
        Ok(vec![(one(), b.clone())])
    } else if *ctl == PureTerm::ket1() {
        let r = if adjoint { adjoint_basis(v, target)? } else { forward_basis(v, target)? };
        Ok(map_entries(r, |t| PureTerm::pair(PureTerm::ket1(), t)))
    } else {
        Err(no_match(u, b))
    }
}

/// Adjoint on a basis value. For clauses `b_i -> e_i` with
/// `e_i = sum_k beta_ik q_ik` over open basis values, the result is
/// `sum_{i,k} conj(beta_ik) s_ik(b_i)` where `s_ik` matches `q_ik` against
/// the input. Plain clause reversal is the special case of one summand.
fn adjoint_basis(u: &UnitaryExpr, b: &PureTerm) -> Result<Entries> {
    match u {
        UnitaryExpr::Clauses(cs) => {
            let mut out = Vec::new();
            for (p, e) in cs {
                for (beta, q) in expand_open(e)? {
                    let mut sigma = Valuation::new();
                    if match_into(&q, b, &mut sigma) {
                        let pre = substitute(&sigma, p)?;
                        out.push((beta.conj(), pre));
                    }
                }
            }
            let out = canonical(out);
            if out.is_empty() {
                return Err(no_match(u, b));
            }
            Ok(out)
        }
        UnitaryExpr::Tensor(u1, u2) => {
            let (x, y) = split_pair(u, b)?;
            Ok(canonical(product(&adjoint_basis(u1, x)?, &adjoint_basis(u2, y)?)))
        }
        UnitaryExpr::DirectSum(u1, u2) => match b {
            PureTerm::InjL(x) => Ok(map_entries(adjoint_basis(u1, x)?, PureTerm::inl)),
            PureTerm::InjR(y) => Ok(map_entries(adjoint_basis(u2, y)?, PureTerm::inr)),
            _ => Err(no_match(u, b)),
        },
        UnitaryExpr::Compose(second, first) => apply_entries(first, &adjoint_basis(second, b)?, true),
        UnitaryExpr::Adjoint(v) => forward_basis(v, b),
        UnitaryExpr::Ctrl(v) => controlled(u, v, b, true),
    }
}

/// Innermost normalization of a closed term that is assumed well formed.
pub(crate) fn normalize_unchecked(t: &PureTerm) -> Result<NormalValue> {
    Ok(NormalValue { entries: norm_entries(t)? })
}

fn norm_entries(t: &PureTerm) -> Result<Entries> {
    use PureTerm::*;
    Ok(match t {
        Star | Zero => vec![(one(), t.clone())],
        Var(x) => return Err(Error::Unbound(x.clone())),
        InjL(a) => map_entries(norm_entries(a)?, PureTerm::inl),
        InjR(a) => map_entries(norm_entries(a)?, PureTerm::inr),
        Succ(a) => map_entries(norm_entries(a)?, PureTerm::succ),
        Pair(a, b) => canonical(product(&norm_entries(a)?, &norm_entries(b)?)),
        Apply(u, a) => apply_entries(u, &norm_entries(a)?, false)?,
        LinComb(es) => {
            let mut out = Vec::new();
            for (c, e) in es {
                out.extend(NormalValue { entries: norm_entries(e)? }.scaled(*c));
            }
            canonical(out)
        }
    })
}

/// Normal form of a closed well-formed term.
pub fn normalize(t: &PureTerm) -> Result<NormalValue> {
    if let Some(x) = t.free_vars().into_iter().next() {
        return Err(Error::Unbound(x));
    }
    typecheck_term(&vec![], t)?;
    normalize_unchecked(t)
}

/// Decides equality of closed terms by comparing normal forms.
pub fn equal_terms(t1: &PureTerm, t2: &PureTerm) -> Result<bool> {
    for t in [t1, t2] {
        if let Some(x) = t.free_vars().into_iter().next() {
            return Err(Error::Unbound(x));
        }
    }
    // The terms need a common type, not equal defaulted types.
    let mut pc = PureChecker::new();
    let q1 = pc.infer_term(&[], t1)?;
    let q2 = pc.infer_term(&[], t2)?;
    pc.uni.unify(&q1, &q2)?;
    let (a, b) = (normalize_unchecked(t1)?, normalize_unchecked(t2)?);
    Ok(approx_eq_sparse(&a, &b, eps() * 10.0))
}

/// Compares two normal values entrywise, treating missing entries as zero.
pub fn approx_eq_sparse(a: &NormalValue, b: &NormalValue, tol: f64) -> bool {
    let (mut i, mut j) = (0, 0);
    let (xs, ys) = (&a.entries, &b.entries);
    while i < xs.len() || j < ys.len() {
        let ord = match (xs.get(i), ys.get(j)) {
            (Some(x), Some(y)) => basis_cmp(&x.1, &y.1),
            (Some(_), None) => Ordering::Less,
            _ => Ordering::Greater,
        };
        let diff = match ord {
            Ordering::Equal => {
                let d = (xs[i].0 - ys[j].0).norm();
                i += 1;
                j += 1;
                d
            }
            Ordering::Less => {
                i += 1;
                xs[i - 1].0.norm()
            }
            Ordering::Greater => {
                j += 1;
                ys[j - 1].0.norm()
            }
        };
        if diff > tol {
            return false;
        }
    }
    true
}
