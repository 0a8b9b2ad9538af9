//! Syntax and linear type checking of the classically controlled calculus,
//! together with the translation `ov` from pure types and basis values to
//! classical ones.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::pure_check::{PureChecker, Ty};
use crate::pure_core::{Name, PureTerm, PureType, UnitaryExpr};

/// Name of the wildcard binder.
pub const WILDCARD: &str = "_";

/// Types of the main calculus.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MainType {
    Unit,
    Sum(Box<MainType>, Box<MainType>),
    Tensor(Box<MainType>, Box<MainType>),
    Bang(Box<MainType>),
    Lolli(Box<MainType>, Box<MainType>),
    Nat,
    BOp(PureType),
}

impl MainType {
    pub fn sum(a: MainType, b: MainType) -> MainType {
        MainType::Sum(Box::new(a), Box::new(b))
    }

    pub fn tensor(a: MainType, b: MainType) -> MainType {
        MainType::Tensor(Box::new(a), Box::new(b))
    }

    pub fn bang(a: MainType) -> MainType {
        MainType::Bang(Box::new(a))
    }

    pub fn lolli(a: MainType, b: MainType) -> MainType {
        MainType::Lolli(Box::new(a), Box::new(b))
    }

    /// `bit = I + I`.
    pub fn bit() -> MainType {
        MainType::sum(MainType::Unit, MainType::Unit)
    }

    /// `qbit = B(I (+) I)`.
    pub fn qbit() -> MainType {
        MainType::BOp(PureType::qbit())
    }

    /// No `!` and no `-o` anywhere.
    pub fn is_first_order(&self) -> bool {
        match self {
            MainType::Unit | MainType::Nat | MainType::BOp(_) => true,
            MainType::Sum(a, b) | MainType::Tensor(a, b) => a.is_first_order() && b.is_first_order(),
            MainType::Bang(_) | MainType::Lolli(..) => false,
        }
    }

    /// Values of the type may be discarded: no quantum data and no linear
    /// functions outside a `!`.
    pub fn is_classical(&self) -> bool {
        match self {
            MainType::Unit | MainType::Nat | MainType::Bang(_) => true,
            MainType::Sum(a, b) | MainType::Tensor(a, b) => a.is_classical() && b.is_classical(),
            MainType::Lolli(..) | MainType::BOp(_) => false,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        // prec 0: -o; 1: +; 2: (x); 3: prefix.
        let open = |f: &mut fmt::Formatter<'_>, need: bool| if need { write!(f, "(") } else { Ok(()) };
        let close = |f: &mut fmt::Formatter<'_>, need: bool| if need { write!(f, ")") } else { Ok(()) };
        match self {
            MainType::Unit => write!(f, "I"),
            MainType::Nat => write!(f, "Nat"),
            MainType::BOp(q) if *q == PureType::qbit() => write!(f, "qbit"),
            MainType::BOp(q) => write!(f, "B({q})"),
            MainType::Sum(a, b) if **a == MainType::Unit && **b == MainType::Unit => write!(f, "bit"),
            MainType::Bang(a) => {
                write!(f, "!")?;
                a.fmt_prec(f, 3)
            }
            MainType::Lolli(a, b) => {
                open(f, prec > 0)?;
                a.fmt_prec(f, 1)?;
                write!(f, " -o ")?;
                b.fmt_prec(f, 0)?;
                close(f, prec > 0)
            }
            MainType::Sum(a, b) => {
                open(f, prec > 1)?;
                a.fmt_prec(f, 1)?;
                write!(f, " + ")?;
                b.fmt_prec(f, 2)?;
                close(f, prec > 1)
            }
            MainType::Tensor(a, b) => {
                open(f, prec > 2)?;
                a.fmt_prec(f, 2)?;
                write!(f, " (x) ")?;
                b.fmt_prec(f, 3)?;
                close(f, prec > 2)
            }
        }
    }
}

impl fmt::Display for MainType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// Terms of the main calculus. Binders are explicit names; `_` binds
/// nothing.
#[derive(Clone, Debug, PartialEq)]
pub enum MainTerm {
    Star,
    Var(Name),
    InL(Box<MainTerm>),
    InR(Box<MainTerm>),
    /// `case L of {inl x -> M; inr y -> N}`.
    Case(Box<MainTerm>, Name, Box<MainTerm>, Name, Box<MainTerm>),
    Pair(Box<MainTerm>, Box<MainTerm>),
    /// `let x (x) y = M in N`.
    LetPair(Name, Name, Box<MainTerm>, Box<MainTerm>),
    Lift(Box<MainTerm>),
    Force(Box<MainTerm>),
    /// `\x. M`, optionally annotated.
    Lam(Name, Option<MainType>, Box<MainTerm>),
    App(Box<MainTerm>, Box<MainTerm>),
    Zero,
    Succ(Box<MainTerm>),
    /// `match L with {zero -> M; succ x -> N}`.
    Match(Box<MainTerm>, Box<MainTerm>, Name, Box<MainTerm>),
    Pure(PureTerm),
    Meas(Box<MainTerm>),
    UnApply(UnitaryExpr, Box<MainTerm>),
    /// `let B(z) = M in N`.
    LetBang(Name, Box<MainTerm>, Box<MainTerm>),
    /// `let B(x (x) y) = M in N`.
    LetPairBang(Name, Name, Box<MainTerm>, Box<MainTerm>),
}

/// Ordered typing context of the main calculus.
pub type MainContext = Vec<(Name, MainType)>;

impl MainTerm {
    pub fn var(x: &str) -> MainTerm {
        MainTerm::Var(x.to_string())
    }

    pub fn inl(m: MainTerm) -> MainTerm {
        MainTerm::InL(Box::new(m))
    }

    pub fn inr(m: MainTerm) -> MainTerm {
        MainTerm::InR(Box::new(m))
    }

    pub fn pair(a: MainTerm, b: MainTerm) -> MainTerm {
        MainTerm::Pair(Box::new(a), Box::new(b))
    }

    pub fn succ(m: MainTerm) -> MainTerm {
        MainTerm::Succ(Box::new(m))
    }

    pub fn lam(x: &str, body: MainTerm) -> MainTerm {
        MainTerm::Lam(x.to_string(), None, Box::new(body))
    }

    pub fn app(f: MainTerm, a: MainTerm) -> MainTerm {
        MainTerm::App(Box::new(f), Box::new(a))
    }

    pub fn meas(m: MainTerm) -> MainTerm {
        MainTerm::Meas(Box::new(m))
    }

    pub fn unapply(u: UnitaryExpr, m: MainTerm) -> MainTerm {
        MainTerm::UnApply(u, Box::new(m))
    }

    pub fn let_bang(z: &str, m: MainTerm, n: MainTerm) -> MainTerm {
        MainTerm::LetBang(z.to_string(), Box::new(m), Box::new(n))
    }

    pub fn let_pair_bang(x: &str, y: &str, m: MainTerm, n: MainTerm) -> MainTerm {
        MainTerm::LetPairBang(x.to_string(), y.to_string(), Box::new(m), Box::new(n))
    }

    pub fn let_pair(x: &str, y: &str, m: MainTerm, n: MainTerm) -> MainTerm {
        MainTerm::LetPair(x.to_string(), y.to_string(), Box::new(m), Box::new(n))
    }

    pub fn case(l: MainTerm, x: &str, m: MainTerm, y: &str, n: MainTerm) -> MainTerm {
        MainTerm::Case(Box::new(l), x.to_string(), Box::new(m), y.to_string(), Box::new(n))
    }

    pub fn nat(n: usize) -> MainTerm {
        (0..n).fold(MainTerm::Zero, |acc, _| MainTerm::succ(acc))
    }

    pub fn as_nat(&self) -> Option<usize> {
        match self {
            MainTerm::Zero => Some(0),
            MainTerm::Succ(m) => m.as_nat().map(|n| n + 1),
            _ => None,
        }
    }

    pub fn is_value(&self) -> bool {
        match self {
            MainTerm::Star | MainTerm::Var(_) | MainTerm::Zero | MainTerm::Lift(_) | MainTerm::Lam(..) => true,
            MainTerm::InL(v) | MainTerm::InR(v) | MainTerm::Succ(v) => v.is_value(),
            MainTerm::Pair(v, w) => v.is_value() && w.is_value(),
            _ => false,
        }
    }

    /// Free variables, each listed once.
    pub fn free_vars(&self) -> BTreeSet<Name> {
        let mut out = BTreeSet::new();
        self.collect_free(&mut Vec::new(), &mut out);
        out
    }

    fn collect_free(&self, bound: &mut Vec<Name>, out: &mut BTreeSet<Name>) {
        use MainTerm::*;
        let under = |bound: &mut Vec<Name>, out: &mut BTreeSet<Name>, names: &[&Name], body: &MainTerm| {
            let n = bound.len();
            bound.extend(names.iter().map(|x| (*x).clone()));
            body.collect_free(bound, out);
            bound.truncate(n);
        };
        match self {
            Star | Zero | Pure(_) => {}
            Var(x) => {
                if !bound.contains(x) {
                    out.insert(x.clone());
                }
            }
            InL(m) | InR(m) | Lift(m) | Force(m) | Succ(m) | Meas(m) | UnApply(_, m) => m.collect_free(bound, out),
            Pair(a, b) | App(a, b) => {
                a.collect_free(bound, out);
                b.collect_free(bound, out);
            }
            Case(l, x, m, y, n) => {
                l.collect_free(bound, out);
                under(bound, out, &[x], m);
                under(bound, out, &[y], n);
            }
            LetPair(x, y, m, n) | LetPairBang(x, y, m, n) => {
                m.collect_free(bound, out);
                under(bound, out, &[x, y], n);
            }
            Lam(x, _, m) => under(bound, out, &[x], m),
            Match(l, m, x, n) => {
                l.collect_free(bound, out);
                m.collect_free(bound, out);
                under(bound, out, &[x], n);
            }
            LetBang(z, m, n) => {
                m.collect_free(bound, out);
                under(bound, out, &[z], n);
            }
        }
    }

    /// Every bound and free name in the term.
    fn all_names(&self, out: &mut BTreeSet<Name>) {
        use MainTerm::*;
        match self {
            Star | Zero | Pure(_) => {}
            Var(x) => {
                out.insert(x.clone());
            }
            InL(m) | InR(m) | Lift(m) | Force(m) | Succ(m) | Meas(m) | UnApply(_, m) => m.all_names(out),
            Pair(a, b) | App(a, b) => {
                a.all_names(out);
                b.all_names(out);
            }
            Case(l, x, m, y, n) => {
                out.extend([x.clone(), y.clone()]);
                l.all_names(out);
                m.all_names(out);
                n.all_names(out);
            }
            LetPair(x, y, m, n) | LetPairBang(x, y, m, n) => {
                out.extend([x.clone(), y.clone()]);
                m.all_names(out);
                n.all_names(out);
            }
            Lam(x, _, m) => {
                out.insert(x.clone());
                m.all_names(out);
            }
            Match(l, m, x, n) => {
                out.insert(x.clone());
                l.all_names(out);
                m.all_names(out);
                n.all_names(out);
            }
            LetBang(z, m, n) => {
                out.insert(z.clone());
                m.all_names(out);
                n.all_names(out);
            }
        }
    }

    /// No construct outside the first-order fragment.
    pub fn is_first_order(&self) -> bool {
        self.first_order_violation().is_none()
    }

    /// The first construct outside the first-order fragment, if any.
    pub fn first_order_violation(&self) -> Option<&'static str> {
        use MainTerm::*;
        match self {
            Lift(_) => Some("lift"),
            Force(_) => Some("force"),
            Lam(..) => Some("lambda abstraction"),
            App(..) => Some("application"),
            Star | Zero | Var(_) | Pure(_) => None,
            InL(m) | InR(m) | Succ(m) | Meas(m) | UnApply(_, m) => m.first_order_violation(),
            Pair(a, b) => a.first_order_violation().or_else(|| b.first_order_violation()),
            Case(l, _, m, _, n) | Match(l, m, _, n) => {
                l.first_order_violation().or_else(|| m.first_order_violation()).or_else(|| n.first_order_violation())
            }
            LetPair(_, _, m, n) | LetBang(_, m, n) | LetPairBang(_, _, m, n) => {
                m.first_order_violation().or_else(|| n.first_order_violation())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Substitution

fn fresh_name(base: &str, avoid: &BTreeSet<Name>) -> Name {
    let stem = base.trim_end_matches(|c: char| c.is_ascii_digit() || c == '_');
    let stem = if stem.is_empty() { "v" } else { stem };
    (1..).map(|k| format!("{stem}_{k}")).find(|n| !avoid.contains(n)).expect("infinite supply")
}

/// Capture-avoiding simultaneous substitution.
pub fn substitute_main(m: &MainTerm, sigma: &[(Name, MainTerm)]) -> MainTerm {
    let mut avoid = BTreeSet::new();
    for (x, v) in sigma {
        avoid.insert(x.clone());
        v.all_names(&mut avoid);
    }
    m.all_names(&mut avoid);
    Subst { avoid }.go(m, sigma)
}

/// `m[v/x]`.
pub fn substitute_one(m: &MainTerm, x: &str, v: &MainTerm) -> MainTerm {
    substitute_main(m, &[(x.to_string(), v.clone())])
}

struct Subst {
    avoid: BTreeSet<Name>,
}

impl Subst {
    /// Renames binders that would capture a free variable of the
    /// substituted values and drops shadowed entries.
    fn binders(&mut self, names: &[&Name], sigma: &[(Name, MainTerm)]) -> (Vec<Name>, Vec<(Name, MainTerm)>) {
        let live: Vec<(Name, MainTerm)> = sigma.iter().filter(|(x, _)| !names.contains(&x)).cloned().collect();
        let captured: BTreeSet<Name> = live.iter().flat_map(|(_, v)| v.free_vars()).collect();
        let mut renamed = Vec::new();
        let mut extra = Vec::new();
        for &n in names {
            if n != WILDCARD && captured.contains(n) {
                let fresh = fresh_name(n, &self.avoid);
                self.avoid.insert(fresh.clone());
                extra.push((n.clone(), MainTerm::Var(fresh.clone())));
                renamed.push(fresh);
            } else {
                renamed.push(n.clone());
            }
        }
        let mut next = extra;
        next.extend(live);
        (renamed, next)
    }

    fn go(&mut self, m: &MainTerm, sigma: &[(Name, MainTerm)]) -> MainTerm {
        use MainTerm::*;
        if sigma.is_empty() {
            return m.clone();
        }
        let b = |t: MainTerm| Box::new(t);
        match m {
            Star | Zero | Pure(_) => m.clone(),
            Var(x) => sigma.iter().find(|(y, _)| y == x).map(|(_, v)| v.clone()).unwrap_or_else(|| m.clone()),
            InL(a) => InL(b(self.go(a, sigma))),
            InR(a) => InR(b(self.go(a, sigma))),
            Lift(a) => Lift(b(self.go(a, sigma))),
            Force(a) => Force(b(self.go(a, sigma))),
            Succ(a) => Succ(b(self.go(a, sigma))),
            Meas(a) => Meas(b(self.go(a, sigma))),
            UnApply(u, a) => UnApply(u.clone(), b(self.go(a, sigma))),
            Pair(p, q) => Pair(b(self.go(p, sigma)), b(self.go(q, sigma))),
            App(p, q) => App(b(self.go(p, sigma)), b(self.go(q, sigma))),
            Case(l, x, p, y, q) => {
                let l2 = self.go(l, sigma);
                let (xs, s1) = self.binders(&[x], sigma);
                let p2 = self.go(p, &s1);
                let (ys, s2) = self.binders(&[y], sigma);
                let q2 = self.go(q, &s2);
                Case(b(l2), xs[0].clone(), b(p2), ys[0].clone(), b(q2))
            }
            LetPair(x, y, p, q) | LetPairBang(x, y, p, q) => {
                let p2 = self.go(p, sigma);
                let (ns, s1) = self.binders(&[x, y], sigma);
                let q2 = self.go(q, &s1);
                if matches!(m, LetPair(..)) {
                    LetPair(ns[0].clone(), ns[1].clone(), b(p2), b(q2))
                } else {
                    LetPairBang(ns[0].clone(), ns[1].clone(), b(p2), b(q2))
                }
            }
            Lam(x, ann, p) => {
                let (xs, s1) = self.binders(&[x], sigma);
                Lam(xs[0].clone(), ann.clone(), b(self.go(p, &s1)))
            }
            Match(l, p, x, q) => {
                let l2 = self.go(l, sigma);
                let p2 = self.go(p, sigma);
                let (xs, s1) = self.binders(&[x], sigma);
                Match(b(l2), b(p2), xs[0].clone(), b(self.go(q, &s1)))
            }
            LetBang(z, p, q) => {
                let p2 = self.go(p, sigma);
                let (zs, s1) = self.binders(&[z], sigma);
                LetBang(zs[0].clone(), b(p2), b(self.go(q, &s1)))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// The ov translation

/// Classical image of a pure type.
pub fn ov_type(q: &PureType) -> MainType {
    match q {
        PureType::Unit => MainType::Unit,
        PureType::QNat => MainType::Nat,
        PureType::Sum(a, b) => MainType::sum(ov_type(a), ov_type(b)),
        PureType::Tensor(a, b) => MainType::tensor(ov_type(a), ov_type(b)),
    }
}

/// Classical value of a closed basis value.
pub fn ov_basis(b: &PureTerm) -> Result<MainTerm> {
    Ok(match b {
        PureTerm::Star => MainTerm::Star,
        PureTerm::Zero => MainTerm::Zero,
        PureTerm::InjL(x) => MainTerm::inl(ov_basis(x)?),
        PureTerm::InjR(x) => MainTerm::inr(ov_basis(x)?),
        PureTerm::Succ(x) => MainTerm::succ(ov_basis(x)?),
        PureTerm::Pair(x, y) => MainTerm::pair(ov_basis(x)?, ov_basis(y)?),
        PureTerm::Var(x) => return Err(Error::Malformed(format!("basis value contains the variable `{x}`"))),
        other => return Err(Error::Malformed(format!("`{other}` is not a basis value"))),
    })
}

// ---------------------------------------------------------------------------
// Type checking

#[derive(Clone, Debug, PartialEq)]
enum MTy {
    Meta(usize),
    Unit,
    Sum(Box<MTy>, Box<MTy>),
    Tensor(Box<MTy>, Box<MTy>),
    Bang(Box<MTy>),
    Lolli(Box<MTy>, Box<MTy>),
    Nat,
    B(Ty),
}

impl MTy {
    fn sum(a: MTy, b: MTy) -> MTy {
        MTy::Sum(Box::new(a), Box::new(b))
    }

    fn tensor(a: MTy, b: MTy) -> MTy {
        MTy::Tensor(Box::new(a), Box::new(b))
    }

    fn bang(a: MTy) -> MTy {
        MTy::Bang(Box::new(a))
    }

    fn lolli(a: MTy, b: MTy) -> MTy {
        MTy::Lolli(Box::new(a), Box::new(b))
    }

    fn from_main(a: &MainType) -> MTy {
        match a {
            MainType::Unit => MTy::Unit,
            MainType::Nat => MTy::Nat,
            MainType::Sum(x, y) => MTy::sum(MTy::from_main(x), MTy::from_main(y)),
            MainType::Tensor(x, y) => MTy::tensor(MTy::from_main(x), MTy::from_main(y)),
            MainType::Bang(x) => MTy::bang(MTy::from_main(x)),
            MainType::Lolli(x, y) => MTy::lolli(MTy::from_main(x), MTy::from_main(y)),
            MainType::BOp(q) => MTy::B(Ty::from_pure(q)),
        }
    }
}

struct Binding {
    name: Name,
    id: usize,
    ty: MTy,
}

/// Types recorded per subterm, keyed by node address.
pub(crate) type TypeRecord = HashMap<usize, MainType>;

pub(crate) fn node_key(m: &MainTerm) -> usize {
    m as *const MainTerm as usize
}

#[derive(Default)]
struct Checker {
    pc: PureChecker,
    metas: Vec<Option<MTy>>,
    next_id: usize,
    /// Pending `ov(q) = a` constraints on not yet resolved pure types.
    deferred_ov: Vec<(Ty, MTy)>,
    /// Types of wildcard binders; each must turn out classical.
    wildcards: Vec<(String, MTy)>,
    record: Option<Vec<(usize, MTy)>>,
}

type Uses = Vec<usize>;

impl Checker {
    fn fresh(&mut self) -> MTy {
        self.metas.push(None);
        MTy::Meta(self.metas.len() - 1)
    }

    fn shallow(&self, t: &MTy) -> MTy {
        let mut cur = t.clone();
        while let MTy::Meta(i) = cur {
            match &self.metas[i] {
                Some(next) => cur = next.clone(),
                None => return cur,
            }
        }
        cur
    }

    /// Fully resolved type; unknown parts default to `I`.
    fn resolve(&self, t: &MTy) -> MainType {
        match self.shallow(t) {
            MTy::Meta(_) | MTy::Unit => MainType::Unit,
            MTy::Nat => MainType::Nat,
            MTy::Sum(a, b) => MainType::sum(self.resolve(&a), self.resolve(&b)),
            MTy::Tensor(a, b) => MainType::tensor(self.resolve(&a), self.resolve(&b)),
            MTy::Lolli(a, b) => MainType::lolli(self.resolve(&a), self.resolve(&b)),
            MTy::Bang(a) => MainType::bang(self.resolve(&a)),
            MTy::B(q) => MainType::BOp(self.pc.resolve(&q)),
        }
    }

    fn show(&self, t: &MTy) -> String {
        match self.shallow(t) {
            MTy::Meta(i) => format!("?{i}"),
            MTy::B(q) => format!("B({})", self.pc.uni.zonk(&q)),
            _ => self.resolve(t).to_string(),
        }
    }

    fn occurs(&self, i: usize, t: &MTy) -> bool {
        match self.shallow(t) {
            MTy::Meta(j) => i == j,
            MTy::Sum(a, b) | MTy::Tensor(a, b) | MTy::Lolli(a, b) => self.occurs(i, &a) || self.occurs(i, &b),
            MTy::Bang(a) => self.occurs(i, &a),
            _ => false,
        }
    }

    fn unify(&mut self, a: &MTy, b: &MTy) -> Result<()> {
        let (sa, sb) = (self.shallow(a), self.shallow(b));
        let fail = |me: &Self| {
            let (x, y) = (me.show(a), me.show(b));
            match (&sa, &sb) {
                (MTy::B(_), MTy::Meta(_)) | (MTy::Meta(_), MTy::B(_)) => Error::mismatch(x, y),
                (MTy::B(_), _) | (_, MTy::B(_)) => Error::Modality(format!("expected {x}, found {y}")),
                _ => Error::mismatch(x, y),
            }
        };
        match (&sa, &sb) {
            (MTy::Meta(i), MTy::Meta(j)) if i == j => Ok(()),
            (MTy::Meta(i), other) | (other, MTy::Meta(i)) => {
                if self.occurs(*i, other) {
                    return Err(fail(self));
                }
                self.metas[*i] = Some(other.clone());
                Ok(())
            }
            (MTy::Unit, MTy::Unit) | (MTy::Nat, MTy::Nat) => Ok(()),
            (MTy::Sum(a1, a2), MTy::Sum(b1, b2))
            | (MTy::Tensor(a1, a2), MTy::Tensor(b1, b2))
            | (MTy::Lolli(a1, a2), MTy::Lolli(b1, b2)) => {
                if self.unify(a1, b1).and_then(|_| self.unify(a2, b2)).is_err() {
                    return Err(fail(self));
                }
                Ok(())
            }
            (MTy::Bang(x), MTy::Bang(y)) => {
                if self.unify(x, y).is_err() {
                    return Err(fail(self));
                }
                Ok(())
            }
            (MTy::B(p), MTy::B(q)) => self.pc.uni.unify(p, q),
            _ => Err(fail(self)),
        }
    }

    /// Requires a `B(_)` type, reporting other shapes as modality errors.
    fn expect_b(&mut self, t: &MTy, what: &str) -> Result<Ty> {
        match self.shallow(t) {
            MTy::B(q) => Ok(q),
            MTy::Meta(_) => {
                let q = self.pc.uni.fresh();
                self.unify(t, &MTy::B(q.clone()))?;
                Ok(q)
            }
            _ => Err(Error::Modality(format!("{what} expects a quantum type B(Q), found {}", self.show(t)))),
        }
    }

    /// `ov` on a possibly incomplete pure type.
    fn ov(&mut self, q: &Ty) -> MTy {
        match self.pc.uni.shallow(q) {
            Ty::Unit => MTy::Unit,
            Ty::QNat => MTy::Nat,
            Ty::Sum(a, b) => {
                let (x, y) = (self.ov(&a), self.ov(&b));
                MTy::sum(x, y)
            }
            Ty::Tensor(a, b) => {
                let (x, y) = (self.ov(&a), self.ov(&b));
                MTy::tensor(x, y)
            }
            meta @ Ty::Meta(_) => {
                let r = self.fresh();
                self.deferred_ov.push((meta, r.clone()));
                r
            }
        }
    }

    /// Inverse of `ov` on a classical type, if it is one.
    fn ov_inverse(&mut self, a: &MTy) -> Option<Ty> {
        match self.shallow(a) {
            MTy::Unit => Some(Ty::Unit),
            MTy::Nat => Some(Ty::QNat),
            MTy::Sum(x, y) => Some(Ty::sum(self.ov_inverse(&x)?, self.ov_inverse(&y)?)),
            MTy::Tensor(x, y) => Some(Ty::tensor(self.ov_inverse(&x)?, self.ov_inverse(&y)?)),
            MTy::Meta(_) => Some(self.pc.uni.fresh()),
            _ => None,
        }
    }

    /// Propagates pending `ov` constraints in either direction until no
    /// progress is made; remaining ones are resolved by defaulting.
    fn solve_deferred(&mut self, finalize: bool) -> Result<()> {
        loop {
            let pending = std::mem::take(&mut self.deferred_ov);
            let mut progressed = false;
            for (q, a) in pending {
                let qs = self.pc.uni.shallow(&q);
                let as_ = self.shallow(&a);
                if !matches!(qs, Ty::Meta(_)) {
                    let image = self.ov(&qs);
                    self.unify(&image, &a)?;
                    progressed = true;
                } else if !matches!(as_, MTy::Meta(_)) {
                    let inv = self.ov_inverse(&as_).ok_or_else(|| {
                        Error::mismatch("a classical type", self.show(&as_))
                    })?;
                    self.pc.uni.unify(&qs, &inv)?;
                    let image = self.ov(&inv);
                    self.unify(&image, &a)?;
                    progressed = true;
                } else {
                    self.deferred_ov.push((q, a));
                }
            }
            if self.deferred_ov.is_empty() {
                return Ok(());
            }
            if !progressed {
                if !finalize {
                    return Ok(());
                }
                // Default one unknown pure type to `I` and retry.
                let (q, _) = self.deferred_ov[0].clone();
                self.pc.uni.unify(&q, &Ty::Unit)?;
            }
        }
    }

    fn note(&mut self, m: &MainTerm, t: &MTy) {
        if let Some(r) = &mut self.record {
            r.push((node_key(m), t.clone()));
        }
    }

    fn bind(&mut self, name: &Name, ty: MTy) -> Binding {
        self.next_id += 1;
        Binding { name: name.clone(), id: self.next_id, ty }
    }

    /// Removes the uses of `b` and checks them against its type.
    fn release(&mut self, b: &Binding, uses: &mut Uses) -> Result<()> {
        let count = uses.iter().filter(|&&u| u == b.id).count();
        uses.retain(|&u| u != b.id);
        if b.name == WILDCARD {
            self.wildcards.push((b.name.clone(), b.ty.clone()));
            return Ok(());
        }
        if count == 1 {
            return Ok(());
        }
        match self.shallow(&b.ty) {
            MTy::Bang(_) => Ok(()),
            MTy::Meta(_) => {
                let inner = self.fresh();
                self.unify(&b.ty, &MTy::bang(inner))
            }
            _ if count == 0 => Err(Error::Linearity(format!("linear variable `{}` is never used", b.name))),
            _ => Err(Error::Linearity(format!("linear variable `{}` is used {count} times", b.name))),
        }
    }

    /// Checks that a variable may be used any number of times.
    fn require_bang(&mut self, env: &[Binding], id: usize, err: impl Fn(&str, String) -> Error) -> Result<()> {
        let b = env.iter().find(|b| b.id == id).expect("used variables are bound");
        match self.shallow(&b.ty) {
            MTy::Bang(_) => Ok(()),
            MTy::Meta(_) => {
                let inner = self.fresh();
                self.unify(&b.ty, &MTy::bang(inner))
            }
            _ => Err(err(&b.name, self.show(&b.ty))),
        }
    }

    /// Joins the uses of two alternative branches: linear variables must
    /// be used by both.
    fn join(&mut self, env: &[Binding], a: Uses, b: Uses) -> Result<Uses> {
        let sa: BTreeSet<usize> = a.iter().copied().collect();
        let sb: BTreeSet<usize> = b.iter().copied().collect();
        for &id in sa.symmetric_difference(&sb) {
            self.require_bang(env, id, |x, t| {
                Error::Linearity(format!("linear variable `{x}` of type {t} is used in only one branch"))
            })?;
        }
        let mut out = a;
        out.extend(b.into_iter().filter(|id| !sa.contains(id)));
        Ok(out)
    }

    fn infer(&mut self, env: &mut Vec<Binding>, m: &MainTerm) -> Result<(MTy, Uses)> {
        let (t, u) = self.infer_inner(env, m)?;
        self.note(m, &t);
        Ok((t, u))
    }

    fn with_bound<R>(
        &mut self,
        env: &mut Vec<Binding>,
        binds: Vec<Binding>,
        body: impl FnOnce(&mut Self, &mut Vec<Binding>) -> Result<(R, Uses)>,
    ) -> Result<(R, Uses)> {
        let n = env.len();
        let ids: Vec<usize> = binds.iter().map(|b| b.id).collect();
        env.extend(binds);
        let res = body(self, env);
        let bound: Vec<Binding> = env.drain(n..).collect();
        let (r, mut uses) = res?;
        for b in bound.iter().filter(|b| ids.contains(&b.id)) {
            self.release(b, &mut uses)?;
        }
        Ok((r, uses))
    }

    fn infer_inner(&mut self, env: &mut Vec<Binding>, m: &MainTerm) -> Result<(MTy, Uses)> {
        use MainTerm::*;
        Ok(match m {
            Star => (MTy::Unit, vec![]),
            Zero => (MTy::Nat, vec![]),
            Var(x) => {
                if x == WILDCARD {
                    return Err(Error::Malformed("`_` cannot be used as a variable".into()));
                }
                let b = env.iter().rev().find(|b| &b.name == x).ok_or_else(|| Error::Unbound(x.clone()))?;
                (b.ty.clone(), vec![b.id])
            }
            InL(a) => {
                let (ta, u) = self.infer(env, a)?;
                (MTy::sum(ta, self.fresh()), u)
            }
            InR(a) => {
                let (ta, u) = self.infer(env, a)?;
                (MTy::sum(self.fresh(), ta), u)
            }
            Succ(a) => {
                let (ta, u) = self.infer(env, a)?;
                self.unify(&ta, &MTy::Nat)?;
                (MTy::Nat, u)
            }
            Pair(a, b) => {
                let (ta, mut ua) = self.infer(env, a)?;
                let (tb, ub) = self.infer(env, b)?;
                ua.extend(ub);
                (MTy::tensor(ta, tb), ua)
            }
            App(f, a) => {
                let (tf, mut uf) = self.infer(env, f)?;
                let (ta, ua) = self.infer(env, a)?;
                let res = self.fresh();
                self.unify(&tf, &MTy::lolli(ta, res.clone()))?;
                uf.extend(ua);
                (res, uf)
            }
            Lam(x, ann, body) => {
                let tx = match ann {
                    Some(a) => MTy::from_main(a),
                    None => self.fresh(),
                };
                let bx = self.bind(x, tx.clone());
                let (tb, uses) = self.with_bound(env, vec![bx], |me, env| me.infer(env, body))?;
                (MTy::lolli(tx, tb), uses)
            }
            Lift(a) => {
                let (ta, uses) = self.infer(env, a)?;
                for &id in &uses {
                    self.require_bang(env, id, |x, t| {
                        Error::LiftNonBang(format!("`lift` captures the linear variable `{x}` of type {t}"))
                    })?;
                }
                (MTy::bang(ta), uses)
            }
            Force(a) => {
                let (ta, uses) = self.infer(env, a)?;
                let inner = match self.shallow(&ta) {
                    MTy::Bang(inner) => *inner,
                    MTy::Meta(_) => {
                        let inner = self.fresh();
                        self.unify(&ta, &MTy::bang(inner.clone()))?;
                        inner
                    }
                    _ => return Err(Error::Modality(format!("`force` expects a type !A, found {}", self.show(&ta)))),
                };
                (inner, uses)
            }
            Case(l, x, a, y, b) => {
                let (tl, mut ul) = self.infer(env, l)?;
                let (tx, ty) = (self.fresh(), self.fresh());
                self.unify(&tl, &MTy::sum(tx.clone(), ty.clone()))?;
                let bx = self.bind(x, tx);
                let (ta, ua) = self.with_bound(env, vec![bx], |me, env| me.infer(env, a))?;
                let by = self.bind(y, ty);
                let (tb, ub) = self.with_bound(env, vec![by], |me, env| me.infer(env, b))?;
                self.unify(&ta, &tb)?;
                ul.extend(self.join(env, ua, ub)?);
                (ta, ul)
            }
            LetPair(x, y, a, b) => {
                let (ta, mut ua) = self.infer(env, a)?;
                let (tx, ty) = (self.fresh(), self.fresh());
                self.unify(&ta, &MTy::tensor(tx.clone(), ty.clone()))?;
                let binds = vec![self.bind(x, tx), self.bind(y, ty)];
                let (tb, ub) = self.with_bound(env, binds, |me, env| me.infer(env, b))?;
                ua.extend(ub);
                (tb, ua)
            }
            Match(l, a, x, b) => {
                let (tl, mut ul) = self.infer(env, l)?;
                self.unify(&tl, &MTy::Nat)?;
                let (ta, ua) = self.infer(env, a)?;
                let bx = self.bind(x, MTy::Nat);
                let (tb, ub) = self.with_bound(env, vec![bx], |me, env| me.infer(env, b))?;
                self.unify(&ta, &tb)?;
                ul.extend(self.join(env, ua, ub)?);
                (ta, ul)
            }
            Pure(t) => {
                if let Some(x) = t.free_vars().first() {
                    return Err(Error::Unbound(format!("{x} (prepared states must be closed)")));
                }
                let q = self.pc.infer_term(&[], t)?;
                (MTy::B(q), vec![])
            }
            Meas(a) => {
                let (ta, ua) = self.infer(env, a)?;
                let q = self.expect_b(&ta, "`meas`")?;
                (self.ov(&q), ua)
            }
            UnApply(u, a) => {
                let (ta, ua) = self.infer(env, a)?;
                let q = self.expect_b(&ta, "unitary application")?;
                let (dom, cod) = self.pc.infer_unitary(u)?;
                self.pc.uni.unify(&dom, &q)?;
                (MTy::B(cod), ua)
            }
            LetBang(z, a, b) => {
                let (ta, mut ua) = self.infer(env, a)?;
                let (l, r) = (self.fresh(), self.fresh());
                let shape = MTy::tensor(l.clone(), r.clone());
                self.unify(&ta, &shape).map_err(|_| {
                    Error::Modality(format!("`let B(..)` expects B(Q1) (x) B(Q2), found {}", self.show(&ta)))
                })?;
                let q1 = self.expect_b(&l, "`let B(..)`")?;
                let q2 = self.expect_b(&r, "`let B(..)`")?;
                let bz = self.bind(z, MTy::B(Ty::tensor(q1, q2)));
                let (tb, ub) = self.with_bound(env, vec![bz], |me, env| me.infer(env, b))?;
                ua.extend(ub);
                (tb, ua)
            }
            LetPairBang(x, y, a, b) => {
                let (ta, mut ua) = self.infer(env, a)?;
                let q = self.expect_b(&ta, "`let B(x (x) y)`")?;
                let (q1, q2) = (self.pc.uni.fresh(), self.pc.uni.fresh());
                self.pc.uni.unify(&q, &Ty::tensor(q1.clone(), q2.clone())).map_err(|_| {
                    Error::mismatch("B(Q1 (x) Q2)", format!("B({})", self.pc.uni.zonk(&q)))
                })?;
                let binds = vec![self.bind(x, MTy::B(q1)), self.bind(y, MTy::B(q2))];
                let (tb, ub) = self.with_bound(env, binds, |me, env| me.infer(env, b))?;
                ua.extend(ub);
                (tb, ua)
            }
        })
    }

    fn finish(&mut self) -> Result<()> {
        self.solve_deferred(true)?;
        for (_, t) in std::mem::take(&mut self.wildcards) {
            let resolved = self.resolve(&t);
            if !resolved.is_classical() {
                return Err(Error::Linearity(format!("a value of type {resolved} is discarded by `_`")));
            }
        }
        Ok(())
    }

    fn check_top(&mut self, ctx: &MainContext, m: &MainTerm) -> Result<MTy> {
        let mut seen = BTreeSet::new();
        for (x, _) in ctx {
            if !seen.insert(x) {
                return Err(Error::Linearity(format!("variable `{x}` declared twice")));
            }
        }
        let binds: Vec<Binding> = ctx.iter().map(|(x, a)| self.bind(x, MTy::from_main(a))).collect();
        let mut env = Vec::new();
        let (t, uses) = self.with_bound(&mut env, binds, |me, env| me.infer(env, m))?;
        debug_assert!(uses.is_empty());
        self.finish()?;
        Ok(t)
    }
}

/// Infers the type of `m` under `ctx`. Linear variables of `ctx` must be
/// used exactly once. Unconstrained parts of the type default to `I`.
pub fn typecheck_main(ctx: &MainContext, m: &MainTerm) -> Result<MainType> {
    let mut ch = Checker::default();
    let t = ch.check_top(ctx, m)?;
    Ok(ch.resolve(&t))
}

/// Checks `ctx |- m : expected`.
pub fn check_main(ctx: &MainContext, m: &MainTerm, expected: &MainType) -> Result<()> {
    let mut ch = Checker::default();
    let t = ch.check_top(ctx, m)?;
    ch.unify(&t, &MTy::from_main(expected))?;
    ch.finish()
}

/// Type checking that also records the resolved type of every subterm.
pub(crate) fn typecheck_recorded(ctx: &MainContext, m: &MainTerm, expected: Option<&MainType>) -> Result<(MainType, TypeRecord)> {
    let mut ch = Checker { record: Some(Vec::new()), ..Checker::default() };
    let t = ch.check_top(ctx, m)?;
    if let Some(e) = expected {
        ch.unify(&t, &MTy::from_main(e))?;
        ch.finish()?;
    }
    let record = ch.record.take().unwrap_or_default();
    let map = record.iter().map(|(k, t)| (*k, ch.resolve(t))).collect();
    Ok((ch.resolve(&t), map))
}

// ---------------------------------------------------------------------------
// Printing

impl MainTerm {
    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        // prec 0: binders; 1: tensor; 2: application; 3: prefix; 4: atom.
        use MainTerm::*;
        let open = |f: &mut fmt::Formatter<'_>, need: bool| if need { write!(f, "(") } else { Ok(()) };
        let close = |f: &mut fmt::Formatter<'_>, need: bool| if need { write!(f, ")") } else { Ok(()) };
        if let Some(n) = self.as_nat() {
            return write!(f, "{n}");
        }
        match self {
            Star => write!(f, "*"),
            Zero => write!(f, "zero"),
            Var(x) => write!(f, "{x}"),
            InL(a) | InR(a) | Succ(a) | Lift(a) | Force(a) => {
                let kw = match self {
                    InL(_) => "inl",
                    InR(_) => "inr",
                    Succ(_) => "succ",
                    Lift(_) => "lift",
                    _ => "force",
                };
                open(f, prec > 3)?;
                write!(f, "{kw} ")?;
                a.fmt_prec(f, 3)?;
                close(f, prec > 3)
            }
            Pair(a, b) => {
                open(f, prec > 1)?;
                a.fmt_prec(f, 1)?;
                write!(f, " (x) ")?;
                b.fmt_prec(f, 2)?;
                close(f, prec > 1)
            }
            App(a, b) => {
                open(f, prec > 2)?;
                a.fmt_prec(f, 2)?;
                write!(f, " ")?;
                b.fmt_prec(f, 3)?;
                close(f, prec > 2)
            }
            Lam(x, ann, body) => {
                open(f, prec > 0)?;
                match ann {
                    Some(a) => write!(f, "\\{x} : {a}. ")?,
                    None => write!(f, "\\{x}. ")?,
                }
                body.fmt_prec(f, 0)?;
                close(f, prec > 0)
            }
            LetPair(x, y, a, b) => {
                open(f, prec > 0)?;
                write!(f, "let {x} (x) {y} = {a} in ")?;
                b.fmt_prec(f, 0)?;
                close(f, prec > 0)
            }
            LetBang(z, a, b) => {
                open(f, prec > 0)?;
                write!(f, "let B({z}) = {a} in ")?;
                b.fmt_prec(f, 0)?;
                close(f, prec > 0)
            }
            LetPairBang(x, y, a, b) => {
                open(f, prec > 0)?;
                write!(f, "let B({x} (x) {y}) = {a} in ")?;
                b.fmt_prec(f, 0)?;
                close(f, prec > 0)
            }
            Case(l, x, a, y, b) => write!(f, "case {l} of {{inl {x} -> {a}; inr {y} -> {b}}}"),
            Match(l, a, x, b) => write!(f, "match {l} with {{zero -> {a}; succ {x} -> {b}}}"),
            Pure(t) => write!(f, "pure({t})"),
            Meas(a) => write!(f, "meas({a})"),
            UnApply(u, a) => write!(f, "U[{u}]({a})"),
        }
    }
}

/// Prints in the concrete syntax accepted by the parser.
impl fmt::Display for MainTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::pure_check::tests::{c, cnot, had};
    use proptest::prelude::*;

    pub fn q2() -> PureType {
        PureType::tensor(PureType::qbit(), PureType::qbit())
    }

    /// `let B(z) = U[H](pure |0>) (x) pure |0> in U[CNOT](z)`.
    pub fn bell_s() -> MainTerm {
        let prep = MainTerm::pair(
            MainTerm::unapply(had(), MainTerm::Pure(PureTerm::ket0())),
            MainTerm::Pure(PureTerm::ket0()),
        );
        MainTerm::let_bang("z", prep, MainTerm::unapply(cnot(), MainTerm::var("z")))
    }

    /// `\x. \y. let B(z) = x (x) y in let q1 (x) q2 = ... in meas(U[H](q1)) (x) meas(q2)`,
    /// with the split done by `let B(q1 (x) q2)`.
    pub fn bell_m() -> MainTerm {
        let body = MainTerm::let_pair_bang(
            "q1",
            "q2",
            MainTerm::unapply(cnot(), MainTerm::var("z")),
            MainTerm::pair(
                MainTerm::meas(MainTerm::unapply(had(), MainTerm::var("q1"))),
                MainTerm::meas(MainTerm::var("q2")),
            ),
        );
        let inner = MainTerm::let_bang("z", MainTerm::pair(MainTerm::var("x"), MainTerm::var("y")), body);
        MainTerm::lam("x", MainTerm::lam("y", inner))
    }

    fn pauli_x() -> UnitaryExpr {
        UnitaryExpr::Clauses(vec![(PureTerm::ket0(), PureTerm::ket1()), (PureTerm::ket1(), PureTerm::ket0())])
    }

    fn pauli_z() -> UnitaryExpr {
        UnitaryExpr::Clauses(vec![
            (PureTerm::ket0(), PureTerm::ket0()),
            (PureTerm::ket1(), PureTerm::LinComb(vec![(c(-1.0), PureTerm::ket1())])),
        ])
    }

    /// Applies the teleportation corrections to `q` given bits `p`: the
    /// second bit selects X, the first one Z.
    pub fn app_u() -> MainTerm {
        let on = |u: Option<UnitaryExpr>| match u {
            Some(u) => MainTerm::unapply(u, MainTerm::var("q")),
            None => MainTerm::var("q"),
        };
        let by_y = |a: Option<UnitaryExpr>, b: Option<UnitaryExpr>| MainTerm::case(MainTerm::var("y"), "_", on(a), "_", on(b));
        let body = MainTerm::case(
            MainTerm::var("x"),
            "_",
            by_y(None, Some(pauli_x())),
            "_",
            by_y(Some(pauli_z()), Some(UnitaryExpr::compose(pauli_z(), pauli_x()))),
        );
        MainTerm::lam("q", MainTerm::lam("p", MainTerm::let_pair("x", "y", MainTerm::var("p"), body)))
    }

    pub fn tele() -> MainTerm {
        let inner = MainTerm::let_pair(
            "b1",
            "b2",
            MainTerm::app(MainTerm::app(bell_m(), MainTerm::var("q")), MainTerm::var("x")),
            MainTerm::app(
                MainTerm::app(app_u(), MainTerm::var("y")),
                MainTerm::pair(MainTerm::var("b1"), MainTerm::var("b2")),
            ),
        );
        MainTerm::lam("q", MainTerm::let_pair_bang("x", "y", bell_s(), inner))
    }

    #[test]
    fn ov_examples() {
        assert_eq!(ov_type(&PureType::qbit()), MainType::bit());
        assert_eq!(ov_type(&PureType::QNat), MainType::Nat);
        assert_eq!(ov_type(&q2()), MainType::tensor(MainType::bit(), MainType::bit()));
        assert_eq!(ov_basis(&PureTerm::ket1()).unwrap(), MainTerm::inr(MainTerm::Star));
        assert_eq!(ov_basis(&PureTerm::nat(2)).unwrap(), MainTerm::nat(2));
        assert_eq!(
            ov_basis(&PureTerm::pair(PureTerm::ket0(), PureTerm::ket1())).unwrap(),
            MainTerm::pair(MainTerm::inl(MainTerm::Star), MainTerm::inr(MainTerm::Star))
        );
        assert!(ov_basis(&PureTerm::var("x")).is_err());
    }

    #[test]
    fn typing_examples() {
        assert_eq!(typecheck_main(&vec![], &bell_s()).unwrap(), MainType::BOp(q2()));
        let bm = typecheck_main(&vec![], &bell_m()).unwrap();
        let bb = MainType::tensor(MainType::bit(), MainType::bit());
        assert_eq!(bm, MainType::lolli(MainType::qbit(), MainType::lolli(MainType::qbit(), bb)));
        assert_eq!(typecheck_main(&vec![], &tele()).unwrap(), MainType::lolli(MainType::qbit(), MainType::qbit()));
        assert_eq!(typecheck_main(&vec![], &tele()).unwrap().to_string(), "qbit -o qbit");
    }

    #[test]
    fn toffoli_program() {
        // \y. let B(x (x) xs) = U[ctrl CNOT](y) in case meas(x) of {inl _ -> U[CNOT](xs); inr _ -> xs}
        let body = MainTerm::let_pair_bang(
            "x",
            "xs",
            MainTerm::unapply(UnitaryExpr::ctrl(cnot()), MainTerm::var("y")),
            MainTerm::case(MainTerm::meas(MainTerm::var("x")), "_", MainTerm::unapply(cnot(), MainTerm::var("xs")), "_", MainTerm::var("xs")),
        );
        let prog = MainTerm::lam("y", body);
        let q3 = PureType::tensor(PureType::qbit(), q2());
        let want = MainType::lolli(MainType::BOp(q3), MainType::BOp(q2()));
        assert_eq!(typecheck_main(&vec![], &prog).unwrap(), want);
    }

    #[test]
    fn typing_errors() {
        let x = MainTerm::var("x");
        let dup = MainTerm::pair(x.clone(), x.clone());
        let ctx = vec![("x".to_string(), MainType::qbit())];
        assert!(matches!(typecheck_main(&ctx, &dup), Err(Error::Linearity(_))));
        assert!(matches!(typecheck_main(&ctx, &MainTerm::Star), Err(Error::Linearity(_))));
        let lifted = MainTerm::Lift(Box::new(x.clone()));
        assert!(matches!(typecheck_main(&ctx, &lifted), Err(Error::LiftNonBang(_))));
        let m = MainTerm::meas(MainTerm::Star);
        assert!(matches!(typecheck_main(&vec![], &m), Err(Error::Modality(_))));
        assert!(matches!(typecheck_main(&vec![], &MainTerm::var("q")), Err(Error::Unbound(_))));
        let open_pure = MainTerm::Pure(PureTerm::var("v"));
        assert!(matches!(typecheck_main(&vec![], &open_pure), Err(Error::Unbound(_))));
        let discard = MainTerm::lam("_", MainTerm::Star);
        let ann = MainTerm::Lam("_".into(), Some(MainType::qbit()), Box::new(MainTerm::Star));
        assert!(typecheck_main(&vec![], &discard).is_ok());
        assert!(matches!(typecheck_main(&vec![], &ann), Err(Error::Linearity(_))));
        let one_branch = MainTerm::case(MainTerm::inl(MainTerm::Star), "_", x.clone(), "_", MainTerm::Pure(PureTerm::ket0()));
        assert!(matches!(typecheck_main(&ctx, &one_branch), Err(Error::Linearity(_))));
    }

    #[test]
    fn bang_variables_are_duplicable() {
        let ctx = vec![("f".to_string(), MainType::bang(MainType::lolli(MainType::Nat, MainType::Nat)))];
        let f = || MainTerm::Force(Box::new(MainTerm::var("f")));
        let m = MainTerm::pair(MainTerm::app(f(), MainTerm::Zero), MainTerm::app(f(), MainTerm::nat(1)));
        assert_eq!(typecheck_main(&ctx, &m).unwrap(), MainType::tensor(MainType::Nat, MainType::Nat));
        let lifted = MainTerm::Lift(Box::new(MainTerm::lam("n", MainTerm::succ(MainTerm::var("n")))));
        assert!(typecheck_main(&vec![], &lifted).is_ok());
    }

    #[test]
    fn substitution_avoids_capture() {
        let m = MainTerm::lam("y", MainTerm::pair(MainTerm::var("x"), MainTerm::var("y")));
        let r = substitute_one(&m, "x", &MainTerm::var("y"));
        match &r {
            MainTerm::Lam(b, _, body) => {
                assert_ne!(b, "y");
                assert_eq!(**body, MainTerm::pair(MainTerm::var("y"), MainTerm::var(b)));
            }
            _ => panic!("{r}"),
        }
        let shadow = MainTerm::lam("x", MainTerm::var("x"));
        assert_eq!(substitute_one(&shadow, "x", &MainTerm::Star), shadow);
    }

    #[test]
    fn printing() {
        assert_eq!(
            bell_s().to_string(),
            format!("let B(z) = U[{}](pure(inl *)) (x) pure(inl *) in U[{}](z)", had(), cnot())
        );
        let t = MainType::lolli(MainType::qbit(), MainType::lolli(MainType::qbit(), MainType::tensor(MainType::bit(), MainType::bit())));
        assert_eq!(t.to_string(), "qbit -o qbit -o bit (x) bit");
        assert_eq!(MainType::BOp(q2()).to_string(), "B(qbit (x) qbit)");
        assert_eq!(MainTerm::nat(3).to_string(), "3");
    }

    fn arb_classical_value() -> impl Strategy<Value = (MainTerm, MainType)> {
        let leaf = prop_oneof![
            Just((MainTerm::Star, MainType::Unit)),
            (0usize..4).prop_map(|n| (MainTerm::nat(n), MainType::Nat)),
        ];
        leaf.prop_recursive(3, 12, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|((a, ta), (b, tb))| (MainTerm::pair(a, b), MainType::tensor(ta, tb))),
                inner.clone().prop_map(|(a, ta)| (MainTerm::inl(a), MainType::sum(ta, MainType::Unit))),
                inner.prop_map(|(a, ta)| (MainTerm::inr(a), MainType::sum(MainType::Nat, ta))),
            ]
        })
    }

    proptest! {
        #[test]
        fn substitution_preserves_typing((v, a) in arb_classical_value(), use_case in any::<bool>()) {
            // M uses x linearly at type A, either directly or under a case.
            let x = MainTerm::var("x");
            let m = if use_case {
                MainTerm::case(MainTerm::inl(MainTerm::Star), "_", MainTerm::pair(x.clone(), MainTerm::Zero), "_", MainTerm::pair(x, MainTerm::nat(1)))
            } else {
                MainTerm::pair(MainTerm::Pure(PureTerm::ket0()), x)
            };
            let ctx = vec![("x".to_string(), a.clone())];
            let b = typecheck_main(&ctx, &m).unwrap();
            prop_assert_eq!(typecheck_main(&vec![], &v).ok().map(|t| check_main(&vec![], &v, &a).is_ok() || t == a), Some(true));
            prop_assert!(check_main(&vec![], &substitute_one(&m, "x", &v), &b).is_ok());
        }

        #[test]
        fn ov_basis_preserves_typing(bits in proptest::collection::vec(0u8..3, 1..4)) {
            let parts: Vec<PureTerm> = bits.iter().map(|b| match b {
                0 => PureTerm::ket0(),
                1 => PureTerm::ket1(),
                _ => PureTerm::nat(2),
            }).collect();
            let b = PureTerm::tuple(parts);
            let q = crate::pure_check::typecheck_term(&vec![], &b).unwrap();
            prop_assert!(check_main(&vec![], &ov_basis(&b).unwrap(), &ov_type(&q)).is_ok());
        }
    }
}
