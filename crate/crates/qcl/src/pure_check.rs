//! Orthogonality, orthonormal-basis predicates and the formation rules of
//! terms and unitaries, with unification-based inference of pure types.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::pure_core::{basis_cmp, check_linear_pattern, eps, Name, PureContext, PureTerm, PureType, Scalar, UnitaryExpr};

/// Domain and codomain of a unitary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitaryType {
    pub domain: PureType,
    pub codomain: PureType,
}

impl fmt::Display for UnitaryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U({}, {})", self.domain, self.codomain)
    }
}

// ---------------------------------------------------------------------------
// Orthogonality

fn scalar_is_zero(c: &Scalar) -> bool {
    c.norm() <= eps()
}

/// Decides the orthogonality relation on raw terms.
///
/// The relation is the smallest symmetric one closed under the inductive
/// rules; pairs that no rule derives are reported as non-orthogonal even
/// when their denotations happen to be orthogonal.
pub fn orthogonal(t1: &PureTerm, t2: &PureTerm) -> bool {
    ortho_directed(t1, t2) || ortho_directed(t2, t1)
}

fn ortho_directed(a: &PureTerm, b: &PureTerm) -> bool {
    use PureTerm::*;
    match (a, b) {
        (InjL(_), InjR(_)) | (Zero, Succ(_)) => true,
        (InjL(x), InjL(y)) | (InjR(x), InjR(y)) | (Succ(x), Succ(y)) => orthogonal(x, y),
        (Pair(a1, a2), Pair(b1, b2)) => orthogonal(a1, b1) || orthogonal(a2, b2),
        (Apply(u, x), Apply(v, y)) if u == v => orthogonal(x, y),
        (LinComb(xs), LinComb(ys)) => ortho_sums(xs, ys) || ortho_term_sum(a, ys),
        (_, LinComb(ys)) => ortho_term_sum(a, ys),
        _ => false,
    }
}

/// `t` is orthogonal to every summand, or equal to a summand whose
/// coefficient is zero (padding).
fn ortho_term_sum(t: &PureTerm, entries: &[(Scalar, PureTerm)]) -> bool {
    entries.iter().all(|(c, s)| orthogonal(t, s) || (scalar_is_zero(c) && s == t))
}

/// Two sums over a common pairwise-orthogonal family whose coefficient
/// inner product vanishes.
fn ortho_sums(xs: &[(Scalar, PureTerm)], ys: &[(Scalar, PureTerm)]) -> bool {
    // Align syntactically equal terms into one index set.
    let mut family: Vec<&PureTerm> = Vec::new();
    let mut left: Vec<Option<Scalar>> = Vec::new();
    let mut right: Vec<Option<Scalar>> = Vec::new();
    for (c, t) in xs {
        if family.contains(&t) {
            return false;
        }
        family.push(t);
        left.push(Some(*c));
        right.push(None);
    }
    for (c, t) in ys {
        match family.iter().position(|s| *s == t) {
            Some(i) => {
                if right[i].is_some() {
                    return false;
                }
                right[i] = Some(*c);
            }
            None => {
                family.push(t);
                left.push(None);
                right.push(Some(*c));
            }
        }
    }
    for i in 0..family.len() {
        for j in (i + 1)..family.len() {
            if !orthogonal(family[i], family[j]) {
                return false;
            }
        }
    }
    let inner: Scalar = left
        .iter()
        .zip(&right)
        .filter_map(|(a, b)| Some(a.as_ref()?.conj() * b.as_ref()?))
        .sum();
    scalar_is_zero(&inner)
}

// ---------------------------------------------------------------------------
// Types with unification variables

/// Pure type possibly containing unification variables.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Ty {
    Meta(usize),
    Unit,
    Sum(Box<Ty>, Box<Ty>),
    Tensor(Box<Ty>, Box<Ty>),
    QNat,
}

impl Ty {
    pub fn sum(a: Ty, b: Ty) -> Ty {
        Ty::Sum(Box::new(a), Box::new(b))
    }

    pub fn tensor(a: Ty, b: Ty) -> Ty {
        Ty::Tensor(Box::new(a), Box::new(b))
    }

    pub fn qbit() -> Ty {
        Ty::sum(Ty::Unit, Ty::Unit)
    }

    pub fn from_pure(q: &PureType) -> Ty {
        match q {
            PureType::Unit => Ty::Unit,
            PureType::QNat => Ty::QNat,
            PureType::Sum(a, b) => Ty::sum(Ty::from_pure(a), Ty::from_pure(b)),
            PureType::Tensor(a, b) => Ty::tensor(Ty::from_pure(a), Ty::from_pure(b)),
        }
    }

    /// Replaces remaining unification variables by `I`.
    pub fn to_pure_defaulted(&self) -> PureType {
        match self {
            Ty::Meta(_) | Ty::Unit => PureType::Unit,
            Ty::QNat => PureType::QNat,
            Ty::Sum(a, b) => PureType::sum(a.to_pure_defaulted(), b.to_pure_defaulted()),
            Ty::Tensor(a, b) => PureType::tensor(a.to_pure_defaulted(), b.to_pure_defaulted()),
        }
    }

    fn has_meta(&self) -> bool {
        match self {
            Ty::Meta(_) => true,
            Ty::Unit | Ty::QNat => false,
            Ty::Sum(a, b) | Ty::Tensor(a, b) => a.has_meta() || b.has_meta(),
        }
    }
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ty::Meta(i) => write!(f, "?{i}"),
            Ty::Unit => write!(f, "I"),
            Ty::QNat => write!(f, "qnat"),
            Ty::Sum(a, b) if **a == Ty::Unit && **b == Ty::Unit => write!(f, "qbit"),
            Ty::Sum(a, b) => write!(f, "({a} (+) {b})"),
            Ty::Tensor(a, b) => write!(f, "({a} (x) {b})"),
        }
    }
}

/// Union-find store of pure unification variables.
#[derive(Default, Debug, Clone)]
pub struct Unifier {
    slots: Vec<Option<Ty>>,
}

impl Unifier {
    pub fn fresh(&mut self) -> Ty {
        self.slots.push(None);
        Ty::Meta(self.slots.len() - 1)
    }

    /// Resolves the head of a type.
    pub fn shallow(&self, t: &Ty) -> Ty {
        let mut cur = t.clone();
        while let Ty::Meta(i) = cur {
            match &self.slots[i] {
                Some(next) => cur = next.clone(),
                None => return cur,
            }
        }
        cur
    }

    /// Fully resolves a type.
    pub fn zonk(&self, t: &Ty) -> Ty {
        match self.shallow(t) {
            Ty::Sum(a, b) => Ty::sum(self.zonk(&a), self.zonk(&b)),
            Ty::Tensor(a, b) => Ty::tensor(self.zonk(&a), self.zonk(&b)),
            other => other,
        }
    }

    fn occurs(&self, i: usize, t: &Ty) -> bool {
        match self.shallow(t) {
            Ty::Meta(j) => i == j,
            Ty::Sum(a, b) | Ty::Tensor(a, b) => self.occurs(i, &a) || self.occurs(i, &b),
            _ => false,
        }
    }

    pub fn unify(&mut self, a: &Ty, b: &Ty) -> Result<()> {
        let (a, b) = (self.shallow(a), self.shallow(b));
        match (&a, &b) {
            (Ty::Meta(i), Ty::Meta(j)) if i == j => Ok(()),
            (Ty::Meta(i), other) | (other, Ty::Meta(i)) => {
                if self.occurs(*i, other) {
                    return Err(Error::mismatch(self.zonk(&a), self.zonk(&b)));
                }
                self.slots[*i] = Some(other.clone());
                Ok(())
            }
            (Ty::Unit, Ty::Unit) | (Ty::QNat, Ty::QNat) => Ok(()),
            (Ty::Sum(a1, a2), Ty::Sum(b1, b2)) | (Ty::Tensor(a1, a2), Ty::Tensor(b1, b2)) => {
                self.unify(a1, b1).and_then(|_| self.unify(a2, b2)).map_err(|_| Error::mismatch(self.zonk(&a), self.zonk(&b)))
            }
            _ => Err(Error::mismatch(self.zonk(&a), self.zonk(&b))),
        }
    }
}

// ---------------------------------------------------------------------------
// Orthonormal bases

type Memo = HashMap<String, bool>;

/// Decides whether a finite set of basis values is an orthonormal basis of `q`.
pub fn check_onb(q: &PureType, s: &[PureTerm]) -> bool {
    s.iter().all(PureTerm::is_basis) && onb(&Ty::from_pure(q), s, false, &mut Memo::new())
}

/// Decides the extended predicate, which also admits unitary recombinations.
pub fn check_onb_ext(q: &PureType, s: &[PureTerm]) -> bool {
    s.iter().all(PureTerm::is_expression) && onb(&Ty::from_pure(q), s, true, &mut Memo::new())
}

fn canonical_set(s: &[PureTerm]) -> Option<Vec<PureTerm>> {
    let mut v = s.to_vec();
    v.sort_by(basis_cmp);
    if v.windows(2).any(|w| w[0] == w[1]) {
        return None;
    }
    Some(v)
}

fn onb(q: &Ty, s: &[PureTerm], ext: bool, memo: &mut Memo) -> bool {
    let Some(set) = canonical_set(s) else { return false };
    if set.is_empty() {
        return false;
    }
    let key = format!("{ext}|{q:?}|{set:?}");
    if let Some(v) = memo.get(&key) {
        return *v;
    }
    // Provisional entry guards against cyclic searches.
    memo.insert(key.clone(), false);
    let result = onb_rules(q, &set, ext, memo);
    memo.insert(key, result);
    result
}

fn onb_rules(q: &Ty, set: &[PureTerm], ext: bool, memo: &mut Memo) -> bool {
    if set.len() == 1 && matches!(set[0], PureTerm::Var(_)) {
        return true;
    }
    if ext && set.iter().any(|t| matches!(t, PureTerm::LinComb(_))) && onb_recombination(q, set, memo) {
        return true;
    }
    match q {
        Ty::Meta(_) => false,
        Ty::Unit => set.len() == 1 && set[0] == PureTerm::Star,
        Ty::Sum(a, b) => {
            let mut lefts = Vec::new();
            let mut rights = Vec::new();
            for t in set {
                match t {
                    PureTerm::InjL(x) => lefts.push((**x).clone()),
                    PureTerm::InjR(y) => rights.push((**y).clone()),
                    _ => return false,
                }
            }
            onb(a, &lefts, ext, memo) && onb(b, &rights, ext, memo)
        }
        Ty::QNat => {
            let mut zeros = 0;
            let mut preds = Vec::new();
            for t in set {
                match t {
                    PureTerm::Zero => zeros += 1,
                    PureTerm::Succ(x) => preds.push((**x).clone()),
                    _ => return false,
                }
            }
            zeros == 1 && !preds.is_empty() && onb(q, &preds, ext, memo)
        }
        Ty::Tensor(a, b) => {
            let mut pairs = Vec::new();
            for t in set {
                match t {
                    PureTerm::Pair(x, y) => pairs.push(((**x).clone(), (**y).clone())),
                    _ => return false,
                }
            }
            onb_tensor(a, b, &pairs, ext, memo, false) || onb_tensor(b, a, &pairs, ext, memo, true)
        }
    }
}

/// Tensor rule grouping by one component: the distinct major components
/// form a basis and, for each of them, the minor components form a basis.
fn onb_tensor(major: &Ty, minor: &Ty, pairs: &[(PureTerm, PureTerm)], ext: bool, memo: &mut Memo, swapped: bool) -> bool {
    let mut groups: Vec<(PureTerm, Vec<PureTerm>)> = Vec::new();
    for (x, y) in pairs {
        let (k, v) = if swapped { (y, x) } else { (x, y) };
        match groups.iter_mut().find(|(g, _)| g == k) {
            Some((_, vs)) => vs.push(v.clone()),
            None => groups.push((k.clone(), vec![v.clone()])),
        }
    }
    let keys: Vec<PureTerm> = groups.iter().map(|(k, _)| k.clone()).collect();
    onb(major, &keys, ext, memo) && groups.iter().all(|(_, vs)| onb(minor, vs, ext, memo))
}

/// Rule for sets of combinations over a shared basis with a unitary
/// coefficient matrix. Plain elements count as combinations `[1]*e`.
fn onb_recombination(q: &Ty, set: &[PureTerm], memo: &mut Memo) -> bool {
    let rows: Vec<Vec<(Scalar, PureTerm)>> = set
        .iter()
        .map(|t| match t {
            PureTerm::LinComb(es) => es.clone(),
            other => vec![(Scalar::new(1.0, 0.0), other.clone())],
        })
        .collect();
    let mut base: Vec<PureTerm> = Vec::new();
    for row in &rows {
        for (_, t) in row {
            if !base.contains(t) {
                base.push(t.clone());
            }
        }
    }
    if base.len() != rows.len() {
        return false;
    }
    let n = base.len();
    let mut m = vec![vec![Scalar::new(0.0, 0.0); n]; n];
    for (i, row) in rows.iter().enumerate() {
        for (c, t) in row {
            let j = base.iter().position(|b| b == t).expect("base contains every entry");
            if m[i][j] != Scalar::new(0.0, 0.0) {
                return false;
            }
            m[i][j] = *c;
        }
    }
    let tol = eps() * (n as f64).max(1.0);
    for i in 0..n {
        for j in 0..n {
            let dot: Scalar = (0..n).map(|k| m[i][k] * m[j][k].conj()).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).norm() > tol {
                return false;
            }
        }
    }
    onb(q, &base, true, memo)
}

// ---------------------------------------------------------------------------
// Formation rules

/// Inference engine for the pure fragment; the unifier can be shared with
/// the main-calculus checker.
#[derive(Default, Debug, Clone)]
pub struct PureChecker {
    pub uni: Unifier,
}

impl PureChecker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Infers the type of `t` under `env`, which must be used exactly.
    pub fn infer_term(&mut self, env: &[(Name, Ty)], t: &PureTerm) -> Result<Ty> {
        let (ty, mut used) = self.infer_uses(env, t)?;
        used.sort();
        let mut declared: Vec<&Name> = env.iter().map(|(x, _)| x).collect();
        declared.sort();
        for w in declared.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Linearity(format!("variable `{}` declared twice", w[0])));
            }
        }
        if let Some(x) = declared.iter().find(|x| !used.contains(x)) {
            return Err(Error::Linearity(format!("variable `{x}` is never used")));
        }
        Ok(ty)
    }

    fn infer_uses(&mut self, env: &[(Name, Ty)], t: &PureTerm) -> Result<(Ty, Vec<Name>)> {
        use PureTerm::*;
        Ok(match t {
            Star => (Ty::Unit, vec![]),
            Zero => (Ty::QNat, vec![]),
            Var(x) => {
                let ty = env.iter().find(|(y, _)| y == x).map(|(_, t)| t.clone()).ok_or_else(|| Error::Unbound(x.clone()))?;
                (ty, vec![x.clone()])
            }
            InjL(a) => {
                let (ta, u) = self.infer_uses(env, a)?;
                (Ty::sum(ta, self.uni.fresh()), u)
            }
            InjR(a) => {
                let (ta, u) = self.infer_uses(env, a)?;
                (Ty::sum(self.uni.fresh(), ta), u)
            }
            Succ(a) => {
                let (ta, u) = self.infer_uses(env, a)?;
                self.uni.unify(&ta, &Ty::QNat)?;
                (Ty::QNat, u)
            }
            Pair(a, b) => {
                let (ta, mut ua) = self.infer_uses(env, a)?;
                let (tb, ub) = self.infer_uses(env, b)?;
                if let Some(x) = ub.iter().find(|x| ua.contains(x)) {
                    return Err(Error::Linearity(format!("variable `{x}` used on both sides of a pair")));
                }
                ua.extend(ub);
                (Ty::tensor(ta, tb), ua)
            }
            Apply(u, a) => {
                let (ta, used) = self.infer_uses(env, a)?;
                let (dom, cod) = self.infer_unitary(u)?;
                self.uni.unify(&dom, &ta)?;
                (cod, used)
            }
            LinComb(es) => {
                if es.is_empty() {
                    return Err(Error::Malformed("empty linear combination".into()));
                }
                let ty = self.uni.fresh();
                let mut uses: Option<Vec<Name>> = None;
                for (_, e) in es {
                    let (te, mut ue) = self.infer_uses(env, e)?;
                    self.uni.unify(&ty, &te)?;
                    ue.sort();
                    if ue.windows(2).any(|w| w[0] == w[1]) {
                        return Err(Error::Linearity(format!("variable used twice in `{e}`")));
                    }
                    match &uses {
                        None => uses = Some(ue),
                        Some(prev) if *prev == ue => {}
                        Some(_) => return Err(Error::Linearity("summands use different variables".into())),
                    }
                }
                let norm: f64 = es.iter().map(|(c, _)| c.norm_sqr()).sum();
                if (norm - 1.0).abs() > eps() {
                    return Err(Error::NotNormalized(norm));
                }
                for i in 0..es.len() {
                    for j in (i + 1)..es.len() {
                        if !orthogonal(&es[i].1, &es[j].1) {
                            return Err(Error::NonOrthogonal(format!("`{}` and `{}`", es[i].1, es[j].1)));
                        }
                    }
                }
                (ty, uses.unwrap_or_default())
            }
        })
    }

    /// Infers `(domain, codomain)` of a unitary expression.
    pub fn infer_unitary(&mut self, u: &UnitaryExpr) -> Result<(Ty, Ty)> {
        match u {
            UnitaryExpr::Clauses(cs) => self.infer_clauses(cs),
            UnitaryExpr::Tensor(a, b) => {
                let (a1, a2) = self.infer_unitary(a)?;
                let (b1, b2) = self.infer_unitary(b)?;
                Ok((Ty::tensor(a1, b1), Ty::tensor(a2, b2)))
            }
            UnitaryExpr::DirectSum(a, b) => {
                let (a1, a2) = self.infer_unitary(a)?;
                let (b1, b2) = self.infer_unitary(b)?;
                Ok((Ty::sum(a1, b1), Ty::sum(a2, b2)))
            }
            UnitaryExpr::Compose(second, first) => {
                let (a, b) = self.infer_unitary(first)?;
                let (b2, c) = self.infer_unitary(second)?;
                self.uni.unify(&b, &b2)?;
                Ok((a, c))
            }
            UnitaryExpr::Adjoint(v) => {
                let (a, b) = self.infer_unitary(v)?;
                Ok((b, a))
            }
            UnitaryExpr::Ctrl(v) => {
                let (a, b) = self.infer_unitary(v)?;
                self.uni.unify(&a, &b)?;
                let t = Ty::tensor(Ty::qbit(), a);
                Ok((t.clone(), t))
            }
        }
    }

    fn infer_clauses(&mut self, cs: &[(PureTerm, PureTerm)]) -> Result<(Ty, Ty)> {
        if cs.is_empty() {
            return Err(Error::NonOnbPatterns("an empty clause list".into()));
        }
        let dom = self.uni.fresh();
        let cod = self.uni.fresh();
        for (p, e) in cs {
            check_linear_pattern(p)?;
            if !e.is_expression() {
                return Err(Error::Malformed(format!("clause body `{e}` applies a unitary")));
            }
            let env: Vec<(Name, Ty)> = p.free_vars().into_iter().map(|x| (x, self.uni.fresh())).collect();
            let tp = self.infer_term(&env, p)?;
            let te = self.infer_term(&env, e).map_err(|err| match err {
                Error::Linearity(m) | Error::Unbound(m) => Error::ClauseContext(format!("clause `{p} -> {e}`: {m}")),
                other => other,
            })?;
            self.uni.unify(&dom, &tp)?;
            self.uni.unify(&cod, &te)?;
        }
        let d = self.uni.zonk(&dom);
        let c = self.uni.zonk(&cod);
        let patterns: Vec<PureTerm> = cs.iter().map(|(p, _)| p.clone()).collect();
        let bodies: Vec<PureTerm> = cs.iter().map(|(_, e)| e.clone()).collect();
        if !onb(&d, &patterns, false, &mut Memo::new()) {
            return Err(Error::NonOnbPatterns(d.to_string()));
        }
        if !onb(&c, &bodies, true, &mut Memo::new()) {
            return Err(Error::NonOnbBodies(c.to_string()));
        }
        Ok((dom, cod))
    }

    /// Fully resolved type with remaining unknowns defaulted to `I`.
    pub fn resolve(&self, t: &Ty) -> PureType {
        self.uni.zonk(t).to_pure_defaulted()
    }

    pub fn is_ground(&self, t: &Ty) -> bool {
        !self.uni.zonk(t).has_meta()
    }
}

fn env_of(ctx: &PureContext) -> Vec<(Name, Ty)> {
    ctx.iter().map(|(x, q)| (x.clone(), Ty::from_pure(q))).collect()
}

/// Infers the type of `t` in `ctx`. Parts of the type that no rule
/// constrains (the other side of an injection, for example) default to `I`.
pub fn typecheck_term(ctx: &PureContext, t: &PureTerm) -> Result<PureType> {
    let mut pc = PureChecker::new();
    let ty = pc.infer_term(&env_of(ctx), t)?;
    Ok(pc.resolve(&ty))
}

/// Checks `ctx |- t : expected`.
pub fn check_term(ctx: &PureContext, t: &PureTerm, expected: &PureType) -> Result<()> {
    let mut pc = PureChecker::new();
    let ty = pc.infer_term(&env_of(ctx), t)?;
    pc.uni.unify(&ty, &Ty::from_pure(expected))
}

/// Infers the type of a unitary expression, defaulting unconstrained parts to `I`.
pub fn typecheck_unitary(u: &UnitaryExpr) -> Result<UnitaryType> {
    let mut pc = PureChecker::new();
    let (d, c) = pc.infer_unitary(u)?;
    Ok(UnitaryType { domain: pc.resolve(&d), codomain: pc.resolve(&c) })
}

/// Checks a unitary expression against a given type.
pub fn check_unitary(u: &UnitaryExpr, expected: &UnitaryType) -> Result<()> {
    let mut pc = PureChecker::new();
    let (d, c) = pc.infer_unitary(u)?;
    pc.uni.unify(&d, &Ty::from_pure(&expected.domain))?;
    pc.uni.unify(&c, &Ty::from_pure(&expected.codomain))
}

/// Infers the codomain of `u` when applied at domain `dom`.
pub fn unitary_codomain(u: &UnitaryExpr, dom: &PureType) -> Result<PureType> {
    let mut pc = PureChecker::new();
    let (d, c) = pc.infer_unitary(u)?;
    pc.uni.unify(&d, &Ty::from_pure(dom))?;
    Ok(pc.resolve(&c))
}

/// Infers the domain of `u` when its codomain is `cod`.
pub fn unitary_domain(u: &UnitaryExpr, cod: &PureType) -> Result<PureType> {
    let mut pc = PureChecker::new();
    let (d, c) = pc.infer_unitary(u)?;
    pc.uni.unify(&c, &Ty::from_pure(cod))?;
    Ok(pc.resolve(&d))
}
