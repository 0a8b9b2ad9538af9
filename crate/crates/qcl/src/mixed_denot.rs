//! Finite-dimensional mixed semantics: first-order types as direct sums of
//! matrix algebras, judgements and configurations as superoperators.
//!
//! Orientation is Heisenberg throughout. A [`Superoperator`] from `A` to
//! `B` stores the linear map taking observables of `B` to observables of
//! `A`. Algebra elements are vectorized block by block, each block row major.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::config_eval::{reduce_sv, run, Configuration, RunOptions};
use crate::error::{Error, Result};
use crate::main_core::{node_key, ov_basis, ov_type, typecheck_main, typecheck_recorded, MainContext, MainTerm, MainType, TypeRecord, WILDCARD};
use crate::pure_core::{Name, PureType, Scalar};
use crate::pure_denot::{enumerate_basis, interp_term_at, interp_type, interp_unitary_at, ComplexMatrix, TruncationConfig};

/// Deviation allowed by the soundness and adequacy checks.
pub const ORACLE_TOLERANCE: f64 = 1e-6;

fn zero() -> Scalar {
    Scalar::new(0.0, 0.0)
}

fn one() -> Scalar {
    Scalar::new(1.0, 0.0)
}

/// The algebra `M_{n_1} (+) ... (+) M_{n_k}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiMatrixAlgebra {
    pub blocks: Vec<usize>,
}

impl MultiMatrixAlgebra {
    pub fn new(blocks: Vec<usize>) -> Self {
        MultiMatrixAlgebra { blocks }
    }

    /// The complex numbers.
    pub fn scalars() -> Self {
        Self::new(vec![1])
    }

    /// Functions on a finite set of `k` points.
    pub fn classical(k: usize) -> Self {
        Self::new(vec![1; k])
    }

    /// Dimension of the vectorized algebra.
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|n| n * n).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .map(|n| {
                let o = acc;
                acc += n * n;
                o
            })
            .collect()
    }

    pub fn direct_sum(&self, other: &Self) -> Self {
        Self::new(self.blocks.iter().chain(&other.blocks).copied().collect())
    }

    /// Blocks ordered lexicographically; inside a block the row index of
    /// `(i1, i2)` is `i1 * n2 + i2`.
    pub fn tensor(&self, other: &Self) -> Self {
        Self::new(self.blocks.iter().flat_map(|a| other.blocks.iter().map(move |b| a * b)).collect())
    }

    pub fn tensor_all(algs: &[MultiMatrixAlgebra]) -> Self {
        algs.iter().fold(Self::scalars(), |acc, a| if acc == Self::scalars() { a.clone() } else { acc.tensor(a) })
    }

    /// The unit element.
    pub fn unit(&self) -> Vec<Scalar> {
        let mut v = vec![zero(); self.dim()];
        for (k, o) in self.offsets().into_iter().enumerate() {
            let n = self.blocks[k];
            for i in 0..n {
                v[o + i * n + i] = one();
            }
        }
        v
    }

    pub fn trace(&self, v: &[Scalar]) -> Scalar {
        let mut t = zero();
        for (k, o) in self.offsets().into_iter().enumerate() {
            let n = self.blocks[k];
            for i in 0..n {
                t += v[o + i * n + i];
            }
        }
        t
    }

    /// For each flat index, the flat index of the transposed entry.
    fn transposition(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dim());
        for (k, o) in self.offsets().into_iter().enumerate() {
            let n = self.blocks[k];
            for i in 0..n {
                for j in 0..n {
                    out.push(o + j * n + i);
                }
            }
        }
        out
    }

    /// For each flat index of `a (x) b`, the flat indices of its factors.
    pub fn tensor_pairs(a: &Self, b: &Self) -> Vec<(usize, usize)> {
        let (oa, ob) = (a.offsets(), b.offsets());
        let mut out = Vec::with_capacity(a.dim() * b.dim());
        for (k1, &n1) in a.blocks.iter().enumerate() {
            for (k2, &n2) in b.blocks.iter().enumerate() {
                let n = n1 * n2;
                for i in 0..n {
                    for j in 0..n {
                        let (i1, i2, j1, j2) = (i / n2, i % n2, j / n2, j % n2);
                        out.push((oa[k1] + i1 * n1 + j1, ob[k2] + i2 * n2 + j2));
                    }
                }
            }
        }
        out
    }

    /// Hermitian and positive semidefinite block by block.
    pub fn is_positive(&self, v: &[Scalar], tol: f64) -> bool {
        self.offsets().into_iter().enumerate().all(|(k, o)| {
            let n = self.blocks[k];
            let m = DMatrix::from_fn(n, n, |i, j| v[o + i * n + j]);
            is_psd(&m, tol)
        })
    }
}

fn is_psd(m: &DMatrix<Scalar>, tol: f64) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    if (m - m.adjoint()).iter().any(|z| z.norm() > tol) {
        return false;
    }
    let h = (m + m.adjoint()).map(|z| z * 0.5);
    SymmetricEigen::new(h).eigenvalues.iter().all(|&e| e >= -tol)
}

fn tensor_vec(a: &MultiMatrixAlgebra, b: &MultiMatrixAlgebra, u: &[Scalar], v: &[Scalar]) -> Vec<Scalar> {
    MultiMatrixAlgebra::tensor_pairs(a, b).into_iter().map(|(p, q)| u[p] * v[q]).collect()
}

/// A linear map between vectorized algebras, Heisenberg direction.
#[derive(Clone, Debug)]
pub struct Superoperator {
    pub source: MultiMatrixAlgebra,
    pub target: MultiMatrixAlgebra,
    /// `source.dim() x target.dim()`: takes target observables to source observables.
    pub action: ComplexMatrix,
}

impl Superoperator {
    pub fn identity(a: &MultiMatrixAlgebra) -> Self {
        Superoperator { source: a.clone(), target: a.clone(), action: ComplexMatrix::identity(a.dim()) }
    }

    /// Builds the Heisenberg map dual to a Schroedinger map given as a
    /// `target.dim() x source.dim()` matrix on states.
    pub fn from_schroedinger(source: MultiMatrixAlgebra, target: MultiMatrixAlgebra, s: &ComplexMatrix) -> Self {
        let (ts, tt) = (source.transposition(), target.transposition());
        let action = DMatrix::from_fn(source.dim(), target.dim(), |p, q| s.0[(tt[q], ts[p])]);
        Superoperator { source, target, action: ComplexMatrix(action) }
    }

    /// The Schroedinger map on states, `target.dim() x source.dim()`.
    pub fn schroedinger(&self) -> ComplexMatrix {
        let (ts, tt) = (self.source.transposition(), self.target.transposition());
        ComplexMatrix(DMatrix::from_fn(self.target.dim(), self.source.dim(), |q, p| self.action.0[(ts[p], tt[q])]))
    }

    /// `self : A -> B` then `next : B -> C`.
    pub fn compose(&self, next: &Superoperator) -> Result<Superoperator> {
        if self.target != next.source {
            return Err(Error::Internal("composing superoperators of mismatched algebras".into()));
        }
        Ok(Superoperator { source: self.source.clone(), target: next.target.clone(), action: self.action.mul(&next.action) })
    }

    pub fn tensor(&self, other: &Superoperator) -> Superoperator {
        let sp = MultiMatrixAlgebra::tensor_pairs(&self.source, &other.source);
        let tp = MultiMatrixAlgebra::tensor_pairs(&self.target, &other.target);
        let action = DMatrix::from_fn(sp.len(), tp.len(), |s, t| {
            self.action.0[(sp[s].0, tp[t].0)] * other.action.0[(sp[s].1, tp[t].1)]
        });
        Superoperator {
            source: self.source.tensor(&other.source),
            target: self.target.tensor(&other.target),
            action: ComplexMatrix(action),
        }
    }

    /// Applies the map to an observable of the target.
    pub fn apply(&self, observable: &[Scalar]) -> Vec<Scalar> {
        let v = nalgebra::DVector::from_column_slice(observable);
        (&self.action.0 * v).iter().copied().collect()
    }

    pub fn max_diff(&self, other: &Superoperator) -> f64 {
        if self.source != other.source || self.target != other.target {
            return f64::INFINITY;
        }
        self.action.max_diff(&other.action)
    }

    /// Choi matrix of every pair of source and target blocks is positive.
    pub fn is_completely_positive(&self, tol: f64) -> bool {
        let (so, to) = (self.source.offsets(), self.target.offsets());
        for (ks, &ns) in self.source.blocks.iter().enumerate() {
            for (kt, &nt) in self.target.blocks.iter().enumerate() {
                let choi = DMatrix::from_fn(nt * ns, nt * ns, |r, c| {
                    let (i, a, j, b) = (r / ns, r % ns, c / ns, c % ns);
                    self.action.0[(so[ks] + a * ns + b, to[kt] + i * nt + j)]
                });
                if !is_psd(&choi, tol) {
                    return false;
                }
            }
        }
        true
    }

    pub fn is_unital(&self, tol: f64) -> bool {
        let image = self.apply(&self.target.unit());
        image.iter().zip(self.source.unit()).all(|(a, b)| (a - b).norm() <= tol)
    }

    /// `1 - f(1)` is positive.
    pub fn is_subunital(&self, tol: f64) -> bool {
        let image = self.apply(&self.target.unit());
        let defect: Vec<Scalar> = self.source.unit().iter().zip(image).map(|(a, b)| a - b).collect();
        self.source.is_positive(&defect, tol)
    }
}

/// Algebra of a first-order main type.
pub fn interp_main_type(a: &MainType, cfg: &TruncationConfig) -> Result<MultiMatrixAlgebra> {
    Ok(match a {
        MainType::Unit => MultiMatrixAlgebra::scalars(),
        MainType::Nat => MultiMatrixAlgebra::classical(cfg.qnat_dim),
        MainType::Sum(x, y) => interp_main_type(x, cfg)?.direct_sum(&interp_main_type(y, cfg)?),
        MainType::Tensor(x, y) => interp_main_type(x, cfg)?.tensor(&interp_main_type(y, cfg)?),
        MainType::BOp(q) => MultiMatrixAlgebra::new(vec![interp_type(q, cfg)]),
        MainType::Bang(_) | MainType::Lolli(..) => {
            return Err(Error::Unsupported(format!("type {a} has no finite-dimensional interpretation")))
        }
    })
}

/// `B(f)`: observables `phi` go to `f^dag phi f`.
pub fn b_functor(f: &ComplexMatrix) -> Result<Superoperator> {
    if !f.is_isometry(1e-9) {
        return Err(Error::Unsupported("B is only defined on isometries".into()));
    }
    let (n1, n2) = (f.cols(), f.rows());
    let action = DMatrix::from_fn(n1 * n1, n2 * n2, |r, c| {
        let (a, b, cc, d) = (r / n1, r % n1, c / n2, c % n2);
        f.0[(cc, a)].conj() * f.0[(d, b)]
    });
    Ok(Superoperator {
        source: MultiMatrixAlgebra::new(vec![n1]),
        target: MultiMatrixAlgebra::new(vec![n2]),
        action: ComplexMatrix(action),
    })
}

/// Flat index of a closed classical value in the algebra of `a`.
fn value_index(v: &MainTerm, a: &MainType, cfg: &TruncationConfig) -> Result<usize> {
    let alg_dim = |t: &MainType| interp_main_type(t, cfg).map(|x| x.dim());
    match (v, a) {
        (MainTerm::Star, MainType::Unit) => Ok(0),
        (MainTerm::InL(x), MainType::Sum(l, _)) => value_index(x, l, cfg),
        (MainTerm::InR(x), MainType::Sum(l, r)) => Ok(alg_dim(l)? + value_index(x, r, cfg)?),
        (MainTerm::Pair(x, y), MainType::Tensor(l, r)) => Ok(value_index(x, l, cfg)? * alg_dim(r)? + value_index(y, r, cfg)?),
        (_, MainType::Nat) => match v.as_nat() {
            Some(n) if n < cfg.qnat_dim => Ok(n),
            Some(n) => Err(Error::Truncation(format!("natural number {n} exceeds the truncation {}", cfg.qnat_dim))),
            None => Err(Error::mismatch(a, v)),
        },
        _ => Err(Error::mismatch(a, v)),
    }
}

/// Measurement in the canonical basis: source `B(Q)`, target the algebra
/// of `ov(Q)`, sending point functions to basis projectors.
pub fn meas_map(q: &PureType, cfg: &TruncationConfig) -> Result<Superoperator> {
    let n = interp_type(q, cfg);
    let ov = ov_type(q);
    let target = interp_main_type(&ov, cfg)?;
    let mut action = DMatrix::from_element(n * n, target.dim(), zero());
    for (i, b) in enumerate_basis(q, cfg).iter().enumerate() {
        let x = value_index(&ov_basis(b)?, &ov, cfg)?;
        action[(i * n + i, x)] = one();
    }
    Ok(Superoperator { source: MultiMatrixAlgebra::new(vec![n]), target, action: ComplexMatrix(action) })
}

// ---------------------------------------------------------------------------
// Judgements

type Env = Vec<(Name, Vec<Scalar>)>;

struct Eval<'a> {
    cfg: &'a TruncationConfig,
    types: &'a TypeRecord,
    unitaries: RefCell<HashMap<usize, ComplexMatrix>>,
}

impl<'a> Eval<'a> {
    fn new(cfg: &'a TruncationConfig, types: &'a TypeRecord) -> Self {
        Eval { cfg, types, unitaries: RefCell::new(HashMap::new()) }
    }

    /// Evaluates `m` on a vector of the tensor product of the algebras of
    /// `vars`, splitting it into elementary tensors from the right.
    fn eval_joint(&self, m: &MainTerm, vars: &[(Name, MultiMatrixAlgebra)], v: &[Scalar], used: &BTreeSet<Name>, env: &Env) -> Result<Vec<Scalar>> {
        let bind = |env: &Env, x: &Name, w: Vec<Scalar>, alg: &MultiMatrixAlgebra| {
            if used.contains(x) {
                Self::bind(env, x, w, alg)
            } else {
                (env.clone(), alg.trace(&w))
            }
        };
        match vars {
            [] => Ok(self.eval(m, env)?.into_iter().map(|z| v[0] * z).collect()),
            [(x, a)] => {
                let (env1, c) = bind(env, x, v.to_vec(), a);
                Ok(self.eval(m, &env1)?.into_iter().map(|z| c * z).collect())
            }
            [prefix @ .., (x, a)] => {
                let palg = MultiMatrixAlgebra::tensor_all(&prefix.iter().map(|(_, a)| a.clone()).collect::<Vec<_>>());
                let mut slices = vec![vec![zero(); palg.dim()]; a.dim()];
                for (idx, (p, q)) in MultiMatrixAlgebra::tensor_pairs(&palg, a).into_iter().enumerate() {
                    slices[q][p] += v[idx];
                }
                let mut out: Option<Vec<Scalar>> = None;
                for (q, w) in slices.into_iter().enumerate() {
                    if w.iter().all(|z| z.norm() == 0.0) {
                        continue;
                    }
                    let mut e = vec![zero(); a.dim()];
                    e[q] = one();
                    let (env1, c) = bind(env, x, e, a);
                    let r = self.eval_joint(m, prefix, &w, used, &env1)?;
                    match &mut out {
                        None => out = Some(r.into_iter().map(|z| c * z).collect()),
                        Some(o) => o.iter_mut().zip(r).for_each(|(o, z)| *o += c * z),
                    }
                }
                match out {
                    Some(o) => Ok(o),
                    None => Ok(vec![zero(); self.alg(m)?.dim()]),
                }
            }
        }
    }

    fn ty(&self, m: &MainTerm) -> Result<&MainType> {
        self.types.get(&node_key(m)).ok_or_else(|| Error::Internal(format!("no type recorded for `{m}`")))
    }

    fn alg(&self, m: &MainTerm) -> Result<MultiMatrixAlgebra> {
        interp_main_type(self.ty(m)?, self.cfg)
    }

    fn pure_of(&self, m: &MainTerm) -> Result<PureType> {
        match self.ty(m)? {
            MainType::BOp(q) => Ok(q.clone()),
            other => Err(Error::Internal(format!("expected a quantum type, found {other}"))),
        }
    }

    /// Extends `env`; a wildcard binder discards its value by tracing it.
    fn bind(env: &Env, x: &Name, v: Vec<Scalar>, alg: &MultiMatrixAlgebra) -> (Env, Scalar) {
        if x == WILDCARD {
            return (env.clone(), alg.trace(&v));
        }
        let mut e = env.clone();
        e.push((x.clone(), v));
        (e, one())
    }

    /// Evaluates `body` against each slice of a vector of `a (x) b`,
    /// binding `x` to basis elements of `a` and `y` to the matching slice.
    fn split(&self, v: &[Scalar], a: &MultiMatrixAlgebra, b: &MultiMatrixAlgebra, x: &Name, y: &Name, body: &MainTerm, env: &Env, out: &mut [Scalar]) -> Result<()> {
        let mut slices = vec![vec![zero(); b.dim()]; a.dim()];
        for (idx, (p, q)) in MultiMatrixAlgebra::tensor_pairs(a, b).into_iter().enumerate() {
            slices[p][q] += v[idx];
        }
        for (p, w) in slices.into_iter().enumerate() {
            if w.iter().all(|z| z.norm() == 0.0) {
                continue;
            }
            let mut e = vec![zero(); a.dim()];
            e[p] = one();
            let (env1, c1) = Self::bind(env, x, e, a);
            let (env2, c2) = Self::bind(&env1, y, w, b);
            let r = self.eval(body, &env2)?;
            for (o, z) in out.iter_mut().zip(r) {
                *o += c1 * c2 * z;
            }
        }
        Ok(())
    }

    /// Schroedinger image of the bound inputs, as a vector of the result algebra.
    fn eval(&self, m: &MainTerm, env: &Env) -> Result<Vec<Scalar>> {
        use MainTerm::*;
        let result_dim = || self.alg(m).map(|a| a.dim());
        match m {
            Star => Ok(vec![one()]),
            Var(x) => env
                .iter()
                .rev()
                .find(|(y, _)| y == x)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Unbound(x.clone())),
            InL(a) => {
                let mut v = self.eval(a, env)?;
                v.resize(result_dim()?, zero());
                Ok(v)
            }
            InR(a) => {
                let v = self.eval(a, env)?;
                let mut out = vec![zero(); result_dim()? - v.len()];
                out.extend(v);
                Ok(out)
            }
            Pair(a, b) => Ok(tensor_vec(&self.alg(a)?, &self.alg(b)?, &self.eval(a, env)?, &self.eval(b, env)?)),
            LetPair(x, y, a, body) | LetPairBang(x, y, a, body) => {
                let v = self.eval(a, env)?;
                let (la, lb) = match (m, self.ty(a)?) {
                    (LetPair(..), MainType::Tensor(l, r)) => (interp_main_type(l, self.cfg)?, interp_main_type(r, self.cfg)?),
                    (LetPairBang(..), MainType::BOp(PureType::Tensor(l, r))) => {
                        (MultiMatrixAlgebra::new(vec![interp_type(l, self.cfg)]), MultiMatrixAlgebra::new(vec![interp_type(r, self.cfg)]))
                    }
                    (_, other) => return Err(Error::Internal(format!("cannot split a value of type {other}"))),
                };
                let mut out = vec![zero(); result_dim()?];
                self.split(&v, &la, &lb, x, y, body, env, &mut out)?;
                Ok(out)
            }
            Case(l, x, a, y, b) => {
                let v = self.eval(l, env)?;
                let (ta, tb) = match self.ty(l)? {
                    MainType::Sum(ta, tb) => (interp_main_type(ta, self.cfg)?, interp_main_type(tb, self.cfg)?),
                    other => return Err(Error::Internal(format!("case on a value of type {other}"))),
                };
                let mut out = vec![zero(); result_dim()?];
                let (left, right) = v.split_at(ta.dim());
                for (part, alg, var, body) in [(left, &ta, x, a), (right, &tb, y, b)] {
                    if part.iter().all(|z| z.norm() == 0.0) {
                        continue;
                    }
                    let (env1, c) = Self::bind(env, var, part.to_vec(), alg);
                    for (o, z) in out.iter_mut().zip(self.eval(body, &env1)?) {
                        *o += c * z;
                    }
                }
                Ok(out)
            }
            Zero => {
                let mut v = vec![zero(); self.cfg.qnat_dim];
                v[0] = one();
                Ok(v)
            }
            Succ(a) => {
                let v = self.eval(a, env)?;
                if v.last().is_some_and(|z| z.norm() > 0.0) {
                    return Err(Error::Truncation(format!("successor leaves the truncation {}", self.cfg.qnat_dim)));
                }
                let mut out = vec![zero()];
                out.extend_from_slice(&v[..v.len() - 1]);
                Ok(out)
            }
            Match(l, a, x, b) => {
                let v = self.eval(l, env)?;
                let mut out = vec![zero(); result_dim()?];
                if v[0].norm() > 0.0 {
                    for (o, z) in out.iter_mut().zip(self.eval(a, env)?) {
                        *o += v[0] * z;
                    }
                }
                let mut pred = v[1..].to_vec();
                pred.push(zero());
                if pred.iter().any(|z| z.norm() > 0.0) {
                    let (env1, c) = Self::bind(env, x, pred, &MultiMatrixAlgebra::classical(self.cfg.qnat_dim));
                    for (o, z) in out.iter_mut().zip(self.eval(b, &env1)?) {
                        *o += c * z;
                    }
                }
                Ok(out)
            }
            Pure(t) => {
                let q = self.pure_of(m)?;
                let psi = interp_term_at(&vec![], t, &q, self.cfg)?;
                let n = psi.rows();
                Ok((0..n * n).map(|k| psi.0[(k / n, 0)] * psi.0[(k % n, 0)].conj()).collect())
            }
            Meas(a) => {
                let q = self.pure_of(a)?;
                let v = self.eval(a, env)?;
                let meas = meas_map(&q, self.cfg)?;
                Ok(apply_matrix(&meas.schroedinger(), &v))
            }
            UnApply(u, a) => {
                let (dom, cod) = (self.pure_of(a)?, self.pure_of(m)?);
                let key = node_key(m);
                let cached = self.unitaries.borrow().get(&key).cloned();
                let w = match cached {
                    Some(w) => w,
                    None => {
                        let (w, _) = interp_unitary_at(u, &dom, &cod, self.cfg)?;
                        self.unitaries.borrow_mut().insert(key, w.clone());
                        w
                    }
                };
                let n = interp_type(&dom, self.cfg);
                let rho = ComplexMatrix(DMatrix::from_row_slice(n, n, &self.eval(a, env)?));
                let out = w.mul(&rho).mul(&w.adjoint());
                let k = out.rows();
                Ok((0..k * k).map(|idx| out.0[(idx / k, idx % k)]).collect())
            }
            LetBang(z, a, body) => {
                let v = self.eval(a, env)?;
                let alg = MultiMatrixAlgebra::new(vec![interp_type(&self.pure_of(a).or_else(|_| gathered(self.ty(a)?))?, self.cfg)]);
                let (env1, c) = Self::bind(env, z, v, &alg);
                Ok(self.eval(body, &env1)?.into_iter().map(|x| c * x).collect())
            }
            Lam(..) | App(..) | Lift(_) | Force(_) => {
                Err(Error::Unsupported(format!("{} has no finite-dimensional interpretation", m.first_order_violation().unwrap_or("construct"))))
            }
        }
    }
}

/// `B(Q1) (x) B(Q2)` read as `B(Q1 (x) Q2)`.
fn gathered(t: &MainType) -> Result<PureType> {
    match t {
        MainType::Tensor(a, b) => match (&**a, &**b) {
            (MainType::BOp(x), MainType::BOp(y)) => Ok(PureType::tensor(x.clone(), y.clone())),
            _ => Err(Error::Internal(format!("cannot gather a value of type {t}"))),
        },
        _ => Err(Error::Internal(format!("cannot gather a value of type {t}"))),
    }
}

fn apply_matrix(m: &ComplexMatrix, v: &[Scalar]) -> Vec<Scalar> {
    let v = nalgebra::DVector::from_column_slice(v);
    (&m.0 * v).iter().copied().collect()
}

fn fragment_check(ctx: &MainContext, m: &MainTerm) -> Result<()> {
    if let Some(c) = m.first_order_violation() {
        return Err(Error::Unsupported(format!("{c} is outside the first-order fragment")));
    }
    if let Some((x, t)) = ctx.iter().find(|(_, t)| !t.is_first_order()) {
        return Err(Error::Unsupported(format!("variable `{x}` has higher-order type {t}")));
    }
    Ok(())
}

/// Schroedinger matrix of `ctx |- m`, with the context and result algebras.
fn judgement_matrix(ctx: &MainContext, m: &MainTerm, cfg: &TruncationConfig) -> Result<(MultiMatrixAlgebra, MultiMatrixAlgebra, MainType, ComplexMatrix)> {
    fragment_check(ctx, m)?;
    let ty = typecheck_main(ctx, m)?;
    let (ty, types) = typecheck_recorded(ctx, m, Some(&ty))?;
    if !ty.is_first_order() {
        return Err(Error::Unsupported(format!("result type {ty} is outside the first-order fragment")));
    }
    let target = interp_main_type(&ty, cfg)?;
    let algs: Vec<MultiMatrixAlgebra> = ctx.iter().map(|(_, t)| interp_main_type(t, cfg)).collect::<Result<_>>()?;
    // Per-variable flat indices of each flat index of the context algebra.
    let mut source = MultiMatrixAlgebra::scalars();
    let mut indices: Vec<Vec<usize>> = vec![vec![]];
    for (k, a) in algs.iter().enumerate() {
        if k == 0 {
            source = a.clone();
            indices = (0..a.dim()).map(|p| vec![p]).collect();
        } else {
            indices = MultiMatrixAlgebra::tensor_pairs(&source, a)
                .into_iter()
                .map(|(p, q)| {
                    let mut v = indices[p].clone();
                    v.push(q);
                    v
                })
                .collect();
            source = source.tensor(a);
        }
    }
    let used = m.free_vars();
    let ev = Eval::new(cfg, &types);
    let mut s = DMatrix::from_element(target.dim(), source.dim(), zero());
    for (col, idx) in indices.iter().enumerate() {
        let mut env = Env::new();
        let mut coeff = one();
        for ((k, (x, _)), &p) in ctx.iter().enumerate().zip(idx) {
            let mut e = vec![zero(); algs[k].dim()];
            e[p] = one();
            if used.contains(x) && x != WILDCARD {
                env.push((x.clone(), e));
            } else {
                coeff *= algs[k].trace(&e);
            }
        }
        if coeff.norm() == 0.0 {
            continue;
        }
        for (row, z) in ev.eval(m, &env)?.into_iter().enumerate() {
            s[(row, col)] = coeff * z;
        }
    }
    Ok((source, target, ty, ComplexMatrix(s)))
}

/// The superoperator of a first-order judgement `ctx |- m`.
pub fn interp_main_judgement(ctx: &MainContext, m: &MainTerm, cfg: &TruncationConfig) -> Result<Superoperator> {
    let (source, target, _, s) = judgement_matrix(ctx, m, cfg)?;
    Ok(Superoperator::from_schroedinger(source, target, &s))
}

/// The superoperator from `C` of a well-formed configuration. A
/// configuration outside the first-order fragment is first reduced until
/// every branch is inside it.
pub fn interp_config(c: &Configuration, cfg: &TruncationConfig) -> Result<Superoperator> {
    if !c.term.is_first_order() {
        let d = reduce_sv(c)?;
        let parts: Vec<(f64, Superoperator)> =
            d.branches.iter().map(|(p, n)| Ok((*p, interp_config(n, cfg)?))).collect::<Result<_>>()?;
        let acc = weighted_sum(&parts)?;
        return acc.ok_or_else(|| Error::Internal(format!("configuration {c} is stuck")));
    }
    let lk = &c.linking;
    let ctx = lk.context();
    fragment_check(&ctx, &c.term)?;
    let ty = typecheck_main(&ctx, &c.term)?;
    let (ty, types) = typecheck_recorded(&ctx, &c.term, Some(&ty))?;
    let s_target = interp_main_type(&ty, cfg)?;
    let vars: Vec<(Name, MultiMatrixAlgebra)> =
        ctx.iter().map(|(x, t)| Ok((x.clone(), interp_main_type(t, cfg)?))).collect::<Result<_>>()?;
    let named = MultiMatrixAlgebra::tensor_all(&vars.iter().map(|(_, a)| a.clone()).collect::<Vec<_>>());
    let input = PureType::tensor_all(&lk.input_types);
    let blocks = PureType::tensor_all(&lk.block_types());
    let psi = interp_term_at(&vec![], &c.state, &input, cfg)?;
    let (u, _) = interp_unitary_at(&lk.unitary()?, &input, &blocks, cfg)?;
    let psi = u.mul(&psi);
    let n = psi.rows();
    let rho: Vec<Scalar> = (0..n * n).map(|k| psi.0[(k / n, 0)] * psi.0[(k % n, 0)].conj()).collect();
    let aux = MultiMatrixAlgebra::tensor_all(
        &lk.aux_types().iter().map(|q| MultiMatrixAlgebra::new(vec![interp_type(q, cfg)])).collect::<Vec<_>>(),
    );
    // Split the state into its named and auxiliary parts, run the term on
    // the named part and keep the auxiliary part.
    let mut slices = vec![vec![zero(); named.dim()]; aux.dim()];
    for (idx, (p, r)) in MultiMatrixAlgebra::tensor_pairs(&named, &aux).into_iter().enumerate() {
        slices[r][p] += rho[idx];
    }
    let ev = Eval::new(cfg, &types);
    let used = c.term.free_vars();
    let images: Vec<Vec<Scalar>> =
        slices.iter().map(|w| ev.eval_joint(&c.term, &vars, w, &used, &Env::new())).collect::<Result<_>>()?;
    let target = s_target.tensor(&aux);
    let omega: Vec<Scalar> =
        MultiMatrixAlgebra::tensor_pairs(&s_target, &aux).into_iter().map(|(q, r)| images[r][q]).collect();
    let schr = ComplexMatrix(DMatrix::from_column_slice(target.dim(), 1, &omega));
    Ok(Superoperator::from_schroedinger(MultiMatrixAlgebra::scalars(), target, &schr))
}

fn weighted_sum(parts: &[(f64, Superoperator)]) -> Result<Option<Superoperator>> {
    let mut acc: Option<Superoperator> = None;
    for (p, s) in parts {
        let scaled = ComplexMatrix(s.action.0.map(|z| z * *p));
        acc = Some(match acc {
            None => Superoperator { action: scaled, ..s.clone() },
            Some(mut a) => {
                if a.target != s.target {
                    return Err(Error::Internal("branches interpret into different algebras".into()));
                }
                a.action.0 += scaled.0;
                a
            }
        });
    }
    Ok(acc)
}

/// Deviation between `c` and the weighted sum of its one-step reducts.
pub fn soundness_deviation(c: &Configuration, cfg: &TruncationConfig) -> Result<f64> {
    let whole = interp_config(c, cfg)?;
    let d = reduce_sv(c)?;
    let parts: Vec<(f64, Superoperator)> =
        d.branches.iter().map(|(p, n)| Ok((*p, interp_config(n, cfg)?))).collect::<Result<_>>()?;
    Ok(weighted_sum(&parts)?.map_or(0.0, |s| whole.max_diff(&s)))
}

/// Deviation between `c` and the weighted sum of the values it reaches.
pub fn adequacy_deviation(c: &Configuration, cfg: &TruncationConfig) -> Result<f64> {
    let whole = interp_config(c, cfg)?;
    let r = run(c, &RunOptions::default())?;
    let parts: Vec<(f64, Superoperator)> =
        r.distribution.branches.iter().map(|(p, v)| Ok((*p, interp_config(v, cfg)?))).collect::<Result<_>>()?;
    Ok(weighted_sum(&parts)?.map_or(f64::INFINITY, |s| whole.max_diff(&s)))
}

pub fn check_adequacy(c: &Configuration, cfg: &TruncationConfig) -> Result<bool> {
    Ok(adequacy_deviation(c, cfg)? <= ORACLE_TOLERANCE)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config_eval::tests::{meas_third, walk};
    use crate::config_eval::BlockLinking;
    use crate::main_core::tests::{bell_m, bell_s};
    use crate::pure_check::tests::{c, h, had};
    use crate::pure_core::PureTerm;
    use crate::pure_denot::interp_unitary;
    use proptest::prelude::*;

    fn cfg() -> TruncationConfig {
        TruncationConfig::with_dim(8)
    }

    fn plus() -> PureTerm {
        PureTerm::LinComb(vec![(c(h()), PureTerm::ket0()), (c(h()), PureTerm::ket1())])
    }

    /// A random isometry `n -> m` from the QR factorization of a Gaussian matrix.
    pub fn random_isometry(rng: &mut impl rand::Rng, m: usize, n: usize) -> ComplexMatrix {
        use rand_distr::{Distribution, StandardNormal};
        let g = DMatrix::from_fn(m, n, |_, _| {
            Scalar::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
        });
        ComplexMatrix(g.qr().q())
    }

    #[test]
    fn type_interpretation() {
        let c = cfg();
        assert_eq!(interp_main_type(&MainType::bit(), &c).unwrap().blocks, vec![1, 1]);
        assert_eq!(interp_main_type(&MainType::qbit(), &c).unwrap().blocks, vec![2]);
        let t = MainType::tensor(MainType::qbit(), MainType::bit());
        assert_eq!(interp_main_type(&t, &c).unwrap().blocks, vec![2, 2]);
        assert_eq!(interp_main_type(&MainType::Nat, &c).unwrap().blocks, vec![1; 8]);
        assert!(matches!(interp_main_type(&MainType::bang(MainType::Unit), &c), Err(Error::Unsupported(_))));
    }

    #[test]
    fn b_functor_examples() {
        let id = b_functor(&ComplexMatrix::identity(3)).unwrap();
        assert!(id.max_diff(&Superoperator::identity(&MultiMatrixAlgebra::new(vec![3]))) < 1e-12);
        let hm = interp_unitary(&had(), &cfg()).unwrap();
        let bh = b_functor(&hm).unwrap();
        let out = bh.apply(&[one(), zero(), zero(), zero()]);
        for z in out {
            assert!((z - c(0.5)).norm() < 1e-12);
        }
        assert!(b_functor(&ComplexMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn meas_map_examples() {
        let m = meas_map(&PureType::qbit(), &cfg()).unwrap();
        let out = m.apply(&[c(3.0), c(5.0)]);
        assert_eq!(out, vec![c(3.0), zero(), zero(), c(5.0)]);
        let unit = meas_map(&PureType::Unit, &cfg()).unwrap();
        assert!(unit.max_diff(&Superoperator::identity(&MultiMatrixAlgebra::scalars())) < 1e-12);
        let m2 = meas_map(&PureType::tensor(PureType::qbit(), PureType::qbit()), &cfg()).unwrap();
        let out = m2.apply(&[c(1.0), c(2.0), c(3.0), c(4.0)]);
        for k in 0..4 {
            assert_eq!(out[k * 4 + k], c(k as f64 + 1.0));
        }
        assert!(m2.is_unital(1e-12));
    }

    #[test]
    fn judgement_examples() {
        let pure0 = interp_main_judgement(&vec![], &MainTerm::Pure(PureTerm::ket0()), &cfg()).unwrap();
        let col = ComplexMatrix(DMatrix::from_column_slice(2, 1, &[one(), zero()]));
        assert!(pure0.max_diff(&b_functor(&col).unwrap()) < 1e-12);

        let m = interp_main_judgement(&vec![], &MainTerm::meas(MainTerm::Pure(plus())), &cfg()).unwrap();
        let out = m.apply(&[c(2.0), c(6.0)]);
        assert!((out[0] - c(4.0)).norm() < 1e-12);

        let ctx = vec![("x".to_string(), MainType::qbit())];
        let id = interp_main_judgement(&ctx, &MainTerm::var("x"), &cfg()).unwrap();
        assert!(id.max_diff(&Superoperator::identity(&MultiMatrixAlgebra::new(vec![2]))) < 1e-12);

        let err = interp_main_judgement(&vec![], &MainTerm::lam("x", MainTerm::var("x")), &cfg()).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn judgements_are_channels() {
        let bm_ctx = vec![("a".to_string(), MainType::qbit()), ("b".to_string(), MainType::qbit())];
        let bm_body = MainTerm::app(MainTerm::app(bell_m(), MainTerm::var("a")), MainTerm::var("b"));
        // Bell_M applied to variables is not first order; check its body after beta steps instead.
        assert!(interp_main_judgement(&bm_ctx, &bm_body, &cfg()).is_err());
        for (ctx, m) in [(vec![], bell_s()), (vec![], meas_third())] {
            let s = interp_main_judgement(&ctx, &m, &cfg()).unwrap();
            assert!(s.is_completely_positive(1e-9));
            assert!(s.is_unital(1e-9));
        }
    }

    #[test]
    fn config_examples() {
        let bell = PureTerm::LinComb(vec![
            (c(h()), PureTerm::pair(PureTerm::ket0(), PureTerm::ket0())),
            (c(h()), PureTerm::pair(PureTerm::ket1(), PureTerm::ket1())),
        ]);
        let q = PureType::qbit();
        let lk = BlockLinking {
            input_types: vec![q.clone(), q.clone()],
            blocks: vec![crate::config_eval::Block {
                var: Some("z".into()),
                shape: crate::pure_denot::Bracket::pair(crate::pure_denot::Bracket::Leaf(1), crate::pure_denot::Bracket::Leaf(0)),
            }],
        };
        let conf = Configuration::new(bell, lk, MainTerm::var("z"));
        let s = interp_config(&conf, &cfg()).unwrap();
        let mut obs = vec![zero(); 16];
        obs[0] = one();
        assert!((s.apply(&obs)[0] - c(0.5)).norm() < 1e-12);
        obs[3] = one();
        assert!((s.apply(&obs)[0] - c(1.0)).norm() < 1e-12);
    }

    #[test]
    fn soundness_and_adequacy() {
        for m in [meas_third(), bell_s(), walk(1)] {
            let cfg = TruncationConfig::with_dim(16);
            let conf = Configuration::initial(m).normalized().unwrap();
            assert!(adequacy_deviation(&conf, &cfg).unwrap() <= ORACLE_TOLERANCE);
            let mut cur = conf;
            while !cur.is_value() {
                assert!(soundness_deviation(&cur, &cfg).unwrap() <= ORACLE_TOLERANCE);
                cur = reduce_sv(&cur).unwrap().branches[0].1.clone();
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn b_is_strict_monoidal(seed in any::<u64>(), m1 in 1usize..4, n1 in 1usize..3, m2 in 1usize..4, n2 in 1usize..3) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (m1, m2) = (m1.max(n1), m2.max(n2));
            let f = random_isometry(&mut rng, m1, n1);
            let g = random_isometry(&mut rng, m2, n2);
            let lhs = b_functor(&f.kron(&g)).unwrap();
            let rhs = b_functor(&f).unwrap().tensor(&b_functor(&g).unwrap());
            prop_assert!(lhs.max_diff(&rhs) <= 1e-9);
        }

        #[test]
        fn meas_map_is_multiplicative(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let q = PureType::tensor(PureType::qbit(), PureType::qbit());
            let m = meas_map(&q, &cfg()).unwrap();
            let av: Vec<Scalar> = a.iter().map(|x| c(*x)).collect();
            let bv: Vec<Scalar> = b.iter().map(|x| c(*x)).collect();
            let ab: Vec<Scalar> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
            let (fa, fb, fab) = (m.apply(&av), m.apply(&bv), m.apply(&ab));
            let prod = DMatrix::from_row_slice(4, 4, &fa) * DMatrix::from_row_slice(4, 4, &fb);
            let want = DMatrix::from_row_slice(4, 4, &fab);
            prop_assert!((prod - want).iter().all(|z| z.norm() < 1e-9));
            prop_assert!(m.is_unital(1e-12));
        }
    }
}
