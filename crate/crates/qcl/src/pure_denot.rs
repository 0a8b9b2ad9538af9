//! Matrix semantics of the pure fragment: types as finite-dimensional
//! spaces (qnat truncated), terms as isometries and unitaries as unitary
//! matrices. Also synthesizes the canonical permutation unitaries used by
//! the configuration machine.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::pure_check::{typecheck_term, unitary_codomain, unitary_domain, PureChecker, Ty};
use crate::pure_core::{eps, Name, PureContext, PureTerm, PureType, Scalar, UnitaryExpr};

/// Largest matrix dimension the dense backend accepts.
pub const DIM_CAP: usize = 4096;

/// Dense complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix(pub DMatrix<Scalar>);

/// Column state vector.
pub type StateVector = ComplexMatrix;

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        ComplexMatrix(DMatrix::identity(n, n))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn adjoint(&self) -> Self {
        ComplexMatrix(self.0.adjoint())
    }

    pub fn mul(&self, other: &ComplexMatrix) -> Self {
        ComplexMatrix(&self.0 * &other.0)
    }

    pub fn kron(&self, other: &ComplexMatrix) -> Self {
        ComplexMatrix(self.0.kronecker(&other.0))
    }

    /// Block-diagonal direct sum.
    pub fn direct_sum(&self, other: &ComplexMatrix) -> Self {
        let (r1, c1) = self.0.shape();
        let (r2, c2) = other.0.shape();
        let mut m = DMatrix::zeros(r1 + r2, c1 + c2);
        m.view_mut((0, 0), (r1, c1)).copy_from(&self.0);
        m.view_mut((r1, c1), (r2, c2)).copy_from(&other.0);
        ComplexMatrix(m)
    }

    /// Largest entrywise modulus of the difference.
    pub fn max_diff(&self, other: &ComplexMatrix) -> f64 {
        if self.0.shape() != other.0.shape() {
            return f64::INFINITY;
        }
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// `M^dagger M = I` within `tol`.
    pub fn is_isometry(&self, tol: f64) -> bool {
        self.adjoint().mul(self).max_diff(&ComplexMatrix::identity(self.cols())) <= tol
    }

    /// Isometry in both directions.
    pub fn is_unitary(&self, tol: f64) -> bool {
        self.rows() == self.cols() && self.is_isometry(tol) && self.mul(&self.adjoint()).max_diff(&ComplexMatrix::identity(self.rows())) <= tol
    }

    /// Entries as `[re, im]` pairs, row by row.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<[f64; 2]>> =
            (0..self.rows()).map(|i| (0..self.cols()).map(|j| [self.0[(i, j)].re, self.0[(i, j)].im]).collect()).collect();
        serde_json::json!({ "rows": self.rows(), "cols": self.cols(), "data": rows })
    }
}

/// Truncation of `qnat` and treatment of the truncation boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TruncationConfig {
    pub qnat_dim: usize,
    /// Escalates truncation warnings to errors.
    pub strict: bool,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        TruncationConfig { qnat_dim: 16, strict: false }
    }
}

impl TruncationConfig {
    pub fn with_dim(qnat_dim: usize) -> Self {
        TruncationConfig { qnat_dim: qnat_dim.max(1), strict: false }
    }
}

/// Dimension of the space denoted by a pure type.
pub fn interp_type(q: &PureType, cfg: &TruncationConfig) -> usize {
    match q {
        PureType::Unit => 1,
        PureType::QNat => cfg.qnat_dim,
        PureType::Sum(a, b) => interp_type(a, cfg) + interp_type(b, cfg),
        PureType::Tensor(a, b) => interp_type(a, cfg) * interp_type(b, cfg),
    }
}

fn checked_dim(q: &PureType, cfg: &TruncationConfig) -> Result<usize> {
    let d = interp_type(q, cfg);
    if d > DIM_CAP {
        return Err(Error::DimensionCap(d));
    }
    Ok(d)
}

/// Index of a closed basis value in the canonical enumeration of `q`.
pub fn basis_index(b: &PureTerm, q: &PureType, cfg: &TruncationConfig) -> Result<Option<usize>> {
    Ok(match (b, q) {
        (PureTerm::Star, PureType::Unit) => Some(0),
        (_, PureType::QNat) => match b.as_nat() {
            Some(n) if n < cfg.qnat_dim => Some(n),
            Some(_) => None,
            None => return Err(Error::Malformed(format!("`{b}` is not a qnat literal"))),
        },
        (PureTerm::InjL(x), PureType::Sum(a, _)) => basis_index(x, a, cfg)?,
        (PureTerm::InjR(y), PureType::Sum(a, bt)) => basis_index(y, bt, cfg)?.map(|i| interp_type(a, cfg) + i),
        (PureTerm::Pair(x, y), PureType::Tensor(a, bt)) => {
            match (basis_index(x, a, cfg)?, basis_index(y, bt, cfg)?) {
                (Some(i), Some(j)) => Some(i * interp_type(bt, cfg) + j),
                _ => None,
            }
        }
        _ => return Err(Error::mismatch(q, b)),
    })
}

/// Closed basis values of `q` in index order.
pub fn enumerate_basis(q: &PureType, cfg: &TruncationConfig) -> Vec<PureTerm> {
    match q {
        PureType::Unit => vec![PureTerm::Star],
        PureType::QNat => (0..cfg.qnat_dim).map(PureTerm::nat).collect(),
        PureType::Sum(a, b) => enumerate_basis(a, cfg)
            .into_iter()
            .map(PureTerm::inl)
            .chain(enumerate_basis(b, cfg).into_iter().map(PureTerm::inr))
            .collect(),
        PureType::Tensor(a, b) => {
            let bs = enumerate_basis(b, cfg);
            enumerate_basis(a, cfg)
                .into_iter()
                .flat_map(|x| bs.iter().map(move |y| PureTerm::pair(x.clone(), y.clone())))
                .collect()
        }
    }
}

/// Warning raised when a clause leaves the truncated space.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncationWarning(pub String);

struct Denoter {
    cfg: TruncationConfig,
    warnings: Vec<TruncationWarning>,
}

/// Result of evaluating a term on a basis assignment.
enum Column {
    Vector(Vec<Scalar>),
    /// The term leaves the truncated space.
    Overflow,
}

impl Denoter {
    fn new(cfg: &TruncationConfig) -> Self {
        Denoter { cfg: *cfg, warnings: Vec::new() }
    }

    fn warn(&mut self, msg: String) -> Result<()> {
        if self.cfg.strict {
            return Err(Error::Truncation(msg));
        }
        self.warnings.push(TruncationWarning(msg));
        Ok(())
    }

    /// State vector of `t : q` with variables bound to basis values.
    fn vector(&mut self, t: &PureTerm, q: &PureType, env: &BTreeMap<Name, (PureType, PureTerm)>) -> Result<Column> {
        let dim = checked_dim(q, &self.cfg)?;
        let basis_vec = |i: usize| {
            let mut v = vec![Scalar::new(0.0, 0.0); dim];
            v[i] = Scalar::new(1.0, 0.0);
            v
        };
        Ok(match (t, q) {
            (PureTerm::Star, PureType::Unit) => Column::Vector(vec![Scalar::new(1.0, 0.0)]),
            (PureTerm::Zero, PureType::QNat) => Column::Vector(basis_vec(0)),
            (PureTerm::Var(x), _) => {
                let (_, b) = env.get(x).ok_or_else(|| Error::Unbound(x.clone()))?;
                match basis_index(b, q, &self.cfg)? {
                    Some(i) => Column::Vector(basis_vec(i)),
                    None => Column::Overflow,
                }
            }
            (PureTerm::Succ(a), PureType::QNat) => match self.vector(a, q, env)? {
                Column::Vector(v) => {
                    if v[dim - 1].norm() > eps() {
                        Column::Overflow
                    } else {
                        let mut w = vec![Scalar::new(0.0, 0.0); dim];
                        w[1..].copy_from_slice(&v[..dim - 1]);
                        Column::Vector(w)
                    }
                }
                Column::Overflow => Column::Overflow,
            },
            (PureTerm::InjL(a), PureType::Sum(l, r)) => match self.vector(a, l, env)? {
                Column::Vector(mut v) => {
                    v.resize(dim, Scalar::new(0.0, 0.0));
                    let _ = r;
                    Column::Vector(v)
                }
                Column::Overflow => Column::Overflow,
            },
            (PureTerm::InjR(b), PureType::Sum(l, r)) => match self.vector(b, r, env)? {
                Column::Vector(v) => {
                    let mut w = vec![Scalar::new(0.0, 0.0); interp_type(l, &self.cfg)];
                    w.extend(v);
                    Column::Vector(w)
                }
                Column::Overflow => Column::Overflow,
            },
            (PureTerm::Pair(a, b), PureType::Tensor(l, r)) => {
                match (self.vector(a, l, env)?, self.vector(b, r, env)?) {
                    (Column::Vector(x), Column::Vector(y)) => {
                        let mut w = Vec::with_capacity(dim);
                        for xa in &x {
                            for yb in &y {
                                w.push(xa * yb);
                            }
                        }
                        Column::Vector(w)
                    }
                    _ => Column::Overflow,
                }
            }
            (PureTerm::LinComb(es), _) => {
                let mut acc = vec![Scalar::new(0.0, 0.0); dim];
                for (c, e) in es {
                    match self.vector(e, q, env)? {
                        Column::Vector(v) => {
                            for (a, b) in acc.iter_mut().zip(v) {
                                *a += c * b;
                            }
                        }
                        Column::Overflow => return Ok(Column::Overflow),
                    }
                }
                Column::Vector(acc)
            }
            (PureTerm::Apply(u, a), _) => {
                let dom = unitary_domain(u, q)?;
                let m = self.unitary(u, &dom, q)?;
                match self.vector(a, &dom, env)? {
                    Column::Vector(v) => {
                        let col = &m.0 * nalgebra::DVector::from_vec(v);
                        Column::Vector(col.iter().copied().collect())
                    }
                    Column::Overflow => Column::Overflow,
                }
            }
            _ => return Err(Error::mismatch(q, t)),
        })
    }

    /// Matrix `[[ctx |- t : q]]` with columns indexed by basis assignments of `ctx`.
    /// Columns whose assignment overflows are reported by index.
    fn term_matrix(&mut self, ctx: &PureContext, t: &PureTerm, q: &PureType) -> Result<(ComplexMatrix, Vec<usize>)> {
        let rows = checked_dim(q, &self.cfg)?;
        let per_var: Vec<Vec<PureTerm>> = ctx.iter().map(|(_, qx)| enumerate_basis(qx, &self.cfg)).collect();
        let cols: usize = per_var.iter().map(Vec::len).product();
        if cols > DIM_CAP {
            return Err(Error::DimensionCap(cols));
        }
        let mut m = ComplexMatrix::zeros(rows, cols);
        let mut overflow = Vec::new();
        for col in 0..cols {
            let mut env = BTreeMap::new();
            let mut rest = col;
            for (k, (x, qx)) in ctx.iter().enumerate().rev() {
                let n = per_var[k].len();
                env.insert(x.clone(), (qx.clone(), per_var[k][rest % n].clone()));
                rest /= n;
            }
            match self.vector(t, q, &env)? {
                Column::Vector(v) => {
                    for (i, a) in v.into_iter().enumerate() {
                        m.0[(i, col)] = a;
                    }
                }
                Column::Overflow => overflow.push(col),
            }
        }
        Ok((m, overflow))
    }

    fn unitary(&mut self, u: &UnitaryExpr, dom: &PureType, cod: &PureType) -> Result<ComplexMatrix> {
        match u {
            UnitaryExpr::Clauses(cs) => {
                let (n, m) = (checked_dim(cod, &self.cfg)?, checked_dim(dom, &self.cfg)?);
                let mut acc = ComplexMatrix::zeros(n, m);
                for (p, e) in cs {
                    let ctx = clause_context(p, e, dom, cod)?;
                    let (pm, p_over) = self.term_matrix(&ctx, p, dom)?;
                    let (mut em, e_over) = self.term_matrix(&ctx, e, cod)?;
                    for col in &e_over {
                        if !p_over.contains(col) {
                            self.warn(format!("clause `{p} -> {e}` leaves the truncated space"))?;
                        }
                    }
                    for col in p_over.iter().chain(&e_over) {
                        em.0.column_mut(*col).fill(Scalar::new(0.0, 0.0));
                    }
                    acc.0 += &em.0 * pm.0.adjoint();
                }
                Ok(acc)
            }
            UnitaryExpr::Tensor(a, b) => match (dom, cod) {
                (PureType::Tensor(d1, d2), PureType::Tensor(c1, c2)) => Ok(self.unitary(a, d1, c1)?.kron(&self.unitary(b, d2, c2)?)),
                _ => Err(Error::mismatch(dom, cod)),
            },
            UnitaryExpr::DirectSum(a, b) => match (dom, cod) {
                (PureType::Sum(d1, d2), PureType::Sum(c1, c2)) => Ok(self.unitary(a, d1, c1)?.direct_sum(&self.unitary(b, d2, c2)?)),
                _ => Err(Error::mismatch(dom, cod)),
            },
            UnitaryExpr::Compose(second, first) => {
                let mid = unitary_codomain(first, dom)?;
                Ok(self.unitary(second, &mid, cod)?.mul(&self.unitary(first, dom, &mid)?))
            }
            UnitaryExpr::Adjoint(v) => Ok(self.unitary(v, cod, dom)?.adjoint()),
            UnitaryExpr::Ctrl(v) => match dom {
                PureType::Tensor(_, q) => {
                    let inner = self.unitary(v, q, q)?;
                    Ok(ComplexMatrix::identity(inner.rows()).direct_sum(&inner))
                }
                _ => Err(Error::mismatch("qbit (x) Q", dom)),
            },
        }
    }
}

/// Context of a clause, with variable types read off the clause's type.
fn clause_context(p: &PureTerm, e: &PureTerm, dom: &PureType, cod: &PureType) -> Result<PureContext> {
    let mut pc = PureChecker::new();
    let names = p.free_vars();
    let env: Vec<(Name, Ty)> = names.iter().map(|x| (x.clone(), pc.uni.fresh())).collect();
    let tp = pc.infer_term(&env, p)?;
    let te = pc.infer_term(&env, e)?;
    pc.uni.unify(&tp, &Ty::from_pure(dom))?;
    pc.uni.unify(&te, &Ty::from_pure(cod))?;
    Ok(env.iter().map(|(x, t)| (x.clone(), pc.resolve(t))).collect())
}

/// Isometry denoted by `ctx |- t`; rows follow the type of `t`, columns the
/// row-major enumeration of the context.
pub fn interp_term(ctx: &PureContext, t: &PureTerm, cfg: &TruncationConfig) -> Result<ComplexMatrix> {
    let q = typecheck_term(ctx, t)?;
    interp_term_at(ctx, t, &q, cfg)
}

/// As [`interp_term`] with the result type given.
pub fn interp_term_at(ctx: &PureContext, t: &PureTerm, q: &PureType, cfg: &TruncationConfig) -> Result<ComplexMatrix> {
    let mut d = Denoter::new(cfg);
    let (m, overflow) = d.term_matrix(ctx, t, q)?;
    if let Some(col) = overflow.first() {
        return Err(Error::Truncation(format!("`{t}` leaves the truncated space (column {col}, dimension {})", cfg.qnat_dim)));
    }
    Ok(m)
}

/// Unitary matrix denoted by `u` at its inferred type.
pub fn interp_unitary(u: &UnitaryExpr, cfg: &TruncationConfig) -> Result<ComplexMatrix> {
    Ok(interp_unitary_checked(u, cfg)?.0)
}

/// As [`interp_unitary`], also returning truncation warnings.
pub fn interp_unitary_checked(u: &UnitaryExpr, cfg: &TruncationConfig) -> Result<(ComplexMatrix, Vec<TruncationWarning>)> {
    let ty = crate::pure_check::typecheck_unitary(u)?;
    interp_unitary_at(u, &ty.domain, &ty.codomain, cfg)
}

/// Unitary matrix of `u` at a given type.
pub fn interp_unitary_at(u: &UnitaryExpr, dom: &PureType, cod: &PureType, cfg: &TruncationConfig) -> Result<(ComplexMatrix, Vec<TruncationWarning>)> {
    let mut d = Denoter::new(cfg);
    let m = d.unitary(u, dom, cod)?;
    Ok((m, d.warnings))
}

/// Target shape of a canonical monoidal isomorphism: a bracketing of some
/// of the source factors, with `Unit` standing for an inserted `*`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Bracket {
    Leaf(usize),
    Pair(Box<Bracket>, Box<Bracket>),
    Unit,
}

impl Bracket {
    pub fn pair(a: Bracket, b: Bracket) -> Bracket {
        Bracket::Pair(Box::new(a), Box::new(b))
    }

    /// Left-nested bracketing of the given shapes; empty gives `Unit`.
    pub fn left_nested(items: Vec<Bracket>) -> Bracket {
        let mut it = items.into_iter();
        match it.next() {
            None => Bracket::Unit,
            Some(first) => it.fold(first, Bracket::pair),
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        match self {
            Bracket::Leaf(i) => vec![*i],
            Bracket::Pair(a, b) => {
                let mut v = a.leaves();
                v.extend(b.leaves());
                v
            }
            Bracket::Unit => vec![],
        }
    }

    /// Type of the bracketing over the given factors.
    pub fn ty(&self, factors: &[PureType]) -> PureType {
        match self {
            Bracket::Leaf(i) => factors[*i].clone(),
            Bracket::Pair(a, b) => PureType::tensor(a.ty(factors), b.ty(factors)),
            Bracket::Unit => PureType::Unit,
        }
    }

    pub fn map_leaves(&self, f: &dyn Fn(usize) -> usize) -> Bracket {
        match self {
            Bracket::Leaf(i) => Bracket::Leaf(f(*i)),
            Bracket::Pair(a, b) => Bracket::pair(a.map_leaves(f), b.map_leaves(f)),
            Bracket::Unit => Bracket::Unit,
        }
    }

    /// Assembles a term from per-factor terms.
    pub fn term(&self, factors: &[PureTerm]) -> PureTerm {
        match self {
            Bracket::Leaf(i) => factors[*i].clone(),
            Bracket::Pair(a, b) => PureTerm::pair(a.term(factors), b.term(factors)),
            Bracket::Unit => PureTerm::Star,
        }
    }
}

/// Builds the single-clause unitary `{x1 (x) ... (x) xn -> target}` that
/// permutes and rebrackets the factors `from` (left-nested). Unit factors
/// absent from the target are matched by `*` and dropped.
pub fn synth_monoidal_unitary(from: &[PureType], target: &Bracket) -> Result<UnitaryExpr> {
    let leaves = target.leaves();
    for (i, q) in from.iter().enumerate() {
        let count = leaves.iter().filter(|&&l| l == i).count();
        if count > 1 || (count == 0 && *q != PureType::Unit) {
            return Err(Error::Configuration(format!("factor {i} appears {count} times in the target bracketing")));
        }
    }
    if let Some(l) = leaves.iter().find(|&&l| l >= from.len()) {
        return Err(Error::Configuration(format!("target refers to missing factor {l}")));
    }
    let vars: Vec<PureTerm> = (0..from.len()).map(|i| PureTerm::Var(format!("f{i}"))).collect();
    let pattern = PureTerm::tuple(
        (0..from.len()).map(|i| if leaves.contains(&i) { vars[i].clone() } else { PureTerm::Star }).collect(),
    );
    Ok(UnitaryExpr::Clauses(vec![(pattern, target.term(&vars))]))
}
