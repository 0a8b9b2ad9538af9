//! Shared helpers for integration tests: example loading, random well-typed
//! pure terms and unitaries, and small dense-matrix oracles.

#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use qcl::frontend::{parse, SourceProgram};
use qcl::pure_core::{PureContext, PureTerm, PureType, Scalar, UnitaryExpr};
use qcl::pure_denot::ComplexMatrix;

pub const QNAT_DIM: usize = 8;
pub const MAX_DIM: usize = 64;

pub fn example_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

pub fn example_names() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples"))
        .expect("examples directory")
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".qcl"))
        .collect();
    names.sort();
    names
}

pub fn load_example(name: &str) -> SourceProgram {
    let src = std::fs::read_to_string(example_path(name)).expect("readable example");
    parse(&src).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn c(re: f64, im: f64) -> Scalar {
    Complex64::new(re, im)
}

pub fn dim(q: &PureType) -> usize {
    match q {
        PureType::Unit => 1,
        PureType::QNat => QNAT_DIM,
        PureType::Sum(a, b) => dim(a) + dim(b),
        PureType::Tensor(a, b) => dim(a) * dim(b),
    }
}

/// A random pure type of dimension at most `budget`.
pub fn gen_type(rng: &mut impl Rng, budget: usize, depth: u32) -> PureType {
    loop {
        let choice = if depth == 0 { rng.random_range(0..3) } else { rng.random_range(0..6) };
        let q = match choice {
            0 => PureType::qbit(),
            1 => PureType::Unit,
            2 => PureType::QNat,
            3 => PureType::sum(gen_type(rng, budget, depth - 1), gen_type(rng, budget, depth - 1)),
            _ => PureType::tensor(gen_type(rng, budget, depth - 1), gen_type(rng, budget, depth - 1)),
        };
        if dim(&q) <= budget {
            return q;
        }
    }
}

/// A random closed basis value of `q` inside the truncated space.
pub fn gen_basis(rng: &mut impl Rng, q: &PureType) -> PureTerm {
    match q {
        PureType::Unit => PureTerm::Star,
        PureType::QNat => PureTerm::nat(rng.random_range(0..QNAT_DIM)),
        PureType::Sum(a, b) => {
            if rng.random_bool(0.5) {
                PureTerm::inl(gen_basis(rng, a))
            } else {
                PureTerm::inr(gen_basis(rng, b))
            }
        }
        PureType::Tensor(a, b) => PureTerm::pair(gen_basis(rng, a), gen_basis(rng, b)),
    }
}

pub fn random_unit_vector(rng: &mut impl Rng, n: usize) -> Vec<Scalar> {
    let v: Vec<Scalar> = (0..n).map(|_| c(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|z| z / norm).collect()
}

/// Superposition of distinct basis values of `q`, normalized.
pub fn gen_superposition(rng: &mut impl Rng, q: &PureType) -> PureTerm {
    let mut basis: Vec<PureTerm> = Vec::new();
    for _ in 0..rng.random_range(1..4) {
        let b = gen_basis(rng, q);
        if !basis.contains(&b) {
            basis.push(b);
        }
    }
    if basis.len() == 1 {
        return basis.pop().expect("one element");
    }
    let coeffs = random_unit_vector(rng, basis.len());
    PureTerm::LinComb(coeffs.into_iter().zip(basis).collect())
}

fn qbit_clauses(m: [[Scalar; 2]; 2]) -> UnitaryExpr {
    // Column j of `m` is the image of `|j>`.
    let body = |j: usize| PureTerm::LinComb(vec![(m[0][j], PureTerm::ket0()), (m[1][j], PureTerm::ket1())]);
    UnitaryExpr::Clauses(vec![(PureTerm::ket0(), body(0)), (PureTerm::ket1(), body(1))])
}

/// A random single-qubit gate written as clauses.
pub fn gen_qbit_gate(rng: &mut impl Rng) -> UnitaryExpr {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    match rng.random_range(0..4) {
        0 => qbit_clauses([[c(h, 0.0), c(h, 0.0)], [c(h, 0.0), c(-h, 0.0)]]),
        1 => UnitaryExpr::Clauses(vec![(PureTerm::ket0(), PureTerm::ket1()), (PureTerm::ket1(), PureTerm::ket0())]),
        2 => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            UnitaryExpr::Clauses(vec![
                (PureTerm::ket0(), PureTerm::ket0()),
                (PureTerm::ket1(), PureTerm::LinComb(vec![(Complex64::from_polar(1.0, theta), PureTerm::ket1())])),
            ])
        }
        _ => {
            let v = random_unit_vector(rng, 2);
            let (a, b) = (v[0], v[1]);
            qbit_clauses([[a, -b.conj()], [b, a.conj()]])
        }
    }
}

/// Cyclic shift of `|0>, ..., |m-1>` fixing every larger number.
pub fn nat_cycle(m: usize) -> UnitaryExpr {
    let mut clauses: Vec<(PureTerm, PureTerm)> = (0..m).map(|k| (PureTerm::nat(k), PureTerm::nat((k + 1) % m))).collect();
    clauses.push((PureTerm::shifted(PureTerm::var("y"), m), PureTerm::shifted(PureTerm::var("y"), m)));
    UnitaryExpr::Clauses(clauses)
}

/// A random unitary from `q` to itself that stays inside the truncated space.
pub fn gen_unitary(rng: &mut impl Rng, q: &PureType, depth: u32) -> UnitaryExpr {
    if depth > 0 {
        match rng.random_range(0..8) {
            0 => return UnitaryExpr::compose(gen_unitary(rng, q, depth - 1), gen_unitary(rng, q, depth - 1)),
            1 => return UnitaryExpr::adjoint(gen_unitary(rng, q, depth - 1)),
            _ => {}
        }
    }
    let d = depth.saturating_sub(1);
    match q {
        PureType::Unit => UnitaryExpr::identity(),
        PureType::QNat => match rng.random_range(0..3) {
            0 => UnitaryExpr::identity(),
            _ => nat_cycle(rng.random_range(1..=QNAT_DIM)),
        },
        PureType::Sum(a, b) => {
            if **a == PureType::Unit && **b == PureType::Unit && rng.random_bool(0.6) {
                gen_qbit_gate(rng)
            } else {
                UnitaryExpr::direct_sum(gen_unitary(rng, a, d), gen_unitary(rng, b, d))
            }
        }
        PureType::Tensor(a, b) => match rng.random_range(0..5) {
            0 if **a == PureType::qbit() => UnitaryExpr::ctrl(gen_unitary(rng, b, d)),
            1 if **a == PureType::qbit() => UnitaryExpr::qif(gen_unitary(rng, b, d), gen_unitary(rng, b, d)),
            2 if a == b => UnitaryExpr::compose(
                UnitaryExpr::Clauses(vec![(
                    PureTerm::pair(PureTerm::var("x"), PureTerm::var("y")),
                    PureTerm::pair(PureTerm::var("y"), PureTerm::var("x")),
                )]),
                UnitaryExpr::tensor(gen_unitary(rng, a, d), gen_unitary(rng, b, d)),
            ),
            _ => UnitaryExpr::tensor(gen_unitary(rng, a, d), gen_unitary(rng, b, d)),
        },
    }
}

/// A random closed term of type `q`.
pub fn gen_closed(rng: &mut impl Rng, q: &PureType, depth: u32) -> PureTerm {
    if depth > 0 {
        match rng.random_range(0..4) {
            0 => return PureTerm::apply(gen_unitary(rng, q, 2), gen_closed(rng, q, depth - 1)),
            1 => match q {
                PureType::Sum(a, b) if rng.random_bool(0.5) => return PureTerm::inl(gen_closed(rng, a, depth - 1)),
                PureType::Sum(_, b) => return PureTerm::inr(gen_closed(rng, b, depth - 1)),
                PureType::Tensor(a, b) => {
                    return PureTerm::pair(gen_closed(rng, a, depth - 1), gen_closed(rng, b, depth - 1))
                }
                _ => {}
            },
            _ => {}
        }
    }
    gen_superposition(rng, q)
}

/// A random term linear in the variables of the returned context.
pub fn gen_open(rng: &mut impl Rng, budget: usize) -> (PureContext, PureTerm, PureType) {
    let a = gen_type(rng, budget.min(8), 2);
    let x = PureTerm::var("x");
    if rng.random_bool(0.5) {
        let ux = PureTerm::apply(gen_unitary(rng, &a, 2), x);
        let (t, q) = match rng.random_range(0..3) {
            0 => (ux, a.clone()),
            1 => {
                let other = gen_type(rng, 2, 1);
                if rng.random_bool(0.5) {
                    (PureTerm::inl(ux), PureType::sum(a.clone(), other))
                } else {
                    (PureTerm::inr(ux), PureType::sum(other, a.clone()))
                }
            }
            _ => {
                let b = gen_type(rng, (budget / dim(&a)).max(1), 1);
                (PureTerm::pair(ux, gen_closed(rng, &b, 1)), PureType::tensor(a.clone(), b))
            }
        };
        (vec![("x".into(), a)], t, q)
    } else {
        let b = gen_type(rng, (budget / dim(&a)).clamp(1, 8), 2);
        let q = PureType::tensor(a.clone(), b.clone());
        let inner = PureTerm::pair(PureTerm::apply(gen_unitary(rng, &a, 1), x), PureTerm::var("y"));
        let t = PureTerm::apply(gen_unitary(rng, &q, 1), inner);
        (vec![("x".into(), a), ("y".into(), b)], t, q)
    }
}

/// An `m x n` isometry from the QR factors of a Gaussian matrix.
pub fn random_isometry(rng: &mut impl Rng, m: usize, n: usize) -> ComplexMatrix {
    let g = DMatrix::from_fn(m, m, |_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let q = g.qr().q();
    ComplexMatrix(q.columns(0, n).into_owned())
}

/// Row-major vectorization of `|v><v|`.
pub fn density(v: &[Scalar]) -> Vec<Scalar> {
    let n = v.len();
    (0..n * n).map(|k| v[k / n] * v[k % n].conj()).collect()
}
