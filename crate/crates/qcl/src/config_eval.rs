//! The operational machine: quantum configurations, their well-formedness,
//! the probabilistic small-step relation and evaluation to distributions
//! over value configurations.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::main_core::{check_main, ov_basis, substitute_main, MainContext, MainTerm, MainType, WILDCARD};
use crate::pure_check::{check_term, check_unitary, typecheck_term, unitary_codomain, UnitaryType};
use crate::pure_core::{eps, Name, PureTerm, PureType, Scalar, UnitaryExpr};
use crate::pure_denot::{synth_monoidal_unitary, Bracket};
use crate::pure_eval::{normalize_unchecked, NormalValue};

/// Default ceiling on the number of reduction steps of a run.
pub const DEFAULT_MAX_STEPS: usize = 1_000_000;

/// A group of state factors tracked by one variable of the term, or an
/// auxiliary group tracked by none.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub var: Option<Name>,
    pub shape: Bracket,
}

/// Structural form of the linking permutation: the factor types of the
/// state and their partition into bracketed blocks. Named blocks come
/// first, auxiliary blocks last.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BlockLinking {
    pub input_types: Vec<PureType>,
    pub blocks: Vec<Block>,
}

impl BlockLinking {
    pub fn empty() -> Self {
        Self::default()
    }

    /// One block per factor, named in order.
    pub fn identity(input_types: Vec<PureType>, vars: &[&str]) -> Self {
        let blocks = vars.iter().enumerate().map(|(i, x)| Block { var: Some(x.to_string()), shape: Bracket::Leaf(i) }).collect();
        BlockLinking { input_types, blocks }
    }

    pub fn block_of(&self, x: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.var.as_deref() == Some(x))
    }

    pub fn block_type(&self, i: usize) -> PureType {
        self.blocks[i].shape.ty(&self.input_types)
    }

    /// Typing context `x1 : B(Q1), ..., xm : B(Qm)` of the named blocks.
    pub fn context(&self) -> MainContext {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.var.clone().map(|x| (x, MainType::BOp(self.block_type(i)))))
            .collect()
    }

    pub fn aux_types(&self) -> Vec<PureType> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i].var.is_none()).map(|i| self.block_type(i)).collect()
    }

    pub fn block_types(&self) -> Vec<PureType> {
        (0..self.blocks.len()).map(|i| self.block_type(i)).collect()
    }

    /// Bracketing of the codomain: the blocks, left nested.
    pub fn target(&self) -> Bracket {
        Bracket::left_nested(self.blocks.iter().map(|b| b.shape.clone()).collect())
    }

    /// The linking permutation as a unitary expression.
    pub fn unitary(&self) -> Result<UnitaryExpr> {
        synth_monoidal_unitary(&self.input_types, &self.target())
    }

    /// Blocks partition the factors; names are distinct; auxiliary blocks trail.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.input_types.len()];
        for b in &self.blocks {
            for l in b.shape.leaves() {
                if l >= seen.len() || std::mem::replace(&mut seen[l], true) {
                    return Err(Error::Configuration(format!("factor {l} is missing or shared between blocks")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Configuration(format!("factor {i} belongs to no block")));
        }
        let mut names = BTreeSet::new();
        let mut aux_started = false;
        for b in &self.blocks {
            match &b.var {
                Some(x) if aux_started => return Err(Error::Configuration(format!("named block `{x}` after an auxiliary block"))),
                Some(x) if !names.insert(x.clone()) => return Err(Error::Configuration(format!("variable `{x}` links two blocks"))),
                Some(_) => {}
                None => aux_started = true,
            }
        }
        Ok(())
    }

    /// Renumbers leaves through `map` (old index to new index).
    fn remap(&mut self, map: &[Option<usize>]) {
        for b in &mut self.blocks {
            b.shape = b.shape.map_leaves(&|i| map[i].expect("remapped leaf survives"));
        }
    }

    fn insert_named(&mut self, block: Block) {
        let pos = self.blocks.iter().position(|b| b.var.is_none()).unwrap_or(self.blocks.len());
        self.blocks.insert(pos, block);
    }
}

fn fmt_bracket(b: &Bracket) -> String {
    match b {
        Bracket::Leaf(i) => i.to_string(),
        Bracket::Unit => "*".into(),
        Bracket::Pair(a, c) => format!("({}, {})", fmt_bracket(a), fmt_bracket(c)),
    }
}

impl fmt::Display for BlockLinking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}:{}", b.var.as_deref().unwrap_or(WILDCARD), fmt_bracket(&b.shape)))
            .collect();
        write!(f, "[{}]", parts.join(" | "))
    }
}

/// A machine state: pure state, linking and term.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    pub state: PureTerm,
    pub linking: BlockLinking,
    pub term: MainTerm,
}

impl Configuration {
    pub fn new(state: PureTerm, linking: BlockLinking, term: MainTerm) -> Self {
        Configuration { state, linking, term }
    }

    /// `(*, empty linking, term)`.
    pub fn initial(term: MainTerm) -> Self {
        Configuration::new(PureTerm::Star, BlockLinking::empty(), term)
    }

    pub fn is_semi_value(&self) -> bool {
        self.state.is_value()
    }

    pub fn is_value(&self) -> bool {
        self.is_semi_value() && self.term.is_value()
    }

    /// The state as a normal value, normalizing if needed.
    pub fn normal_state(&self) -> Result<NormalValue> {
        match NormalValue::from_term(&self.state) {
            Some(v) => Ok(v),
            None => normalize_unchecked(&self.state),
        }
    }

    /// The same configuration with a normalized state.
    pub fn normalized(&self) -> Result<Configuration> {
        Ok(Configuration { state: self.normal_state()?.to_term(), ..self.clone() })
    }

    /// Type of the term under the linking context, and the auxiliary types.
    pub fn typing(&self) -> Result<(MainType, Vec<PureType>)> {
        let t = crate::main_core::typecheck_main(&self.linking.context(), &self.term)?;
        Ok((t, self.linking.aux_types()))
    }

    /// Fresh linking variable `%k` beyond every `%k` in the configuration.
    fn fresh_var(&self, offset: usize) -> Name {
        let mut names = BTreeSet::new();
        collect_names(&self.term, &mut names);
        names.extend(self.linking.blocks.iter().filter_map(|b| b.var.clone()));
        let next = names.iter().filter_map(|n| n.strip_prefix('%')?.parse::<usize>().ok()).max().map_or(0, |k| k + 1);
        format!("%{}", next + offset)
    }
}

fn collect_names(m: &MainTerm, out: &mut BTreeSet<Name>) {
    out.extend(m.free_vars());
    // Bound names matter too: a fresh name must not be captured later.
    let printed = m.to_string();
    for piece in printed.split(|c: char| !(c.is_alphanumeric() || c == '%' || c == '_')) {
        if piece.starts_with('%') {
            out.insert(piece.to_string());
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let state = match NormalValue::from_term(&self.state) {
            Some(v) => v.pretty(4),
            None => self.state.to_string(),
        };
        write!(f, "({state}, {}, {})", self.linking, self.term)
    }
}

/// Finite distribution over configurations.
#[derive(Clone, Debug, Default)]
pub struct Distribution {
    pub branches: Vec<(f64, Configuration)>,
}

impl Distribution {
    pub fn total(&self) -> f64 {
        self.branches.iter().map(|(p, _)| p).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Well-formedness

/// Which condition of well-formedness fails.
#[derive(Clone, Debug, PartialEq)]
pub enum WfViolation {
    /// The state is not a closed term of the product of the input types.
    State(Error),
    /// The linking is not a monoidal isomorphism onto the block types.
    Linking(Error),
    /// The term does not have the expected type under the block context.
    Term(Error),
    /// The trailing blocks do not have the expected auxiliary types.
    Auxiliary(String),
}

impl fmt::Display for WfViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WfViolation::State(e) => write!(f, "state: {e}"),
            WfViolation::Linking(e) => write!(f, "linking: {e}"),
            WfViolation::Term(e) => write!(f, "term: {e}"),
            WfViolation::Auxiliary(m) => write!(f, "auxiliary data: {m}"),
        }
    }
}

/// Checks that `c` is well formed with type `expected` and auxiliary
/// quantum data of types `aux`.
pub fn wf_config(c: &Configuration, expected: &MainType, aux: &[PureType]) -> std::result::Result<(), WfViolation> {
    let lk = &c.linking;
    let input = PureType::tensor_all(&lk.input_types);
    check_term(&vec![], &c.state, &input).map_err(WfViolation::State)?;
    lk.validate().map_err(WfViolation::Linking)?;
    let u = lk.unitary().map_err(WfViolation::Linking)?;
    let ut = UnitaryType { domain: input, codomain: PureType::tensor_all(&lk.block_types()) };
    check_unitary(&u, &ut).map_err(WfViolation::Linking)?;
    check_main(&lk.context(), &c.term, expected).map_err(WfViolation::Term)?;
    let found = lk.aux_types();
    if found != aux {
        let show = |v: &[PureType]| v.iter().map(|q| q.to_string()).collect::<Vec<_>>().join(", ");
        return Err(WfViolation::Auxiliary(format!("expected [{}], found [{}]", show(aux), show(&found))));
    }
    Ok(())
}

/// Subject reduction for one step: `after` keeps the type and auxiliary
/// data of `before`.
pub fn check_subject_reduction(before: &Configuration, after: &Configuration) -> Result<bool> {
    let (t, aux) = before.typing()?;
    Ok(wf_config(after, &t, &aux).is_ok())
}

// ---------------------------------------------------------------------------
// Small-step reduction

struct Branch {
    p: f64,
    state: PureTerm,
    linking: BlockLinking,
    term: MainTerm,
}

fn stuck(m: &MainTerm) -> Error {
    Error::Internal(format!("well-typed term `{m}` is stuck"))
}

/// Splits a left-nested tuple of `n` factors.
fn split_factors(b: &PureTerm, n: usize) -> Result<Vec<PureTerm>> {
    match n {
        0 => Ok(vec![]),
        1 => Ok(vec![b.clone()]),
        _ => match b {
            PureTerm::Pair(rest, last) => {
                let mut v = split_factors(rest, n - 1)?;
                v.push((**last).clone());
                Ok(v)
            }
            _ => Err(Error::Internal(format!("state entry `{b}` has fewer than {n} factors"))),
        },
    }
}

/// Leaves of `shape` first, then all other factors in order.
fn block_first(lk: &BlockLinking, shape: &Bracket) -> (Bracket, Vec<usize>) {
    let inside = shape.leaves();
    let rest: Vec<usize> = (0..lk.input_types.len()).filter(|i| !inside.contains(i)).collect();
    let target = if rest.is_empty() {
        shape.clone()
    } else {
        Bracket::pair(shape.clone(), Bracket::left_nested(rest.iter().map(|&i| Bracket::Leaf(i)).collect()))
    };
    (target, rest)
}

struct Machine<'a> {
    conf: &'a Configuration,
}

impl Machine<'_> {
    fn simple(&self, term: MainTerm) -> Vec<Branch> {
        vec![Branch { p: 1.0, state: self.conf.state.clone(), linking: self.conf.linking.clone(), term }]
    }

    /// Steps `m`; `None` when `m` is a value.
    fn step(&self, m: &MainTerm) -> Result<Option<Vec<Branch>>> {
        use MainTerm::*;
        let ctx = |inner: &MainTerm, rebuild: &dyn Fn(MainTerm) -> MainTerm| -> Result<Option<Vec<Branch>>> {
            let bs = self.step(inner)?.ok_or_else(|| stuck(inner))?;
            Ok(Some(bs.into_iter().map(|b| Branch { term: rebuild(b.term), ..b }).collect()))
        };
        let bx = |t: &MainTerm| Box::new(t.clone());
        match m {
            Star | Zero | Var(_) | Lift(_) | Lam(..) => Ok(None),
            InL(a) if !a.is_value() => ctx(a, &|t| MainTerm::inl(t)),
            InR(a) if !a.is_value() => ctx(a, &|t| MainTerm::inr(t)),
            Succ(a) if !a.is_value() => ctx(a, &|t| MainTerm::succ(t)),
            InL(_) | InR(_) | Succ(_) => Ok(None),
            Pair(a, b) if !a.is_value() => ctx(a, &|t| Pair(Box::new(t), bx(b))),
            Pair(a, b) if !b.is_value() => ctx(b, &|t| Pair(bx(a), Box::new(t))),
            Pair(..) => Ok(None),
            LetPair(x, y, a, n) if !a.is_value() => ctx(a, &|t| LetPair(x.clone(), y.clone(), Box::new(t), bx(n))),
            LetPair(x, y, a, n) => match &**a {
                Pair(v, w) => Ok(Some(self.simple(bind(n, &[(x, v), (y, w)])))),
                _ => Err(stuck(m)),
            },
            Case(l, x, a, y, b) if !l.is_value() => {
                ctx(l, &|t| Case(Box::new(t), x.clone(), bx(a), y.clone(), bx(b)))
            }
            Case(l, x, a, y, b) => match &**l {
                InL(v) => Ok(Some(self.simple(bind(a, &[(x, v)])))),
                InR(v) => Ok(Some(self.simple(bind(b, &[(y, v)])))),
                _ => Err(stuck(m)),
            },
            Force(a) if !a.is_value() => ctx(a, &|t| Force(Box::new(t))),
            Force(a) => match &**a {
                Lift(body) => Ok(Some(self.simple((**body).clone()))),
                _ => Err(stuck(m)),
            },
            App(f, a) if !f.is_value() => ctx(f, &|t| App(Box::new(t), bx(a))),
            App(f, a) if !a.is_value() => ctx(a, &|t| App(bx(f), Box::new(t))),
            App(f, a) => match &**f {
                Lam(x, _, body) => Ok(Some(self.simple(bind(body, &[(x, a)])))),
                _ => Err(stuck(m)),
            },
            Match(l, a, x, b) if !l.is_value() => ctx(l, &|t| Match(Box::new(t), bx(a), x.clone(), bx(b))),
            Match(l, a, x, b) => match &**l {
                Zero => Ok(Some(self.simple((**a).clone()))),
                Succ(v) => Ok(Some(self.simple(bind(b, &[(x, v)])))),
                _ => Err(stuck(m)),
            },
            Meas(a) if !a.is_value() => ctx(a, &|t| Meas(Box::new(t))),
            Meas(a) => match &**a {
                Var(x) => self.measure(x).map(Some),
                _ => Err(stuck(m)),
            },
            UnApply(u, a) if !a.is_value() => ctx(a, &|t| UnApply(u.clone(), Box::new(t))),
            UnApply(u, a) => match &**a {
                Var(z) => self.apply_unitary(u, z).map(Some),
                _ => Err(stuck(m)),
            },
            LetBang(z, a, n) if !a.is_value() => ctx(a, &|t| LetBang(z.clone(), Box::new(t), bx(n))),
            LetBang(z, a, n) => match &**a {
                Pair(x, y) => match (&**x, &**y) {
                    (Var(x), Var(y)) => self.gather(x, y, z, n).map(Some),
                    _ => Err(stuck(m)),
                },
                _ => Err(stuck(m)),
            },
            LetPairBang(x, y, a, n) if !a.is_value() => {
                ctx(a, &|t| LetPairBang(x.clone(), y.clone(), Box::new(t), bx(n)))
            }
            LetPairBang(x, y, a, n) => match &**a {
                Var(z) => self.divide(z, x, y, n).map(Some),
                _ => Err(stuck(m)),
            },
            Pure(t) => self.prepare(t).map(Some),
        }
    }

    fn block(&self, x: &str) -> Result<usize> {
        self.conf.linking.block_of(x).ok_or_else(|| Error::Configuration(format!("variable `{x}` is not linked to the state")))
    }

    fn prepare(&self, t: &PureTerm) -> Result<Vec<Branch>> {
        let q = typecheck_term(&vec![], t)?;
        let mut lk = self.conf.linking.clone();
        let x = self.conf.fresh_var(0);
        let state = if lk.input_types.is_empty() {
            // The empty state is a scalar of modulus one; keep its phase.
            let phase = self.conf.normal_state()?.entries.first().map_or(Scalar::new(1.0, 0.0), |(c, _)| *c);
            if (phase - Scalar::new(1.0, 0.0)).norm() <= eps() {
                t.clone()
            } else {
                PureTerm::LinComb(vec![(phase, t.clone())])
            }
        } else {
            PureTerm::pair(self.conf.state.clone(), t.clone())
        };
        lk.input_types.push(q);
        lk.insert_named(Block { var: Some(x.clone()), shape: Bracket::Leaf(lk.input_types.len() - 1) });
        Ok(vec![Branch { p: 1.0, state, linking: lk, term: MainTerm::Var(x) }])
    }

    fn apply_unitary(&self, u: &UnitaryExpr, z: &str) -> Result<Vec<Branch>> {
        let lk = &self.conf.linking;
        let i = self.block(z)?;
        let shape = lk.blocks[i].shape.clone();
        let dom = lk.block_type(i);
        let cod = unitary_codomain(u, &dom)?;
        let (target, rest) = block_first(lk, &shape);
        let rho = synth_monoidal_unitary(&lk.input_types, &target)?;
        let lifted = if rest.is_empty() { u.clone() } else { UnitaryExpr::tensor(u.clone(), UnitaryExpr::identity()) };
        if cod == dom {
            let w = UnitaryExpr::compose(UnitaryExpr::adjoint(rho.clone()), UnitaryExpr::compose(lifted, rho));
            let state = PureTerm::apply(w, self.conf.state.clone());
            return Ok(vec![Branch { p: 1.0, state, linking: lk.clone(), term: MainTerm::Var(z.to_string()) }]);
        }
        // The block changes type: merge it into one factor placed at the
        // position of its first leaf.
        let first = *shape.leaves().iter().min().expect("blocks are non-empty");
        let mut order: Vec<Option<usize>> = rest.iter().map(|&r| Some(r)).collect();
        let at = rest.iter().position(|&r| r > first).unwrap_or(rest.len());
        order.insert(at, None);
        let vars: Vec<PureTerm> = rest.iter().map(|r| PureTerm::Var(format!("r{r}"))).collect();
        let w = PureTerm::var("w");
        let pattern = if rest.is_empty() { w.clone() } else { PureTerm::pair(w.clone(), PureTerm::tuple(vars.clone())) };
        let body = PureTerm::tuple(
            order.iter().map(|o| o.map_or(w.clone(), |r| PureTerm::Var(format!("r{r}")))).collect(),
        );
        let kappa = UnitaryExpr::Clauses(vec![(pattern, body)]);
        let full = UnitaryExpr::compose(kappa, UnitaryExpr::compose(lifted, rho));
        let state = PureTerm::apply(full, self.conf.state.clone());
        let mut map = vec![None; lk.input_types.len()];
        let mut types = Vec::new();
        for (new, o) in order.iter().enumerate() {
            match o {
                Some(r) => {
                    map[*r] = Some(new);
                    types.push(lk.input_types[*r].clone());
                }
                None => types.push(cod.clone()),
            }
        }
        let mut new_lk = BlockLinking { input_types: types, blocks: lk.blocks.clone() };
        new_lk.blocks[i].shape = Bracket::Leaf(at);
        for (j, b) in new_lk.blocks.iter_mut().enumerate() {
            if j != i {
                b.shape = b.shape.map_leaves(&|l| map[l].expect("other blocks survive"));
            }
        }
        Ok(vec![Branch { p: 1.0, state, linking: new_lk, term: MainTerm::Var(z.to_string()) }])
    }

    fn gather(&self, x: &str, y: &str, z: &Name, body: &MainTerm) -> Result<Vec<Branch>> {
        let mut lk = self.conf.linking.clone();
        let (ix, iy) = (self.block(x)?, self.block(y)?);
        if ix == iy {
            return Err(Error::Configuration(format!("`{x}` and `{y}` link the same block")));
        }
        let fresh = self.conf.fresh_var(0);
        let merged = Block { var: Some(fresh.clone()), shape: Bracket::pair(lk.blocks[ix].shape.clone(), lk.blocks[iy].shape.clone()) };
        lk.blocks[ix] = merged;
        lk.blocks.remove(iy);
        let term = bind(body, &[(z, &MainTerm::Var(fresh))]);
        Ok(vec![Branch { p: 1.0, state: self.conf.state.clone(), linking: lk, term }])
    }

    fn divide(&self, z: &str, x: &Name, y: &Name, body: &MainTerm) -> Result<Vec<Branch>> {
        let mut lk = self.conf.linking.clone();
        let i = self.block(z)?;
        let (fx, fy) = (self.conf.fresh_var(0), self.conf.fresh_var(1));
        let mut state = self.conf.state.clone();
        let (sx, sy) = match lk.blocks[i].shape.clone() {
            Bracket::Pair(a, b) => (*a, *b),
            Bracket::Leaf(l) => {
                // Split factor `l` of tensor type into two factors.
                let (q1, q2) = match &lk.input_types[l] {
                    PureType::Tensor(a, b) => ((**a).clone(), (**b).clone()),
                    other => return Err(Error::Configuration(format!("cannot split a block of type {other}"))),
                };
                let n = lk.input_types.len();
                let vars: Vec<PureTerm> = (0..n).map(|k| PureTerm::Var(format!("f{k}"))).collect();
                let (a, b) = (PureTerm::var("a"), PureTerm::var("b"));
                let pattern = PureTerm::tuple(
                    (0..n).map(|k| if k == l { PureTerm::pair(a.clone(), b.clone()) } else { vars[k].clone() }).collect(),
                );
                let mut outs = Vec::new();
                for (k, v) in vars.iter().enumerate() {
                    if k == l {
                        outs.push(a.clone());
                        outs.push(b.clone());
                    } else {
                        outs.push(v.clone());
                    }
                }
                let assoc = UnitaryExpr::Clauses(vec![(pattern, PureTerm::tuple(outs))]);
                state = PureTerm::apply(assoc, state);
                lk.input_types.splice(l..=l, [q1, q2]);
                let map: Vec<Option<usize>> = (0..n).map(|k| Some(if k > l { k + 1 } else { k })).collect();
                lk.remap(&map);
                (Bracket::Leaf(l), Bracket::Leaf(l + 1))
            }
            Bracket::Unit => return Err(Error::Configuration("cannot split an empty block".into())),
        };
        lk.blocks[i] = Block { var: Some(fx.clone()), shape: sx };
        lk.blocks.insert(i + 1, Block { var: Some(fy.clone()), shape: sy });
        let term = bind(body, &[(x, &MainTerm::Var(fx)), (y, &MainTerm::Var(fy))]);
        Ok(vec![Branch { p: 1.0, state, linking: lk, term }])
    }

    fn measure(&self, x: &str) -> Result<Vec<Branch>> {
        let lk = &self.conf.linking;
        let i = self.block(x)?;
        let shape = lk.blocks[i].shape.clone();
        let n = lk.input_types.len();
        let inside = shape.leaves();
        let rest: Vec<usize> = (0..n).filter(|k| !inside.contains(k)).collect();
        let v = self.conf.normal_state()?;
        let mut groups: Vec<(PureTerm, Vec<(Scalar, PureTerm)>)> = Vec::new();
        for (c, b) in &v.entries {
            let fs = split_factors(b, n)?;
            let key = shape.term(&fs);
            let residual = PureTerm::tuple(rest.iter().map(|&k| fs[k].clone()).collect());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, es)) => es.push((*c, residual)),
                None => groups.push((key, vec![(*c, residual)])),
            }
        }
        let mut map = vec![None; n];
        for (new, &old) in rest.iter().enumerate() {
            map[old] = Some(new);
        }
        let mut new_lk = lk.clone();
        new_lk.blocks.remove(i);
        new_lk.input_types = rest.iter().map(|&k| lk.input_types[k].clone()).collect();
        new_lk.remap(&map);
        let mut out = Vec::new();
        for (key, es) in groups {
            let p: f64 = es.iter().map(|(c, _)| c.norm_sqr()).sum();
            if p <= eps() * eps() {
                continue;
            }
            let scale = 1.0 / p.sqrt();
            let residual = NormalValue::from_entries(es.into_iter().map(|(c, t)| (c * scale, t)).collect());
            out.push(Branch { p, state: residual.to_term(), linking: new_lk.clone(), term: ov_basis(&key)? });
        }
        Ok(out)
    }
}

/// `body[v1/x1, ...]`, skipping wildcard binders.
fn bind(body: &MainTerm, pairs: &[(&Name, &MainTerm)]) -> MainTerm {
    let sigma: Vec<(Name, MainTerm)> =
        pairs.iter().filter(|(x, _)| x.as_str() != WILDCARD).map(|(x, v)| ((*x).clone(), (*v).clone())).collect();
    substitute_main(body, &sigma)
}

/// One small step. A value configuration has no successors.
pub fn step(c: &Configuration) -> Result<Distribution> {
    let m = Machine { conf: c };
    let branches = m.step(&c.term)?.unwrap_or_default();
    Ok(Distribution {
        branches: branches.into_iter().map(|b| (b.p, Configuration::new(b.state, b.linking, b.term))).collect(),
    })
}

/// One step between semi-value configurations: normalize, step, normalize.
pub fn reduce_sv(c: &Configuration) -> Result<Distribution> {
    let start = c.normalized()?;
    let d = step(&start)?;
    let mut out = Vec::with_capacity(d.branches.len());
    for (p, b) in d.branches {
        out.push((p, b.normalized()?));
    }
    Ok(Distribution { branches: out })
}

// ---------------------------------------------------------------------------
// Runs

/// How a run explores branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Expand every branch.
    Exhaustive,
    /// Follow one branch chosen at random with the given seed.
    Sample(u64),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub mode: Mode,
    pub max_steps: usize,
    /// Re-check well-formedness after every step.
    pub check_wf: bool,
    /// Record every step.
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { mode: Mode::Exhaustive, max_steps: DEFAULT_MAX_STEPS, check_wf: false, trace: false }
    }
}

/// One recorded reduction step.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub from: Configuration,
    pub probability: f64,
    pub to: Configuration,
}

/// Outcome of a run.
#[derive(Clone, Debug, Default)]
pub struct RunResult {
    pub distribution: Distribution,
    pub steps: usize,
    /// Largest deviation from one of the branch probabilities of a step.
    pub max_probability_defect: f64,
    pub trace: Vec<TraceStep>,
}

/// Evaluates `c` to a distribution over value configurations.
pub fn run(c: &Configuration, opts: &RunOptions) -> Result<RunResult> {
    let expected = if opts.check_wf {
        let (t, aux) = c.typing()?;
        if let Err(v) = wf_config(c, &t, &aux) {
            return Err(Error::Configuration(format!("initial configuration is ill formed: {v}")));
        }
        Some((t, aux))
    } else {
        None
    };
    let mut res = RunResult::default();
    let mut rng = match opts.mode {
        Mode::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Exhaustive => None,
    };
    let mut frontier = vec![(1.0, c.normalized()?)];
    let mut leaves: Vec<(f64, Configuration)> = Vec::new();
    while let Some((p, conf)) = frontier.pop() {
        if conf.term.is_value() {
            leaves.push((p, conf));
            continue;
        }
        res.steps += 1;
        if res.steps > opts.max_steps {
            return Err(Error::Internal(format!("no value reached within {} steps", opts.max_steps)));
        }
        let d = reduce_sv(&conf)?;
        if d.is_empty() {
            return Err(stuck(&conf.term));
        }
        res.max_probability_defect = res.max_probability_defect.max((d.total() - 1.0).abs());
        for (q, next) in &d.branches {
            if let Some((t, aux)) = &expected {
                if let Err(v) = wf_config(next, t, aux) {
                    return Err(Error::Internal(format!("subject reduction fails: {conf} steps to {next}: {v}")));
                }
            }
            if opts.trace {
                res.trace.push(TraceStep { from: conf.clone(), probability: *q, to: next.clone() });
            }
        }
        match &mut rng {
            Some(rng) => {
                let r: f64 = rng.random::<f64>() * d.total();
                let mut acc = 0.0;
                let last = d.branches.len() - 1;
                let idx = d.branches.iter().position(|(q, _)| {
                    acc += q;
                    r < acc
                });
                let (_, next) = d.branches.into_iter().nth(idx.unwrap_or(last)).expect("non-empty");
                frontier.push((1.0, next));
            }
            None => {
                // Reversed so that the first branch is explored first.
                for (q, next) in d.branches.into_iter().rev() {
                    frontier.push((p * q, next));
                }
            }
        }
    }
    res.distribution = Distribution { branches: merge_leaves(leaves)? };
    Ok(res)
}

/// Renames linking variables to `%0, %1, ...` in block order.
pub fn canonical_names(c: &Configuration) -> Configuration {
    let mut lk = c.linking.clone();
    let mut sigma = Vec::new();
    for (k, b) in lk.blocks.iter_mut().enumerate() {
        if let Some(x) = &b.var {
            let new = format!("%{k}");
            sigma.push((x.clone(), MainTerm::Var(new.clone())));
            b.var = Some(new);
        }
    }
    Configuration { state: c.state.clone(), linking: lk, term: substitute_main(&c.term, &sigma) }
}

/// Sums the probabilities of leaves equal up to renaming.
fn merge_leaves(leaves: Vec<(f64, Configuration)>) -> Result<Vec<(f64, Configuration)>> {
    let tol = eps().sqrt().max(eps() * 10.0);
    let mut out: Vec<(f64, Configuration, NormalValue)> = Vec::new();
    for (p, c) in leaves {
        let c = canonical_names(&c);
        let v = c.normal_state()?;
        match out.iter_mut().find(|(_, d, w)| d.linking == c.linking && d.term == c.term && w.approx_eq(&v, tol)) {
            Some(slot) => slot.0 += p,
            None => out.push((p, c, v)),
        }
    }
    Ok(out.into_iter().map(|(p, c, _)| (p, c)).collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::main_core::tests::{bell_s, q2, tele};
    use crate::pure_check::tests::{c, cnot, h, had};
    use crate::pure_core::UnitaryExpr;

    pub fn ket(bits: &[u8]) -> PureTerm {
        PureTerm::tuple(bits.iter().map(|b| if *b == 0 { PureTerm::ket0() } else { PureTerm::ket1() }).collect())
    }

    /// `1/sqrt 3 (|000> + |010> + |011>)`.
    pub fn phi() -> PureTerm {
        let a = c(1.0 / 3f64.sqrt());
        PureTerm::LinComb(vec![(a, ket(&[0, 0, 0])), (a, ket(&[0, 1, 0])), (a, ket(&[0, 1, 1]))])
    }

    /// `let B(x (x) y) = pure(phi) in x (x) meas(y)`.
    pub fn meas_third() -> MainTerm {
        MainTerm::let_pair_bang(
            "x",
            "y",
            MainTerm::Pure(phi()),
            MainTerm::pair(MainTerm::var("x"), MainTerm::meas(MainTerm::var("y"))),
        )
    }

    /// The walk unitaries on a cycle of ten nodes.
    pub fn walk_step() -> UnitaryExpr {
        let y = || PureTerm::var("y");
        let shifted = |k| PureTerm::shifted(y(), k);
        let mut u1 = Vec::new();
        for n in 0..5 {
            u1.push((PureTerm::nat(2 * n), PureTerm::nat(2 * n + 1)));
            u1.push((PureTerm::nat(2 * n + 1), PureTerm::nat(2 * n)));
        }
        u1.push((shifted(10), shifted(10)));
        let mut u2 = vec![(PureTerm::nat(0), PureTerm::nat(9))];
        for n in 0..4 {
            u2.push((PureTerm::nat(2 * n + 2), PureTerm::nat(2 * n + 1)));
            u2.push((PureTerm::nat(2 * n + 1), PureTerm::nat(2 * n + 2)));
        }
        u2.push((PureTerm::nat(9), PureTerm::nat(0)));
        u2.push((shifted(10), shifted(10)));
        let cnot_nat = UnitaryExpr::qif(UnitaryExpr::Clauses(u1), UnitaryExpr::Clauses(u2));
        UnitaryExpr::compose(cnot_nat, UnitaryExpr::tensor(had(), UnitaryExpr::identity()))
    }

    /// `(\z. let B(x1 (x) x2) = U[S^k](z) in x1 (x) meas(x2)) pure(|0> (x) |0>)`.
    pub fn walk(k: usize) -> MainTerm {
        let s = (1..k).fold(walk_step(), |acc, _| UnitaryExpr::compose(walk_step(), acc));
        let body = MainTerm::let_pair_bang(
            "x1",
            "x2",
            MainTerm::unapply(s, MainTerm::var("z")),
            MainTerm::pair(MainTerm::var("x1"), MainTerm::meas(MainTerm::var("x2"))),
        );
        MainTerm::app(MainTerm::lam("z", body), MainTerm::Pure(PureTerm::pair(PureTerm::ket0(), PureTerm::Zero)))
    }

    fn exhaustive(m: MainTerm) -> RunResult {
        let opts = RunOptions { check_wf: true, ..RunOptions::default() };
        run(&Configuration::initial(m), &opts).unwrap()
    }

    #[test]
    fn well_formedness_examples() {
        let bell = PureTerm::LinComb(vec![(c(h()), ket(&[0, 0])), (c(h()), ket(&[1, 1]))]);
        let state = PureTerm::pair(bell, PureTerm::ket0());
        let q = PureType::qbit();
        let lk = BlockLinking {
            input_types: vec![q.clone(), q.clone(), q.clone()],
            blocks: vec![
                Block { var: Some("x".into()), shape: Bracket::pair(Bracket::Leaf(0), Bracket::Leaf(1)) },
                Block { var: Some("y".into()), shape: Bracket::Leaf(2) },
            ],
        };
        let conf = Configuration::new(state, lk, MainTerm::pair(MainTerm::var("x"), MainTerm::var("y")));
        let ty = MainType::tensor(MainType::BOp(q2()), MainType::qbit());
        assert_eq!(wf_config(&conf, &ty, &[]), Ok(()));

        let trivial = Configuration::initial(MainTerm::Pure(PureTerm::ket0()));
        assert_eq!(wf_config(&trivial, &MainType::qbit(), &[]), Ok(()));

        let lk = BlockLinking::identity(vec![q.clone()], &["x"]);
        let unbound = Configuration::new(PureTerm::ket0(), lk, MainTerm::var("y"));
        assert!(matches!(wf_config(&unbound, &MainType::qbit(), &[]), Err(WfViolation::Term(_))));

        let aux = BlockLinking { input_types: vec![q.clone()], blocks: vec![Block { var: None, shape: Bracket::Leaf(0) }] };
        let conf = Configuration::new(PureTerm::ket0(), aux, MainTerm::Star);
        assert_eq!(wf_config(&conf, &MainType::Unit, std::slice::from_ref(&q)), Ok(()));
        assert!(matches!(wf_config(&conf, &MainType::Unit, &[]), Err(WfViolation::Auxiliary(_))));
    }

    #[test]
    fn measurement_example() {
        let r = exhaustive(meas_third());
        let mut leaves = r.distribution.branches.clone();
        leaves.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        assert_eq!(leaves.len(), 2);
        assert!((leaves[0].0 - 2.0 / 3.0).abs() < 1e-9);
        assert!((leaves[1].0 - 1.0 / 3.0).abs() < 1e-9);
        let want0 = NormalValue::from_entries(vec![(c(h()), ket(&[0, 0])), (c(h()), ket(&[0, 1]))]);
        assert!(leaves[0].1.normal_state().unwrap().approx_eq(&want0, 1e-9));
        assert_eq!(leaves[0].1.term, MainTerm::pair(MainTerm::var("%0"), MainTerm::inl(MainTerm::Star)));
        let want1 = NormalValue::basis(ket(&[0, 1]));
        assert!(leaves[1].1.normal_state().unwrap().approx_eq(&want1, 1e-9));
        assert_eq!(leaves[1].1.term, MainTerm::pair(MainTerm::var("%0"), MainTerm::inr(MainTerm::Star)));
    }

    #[test]
    fn bell_state_example() {
        let r = exhaustive(bell_s());
        assert_eq!(r.distribution.branches.len(), 1);
        let (p, leaf) = &r.distribution.branches[0];
        assert!((p - 1.0).abs() < 1e-12);
        let want = NormalValue::from_entries(vec![(c(h()), ket(&[0, 0])), (c(h()), ket(&[1, 1]))]);
        let got = crate::pure_eval::apply_unitary(&leaf.linking.unitary().unwrap(), &leaf.normal_state().unwrap()).unwrap();
        assert!(got.approx_eq(&want, 1e-9), "{got}");
        assert_eq!(leaf.term, MainTerm::var("%0"));
    }

    #[test]
    fn walk_example() {
        let r = exhaustive(walk(1));
        let mut terms: Vec<(f64, String)> = r.distribution.branches.iter().map(|(p, c)| (*p, c.term.to_string())).collect();
        terms.sort_by(|a, b| a.1.cmp(&b.1));
        assert_eq!(terms.len(), 2);
        assert_eq!(terms[0].1, "%0 (x) 1");
        assert_eq!(terms[1].1, "%0 (x) 9");
        for (p, _) in terms {
            assert!((p - 0.5).abs() < 1e-9);
        }
        for k in 2..=3 {
            let r = exhaustive(walk(k));
            assert!((r.distribution.total() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn teleportation_of_plus() {
        let plus = PureTerm::LinComb(vec![(c(h()), PureTerm::ket0()), (c(h()), PureTerm::ket1())]);
        let m = MainTerm::app(tele(), MainTerm::Pure(plus));
        let r = exhaustive(m);
        let leaves = &r.distribution.branches;
        // The four measurement branches end in the same configuration.
        assert_eq!(leaves.len(), 1, "{leaves:?}");
        for (p, leaf) in leaves {
            assert!((p - 1.0).abs() < 1e-9);
            assert_eq!(leaf.linking.input_types, vec![PureType::qbit()]);
            let v = leaf.normal_state().unwrap();
            let want = NormalValue::from_entries(vec![(c(h()), PureTerm::ket0()), (c(h()), PureTerm::ket1())]);
            assert!(v.approx_eq(&want, 1e-9), "{v}");
        }
    }

    #[test]
    fn unitary_changing_type_merges_factors() {
        // A unitary from qbit (x) qbit to qbit (+) qbit applied to a block
        // whose factors are interleaved with another block.
        let iso = UnitaryExpr::Clauses(vec![
            (PureTerm::pair(PureTerm::ket0(), PureTerm::var("a")), PureTerm::inl(PureTerm::var("a"))),
            (PureTerm::pair(PureTerm::ket1(), PureTerm::var("b")), PureTerm::inr(PureTerm::var("b"))),
        ]);
        let q = PureType::qbit();
        let lk = BlockLinking {
            input_types: vec![q.clone(), q.clone(), q.clone()],
            blocks: vec![
                Block { var: Some("z".into()), shape: Bracket::pair(Bracket::Leaf(0), Bracket::Leaf(2)) },
                Block { var: Some("w".into()), shape: Bracket::Leaf(1) },
            ],
        };
        let term = MainTerm::pair(MainTerm::meas(MainTerm::unapply(iso, MainTerm::var("z"))), MainTerm::meas(MainTerm::var("w")));
        let conf = Configuration::new(ket(&[1, 0, 1]), lk, term);
        let opts = RunOptions { check_wf: true, ..RunOptions::default() };
        let r = run(&conf, &opts).unwrap();
        assert_eq!(r.distribution.branches.len(), 1);
        let want = MainTerm::pair(MainTerm::inr(MainTerm::inr(MainTerm::Star)), MainTerm::inl(MainTerm::Star));
        assert_eq!(r.distribution.branches[0].1.term, want);
    }

    #[test]
    fn sampling_is_deterministic() {
        let opts = |seed| RunOptions { mode: Mode::Sample(seed), ..RunOptions::default() };
        let conf = Configuration::initial(meas_third());
        let a = run(&conf, &opts(7)).unwrap();
        let b = run(&conf, &opts(7)).unwrap();
        assert_eq!(a.distribution.branches[0].1, b.distribution.branches[0].1);
        let outcomes: BTreeSet<String> =
            (0..40).map(|s| run(&conf, &opts(s)).unwrap().distribution.branches[0].1.term.to_string()).collect();
        assert_eq!(outcomes.len(), 2);
    }

    #[test]
    fn value_configuration_has_no_successor() {
        let conf = Configuration::new(NormalValue::basis(PureTerm::ket0()).to_term(), BlockLinking::identity(vec![PureType::qbit()], &["x"]), MainTerm::var("x"));
        assert!(reduce_sv(&conf).unwrap().is_empty());
    }

    #[test]
    fn every_step_preserves_types() {
        let conf = Configuration::initial(MainTerm::app(
            MainTerm::lam("q", MainTerm::unapply(cnot(), MainTerm::var("q"))),
            MainTerm::Pure(ket(&[1, 0])),
        ));
        let mut cur = conf.normalized().unwrap();
        while !cur.is_value() {
            let d = reduce_sv(&cur).unwrap();
            for (_, next) in &d.branches {
                assert!(check_subject_reduction(&cur, next).unwrap());
            }
            cur = d.branches[0].1.clone();
        }
        assert!(cur.normal_state().unwrap().approx_eq(&NormalValue::basis(ket(&[1, 1])), 1e-12));
    }
}
