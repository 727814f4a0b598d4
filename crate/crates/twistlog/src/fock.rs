//! Truncated highest-weight modules as polynomial spaces.  Basis monomials in
//! the creation variables x_{j,n} are enumerated up to an energy cutoff D plus
//! a degree cap Z on zero-energy variables; modes act by the explicit
//! multiplication / differentiation tables of the four block cases.
//!
//! Truncation is tracked per operator column: a column is either the exact
//! image of its basis monomial (the true module image lies inside the
//! truncated basis) or flagged as truncated.  Applying an operator to a vector
//! supported on a truncated column is an error, never a silent drop.

use crate::scalar::{coset_rep, rat, Rat, Scalar};
use crate::twist::{BlockKind, TwistPair};
use crate::{Error, Result};
use num::integer::lcm;
use num::Zero;
use std::collections::{BTreeMap, HashMap};

/// One orthogonal block of the twisted space together with its
/// highest-weight data.  The degenerate variants carry the extra parameters
/// that label the zero-mode module.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockConfig {
    /// Even-dimensional block, alpha0 strictly between -1 and 0.
    Even { ell: u32, alpha0: Rat },
    /// Even-dimensional block, alpha0 = 0; zero modes act through a1, a2.
    EvenZero { ell: u32, a1: Rat, a2: Rat },
    /// Odd-dimensional block, alpha0 = -1/2.
    Odd { ell: u32 },
    /// Odd-dimensional block, alpha0 = 0; zero modes act through a.
    OddZero { ell: u32, a: Rat },
}

impl BlockConfig {
    pub fn kind(&self) -> BlockKind {
        match self {
            BlockConfig::Even { .. } | BlockConfig::EvenZero { .. } => BlockKind::Even,
            BlockConfig::Odd { .. } | BlockConfig::OddZero { .. } => BlockKind::Odd,
        }
    }

    pub fn ell(&self) -> u32 {
        match self {
            BlockConfig::Even { ell, .. }
            | BlockConfig::EvenZero { ell, .. }
            | BlockConfig::Odd { ell }
            | BlockConfig::OddZero { ell, .. } => *ell,
        }
    }

    pub fn alpha0(&self) -> Rat {
        match self {
            BlockConfig::Even { alpha0, .. } => *alpha0,
            BlockConfig::Odd { .. } => rat(-1, 2),
            BlockConfig::EvenZero { .. } | BlockConfig::OddZero { .. } => Rat::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind() {
            BlockKind::Even => 2 * self.ell() as usize,
            BlockKind::Odd => 2 * self.ell() as usize - 1,
        }
    }
}

/// Block list plus truncation data; validated at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleSpec {
    blocks: Vec<BlockConfig>,
    cutoff: Rat,
    zero_cap: u32,
    conductor: u32,
}

impl ModuleSpec {
    pub fn new(blocks: Vec<BlockConfig>, cutoff: Rat, zero_cap: u32) -> Result<ModuleSpec> {
        let conductor = Self::minimal_conductor(&blocks);
        Self::with_conductor(blocks, cutoff, zero_cap, conductor)
    }

    /// Conductor override; must be a multiple of 4 and of every alpha0
    /// denominator so that all needed roots of unity exist.
    pub fn with_conductor(
        blocks: Vec<BlockConfig>,
        cutoff: Rat,
        zero_cap: u32,
        conductor: u32,
    ) -> Result<ModuleSpec> {
        if blocks.is_empty() {
            return Err(Error::InvalidSpec("no blocks declared".into()));
        }
        for b in &blocks {
            if b.ell() < 1 {
                return Err(Error::InvalidSpec("block size ell must be at least 1".into()));
            }
            if let BlockConfig::Even { alpha0, .. } = b {
                if *alpha0 >= Rat::zero() || *alpha0 <= rat(-1, 1) {
                    return Err(Error::InvalidSpec(format!(
                        "even block exponent {alpha0} outside (-1, 0); use the degenerate variant for 0"
                    )));
                }
            }
        }
        if cutoff < Rat::zero() {
            return Err(Error::InvalidSpec("negative energy cutoff".into()));
        }
        let needed = Self::minimal_conductor(&blocks);
        if conductor % needed != 0 {
            return Err(Error::InvalidSpec(format!(
                "conductor {conductor} is not a multiple of {needed}"
            )));
        }
        Ok(ModuleSpec {
            blocks,
            cutoff,
            zero_cap,
            conductor,
        })
    }

    fn minimal_conductor(blocks: &[BlockConfig]) -> u32 {
        let mut m: u32 = 4;
        for b in blocks {
            m = lcm(m, *b.alpha0().denom() as u32);
        }
        m
    }

    pub fn blocks(&self) -> &[BlockConfig] {
        &self.blocks
    }

    pub fn cutoff(&self) -> Rat {
        self.cutoff
    }

    pub fn zero_cap(&self) -> u32 {
        self.zero_cap
    }

    pub fn conductor(&self) -> u32 {
        self.conductor
    }

    pub fn dim_h(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    /// The underlying twisted quadratic space, blocks in declaration order.
    pub fn twist_pair(&self) -> TwistPair {
        let parts: Vec<TwistPair> = self
            .blocks
            .iter()
            .map(|b| match b.kind() {
                BlockKind::Even => TwistPair::even_block(b.ell(), b.alpha0()),
                BlockKind::Odd => TwistPair::odd_block(b.ell(), b.alpha0()),
            })
            .map(|r| r.expect("validated block data"))
            .collect();
        TwistPair::direct_sum(&parts).expect("validated block data")
    }

    pub fn local_to_global(&self, block: usize, j: usize) -> usize {
        let offset: usize = self.blocks[..block].iter().map(|b| b.dim()).sum();
        offset + j - 1
    }

    pub fn global_to_local(&self, global: usize) -> (usize, usize) {
        let mut g = global;
        for (b, cfg) in self.blocks.iter().enumerate() {
            if g < cfg.dim() {
                return (b, g + 1);
            }
            g -= cfg.dim();
        }
        panic!("global index {global} out of range");
    }

    /// Coset of exponents admitted by basis vector j of the given block,
    /// represented in (-1, 0].
    pub fn mode_coset(&self, block: usize, j: usize) -> Rat {
        let cfg = &self.blocks[block];
        match cfg {
            BlockConfig::Even { ell, alpha0 } => {
                if j <= *ell as usize {
                    *alpha0
                } else {
                    coset_rep(-*alpha0)
                }
            }
            BlockConfig::Odd { .. } => rat(-1, 2),
            BlockConfig::EvenZero { .. } | BlockConfig::OddZero { .. } => Rat::zero(),
        }
    }

    /// Whether (index, level) labels a creation variable of the full
    /// (untruncated) module.
    pub fn is_module_variable(&self, v: VarId) -> bool {
        if v.block >= self.blocks.len() {
            return false;
        }
        let cfg = &self.blocks[v.block];
        let l = cfg.ell() as usize;
        let d = cfg.dim();
        if v.index < 1 || v.index > d {
            return false;
        }
        match cfg {
            BlockConfig::Even { .. } => v.index <= l || v.level >= 1,
            BlockConfig::Odd { .. } => true,
            BlockConfig::EvenZero { .. } | BlockConfig::OddZero { .. } => {
                v.level >= 1 || v.index <= l - 1
            }
        }
    }
}

/// Creation variable x_{index, level} of one block; index is 1-based to match
/// the display conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId {
    pub block: usize,
    pub index: usize,
    pub level: u32,
}

/// Energy of a creation variable: minus the t-exponent of the loop element it
/// stands for.
pub fn var_energy(spec: &ModuleSpec, v: VarId) -> Rat {
    let cfg = &spec.blocks()[v.block];
    let n = Rat::from_integer(v.level as i64);
    match cfg {
        BlockConfig::Even { ell, alpha0 } => {
            if v.index <= *ell as usize {
                n - *alpha0
            } else {
                n + *alpha0
            }
        }
        BlockConfig::Odd { .. } => n + rat(1, 2),
        BlockConfig::EvenZero { .. } | BlockConfig::OddZero { .. } => n,
    }
}

/// The t-exponent of the loop element creating this variable.
pub fn creation_exponent(spec: &ModuleSpec, v: VarId) -> Rat {
    -var_energy(spec, v)
}

/// Sorted multiset of creation variables; the vacuum is the empty product.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial {
    factors: Vec<(VarId, u32)>,
}

impl Monomial {
    pub fn one() -> Monomial {
        Monomial { factors: Vec::new() }
    }

    pub fn from_factors(mut factors: Vec<(VarId, u32)>) -> Monomial {
        factors.retain(|(_, m)| *m > 0);
        factors.sort();
        let mut merged: Vec<(VarId, u32)> = Vec::with_capacity(factors.len());
        for (v, m) in factors {
            match merged.last_mut() {
                Some((lv, lm)) if *lv == v => *lm += m,
                _ => merged.push((v, m)),
            }
        }
        Monomial { factors: merged }
    }

    pub fn factors(&self) -> &[(VarId, u32)] {
        &self.factors
    }

    pub fn is_vacuum(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn degree_of(&self, v: VarId) -> u32 {
        self.factors
            .iter()
            .find(|(w, _)| *w == v)
            .map(|(_, m)| *m)
            .unwrap_or(0)
    }

    pub fn total_degree(&self) -> u32 {
        self.factors.iter().map(|(_, m)| m).sum()
    }

    pub fn energy(&self, spec: &ModuleSpec) -> Rat {
        self.factors
            .iter()
            .map(|(v, m)| var_energy(spec, *v) * Rat::from_integer(*m as i64))
            .sum()
    }

    pub fn zero_degree(&self, spec: &ModuleSpec) -> u32 {
        self.factors
            .iter()
            .filter(|(v, _)| var_energy(spec, *v).is_zero())
            .map(|(_, m)| m)
            .sum()
    }

    pub fn mul_var(&self, v: VarId) -> Monomial {
        let mut factors = self.factors.clone();
        match factors.iter_mut().find(|(w, _)| *w == v) {
            Some((_, m)) => *m += 1,
            None => {
                factors.push((v, 1));
                factors.sort();
            }
        }
        Monomial { factors }
    }

    /// Divide by one power of v; None when v does not occur.
    pub fn div_var(&self, v: VarId) -> Option<Monomial> {
        let pos = self.factors.iter().position(|(w, _)| *w == v)?;
        let mut factors = self.factors.clone();
        if factors[pos].1 == 1 {
            factors.remove(pos);
        } else {
            factors[pos].1 -= 1;
        }
        Some(Monomial { factors })
    }
}

/// All creation variables with energy within the cutoff, ascending.
fn admissible_variables(spec: &ModuleSpec) -> Vec<VarId> {
    let d = spec.cutoff();
    let mut out = Vec::new();
    // highest level with energy <= d given energy = level + base
    let max_level = |base: Rat, min_level: u32| -> Option<(u32, u32)> {
        let top = d - base;
        if top < Rat::from_integer(min_level as i64) {
            None
        } else {
            Some((min_level, top.floor().to_integer() as u32))
        }
    };
    for (b, cfg) in spec.blocks().iter().enumerate() {
        let l = cfg.ell() as usize;
        match cfg {
            BlockConfig::Even { alpha0, .. } => {
                for index in 1..=2 * l {
                    let (base, min_level) = if index <= l {
                        (-*alpha0, 0)
                    } else {
                        (*alpha0, 1)
                    };
                    if let Some((lo, hi)) = max_level(base, min_level) {
                        for level in lo..=hi {
                            out.push(VarId { block: b, index, level });
                        }
                    }
                }
            }
            BlockConfig::Odd { .. } => {
                for index in 1..=2 * l - 1 {
                    if let Some((lo, hi)) = max_level(rat(1, 2), 0) {
                        for level in lo..=hi {
                            out.push(VarId { block: b, index, level });
                        }
                    }
                }
            }
            BlockConfig::EvenZero { .. } | BlockConfig::OddZero { .. } => {
                let dim = cfg.dim();
                if spec.zero_cap() >= 1 {
                    for index in 1..l {
                        out.push(VarId { block: b, index, level: 0 });
                    }
                }
                for index in 1..=dim {
                    if let Some((lo, hi)) = max_level(Rat::zero(), 1) {
                        for level in lo..=hi {
                            out.push(VarId { block: b, index, level });
                        }
                    }
                }
            }
        }
    }
    out.sort();
    out
}

/// Enumerated basis: all monomials within the caps, sorted by
/// (energy, variable-lexicographic), vacuum first.
pub struct FockBasis {
    spec: ModuleSpec,
    monomials: Vec<Monomial>,
    energies: Vec<Rat>,
    index: HashMap<Monomial, usize>,
}

impl FockBasis {
    pub fn new(spec: ModuleSpec) -> FockBasis {
        let vars = admissible_variables(&spec);
        let mut raw = Vec::new();
        let mut current: Vec<(VarId, u32)> = Vec::new();
        enumerate(
            &spec,
            &vars,
            0,
            spec.cutoff(),
            spec.zero_cap(),
            &mut current,
            &mut raw,
        );
        let mut keyed: Vec<(Rat, Monomial)> = raw
            .into_iter()
            .map(|m| (m.energy(&spec), m))
            .collect();
        keyed.sort();
        let monomials: Vec<Monomial> = keyed.iter().map(|(_, m)| m.clone()).collect();
        let energies: Vec<Rat> = keyed.iter().map(|(e, _)| *e).collect();
        let index = monomials
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        FockBasis {
            spec,
            monomials,
            energies,
            index,
        }
    }

    pub fn spec(&self) -> &ModuleSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn monomial(&self, i: usize) -> &Monomial {
        &self.monomials[i]
    }

    pub fn energy(&self, i: usize) -> Rat {
        self.energies[i]
    }

    pub fn index_of(&self, m: &Monomial) -> Option<usize> {
        self.index.get(m).copied()
    }

    pub fn vacuum(&self) -> usize {
        0
    }

    /// Distinct energies in ascending order.
    pub fn levels(&self) -> Vec<Rat> {
        let mut out: Vec<Rat> = Vec::new();
        for e in &self.energies {
            if out.last() != Some(e) {
                out.push(*e);
            }
        }
        out
    }

    pub fn indices_at_energy(&self, e: Rat) -> Vec<usize> {
        (0..self.len()).filter(|i| self.energies[*i] == e).collect()
    }
}

fn enumerate(
    spec: &ModuleSpec,
    vars: &[VarId],
    pos: usize,
    energy_left: Rat,
    zero_left: u32,
    current: &mut Vec<(VarId, u32)>,
    out: &mut Vec<Monomial>,
) {
    if pos == vars.len() {
        out.push(Monomial {
            factors: current.clone(),
        });
        return;
    }
    let v = vars[pos];
    let e = var_energy(spec, v);
    let max_mult = if e.is_zero() {
        zero_left
    } else {
        (energy_left / e).floor().to_integer() as u32
    };
    enumerate(spec, vars, pos + 1, energy_left, zero_left, current, out);
    for mult in 1..=max_mult {
        current.push((v, mult));
        let (el, zl) = if e.is_zero() {
            (energy_left, zero_left - mult)
        } else {
            (energy_left - e * Rat::from_integer(mult as i64), zero_left)
        };
        enumerate(spec, vars, pos + 1, el, zl, current, out);
        current.pop();
    }
}

/// Sparse vector in the monomial basis; zero coefficients are never stored.
pub type StateVec = BTreeMap<usize, Scalar>;

pub fn state_insert(v: &mut StateVec, i: usize, c: &Scalar) {
    if c.is_zero() {
        return;
    }
    let entry = v.entry(i).or_insert_with(Scalar::zero);
    *entry = entry.add(c);
    if entry.is_zero() {
        v.remove(&i);
    }
}

pub fn state_add_scaled(dst: &mut StateVec, src: &StateVec, c: &Scalar) {
    for (i, s) in src {
        state_insert(dst, *i, &s.mul(c));
    }
}

pub fn state_single(i: usize) -> StateVec {
    let mut v = StateVec::new();
    v.insert(i, Scalar::one());
    v
}

/// One operator column: either the exact image of the basis monomial, or the
/// marker that the true image leaves the truncated basis.
#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Exact(Vec<(usize, Scalar)>),
    Truncated,
}

/// Column-sparse operator with a declared energy shift.  Every exact entry
/// connects monomials whose energies differ by exactly the shift.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    delta_e: Rat,
    cols: Vec<Column>,
}

fn finish_column(entries: BTreeMap<usize, Scalar>) -> Column {
    Column::Exact(
        entries
            .into_iter()
            .filter(|(_, c)| !c.is_zero())
            .collect(),
    )
}

impl SparseOperator {
    pub fn zero(dim: usize, delta_e: Rat) -> SparseOperator {
        SparseOperator {
            dim,
            delta_e,
            cols: vec![Column::Exact(Vec::new()); dim],
        }
    }

    pub fn identity(dim: usize) -> SparseOperator {
        Self::constant(dim, &Scalar::one())
    }

    pub fn constant(dim: usize, c: &Scalar) -> SparseOperator {
        let cols = (0..dim)
            .map(|i| {
                if c.is_zero() {
                    Column::Exact(Vec::new())
                } else {
                    Column::Exact(vec![(i, c.clone())])
                }
            })
            .collect();
        SparseOperator {
            dim,
            delta_e: Rat::zero(),
            cols,
        }
    }

    pub fn from_columns(dim: usize, delta_e: Rat, cols: Vec<Column>) -> SparseOperator {
        assert_eq!(cols.len(), dim);
        SparseOperator { dim, delta_e, cols }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta_e(&self) -> Rat {
        self.delta_e
    }

    pub fn column(&self, i: usize) -> &Column {
        &self.cols[i]
    }

    pub fn columns(&self) -> impl Iterator<Item = &Column> {
        self.cols.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.cols
            .iter()
            .all(|c| matches!(c, Column::Exact(es) if es.is_empty()))
    }

    pub fn truncated_count(&self) -> usize {
        self.cols
            .iter()
            .filter(|c| matches!(c, Column::Truncated))
            .count()
    }

    pub fn scale(&self, s: &Scalar) -> SparseOperator {
        if s.is_zero() {
            return SparseOperator::zero(self.dim, self.delta_e);
        }
        let cols = self
            .cols
            .iter()
            .map(|c| match c {
                Column::Truncated => Column::Truncated,
                Column::Exact(es) => Column::Exact(
                    es.iter().map(|(r, v)| (*r, v.mul(s))).collect(),
                ),
            })
            .collect();
        SparseOperator {
            dim: self.dim,
            delta_e: self.delta_e,
            cols,
        }
    }

    pub fn neg(&self) -> SparseOperator {
        self.scale(&Scalar::from_rat(rat(-1, 1)))
    }

    pub fn add(&self, other: &SparseOperator) -> Result<SparseOperator> {
        assert_eq!(self.dim, other.dim);
        if self.delta_e != other.delta_e {
            // adding a zero operator is harmless regardless of its label
            if other.is_zero() {
                return Ok(self.clone());
            }
            if self.is_zero() {
                return Ok(other.clone());
            }
            return Err(Error::EnergyShiftMismatch {
                left: self.delta_e,
                right: other.delta_e,
            });
        }
        let cols = self
            .cols
            .iter()
            .zip(other.cols.iter())
            .map(|(a, b)| match (a, b) {
                (Column::Truncated, _) | (_, Column::Truncated) => Column::Truncated,
                (Column::Exact(ea), Column::Exact(eb)) => {
                    let mut acc: BTreeMap<usize, Scalar> = BTreeMap::new();
                    for (r, c) in ea.iter().chain(eb.iter()) {
                        let e = acc.entry(*r).or_insert_with(Scalar::zero);
                        *e = e.add(c);
                    }
                    finish_column(acc)
                }
            })
            .collect();
        Ok(SparseOperator {
            dim: self.dim,
            delta_e: self.delta_e,
            cols,
        })
    }

    pub fn sub(&self, other: &SparseOperator) -> Result<SparseOperator> {
        self.add(&other.neg())
    }

    /// self after other (matrix product self * other).
    pub fn compose(&self, other: &SparseOperator) -> SparseOperator {
        assert_eq!(self.dim, other.dim);
        let cols = other
            .cols
            .iter()
            .map(|c| match c {
                Column::Truncated => Column::Truncated,
                Column::Exact(es) => {
                    let mut acc: BTreeMap<usize, Scalar> = BTreeMap::new();
                    for (mid, s) in es {
                        match &self.cols[*mid] {
                            Column::Truncated => return Column::Truncated,
                            Column::Exact(inner) => {
                                for (r, v) in inner {
                                    let e = acc.entry(*r).or_insert_with(Scalar::zero);
                                    *e = e.add(&v.mul(s));
                                }
                            }
                        }
                    }
                    finish_column(acc)
                }
            })
            .collect();
        SparseOperator {
            dim: self.dim,
            delta_e: self.delta_e + other.delta_e,
            cols,
        }
    }

    pub fn commutator(&self, other: &SparseOperator) -> SparseOperator {
        let ab = self.compose(other);
        let ba = other.compose(self);
        ab.sub(&ba).expect("equal shifts by construction")
    }

    /// Column-wise merge of two evaluation orders of the same product of
    /// commuting factors: keeps the exact column where only one order stayed
    /// inside the basis.  Panics if both orders are exact but disagree, which
    /// would mean the factors do not commute.
    pub fn merge_equal(&self, other: &SparseOperator) -> SparseOperator {
        assert_eq!(self.dim, other.dim);
        assert_eq!(self.delta_e, other.delta_e, "merging differently graded operators");
        let cols = self
            .cols
            .iter()
            .zip(other.cols.iter())
            .map(|(a, b)| match (a, b) {
                (Column::Exact(ea), Column::Exact(eb)) => {
                    assert!(ea == eb, "merge of disagreeing exact columns");
                    Column::Exact(ea.clone())
                }
                (Column::Exact(ea), Column::Truncated) => Column::Exact(ea.clone()),
                (Column::Truncated, Column::Exact(eb)) => Column::Exact(eb.clone()),
                (Column::Truncated, Column::Truncated) => Column::Truncated,
            })
            .collect();
        SparseOperator {
            dim: self.dim,
            delta_e: self.delta_e,
            cols,
        }
    }

    pub fn apply(&self, v: &StateVec) -> Result<StateVec> {
        let mut out = StateVec::new();
        for (i, c) in v {
            match &self.cols[*i] {
                Column::Truncated => {
                    return Err(Error::WindowExceeded(format!(
                        "operator column {i} is truncated at this cutoff"
                    )))
                }
                Column::Exact(es) => {
                    for (r, s) in es {
                        state_insert(&mut out, *r, &s.mul(c));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Multiplication by a creation variable.
    pub fn multiplication(basis: &FockBasis, v: VarId) -> SparseOperator {
        let spec = basis.spec();
        // A variable beyond the retained energy range yields all-Truncated
        // columns: the image lies entirely outside the basis.
        let delta_e = var_energy(spec, v);
        let cols = (0..basis.len())
            .map(|i| {
                let target = basis.monomial(i).mul_var(v);
                match basis.index_of(&target) {
                    Some(t) => Column::Exact(vec![(t, Scalar::one())]),
                    None => Column::Truncated,
                }
            })
            .collect();
        SparseOperator {
            dim: basis.len(),
            delta_e,
            cols,
        }
    }

    /// Sum of scaled partial derivatives; all variables must carry the same
    /// energy so the result is homogeneous.
    pub fn derivative_combo(basis: &FockBasis, terms: &[(VarId, Scalar)]) -> SparseOperator {
        let spec = basis.spec();
        assert!(!terms.is_empty());
        let e = var_energy(spec, terms[0].0);
        for (v, _) in terms {
            // Variables beyond the retained range never divide a basis
            // monomial, so they contribute the zero derivative.
            assert_eq!(var_energy(spec, *v), e, "mixed-energy derivative combo");
        }
        let cols = (0..basis.len())
            .map(|i| {
                let mono = basis.monomial(i);
                let mut acc: BTreeMap<usize, Scalar> = BTreeMap::new();
                for (v, c) in terms {
                    let k = mono.degree_of(*v);
                    if k == 0 {
                        continue;
                    }
                    let target = mono.div_var(*v).expect("degree checked");
                    let t = basis
                        .index_of(&target)
                        .expect("divisor of a basis monomial stays in the basis");
                    let entry = acc.entry(t).or_insert_with(Scalar::zero);
                    *entry = entry.add(&c.mul_rat(rat(k as i64, 1)));
                }
                finish_column(acc)
            })
            .collect();
        SparseOperator {
            dim: basis.len(),
            delta_e: -e,
            cols,
        }
    }

    /// Diagonal operator multiplying each monomial by its energy.
    pub fn diagonal_energy(basis: &FockBasis) -> SparseOperator {
        let cols = (0..basis.len())
            .map(|i| {
                let e = basis.energy(i);
                if e.is_zero() {
                    Column::Exact(Vec::new())
                } else {
                    Column::Exact(vec![(i, Scalar::from_rat(e))])
                }
            })
            .collect();
        SparseOperator {
            dim: basis.len(),
            delta_e: Rat::zero(),
            cols,
        }
    }

    /// Exact entries as (row, col, value), column-major order.
    pub fn triplets(&self) -> Vec<(usize, usize, Scalar)> {
        let mut out = Vec::new();
        for (c, col) in self.cols.iter().enumerate() {
            if let Column::Exact(es) = col {
                for (r, v) in es {
                    out.push((*r, c, v.clone()));
                }
            }
        }
        out
    }

    /// Checks the declared energy shift against the basis grading.
    pub fn respects_grading(&self, basis: &FockBasis) -> bool {
        self.cols.iter().enumerate().all(|(c, col)| match col {
            Column::Truncated => true,
            Column::Exact(es) => es
                .iter()
                .all(|(r, _)| basis.energy(*r) - basis.energy(c) == self.delta_e),
        })
    }
}

/// The operator for the loop element v_j t^m on the truncated module, looked
/// up from the case table of the block.  Errors when m is not in the coset of
/// basis vector j.
pub fn mode_action(basis: &FockBasis, block: usize, j: usize, m: Rat) -> Result<SparseOperator> {
    let spec = basis.spec().clone();
    let cfg = spec.blocks()[block].clone();
    let d = cfg.dim();
    if j < 1 || j > d {
        return Err(Error::InvalidSpec(format!(
            "basis index {j} outside block of dimension {d}"
        )));
    }
    let coset = spec.mode_coset(block, j);
    if coset_rep(m) != coset {
        return Err(Error::CosetMismatch { exponent: m, coset });
    }
    let l = cfg.ell() as usize;
    let mult = |index: usize, level: i64| {
        SparseOperator::multiplication(basis, VarId {
            block,
            index,
            level: level as u32,
        })
    };
    let var = |index: usize, level: i64| VarId {
        block,
        index,
        level: level as u32,
    };
    Ok(match cfg {
        BlockConfig::Even { alpha0, .. } => {
            if j <= l {
                let s = (m - alpha0).to_integer();
                if s <= 0 {
                    mult(j, -s)
                } else {
                    let mut terms = vec![(var(2 * l + 1 - j, s), Scalar::from_rat(m))];
                    if j != l {
                        terms.push((var(2 * l - j, s), Scalar::one()));
                    }
                    SparseOperator::derivative_combo(basis, &terms)
                }
            } else {
                let i = j - l;
                let s = (m + alpha0).to_integer();
                if s <= -1 {
                    mult(j, -s)
                } else {
                    let mut terms = vec![(var(l + 1 - i, s), Scalar::from_rat(m))];
                    if i != l {
                        terms.push((var(l - i, s), Scalar::from_rat(rat(-1, 1))));
                    }
                    SparseOperator::derivative_combo(basis, &terms)
                }
            }
        }
        BlockConfig::EvenZero { a1, a2, .. } => {
            let s = m.to_integer();
            if s <= -1 {
                mult(j, -s)
            } else if s >= 1 {
                if j <= l {
                    let mut terms = vec![(var(2 * l + 1 - j, s), Scalar::from_rat(m))];
                    if j != l {
                        terms.push((var(2 * l - j, s), Scalar::one()));
                    }
                    SparseOperator::derivative_combo(basis, &terms)
                } else {
                    let i = j - l;
                    let mut terms = vec![(var(l + 1 - i, s), Scalar::from_rat(m))];
                    if i != l {
                        terms.push((var(l - i, s), Scalar::from_rat(rat(-1, 1))));
                    }
                    SparseOperator::derivative_combo(basis, &terms)
                }
            } else if j <= l - 1 {
                mult(j, 0)
            } else if j == l {
                SparseOperator::constant(basis.len(), &Scalar::from_rat(a1))
            } else if j == 2 * l {
                SparseOperator::constant(basis.len(), &Scalar::from_rat(a2))
            } else {
                SparseOperator::derivative_combo(
                    basis,
                    &[(var(2 * l - j, 0), Scalar::from_rat(rat(-1, 1)))],
                )
            }
        }
        BlockConfig::Odd { .. } => {
            let s = (m + rat(1, 2)).to_integer();
            if s <= 0 {
                mult(j, -s)
            } else {
                let n = s - 1;
                let sign = if j % 2 == 1 { 1 } else { -1 };
                let mut terms = vec![(var(2 * l - j, n), Scalar::from_rat(m))];
                if j != 2 * l - 1 {
                    terms.push((var(2 * l - 1 - j, n), Scalar::from_rat(rat(sign, 1))));
                }
                SparseOperator::derivative_combo(basis, &terms)
            }
        }
        BlockConfig::OddZero { a, .. } => {
            let s = m.to_integer();
            if s <= -1 {
                mult(j, -s)
            } else if s >= 1 {
                let sign = if j % 2 == 1 { 1 } else { -1 };
                let mut terms = vec![(var(2 * l - j, s), Scalar::from_rat(m))];
                if j != 2 * l - 1 {
                    terms.push((var(2 * l - 1 - j, s), Scalar::from_rat(rat(sign, 1))));
                }
                SparseOperator::derivative_combo(basis, &terms)
            } else if j <= l - 1 {
                mult(j, 0)
            } else if j == 2 * l - 1 {
                SparseOperator::constant(basis.len(), &Scalar::from_rat(a))
            } else {
                let sign = if (2 * l - 1 - j) % 2 == 0 { 1 } else { -1 };
                SparseOperator::derivative_combo(
                    basis,
                    &[(var(2 * l - 1 - j, 0), Scalar::from_rat(rat(sign, 1)))],
                )
            }
        }
    })
}

/// Mode of a coordinate vector on the full twisted space: the linear
/// combination of per-index modes.  All indices with nonzero coordinates must
/// admit exponent m.
pub fn mode_of_vector(basis: &FockBasis, coords: &[Scalar], m: Rat) -> Result<SparseOperator> {
    let spec = basis.spec();
    assert_eq!(coords.len(), spec.dim_h());
    let mut out = SparseOperator::zero(basis.len(), -m);
    for (g, c) in coords.iter().enumerate() {
        if c.is_zero() {
            continue;
        }
        let (block, j) = spec.global_to_local(g);
        let op = mode_action(basis, block, j, m)?;
        out = out.add(&op.scale(c))?;
    }
    Ok(out)
}

/// x_to d/d x_from scaled; both variables must carry the same energy, so the
/// result is exact on every column.
fn cross_term(basis: &FockBasis, from: VarId, to: VarId, coeff: Rat) -> SparseOperator {
    debug_assert_eq!(var_energy(basis.spec(), from), var_energy(basis.spec(), to));
    let deriv =
        SparseOperator::derivative_combo(basis, &[(from, Scalar::from_rat(coeff))]);
    SparseOperator::multiplication(basis, to).compose(&deriv)
}

/// The closed-form energy operator: diagonal energy grading, the nilpotent
/// cross terms, and the block constant or zero-mode contribution.
pub fn l0_closed_form(basis: &FockBasis) -> Result<SparseOperator> {
    let spec = basis.spec().clone();
    let d = spec.cutoff();
    let mut op = SparseOperator::diagonal_energy(basis);
    let level_range = |base: Rat, min_level: u32| -> Vec<i64> {
        let top = d - base;
        if top < Rat::from_integer(min_level as i64) {
            Vec::new()
        } else {
            (min_level as i64..=top.floor().to_integer()).collect()
        }
    };
    for (b, cfg) in spec.blocks().iter().enumerate() {
        let l = cfg.ell() as usize;
        let var = |index: usize, level: i64| VarId {
            block: b,
            index,
            level: level as u32,
        };
        match cfg {
            BlockConfig::Even { ell, alpha0 } => {
                for i in 2..=l {
                    for n in level_range(-*alpha0, 0) {
                        op = op.add(&cross_term(basis, var(i - 1, n), var(i, n), rat(-1, 1)))?;
                    }
                    for n in level_range(*alpha0, 1) {
                        op = op.add(&cross_term(
                            basis,
                            var(l + i - 1, n),
                            var(l + i, n),
                            rat(1, 1),
                        ))?;
                    }
                }
                let w0 = -rat(*ell as i64, 2) * (*alpha0 * *alpha0 + *alpha0);
                op = op.add(&SparseOperator::constant(
                    basis.len(),
                    &Scalar::from_rat(w0),
                ))?;
            }
            BlockConfig::Odd { ell } => {
                for i in 2..=2 * l - 1 {
                    let sign = if i % 2 == 1 { 1 } else { -1 };
                    for n in level_range(rat(1, 2), 0) {
                        op = op.add(&cross_term(basis, var(i - 1, n), var(i, n), rat(sign, 1)))?;
                    }
                }
                let w0 = rat(2 * *ell as i64 - 1, 16);
                op = op.add(&SparseOperator::constant(
                    basis.len(),
                    &Scalar::from_rat(w0),
                ))?;
            }
            BlockConfig::EvenZero { .. } | BlockConfig::OddZero { .. } => {
                let dim = cfg.dim();
                for i in 2..=dim {
                    // for even blocks both halves shift independently
                    let in_range = match cfg.kind() {
                        BlockKind::Even => i != l + 1,
                        BlockKind::Odd => true,
                    };
                    if !in_range {
                        continue;
                    }
                    let sign = match cfg.kind() {
                        BlockKind::Even => {
                            if i <= l {
                                -1
                            } else {
                                1
                            }
                        }
                        BlockKind::Odd => {
                            if i % 2 == 1 {
                                1
                            } else {
                                -1
                            }
                        }
                    };
                    for n in level_range(Rat::zero(), 1) {
                        op = op.add(&cross_term(basis, var(i - 1, n), var(i, n), rat(sign, 1)))?;
                    }
                }
                // zero-mode part: half the sum of dual-paired zero modes;
                // both orders agree columnwise because dual pairs commute
                let mut zero_part = SparseOperator::zero(basis.len(), Rat::zero());
                for i in 1..=dim {
                    let dual = match cfg.kind() {
                        BlockKind::Even => 2 * l + 1 - i,
                        BlockKind::Odd => 2 * l - i,
                    };
                    let left = mode_action(basis, b, dual, Rat::zero())?;
                    let right = mode_action(basis, b, i, Rat::zero())?;
                    let term = left.compose(&right).merge_equal(&right.compose(&left));
                    zero_part = zero_part.add(&term)?;
                }
                op = op.add(&zero_part.scale(&Scalar::from_rat(rat(1, 2))))?;
            }
        }
    }
    Ok(op)
}
