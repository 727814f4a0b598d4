//! Twist data for an automorphism phi = sigma * exp(-2*pi*i*N) of a finite
//! dimensional quadratic space: a semisimple part sigma recorded as a rational
//! coset exponent per basis vector, and a nilpotent part N commuting with
//! sigma and skew with respect to the bilinear form.
//!
//! The canonical shapes are indecomposable "even" blocks of dimension 2L and
//! "odd" blocks of dimension 2L-1; arbitrary direct sums of those cover every
//! twist that the Fock construction downstream accepts.

use crate::scalar::{coset_rep, rat, Rat, Scalar, ZetaPoly};
use crate::{Error, Result};
use num::{One, Zero};

/// Dense matrix over `Scalar` acting on the quadratic space.  Dimensions here
/// are tiny (the space is a handful of basis vectors), so no sparsity.
#[derive(Clone, PartialEq)]
pub struct HMatrix {
    n: usize,
    entries: Vec<Scalar>, // row-major
}

impl HMatrix {
    pub fn zero(n: usize) -> HMatrix {
        HMatrix {
            n,
            entries: vec![Scalar::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> HMatrix {
        let mut m = HMatrix::zero(n);
        for i in 0..n {
            m.set(i, i, Scalar::one());
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> &Scalar {
        &self.entries[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Scalar) {
        self.entries[row * self.n + col] = value;
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.is_zero())
    }

    pub fn add(&self, other: &HMatrix) -> HMatrix {
        assert_eq!(self.n, other.n);
        HMatrix {
            n: self.n,
            entries: self
                .entries
                .iter()
                .zip(other.entries.iter())
                .map(|(a, b)| a.add(b))
                .collect(),
        }
    }

    pub fn sub(&self, other: &HMatrix) -> HMatrix {
        self.add(&other.scale(&Scalar::from_rat(rat(-1, 1))))
    }

    pub fn scale(&self, s: &Scalar) -> HMatrix {
        HMatrix {
            n: self.n,
            entries: self.entries.iter().map(|e| e.mul(s)).collect(),
        }
    }

    pub fn mul(&self, other: &HMatrix) -> HMatrix {
        assert_eq!(self.n, other.n);
        let mut out = HMatrix::zero(self.n);
        for i in 0..self.n {
            for k in 0..self.n {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..self.n {
                    let b = other.get(k, j);
                    if b.is_zero() {
                        continue;
                    }
                    let cur = out.get(i, j).add(&a.mul(b));
                    out.set(i, j, cur);
                }
            }
        }
        out
    }

    /// Column vector action: (M a)_i = sum_j M[i][j] a_j.
    pub fn apply(&self, a: &[Scalar]) -> Vec<Scalar> {
        assert_eq!(self.n, a.len());
        (0..self.n)
            .map(|i| {
                let mut acc = Scalar::zero();
                for (j, c) in a.iter().enumerate() {
                    if !c.is_zero() {
                        acc = acc.add(&self.get(i, j).mul(c));
                    }
                }
                acc
            })
            .collect()
    }

    pub fn pow(&self, e: u32) -> HMatrix {
        let mut acc = HMatrix::identity(self.n);
        for _ in 0..e {
            acc = acc.mul(self);
        }
        acc
    }

    /// Determinant by cofactor expansion; fine for the tiny spaces used here.
    pub fn det(&self) -> Scalar {
        match self.n {
            0 => Scalar::one(),
            1 => self.get(0, 0).clone(),
            _ => {
                let mut acc = Scalar::zero();
                for j in 0..self.n {
                    let c = self.get(0, j);
                    if c.is_zero() {
                        continue;
                    }
                    let minor = self.minor(0, j);
                    let term = c.mul(&minor.det());
                    if j % 2 == 0 {
                        acc = acc.add(&term);
                    } else {
                        acc = acc.sub(&term);
                    }
                }
                acc
            }
        }
    }

    fn minor(&self, row: usize, col: usize) -> HMatrix {
        let mut m = HMatrix::zero(self.n - 1);
        let mut r = 0;
        for i in 0..self.n {
            if i == row {
                continue;
            }
            let mut c = 0;
            for j in 0..self.n {
                if j == col {
                    continue;
                }
                m.set(r, c, self.get(i, j).clone());
                c += 1;
            }
            r += 1;
        }
        m
    }
}

impl std::fmt::Debug for HMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{}", self.get(i, j))).collect();
            writeln!(f, "[{}]", row.join(", "))?;
        }
        Ok(())
    }
}

/// Exponential of a nilpotent matrix (finite series).
pub fn exp_nilpotent(n: &HMatrix) -> Result<HMatrix> {
    let d = n.dim() as u32;
    if !n.pow(d).is_zero() {
        return Err(Error::NotNilpotent("exp argument".into()));
    }
    let mut acc = HMatrix::identity(n.dim());
    let mut term = HMatrix::identity(n.dim());
    for k in 1..=d {
        term = term.mul(n).scale(&Scalar::from_rat(rat(1, k as i64)));
        acc = acc.add(&term);
    }
    Ok(acc)
}

/// Logarithm of a unipotent matrix via the alternating series in (U - I);
/// errors when U - I is not nilpotent.
pub fn log_unipotent(u: &HMatrix) -> Result<HMatrix> {
    let d = u.dim() as u32;
    let e = u.sub(&HMatrix::identity(u.dim()));
    if !e.pow(d).is_zero() {
        return Err(Error::NotNilpotent("log argument is not unipotent".into()));
    }
    let mut acc = HMatrix::zero(u.dim());
    let mut power = HMatrix::identity(u.dim());
    for k in 1..=d {
        power = power.mul(&e);
        let sign = if k % 2 == 1 { 1 } else { -1 };
        acc = acc.add(&power.scale(&Scalar::from_rat(rat(sign, k as i64))));
    }
    Ok(acc)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Even,
    Odd,
}

/// One indecomposable block in the canonical decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDecl {
    pub kind: BlockKind,
    pub ell: u32,
    pub alpha0: Rat,
    /// Index of the block's first basis vector inside the ambient space.
    pub offset: usize,
}

impl BlockDecl {
    pub fn dim(&self) -> usize {
        match self.kind {
            BlockKind::Even => 2 * self.ell as usize,
            BlockKind::Odd => 2 * self.ell as usize - 1,
        }
    }
}

/// A quadratic space with a twist: the bilinear form, the coset exponent of
/// each basis vector under the semisimple part, and the nilpotent part.
#[derive(Clone)]
pub struct TwistPair {
    gram: HMatrix,
    cosets: Vec<Rat>,
    nil: HMatrix,
    blocks: Vec<BlockDecl>,
}

impl TwistPair {
    /// General constructor; validates all structural invariants.
    pub fn new(gram: HMatrix, cosets: Vec<Rat>, nil: HMatrix) -> Result<TwistPair> {
        TwistPair::with_blocks(gram, cosets, nil, Vec::new())
    }

    fn with_blocks(
        gram: HMatrix,
        cosets: Vec<Rat>,
        nil: HMatrix,
        blocks: Vec<BlockDecl>,
    ) -> Result<TwistPair> {
        let d = gram.dim();
        if cosets.len() != d || nil.dim() != d {
            return Err(Error::DimensionMismatch(
                "gram, cosets and nilpotent part must share one dimension".into(),
            ));
        }
        for (i, a) in cosets.iter().enumerate() {
            if coset_rep(*a) != *a {
                return Err(Error::InvalidTwist(format!(
                    "coset exponent {} at index {} is not reduced into (-1, 0]",
                    a, i
                )));
            }
        }
        // symmetry of the form
        for i in 0..d {
            for j in 0..i {
                if gram.get(i, j) != gram.get(j, i) {
                    return Err(Error::InvalidTwist("bilinear form is not symmetric".into()));
                }
            }
        }
        if gram.det().is_zero() {
            return Err(Error::InvalidTwist("bilinear form is degenerate".into()));
        }
        // sigma-invariance of the form: pairing nonzero only between cosets
        // that sum to an integer
        for i in 0..d {
            for j in 0..d {
                if !gram.get(i, j).is_zero() && !(cosets[i] + cosets[j]).is_integer() {
                    return Err(Error::InvalidTwist(format!(
                        "form pairs basis vectors {} and {} from incompatible cosets",
                        i, j
                    )));
                }
            }
        }
        if !nil.pow(d as u32).is_zero() {
            return Err(Error::NotNilpotent("twist nilpotent part".into()));
        }
        // sigma commutes with N: N preserves each coset eigenspace
        for j in 0..d {
            for i in 0..d {
                if !nil.get(i, j).is_zero() && cosets[i] != cosets[j] {
                    return Err(Error::InvalidTwist(format!(
                        "nilpotent part maps coset {} into coset {}",
                        cosets[j], cosets[i]
                    )));
                }
            }
        }
        // skewness: (N a | b) + (a | N b) = 0
        let prod = nil_skew_defect(&gram, &nil);
        if !prod.is_zero() {
            return Err(Error::InvalidTwist(
                "nilpotent part is not skew for the bilinear form".into(),
            ));
        }
        Ok(TwistPair {
            gram,
            cosets,
            nil,
            blocks,
        })
    }

    /// Even block of dimension 2L; alpha0 must lie in (-1, 0].
    pub fn even_block(ell: u32, alpha0: Rat) -> Result<TwistPair> {
        if ell == 0 {
            return Err(Error::InvalidSpec("even block needs L >= 1".into()));
        }
        if coset_rep(alpha0) != alpha0 {
            return Err(Error::InvalidSpec(format!(
                "even block exponent {} outside (-1, 0]",
                alpha0
            )));
        }
        let l = ell as usize;
        let d = 2 * l;
        let mut gram = HMatrix::zero(d);
        for i in 0..d {
            gram.set(i, d - 1 - i, Scalar::one());
        }
        let dual = coset_rep(-alpha0);
        let mut cosets = vec![alpha0; l];
        cosets.extend(vec![dual; l]);
        let mut nil = HMatrix::zero(d);
        for i in 0..l.saturating_sub(1) {
            // v_{i+1} -> v_{i+2} on the first half
            nil.set(i + 1, i, Scalar::one());
            // v_{L+i+1} -> -v_{L+i+2} on the second half
            nil.set(l + i + 1, l + i, Scalar::from_rat(rat(-1, 1)));
        }
        let decl = BlockDecl {
            kind: BlockKind::Even,
            ell,
            alpha0,
            offset: 0,
        };
        TwistPair::with_blocks(gram, cosets, nil, vec![decl])
    }

    /// Odd block of dimension 2L - 1; alpha0 must be 0 or -1/2.
    pub fn odd_block(ell: u32, alpha0: Rat) -> Result<TwistPair> {
        if ell == 0 {
            return Err(Error::InvalidSpec("odd block needs L >= 1".into()));
        }
        if alpha0 != Rat::zero() && alpha0 != rat(-1, 2) {
            return Err(Error::InvalidSpec(format!(
                "odd block exponent must be 0 or -1/2, got {}",
                alpha0
            )));
        }
        let d = 2 * ell as usize - 1;
        let mut gram = HMatrix::zero(d);
        for i in 0..d {
            gram.set(i, d - 1 - i, Scalar::one());
        }
        let cosets = vec![alpha0; d];
        let mut nil = HMatrix::zero(d);
        for i in 0..d.saturating_sub(1) {
            // v_{i+1} -> (-1)^i v_{i+2}
            let sign = if i % 2 == 0 { 1 } else { -1 };
            nil.set(i + 1, i, Scalar::from_rat(rat(sign, 1)));
        }
        let decl = BlockDecl {
            kind: BlockKind::Odd,
            ell,
            alpha0,
            offset: 0,
        };
        TwistPair::with_blocks(gram, cosets, nil, vec![decl])
    }

    /// Orthogonal direct sum; block bookkeeping is concatenated with shifted
    /// offsets.
    pub fn direct_sum(parts: &[TwistPair]) -> Result<TwistPair> {
        let total: usize = parts.iter().map(|p| p.dim()).sum();
        let mut gram = HMatrix::zero(total);
        let mut nil = HMatrix::zero(total);
        let mut cosets = Vec::with_capacity(total);
        let mut blocks = Vec::new();
        let mut off = 0;
        for p in parts {
            let d = p.dim();
            for i in 0..d {
                for j in 0..d {
                    gram.set(off + i, off + j, p.gram.get(i, j).clone());
                    nil.set(off + i, off + j, p.nil.get(i, j).clone());
                }
            }
            cosets.extend_from_slice(&p.cosets);
            for b in &p.blocks {
                blocks.push(BlockDecl {
                    offset: b.offset + off,
                    ..b.clone()
                });
            }
            off += d;
        }
        TwistPair::with_blocks(gram, cosets, nil, blocks)
    }

    pub fn dim(&self) -> usize {
        self.gram.dim()
    }

    pub fn gram(&self) -> &HMatrix {
        &self.gram
    }

    pub fn nil(&self) -> &HMatrix {
        &self.nil
    }

    pub fn cosets(&self) -> &[Rat] {
        &self.cosets
    }

    pub fn coset(&self, index: usize) -> Rat {
        self.cosets[index]
    }

    pub fn blocks(&self) -> &[BlockDecl] {
        &self.blocks
    }

    /// Pairing (a | b) of coordinate vectors.
    pub fn pair(&self, a: &[Scalar], b: &[Scalar]) -> Scalar {
        let gb = self.gram.apply(b);
        let mut acc = Scalar::zero();
        for (x, y) in a.iter().zip(gb.iter()) {
            acc = acc.add(&x.mul(y));
        }
        acc
    }

    /// Applies the semisimple part of the twist: coordinate i picks up
    /// e^(-2*pi*i*alpha_i).
    pub fn sigma_apply(&self, a: &[Scalar], conductor: u32) -> Result<Vec<Scalar>> {
        a.iter()
            .enumerate()
            .map(|(i, c)| Ok(c.mul(&Scalar::root_of_unity(-self.cosets[i], conductor)?)))
            .collect()
    }

    /// Smallest k with N^k = 0.
    pub fn nil_index(&self) -> u32 {
        let mut p = HMatrix::identity(self.dim());
        for k in 0..=self.dim() as u32 {
            if p.is_zero() {
                return k;
            }
            p = p.mul(&self.nil);
        }
        self.dim() as u32 + 1
    }

    /// exp(zeta N) a, expanded as a vector of polynomials in zeta.  The series
    /// terminates because N is nilpotent.
    pub fn exp_zeta_nil(&self, a: &[Scalar]) -> Vec<ZetaPoly> {
        let d = self.dim();
        assert_eq!(a.len(), d);
        let mut per_index: Vec<Vec<Scalar>> = vec![Vec::new(); d];
        let mut current = a.to_vec();
        let mut k = 0u32;
        loop {
            let factor = Scalar::from_rat(factorial_inv(k));
            let mut all_zero = true;
            for i in 0..d {
                let c = current[i].mul(&factor);
                if !c.is_zero() {
                    all_zero = false;
                }
                per_index[i].push(c);
            }
            if all_zero && k > 0 {
                break;
            }
            if k as usize > d {
                break;
            }
            current = self.nil.apply(&current);
            k += 1;
        }
        per_index.into_iter().map(ZetaPoly::from_coeffs).collect()
    }

    /// The matrix binom(m + N, j) = product_{i<j} (mI + N - iI) / j!.
    pub fn operator_binom(&self, m: Rat, j: u32) -> HMatrix {
        let d = self.dim();
        let mut acc = HMatrix::identity(d);
        for i in 0..j as i64 {
            let shifted = self
                .nil
                .add(&HMatrix::identity(d).scale(&Scalar::from_rat(m - Rat::from_integer(i))));
            acc = acc.mul(&shifted).scale(&Scalar::from_rat(rat(1, i + 1)));
        }
        acc
    }

    /// True when the stored data coincides exactly with the canonical data
    /// rebuilt from the block declarations.
    pub fn check_canonical_blocks(&self) -> bool {
        if self.blocks.is_empty() {
            return false;
        }
        let mut rebuilt_parts = Vec::new();
        let mut expected_offset = 0;
        for b in &self.blocks {
            if b.offset != expected_offset {
                return false;
            }
            let part = match b.kind {
                BlockKind::Even => TwistPair::even_block(b.ell, b.alpha0),
                BlockKind::Odd => TwistPair::odd_block(b.ell, b.alpha0),
            };
            let part = match part {
                Ok(p) => p,
                Err(_) => return false,
            };
            expected_offset += part.dim();
            rebuilt_parts.push(part);
        }
        if expected_offset != self.dim() {
            return false;
        }
        let rebuilt = match TwistPair::direct_sum(&rebuilt_parts) {
            Ok(t) => t,
            Err(_) => return false,
        };
        rebuilt.gram == self.gram && rebuilt.nil == self.nil && rebuilt.cosets == self.cosets
    }

    /// Coordinate vector of the b-th basis vector.
    pub fn basis_vector(&self, index: usize) -> Vec<Scalar> {
        let mut v = vec![Scalar::zero(); self.dim()];
        v[index] = Scalar::one();
        v
    }

    /// The coset of a sigma-homogeneous coordinate vector; errors when
    /// coordinates mix cosets.
    pub fn homogeneous_coset(&self, a: &[Scalar]) -> Result<Rat> {
        let mut found: Option<Rat> = None;
        for (i, c) in a.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            match found {
                None => found = Some(self.cosets[i]),
                Some(f) if f == self.cosets[i] => {}
                Some(f) => {
                    return Err(Error::InvalidTwist(format!(
                        "vector mixes cosets {} and {}",
                        f, self.cosets[i]
                    )))
                }
            }
        }
        found.ok_or_else(|| Error::InvalidTwist("zero vector has no coset".into()))
    }
}

fn factorial_inv(k: u32) -> Rat {
    let mut acc = Rat::one();
    for i in 1..=k as i64 {
        acc = acc / Rat::from_integer(i);
    }
    acc
}

/// Returns the matrix of (N a | b) + (a | N b) as bilinear-form defect:
/// G N + N^T G, encoded by computing (gram * nil) + (gram * nil)^T-like
/// contraction directly.
fn nil_skew_defect(gram: &HMatrix, nil: &HMatrix) -> HMatrix {
    let d = gram.dim();
    // (N e_j | e_k) = sum_i nil[i][j] gram[i][k]
    let mut defect = HMatrix::zero(d);
    for j in 0..d {
        for k in 0..d {
            let mut acc = Scalar::zero();
            for i in 0..d {
                let a = nil.get(i, j);
                if !a.is_zero() {
                    acc = acc.add(&a.mul(gram.get(i, k)));
                }
                let b = nil.get(i, k);
                if !b.is_zero() {
                    acc = acc.add(&b.mul(gram.get(j, i)));
                }
            }
            defect.set(j, k, acc);
        }
    }
    defect
}
