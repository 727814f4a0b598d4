//! Twisted affinization at the bracket level: elements a t^m with rational
//! exponents m constrained to the coset of a under the semisimple twist, a
//! central element K, and the bracket
//!
//!   [a t^m, b t^n] = [a, b] t^(m+n) + delta_{m, -n} ((m + N) a | b) K.
//!
//! The base Lie algebra is abelian for the Heisenberg case; general structure
//! constants are supported at bracket level only.

use crate::scalar::{Rat, Scalar};
use crate::twist::TwistPair;
use crate::{Error, Result};
use num::Zero;
use std::collections::BTreeMap;

/// Structure constants plus the twist: everything needed to bracket loop
/// elements.  `constants[(i, j)]` lists (k, c) with [v_i, v_j] = sum c v_k.
pub struct LieStructure {
    tp: TwistPair,
    constants: BTreeMap<(usize, usize), Vec<(usize, Rat)>>,
    level: Scalar,
    dual_coxeter: Rat,
}

impl LieStructure {
    /// Abelian Lie algebra on the twisted quadratic space: the Heisenberg
    /// case.  Level defaults to 1.
    pub fn heisenberg(tp: TwistPair) -> LieStructure {
        LieStructure {
            tp,
            constants: BTreeMap::new(),
            level: Scalar::one(),
            dual_coxeter: Rat::zero(),
        }
    }

    /// General constructor; validates antisymmetry, the Jacobi identity,
    /// invariance of the form and that the nilpotent part of the twist acts as
    /// a derivation.
    pub fn new(
        tp: TwistPair,
        constants: BTreeMap<(usize, usize), Vec<(usize, Rat)>>,
        level: Scalar,
        dual_coxeter: Rat,
    ) -> Result<LieStructure> {
        let ls = LieStructure {
            tp,
            constants,
            level,
            dual_coxeter,
        };
        let d = ls.tp.dim();
        let basis: Vec<Vec<Scalar>> = (0..d).map(|i| ls.tp.basis_vector(i)).collect();
        for i in 0..d {
            for j in 0..d {
                let ij = ls.ad(i, j);
                let ji = ls.ad(j, i);
                for k in 0..d {
                    if ij[k].add(&ji[k]) != Scalar::zero() {
                        return Err(Error::InvalidSpec(
                            "structure constants are not antisymmetric".into(),
                        ));
                    }
                }
                // invariance ([v_i, v_j] | v_k) = (v_i | [v_j, v_k])
                for k in 0..d {
                    let lhs = ls.tp.pair(&ij, &basis[k]);
                    let rhs = ls.tp.pair(&basis[i], &ls.ad(j, k));
                    if lhs != rhs {
                        return Err(Error::InvalidSpec(
                            "bilinear form is not invariant for the bracket".into(),
                        ));
                    }
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    // Jacobi on basis triples
                    let mut acc = vec![Scalar::zero(); d];
                    for (a, b, c) in [(i, j, k), (j, k, i), (k, i, j)] {
                        let inner = ls.ad(b, c);
                        let outer = ls.ad_vec(a, &inner);
                        for (t, v) in acc.iter_mut().zip(outer.iter()) {
                            *t = t.add(v);
                        }
                    }
                    if acc.iter().any(|c| !c.is_zero()) {
                        return Err(Error::InvalidSpec("Jacobi identity fails".into()));
                    }
                }
                // N [v_i, v_j] = [N v_i, v_j] + [v_i, N v_j]
                let lhs = ls.tp.nil().apply(&ls.ad(i, j));
                let ni = ls.tp.nil().apply(&basis[i]);
                let nj = ls.tp.nil().apply(&basis[j]);
                let mut rhs = ls.bracket_vectors(&ni, &basis[j]);
                let second = ls.bracket_vectors(&basis[i], &nj);
                for (t, v) in rhs.iter_mut().zip(second.iter()) {
                    *t = t.add(v);
                }
                if lhs
                    .iter()
                    .zip(rhs.iter())
                    .any(|(a, b)| a.sub(b) != Scalar::zero())
                {
                    return Err(Error::InvalidSpec(
                        "nilpotent part is not a derivation of the bracket".into(),
                    ));
                }
            }
        }
        Ok(ls)
    }

    pub fn twist(&self) -> &TwistPair {
        &self.tp
    }

    pub fn level(&self) -> &Scalar {
        &self.level
    }

    pub fn dual_coxeter(&self) -> Rat {
        self.dual_coxeter
    }

    /// [v_i, v_j] as a coordinate vector.
    fn ad(&self, i: usize, j: usize) -> Vec<Scalar> {
        let mut out = vec![Scalar::zero(); self.tp.dim()];
        if let Some(terms) = self.constants.get(&(i, j)) {
            for (k, c) in terms {
                out[*k] = out[*k].add(&Scalar::from_rat(*c));
            }
        }
        out
    }

    fn ad_vec(&self, i: usize, v: &[Scalar]) -> Vec<Scalar> {
        let mut out = vec![Scalar::zero(); self.tp.dim()];
        for (j, c) in v.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let term = self.ad(i, j);
            for (t, u) in out.iter_mut().zip(term.iter()) {
                *t = t.add(&u.mul(c));
            }
        }
        out
    }

    fn bracket_vectors(&self, a: &[Scalar], b: &[Scalar]) -> Vec<Scalar> {
        let mut out = vec![Scalar::zero(); self.tp.dim()];
        for (i, ca) in a.iter().enumerate() {
            if ca.is_zero() {
                continue;
            }
            for (j, cb) in b.iter().enumerate() {
                if cb.is_zero() {
                    continue;
                }
                let term = self.ad(i, j);
                for (t, u) in out.iter_mut().zip(term.iter()) {
                    *t = t.add(&u.mul(ca).mul(cb));
                }
            }
        }
        out
    }

    /// ((m + N) v_i | v_j) = m (v_i | v_j) + (N v_i | v_j).
    pub fn cocycle(&self, i: usize, m: Rat, j: usize) -> Scalar {
        let vi = self.tp.basis_vector(i);
        let vj = self.tp.basis_vector(j);
        let nv = self.tp.nil().apply(&vi);
        self.tp
            .pair(&vi, &vj)
            .mul(&Scalar::from_rat(m))
            .add(&self.tp.pair(&nv, &vj))
    }
}

/// A finite sum of loop terms c * (v_i t^m) plus a central component c_K * K.
#[derive(Clone, PartialEq, Debug)]
pub struct LoopElement {
    terms: BTreeMap<(usize, Rat), Scalar>,
    central: Scalar,
}

impl LoopElement {
    pub fn zero() -> LoopElement {
        LoopElement {
            terms: BTreeMap::new(),
            central: Scalar::zero(),
        }
    }

    pub fn central(c: Scalar) -> LoopElement {
        LoopElement {
            terms: BTreeMap::new(),
            central: c,
        }
    }

    /// v_i t^m; errors unless m lies in the coset attached to index i.
    pub fn generator(tp: &TwistPair, index: usize, exponent: Rat) -> Result<LoopElement> {
        let coset = tp.coset(index);
        if crate::scalar::coset_rep(exponent) != coset {
            return Err(Error::CosetMismatch { exponent, coset });
        }
        Ok(LoopElement::raw_term(index, exponent, Scalar::one()))
    }

    /// Unvalidated single term; used by tests probing invariant violations.
    pub fn raw_term(index: usize, exponent: Rat, coeff: Scalar) -> LoopElement {
        let mut terms = BTreeMap::new();
        terms.insert((index, exponent), coeff);
        LoopElement {
            terms,
            central: Scalar::zero(),
        }
    }

    pub fn add(&self, other: &LoopElement) -> LoopElement {
        let mut out = self.clone();
        for (key, c) in &other.terms {
            let cur = out.terms.entry(*key).or_insert_with(Scalar::zero);
            *cur = cur.add(c);
        }
        out.terms.retain(|_, c| !c.is_zero());
        out.central = out.central.add(&other.central);
        out
    }

    pub fn scale(&self, s: &Scalar) -> LoopElement {
        let mut out = LoopElement {
            terms: self
                .terms
                .iter()
                .map(|(k, c)| (*k, c.mul(s)))
                .collect(),
            central: self.central.mul(s),
        };
        out.terms.retain(|_, c| !c.is_zero());
        out
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.central.is_zero()
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, Rat, &Scalar)> {
        self.terms.iter().map(|((i, m), c)| (*i, *m, c))
    }

    pub fn central_coeff(&self) -> &Scalar {
        &self.central
    }
}

/// The twisted affinization bracket.  Central components of the inputs are
/// annihilated; the output central component comes from the 2-cocycle.
pub fn bracket(ls: &LieStructure, x: &LoopElement, y: &LoopElement) -> LoopElement {
    let mut out = LoopElement::zero();
    for (i, m, cx) in x.terms() {
        for (j, n, cy) in y.terms() {
            let c = cx.mul(cy);
            // loop part [v_i, v_j] t^(m+n)
            for (k, s) in ls.ad(i, j).iter().enumerate() {
                if !s.is_zero() {
                    out = out.add(&LoopElement::raw_term(k, m + n, c.mul(s)));
                }
            }
            // central part
            if (m + n).is_zero() {
                out.central = out.central.add(&c.mul(&ls.cocycle(i, m, j)));
            }
        }
    }
    out
}

/// The bracket with the central term dropped: the plain (twisted) loop part.
pub fn loop_bracket(ls: &LieStructure, x: &LoopElement, y: &LoopElement) -> LoopElement {
    let mut b = bracket(ls, x, y);
    b.central = Scalar::zero();
    b
}

/// The 2-cocycle gamma(x, y) = sum over matched exponents of ((m + N) a | b).
pub fn cocycle_value(ls: &LieStructure, x: &LoopElement, y: &LoopElement) -> Scalar {
    bracket(ls, x, y).central_coeff().clone()
}

/// Raising / fixed / lowering split of a loop element by the sign of the
/// exponent.  With rational exponents the complex half-plane rule degenerates
/// to the sign of m.  Errors when a t^0 term sits outside the fixed subspace
/// of the semisimple twist.
pub struct TriangularParts {
    pub lowering: LoopElement,
    pub fixed: LoopElement,
    pub raising: LoopElement,
}

pub fn triangular_part(ls: &LieStructure, x: &LoopElement) -> Result<TriangularParts> {
    let mut lowering = LoopElement::zero();
    let mut fixed = LoopElement::central(x.central_coeff().clone());
    let mut raising = LoopElement::zero();
    for (i, m, c) in x.terms() {
        let term = LoopElement::raw_term(i, m, c.clone());
        if m.is_zero() {
            if !ls.twist().coset(i).is_zero() {
                return Err(Error::NoTriangularPart(format!(
                    "t^0 component of basis vector {} lies outside the fixed subspace",
                    i
                )));
            }
            fixed = fixed.add(&term);
        } else if m < Rat::zero() {
            lowering = lowering.add(&term);
        } else {
            raising = raising.add(&term);
        }
    }
    Ok(TriangularParts {
        lowering,
        fixed,
        raising,
    })
}

#[cfg(test)]
pub(crate) fn sl2_with_nilpotent_twist() -> LieStructure {
    use crate::scalar::rat;
    use crate::twist::HMatrix;
    // basis e, h, f; [h,e] = 2e, [h,f] = -2f, [e,f] = h
    let mut constants = BTreeMap::new();
    constants.insert((1usize, 0usize), vec![(0usize, rat(2, 1))]);
    constants.insert((0, 1), vec![(0, rat(-2, 1))]);
    constants.insert((1, 2), vec![(2, rat(-2, 1))]);
    constants.insert((2, 1), vec![(2, rat(2, 1))]);
    constants.insert((0, 2), vec![(1, rat(1, 1))]);
    constants.insert((2, 0), vec![(1, rat(-1, 1))]);
    let mut gram = HMatrix::zero(3);
    gram.set(0, 2, Scalar::one());
    gram.set(2, 0, Scalar::one());
    gram.set(1, 1, Scalar::from_rat(rat(2, 1)));
    // N = ad(e): h -> -2e, f -> h
    let mut nil = HMatrix::zero(3);
    nil.set(0, 1, Scalar::from_rat(rat(-2, 1)));
    nil.set(1, 2, Scalar::one());
    let tp = TwistPair::new(gram, vec![Rat::zero(); 3], nil).unwrap();
    LieStructure::new(tp, constants, Scalar::one(), rat(2, 1)).unwrap()
}
