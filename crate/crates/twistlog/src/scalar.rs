//! Exact scalars: the cyclotomic field Q(w), w a primitive M-th root of
//! unity, extended by a formal transcendental T standing for 2*pi*i.
//!
//! A `Scalar` is a polynomial in T with coefficients in Q(w).  Equality is
//! coefficient-wise; T is never evaluated, so an identity that would require
//! the numeric value of 2*pi*i shows up as a nonzero residual instead of
//! silently passing.  Cyclotomic numbers are residue classes modulo the M-th
//! cyclotomic polynomial (not modulo x^M - 1), so every nonzero element is
//! invertible.

use num::bigint::BigInt;
use num::rational::{BigRational, Rational64};
use num::{Integer, One, Zero};
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use crate::{Error, Result};

/// Exact rational used for exponents, energies, cosets and binomials.
pub type Rat = Rational64;

/// Shorthand constructor; panics on zero denominator.
pub fn rat(numer: i64, denom: i64) -> Rat {
    Rat::new(numer, denom)
}

/// Canonical representative of `m` modulo 1 in the half-open interval (-1, 0].
pub fn coset_rep(m: Rat) -> Rat {
    m - m.ceil()
}

/// Parses "p/q" or "p" into an exact rational.
pub fn parse_rat(s: &str) -> Result<Rat> {
    let s = s.trim();
    let (num_str, den_str) = match s.split_once('/') {
        Some((n, d)) => (n, d),
        None => (s, "1"),
    };
    let numer: i64 = num_str
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad rational {s:?}")))?;
    let denom: i64 = den_str
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad rational {s:?}")))?;
    if denom == 0 {
        return Err(Error::Parse(format!("zero denominator in {s:?}")));
    }
    Ok(Rat::new(numer, denom))
}

/// Renders a rational as "p/q", or "p" when the denominator is 1.
pub fn rat_string(r: Rat) -> String {
    r.to_string()
}

/// Generalized binomial coefficient m(m-1)...(m-j+1) / j! for rational m.
pub fn binom_rational(m: Rat, j: u32) -> Rat {
    let mut acc = Rat::one();
    for i in 0..j as i64 {
        acc *= (m - Rat::from_integer(i)) / Rat::from_integer(i + 1);
    }
    acc
}

/// Euler totient, used for cyclotomic degrees.
fn totient(mut n: u32) -> u32 {
    let mut result = n;
    let mut p = 2;
    while p * p <= n {
        if n % p == 0 {
            while n % p == 0 {
                n /= p;
            }
            result -= result / p;
        }
        p += 1;
    }
    if n > 1 {
        result -= result / n;
    }
    result
}

// --- dense univariate polynomials over Q, little-endian ------------------

type Poly = Vec<BigRational>;

fn poly_trim(v: &mut Poly) {
    while v.last().map_or(false, |c| c.is_zero()) {
        v.pop();
    }
}

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![BigRational::zero(); a.len() + b.len() - 1];
    for (i, ca) in a.iter().enumerate() {
        if ca.is_zero() {
            continue;
        }
        for (j, cb) in b.iter().enumerate() {
            out[i + j] += ca * cb;
        }
    }
    poly_trim(&mut out);
    out
}

/// Long division; the divisor must be nonzero.  Returns (quotient, remainder).
fn poly_divmod(num: &Poly, den: &Poly) -> (Poly, Poly) {
    assert!(!den.is_empty(), "division by zero polynomial");
    let mut rem = num.clone();
    poly_trim(&mut rem);
    let dd = den.len() - 1;
    let lead = den[dd].clone();
    if rem.len() <= dd {
        return (Vec::new(), rem);
    }
    let mut quot = vec![BigRational::zero(); rem.len() - dd];
    while rem.len() > dd {
        let shift = rem.len() - 1 - dd;
        let coef = rem.last().unwrap() / &lead;
        quot[shift] = coef.clone();
        for (i, c) in den.iter().enumerate() {
            let idx = shift + i;
            let delta = &coef * c;
            rem[idx] -= delta;
        }
        poly_trim(&mut rem);
        if rem.is_empty() {
            break;
        }
    }
    poly_trim(&mut quot);
    (quot, rem)
}

/// The M-th cyclotomic polynomial, computed by exact division of x^M - 1 by
/// the cyclotomic polynomials of the proper divisors of M.
fn cyclotomic_poly(m: u32) -> Poly {
    let mut memo: HashMap<u32, Poly> = HashMap::new();
    for d in 1..=m {
        if m % d != 0 {
            continue;
        }
        // x^d - 1
        let mut num = vec![BigRational::zero(); d as usize + 1];
        num[0] = -BigRational::one();
        num[d as usize] = BigRational::one();
        for e in 1..d {
            if d % e == 0 {
                let (q, r) = poly_divmod(&num, &memo[&e]);
                assert!(r.is_empty(), "cyclotomic division must be exact");
                num = q;
            }
        }
        memo.insert(d, num);
    }
    memo.remove(&m).expect("conductor must be >= 1")
}

// --- per-conductor reduction tables --------------------------------------

struct FieldTable {
    conductor: u32,
    degree: usize,
    /// Coefficients of the monic cyclotomic polynomial, length degree + 1.
    modulus: Poly,
    /// reduction[i] = x^(degree + i) reduced modulo the cyclotomic polynomial.
    reduction: Vec<Poly>,
}

impl FieldTable {
    fn build(m: u32) -> FieldTable {
        let modulus = cyclotomic_poly(m);
        let degree = modulus.len() - 1;
        debug_assert_eq!(degree as u32, totient(m));
        // x^degree = -(lower part of modulus)
        let base: Poly = modulus[..degree].iter().map(|c| -c).collect();
        let mut reduction = Vec::with_capacity(degree);
        let mut cur = base.clone();
        poly_trim(&mut cur);
        for _ in 0..degree {
            reduction.push(cur.clone());
            // multiply by x, fold the top coefficient back in
            let mut next = vec![BigRational::zero(); cur.len() + 1];
            for (i, c) in cur.iter().enumerate() {
                next[i + 1] = c.clone();
            }
            if next.len() > degree {
                let top = next.pop().unwrap();
                if !top.is_zero() {
                    for (i, c) in base.iter().enumerate() {
                        next[i] += &top * c;
                    }
                }
            }
            poly_trim(&mut next);
            cur = next;
        }
        FieldTable {
            conductor: m,
            degree,
            modulus,
            reduction,
        }
    }

    /// Reduces an arbitrary-degree polynomial to the canonical residue.
    fn reduce(&self, mut v: Poly) -> Vec<BigRational> {
        while v.len() > self.degree {
            let top_deg = v.len() - 1;
            let top = v.pop().unwrap();
            if !top.is_zero() {
                let row = &self.reduction[top_deg - self.degree];
                for (i, c) in row.iter().enumerate() {
                    v[i] += &top * c;
                }
            }
        }
        let mut out = v;
        out.resize(self.degree, BigRational::zero());
        out
    }

    fn mul(&self, a: &[BigRational], b: &[BigRational]) -> Vec<BigRational> {
        let prod = poly_mul(&a.to_vec(), &b.to_vec());
        self.reduce(prod)
    }

    /// x^e reduced, for 0 <= e.
    fn x_pow(&self, e: u64) -> Vec<BigRational> {
        let mut acc = vec![BigRational::zero(); self.degree];
        acc[0] = BigRational::one();
        if self.degree == 1 {
            // Q(w_1) = Q, where x = 1.
            return acc;
        }
        let mut base = vec![BigRational::zero(); self.degree];
        base[1] = BigRational::one();
        let mut e = e;
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(&acc, &base);
            }
            base = self.mul(&base, &base);
            e >>= 1;
        }
        acc
    }
}

static TABLES: OnceLock<RwLock<HashMap<u32, Arc<FieldTable>>>> = OnceLock::new();

fn table(m: u32) -> Arc<FieldTable> {
    assert!(m >= 1, "conductor must be positive");
    let lock = TABLES.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(t) = lock.read().unwrap().get(&m) {
        debug_assert_eq!(t.conductor, m);
        return Arc::clone(t);
    }
    let built = Arc::new(FieldTable::build(m));
    let mut w = lock.write().unwrap();
    Arc::clone(w.entry(m).or_insert(built))
}

// --- cyclotomic numbers --------------------------------------------------

/// A residue class in Q[x] / (M-th cyclotomic polynomial), tagged with its
/// conductor.  Arithmetic between different conductors lifts both operands
/// into the field of the least common multiple.
#[derive(Clone)]
pub struct CycNum {
    conductor: u32,
    coeffs: Vec<BigRational>,
}

impl CycNum {
    pub fn zero() -> CycNum {
        CycNum {
            conductor: 1,
            coeffs: vec![BigRational::zero()],
        }
    }

    pub fn from_big(r: BigRational) -> CycNum {
        CycNum {
            conductor: 1,
            coeffs: vec![r],
        }
    }

    pub fn from_rat(r: Rat) -> CycNum {
        CycNum::from_big(BigRational::new(
            BigInt::from(*r.numer()),
            BigInt::from(*r.denom()),
        ))
    }

    /// w_M^e, the e-th power of the chosen primitive M-th root of unity.
    pub fn root_power(conductor: u32, e: u64) -> CycNum {
        let t = table(conductor);
        CycNum {
            conductor,
            coeffs: t.x_pow(e),
        }
    }

    pub fn conductor(&self) -> u32 {
        self.conductor
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_zero())
    }

    /// Image of this number under the standard embedding into Q(w_{target}).
    pub fn lift(&self, target: u32) -> CycNum {
        if target == self.conductor {
            return self.clone();
        }
        assert!(
            target % self.conductor == 0,
            "lift target must be a multiple of the conductor"
        );
        let t = table(target);
        let step = (target / self.conductor) as u64;
        let mut acc = vec![BigRational::zero(); t.degree];
        let mut pow = t.x_pow(0);
        let xk = t.x_pow(step);
        for c in &self.coeffs {
            if !c.is_zero() {
                for (i, p) in pow.iter().enumerate() {
                    acc[i] += c * p;
                }
            }
            pow = t.mul(&pow, &xk);
        }
        CycNum {
            conductor: target,
            coeffs: acc,
        }
    }

    fn common(a: &CycNum, b: &CycNum) -> (CycNum, CycNum) {
        if a.conductor == b.conductor {
            (a.clone(), b.clone())
        } else {
            let m = a.conductor.lcm(&b.conductor);
            (a.lift(m), b.lift(m))
        }
    }

    pub fn add(&self, other: &CycNum) -> CycNum {
        let (mut a, b) = CycNum::common(self, other);
        for (x, y) in a.coeffs.iter_mut().zip(b.coeffs.iter()) {
            *x += y;
        }
        a
    }

    pub fn neg(&self) -> CycNum {
        CycNum {
            conductor: self.conductor,
            coeffs: self.coeffs.iter().map(|c| -c).collect(),
        }
    }

    pub fn sub(&self, other: &CycNum) -> CycNum {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &CycNum) -> CycNum {
        let (a, b) = CycNum::common(self, other);
        let t = table(a.conductor);
        CycNum {
            conductor: a.conductor,
            coeffs: t.mul(&a.coeffs, &b.coeffs),
        }
    }

    pub fn mul_big(&self, r: &BigRational) -> CycNum {
        CycNum {
            conductor: self.conductor,
            coeffs: self.coeffs.iter().map(|c| c * r).collect(),
        }
    }

    /// Multiplicative inverse via the extended Euclidean algorithm against the
    /// cyclotomic modulus, which is irreducible over Q.
    pub fn inv(&self) -> Result<CycNum> {
        if self.is_zero() {
            return Err(Error::NotInvertible("zero".into()));
        }
        let t = table(self.conductor);
        let mut a: Poly = t.modulus.clone();
        let mut b: Poly = self.coeffs.clone();
        poly_trim(&mut b);
        // Bezout coefficients for b only.
        let mut ua: Poly = Vec::new();
        let mut ub: Poly = vec![BigRational::one()];
        while !b.is_empty() {
            let (q, r) = poly_divmod(&a, &b);
            let qu = poly_mul(&q, &ub);
            let next = r;
            let mut nu: Poly = ua.clone();
            for (i, c) in qu.iter().enumerate() {
                if nu.len() <= i {
                    nu.resize(i + 1, BigRational::zero());
                }
                nu[i] -= c;
            }
            poly_trim(&mut nu);
            a = std::mem::replace(&mut b, next);
            ua = std::mem::replace(&mut ub, nu);
        }
        // a is now a nonzero constant gcd; ua * self = a (mod modulus).
        if a.len() != 1 {
            return Err(Error::NotInvertible(
                "gcd with the modulus is not constant".into(),
            ));
        }
        let scale = BigRational::one() / &a[0];
        let scaled: Poly = ua.iter().map(|c| c * &scale).collect();
        Ok(CycNum {
            conductor: self.conductor,
            coeffs: table(self.conductor).reduce(scaled),
        })
    }

    /// Some(r) when the number lies in Q.
    pub fn to_rational(&self) -> Option<BigRational> {
        if self.coeffs[1..].iter().all(|c| c.is_zero()) {
            Some(self.coeffs[0].clone())
        } else {
            None
        }
    }
}

impl PartialEq for CycNum {
    fn eq(&self, other: &CycNum) -> bool {
        let (a, b) = CycNum::common(self, other);
        a.coeffs == b.coeffs
    }
}

impl Eq for CycNum {}

impl fmt::Debug for CycNum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", cyc_string(self))
    }
}

fn cyc_string(c: &CycNum) -> String {
    if let Some(r) = c.to_rational() {
        return r.to_string();
    }
    let mut parts = Vec::new();
    for (i, co) in c.coeffs.iter().enumerate() {
        if co.is_zero() {
            continue;
        }
        let body = match i {
            0 => co.to_string(),
            1 => format!("{co}*w"),
            _ => format!("{co}*w^{i}"),
        };
        parts.push(body);
    }
    format!("({})", parts.join(" + "))
}

// --- scalars: polynomials in the formal 2*pi*i ---------------------------

/// A polynomial in the formal transcendental T = 2*pi*i with cyclotomic
/// coefficients.  Invertible exactly when it is a nonzero constant in T.
#[derive(Clone)]
pub struct Scalar {
    /// tau[k] is the coefficient of T^k; trailing zeros are trimmed.
    tau: Vec<CycNum>,
}

impl Scalar {
    pub fn zero() -> Scalar {
        Scalar { tau: Vec::new() }
    }

    pub fn one() -> Scalar {
        Scalar::from_rat(Rat::one())
    }

    pub fn from_rat(r: Rat) -> Scalar {
        Scalar::from_cyc(CycNum::from_rat(r))
    }

    pub fn from_big(r: BigRational) -> Scalar {
        Scalar::from_cyc(CycNum::from_big(r))
    }

    pub fn from_cyc(c: CycNum) -> Scalar {
        let mut s = Scalar { tau: vec![c] };
        s.trim();
        s
    }

    /// The formal transcendental standing for 2*pi*i.
    pub fn tau() -> Scalar {
        Scalar {
            tau: vec![CycNum::zero(), CycNum::from_rat(Rat::one())],
        }
    }

    /// e^(2*pi*i*m) as an exact root of unity; the denominator of `m` must
    /// divide the conductor.
    pub fn root_of_unity(m: Rat, conductor: u32) -> Result<Scalar> {
        let q = *m.denom();
        if q <= 0 || conductor as i64 % q != 0 {
            return Err(Error::ConductorMismatch {
                value: rat_string(m),
                conductor,
            });
        }
        let step = conductor as i64 / q;
        let e = (*m.numer() * step).rem_euclid(conductor as i64);
        Ok(Scalar::from_cyc(CycNum::root_power(conductor, e as u64)))
    }

    fn trim(&mut self) {
        while self.tau.last().map_or(false, |c| c.is_zero()) {
            self.tau.pop();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn is_one(&self) -> bool {
        self == &Scalar::one()
    }

    /// Degree in T; zero scalar reports 0.
    pub fn tau_degree(&self) -> usize {
        self.tau.len().saturating_sub(1)
    }

    pub fn tau_coeff(&self, k: usize) -> CycNum {
        self.tau.get(k).cloned().unwrap_or_else(CycNum::zero)
    }

    pub fn add(&self, other: &Scalar) -> Scalar {
        let n = self.tau.len().max(other.tau.len());
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            out.push(self.tau_coeff(k).add(&other.tau_coeff(k)));
        }
        let mut s = Scalar { tau: out };
        s.trim();
        s
    }

    pub fn neg(&self) -> Scalar {
        Scalar {
            tau: self.tau.iter().map(|c| c.neg()).collect(),
        }
    }

    pub fn sub(&self, other: &Scalar) -> Scalar {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Scalar) -> Scalar {
        if self.is_zero() || other.is_zero() {
            return Scalar::zero();
        }
        let mut out = vec![CycNum::zero(); self.tau.len() + other.tau.len() - 1];
        for (i, a) in self.tau.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (j, b) in other.tau.iter().enumerate() {
                out[i + j] = out[i + j].add(&a.mul(b));
            }
        }
        let mut s = Scalar { tau: out };
        s.trim();
        s
    }

    pub fn mul_rat(&self, r: Rat) -> Scalar {
        self.mul(&Scalar::from_rat(r))
    }

    /// Inverse; defined only for nonzero scalars of T-degree 0.
    pub fn inv(&self) -> Result<Scalar> {
        if self.is_zero() {
            return Err(Error::NotInvertible("zero".into()));
        }
        if self.tau.len() > 1 {
            return Err(Error::NotInvertible(
                "positive degree in the transcendental".into(),
            ));
        }
        Ok(Scalar::from_cyc(self.tau[0].inv()?))
    }

    /// Some(r) when the scalar is a plain rational number.
    pub fn to_rational(&self) -> Option<BigRational> {
        match self.tau.len() {
            0 => Some(BigRational::zero()),
            1 => self.tau[0].to_rational(),
            _ => None,
        }
    }

    /// Rational value narrowed to machine words, when possible.
    pub fn to_rat64(&self) -> Option<Rat> {
        let big = self.to_rational()?;
        let n: i64 = big.numer().try_into().ok()?;
        let d: i64 = big.denom().try_into().ok()?;
        Some(Rat::new(n, d))
    }
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Scalar) -> bool {
        self.sub(other).is_zero()
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut parts = Vec::new();
        for (k, c) in self.tau.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let body = cyc_string(c);
            let term = match k {
                0 => body,
                1 => format!("{body}*T"),
                _ => format!("{body}*T^{k}"),
            };
            parts.push(term);
        }
        write!(f, "{}", parts.join(" + "))
    }
}

// --- polynomials in the logarithm variable zeta --------------------------

/// A polynomial in the formal variable zeta = log z, with `Scalar`
/// coefficients.  Appears as the coefficient of a fixed power of z in a
/// logarithmic field.
#[derive(Clone, PartialEq)]
pub struct ZetaPoly {
    coeffs: Vec<Scalar>,
}

impl ZetaPoly {
    pub fn zero() -> ZetaPoly {
        ZetaPoly { coeffs: Vec::new() }
    }

    pub fn constant(s: Scalar) -> ZetaPoly {
        let mut p = ZetaPoly { coeffs: vec![s] };
        p.trim();
        p
    }

    pub fn from_coeffs(coeffs: Vec<Scalar>) -> ZetaPoly {
        let mut p = ZetaPoly { coeffs };
        p.trim();
        p
    }

    fn trim(&mut self) {
        while self.coeffs.last().map_or(false, |c| c.is_zero()) {
            self.coeffs.pop();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Degree in zeta; the zero polynomial reports 0.
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn coeff(&self, k: usize) -> Scalar {
        self.coeffs.get(k).cloned().unwrap_or_else(Scalar::zero)
    }

    pub fn add(&self, other: &ZetaPoly) -> ZetaPoly {
        let n = self.coeffs.len().max(other.coeffs.len());
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            out.push(self.coeff(k).add(&other.coeff(k)));
        }
        ZetaPoly::from_coeffs(out)
    }

    pub fn scale(&self, s: &Scalar) -> ZetaPoly {
        ZetaPoly::from_coeffs(self.coeffs.iter().map(|c| c.mul(s)).collect())
    }

    /// Substitutes zeta -> zeta + amount and re-expands.
    pub fn shift_zeta(&self, amount: &Scalar) -> ZetaPoly {
        let mut out = vec![Scalar::zero(); self.coeffs.len()];
        // powers of the shift amount
        let mut pow = vec![Scalar::one()];
        for _ in 1..self.coeffs.len() {
            pow.push(pow.last().unwrap().mul(amount));
        }
        for (k, c) in self.coeffs.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            // c * (zeta + amount)^k
            let mut b = Rat::one();
            for j in (0..=k).rev() {
                // binomial(k, j) built incrementally from the top term
                out[j] = out[j].add(&c.mul(&pow[k - j]).mul_rat(b));
                if j > 0 {
                    b = b * Rat::new(j as i64, (k - j + 1) as i64);
                }
            }
        }
        ZetaPoly::from_coeffs(out)
    }
}

impl fmt::Debug for ZetaPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self
            .coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.is_zero())
            .map(|(k, c)| match k {
                0 => format!("{c}"),
                1 => format!("({c})*zeta"),
                _ => format!("({c})*zeta^{k}"),
            })
            .collect();
        write!(f, "{}", parts.join(" + "))
    }
}
