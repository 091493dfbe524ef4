//! Canonical symbolic algebra of the payoff semigroup: the commutative
//! semigroup generated by the asset coordinates `x_1..x_n`, the straddle
//! payoffs `s_0..s_m` (index 0 the target), and — for the unbounded
//! hierarchy — one auxiliary generator `t` evaluating to the damping weight
//! `θ(x) = (1 + Σ e_i(x)²)^{-1}` on the product semigroup.
//!
//! Two identities are imposed in canonical form (the generators are
//! functions, not free symbols):
//!
//! * square reduction: `s_j² = (w_j·x - K_j)²`, so canonical straddle
//!   exponents are 0/1 and even powers expand into coordinate monomials;
//! * aliasing: baskets with identical weights and strike are the same
//!   payoff and share one generator.
//!
//! Square reduction can be switched off to recover the free-monoid reading
//! of the semigroup, in which straddle exponents are unconstrained.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::market::MarketSpec;

#[derive(Debug, Error)]
pub enum SemigroupError {
    #[error("point has dimension {got}, market has {want} assets")]
    DimensionMismatch { got: usize, want: usize },
    #[error("monomial of degree {degree} not in index (cap {cap})")]
    NotInIndex { degree: usize, cap: usize },
}

/// Hierarchy flavor: compact support (no auxiliary generator) or unbounded
/// support on the product semigroup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Compact,
    Unbounded,
}

/// A canonical monomial: straddle exponents (0/1 when reduced), coordinate
/// exponents, and the auxiliary exponent (always 0 in compact mode).
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Monomial {
    pub straddle: Vec<u32>,
    pub x: Vec<u32>,
    pub aux: u32,
}

impl Monomial {
    pub fn unit(num_straddles: usize, n: usize) -> Self {
        Self { straddle: vec![0; num_straddles], x: vec![0; n], aux: 0 }
    }

    pub fn straddle_gen(j: usize, num_straddles: usize, n: usize) -> Self {
        let mut m = Self::unit(num_straddles, n);
        m.straddle[j] = 1;
        m
    }

    pub fn coord_gen(i: usize, num_straddles: usize, n: usize) -> Self {
        let mut m = Self::unit(num_straddles, n);
        m.x[i] = 1;
        m
    }

    pub fn aux_gen(num_straddles: usize, n: usize) -> Self {
        let mut m = Self::unit(num_straddles, n);
        m.aux = 1;
        m
    }

    pub fn degree(&self) -> usize {
        self.straddle.iter().sum::<u32>() as usize
            + self.x.iter().sum::<u32>() as usize
            + self.aux as usize
    }

    pub fn is_unit(&self) -> bool {
        self.degree() == 0
    }

    /// Exponentwise product in the free monoid (no reduction).
    pub fn free_mul(&self, other: &Self) -> Self {
        Self {
            straddle: self
                .straddle
                .iter()
                .zip(&other.straddle)
                .map(|(a, b)| a + b)
                .collect(),
            x: self.x.iter().zip(&other.x).map(|(a, b)| a + b).collect(),
            aux: self.aux + other.aux,
        }
    }

    fn exponents(&self) -> impl Iterator<Item = u32> + '_ {
        self.straddle
            .iter()
            .copied()
            .chain(self.x.iter().copied())
            .chain(std::iter::once(self.aux))
    }

    /// Evaluate at an asset point `x >= 0`. The auxiliary generator
    /// contributes `θ(x)^aux` with `θ(x) = (1 + Σ e_i(x)²)^{-1}` summed over
    /// all coordinate and straddle payoffs.
    pub fn evaluate(&self, point: &[f64], market: &MarketSpec) -> Result<f64, SemigroupError> {
        if point.len() != market.n() {
            return Err(SemigroupError::DimensionMismatch { got: point.len(), want: market.n() });
        }
        let mut v = 1.0;
        for (j, &e) in self.straddle.iter().enumerate() {
            if e > 0 {
                v *= market.baskets[j].payoff(point).powi(e as i32);
            }
        }
        for (i, &e) in self.x.iter().enumerate() {
            if e > 0 {
                v *= point[i].powi(e as i32);
            }
        }
        if self.aux > 0 {
            v *= theta(point, market).powi(self.aux as i32);
        }
        Ok(v)
    }
}

/// The damping weight `θ(x) = (1 + Σ_i x_i² + Σ_j (w_j·x - K_j)²)^{-1}`.
pub fn theta(point: &[f64], market: &MarketSpec) -> f64 {
    let coords: f64 = point.iter().map(|v| v * v).sum();
    let straddles: f64 = market
        .baskets
        .iter()
        .map(|b| {
            let u = b.signed_value(point);
            u * u
        })
        .sum();
    1.0 / (1.0 + coords + straddles)
}

/// Graded lexicographic order: by total degree, then by exponent vector in
/// generator order `(s_0..s_m, x_1..x_n, t)` with larger exponents first,
/// so within a grade `s_0²` precedes `s_0 s_1` precedes `x_1²` etc.
impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.exponents().cmp(self.exponents()))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl std::fmt::Display for Monomial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_unit() {
            return write!(f, "1");
        }
        let mut parts = Vec::new();
        for (j, &e) in self.straddle.iter().enumerate() {
            match e {
                0 => {}
                1 => parts.push(format!("s{j}")),
                _ => parts.push(format!("s{j}^{e}")),
            }
        }
        for (i, &e) in self.x.iter().enumerate() {
            match e {
                0 => {}
                1 => parts.push(format!("x{}", i + 1)),
                _ => parts.push(format!("x{}^{e}", i + 1)),
            }
        }
        match self.aux {
            0 => {}
            1 => parts.push("t".into()),
            e => parts.push(format!("t^{e}")),
        }
        write!(f, "{}", parts.join("*"))
    }
}

/// Element of the payoff algebra: a finite real combination of canonical
/// monomials. Zero coefficients are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyElement {
    terms: BTreeMap<Monomial, f64>,
}

impl PolyElement {
    pub fn zero() -> Self {
        Self { terms: BTreeMap::new() }
    }

    pub fn from_monomial(m: Monomial, coeff: f64) -> Self {
        let mut p = Self::zero();
        p.add_term(m, coeff);
        p
    }

    pub fn constant(c: f64, num_straddles: usize, n: usize) -> Self {
        Self::from_monomial(Monomial::unit(num_straddles, n), c)
    }

    pub fn add_term(&mut self, m: Monomial, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(m) {
            Entry::Vacant(e) => {
                e.insert(coeff);
            }
            Entry::Occupied(mut e) => {
                *e.get_mut() += coeff;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &PolyElement) {
        for (m, c) in &other.terms {
            self.add_term(m.clone(), *c);
        }
    }

    pub fn scale(&self, s: f64) -> PolyElement {
        let mut out = Self::zero();
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c * s);
        }
        out
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn evaluate(&self, point: &[f64], market: &MarketSpec) -> Result<f64, SemigroupError> {
        let mut v = 0.0;
        for (m, c) in &self.terms {
            v += c * m.evaluate(point, market)?;
        }
        Ok(v)
    }

    /// Product of two algebra elements, canonicalizing each monomial pair.
    pub fn mul(&self, other: &PolyElement, reduce: bool, market: &MarketSpec) -> PolyElement {
        let mut out = Self::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let prod = multiply(ma, mb, reduce, market);
                for (m, c) in prod.terms {
                    out.add_term(m, ca * cb * c);
                }
            }
        }
        out
    }
}

impl std::fmt::Display for PolyElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in &self.terms {
            if first {
                write!(f, "{c}*{m}")?;
                first = false;
            } else if *c < 0.0 {
                write!(f, " - {}*{m}", -c)?;
            } else {
                write!(f, " + {c}*{m}")?;
            }
        }
        Ok(())
    }
}

/// The affine payoff `w·x - K` as an algebra element.
pub fn signed_basket_poly(j: usize, market: &MarketSpec) -> PolyElement {
    let ns = market.num_baskets();
    let n = market.n();
    let basket = &market.baskets[j];
    let mut p = PolyElement::constant(-basket.strike, ns, n);
    for (i, &w) in basket.weights.iter().enumerate() {
        p.add_term(Monomial::coord_gen(i, ns, n), w);
    }
    p
}

/// Canonicalize a free monomial: fold aliased straddle generators into their
/// representative, then (if `reduce`) rewrite every even straddle power
/// `s_j^{2q+r}` as `(w_j·x - K_j)^{2q} s_j^r`.
fn canonicalize(m: &Monomial, reduce: bool, market: &MarketSpec) -> PolyElement {
    let alias = market.straddle_alias();
    let mut folded = m.clone();
    for j in 0..folded.straddle.len() {
        let rep = alias[j];
        if rep != j && folded.straddle[j] > 0 {
            folded.straddle[rep] += folded.straddle[j];
            folded.straddle[j] = 0;
        }
    }
    if !reduce {
        return PolyElement::from_monomial(folded, 1.0);
    }

    let mut base = folded.clone();
    let mut expansions: Vec<(usize, u32)> = Vec::new();
    for (j, e) in folded.straddle.iter().enumerate() {
        let q = e / 2;
        base.straddle[j] = e % 2;
        if q > 0 {
            expansions.push((j, q));
        }
    }
    let mut out = PolyElement::from_monomial(base, 1.0);
    for (j, q) in expansions {
        let lin = signed_basket_poly(j, market);
        // (w·x - K)^{2q}: a polynomial in the coordinates only, so the
        // repeated products below cannot create new straddle squares.
        let mut pow = PolyElement::constant(1.0, market.num_baskets(), market.n());
        for _ in 0..(2 * q) {
            pow = pow.mul_free(&lin);
        }
        out = out.mul_free(&pow);
    }
    out
}

impl PolyElement {
    /// Product without re-canonicalization; valid when one factor is a
    /// coordinate-only polynomial.
    fn mul_free(&self, other: &PolyElement) -> PolyElement {
        let mut out = Self::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.free_mul(mb), ca * cb);
            }
        }
        out
    }
}

/// Semigroup product of two canonical monomials. With `reduce` off this is
/// the free-monoid product (one term); with it on, straddle squares are
/// expanded and the result is a canonical algebra element.
pub fn multiply(a: &Monomial, b: &Monomial, reduce: bool, market: &MarketSpec) -> PolyElement {
    canonicalize(&a.free_mul(b), reduce, market)
}

// ---------------------------------------------------------------------------
// Moment index
// ---------------------------------------------------------------------------

/// Bijection between canonical monomials of degree `<= degree_cap` and
/// moment-vector positions, in graded lexicographic order. Position 0 is the
/// unit monomial, so a moment vector `y` has `y[0] = 1` under the usual
/// normalization.
#[derive(Debug, Clone)]
pub struct MomentIndex {
    pub degree_cap: usize,
    pub mode: Mode,
    pub reduce: bool,
    market: MarketSpec,
    monomials: Vec<Monomial>,
    positions: HashMap<Monomial, usize>,
}

impl MomentIndex {
    /// Enumerate all canonical monomials of degree up to `d`.
    pub fn build(d: usize, mode: Mode, reduce: bool, market: &MarketSpec) -> Self {
        let alias = market.straddle_alias();
        let ns = market.num_baskets();
        let n = market.n();
        let mut monomials = Vec::new();
        let mut current = Monomial::unit(ns, n);
        enumerate(
            &mut monomials,
            &mut current,
            0,
            d,
            &alias,
            reduce,
            mode,
            ns,
            n,
        );
        monomials.sort();
        let positions = monomials
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Self { degree_cap: d, mode, reduce, market: market.clone(), monomials, positions }
    }

    pub fn market(&self) -> &MarketSpec {
        &self.market
    }

    /// Total number of indexed monomials, `s(degree_cap)`.
    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    /// Number of monomials of degree `<= d`: the size `s(d)` of the order-`d`
    /// basis. The graded order makes this a prefix of the index.
    pub fn count_up_to(&self, d: usize) -> usize {
        self.monomials.iter().take_while(|m| m.degree() <= d).count()
    }

    pub fn monomial(&self, pos: usize) -> &Monomial {
        &self.monomials[pos]
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }

    pub fn position(&self, m: &Monomial) -> Option<usize> {
        self.positions.get(m).copied()
    }

    /// Position lookup that reports the offending degree on a miss.
    pub fn require(&self, m: &Monomial) -> Result<usize, SemigroupError> {
        self.position(m)
            .ok_or(SemigroupError::NotInIndex { degree: m.degree(), cap: self.degree_cap })
    }

    /// One line per monomial: position, degree, text form.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for (i, m) in self.monomials.iter().enumerate() {
            let _ = writeln!(out, "{:>5}  deg {}  {}", i, m.degree(), m);
        }
        out
    }
}

/// Recursive enumeration over generator exponents. Aliased straddle slots
/// and (in compact mode) the auxiliary generator are pinned to zero;
/// reduced straddle exponents are capped at 1.
#[allow(clippy::too_many_arguments)]
fn enumerate(
    out: &mut Vec<Monomial>,
    current: &mut Monomial,
    gen: usize,
    remaining: usize,
    alias: &[usize],
    reduce: bool,
    mode: Mode,
    ns: usize,
    n: usize,
) {
    let total_gens = ns + n + 1;
    if gen == total_gens {
        out.push(current.clone());
        return;
    }
    let cap = if gen < ns {
        let j = gen;
        if alias[j] != j {
            0
        } else if reduce {
            1.min(remaining)
        } else {
            remaining
        }
    } else if gen < ns + n {
        remaining
    } else {
        match mode {
            Mode::Compact => 0,
            Mode::Unbounded => remaining,
        }
    };
    for e in 0..=(cap as u32) {
        if gen < ns {
            current.straddle[gen] = e;
        } else if gen < ns + n {
            current.x[gen - ns] = e;
        } else {
            current.aux = e;
        }
        enumerate(out, current, gen + 1, remaining - e as usize, alias, reduce, mode, ns, n);
    }
    // reset slot
    if gen < ns {
        current.straddle[gen] = 0;
    } else if gen < ns + n {
        current.x[gen - ns] = 0;
    } else {
        current.aux = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{BasketDef, MarketSpec, Support};
    use proptest::prelude::*;

    fn merton_market() -> MarketSpec {
        MarketSpec {
            forwards: vec![1.0],
            baskets: vec![BasketDef::new(vec![1.0], 1.0)],
            straddle_prices: vec![],
            support: Support::Compact { upper: vec![2.0] },
        }
    }

    fn two_asset_market() -> MarketSpec {
        MarketSpec {
            forwards: vec![1.0, 0.8],
            baskets: vec![
                BasketDef::new(vec![1.0, 1.0], 1.5),
                BasketDef::new(vec![1.0, 0.0], 0.9),
            ],
            straddle_prices: vec![0.4],
            support: Support::Compact { upper: vec![2.0, 2.0] },
        }
    }

    #[test]
    fn multiply_free_keeps_square() {
        let market = merton_market();
        let s0 = Monomial::straddle_gen(0, 1, 1);
        let p = multiply(&s0, &s0, false, &market);
        assert_eq!(p.num_terms(), 1);
        let (m, c) = p.terms().next().unwrap();
        assert_eq!(m.straddle, vec![2]);
        assert_eq!(c, 1.0);
    }

    #[test]
    fn multiply_reduced_expands_square() {
        // (x - 1)^2 = x^2 - 2x + 1.
        let market = merton_market();
        let s0 = Monomial::straddle_gen(0, 1, 1);
        let p = multiply(&s0, &s0, true, &market);
        let x2 = Monomial { straddle: vec![0], x: vec![2], aux: 0 };
        let x1 = Monomial { straddle: vec![0], x: vec![1], aux: 0 };
        let one = Monomial::unit(1, 1);
        let collected: Vec<(Monomial, f64)> = p.terms().map(|(m, c)| (m.clone(), c)).collect();
        assert_eq!(collected.len(), 3);
        assert!(collected.contains(&(x2, 1.0)));
        assert!(collected.contains(&(x1, -2.0)));
        assert!(collected.contains(&(one, 1.0)));
    }

    #[test]
    fn multiply_reduced_odd_parity_untouched() {
        let market = merton_market();
        let s0 = Monomial::straddle_gen(0, 1, 1);
        let x = Monomial::coord_gen(0, 1, 1);
        let p = multiply(&x, &s0, true, &market);
        assert_eq!(p.num_terms(), 1);
        let (m, c) = p.terms().next().unwrap();
        assert_eq!((m.straddle.clone(), m.x.clone()), (vec![1], vec![1]));
        assert_eq!(c, 1.0);
    }

    #[test]
    fn evaluate_unit_and_straddle() {
        let market = merton_market();
        let one = Monomial::unit(1, 1);
        assert_eq!(one.evaluate(&[7.3], &market).unwrap(), 1.0);
        let s0 = Monomial::straddle_gen(0, 1, 1);
        assert!((s0.evaluate(&[0.25], &market).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn evaluate_aux_weight() {
        // theta(2) = 1/(1 + 4 + 1) = 1/6; value = |2-1|/6.
        let market = merton_market();
        let m = Monomial { straddle: vec![1], x: vec![0], aux: 1 };
        let v = m.evaluate(&[2.0], &market).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_dimension_mismatch() {
        let market = merton_market();
        let one = Monomial::unit(1, 1);
        assert!(one.evaluate(&[1.0, 2.0], &market).is_err());
    }

    #[test]
    fn index_compact_free_degree_one() {
        let market = merton_market();
        let idx = MomentIndex::build(1, Mode::Compact, false, &market);
        assert_eq!(idx.len(), 3);
        assert!(idx.monomial(0).is_unit());
        assert_eq!(idx.monomial(1).straddle, vec![1]);
        assert_eq!(idx.monomial(2).x, vec![1]);
    }

    #[test]
    fn index_compact_reduced_degree_two() {
        // [1, s0, x, s0*x, x^2]; s0^2 is reduced away.
        let market = merton_market();
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        assert_eq!(idx.len(), 5);
        let shown: Vec<String> = idx.monomials().iter().map(|m| m.to_string()).collect();
        assert_eq!(shown, vec!["1", "s0", "x1", "s0*x1", "x1^2"]);
    }

    #[test]
    fn index_unbounded_free_degree_one() {
        let market = merton_market();
        let idx = MomentIndex::build(1, Mode::Unbounded, false, &market);
        let shown: Vec<String> = idx.monomials().iter().map(|m| m.to_string()).collect();
        assert_eq!(shown, vec!["1", "s0", "x1", "t"]);
    }

    #[test]
    fn index_matches_multiplicative_closure() {
        // Independent enumeration: close {1} under generator products up to
        // the degree cap and compare with the built index.
        let market = two_asset_market();
        for (reduce, d) in [(true, 3), (false, 3)] {
            let idx = MomentIndex::build(d, Mode::Compact, reduce, &market);
            let gens: Vec<Monomial> = (0..market.num_baskets())
                .map(|j| Monomial::straddle_gen(j, market.num_baskets(), market.n()))
                .chain((0..market.n()).map(|i| Monomial::coord_gen(i, market.num_baskets(), market.n())))
                .collect();
            let mut seen: std::collections::BTreeSet<Monomial> = Default::default();
            let mut frontier = vec![Monomial::unit(market.num_baskets(), market.n())];
            seen.insert(frontier[0].clone());
            for _ in 0..d {
                let mut next = Vec::new();
                for m in &frontier {
                    for g in &gens {
                        let p = multiply(m, g, reduce, &market);
                        for (prod, _) in p.terms() {
                            if prod.degree() <= d && seen.insert(prod.clone()) {
                                next.push(prod.clone());
                            }
                        }
                    }
                }
                frontier = next;
            }
            let mut expected: Vec<Monomial> = seen.into_iter().collect();
            expected.sort();
            assert_eq!(idx.monomials(), &expected[..], "reduce={reduce}");
        }
    }

    #[test]
    fn free_count_matches_binomial() {
        // Free mode over G generators: s(d) = C(G + d, d).
        fn binom(a: usize, b: usize) -> usize {
            let mut v = 1usize;
            for i in 0..b {
                v = v * (a - i) / (i + 1);
            }
            v
        }
        let market = two_asset_market();
        for d in 1..=4 {
            let idx = MomentIndex::build(d, Mode::Compact, false, &market);
            let g = market.num_baskets() + market.n();
            assert_eq!(idx.len(), binom(g + d, d));
            let idx_u = MomentIndex::build(d, Mode::Unbounded, false, &market);
            assert_eq!(idx_u.len(), binom(g + 1 + d, d));
        }
    }

    #[test]
    fn alias_folds_duplicate_generator() {
        let mut market = two_asset_market();
        // Make the priced basket identical to the target.
        market.baskets[1] = market.baskets[0].clone();
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        // No canonical monomial touches the aliased slot.
        assert!(idx.monomials().iter().all(|m| m.straddle[1] == 0));
        // s0 * s1 folds to s0^2 and reduces to coordinates.
        let s0 = Monomial::straddle_gen(0, 2, 2);
        let s1 = Monomial::straddle_gen(1, 2, 2);
        let p = multiply(&s0, &s1, true, &market);
        assert!(p.terms().all(|(m, _)| m.straddle.iter().all(|e| *e == 0)));
    }

    #[test]
    fn index_dump_lists_positions() {
        let market = merton_market();
        let idx = MomentIndex::build(1, Mode::Compact, true, &market);
        let dump = idx.dump();
        assert!(dump.lines().count() == 3);
        assert!(dump.contains("deg 0  1"));
    }

    // ---- property tests ----

    fn arb_monomial(ns: usize, n: usize, max_deg: u32) -> impl Strategy<Value = Monomial> {
        let per = 1 + max_deg / 2;
        (
            proptest::collection::vec(0..=per, ns),
            proptest::collection::vec(0..=per, n),
            0..=1u32,
        )
            .prop_map(|(straddle, x, aux)| Monomial { straddle, x, aux })
    }

    proptest! {
        #[test]
        fn homomorphism_property(
            a in arb_monomial(2, 2, 3),
            b in arb_monomial(2, 2, 3),
            px in 0.0..2.0f64,
            py in 0.0..2.0f64,
            reduce in proptest::bool::ANY,
        ) {
            let market = two_asset_market();
            let point = [px, py];
            let prod = multiply(&a, &b, reduce, &market);
            let lhs = prod.evaluate(&point, &market).unwrap();
            let rhs = a.evaluate(&point, &market).unwrap() * b.evaluate(&point, &market).unwrap();
            let scale = 1.0 + lhs.abs().max(rhs.abs());
            prop_assert!((lhs - rhs).abs() <= 1e-10 * scale);
        }

        #[test]
        fn multiply_commutative_associative(
            a in arb_monomial(2, 2, 2),
            b in arb_monomial(2, 2, 2),
            c in arb_monomial(2, 2, 2),
            reduce in proptest::bool::ANY,
        ) {
            let market = two_asset_market();
            let ab = multiply(&a, &b, reduce, &market);
            let ba = multiply(&b, &a, reduce, &market);
            prop_assert_eq!(&ab, &ba);
            // Associativity holds up to floating error in the expansion
            // coefficients, not bitwise.
            let c_poly = PolyElement::from_monomial(c.clone(), 1.0);
            let ab_c = ab.mul(&c_poly, reduce, &market);
            let bc = multiply(&b, &c, reduce, &market);
            let a_poly = PolyElement::from_monomial(a.clone(), 1.0);
            let a_bc = a_poly.mul(&bc, reduce, &market);
            let lhs: Vec<_> = ab_c.terms().map(|(m, v)| (m.clone(), v)).collect();
            let rhs: Vec<_> = a_bc.terms().map(|(m, v)| (m.clone(), v)).collect();
            prop_assert_eq!(lhs.len(), rhs.len());
            for ((ml, vl), (mr, vr)) in lhs.iter().zip(&rhs) {
                prop_assert_eq!(ml, mr);
                prop_assert!((vl - vr).abs() <= 1e-12 * (1.0 + vl.abs()));
            }
        }

        #[test]
        fn index_round_trip(d in 1usize..4, reduce in proptest::bool::ANY) {
            let market = two_asset_market();
            for mode in [Mode::Compact, Mode::Unbounded] {
                let idx = MomentIndex::build(d, mode, reduce, &market);
                for i in 0..idx.len() {
                    prop_assert_eq!(idx.position(idx.monomial(i)), Some(i));
                }
                // Grading: prefix property of s(d').
                for dd in 0..=d {
                    let k = idx.count_up_to(dd);
                    prop_assert!(idx.monomials()[..k].iter().all(|m| m.degree() <= dd));
                    prop_assert!(idx.monomials()[k..].iter().all(|m| m.degree() > dd));
                }
            }
        }
    }
}
