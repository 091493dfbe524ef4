//! Symbolic moment matrices `M_d(y)` and localizing matrices `M_d(g·y)`.
//!
//! Entries are sparse linear forms in the moment vector rather than single
//! positions: with square reduction on, the product of two basis monomials
//! is a multi-term algebra element, so one matrix entry can reference
//! several moments. With reduction off every entry is a single term.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::semigroup::{multiply, MomentIndex, PolyElement};

#[derive(Debug, Error)]
pub enum MomentError {
    #[error("index with degree cap {cap} too small: need degree {need}")]
    IndexTooSmall { cap: usize, need: usize },
    #[error("moment vector has length {got}, matrix references position {need}")]
    DimensionMismatch { got: usize, need: usize },
}

/// Sparse linear form `Σ coeff · y[pos]` over moment positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearForm {
    terms: BTreeMap<usize, f64>,
}

impl LinearForm {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn single(pos: usize, coeff: f64) -> Self {
        let mut f = Self::default();
        f.add(pos, coeff);
        f
    }

    pub fn add(&mut self, pos: usize, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(pos) {
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

    pub fn add_scaled(&mut self, other: &LinearForm, s: f64) {
        for (&p, &c) in &other.terms {
            self.add(p, c * s);
        }
    }

    /// Map an algebra element to a linear form through the moment index.
    pub fn from_poly(p: &PolyElement, idx: &MomentIndex) -> Result<Self, MomentError> {
        let mut f = Self::default();
        for (m, c) in p.terms() {
            let pos = idx
                .position(m)
                .ok_or(MomentError::IndexTooSmall { cap: idx.degree_cap, need: m.degree() })?;
            f.add(pos, c);
        }
        Ok(f)
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.terms.iter().map(|(&p, &c)| (p, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn max_position(&self) -> Option<usize> {
        self.terms.keys().next_back().copied()
    }

    pub fn evaluate(&self, y: &[f64]) -> Result<f64, MomentError> {
        let mut v = 0.0;
        for (&p, &c) in &self.terms {
            let yp = y.get(p).ok_or(MomentError::DimensionMismatch { got: y.len(), need: p })?;
            v += c * yp;
        }
        Ok(v)
    }
}

impl std::fmt::Display for LinearForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (&p, &c) in &self.terms {
            if first {
                write!(f, "{c}*y[{p}]")?;
                first = false;
            } else if c < 0.0 {
                write!(f, " - {}*y[{p}]", -c)?;
            } else {
                write!(f, " + {c}*y[{p}]")?;
            }
        }
        Ok(())
    }
}

/// Symmetric matrix of linear forms in the moment vector.
#[derive(Debug, Clone)]
pub struct SymbolicMatrix {
    pub dim: usize,
    entries: Vec<LinearForm>,
}

impl SymbolicMatrix {
    pub fn entry(&self, i: usize, j: usize) -> &LinearForm {
        &self.entries[i * self.dim + j]
    }

    /// Numeric instantiation at a concrete moment vector.
    pub fn instantiate(&self, y: &[f64]) -> Result<DMatrix<f64>, MomentError> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.entry(i, j).evaluate(y)?;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }

    /// Text dump, one entry per line.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for i in 0..self.dim {
            for j in i..self.dim {
                let _ = writeln!(out, "({i},{j}): {}", self.entry(i, j));
            }
        }
        out
    }
}

/// The moment matrix `M_d(y)`: entry `(i, j)` is the linear form of the
/// product of the `i`-th and `j`-th basis monomials. Requires the index to
/// cover degree `2d`.
pub fn moment_matrix(idx: &MomentIndex, d: usize) -> Result<SymbolicMatrix, MomentError> {
    if idx.degree_cap < 2 * d {
        return Err(MomentError::IndexTooSmall { cap: idx.degree_cap, need: 2 * d });
    }
    let one = PolyElement::constant(1.0, idx.market().num_baskets(), idx.market().n());
    localizing_matrix(idx, &one, d)
}

/// The localizing matrix `M_d(g·y)`: entry `(i, j)` is the linear form of
/// `z_i · z_j · g`. Requires `deg(g) + 2d` within the index cap.
pub fn localizing_matrix(
    idx: &MomentIndex,
    g: &PolyElement,
    d: usize,
) -> Result<SymbolicMatrix, MomentError> {
    let need = g.degree() + 2 * d;
    if idx.degree_cap < need {
        return Err(MomentError::IndexTooSmall { cap: idx.degree_cap, need });
    }
    let dim = idx.count_up_to(d);
    let reduce = idx.reduce;
    let market = idx.market();
    let mut entries = vec![LinearForm::zero(); dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let prod = multiply(idx.monomial(i), idx.monomial(j), reduce, market);
            let full = prod.mul(g, reduce, market);
            let form = LinearForm::from_poly(&full, idx)?;
            entries[i * dim + j] = form.clone();
            entries[j * dim + i] = form;
        }
    }
    Ok(SymbolicMatrix { dim, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{BasketDef, MarketSpec, Support};
    use crate::semigroup::{Mode, Monomial};

    fn merton_market() -> MarketSpec {
        MarketSpec {
            forwards: vec![1.0],
            baskets: vec![BasketDef::new(vec![1.0], 1.0)],
            straddle_prices: vec![],
            support: Support::Compact { upper: vec![2.0] },
        }
    }

    fn pos(idx: &MomentIndex, text: &str) -> usize {
        idx.monomials()
            .iter()
            .position(|m| m.to_string() == text)
            .unwrap()
    }

    #[test]
    fn moment_matrix_free_single_terms() {
        let market = merton_market();
        let idx = MomentIndex::build(2, Mode::Compact, false, &market);
        let m = moment_matrix(&idx, 1).unwrap();
        assert_eq!(m.dim, 3); // [1, s0, x]
        // Entry (1,2) = y at the position of s0*x.
        let e = m.entry(1, 2);
        assert_eq!(e.num_terms(), 1);
        let (p, c) = e.terms().next().unwrap();
        assert_eq!(p, pos(&idx, "s0*x1"));
        assert_eq!(c, 1.0);
        // With reduce off, every entry is a single term.
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.entry(i, j).num_terms(), 1);
            }
        }
        // Entry (0,0) = y[0], the unit moment.
        assert_eq!(m.entry(0, 0), &LinearForm::single(0, 1.0));
    }

    #[test]
    fn moment_matrix_reduced_square_entry() {
        let market = merton_market();
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        let m = moment_matrix(&idx, 1).unwrap();
        // (s0, s0): y(x^2) - 2 y(x) + y(1).
        let e = m.entry(1, 1);
        let mut want = LinearForm::zero();
        want.add(pos(&idx, "x1^2"), 1.0);
        want.add(pos(&idx, "x1"), -2.0);
        want.add(0, 1.0);
        assert_eq!(e, &want);
    }

    #[test]
    fn moment_matrix_needs_degree() {
        let market = merton_market();
        let idx = MomentIndex::build(1, Mode::Compact, true, &market);
        assert!(matches!(
            moment_matrix(&idx, 1),
            Err(MomentError::IndexTooSmall { .. })
        ));
    }

    #[test]
    fn localizing_with_unit_equals_moment_matrix() {
        let market = merton_market();
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        let g = PolyElement::constant(1.0, 1, 1);
        let a = localizing_matrix(&idx, &g, 1).unwrap();
        let b = moment_matrix(&idx, 1).unwrap();
        for i in 0..a.dim {
            for j in 0..a.dim {
                assert_eq!(a.entry(i, j), b.entry(i, j));
            }
        }
    }

    #[test]
    fn localizing_degree_zero() {
        let market = merton_market();
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        let g = PolyElement::from_monomial(Monomial::coord_gen(0, 1, 1), 1.0);
        let m = localizing_matrix(&idx, &g, 0).unwrap();
        assert_eq!(m.dim, 1);
        assert_eq!(m.entry(0, 0), &LinearForm::single(pos(&idx, "x1"), 1.0));
    }

    #[test]
    fn localizing_compactness_row() {
        // g = beta - x - s0 with beta = 3: entry = 3 y[1] - y(x) - y(s0).
        let market = merton_market();
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        let mut g = PolyElement::constant(3.0, 1, 1);
        g.add_term(Monomial::coord_gen(0, 1, 1), -1.0);
        g.add_term(Monomial::straddle_gen(0, 1, 1), -1.0);
        let m = localizing_matrix(&idx, &g, 0).unwrap();
        let mut want = LinearForm::zero();
        want.add(0, 3.0);
        want.add(pos(&idx, "x1"), -1.0);
        want.add(pos(&idx, "s0"), -1.0);
        assert_eq!(m.entry(0, 0), &want);
    }

    #[test]
    fn localizing_linear_in_g() {
        let market = merton_market();
        let idx = MomentIndex::build(3, Mode::Compact, true, &market);
        let g1 = PolyElement::from_monomial(Monomial::coord_gen(0, 1, 1), 1.0);
        let g2 = PolyElement::from_monomial(Monomial::straddle_gen(0, 1, 1), 2.0);
        let mut g12 = g1.clone();
        g12.add_assign(&g2);
        let a = localizing_matrix(&idx, &g1, 1).unwrap();
        let b = localizing_matrix(&idx, &g2, 1).unwrap();
        let c = localizing_matrix(&idx, &g12, 1).unwrap();
        for i in 0..c.dim {
            for j in 0..c.dim {
                let mut sum = a.entry(i, j).clone();
                sum.add_scaled(b.entry(i, j), 1.0);
                assert_eq!(&sum, c.entry(i, j));
            }
        }
    }

    #[test]
    fn hankel_structure() {
        // Entries depend only on the product monomial, not on (i, j).
        let market = merton_market();
        let idx = MomentIndex::build(4, Mode::Compact, false, &market);
        let m = moment_matrix(&idx, 2).unwrap();
        let mut by_product: std::collections::HashMap<Monomial, LinearForm> = Default::default();
        for i in 0..m.dim {
            for j in 0..m.dim {
                let prod = idx.monomial(i).free_mul(idx.monomial(j));
                let e = m.entry(i, j).clone();
                if let Some(prev) = by_product.insert(prod, e.clone()) {
                    assert_eq!(prev, e);
                }
            }
        }
    }

    #[test]
    fn instantiate_dirac_at_one() {
        // Moments of the Dirac mass at x = 1 (target K = 1): s0(1) = 0.
        let market = merton_market();
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        let y: Vec<f64> = idx
            .monomials()
            .iter()
            .map(|m| m.evaluate(&[1.0], &market).unwrap())
            .collect();
        let m = moment_matrix(&idx, 1).unwrap().instantiate(&y).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m, want);
        assert_eq!(m.rank(1e-12), 1);
    }

    #[test]
    fn instantiate_two_point_measure() {
        // Uniform measure on {0, 2}: direct expectations give
        // y(s0) = 1, y(x) = 1, y(s0*x) = 1, y(x^2) = 2, and the reduced
        // square moment y(s0^2) = y(x^2) - 2y(x) + 1 = 1.
        let market = merton_market();
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        let atoms = [([0.0], 0.5), ([2.0], 0.5)];
        let y: Vec<f64> = idx
            .monomials()
            .iter()
            .map(|m| {
                atoms
                    .iter()
                    .map(|(x, w)| w * m.evaluate(x, &market).unwrap())
                    .sum()
            })
            .collect();
        let m = moment_matrix(&idx, 1).unwrap().instantiate(&y).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0]);
        assert_eq!(m, want);
        let eig = m.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn instantiate_unit_vector() {
        let market = merton_market();
        // Free mode: the unit vector gives exactly e1*e1^T.
        let idx = MomentIndex::build(2, Mode::Compact, false, &market);
        let mut y = vec![0.0; idx.len()];
        y[0] = 1.0;
        let m = moment_matrix(&idx, 1).unwrap().instantiate(&y).unwrap();
        let mut want = DMatrix::zeros(3, 3);
        want[(0, 0)] = 1.0;
        assert_eq!(m, want);
        // Reduced mode: the (s0, s0) entry additionally picks up the
        // constant K^2 * y[0] from the square expansion; still PSD.
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        let mut y = vec![0.0; idx.len()];
        y[0] = 1.0;
        let m = moment_matrix(&idx, 1).unwrap().instantiate(&y).unwrap();
        want = DMatrix::zeros(3, 3);
        want[(0, 0)] = 1.0;
        want[(1, 1)] = 1.0;
        assert_eq!(m, want);
    }

    #[test]
    fn instantiate_short_vector_rejected() {
        let market = merton_market();
        let idx = MomentIndex::build(2, Mode::Compact, true, &market);
        let m = moment_matrix(&idx, 1).unwrap();
        assert!(matches!(
            m.instantiate(&[1.0, 0.0]),
            Err(MomentError::DimensionMismatch { .. })
        ));
    }
}
