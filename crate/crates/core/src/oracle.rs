//! Independent ground truth at desk scale: a discretized linear program
//! over grid-supported measures, a discrete-measure pricer, and a generator
//! of arbitrage-free random instances.
//!
//! The grid LP is an inner approximation of the measure problem (only
//! grid-supported measures compete), while the moment relaxations are outer
//! approximations, so `[lp_min, lp_max] ⊆ [sdp_lower, sdp_upper]` up to
//! solver tolerance; that sandwich is the main cross-check this module
//! exists for.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::market::{BasketDef, MarketSpec, Support};
use crate::solver::{BlockSpec, SolveStatus, SolverBackend, StandardForm};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("point has dimension {got}, market has {want} assets")]
    DimensionMismatch { got: usize, want: usize },
    #[error("grid LP infeasible: observed prices are not attainable by any measure on the grid (status {status:?}); refine the grid before concluding arbitrage")]
    GridInfeasible { status: SolveStatus },
    #[error("oracle is restricted to n <= 3 assets, got {0}")]
    TooManyAssets(usize),
    #[error("grid of {0} points exceeds the 100000-point oracle budget")]
    GridTooLarge(usize),
    #[error("operation requires a compact support box")]
    UnboundedSupport,
    #[error("solver failure: {0}")]
    Solver(#[from] crate::solver::SolverError),
}

/// Finitely supported probability measure on the asset space.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    pub atoms: Vec<(Vec<f64>, f64)>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<(Vec<f64>, f64)>) -> Self {
        debug_assert!(
            (atoms.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12,
            "weights must sum to one"
        );
        Self { atoms }
    }

    /// Expectation of an arbitrary payoff.
    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|(x, w)| w * f(x)).sum()
    }

    /// Moment vector over a moment index (for feasibility cross-checks).
    pub fn moments(
        &self,
        idx: &crate::semigroup::MomentIndex,
    ) -> Result<Vec<f64>, crate::semigroup::SemigroupError> {
        idx.monomials()
            .iter()
            .map(|m| {
                let mut v = 0.0;
                for (x, w) in &self.atoms {
                    v += w * m.evaluate(x, idx.market())?;
                }
                Ok(v)
            })
            .collect()
    }
}

/// Straddle price of a basket under a discrete measure.
pub fn price(measure: &DiscreteMeasure, basket: &BasketDef) -> Result<f64, OracleError> {
    for (x, _) in &measure.atoms {
        if x.len() != basket.weights.len() {
            return Err(OracleError::DimensionMismatch {
                got: x.len(),
                want: basket.weights.len(),
            });
        }
    }
    Ok(measure.expect(|x| basket.payoff(x)))
}

/// The model-free floor `|w_0·p - K_0|` on the target straddle price.
pub fn jensen_floor(market: &MarketSpec) -> f64 {
    market.target().signed_value(&market.forwards).abs()
}

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub points_per_axis: usize,
}

impl GridSpec {
    pub fn new(points_per_axis: usize) -> Self {
        debug_assert!(points_per_axis >= 2);
        Self { points_per_axis }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LpBounds {
    pub min: f64,
    pub max: f64,
    pub grid_points: usize,
}

/// Build the grid over the support box. In one dimension the strike kinks
/// of every basket are inserted so piecewise-linear payoffs are represented
/// without discretization bias; in higher dimensions the uniform product
/// grid is used as documented.
pub fn build_grid(market: &MarketSpec, grid: &GridSpec) -> Result<Vec<Vec<f64>>, OracleError> {
    let Support::Compact { upper } = &market.support else {
        return Err(OracleError::UnboundedSupport);
    };
    let n = market.n();
    if n > 3 {
        return Err(OracleError::TooManyAssets(n));
    }
    let pp = grid.points_per_axis.max(2);
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (i, &b) in upper.iter().enumerate() {
        let mut ticks: Vec<f64> = (0..pp).map(|k| b * k as f64 / (pp - 1) as f64).collect();
        if n == 1 {
            for basket in &market.baskets {
                let w = basket.weights[i];
                if w != 0.0 {
                    let kink = basket.strike / w;
                    if kink > 0.0 && kink < b {
                        ticks.push(kink);
                    }
                }
            }
            ticks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ticks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        }
        axes.push(ticks);
    }
    let mut points = vec![vec![]];
    for axis in &axes {
        let mut next = Vec::with_capacity(points.len() * axis.len());
        for p in &points {
            for &t in axis {
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        points = next;
    }
    if points.len() > 100_000 {
        return Err(OracleError::GridTooLarge(points.len()));
    }
    Ok(points)
}

/// Best and worst target price over probability measures supported on the
/// grid and repricing every quoted instrument exactly. This is the primal
/// of the pricing problem restricted to grid measures, solved as two LPs
/// through the conic backend (nonnegativity as 1×1 blocks).
pub fn lp_bounds(
    market: &MarketSpec,
    grid: &GridSpec,
    backend: &dyn SolverBackend,
    tol: f64,
) -> Result<LpBounds, OracleError> {
    let points = build_grid(market, grid)?;
    let nv = points.len();
    let m = market.num_priced();
    let n = market.n();

    // Rows: mass = 1, forwards, straddle prices.
    let me = 1 + n + m;
    let mut eq = DMatrix::zeros(me, nv);
    let mut rhs = DVector::zeros(me);
    for (g, x) in points.iter().enumerate() {
        eq[(0, g)] = 1.0;
        for i in 0..n {
            eq[(1 + i, g)] = x[i];
        }
        for j in 1..=m {
            eq[(1 + n + j - 1, g)] = market.baskets[j].payoff(x);
        }
    }
    rhs[0] = 1.0;
    for i in 0..n {
        rhs[1 + i] = market.forwards[i];
    }
    for j in 1..=m {
        rhs[1 + n + j - 1] = market.straddle_prices[j - 1];
    }

    let blocks: Vec<BlockSpec> = (0..nv)
        .map(|g| BlockSpec { dim: 1, coeffs: vec![(g, DMatrix::from_element(1, 1, 1.0))] })
        .collect();
    let target: Vec<f64> = points.iter().map(|x| market.target().payoff(x)).collect();

    let mut values = [0.0f64; 2];
    for (slot, sign) in [(0usize, 1.0f64), (1, -1.0)] {
        let sf = StandardForm {
            num_vars: nv,
            c: DVector::from_iterator(nv, target.iter().map(|t| sign * t)),
            eq: eq.clone(),
            rhs: rhs.clone(),
            blocks: blocks.clone(),
        };
        let sol = backend.solve(&sf, tol, 200)?;
        match sol.status {
            SolveStatus::Optimal => {}
            status => return Err(OracleError::GridInfeasible { status }),
        }
        values[slot] = sign * sol.objective;
    }
    Ok(LpBounds { min: values[0], max: values[1], grid_points: nv })
}

/// Draw a random market together with the discrete measure that prices it,
/// hence arbitrage-free by construction. Atoms are snapped to the lattice
/// with `lattice_points` ticks per axis so the generating measure is
/// representable on the oracle grid of the same resolution.
pub fn random_consistent_market(
    seed: u64,
    n: usize,
    m: usize,
    box_upper: &[f64],
    lattice_points: usize,
) -> (MarketSpec, DiscreteMeasure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pp = lattice_points.max(4);
    let num_atoms = rng.random_range(3..=6);

    // Interior lattice atoms keep every forward strictly inside (0, b).
    let mut atoms: Vec<(Vec<f64>, f64)> = Vec::with_capacity(num_atoms);
    let mut weights: Vec<f64> = (0..num_atoms).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    for &w in &weights {
        let x: Vec<f64> = box_upper
            .iter()
            .map(|&b| {
                let tick = rng.random_range(1..pp - 1);
                b * tick as f64 / (pp - 1) as f64
            })
            .collect();
        atoms.push((x, w));
    }
    let measure = DiscreteMeasure::new(atoms);

    let forwards: Vec<f64> = (0..n).map(|i| measure.expect(|x| x[i])).collect();

    let mut baskets = Vec::with_capacity(m + 1);
    for _ in 0..=m {
        let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0f64)).collect();
        // Keep the basket nondegenerate.
        if w.iter().all(|v| v.abs() < 0.2) {
            w[rng.random_range(0..n)] = 1.0;
        }
        let hi: f64 = w
            .iter()
            .zip(box_upper)
            .map(|(wi, b)| if *wi > 0.0 { wi * b } else { 0.0 })
            .sum();
        let strike = rng.random_range(0.0..hi.max(0.1));
        baskets.push(BasketDef::new(w, strike));
    }
    let straddle_prices: Vec<f64> = (1..=m)
        .map(|j| measure.expect(|x| baskets[j].payoff(x)))
        .collect();

    let market = MarketSpec {
        forwards,
        baskets,
        straddle_prices,
        support: Support::Compact { upper: box_upper.to_vec() },
    };
    (market, measure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::DenseIpm;

    fn merton_market() -> MarketSpec {
        MarketSpec {
            forwards: vec![1.0],
            baskets: vec![BasketDef::new(vec![1.0], 1.0)],
            straddle_prices: vec![],
            support: Support::Compact { upper: vec![2.0] },
        }
    }

    #[test]
    fn price_dirac_at_strike() {
        let m = DiscreteMeasure::new(vec![(vec![1.0], 1.0)]);
        assert_eq!(price(&m, &BasketDef::new(vec![1.0], 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn price_two_point() {
        let m = DiscreteMeasure::new(vec![(vec![0.0], 0.5), (vec![2.0], 0.5)]);
        assert_eq!(price(&m, &BasketDef::new(vec![1.0], 1.0)).unwrap(), 1.0);
        assert_eq!(price(&m, &BasketDef::new(vec![1.0], 0.5)).unwrap(), 1.0);
    }

    #[test]
    fn price_dimension_mismatch() {
        let m = DiscreteMeasure::new(vec![(vec![1.0, 1.0], 1.0)]);
        assert!(matches!(
            price(&m, &BasketDef::new(vec![1.0], 1.0)),
            Err(OracleError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn jensen_floor_examples() {
        let mut market = merton_market();
        assert_eq!(jensen_floor(&market), 0.0);
        market.baskets[0].strike = 3.0;
        assert_eq!(jensen_floor(&market), 2.0);
        let market2 = MarketSpec {
            forwards: vec![1.0, 1.0],
            baskets: vec![BasketDef::new(vec![1.0, 1.0], 1.0)],
            straddle_prices: vec![],
            support: Support::Unbounded,
        };
        assert_eq!(jensen_floor(&market2), 1.0);
    }

    #[test]
    fn grid_includes_kinks_in_one_dim() {
        let mut market = merton_market();
        market.baskets[0].strike = 0.77;
        let pts = build_grid(&market, &GridSpec::new(5)).unwrap();
        assert!(pts.iter().any(|p| (p[0] - 0.77).abs() < 1e-12));
    }

    #[test]
    fn merton_lp_bounds() {
        // 201 uniform points on [0,2] (the strike 1.0 is already a tick):
        // min 0 by the Dirac at 1, max 1 by the {0,2} two-point measure.
        let market = merton_market();
        let b = lp_bounds(&market, &GridSpec::new(201), &DenseIpm::default(), 1e-11).unwrap();
        assert_eq!(b.grid_points, 201);
        assert!(b.min.abs() <= 1e-9, "min {}", b.min);
        assert!((b.max - 1.0).abs() <= 1e-9, "max {}", b.max);
    }

    #[test]
    fn quoted_target_pins_both_bounds() {
        // The target coincides with a quoted basket: both bounds collapse
        // to the quote.
        let market = MarketSpec {
            forwards: vec![1.0],
            baskets: vec![BasketDef::new(vec![1.0], 1.0), BasketDef::new(vec![1.0], 1.0)],
            straddle_prices: vec![0.4],
            support: Support::Compact { upper: vec![2.0] },
        };
        let b = lp_bounds(&market, &GridSpec::new(201), &DenseIpm::default(), 1e-11).unwrap();
        assert!((b.min - 0.4).abs() < 1e-8 && (b.max - 0.4).abs() < 1e-8);
    }

    #[test]
    fn impossible_price_is_infeasible() {
        // Straddle priced above its box maximum: no grid measure matches.
        let market = MarketSpec {
            forwards: vec![1.0],
            baskets: vec![BasketDef::new(vec![1.0], 1.0), BasketDef::new(vec![1.0], 1.0)],
            straddle_prices: vec![2.5],
            support: Support::Compact { upper: vec![2.0] },
        };
        assert!(matches!(
            lp_bounds(&market, &GridSpec::new(101), &DenseIpm::default(), 1e-11),
            Err(OracleError::GridInfeasible { .. })
        ));
    }

    #[test]
    fn jensen_violation_is_infeasible_on_grid() {
        let market = MarketSpec {
            forwards: vec![1.0],
            baskets: vec![BasketDef::new(vec![1.0], 1.0), BasketDef::new(vec![1.0], 3.0)],
            straddle_prices: vec![1.95],
            support: Support::Compact { upper: vec![4.0] },
        };
        assert!(matches!(
            lp_bounds(&market, &GridSpec::new(101), &DenseIpm::default(), 1e-11),
            Err(OracleError::GridInfeasible { .. })
        ));
    }

    #[test]
    fn random_markets_validate_clean() {
        for seed in 0..20 {
            let (market, measure) = random_consistent_market(seed, 2, 2, &[2.0, 1.5], 41);
            assert!(market.validate().is_empty(), "seed {seed}");
            let target_price = price(&measure, market.target()).unwrap();
            assert!(target_price.is_finite());
        }
    }

    #[test]
    fn generated_price_inside_lp_interval() {
        for seed in [7, 21, 33] {
            let (market, measure) = random_consistent_market(seed, 1, 1, &[2.0], 41);
            let b = lp_bounds(&market, &GridSpec::new(41), &DenseIpm::default(), 1e-10).unwrap();
            let p = price(&measure, market.target()).unwrap();
            assert!(
                b.min - 1e-7 <= p && p <= b.max + 1e-7,
                "seed {seed}: {p} outside [{}, {}]",
                b.min,
                b.max
            );
        }
    }

    #[test]
    fn lp_interval_shrinks_with_more_quotes() {
        // Dropping the quoted basket can only loosen the interval.
        let (market, _) = random_consistent_market(5, 1, 1, &[2.0], 41);
        let full = lp_bounds(&market, &GridSpec::new(41), &DenseIpm::default(), 1e-10).unwrap();
        let mut reduced = market.clone();
        reduced.baskets.truncate(1);
        reduced.straddle_prices.clear();
        let loose = lp_bounds(&reduced, &GridSpec::new(41), &DenseIpm::default(), 1e-10).unwrap();
        assert!(full.min >= loose.min - 1e-8);
        assert!(full.max <= loose.max + 1e-8);
    }

    #[test]
    fn grid_refinement_is_monotone() {
        let (market, _) = random_consistent_market(11, 1, 1, &[2.0], 21);
        let coarse = lp_bounds(&market, &GridSpec::new(21), &DenseIpm::default(), 1e-10).unwrap();
        let fine = lp_bounds(&market, &GridSpec::new(41), &DenseIpm::default(), 1e-10).unwrap();
        assert!(fine.min <= coarse.min + 1e-7);
        assert!(fine.max >= coarse.max - 1e-7);
    }
}
