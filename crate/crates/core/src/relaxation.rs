//! Assembly of the order-N moment relaxations of the consistent-pricing
//! problem, compact and unbounded flavors, and the solve entry point.
//!
//! Compact case: variables are the moments `y` of all canonical monomials
//! up to degree `2N`; blocks are the moment matrix at order `N`, localizing
//! matrices at order `N-1` for the chosen generator set, call-put-parity
//! localizers for priced baskets, and the compactness localizer
//! `β - Σ e_k`. Localizing matrices are built one order below the moment
//! matrix so that every referenced moment stays within degree `2N`.
//!
//! Unbounded case: same construction over the product semigroup with the
//! auxiliary damping generator, no compactness block, and the moment
//! linkage `y(s,k) = y(s,k+1) + Σ_i y(e_i² s, k+1)` imposed for every
//! monomial whose linked terms all exist at degree `2N`.

use thiserror::Error;

use crate::market::{MarketError, MarketSpec};
use crate::moments::{localizing_matrix, moment_matrix, LinearForm, MomentError, SymbolicMatrix};
use crate::semigroup::{multiply, Mode, MomentIndex, Monomial, PolyElement, SemigroupError};
use crate::solver::{canonicalize, ConicSolution, SolveStatus, SolverBackend, SolverError};

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("relaxation order must be at least 1, got {0}")]
    InfeasibleDegree(usize),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error("solver failure: {0}")]
    SolverFailure(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

/// Which generators get localizing matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalizerSet {
    /// Coordinates only, as in the corollary statement.
    Paper,
    /// Every generator (straddles included) plus call-put-parity localizers
    /// for priced baskets; valid because all of them are nonnegative payoffs,
    /// and strictly tighter.
    Full,
}

#[derive(Debug, Clone)]
pub struct RelaxationSpec {
    pub order: usize,
    pub mode: Mode,
    pub side: Side,
    pub reduce: bool,
    pub localizer_set: LocalizerSet,
    pub beta_override: Option<f64>,
}

impl RelaxationSpec {
    pub fn new(order: usize, mode: Mode, side: Side) -> Self {
        Self { order, mode, side, reduce: true, localizer_set: LocalizerSet::Full, beta_override: None }
    }
}

/// Why an equality row exists; used to map duals back to portfolio weights.
#[derive(Debug, Clone, PartialEq)]
pub enum EqKind {
    Normalization,
    Forward(usize),
    StraddlePrice(usize),
    Linkage(Monomial),
}

#[derive(Debug, Clone)]
pub struct Equality {
    pub form: LinearForm,
    pub rhs: f64,
    pub kind: EqKind,
}

/// One PSD block with the localizer it came from.
#[derive(Debug, Clone)]
pub struct PsdBlock {
    pub label: String,
    /// The nonnegative weight function `g`; the unit polynomial for the
    /// moment matrix itself.
    pub localizer: PolyElement,
    /// Matrix order: the basis runs over monomials of degree `<= order`.
    pub order: usize,
    pub matrix: SymbolicMatrix,
}

/// An assembled relaxation in solver-ready form, with enough structure
/// retained to interpret dual solutions.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub num_vars: usize,
    /// Minimized linear objective: `+y(s_0)` for lower bounds, `-y(s_0)`
    /// for upper bounds.
    pub objective: LinearForm,
    pub equalities: Vec<Equality>,
    pub blocks: Vec<PsdBlock>,
    pub side: Side,
    pub index: MomentIndex,
    pub beta: Option<f64>,
    pub order: usize,
}

impl ConicProblem {
    /// Sparse text export for cross-checking against external solvers:
    /// a comment header naming the blocks, then the standard-form body.
    pub fn export_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "# conic problem: side {:?}, order {}", self.side, self.order);
        for (k, b) in self.blocks.iter().enumerate() {
            let _ = writeln!(out, "# block {k}: {} (dim {})", b.label, b.matrix.dim);
        }
        for (r, e) in self.equalities.iter().enumerate() {
            let _ = writeln!(out, "# eq {r}: {:?}", e.kind);
        }
        out.push_str(&canonicalize(self).export_text());
        out
    }
}

/// Result of solving one relaxation.
#[derive(Debug, Clone)]
pub struct BoundResult {
    /// The price bound, already oriented: a lower bound for `Side::Lower`,
    /// an upper bound for `Side::Upper`.
    pub value: f64,
    pub y: Vec<f64>,
    pub solution: ConicSolution,
    pub status: SolveStatus,
}

fn canonical_poly(m: &Monomial, idx: &MomentIndex) -> PolyElement {
    let unit = Monomial::unit(idx.market().num_baskets(), idx.market().n());
    multiply(m, &unit, idx.reduce, idx.market())
}

fn canonical_form(m: &Monomial, idx: &MomentIndex) -> Result<LinearForm, MomentError> {
    LinearForm::from_poly(&canonical_poly(m, idx), idx)
}

/// Localizer polynomials for the generator set, parity localizers included
/// in `Full` mode.
fn localizer_polys(market: &MarketSpec, set: LocalizerSet) -> Vec<(String, PolyElement)> {
    let ns = market.num_baskets();
    let n = market.n();
    let alias = market.straddle_alias();
    let mut out = Vec::new();
    if set == LocalizerSet::Full {
        for j in 0..ns {
            if alias[j] == j {
                out.push((
                    format!("loc_s{j}"),
                    PolyElement::from_monomial(Monomial::straddle_gen(j, ns, n), 1.0),
                ));
            }
        }
    }
    for i in 0..n {
        out.push((
            format!("loc_x{}", i + 1),
            PolyElement::from_monomial(Monomial::coord_gen(i, ns, n), 1.0),
        ));
    }
    if set == LocalizerSet::Full {
        // |w·x - K| ∓ (w·x - K) >= 0 pointwise: the two parity localizers
        // tie each priced straddle to its underlying basket value.
        for j in 1..ns {
            let rep = alias[j];
            let s_j = PolyElement::from_monomial(Monomial::straddle_gen(rep, ns, n), 1.0);
            let signed = crate::semigroup::signed_basket_poly(j, market);
            let mut lo = s_j.clone();
            lo.add_assign(&signed.scale(-1.0));
            let mut hi = s_j;
            hi.add_assign(&signed);
            out.push((format!("parity_lo_s{j}"), lo));
            out.push((format!("parity_hi_s{j}"), hi));
        }
    }
    out
}

/// Shared equality rows: normalization, forwards, straddle prices.
fn price_equalities(idx: &MomentIndex) -> Result<Vec<Equality>, RelaxError> {
    let market = idx.market().clone();
    let ns = market.num_baskets();
    let n = market.n();
    let mut eqs = Vec::new();
    eqs.push(Equality {
        form: LinearForm::single(0, 1.0),
        rhs: 1.0,
        kind: EqKind::Normalization,
    });
    for i in 0..n {
        eqs.push(Equality {
            form: canonical_form(&Monomial::coord_gen(i, ns, n), idx)?,
            rhs: market.forwards[i],
            kind: EqKind::Forward(i),
        });
    }
    for j in 1..ns {
        eqs.push(Equality {
            form: canonical_form(&Monomial::straddle_gen(j, ns, n), idx)?,
            rhs: market.straddle_prices[j - 1],
            kind: EqKind::StraddlePrice(j),
        });
    }
    Ok(eqs)
}

fn objective_form(idx: &MomentIndex, side: Side) -> Result<LinearForm, RelaxError> {
    let market = idx.market();
    let target = Monomial::straddle_gen(0, market.num_baskets(), market.n());
    let mut form = canonical_form(&target, idx)?;
    if side == Side::Upper {
        let mut neg = LinearForm::zero();
        neg.add_scaled(&form, -1.0);
        form = neg;
    }
    Ok(form)
}

/// Order-N relaxation for compactly supported distributions.
pub fn assemble_compact(
    market: &MarketSpec,
    spec: &RelaxationSpec,
) -> Result<ConicProblem, RelaxError> {
    if spec.order < 1 {
        return Err(RelaxError::InfeasibleDegree(spec.order));
    }
    let n_ord = spec.order;
    let beta = match spec.beta_override {
        Some(b) => b,
        None => market.beta_bound()?,
    };
    let idx = MomentIndex::build(2 * n_ord, Mode::Compact, spec.reduce, market);
    let ns = market.num_baskets();
    let n = market.n();

    let mut blocks = Vec::new();
    blocks.push(PsdBlock {
        label: "moment".into(),
        localizer: PolyElement::constant(1.0, ns, n),
        order: n_ord,
        matrix: moment_matrix(&idx, n_ord)?,
    });
    for (label, g) in localizer_polys(market, spec.localizer_set) {
        blocks.push(PsdBlock {
            label,
            matrix: localizing_matrix(&idx, &g, n_ord - 1)?,
            localizer: g,
            order: n_ord - 1,
        });
    }
    // Compactness localizer β - Σ x_i - Σ_j s_j; aliased straddles fold into
    // their representative with multiplicity, matching the β sum.
    let mut g = PolyElement::constant(beta, ns, n);
    for i in 0..n {
        g.add_term(Monomial::coord_gen(i, ns, n), -1.0);
    }
    for j in 0..ns {
        g.add_assign(&canonical_poly(&Monomial::straddle_gen(j, ns, n), &idx).scale(-1.0));
    }
    blocks.push(PsdBlock {
        label: "compact".into(),
        matrix: localizing_matrix(&idx, &g, n_ord - 1)?,
        localizer: g,
        order: n_ord - 1,
    });
    // Trace-ball rows tr M_d(y) <= Σ_z β^{2 deg z}: every payoff monomial
    // satisfies z(x)² <= β^{2 deg z} on the support region, so these rows
    // cut nothing but the top-degree recession directions of the truncated
    // problem, which otherwise leave the dual without interior.
    if n_ord >= 2 {
        for d in 1..=n_ord {
            let count = idx.count_up_to(d);
            let mut radius = 0.0;
            let mut sum_sq = PolyElement::zero();
            for z in &idx.monomials()[..count] {
                radius += beta.powi(2 * z.degree() as i32);
                sum_sq.add_assign(&multiply(z, z, spec.reduce, market));
            }
            // Normalized to 1 - tr/R so the row is O(1) regardless of β.
            let mut g = sum_sq.scale(-1.0 / radius);
            g.add_term(Monomial::unit(ns, n), 1.0);
            blocks.push(PsdBlock {
                label: format!("ball{d}"),
                matrix: localizing_matrix(&idx, &g, 0)?,
                localizer: g,
                order: 0,
            });
        }
    }

    Ok(ConicProblem {
        num_vars: idx.len(),
        objective: objective_form(&idx, spec.side)?,
        equalities: price_equalities(&idx)?,
        blocks,
        side: spec.side,
        index: idx,
        beta: Some(beta),
        order: n_ord,
    })
}

/// Order-N relaxation on the product semigroup, valid without any support
/// bound. No compactness block; the moment linkage rows tie the damped
/// moments together.
pub fn assemble_unbounded(
    market: &MarketSpec,
    spec: &RelaxationSpec,
) -> Result<ConicProblem, RelaxError> {
    if spec.order < 1 {
        return Err(RelaxError::InfeasibleDegree(spec.order));
    }
    let n_ord = spec.order;
    let idx = MomentIndex::build(2 * n_ord, Mode::Unbounded, spec.reduce, market);
    let ns = market.num_baskets();
    let n = market.n();

    let mut blocks = Vec::new();
    blocks.push(PsdBlock {
        label: "moment".into(),
        localizer: PolyElement::constant(1.0, ns, n),
        order: n_ord,
        matrix: moment_matrix(&idx, n_ord)?,
    });
    for (label, g) in localizer_polys(market, spec.localizer_set) {
        blocks.push(PsdBlock {
            label,
            matrix: localizing_matrix(&idx, &g, n_ord - 1)?,
            localizer: g,
            order: n_ord - 1,
        });
    }

    let mut equalities = price_equalities(&idx)?;
    equalities.extend(linkage_rows(&idx)?);

    Ok(ConicProblem {
        num_vars: idx.len(),
        objective: objective_form(&idx, spec.side)?,
        equalities,
        blocks,
        side: spec.side,
        index: idx,
        beta: None,
        order: n_ord,
    })
}

/// Moment linkage `y(s,k) - y(s,k+1) - Σ_i y(e_i² s, k+1) = 0` for every
/// canonical `(s,k)` whose linked terms all stay within the index: the
/// squared payoffs raise the degree by three, so `deg(s) + k <= 2N - 3`.
/// Identities with dangling terms are not valid constraints and are
/// skipped.
fn linkage_rows(idx: &MomentIndex) -> Result<Vec<Equality>, RelaxError> {
    let market = idx.market().clone();
    let ns = market.num_baskets();
    let n = market.n();
    let cap = idx.degree_cap;
    if cap < 3 {
        return Ok(Vec::new());
    }
    let t = Monomial::aux_gen(ns, n);

    // Σ_i e_i² over every payoff, duplicates included (they are genuinely
    // summed twice in the damping weight).
    let mut payoff_sq = PolyElement::zero();
    for i in 0..n {
        let x_i = Monomial::coord_gen(i, ns, n);
        payoff_sq.add_assign(&multiply(&x_i, &x_i, idx.reduce, &market));
    }
    for j in 0..ns {
        let s_j = Monomial::straddle_gen(j, ns, n);
        payoff_sq.add_assign(&multiply(&s_j, &s_j, idx.reduce, &market));
    }

    let mut rows = Vec::new();
    let limit = idx.count_up_to(cap - 3);
    for pos in 0..limit {
        let m = idx.monomial(pos).clone();
        let mut form = LinearForm::zero();
        form.add(pos, 1.0);
        let shifted = multiply(&m, &t, idx.reduce, &market);
        form.add_scaled(&LinearForm::from_poly(&shifted, idx)?, -1.0);
        let squared = shifted.mul(&payoff_sq, idx.reduce, &market);
        form.add_scaled(&LinearForm::from_poly(&squared, idx)?, -1.0);
        rows.push(Equality { form, rhs: 0.0, kind: EqKind::Linkage(m) });
    }
    Ok(rows)
}

/// Canonicalize, solve, and orient the bound. `PrimalInfeasible` means the
/// truncated moment conditions already exclude every consistent measure:
/// static arbitrage detected at this order.
pub fn solve_bound(
    problem: &ConicProblem,
    backend: &dyn SolverBackend,
    tol: f64,
) -> Result<BoundResult, RelaxError> {
    let sf = canonicalize(problem);
    let solution = backend.solve(&sf, tol, 200)?;
    // Report the dual side: it is the price of the replicating portfolio,
    // so the emitted certificate carries exactly this value, and it errs on
    // the conservative side of the moment optimum by the duality gap.
    let value = match problem.side {
        Side::Lower => solution.dual_objective,
        Side::Upper => -solution.dual_objective,
    };
    Ok(BoundResult {
        value,
        y: solution.y.iter().copied().collect(),
        status: solution.status,
        solution,
    })
}
