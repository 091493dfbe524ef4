//! Static super/sub-replicating portfolios from dual solutions.
//!
//! At an optimal solve of a compact relaxation, the equality multipliers
//! are positions in the tradables (cash, forwards, priced straddles) and
//! the PSD block duals are Gram matrices of sum-of-squares polynomials.
//! Dual feasibility, read as an identity of payoff functions, is exactly
//! the replication identity
//!
//! ```text
//! e_0(x) - Σ λ_j e_j(x) - λ_cash = Σ_k g_k(x) · q_k(x)
//! ```
//!
//! (signs mirrored on the upper side), where each `q_k = z'·G_k·z` is SOS
//! over the block basis and `g_k` is the block localizer, nonnegative on
//! the support region. The right side is pointwise nonnegative there, so
//! the portfolio sub/super-replicates the target and its price is the
//! bound. Everything here is checkable by sampling, independent of the
//! solver.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::market::{BasketDef, MarketSpec, Support};
use crate::relaxation::{BoundResult, ConicProblem, EqKind, Side};
use crate::semigroup::{Mode, Monomial, PolyElement};
use crate::solver::SolveStatus;

#[derive(Debug, Error)]
pub enum HedgeError {
    #[error("certificate extraction requires an Optimal solve, got {0:?}")]
    NotOptimal(SolveStatus),
    #[error("certificates are only extracted for the compact hierarchy")]
    UnboundedMode,
    #[error("dual block {label} has eigenvalue {min_eig:.3e}, beyond the clipping budget")]
    GramNotPsd { label: String, min_eig: f64 },
    #[error("point has dimension {got}, certificate has {want} assets")]
    DimensionMismatch { got: usize, want: usize },
    #[error("certificate parse error: {0}")]
    Parse(String),
    #[error("certificate checking requires a compact support box")]
    UnboundedSupport,
}

/// One sum-of-squares multiplier: `q(x) = z(x)'·G·z(x)` over the listed
/// monomial basis, attached to its localizer `g`.
#[derive(Debug, Clone)]
pub struct SosPoly {
    pub label: String,
    pub localizer: PolyElement,
    pub basis: Vec<Monomial>,
    pub gram: DMatrix<f64>,
}

impl SosPoly {
    /// Returns `(g(x), q(x), ||z(x)||²)`.
    pub fn eval(
        &self,
        x: &[f64],
        market: &MarketSpec,
    ) -> Result<(f64, f64, f64), crate::semigroup::SemigroupError> {
        let g = self.localizer.evaluate(x, market)?;
        let z: Vec<f64> = self
            .basis
            .iter()
            .map(|m| m.evaluate(x, market))
            .collect::<Result<_, _>>()?;
        let mut q = 0.0;
        let mut norm = 0.0;
        for (i, zi) in z.iter().enumerate() {
            norm += zi * zi;
            for (j, zj) in z.iter().enumerate() {
                q += zi * self.gram[(i, j)] * zj;
            }
        }
        Ok((g, q, norm))
    }
}

/// Replicating portfolio plus SOS positivity certificate.
#[derive(Debug, Clone)]
pub struct HedgeCertificate {
    pub side: Side,
    pub order: usize,
    pub beta: f64,
    /// Price of the portfolio: `cash + Σ forward_positions·p + Σ
    /// straddle_positions·quotes`, equal to the reported bound.
    pub bound: f64,
    pub forward_positions: Vec<f64>,
    pub straddle_positions: Vec<f64>,
    pub cash: f64,
    pub sos: Vec<SosPoly>,
    /// Basket definitions (index 0 the target), for standalone evaluation.
    pub baskets: Vec<BasketDef>,
}

/// Turn an optimal dual solution into a hedge certificate. Gram matrices
/// are symmetrized and eigenvalue-floored at zero so the emitted
/// certificate is exactly SOS; clipping beyond `10·tol` is an error.
pub fn extract(
    problem: &ConicProblem,
    result: &BoundResult,
    tol: f64,
) -> Result<HedgeCertificate, HedgeError> {
    if problem.index.mode == Mode::Unbounded {
        return Err(HedgeError::UnboundedMode);
    }
    if result.status != SolveStatus::Optimal {
        return Err(HedgeError::NotOptimal(result.status));
    }
    let market = problem.index.market();
    let sign = match problem.side {
        Side::Lower => 1.0,
        Side::Upper => -1.0,
    };

    let mut cash = 0.0;
    let mut forward_positions = vec![0.0; market.n()];
    let mut straddle_positions = vec![0.0; market.num_priced()];
    for (row, eq) in problem.equalities.iter().enumerate() {
        let lambda = sign * result.solution.lambda[row];
        match eq.kind {
            EqKind::Normalization => cash = lambda,
            EqKind::Forward(i) => forward_positions[i] = lambda,
            EqKind::StraddlePrice(j) => straddle_positions[j - 1] = lambda,
            EqKind::Linkage(_) => unreachable!("compact problems carry no linkage rows"),
        }
    }

    let clip_budget = 10.0 * tol;
    let mut sos = Vec::with_capacity(problem.blocks.len());
    for (k, block) in problem.blocks.iter().enumerate() {
        let mut gram = result.solution.block_duals[k].clone();
        let t = gram.transpose();
        gram = (gram + t) * 0.5;
        let eig = gram.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig < -clip_budget {
            return Err(HedgeError::GramNotPsd { label: block.label.clone(), min_eig });
        }
        if min_eig < 0.0 {
            // Floor negatives at zero; the pointwise residual check absorbs
            // the clipping error.
            let vals = eig.eigenvalues.map(|v| v.max(0.0));
            let vecs = &eig.eigenvectors;
            gram = vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        }
        sos.push(SosPoly {
            label: block.label.clone(),
            localizer: block.localizer.clone(),
            basis: problem.index.monomials()[..block.matrix.dim].to_vec(),
            gram,
        });
    }

    Ok(HedgeCertificate {
        side: problem.side,
        order: problem.order,
        beta: problem.beta.unwrap_or(0.0),
        bound: result.value,
        forward_positions,
        straddle_positions,
        cash,
        sos,
        baskets: market.baskets.clone(),
    })
}

/// Payoff of the tradable side at `x`: cash, forwards, priced straddles.
/// No SOS terms enter.
pub fn evaluate_portfolio(cert: &HedgeCertificate, x: &[f64]) -> Result<f64, HedgeError> {
    let n = cert.forward_positions.len();
    if x.len() != n {
        return Err(HedgeError::DimensionMismatch { got: x.len(), want: n });
    }
    let mut v = cert.cash;
    for (i, pos) in cert.forward_positions.iter().enumerate() {
        v += pos * x[i];
    }
    for (j, pos) in cert.straddle_positions.iter().enumerate() {
        v += pos * cert.baskets[j + 1].payoff(x);
    }
    Ok(v)
}

/// Outcome of a sampled certificate verification.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    /// `max |replication identity residual|` over the samples.
    pub max_residual: f64,
    /// Minimum replication slack: `e_0 - portfolio` for lower certificates
    /// (sub-replication keeps it nonnegative), mirrored for upper.
    pub min_slack: f64,
    /// Minimum of `q_k(x) / (1 + ||z(x)||²)` over samples and blocks.
    pub min_sos: f64,
    pub samples: usize,
}

/// Sample the support box and verify the certificate pointwise: the
/// replication identity, the slack sign, and SOS positivity.
pub fn check_certificate(
    cert: &HedgeCertificate,
    market: &MarketSpec,
    samples: usize,
    seed: u64,
) -> Result<CheckReport, HedgeError> {
    let Support::Compact { upper } = &market.support else {
        return Err(HedgeError::UnboundedSupport);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_residual = 0.0f64;
    let mut min_slack = f64::INFINITY;
    let mut min_sos = f64::INFINITY;
    let mut x = vec![0.0; upper.len()];
    for _ in 0..samples {
        for (xi, &b) in x.iter_mut().zip(upper) {
            *xi = rng.random_range(0.0..=b);
        }
        let target = cert.baskets[0].payoff(&x);
        let portfolio = evaluate_portfolio(cert, &x)?;
        let lhs = match cert.side {
            Side::Lower => target - portfolio,
            Side::Upper => portfolio - target,
        };
        let mut rhs = 0.0;
        for poly in &cert.sos {
            let (g, q, norm) = poly
                .eval(&x, market)
                .map_err(|e| HedgeError::Parse(e.to_string()))?;
            rhs += g * q;
            min_sos = min_sos.min(q / (1.0 + norm));
        }
        max_residual = max_residual.max((lhs - rhs).abs());
        min_slack = min_slack.min(lhs);
    }
    Ok(CheckReport { max_residual, min_slack, min_sos, samples })
}

// ---------------------------------------------------------------------------
// Certificate file format
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct CertFile {
    side: Side,
    order: usize,
    beta: f64,
    bound: f64,
    lambda: LambdaFile,
    baskets: Vec<BasketDef>,
    gram_blocks: Vec<GramFile>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LambdaFile {
    forwards: Vec<f64>,
    straddles: Vec<f64>,
    cash: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct GramFile {
    label: String,
    localizer: Vec<(Monomial, f64)>,
    basis: Vec<Monomial>,
    matrix: Vec<Vec<f64>>,
}

impl HedgeCertificate {
    pub fn to_json(&self) -> String {
        let file = CertFile {
            side: self.side,
            order: self.order,
            beta: self.beta,
            bound: self.bound,
            lambda: LambdaFile {
                forwards: self.forward_positions.clone(),
                straddles: self.straddle_positions.clone(),
                cash: self.cash,
            },
            baskets: self.baskets.clone(),
            gram_blocks: self
                .sos
                .iter()
                .map(|p| GramFile {
                    label: p.label.clone(),
                    localizer: p.localizer.terms().map(|(m, c)| (m.clone(), c)).collect(),
                    basis: p.basis.clone(),
                    matrix: (0..p.gram.nrows())
                        .map(|i| (0..p.gram.ncols()).map(|j| p.gram[(i, j)]).collect())
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("certificate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HedgeError> {
        let file: CertFile =
            serde_json::from_str(text).map_err(|e| HedgeError::Parse(e.to_string()))?;
        let sos = file
            .gram_blocks
            .into_iter()
            .map(|g| {
                let dim = g.basis.len();
                let mut gram = DMatrix::zeros(dim, dim);
                if g.matrix.len() != dim || g.matrix.iter().any(|r| r.len() != dim) {
                    return Err(HedgeError::Parse(format!(
                        "gram block {} has inconsistent dimensions",
                        g.label
                    )));
                }
                for (i, row) in g.matrix.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        gram[(i, j)] = *v;
                    }
                }
                let mut localizer = PolyElement::zero();
                for (m, c) in g.localizer {
                    localizer.add_term(m, c);
                }
                Ok(SosPoly { label: g.label, localizer, basis: g.basis, gram })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(HedgeCertificate {
            side: file.side,
            order: file.order,
            beta: file.beta,
            bound: file.bound,
            forward_positions: file.lambda.forwards,
            straddle_positions: file.lambda.straddles,
            cash: file.lambda.cash,
            sos,
            baskets: file.baskets,
        })
    }
}
