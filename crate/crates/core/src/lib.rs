//! Static-arbitrage price bounds for European basket options.
//!
//! Given asset forwards and observed basket straddle (or call/put) quotes,
//! this crate assembles moment-matrix semidefinite relaxations of the
//! consistent-pricing-measure problem, solves them with a self-contained
//! dense interior-point method, and extracts the dual solution as a static
//! super/sub-replicating portfolio with sum-of-squares positivity
//! certificates that can be re-verified pointwise.
//!
//! Module map:
//!
//! * [`market`] — market data, quote normalization, validation.
//! * [`semigroup`] — canonical algebra of payoff monomials and the graded
//!   moment index.
//! * [`moments`] — symbolic moment and localizing matrices.
//! * [`relaxation`] — assembly of the compact and unbounded SDP hierarchies.
//! * [`solver`] — standard-form conic problems and the dense primal-dual
//!   interior-point backend.
//! * [`hedging`] — replicating-portfolio certificates from dual solutions.
//! * [`oracle`] — grid-LP ground truth and instance generators at desk scale.
//! * [`cli`] — the command-line frontend.

pub mod cli;
pub mod hedging;
pub mod market;
pub mod moments;
pub mod oracle;
pub mod relaxation;
pub mod report;
pub mod semigroup;
pub mod solver;
