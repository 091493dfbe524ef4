//! One-period market data: assets with known forwards, basket straddles,
//! observed quotes, and the support assumption for the asset distribution.
//!
//! Quotes may arrive as calls, puts, or straddles; everything is normalized
//! to straddle prices at ingest via call-put parity (zero rate, forward
//! market). The target basket is always index 0 and carries no quote.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A basket payoff `|w·x - K|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasketDef {
    /// Basket weights, one per asset.
    pub weights: Vec<f64>,
    /// Strike, nonnegative.
    pub strike: f64,
}

impl BasketDef {
    pub fn new(weights: Vec<f64>, strike: f64) -> Self {
        Self { weights, strike }
    }

    /// Straddle payoff `|w·x - K|` at the asset point `x`.
    pub fn payoff(&self, x: &[f64]) -> f64 {
        self.signed_value(x).abs()
    }

    /// Signed basket value `w·x - K`.
    pub fn signed_value(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) - self.strike
    }

    /// Range of `w·x` over the box `[0, b]`, split by weight sign.
    fn value_range(&self, upper: &[f64]) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for (w, b) in self.weights.iter().zip(upper) {
            if *w >= 0.0 {
                hi += w * b;
            } else {
                lo += w * b;
            }
        }
        (lo, hi)
    }

    /// Maximum of `|w·x - K|` over the box `[0, b]`; attained at a vertex
    /// maximizing or minimizing `w·x`.
    pub fn max_abs_over_box(&self, upper: &[f64]) -> f64 {
        let (lo, hi) = self.value_range(upper);
        (hi - self.strike).abs().max((lo - self.strike).abs())
    }
}

/// Support assumption for the asset price distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Support {
    /// Axis-aligned box `[0, b]` with `b > 0` componentwise.
    Compact { upper: Vec<f64> },
    /// No support bound; the nonnegative orthant.
    Unbounded,
}

/// The one-period market: `n` assets with forwards, `m+1` basket straddles
/// of which index 0 is the unpriced target, and observed straddle prices
/// for baskets `1..=m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub forwards: Vec<f64>,
    pub baskets: Vec<BasketDef>,
    /// Observed straddle prices of baskets `1..=m` (target excluded).
    pub straddle_prices: Vec<f64>,
    pub support: Support,
}

/// Quote on a priced basket, before normalization to a straddle price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuoteKind {
    Call,
    Put,
    Straddle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteSet {
    pub basket_index: usize,
    pub kind: QuoteKind,
    pub price: f64,
}

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("basket index {0} out of range")]
    BadBasketIndex(usize),
    #[error("quote converts to a negative straddle price {0:.6} (quote-level arbitrage)")]
    NegativeResult(f64),
    #[error("operation requires a compact support box")]
    UnboundedSupport,
    #[error("market fails validation: {0}")]
    Invalid(String),
}

/// A single validation finding; `validate` returns all of them rather than
/// failing on the first.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DimensionMismatch { what: String },
    NonPositiveForward { asset: usize, value: f64 },
    ForwardOutsideBox { asset: usize, value: f64, upper: f64 },
    NonPositiveBox { asset: usize, value: f64 },
    ZeroWeights { basket: usize },
    NegativeStrike { basket: usize, strike: f64 },
    NegativePrice { basket: usize, price: f64 },
    JensenFloorViolated { basket: usize, price: f64, floor: f64 },
    PriceAboveBoxMax { basket: usize, price: f64, max: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DimensionMismatch { what } => write!(f, "dimension mismatch: {what}"),
            Violation::NonPositiveForward { asset, value } => {
                write!(f, "forward {value} of asset {asset} is not positive")
            }
            Violation::ForwardOutsideBox { asset, value, upper } => {
                write!(f, "forward {value} of asset {asset} outside (0, {upper})")
            }
            Violation::NonPositiveBox { asset, value } => {
                write!(f, "box upper bound {value} of asset {asset} is not positive")
            }
            Violation::ZeroWeights { basket } => {
                write!(f, "basket {basket} has all-zero weights")
            }
            Violation::NegativeStrike { basket, strike } => {
                write!(f, "basket {basket} has negative strike {strike}")
            }
            Violation::NegativePrice { basket, price } => {
                write!(f, "basket {basket} has negative price {price}")
            }
            Violation::JensenFloorViolated { basket, price, floor } => {
                write!(
                    f,
                    "basket {basket} priced {price} below its Jensen floor {floor}"
                )
            }
            Violation::PriceAboveBoxMax { basket, price, max } => {
                write!(
                    f,
                    "basket {basket} priced {price} above the box payoff maximum {max}"
                )
            }
        }
    }
}

impl MarketSpec {
    /// Number of assets.
    pub fn n(&self) -> usize {
        self.forwards.len()
    }

    /// Number of priced baskets (the target excluded).
    pub fn num_priced(&self) -> usize {
        self.straddle_prices.len()
    }

    /// Total number of straddle generators, target included.
    pub fn num_baskets(&self) -> usize {
        self.baskets.len()
    }

    pub fn target(&self) -> &BasketDef {
        &self.baskets[0]
    }

    /// Priced basket `j` in `1..=m` with its observed straddle price.
    pub fn priced(&self, j: usize) -> (&BasketDef, f64) {
        (&self.baskets[j], self.straddle_prices[j - 1])
    }

    /// Straddle-generator aliases: basket `j` maps to the first basket with
    /// bit-identical weights and strike. Identical payoffs are the same
    /// function, so the symbolic algebra identifies them.
    pub fn straddle_alias(&self) -> Vec<usize> {
        let mut alias = Vec::with_capacity(self.baskets.len());
        for (j, b) in self.baskets.iter().enumerate() {
            let rep = self.baskets[..j]
                .iter()
                .position(|c| c == b)
                .unwrap_or(j);
            alias.push(rep);
        }
        alias
    }

    /// Sum of all payoffs `Σ x_i + Σ_j |w_j·x - K_j|` at `x`.
    pub fn payoff_sum(&self, x: &[f64]) -> f64 {
        x.iter().sum::<f64>() + self.baskets.iter().map(|b| b.payoff(x)).sum::<f64>()
    }

    /// Upper bound on `sup_K Σ e_i(x)` over the support box, computed as
    /// `Σ b_i + Σ_j max_box |w_j·x - K_j|` with each inner max evaluated at
    /// the box vertices extremizing `w·x`.
    pub fn beta_bound(&self) -> Result<f64, MarketError> {
        let Support::Compact { upper } = &self.support else {
            return Err(MarketError::UnboundedSupport);
        };
        let coords: f64 = upper.iter().sum();
        let straddles: f64 = self.baskets.iter().map(|b| b.max_abs_over_box(upper)).sum();
        Ok(coords + straddles)
    }

    /// Check every structural invariant and price floor; returns all
    /// violations found (empty means the market is usable).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.n();

        if self.baskets.len() != self.straddle_prices.len() + 1 {
            out.push(Violation::DimensionMismatch {
                what: format!(
                    "{} baskets but {} straddle prices (need m+1 baskets)",
                    self.baskets.len(),
                    self.straddle_prices.len()
                ),
            });
            return out;
        }

        let box_upper = match &self.support {
            Support::Compact { upper } => {
                if upper.len() != n {
                    out.push(Violation::DimensionMismatch {
                        what: format!("box has {} entries for {} assets", upper.len(), n),
                    });
                    return out;
                }
                for (i, b) in upper.iter().enumerate() {
                    if *b <= 0.0 {
                        out.push(Violation::NonPositiveBox { asset: i, value: *b });
                    }
                }
                Some(upper.clone())
            }
            Support::Unbounded => None,
        };

        for (i, p) in self.forwards.iter().enumerate() {
            if *p <= 0.0 {
                out.push(Violation::NonPositiveForward { asset: i, value: *p });
            } else if let Some(upper) = &box_upper {
                if *p >= upper[i] {
                    out.push(Violation::ForwardOutsideBox {
                        asset: i,
                        value: *p,
                        upper: upper[i],
                    });
                }
            }
        }

        for (j, b) in self.baskets.iter().enumerate() {
            if b.weights.len() != n {
                out.push(Violation::DimensionMismatch {
                    what: format!("basket {} has {} weights for {} assets", j, b.weights.len(), n),
                });
                continue;
            }
            if b.weights.iter().all(|w| *w == 0.0) {
                out.push(Violation::ZeroWeights { basket: j });
            }
            if b.strike < 0.0 {
                out.push(Violation::NegativeStrike { basket: j, strike: b.strike });
            }
        }

        for j in 1..self.baskets.len() {
            let (basket, price) = self.priced(j);
            if basket.weights.len() != n {
                continue;
            }
            if price < 0.0 {
                out.push(Violation::NegativePrice { basket: j, price });
                continue;
            }
            // Jensen floor: E|w·x - K| >= |w·p - K| for any measure with
            // mean p. Exact ties (all mass on one side of the kink) land on
            // the floor, so the comparison leaves rounding headroom.
            let floor = basket.signed_value(&self.forwards).abs();
            let eps = 1e-12 * (1.0 + floor);
            if price < floor - eps {
                out.push(Violation::JensenFloorViolated { basket: j, price, floor });
            }
            if let Some(upper) = &box_upper {
                let max = basket.max_abs_over_box(upper);
                if price > max + 1e-12 * (1.0 + max) {
                    out.push(Violation::PriceAboveBoxMax { basket: j, price, max });
                }
            }
        }

        out
    }
}

/// Normalize a quote to a straddle price by call-put parity:
/// `straddle = call + put` and `call - put = w·p - K` at zero rate.
pub fn to_straddle(q: &QuoteSet, market: &MarketSpec) -> Result<f64, MarketError> {
    let basket = market
        .baskets
        .get(q.basket_index)
        .ok_or(MarketError::BadBasketIndex(q.basket_index))?;
    let fwd = basket.signed_value(&market.forwards);
    let s = match q.kind {
        QuoteKind::Call => 2.0 * q.price - fwd,
        QuoteKind::Put => 2.0 * q.price + fwd,
        QuoteKind::Straddle => q.price,
    };
    if s < 0.0 {
        return Err(MarketError::NegativeResult(s));
    }
    Ok(s)
}

/// Straddle price back to a call quote, the inverse of [`to_straddle`].
pub fn to_call(straddle: f64, basket: &BasketDef, forwards: &[f64]) -> f64 {
    (straddle + basket.signed_value(forwards)) / 2.0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Market file format
// ---------------------------------------------------------------------------

/// On-disk market description. The target basket is the unique basket with
/// `quote: null`; it is moved to index 0 internally.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketFile {
    pub n: usize,
    pub forwards: Vec<f64>,
    pub baskets: Vec<BasketEntry>,
    pub support: SupportEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasketEntry {
    pub weights: Vec<f64>,
    pub strike: f64,
    pub quote: Option<FileQuote>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileQuote {
    pub kind: QuoteKind,
    pub price: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SupportEntry {
    Keyword(String),
    Box { #[serde(rename = "box")] upper: Vec<f64> },
}

impl MarketFile {
    pub fn parse(text: &str) -> Result<Self, MarketError> {
        serde_json::from_str(text).map_err(|e| MarketError::Invalid(e.to_string()))
    }

    /// Build the in-memory market: locate the target, convert quotes to
    /// straddle prices, order baskets as target-first.
    pub fn into_market(self) -> Result<MarketSpec, MarketError> {
        if self.forwards.len() != self.n {
            return Err(MarketError::Invalid(format!(
                "n = {} but {} forwards given",
                self.n,
                self.forwards.len()
            )));
        }
        let support = match self.support {
            SupportEntry::Keyword(ref k) if k == "unbounded" => Support::Unbounded,
            SupportEntry::Keyword(k) => {
                return Err(MarketError::Invalid(format!(
                    "unknown support keyword {k:?} (expected \"unbounded\" or {{\"box\": [...]}})"
                )))
            }
            SupportEntry::Box { upper } => Support::Compact { upper },
        };

        let targets: Vec<usize> = self
            .baskets
            .iter()
            .enumerate()
            .filter(|(_, b)| b.quote.is_none())
            .map(|(i, _)| i)
            .collect();
        let [target_idx] = targets[..] else {
            return Err(MarketError::Invalid(format!(
                "expected exactly one basket with quote null (the target), found {}",
                targets.len()
            )));
        };

        let mut baskets = Vec::with_capacity(self.baskets.len());
        let mut quotes = Vec::new();
        baskets.push(BasketDef::new(
            self.baskets[target_idx].weights.clone(),
            self.baskets[target_idx].strike,
        ));
        for (i, entry) in self.baskets.into_iter().enumerate() {
            if i == target_idx {
                continue;
            }
            let quote = entry.quote.expect("non-target baskets carry quotes");
            baskets.push(BasketDef::new(entry.weights, entry.strike));
            quotes.push((baskets.len() - 1, quote));
        }

        let mut market = MarketSpec {
            forwards: self.forwards,
            baskets,
            straddle_prices: vec![0.0; quotes.len()],
            support,
        };
        for (index, quote) in quotes {
            let q = QuoteSet { basket_index: index, kind: quote.kind, price: quote.price };
            market.straddle_prices[index - 1] = to_straddle(&q, &market)?;
        }
        Ok(market)
    }
}

/// Convenience: parse and convert a market file in one step.
pub fn load_market(text: &str) -> Result<MarketSpec, MarketError> {
    MarketFile::parse(text)?.into_market()
}
