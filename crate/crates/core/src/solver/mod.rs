//! Conic solver backend: standard-form problems with linear equalities and
//! multiple PSD blocks, a pluggable backend trait, and a self-contained
//! dense primal-dual interior-point reference implementation.
//!
//! Standard form:
//!
//! ```text
//! minimize    c'y
//! subject to  E y = f
//!             S_k(y) = Σ_j y_j B_{k,j}  PSD   for each block k
//! ```
//!
//! Block slacks are homogeneous in `y`; constant terms ride on the
//! normalization equality `y_0 = 1` of the moment problems. The Lagrange
//! dual pairs one multiplier `λ_r` with each equality and one PSD matrix
//! `Q_k` with each block:
//!
//! ```text
//! maximize    f'λ
//! subject to  c - E'λ - Σ_k ⟨Q_k, B_{k,·}⟩ = 0,   Q_k PSD.
//! ```

mod ipm;

pub use ipm::DenseIpm;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::moments::LinearForm;
use crate::relaxation::ConicProblem;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("numerical breakdown at iteration {iteration}: {what}")]
    NumericalBreakdown { iteration: usize, what: String },
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("parse error in standard-form text: {0}")]
    Parse(String),
}

/// One PSD block: slack `S(y) = Σ y_j B_j` over the listed variables.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub dim: usize,
    /// Sparse-in-variables coefficient stack; each matrix is symmetric.
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
}

/// Canonicalized conic problem.
#[derive(Debug, Clone)]
pub struct StandardForm {
    pub num_vars: usize,
    pub c: DVector<f64>,
    pub eq: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub blocks: Vec<BlockSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    Inaccurate,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Residuals {
    /// `‖Ey - f‖∞ / (1 + ‖f‖∞)`, including block-slack mismatch.
    pub primal_eq: f64,
    /// `‖c - E'λ - A*(Q)‖∞ / (1 + ‖c‖∞)`.
    pub dual: f64,
    /// `Σ ⟨S_k, Q_k⟩`, the conic complementarity gap.
    pub gap: f64,
}

/// Per-iteration record kept for diagnostics and the weak-duality checks.
#[derive(Debug, Clone, Copy)]
pub struct IterStat {
    pub mu: f64,
    pub primal_obj: f64,
    pub dual_obj: f64,
    /// `Σ ⟨S_k, Q_k⟩` at the iterate; nonnegative on interior points.
    pub gap: f64,
    /// Defect of the algebraic identity
    /// `c'y - f'λ - y'r_d - λ'r_p - Σ⟨Q_k, r_{b,k}⟩ = Σ⟨S_k, Q_k⟩`;
    /// zero in exact arithmetic, so it measures adjoint consistency.
    pub identity_defect: f64,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    /// One PSD dual matrix per block, aligned with `StandardForm::blocks`.
    pub block_duals: Vec<DMatrix<f64>>,
    pub status: SolveStatus,
    pub residuals: Residuals,
    pub iterations: usize,
    pub objective: f64,
    pub dual_objective: f64,
    pub trace: Vec<IterStat>,
}

/// Backend contract; adapters to external conic solvers implement this.
pub trait SolverBackend {
    fn solve(&self, sf: &StandardForm, tol: f64, max_iter: usize)
        -> Result<ConicSolution, SolverError>;
}

/// Lossless translation of an assembled relaxation into standard form.
/// Equality and block order are preserved, so duals map back by position.
pub fn canonicalize(problem: &ConicProblem) -> StandardForm {
    let nv = problem.num_vars;
    let mut c = DVector::zeros(nv);
    for (pos, coeff) in problem.objective.terms() {
        c[pos] = coeff;
    }
    let me = problem.equalities.len();
    let mut eq = DMatrix::zeros(me, nv);
    let mut rhs = DVector::zeros(me);
    for (r, equality) in problem.equalities.iter().enumerate() {
        for (pos, coeff) in equality.form.terms() {
            eq[(r, pos)] = coeff;
        }
        rhs[r] = equality.rhs;
    }
    let blocks = problem
        .blocks
        .iter()
        .map(|b| {
            let dim = b.matrix.dim;
            let mut per_var: std::collections::BTreeMap<usize, DMatrix<f64>> = Default::default();
            for i in 0..dim {
                for j in i..dim {
                    for (pos, coeff) in b.matrix.entry(i, j).terms() {
                        let m = per_var
                            .entry(pos)
                            .or_insert_with(|| DMatrix::zeros(dim, dim));
                        m[(i, j)] = coeff;
                        m[(j, i)] = coeff;
                    }
                }
            }
            BlockSpec { dim, coeffs: per_var.into_iter().collect() }
        })
        .collect();
    StandardForm { num_vars: nv, c, eq, rhs, blocks }
}

/// Map a standard-form solution's duals back to named multipliers of the
/// originating problem (positional, since canonicalize preserves order).
pub fn equality_dual(problem: &ConicProblem, sol: &ConicSolution, row: usize) -> f64 {
    debug_assert!(row < problem.equalities.len());
    sol.lambda[row]
}

impl StandardForm {
    /// Objective as a linear form (for reporting).
    pub fn objective_form(&self) -> LinearForm {
        let mut f = LinearForm::zero();
        for (j, &v) in self.c.iter().enumerate() {
            f.add(j, v);
        }
        f
    }

    /// Plain-text export. Format, one directive per line:
    ///
    /// ```text
    /// standardform v1
    /// vars <nv>
    /// obj <j>:<coeff> ...
    /// eq <rhs> <j>:<coeff> ...
    /// block <dim>
    /// entry <j> <row> <col> <value>     (upper triangle)
    /// end
    /// ```
    pub fn export_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "standardform v1");
        let _ = writeln!(out, "vars {}", self.num_vars);
        let mut obj = String::from("obj");
        for (j, &v) in self.c.iter().enumerate() {
            if v != 0.0 {
                let _ = write!(obj, " {j}:{v:e}");
            }
        }
        let _ = writeln!(out, "{obj}");
        for r in 0..self.eq.nrows() {
            let mut line = format!("eq {:e}", self.rhs[r]);
            for j in 0..self.num_vars {
                let v = self.eq[(r, j)];
                if v != 0.0 {
                    let _ = write!(line, " {j}:{v:e}");
                }
            }
            let _ = writeln!(out, "{line}");
        }
        for b in &self.blocks {
            let _ = writeln!(out, "block {}", b.dim);
            for (j, m) in &b.coeffs {
                for r in 0..b.dim {
                    for c in r..b.dim {
                        let v = m[(r, c)];
                        if v != 0.0 {
                            let _ = writeln!(out, "entry {j} {r} {c} {v:e}");
                        }
                    }
                }
            }
            let _ = writeln!(out, "end");
        }
        out
    }

    /// Inverse of [`export_text`].
    pub fn parse_text(text: &str) -> Result<Self, SolverError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let head = lines.next().ok_or_else(|| SolverError::Parse("empty input".into()))?;
        if head != "standardform v1" {
            return Err(SolverError::Parse(format!("bad header {head:?}")));
        }
        let mut num_vars = None;
        let mut c = DVector::zeros(0);
        let mut eq_rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
        let mut blocks = Vec::new();
        let mut current: Option<(usize, std::collections::BTreeMap<usize, DMatrix<f64>>)> = None;

        let parse_pair = |tok: &str| -> Result<(usize, f64), SolverError> {
            let (a, b) = tok
                .split_once(':')
                .ok_or_else(|| SolverError::Parse(format!("bad pair {tok:?}")))?;
            Ok((
                a.parse().map_err(|e| SolverError::Parse(format!("{e}")))?,
                b.parse().map_err(|e| SolverError::Parse(format!("{e}")))?,
            ))
        };

        for line in lines {
            let mut toks = line.split_whitespace();
            match toks.next().unwrap() {
                "vars" => {
                    let nv: usize = toks
                        .next()
                        .ok_or_else(|| SolverError::Parse("vars needs a count".into()))?
                        .parse()
                        .map_err(|e| SolverError::Parse(format!("{e}")))?;
                    num_vars = Some(nv);
                    c = DVector::zeros(nv);
                }
                "obj" => {
                    for tok in toks {
                        let (j, v) = parse_pair(tok)?;
                        c[j] = v;
                    }
                }
                "eq" => {
                    let rhs: f64 = toks
                        .next()
                        .ok_or_else(|| SolverError::Parse("eq needs a rhs".into()))?
                        .parse()
                        .map_err(|e| SolverError::Parse(format!("{e}")))?;
                    let mut row = Vec::new();
                    for tok in toks {
                        row.push(parse_pair(tok)?);
                    }
                    eq_rows.push((rhs, row));
                }
                "block" => {
                    let dim: usize = toks
                        .next()
                        .ok_or_else(|| SolverError::Parse("block needs a dim".into()))?
                        .parse()
                        .map_err(|e| SolverError::Parse(format!("{e}")))?;
                    current = Some((dim, Default::default()));
                }
                "entry" => {
                    let (dim, per_var) = current
                        .as_mut()
                        .ok_or_else(|| SolverError::Parse("entry outside block".into()))?;
                    let vals: Vec<&str> = toks.collect();
                    let [j, r, col, v] = vals[..] else {
                        return Err(SolverError::Parse(format!("bad entry line {line:?}")));
                    };
                    let j: usize = j.parse().map_err(|e| SolverError::Parse(format!("{e}")))?;
                    let r: usize = r.parse().map_err(|e| SolverError::Parse(format!("{e}")))?;
                    let col: usize =
                        col.parse().map_err(|e| SolverError::Parse(format!("{e}")))?;
                    let v: f64 = v.parse().map_err(|e| SolverError::Parse(format!("{e}")))?;
                    let m = per_var
                        .entry(j)
                        .or_insert_with(|| DMatrix::zeros(*dim, *dim));
                    m[(r, col)] = v;
                    m[(col, r)] = v;
                }
                "end" => {
                    let (dim, per_var) = current
                        .take()
                        .ok_or_else(|| SolverError::Parse("end outside block".into()))?;
                    blocks.push(BlockSpec { dim, coeffs: per_var.into_iter().collect() });
                }
                other => return Err(SolverError::Parse(format!("unknown directive {other:?}"))),
            }
        }
        let num_vars =
            num_vars.ok_or_else(|| SolverError::Parse("missing vars directive".into()))?;
        let me = eq_rows.len();
        let mut eq = DMatrix::zeros(me, num_vars);
        let mut rhs = DVector::zeros(me);
        for (r, (b, row)) in eq_rows.into_iter().enumerate() {
            rhs[r] = b;
            for (j, v) in row {
                eq[(r, j)] = v;
            }
        }
        Ok(Self { num_vars, c, eq, rhs, blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analytic_2x2() -> StandardForm {
        // min y_2 s.t. y_1 = 1, [[y_1, y_2], [y_2, y_1]] PSD.
        let b1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b2 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        StandardForm {
            num_vars: 2,
            c: DVector::from_vec(vec![0.0, 1.0]),
            eq: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            rhs: DVector::from_vec(vec![1.0]),
            blocks: vec![BlockSpec { dim: 2, coeffs: vec![(0, b1), (1, b2)] }],
        }
    }

    #[test]
    fn export_import_round_trip() {
        let sf = analytic_2x2();
        let text = sf.export_text();
        let back = StandardForm::parse_text(&text).unwrap();
        assert_eq!(back.num_vars, sf.num_vars);
        assert_eq!(back.c, sf.c);
        assert_eq!(back.eq, sf.eq);
        assert_eq!(back.rhs, sf.rhs);
        assert_eq!(back.blocks.len(), 1);
        assert_eq!(back.blocks[0].dim, 2);
        assert_eq!(back.blocks[0].coeffs, sf.blocks[0].coeffs);
    }

    #[test]
    fn analytic_sdp_solves_to_minus_one() {
        let sf = analytic_2x2();
        let sol = DenseIpm::default().solve(&sf, 1e-9, 200).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective + 1.0).abs() < 1e-7, "objective {}", sol.objective);
        assert!((sol.y[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_equality_pair() {
        // y_1 = 1 and y_1 = 2 cannot both hold.
        let sf = StandardForm {
            num_vars: 1,
            c: DVector::from_vec(vec![1.0]),
            eq: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            rhs: DVector::from_vec(vec![1.0, 2.0]),
            blocks: vec![BlockSpec {
                dim: 1,
                coeffs: vec![(0, DMatrix::from_element(1, 1, 1.0))],
            }],
        };
        let sol = DenseIpm::default().solve(&sf, 1e-9, 200).unwrap();
        assert_eq!(sol.status, SolveStatus::PrimalInfeasible);
    }

    #[test]
    fn no_blocks_lp_feasibility() {
        // One variable pinned by one equality, no cone: trivial LP path.
        let sf = StandardForm {
            num_vars: 1,
            c: DVector::from_vec(vec![3.0]),
            eq: DMatrix::from_row_slice(1, 1, &[1.0]),
            rhs: DVector::from_vec(vec![1.0]),
            blocks: vec![],
        };
        let sol = DenseIpm::default().solve(&sf, 1e-9, 50).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.y[0] - 1.0).abs() < 1e-10);
        assert!((sol.objective - 3.0).abs() < 1e-10);
    }

    #[test]
    fn no_blocks_inconsistent_equalities() {
        let sf = StandardForm {
            num_vars: 1,
            c: DVector::from_vec(vec![0.0]),
            eq: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            rhs: DVector::from_vec(vec![1.0, 2.0]),
            blocks: vec![],
        };
        let sol = DenseIpm::default().solve(&sf, 1e-9, 50).unwrap();
        assert_eq!(sol.status, SolveStatus::PrimalInfeasible);
    }

    #[test]
    fn lp_as_diagonal_blocks() {
        // min -x1 - 2 x2 s.t. x1 + x2 = 1, x >= 0 (two 1x1 blocks):
        // optimum at x = (0, 1), value -2.
        let sf = StandardForm {
            num_vars: 2,
            c: DVector::from_vec(vec![-1.0, -2.0]),
            eq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            rhs: DVector::from_vec(vec![1.0]),
            blocks: vec![
                BlockSpec { dim: 1, coeffs: vec![(0, DMatrix::from_element(1, 1, 1.0))] },
                BlockSpec { dim: 1, coeffs: vec![(1, DMatrix::from_element(1, 1, 1.0))] },
            ],
        };
        let sol = DenseIpm::default().solve(&sf, 1e-10, 200).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective + 2.0).abs() < 1e-8);
        assert!(sol.y[0].abs() < 1e-7 && (sol.y[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn dual_unbounded_primal() {
        // min -x s.t. x >= 0, no equalities: unbounded below.
        let sf = StandardForm {
            num_vars: 1,
            c: DVector::from_vec(vec![-1.0]),
            eq: DMatrix::zeros(0, 1),
            rhs: DVector::zeros(0),
            blocks: vec![BlockSpec {
                dim: 1,
                coeffs: vec![(0, DMatrix::from_element(1, 1, 1.0))],
            }],
        };
        let sol = DenseIpm::default().solve(&sf, 1e-9, 200).unwrap();
        assert_eq!(sol.status, SolveStatus::DualInfeasible);
    }

    #[test]
    fn weak_duality_identity_on_every_iterate() {
        let sf = analytic_2x2();
        let sol = DenseIpm::default().solve(&sf, 1e-9, 200).unwrap();
        assert!(!sol.trace.is_empty());
        for it in &sol.trace {
            // Interior iterates keep the conic gap nonnegative...
            assert!(it.gap >= -1e-12 * (1.0 + it.primal_obj.abs()));
            // ...and the algebraic gap identity holds to rounding.
            let scale = 1.0 + it.primal_obj.abs() + it.dual_obj.abs() + it.gap.abs();
            assert!(it.identity_defect <= 1e-11 * scale, "defect {}", it.identity_defect);
        }
    }

    #[test]
    fn deterministic_reruns() {
        let sf = analytic_2x2();
        let a = DenseIpm::default().solve(&sf, 1e-9, 200).unwrap();
        let b = DenseIpm::default().solve(&sf, 1e-9, 200).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn complementarity_at_optimum() {
        let sf = analytic_2x2();
        let sol = DenseIpm::default().solve(&sf, 1e-9, 200).unwrap();
        // Reconstruct S(y) and check <S, Q> against the advertised bound.
        let mut s = DMatrix::zeros(2, 2);
        for (j, b) in &sf.blocks[0].coeffs {
            s += b * sol.y[*j];
        }
        let gap = (s.transpose() * &sol.block_duals[0]).trace();
        let tol = 1e-9;
        assert!(gap.abs() <= 10.0 * tol * (1.0 + sf.c.amax()));
    }
}
