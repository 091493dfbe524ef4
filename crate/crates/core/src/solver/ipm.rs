//! Dense primal-dual path-following interior-point method with
//! Nesterov-Todd scaling and a Mehrotra predictor-corrector step, for
//! standard-form problems with equality constraints and multiple PSD
//! blocks.
//!
//! The iteration works on the extended system with decoupled slacks
//! `S_k ≈ Σ_j y_j B_{k,j}` and dual blocks `Q_k`, all kept strictly inside
//! the cone; equality, slack-coupling, and dual residuals are driven to
//! zero together (infeasible start). Per block, the NT scaling point `W`
//! satisfies `W Q W = S`; through the factor `R` with `W = R Rᵀ` the
//! linearized complementarity eliminates `ΔQ` and leaves the quasi-definite
//! system
//!
//! ```text
//! [ H   -E' ] [Δy]   [ -r_d + A*(W_rhs) ]     H_ij = Σ_k ⟨Ṽ_i, Ṽ_j⟩,
//! [ E    0  ] [Δλ] = [ -r_p             ]     Ṽ_i = R⁻¹ B_i R⁻ᵀ
//! ```
//!
//! solved by a Schur complement on the (small) equality block. The Gram
//! form of `H` keeps the eliminated dual step consistent with the dual
//! equation to rounding, which the iterative refinement then polishes.
//! Infeasibility is declared through scale-invariant Farkas certificates
//! built from the diverging iterates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{
    BlockSpec, ConicSolution, IterStat, Residuals, SolveStatus, SolverBackend, SolverError,
    StandardForm,
};

/// Static regularization added to the Newton and Schur systems, relative to
/// the Jacobi-normalized diagonal. Larger values leak into the Schur
/// complement and freeze dual progress on weakly degenerate instances.
const STATIC_REG: f64 = 1e-11;
/// Fraction-to-boundary damping.
const STEP_FRACTION: f64 = 0.99;
/// Relative Farkas tolerance for infeasibility declarations.
const RAY_TOL: f64 = 1e-6;
/// The duality-gap tolerance is this factor looser than the residual
/// tolerance; weakly degenerate duals cannot close the gap to residual
/// accuracy and the bound value is still good to `gap`.
const GAP_TOL_FACTOR: f64 = 100.0;

/// Self-contained dense interior-point backend.
#[derive(Debug, Clone, Default)]
pub struct DenseIpm {
    /// Log one line per iteration to stderr.
    pub verbose: bool,
}

impl SolverBackend for DenseIpm {
    fn solve(
        &self,
        sf: &StandardForm,
        tol: f64,
        max_iter: usize,
    ) -> Result<ConicSolution, SolverError> {
        if sf.blocks.is_empty() {
            return solve_equality_lp(sf, tol);
        }
        let eq = Equilibration::build(sf);
        let sol = Ipm::new(&eq.scaled, tol, max_iter, self.verbose).run()?;
        Ok(eq.unscale(sf, sol))
    }
}

/// Ruiz-style data equilibration: variable scaling `ỹ = D y` with the block
/// stacks and equality columns divided by `d_j`, and equality row scaling.
/// The slacks and dual blocks are unchanged; equality duals map back as
/// `λ_r = λ̃_r / ρ_r`. The objective is preserved (`c̃ = D⁻¹ c`).
struct Equilibration {
    scaled: StandardForm,
    d: DVector<f64>,
    rho: DVector<f64>,
}

impl Equilibration {
    fn build(sf: &StandardForm) -> Self {
        let nv = sf.num_vars;
        let me = sf.eq.nrows();
        let mut scaled = sf.clone();
        let mut d = DVector::from_element(nv, 1.0);
        let mut rho = DVector::from_element(me, 1.0);

        for _ in 0..2 {
            // Column pass over equality columns and block stacks.
            let mut col_max = vec![0.0f64; nv];
            for r in 0..me {
                for j in 0..nv {
                    col_max[j] = col_max[j].max(scaled.eq[(r, j)].abs());
                }
            }
            for b in &scaled.blocks {
                for (j, m) in &b.coeffs {
                    col_max[*j] = col_max[*j].max(mat_amax(m));
                }
            }
            for (j, &cm) in col_max.iter().enumerate() {
                if cm <= 0.0 {
                    continue;
                }
                let s = cm.sqrt().clamp(1e-8, 1e8);
                d[j] *= s;
                scaled.c[j] /= s;
                for r in 0..me {
                    scaled.eq[(r, j)] /= s;
                }
            }
            for b in &mut scaled.blocks {
                for (j, m) in &mut b.coeffs {
                    let s = col_max[*j];
                    if s > 0.0 {
                        *m /= s.sqrt().clamp(1e-8, 1e8);
                    }
                }
            }
            // Row pass over the equalities.
            for r in 0..me {
                let mut row_max = 0.0f64;
                for j in 0..nv {
                    row_max = row_max.max(scaled.eq[(r, j)].abs());
                }
                if row_max <= 0.0 {
                    continue;
                }
                let s = row_max.sqrt().clamp(1e-8, 1e8);
                rho[r] *= s;
                for j in 0..nv {
                    scaled.eq[(r, j)] /= s;
                }
                scaled.rhs[r] /= s;
            }
        }
        Self { scaled, d, rho }
    }

    fn unscale(&self, original: &StandardForm, mut sol: ConicSolution) -> ConicSolution {
        for j in 0..original.num_vars {
            sol.y[j] /= self.d[j];
        }
        for r in 0..original.eq.nrows() {
            sol.lambda[r] /= self.rho[r];
        }
        // Report residuals against the original data.
        let norm_f = 1.0 + original.rhs.amax_or_zero();
        let norm_c = 1.0 + original.c.amax_or_zero();
        let r_p = &original.eq * &sol.y - &original.rhs;
        let mut r_d = &original.c - original.eq.transpose() * &sol.lambda;
        let mut gap = 0.0;
        for (k, b) in original.blocks.iter().enumerate() {
            adjoint_sub(b, &sol.block_duals[k], &mut r_d);
            gap += inner(&apply(b, &sol.y), &sol.block_duals[k]);
        }
        sol.residuals = Residuals {
            primal_eq: r_p.amax_or_zero() / norm_f,
            dual: r_d.amax_or_zero() / norm_c,
            gap,
        };
        sol.objective = original.c.dot(&sol.y);
        sol.dual_objective = original.rhs.dot(&sol.lambda);
        sol
    }
}

/// Pure equality-constrained path (no cone): least-squares feasibility and
/// a range-space test for dual feasibility.
fn solve_equality_lp(sf: &StandardForm, tol: f64) -> Result<ConicSolution, SolverError> {
    let feas_tol = tol.max(1e-10);
    let norm_f = 1.0 + sf.rhs.amax_or_zero();
    let norm_c = 1.0 + sf.c.amax_or_zero();

    let svd = sf.eq.clone().svd(true, true);
    let y = if sf.eq.nrows() == 0 {
        DVector::zeros(sf.num_vars)
    } else {
        svd.solve(&sf.rhs, 1e-13)
            .map_err(|e| SolverError::Malformed(e.to_string()))?
    };
    let r_p = &sf.eq * &y - &sf.rhs;
    if r_p.amax_or_zero() > feas_tol * norm_f {
        return Ok(ConicSolution {
            y,
            lambda: DVector::zeros(sf.eq.nrows()),
            block_duals: vec![],
            status: SolveStatus::PrimalInfeasible,
            residuals: Residuals { primal_eq: r_p.amax_or_zero() / norm_f, dual: 0.0, gap: 0.0 },
            iterations: 0,
            objective: 0.0,
            dual_objective: 0.0,
            trace: vec![],
        });
    }

    let svd_t = sf.eq.transpose().svd(true, true);
    let lambda = if sf.eq.nrows() == 0 {
        DVector::zeros(0)
    } else {
        svd_t
            .solve(&sf.c, 1e-13)
            .map_err(|e| SolverError::Malformed(e.to_string()))?
    };
    let r_d = &sf.c - sf.eq.transpose() * &lambda;
    let status = if r_d.amax_or_zero() > feas_tol * norm_c {
        // Objective has a component along the equality null space: the
        // problem is unbounded in one direction.
        SolveStatus::DualInfeasible
    } else {
        SolveStatus::Optimal
    };
    let objective = sf.c.dot(&y);
    let dual_objective = sf.rhs.dot(&lambda);
    Ok(ConicSolution {
        y,
        lambda,
        block_duals: vec![],
        status,
        residuals: Residuals {
            primal_eq: r_p.amax_or_zero() / norm_f,
            dual: r_d.amax_or_zero() / norm_c,
            gap: 0.0,
        },
        iterations: 0,
        objective,
        dual_objective,
        trace: vec![],
    })
}

trait AmaxOrZero {
    fn amax_or_zero(&self) -> f64;
}

impl AmaxOrZero for DVector<f64> {
    fn amax_or_zero(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.amax()
        }
    }
}

struct Ipm<'a> {
    sf: &'a StandardForm,
    tol: f64,
    max_iter: usize,
    verbose: bool,
    nv: usize,
    me: usize,
    total_dim: f64,
    norm_f: f64,
    norm_c: f64,
    y: DVector<f64>,
    lambda: DVector<f64>,
    s: Vec<DMatrix<f64>>,
    q: Vec<DMatrix<f64>>,
    trace: Vec<IterStat>,
    best: Option<Snapshot>,
}

/// Best iterate seen so far, by worst normalized residual.
struct Snapshot {
    score: f64,
    ep: f64,
    ed: f64,
    gap: f64,
    pobj: f64,
    dobj: f64,
    y: DVector<f64>,
    lambda: DVector<f64>,
    q: Vec<DMatrix<f64>>,
    iter: usize,
}

/// Per-block NT scaling data for one iteration.
struct NtScale {
    /// `W = R Rᵀ` with `R⁻¹ S R⁻ᵀ = Rᵀ Q R = V = D^{1/2}`.
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    s_inv: DMatrix<f64>,
    /// Diagonal of the scaled point `V`.
    v: DVector<f64>,
    /// Scaled coefficients `Ṽ_j = R⁻¹ B_j R⁻ᵀ`, one per block variable.
    scaled: Vec<DMatrix<f64>>,
}

impl NtScale {
    fn build(block: &BlockSpec, s: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<Self> {
        let chol_s = Cholesky::new(s.clone())?;
        let l = chol_s.l();
        let m = l.transpose() * q * &l;
        let eig = m.symmetric_eigen();
        if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return None;
        }
        let d_quarter: DVector<f64> = eig.eigenvalues.map(|v| v.powf(0.25));
        let mut r = &l * &eig.eigenvectors;
        for j in 0..r.ncols() {
            let scale = 1.0 / d_quarter[j];
            for i in 0..r.nrows() {
                r[(i, j)] *= scale;
            }
        }
        // R⁻¹ = D^{1/4} Uᵀ L⁻¹.
        let dim = s.nrows();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(dim, dim))
            .expect("cholesky factor is nonsingular");
        let mut r_inv = eig.eigenvectors.transpose() * l_inv;
        for i in 0..dim {
            for j in 0..dim {
                r_inv[(i, j)] *= d_quarter[i];
            }
        }
        let s_inv = chol_s.inverse();
        let scaled = block
            .coeffs
            .iter()
            .map(|(_, b)| {
                let mut v = &r_inv * b * r_inv.transpose();
                symmetrize(&mut v);
                v
            })
            .collect();
        let v = eig.eigenvalues.map(|x| x.sqrt());
        Some(Self { r, r_inv, s_inv, v, scaled })
    }

    /// Solve the Lyapunov system `V∘X = M` entrywise:
    /// `X_ij = 2 M_ij / (v_i + v_j)`.
    fn lyapunov_div(&self, m: &mut DMatrix<f64>) {
        let n = m.nrows();
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] *= 2.0 / (self.v[i] + self.v[j]);
            }
        }
    }

    /// `R⁻¹ M R⁻ᵀ`.
    fn to_scaled(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.r_inv * m * self.r_inv.transpose()
    }

    /// `R⁻ᵀ N R⁻¹`, i.e. `W⁻¹ M W⁻¹` when `N = R⁻¹ M R⁻ᵀ`.
    fn from_scaled(&self, n: &DMatrix<f64>) -> DMatrix<f64> {
        self.r_inv.transpose() * n * &self.r_inv
    }
}

struct Direction {
    dy: DVector<f64>,
    dlambda: DVector<f64>,
    ds: Vec<DMatrix<f64>>,
    dq: Vec<DMatrix<f64>>,
}

impl<'a> Ipm<'a> {
    fn new(sf: &'a StandardForm, tol: f64, max_iter: usize, verbose: bool) -> Self {
        let nv = sf.num_vars;
        let me = sf.eq.nrows();
        let norm_f = 1.0 + sf.rhs.amax_or_zero();
        let norm_c = 1.0 + sf.c.amax_or_zero();
        let iota_p = norm_f.max(1.0);
        let iota_d = norm_c.max(1.0);
        let s = sf
            .blocks
            .iter()
            .map(|b| DMatrix::identity(b.dim, b.dim) * iota_p)
            .collect();
        let q = sf
            .blocks
            .iter()
            .map(|b| DMatrix::identity(b.dim, b.dim) * iota_d)
            .collect();
        let total_dim = sf.blocks.iter().map(|b| b.dim).sum::<usize>() as f64;
        Self {
            sf,
            tol,
            max_iter,
            verbose,
            nv,
            me,
            total_dim,
            norm_f,
            norm_c,
            y: DVector::zeros(nv),
            lambda: DVector::zeros(me),
            s,
            q,
            trace: Vec::new(),
            best: None,
        }
    }

    fn run(mut self) -> Result<ConicSolution, SolverError> {
        let mut best_mu = f64::INFINITY;
        let mut stalled = 0usize;

        for iter in 0..self.max_iter {
            if !self.y.iter().all(|v| v.is_finite()) {
                return self.abort(iter, "iterate diverged to non-finite values");
            }

            let r_p = &self.sf.eq * &self.y - &self.sf.rhs;
            let r_b: Vec<DMatrix<f64>> = self
                .sf
                .blocks
                .iter()
                .enumerate()
                .map(|(k, b)| apply(b, &self.y) - &self.s[k])
                .collect();
            let mut r_d = &self.sf.c - self.sf.eq.transpose() * &self.lambda;
            for (k, b) in self.sf.blocks.iter().enumerate() {
                adjoint_sub(b, &self.q[k], &mut r_d);
            }

            let gap: f64 = (0..self.s.len()).map(|k| inner(&self.s[k], &self.q[k])).sum();
            let mu = gap / self.total_dim;
            let pobj = self.sf.c.dot(&self.y);
            let dobj = self.sf.rhs.dot(&self.lambda);

            let ep = r_p
                .amax_or_zero()
                .max(r_b.iter().map(mat_amax).fold(0.0, f64::max))
                / self.norm_f;
            let ed = r_d.amax_or_zero() / self.norm_c;
            let eg = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());

            // Gap identity: c'y - f'λ - y'r_d - λ'r_p - Σ⟨Q, r_b⟩ = Σ⟨S, Q⟩.
            let qrb: f64 = (0..self.q.len()).map(|k| inner(&self.q[k], &r_b[k])).sum();
            let identity_defect =
                (pobj - dobj - self.y.dot(&r_d) - self.lambda.dot(&r_p) - qrb - gap).abs();
            self.trace.push(IterStat { mu, primal_obj: pobj, dual_obj: dobj, gap, identity_defect });

            if self.verbose {
                eprintln!(
                    "ipm iter {iter:3}  mu {mu:9.2e}  ep {ep:9.2e}  ed {ed:9.2e}  eg {eg:9.2e}  pobj {pobj:12.5e}  dobj {dobj:12.5e}"
                );
            }

            let score = ep.max(ed).max(eg / GAP_TOL_FACTOR);
            if self.best.as_ref().is_none_or(|b| score < b.score) {
                self.best = Some(Snapshot {
                    score,
                    ep,
                    ed,
                    gap,
                    pobj,
                    dobj,
                    y: self.y.clone(),
                    lambda: self.lambda.clone(),
                    q: self.q.clone(),
                    iter,
                });
            }

            if ep <= self.tol && ed <= self.tol && eg <= GAP_TOL_FACTOR * self.tol {
                return Ok(self.finish(SolveStatus::Optimal, iter, ep, ed, gap, pobj, dobj));
            }

            // Farkas-style infeasibility certificates on the iterates.
            let pres = (&self.sf.c - &r_d).amax_or_zero();
            if dobj > 1e-2 * self.norm_f && pres <= RAY_TOL * dobj {
                return Ok(self.finish(SolveStatus::PrimalInfeasible, iter, ep, ed, gap, pobj, dobj));
            }
            if -pobj > 1e4 * (self.norm_c + self.norm_f) {
                let ray_eq = (&r_p + &self.sf.rhs).amax_or_zero();
                let ray_cone = self
                    .sf
                    .blocks
                    .iter()
                    .map(|b| min_eig(&apply(b, &self.y)))
                    .fold(f64::INFINITY, f64::min);
                if ray_eq <= RAY_TOL * (-pobj) && ray_cone >= -RAY_TOL * (-pobj) {
                    return Ok(self.finish(
                        SolveStatus::DualInfeasible,
                        iter,
                        ep,
                        ed,
                        gap,
                        pobj,
                        dobj,
                    ));
                }
            }

            if mu < 0.9 * best_mu {
                best_mu = mu;
                stalled = 0;
            } else {
                stalled += 1;
            }
            if stalled > 25 {
                return Ok(self.fallback_status(iter, ep, ed, gap, pobj, dobj, pres));
            }

            // NT scaling per block, then the Newton data.
            let mut scales = Vec::with_capacity(self.s.len());
            for (k, b) in self.sf.blocks.iter().enumerate() {
                match NtScale::build(b, &self.s[k], &self.q[k]) {
                    Some(sc) => scales.push(sc),
                    None => return self.abort(iter, "scaling point lost positive definiteness"),
                }
            }

            let h = self.assemble_h(&scales);
            let kkt = match KktFactors::new(&h, &self.sf.eq, iter) {
                Ok(k) => k,
                Err(_) => return self.abort(iter, "Newton system singular beyond regularization"),
            };

            // Predictor: pure Newton step toward feasibility and zero gap.
            let w_pred: Vec<DMatrix<f64>> = (0..self.s.len())
                .map(|k| {
                    let rb_scaled = scales[k].to_scaled(&r_b[k]);
                    -&self.q[k] - scales[k].from_scaled(&rb_scaled)
                })
                .collect();
            let aff = self.newton_step(&kkt, &h, &r_p, &r_d, &r_b, &scales, &w_pred);
            if !aff.dy.iter().all(|v| v.is_finite()) {
                return self.abort(iter, "Newton direction not finite");
            }
            let alpha_aff_p = (STEP_FRACTION * self.max_step(&self.s, &aff.ds)).min(1.0);
            let alpha_aff_d = (STEP_FRACTION * self.max_step(&self.q, &aff.dq)).min(1.0);

            let mut gap_aff = 0.0;
            for k in 0..self.s.len() {
                let s_new = &self.s[k] + &aff.ds[k] * alpha_aff_p;
                let q_new = &self.q[k] + &aff.dq[k] * alpha_aff_d;
                gap_aff += inner(&s_new, &q_new);
            }
            let mu_aff = (gap_aff / self.total_dim).max(0.0);
            let mut sigma = (mu_aff / mu).powi(3).clamp(1e-12, 1.0);
            // Hold the barrier while feasibility lags the gap; letting mu
            // race to zero first leaves no centrality to repair residuals.
            let infeas = (ep * self.norm_f).max(ed * self.norm_c);
            if mu < 0.1 * infeas {
                sigma = sigma.max(0.5);
            }

            // Corrector: recentering plus the Mehrotra second-order term,
            // formed in the scaled space.
            let w_corr: Vec<DMatrix<f64>> = (0..self.s.len())
                .map(|k| {
                    let sc = &scales[k];
                    let ds_scaled = sc.to_scaled(&aff.ds[k]);
                    let dq_scaled = sc.r.transpose() * &aff.dq[k] * &sc.r;
                    let mut second = ds_scaled * dq_scaled;
                    symmetrize(&mut second);
                    sc.lyapunov_div(&mut second);
                    let rb_scaled = sc.to_scaled(&r_b[k]);
                    &sc.s_inv * (sigma * mu) - &self.q[k] - sc.from_scaled(&(second + rb_scaled))
                })
                .collect();
            let dir = self.newton_step(&kkt, &h, &r_p, &r_d, &r_b, &scales, &w_corr);
            if !dir.dy.iter().all(|v| v.is_finite()) {
                return self.abort(iter, "Newton direction not finite");
            }

            // A common step keeps the gap from exploding while residuals
            // are still large; split steps only once roughly feasible.
            let step_s = (STEP_FRACTION * self.max_step(&self.s, &dir.ds)).min(1.0);
            let step_q = (STEP_FRACTION * self.max_step(&self.q, &dir.dq)).min(1.0);
            let (mut alpha_p, mut alpha_d) = if ep.max(ed) > self.tol.max(1e-10) * 1e2 {
                let a = step_s.min(step_q);
                (a, a)
            } else {
                (step_s, step_q)
            };
            // Neighborhood guard: never let the gap undershoot the residual
            // scale, or there is no centrality left to repair feasibility.
            for _ in 0..24 {
                let mut gap_new = 0.0;
                for k in 0..self.s.len() {
                    let s_new = &self.s[k] + &dir.ds[k] * alpha_p;
                    let q_new = &self.q[k] + &dir.dq[k] * alpha_d;
                    gap_new += inner(&s_new, &q_new);
                }
                let mu_new = gap_new / self.total_dim;
                let inf_new = ((1.0 - alpha_p) * ep * self.norm_f)
                    .max((1.0 - alpha_d) * ed * self.norm_c);
                if mu_new >= 0.1 * inf_new || mu_new >= mu {
                    break;
                }
                alpha_p *= 0.8;
                alpha_d *= 0.8;
            }

            if self.verbose {
                eprintln!(
                    "    step: sigma {sigma:8.2e}  alpha_p {alpha_p:8.2e}  alpha_d {alpha_d:8.2e}  |dy| {:8.2e}",
                    dir.dy.amax_or_zero()
                );
            }
            self.y += &dir.dy * alpha_p;
            self.lambda += &dir.dlambda * alpha_d;
            for k in 0..self.s.len() {
                self.s[k] += &dir.ds[k] * alpha_p;
                symmetrize(&mut self.s[k]);
                self.q[k] += &dir.dq[k] * alpha_d;
                symmetrize(&mut self.q[k]);
            }
        }

        let r_p = &self.sf.eq * &self.y - &self.sf.rhs;
        let mut r_d = &self.sf.c - self.sf.eq.transpose() * &self.lambda;
        for (k, b) in self.sf.blocks.iter().enumerate() {
            adjoint_sub(b, &self.q[k], &mut r_d);
        }
        let gap: f64 = (0..self.s.len()).map(|k| inner(&self.s[k], &self.q[k])).sum();
        let pobj = self.sf.c.dot(&self.y);
        let dobj = self.sf.rhs.dot(&self.lambda);
        let ep = r_p.amax_or_zero() / self.norm_f;
        let ed = r_d.amax_or_zero() / self.norm_c;
        let pres = (&self.sf.c - &r_d).amax_or_zero();
        let last_iter = self.max_iter;
        Ok(self.fallback_status(last_iter, ep, ed, gap, pobj, dobj, pres))
    }

    /// Status when iteration stops making progress: prefer a clear Farkas
    /// signal, otherwise report the best iterate seen.
    #[allow(clippy::too_many_arguments)]
    fn fallback_status(
        mut self,
        iter: usize,
        ep: f64,
        ed: f64,
        gap: f64,
        pobj: f64,
        dobj: f64,
        pres: f64,
    ) -> ConicSolution {
        if dobj > 1e-2 * self.norm_f && pres <= 1e-4 * dobj {
            return self.finish(SolveStatus::PrimalInfeasible, iter, ep, ed, gap, pobj, dobj);
        }
        if let Some(b) = self.best.take() {
            if b.score < ep.max(ed) {
                self.y = b.y.clone();
                self.lambda = b.lambda.clone();
                self.q = b.q.clone();
                return self.finish(SolveStatus::Inaccurate, b.iter, b.ep, b.ed, b.gap, b.pobj, b.dobj);
            }
        }
        self.finish(SolveStatus::Inaccurate, iter, ep, ed, gap, pobj, dobj)
    }

    /// Numerical trouble: fall back to the best iterate when it is usable,
    /// otherwise surface the breakdown.
    fn abort(mut self, iter: usize, what: &str) -> Result<ConicSolution, SolverError> {
        if let Some(b) = self.best.take() {
            if b.score <= 1e-5 {
                self.y = b.y.clone();
                self.lambda = b.lambda.clone();
                self.q = b.q.clone();
                let status = if b.score <= self.tol {
                    SolveStatus::Optimal
                } else {
                    SolveStatus::Inaccurate
                };
                return Ok(self.finish(status, b.iter, b.ep, b.ed, b.gap, b.pobj, b.dobj));
            }
        }
        Err(SolverError::NumericalBreakdown { iteration: iter, what: what.into() })
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &mut self,
        mut status: SolveStatus,
        iterations: usize,
        ep: f64,
        mut ed: f64,
        mut gap: f64,
        objective: f64,
        mut dual_objective: f64,
    ) -> ConicSolution {
        // The equality multipliers are unconstrained, so a least-squares
        // polish of λ against the fixed cone duals can only improve dual
        // feasibility. Helps degenerate duals whose λ wanders late.
        if matches!(status, SolveStatus::Optimal | SolveStatus::Inaccurate) && self.me > 0 {
            let mut rd_free = self.sf.c.clone();
            for (k, b) in self.sf.blocks.iter().enumerate() {
                adjoint_sub(b, &self.q[k], &mut rd_free);
            }
            let svd = self.sf.eq.transpose().svd(true, true);
            if let Ok(cand) = svd.solve(&rd_free, 1e-13) {
                let ed_cand =
                    (&rd_free - self.sf.eq.transpose() * &cand).amax_or_zero() / self.norm_c;
                if ed_cand < ed {
                    self.lambda = cand;
                    ed = ed_cand;
                    dual_objective = self.sf.rhs.dot(&self.lambda);
                }
            }
            gap = (0..self.q.len())
                .map(|k| inner(&apply(&self.sf.blocks[k], &self.y), &self.q[k]))
                .sum();
            let eg = (objective - dual_objective).abs()
                / (1.0 + objective.abs() + dual_objective.abs());
            if status == SolveStatus::Inaccurate
                && ep <= self.tol
                && ed <= self.tol
                && eg <= GAP_TOL_FACTOR * self.tol
            {
                status = SolveStatus::Optimal;
            }
        }
        ConicSolution {
            y: self.y.clone(),
            lambda: self.lambda.clone(),
            block_duals: self.q.clone(),
            status,
            residuals: Residuals { primal_eq: ep, dual: ed, gap },
            iterations,
            objective,
            dual_objective,
            trace: std::mem::take(&mut self.trace),
        }
    }

    /// `H_ij = Σ_k ⟨Ṽ_i, Ṽ_j⟩`: an exact Gram matrix, symmetric PSD.
    fn assemble_h(&self, scales: &[NtScale]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.nv, self.nv);
        for (k, block) in self.sf.blocks.iter().enumerate() {
            let vs = &scales[k].scaled;
            for (a, (ja, _)) in block.coeffs.iter().enumerate() {
                for (b, (jb, _)) in block.coeffs.iter().enumerate().skip(a) {
                    let v = inner(&vs[a], &vs[b]);
                    h[(*ja, *jb)] += v;
                    if ja != jb {
                        h[(*jb, *ja)] += v;
                    }
                }
            }
        }
        h
    }

    /// Solve the reduced KKT system for one right-hand side set, with two
    /// rounds of iterative refinement against the unregularized system.
    #[allow(clippy::too_many_arguments)]
    fn newton_step(
        &self,
        kkt: &KktFactors,
        h: &DMatrix<f64>,
        r_p: &DVector<f64>,
        r_d: &DVector<f64>,
        r_b: &[DMatrix<f64>],
        scales: &[NtScale],
        w_rhs: &[DMatrix<f64>],
    ) -> Direction {
        let mut rhs_y = -r_d;
        for (k, b) in self.sf.blocks.iter().enumerate() {
            adjoint_add(b, &w_rhs[k], &mut rhs_y);
        }
        let rhs_l = -r_p;

        let solve_once = |b_y: &DVector<f64>, b_l: &DVector<f64>| {
            let hv = kkt.h_solve(b_y);
            if self.me > 0 {
                let rl = b_l - &self.sf.eq * &hv;
                let dl = kkt.schur_chol.solve(&rl);
                (&hv + &kkt.ht_e * &dl, dl)
            } else {
                (hv, DVector::zeros(0))
            }
        };

        let (mut dy, mut dlambda) = solve_once(&rhs_y, &rhs_l);
        for _ in 0..3 {
            let mut res_y = &rhs_y - h * &dy;
            if self.me > 0 {
                res_y += self.sf.eq.transpose() * &dlambda;
            }
            let res_l = &rhs_l - &self.sf.eq * &dy;
            if !res_y.iter().all(|v| v.is_finite()) {
                break;
            }
            let (cy, cl) = solve_once(&res_y, &res_l);
            dy += cy;
            dlambda += cl;
        }

        let ds: Vec<DMatrix<f64>> = self
            .sf
            .blocks
            .iter()
            .enumerate()
            .map(|(k, b)| apply(b, &dy) + &r_b[k])
            .collect();
        let dq: Vec<DMatrix<f64>> = (0..self.s.len())
            .map(|k| {
                let change = apply(&self.sf.blocks[k], &dy);
                let scaled = scales[k].to_scaled(&change);
                let mut m = &w_rhs[k] - scales[k].from_scaled(&scaled);
                symmetrize(&mut m);
                m
            })
            .collect();
        Direction { dy, dlambda, ds, dq }
    }

    /// Largest step keeping every listed block inside the cone.
    fn max_step(&self, mats: &[DMatrix<f64>], deltas: &[DMatrix<f64>]) -> f64 {
        let mut alpha = f64::INFINITY;
        for (m, d) in mats.iter().zip(deltas) {
            if m.nrows() == 1 {
                let lam = d[(0, 0)] / m[(0, 0)];
                if lam < 0.0 {
                    alpha = alpha.min(-1.0 / lam);
                }
                continue;
            }
            let chol = match Cholesky::new(m.clone()) {
                Some(c) => c,
                None => return 1e-4,
            };
            let l = chol.l();
            let y = l
                .solve_lower_triangular(d)
                .expect("cholesky factor is nonsingular");
            let z = l
                .solve_lower_triangular(&y.transpose())
                .expect("cholesky factor is nonsingular");
            let lam_min = min_eig(&z);
            if lam_min < -1e-13 {
                alpha = alpha.min(-1.0 / lam_min);
            }
        }
        alpha
    }
}

struct KktFactors {
    /// Cholesky of the Jacobi-scaled, regularized Newton matrix.
    h_chol: Cholesky<f64, Dyn>,
    schur_chol: Cholesky<f64, Dyn>,
    /// Jacobi scale: `H_scaled = Dh H Dh` has unit diagonal.
    dh: DVector<f64>,
    /// `H̃⁻¹ E'` in original coordinates, reused across predictor and
    /// corrector.
    ht_e: DMatrix<f64>,
}

impl KktFactors {
    fn new(h: &DMatrix<f64>, eq: &DMatrix<f64>, iter: usize) -> Result<Self, SolverError> {
        let nv = h.nrows();
        let me = eq.nrows();
        if !h.iter().all(|v| v.is_finite()) {
            return Err(SolverError::NumericalBreakdown {
                iteration: iter,
                what: "Newton matrix not finite".into(),
            });
        }
        // Jacobi scaling keeps the regularization meaningful across the wide
        // dynamic range the Newton matrix develops near convergence.
        let dh: DVector<f64> =
            DVector::from_fn(nv, |i, _| 1.0 / h[(i, i)].abs().max(1e-300).sqrt().max(1e-150));
        let mut hs = h.clone();
        for i in 0..nv {
            for j in 0..nv {
                hs[(i, j)] *= dh[i] * dh[j];
            }
        }
        let mut reg = STATIC_REG;
        loop {
            let mut hr = hs.clone();
            for i in 0..nv {
                hr[(i, i)] += reg;
            }
            if let Some(h_chol) = Cholesky::new(hr) {
                // ht_e = H̃⁻¹ E' computed through the scaled factor.
                let mut rhs = eq.transpose();
                for i in 0..nv {
                    for c in 0..me {
                        rhs[(i, c)] *= dh[i];
                    }
                }
                let mut ht_e = h_chol.solve(&rhs);
                for i in 0..nv {
                    for c in 0..me {
                        ht_e[(i, c)] *= dh[i];
                    }
                }
                let mut schur = eq * &ht_e;
                let s_scale = 1.0 + (0..me).map(|i| schur[(i, i)].abs()).fold(0.0, f64::max);
                for i in 0..me {
                    schur[(i, i)] += STATIC_REG * s_scale;
                }
                if me == 0 {
                    let schur_chol = Cholesky::new(DMatrix::identity(0, 0))
                        .expect("empty matrix factors trivially");
                    return Ok(Self { h_chol, schur_chol, dh, ht_e });
                }
                if let Some(schur_chol) = Cholesky::new(schur) {
                    return Ok(Self { h_chol, schur_chol, dh, ht_e });
                }
            }
            reg *= 100.0;
            if reg > 1e-3 {
                return Err(SolverError::NumericalBreakdown {
                    iteration: iter,
                    what: "Newton system singular beyond regularization".into(),
                });
            }
        }
    }

    /// Solve `H̃ x = b` through the Jacobi-scaled factorization.
    fn h_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let scaled = b.component_mul(&self.dh);
        let x = self.h_chol.solve(&scaled);
        x.component_mul(&self.dh)
    }
}

fn apply(block: &BlockSpec, y: &DVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(block.dim, block.dim);
    for (j, b) in &block.coeffs {
        let v = y[*j];
        if v != 0.0 {
            m.zip_apply(b, |out, bv| *out += v * bv);
        }
    }
    m
}

/// `out_j -= ⟨B_j, M⟩` for every variable of the block.
fn adjoint_sub(block: &BlockSpec, m: &DMatrix<f64>, out: &mut DVector<f64>) {
    for (j, b) in &block.coeffs {
        out[*j] -= inner(b, m);
    }
}

/// `out_j += ⟨B_j, M⟩` for every variable of the block.
fn adjoint_add(block: &BlockSpec, m: &DMatrix<f64>, out: &mut DVector<f64>) {
    for (j, b) in &block.coeffs {
        out[*j] += inner(b, m);
    }
}

/// Frobenius inner product.
fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn mat_amax(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}
