//! Sparse convex quadratic programming.
//!
//! Solves
//! ```text
//!     minimize   1/2 x' P x + q' x
//!     subject to l <= A x <= u
//! ```
//! with an operator-splitting (ADMM) method over a cached LDL^T
//! factorization of the quasi-definite KKT matrix, Ruiz equilibration, and
//! an optional active-set polish step that sharpens solutions to near
//! machine precision. Equality rows (`l == u`) get a stiffer penalty so the
//! chain dynamics used by the planning layers converge quickly.

mod ldl;
mod ordering;
mod sparse;

pub use sparse::CscMatrix;

use ldl::LdlFactor;
use thiserror::Error;

/// Bounds with magnitude at or above this value are treated as infinite.
pub const QP_INFINITY: f64 = 1e30;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("inconsistent bounds at row {row}: lower {lower} > upper {upper}")]
    InconsistentBounds { row: usize, lower: f64, upper: f64 },
    #[error("quadratic cost entry ({0}, {1}) is below the diagonal; store the upper triangle")]
    LowerTriangleEntry(usize, usize),
    #[error("non-finite problem data in {0}")]
    NonFiniteData(&'static str),
    #[error("numerical breakdown while factorizing KKT pivot {pivot}")]
    FactorizationFailed { pivot: usize },
}

/// Convex QP in standard sparse form.
#[derive(Debug, Clone)]
pub struct QpProblem {
    n_vars: usize,
    quadratic: CscMatrix,
    linear: Vec<f64>,
    constraints: CscMatrix,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl QpProblem {
    /// `p_upper` holds the upper triangle (row <= col) of the quadratic
    /// cost matrix P; `a` holds constraint rows of `l <= A x <= u`.
    pub fn new(
        n_vars: usize,
        p_upper: &[(usize, usize, f64)],
        linear: Vec<f64>,
        a: &[(usize, usize, f64)],
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self, QpError> {
        if linear.len() != n_vars {
            return Err(QpError::DimensionMismatch(format!(
                "linear cost has {} entries for {} variables",
                linear.len(),
                n_vars
            )));
        }
        if lower.len() != upper.len() {
            return Err(QpError::DimensionMismatch(format!(
                "lower has {} rows, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        let m = lower.len();
        for &(r, c, v) in p_upper {
            if r > c {
                return Err(QpError::LowerTriangleEntry(r, c));
            }
            if c >= n_vars {
                return Err(QpError::DimensionMismatch(format!(
                    "quadratic entry column {c} out of range"
                )));
            }
            if !v.is_finite() {
                return Err(QpError::NonFiniteData("quadratic cost"));
            }
        }
        for &(r, c, v) in a {
            if r >= m || c >= n_vars {
                return Err(QpError::DimensionMismatch(format!(
                    "constraint entry ({r}, {c}) out of range for {m} x {n_vars}"
                )));
            }
            if !v.is_finite() {
                return Err(QpError::NonFiniteData("constraint matrix"));
            }
        }
        if linear.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFiniteData("linear cost"));
        }
        for (row, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() {
                return Err(QpError::NonFiniteData("bounds"));
            }
            if lo > hi {
                return Err(QpError::InconsistentBounds {
                    row,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self {
            n_vars,
            quadratic: CscMatrix::from_triplets(n_vars, n_vars, p_upper),
            linear,
            constraints: CscMatrix::from_triplets(m, n_vars, a),
            lower,
            upper,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_constraints(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    pub fn quadratic(&self) -> &CscMatrix {
        &self.quadratic
    }

    pub fn constraints(&self) -> &CscMatrix {
        &self.constraints
    }

    /// 1/2 x'Px + q'x
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut px = vec![0.0; self.n_vars];
        self.quadratic.sym_matvec_add(x, &mut px);
        let mut value = 0.0;
        for j in 0..self.n_vars {
            value += 0.5 * px[j] * x[j] + self.linear[j] * x[j];
        }
        value
    }

    /// Writes the problem as a plain-text dump for offline reproduction.
    /// Format: header lines `vars`/`cons`, then one `P r c v` line per
    /// upper-triangle quadratic entry, one `q j v` per nonzero linear
    /// entry, one `A r c v` per constraint entry and one `B r lower upper`
    /// line per constraint row (`inf`/`-inf` for free sides).
    pub fn write_debug(&self, out: &mut dyn std::io::Write) -> std::io::Result<()> {
        writeln!(out, "vars {}", self.n_vars)?;
        writeln!(out, "cons {}", self.n_constraints())?;
        for (r, c, v) in self.quadratic.iter() {
            writeln!(out, "P {r} {c} {v:.17e}")?;
        }
        for (j, v) in self.linear.iter().enumerate() {
            if *v != 0.0 {
                writeln!(out, "q {j} {v:.17e}")?;
            }
        }
        for (r, c, v) in self.constraints.iter() {
            writeln!(out, "A {r} {c} {v:.17e}")?;
        }
        let fmt_bound = |b: f64| {
            if b >= QP_INFINITY {
                "inf".to_string()
            } else if b <= -QP_INFINITY {
                "-inf".to_string()
            } else {
                format!("{b:.17e}")
            }
        };
        for r in 0..self.n_constraints() {
            writeln!(out, "B {r} {} {}", fmt_bound(self.lower[r]), fmt_bound(self.upper[r]))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iterations: usize,
    /// Solve the KKT system on the detected active set after convergence.
    pub polish: bool,
    /// ADMM penalty; `None` picks the default and lets adaptation run.
    pub rho: Option<f64>,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            abs_tol: 1e-6,
            rel_tol: 1e-6,
            max_iterations: 20_000,
            polish: true,
            rho: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
}

const SIGMA: f64 = 1e-6;
const ALPHA: f64 = 1.6;
const RHO_DEFAULT: f64 = 0.1;
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const CHECK_INTERVAL: usize = 25;
const RHO_UPDATE_INTERVAL: usize = 100;
const RHO_UPDATE_FACTOR: f64 = 5.0;
const EPS_INFEASIBLE: f64 = 1e-4;
const RUIZ_ITERS: usize = 10;
const POLISH_DELTA: f64 = 1e-7;
const POLISH_REFINE_STEPS: usize = 3;

fn is_neg_inf(b: f64) -> bool {
    b <= -QP_INFINITY
}

fn is_pos_inf(b: f64) -> bool {
    b >= QP_INFINITY
}

/// Solves the QP from a cold start.
pub fn solve(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    solve_warm(problem, settings, None)
}

/// Solves the QP, optionally seeding the primal iterate with a guess.
pub fn solve_warm(
    problem: &QpProblem,
    settings: &QpSettings,
    initial_guess: Option<&[f64]>,
) -> Result<QpSolution, QpError> {
    let mut solver = Solver::new(problem, settings)?;
    solver.run(initial_guess)
}

struct Scaling {
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
}

struct Solver<'a> {
    problem: &'a QpProblem,
    settings: QpSettings,
    n: usize,
    m: usize,
    // Ruiz-scaled copies.
    p: CscMatrix,
    q: Vec<f64>,
    a: CscMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
    scaling: Scaling,
    rho: Vec<f64>,
    rho_base: f64,
    eq_row: Vec<bool>,
    kkt_pattern: Vec<(usize, usize)>,
    kkt_values: Vec<f64>,
    rho_entry_offset: usize,
    factor: LdlFactor,
}

impl<'a> Solver<'a> {
    fn new(problem: &'a QpProblem, settings: &QpSettings) -> Result<Self, QpError> {
        let n = problem.n_vars;
        let m = problem.n_constraints();

        let mut p = problem.quadratic.clone();
        let mut q = problem.linear.clone();
        let mut a = problem.constraints.clone();
        let mut l = problem.lower.clone();
        let mut u = problem.upper.clone();

        let scaling = ruiz_equilibrate(&mut p, &mut q, &mut a, n, m);
        for i in 0..m {
            if !is_neg_inf(l[i]) {
                l[i] *= scaling.e[i];
            }
            if !is_pos_inf(u[i]) {
                u[i] *= scaling.e[i];
            }
        }

        let eq_row: Vec<bool> = (0..m)
            .map(|i| !is_neg_inf(l[i]) && !is_pos_inf(u[i]) && (u[i] - l[i]).abs() < 1e-12)
            .collect();
        let rho_base = settings.rho.unwrap_or(RHO_DEFAULT).clamp(RHO_MIN, RHO_MAX);
        let rho: Vec<f64> = eq_row
            .iter()
            .map(|&eq| if eq { rho_base * RHO_EQ_FACTOR } else { rho_base })
            .collect();

        // KKT = [[P + sigma I, A'], [A, -diag(1/rho)]], upper triangle.
        let mut pattern = Vec::with_capacity(p.nnz() + a.nnz() + n + m);
        let mut values = Vec::with_capacity(pattern.capacity());
        for (r, c, v) in p.iter() {
            pattern.push((r, c));
            values.push(v);
        }
        for j in 0..n {
            pattern.push((j, j));
            values.push(SIGMA);
        }
        for (r, c, v) in a.iter() {
            pattern.push((c, n + r));
            values.push(v);
        }
        let rho_entry_offset = values.len();
        for i in 0..m {
            pattern.push((n + i, n + i));
            values.push(-1.0 / rho[i]);
        }
        let mut signs = vec![1i8; n];
        signs.extend(std::iter::repeat(-1i8).take(m));
        let factor = LdlFactor::new(n + m, &pattern, &values, &signs)?;

        Ok(Self {
            problem,
            settings: settings.clone(),
            n,
            m,
            p,
            q,
            a,
            l,
            u,
            scaling,
            rho,
            rho_base,
            eq_row,
            kkt_pattern: pattern,
            kkt_values: values,
            rho_entry_offset,
            factor,
        })
    }

    fn update_rho(&mut self, new_base: f64) -> Result<(), QpError> {
        self.rho_base = new_base;
        for i in 0..self.m {
            self.rho[i] = if self.eq_row[i] {
                new_base * RHO_EQ_FACTOR
            } else {
                new_base
            };
            self.kkt_values[self.rho_entry_offset + i] = -1.0 / self.rho[i];
        }
        self.factor.refactor(&self.kkt_pattern, &self.kkt_values)
    }

    fn run(&mut self, initial_guess: Option<&[f64]>) -> Result<QpSolution, QpError> {
        let (n, m) = (self.n, self.m);
        let mut x = vec![0.0; n];
        if let Some(guess) = initial_guess {
            assert_eq!(guess.len(), n, "initial guess length");
            for j in 0..n {
                x[j] = guess[j] / self.scaling.d[j];
            }
        }
        let mut z = vec![0.0; m];
        self.a.matvec_add(&x, &mut z);
        for i in 0..m {
            z[i] = z[i].clamp(self.l[i], self.u[i]);
        }
        let mut y = vec![0.0; m];

        let mut rhs = vec![0.0; n + m];
        let mut x_prev = x.clone();
        let mut y_prev = y.clone();

        let mut iterations = 0;
        let mut status = QpStatus::MaxIterations;
        let mut polished: Option<(Vec<f64>, Vec<f64>)> = None;

        // When polish is enabled the splitting phase only needs to identify
        // the active set: iterate to a coarse tolerance, polish, and accept
        // the polished solution iff it verifies at the strict tolerances.
        let coarse_abs = if self.settings.polish {
            self.settings.abs_tol.max(1e-4)
        } else {
            self.settings.abs_tol
        };
        let coarse_rel = if self.settings.polish {
            self.settings.rel_tol.max(1e-4)
        } else {
            self.settings.rel_tol
        };
        let mut next_polish_attempt = 0usize;

        while iterations < self.settings.max_iterations {
            iterations += 1;
            for j in 0..n {
                rhs[j] = SIGMA * x[j] - self.q[j];
            }
            for i in 0..m {
                rhs[n + i] = z[i] - y[i] / self.rho[i];
            }
            self.factor.solve_in_place(&mut rhs);

            for j in 0..n {
                x[j] = ALPHA * rhs[j] + (1.0 - ALPHA) * x[j];
            }
            for i in 0..m {
                let zt = z[i] + (rhs[n + i] - y[i]) / self.rho[i];
                let relaxed = ALPHA * zt + (1.0 - ALPHA) * z[i];
                let z_new = (relaxed + y[i] / self.rho[i]).clamp(self.l[i], self.u[i]);
                y[i] += self.rho[i] * (relaxed - z_new);
                z[i] = z_new;
            }

            if iterations % CHECK_INTERVAL == 0 || iterations == self.settings.max_iterations {
                let res = self.residuals(&x, &z, &y);
                let eps_prim = self.settings.abs_tol + self.settings.rel_tol * res.prim_scale;
                let eps_dual = self.settings.abs_tol + self.settings.rel_tol * res.dual_scale;
                if res.prim <= eps_prim && res.dual <= eps_dual {
                    status = QpStatus::Solved;
                    break;
                }
                let coarse_prim = coarse_abs + coarse_rel * res.prim_scale;
                let coarse_dual = coarse_abs + coarse_rel * res.dual_scale;
                if self.settings.polish
                    && iterations >= next_polish_attempt
                    && res.prim <= coarse_prim
                    && res.dual <= coarse_dual
                {
                    let (primal, dual) = self.unscaled(&x, &y);
                    if let Some((px, py)) = self.polish(&primal, &dual) {
                        let check = unscaled_residuals(self.problem, &px, &py);
                        let ok_prim =
                            check.prim <= self.settings.abs_tol + self.settings.rel_tol * check.prim_scale;
                        let ok_dual =
                            check.dual <= self.settings.abs_tol + self.settings.rel_tol * check.dual_scale;
                        if ok_prim && ok_dual {
                            status = QpStatus::Solved;
                            polished = Some((px, py));
                            break;
                        }
                    }
                    // Active set not yet identifiable; keep iterating.
                    next_polish_attempt = iterations + 500;
                }
                if let Some(infeasible) = self.check_infeasibility(&x, &x_prev, &y, &y_prev) {
                    status = infeasible;
                    break;
                }
                x_prev.copy_from_slice(&x);
                y_prev.copy_from_slice(&y);

                if iterations % RHO_UPDATE_INTERVAL == 0 {
                    let prim_rel = res.prim / res.prim_scale.max(1e-12);
                    let dual_rel = res.dual / res.dual_scale.max(1e-12);
                    if prim_rel > 1e-16 && dual_rel > 1e-16 {
                        let ratio = (prim_rel / dual_rel).sqrt();
                        if ratio > RHO_UPDATE_FACTOR || ratio < 1.0 / RHO_UPDATE_FACTOR {
                            let new_base = (self.rho_base * ratio).clamp(RHO_MIN, RHO_MAX);
                            self.update_rho(new_base)?;
                        }
                    }
                }
            }
        }

        let already_polished = polished.is_some();
        let (mut primal, mut dual) = match polished {
            Some(pair) => pair,
            None => self.unscaled(&x, &y),
        };

        if !already_polished && status == QpStatus::Solved && self.settings.polish {
            if let Some((px, py)) = self.polish(&primal, &dual) {
                primal = px;
                dual = py;
            }
        }

        let objective = self.problem.objective(&primal);
        Ok(QpSolution {
            primal,
            dual,
            status,
            iterations,
            objective,
        })
    }

    fn unscaled(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut primal = vec![0.0; self.n];
        for j in 0..self.n {
            primal[j] = x[j] * self.scaling.d[j];
        }
        let mut dual = vec![0.0; self.m];
        for i in 0..self.m {
            dual[i] = y[i] * self.scaling.e[i] / self.scaling.c;
        }
        (primal, dual)
    }

    fn residuals(&self, x: &[f64], z: &[f64], y: &[f64]) -> Residuals {
        let (n, m) = (self.n, self.m);
        let d = &self.scaling.d;
        let e = &self.scaling.e;
        let c = self.scaling.c;

        let mut ax = vec![0.0; m];
        self.a.matvec_add(x, &mut ax);
        let mut px = vec![0.0; n];
        self.p.sym_matvec_add(x, &mut px);
        let mut aty = vec![0.0; n];
        self.a.matvec_transpose_add(y, &mut aty);

        let mut prim = 0.0;
        let mut norm_ax = 0.0;
        let mut norm_z = 0.0;
        for i in 0..m {
            prim = f64::max(prim, (ax[i] - z[i]).abs() / e[i]);
            norm_ax = f64::max(norm_ax, ax[i].abs() / e[i]);
            norm_z = f64::max(norm_z, z[i].abs() / e[i]);
        }
        let mut dual = 0.0;
        let mut norm_px = 0.0;
        let mut norm_aty = 0.0;
        let mut norm_q = 0.0;
        for j in 0..n {
            let scale = 1.0 / (c * d[j]);
            dual = f64::max(dual, (px[j] + self.q[j] + aty[j]).abs() * scale);
            norm_px = f64::max(norm_px, px[j].abs() * scale);
            norm_aty = f64::max(norm_aty, aty[j].abs() * scale);
            norm_q = f64::max(norm_q, self.q[j].abs() * scale);
        }
        Residuals {
            prim,
            dual,
            prim_scale: norm_ax.max(norm_z),
            dual_scale: norm_px.max(norm_aty).max(norm_q),
        }
    }

    fn check_infeasibility(
        &self,
        x: &[f64],
        x_prev: &[f64],
        y: &[f64],
        y_prev: &[f64],
    ) -> Option<QpStatus> {
        let (n, m) = (self.n, self.m);
        let d = &self.scaling.d;
        let e = &self.scaling.e;
        let c = self.scaling.c;

        // Primal infeasibility certificate from the dual direction.
        let mut dy = vec![0.0; m];
        let mut dy_norm = 0.0f64;
        for i in 0..m {
            dy[i] = y[i] - y_prev[i];
            dy_norm = dy_norm.max((dy[i] * e[i] / c).abs());
        }
        if dy_norm > 1e-12 {
            let mut at_dy = vec![0.0; n];
            self.a.matvec_transpose_add(&dy, &mut at_dy);
            let mut at_norm = 0.0f64;
            for j in 0..n {
                at_norm = at_norm.max((at_dy[j] / (c * d[j])).abs());
            }
            let mut support = 0.0;
            let mut certificate = at_norm <= EPS_INFEASIBLE * dy_norm;
            if certificate {
                for i in 0..m {
                    let dy_u = dy[i] * e[i] / c;
                    if dy_u > 0.0 {
                        if is_pos_inf(self.problem.upper[i]) {
                            certificate = false;
                            break;
                        }
                        support += self.problem.upper[i] * dy_u;
                    } else if dy_u < 0.0 {
                        if is_neg_inf(self.problem.lower[i]) {
                            certificate = false;
                            break;
                        }
                        support += self.problem.lower[i] * dy_u;
                    }
                }
            }
            if certificate && support <= -EPS_INFEASIBLE * dy_norm {
                return Some(QpStatus::PrimalInfeasible);
            }
        }

        // Dual infeasibility certificate from the primal direction.
        let mut dx = vec![0.0; n];
        let mut dx_norm = 0.0f64;
        for j in 0..n {
            dx[j] = x[j] - x_prev[j];
            dx_norm = dx_norm.max((dx[j] * d[j]).abs());
        }
        if dx_norm > 1e-12 {
            let mut pdx = vec![0.0; n];
            self.p.sym_matvec_add(&dx, &mut pdx);
            let mut p_norm = 0.0f64;
            let mut q_dot = 0.0;
            for j in 0..n {
                p_norm = p_norm.max((pdx[j] / (c * d[j])).abs());
                q_dot += self.q[j] * dx[j];
            }
            q_dot /= c;
            if p_norm <= EPS_INFEASIBLE * dx_norm && q_dot <= -EPS_INFEASIBLE * dx_norm {
                let mut adx = vec![0.0; m];
                self.a.matvec_add(&dx, &mut adx);
                let mut certificate = true;
                for i in 0..m {
                    let v = adx[i] / e[i];
                    let upper_ok = is_pos_inf(self.problem.upper[i]) || v <= EPS_INFEASIBLE * dx_norm;
                    let lower_ok = is_neg_inf(self.problem.lower[i]) || v >= -EPS_INFEASIBLE * dx_norm;
                    if !(upper_ok && lower_ok) {
                        certificate = false;
                        break;
                    }
                }
                if certificate {
                    return Some(QpStatus::DualInfeasible);
                }
            }
        }
        None
    }

    /// Active-set polish on the unscaled problem. Returns the refined
    /// primal/dual pair when it improves the KKT residuals.
    ///
    /// A row only counts as active when the multiplier sign AND the slack
    /// distance agree; the splitting iterate transiently clamps rows that
    /// are inactive at the optimum. Active single-entry rows (variable
    /// bounds) are eliminated by substitution, so the reduced KKT system
    /// stays small and immune to the box-row degeneracy common in these
    /// problems; only general active rows enter the system, filtered to a
    /// consistent independent subset.
    fn polish(&self, primal: &[f64], dual: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let problem = self.problem;
        let n = self.n;
        let mut ax = vec![0.0; self.m];
        problem.constraints.matvec_add(primal, &mut ax);
        let current = unscaled_residuals(problem, primal, dual);
        let near = |gap: f64, bound: f64| gap <= 10.0 * current.prim + 1e-9 * (1.0 + bound.abs());
        let consistency_tol = 100.0 * current.prim + 1e-9;

        // Row-major view of the constraint matrix.
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.m];
        for (r, c, v) in problem.constraints.iter() {
            rows[r].push((c, v));
        }

        // Distance-primary classification: rows the iterate holds at a bound
        // are pinned there regardless of the multiplier sign. Weakly active
        // rows carry near-zero multipliers, so sign alone under-pins and the
        // free-subspace solve runs away; over-pinning is safe because the
        // complementarity-aware residual comparison rejects bad candidates
        // and dependent rows are filtered below.
        let mut active: Vec<(usize, f64)> = Vec::new();
        for i in 0..self.m {
            if self.eq_row[i] {
                active.push((i, problem.lower[i]));
            } else if !is_neg_inf(problem.lower[i])
                && near(ax[i] - problem.lower[i], problem.lower[i])
            {
                active.push((i, problem.lower[i]));
            } else if !is_pos_inf(problem.upper[i])
                && near(problem.upper[i] - ax[i], problem.upper[i])
            {
                active.push((i, problem.upper[i]));
            }
        }

        // Substitution pass: active rows with a single entry pin a variable.
        let mut pinned_value = vec![f64::NAN; n];
        let mut pin_row = vec![usize::MAX; n];
        let mut general: Vec<(usize, f64)> = Vec::new();
        for &(i, b) in &active {
            if rows[i].len() == 1 {
                let (col, coeff) = rows[i][0];
                if coeff.abs() > 1e-12 && pin_row[col] == usize::MAX {
                    pinned_value[col] = b / coeff;
                    pin_row[col] = i;
                    continue;
                }
            }
            general.push((i, b));
        }
        let free_of_col: Vec<Option<usize>> = {
            let mut map = vec![None; n];
            let mut next = 0usize;
            for (col, item) in map.iter_mut().enumerate() {
                if pin_row[col] == usize::MAX {
                    *item = Some(next);
                    next += 1;
                }
            }
            map
        };
        let free_cols: Vec<usize> = (0..n).filter(|&c| pin_row[c] == usize::MAX).collect();
        let nf = free_cols.len();

        // Reduce general rows onto the free variables; drop rows that become
        // trivial, abort on inconsistent ones.
        let mut reduced: Vec<(usize, Vec<(usize, f64)>, f64)> = Vec::new();
        for &(i, b) in &general {
            let mut coeffs: Vec<(usize, f64)> = Vec::new();
            let mut shift = 0.0;
            for &(col, v) in &rows[i] {
                match free_of_col[col] {
                    Some(fc) => coeffs.push((fc, v)),
                    None => shift += v * pinned_value[col],
                }
            }
            if coeffs.is_empty() {
                if (shift - b).abs() > consistency_tol * (1.0 + b.abs()) {
                    return None;
                }
                continue;
            }
            reduced.push((i, coeffs, b - shift));
        }

        // Mutually dependent active rows make the reduced KKT singular.
        // Keep an independent subset, preferring equality rows and larger
        // multipliers; dependent rows must stay consistent or the active
        // set is wrong and the attempt is abandoned.
        let mut order: Vec<usize> = (0..reduced.len()).collect();
        order.sort_by(|&a, &b| {
            let (ia, ib) = (reduced[a].0, reduced[b].0);
            let key = |i: usize| (!self.eq_row[i], std::cmp::Reverse(OrderedAbs(dual[i])), i);
            key(ia).partial_cmp(&key(ib)).unwrap()
        });
        let mut basis: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut kept_indices: Vec<usize> = Vec::new();
        for &idx in &order {
            let (_, coeffs, b) = &reduced[idx];
            let mut dense = vec![0.0; nf];
            for &(fc, v) in coeffs {
                dense[fc] += v;
            }
            let orig_norm = dense.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let mut rhs_val = *b;
            for (vec, vb) in &basis {
                let pivot = vec
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                let f = dense[pivot] / vec[pivot];
                if f != 0.0 {
                    for (d, v) in dense.iter_mut().zip(vec) {
                        *d -= f * v;
                    }
                    rhs_val -= f * vb;
                }
            }
            let norm = dense.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if norm <= 1e-10 * orig_norm.max(1.0) {
                if rhs_val.abs() > consistency_tol * (1.0 + b.abs()) {
                    return None;
                }
            } else {
                basis.push((dense, rhs_val));
                kept_indices.push(idx);
            }
        }
        kept_indices.sort_unstable();
        let gen_rows: Vec<(usize, Vec<(usize, f64)>, f64)> = kept_indices
            .into_iter()
            .map(|idx| reduced[idx].clone())
            .collect();

        // Reduced KKT over free variables and general rows.
        let mg = gen_rows.len();
        let dim = nf + mg;
        let mut pattern: Vec<(usize, usize)> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut values_reg: Vec<f64> = Vec::new();
        let mut q_reduced = vec![0.0; nf];
        for (fc, &col) in free_cols.iter().enumerate() {
            q_reduced[fc] = problem.linear[col];
        }
        for (r, c, v) in problem.quadratic.iter() {
            match (free_of_col[r], free_of_col[c]) {
                (Some(fr), Some(fc)) => {
                    let (lo, hi) = (fr.min(fc), fr.max(fc));
                    pattern.push((lo, hi));
                    values.push(v);
                    values_reg.push(v);
                }
                (Some(fr), None) => q_reduced[fr] += v * pinned_value[c],
                (None, Some(fc)) => q_reduced[fc] += v * pinned_value[r],
                (None, None) => {}
            }
        }
        for fc in 0..nf {
            pattern.push((fc, fc));
            values.push(0.0);
            values_reg.push(POLISH_DELTA);
        }
        for (k, (_, coeffs, _)) in gen_rows.iter().enumerate() {
            for &(fc, v) in coeffs {
                pattern.push((fc, nf + k));
                values.push(v);
                values_reg.push(v);
            }
            pattern.push((nf + k, nf + k));
            values.push(0.0);
            values_reg.push(-POLISH_DELTA);
        }
        let mut signs = vec![1i8; nf];
        signs.extend(std::iter::repeat(-1i8).take(mg));
        let mut rhs = vec![0.0; dim];
        for fc in 0..nf {
            rhs[fc] = -q_reduced[fc];
        }
        for (k, (_, _, b)) in gen_rows.iter().enumerate() {
            rhs[nf + k] = *b;
        }

        let mut sol = rhs.clone();
        if dim > 0 {
            let mut factor = LdlFactor::new(dim, &pattern, &values_reg, &signs).ok()?;
            factor.solve_in_place(&mut sol);
            // Iterative refinement against the unregularized reduced system.
            for _ in 0..POLISH_REFINE_STEPS {
                let mut residual = rhs.clone();
                for (&(r, c), &v) in pattern.iter().zip(&values) {
                    residual[r] -= v * sol[c];
                    if r != c {
                        residual[c] -= v * sol[r];
                    }
                }
                factor.solve_in_place(&mut residual);
                for i in 0..dim {
                    sol[i] += residual[i];
                }
            }
        }

        // Assemble the full candidate.
        let mut x_new = vec![0.0; n];
        for col in 0..n {
            x_new[col] = match free_of_col[col] {
                Some(fc) => sol[fc],
                None => pinned_value[col],
            };
        }
        let mut y_new = vec![0.0; self.m];
        for (k, (i, _, _)) in gen_rows.iter().enumerate() {
            y_new[*i] = sol[nf + k];
        }
        // Bound-row multipliers from stationarity: y = -(P x + q + A_g' y_g)
        // on pinned coordinates (coefficient is 1 on our bound rows, but
        // divide by it for generality).
        let mut grad = problem.linear.clone();
        problem.quadratic.sym_matvec_add(&x_new, &mut grad);
        for (k, (i, _, _)) in gen_rows.iter().enumerate() {
            for &(col, v) in &rows[*i] {
                grad[col] += v * sol[nf + k];
            }
        }
        for col in 0..n {
            let row = pin_row[col];
            if row != usize::MAX {
                let coeff = rows[row][0].1;
                y_new[row] = -grad[col] / coeff;
            }
        }
        if x_new.iter().any(|v| !v.is_finite()) || y_new.iter().any(|v| !v.is_finite()) {
            return None;
        }

        let res_new = self.kkt_residual(&x_new, &y_new);
        let res_old = self.kkt_residual(primal, dual);
        if res_new < res_old {
            Some((x_new, y_new))
        } else {
            None
        }
    }

    /// Max of primal, dual and complementarity residuals on the unscaled
    /// problem. Complementarity (including the multiplier sign convention)
    /// must participate, otherwise a polish with a wrong active set can
    /// look "exact" while being suboptimal.
    fn kkt_residual(&self, x: &[f64], y: &[f64]) -> f64 {
        let problem = self.problem;
        let mut ax = vec![0.0; self.m];
        problem.constraints.matvec_add(x, &mut ax);
        let mut prim = 0.0f64;
        let mut comp = 0.0f64;
        for i in 0..self.m {
            let z = ax[i].clamp(problem.lower[i], problem.upper[i]);
            prim = prim.max((ax[i] - z).abs());
            // Distance to the bound the multiplier sign points at, capped
            // so that noise-level multipliers on free sides stay harmless.
            const DIST_CAP: f64 = 1e8;
            if y[i] > 0.0 {
                let dist = if is_pos_inf(problem.upper[i]) {
                    DIST_CAP
                } else {
                    (ax[i] - problem.upper[i]).abs().min(DIST_CAP)
                };
                comp = comp.max(y[i] * dist);
            } else if y[i] < 0.0 {
                let dist = if is_neg_inf(problem.lower[i]) {
                    DIST_CAP
                } else {
                    (ax[i] - problem.lower[i]).abs().min(DIST_CAP)
                };
                comp = comp.max(-y[i] * dist);
            }
        }
        let mut grad = problem.linear.clone();
        problem.quadratic.sym_matvec_add(x, &mut grad);
        problem.constraints.matvec_transpose_add(y, &mut grad);
        let dual = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        prim.max(dual).max(comp)
    }
}

/// Total order on |value| for sorting.
#[derive(PartialEq)]
struct OrderedAbs(f64);

impl PartialOrd for OrderedAbs {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.0.abs().partial_cmp(&other.0.abs())
    }
}

struct Residuals {
    prim: f64,
    dual: f64,
    prim_scale: f64,
    dual_scale: f64,
}

/// Residuals of a candidate solution computed directly on the original
/// (unscaled) problem data.
fn unscaled_residuals(problem: &QpProblem, x: &[f64], y: &[f64]) -> Residuals {
    let n = problem.n_vars;
    let m = problem.n_constraints();
    let mut ax = vec![0.0; m];
    problem.constraints.matvec_add(x, &mut ax);
    let mut prim = 0.0f64;
    let mut norm_ax = 0.0f64;
    let mut norm_z = 0.0f64;
    for i in 0..m {
        let z = ax[i].clamp(problem.lower[i], problem.upper[i]);
        prim = prim.max((ax[i] - z).abs());
        norm_ax = norm_ax.max(ax[i].abs());
        norm_z = norm_z.max(z.abs());
    }
    let mut px = vec![0.0; n];
    problem.quadratic.sym_matvec_add(x, &mut px);
    let mut aty = vec![0.0; n];
    problem.constraints.matvec_transpose_add(y, &mut aty);
    let mut dual = 0.0f64;
    let mut norm_px = 0.0f64;
    let mut norm_aty = 0.0f64;
    let mut norm_q = 0.0f64;
    for j in 0..n {
        dual = dual.max((px[j] + problem.linear[j] + aty[j]).abs());
        norm_px = norm_px.max(px[j].abs());
        norm_aty = norm_aty.max(aty[j].abs());
        norm_q = norm_q.max(problem.linear[j].abs());
    }
    Residuals {
        prim,
        dual,
        prim_scale: norm_ax.max(norm_z),
        dual_scale: norm_px.max(norm_aty).max(norm_q),
    }
}

/// Modified Ruiz equilibration of the (P, q, A) data; returns the
/// accumulated scalings.
fn ruiz_equilibrate(
    p: &mut CscMatrix,
    q: &mut [f64],
    a: &mut CscMatrix,
    n: usize,
    m: usize,
) -> Scaling {
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    let mut c = 1.0;

    let mut col_norm = vec![0.0f64; n];
    let mut row_norm = vec![0.0f64; m];
    for _ in 0..RUIZ_ITERS {
        // Column norms over the stacked [P; A] per variable.
        for v in col_norm.iter_mut() {
            *v = 0.0;
        }
        for (r, cidx, v) in p.iter() {
            let av = v.abs();
            col_norm[cidx] = col_norm[cidx].max(av);
            col_norm[r] = col_norm[r].max(av);
        }
        for (_, cidx, v) in a.iter() {
            col_norm[cidx] = col_norm[cidx].max(v.abs());
        }
        a.row_inf_norms(&mut row_norm);

        let delta_d: Vec<f64> = col_norm
            .iter()
            .map(|&v| if v < 1e-12 { 1.0 } else { 1.0 / v.sqrt() })
            .collect();
        let delta_e: Vec<f64> = row_norm
            .iter()
            .map(|&v| if v < 1e-12 { 1.0 } else { 1.0 / v.sqrt() })
            .collect();

        p.scale(&delta_d, &delta_d);
        a.scale(&delta_e, &delta_d);
        for j in 0..n {
            q[j] *= delta_d[j];
            d[j] *= delta_d[j];
        }
        for i in 0..m {
            e[i] *= delta_e[i];
        }

        // Cost scaling.
        for v in col_norm.iter_mut() {
            *v = 0.0;
        }
        for (r, cidx, v) in p.iter() {
            let av = v.abs();
            col_norm[cidx] = col_norm[cidx].max(av);
            col_norm[r] = col_norm[r].max(av);
        }
        let mean_p = if n == 0 {
            0.0
        } else {
            col_norm.iter().sum::<f64>() / n as f64
        };
        let q_norm = q.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let denom = mean_p.max(q_norm);
        let gamma = if denom < 1e-12 { 1.0 } else { 1.0 / denom };
        for v in p.values.iter_mut() {
            *v *= gamma;
        }
        for v in q.iter_mut() {
            *v *= gamma;
        }
        c *= gamma;
    }
    Scaling { d, e, c }
}
