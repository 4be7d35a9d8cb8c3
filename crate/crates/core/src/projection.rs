//! Euclidean projection onto the flow polytope with an operator-splitting QP
//! engine (OSQP-style ADMM) that caches its factorization and warm-starts.
//!
//! The problem `min ||d - target||^2  s.t.  A d = b, d >= 0` is written as
//! `min 1/2 d'(2I)d - 2 target'd  s.t.  l <= [A; I] d <= u` with the equality
//! rows pinned to `b`. The linear system `(cI + rho_eq A'A) x = r` is solved
//! through the push-through identity, which needs only a Cholesky factor of
//! the small `(c/rho_eq) I + A A'`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::dynamics::FlowPolytope;
use crate::model::{Dims, MeanFieldFlow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error(
        "projection did not converge in {iterations} inner iterations \
         (primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e})"
    )]
    NotConverged {
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
    },
    #[error("flow polytope is infeasible (certificate found after {iterations} inner iterations)")]
    Infeasible { iterations: usize },
    #[error("projection dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("constraint system is numerically singular")]
    SingularSystem,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_inner_iterations: usize,
    /// Penalty on the nonnegativity rows; equality rows use `eq_rho_scale * rho`.
    pub rho: f64,
    pub eq_rho_scale: f64,
    pub sigma: f64,
    pub relaxation: f64,
    pub adaptive_rho: bool,
    pub adaptive_interval: usize,
    pub warm_start: bool,
    /// Relative tolerance of the primal infeasibility certificate.
    pub eps_infeasible: f64,
    /// Solve the equality-constrained problem on the guessed active set and
    /// accept it when it satisfies the optimality conditions.
    pub polish: bool,
    /// Relative residual level below which polishing is attempted.
    pub polish_trigger: f64,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_inner_iterations: 20_000,
            rho: 1.0,
            eq_rho_scale: 1e3,
            sigma: 1e-6,
            relaxation: 1.6,
            adaptive_rho: true,
            adaptive_interval: 25,
            warm_start: true,
            eps_infeasible: 1e-7,
            polish: true,
            polish_trigger: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub point: MeanFieldFlow,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub inner_iterations: usize,
    pub warm_started: bool,
    /// The point came from an exact solve on the identified active set.
    pub polished: bool,
}

/// Warm-start state: primal `x`, constraint slack `z` and duals `y`, with the
/// equality rows first.
#[derive(Debug, Clone)]
struct Iterate {
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
}

pub struct ProjectionWorkspace {
    polytope: FlowPolytope,
    settings: ProjectionSettings,
    rho: f64,
    factor: Cholesky<f64, Dyn>,
    gram: DMatrix<f64>,
    warm: Option<Iterate>,
}

impl std::fmt::Debug for ProjectionWorkspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProjectionWorkspace")
            .field("dims", &self.polytope.dims())
            .field("settings", &self.settings)
            .field("rho", &self.rho)
            .field("warm", &self.warm.is_some())
            .finish()
    }
}

impl ProjectionWorkspace {
    pub fn new(polytope: FlowPolytope, settings: ProjectionSettings) -> Result<Self, ProjectionError> {
        let gram = polytope.a_matrix().gram();
        let rho = settings.rho;
        let factor = factorize(&gram, &settings, rho)?;
        Ok(Self {
            polytope,
            settings,
            rho,
            factor,
            gram,
            warm: None,
        })
    }

    pub fn polytope(&self) -> &FlowPolytope {
        &self.polytope
    }

    pub fn settings(&self) -> &ProjectionSettings {
        &self.settings
    }

    pub fn dims(&self) -> Dims {
        self.polytope.dims()
    }

    /// Replaces the polytope, refreshing the factorization and keeping the
    /// warm-start vectors.
    pub fn rebuild(&mut self, polytope: FlowPolytope) -> Result<(), ProjectionError> {
        let (old, new) = (self.polytope.dims(), polytope.dims());
        if old != new || polytope.a_matrix().nrows() != self.polytope.a_matrix().nrows() {
            return Err(ProjectionError::DimensionMismatch {
                expected: old.flat_len(),
                got: new.flat_len(),
            });
        }
        self.gram = polytope.a_matrix().gram();
        self.factor = factorize(&self.gram, &self.settings, self.rho)?;
        self.polytope = polytope;
        Ok(())
    }

    /// Drops warm-start vectors and resets the penalty to its configured value.
    pub fn reset_warm_start(&mut self) -> Result<(), ProjectionError> {
        self.warm = None;
        if self.rho != self.settings.rho {
            self.rho = self.settings.rho;
            self.factor = factorize(&self.gram, &self.settings, self.rho)?;
        }
        Ok(())
    }

    pub fn project(&mut self, target: &[f64]) -> Result<ProjectionResult, ProjectionError> {
        let dims = self.polytope.dims();
        let n = dims.flat_len();
        if target.len() != n {
            return Err(ProjectionError::DimensionMismatch {
                expected: n,
                got: target.len(),
            });
        }
        if !self.settings.warm_start {
            self.reset_warm_start()?;
        }
        let m = self.polytope.a_matrix().nrows();
        let warm_started = self.warm.is_some();
        let Iterate { mut x, mut z, mut y } = self.warm.take().unwrap_or_else(|| Iterate {
            x: vec![0.0; n],
            z: vec![0.0; m + n],
            y: vec![0.0; m + n],
        });
        let st = self.settings;
        let a = self.polytope.a_matrix().clone();
        let b = self.polytope.b_vector().to_vec();
        let q: Vec<f64> = target.iter().map(|v| -2.0 * v).collect();
        let q_norm = inf_norm(&q);

        let mut rhs = vec![0.0; n];
        let mut x_tilde = vec![0.0; n];
        let mut ax = vec![0.0; m];
        let mut aty = vec![0.0; n];
        let mut y_prev = vec![0.0; m + n];
        let mut scratch_m = vec![0.0; m];
        let mut scratch_n = vec![0.0; n];
        let mut primal = f64::INFINITY;
        let mut dual = f64::INFINITY;

        for iter in 1..=st.max_inner_iterations {
            let (rho_eq, rho_in) = (st.eq_rho_scale * self.rho, self.rho);
            // rhs = sigma x - q + C'(rho z - y)
            for i in 0..m {
                scratch_m[i] = rho_eq * z[i] - y[i];
            }
            a.mul_t_vec(&scratch_m, &mut scratch_n);
            for j in 0..n {
                rhs[j] = st.sigma * x[j] - q[j] + scratch_n[j] + rho_in * z[m + j] - y[m + j];
            }
            self.solve_kkt(&a, &rhs, &mut x_tilde, &mut scratch_m);
            a.mul_vec(&x_tilde, &mut ax);

            y_prev.copy_from_slice(&y);
            let alpha = st.relaxation;
            for j in 0..n {
                x[j] = alpha * x_tilde[j] + (1.0 - alpha) * x[j];
            }
            for i in 0..m + n {
                let z_tilde = if i < m { ax[i] } else { x_tilde[i - m] };
                let rho_i = if i < m { rho_eq } else { rho_in };
                let relaxed = alpha * z_tilde + (1.0 - alpha) * z[i];
                let candidate = relaxed + y[i] / rho_i;
                let z_new = if i < m { b[i] } else { candidate.max(0.0) };
                y[i] += rho_i * (relaxed - z_new);
                z[i] = z_new;
            }

            // Residuals at the relaxed primal iterate.
            a.mul_vec(&x, &mut ax);
            a.mul_t_vec(&y[..m], &mut aty);
            let mut cx_norm = 0.0f64;
            let mut z_norm = 0.0f64;
            primal = 0.0;
            for i in 0..m + n {
                let cx = if i < m { ax[i] } else { x[i - m] };
                cx_norm = cx_norm.max(cx.abs());
                z_norm = z_norm.max(z[i].abs());
                primal = primal.max((cx - z[i]).abs());
            }
            let mut px_norm = 0.0f64;
            let mut cty_norm = 0.0f64;
            dual = 0.0;
            for j in 0..n {
                let px = 2.0 * x[j];
                let cty = aty[j] + y[m + j];
                px_norm = px_norm.max(px.abs());
                cty_norm = cty_norm.max(cty.abs());
                dual = dual.max((px + q[j] + cty).abs());
            }
            let p_scale = cx_norm.max(z_norm);
            let d_scale = px_norm.max(cty_norm).max(q_norm);
            let eps_primal = st.eps_abs + st.eps_rel * p_scale;
            let eps_dual = st.eps_abs + st.eps_rel * d_scale;
            let converged = primal <= eps_primal && dual <= eps_dual;
            let check_point = converged || (iter == 1 && warm_started) || iter % st.adaptive_interval.max(1) == 0;
            if st.polish
                && check_point
                && primal <= st.polish_trigger * (1.0 + p_scale)
                && dual <= st.polish_trigger * (1.0 + d_scale)
            {
                if let Some(p) = polish(&a, &b, target, &x, &y[..m], &z[m..], &y[m..], (eps_primal, eps_dual)) {
                    let point = MeanFieldFlow::from_vec(dims, p.x.clone()).expect("length checked above");
                    let mut z_new = b.clone();
                    z_new.extend_from_slice(&p.x);
                    self.warm = Some(Iterate {
                        x: p.x,
                        z: z_new,
                        y: p.y,
                    });
                    return Ok(ProjectionResult {
                        point,
                        primal_residual: p.primal,
                        dual_residual: p.dual,
                        inner_iterations: iter,
                        warm_started,
                        polished: true,
                    });
                }
            }
            if converged {
                let mut values = x.clone();
                values.iter_mut().for_each(|v| *v = v.max(0.0));
                self.warm = Some(Iterate { x, z, y });
                let point = MeanFieldFlow::from_vec(dims, values).expect("length checked above");
                return Ok(ProjectionResult {
                    point,
                    primal_residual: primal,
                    dual_residual: dual,
                    inner_iterations: iter,
                    warm_started,
                    polished: false,
                });
            }

            if iter % st.adaptive_interval.max(1) == 0 {
                if self.primal_infeasible(&a, &b, &y, &y_prev, &mut scratch_n) {
                    self.warm = None;
                    return Err(ProjectionError::Infeasible { iterations: iter });
                }
                if st.adaptive_rho {
                    let ratio = ((primal / p_scale.max(1e-30)) / (dual / d_scale.max(1e-30)).max(1e-30)).sqrt();
                    let proposed = (self.rho * ratio).clamp(1e-6, 1e6);
                    if proposed > 5.0 * self.rho || proposed < self.rho / 5.0 {
                        self.rho = proposed;
                        self.factor = factorize(&self.gram, &st, self.rho)?;
                    }
                }
            }
        }
        self.warm = Some(Iterate { x, z, y });
        Err(ProjectionError::NotConverged {
            iterations: st.max_inner_iterations,
            primal_residual: primal,
            dual_residual: dual,
        })
    }

    /// `x = (cI + rho_eq A'A)^{-1} r = (r - A' M^{-1} A r) / c`.
    fn solve_kkt(&self, a: &crate::sparse::CscMatrix, r: &[f64], x: &mut [f64], scratch_m: &mut [f64]) {
        let c = 2.0 + self.settings.sigma + self.rho;
        a.mul_vec(r, scratch_m);
        let mut v = DVector::from_column_slice(scratch_m);
        self.factor.solve_mut(&mut v);
        a.mul_t_vec(v.as_slice(), x);
        for (xi, ri) in x.iter_mut().zip(r) {
            *xi = (ri - *xi) / c;
        }
    }

    /// Certificate on `dy = y - y_prev`: `C'dy ~ 0` while `b'dy_eq < 0` and
    /// the nonnegativity duals move only downwards.
    fn primal_infeasible(&self, a: &crate::sparse::CscMatrix, b: &[f64], y: &[f64], y_prev: &[f64], scratch_n: &mut [f64]) -> bool {
        let m = b.len();
        let dy: Vec<f64> = y.iter().zip(y_prev).map(|(u, v)| u - v).collect();
        let dy_norm = inf_norm(&dy);
        if dy_norm <= 1e-12 {
            return false;
        }
        let eps = self.settings.eps_infeasible * dy_norm;
        a.mul_t_vec(&dy[..m], scratch_n);
        let cty = scratch_n.iter().zip(&dy[m..]).map(|(u, v)| (u + v).abs()).fold(0.0, f64::max);
        let support: f64 = b.iter().zip(&dy[..m]).map(|(u, v)| u * v).sum();
        let upward = dy[m..].iter().fold(0.0f64, |acc, v| acc.max(*v));
        cty <= eps && support < -eps && upward <= eps
    }
}

struct Polished {
    x: Vec<f64>,
    y: Vec<f64>,
    primal: f64,
    dual: f64,
}

/// Exact projection on an active set guessed from the ADMM slack `z` and the
/// duals `y` of the nonnegativity rows (`j` active when `z_j + y_j < 0`).
///
/// With free set `F`, the solution is `x_F = t_F + A_F' nu` where
/// `A_F A_F' nu = b - A_F t_F`. When `A_F A_F'` is singular (rows touching
/// only fixed coordinates) the equality multipliers are not unique; the
/// solution closest to the ADMM multipliers is taken so the reduced
/// gradients of fixed coordinates keep the right sign. The caller accepts
/// the result only if its residuals meet the tolerances.
///
/// A wrong guess is corrected by moving to the support of `max(t + A' nu, 0)`
/// and solving again. Returns the first step within the tolerances `eps`
/// (primal, dual).
#[allow(clippy::too_many_arguments)]
fn polish(
    a: &crate::sparse::CscMatrix,
    b: &[f64],
    target: &[f64],
    x: &[f64],
    y_eq: &[f64],
    z_in: &[f64],
    y_in: &[f64],
    eps: (f64, f64),
) -> Option<Polished> {
    let m = a.nrows();
    let tau = POLISH_MULTIPLIER_TOL * (1.0 + inf_norm(y_in));
    let plain: Vec<bool> = z_in.iter().zip(y_in).map(|(z, y)| z + y >= 0.0).collect();
    // Tiny positive entries can look active to ADMM; fixing one wrongly can
    // make the reduced system inconsistent. This guess frees anything the
    // primal iterate or the multiplier does not clearly rule out.
    let cautious: Vec<bool> = (0..x.len()).map(|j| x[j] > 0.0 || z_in[j] + y_in[j] >= -tau).collect();
    let guesses = if cautious == plain { vec![plain] } else { vec![plain, cautious] };
    let nu_admm = DVector::from_iterator(m, y_eq.iter().map(|y| -0.5 * y));
    for mut free in guesses {
        let mut nu = nu_admm.clone();
        for _ in 0..POLISH_REFINEMENTS {
            let (p, nu_next, atnu) = polish_step(a, b, target, &free, &nu);
            if p.primal <= eps.0 && p.dual <= eps.1 {
                return Some(p);
            }
            let next: Vec<bool> = target.iter().zip(&atnu).map(|(t, v)| t + v > 0.0).collect();
            if next == free {
                break;
            }
            free = next;
            nu = nu_next;
        }
    }
    None
}

/// Support updates tried by [`polish`]; each is one semismooth Newton step on
/// `A max(t + A' nu, 0) = b`.
const POLISH_REFINEMENTS: usize = 8;
const POLISH_MULTIPLIER_TOL: f64 = 1e-6;

fn polish_step(
    a: &crate::sparse::CscMatrix,
    b: &[f64],
    target: &[f64],
    free: &[bool],
    nu_start: &DVector<f64>,
) -> (Polished, DVector<f64>, Vec<f64>) {
    let (m, n) = (a.nrows(), a.ncols());
    let gram = a.gram_masked(free);
    let t_free: Vec<f64> = target.iter().zip(free).map(|(t, &f)| if f { *t } else { 0.0 }).collect();
    let mut at = vec![0.0; m];
    a.mul_vec(&t_free, &mut at);
    let rhs = DVector::from_iterator(m, b.iter().zip(&at).map(|(u, v)| u - v));
    let residual = &rhs - &gram * nu_start;
    let diag_max = (0..m).map(|i| gram[(i, i)]).fold(0.0f64, f64::max);
    let mut reg = gram.clone();
    for i in 0..m {
        reg[(i, i)] += 1e-13 * (1.0 + diag_max);
    }
    // A wrong support can make `A_F x_F = b` inconsistent; the regularized
    // solve then blows up along the near-null directions, while least squares
    // through a truncated eigendecomposition stays bounded.
    let tol = 1e-9 * (1.0 + rhs.amax());
    let nu = Cholesky::new(reg)
        .map(|ch| nu_start + ch.solve(&residual))
        .filter(|v| (&gram * v - &rhs).amax() <= tol)
        .unwrap_or_else(|| {
            let eig = gram.clone().symmetric_eigen();
            let cutoff = 1e-12 * eig.eigenvalues.amax().max(1e-300);
            let coords = eig.eigenvectors.transpose() * &residual;
            let scaled = DVector::from_iterator(
                m,
                coords.iter().zip(eig.eigenvalues.iter()).map(|(c, &l)| if l > cutoff { c / l } else { 0.0 }),
            );
            nu_start + &eig.eigenvectors * scaled
        });
    let mut atnu = vec![0.0; n];
    a.mul_t_vec(nu.as_slice(), &mut atnu);

    let mut x = vec![0.0; n];
    let mut y = vec![0.0; m + n];
    for (i, v) in nu.iter().enumerate() {
        y[i] = -2.0 * v;
    }
    for j in 0..n {
        if free[j] {
            x[j] = (target[j] + atnu[j]).max(0.0);
        } else {
            y[m + j] = -2.0 * (-target[j] - atnu[j]).max(0.0);
        }
    }
    let mut ax = vec![0.0; m];
    a.mul_vec(&x, &mut ax);
    let primal = ax.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    let mut aty = vec![0.0; n];
    a.mul_t_vec(&y[..m], &mut aty);
    let dual = (0..n)
        .map(|j| (2.0 * x[j] - 2.0 * target[j] + aty[j] + y[m + j]).abs())
        .fold(0.0, f64::max);
    (Polished { x, y, primal, dual }, nu, atnu)
}

fn factorize(gram: &DMatrix<f64>, settings: &ProjectionSettings, rho: f64) -> Result<Cholesky<f64, Dyn>, ProjectionError> {
    let rho_eq = settings.eq_rho_scale * rho;
    let c = 2.0 + settings.sigma + rho;
    let mut mat = gram.clone();
    for i in 0..mat.nrows() {
        mat[(i, i)] += c / rho_eq;
    }
    Cholesky::new(mat).ok_or(ProjectionError::SingularSystem)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// One-shot projection with a fresh workspace.
pub fn project_once(
    polytope: FlowPolytope,
    target: &[f64],
    settings: ProjectionSettings,
) -> Result<ProjectionResult, ProjectionError> {
    ProjectionWorkspace::new(polytope, settings)?.project(target)
}
