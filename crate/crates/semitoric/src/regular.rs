//! The regularized 1-form sigma near a focus-focus singular value, the
//! invariant S with its Taylor fit, and the action integral.
//!
//! tau rows are always measured on the system as given; the normal-form value
//! map g (linear part from the Hessian pencil, quadratic part calibrated from
//! the log-divergence of the returns themselves) acts afterwards, via the
//! exact lattice transformation tau -> dg(v)^{-T} tau.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::FlowOptions;
use crate::geometry::{HamiltonianSystem, PhaseVector};
use crate::periods::{build_period_basis, PeriodBasis};
use crate::rk45::integrate;

const TWO_PI: f64 = std::f64::consts::TAU;
const PI: f64 = std::f64::consts::PI;

/// Path-independence tolerance for S.
pub const TOL_PATH: f64 = 1e-3;
/// Condition ceiling for the Taylor least-squares system.
pub const COND_FIT: f64 = 1e8;

/// A determination of the complex logarithm, cut along the given direction.
#[derive(Debug, Clone, Copy)]
pub struct LogBranch {
    pub cut_angle: f64,
}

impl Default for LogBranch {
    /// Principal branch: cut along the negative reals, ln(1) = 0.
    fn default() -> Self {
        Self { cut_angle: PI }
    }
}

impl LogBranch {
    pub fn principal() -> Self {
        Self::default()
    }

    /// ln(w) continuous off the cut, with Im ln in (cut - 2 pi, cut).
    pub fn ln(&self, w: Complex<f64>) -> Result<Complex<f64>> {
        if w.norm() == 0.0 {
            return Err(Error::CriticalValue);
        }
        let raw = w.arg(); // (-pi, pi]
        // shift into (cut - 2 pi, cut]
        let mut arg = raw;
        while arg > self.cut_angle {
            arg -= TWO_PI;
        }
        while arg <= self.cut_angle - TWO_PI {
            arg += TWO_PI;
        }
        if (self.cut_angle - arg).abs() < 1e-12 || (arg - (self.cut_angle - TWO_PI)).abs() < 1e-12 {
            return Err(Error::OnBranchCut { arg: raw });
        }
        Ok(Complex::new(w.norm().ln(), arg))
    }
}

/// Normal-form value map for a system whose leading two components form a
/// focus-focus pair: v_check = quad(dG0^{-1} v) on the first two components,
/// identity on the rest. `quad(u) = (u1 + a u1^2 + b u2^2 + c u1 u2, u2)`.
#[derive(Debug, Clone)]
pub struct FFValueMap {
    n: usize,
    dg0_inv: DMatrix<f64>,
    pub quad: [f64; 3],
}

impl FFValueMap {
    pub fn new(n: usize, dg0: &DMatrix<f64>, quad: [f64; 3]) -> Result<Self> {
        if n < 2 || dg0.nrows() != 2 || dg0.ncols() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: dg0.nrows(),
            });
        }
        let dg0_inv = dg0
            .clone()
            .try_inverse()
            .ok_or(Error::SingularJacobian { cond: f64::INFINITY })?;
        Ok(Self { n, dg0_inv, quad })
    }

    /// Identity map for systems already in normal form (q-models).
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            dg0_inv: DMatrix::identity(2, 2),
            quad: [0.0; 3],
        }
    }

    pub fn dof(&self) -> usize {
        self.n
    }

    /// Normalized value v_check.
    pub fn forward(&self, v: &DVector<f64>) -> DVector<f64> {
        let u1 = self.dg0_inv[(0, 0)] * v[0] + self.dg0_inv[(0, 1)] * v[1];
        let u2 = self.dg0_inv[(1, 0)] * v[0] + self.dg0_inv[(1, 1)] * v[1];
        let [a, b, c] = self.quad;
        let mut out = v.clone();
        out[0] = u1 + a * u1 * u1 + b * u2 * u2 + c * u1 * u2;
        out[1] = u2;
        out
    }

    /// Jacobian of forward at v (n x n; identity outside the leading block).
    pub fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let u1 = self.dg0_inv[(0, 0)] * v[0] + self.dg0_inv[(0, 1)] * v[1];
        let u2 = self.dg0_inv[(1, 0)] * v[0] + self.dg0_inv[(1, 1)] * v[1];
        let [a, b, c] = self.quad;
        let dquad = DMatrix::from_row_slice(
            2,
            2,
            &[1.0 + 2.0 * a * u1 + c * u2, 2.0 * b * u2 + c * u1, 0.0, 1.0],
        );
        let block = dquad * &self.dg0_inv;
        let mut jac = DMatrix::identity(self.n, self.n);
        jac.view_mut((0, 0), (2, 2)).copy_from(&block);
        jac
    }

    /// Invert forward by Newton (the map is near-linear on the working window).
    pub fn invert(&self, target: &DVector<f64>) -> Result<DVector<f64>> {
        let mut v = target.clone();
        // initial guess: linear inverse
        let dg0 = self
            .dg0_inv
            .clone()
            .try_inverse()
            .ok_or(Error::SingularJacobian { cond: f64::INFINITY })?;
        v[0] = dg0[(0, 0)] * target[0] + dg0[(0, 1)] * target[1];
        v[1] = dg0[(1, 0)] * target[0] + dg0[(1, 1)] * target[1];
        for _ in 0..50 {
            let r = self.forward(&v) - target;
            if r.norm() < 1e-14 * (1.0 + target.norm()) {
                return Ok(v);
            }
            let jac = self.jacobian(&v);
            let delta = jac
                .lu()
                .solve(&r)
                .ok_or(Error::SingularJacobian { cond: f64::INFINITY })?;
            v -= delta;
        }
        Err(Error::NoConvergence {
            iters: 50,
            residual: (self.forward(&v) - target).norm(),
        })
    }

    /// Lattice row in normalized components: dg(v)^{-T} tau.
    pub fn transform_tau(&self, v: &DVector<f64>, tau: &DVector<f64>) -> Result<DVector<f64>> {
        let jac = self.jacobian(v);
        let inv_t = jac
            .transpose()
            .try_inverse()
            .ok_or(Error::SingularJacobian { cond: f64::INFINITY })?;
        Ok(inv_t * tau)
    }

    /// w = v_check_1 + i v_check_2.
    pub fn w(&self, v: &DVector<f64>) -> Complex<f64> {
        let vc = self.forward(v);
        Complex::new(vc[0], vc[1])
    }
}

/// One sigma sample at a regular value.
#[derive(Debug, Clone)]
pub struct SigmaSample {
    /// Value of F as given.
    pub value: DVector<f64>,
    /// Normalized value v_check.
    pub normalized: DVector<f64>,
    /// sigma_1 real; sigma_2..sigma_n reduced to [0, 2 pi).
    pub sigma: DVector<f64>,
}

/// sigma from a period basis: sigma_1 = tau_1 + Re ln w,
/// sigma_2 = tau_2 - Im ln w (mod 2 pi), sigma_j = tau_j (mod 2 pi), with tau
/// in normalized components.
pub fn sigma_from_basis(
    basis: &PeriodBasis,
    map: &FFValueMap,
    branch: &LogBranch,
) -> Result<SigmaSample> {
    let normalized = map.forward(&basis.value);
    let w = Complex::new(normalized[0], normalized[1]);
    let lw = branch.ln(w)?;
    let tau = map.transform_tau(&basis.value, &basis.tau())?;
    let n = tau.len();
    let mut sigma = DVector::zeros(n);
    sigma[0] = tau[0] + lw.re;
    sigma[1] = (tau[1] - lw.im).rem_euclid(TWO_PI);
    for j in 2..n {
        sigma[j] = tau[j].rem_euclid(TWO_PI);
    }
    Ok(SigmaSample {
        value: basis.value.clone(),
        normalized,
        sigma,
    })
}

/// Shift x by multiples of `period` to land within period/2 of `prev`.
pub fn lift_near(prev: f64, x: f64, period: f64) -> f64 {
    let mut y = x;
    while y - prev > 0.5 * period {
        y -= period;
    }
    while y - prev < -0.5 * period {
        y += period;
    }
    y
}

/// Measure period bases along a ray of normalized values r * dir, largest
/// radius first, warm-starting each leaf projection at the previous anchor.
pub fn sample_ray(
    sys: &HamiltonianSystem,
    map: &FFValueMap,
    dir: (f64, f64),
    radii: &[f64],
    fixed: &[f64],
    guess: &PhaseVector,
    opts: &FlowOptions,
) -> Result<Vec<PeriodBasis>> {
    let n = map.dof();
    let mut out = Vec::with_capacity(radii.len());
    let mut seed = guess.clone();
    for &r in radii {
        let mut target = DVector::zeros(n);
        target[0] = r * dir.0;
        target[1] = r * dir.1;
        for (k, &f) in fixed.iter().enumerate() {
            target[2 + k] = f;
        }
        let v = map.invert(&target)?;
        let basis = build_period_basis(sys, &v, &seed, opts)?;
        seed = basis.anchor.clone();
        out.push(basis);
    }
    Ok(out)
}

/// Dyadic log-defect estimator: for s(r) = A + B r + C r ln r sampled at
/// halving radii, e(r) = (s(r) - s(r/2)) / r satisfies
/// e(r) - e(r/2) = (C / 2) ln 2; the last second-differences estimate C.
fn dyadic_log_coefficient(radii: &[f64], s: &[f64]) -> f64 {
    let mut e = Vec::new();
    for i in 0..radii.len() - 1 {
        e.push((s[i] - s[i + 1]) / radii[i]);
    }
    let m = e.len();
    let lo = m.saturating_sub(3).max(1);
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for i in lo..m {
        acc += 2.0 * (e[i - 1] - e[i]) / 2.0_f64.ln();
        cnt += 1;
    }
    acc / cnt as f64
}

/// Calibration controls for the quadratic part of the value map.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    /// Largest sampling radius in the normalized value plane.
    pub r0: f64,
    /// Number of dyadic radius levels.
    pub levels: usize,
    /// Gauss-Seidel sweeps over the three coefficients.
    pub sweeps: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            r0: 0.08,
            levels: 7,
            sweeps: 3,
        }
    }
}

/// Fit the quadratic part of the value map so that sigma extends smoothly:
/// the r ln r defect of sigma_1 along the ray arg w = 0 fixes a, the defect
/// of sigma_1 along arg w = pi/2 fixes c, and the defect of sigma_2 there
/// fixes b. Each coefficient is solved by a secant iteration on the dyadic
/// defect estimator; the measurements are reused across iterations since the
/// map acts on tau by exact post-transformation.
pub fn calibrate_ff_value_map(
    sys: &HamiltonianSystem,
    dg0: &DMatrix<f64>,
    guess: &PhaseVector,
    opts: &FlowOptions,
    cal: &CalibrationOptions,
) -> Result<FFValueMap> {
    let n = sys.dof();
    let linear = FFValueMap::new(n, dg0, [0.0; 3])?;
    let radii: Vec<f64> = (0..cal.levels).map(|k| cal.r0 / 2f64.powi(k as i32)).collect();
    let fixed = vec![0.0; n.saturating_sub(2)];

    let ray0 = sample_ray(sys, &linear, (1.0, 0.0), &radii, &fixed, guess, opts)?;
    let ray90 = sample_ray(sys, &linear, (0.0, 1.0), &radii, &fixed, guess, opts)?;

    // sigma_1 and lifted sigma_2 along a ray under a candidate map.
    let sigma_series = |data: &[PeriodBasis], quad: [f64; 3]| -> Result<(Vec<f64>, Vec<f64>)> {
        let map = FFValueMap {
            n,
            dg0_inv: linear.dg0_inv.clone(),
            quad,
        };
        let mut s1 = Vec::new();
        let mut s2 = Vec::new();
        for basis in data {
            let tau = map.transform_tau(&basis.value, &basis.tau())?;
            let w = map.w(&basis.value);
            s1.push(tau[0] + w.norm().ln());
            let raw = tau[1] - w.arg();
            let lifted = match s2.last() {
                Some(&prev) => lift_near(prev, raw, TWO_PI),
                None => raw,
            };
            s2.push(lifted);
        }
        Ok((s1, s2))
    };

    let mut quad = [0.0f64; 3];
    for _ in 0..cal.sweeps {
        // (coefficient index, ray, sigma component)
        for (idx, data, comp) in [(0usize, &ray0, 0usize), (2, &ray90, 0), (1, &ray90, 1)] {
            let eval = |x: f64| -> Result<f64> {
                let mut q = quad;
                q[idx] = x;
                let (s1, s2) = sigma_series(data, q)?;
                Ok(dyadic_log_coefficient(
                    &radii,
                    if comp == 0 { &s1 } else { &s2 },
                ))
            };
            let mut x0 = quad[idx];
            let mut x1 = quad[idx] + 0.1;
            let mut f0 = eval(x0)?;
            let mut f1 = eval(x1)?;
            for _ in 0..40 {
                if (f1 - f0).abs() < 1e-14 {
                    break;
                }
                let x2 = x1 - f1 * (x1 - x0) / (f1 - f0);
                if !x2.is_finite() {
                    break;
                }
                x0 = x1;
                f0 = f1;
                x1 = x2;
                f1 = eval(x1)?;
                if f1.abs() < 1e-6 {
                    break;
                }
            }
            quad[idx] = x1;
        }
    }

    // Sanity: the residual defect on the calibration rays must be small.
    let (s1, _) = sigma_series(&ray0, quad)?;
    let c_res = dyadic_log_coefficient(&radii, &s1);
    if !c_res.is_finite() || c_res.abs() > 0.05 {
        return Err(Error::NoConvergence {
            iters: cal.sweeps,
            residual: c_res.abs(),
        });
    }

    FFValueMap::new(n, dg0, quad)
}

/// Rectangular grid of sigma samples in the normalized (v1, v2)-plane at
/// fixed trailing values.
#[derive(Debug, Clone)]
pub struct SigmaGrid {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub fixed: Vec<f64>,
    /// samples[i][j] at (v1[i], v2[j]); sigma_2.. lifted to a continuous
    /// determination over the grid (row 0 left-to-right, then down columns).
    pub samples: Vec<Vec<SigmaSample>>,
}

/// Build the grid by leaf continuation; errors on any node abort (the
/// benchmarks use windows of regular values only).
pub fn sigma_grid(
    sys: &HamiltonianSystem,
    map: &FFValueMap,
    branch: &LogBranch,
    v1: &[f64],
    v2: &[f64],
    fixed: &[f64],
    guess: &PhaseVector,
    opts: &FlowOptions,
) -> Result<SigmaGrid> {
    if v1.len() < 3 || v2.len() < 3 {
        return Err(Error::GridTooSmall);
    }
    let n = map.dof();
    let mut samples: Vec<Vec<SigmaSample>> = Vec::with_capacity(v1.len());
    let mut row_seed = guess.clone();
    for (i, &a) in v1.iter().enumerate() {
        let mut row = Vec::with_capacity(v2.len());
        let mut seed = row_seed.clone();
        for (j, &b) in v2.iter().enumerate() {
            let mut target = DVector::zeros(n);
            target[0] = a;
            target[1] = b;
            for (k, &f) in fixed.iter().enumerate() {
                target[2 + k] = f;
            }
            let v = map.invert(&target)?;
            let basis = build_period_basis(sys, &v, &seed, opts)?;
            seed = basis.anchor.clone();
            if j == 0 {
                row_seed = basis.anchor.clone();
            }
            let sample = sigma_from_basis(&basis, map, branch)?;
            row.push(sample);
        }
        // Lift sigma_2.. along the row for continuity.
        for j in 1..row.len() {
            for comp in 1..row[j].sigma.len() {
                let prev = row[j - 1].sigma[comp];
                row[j].sigma[comp] = lift_near(prev, row[j].sigma[comp], TWO_PI);
            }
        }
        if i > 0 {
            let prev_row: &Vec<SigmaSample> = &samples[i - 1];
            for j in 0..row.len() {
                for comp in 1..row[j].sigma.len() {
                    let prev = prev_row[j].sigma[comp];
                    row[j].sigma[comp] = lift_near(prev, row[j].sigma[comp], TWO_PI);
                }
            }
        }
        samples.push(row);
    }
    Ok(SigmaGrid {
        v1: v1.to_vec(),
        v2: v2.to_vec(),
        fixed: fixed.to_vec(),
        samples,
    })
}

/// Max closedness defect |D1 sigma_2 - D2 sigma_1| over interior nodes,
/// central differences on the (lifted) samples.
pub fn closedness_defect(grid: &SigmaGrid) -> Result<f64> {
    let (nx, ny) = (grid.v1.len(), grid.v2.len());
    if nx < 3 || ny < 3 {
        return Err(Error::GridTooSmall);
    }
    let mut defect = 0.0f64;
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            let h1 = grid.v1[i + 1] - grid.v1[i - 1];
            let h2 = grid.v2[j + 1] - grid.v2[j - 1];
            let d1_s2 = (grid.samples[i + 1][j].sigma[1] - grid.samples[i - 1][j].sigma[1]) / h1;
            let d2_s1 = (grid.samples[i][j + 1].sigma[0] - grid.samples[i][j - 1].sigma[0]) / h2;
            defect = defect.max((d1_s2 - d2_s1).abs());
        }
    }
    Ok(defect)
}

/// S on the grid nodes, by composite trapezoid along two homotopic polylines
/// from 0; S(0) = 0.
#[derive(Debug, Clone)]
pub struct SField {
    /// (v1, v2, S) per node, row-major in the grid order.
    pub nodes: Vec<(f64, f64, f64)>,
    /// Extrapolated sigma at v = 0 (first two components).
    pub sigma0: (f64, f64),
    /// Max disagreement of the two integration paths.
    pub path_residual: f64,
}

/// Integrate S over the grid. `base_ray` carries sigma samples from near 0
/// to the grid anchor node along the straight segment through the origin,
/// ordered by decreasing radius (the anchor first).
pub fn integrate_s(
    grid: &SigmaGrid,
    base_ray: &[SigmaSample],
    anchor_j: usize,
) -> Result<SField> {
    let (nx, ny) = (grid.v1.len(), grid.v2.len());
    if nx < 3 || ny < 3 {
        return Err(Error::GridTooSmall);
    }
    if base_ray.len() < 3 {
        return Err(Error::GridTooSmall);
    }

    // --- Base segment: from 0 to the anchor node (v1[0], v2[anchor_j]). ---
    // Radii along the segment, anchor first, decreasing; extend to r = 0 with
    // second-order Richardson from the two innermost samples.
    let anchor = (grid.v1[0], grid.v2[anchor_j]);
    let seg_len = (anchor.0 * anchor.0 + anchor.1 * anchor.1).sqrt();
    let mut rs: Vec<f64> = Vec::new();
    let mut s1s: Vec<f64> = Vec::new();
    let mut s2s: Vec<f64> = Vec::new();
    for s in base_ray {
        let r = (s.normalized[0].powi(2) + s.normalized[1].powi(2)).sqrt();
        rs.push(r);
        s1s.push(s.sigma[0]);
        // lift sigma_2 along the ray toward 0
        let raw = s.sigma[1];
        let lifted = match s2s.last() {
            Some(&p) => lift_near(p, raw, TWO_PI),
            None => raw,
        };
        s2s.push(lifted);
    }
    let m = rs.len();
    let sigma0 = (
        2.0 * s1s[m - 1] - s1s[m - 2],
        2.0 * s2s[m - 1] - s2s[m - 2],
    );
    // trapezoid over [0, r_{m-1}], then up the dyadic ladder to the anchor
    let dir = (anchor.0 / seg_len, anchor.1 / seg_len);
    let dot = |s1: f64, s2: f64| s1 * dir.0 + s2 * dir.1;
    let mut s_anchor = 0.5 * rs[m - 1] * (dot(sigma0.0, sigma0.1) + dot(s1s[m - 1], s2s[m - 1]));
    for k in (0..m - 1).rev() {
        s_anchor +=
            0.5 * (rs[k] - rs[k + 1]) * (dot(s1s[k + 1], s2s[k + 1]) + dot(s1s[k], s2s[k]));
    }

    // --- Path A: along the anchor row in v1, then along columns in v2. ---
    let sig = |i: usize, j: usize, comp: usize| grid.samples[i][j].sigma[comp];
    let mut s_row = vec![0.0f64; nx]; // S along row anchor_j
    s_row[0] = s_anchor;
    for i in 1..nx {
        let h = grid.v1[i] - grid.v1[i - 1];
        s_row[i] = s_row[i - 1] + 0.5 * h * (sig(i - 1, anchor_j, 0) + sig(i, anchor_j, 0));
    }
    let mut s_a = vec![vec![0.0f64; ny]; nx];
    for i in 0..nx {
        s_a[i][anchor_j] = s_row[i];
        for j in (anchor_j + 1)..ny {
            let h = grid.v2[j] - grid.v2[j - 1];
            s_a[i][j] = s_a[i][j - 1] + 0.5 * h * (sig(i, j - 1, 1) + sig(i, j, 1));
        }
        for j in (0..anchor_j).rev() {
            let h = grid.v2[j + 1] - grid.v2[j];
            s_a[i][j] = s_a[i][j + 1] - 0.5 * h * (sig(i, j + 1, 1) + sig(i, j, 1));
        }
    }

    // --- Path B: along the first column in v2, then along rows in v1. ---
    let mut s_col = vec![0.0f64; ny];
    s_col[anchor_j] = s_anchor;
    for j in (anchor_j + 1)..ny {
        let h = grid.v2[j] - grid.v2[j - 1];
        s_col[j] = s_col[j - 1] + 0.5 * h * (sig(0, j - 1, 1) + sig(0, j, 1));
    }
    for j in (0..anchor_j).rev() {
        let h = grid.v2[j + 1] - grid.v2[j];
        s_col[j] = s_col[j + 1] - 0.5 * h * (sig(0, j + 1, 1) + sig(0, j, 1));
    }
    let mut path_residual = 0.0f64;
    let mut nodes = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let mut s_b = s_col[j];
            for k in 1..=i {
                let h = grid.v1[k] - grid.v1[k - 1];
                s_b += 0.5 * h * (sig(k - 1, j, 0) + sig(k, j, 0));
            }
            path_residual = path_residual.max((s_a[i][j] - s_b).abs());
            nodes.push((grid.v1[i], grid.v2[j], s_a[i][j]));
        }
    }
    if path_residual > TOL_PATH {
        return Err(Error::PathsDisagree {
            residual: path_residual,
            tol: TOL_PATH,
        });
    }

    Ok(SField {
        nodes,
        sigma0,
        path_residual,
    })
}

/// Least-squares Taylor polynomial of S in (v1, v2), constant term fixed to 0.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TaylorFit {
    pub degree: usize,
    /// (j1, j2, coefficient) for 1 <= j1 + j2 <= degree.
    pub coeffs: Vec<(usize, usize, f64)>,
    pub residual: f64,
}

pub fn taylor_fit(nodes: &[(f64, f64, f64)], degree: usize) -> Result<TaylorFit> {
    let mut exps = Vec::new();
    for total in 1..=degree {
        for j1 in (0..=total).rev() {
            exps.push((j1, total - j1));
        }
    }
    if nodes.len() < exps.len() {
        return Err(Error::GridTooSmall);
    }
    // Column scaling keeps the Vandermonde condition number meaningful.
    let m = DMatrix::from_fn(nodes.len(), exps.len(), |r, c| {
        let (v1, v2, _) = nodes[r];
        let (j1, j2) = exps[c];
        v1.powi(j1 as i32) * v2.powi(j2 as i32)
    });
    let scales: Vec<f64> = (0..exps.len())
        .map(|c| {
            let norm = m.column(c).norm();
            if norm == 0.0 {
                1.0
            } else {
                norm
            }
        })
        .collect();
    let mut ms = m.clone();
    for (c, &s) in scales.iter().enumerate() {
        ms.column_mut(c).scale_mut(1.0 / s);
    }
    let rhs = DVector::from_iterator(nodes.len(), nodes.iter().map(|&(_, _, s)| s));
    let svd = ms.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin == 0.0 || smax / smin > COND_FIT {
        return Err(Error::IllConditionedFit {
            cond: if smin == 0.0 { f64::INFINITY } else { smax / smin },
        });
    }
    let sol_scaled = svd.solve(&rhs, 1e-13).map_err(|_| Error::IllConditionedFit {
        cond: smax / smin,
    })?;
    let sol: Vec<f64> = sol_scaled
        .iter()
        .zip(&scales)
        .map(|(x, s)| x / s)
        .collect();
    let fitted = m * DVector::from_row_slice(&sol);
    let residual = ((&fitted - &rhs).norm_squared() / nodes.len() as f64).sqrt();
    Ok(TaylorFit {
        degree,
        coeffs: exps
            .iter()
            .zip(sol)
            .map(|(&(j1, j2), c)| (j1, j2, c))
            .collect(),
        residual,
    })
}

/// Action integral over the cycle realized by the tau flow word from the
/// anchor: the integral of xi . dx along the f1 flow for tau_1 followed by
/// the periodic flows for tau_2..tau_n, traversed in the orientation for
/// which dA = sum tau_i dv_i holds with positive sign (the reverse of the
/// forward flow word).
pub fn action_integral(
    sys: &HamiltonianSystem,
    basis: &PeriodBasis,
    opts: &FlowOptions,
) -> Result<f64> {
    let n = sys.dof();
    let tau = basis.tau();
    let mut total = 0.0f64;
    let mut point = basis.anchor.coords().clone();
    for comp in 0..n {
        let t = tau[comp];
        if t == 0.0 {
            continue;
        }
        // Augmented state (y, a): a' = sum_i xi_i dx_i/dt.
        let mut y0 = DVector::zeros(2 * n + 1);
        y0.rows_mut(0, 2 * n).copy_from(&point);
        let rhs = |y: &DVector<f64>, dy: &mut DVector<f64>| {
            let p = y.rows(0, 2 * n).clone_owned();
            let grad = sys.component(comp).gradient(p.as_slice());
            let mut a_dot = 0.0;
            for i in 0..n {
                let xdot = -grad[n + i];
                dy[i] = xdot;
                dy[n + i] = grad[i];
                a_dot += y[n + i] * xdot;
            }
            dy[2 * n] = a_dot;
        };
        let traj = integrate(rhs, &y0, 0.0, t, &opts.integrator())?;
        total += traj.y_end[2 * n];
        point = traj.y_end.rows(0, 2 * n).clone_owned();
    }
    let residual = (&point - basis.anchor.coords()).norm();
    if residual > 10.0 * opts.tol_flow * (1.0 + point.norm()) {
        return Err(Error::ClosureFailed {
            residual,
            tol: 10.0 * opts.tol_flow * (1.0 + point.norm()),
        });
    }
    // Integrating along the reversed cycle flips the sign of the integral.
    Ok(-total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical::ff_normalization;
    use crate::models::champagne_bottle;
    use approx::assert_relative_eq;

    fn guess4() -> PhaseVector {
        PhaseVector::from_slice(&[0.9, 0.0, 0.3, 0.1]).unwrap()
    }

    #[test]
    fn principal_log_matches_std_off_cut() {
        let b = LogBranch::principal();
        for &(re, im) in &[(1.0, 0.0), (0.3, 0.4), (-0.2, 0.7), (0.0, -1.0)] {
            let w = Complex::new(re, im);
            let l = b.ln(w).unwrap();
            let expect = w.ln();
            assert_relative_eq!(l.re, expect.re, epsilon = 1e-14);
            assert_relative_eq!(l.im, expect.im, epsilon = 1e-14);
        }
        assert!(b.ln(Complex::new(-1.0, 0.0)).is_err());
        assert!(b.ln(Complex::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn rotated_branch_moves_the_cut() {
        let b = LogBranch { cut_angle: 0.0 };
        // now the positive real axis is the cut and -1 is fine
        assert!(b.ln(Complex::new(1.0, 0.0)).is_err());
        let l = b.ln(Complex::new(-1.0, 0.0)).unwrap();
        assert_relative_eq!(l.im, -PI, epsilon = 1e-14);
    }

    #[test]
    fn value_map_roundtrip() {
        let dg0 = DMatrix::from_row_slice(2, 2, &[2f64.sqrt(), 0.0, 0.0, 1.0]);
        let map = FFValueMap::new(2, &dg0, [-0.5, 0.2, 0.1]).unwrap();
        let v = DVector::from_row_slice(&[0.07, -0.03]);
        let back = map.invert(&map.forward(&v)).unwrap();
        assert!((back - &v).norm() < 1e-12);
    }

    #[test]
    fn transform_tau_linear_case_rescales_first_row() {
        let dg0 = DMatrix::from_row_slice(2, 2, &[2f64.sqrt(), 0.0, 0.0, 1.0]);
        let map = FFValueMap::new(2, &dg0, [0.0; 3]).unwrap();
        let v = DVector::from_row_slice(&[0.05, 0.02]);
        let tau = DVector::from_row_slice(&[3.0, 1.0]);
        let t = map.transform_tau(&v, &tau).unwrap();
        assert_relative_eq!(t[0], 3.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(t[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lift_near_wraps_to_prev() {
        assert_relative_eq!(lift_near(6.2, 0.01, TWO_PI), 0.01 + TWO_PI);
        assert_relative_eq!(lift_near(0.0, 6.2, TWO_PI), 6.2 - TWO_PI);
        assert_relative_eq!(lift_near(3.0, 3.2, TWO_PI), 3.2);
    }

    fn calibrated_champagne() -> (HamiltonianSystem, FFValueMap) {
        let sys = champagne_bottle();
        let origin = PhaseVector::from_slice(&[0.0; 4]).unwrap();
        let dg0 = ff_normalization(&sys, &origin).unwrap();
        let opts = FlowOptions::default();
        let cal = CalibrationOptions {
            r0: 0.04,
            levels: 5,
            sweeps: 2,
        };
        let map = calibrate_ff_value_map(&sys, &dg0, &guess4(), &opts, &cal).unwrap();
        (sys, map)
    }

    #[test]
    fn calibration_kills_the_log_defect() {
        let (sys, map) = calibrated_champagne();
        let opts = FlowOptions::default();
        // fresh dyadic radii on a diagonal ray (not used in calibration)
        let radii: Vec<f64> = (0..5).map(|k| 0.04 / 2f64.powi(k)).collect();
        let d = std::f64::consts::FRAC_1_SQRT_2;
        let ray = sample_ray(&sys, &map, (d, d), &radii, &[], &guess4(), &opts).unwrap();
        let branch = LogBranch::principal();
        let s1: Vec<f64> = ray
            .iter()
            .map(|b| sigma_from_basis(b, &map, &branch).unwrap().sigma[0])
            .collect();
        // Cauchy with geometric ratio
        let d1 = (s1[1] - s1[0]).abs();
        let d2 = (s1[2] - s1[1]).abs();
        let d3 = (s1[3] - s1[2]).abs();
        assert!(d2 < 0.62 * d1, "{s1:?}");
        assert!(d3 < 0.62 * d2, "{s1:?}");
    }

    #[test]
    fn closedness_defect_on_synthetic_fields() {
        // sigma = dv1: sigma_1 = 1, sigma_2 = 0 -> defect 0
        let v1: Vec<f64> = (0..5).map(|i| 0.02 + 0.01 * i as f64).collect();
        let v2: Vec<f64> = (0..5).map(|j| -0.02 + 0.01 * j as f64).collect();
        let mk = |f: &dyn Fn(f64, f64) -> (f64, f64)| -> SigmaGrid {
            let samples = v1
                .iter()
                .map(|&a| {
                    v2.iter()
                        .map(|&b| {
                            let (s1, s2) = f(a, b);
                            SigmaSample {
                                value: DVector::from_row_slice(&[a, b]),
                                normalized: DVector::from_row_slice(&[a, b]),
                                sigma: DVector::from_row_slice(&[s1, s2]),
                            }
                        })
                        .collect()
                })
                .collect();
            SigmaGrid {
                v1: v1.clone(),
                v2: v2.clone(),
                fixed: vec![],
                samples,
            }
        };
        let exact = mk(&|_, _| (1.0, 0.0));
        assert!(closedness_defect(&exact).unwrap() < 1e-14);
        // sigma = (v2, 0): D1 sigma2 - D2 sigma1 = -1
        let planted = mk(&|_, b| (b, 0.0));
        assert_relative_eq!(closedness_defect(&planted).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn integrate_s_recovers_linear_field() {
        // sigma = dv1 -> S = v1 everywhere, including through the base ray.
        let v1: Vec<f64> = (0..4).map(|i| 0.02 + 0.01 * i as f64).collect();
        let v2: Vec<f64> = (0..3).map(|j| -0.01 + 0.01 * j as f64).collect();
        let sample = |a: f64, b: f64| SigmaSample {
            value: DVector::from_row_slice(&[a, b]),
            normalized: DVector::from_row_slice(&[a, b]),
            sigma: DVector::from_row_slice(&[1.0, 0.0]),
        };
        let grid = SigmaGrid {
            v1: v1.clone(),
            v2: v2.clone(),
            fixed: vec![],
            samples: v1
                .iter()
                .map(|&a| v2.iter().map(|&b| sample(a, b)).collect())
                .collect(),
        };
        // anchor node (0.02, 0.0) = index 1 in v2; base ray toward origin
        let base: Vec<SigmaSample> = [1.0, 0.5, 0.25, 0.125]
            .iter()
            .map(|&t| sample(0.02 * t, 0.0))
            .collect();
        let field = integrate_s(&grid, &base, 1).unwrap();
        for &(a, _, s) in &field.nodes {
            assert_relative_eq!(s, a, epsilon = 1e-12);
        }
        assert!(field.path_residual < 1e-12);
    }

    #[test]
    fn taylor_fit_exact_polynomial() {
        // S = v1^2 + 3 v1 v2
        let mut nodes = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                let a = -0.05 + 0.02 * i as f64;
                let b = -0.05 + 0.02 * j as f64;
                nodes.push((a, b, a * a + 3.0 * a * b));
            }
        }
        let fit = taylor_fit(&nodes, 2).unwrap();
        assert!(fit.residual < 1e-10);
        for &(j1, j2, c) in &fit.coeffs {
            let expect = match (j1, j2) {
                (2, 0) => 1.0,
                (1, 1) => 3.0,
                _ => 0.0,
            };
            assert_relative_eq!(c, expect, epsilon = 1e-8);
        }
    }

    #[test]
    fn taylor_fit_degree_zero_equivalent_rejected() {
        let nodes = vec![(0.0, 0.0, 0.0); 3];
        assert!(taylor_fit(&nodes, 2).is_err());
    }

    #[test]
    fn action_derivative_matches_tau() {
        // [A(v + h e1) - A(v - h e1)] / 2h = tau_1 on the champagne bottle.
        let sys = champagne_bottle();
        let opts = FlowOptions::default();
        let v = DVector::from_row_slice(&[0.05, 0.02]);
        let h = 1e-4;
        let action_at = |v: &DVector<f64>| -> f64 {
            let b = build_period_basis(&sys, v, &guess4(), &opts).unwrap();
            action_integral(&sys, &b, &opts).unwrap()
        };
        let basis = build_period_basis(&sys, &v, &guess4(), &opts).unwrap();
        let vp = DVector::from_row_slice(&[v[0] + h, v[1]]);
        let vm = DVector::from_row_slice(&[v[0] - h, v[1]]);
        let d1 = (action_at(&vp) - action_at(&vm)) / (2.0 * h);
        let tau1 = basis.tau()[0];
        assert!(
            (d1 - tau1).abs() < 1e-3 * tau1.abs(),
            "dA/dv1 = {d1}, tau1 = {tau1}"
        );
    }
}
