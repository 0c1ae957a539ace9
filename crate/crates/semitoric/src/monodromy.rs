//! Topological monodromy: transport the period-lattice basis around a loop
//! of regular values by continuation and read off the integer matrix.
//!
//! Transport works on raw tau rows; the logarithm branch never enters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::FlowOptions;
use crate::geometry::{HamiltonianSystem, PhaseVector};
use crate::periods::{build_period_basis, PeriodBasis};

const TWO_PI: f64 = std::f64::consts::TAU;

/// A circular loop in the (v1, v2)-plane at fixed trailing values.
#[derive(Debug, Clone)]
pub struct LoopSpec {
    /// Center of the loop, all n components (trailing entries are the fixed
    /// values of v3..vn).
    pub center: DVector<f64>,
    pub radius: f64,
    /// Number of sample points along the loop (>= 8).
    pub steps: usize,
    /// +1 counterclockwise, -1 clockwise.
    pub orientation: i32,
}

impl LoopSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 8 {
            return Err(Error::Config(format!(
                "loop needs at least 8 steps, got {}",
                self.steps
            )));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::Config(format!("invalid loop radius {}", self.radius)));
        }
        if self.orientation != 1 && self.orientation != -1 {
            return Err(Error::Config(format!(
                "orientation must be +1 or -1, got {}",
                self.orientation
            )));
        }
        if self.center.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: self.center.len(),
            });
        }
        Ok(())
    }

    /// The steps + 1 loop values C(t_k), t_k = 2 pi k / steps; the last
    /// value repeats the first.
    pub fn values(&self) -> Vec<DVector<f64>> {
        (0..=self.steps)
            .map(|k| {
                let t = self.orientation as f64 * TWO_PI * k as f64 / self.steps as f64;
                let mut v = self.center.clone();
                v[0] += self.radius * t.cos();
                v[1] += self.radius * t.sin();
                v
            })
            .collect()
    }
}

/// Shift the tau row of `basis` by the integer combination of 2 pi rows that
/// best continues `prev_tau`; error when the runner-up shift is within a
/// factor 2 of the best (too-coarse stepping).
fn match_to_predecessor(
    basis: &mut PeriodBasis,
    prev_tau: &DVector<f64>,
    step: usize,
) -> Result<()> {
    let n = basis.rows.ncols();
    let tau = basis.tau();
    // The 2 pi rows are 2 pi e_j on the periodic components; candidate
    // shifts therefore decouple per component. Score the best and runner-up
    // total jumps over a box around the rounded optimum.
    let mut base_shift: Vec<i64> = vec![0; n];
    for r in 1..basis.rows.nrows() {
        for j in 0..n {
            if basis.rows[(r, j)] != 0.0 {
                base_shift[j] = ((prev_tau[j] - tau[j]) / TWO_PI).round() as i64;
            }
        }
    }
    let shiftable: Vec<usize> = (0..n)
        .filter(|&j| (1..basis.rows.nrows()).any(|r| basis.rows[(r, j)] != 0.0))
        .collect();
    let jump = |shift: &[i64]| -> f64 {
        let mut sq = 0.0;
        for j in 0..n {
            let d = tau[j] + TWO_PI * shift[j] as f64 - prev_tau[j];
            sq += d * d;
        }
        sq.sqrt()
    };
    let mut best = (base_shift.clone(), jump(&base_shift));
    let mut runner_up = f64::INFINITY;
    // enumerate deviations of -1/0/+1 on each shiftable component
    let m = shiftable.len();
    for mask in 0..3usize.pow(m as u32) {
        let mut s = base_shift.clone();
        let mut code = mask;
        for &j in &shiftable {
            s[j] += (code % 3) as i64 - 1;
            code /= 3;
        }
        if s == base_shift {
            continue;
        }
        let val = jump(&s);
        if val < best.1 {
            runner_up = best.1;
            best = (s, val);
        } else if val < runner_up {
            runner_up = val;
        }
    }
    if runner_up < 2.0 * best.1 {
        return Err(Error::MatchingAmbiguity {
            step,
            best: best.1,
            runner_up,
        });
    }
    for j in 0..n {
        basis.rows[(0, j)] = tau[j] + TWO_PI * best.0[j] as f64;
    }
    Ok(())
}

/// Period bases at each loop point, tau rows matched continuously to their
/// predecessor; the last basis sits at the same value as the first.
pub fn transport_basis(
    sys: &HamiltonianSystem,
    spec: &LoopSpec,
    guess: &PhaseVector,
    opts: &FlowOptions,
) -> Result<Vec<PeriodBasis>> {
    spec.validate()?;
    let values = spec.values();
    let mut out: Vec<PeriodBasis> = Vec::with_capacity(values.len());
    let mut seed = guess.clone();
    for v in &values {
        let mut basis = build_period_basis(sys, v, &seed, opts)?;
        seed = basis.anchor.clone();
        if let Some(prev) = out.last() {
            let prev_tau = prev.tau();
            match_to_predecessor(&mut basis, &prev_tau, out.len())?;
        }
        out.push(basis);
    }
    Ok(out)
}

/// Integer monodromy matrix with its rounding diagnostics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MonodromyMatrix {
    /// Row-major integer entries.
    pub entries: Vec<Vec<i64>>,
    pub max_rounding_error: f64,
}

impl MonodromyMatrix {
    pub fn det(&self) -> i64 {
        let n = self.entries.len();
        let m = DMatrix::from_fn(n, n, |i, j| self.entries[i][j] as f64);
        m.determinant().round() as i64
    }

    pub fn as_f64(&self) -> DMatrix<f64> {
        let n = self.entries.len();
        DMatrix::from_fn(n, n, |i, j| self.entries[i][j] as f64)
    }
}

/// Solve last.rows = M * first.rows, round to integers, and verify the
/// result is a change of Z-basis.
pub fn monodromy_matrix(first: &PeriodBasis, last: &PeriodBasis) -> Result<MonodromyMatrix> {
    if (first.value.clone() - &last.value).norm() > 1e-9 * (1.0 + first.value.norm()) {
        return Err(Error::Config(
            "monodromy endpoints are at different values".into(),
        ));
    }
    let n = first.rows.nrows();
    let first_inv = first
        .rows
        .transpose()
        .try_inverse()
        .ok_or(Error::SingularJacobian { cond: f64::INFINITY })?;
    // rows are stacked as row vectors: last = M * first  =>
    // last^T = first^T * M^T  =>  M = (first^{-T} last^T)^T
    let m_real = (first_inv * last.rows.transpose()).transpose();
    let mut entries = vec![vec![0i64; n]; n];
    let mut err = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let r = m_real[(i, j)].round();
            err = err.max((m_real[(i, j)] - r).abs());
            entries[i][j] = r as i64;
        }
    }
    if err > 1e-3 {
        return Err(Error::NotIntegral { error: err });
    }
    let result = MonodromyMatrix {
        entries,
        max_rounding_error: err,
    };
    let det = result.det();
    if det != 1 && det != -1 {
        return Err(Error::NotUnimodular { det });
    }
    Ok(result)
}

/// Transport around the loop and extract the matrix in one call; also
/// returns the per-point closure residuals.
pub fn monodromy_of_loop(
    sys: &HamiltonianSystem,
    spec: &LoopSpec,
    guess: &PhaseVector,
    opts: &FlowOptions,
) -> Result<(MonodromyMatrix, Vec<f64>)> {
    let bases = transport_basis(sys, spec, guess, opts)?;
    let matrix = monodromy_matrix(&bases[0], bases.last().unwrap())?;
    let residuals = bases.iter().map(|b| b.closure_residual).collect();
    Ok((matrix, residuals))
}
