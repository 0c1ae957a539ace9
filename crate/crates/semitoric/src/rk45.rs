//! Adaptive Dormand-Prince 5(4) integration with dense output.
//!
//! Event location needs a continuous solution, so every accepted step stores
//! the quartic interpolation polynomial of the embedded pair.

use nalgebra::DVector;

use crate::error::{Error, Result};

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// 4th-order error coefficients b5 - b4.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Dense output coefficients (Hairer & Wanner, DOPRI5).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integration tolerances and limits.
#[derive(Debug, Clone, Copy)]
pub struct IntegratorOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    pub min_step: f64,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_steps: 2_000_000,
            min_step: 1e-14,
        }
    }
}

/// One accepted step with its interpolation polynomial.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    cont: [DVector<f64>; 5],
}

impl DenseStep {
    /// Evaluate the interpolant at t in [t0, t0+h].
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        &self.cont[0]
            + theta
                * (&self.cont[1]
                    + theta1 * (&self.cont[2] + theta * (&self.cont[3] + theta1 * &self.cont[4])))
    }
}

/// Dense solution of one integration run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t0: f64,
    pub t_end: f64,
    pub y_end: DVector<f64>,
    steps: Vec<DenseStep>,
}

impl Trajectory {
    pub fn steps(&self) -> &[DenseStep] {
        &self.steps
    }

    /// Evaluate the dense output at time t (clamped to the integrated span).
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let forward = self.t_end >= self.t0;
        let t = if forward {
            t.clamp(self.t0, self.t_end)
        } else {
            t.clamp(self.t_end, self.t0)
        };
        // Binary search for the covering step.
        let idx = self
            .steps
            .partition_point(|s| {
                if forward {
                    s.t0 + s.h < t
                } else {
                    s.t0 + s.h > t
                }
            })
            .min(self.steps.len() - 1);
        self.steps[idx].eval(t)
    }
}

/// Integrate an autonomous system dy/dt = rhs(y) from t0 to t1.
pub fn integrate<F>(rhs: F, y0: &DVector<f64>, t0: f64, t1: f64, opts: &IntegratorOptions) -> Result<Trajectory>
where
    F: Fn(&DVector<f64>, &mut DVector<f64>),
{
    let dim = y0.len();
    let direction = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();

    let mut y = y0.clone();
    let mut k1 = DVector::zeros(dim);
    rhs(&y, &mut k1);
    if k1.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("vector field"));
    }

    let mut t = t0;
    let mut h = initial_step(&y, &k1, span, opts) * direction;
    let mut steps = Vec::new();

    let mut k2 = DVector::zeros(dim);
    let mut k3 = DVector::zeros(dim);
    let mut k4 = DVector::zeros(dim);
    let mut k5 = DVector::zeros(dim);
    let mut k6 = DVector::zeros(dim);
    let mut k7 = DVector::zeros(dim);

    if span == 0.0 {
        return Ok(Trajectory {
            t0,
            t_end: t1,
            y_end: y,
            steps: vec![DenseStep {
                t0,
                h: 1.0,
                cont: [
                    y0.clone(),
                    DVector::zeros(dim),
                    DVector::zeros(dim),
                    DVector::zeros(dim),
                    DVector::zeros(dim),
                ],
            }],
        });
    }

    for _ in 0..opts.max_steps {
        let remaining = t1 - t;
        if remaining.abs() <= h.abs() {
            h = remaining;
        }

        let y2 = &y + h * A21 * &k1;
        rhs(&y2, &mut k2);
        let y3 = &y + h * (A31 * &k1 + A32 * &k2);
        rhs(&y3, &mut k3);
        let y4 = &y + h * (A41 * &k1 + A42 * &k2 + A43 * &k3);
        rhs(&y4, &mut k4);
        let y5 = &y + h * (A51 * &k1 + A52 * &k2 + A53 * &k3 + A54 * &k4);
        rhs(&y5, &mut k5);
        let y6 = &y + h * (A61 * &k1 + A62 * &k2 + A63 * &k3 + A64 * &k4 + A65 * &k5);
        rhs(&y6, &mut k6);
        let y_new = &y + h * (A71 * &k1 + A73 * &k3 + A74 * &k4 + A75 * &k5 + A76 * &k6);
        rhs(&y_new, &mut k7);

        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("integration state"));
        }

        let err_vec = h * (E1 * &k1 + E3 * &k3 + E4 * &k4 + E5 * &k5 + E6 * &k6 + E7 * &k7);
        let mut err = 0.0f64;
        for i in 0..dim {
            let scale = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
            err += (err_vec[i] / scale).powi(2);
        }
        let err = (err / dim as f64).sqrt();

        if err <= 1.0 {
            // Accept: build the dense output polynomial.
            let ydiff = &y_new - &y;
            let bspl = h * &k1 - &ydiff;
            let cont4 = &ydiff - h * &k7 - &bspl;
            let cont5 =
                h * (D1 * &k1 + D3 * &k3 + D4 * &k4 + D5 * &k5 + D6 * &k6 + D7 * &k7);
            steps.push(DenseStep {
                t0: t,
                h,
                cont: [y.clone(), ydiff, bspl, cont4, cont5],
            });
            t += h;
            y = y_new;
            k1.copy_from(&k7); // FSAL
            if (t1 - t).abs() <= 1e-14 * span.max(1.0) {
                return Ok(Trajectory {
                    t0,
                    t_end: t1,
                    y_end: y,
                    steps,
                });
            }
        }

        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if h.abs() < opts.min_step {
            return Err(Error::StepSizeUnderflow { t, h });
        }
    }
    Err(Error::NoConvergence {
        iters: opts.max_steps,
        residual: (t1 - t).abs(),
    })
}

fn initial_step(y: &DVector<f64>, dy: &DVector<f64>, span: f64, opts: &IntegratorOptions) -> f64 {
    let norm_y = y.norm().max(1e-5);
    let norm_dy = dy.norm();
    let h = if norm_dy > 1e-12 {
        0.01 * norm_y / norm_dy * opts.rel_tol.powf(0.25) / 1e-2
    } else {
        1e-4 * span
    };
    h.min(span).max(opts.min_step * 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_decay() {
        let opts = IntegratorOptions::default();
        let traj = integrate(
            |y, dy| dy[0] = -y[0],
            &DVector::from_row_slice(&[1.0]),
            0.0,
            3.0,
            &opts,
        )
        .unwrap();
        assert_relative_eq!(traj.y_end[0], (-3.0f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn harmonic_oscillator_and_dense_output() {
        let opts = IntegratorOptions::default();
        let traj = integrate(
            |y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            &DVector::from_row_slice(&[1.0, 0.0]),
            0.0,
            10.0,
            &opts,
        )
        .unwrap();
        assert_relative_eq!(traj.y_end[0], 10.0f64.cos(), epsilon = 1e-9);
        assert_relative_eq!(traj.y_end[1], -10.0f64.sin(), epsilon = 1e-9);
        // Dense output against the exact solution at many interior times.
        for k in 0..200 {
            let t = 10.0 * (k as f64) / 200.0;
            let y = traj.eval(t);
            assert_relative_eq!(y[0], t.cos(), epsilon = 1e-8);
            assert_relative_eq!(y[1], -t.sin(), epsilon = 1e-8);
        }
    }

    #[test]
    fn backward_integration() {
        let opts = IntegratorOptions::default();
        let traj = integrate(
            |y, dy| dy[0] = y[0],
            &DVector::from_row_slice(&[1.0]),
            0.0,
            -2.0,
            &opts,
        )
        .unwrap();
        assert_relative_eq!(traj.y_end[0], (-2.0f64).exp(), max_relative = 1e-10);
        let mid = traj.eval(-1.0);
        assert_relative_eq!(mid[0], (-1.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn singularity_reports_underflow() {
        let opts = IntegratorOptions::default();
        // dy/dt = y^2 blows up at t = 1.
        let res = integrate(
            |y, dy| dy[0] = y[0] * y[0],
            &DVector::from_row_slice(&[1.0]),
            0.0,
            2.0,
            &opts,
        );
        assert!(res.is_err());
    }
}
