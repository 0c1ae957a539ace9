//! Period lattice of a regular Liouville torus: the first-return row tau of
//! the non-periodic generator plus one 2-pi row per periodic component.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::{
    close_orbit_times, first_hit_with_chart, flow_word, FlowOptions, OrbitChart,
};
use crate::geometry::{HamiltonianSystem, PhaseVector};

const TWO_PI: f64 = std::f64::consts::TAU;

/// Leaf projection tolerance.
pub const TOL_LEAF: f64 = 1e-10;

/// Newton-project a guess onto the leaf F^{-1}(v) with minimum-norm updates.
pub fn project_to_leaf(
    sys: &HamiltonianSystem,
    guess: &PhaseVector,
    v: &DVector<f64>,
) -> Result<PhaseVector> {
    sys.check_dim(guess)?;
    let n = sys.dof();
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    let mut p = guess.coords().clone();
    let max_iters = 60;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let r = sys.moment_map(p.as_slice()) - v;
        residual = r.norm();
        if residual < TOL_LEAF * (1.0 + v.norm()) {
            let rank = crate::critical::rank_df(sys, p.as_slice());
            if rank != n {
                return Err(Error::NotRegular { rank, expected: n });
            }
            return PhaseVector::new(p);
        }
        let jac = sys.moment_jacobian(p.as_slice());
        let svd = jac.svd(true, true);
        if svd.singular_values.min() < 1e-12 * (1.0 + svd.singular_values.max()) {
            return Err(Error::NotRegular {
                rank: crate::critical::rank_df(sys, p.as_slice()),
                expected: n,
            });
        }
        // SVD least-squares of an underdetermined system is the minimum-norm
        // update, which keeps the iteration on the same torus neighborhood.
        let delta = svd.solve(&r, 1e-13).map_err(|_| Error::NoConvergence {
            iters: max_iters,
            residual,
        })?;
        p -= delta;
    }
    Err(Error::NoConvergence {
        iters: max_iters,
        residual,
    })
}

/// Basis of the period lattice at one regular value.
#[derive(Debug, Clone)]
pub struct PeriodBasis {
    pub value: DVector<f64>,
    pub anchor: PhaseVector,
    /// n x n matrix of flow times; row 0 is tau, the remaining rows are
    /// 2 pi times the unit rows of the periodic components.
    pub rows: DMatrix<f64>,
    /// Distance back to the anchor after flowing the full tau word.
    pub closure_residual: f64,
}

impl PeriodBasis {
    pub fn tau(&self) -> DVector<f64> {
        self.rows.row(0).transpose()
    }
}

/// Build the period basis on the leaf through `guess` at value v.
pub fn build_period_basis(
    sys: &HamiltonianSystem,
    v: &DVector<f64>,
    guess: &PhaseVector,
    opts: &FlowOptions,
) -> Result<PeriodBasis> {
    let n = sys.dof();
    let periodic = sys.periodic_indices();
    if periodic.len() != n - 1 || periodic.contains(&0) {
        return Err(Error::UnsupportedOrbit(format!(
            "need components 1..{} periodic and component 0 aperiodic",
            n - 1
        )));
    }

    let anchor = project_to_leaf(sys, guess, v)?;
    let chart = OrbitChart::new(sys, anchor.coords(), opts)?;
    let hit = first_hit_with_chart(sys, 0, anchor.coords(), &chart, None, opts)?;
    let back = close_orbit_times(sys, hit.point.coords(), anchor.coords(), opts)?;

    let mut tau = DVector::zeros(n);
    tau[0] = hit.time;
    for &(comp, t) in &back {
        tau[comp] = t;
    }

    // Re-flow the whole word and measure the closure defect.
    let mut word: Vec<(usize, f64)> = vec![(0, tau[0])];
    word.extend(back.iter().copied());
    let end = flow_word(sys, &word, anchor.coords(), opts)?;
    let closure_residual = (end - anchor.coords()).norm();
    if closure_residual > opts.tol_flow * (1.0 + anchor.coords().norm()) {
        return Err(Error::ClosureFailed {
            residual: closure_residual,
            tol: opts.tol_flow * (1.0 + anchor.coords().norm()),
        });
    }

    let mut rows = DMatrix::zeros(n, n);
    rows.row_mut(0).copy_from(&tau.transpose());
    for (r, &comp) in periodic.iter().enumerate() {
        rows[(r + 1, comp)] = TWO_PI;
    }

    Ok(PeriodBasis {
        value: v.clone(),
        anchor,
        rows,
        closure_residual,
    })
}

/// First-return time predicted by the focus-focus normal form with cutoff
/// radius eps: tau_1 + i tau_2 = ln(eps^2) - ln(conj w), principal branch.
pub fn inside_model_return(w: Complex<f64>, eps: f64) -> Result<Complex<f64>> {
    if w.norm() == 0.0 {
        return Err(Error::CriticalValue);
    }
    Ok(Complex::new(2.0 * eps.ln(), 0.0) - w.conj().ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical::ff_normalized_system;
    use crate::models::{champagne_bottle, product_with_free_torus};
    use approx::assert_relative_eq;

    fn guess4() -> PhaseVector {
        PhaseVector::from_slice(&[0.9, 0.0, 0.3, 0.1]).unwrap()
    }

    #[test]
    fn projection_lands_on_leaf() {
        let sys = champagne_bottle();
        let v = DVector::from_row_slice(&[0.05, 0.02]);
        let p = project_to_leaf(&sys, &guess4(), &v).unwrap();
        let f = sys.moment_map(p.as_slice());
        assert!((f - &v).norm() < 1e-9);
    }

    #[test]
    fn projection_at_critical_value_lands_on_critical_circle() {
        // v = (-1/4, 0) is the elliptic critical value of the champagne
        // bottle; its fiber is the bottom circle r = 1/sqrt(2), xi = 0. The
        // residual is quadratic in the distance, so Newton either reports the
        // rank defect or stops within its square-root neighborhood.
        let sys = champagne_bottle();
        let v = DVector::from_row_slice(&[-0.25, 0.0]);
        match project_to_leaf(&sys, &guess4(), &v) {
            Err(_) => {}
            Ok(p) => {
                let r = (p.x(0).powi(2) + p.x(1).powi(2)).sqrt();
                let xi = (p.xi(0).powi(2) + p.xi(1).powi(2)).sqrt();
                assert!((r - 1.0 / 2.0f64.sqrt()).abs() < 1e-3, "r = {r}");
                assert!(xi < 1e-3, "xi = {xi}");
            }
        }
    }

    #[test]
    fn period_basis_closes_and_has_lattice_shape() {
        let sys = champagne_bottle();
        let opts = FlowOptions::default();
        let v = DVector::from_row_slice(&[0.05, 0.02]);
        let basis = build_period_basis(&sys, &v, &guess4(), &opts).unwrap();
        assert!(basis.closure_residual < 1e-8, "closure {}", basis.closure_residual);
        assert_eq!(basis.rows.nrows(), 2);
        assert_relative_eq!(basis.rows[(1, 0)], 0.0);
        assert_relative_eq!(basis.rows[(1, 1)], TWO_PI);
        assert!(basis.rows[(0, 0)] > 0.0);
        assert!(basis.rows[(0, 1)] >= 0.0 && basis.rows[(0, 1)] < TWO_PI);
    }

    #[test]
    fn tau1_is_even_in_the_angular_momentum() {
        let sys = champagne_bottle();
        let opts = FlowOptions::default();
        let vp = DVector::from_row_slice(&[0.05, 0.02]);
        let vm = DVector::from_row_slice(&[0.05, -0.02]);
        let bp = build_period_basis(&sys, &vp, &guess4(), &opts).unwrap();
        let bm = build_period_basis(&sys, &vm, &guess4(), &opts).unwrap();
        assert_relative_eq!(bp.rows[(0, 0)], bm.rows[(0, 0)], epsilon = 1e-7);
    }

    #[test]
    fn basis_in_free_torus_product_adds_trivial_row() {
        let base = champagne_bottle();
        let sys = product_with_free_torus(&base, 1);
        let opts = FlowOptions::default();
        let v = DVector::from_row_slice(&[0.05, 0.02, 0.4]);
        let guess = PhaseVector::from_slice(&[0.9, 0.0, 0.2, 0.3, 0.1, 0.4]).unwrap();
        let basis = build_period_basis(&sys, &v, &guess, &opts).unwrap();
        assert_eq!(basis.rows.nrows(), 3);
        // base tau repeats, the new row is 2 pi e_3
        let vb = DVector::from_row_slice(&[0.05, 0.02]);
        let gb = guess4();
        let bb = build_period_basis(&base, &vb, &gb, &opts).unwrap();
        assert_relative_eq!(basis.rows[(0, 0)], bb.rows[(0, 0)], epsilon = 1e-7);
        assert_relative_eq!(basis.rows[(2, 2)], TWO_PI);
        // the first-return word does not involve the free factor
        assert!(basis.rows[(0, 2)].abs() < 1e-7 || (basis.rows[(0, 2)] - TWO_PI).abs() < 1e-7);
    }

    #[test]
    fn normalized_tau_approaches_model_formula() {
        // On the linearly normalized champagne bottle, tau(w) should differ
        // from ln(eps^2) - ln(conj w) only by a smooth (bounded) remainder;
        // compare the log-divergent parts at two small |w|.
        let sys = champagne_bottle();
        let origin = PhaseVector::from_slice(&[0.0; 4]).unwrap();
        let (norm_sys, _) = ff_normalized_system(&sys, &origin).unwrap();
        let opts = FlowOptions::default();

        let mut sigma1 = Vec::new();
        for &r in &[0.08, 0.04, 0.02, 0.01, 0.005] {
            let v = DVector::from_row_slice(&[r, 0.0]);
            let b = build_period_basis(&norm_sys, &v, &guess4(), &opts).unwrap();
            let w = Complex::new(v[0], v[1]);
            // tau_1 + ln|w| stays bounded as w -> 0 and its dyadic first
            // differences settle toward a limit; full smoothness needs the
            // quadratic value-map calibration on top of this.
            sigma1.push(b.rows[(0, 0)] + w.norm().ln());
        }
        for &s in &sigma1 {
            assert!(s.abs() < 10.0, "sigma1 unbounded: {sigma1:?}");
        }
        let d: Vec<f64> = sigma1.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        assert!(d[3] < d[0], "first differences not settling: {d:?}");
        assert!(d[3] < 0.05, "first differences not settling: {d:?}");
    }

    #[test]
    fn model_return_formula() {
        let w = Complex::new(0.03, 0.01);
        let eps = 1.0;
        let t = inside_model_return(w, eps).unwrap();
        assert_relative_eq!(t.re, -w.norm().ln(), epsilon = 1e-12);
        assert_relative_eq!(t.im, w.arg(), epsilon = 1e-12);
        assert!(inside_model_return(Complex::new(0.0, 0.0), eps).is_err());
    }
}
