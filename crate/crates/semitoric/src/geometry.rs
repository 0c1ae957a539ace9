//! Symplectic linear algebra and calculus primitives on standard symplectic R^2n.
//!
//! Coordinates are ordered `(x_1, ..., x_n, xi_1, ..., xi_n)`. The Hamiltonian
//! vector field convention is locked by the focus-focus model flows:
//! `dx_i/dt = -df/dxi_i`, `dxi_i/dt = +df/dx_i`, so that the flow of
//! `f1 = x1 xi1 + x2 xi2` is `(z1, z2) -> (e^{-t} z1, e^t z2)` with
//! `z1 = x1 + i x2`, `z2 = xi1 + i xi2`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Step scale for first-order central differences: cbrt(machine epsilon).
pub fn fd_step(coord: f64) -> f64 {
    f64::EPSILON.cbrt() * coord.abs().max(1.0)
}

/// Step scale for second central differences.
fn fd_step2(coord: f64) -> f64 {
    f64::EPSILON.powf(0.25) * coord.abs().max(1.0)
}

/// A point of phase space R^2n.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVector {
    coords: DVector<f64>,
}

impl PhaseVector {
    pub fn new(coords: DVector<f64>) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::DimensionMismatch {
                expected: coords.len() + 1,
                got: coords.len(),
            });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("phase vector"));
        }
        Ok(Self { coords })
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(DVector::from_row_slice(coords))
    }

    /// Degrees of freedom n (half the ambient dimension).
    pub fn dof(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coords.as_slice()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.coords[i]
    }

    pub fn xi(&self, i: usize) -> f64 {
        self.coords[self.dof() + i]
    }
}

impl std::ops::Deref for PhaseVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.coords
    }
}

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> DVector<f64> + Send + Sync;
type HessFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// A smooth function of phase space, given by an evaluation callback plus
/// optional analytic derivatives. Central differences are the fallback.
#[derive(Clone)]
pub struct ScalarField {
    eval: Arc<EvalFn>,
    grad: Option<Arc<GradFn>>,
    hess: Option<Arc<HessFn>>,
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarField")
            .field("analytic_gradient", &self.grad.is_some())
            .field("analytic_hessian", &self.hess.is_some())
            .finish()
    }
}

impl ScalarField {
    pub fn from_eval<F>(eval: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(eval),
            grad: None,
            hess: None,
        }
    }

    pub fn with_gradient<G>(mut self, grad: G) -> Self
    where
        G: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_hessian<H>(mut self, hess: H) -> Self
    where
        H: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.hess = Some(Arc::new(hess));
        self
    }

    pub fn constant(c: f64) -> Self {
        Self::from_eval(move |_| c)
            .with_gradient(move |p| DVector::zeros(p.len()))
            .with_hessian(move |p| DMatrix::zeros(p.len(), p.len()))
    }

    /// The coordinate function with the given index in `(x..., xi...)` order.
    pub fn coordinate(index: usize) -> Self {
        Self::from_eval(move |p| p[index]).with_gradient(move |p| {
            let mut g = DVector::zeros(p.len());
            g[index] = 1.0;
            g
        })
    }

    pub fn evaluate(&self, p: &[f64]) -> f64 {
        (self.eval)(p)
    }

    pub fn gradient(&self, p: &[f64]) -> DVector<f64> {
        match &self.grad {
            Some(g) => g(p),
            None => self.fd_gradient(p),
        }
    }

    fn fd_gradient(&self, p: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(p.len());
        let mut q = p.to_vec();
        for i in 0..p.len() {
            let h = fd_step(p[i]);
            q[i] = p[i] + h;
            let fp = (self.eval)(&q);
            q[i] = p[i] - h;
            let fm = (self.eval)(&q);
            q[i] = p[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    pub fn hessian(&self, p: &[f64]) -> DMatrix<f64> {
        match &self.hess {
            Some(h) => h(p),
            None if self.grad.is_some() => self.fd_hessian_of_gradient(p),
            None => self.fd_hessian_of_values(p),
        }
    }

    /// Central differences of the analytic gradient, then symmetrized.
    fn fd_hessian_of_gradient(&self, p: &[f64]) -> DMatrix<f64> {
        let dim = p.len();
        let grad = self.grad.as_ref().expect("analytic gradient");
        let mut h_mat = DMatrix::zeros(dim, dim);
        let mut q = p.to_vec();
        for i in 0..dim {
            let h = fd_step(p[i]);
            q[i] = p[i] + h;
            let gp = grad(&q);
            q[i] = p[i] - h;
            let gm = grad(&q);
            q[i] = p[i];
            let col = (gp - gm) / (2.0 * h);
            h_mat.set_column(i, &col);
        }
        symmetrize(&h_mat)
    }

    fn fd_hessian_of_values(&self, p: &[f64]) -> DMatrix<f64> {
        let dim = p.len();
        let f0 = (self.eval)(p);
        let mut h_mat = DMatrix::zeros(dim, dim);
        let mut q = p.to_vec();
        for i in 0..dim {
            let hi = fd_step2(p[i]);
            q[i] = p[i] + hi;
            let fpp = (self.eval)(&q);
            q[i] = p[i] - hi;
            let fmm = (self.eval)(&q);
            q[i] = p[i];
            h_mat[(i, i)] = (fpp - 2.0 * f0 + fmm) / (hi * hi);
            for j in (i + 1)..dim {
                let hj = fd_step2(p[j]);
                q[i] = p[i] + hi;
                q[j] = p[j] + hj;
                let fpp = (self.eval)(&q);
                q[j] = p[j] - hj;
                let fpm = (self.eval)(&q);
                q[i] = p[i] - hi;
                let fmm = (self.eval)(&q);
                q[j] = p[j] + hj;
                let fmp = (self.eval)(&q);
                q[i] = p[i];
                q[j] = p[j];
                let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
                h_mat[(i, j)] = v;
                h_mat[(j, i)] = v;
            }
        }
        h_mat
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// How a periodic-flagged component acts on phase space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeriodicAction {
    /// Generic 2-pi periodic flow; its orbits are closed curves found by
    /// integration.
    Circle,
    /// Free-torus factor modeled as f = xi_j on a plane Darboux chart; the
    /// flow translates the conjugate coordinate `x` with the given index.
    /// Its 2-pi periodicity is asserted, not discovered.
    Translation { x_index: usize },
}

/// A component together with its role in the torus action.
#[derive(Debug, Clone)]
pub struct Component {
    pub field: ScalarField,
    pub periodic: Option<PeriodicAction>,
}

/// n Poisson-commuting functions on R^2n with the standard symplectic form.
#[derive(Debug, Clone)]
pub struct HamiltonianSystem {
    dof: usize,
    components: Vec<Component>,
}

impl HamiltonianSystem {
    pub fn new(dof: usize, components: Vec<Component>) -> Result<Self> {
        if components.len() != dof {
            return Err(Error::DimensionMismatch {
                expected: dof,
                got: components.len(),
            });
        }
        Ok(Self { dof, components })
    }

    /// Degrees of freedom n.
    pub fn dof(&self) -> usize {
        self.dof
    }

    /// Ambient dimension 2n.
    pub fn dim(&self) -> usize {
        2 * self.dof
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &ScalarField {
        &self.components[i].field
    }

    pub fn periodic_action(&self, i: usize) -> Option<PeriodicAction> {
        self.components[i].periodic
    }

    /// Indices of the periodic-flagged components.
    pub fn periodic_indices(&self) -> Vec<usize> {
        self.components
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.periodic.map(|_| i))
            .collect()
    }

    pub fn check_dim(&self, p: &PhaseVector) -> Result<()> {
        if p.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: p.dim(),
            });
        }
        Ok(())
    }

    /// Value of the moment map F at p.
    pub fn moment_map(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dof, self.components.iter().map(|c| c.field.evaluate(p)))
    }

    /// n x 2n matrix whose rows are the component gradients at p.
    pub fn moment_jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.dof, 2 * self.dof);
        for (i, c) in self.components.iter().enumerate() {
            let g = c.field.gradient(p);
            jac.row_mut(i).copy_from(&g.transpose());
        }
        jac
    }
}

/// Poisson bracket {f, g} = sum_i (df/dx_i dg/dxi_i - df/dxi_i dg/dx_i).
///
/// With the locked vector-field convention this satisfies
/// `L_{X_f} g = {f, g}`.
pub fn poisson_bracket(f: &ScalarField, g: &ScalarField, p: &PhaseVector) -> f64 {
    let n = p.dof();
    let gf = f.gradient(p.as_slice());
    let gg = g.gradient(p.as_slice());
    let mut sum = 0.0;
    for i in 0..n {
        sum += gf[i] * gg[n + i] - gf[n + i] * gg[i];
    }
    sum
}

/// Hamiltonian vector field X_f at p: (-df/dxi, +df/dx).
pub fn ham_vector_field(f: &ScalarField, p: &PhaseVector) -> Result<DVector<f64>> {
    let g = f.gradient(p.as_slice());
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(ham_field_from_gradient(&g))
}

/// Rotate a gradient into the Hamiltonian vector field, in place logic shared
/// with the flow engine.
pub fn ham_field_from_gradient(grad: &DVector<f64>) -> DVector<f64> {
    let n = grad.len() / 2;
    let mut x = DVector::zeros(grad.len());
    for i in 0..n {
        x[i] = -grad[n + i];
        x[n + i] = grad[i];
    }
    x
}

/// Symmetric Hessian matrix of f at p.
pub fn hessian_at(f: &ScalarField, p: &PhaseVector) -> Result<DMatrix<f64>> {
    let h = f.hessian(p.as_slice());
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hessian"));
    }
    Ok(symmetrize(&h))
}

/// Linearization matrix of the Hamiltonian field of a quadratic form with
/// Hessian `hess`: rows x get -H_xi, rows xi get +H_x.
pub fn linearized_field(hess: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = hess.nrows();
    let n = dim / 2;
    let mut l = DMatrix::zeros(dim, dim);
    for col in 0..dim {
        for i in 0..n {
            l[(i, col)] = -hess[(n + i, col)];
            l[(n + i, col)] = hess[(i, col)];
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p4(c: [f64; 4]) -> PhaseVector {
        PhaseVector::from_slice(&c).unwrap()
    }

    /// f1 of the focus-focus block on R^4.
    fn ff1() -> ScalarField {
        ScalarField::from_eval(|p| p[0] * p[2] + p[1] * p[3])
    }

    /// f2 of the focus-focus block on R^4.
    fn ff2() -> ScalarField {
        ScalarField::from_eval(|p| p[0] * p[3] - p[1] * p[2])
    }

    #[test]
    fn phase_vector_checks() {
        assert!(PhaseVector::from_slice(&[1.0, 2.0, 3.0]).is_err());
        assert!(PhaseVector::from_slice(&[1.0, f64::NAN]).is_err());
        assert_eq!(p4([1.0, 2.0, 3.0, 4.0]).dof(), 2);
    }

    #[test]
    fn bracket_of_ff_block_components_vanishes() {
        let f = ff1();
        let g = ff2();
        let p = p4([0.3, -1.2, 0.7, 2.1]);
        assert_relative_eq!(poisson_bracket(&f, &g, &p), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn bracket_antisymmetry() {
        let f = ScalarField::from_eval(|p| p[0] * p[0] * p[3] + p[1]);
        let g = ScalarField::from_eval(|p| p[2].sin() + p[0] * p[1]);
        let p = p4([0.4, -0.3, 0.9, 0.2]);
        let fg = poisson_bracket(&f, &g, &p);
        let gf = poisson_bracket(&g, &f, &p);
        assert_relative_eq!(fg, -gf, epsilon = 1e-9);
        assert_relative_eq!(poisson_bracket(&f, &f, &p), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn bracket_canonical_pair() {
        // {x1, xi1} = +1 under the locked sign convention.
        let x1 = ScalarField::coordinate(0);
        let xi1 = ScalarField::coordinate(2);
        let p = p4([0.5, 0.1, -0.2, 0.9]);
        assert_relative_eq!(poisson_bracket(&x1, &xi1, &p), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ff1_field_matches_locked_convention() {
        // X_{f1} at (1,0,0,0): x1' = -x1 so that z1(t) = e^{-t}.
        let f = ff1();
        let p = p4([1.0, 0.0, 0.0, 0.0]);
        let x = ham_vector_field(&f, &p).unwrap();
        assert_relative_eq!(x[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(x[2], 0.0, epsilon = 1e-9);
        assert_relative_eq!(x[3], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_field_has_zero_flow() {
        let f = ScalarField::constant(3.5);
        let p = p4([1.0, 2.0, 3.0, 4.0]);
        let x = ham_vector_field(&f, &p).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn xi_translates_x() {
        // f = xi1 -> dx1/dt = -1 (translation up to the sign convention).
        let f = ScalarField::coordinate(2);
        let p = p4([0.0, 0.0, 0.0, 0.0]);
        let x = ham_vector_field(&f, &p).unwrap();
        assert_relative_eq!(x[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hessian_of_elliptic_block() {
        let e = ScalarField::from_eval(|p| p[0] * p[0] + p[1] * p[1]);
        let p = PhaseVector::from_slice(&[0.0, 0.0]).unwrap();
        let h = hessian_at(&e, &p).unwrap();
        assert_relative_eq!(h[(0, 0)], 2.0, epsilon = 1e-6);
        assert_relative_eq!(h[(1, 1)], 2.0, epsilon = 1e-6);
        assert_relative_eq!(h[(0, 1)], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn hessian_of_ff1_pairs_x_with_xi() {
        let f = ff1();
        let p = p4([0.0, 0.0, 0.0, 0.0]);
        let h = hessian_at(&f, &p).unwrap();
        assert_relative_eq!(h[(0, 2)], 1.0, epsilon = 1e-6);
        assert_relative_eq!(h[(1, 3)], 1.0, epsilon = 1e-6);
        assert_relative_eq!(h[(0, 0)], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn fd_hessian_matches_analytic_on_random_cubic() {
        // f = x1^3 + x1 x2 xi1 + xi2^2 xi1
        let f = ScalarField::from_eval(|p| {
            p[0] * p[0] * p[0] + p[0] * p[1] * p[2] + p[3] * p[3] * p[2]
        });
        let p = p4([0.7, -0.4, 0.3, 1.1]);
        let h = hessian_at(&f, &p).unwrap();
        assert_relative_eq!(h[(0, 0)], 6.0 * 0.7, epsilon = 1e-4);
        assert_relative_eq!(h[(0, 1)], 0.3, epsilon = 1e-4);
        assert_relative_eq!(h[(2, 3)], 2.0 * 1.1, epsilon = 1e-4);
        assert_relative_eq!(h[(3, 3)], 2.0 * 0.3, epsilon = 1e-4);
    }

    #[test]
    fn gradient_fallback_matches_analytic() {
        let f = ScalarField::from_eval(|p| (p[0] * p[3]).sin() + p[1] * p[2])
            .with_gradient(|p| {
                DVector::from_row_slice(&[
                    p[3] * (p[0] * p[3]).cos(),
                    p[2],
                    p[1],
                    p[0] * (p[0] * p[3]).cos(),
                ])
            });
        let fd_only = ScalarField::from_eval(|p| (p[0] * p[3]).sin() + p[1] * p[2]);
        let p = [0.3, 0.8, -0.5, 1.2];
        let ga = f.gradient(&p);
        let gn = fd_only.gradient(&p);
        for i in 0..4 {
            assert_relative_eq!(ga[i], gn[i], epsilon = 1e-6, max_relative = 1e-6);
        }
    }
}
