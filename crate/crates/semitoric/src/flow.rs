//! Joint Hamiltonian flows with event detection: first hits of torus-orbit
//! targets and the multi-times closing a trajectory on its Liouville torus.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{HamiltonianSystem, PeriodicAction, PhaseVector};
use crate::rk45::{integrate, IntegratorOptions, Trajectory};

const TWO_PI: f64 = std::f64::consts::TAU;

/// Numeric knobs for the flow engine.
#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Event refinement target for distance-to-orbit residuals.
    pub tol_hit: f64,
    /// Closure tolerance for flow words.
    pub tol_flow: f64,
    /// Search horizon for first hits.
    pub horizon: f64,
    /// Samples stored per circle orbit.
    pub circle_samples: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            tol_hit: 1e-10,
            tol_flow: 1e-8,
            horizon: 1e3,
            circle_samples: 512,
        }
    }
}

impl FlowOptions {
    pub fn integrator(&self) -> IntegratorOptions {
        IntegratorOptions {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            ..IntegratorOptions::default()
        }
    }
}

/// Selects the Hamiltonian sum(alpha_i f_i) to flow, a start point and a
/// duration.
#[derive(Debug, Clone)]
pub struct FlowRequest {
    pub coefficients: Vec<f64>,
    pub start: PhaseVector,
    pub duration: f64,
    pub options: FlowOptions,
}

/// A refined first-hit event.
#[derive(Debug, Clone)]
pub struct HitResult {
    pub time: f64,
    pub point: PhaseVector,
    pub residual: f64,
}

/// Right-hand side of the joint flow sum(alpha_i X_{f_i}).
pub fn joint_field<'a>(
    sys: &'a HamiltonianSystem,
    alpha: &'a [f64],
) -> impl Fn(&DVector<f64>, &mut DVector<f64>) + 'a {
    let n = sys.dof();
    move |y, dy| {
        let mut grad = DVector::zeros(2 * n);
        for (i, &a) in alpha.iter().enumerate() {
            if a != 0.0 {
                grad += a * sys.component(i).gradient(y.as_slice());
            }
        }
        for i in 0..n {
            dy[i] = -grad[n + i];
            dy[n + i] = grad[i];
        }
    }
}

/// Integrate the joint flow, returning the dense trajectory.
pub fn flow_trajectory(
    sys: &HamiltonianSystem,
    alpha: &[f64],
    start: &DVector<f64>,
    t0: f64,
    t1: f64,
    opts: &FlowOptions,
) -> Result<Trajectory> {
    if alpha.len() != sys.dof() {
        return Err(Error::DimensionMismatch {
            expected: sys.dof(),
            got: alpha.len(),
        });
    }
    integrate(joint_field(sys, alpha), start, t0, t1, &opts.integrator())
}

/// Endpoint of the requested joint flow.
pub fn flow(sys: &HamiltonianSystem, req: &FlowRequest) -> Result<PhaseVector> {
    sys.check_dim(&req.start)?;
    if !req.duration.is_finite() || req.coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("flow request"));
    }
    let traj = flow_trajectory(
        sys,
        &req.coefficients,
        req.start.coords(),
        0.0,
        req.duration,
        &req.options,
    )?;
    PhaseVector::new(traj.y_end)
}

/// Flow of a single component for the given time.
pub fn flow_component(
    sys: &HamiltonianSystem,
    comp: usize,
    start: &DVector<f64>,
    t: f64,
    opts: &FlowOptions,
) -> Result<DVector<f64>> {
    let mut alpha = vec![0.0; sys.dof()];
    alpha[comp] = 1.0;
    Ok(flow_trajectory(sys, &alpha, start, 0.0, t, opts)?.y_end)
}

/// Apply a word of component flows sequentially.
pub fn flow_word(
    sys: &HamiltonianSystem,
    times: &[(usize, f64)],
    start: &DVector<f64>,
    opts: &FlowOptions,
) -> Result<DVector<f64>> {
    let mut p = start.clone();
    for &(comp, t) in times {
        if t != 0.0 {
            p = flow_component(sys, comp, &p, t, opts)?;
        }
    }
    Ok(p)
}

/// A sampled 2-pi periodic orbit of one circle generator.
#[derive(Debug, Clone)]
struct Circle {
    comp: usize,
    traj: Trajectory,
    /// Sample points at angles 2 pi k / K.
    samples: Vec<DVector<f64>>,
}

/// The joint orbit of an anchor under the periodic-flagged components,
/// split into sampled circle factors and free-torus translation directions.
#[derive(Debug, Clone)]
pub struct OrbitChart {
    anchor: DVector<f64>,
    /// 1.0 for coordinates entering the distance, 0.0 for translation x's.
    mask: DVector<f64>,
    circle: Option<Circle>,
    translation_comps: Vec<(usize, usize)>, // (component index, x coordinate)
    diameter: f64,
}

impl OrbitChart {
    pub fn new(sys: &HamiltonianSystem, anchor: &DVector<f64>, opts: &FlowOptions) -> Result<Self> {
        let dim = sys.dim();
        let mut mask = DVector::from_element(dim, 1.0);
        let mut circle = None;
        let mut translation_comps = Vec::new();

        for idx in sys.periodic_indices() {
            match sys.periodic_action(idx).expect("periodic") {
                PeriodicAction::Translation { x_index } => {
                    mask[x_index] = 0.0;
                    translation_comps.push((idx, x_index));
                }
                PeriodicAction::Circle => {
                    if circle.is_some() {
                        return Err(Error::UnsupportedOrbit(
                            "more than one generic circle generator".into(),
                        ));
                    }
                    let traj = flow_trajectory(sys, &unit(sys.dof(), idx), anchor, 0.0, TWO_PI, opts)?;
                    let closure = (&traj.y_end - anchor).norm();
                    if closure > opts.tol_flow * (1.0 + anchor.norm()) {
                        return Err(Error::ClosureFailed {
                            residual: closure,
                            tol: opts.tol_flow * (1.0 + anchor.norm()),
                        });
                    }
                    let k = opts.circle_samples;
                    let samples = (0..k)
                        .map(|i| traj.eval(TWO_PI * i as f64 / k as f64))
                        .collect();
                    circle = Some(Circle { comp: idx, traj, samples });
                }
            }
        }

        let diameter = match &circle {
            Some(c) => {
                let mut d: f64 = 0.0;
                let k = c.samples.len();
                for i in 0..k {
                    let j = (i + k / 2) % k;
                    d = d.max(masked_dist(&mask, &c.samples[i], &c.samples[j]));
                }
                d
            }
            None => 0.0,
        };

        Ok(Self {
            anchor: anchor.clone(),
            mask,
            circle,
            translation_comps,
            diameter,
        })
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn anchor(&self) -> &DVector<f64> {
        &self.anchor
    }

    /// Distance from p to the orbit, together with the circle angle of the
    /// nearest point (0 when there is no circle factor).
    pub fn distance(&self, sys: &HamiltonianSystem, p: &DVector<f64>) -> (f64, f64) {
        match &self.circle {
            None => (masked_dist(&self.mask, p, &self.anchor), 0.0),
            Some(c) => {
                let k = c.samples.len();
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, s) in c.samples.iter().enumerate() {
                    let d = masked_dist(&self.mask, p, s);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                let phi0 = TWO_PI * best as f64 / k as f64;
                let phi = self.refine_angle(sys, c, p, phi0);
                let cp = c.traj.eval(phi);
                (masked_dist(&self.mask, p, &cp), phi)
            }
        }
    }

    /// Gauss-Newton refinement of the nearest circle angle.
    fn refine_angle(&self, sys: &HamiltonianSystem, c: &Circle, p: &DVector<f64>, phi0: f64) -> f64 {
        let alpha = unit(sys.dof(), c.comp);
        let field = joint_field(sys, &alpha);
        let mut phi = phi0;
        let dim = p.len();
        let mut vel = DVector::zeros(dim);
        for _ in 0..40 {
            let cp = c.traj.eval(phi.rem_euclid(TWO_PI));
            field(&cp, &mut vel);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..dim {
                let m = self.mask[i];
                num += m * (p[i] - cp[i]) * vel[i];
                den += m * vel[i] * vel[i];
            }
            if den == 0.0 {
                break;
            }
            let step = num / den;
            phi += step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        phi.rem_euclid(TWO_PI)
    }

    /// Nearest orbit point to p, recomputed by flowing the anchor exactly.
    pub fn nearest_point(
        &self,
        sys: &HamiltonianSystem,
        p: &DVector<f64>,
        opts: &FlowOptions,
    ) -> Result<(DVector<f64>, f64)> {
        let (_, phi) = self.distance(sys, p);
        let mut point = match &self.circle {
            Some(c) => flow_component(sys, c.comp, &self.anchor, phi, opts)?,
            None => self.anchor.clone(),
        };
        // Slide along translation directions to match p.
        for &(_, x_index) in &self.translation_comps {
            point[x_index] = p[x_index];
        }
        Ok((point, phi))
    }

    fn masked_residual(&self, p: &DVector<f64>, q: &DVector<f64>) -> f64 {
        masked_dist(&self.mask, p, q)
    }
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn masked_dist(mask: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = mask[i] * (a[i] - b[i]);
        s += d * d;
    }
    s.sqrt()
}

/// First hit of the flow of `f_generator` from `start` with the joint orbit
/// of `anchor` under the periodic-flagged components.
///
/// `t_min` excludes the trivial hit at departure; when `None`, the exclusion
/// window ends the first time the trajectory leaves a ball of radius
/// 0.1 x (orbit diameter) around the anchor orbit.
pub fn first_hit_torus_orbit(
    sys: &HamiltonianSystem,
    generator: usize,
    start: &DVector<f64>,
    anchor: &DVector<f64>,
    t_min: Option<f64>,
    opts: &FlowOptions,
) -> Result<HitResult> {
    let chart = OrbitChart::new(sys, anchor, opts)?;
    first_hit_with_chart(sys, generator, start, &chart, t_min, opts)
}

pub fn first_hit_with_chart(
    sys: &HamiltonianSystem,
    generator: usize,
    start: &DVector<f64>,
    chart: &OrbitChart,
    t_min: Option<f64>,
    opts: &FlowOptions,
) -> Result<HitResult> {
    let alpha = unit(sys.dof(), generator);
    let departure_radius = (0.1 * chart.diameter()).max(1e-6);
    let capture = (0.5 * chart.diameter()).max(1e-3);

    let chunk = 10.0_f64.min(opts.horizon);
    let mut t_base = 0.0;
    let mut y = start.clone();
    let mut departed = t_min.is_some();
    let mut prev: Option<(f64, f64)> = None; // (t, D)
    let mut prev2: Option<(f64, f64)> = None;

    while t_base < opts.horizon {
        let t_stop = (t_base + chunk).min(opts.horizon);
        let traj = flow_trajectory(sys, &alpha, &y, t_base, t_stop, opts)?;

        // Sample distance on a refinement of the accepted steps.
        let mut times = Vec::new();
        for s in traj.steps() {
            for frac in [0.0, 0.25, 0.5, 0.75] {
                times.push(s.t0 + frac * s.h);
            }
        }
        times.push(t_stop);

        for &t in &times {
            let p = traj.eval(t);
            let (d, _) = chart.distance(sys, &p);
            if !departed {
                if t >= t_min.unwrap_or(f64::INFINITY) || d > departure_radius {
                    departed = true;
                }
            } else if let (Some((tm, dm)), Some((tp2, dp2))) = (prev, prev2) {
                // local minimum of D at tm below the capture radius
                if dm < dp2 && dm <= d && dm < capture && tm >= t_min.unwrap_or(0.0) {
                    if let Some(hit) = refine_hit(sys, chart, &traj, tp2.min(tm), t.max(tm), opts) {
                        if hit.residual < opts.tol_hit && hit.time > 0.0 {
                            return Ok(hit);
                        }
                    }
                }
            }
            prev2 = prev;
            prev = Some((t, d));
        }

        t_base = t_stop;
        y = traj.y_end;
    }
    Err(Error::HorizonExceeded { horizon: opts.horizon })
}

/// Refine a bracketed distance minimum to a crossing of the orbit.
fn refine_hit(
    sys: &HamiltonianSystem,
    chart: &OrbitChart,
    traj: &Trajectory,
    t_lo: f64,
    t_hi: f64,
    opts: &FlowOptions,
) -> Option<HitResult> {
    // Golden-section on squared distance.
    let golden = 0.381_966_011_250_105_2_f64;
    let mut a = t_lo;
    let mut b = t_hi;
    let d2 = |t: f64| {
        let p = traj.eval(t);
        let (d, _) = chart.distance(sys, &p);
        d * d
    };
    let mut x1 = a + golden * (b - a);
    let mut x2 = b - golden * (b - a);
    let mut f1 = d2(x1);
    let mut f2 = d2(x2);
    for _ in 0..60 {
        if b - a < 1e-9 {
            break;
        }
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + golden * (b - a);
            f1 = d2(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = b - golden * (b - a);
            f2 = d2(x2);
        }
    }
    let t_star = 0.5 * (a + b);

    // Polish by root-finding on the signed normal displacement. The normal
    // direction is the trajectory velocity (finite differences of the dense
    // output) with its orbit-tangent part removed.
    let p_star = traj.eval(t_star);
    let (c_star, _) = chart.nearest_point(sys, &p_star, opts).ok()?;
    let h = 1e-6;
    let vel = (traj.eval(t_star + h) - traj.eval(t_star - h)) / (2.0 * h);
    let mut normal = vel.clone();
    // remove orbit tangent directions
    if let Some(c) = &chart.circle {
        let alpha = unit(sys.dof(), c.comp);
        let jf = joint_field(sys, &alpha);
        let mut tangent = DVector::zeros(p_star.len());
        jf(&c_star, &mut tangent);
        let t_norm = tangent.norm();
        if t_norm > 0.0 {
            let tangent = tangent / t_norm;
            let proj = normal.dot(&tangent);
            normal -= proj * tangent;
        }
    }
    for i in 0..normal.len() {
        normal[i] *= chart.mask[i];
    }
    let n_norm = normal.norm();
    if n_norm == 0.0 {
        return None;
    }
    let normal = normal / n_norm;

    let signed = |t: f64| -> Option<f64> {
        let p = traj.eval(t);
        let (c, _) = chart.nearest_point(sys, &p, opts).ok()?;
        let mut s = 0.0;
        for i in 0..p.len() {
            s += chart.mask[i] * (p[i] - c[i]) * normal[i];
        }
        Some(s)
    };

    // Secant iteration from a small symmetric bracket around t_star.
    let mut ta = t_star - 1e-5;
    let mut tb = t_star + 1e-5;
    let mut sa = signed(ta)?;
    let mut sb = signed(tb)?;
    for _ in 0..60 {
        if (sb - sa).abs() < 1e-300 {
            break;
        }
        let tn = tb - sb * (tb - ta) / (sb - sa);
        if !tn.is_finite() {
            break;
        }
        ta = tb;
        sa = sb;
        tb = tn;
        sb = signed(tn)?;
        if (tb - ta).abs() < 1e-14 * tb.abs().max(1.0) {
            break;
        }
    }
    let t_hit = tb;
    let p_hit = traj.eval(t_hit);
    let (d, _) = chart.distance(sys, &p_hit);
    Some(HitResult {
        time: t_hit,
        point: PhaseVector::new(p_hit).ok()?,
        residual: d,
    })
}

/// Multi-time (per periodic component, in order) mapping `from` to `to`
/// with the periodic flows, each wrapped to [0, 2 pi).
pub fn close_orbit_times(
    sys: &HamiltonianSystem,
    from: &DVector<f64>,
    to: &DVector<f64>,
    opts: &FlowOptions,
) -> Result<Vec<(usize, f64)>> {
    let chart = OrbitChart::new(sys, from, opts)?;
    let mut times: Vec<(usize, f64)> = Vec::new();

    // Initial guesses: circle angle by nearest-point search, translations by
    // coordinate differences (flow of f = xi translates x at rate -1).
    let mut circle_time = None;
    if let Some(c) = &chart.circle {
        let (_, phi) = chart.distance(sys, to);
        circle_time = Some((c.comp, phi));
    }
    let mut all: Vec<(usize, f64)> = Vec::new();
    for idx in sys.periodic_indices() {
        match sys.periodic_action(idx).expect("periodic") {
            PeriodicAction::Circle => {
                let (comp, phi) = circle_time.ok_or_else(|| {
                    Error::UnsupportedOrbit("circle chart missing".into())
                })?;
                debug_assert_eq!(comp, idx);
                all.push((idx, phi));
            }
            PeriodicAction::Translation { x_index } => {
                all.push((idx, from[x_index] - to[x_index]));
            }
        }
    }

    // Gauss-Newton polish of the joint word.
    let dim = sys.dim();
    for _ in 0..8 {
        let end = flow_word(sys, &all, from, opts)?;
        let res = &end - to;
        if res.norm() < 1e-13 * (1.0 + to.norm()) {
            break;
        }
        let mut jac = DMatrix::zeros(dim, all.len());
        for (col, &(comp, _)) in all.iter().enumerate() {
            let alpha = unit(sys.dof(), comp);
            let jf = joint_field(sys, &alpha);
            let mut v = DVector::zeros(dim);
            jf(&end, &mut v);
            jac.set_column(col, &v);
        }
        let svd = jac.svd(true, true);
        let delta = svd
            .solve(&res, 1e-12)
            .map_err(|_| Error::NoConvergence { iters: 8, residual: res.norm() })?;
        for (k, d) in delta.iter().enumerate() {
            all[k].1 -= d;
        }
    }
    let end = flow_word(sys, &all, from, opts)?;
    let residual = chart.masked_residual(&end, to).max((&end - to).norm());
    if residual > opts.tol_flow * (1.0 + to.norm()) {
        return Err(Error::NotOnOrbit { distance: residual });
    }

    for (comp, t) in all {
        let wrapped = match sys.periodic_action(comp) {
            Some(PeriodicAction::Circle) => t.rem_euclid(TWO_PI),
            _ => t,
        };
        times.push((comp, wrapped));
    }
    Ok(times)
}
