//! Built-in systems: Williamson block models, the champagne-bottle
//! focus-focus benchmark, free-torus products and moment-map
//! reparametrizations.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Component, HamiltonianSystem, PeriodicAction, ScalarField};

/// Condition-number ceiling for reparametrization jacobians.
pub const COND_MAX: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Elliptic,
    Hyperbolic,
    FocusFocus,
    Transverse,
}

impl BlockKind {
    /// Degrees of freedom consumed by one block of this kind.
    pub fn dof(self) -> usize {
        match self {
            BlockKind::FocusFocus => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub multiplicity: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, multiplicity: usize) -> Self {
        Self { kind, multiplicity }
    }
}

/// Elliptic component e = x^2 + xi^2 on the given degree of freedom.
fn elliptic_field(n: usize, a: usize) -> ScalarField {
    ScalarField::from_eval(move |p| p[a] * p[a] + p[n + a] * p[n + a])
        .with_gradient(move |p| {
            let mut g = DVector::zeros(p.len());
            g[a] = 2.0 * p[a];
            g[n + a] = 2.0 * p[n + a];
            g
        })
        .with_hessian(move |p| {
            let mut h = DMatrix::zeros(p.len(), p.len());
            h[(a, a)] = 2.0;
            h[(n + a, n + a)] = 2.0;
            h
        })
}

/// Hyperbolic component h = x xi on the given degree of freedom.
fn hyperbolic_field(n: usize, a: usize) -> ScalarField {
    ScalarField::from_eval(move |p| p[a] * p[n + a])
        .with_gradient(move |p| {
            let mut g = DVector::zeros(p.len());
            g[a] = p[n + a];
            g[n + a] = p[a];
            g
        })
        .with_hessian(move |p| {
            let mut h = DMatrix::zeros(p.len(), p.len());
            h[(a, n + a)] = 1.0;
            h[(n + a, a)] = 1.0;
            h
        })
}

/// Focus-focus pair (f1, f2) on degrees of freedom (a, b).
fn focus_focus_fields(n: usize, a: usize, b: usize) -> (ScalarField, ScalarField) {
    let f1 = ScalarField::from_eval(move |p| p[a] * p[n + a] + p[b] * p[n + b])
        .with_gradient(move |p| {
            let mut g = DVector::zeros(p.len());
            g[a] = p[n + a];
            g[b] = p[n + b];
            g[n + a] = p[a];
            g[n + b] = p[b];
            g
        })
        .with_hessian(move |p| {
            let mut h = DMatrix::zeros(p.len(), p.len());
            h[(a, n + a)] = 1.0;
            h[(n + a, a)] = 1.0;
            h[(b, n + b)] = 1.0;
            h[(n + b, b)] = 1.0;
            h
        });
    let f2 = ScalarField::from_eval(move |p| p[a] * p[n + b] - p[b] * p[n + a])
        .with_gradient(move |p| {
            let mut g = DVector::zeros(p.len());
            g[a] = p[n + b];
            g[b] = -p[n + a];
            g[n + a] = -p[b];
            g[n + b] = p[a];
            g
        })
        .with_hessian(move |p| {
            let mut h = DMatrix::zeros(p.len(), p.len());
            h[(a, n + b)] = 1.0;
            h[(n + b, a)] = 1.0;
            h[(b, n + a)] = -1.0;
            h[(n + a, b)] = -1.0;
            h
        });
    (f1, f2)
}

/// Transverse component f = xi on the given degree of freedom.
fn transverse_field(n: usize, a: usize) -> ScalarField {
    ScalarField::from_eval(move |p| p[n + a])
        .with_gradient(move |p| {
            let mut g = DVector::zeros(p.len());
            g[n + a] = 1.0;
            g
        })
        .with_hessian(move |p| DMatrix::zeros(p.len(), p.len()))
}

/// Direct-sum quadratic model Q_k in Darboux coordinates.
///
/// Components are ordered (f1, f2, e's, h's, xi's), with periodic flags on
/// each f2, the elliptic components, and the transverse components.
pub fn q_model(blocks: &[BlockSpec]) -> Result<HamiltonianSystem> {
    let expanded: Vec<BlockKind> = blocks
        .iter()
        .flat_map(|b| std::iter::repeat(b.kind).take(b.multiplicity))
        .collect();
    if expanded.is_empty() {
        return Err(Error::EmptyBlockList);
    }
    let n: usize = expanded.iter().map(|k| k.dof()).sum();

    // Assign degrees of freedom in component order: FF pairs first.
    let mut ordered: Vec<BlockKind> = Vec::new();
    for kind in [
        BlockKind::FocusFocus,
        BlockKind::Elliptic,
        BlockKind::Hyperbolic,
        BlockKind::Transverse,
    ] {
        ordered.extend(expanded.iter().copied().filter(|k| *k == kind));
    }

    let mut components = Vec::with_capacity(n);
    let mut dof_cursor = 0usize;
    for kind in ordered {
        match kind {
            BlockKind::FocusFocus => {
                let (f1, f2) = focus_focus_fields(n, dof_cursor, dof_cursor + 1);
                components.push(Component {
                    field: f1,
                    periodic: None,
                });
                components.push(Component {
                    field: f2,
                    periodic: Some(PeriodicAction::Circle),
                });
                dof_cursor += 2;
            }
            BlockKind::Elliptic => {
                components.push(Component {
                    field: elliptic_field(n, dof_cursor),
                    periodic: Some(PeriodicAction::Circle),
                });
                dof_cursor += 1;
            }
            BlockKind::Hyperbolic => {
                components.push(Component {
                    field: hyperbolic_field(n, dof_cursor),
                    periodic: None,
                });
                dof_cursor += 1;
            }
            BlockKind::Transverse => {
                components.push(Component {
                    field: transverse_field(n, dof_cursor),
                    periodic: Some(PeriodicAction::Translation { x_index: dof_cursor }),
                });
                dof_cursor += 1;
            }
        }
    }
    HamiltonianSystem::new(n, components)
}

/// Champagne-bottle benchmark on R^4:
/// H = (xi1^2 + xi2^2)/2 + (x1^2 + x2^2)^2 - (x1^2 + x2^2), J = x1 xi2 - x2 xi1.
///
/// The origin is the unique fixed point, of focus-focus type, with value (0, 0).
pub fn champagne_bottle() -> HamiltonianSystem {
    let h = ScalarField::from_eval(|p| {
        let r2 = p[0] * p[0] + p[1] * p[1];
        0.5 * (p[2] * p[2] + p[3] * p[3]) + r2 * r2 - r2
    })
    .with_gradient(|p| {
        let r2 = p[0] * p[0] + p[1] * p[1];
        DVector::from_row_slice(&[
            (4.0 * r2 - 2.0) * p[0],
            (4.0 * r2 - 2.0) * p[1],
            p[2],
            p[3],
        ])
    })
    .with_hessian(|p| {
        let r2 = p[0] * p[0] + p[1] * p[1];
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 0)] = 4.0 * r2 - 2.0 + 8.0 * p[0] * p[0];
        m[(1, 1)] = 4.0 * r2 - 2.0 + 8.0 * p[1] * p[1];
        m[(0, 1)] = 8.0 * p[0] * p[1];
        m[(1, 0)] = 8.0 * p[0] * p[1];
        m[(2, 2)] = 1.0;
        m[(3, 3)] = 1.0;
        m
    });
    let j = ScalarField::from_eval(|p| p[0] * p[3] - p[1] * p[2])
        .with_gradient(|p| DVector::from_row_slice(&[p[3], -p[2], -p[1], p[0]]))
        .with_hessian(|_| {
            let mut m = DMatrix::zeros(4, 4);
            m[(0, 3)] = 1.0;
            m[(3, 0)] = 1.0;
            m[(1, 2)] = -1.0;
            m[(2, 1)] = -1.0;
            m
        });
    HamiltonianSystem::new(
        2,
        vec![
            Component {
                field: h,
                periodic: None,
            },
            Component {
                field: j,
                periodic: Some(PeriodicAction::Circle),
            },
        ],
    )
    .expect("champagne bottle construction")
}

/// Re-index a field on R^2m into a larger phase space R^2n, where the old
/// degrees of freedom occupy slots [0, m).
fn embed_field(field: ScalarField, old_n: usize, new_n: usize) -> ScalarField {
    let extract = move |p: &[f64]| -> Vec<f64> {
        let mut q = Vec::with_capacity(2 * old_n);
        q.extend_from_slice(&p[..old_n]);
        q.extend_from_slice(&p[new_n..new_n + old_n]);
        q
    };
    let f = field.clone();
    let ext = extract;
    let embedded = ScalarField::from_eval(move |p| f.evaluate(&ext(p)));
    let f = field.clone();
    let embedded = embedded.with_gradient(move |p| {
        let q = extract(p);
        let g = f.gradient(&q);
        let mut out = DVector::zeros(2 * new_n);
        for i in 0..old_n {
            out[i] = g[i];
            out[new_n + i] = g[old_n + i];
        }
        out
    });
    let f = field;
    embedded.with_hessian(move |p| {
        let q = extract(p);
        let h = f.hessian(&q);
        let mut out = DMatrix::zeros(2 * new_n, 2 * new_n);
        let map = |i: usize| if i < old_n { i } else { new_n + (i - old_n) };
        for i in 0..2 * old_n {
            for j in 0..2 * old_n {
                out[(map(i), map(j))] = h[(i, j)];
            }
        }
        out
    })
}

/// Direct product of `sys` with k free-torus factors, each realized on a
/// plane Darboux chart with component f = xi and a 2-pi translation action.
pub fn product_with_free_torus(sys: &HamiltonianSystem, k: usize) -> HamiltonianSystem {
    if k == 0 {
        return sys.clone();
    }
    let old_n = sys.dof();
    let new_n = old_n + k;
    let mut components: Vec<Component> = sys
        .components()
        .iter()
        .map(|c| Component {
            field: embed_field(c.field.clone(), old_n, new_n),
            periodic: c.periodic.map(|a| match a {
                PeriodicAction::Circle => PeriodicAction::Circle,
                PeriodicAction::Translation { x_index } => PeriodicAction::Translation { x_index },
            }),
        })
        .collect();
    for j in 0..k {
        let a = old_n + j;
        components.push(Component {
            field: transverse_field(new_n, a),
            periodic: Some(PeriodicAction::Translation { x_index: a }),
        });
    }
    HamiltonianSystem::new(new_n, components).expect("product construction")
}

type MapFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Smooth map of the value space with invertible derivative near 0.
#[derive(Clone)]
pub struct ReparamMap {
    forward: Arc<MapFn>,
    jacobian: Arc<JacFn>,
}

impl ReparamMap {
    pub fn new<F, J>(forward: F, jacobian: J) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            forward: Arc::new(forward),
            jacobian: Arc::new(jacobian),
        }
    }

    pub fn linear(matrix: DMatrix<f64>) -> Self {
        let m = matrix.clone();
        Self::new(
            move |v| &matrix * v,
            move |_| m.clone(),
        )
    }

    pub fn identity(n: usize) -> Self {
        Self::linear(DMatrix::identity(n, n))
    }

    pub fn forward(&self, v: &DVector<f64>) -> DVector<f64> {
        (self.forward)(v)
    }

    pub fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(v)
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Compose the moment map with g: components become g o F. Fibers, hence
/// leaves, critical points and Williamson types, are unchanged.
///
/// Periodic flags are kept only for components that g leaves untouched
/// (jacobian row equal to the corresponding unit row), since an arbitrary
/// combination of components need not have a 2-pi periodic flow.
pub fn reparametrize(sys: &HamiltonianSystem, g: &ReparamMap) -> Result<HamiltonianSystem> {
    let n = sys.dof();
    let jac0 = g.jacobian(&DVector::zeros(n));
    let cond = condition_number(&jac0);
    if !cond.is_finite() || cond > COND_MAX {
        return Err(Error::SingularJacobian { cond });
    }

    // Decide which rows act as the identity, to keep periodic flags.
    let mut keeps_row = vec![true; n];
    for trial in 0..3 {
        let v = DVector::from_fn(n, |i, _| 0.01 * ((i + 1) as f64) * (trial as f64 + 0.5));
        let j = g.jacobian(&v);
        for (i, keep) in keeps_row.iter_mut().enumerate() {
            for col in 0..n {
                let expect = if col == i { 1.0 } else { 0.0 };
                if (j[(i, col)] - expect).abs() > 1e-12 {
                    *keep = false;
                }
            }
        }
    }

    let components = (0..n)
        .map(|i| {
            let sys_c = sys.clone();
            let g_c = g.clone();
            let field = ScalarField::from_eval(move |p| {
                let v = sys_c.moment_map(p);
                g_c.forward(&v)[i]
            });
            let sys_c = sys.clone();
            let g_c = g.clone();
            let field = field.with_gradient(move |p| {
                let v = sys_c.moment_map(p);
                let jac = g_c.jacobian(&v);
                let mut grad = DVector::zeros(p.len());
                for jcomp in 0..sys_c.dof() {
                    let w = jac[(i, jcomp)];
                    if w != 0.0 {
                        grad += w * sys_c.component(jcomp).gradient(p);
                    }
                }
                grad
            });
            Component {
                field,
                periodic: if keeps_row[i] {
                    sys.periodic_action(i)
                } else {
                    None
                },
            }
        })
        .collect();
    HamiltonianSystem::new(n, components)
}

/// Declarative system description consumed by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    QModel { blocks: Vec<BlockSpec> },
    ChampagneBottle,
    Product { base: Box<SystemSpec>, k: usize },
    Reparam { base: Box<SystemSpec>, g: ReparamSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReparamSpec {
    Linear { matrix: Vec<Vec<f64>> },
}

/// Key whitelist per spec node; serde's `deny_unknown_fields` is a no-op on
/// internally tagged enums, so unknown keys are rejected by hand.
fn validate_spec_keys(v: &serde_json::Value) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Config("system spec must be a JSON object".into()))?;
    let ty = obj
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| Error::Config("system spec needs a string 'type'".into()))?;
    let allowed: &[&str] = match ty {
        "q_model" => &["type", "blocks"],
        "champagne_bottle" => &["type"],
        "product" => &["type", "base", "k"],
        "reparam" => &["type", "base", "g"],
        other => return Err(Error::Config(format!("unknown system type '{other}'"))),
    };
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "unknown key '{key}' in system spec of type '{ty}'"
            )));
        }
    }
    if let Some(base) = obj.get("base") {
        validate_spec_keys(base)?;
    }
    Ok(())
}

impl SystemSpec {
    /// Parse a system spec from JSON text, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid system spec: {e}")))?;
        validate_spec_keys(&value)?;
        serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid system spec: {e}")))
    }

    pub fn build(&self) -> Result<HamiltonianSystem> {
        match self {
            SystemSpec::QModel { blocks } => q_model(blocks),
            SystemSpec::ChampagneBottle => Ok(champagne_bottle()),
            SystemSpec::Product { base, k } => Ok(product_with_free_torus(&base.build()?, *k)),
            SystemSpec::Reparam { base, g } => {
                let sys = base.build()?;
                let ReparamSpec::Linear { matrix } = g;
                let n = sys.dof();
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::Config(format!(
                        "reparam matrix must be {n} x {n}"
                    )));
                }
                let m = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
                reparametrize(&sys, &ReparamMap::linear(m))
            }
        }
    }

    /// Resolve a CLI `--system` argument: a builtin name or a JSON file path.
    pub fn resolve(arg: &str) -> Result<Self> {
        match arg {
            "champagne_bottle" => Ok(SystemSpec::ChampagneBottle),
            "ff_model" => Ok(SystemSpec::QModel {
                blocks: vec![BlockSpec::new(BlockKind::FocusFocus, 1)],
            }),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read system spec '{path}': {e}"))
                })?;
                Self::from_json(&text)
            }
        }
    }
}
