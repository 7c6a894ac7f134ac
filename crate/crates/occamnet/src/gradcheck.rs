//! Central-difference gradient verification.
//!
//! The builder closure is called many times: once for the analytic pass and
//! twice per parameter coordinate for the numeric probes. It must therefore
//! be a pure function of the parameter values (no dropout, no fresh random
//! draws inside the closure).

use std::fmt;

use crate::graph::{Graph, GraphError, NodeId};
use crate::params::{self, ParamBlock};
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum GradCheckError {
    Graph(GraphError),
    InvalidStep { eps: f64 },
}

impl fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradCheckError::Graph(e) => write!(f, "graph error during gradient check: {e}"),
            GradCheckError::InvalidStep { eps } => {
                write!(f, "finite-difference step must be positive and finite, got {eps}")
            }
        }
    }
}

impl std::error::Error for GradCheckError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            GradCheckError::Graph(e) => Some(e),
            GradCheckError::InvalidStep { .. } => None,
        }
    }
}

impl From<GraphError> for GradCheckError {
    fn from(e: GraphError) -> Self {
        GradCheckError::Graph(e)
    }
}

/// Worst disagreement for one named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        let tol = self.tol;
        self.params.iter().filter(move |p| p.max_rel_err > tol)
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_loss<F>(theta: &[(String, Tensor)], build: &F) -> Result<f64, GraphError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, GraphError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = theta.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    Ok(g.value(root).item())
}

/// Compare reverse-mode gradients against central differences for every
/// coordinate of every parameter. `theta` is restored to its input values.
pub fn grad_check<F>(
    theta: &mut [(String, Tensor)],
    eps: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, GraphError>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(GradCheckError::InvalidStep { eps });
    }

    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = theta.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        g.backward(root)?;
        ids.iter().map(|&id| g.grad(id).clone()).collect()
    };

    let mut params = Vec::with_capacity(theta.len());
    for p in 0..theta.len() {
        let name = theta[p].0.clone();
        let mut worst = ParamReport {
            name,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: analytic[p].data().first().copied().unwrap_or(0.0),
            numeric_at_worst: 0.0,
        };
        for k in 0..theta[p].1.len() {
            let orig = theta[p].1.data()[k];
            theta[p].1.data_mut()[k] = orig + eps;
            let plus = eval_loss(theta, &build)?;
            theta[p].1.data_mut()[k] = orig - eps;
            let minus = eval_loss(theta, &build)?;
            theta[p].1.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[k];
            let err = rel_err(a, numeric);
            if err >= worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = k;
                worst.analytic_at_worst = a;
                worst.numeric_at_worst = numeric;
            }
        }
        params.push(worst);
    }

    Ok(GradCheckReport { params, tol })
}

/// [`grad_check`] over a whole parameter block. Leaves are created by the
/// block's own `bind`, so the builder closure works with typed node handles
/// and the traversal order cannot drift from the production path.
pub fn grad_check_block<B, F>(
    block: &mut B,
    eps: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport, GradCheckError>
where
    B: ParamBlock,
    F: Fn(&mut Graph, &B::Nodes) -> Result<NodeId, GraphError>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(GradCheckError::InvalidStep { eps });
    }
    let names = params::names(block, "");

    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let (nodes, ids) = params::bind_all(block, &mut g);
        let root = build(&mut g, &nodes)?;
        g.backward(root)?;
        ids.iter().map(|&id| g.grad(id).clone()).collect()
    };

    let eval = |block: &B| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(block, &mut g);
        let root = build(&mut g, &nodes)?;
        Ok(g.value(root).item())
    };

    let mut reports = Vec::with_capacity(names.len());
    for (p, name) in names.into_iter().enumerate() {
        let mut worst = ParamReport {
            name,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: analytic[p].data().first().copied().unwrap_or(0.0),
            numeric_at_worst: 0.0,
        };
        let len = analytic[p].len();
        for k in 0..len {
            let orig = params::tensors(block)[p].data()[k];
            params::tensors_mut(block)[p].data_mut()[k] = orig + eps;
            let plus = eval(block)?;
            params::tensors_mut(block)[p].data_mut()[k] = orig - eps;
            let minus = eval(block)?;
            params::tensors_mut(block)[p].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[k];
            let err = rel_err(a, numeric);
            if err >= worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = k;
                worst.analytic_at_worst = a;
                worst.numeric_at_worst = numeric;
            }
        }
        reports.push(worst);
    }

    Ok(GradCheckReport { params: reports, tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_gradient_agrees() {
        // f(x) = xᵀ A x ; df/dx = (A + Aᵀ) x
        let a = Tensor::new(2, 2, vec![2.0, 1.0, 0.0, 3.0]);
        let mut theta = vec![("x".to_string(), Tensor::column(&[0.7, -1.3]))];
        let report = grad_check(&mut theta, 1e-5, 1e-7, move |g, ids| {
            let a_leaf = g.leaf(a.clone());
            let ax = g.matmul(a_leaf, ids[0])?;
            g.dot(ids[0], ax)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn nonlinear_composite_agrees() {
        // f(w, b) = sum(sigmoid(w) ⊙ tanh(w)) + exp(b)
        let mut theta = vec![
            ("w".to_string(), Tensor::column(&[0.2, -0.9, 1.5])),
            ("b".to_string(), Tensor::scalar(0.3)),
        ];
        let report = grad_check(&mut theta, 1e-5, 1e-8, |g, ids| {
            let s = g.sigmoid(ids[0]);
            let t = g.tanh(ids[0]);
            let prod = g.hadamard(s, t)?;
            let sum = g.sum(prod);
            let eb = g.exp(ids[1]);
            g.add(sum, eb)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
        assert_eq!(report.params.len(), 2);
        assert_eq!(report.params[0].name, "w");
    }

    #[test]
    fn theta_restored_after_check() {
        let mut theta = vec![("x".to_string(), Tensor::column(&[1.0, 2.0]))];
        let before = theta[0].1.clone();
        let _ = grad_check(&mut theta, 1e-4, 1e-6, |g, ids| {
            let sq = g.hadamard(ids[0], ids[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(theta[0].1, before);
    }

    #[test]
    fn detects_a_broken_gradient() {
        // relu has a kink at 0; probing straight across it with a large step
        // yields a numeric slope far from the analytic one.
        let mut theta = vec![("x".to_string(), Tensor::scalar(1e-7))];
        let report = grad_check(&mut theta, 1.0, 1e-4, |g, ids| {
            let r = g.relu(ids[0]);
            Ok(g.sum(r))
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 1);
    }

    #[test]
    fn zero_step_is_rejected() {
        let mut theta = vec![("x".to_string(), Tensor::scalar(1.0))];
        let err = grad_check(&mut theta, 0.0, 1e-4, |g, ids| Ok(g.sum(ids[0]))).unwrap_err();
        match err {
            GradCheckError::InvalidStep { eps } => assert_eq!(eps, 0.0),
            other => panic!("expected InvalidStep, got {other:?}"),
        }
    }

    struct Pair {
        a: Tensor,
        b: Tensor,
    }

    struct PairNodes {
        a: NodeId,
        b: NodeId,
    }

    impl ParamBlock for Pair {
        type Nodes = PairNodes;

        fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
            out.push(format!("{prefix}a"));
            out.push(format!("{prefix}b"));
        }

        fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
            out.extend([&self.a, &self.b]);
        }

        fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
            out.extend([&mut self.a, &mut self.b]);
        }

        fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> PairNodes {
            let a = g.leaf(self.a.clone());
            ids.push(a);
            let b = g.leaf(self.b.clone());
            ids.push(b);
            PairNodes { a, b }
        }
    }

    #[test]
    fn block_variant_checks_typed_params() {
        // f(a, b) = sum(tanh(a ⊙ b))
        let mut block = Pair {
            a: Tensor::column(&[0.4, -1.1]),
            b: Tensor::column(&[0.9, 0.2]),
        };
        let report = grad_check_block(&mut block, 1e-5, 1e-8, |g, nodes| {
            let prod = g.hadamard(nodes.a, nodes.b)?;
            let t = g.tanh(prod);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
        assert_eq!(report.params[0].name, "a");
        assert_eq!(report.params[1].name, "b");
        // block restored
        assert_eq!(block.a, Tensor::column(&[0.4, -1.1]));
    }
}
