//! Flow propagation, policy retrieval from occupation measures, the flow
//! polytope `{d | A d = b, d >= 0}` and reachability under uniform exploration.

use std::sync::Arc;

use crate::model::{
    Dims, MeanFieldFlow, MfgModel, ModelError, Policy, Transition, TransitionTensor,
};
use crate::sparse::CscMatrix;

/// Propagates `mu0` under `policy` through a fixed kernel.
pub fn propagate(policy: &Policy, mu0: &[f64], transitions: &TransitionTensor) -> MeanFieldFlow {
    let d = policy.dims();
    let mut flow = MeanFieldFlow::zeros(d);
    let mut mu = mu0.to_vec();
    let mut next = vec![0.0; d.states];
    for t in 0..d.horizon {
        {
            let values = flow.as_mut_slice();
            for a in 0..d.actions {
                for s in 0..d.states {
                    values[d.index(t, s, a)] = mu[s] * policy.prob(t, s, a);
                }
            }
        }
        if t + 1 == d.horizon {
            break;
        }
        next.iter_mut().for_each(|v| *v = 0.0);
        let block = flow.at(t);
        for a in 0..d.actions {
            for s in 0..d.states {
                let mass = block[d.block_index(s, a)];
                if mass == 0.0 {
                    continue;
                }
                for (n, p) in next.iter_mut().zip(transitions.row(t, s, a)) {
                    *n += p * mass;
                }
            }
        }
        std::mem::swap(&mut mu, &mut next);
    }
    flow
}

/// Mean-field flow `L^pi` of a policy under fixed dynamics.
pub fn forward_flow(policy: &Policy, model: &MfgModel) -> Result<MeanFieldFlow, ModelError> {
    check_policy_dims(policy, model)?;
    match model.transition() {
        Transition::Fixed(p) => Ok(propagate(policy, model.mu0(), p)),
        Transition::MeanFieldDependent(_) => Err(ModelError::MeanFieldDependentTransitions),
    }
}

/// Mean-field flow of a policy for either kind of dynamics: each step of a
/// mean-field dependent kernel is anchored at the flow block it propagates.
pub fn mean_field_flow(policy: &Policy, model: &MfgModel) -> Result<MeanFieldFlow, ModelError> {
    check_policy_dims(policy, model)?;
    let f = match model.transition() {
        Transition::Fixed(p) => return Ok(propagate(policy, model.mu0(), p)),
        Transition::MeanFieldDependent(f) => f,
    };
    let d = model.dims();
    let mut flow = MeanFieldFlow::zeros(d);
    let mut mu = model.mu0().to_vec();
    let mut row = vec![0.0; d.states];
    for t in 0..d.horizon {
        {
            let values = flow.as_mut_slice();
            for a in 0..d.actions {
                for s in 0..d.states {
                    values[d.index(t, s, a)] = mu[s] * policy.prob(t, s, a);
                }
            }
        }
        if t + 1 == d.horizon {
            break;
        }
        let block = flow.at(t);
        mu.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..d.actions {
            for s in 0..d.states {
                let mass = block[d.block_index(s, a)];
                if mass == 0.0 {
                    continue;
                }
                f(t, s, a, block, &mut row);
                for (n, p) in mu.iter_mut().zip(&row) {
                    *n += p * mass;
                }
            }
        }
    }
    Ok(flow)
}

fn check_policy_dims(policy: &Policy, model: &MfgModel) -> Result<(), ModelError> {
    if policy.dims() != model.dims() {
        return Err(ModelError::DimsMismatch {
            left: model.dims(),
            right: policy.dims(),
        });
    }
    Ok(())
}

/// Distribution used by [`normalize`] at states carrying zero mass.
#[derive(Debug, Clone, Copy, Default)]
pub enum TieBreak<'a> {
    #[default]
    Uniform,
    Policy(&'a Policy),
}

/// Recovers a policy from an occupation measure by per-state renormalization.
pub fn normalize(d: &MeanFieldFlow, tie_break: TieBreak<'_>) -> Result<Policy, ModelError> {
    let dims = d.dims();
    if let Some((index, &value)) = d.as_slice().iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(ModelError::NegativeEntry {
            what: "occupation measure",
            index,
            value,
        });
    }
    if let TieBreak::Policy(p) = tie_break {
        if p.dims() != dims {
            return Err(ModelError::DimsMismatch {
                left: dims,
                right: p.dims(),
            });
        }
    }
    let uniform = 1.0 / dims.actions as f64;
    let mut policy = Policy::from_fn(dims, |_, _, _| 0.0);
    for t in 0..dims.horizon {
        for s in 0..dims.states {
            let mass: f64 = (0..dims.actions).map(|a| d.get(t, s, a)).sum();
            for a in 0..dims.actions {
                let p = if mass > 0.0 {
                    d.get(t, s, a) / mass
                } else {
                    match tie_break {
                        TieBreak::Uniform => uniform,
                        TieBreak::Policy(q) => q.prob(t, s, a),
                    }
                };
                policy.set(t, s, a, p);
            }
        }
    }
    Ok(policy)
}

/// Position of a structural block inside the constraint matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub row_block: usize,
    pub col_block: usize,
    /// `+1` or `-1` for identity-like `Z` blocks, `0` for transition blocks.
    pub sign: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub w_blocks: Vec<Block>,
    pub z_blocks: Vec<Block>,
}

/// The constraint pair `(A, b)` of valid occupation measures.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolytope {
    dims: Dims,
    a_matrix: CscMatrix,
    b_vector: Vec<f64>,
    layout: BlockLayout,
}

impl FlowPolytope {
    /// Assembles `A_P` and `b` from an explicit kernel and initial distribution.
    ///
    /// Row block `t < T-1` encodes `W_t d_t - Z d_{t+1} = 0`; the final row
    /// block encodes `Z d_0 = mu0`.
    pub fn from_transitions(
        dims: Dims,
        mu0: &[f64],
        transitions: &TransitionTensor,
    ) -> Result<Self, ModelError> {
        if transitions.dims() != dims {
            return Err(ModelError::DimsMismatch {
                left: dims,
                right: transitions.dims(),
            });
        }
        if mu0.len() != dims.states {
            return Err(ModelError::ShapeMismatch {
                what: "mu0",
                expected: dims.states,
                got: mu0.len(),
            });
        }
        let (s_count, horizon) = (dims.states, dims.horizon);
        let last_block = horizon - 1;
        let mut columns = Vec::with_capacity(dims.flat_len());
        for t in 0..horizon {
            for a in 0..dims.actions {
                for s in 0..s_count {
                    let mut col = Vec::with_capacity(s_count + 1);
                    if t + 1 < horizon {
                        for (next, &p) in transitions.row(t, s, a).iter().enumerate() {
                            if p != 0.0 {
                                col.push((t * s_count + next, p));
                            }
                        }
                    }
                    if t == 0 {
                        col.push((last_block * s_count + s, 1.0));
                    } else {
                        col.push(((t - 1) * s_count + s, -1.0));
                    }
                    columns.push(col);
                }
            }
        }
        let a_matrix = CscMatrix::from_columns(dims.constraint_rows(), columns);
        let mut b_vector = vec![0.0; dims.constraint_rows()];
        b_vector[last_block * s_count..].copy_from_slice(mu0);
        let w_blocks = (0..horizon.saturating_sub(1))
            .map(|t| Block {
                row_block: t,
                col_block: t,
                sign: 0,
            })
            .collect();
        let mut z_blocks: Vec<Block> = (1..horizon)
            .map(|t| Block {
                row_block: t - 1,
                col_block: t,
                sign: -1,
            })
            .collect();
        z_blocks.push(Block {
            row_block: last_block,
            col_block: 0,
            sign: 1,
        });
        Ok(Self {
            dims,
            a_matrix,
            b_vector,
            layout: BlockLayout { w_blocks, z_blocks },
        })
    }

    /// Arbitrary constraint pair of compatible shape (no block structure).
    pub fn from_parts(dims: Dims, a_matrix: CscMatrix, b_vector: Vec<f64>) -> Result<Self, ModelError> {
        if a_matrix.ncols() != dims.flat_len() {
            return Err(ModelError::ShapeMismatch {
                what: "constraint columns",
                expected: dims.flat_len(),
                got: a_matrix.ncols(),
            });
        }
        if b_vector.len() != a_matrix.nrows() {
            return Err(ModelError::ShapeMismatch {
                what: "constraint right-hand side",
                expected: a_matrix.nrows(),
                got: b_vector.len(),
            });
        }
        Ok(Self {
            dims,
            a_matrix,
            b_vector,
            layout: BlockLayout {
                w_blocks: Vec::new(),
                z_blocks: Vec::new(),
            },
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn a_matrix(&self) -> &CscMatrix {
        &self.a_matrix
    }

    pub fn b_vector(&self) -> &[f64] {
        &self.b_vector
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    /// Dense `S x SA` transition block `W_t`.
    pub fn w_block(&self, t: usize) -> Vec<Vec<f64>> {
        let d = self.dims;
        let mut w = vec![vec![0.0; d.state_actions()]; d.states];
        if t + 1 >= d.horizon {
            return w;
        }
        for j in 0..d.state_actions() {
            let col = t * d.state_actions() + j;
            for (row, v) in self.a_matrix.column(col) {
                if row / d.states == t {
                    w[row % d.states][j] += v;
                }
            }
        }
        w
    }

    /// `max_i |(A x - b)_i|`.
    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.a_matrix.nrows()];
        self.a_matrix.mul_vec(x, &mut ax);
        ax.iter()
            .zip(&self.b_vector)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max)
    }
}

/// Polytope for fixed dynamics.
pub fn assemble_polytope(model: &MfgModel) -> Result<FlowPolytope, ModelError> {
    match model.transition() {
        Transition::Fixed(p) => FlowPolytope::from_transitions(model.dims(), model.mu0(), p),
        Transition::MeanFieldDependent(_) => Err(ModelError::MeanFieldDependentTransitions),
    }
}

/// Polytope with every `W_t` built from `P_t(. | s, a, anchor_t)`.
pub fn assemble_polytope_at(model: &MfgModel, anchor: &MeanFieldFlow) -> Result<FlowPolytope, ModelError> {
    let p = model.transitions_at(anchor)?;
    FlowPolytope::from_transitions(model.dims(), model.mu0(), &p)
}

/// States with zero probability under the uniform exploration policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachabilitySets {
    dims: Dims,
    unreachable: Vec<bool>,
}

impl ReachabilitySets {
    pub fn none(dims: Dims) -> Self {
        Self {
            dims,
            unreachable: vec![false; dims.constraint_rows()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn is_unreachable(&self, t: usize, s: usize) -> bool {
        self.unreachable[t * self.dims.states + s]
    }

    pub fn mark_unreachable(&mut self, t: usize, s: usize) {
        self.unreachable[t * self.dims.states + s] = true;
    }

    pub fn unreachable_at(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.dims.states).filter(move |&s| self.is_unreachable(t, s))
    }

    pub fn count(&self) -> usize {
        self.unreachable.iter().filter(|&&u| u).count()
    }
}

/// Exact support propagation: `s` is reachable at `t + 1` iff some reachable
/// `s'` at `t` and action `a` have `P_t(s | s', a) > 0`.
pub fn reachability(model: &MfgModel) -> Result<ReachabilitySets, ModelError> {
    let p = model
        .fixed_transitions()
        .ok_or(ModelError::MeanFieldDependentTransitions)?;
    let d = model.dims();
    let mut reach = ReachabilitySets::none(d);
    let mut support: Vec<bool> = model.mu0().iter().map(|&m| m > 0.0).collect();
    for t in 0..d.horizon {
        for (s, &r) in support.iter().enumerate() {
            if !r {
                reach.mark_unreachable(t, s);
            }
        }
        if t + 1 == d.horizon {
            break;
        }
        let mut next = vec![false; d.states];
        for (s, _) in support.iter().enumerate().filter(|(_, &r)| r) {
            for a in 0..d.actions {
                for (n, &q) in p.row(t, s, a).iter().enumerate() {
                    if q > 0.0 {
                        next[n] = true;
                    }
                }
            }
        }
        support = next;
    }
    Ok(reach)
}

/// Replaces transitions at unreachable `(t, s)` with `p0` and the rewards
/// there with zero.
pub fn apply_default_modification(
    model: &MfgModel,
    reach: &ReachabilitySets,
    p0: &[f64],
) -> Result<MfgModel, ModelError> {
    let d = model.dims();
    if reach.dims() != d {
        return Err(ModelError::DimsMismatch {
            left: d,
            right: reach.dims(),
        });
    }
    if p0.len() != d.states {
        return Err(ModelError::ShapeMismatch {
            what: "p0",
            expected: d.states,
            got: p0.len(),
        });
    }
    if reach.count() == 0 {
        return Ok(model.clone());
    }
    let transition = match model.transition() {
        Transition::Fixed(p) => {
            let mut q = p.clone();
            for t in 0..d.transition_steps() {
                for s in reach.unreachable_at(t) {
                    for a in 0..d.actions {
                        q.row_mut(t, s, a).copy_from_slice(p0);
                    }
                }
            }
            Transition::Fixed(q)
        }
        Transition::MeanFieldDependent(f) => {
            let f = Arc::clone(f);
            let reach = reach.clone();
            let p0 = p0.to_vec();
            Transition::MeanFieldDependent(Arc::new(move |t, s, a, l, out: &mut [f64]| {
                if reach.is_unreachable(t, s) {
                    out.copy_from_slice(&p0);
                } else {
                    f(t, s, a, l, out)
                }
            }))
        }
    };
    let inner = Arc::clone(model.reward_fn());
    let reach = reach.clone();
    let reward = Arc::new(move |t: usize, s: usize, a: usize, l: &[f64]| {
        if reach.is_unreachable(t, s) {
            0.0
        } else {
            inner(t, s, a, l)
        }
    });
    model.clone().with_reward(reward).with_transition(transition)
}
