//! Seeded random instances: Dirichlet policies, stochastic kernels and small
//! synthetic games used by probes, benchmarks and tests.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::model::{Dims, MfgModel, Policy, Transition, TransitionTensor};

/// A point drawn from the flat Dirichlet distribution on the `n`-simplex.
pub fn dirichlet<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.iter_mut().for_each(|x| *x /= sum);
    } else {
        v.iter_mut().for_each(|x| *x = 1.0 / n as f64);
    }
    v
}

/// Policy with every `(t, s)` row drawn from a flat Dirichlet.
pub fn random_policy<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Policy {
    let mut p = Policy::from_fn(dims, |_, _, _| 0.0);
    for t in 0..dims.horizon {
        for s in 0..dims.states {
            for (a, v) in dirichlet(dims.actions, rng).into_iter().enumerate() {
                p.set(t, s, a, v);
            }
        }
    }
    p
}

/// Kernel with every row drawn from a flat Dirichlet.
pub fn random_transitions<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> TransitionTensor {
    TransitionTensor::from_fn(dims, |_, _, _, out| out.copy_from_slice(&dirichlet(dims.states, rng)))
}

/// Kernel whose rows are sparse: each row has at most `support` nonzeros.
pub fn random_sparse_transitions<R: Rng + ?Sized>(
    dims: Dims,
    support: usize,
    rng: &mut R,
) -> TransitionTensor {
    TransitionTensor::from_fn(dims, |_, _, _, out| {
        out.iter_mut().for_each(|v| *v = 0.0);
        let k = support.clamp(1, dims.states);
        let weights = dirichlet(k, rng);
        for w in weights {
            let j = rng.random_range(0..dims.states);
            out[j] += w;
        }
    })
}

/// Synthetic game with fixed random dynamics and reward
/// `R_t(s,a,L) = base[t,s,a] - lambda * L_t(s,a)`.
///
/// The reward is `lambda`-strongly monotone with `C_R = lambda`.
pub fn congestion_model<R: Rng + ?Sized>(dims: Dims, lambda: f64, rng: &mut R) -> MfgModel {
    let base: Vec<f64> = (0..dims.flat_len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z.clamp(-3.0, 3.0) * 0.5
        })
        .collect();
    let b_max = base.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let p = random_transitions(dims, rng);
    let mu0 = dirichlet(dims.states, rng);
    let reward = Arc::new(move |t: usize, s: usize, a: usize, l: &[f64]| {
        base[dims.index(t, s, a)] - lambda * l[dims.block_index(s, a)]
    });
    let mut model = MfgModel::new(dims, mu0, reward, Transition::Fixed(p), b_max + lambda.abs() + 1e-12)
        .expect("shapes are consistent");
    if lambda >= 0.0 {
        model = model.with_monotonicity(lambda);
    }
    model.with_lipschitz(lambda.abs())
}

/// Random fixed-dynamics game whose rewards do not depend on the mean field.
pub fn decoupled_model<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> MfgModel {
    let base: Vec<f64> = (0..dims.flat_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = random_transitions(dims, rng);
    let mu0 = dirichlet(dims.states, rng);
    let reward = Arc::new(move |t: usize, s: usize, a: usize, _: &[f64]| base[dims.index(t, s, a)]);
    MfgModel::new(dims, mu0, reward, Transition::Fixed(p), 1.0)
        .expect("shapes are consistent")
        .with_lipschitz(0.0)
        .with_monotonicity(0.0)
}
