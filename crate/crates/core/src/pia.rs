//! Permutation and integration of adapters.
//!
//! Server side: build a FedAvg anchor, reorder every client's bottleneck
//! neurons to match it using weight-based ground costs, then blend the
//! aligned stacks with weights `exp(−γ·‖W̃_k − W_anchor‖)`.
//!
//! Client side: reorder the incoming global stack to match the local one
//! using activation statistics on a probe batch, then merge the two.
//!
//! Adapters read from and write to the backbone's fixed coordinate system,
//! so only the bottleneck dimension of each layer is ever permuted: the
//! down-projection's outputs and the up-projection's inputs move together
//! and the function computed by the stack is unchanged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_features, ActivationCache, AdapterStack, Backbone, ParamSet};
use crate::numerics::{matmul, pairwise_euclidean, Matrix};
use crate::ot::{
    activation_support, plan_to_alignment, solve_exact, weight_support, ActivationMode,
    Projection, TransportPlan,
};

/// Ground cost used when aligning two adapter stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Incoming weights plus bias of each bottleneck neuron.
    Weight,
    /// Bottleneck pre-activations on a shared probe batch.
    #[default]
    Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Temperature of the distance-based integration weights.
    pub gamma: f64,
    pub client_cost_mode: CostMode,
    pub activation_mode: ActivationMode,
    /// Probe batch size for activation costs.
    pub m_probe: usize,
    /// Weight of the local stack in the client-side merge.
    pub lambda_merge: f64,
    /// Divide by the sum of integration weights instead of by `K`.
    pub normalize_weights: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            client_cost_mode: CostMode::Activation,
            activation_mode: ActivationMode::Mean,
            m_probe: 16,
            lambda_merge: 0.5,
            normalize_weights: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.m_probe == 0 {
            return Err(Error::Config("m_probe must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_merge) {
            return Err(Error::Config(format!(
                "lambda_merge must lie in [0, 1], got {}",
                self.lambda_merge
            )));
        }
        Ok(())
    }
}

/// Sums the terms in a canonical order so the result does not depend on
/// the order clients were listed in.
fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `Σ_k weights[k] · stacks[k]`, coordinate by coordinate.
fn weighted_sum(stacks: &[&AdapterStack], weights: &[f64]) -> Result<AdapterStack> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::data("no adapter stacks to combine"))?;
    for s in stacks {
        first.ensure_same_shape(s)?;
    }
    let mut out = first.zeros_like();
    let sources: Vec<Vec<&[f64]>> = stacks.iter().map(|s| s.tensors()).collect();
    let mut terms = vec![0.0; stacks.len()];
    for (t, dst) in out.tensors_mut().into_iter().enumerate() {
        for (i, d) in dst.iter_mut().enumerate() {
            for (k, src) in sources.iter().enumerate() {
                terms[k] = weights[k] * src[t][i];
            }
            *d = order_free_sum(&mut terms);
        }
    }
    Ok(out)
}

/// Parameter-wise average weighted by `N_k / ΣN`.
pub fn fedavg(stacks: &[AdapterStack], sizes: &[usize]) -> Result<AdapterStack> {
    if stacks.len() != sizes.len() {
        return Err(Error::shape(format!(
            "{} stacks but {} sizes",
            stacks.len(),
            sizes.len()
        )));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::data("client dataset sizes must be >= 1"));
    }
    let total: usize = sizes.iter().sum();
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    weighted_sum(&stacks.iter().collect::<Vec<_>>(), &weights)
}

/// Supports of one stack's activations on a shared probe batch.
#[derive(Clone, Copy, Debug)]
pub struct ActivationProbe<'a> {
    pub movable: &'a ActivationCache,
    pub anchor: &'a ActivationCache,
    pub mode: ActivationMode,
}

#[derive(Clone, Copy, Debug)]
pub enum AlignCost<'a> {
    Weight,
    Activation(ActivationProbe<'a>),
}

/// Deliberate corruptions of the alignment formula, used to check that the
/// verification oracles catch them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AlignmentFault {
    #[default]
    None,
    /// Flips the sign of every aligned weight.
    NegateAligned,
    /// Uses `P` where `Pᵀ` belongs.
    TransposePlan,
}

/// Reorders the bottleneck neurons of `movable` to best match `anchor`.
/// Returns the aligned stack and one plan per layer.
pub fn align_stack(
    movable: &AdapterStack,
    anchor: &AdapterStack,
    cost: AlignCost<'_>,
) -> Result<(AdapterStack, Vec<TransportPlan>)> {
    align_stack_with_fault(movable, anchor, cost, AlignmentFault::None)
}

#[doc(hidden)]
pub fn align_stack_with_fault(
    movable: &AdapterStack,
    anchor: &AdapterStack,
    cost: AlignCost<'_>,
    fault: AlignmentFault,
) -> Result<(AdapterStack, Vec<TransportPlan>)> {
    movable.ensure_same_shape(anchor)?;
    if let AlignCost::Activation(p) = cost {
        if p.movable.layers.len() != movable.depth() || p.anchor.layers.len() != anchor.depth() {
            return Err(Error::Usage(
                "activation probe caches do not cover every adapter layer".into(),
            ));
        }
    }

    let mut aligned = movable.clone();
    let mut plans = Vec::with_capacity(movable.depth());
    for (l, (mov, anc)) in movable.layers.iter().zip(&anchor.layers).enumerate() {
        let (mov_support, anc_support) = match cost {
            AlignCost::Weight => {
                // Adapters read the backbone stream directly, so the input
                // side carries no earlier permutation.
                let incoming = Matrix::identity(mov.hidden());
                (
                    weight_support(mov, Projection::Down, &incoming)?,
                    weight_support(anc, Projection::Down, &incoming)?,
                )
            }
            AlignCost::Activation(p) => (
                activation_support(p.movable, l, p.mode)?,
                activation_support(p.anchor, l, p.mode)?,
            ),
        };
        let ground = pairwise_euclidean(&mov_support, &anc_support)?;
        let b = mov.bottleneck();
        let uniform = vec![1.0 / b as f64; b];
        let plan = solve_exact(&ground, &uniform, &uniform)?;

        // diag(1/β)·Pᵀ maps movable neuron coordinates to anchor ones.
        let mut align = plan_to_alignment(&plan)?;
        if fault == AlignmentFault::TransposePlan {
            align = align.transpose();
        }
        let out = &mut aligned.layers[l];
        // Down-projection rows are neurons: W̃ = A·W·I.
        out.w_down = matmul(&mov.w_down, &align.transpose())?;
        out.b_down = matmul(&align, &Matrix::column(&mov.b_down)?)?.into_vec();
        // Up-projection: outputs fixed, inputs follow the bottleneck: W̃ = I·W·Aᵀ.
        out.w_up = matmul(&align, &mov.w_up)?;
        out.b_up = mov.b_up.clone();
        if fault == AlignmentFault::NegateAligned {
            out.w_down = out.w_down.scale(-1.0);
            out.w_up = out.w_up.scale(-1.0);
        }
        plans.push(plan);
    }
    Ok((aligned, plans))
}

/// Per-client integration weights `exp(−γ·d_k)`, where `d_k` is the
/// Frobenius distance between the aligned stack and the anchor over every
/// adapter parameter.
pub fn integration_weights(aligned: &[AdapterStack], anchor: &AdapterStack, gamma: f64) -> Result<Vec<f64>> {
    aligned
        .iter()
        .map(|s| Ok((-gamma * s.distance(anchor)?).exp()))
        .collect()
}

/// `(1/K)·Σ_k exp(−γ·d_k)·W̃_k`, or with `normalize` the same sum divided
/// by `Σ_k exp(−γ·d_k)`.
pub fn dynamic_integrate(
    aligned: &[AdapterStack],
    anchor: &AdapterStack,
    gamma: f64,
    normalize: bool,
) -> Result<AdapterStack> {
    if aligned.is_empty() {
        return Err(Error::data("no aligned stacks to integrate"));
    }
    let raw = integration_weights(aligned, anchor, gamma)?;
    let denom = if normalize {
        order_free_sum(&mut raw.clone())
    } else {
        aligned.len() as f64
    };
    let weights: Vec<f64> = raw.iter().map(|w| w / denom).collect();
    weighted_sum(&aligned.iter().collect::<Vec<_>>(), &weights)
}

/// FedAvg anchor, weight-cost alignment of every client stack to it, then
/// dynamic integration.
pub fn server_pia(client_stacks: &[AdapterStack], sizes: &[usize], cfg: &FusionConfig) -> Result<AdapterStack> {
    if client_stacks.is_empty() {
        return Err(Error::data("server fusion needs at least one client"));
    }
    let anchor = fedavg(client_stacks, sizes)?;
    let aligned = client_stacks
        .par_iter()
        .map(|s| align_stack(s, &anchor, AlignCost::Weight).map(|(a, _)| a))
        .collect::<Result<Vec<_>>>()?;
    dynamic_integrate(&aligned, &anchor, cfg.gamma, cfg.normalize_weights)
}

/// `λ·local + (1−λ)·other`.
pub fn merge(local: &AdapterStack, other: &AdapterStack, lambda: f64) -> Result<AdapterStack> {
    local.ensure_same_shape(other)?;
    let mut out = local.clone();
    for (dst, (l, o)) in out
        .tensors_mut()
        .into_iter()
        .zip(local.tensors().into_iter().zip(other.tensors()))
    {
        for (d, (a, b)) in dst.iter_mut().zip(l.iter().zip(o)) {
            *d = lambda * a + (1.0 - lambda) * b;
        }
    }
    Ok(out)
}

/// Aligns `global` to the client's `local` stack and merges the two. The
/// result initializes the client's trainable adapter for the round.
pub fn client_pia(
    backbone: &Backbone,
    global: &AdapterStack,
    local: &AdapterStack,
    probe_batch: &Matrix,
    cfg: &FusionConfig,
) -> Result<AdapterStack> {
    let aligned = match cfg.client_cost_mode {
        CostMode::Weight => align_stack(global, local, AlignCost::Weight)?.0,
        CostMode::Activation => {
            if probe_batch.rows() == 0 {
                return Err(Error::data("client alignment needs a non-empty probe batch"));
            }
            let global_cache = forward_features(backbone, global, probe_batch)?;
            let local_cache = forward_features(backbone, local, probe_batch)?;
            let probe = ActivationProbe {
                movable: &global_cache,
                anchor: &local_cache,
                mode: cfg.activation_mode,
            };
            align_stack(global, local, AlignCost::Activation(probe))?.0
        }
    };
    merge(local, &aligned, cfg.lambda_merge)
}

/// Reorders bottleneck neurons: new neuron `perm[j]` takes old neuron `j`.
pub fn permute_bottleneck(stack: &AdapterStack, perms: &[Vec<usize>]) -> Result<AdapterStack> {
    if perms.len() != stack.depth() {
        return Err(Error::shape("one permutation per layer required"));
    }
    let mut out = stack.clone();
    for (layer, (src, perm)) in out.layers.iter_mut().zip(stack.layers.iter().zip(perms)) {
        let b = src.bottleneck();
        let mut seen = vec![false; b];
        if perm.len() != b || perm.iter().any(|&p| p >= b || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("not a permutation of the bottleneck"));
        }
        for (j, &pj) in perm.iter().enumerate() {
            for r in 0..src.hidden() {
                layer.w_down[(r, pj)] = src.w_down[(r, j)];
            }
            layer.b_down[pj] = src.b_down[j];
            layer.w_up.row_mut(pj).copy_from_slice(src.w_up.row(j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model, ModelDims};
    use crate::numerics::{rng_normal, Rng};
    use proptest::prelude::*;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 5,
            hidden: 8,
            bottleneck: 4,
            depth: 2,
        }
    }

    fn stack(seed: u64) -> AdapterStack {
        AdapterStack::init(&mut Rng::new(seed), &dims(), 0.5).unwrap()
    }

    fn random_perm(rng: &mut Rng, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut p);
        p
    }

    #[test]
    fn fedavg_fixed_point_and_symmetry() {
        let s = stack(1);
        let avg = fedavg(&[s.clone(), s.clone(), s.clone()], &[3, 1, 2]).unwrap();
        assert!(avg.max_abs_diff(&s) < 1e-12);
        let neg = s.scaled(-1.0);
        let zero = fedavg(&[s.clone(), neg], &[1, 1]).unwrap();
        assert!(zero.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fedavg_matches_weighted_loop() {
        let stacks = [stack(1), stack(2), stack(3)];
        let avg = fedavg(&stacks, &[1, 2, 3]).unwrap();
        let flat: Vec<Vec<f64>> = stacks.iter().map(|s| s.flatten()).collect();
        for (i, v) in avg.flatten().iter().enumerate() {
            let expected = (1.0 * flat[0][i] + 2.0 * flat[1][i] + 3.0 * flat[2][i]) / 6.0;
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn fedavg_errors() {
        let a = stack(1);
        let other = AdapterStack::init(
            &mut Rng::new(0),
            &ModelDims {
                bottleneck: 3,
                ..dims()
            },
            0.1,
        )
        .unwrap();
        assert!(matches!(fedavg(&[a.clone(), other], &[1, 1]), Err(Error::Shape(_))));
        assert!(matches!(fedavg(&[a], &[0]), Err(Error::Data(_))));
    }

    #[test]
    fn self_alignment_is_exact() {
        let s = stack(4);
        let (aligned, plans) = align_stack(&s, &s, AlignCost::Weight).unwrap();
        assert_eq!(aligned, s);
        for p in plans {
            assert_eq!(plan_to_alignment(&p).unwrap(), Matrix::identity(4));
        }
    }

    #[test]
    fn planted_permutation_is_recovered() {
        let anchor = stack(5);
        let mut rng = Rng::new(6);
        let perms: Vec<Vec<usize>> = (0..2).map(|_| random_perm(&mut rng, 4)).collect();
        let moved = permute_bottleneck(&anchor, &perms).unwrap();
        let (aligned, plans) = align_stack(&moved, &anchor, AlignCost::Weight).unwrap();
        assert!(aligned.max_abs_diff(&anchor) < 1e-9);
        for (plan, perm) in plans.iter().zip(&perms) {
            // Movable neuron perm[j] came from anchor neuron j.
            let recovered = plan.as_permutation().unwrap();
            for (j, &pj) in perm.iter().enumerate() {
                assert_eq!(recovered[pj], j);
            }
        }
    }

    #[test]
    fn alignment_preserves_function() {
        let (backbone, _, head) = init_model(&Rng::new(7), &dims(), 3, 0.5).unwrap();
        let movable = stack(8);
        let anchor = stack(9);
        let (aligned, _) = align_stack(&movable, &anchor, AlignCost::Weight).unwrap();
        let x = rng_normal(&mut Rng::new(10), 32, 5, 1.0);
        let (a, _) = forward(&backbone, &movable, &head, &x).unwrap();
        let (b, _) = forward(&backbone, &aligned, &head, &x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn activation_alignment_requires_full_probe() {
        let (backbone, _, _) = init_model(&Rng::new(7), &dims(), 3, 0.5).unwrap();
        let s = stack(1);
        let x = rng_normal(&mut Rng::new(1), 4, 5, 1.0);
        let mut cache = forward_features(&backbone, &s, &x).unwrap();
        cache.layers.pop();
        let probe = ActivationProbe {
            movable: &cache,
            anchor: &cache,
            mode: ActivationMode::Mean,
        };
        assert!(matches!(
            align_stack(&s, &s, AlignCost::Activation(probe)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn integration_identities() {
        let anchor = stack(1);
        let same = vec![anchor.clone(); 3];
        let out = dynamic_integrate(&same, &anchor, 2.5, false).unwrap();
        assert!(out.max_abs_diff(&anchor) < 1e-12);

        let stacks = vec![stack(2), stack(3), stack(4)];
        let out = dynamic_integrate(&stacks, &anchor, 0.0, false).unwrap();
        let flat: Vec<Vec<f64>> = stacks.iter().map(|s| s.flatten()).collect();
        for (i, v) in out.flatten().iter().enumerate() {
            let mean = (flat[0][i] + flat[1][i] + flat[2][i]) / 3.0;
            assert!((v - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn integration_hand_computed_two_params() {
        let tiny = |a: f64, b: f64| AdapterStack {
            layers: vec![crate::model::AdapterLayer {
                w_down: Matrix::from_vec(1, 1, vec![a]).unwrap(),
                b_down: vec![b],
                w_up: Matrix::zeros(1, 1),
                b_up: vec![0.0],
                nonlinearity: Default::default(),
            }],
        };
        let anchor = tiny(0.0, 0.0);
        let s1 = tiny(3.0, 4.0); // d = 5
        let s2 = tiny(1.0, 0.0); // d = 1
        let gamma = 0.3;
        let w1 = (-gamma * 5.0f64).exp();
        let w2 = (-gamma * 1.0f64).exp();
        let out = dynamic_integrate(&[s1.clone(), s2.clone()], &anchor, gamma, false).unwrap();
        assert!((out.layers[0].w_down[(0, 0)] - (w1 * 3.0 + w2 * 1.0) / 2.0).abs() < 1e-12);
        assert!((out.layers[0].b_down[0] - w1 * 4.0 / 2.0).abs() < 1e-12);
        let norm = dynamic_integrate(&[s1, s2], &anchor, gamma, true).unwrap();
        assert!((norm.layers[0].w_down[(0, 0)] - (w1 * 3.0 + w2) / (w1 + w2)).abs() < 1e-12);
    }

    #[test]
    fn distance_counts_every_parameter_once() {
        let a = stack(1);
        let zero = a.zeros_like();
        let mut bumped = zero.clone();
        let mut count = 0;
        for t in bumped.tensors_mut() {
            for v in t.iter_mut() {
                *v = 1.0;
                count += 1;
            }
        }
        assert_eq!(count, a.num_params());
        assert_eq!(bumped.distance(&zero).unwrap(), (count as f64).sqrt());
    }

    #[test]
    fn server_single_client_and_consensus() {
        let s = stack(3);
        let cfg = FusionConfig::default();
        assert_eq!(server_pia(&[s.clone()], &[10], &cfg).unwrap(), s);
        let out = server_pia(&[s.clone(), s.clone(), s.clone()], &[1, 5, 2], &cfg).unwrap();
        assert!(out.max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn server_undoes_planted_permutation() {
        let s = stack(11);
        let moved = permute_bottleneck(&s, &[vec![2, 0, 3, 1], vec![1, 0, 3, 2]]).unwrap();
        // A larger first client pulls the anchor towards its neuron order;
        // normalized weights keep the fused stack at full scale.
        let cfg = FusionConfig {
            normalize_weights: true,
            ..FusionConfig::default()
        };
        let out = server_pia(&[s.clone(), moved.clone()], &[3, 1], &cfg).unwrap();
        assert!(out.max_abs_diff(&s) < 1e-6);
        let naive = fedavg(&[s.clone(), moved], &[1, 1]).unwrap();
        assert!(naive.max_abs_diff(&s) > 1e-2);
    }

    #[test]
    fn client_examples() {
        let (backbone, _, _) = init_model(&Rng::new(7), &dims(), 3, 0.5).unwrap();
        let probe = rng_normal(&mut Rng::new(2), 16, 5, 1.0);
        let local = stack(21);
        let cfg = FusionConfig::default();
        let out = client_pia(&backbone, &local, &local, &probe, &cfg).unwrap();
        assert_eq!(out, local);

        let far = stack(22);
        let keep = FusionConfig {
            lambda_merge: 1.0,
            ..cfg.clone()
        };
        assert_eq!(client_pia(&backbone, &far, &local, &probe, &keep).unwrap(), local);

        let moved = permute_bottleneck(&local, &[vec![3, 2, 1, 0], vec![0, 2, 1, 3]]).unwrap();
        for mode in [CostMode::Activation, CostMode::Weight] {
            let c = FusionConfig {
                client_cost_mode: mode,
                ..cfg.clone()
            };
            let out = client_pia(&backbone, &moved, &local, &probe, &c).unwrap();
            assert!(out.max_abs_diff(&local) < 1e-6, "{mode:?}");
        }

        assert!(matches!(
            client_pia(&backbone, &far, &local, &Matrix::zeros(0, 5), &cfg),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn faults_break_planted_recovery() {
        let anchor = stack(5);
        let moved = permute_bottleneck(&anchor, &[vec![1, 2, 3, 0], vec![2, 3, 0, 1]]).unwrap();
        for fault in [AlignmentFault::NegateAligned, AlignmentFault::TransposePlan] {
            let (aligned, _) = align_stack_with_fault(&moved, &anchor, AlignCost::Weight, fault).unwrap();
            assert!(aligned.max_abs_diff(&anchor) > 1e-3, "{fault:?}");
        }
    }

    proptest! {
        #[test]
        fn server_is_order_covariant(seed in any::<u64>(), k in 2usize..5) {
            let mut rng = Rng::new(seed);
            let stacks: Vec<AdapterStack> = (0..k).map(|i| stack(seed ^ (i as u64 + 1))).collect();
            let sizes: Vec<usize> = (0..k).map(|_| 1 + rng.below(50)).collect();
            let order = random_perm(&mut rng, k);
            let shuffled: Vec<AdapterStack> = order.iter().map(|&i| stacks[i].clone()).collect();
            let shuffled_sizes: Vec<usize> = order.iter().map(|&i| sizes[i]).collect();
            let cfg = FusionConfig::default();
            let a = server_pia(&stacks, &sizes, &cfg).unwrap();
            let b = server_pia(&shuffled, &shuffled_sizes, &cfg).unwrap();
            let bits = |s: &AdapterStack| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
        }
    }
}
