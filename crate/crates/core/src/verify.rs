//! Self-checks run by `fedpia verify`. Each oracle computes the same
//! quantity a second, slower way and compares.

use crate::data::Labels;
use crate::error::Result;
use crate::fedsim::{run_experiment, ExperimentConfig, Method, RoundMetrics};
use crate::model::{
    forward, forward_features, loss_and_backward, loss_and_logit_grad, AdapterStack, Backbone,
    ClassifierHead, ModelDims, Nonlinearity, ParamSet,
};
use crate::numerics::{Matrix, Rng};
use crate::ot::solve_exact;
use crate::pia::{align_stack_with_fault, permute_bottleneck, AlignCost, AlignmentFault};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error, or the failing case's inputs.
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub alignment_fault: AlignmentFault,
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        out.push(current.clone());
        // Next lexicographic permutation.
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).expect("pivot exists");
        current.swap(i - 1, j);
        current[i..].reverse();
    }
}

/// Minimum over all `n!` permutations of `(1/n)·Σ_i cost[i, π(i)]`.
pub fn brute_force_transport_cost(cost: &Matrix) -> f64 {
    let n = cost.rows();
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

fn random_cost(rng: &mut Rng, n: usize) -> Matrix {
    let data = (0..n * n).map(|_| rng.uniform()).collect();
    Matrix::from_vec(n, n, data).expect("finite")
}

pub fn check_ot_exactness(seed: u64, instances: usize) -> Result<OracleReport> {
    let mut rng = Rng::new(seed).split("verify/ot");
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 2..=6 {
        let uniform = vec![1.0 / n as f64; n];
        for _ in 0..instances {
            let cost = random_cost(&mut rng, n);
            let exact = solve_exact(&cost, &uniform, &uniform)?.cost;
            let brute = brute_force_transport_cost(&cost);
            let err = (exact - brute).abs();
            cases += 1;
            if err > 1e-9 {
                return Ok(OracleReport {
                    name: "ot_bruteforce",
                    passed: false,
                    cases,
                    detail: format!("n={n} exact={exact} brute={brute} cost={:?}", cost.as_slice()),
                });
            }
            worst = worst.max(err);
        }
    }
    Ok(OracleReport {
        name: "ot_bruteforce",
        passed: true,
        cases,
        detail: format!("max |exact - brute| = {worst:.3e}"),
    })
}

/// A random permutation of `0..n`.
pub fn random_permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut p);
    p
}

pub fn check_planted_permutation(seed: u64, count: usize, fault: AlignmentFault) -> Result<OracleReport> {
    let dims = ModelDims {
        input_dim: 16,
        hidden: 16,
        bottleneck: 8,
        depth: 2,
    };
    let root = Rng::new(seed).split("verify/planted");
    let backbone = Backbone::init(&mut root.split("backbone"), &dims)?;
    let probe = crate::numerics::rng_normal(&mut root.split("probe"), 32, dims.input_dim, 1.0);
    let mut worst_weight = 0.0f64;
    let mut worst_forward = 0.0f64;
    for case in 0..count {
        let mut rng = root.split(&format!("case{case}"));
        let original = AdapterStack::init(&mut rng, &dims, 1.0)?;
        let perms: Vec<Vec<usize>> = (0..dims.depth)
            .map(|_| random_permutation(&mut rng, dims.bottleneck))
            .collect();
        let permuted = permute_bottleneck(&original, &perms)?;
        let (aligned, _) = align_stack_with_fault(&permuted, &original, AlignCost::Weight, fault)?;
        let weight_err = aligned.max_abs_diff(&original);
        let a = forward_features(&backbone, &aligned, &probe)?;
        let b = forward_features(&backbone, &permuted, &probe)?;
        let forward_err = a.features().max_abs_diff(b.features());
        if weight_err > 1e-9 || forward_err > 1e-6 {
            return Ok(OracleReport {
                name: "planted_permutation",
                passed: false,
                cases: case + 1,
                detail: format!(
                    "case {case}: perms={perms:?} weight_err={weight_err:.3e} forward_err={forward_err:.3e}"
                ),
            });
        }
        worst_weight = worst_weight.max(weight_err);
        worst_forward = worst_forward.max(forward_err);
    }
    Ok(OracleReport {
        name: "planted_permutation",
        passed: true,
        cases: count,
        detail: format!("max weight err {worst_weight:.3e}, max forward err {worst_forward:.3e}"),
    })
}

/// Everything a gradient check perturbs.
#[derive(Clone, Debug)]
pub struct TinyModel {
    pub backbone: Backbone,
    pub adapters: AdapterStack,
    pub head: ClassifierHead,
    pub batch: Matrix,
    pub labels: Labels,
}

impl TinyModel {
    pub fn random(rng: &mut Rng, multi_label: bool, nonlinearity: Nonlinearity) -> Result<Self> {
        let dims = ModelDims {
            input_dim: 3 + rng.below(3),
            hidden: 4 + rng.below(3),
            bottleneck: 2 + rng.below(2),
            depth: 1 + rng.below(2),
        };
        let classes = 2 + rng.below(3);
        let n = 4 + rng.below(4);
        let mut backbone = Backbone::init(rng, &dims)?;
        backbone.frozen = false;
        let mut adapters = AdapterStack::init(rng, &dims, 0.5)?;
        for l in &mut adapters.layers {
            l.nonlinearity = nonlinearity;
        }
        let head = ClassifierHead::init(rng, dims.hidden, classes, 0.5)?;
        let batch = crate::numerics::rng_normal(rng, n, dims.input_dim, 1.0);
        let labels = if multi_label {
            let data = (0..n * classes).map(|_| f64::from(u8::from(rng.uniform() < 0.5))).collect();
            Labels::Multi(Matrix::from_vec(n, classes, data)?)
        } else {
            Labels::Single((0..n).map(|_| rng.below(classes)).collect())
        };
        Ok(Self {
            backbone,
            adapters,
            head,
            batch,
            labels,
        })
    }

    pub fn loss(&self) -> Result<f64> {
        let (logits, _) = forward(&self.backbone, &self.adapters, &self.head, &self.batch)?;
        Ok(loss_and_logit_grad(&logits, &self.labels)?.0)
    }

    /// Analytic gradient flattened as adapters, head, backbone.
    pub fn analytic_gradient(&self) -> Result<Vec<f64>> {
        let (logits, cache) = forward(&self.backbone, &self.adapters, &self.head, &self.batch)?;
        let (_, g) = loss_and_backward(
            &logits,
            &self.labels,
            &cache,
            &self.backbone,
            &self.adapters,
            &self.head,
        )?;
        let mut flat = g.adapters.flatten();
        flat.extend(g.head.flatten());
        flat.extend(g.backbone.expect("backbone unfrozen").flatten());
        Ok(flat)
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        let tensors = self
            .adapters
            .tensors_mut()
            .into_iter()
            .chain(self.head.tensors_mut())
            .chain(self.backbone.tensors_mut());
        for t in tensors {
            if index < t.len() {
                return &mut t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Central differences of the loss in every parameter.
    pub fn numeric_gradient(&self, eps: f64) -> Result<Vec<f64>> {
        let total = self.adapters.num_params() + self.head.num_params() + self.backbone.num_params();
        let mut probe = self.clone();
        (0..total)
            .map(|i| {
                let orig = *probe.param_mut(i);
                *probe.param_mut(i) = orig + eps;
                let plus = probe.loss()?;
                *probe.param_mut(i) = orig - eps;
                let minus = probe.loss()?;
                *probe.param_mut(i) = orig;
                Ok((plus - minus) / (2.0 * eps))
            })
            .collect()
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn check_gradients(seed: u64, models: usize) -> Result<OracleReport> {
    let mut rng = Rng::new(seed).split("verify/gradients");
    let mut worst = 0.0f64;
    for i in 0..models {
        let multi = i % 2 == 1;
        let nonlinearity = if i % 4 < 2 { Nonlinearity::Relu } else { Nonlinearity::Tanh };
        let model = TinyModel::random(&mut rng, multi, nonlinearity)?;
        let err = relative_error(&model.analytic_gradient()?, &model.numeric_gradient(1e-5)?);
        if !(err < 1e-3) {
            return Ok(OracleReport {
                name: "gradient_check",
                passed: false,
                cases: i + 1,
                detail: format!("model {i} (multi_label={multi}, {nonlinearity:?}): relative error {err:.3e}"),
            });
        }
        worst = worst.max(err);
    }
    Ok(OracleReport {
        name: "gradient_check",
        passed: true,
        cases: models,
        detail: format!("max relative error {worst:.3e}"),
    })
}

/// Small experiment used by the ablation check.
pub fn smoke_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        clients: 3,
        rounds: 3,
        local_steps: 10,
        base_lr: 1e-3,
        ..ExperimentConfig::default()
    };
    cfg.data.samples_per_client = 60;
    cfg
}

/// Every numeric field of two metric streams, compared bit for bit.
pub fn metrics_bitwise_equal(a: &[RoundMetrics], b: &[RoundMetrics]) -> bool {
    let bits = |m: &[RoundMetrics]| -> Vec<u64> {
        m.iter()
            .flat_map(|r| {
                let mut v = vec![r.round as u64];
                for c in &r.clients {
                    v.extend([
                        c.client as u64,
                        c.train_size as u64,
                        c.loss_at_round_start.to_bits(),
                        c.loss_at_round_end.to_bits(),
                        c.accuracy.to_bits(),
                        c.macro_f1.to_bits(),
                    ]);
                }
                v
            })
            .collect()
    };
    bits(a) == bits(b)
}

pub fn check_ablation_equivalence(seed: u64) -> Result<OracleReport> {
    let mut cfg = smoke_config();
    let baseline = run_experiment(&cfg, Method::FedavgAdapters, seed)?;
    cfg.server_pia_on = false;
    cfg.client_pia_on = false;
    cfg.fusion.lambda_merge = 0.0;
    let reduced = run_experiment(&cfg, Method::Fedpia, seed)?;
    let passed = metrics_bitwise_equal(&baseline.rounds, &reduced.rounds)
        && baseline.final_global == reduced.final_global;
    Ok(OracleReport {
        name: "ablation_equivalence",
        passed,
        cases: 1,
        detail: if passed {
            "fedpia without PIA and lambda 0 matches fedavg_adapters bitwise".into()
        } else {
            format!("seed {seed}: metric streams differ")
        },
    })
}

pub fn run_all(opts: &VerifyOptions) -> Result<Vec<OracleReport>> {
    Ok(vec![
        check_ot_exactness(opts.seed, 100)?,
        check_planted_permutation(opts.seed, 50, opts.alignment_fault)?,
        check_gradients(opts.seed, 20)?,
        check_ablation_equivalence(opts.seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_count_and_order() {
        let p = permutations(4);
        assert_eq!(p.len(), 24);
        assert_eq!(p[0], vec![0, 1, 2, 3]);
        assert_eq!(p[23], vec![3, 2, 1, 0]);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn brute_force_on_known_instance() {
        let cost = Matrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(brute_force_transport_cost(&cost), 1.5);
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negated_alignment_is_caught() {
        let r = check_planted_permutation(0, 3, AlignmentFault::NegateAligned).unwrap();
        assert!(!r.passed);
        assert!(r.detail.contains("perms="));
        assert!(check_planted_permutation(0, 3, AlignmentFault::None).unwrap().passed);
    }
}
