//! Built-in correctness checks run by the `selftest` command.
//!
//! Every check is independent and reports pass/fail with a short detail
//! string. A gradient fault can be injected into one op to confirm that the
//! gradient checks notice it.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::attention::{self, ForwardCtx, TransformerBlockParams};
use crate::autodiff::{FlopStage, MatmulKind, Tape, Var};
use crate::error::{Error, Result};
use crate::flops::{self, Dims};
use crate::gradcheck;
use crate::metrics::{self, ConfusionMatrix};
use crate::model::{forward_bound, Model, ModelConfig};
use crate::optim::{lamb_step, LambConfig, LambState};
use crate::params::{BoundParams, ParamStore};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Ops whose backward pass can be perturbed.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "softmax",
    "attention_weights",
    "layer_norm",
    "gelu",
    "dropout",
    "permute",
    "reshape",
    "broadcast_to",
    "sum_axis",
    "mean_axis",
    "sum",
    "sparse_cross_entropy",
];

/// Gradient checks must agree to this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    /// Scale the backward pass of this op by 1.05.
    pub perturb_grad: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Params = BTreeMap<String, Tensor<f64>>;
type LossFn = fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(
        shape.to_vec(),
        1.0,
        &mut rng::stream(seed, Purpose::Bench, &[]),
    )
}

fn params(items: &[(&str, &[usize])]) -> Params {
    items
        .iter()
        .enumerate()
        .map(|(i, (n, s))| (n.to_string(), randn(s, 50 + i as u64)))
        .collect()
}

fn weighted_sum(t: &mut Tape<f64>, x: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let w = t.constant(randn(&shape, 777));
    let p = t.mul(x, w)?;
    t.sum(p)
}

fn op_cases() -> Vec<(&'static str, Params, LossFn)> {
    vec![
        (
            "matmul",
            params(&[("a", &[2, 3, 4]), ("b", &[4, 2])]),
            |t, v| {
                let x = t.matmul(v["a"], v["b"])?;
                weighted_sum(t, x)
            },
        ),
        (
            "add/sub/mul/scale",
            params(&[("a", &[2, 3]), ("b", &[3])]),
            |t, v| {
                let x = t.add(v["a"], v["b"])?;
                let y = t.sub(x, v["b"])?;
                let z = t.mul(y, x)?;
                let z = t.scale(z, 0.5)?;
                weighted_sum(t, z)
            },
        ),
        ("softmax", params(&[("a", &[3, 4])]), |t, v| {
            let x = t.softmax(v["a"], 1)?;
            weighted_sum(t, x)
        }),
        (
            "attention_weights",
            params(&[("q", &[2, 3, 4]), ("k", &[1, 5, 4]), ("m", &[3, 5])]),
            |t, v| {
                let x = t.attention_weights(v["q"], v["k"], 0.7, Some(v["m"]))?;
                weighted_sum(t, x)
            },
        ),
        (
            "layer_norm",
            params(&[("a", &[2, 5]), ("s", &[5]), ("o", &[5])]),
            |t, v| {
                let x = t.layer_norm(v["a"], v["s"], v["o"], 1e-5)?;
                weighted_sum(t, x)
            },
        ),
        ("gelu", params(&[("a", &[7])]), |t, v| {
            let x = t.gelu(v["a"])?;
            weighted_sum(t, x)
        }),
        ("dropout", params(&[("a", &[10])]), |t, v| {
            let mut r = rng::stream(1, Purpose::Dropout, &[]);
            let x = t.dropout(v["a"], 0.4, true, &mut r)?;
            weighted_sum(t, x)
        }),
        (
            "permute/reshape/broadcast",
            params(&[("a", &[2, 3, 4]), ("b", &[3, 1])]),
            |t, v| {
                let x = t.permute(v["a"], &[1, 0, 2])?;
                let x = t.reshape(x, &[3, 8])?;
                let b = t.broadcast_to(v["b"], &[3, 8])?;
                let x = t.mul(x, b)?;
                weighted_sum(t, x)
            },
        ),
        (
            "sum_axis/mean_axis",
            params(&[("a", &[3, 4, 2])]),
            |t, v| {
                let x = t.sum_axis(v["a"], 1)?;
                let x = t.mean_axis(x, 1)?;
                weighted_sum(t, x)
            },
        ),
        ("sparse_cross_entropy", params(&[("a", &[4, 3])]), |t, v| {
            t.sparse_cross_entropy(v["a"], &[2, 0, 1, 1])
        }),
        ("transformer_block", block_params(), |t, v| {
            let bound = BoundParams::from_map(v.clone());
            let block = TransformerBlockParams::bind("b", 2, &bound)?;
            let mut r = rng::stream(0, Purpose::Dropout, &[]);
            let mut ctx = ForwardCtx::eval(&mut r);
            let y = attention::latent_transformer(t, v["input"], &[block], false, &mut ctx, "l")?;
            weighted_sum(t, y)
        }),
    ]
}

fn block_params() -> Params {
    let store = ParamStore::<f64>::initialize(
        &attention::transformer_block_specs("b", 4),
        &mut rng::stream(3, Purpose::Init, &[]),
    )
    .expect("valid specs");
    let mut p = gradcheck::conditioned_point(&store, 0.3, 4);
    p.insert("input".into(), randn(&[2, 3, 4], 5));
    p
}

fn fault_tape(fault: Option<&'static str>) -> impl Fn() -> Tape<f64> {
    move || {
        let mut t = Tape::new();
        if let Some(op) = fault {
            t.inject_grad_fault(op, 1.05);
        }
        t
    }
}

fn grad_result(report: Result<gradcheck::GradCheckReport>) -> (bool, String) {
    match report {
        Ok(r) => (
            r.max_rel_error < GRAD_TOLERANCE,
            format!(
                "max rel err {:.2e} at {}[{}] ({} elements)",
                r.max_rel_error, r.worst.0, r.worst.1, r.checked
            ),
        ),
        Err(e) => (false, e.to_string()),
    }
}

fn permute_rows(x: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let s = x.shape();
    let (b, m, c) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for &src in perm {
            let at = (bi * m + src) * c;
            out.extend_from_slice(&x.data()[at..at + c]);
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Largest output change of a cross-attention block over `trials` random
/// permutations of the data rows (32-bit).
pub fn permutation_invariance_error(trials: usize, seed: u64) -> Result<f32> {
    let (n, m, d, heads) = (6, 11, 16, 4);
    let specs = attention::cross_attention_specs("x", d, d);
    let store = ParamStore::<f32>::initialize(&specs, &mut rng::stream(seed, Purpose::Init, &[]))?;
    let mut r = rng::stream(seed, Purpose::Bench, &[]);
    let mut worst = 0f32;
    for _ in 0..trials {
        let latent = Tensor::<f32>::randn(vec![2, n, d], 1.0, &mut r);
        let data = Tensor::<f32>::randn(vec![2, m, d], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut r);
        let a = attention::cross_attend(&store, "x", heads, &latent, &data)?;
        let b = attention::cross_attend(&store, "x", heads, &latent, &permute_rows(&data, &perm))?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(worst)
}

fn check_attention_weights() -> Result<(bool, String)> {
    let model = Model::<f64>::new(ModelConfig {
        causal_latent: true,
        ..ModelConfig::tiny()
    })?;
    let mut tape = Tape::new().capture_attention();
    let images = Tensor::rand_uniform(
        vec![2, 8, 8, 3],
        0.0,
        1.0,
        &mut rng::stream(0, Purpose::Bench, &[]),
    );
    let mut r = rng::stream(0, Purpose::Dropout, &[]);
    let mut ctx = ForwardCtx::eval(&mut r);
    model.forward(&mut tape, &images, &mut ctx)?;
    let mut worst_sum = 0f64;
    let mut future = 0f64;
    for (label, w) in tape.captured() {
        let k = *w.shape().last().unwrap();
        for (row_i, row) in w.data().chunks(k).enumerate() {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            if label.starts_with("latent") {
                let q = row_i % w.shape()[w.rank() - 2];
                future = future.max(row[q + 1..].iter().fold(0.0, |a, &b| a.max(b)));
            }
        }
    }
    Ok((
        worst_sum < 1e-12 && future < 1e-12 && !tape.captured().is_empty(),
        format!(
            "{} maps, row-sum err {worst_sum:.1e}, max future weight {future:.1e}",
            tape.captured().len()
        ),
    ))
}

fn check_flops() -> Result<(bool, String)> {
    let cfg = ModelConfig {
        share_weights: false,
        repeats: 3,
        ..ModelConfig::tiny()
    };
    let model = Model::<f32>::new(cfg.clone())?;
    let mut tape = Tape::new();
    let mut r = rng::stream(0, Purpose::Dropout, &[]);
    let mut ctx = ForwardCtx::eval(&mut r);
    model.forward(&mut tape, &Tensor::zeros(vec![2, 8, 8, 3]), &mut ctx)?;
    let f = flops::analytic(&Dims::of(&cfg, 2));
    let l = tape.flops();
    let ok = l.total() == f.total()
        && l.attention_products(FlopStage::CrossAttention) == f.cross_products
        && l.get(FlopStage::LatentTransformer, MatmulKind::Dense) == f.latent_dense;
    Ok((
        ok,
        format!("ledger {} vs analytic {}", l.total(), f.total()),
    ))
}

fn check_lamb() -> Result<(bool, String)> {
    let mut p = ParamStore::<f64>::default();
    p.insert("w", Tensor::scalar(1.0), false)?;
    let mut g = crate::autodiff::Gradients::default();
    g.insert("w", Tensor::scalar(1.0));
    let c = LambConfig::default();
    let mut s = LambState::new(c, &p);
    lamb_step(&mut p, &g, &mut s)?;
    // m̂ = v̂ = 1, u = 1/(1+ε) + λ, ratio = 1/u, so w = 1 - lr
    let u = 1.0 / (1.0 + c.epsilon) + c.weight_decay;
    let want = 1.0 - c.learning_rate * (1.0 / u) * u;
    let got = p.get("w").unwrap().data()[0];
    Ok((
        (got - want).abs() < 1e-10,
        format!("w = {got:.12} (oracle {want:.12})"),
    ))
}

fn check_metrics() -> Result<(bool, String)> {
    let cm = ConfusionMatrix::from_counts(
        vec!["Normal".into(), "Abnormal".into()],
        vec![vec![21, 2], vec![3, 66]],
    )?;
    let per = metrics::per_class_metrics(&cm);
    let kappa = metrics::cohen_kappa(&cm)?;
    let p_e = (23.0 * 24.0 + 69.0 * 68.0) / (92.0f64 * 92.0);
    let kappa_oracle = (87.0 / 92.0 - p_e) / (1.0 - p_e);
    let s = metrics::binary_screening_metrics(&cm, 1)?;
    let ok = per.accuracy == 87.0 / 92.0
        && (kappa - kappa_oracle).abs() < 1e-12
        && per.classes[1].precision == 66.0 / 68.0
        && per.classes[0].recall == 21.0 / 23.0
        && s.negative_predictive_value == 21.0 / 24.0;
    Ok((
        ok,
        format!("accuracy {:.4}, kappa {kappa:.4}", per.accuracy),
    ))
}

/// Runs every check. Fails only on an unknown `perturb_grad` op; individual
/// check failures are reported in the results.
pub fn run(opts: &SelftestOptions) -> Result<Vec<CheckResult>> {
    let fault: Option<&'static str> = match &opts.perturb_grad {
        None => None,
        Some(op) => Some(
            DIFFERENTIABLE_OPS
                .iter()
                .copied()
                .find(|o| o == op)
                .ok_or_else(|| {
                    Error::arg(format!(
                        "unknown op {op:?}; expected one of {}",
                        DIFFERENTIABLE_OPS.join(", ")
                    ))
                })?,
        ),
    };
    let mut results = Vec::new();
    let mut record = |name: String, f: &mut dyn FnMut() -> Result<(bool, String)>| {
        let start = Instant::now();
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        results.push(CheckResult {
            name,
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    };
    for (name, p, loss) in op_cases() {
        record(format!("grad:{name}"), &mut || {
            Ok(grad_result(gradcheck::check_with_tape(
                &p,
                fault_tape(fault),
                loss,
            )))
        });
    }
    record("grad:model".into(), &mut || {
        let cfg = ModelConfig::tiny();
        let model = Model::<f64>::new(cfg.clone())?;
        let p = gradcheck::conditioned_point(&model.params, 0.3, 3);
        let images = Tensor::rand_uniform(
            vec![2, 8, 8, 3],
            0.0,
            1.0,
            &mut rng::stream(1, Purpose::Bench, &[]),
        );
        Ok(grad_result(gradcheck::check_with_tape(
            &p,
            fault_tape(fault),
            |t, v| {
                let bound = BoundParams::from_map(v.clone());
                let mut r = rng::stream(0, Purpose::Dropout, &[]);
                let mut ctx = ForwardCtx::eval(&mut r);
                let logits = forward_bound(t, &bound, &cfg, &images, &mut ctx)?;
                t.sparse_cross_entropy(logits, &[0, 1])
            },
        )))
    });
    record("attention:permutation_invariance".into(), &mut || {
        let e = permutation_invariance_error(20, 11)?;
        Ok((
            e <= 1e-5,
            format!("max change {e:.2e} over 20 permutations"),
        ))
    });
    record("attention:weights".into(), &mut check_attention_weights);
    record("attention:flop_ledger".into(), &mut check_flops);
    record("lamb:oracle".into(), &mut check_lamb);
    record("metrics:oracles".into(), &mut check_metrics);
    Ok(results)
}

/// Fixed-width pass/fail table.
pub fn render(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{:<4}  {:<width$}  {:>7.3}s  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} checks, {failed} failed\n", results.len()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let results = run(&SelftestOptions::default()).unwrap();
        let table = render(&results);
        assert!(results.iter().all(|r| r.passed), "{table}");
    }

    #[test]
    fn perturbed_gelu_is_caught() {
        let results = run(&SelftestOptions {
            perturb_grad: Some("gelu".into()),
        })
        .unwrap();
        let failed: Vec<&str> = results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect();
        assert!(failed.contains(&"grad:gelu"));
        assert!(!failed.contains(&"grad:softmax"));
        assert!(run(&SelftestOptions {
            perturb_grad: Some("nope".into())
        })
        .is_err());
    }
}
