//! The gradient-verification suite behind the `gradcheck` CLI subcommand:
//! finite-difference checks for every differentiable operation and for the
//! fully composed model on a 2x2-patch-grid toy configuration.

use crate::config::{ModelSection, Pooling};
use crate::head::LabelVector;
use crate::model::{training_loss, ModelConfig, ModelParams};
use crate::params::Stager;
use crate::rng::Rng;
use crate::tensor::{gradcheck, GradcheckConfig, GradcheckReport, Tape, Tensor, TensorError, Var};

/// One named check outcome.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradcheckReport,
}

/// Default settings for the suite: central differences with a step small
/// enough that truncation error sits well below the 1e-4 relative gate.
pub fn suite_config() -> GradcheckConfig {
    GradcheckConfig {
        step: 1e-4,
        ..GradcheckConfig::default()
    }
}

type CheckFn = Box<dyn FnMut(&mut Tape, Var) -> Result<Var, TensorError>>;

fn op_checks(seed: u64) -> Vec<(&'static str, Tensor, CheckFn)> {
    let mut rng = Rng::seeded(seed);
    let x = Tensor::randn(&mut rng, &[3, 4], 1.0);
    let other = Tensor::randn(&mut rng, &[3, 4], 1.0);
    let mat = Tensor::randn(&mut rng, &[4, 3], 1.0);
    let gamma = Tensor::randn(&mut rng, &[4], 0.5);
    let beta = Tensor::randn(&mut rng, &[4], 0.5);
    let pool_scores = Tensor::new(
        (0..10).map(|_| rng.uniform()).collect::<Vec<f64>>(),
        &[5, 2],
    )
    .unwrap();
    let probs = Tensor::new(
        (0..3).map(|_| rng.uniform_in(0.05, 0.95)).collect::<Vec<f64>>(),
        &[3],
    )
    .unwrap();
    let labels = LabelVector::new(vec![1.0, 0.0, 1.0]).unwrap();

    let mut checks: Vec<(&'static str, Tensor, CheckFn)> = Vec::new();
    let square_sum = |t: &mut Tape, y: Var| -> Result<Var, TensorError> {
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    };

    checks.push(("add", x.clone(), {
        let o = other.clone();
        Box::new(move |t, v| {
            let ov = t.leaf(o.clone());
            let y = t.add(v, ov)?;
            square_sum(t, y)
        })
    }));
    checks.push(("sub", x.clone(), {
        let o = other.clone();
        Box::new(move |t, v| {
            let ov = t.leaf(o.clone());
            let y = t.sub(ov, v)?;
            square_sum(t, y)
        })
    }));
    checks.push(("mul", x.clone(), {
        let o = other.clone();
        Box::new(move |t, v| {
            let ov = t.leaf(o.clone());
            let y = t.mul(v, ov)?;
            square_sum(t, y)
        })
    }));
    checks.push(("div", x.clone(), {
        let o = other.clone();
        Box::new(move |t, v| {
            let ov = t.leaf(o.clone());
            let denom = t.add_scalar(ov, 3.0);
            let y = t.div(v, denom)?;
            square_sum(t, y)
        })
    }));
    checks.push(("matmul", x.clone(), {
        let m = mat.clone();
        Box::new(move |t, v| {
            let mv = t.leaf(m.clone());
            let y = t.matmul(v, mv)?;
            square_sum(t, y)
        })
    }));
    checks.push(("matmul_rhs", mat.clone(), {
        let xx = x.clone();
        Box::new(move |t, v| {
            let xv = t.leaf(xx.clone());
            let y = t.matmul(xv, v)?;
            square_sum(t, y)
        })
    }));
    checks.push((
        "transpose",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.transpose(v)?;
            square_sum(t, y)
        }),
    ));
    checks.push(("concat_slice", x.clone(), {
        let o = other.clone();
        Box::new(move |t, v| {
            let ov = t.leaf(o.clone());
            let joined = t.concat(&[v, ov], 1)?;
            let y = t.slice(joined, 1, 2, 6)?;
            square_sum(t, y)
        })
    }));
    checks.push((
        "reshape",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.reshape(v, &[2, 6])?;
            square_sum(t, y)
        }),
    ));
    checks.push((
        "gather_rows",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.gather_rows(v, &[2, 0, 0, 1])?;
            square_sum(t, y)
        }),
    ));
    checks.push((
        "repeat_rows",
        x.clone(),
        Box::new(move |t, v| {
            let row = t.slice(v, 0, 1, 2)?;
            let y = t.repeat_rows(row, 4)?;
            square_sum(t, y)
        }),
    ));
    checks.push((
        "sigmoid",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.sigmoid(v);
            square_sum(t, y)
        }),
    ));
    checks.push((
        "tanh",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.tanh(v);
            square_sum(t, y)
        }),
    ));
    checks.push((
        "gelu",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.gelu(v);
            square_sum(t, y)
        }),
    ));
    checks.push((
        "log",
        x.clone(),
        Box::new(move |t, v| {
            let shifted = t.add_scalar(v, 5.0);
            let y = t.log(shifted);
            Ok(t.sum(y))
        }),
    ));
    checks.push((
        "softmax",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.softmax(v, 1)?;
            square_sum(t, y)
        }),
    ));
    checks.push(("layer_norm_x", x.clone(), {
        let (g, b) = (gamma.clone(), beta.clone());
        Box::new(move |t, v| {
            let gv = t.leaf(g.clone());
            let bv = t.leaf(b.clone());
            let y = t.layer_norm(v, gv, bv)?;
            square_sum(t, y)
        })
    }));
    checks.push(("layer_norm_gamma", gamma.clone(), {
        let (xx, b) = (x.clone(), beta.clone());
        Box::new(move |t, v| {
            let xv = t.leaf(xx.clone());
            let bv = t.leaf(b.clone());
            let y = t.layer_norm(xv, v, bv)?;
            square_sum(t, y)
        })
    }));
    checks.push((
        "mean",
        x.clone(),
        Box::new(move |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.mean(sq))
        }),
    ));
    checks.push((
        "scalar_ops",
        x.clone(),
        Box::new(move |t, v| {
            let y = t.mul_scalar(v, -1.75);
            let z = t.add_scalar(y, 0.5);
            square_sum(t, z)
        }),
    ));
    checks.push((
        "topk_pool",
        pool_scores.clone(),
        Box::new(move |t, v| {
            let pooled = crate::head::topk_pool(t, v, 3)?;
            square_sum(t, pooled)
        }),
    ));
    checks.push((
        "avg_pool",
        pool_scores.clone(),
        Box::new(move |t, v| {
            let pooled = crate::head::avg_pool(t, v)?;
            square_sum(t, pooled)
        }),
    ));
    checks.push((
        "max_pool",
        pool_scores,
        Box::new(move |t, v| {
            let pooled = crate::head::max_pool(t, v)?;
            square_sum(t, pooled)
        }),
    ));
    checks.push((
        "mce_loss",
        probs,
        Box::new(move |t, v| crate::head::mce_loss(t, v, &labels)),
    ));
    checks
}

/// Gradcheck every differentiable operation over the given seeds.
pub fn op_gradchecks(seeds: &[u64], cfg: &GradcheckConfig) -> Vec<CheckOutcome> {
    let mut worst: std::collections::BTreeMap<String, GradcheckReport> =
        std::collections::BTreeMap::new();
    for &seed in seeds {
        for (name, input, mut f) in op_checks(seed) {
            let report = gradcheck(&mut f, &input, cfg)
                .expect("op checks are well-formed");
            worst
                .entry(name.to_string())
                .and_modify(|existing| {
                    let strictly_worse = (!report.pass && existing.pass)
                        || (report.pass == existing.pass
                            && report.max_rel_err > existing.max_rel_err);
                    if strictly_worse {
                        *existing = report.clone();
                    }
                })
                .or_insert(report);
        }
    }
    worst
        .into_iter()
        .map(|(name, report)| CheckOutcome { name, report })
        .collect()
}

/// The 2x2-grid toy configuration for full-model checks.
pub fn toy_model_section() -> ModelSection {
    ModelSection {
        image_size: 4,
        patch_size: 2,
        embed_dim: 8,
        num_heads: 2,
        num_blocks: 1,
        mlp_ratio: 2,
        dropout: 0.0,
        token_dim: 2,
        hidden_dim: 4,
        classes: 2,
        class_token: true,
        context_fusion: true,
        pooling: Pooling::TopK,
        top_k: 2,
    }
}

/// Gradcheck the full composed model (loss included) with respect to every
/// parameter, one outcome per seed.
pub fn model_gradchecks(seeds: &[u64], cfg: &GradcheckConfig) -> Vec<CheckOutcome> {
    let section = toy_model_section();
    let config = ModelConfig::from_section(&section).expect("toy section is valid");
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let mut rng = Rng::seeded(seed);
        let params = ModelParams::init(&mut rng, &config);
        let image = Tensor::new(
            (0..4 * 4 * 3).map(|_| rng.uniform()).collect::<Vec<f64>>(),
            &[4, 4, 3],
        )
        .unwrap();
        let labels = LabelVector::new(vec![1.0, 0.0]).unwrap();

        let mut named: Vec<(String, Tensor)> = Vec::new();
        params.visit(&mut |name, t| named.push((name, t.clone())));
        let mut merged: Option<GradcheckReport> = None;
        for (name, tensor) in &named {
            let report = gradcheck(
                |tape, v| {
                    let mut stager = Stager::with_substitute(tape, name, v);
                    let vars = params.stage(&mut stager);
                    let pass = training_loss(stager.tape(), &vars, &config, &image, &labels, None)
                        .map_err(|e| match e {
                            crate::error::Error::Tensor(t) => t,
                            other => TensorError::Contract {
                                op: "model",
                                msg: other.to_string(),
                            },
                        })?;
                    Ok(pass.loss)
                },
                tensor,
                cfg,
            )
            .expect("model check is well-formed");
            match &mut merged {
                None => merged = Some(report),
                Some(existing) => {
                    existing.checked += report.checked;
                    existing.fallback += report.fallback;
                    existing.max_abs_err = existing.max_abs_err.max(report.max_abs_err);
                    if report.max_rel_err > existing.max_rel_err {
                        existing.max_rel_err = report.max_rel_err;
                        existing.worst = report.worst;
                    }
                    existing.pass &= report.pass;
                }
            }
        }
        outcomes.push(CheckOutcome {
            name: format!("full_model_seed_{seed}"),
            report: merged.expect("at least one parameter"),
        });
    }
    outcomes
}
