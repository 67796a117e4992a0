//! Patch scoring, image-level pooling, and the multi-label loss.
//!
//! Each fused class stream is scored by one shared scalar classifier, so the
//! streams never read each other's features. Per-patch scores are pooled to
//! image level with top-k (or max/average, kept for ablations) and trained
//! with per-class binary cross entropy averaged over classes. The head is
//! dual-mode: sigmoid per stream during training, softmax across classes
//! when masks need a cross-class comparison.

use crate::fusion::FusedFeatures;
use crate::params::Stager;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

const INIT_STD: f64 = 0.02;

/// How raw patch logits become scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Independent per-class probabilities; the training mode.
    Sigmoid,
    /// Probabilities competing across classes; the mask-generation mode.
    Softmax,
}

/// Patch classifier weights.
///
/// `Shared` scores every class-conditioned stream with the same `[K, 1]`
/// column, keeping streams non-competing. `PerClass` is the unconditioned
/// variant: one `[K, C]` matrix over a single stream, used when the class
/// token is ablated away and the streams collapse into one.
#[derive(Debug, Clone)]
pub enum ClassifierWeights {
    Shared { w: Tensor, b: Tensor },
    PerClass { w: Tensor, b: Tensor },
}

impl ClassifierWeights {
    pub fn init_shared(rng: &mut Rng, width: usize) -> Self {
        ClassifierWeights::Shared {
            w: Tensor::randn(rng, &[width, 1], INIT_STD),
            b: Tensor::zeros(&[1, 1]),
        }
    }

    pub fn init_per_class(rng: &mut Rng, width: usize, classes: usize) -> Self {
        ClassifierWeights::PerClass {
            w: Tensor::randn(rng, &[width, classes], INIT_STD),
            b: Tensor::zeros(&[1, classes]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        let (w, b) = match self {
            ClassifierWeights::Shared { w, b } | ClassifierWeights::PerClass { w, b } => (w, b),
        };
        f(format!("{prefix}.w"), w);
        f(format!("{prefix}.b"), b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        let (w, b) = match self {
            ClassifierWeights::Shared { w, b } | ClassifierWeights::PerClass { w, b } => (w, b),
        };
        f(format!("{prefix}.w"), w);
        f(format!("{prefix}.b"), b);
    }

    pub fn stage(&self, stager: &mut Stager, prefix: &str) -> HeadVars {
        match self {
            ClassifierWeights::Shared { w, b } => HeadVars::Shared {
                w: stager.param(format!("{prefix}.w"), w),
                b: stager.param(format!("{prefix}.b"), b),
            },
            ClassifierWeights::PerClass { w, b } => HeadVars::PerClass {
                w: stager.param(format!("{prefix}.w"), w),
                b: stager.param(format!("{prefix}.b"), b),
                classes: b.shape()[1],
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum HeadVars {
    Shared { w: Var, b: Var },
    PerClass { w: Var, b: Var, classes: usize },
}

/// Image-level label vector with entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector(Vec<f64>);

impl LabelVector {
    pub fn new(values: Vec<f64>) -> Result<Self, TensorError> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TensorError::contract(
                "LabelVector",
                "entries must be 0 or 1",
            ));
        }
        Ok(LabelVector(values))
    }

    /// Build from the set of present class ids (0-based) out of `classes`.
    pub fn from_present(present: &[usize], classes: usize) -> Result<Self, TensorError> {
        let mut values = vec![0.0; classes];
        for &id in present {
            if id >= classes {
                return Err(TensorError::contract(
                    "LabelVector",
                    format!("class id {id} out of range for {classes} classes"),
                ));
            }
            values[id] = 1.0;
        }
        Ok(LabelVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-patch class scores plus the pooled image-level scores, detached from
/// any tape. In sigmoid mode every entry is an independent probability; in
/// softmax mode each patch row sums to 1.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub z: Tensor,
    pub pooled: Tensor,
    pub mode: ScoreMode,
}

impl ScoreMap {
    pub fn new(z: Tensor, pooled: Tensor, mode: ScoreMode) -> Result<Self, TensorError> {
        if z.shape().len() != 2 || pooled.shape() != [z.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "ScoreMap",
                lhs: z.shape().to_vec(),
                rhs: pooled.shape().to_vec(),
            });
        }
        if z.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TensorError::contract(
                "ScoreMap",
                "scores must lie in [0, 1]",
            ));
        }
        if mode == ScoreMode::Softmax {
            let c = z.shape()[1];
            for row in z.values().chunks_exact(c) {
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(TensorError::contract(
                        "ScoreMap",
                        format!("softmax row sums to {total}, not 1"),
                    ));
                }
            }
        }
        Ok(ScoreMap { z, pooled, mode })
    }
}

/// Raw per-patch logits `[s, C]` from the fused streams, before any score
/// nonlinearity.
pub fn patch_logits(
    tape: &mut Tape,
    fused: &FusedFeatures,
    head: &HeadVars,
) -> Result<Var, TensorError> {
    let s = fused.rows * fused.cols;
    match *head {
        HeadVars::Shared { w, b } => {
            let flat = tape.reshape(fused.features, &[fused.classes * s, fused.width])?;
            let scores = tape.matmul(flat, w)?;
            let bias = tape.repeat_rows(b, fused.classes * s)?;
            let scores = tape.add(scores, bias)?;
            let by_class = tape.reshape(scores, &[fused.classes, s])?;
            tape.transpose(by_class)
        }
        HeadVars::PerClass { w, b, .. } => {
            if fused.classes != 1 {
                return Err(TensorError::contract(
                    "patch_logits",
                    format!(
                        "per-class head expects a single stream, got {}",
                        fused.classes
                    ),
                ));
            }
            let flat = tape.reshape(fused.features, &[s, fused.width])?;
            let scores = tape.matmul(flat, w)?;
            let bias = tape.repeat_rows(b, s)?;
            tape.add(scores, bias)
        }
    }
}

/// Score every patch for every class: sigmoid per stream (training) or
/// softmax across classes (mask generation).
pub fn patch_classify(
    tape: &mut Tape,
    fused: &FusedFeatures,
    head: &HeadVars,
    mode: ScoreMode,
) -> Result<Var, TensorError> {
    let logits = patch_logits(tape, fused, head)?;
    match mode {
        ScoreMode::Sigmoid => Ok(tape.sigmoid(logits)),
        ScoreMode::Softmax => tape.softmax(logits, 1),
    }
}

/// Select the k largest scores per class column, ties broken toward the
/// lower patch index. Used during both pooling and its gradient, which
/// routes `1/k` to each selected patch and nothing elsewhere.
fn top_k_indices(column: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut indexed: Vec<(usize, f64)> = column.enumerate().collect();
    indexed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    indexed.truncate(k);
    let mut chosen: Vec<usize> = indexed.into_iter().map(|(i, _)| i).collect();
    // Accumulate in index order so topk(s) is bit-identical to avg_pool.
    chosen.sort_unstable();
    chosen
}

/// Mean of the k largest patch scores per class: `[s, C] -> [C]`.
pub fn topk_pool(tape: &mut Tape, z: Var, k: usize) -> Result<Var, TensorError> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::contract(
            "topk_pool",
            format!("expected [s, C], got {shape:?}"),
        ));
    }
    let (s, c) = (shape[0], shape[1]);
    if k == 0 || k > s {
        return Err(TensorError::contract(
            "topk_pool",
            format!("k = {k} outside 1..={s}"),
        ));
    }
    let zv = tape.values(z);
    let mut pooled = vec![0.0; c];
    let mut selected = Vec::with_capacity(c);
    for class in 0..c {
        let chosen = top_k_indices((0..s).map(|i| zv[i * c + class]), k);
        pooled[class] = chosen.iter().map(|&i| zv[i * c + class]).sum::<f64>() / k as f64;
        selected.push(chosen);
    }
    let tensor = Tensor::new(pooled, &[c])?;
    Ok(tape.push_custom(
        tensor,
        vec![z],
        Box::new(move |ctx| {
            let mut g = vec![0.0; s * c];
            for (class, chosen) in selected.iter().enumerate() {
                let share = ctx.upstream[class] / k as f64;
                for &i in chosen {
                    g[i * c + class] += share;
                }
            }
            vec![g]
        }),
    ))
}

/// Column means: `[s, C] -> [C]`.
pub fn avg_pool(tape: &mut Tape, z: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(TensorError::contract(
            "avg_pool",
            format!("expected non-empty [s, C], got {shape:?}"),
        ));
    }
    let (s, c) = (shape[0], shape[1]);
    let zv = tape.values(z);
    let mut pooled = vec![0.0; c];
    for i in 0..s {
        for class in 0..c {
            pooled[class] += zv[i * c + class];
        }
    }
    for v in &mut pooled {
        *v /= s as f64;
    }
    let tensor = Tensor::new(pooled, &[c])?;
    Ok(tape.push_custom(
        tensor,
        vec![z],
        Box::new(move |ctx| {
            let mut g = vec![0.0; s * c];
            for i in 0..s {
                for class in 0..c {
                    g[i * c + class] = ctx.upstream[class] / s as f64;
                }
            }
            vec![g]
        }),
    ))
}

/// Column maxima with the lowest-index tie rule: `[s, C] -> [C]`.
pub fn max_pool(tape: &mut Tape, z: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(TensorError::contract(
            "max_pool",
            format!("expected non-empty [s, C], got {shape:?}"),
        ));
    }
    let (s, c) = (shape[0], shape[1]);
    let zv = tape.values(z);
    let mut pooled = vec![f64::NEG_INFINITY; c];
    let mut argmax = vec![0usize; c];
    for class in 0..c {
        for i in 0..s {
            let v = zv[i * c + class];
            if v > pooled[class] {
                pooled[class] = v;
                argmax[class] = i;
            }
        }
    }
    let tensor = Tensor::new(pooled, &[c])?;
    Ok(tape.push_custom(
        tensor,
        vec![z],
        Box::new(move |ctx| {
            let mut g = vec![0.0; s * c];
            for (class, &i) in argmax.iter().enumerate() {
                g[i * c + class] = ctx.upstream[class];
            }
            vec![g]
        }),
    ))
}

/// Per-class binary cross entropy averaged over classes. Scores are clamped
/// to `[1e-12, 1 - 1e-12]` by the log operations, so saturated predictions
/// stay finite.
pub fn mce_loss(tape: &mut Tape, pooled: Var, labels: &LabelVector) -> Result<Var, TensorError> {
    let c = labels.len();
    if tape.shape(pooled) != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "mce_loss",
            lhs: tape.shape(pooled).to_vec(),
            rhs: vec![c],
        });
    }
    let y = tape.constant(labels.values().to_vec(), &[c])?;
    let ones = tape.constant(vec![1.0; c], &[c])?;
    let log_p = tape.log(pooled);
    let hit = tape.mul(y, log_p)?;
    let miss_p = tape.sub(ones, pooled)?;
    let log_miss = tape.log(miss_p);
    let not_y = tape.sub(ones, y)?;
    let miss = tape.mul(not_y, log_miss)?;
    let per_class = tape.add(hit, miss)?;
    let total = tape.sum(per_class);
    Ok(tape.mul_scalar(total, -1.0 / c as f64))
}
