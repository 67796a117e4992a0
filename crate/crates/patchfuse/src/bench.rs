//! Scaling measurements: the recurrent fusion sweep against a reference
//! quadratic attention kernel.
//!
//! The fusion sweep does work linear in the token count; doubling the
//! sequence should roughly double its wall time. Full self-attention is
//! quadratic, so the same doubling roughly quadruples it. The benchmark
//! reports the measured time ratios (median over several runs).

use crate::class_token::ConditionedFeatures;
use crate::fusion::{contextual_fusion, CfBilstmParams};
use crate::params::Stager;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub small_s: usize,
    pub large_s: usize,
    /// Median fusion seconds at (small, large).
    pub fusion_seconds: (f64, f64),
    /// Median attention seconds at (small, large).
    pub attention_seconds: (f64, f64),
    pub fusion_ratio: f64,
    pub attention_ratio: f64,
}

fn median(mut times: Vec<f64>) -> f64 {
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Grid as square as possible for a given token count.
fn grid_for(s: usize) -> (usize, usize) {
    let mut rows = (s as f64).sqrt() as usize;
    while rows > 1 && s % rows != 0 {
        rows -= 1;
    }
    (rows, s / rows)
}

fn time_fusion(s: usize, width: usize, hidden: usize, runs: usize) -> f64 {
    let (rows, cols) = grid_for(s);
    let mut rng = Rng::seeded(7);
    let params = CfBilstmParams::init(&mut rng, width, hidden);
    let features = Tensor::randn(&mut rng, &[1, s, width], 1.0);
    let mut times = Vec::with_capacity(runs);
    for _ in 0..=runs {
        let start = Instant::now();
        let mut tape = Tape::new();
        let mut stager = Stager::new(&mut tape);
        let vars = params.stage(&mut stager, "fusion");
        let cond = ConditionedFeatures {
            features: tape.leaf(features.clone()),
            classes: 1,
            rows,
            cols,
            width,
        };
        let fused = contextual_fusion(&mut tape, &cond, &vars).expect("benchmark fusion");
        std::hint::black_box(tape.values(fused.features)[0]);
        times.push(start.elapsed().as_secs_f64());
    }
    // First run is warmup.
    median(times[1..].to_vec())
}

/// Reference quadratic kernel: plain-array softmax(QK^T / sqrt(e)) V over
/// `[s, e]` tokens, single head, no tape.
pub fn quadratic_attention_reference(x: &[f64], s: usize, e: usize) -> Vec<f64> {
    let scale = 1.0 / (e as f64).sqrt();
    let mut out = vec![0.0; s * e];
    let mut row_scores = vec![0.0; s];
    for i in 0..s {
        let qi = &x[i * e..(i + 1) * e];
        let mut max = f64::NEG_INFINITY;
        for j in 0..s {
            let kj = &x[j * e..(j + 1) * e];
            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            row_scores[j] = dot * scale;
            max = max.max(row_scores[j]);
        }
        let mut norm = 0.0;
        for score in row_scores.iter_mut() {
            *score = (*score - max).exp();
            norm += *score;
        }
        let out_row = &mut out[i * e..(i + 1) * e];
        for j in 0..s {
            let weight = row_scores[j] / norm;
            let vj = &x[j * e..(j + 1) * e];
            for (o, &v) in out_row.iter_mut().zip(vj) {
                *o += weight * v;
            }
        }
    }
    out
}

fn time_attention(s: usize, e: usize, runs: usize) -> f64 {
    let mut rng = Rng::seeded(8);
    let x: Vec<f64> = (0..s * e).map(|_| rng.normal(0.0, 1.0)).collect();
    let mut times = Vec::with_capacity(runs);
    for _ in 0..=runs {
        let start = Instant::now();
        let out = quadratic_attention_reference(&x, s, e);
        std::hint::black_box(out[0]);
        times.push(start.elapsed().as_secs_f64());
    }
    median(times[1..].to_vec())
}

/// Measure both kernels at two sequence lengths.
pub fn scaling_benchmark(small_s: usize, large_s: usize, runs: usize) -> ScalingReport {
    let (width, hidden, e) = (16, 8, 16);
    let fusion_small = time_fusion(small_s, width, hidden, runs);
    let fusion_large = time_fusion(large_s, width, hidden, runs);
    let attention_small = time_attention(small_s, e, runs);
    let attention_large = time_attention(large_s, e, runs);
    ScalingReport {
        small_s,
        large_s,
        fusion_seconds: (fusion_small, fusion_large),
        attention_seconds: (attention_small, attention_large),
        fusion_ratio: fusion_large / fusion_small,
        attention_ratio: attention_large / attention_small,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_attention_rows_are_convex_combinations() {
        let mut rng = Rng::seeded(1);
        let (s, e) = (6, 4);
        let x: Vec<f64> = (0..s * e).map(|_| rng.normal(0.0, 1.0)).collect();
        let out = quadratic_attention_reference(&x, s, e);
        // Each output row lies inside the convex hull of the value rows:
        // check min/max bounds per dimension.
        for d in 0..e {
            let lo = (0..s).map(|j| x[j * e + d]).fold(f64::INFINITY, f64::min);
            let hi = (0..s).map(|j| x[j * e + d]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..s {
                let v = out[i * e + d];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn grids_cover_token_count() {
        for s in [2048, 4096, 100, 7] {
            let (r, c) = grid_for(s);
            assert_eq!(r * c, s);
        }
    }

    #[test]
    fn small_scaling_run_completes() {
        let report = scaling_benchmark(64, 128, 2);
        assert!(report.fusion_ratio > 0.0);
        assert!(report.attention_ratio > 0.0);
    }
}
