//! Latency measurement and the attention scaling study.
//!
//! All timings report the median of repeated runs after one warmup. The
//! scaling study times the factored attention at geometrically growing node
//! counts with codebook size and width held fixed, fits the log-log slope,
//! and does the same for the dense reference (which is quadratic and
//! therefore capped at a much smaller node count).

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use anyhow::Result;
use gtsnt_core::attention::{
    cgsa_forward, dense_attention_oracle, AttentionParams, EmbedNorm,
};
use gtsnt_core::model::{model_forward, ModelConfig, ModelParams, StageTimings};
use gtsnt_core::neuron::SpikeMode;
use gtsnt_core::sparse::{CsrMatrix, SparseOperator};

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall-clock of a full forward pass plus per-stage medians.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub repeats: usize,
    pub median_total_ms: f64,
    pub median_tokenize_ms: f64,
    pub median_message_passing_ms: f64,
    pub median_attention_ms: f64,
    pub median_head_ms: f64,
    pub codebook_sizes: Vec<usize>,
}

pub fn bench_latency(
    p: &SparseOperator,
    x: &CsrMatrix,
    params: &ModelParams,
    cfg: &ModelConfig,
    repeats: usize,
) -> Result<LatencyReport> {
    let warmup = model_forward(p, x, params, cfg, SpikeMode::Hard, None)?;
    let mut totals = Vec::with_capacity(repeats);
    let mut stages: Vec<StageTimings> = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = std::time::Instant::now();
        let fwd = model_forward(p, x, params, cfg, SpikeMode::Hard, None)?;
        totals.push(t0.elapsed().as_secs_f64() * 1e3);
        stages.push(fwd.timings);
    }
    let stage_ms = |f: fn(&StageTimings) -> u128| {
        median(stages.iter().map(|s| f(s) as f64 / 1e6).collect())
    };
    Ok(LatencyReport {
        repeats,
        median_total_ms: median(totals),
        median_tokenize_ms: stage_ms(|s| s.tokenize_ns),
        median_message_passing_ms: stage_ms(|s| s.message_passing_ns),
        median_attention_ms: stage_ms(|s| s.attention_ns),
        median_head_ms: stage_ms(|s| s.head_ns),
        codebook_sizes: warmup.codebook_sizes(),
    })
}

/// One timed point of the scaling study.
#[derive(Debug, Clone, Serialize)]
pub struct ScalePoint {
    pub num_nodes: usize,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub codebook_size: usize,
    pub hidden_dim: usize,
    pub repeats: usize,
    pub factored: Vec<ScalePoint>,
    pub factored_slope: f64,
    pub dense: Vec<ScalePoint>,
    pub dense_slope: f64,
}

/// Least-squares slope of log2(seconds) against log2(nodes).
pub fn fit_log_slope(points: &[ScalePoint]) -> f64 {
    assert!(points.len() >= 2, "need at least two points to fit a slope");
    let xs: Vec<f64> = points.iter().map(|p| (p.num_nodes as f64).log2()).collect();
    let ys: Vec<f64> = points
        .iter()
        .map(|p| p.median_seconds.max(1e-12).log2())
        .collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

pub struct ScaleSettings {
    pub factored_exponents: Vec<u32>,
    pub dense_exponents: Vec<u32>,
    pub codebook_size: usize,
    pub hidden_dim: usize,
    pub descriptor_dim: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ScaleSettings {
    fn default() -> Self {
        ScaleSettings {
            factored_exponents: vec![13, 14, 15, 16, 17],
            dense_exponents: vec![12, 13, 14],
            codebook_size: 32,
            hidden_dim: 16,
            descriptor_dim: 6,
            repeats: 5,
            seed: 0,
        }
    }
}

/// Random attention inputs of the given size: every codeword used at least
/// once, uniform assignment beyond that.
fn scale_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    b: usize,
    d: usize,
    dd: usize,
) -> (Array2<f64>, Array2<f64>, Vec<u32>, Vec<u32>, AttentionParams) {
    let h = Array2::from_shape_simple_fn((n, d), || rng.gen::<f64>() - 0.5);
    let c_float = Array2::from_shape_simple_fn((b, dd), || rng.gen_range(0..4) as f64);
    let mut assignment: Vec<u32> = (0..b as u32).collect();
    for _ in b..n {
        assignment.push(rng.gen_range(0..b) as u32);
    }
    let mut populations = vec![0u32; b];
    for &a in &assignment {
        populations[a as usize] += 1;
    }
    let params = AttentionParams {
        w_q: Array2::from_shape_simple_fn((d, d), || rng.gen::<f64>() - 0.5),
        w_v: Array2::from_shape_simple_fn((d, d), || rng.gen::<f64>() - 0.5),
        w_c: Array2::from_shape_simple_fn((dd, d), || rng.gen::<f64>() - 0.5),
        b_c: Array1::zeros(d),
    };
    (h, c_float, assignment, populations, params)
}

pub fn run_scaling_suite(s: &ScaleSettings) -> Result<ScalingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let b = s.codebook_size;
    let d = s.hidden_dim;

    let mut factored = Vec::new();
    for &e in &s.factored_exponents {
        let n = 1usize << e;
        let (h, c, a, pops, params) = scale_instance(&mut rng, n, b, d, s.descriptor_dim);
        // Warmup, then median of timed repeats.
        let _ = cgsa_forward(&h.view(), &c.view(), &a, &pops, &params, EmbedNorm::RowL2)?;
        let mut times = Vec::with_capacity(s.repeats);
        for _ in 0..s.repeats {
            let t0 = std::time::Instant::now();
            let out = cgsa_forward(&h.view(), &c.view(), &a, &pops, &params, EmbedNorm::RowL2)?;
            let dt = t0.elapsed().as_secs_f64();
            assert!(out.out[(0, 0)].is_finite());
            times.push(dt);
        }
        factored.push(ScalePoint {
            num_nodes: n,
            median_seconds: median(times),
        });
    }

    let mut dense = Vec::new();
    for &e in &s.dense_exponents {
        let n = 1usize << e;
        let (h, c, a, pops, params) = scale_instance(&mut rng, n, b, d, s.descriptor_dim);
        let fwd = cgsa_forward(&h.view(), &c.view(), &a, &pops, &params, EmbedNorm::RowL2)?;
        // Dense reference attends over per-node duplicated keys.
        let mut k_hat = Array2::<f64>::zeros((n, d));
        for (m, &am) in a.iter().enumerate() {
            k_hat.row_mut(m).assign(&fwd.embed.g.row(am as usize));
        }
        let _ = dense_attention_oracle(&fwd.q.view(), &k_hat.view(), &fwd.v.view());
        let mut times = Vec::with_capacity(s.repeats);
        for _ in 0..s.repeats {
            let t0 = std::time::Instant::now();
            let out = dense_attention_oracle(&fwd.q.view(), &k_hat.view(), &fwd.v.view());
            let dt = t0.elapsed().as_secs_f64();
            assert!(out[(0, 0)].is_finite());
            times.push(dt);
        }
        dense.push(ScalePoint {
            num_nodes: n,
            median_seconds: median(times),
        });
    }

    let factored_slope = fit_log_slope(&factored);
    let dense_slope = fit_log_slope(&dense);
    Ok(ScalingReport {
        codebook_size: b,
        hidden_dim: d,
        repeats: s.repeats,
        factored,
        factored_slope,
        dense,
        dense_slope,
    })
}

/// Renders the scaling report as CSV (`kind,num_nodes,median_seconds`).
pub fn scaling_csv(report: &ScalingReport) -> String {
    let mut out = String::from("kind,num_nodes,median_seconds\n");
    for p in &report.factored {
        out.push_str(&format!("factored,{},{:.9}\n", p.num_nodes, p.median_seconds));
    }
    for p in &report.dense {
        out.push_str(&format!("dense,{},{:.9}\n", p.num_nodes, p.median_seconds));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_fit_recovers_exact_powers() {
        let linear: Vec<ScalePoint> = (10..15)
            .map(|e| ScalePoint {
                num_nodes: 1 << e,
                median_seconds: (1u64 << e) as f64 * 1e-9,
            })
            .collect();
        assert!((fit_log_slope(&linear) - 1.0).abs() < 1e-9);
        let quadratic: Vec<ScalePoint> = (10..14)
            .map(|e| ScalePoint {
                num_nodes: 1 << e,
                median_seconds: ((1u64 << e) as f64).powi(2) * 1e-12,
            })
            .collect();
        assert!((fit_log_slope(&quadratic) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn median_of_even_and_odd_lengths() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn tiny_scaling_run_produces_monotone_times() {
        // Miniature version to keep this fast; the real exponents run in
        // the acceptance suite.
        let report = run_scaling_suite(&ScaleSettings {
            factored_exponents: vec![8, 10, 12],
            dense_exponents: vec![8, 9, 10],
            codebook_size: 8,
            hidden_dim: 8,
            descriptor_dim: 4,
            repeats: 3,
            seed: 1,
        })
        .unwrap();
        assert_eq!(report.factored.len(), 3);
        assert_eq!(report.dense.len(), 3);
        assert!(report.factored_slope.is_finite());
        assert!(report.dense_slope > report.factored_slope);
        let csv = scaling_csv(&report);
        assert!(csv.lines().count() == 7);
        assert!(csv.starts_with("kind,num_nodes,median_seconds"));
    }
}
