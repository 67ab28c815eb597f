//! Wall-clock scaling measurements of one self-attention layer.
//!
//! Each configuration times a complete multi-head self-attention layer
//! (query/key/value projections, attention, output projection) on random
//! input. One warm-up run is discarded and the median of the remaining
//! repeats is reported; configurations faster than [`MIN_SAMPLE_MS`] are
//! repeated within each sample and averaged. The growth exponent per attention type is the
//! least-squares slope of `ln(time)` against `ln(N)`.

use std::time::Instant;

use dsa_core::attention::{mha_forward, restricted_mha_forward};
use dsa_core::dilation::{dilated_mha_forward, ApParams, PpBranch, PpParams};
use dsa_core::numerics::seeded_gaussian_stream;
use dsa_core::{AttentionType, DilationConfig, HeadDilationParams, HeadParams, Matrix, MhaParams, RestrictionWindow};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    pub d_model: usize,
    pub heads: usize,
    pub window: RestrictionWindow,
    pub dilation: DilationConfig,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub attention: String,
    pub n: usize,
    pub median_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSlope {
    pub attention: String,
    pub slope: f64,
}

struct Layer {
    params: MhaParams,
    dilation: Vec<HeadDilationParams>,
}

fn layer(settings: &BenchSettings) -> Layer {
    let d = settings.d_model;
    let d_k = d / settings.heads;
    let std = 1.0 / (d as f64).sqrt();
    let mut stream = 0u64;
    let mut next = |rows: usize, cols: usize| {
        stream += 1;
        seeded_gaussian_stream(rows, cols, settings.seed, stream, std)
    };
    let heads = (0..settings.heads)
        .map(|_| HeadParams {
            w_q: next(d, d_k),
            w_k: next(d, d_k),
            w_v: next(d, d_k),
        })
        .collect();
    let cfg = settings.dilation;
    let b = cfg.pool_heads;
    let dilation = (0..settings.heads)
        .map(|_| HeadDilationParams {
            attn_pool: cfg
                .mechanism
                .uses_attn_pool()
                .then(|| ApParams { queries: next(b, d_k) }),
            post: cfg.mechanism.uses_post_process().then(|| {
                let mut branch = || PpBranch {
                    w1: next(d_k * b, cfg.d_in),
                    b1: vec![0.0; cfg.d_in],
                    w2: next(cfg.d_in, d_k),
                    b2: vec![0.0; d_k],
                };
                let keys = branch();
                PpParams { keys, values: branch() }
            }),
        })
        .collect();
    Layer {
        params: MhaParams {
            heads,
            w_out: next(d, d),
        },
        dilation,
    }
}

fn run_once(attention: AttentionType, x: &Matrix, layer: &Layer, settings: &BenchSettings) -> Result<(), CliError> {
    let out = match attention {
        AttentionType::Full => mha_forward(x, x, &layer.params, None),
        AttentionType::Restricted => restricted_mha_forward(x, &layer.params, settings.window, None),
        AttentionType::Dilated => dilated_mha_forward(
            x,
            &layer.params,
            settings.window,
            &settings.dilation,
            &layer.dilation,
            None,
        ),
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    std::hint::black_box(out);
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    }
}

/// Shortest duration of one timed sample; fast configurations are run
/// several times per sample to reach it.
pub const MIN_SAMPLE_MS: f64 = 20.0;

/// Median wall-clock time of one layer for `attention` at length `n`.
pub fn time_config(attention: AttentionType, n: usize, settings: &BenchSettings) -> Result<f64, CliError> {
    let layer = layer(settings);
    let x = seeded_gaussian_stream(n, settings.d_model, settings.seed, 0, 1.0);
    let start = Instant::now();
    run_once(attention, &x, &layer, settings)?;
    let warm_ms = start.elapsed().as_secs_f64() * 1e3;
    let iters = (MIN_SAMPLE_MS / warm_ms.max(1e-6)).ceil().max(1.0) as usize;
    let mut times = Vec::with_capacity(settings.repeats);
    for _ in 0..settings.repeats {
        let start = Instant::now();
        for _ in 0..iters {
            run_once(attention, &x, &layer, settings)?;
        }
        times.push(start.elapsed().as_secs_f64() * 1e3 / iters as f64);
    }
    Ok(median(times))
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn type_name(t: AttentionType) -> &'static str {
    match t {
        AttentionType::Full => "full",
        AttentionType::Restricted => "restricted",
        AttentionType::Dilated => "dilated",
    }
}

pub fn run_bench(
    types: &[AttentionType],
    n_list: &[usize],
    settings: &BenchSettings,
) -> Result<(Vec<BenchRow>, Vec<BenchSlope>), CliError> {
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &t in types {
        let mut points = Vec::new();
        for &n in n_list {
            let ms = time_config(t, n, settings)?;
            points.push((n as f64, ms));
            rows.push(BenchRow {
                attention: type_name(t).into(),
                n,
                median_ms: ms,
            });
        }
        if points.len() >= 2 {
            slopes.push(BenchSlope {
                attention: type_name(t).into(),
                slope: log_log_slope(&points),
            });
        }
    }
    Ok((rows, slopes))
}

pub fn render_csv(rows: &[BenchRow], slopes: &[BenchSlope]) -> String {
    let mut out = String::from("type,n,median_ms,slope\n");
    for r in rows {
        let slope = slopes
            .iter()
            .find(|s| s.attention == r.attention)
            .map_or(String::new(), |s| format!("{:.4}", s.slope));
        out.push_str(&format!("{},{},{:.4},{}\n", r.attention, r.n, r.median_ms, slope));
    }
    out
}

pub fn render_markdown(rows: &[BenchRow], slopes: &[BenchSlope]) -> String {
    let mut out = String::from("| type | N | median (ms) |\n|---|---:|---:|\n");
    for r in rows {
        out.push_str(&format!("| {} | {} | {:.3} |\n", r.attention, r.n, r.median_ms));
    }
    if !slopes.is_empty() {
        out.push_str("\n| type | log-log slope |\n|---|---:|\n");
        for s in slopes {
            out.push_str(&format!("| {} | {:.3} |\n", s.attention, s.slope));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsa_core::Mechanism;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&x: &f64| (x, 3.0 * x.powf(1.5)))
            .collect();
        assert!((log_log_slope(&pts) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_bench_labels_are_stable() {
        let settings = BenchSettings {
            d_model: 8,
            heads: 2,
            window: RestrictionWindow::symmetric(5).unwrap(),
            dilation: DilationConfig::new(Mechanism::AttnPoolPp, 4)
                .with_pool_heads(2)
                .with_d_in(3),
            repeats: 1,
            seed: 0,
        };
        let types = [AttentionType::Full, AttentionType::Restricted, AttentionType::Dilated];
        let (a, sa) = run_bench(&types, &[8, 16], &settings).unwrap();
        let settings5 = BenchSettings { repeats: 5, ..settings };
        let (b, sb) = run_bench(&types, &[8, 16], &settings5).unwrap();
        let labels = |rows: &[BenchRow]| rows.iter().map(|r| (r.attention.clone(), r.n)).collect::<Vec<_>>();
        assert_eq!(labels(&a), labels(&b));
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert!(render_csv(&a, &sa).starts_with("type,n,median_ms,slope\n"));
    }
}
