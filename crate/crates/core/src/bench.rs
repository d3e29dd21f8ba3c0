//! Timing of split scoring: one full root sweep with incremental gains versus
//! scoring candidates one at a time by refitting the GLS model from scratch.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Result, SpatialError};
use crate::gls::{brute_force_gls_loss, CharacteristicMatrix, CovarianceSolve, GainAccumulator, DEFAULT_DTOL};
use crate::geometry::LowRankCorrelation;
use crate::rng::{derive_seed, rng_from_seed};

pub const BENCH_DELTA: f64 = 0.5;
pub const BENCH_RANK: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    /// Wall time of one sweep over all `n - 1` prefix candidates.
    pub sweep_seconds: f64,
    /// Wall time of scoring a single candidate by a full GLS refit.
    pub naive_seconds_per_candidate: f64,
    pub naive_candidates_timed: usize,
}

/// Bytes written between timed sweeps to push `Omega` out of the caches.
const EVICTION_BYTES: usize = 64 << 20;

/// Touches one byte per cache line of `buffer`.
fn evict_caches(buffer: &mut [u8], round: usize) {
    for i in (0..buffer.len()).step_by(64) {
        buffer[i] = buffer[i].wrapping_add(round as u8);
    }
    std::hint::black_box(&buffer);
}

/// Minimum wall time over repeated runs until at least `budget` seconds
/// elapse; `prepare` runs untimed before each run.
fn time_min(budget: f64, max_runs: usize, mut prepare: impl FnMut(usize), mut f: impl FnMut()) -> f64 {
    let start = Instant::now();
    let mut best = f64::INFINITY;
    for run in 0..max_runs.max(1) {
        prepare(run);
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64());
        if start.elapsed().as_secs_f64() > budget {
            break;
        }
    }
    best
}

/// Random bench problem: a low-rank correlation with `BENCH_RANK` columns at
/// `BENCH_DELTA`, a response and a sweep order.
fn problem(n: usize, seed: u64) -> (LowRankCorrelation, DVector<f64>, Vec<usize>) {
    let mut rng = rng_from_seed(derive_seed(seed, &[n as u64]));
    let k = BENCH_RANK.min(n);
    let s = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal) / (k as f64).sqrt());
    let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    (LowRankCorrelation::new(s, BENCH_DELTA).expect("valid delta"), y, order)
}

/// Best gain over all prefixes of `order`.
pub fn incremental_sweep(cm: &CharacteristicMatrix, order: &[usize]) -> f64 {
    let mut acc = GainAccumulator::default();
    let mut best = f64::NEG_INFINITY;
    for &l in &order[..order.len() - 1] {
        acc.push(cm, l);
        best = best.max(acc.gain(cm.dtol()));
    }
    best
}

/// Gain of the prefix `order[..=len]` from two full GLS fits.
pub fn naive_candidate_gain(y: &DVector<f64>, covariance: &CovarianceSolve, order: &[usize], len: usize) -> Result<f64> {
    let n = y.len();
    let root = DMatrix::from_element(n, 1, 1.0);
    let (root_loss, _) = brute_force_gls_loss(y, &root, covariance)?;
    let mut c = DMatrix::from_element(n, 2, 0.0);
    c.column_mut(0).fill(1.0);
    for &i in &order[..=len] {
        c[(i, 1)] = 1.0;
    }
    let (loss, _) = brute_force_gls_loss(y, &c, covariance)?;
    Ok(root_loss - loss)
}

/// One row per size. Both paths report the minimum over repeated runs (the
/// sweep from cold caches); the naive path times `naive_candidates`
/// candidates, each needing fresh factorisations of the dense covariance.
pub fn bench_split_scoring(sizes: &[usize], naive_candidates: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if sizes.iter().any(|&n| n < 4) {
        return Err(SpatialError::param("bench sizes must be at least 4"));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    let mut eviction = vec![0u8; EVICTION_BYTES];
    for &n in sizes {
        let (lr, y, order) = problem(n, seed);
        let cm = CharacteristicMatrix::new(&lr, &y, DEFAULT_DTOL)?;
        // Every sweep starts from cold caches, so all sizes are timed in the
        // same memory regime rather than small ones running from cache.
        let sweep_seconds = time_min(
            0.5,
            50,
            |run| evict_caches(&mut eviction, run),
            || {
                std::hint::black_box(incremental_sweep(&cm, &order));
            },
        );

        let covariance = CovarianceSolve {
            covariance: lr.dense(),
        };
        let timed = naive_candidates.max(1);
        let mut naive_total = 0.0;
        for c in 0..timed {
            let len = (c + 1) * (n - 2) / (timed + 1);
            let mut outcome = Ok(0.0);
            naive_total += time_min(0.5, 20, |_| {}, || {
                outcome = naive_candidate_gain(&y, &covariance, &order, len);
            });
            std::hint::black_box(outcome?);
        }
        let naive_seconds_per_candidate = naive_total / timed as f64;
        log::info!("n={n}: sweep {sweep_seconds:.3e}s, naive {naive_seconds_per_candidate:.3e}s/candidate");
        rows.push(BenchRow {
            n,
            sweep_seconds,
            naive_seconds_per_candidate,
            naive_candidates_timed: timed,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log(t)` on `log(n)`.
pub fn log_log_slope(n: &[usize], t: &[f64]) -> f64 {
    let lx: Vec<f64> = n.iter().map(|&v| (v as f64).ln()).collect();
    let ly: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn write_bench_csv<W: std::io::Write>(rows: &[BenchRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
