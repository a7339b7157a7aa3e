//! Monte Carlo integration with one worker per region.
//!
//! Worker `i` samples uniformly inside region `i` and reports its mean and
//! sample variance over a channel. The aggregate is the measure-weighted
//! sum of the means with standard error `sqrt(Σ wᵢ² sᵢ² / nᵢ)`.

use std::sync::mpsc;

use super::{Partition, Region};
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEstimate {
    pub region: usize,
    pub mean: f64,
    /// Standard error of `mean`.
    pub std_error: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub regions: Vec<RegionEstimate>,
}

/// Per-run settings for [`parallel_monte_carlo`].
#[derive(Debug, Clone, PartialEq)]
pub struct McJob {
    pub samples_per_node: usize,
    /// One seed per node; node `i` works on region `i`.
    pub seeds: Vec<u64>,
    /// Nodes that never report, for exercising partial aggregation.
    pub silent_nodes: Vec<usize>,
}

impl McJob {
    pub fn new(samples_per_node: usize, base_seed: u64, nodes: usize) -> Self {
        McJob {
            samples_per_node,
            seeds: (0..nodes as u64).map(|i| rng::mix(base_seed, i)).collect(),
            silent_nodes: Vec::new(),
        }
    }
}

/// Mean and standard error of `n` draws of `sample`.
fn run_node(n: usize, mut sample: impl FnMut() -> f64) -> (f64, f64) {
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=n {
        let y = sample();
        let delta = y - mean;
        mean += delta / k as f64;
        m2 += delta * (y - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, (var / n as f64).sqrt())
}

fn sample_region<F>(f: &F, region: &Region, n: usize, seed: u64) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let mut rng = rng::substream(seed, "montecarlo");
    run_node(n, || f(&region.sample(&mut rng)))
}

/// Estimates `∫ f` over the cube covered by `partition`.
pub fn parallel_monte_carlo<F>(f: &F, partition: &Partition, job: &McJob) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let p = partition.parts();
    if job.samples_per_node == 0 {
        return invalid("samples_per_node must be at least 1");
    }
    if job.seeds.len() != p {
        return invalid(format!("{} seeds for {p} regions", job.seeds.len()));
    }
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for (i, region) in partition.regions().iter().enumerate() {
            if job.silent_nodes.contains(&i) {
                continue;
            }
            let tx = tx.clone();
            let seed = job.seeds[i];
            let n = job.samples_per_node;
            s.spawn(move || {
                let (mean, se) = sample_region(f, region, n, seed);
                // the aggregator outlives every worker
                let _ = tx.send(RegionEstimate {
                    region: i,
                    mean,
                    std_error: se,
                    samples: n,
                });
            });
        }
    });
    drop(tx);
    let mut reports: Vec<Option<RegionEstimate>> = vec![None; p];
    for r in rx {
        if r.mean.is_finite() {
            let i = r.region;
            reports[i] = Some(r);
        }
    }
    let missing: Vec<usize> = (0..p).filter(|&i| reports[i].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::PartialAggregate { missing });
    }
    let regions: Vec<RegionEstimate> = reports.into_iter().flatten().collect();
    let mut estimate = 0.0;
    let mut var = 0.0;
    for (r, region) in regions.iter().zip(partition.regions()) {
        let w = region.measure();
        estimate += w * r.mean;
        var += w * w * r.std_error * r.std_error;
    }
    Ok(McEstimate {
        estimate,
        std_error: var.sqrt(),
        regions,
    })
}

/// Plain single-node estimate over the d-cube with `n` samples.
pub fn monte_carlo<F>(f: &F, d: usize, n: usize, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    if d == 0 || n == 0 {
        return invalid("dimension and sample count must be positive");
    }
    let mut rng = rng::substream(seed, "montecarlo");
    Ok(run_node(n, || {
        let x: Vec<f64> = (0..d).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
        f(&x)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::{split_circular, split_unfolded, Estimand};

    #[test]
    fn constant_is_exact() {
        let p = split_unfolded(0.37, 3, 2, 9).unwrap();
        let est = parallel_monte_carlo(&|x: &[f64]| Estimand::Constant.eval(x), &p, &McJob::new(100, 1, 3)).unwrap();
        assert!((est.estimate - 1.0).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn silent_node_is_reported() {
        let p = split_circular(0.1, 3).unwrap();
        let mut job = McJob::new(10, 1, 3);
        job.silent_nodes = vec![2];
        match parallel_monte_carlo(&|_: &[f64]| 1.0, &p, &job) {
            Err(Error::PartialAggregate { missing }) => assert_eq!(missing, [2]),
            other => panic!("{other:?}"),
        }
    }
}
