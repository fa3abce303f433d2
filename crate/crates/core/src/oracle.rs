//! Ground truth by brute force: draw MDPs from the posterior, solve each one
//! exactly and collect the per-state values.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{induce_mrp, solve_value, Policy, TabularMdp};
use crate::posterior::MdpPosterior;
use crate::quantdist::{project_samples, QuantileValueFunction};
use crate::rng;

const ORACLE_STREAM: u64 = 20;

/// Gap allowed on top of three standard errors, for states whose value is
/// the same in every sample.
fn float_slack(value: f64) -> f64 {
    1e-12 * (1.0 + value.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub posterior: String,
    pub seed: u64,
    pub num_samples: usize,
}

/// `N` value samples per state, stored state-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSampleSet {
    num_states: usize,
    num_samples: usize,
    values: Vec<f64>,
    pub provenance: Provenance,
}

impl ValueSampleSet {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn samples(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_samples..(s + 1) * self.num_samples]
    }

    /// Mean, computed about the first sample so a constant sample is exact.
    pub fn mean(&self, s: usize) -> f64 {
        let xs = self.samples(s);
        let pivot = xs[0];
        pivot + xs.iter().map(|x| x - pivot).sum::<f64>() / xs.len() as f64
    }

    /// Sample standard deviation (denominator `N − 1`).
    pub fn std(&self, s: usize) -> f64 {
        let n = self.num_samples;
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean(s);
        let ss: f64 = self.samples(s).iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }

    pub fn std_error(&self, s: usize) -> f64 {
        self.std(s) / (self.num_samples as f64).sqrt()
    }

    pub fn min(&self, s: usize) -> f64 {
        self.samples(s).iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self, s: usize) -> f64 {
        self.samples(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sample covariance of the values at `s` with an external per-sample series.
    pub fn covariance_with(&self, s: usize, other: &[f64]) -> f64 {
        let n = self.num_samples;
        assert_eq!(other.len(), n);
        let mx = self.mean(s);
        let my = other.iter().sum::<f64>() / n as f64;
        let sum: f64 = self.samples(s).iter().zip(other).map(|(x, y)| (x - mx) * (y - my)).sum();
        sum / (n - 1).max(1) as f64
    }

    /// Long format `state,sample_index,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["state", "sample_index", "value"])?;
        for s in 0..self.num_states {
            for (k, v) in self.samples(s).iter().enumerate() {
                out.write_record([s.to_string(), k.to_string(), v.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn histograms(&self, num_bins: usize) -> Vec<Histogram> {
        (0..self.num_states)
            .map(|s| Histogram::of(s, self.samples(s), num_bins))
            .collect()
    }

    pub fn write_histogram_json<W: Write>(&self, writer: W, num_bins: usize) -> Result<()> {
        let doc = HistogramDocument {
            provenance: self.provenance.clone(),
            states: self.histograms(num_bins),
        };
        serde_json::to_writer_pretty(writer, &doc)?;
        Ok(())
    }
}

/// Equal-width binned counts; `edges` has one more entry than `counts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub state: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Normalised so the histogram integrates to one.
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn of(state: usize, samples: &[f64], num_bins: usize) -> Self {
        let bins = num_bins.max(1);
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // a degenerate sample gets one unit-width bin centred on it
        let (lo, width) = if hi > lo {
            (lo, (hi - lo) / bins as f64)
        } else {
            (lo - 0.5, 1.0 / bins as f64)
        };
        let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for &v in samples {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        let total = samples.len() as f64 * width;
        let density = counts.iter().map(|&c| c as f64 / total).collect();
        Histogram {
            state,
            edges,
            counts,
            density,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistogramDocument {
    provenance: Provenance,
    states: Vec<Histogram>,
}

/// Seed of the `k`-th posterior draw.
pub fn sample_seed(seed: u64, k: usize) -> u64 {
    rng::derive_seed(seed, &[ORACLE_STREAM, k as u64])
}

/// Draws `n` MDPs, solves each exactly and records the per-state values.
/// Draw `k` depends only on `(seed, k)`, so the result does not depend on
/// thread scheduling.
pub fn sample_value_distribution(
    posterior: &dyn MdpPosterior,
    base: &TabularMdp,
    policy: &Policy,
    n: usize,
    seed: u64,
) -> Result<ValueSampleSet> {
    if n == 0 {
        return Err(Error::Config("oracle needs at least one sample".into()));
    }
    let per_sample = (0..n)
        .into_par_iter()
        .map(|k| {
            let mdp = posterior.sample_mdp(base, sample_seed(seed, k))?;
            solve_value(&induce_mrp(&mdp, policy)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let num_states = base.num_states();
    let mut values = vec![0.0; num_states * n];
    for (k, v) in per_sample.iter().enumerate() {
        for (s, &x) in v.iter().enumerate() {
            values[s * n + k] = x;
        }
    }
    Ok(ValueSampleSet {
        num_states,
        num_samples: n,
        values,
        provenance: Provenance {
            posterior: String::new(),
            seed,
            num_samples: n,
        },
    })
}

/// Per-state quantile projection of the empirical value distribution.
pub fn oracle_quantiles(samples: &ValueSampleSet, m: usize) -> Result<QuantileValueFunction> {
    let states = (0..samples.num_states)
        .map(|s| project_samples(samples.samples(s), m))
        .collect::<Result<Vec<_>>>()?;
    QuantileValueFunction::from_states(&states)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanGap {
    pub state: usize,
    pub sample_mean: f64,
    /// Value under the posterior-mean MDP.
    pub mean_model_value: f64,
    pub gap: f64,
    pub std_error: f64,
    /// Gap exceeds three standard errors.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanIdentityReport {
    pub num_samples: usize,
    pub states: Vec<MeanGap>,
}

impl MeanIdentityReport {
    pub fn all_within(&self) -> bool {
        self.states.iter().all(|g| !g.flagged)
    }

    pub fn flagged_states(&self) -> Vec<usize> {
        self.states.iter().filter(|g| g.flagged).map(|g| g.state).collect()
    }
}

/// Compares the oracle's per-state sample mean with the value under the
/// posterior-mean MDP. Flags are data; nothing fails here.
pub fn check_mean_identity(
    posterior: &dyn MdpPosterior,
    base: &TabularMdp,
    policy: &Policy,
    n: usize,
    seed: u64,
) -> Result<MeanIdentityReport> {
    let samples = sample_value_distribution(posterior, base, policy, n, seed)?;
    let mean_values = solve_value(&induce_mrp(&posterior.mean_mdp(base)?, policy)?)?;
    Ok(mean_identity_report(&samples, &mean_values))
}

pub fn mean_identity_report(samples: &ValueSampleSet, mean_values: &[f64]) -> MeanIdentityReport {
    let states = mean_values
        .iter()
        .enumerate()
        .map(|(s, &v)| {
            let sample_mean = samples.mean(s);
            let gap = (sample_mean - v).abs();
            let std_error = samples.std_error(s);
            MeanGap {
                state: s,
                sample_mean,
                mean_model_value: v,
                gap,
                std_error,
                flagged: gap > 3.0 * std_error + float_slack(v),
            }
        })
        .collect();
    MeanIdentityReport {
        num_samples: samples.num_samples,
        states,
    }
}
