//! Finite-support distributions on the real line: weighted atoms, uniform
//! quantile distributions, exact p-Wasserstein distances, the quantile
//! projection and the quantile-regression losses.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when comparing cumulative weights against a quantile level.
const CDF_EPS: f64 = 1e-12;

/// Midpoint quantile level `τ̂_i = (2i − 1) / 2m` for 1-based `i`.
pub fn tau_hat(i: usize, m: usize) -> f64 {
    (2 * i - 1) as f64 / (2 * m) as f64
}

/// All `m` midpoint levels.
pub fn tau_hats(m: usize) -> Vec<f64> {
    (1..=m).map(|i| tau_hat(i, m)).collect()
}

/// Anything with a finite support that can list its atoms.
pub trait FiniteSupport {
    /// `(value, weight)` pairs sorted by value; weights sum to one.
    fn sorted_atoms(&self) -> Vec<(f64, f64)>;
}

/// Probability distribution with finitely many weighted atoms. Atoms are kept
/// sorted with equal values merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomDistribution {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl AtomDistribution {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution("no atoms".into()));
        }
        let mut total = 0.0;
        for &(v, w) in &atoms {
            if !v.is_finite() {
                return Err(Error::InvalidDistribution(format!("atom value {v}")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidDistribution(format!("atom weight {w}")));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-12 * (atoms.len() as f64).max(1.0) {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        Ok(Self::from_positive(atoms))
    }

    /// Sorts, merges ties and renormalises. Caller guarantees positive weights.
    pub(crate) fn from_positive(mut atoms: Vec<(f64, f64)>) -> Self {
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut weights: Vec<f64> = Vec::with_capacity(atoms.len());
        for (v, w) in atoms {
            match values.last() {
                Some(&last) if last == v => *weights.last_mut().unwrap() += w,
                _ => {
                    values.push(v);
                    weights.push(w);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        AtomDistribution { values, weights }
    }

    pub fn point(value: f64) -> Self {
        AtomDistribution {
            values: vec![value],
            weights: vec![1.0],
        }
    }

    /// Empirical distribution of `samples` (uniform weights).
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidDistribution("no samples".into()));
        }
        let w = 1.0 / samples.len() as f64;
        Self::new(samples.iter().map(|&v| (v, w)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(v, w)| v * w).sum()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Left-continuous inverse CDF, `inf { x : F(x) ≥ τ }`.
    pub fn quantile(&self, tau: f64) -> f64 {
        let mut cumulative = 0.0;
        for (v, w) in self.iter() {
            cumulative += w;
            if cumulative >= tau - CDF_EPS {
                return v;
            }
        }
        self.max()
    }

    /// Affine pushforward `x ↦ shift + scale·x`.
    pub fn affine(&self, shift: f64, scale: f64) -> Self {
        Self::from_positive(self.iter().map(|(v, w)| (shift + scale * v, w)).collect())
    }
}

impl FiniteSupport for AtomDistribution {
    fn sorted_atoms(&self) -> Vec<(f64, f64)> {
        self.iter().collect()
    }
}

/// Uniform mixture of `m` Dirac atoms at sorted locations `q_1 ≤ … ≤ q_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileDistribution {
    atoms: Vec<f64>,
}

impl QuantileDistribution {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution("m must be at least 1".into()));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite quantile".into()));
        }
        if atoms.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidDistribution("quantiles not sorted".into()));
        }
        Ok(QuantileDistribution { atoms })
    }

    pub fn from_unsorted(mut atoms: Vec<f64>) -> Result<Self> {
        atoms.sort_by(f64::total_cmp);
        Self::new(atoms)
    }

    pub fn point(value: f64, m: usize) -> Self {
        QuantileDistribution {
            atoms: vec![value; m.max(1)],
        }
    }

    pub fn m(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().sum::<f64>() / self.atoms.len() as f64
    }

    pub fn spread(&self) -> f64 {
        self.atoms[self.atoms.len() - 1] - self.atoms[0]
    }
}

impl FiniteSupport for QuantileDistribution {
    fn sorted_atoms(&self) -> Vec<(f64, f64)> {
        let w = 1.0 / self.atoms.len() as f64;
        self.atoms.iter().map(|&v| (v, w)).collect()
    }
}

/// Exact p-Wasserstein distance between two finite-support distributions:
/// `(∫₀¹ |F_a⁻¹(τ) − F_b⁻¹(τ)|^p dτ)^{1/p}`, integrated over the merged
/// breakpoints of both inverse CDFs.
pub fn wasserstein<A, B>(p_order: f64, a: &A, b: &B) -> f64
where
    A: FiniteSupport + ?Sized,
    B: FiniteSupport + ?Sized,
{
    assert!(p_order >= 1.0, "Wasserstein order must be at least 1");
    wasserstein_atoms(p_order, &a.sorted_atoms(), &b.sorted_atoms())
}

fn wasserstein_atoms(p_order: f64, a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut left_a, mut left_b) = (a[0].1, b[0].1);
    let mut total = 0.0;
    loop {
        let step = left_a.min(left_b);
        let gap = (a[i].0 - b[j].0).abs();
        if gap > 0.0 {
            total += step * if p_order == 1.0 { gap } else { gap.powf(p_order) };
        }
        left_a -= step;
        left_b -= step;
        if left_a <= 0.0 {
            i += 1;
            if i == a.len() {
                break;
            }
            left_a = a[i].1;
        }
        if left_b <= 0.0 {
            j += 1;
            if j == b.len() {
                break;
            }
            left_b = b[j].1;
        }
    }
    if p_order == 1.0 {
        total
    } else {
        total.powf(1.0 / p_order)
    }
}

/// w₁ between two uniform quantile distributions with the same `m`.
pub fn w1_sorted_uniform(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Supremum over states of w₁ between two quantile value functions of equal shape.
pub fn sup_w1(a: &QuantileValueFunction, b: &QuantileValueFunction) -> Result<f64> {
    if a.num_states != b.num_states || a.m != b.m {
        return Err(Error::Dimension("quantile value functions differ in shape".into()));
    }
    Ok((0..a.num_states)
        .map(|s| w1_sorted_uniform(a.state(s), b.state(s)))
        .fold(0.0, f64::max))
}

/// `max_s w_p(a(s), b(s))`.
pub fn sup_wasserstein<A, B>(p_order: f64, a: &[A], b: &[B]) -> Result<f64>
where
    A: FiniteSupport,
    B: FiniteSupport,
{
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{} states vs {} states",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| wasserstein(p_order, x, y))
        .fold(0.0, f64::max))
}

/// Quantile projection onto `m` uniform atoms located at `F⁻¹(τ̂_i)`.
pub fn project_quantiles(source: &AtomDistribution, m: usize) -> Result<QuantileDistribution> {
    if m == 0 {
        return Err(Error::InvalidDistribution("m must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(m);
    let mut k = 0;
    let mut cumulative = source.weights[0];
    for i in 1..=m {
        let tau = tau_hat(i, m);
        while cumulative < tau - CDF_EPS && k + 1 < source.len() {
            k += 1;
            cumulative += source.weights[k];
        }
        out.push(source.values[k]);
    }
    QuantileDistribution::new(out)
}

/// Quantile projection of an empirical sample, using exact integer
/// arithmetic for the level `ceil(τ̂_i · N)`.
pub fn project_samples(samples: &[f64], m: usize) -> Result<QuantileDistribution> {
    if samples.is_empty() {
        return Err(Error::InvalidDistribution("no samples".into()));
    }
    if m == 0 {
        return Err(Error::InvalidDistribution("m must be at least 1".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let atoms = (1..=m)
        .map(|i| {
            // smallest k with k / n ≥ (2i − 1) / 2m
            let k = ((2 * i - 1) * n).div_ceil(2 * m);
            sorted[k.max(1) - 1]
        })
        .collect();
    QuantileDistribution::new(atoms)
}

/// Empirical quantile-regression loss
/// `mean_V (τ·1{V > v} + (1 − τ)·1{V < v})·|V − v|`.
pub fn qr_loss(tau: f64, v: f64, samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "qr_loss needs at least one sample");
    let total: f64 = samples
        .iter()
        .map(|&x| {
            if x > v {
                tau * (x - v)
            } else if x < v {
                (1.0 - tau) * (v - x)
            } else {
                0.0
            }
        })
        .sum();
    total / samples.len() as f64
}

/// Huber loss normalised by `κ`, so that `κ = 0` is the absolute value.
pub fn huber(kappa: f64, u: f64) -> f64 {
    let abs = u.abs();
    if kappa == 0.0 {
        abs
    } else if abs <= kappa {
        0.5 * u * u / kappa
    } else {
        abs - 0.5 * kappa
    }
}

/// Quantile Huber loss `|τ − 1{u < 0}|·L_κ(u)`.
pub fn quantile_huber(tau: f64, kappa: f64, u: f64) -> f64 {
    let indicator = if u < 0.0 { 1.0 } else { 0.0 };
    (tau - indicator).abs() * huber(kappa, u)
}

/// Per-state quantile distributions sharing the same `m`, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileValueFunction {
    num_states: usize,
    m: usize,
    atoms: Vec<f64>,
}

impl QuantileValueFunction {
    pub fn new(num_states: usize, m: usize, atoms: Vec<f64>) -> Result<Self> {
        if m == 0 || atoms.len() != num_states * m {
            return Err(Error::Dimension(format!(
                "{num_states} states x {m} quantiles needs {} atoms, got {}",
                num_states * m,
                atoms.len()
            )));
        }
        for (s, row) in atoms.chunks(m).enumerate() {
            if row.iter().any(|a| !a.is_finite()) || row.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::InvalidDistribution(format!(
                    "state {s} quantiles not finite and sorted"
                )));
            }
        }
        Ok(QuantileValueFunction {
            num_states,
            m,
            atoms,
        })
    }

    pub fn zeros(num_states: usize, m: usize) -> Self {
        QuantileValueFunction {
            num_states,
            m,
            atoms: vec![0.0; num_states * m],
        }
    }

    pub fn from_states(states: &[QuantileDistribution]) -> Result<Self> {
        let m = states.first().map_or(0, QuantileDistribution::m);
        if states.iter().any(|q| q.m() != m) {
            return Err(Error::Dimension("states disagree on m".into()));
        }
        Self::new(
            states.len(),
            m,
            states.iter().flat_map(|q| q.atoms.iter().copied()).collect(),
        )
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn state(&self, s: usize) -> &[f64] {
        &self.atoms[s * self.m..(s + 1) * self.m]
    }

    pub(crate) fn state_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.atoms[s * self.m..(s + 1) * self.m]
    }

    pub fn distribution(&self, s: usize) -> QuantileDistribution {
        QuantileDistribution {
            atoms: self.state(s).to_vec(),
        }
    }

    pub fn distributions(&self) -> Vec<QuantileDistribution> {
        (0..self.num_states).map(|s| self.distribution(s)).collect()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    /// CSV with a header row of `τ̂` levels and one row of quantiles per state.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        let mut header = vec!["state".to_string()];
        header.extend(tau_hats(self.m).iter().map(f64::to_string));
        csv.write_record(&header)?;
        for s in 0..self.num_states {
            let mut record = vec![s.to_string()];
            record.extend(self.state(s).iter().map(f64::to_string));
            csv.write_record(&record)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut csv = csv::Reader::from_reader(reader);
        let m = csv.headers()?.len().saturating_sub(1);
        let mut atoms = Vec::new();
        let mut num_states = 0;
        for record in csv.records() {
            let record = record?;
            for field in record.iter().skip(1) {
                atoms.push(field.parse::<f64>().map_err(|e| {
                    Error::InvalidDistribution(format!("bad quantile {field:?}: {e}"))
                })?);
            }
            num_states += 1;
        }
        Self::new(num_states, m, atoms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_atoms(rng: &mut impl Rng, k: usize) -> AtomDistribution {
        let raw: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(0.05..1.0)))
            .collect();
        let total: f64 = raw.iter().map(|a| a.1).sum();
        AtomDistribution::new(raw.into_iter().map(|(v, w)| (v, w / total)).collect()).unwrap()
    }

    /// Midpoint-rule integral of `|F_a⁻¹ − F_b⁻¹|^p` on a uniform τ grid.
    fn quadrature_wasserstein(p: f64, a: &AtomDistribution, b: &AtomDistribution, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        let integral: f64 = (0..n)
            .map(|k| {
                let tau = (k as f64 + 0.5) * h;
                (a.quantile(tau) - b.quantile(tau)).abs().powf(p) * h
            })
            .sum();
        integral.powf(1.0 / p)
    }

    #[test]
    fn identical_distributions_have_zero_distance() {
        let mut r = rng::stream(1, &[]);
        let a = random_atoms(&mut r, 5);
        assert_eq!(wasserstein(1.0, &a, &a), 0.0);
        assert_eq!(wasserstein(2.0, &a, &a), 0.0);
    }

    #[test]
    fn point_masses_are_translated() {
        for p in [1.0, 1.5, 2.0, 3.0] {
            let d = wasserstein(p, &AtomDistribution::point(0.0), &AtomDistribution::point(-2.5));
            assert!((d - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_inverse_cdf_quadrature() {
        let mut r = rng::stream(2, &[]);
        for _ in 0..3 {
            let a = random_atoms(&mut r, 7);
            let b = random_atoms(&mut r, 7);
            let exact = wasserstein(1.0, &a, &b);
            let approx = quadrature_wasserstein(1.0, &a, &b, 1_000_000);
            assert!((exact - approx).abs() < 1e-3, "{exact} vs {approx}");
        }
    }

    #[test]
    fn sup_wasserstein_is_translation_and_max() {
        let mut r = rng::stream(3, &[]);
        let a: Vec<_> = (0..4).map(|_| random_atoms(&mut r, 3)).collect();
        let shifted: Vec<_> = a.iter().map(|d| d.affine(0.75, 1.0)).collect();
        assert_eq!(sup_wasserstein(1.0, &a, &a).unwrap(), 0.0);
        assert!((sup_wasserstein(1.0, &a, &shifted).unwrap() - 0.75).abs() < 1e-12);

        let b: Vec<_> = (0..4).map(|_| random_atoms(&mut r, 6)).collect();
        let mut expected: f64 = 0.0;
        for s in 0..4 {
            expected = expected.max(wasserstein(2.0, &a[s], &b[s]));
        }
        assert_eq!(sup_wasserstein(2.0, &a, &b).unwrap(), expected);
        assert!(sup_wasserstein(1.0, &a, &b[..3]).is_err());
    }

    #[test]
    fn projection_of_point_mass() {
        let q = project_quantiles(&AtomDistribution::point(1.25), 7).unwrap();
        assert!(q.atoms().iter().all(|&x| x == 1.25));
    }

    #[test]
    fn projection_of_four_uniform_atoms() {
        let source = AtomDistribution::from_samples(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        let q = project_quantiles(&source, 2).unwrap();
        assert_eq!(q.atoms(), &[0.0, 2.0]);
        let q = project_samples(&[3.0, 1.0, 0.0, 2.0], 2).unwrap();
        assert_eq!(q.atoms(), &[0.0, 2.0]);

        // brute force over a grid of 2-atom candidates
        let grid: Vec<f64> = (0..=30).map(|k| k as f64 * 0.1).collect();
        let best = wasserstein(1.0, &source, &q);
        for &x in &grid {
            for &y in &grid {
                if x <= y {
                    let c = QuantileDistribution::new(vec![x, y]).unwrap();
                    assert!(best <= wasserstein(1.0, &source, &c) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sample_and_atom_projection_agree() {
        let mut r = rng::stream(4, &[]);
        let samples: Vec<f64> = (0..997).map(|_| r.random_range(-1.0..1.0)).collect();
        let dist = AtomDistribution::from_samples(&samples).unwrap();
        for m in [1, 2, 10, 100] {
            assert_eq!(
                project_samples(&samples, m).unwrap(),
                project_quantiles(&dist, m).unwrap()
            );
        }
        assert!(project_samples(&[], 3).is_err());
    }

    #[test]
    fn qr_loss_examples() {
        assert_eq!(qr_loss(0.3, 2.0, &[2.0, 2.0, 2.0]), 0.0);
        assert!((qr_loss(0.5, 1.0, &[0.0, 2.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn qr_loss_grid_minimiser_is_the_quantile() {
        let mut r = rng::stream(5, &[]);
        let samples: Vec<f64> = (0..10_000).map(|_| r.random::<f64>().powi(2)).collect();
        let step = 1e-3;
        let (best, _) = (0..=1000)
            .map(|k| k as f64 * step)
            .map(|v| (v, qr_loss(0.9, v, &samples)))
            .fold((0.0, f64::INFINITY), |acc, (v, l)| if l < acc.1 { (v, l) } else { acc });
        let quantile = AtomDistribution::from_samples(&samples).unwrap().quantile(0.9);
        assert!((best - quantile).abs() <= step, "{best} vs {quantile}");
    }

    #[test]
    fn quantile_huber_examples() {
        for (tau, kappa) in [(0.1, 0.0), (0.5, 1.0), (0.9, 2.0)] {
            assert_eq!(quantile_huber(tau, kappa, 0.0), 0.0);
        }
        assert!((quantile_huber(0.5, 1.0, 2.0) - 0.75).abs() < 1e-15);
        assert!((quantile_huber(0.9, 1.0, -0.5) - 0.0125).abs() < 1e-15);
        assert_eq!(quantile_huber(0.25, 0.0, -2.0), 1.5);
        assert_eq!(quantile_huber(0.25, 0.0, 2.0), 0.5);
    }

    #[test]
    fn value_function_csv_round_trip() {
        let q = QuantileValueFunction::new(2, 3, vec![0.0, 0.5, 1.0, -1.0, -1.0, 2.25]).unwrap();
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("state,0.16666666666666666,0.5,0.8333333333333334\n"));
        assert_eq!(QuantileValueFunction::read_csv(&buf[..]).unwrap(), q);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(AtomDistribution::new(vec![]).is_err());
        assert!(AtomDistribution::new(vec![(0.0, 0.5)]).is_err());
        assert!(AtomDistribution::new(vec![(0.0, 0.0), (1.0, 1.0)]).is_err());
        assert!(QuantileDistribution::new(vec![1.0, 0.0]).is_err());
        assert!(QuantileValueFunction::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn ties_are_merged() {
        let d = AtomDistribution::new(vec![(1.0, 0.25), (0.0, 0.5), (1.0, 0.25)]).unwrap();
        assert_eq!(d.values(), &[0.0, 1.0]);
        assert_eq!(d.weights(), &[0.5, 0.5]);
    }

    fn atoms_strategy() -> impl Strategy<Value = AtomDistribution> {
        prop::collection::vec((-5.0f64..5.0, 0.01f64..1.0), 1..8).prop_map(|raw| {
            let total: f64 = raw.iter().map(|a| a.1).sum();
            AtomDistribution::new(raw.into_iter().map(|(v, w)| (v, w / total)).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn wasserstein_is_a_metric(a in atoms_strategy(), b in atoms_strategy(), c in atoms_strategy(), p in 1.0f64..3.0) {
            let ab = wasserstein(p, &a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - wasserstein(p, &b, &a)).abs() <= 1e-12);
            prop_assert!(ab <= wasserstein(p, &a, &c) + wasserstein(p, &c, &b) + 1e-12);
        }

        #[test]
        fn qr_loss_is_convex(samples in prop::collection::vec(-10.0f64..10.0, 1..50), tau in 0.01f64..0.99, v1 in -12.0f64..12.0, v2 in -12.0f64..12.0) {
            let mid = qr_loss(tau, 0.5 * (v1 + v2), &samples);
            let chord = 0.5 * (qr_loss(tau, v1, &samples) + qr_loss(tau, v2, &samples));
            prop_assert!(mid <= chord + 1e-12);
        }

        #[test]
        fn projection_is_sorted_and_permutation_invariant(mut samples in prop::collection::vec(-10.0f64..10.0, 1..60), m in 1usize..20) {
            let q = project_samples(&samples, m).unwrap();
            samples.reverse();
            prop_assert_eq!(&q, &project_samples(&samples, m).unwrap());
            prop_assert!(q.atoms().windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn huber_converges_to_absolute_loss(tau in 0.0f64..1.0, u in -10.0f64..10.0) {
            let limit = quantile_huber(tau, 0.0, u);
            prop_assert!((quantile_huber(tau, 1e-8, u) - limit).abs() <= 1e-7);
        }
    }
}
