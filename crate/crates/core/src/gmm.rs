//! Diagonal-covariance Gaussian mixtures fitted by EM, with AIC/BIC model
//! selection and minority-class oversampling.

use std::f64::consts::PI;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, RowOrigin};
use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const CHUNK: usize = 512;

/// Mixture parameters. `means` and `variances` are row-major
/// `n_components x n_features` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub n_components: usize,
    pub n_features: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Total log-likelihood of the fitting data under the final parameters.
    pub log_likelihood: Option<f64>,
    pub n_fit: Option<usize>,
    pub n_iter: usize,
    pub converged: bool,
    /// Log-likelihood after each EM iteration, first entry at the initial parameters.
    pub log_likelihood_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub n_components: usize,
    pub max_iter: usize,
    /// Convergence threshold on the change of mean per-sample log-likelihood.
    pub tol: f64,
    pub seed: u64,
    pub variance_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            n_components: 200,
            max_iter: 100,
            tol: 1e-4,
            seed: 0,
            variance_floor: VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Aic,
    /// `-2 log L + 2 k log N`.
    Bic,
    /// `-2 log L + k log N`.
    BicStandard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    pub aic: f64,
    pub bic: f64,
    pub bic_standard: f64,
    pub n_params: usize,
}

impl InformationCriteria {
    pub fn get(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Aic => self.aic,
            Criterion::Bic => self.bic,
            Criterion::BicStandard => self.bic_standard,
        }
    }
}

pub fn information_criteria_from(log_likelihood: f64, n_params: usize, n_samples: f64) -> InformationCriteria {
    let k = n_params as f64;
    InformationCriteria {
        aic: -2.0 * log_likelihood + 2.0 * k,
        bic: -2.0 * log_likelihood + 2.0 * k * n_samples.ln(),
        bic_standard: -2.0 * log_likelihood + k * n_samples.ln(),
        n_params,
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmModel {
    /// Free parameters: weights (K - 1), means (K d) and variances (K d).
    pub fn n_params(&self) -> usize {
        self.n_components * (2 * self.n_features + 1) - 1
    }

    pub fn information_criteria(&self) -> Result<InformationCriteria> {
        match (self.log_likelihood, self.n_fit) {
            (Some(ll), Some(n)) => Ok(information_criteria_from(ll, self.n_params(), n as f64)),
            _ => Err(Error::State("information criteria need a fitted model".into())),
        }
    }

    fn component_constants(&self) -> Vec<f64> {
        let d = self.n_features;
        (0..self.n_components)
            .map(|k| {
                let log_det: f64 = self.variances[k * d..(k + 1) * d]
                    .iter()
                    .map(|v| (2.0 * PI * v).ln())
                    .sum();
                self.weights[k].ln() - 0.5 * log_det
            })
            .collect()
    }

    fn component_log_terms(&self, constants: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.n_features;
        for (k, slot) in out.iter_mut().enumerate() {
            let mu = &self.means[k * d..(k + 1) * d];
            let var = &self.variances[k * d..(k + 1) * d];
            let quad: f64 = x
                .iter()
                .zip(mu)
                .zip(var)
                .map(|((xi, m), v)| (xi - m) * (xi - m) / v)
                .sum();
            *slot = constants[k] - 0.5 * quad;
        }
    }

    /// Log of the mixture density at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n_features, "dimension mismatch");
        let constants = self.component_constants();
        let mut terms = vec![0.0; self.n_components];
        self.component_log_terms(&constants, x, &mut terms);
        log_sum_exp(&terms)
    }

    /// Mixture mean `sum_k pi_k mu_k`.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.n_features;
        (0..d)
            .map(|j| (0..self.n_components).map(|k| self.weights[k] * self.means[k * d + j]).sum())
            .collect()
    }

    /// Draws the component index for one sample.
    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let dist = WeightedIndex::new(&self.weights).expect("weights sum to one");
        dist.sample(rng)
    }

    /// Draws `n` samples as a flat row-major array.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let d = self.n_features;
        let dist = WeightedIndex::new(&self.weights).expect("weights sum to one");
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = dist.sample(rng);
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                out.push(self.means[k * d + j] + self.variances[k * d + j].sqrt() * z);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// k-means++ seeding: first centre uniform, later ones proportional to squared
/// distance from the nearest chosen centre.
fn kmeans_pp(data: &[f64], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centres = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centres.extend_from_slice(row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(dist2(row(i), &c));
        }
        centres.extend_from_slice(&c);
    }
    centres
}

/// Fits a `n_components` mixture to the row-major `data` with `n_features` columns.
pub fn fit_em(data: &[f64], n_features: usize, options: &EmOptions) -> Result<GmmModel> {
    let d = n_features;
    let k = options.n_components;
    if d == 0 {
        return Err(Error::Config("need at least one feature".into()));
    }
    if !data.len().is_multiple_of(d) {
        return Err(Error::Data("data length is not a multiple of n_features".into()));
    }
    let n = data.len() / d;
    if k == 0 {
        return Err(Error::Config("need at least one component".into()));
    }
    if k > n {
        return Err(Error::Config(format!("{k} components exceed {n} samples")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in GMM input".into()));
    }
    let floor = options.variance_floor;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let means = kmeans_pp(data, d, k, &mut rng);
    let col_var: Vec<f64> = (0..d)
        .map(|j| {
            let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (data[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            var.max(floor)
        })
        .collect();
    let mut model = GmmModel {
        n_components: k,
        n_features: d,
        weights: vec![1.0 / k as f64; k],
        means,
        variances: col_var.repeat(k),
        log_likelihood: None,
        n_fit: Some(n),
        n_iter: 0,
        converged: false,
        log_likelihood_history: Vec::new(),
    };

    let mut resp = vec![0.0; n * k];
    let mut prev: Option<f64> = None;
    for iter in 0..options.max_iter {
        let ll = e_step(&model, data, &mut resp);
        model.log_likelihood_history.push(ll);
        model.log_likelihood = Some(ll);
        if let Some(p) = prev {
            if ((ll - p) / n as f64).abs() < options.tol {
                model.converged = true;
                model.n_iter = iter;
                return Ok(model);
            }
        }
        prev = Some(ll);
        m_step(&mut model, data, &resp, floor);
        model.n_iter = iter + 1;
    }
    let ll = e_step(&model, data, &mut resp);
    model.log_likelihood_history.push(ll);
    model.log_likelihood = Some(ll);
    Ok(model)
}

/// Fills responsibilities and returns the total log-likelihood.
fn e_step(model: &GmmModel, data: &[f64], resp: &mut [f64]) -> f64 {
    let d = model.n_features;
    let k = model.n_components;
    let constants = model.component_constants();
    let partial: Vec<f64> = data
        .par_chunks(CHUNK * d)
        .zip(resp.par_chunks_mut(CHUNK * k))
        .map(|(rows, out)| {
            let mut ll = 0.0;
            for (x, r) in rows.chunks_exact(d).zip(out.chunks_exact_mut(k)) {
                model.component_log_terms(&constants, x, r);
                let lse = log_sum_exp(r);
                for v in r.iter_mut() {
                    *v = (*v - lse).exp();
                }
                ll += lse;
            }
            ll
        })
        .collect();
    partial.iter().sum()
}

fn m_step(model: &mut GmmModel, data: &[f64], resp: &[f64], floor: f64) {
    let d = model.n_features;
    let k = model.n_components;
    let n = data.len() / d;
    let updated: Vec<(f64, Option<(Vec<f64>, Vec<f64>)>)> = (0..k)
        .into_par_iter()
        .map(|c| {
            let mut nk = 0.0;
            let mut sum = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * k + c];
                nk += r;
                for j in 0..d {
                    sum[j] += r * data[i * d + j];
                }
            }
            if nk < f64::EPSILON {
                // Dead component: its weight shrinks, location stays put.
                return (nk, None);
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / nk).collect();
            let mut sq = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * k + c];
                for j in 0..d {
                    let dx = data[i * d + j] - mean[j];
                    sq[j] += r * dx * dx;
                }
            }
            let var = sq.iter().map(|s| (s / nk).max(floor)).collect();
            (nk, Some((mean, var)))
        })
        .collect();
    let total: f64 = updated.iter().map(|(nk, _)| nk).sum();
    for (c, (nk, params)) in updated.into_iter().enumerate() {
        model.weights[c] = nk / total;
        if let Some((mean, var)) = params {
            model.means[c * d..(c + 1) * d].copy_from_slice(&mean);
            model.variances[c * d..(c + 1) * d].copy_from_slice(&var);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub n_components: usize,
    pub score: f64,
}

/// Index of the lowest score; ties go to the smaller component count.
pub fn pick_lowest(entries: &[SelectionEntry]) -> Option<usize> {
    (0..entries.len()).min_by(|&a, &b| {
        entries[a]
            .score
            .total_cmp(&entries[b].score)
            .then(entries[a].n_components.cmp(&entries[b].n_components))
    })
}

/// Fits every candidate component count and keeps the one with the lowest criterion.
pub fn select_model(
    data: &[f64],
    n_features: usize,
    candidates: &[usize],
    criterion: Criterion,
    options: &EmOptions,
) -> Result<(GmmModel, Vec<SelectionEntry>)> {
    if candidates.is_empty() {
        return Err(Error::Config("empty list of component candidates".into()));
    }
    let fits = candidates
        .par_iter()
        .map(|&k| {
            let opts = EmOptions {
                n_components: k,
                ..options.clone()
            };
            let model = fit_em(data, n_features, &opts)?;
            let score = model.information_criteria()?.get(criterion);
            Ok((model, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<SelectionEntry> = candidates
        .iter()
        .zip(&fits)
        .map(|(&k, (_, s))| SelectionEntry {
            n_components: k,
            score: *s,
        })
        .collect();
    let best = pick_lowest(&entries).expect("non-empty candidates");
    let model = fits.into_iter().nth(best).expect("index in range").0;
    Ok((model, entries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OversampleConfig {
    pub n_components: usize,
    /// Desired minority:majority count ratio after augmentation, in (0, 1].
    pub target_ratio: f64,
    /// Minimum minority rows per mixture component.
    pub min_support: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for OversampleConfig {
    fn default() -> Self {
        OversampleConfig {
            n_components: 200,
            target_ratio: 1.0,
            min_support: 10,
            max_iter: 100,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OversampleReport {
    pub n_minority: usize,
    pub n_majority: usize,
    pub n_synthetic: usize,
    pub n_components_used: usize,
    pub gmm: Option<GmmModel>,
    pub warnings: Vec<String>,
}

/// Number of synthetic positives that brings the minority up to `ratio * majority`.
pub fn synthetic_count(n_minority: usize, n_majority: usize, ratio: f64) -> usize {
    let target = (ratio * n_majority as f64).round() as usize;
    target.saturating_sub(n_minority)
}

/// Fits a mixture on the positive rows of `train` and appends samples from it
/// as synthetic positives. Majority rows are left untouched.
pub fn oversample_minority(train: &Dataset, config: &OversampleConfig) -> Result<(Dataset, OversampleReport)> {
    if !(config.target_ratio > 0.0 && config.target_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "target ratio {} outside (0, 1]",
            config.target_ratio
        )));
    }
    let minority: Vec<usize> = (0..train.n_rows()).filter(|&i| train.labels[i]).collect();
    let n_minority = minority.len();
    let n_majority = train.n_rows() - n_minority;
    if n_minority == 0 {
        return Err(Error::Data("no minority rows to oversample".into()));
    }
    let n_synthetic = synthetic_count(n_minority, n_majority, config.target_ratio);
    let mut report = OversampleReport {
        n_minority,
        n_majority,
        n_synthetic,
        n_components_used: 0,
        gmm: None,
        warnings: Vec::new(),
    };
    let mut augmented = train.clone();
    if n_synthetic == 0 {
        return Ok((augmented, report));
    }

    let feasible = (n_minority / config.min_support.max(1)).max(1);
    let k = config.n_components.min(feasible).min(n_minority);
    if k < config.n_components {
        let msg = format!(
            "{n_minority} minority rows support at most {k} components; requested {}",
            config.n_components
        );
        warn!("{msg}");
        report.warnings.push(msg);
    }

    let d = train.n_cols();
    let mut data = Vec::with_capacity(n_minority * d);
    for &i in &minority {
        data.extend_from_slice(train.row(i));
    }
    let gmm = fit_em(
        &data,
        d,
        &EmOptions {
            n_components: k,
            max_iter: config.max_iter,
            tol: config.tol,
            seed: config.seed,
            variance_floor: VARIANCE_FLOOR,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let samples = gmm.sample(n_synthetic, &mut rng);
    augmented.append_rows(&samples, true, RowOrigin::Synthetic);
    report.n_components_used = k;
    report.gmm = Some(gmm);
    Ok((augmented, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_1d(weights: &[f64], means: &[f64], vars: &[f64]) -> GmmModel {
        GmmModel {
            n_components: weights.len(),
            n_features: 1,
            weights: weights.to_vec(),
            means: means.to_vec(),
            variances: vars.to_vec(),
            log_likelihood: None,
            n_fit: None,
            n_iter: 0,
            converged: false,
            log_likelihood_history: vec![],
        }
    }

    fn gaussian_data(rng: &mut ChaCha8Rng, centres: &[[f64; 2]], sd: f64, per: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for c in centres {
            for _ in 0..per {
                for &m in c {
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(m + sd * z);
                }
            }
        }
        out
    }

    #[test]
    fn log_density_examples() {
        let std_normal_peak = -0.5 * (2.0 * PI).ln();
        let one = model_1d(&[1.0], &[0.0], &[1.0]);
        assert!((one.log_density(&[0.0]) - std_normal_peak).abs() < 1e-12);
        assert!((std_normal_peak + 0.9189).abs() < 1e-4);

        let twins = model_1d(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0]);
        assert!((twins.log_density(&[0.0]) - std_normal_peak).abs() < 1e-12);

        // Far component contributes exp(-200) relative mass.
        let apart = model_1d(&[0.5, 0.5], &[-10.0, 10.0], &[1.0, 1.0]);
        let expected = (0.5f64).ln() + std_normal_peak;
        assert!((apart.log_density(&[-10.0]) - expected).abs() < 1e-9);
    }

    #[test]
    fn density_integrates_to_one() {
        let m = model_1d(&[0.3, 0.7], &[-1.0, 2.0], &[0.5, 2.0]);
        // Simpson's rule over +-12 sd of the widest component around the extremes.
        let (a, b) = (-1.0 - 12.0 * 2f64.sqrt(), 2.0 + 12.0 * 2f64.sqrt());
        let steps = 20_000;
        let h = (b - a) / steps as f64;
        let f = |x: f64| m.log_density(&[x]).exp();
        let mut s = f(a) + f(b);
        for i in 1..steps {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        let integral = s * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn single_component_recovers_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = gaussian_data(&mut rng, &[[3.0, -2.0]], 0.5, 2000);
        let m = fit_em(&data, 2, &EmOptions { n_components: 1, ..EmOptions::default() }).unwrap();
        let tol = 3.0 * 0.5 / (2000f64).sqrt();
        assert!((m.means[0] - 3.0).abs() < tol);
        assert!((m.means[1] + 2.0).abs() < tol);
        assert!((m.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = gaussian_data(&mut rng, &[[0.0, 0.0], [8.0, 8.0]], 0.5, 500);
        let m = fit_em(&data, 2, &EmOptions { n_components: 2, seed: 5, ..EmOptions::default() }).unwrap();
        // Centroid oracle: the sample mean of each generated cluster.
        let centroid = |part: &[f64]| {
            let n = part.len() as f64 / 2.0;
            [
                part.iter().step_by(2).sum::<f64>() / n,
                part.iter().skip(1).step_by(2).sum::<f64>() / n,
            ]
        };
        let c = [centroid(&data[..1000]), centroid(&data[1000..])];
        for target in c {
            let hit = (0..2).any(|k| {
                (m.means[2 * k] - target[0]).abs() < 0.1 && (m.means[2 * k + 1] - target[1]).abs() < 0.1
            });
            assert!(hit, "{target:?} not recovered by {:?}", m.means);
        }
    }

    #[test]
    fn one_component_per_point_stays_finite() {
        let data: Vec<f64> = (0..12).map(|i| (i * i) as f64 * 0.37).collect();
        let m = fit_em(&data, 1, &EmOptions { n_components: 12, max_iter: 300, ..EmOptions::default() }).unwrap();
        assert!(m.log_likelihood.unwrap().is_finite());
        assert!(m.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
        assert!(m.means.iter().chain(&m.weights).all(|v| v.is_finite()));
        // Upper bound: every point at the peak of a floored component with weight 1/12.
        let cap = 12.0 * ((1.0f64 / 12.0).ln() - 0.5 * (2.0 * PI * VARIANCE_FLOOR).ln());
        assert!(m.log_likelihood.unwrap() <= cap + 1e-6);
        for w in m.log_likelihood_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn em_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = gaussian_data(&mut rng, &[[0.0, 1.0], [2.0, -1.0], [1.0, 4.0]], 1.0, 200);
        let m = fit_em(&data, 2, &EmOptions { n_components: 5, tol: 0.0, max_iter: 60, ..EmOptions::default() }).unwrap();
        for w in m.log_likelihood_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        assert!(fit_em(&[1.0, 2.0], 1, &EmOptions { n_components: 3, ..EmOptions::default() }).is_err());
        assert!(fit_em(&[1.0, f64::NAN], 1, &EmOptions { n_components: 1, ..EmOptions::default() }).is_err());
    }

    #[test]
    fn criteria_examples() {
        let ic = information_criteria_from(-10.0, 3, 1.0);
        assert_eq!((ic.aic, ic.bic), (26.0, 20.0));
        assert_eq!(information_criteria_from(0.0, 0, 10.0).aic, 0.0);
        let e2 = std::f64::consts::E.powi(2);
        assert!((information_criteria_from(0.0, 1, e2).bic - 4.0).abs() < 1e-12);
        assert!((information_criteria_from(0.0, 1, e2).bic_standard - 2.0).abs() < 1e-12);

        let unfitted = model_1d(&[1.0], &[0.0], &[1.0]);
        assert!(matches!(unfitted.information_criteria(), Err(Error::State(_))));
        let m = model_1d(&[0.5, 0.5], &[0.0, 1.0], &[1.0, 1.0]);
        assert_eq!(m.n_params(), 5);
    }

    #[test]
    fn selection_tie_prefers_fewer_components() {
        let entries = vec![
            SelectionEntry { n_components: 3, score: 10.0 },
            SelectionEntry { n_components: 2, score: 10.0 },
            SelectionEntry { n_components: 4, score: 11.0 },
        ];
        assert_eq!(entries[pick_lowest(&entries).unwrap()].n_components, 2);
        assert_eq!(pick_lowest(&[]), None);
    }

    #[test]
    fn selection_single_candidate_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = gaussian_data(&mut rng, &[[0.0, 0.0]], 1.0, 100);
        let (m, entries) = select_model(&data, 2, &[5], Criterion::Bic, &EmOptions::default()).unwrap();
        assert_eq!(m.n_components, 5);
        assert_eq!(entries.len(), 1);
        assert!(select_model(&data, 2, &[], Criterion::Bic, &EmOptions::default()).is_err());
    }

    #[test]
    fn oversampling_counts() {
        assert_eq!(synthetic_count(60, 940, 1.0), 880);
        assert_eq!(synthetic_count(60, 940, 60.0 / 940.0), 0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let labels: Vec<bool> = (0..1000).map(|i| i % 50 < 3).collect();
        let train = Dataset::from_rows(&rows, labels).unwrap();
        let cfg = OversampleConfig { n_components: 200, seed: 1, ..OversampleConfig::default() };
        let (aug, report) = oversample_minority(&train, &cfg).unwrap();
        assert_eq!(report.n_synthetic, 880);
        assert_eq!(report.n_components_used, 6);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(aug.n_rows(), 1880);
        assert_eq!(aug.positive_count(), 940);
        assert_eq!(&aug.values()[..2000], train.values());
        assert!(aug.origins[1000..].iter().all(|o| *o == RowOrigin::Synthetic));
    }

    #[test]
    fn oversampling_rejects_bad_input() {
        let train = Dataset::from_rows(&[vec![0.0], vec![1.0]], vec![false, false]).unwrap();
        assert!(oversample_minority(&train, &OversampleConfig::default()).is_err());
        let train = Dataset::from_rows(&[vec![0.0], vec![1.0]], vec![true, false]).unwrap();
        let cfg = OversampleConfig { target_ratio: 1.5, ..OversampleConfig::default() };
        assert!(oversample_minority(&train, &cfg).is_err());
    }

    #[test]
    fn samples_follow_component_weights() {
        let m = model_1d(&[0.2, 0.5, 0.3], &[-5.0, 0.0, 5.0], &[1.0, 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[m.sample_component(&mut rng)] += 1;
        }
        for (c, w) in counts.iter().zip(&m.weights) {
            let sd = (n as f64 * w * (1.0 - w)).sqrt();
            assert!((*c as f64 - n as f64 * w).abs() < 4.0 * sd);
        }
    }
}
