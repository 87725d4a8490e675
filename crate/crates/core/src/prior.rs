//! Data-driven layer priors.
//!
//! Each adapted layer gets an empirical weight standard deviation from its
//! frozen base matrix. The spread of those values across layers is fitted
//! with a two-mode model (1-D Gaussian mixture via EM, or 2-means), and a
//! dual prior assigns each layer the mean of its mode as prior sigma. The
//! single prior uses one global sigma instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::elbo::GaussianPrior;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;

pub const EM_TOLERANCE: f64 = 1e-8;
pub const EM_MAX_ITERS: usize = 500;
pub const RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStdProfile {
    pub layer: String,
    pub sigma_hat: f64,
    pub count: usize,
    pub mean: f64,
}

/// Bessel-corrected standard deviation over all entries of `weights`.
pub fn layer_std(layer: &str, weights: &Matrix) -> Result<LayerStdProfile> {
    let n = weights.len();
    if n < 2 {
        return Err(Error::Domain(format!("{layer}: need at least 2 weights, got {n}")));
    }
    let mean = shifted_mean(weights.data());
    let ss: f64 = weights.data().iter().map(|w| (w - mean) * (w - mean)).sum();
    Ok(LayerStdProfile {
        layer: layer.to_string(),
        sigma_hat: (ss / (n - 1) as f64).sqrt(),
        count: n,
        mean,
    })
}

/// Mean computed relative to the first element, exact for constant input.
fn shifted_mean(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else { return 0.0 };
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    #[default]
    Gmm,
    Kmeans,
}

impl std::str::FromStr for FitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(FitMethod::Gmm),
            "kmeans" => Ok(FitMethod::Kmeans),
            other => Err(Error::Config(format!("unknown fit method {other:?} (expected gmm|kmeans)"))),
        }
    }
}

/// Two-mode description of the per-layer sigma values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeFit {
    /// Ascending.
    pub means: [f64; 2],
    pub weights: [f64; 2],
    pub variances: [f64; 2],
    pub method: FitMethod,
    pub assignment: BTreeMap<String, usize>,
    /// Log-likelihood (gmm) or negative inertia (kmeans) of the kept restart.
    pub objective: f64,
}

/// One EM run's result plus its log-likelihood trace.
#[derive(Clone, Debug)]
pub struct EmRun {
    pub means: [f64; 2],
    pub weights: [f64; 2],
    pub variances: [f64; 2],
    pub log_likelihood: Vec<f64>,
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    (-0.5 * d * d / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = shifted_mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Two-component 1-D EM from the given starting means.
///
/// Component variances are floored at `1e-6` of the data variance so a
/// component cannot collapse onto a single point.
pub fn em_two_component(xs: &[f64], init_means: [f64; 2]) -> EmRun {
    let data_var = sample_variance(xs);
    let floor = (data_var * 1e-6).max(f64::MIN_POSITIVE);
    let mut means = init_means;
    let mut variances = [data_var.max(floor); 2];
    let mut weights = [0.5, 0.5];
    let mut trace = Vec::new();
    let mut resp = vec![[0.0f64; 2]; xs.len()];

    for _ in 0..EM_MAX_ITERS {
        // E step.
        let mut ll = 0.0;
        for (x, r) in xs.iter().zip(resp.iter_mut()) {
            let p0 = weights[0] * normal_pdf(*x, means[0], variances[0]);
            let p1 = weights[1] * normal_pdf(*x, means[1], variances[1]);
            let total = p0 + p1;
            if total > 0.0 {
                *r = [p0 / total, p1 / total];
                ll += total.ln();
            } else {
                // Both densities underflowed: give the point to the nearer mean.
                let near = usize::from((x - means[1]).abs() < (x - means[0]).abs());
                *r = [0.0; 2];
                r[near] = 1.0;
                ll += f64::MIN_POSITIVE.ln();
            }
        }
        let converged = trace.last().is_some_and(|prev: &f64| (ll - prev).abs() < EM_TOLERANCE);
        trace.push(ll);
        if converged {
            break;
        }

        // M step.
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= 0.0 {
                continue;
            }
            let mean = xs.iter().zip(&resp).map(|(x, r)| r[k] * x).sum::<f64>() / nk;
            let var = xs
                .iter()
                .zip(&resp)
                .map(|(x, r)| r[k] * (x - mean) * (x - mean))
                .sum::<f64>()
                / nk;
            means[k] = mean;
            variances[k] = var.max(floor);
            weights[k] = nk / xs.len() as f64;
        }
    }
    EmRun {
        means,
        weights,
        variances,
        log_likelihood: trace,
    }
}

/// k-means++ seeding for two centres on the line.
fn kmeanspp_seed(xs: &[f64], rng: &mut RngStream) -> [f64; 2] {
    let first = xs[rng.below(xs.len())];
    let d2: Vec<f64> = xs.iter().map(|x| (x - first) * (x - first)).collect();
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        return [first, first];
    }
    let mut target = rng.uniform() * total;
    for (x, d) in xs.iter().zip(&d2) {
        if target < *d {
            return [first, *x];
        }
        target -= d;
    }
    // Rounding left `target` past the end; take the farthest point.
    let far = xs
        .iter()
        .copied()
        .fold(first, |best, x| if (x - first).abs() > (best - first).abs() { x } else { best });
    [first, far]
}

fn nearest(x: f64, centres: &[f64; 2]) -> usize {
    usize::from((x - centres[1]).abs() < (x - centres[0]).abs())
}

struct KmeansRun {
    centres: [f64; 2],
    labels: Vec<usize>,
    inertia: f64,
}

fn lloyd_two(xs: &[f64], mut centres: [f64; 2]) -> KmeansRun {
    let mut labels: Vec<usize> = xs.iter().map(|&x| nearest(x, &centres)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        for (k, c) in centres.iter_mut().enumerate() {
            let members: Vec<f64> = xs.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(x, _)| *x).collect();
            if !members.is_empty() {
                *c = shifted_mean(&members);
            }
        }
        let next: Vec<usize> = xs.iter().map(|&x| nearest(x, &centres)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = xs
        .iter()
        .zip(&labels)
        .map(|(x, &l)| (x - centres[l]) * (x - centres[l]))
        .sum();
    KmeansRun {
        centres,
        labels,
        inertia,
    }
}

/// Fits two modes to the layer sigma values.
pub fn fit_two_modes(profiles: &[LayerStdProfile], method: FitMethod, rng: &mut RngStream) -> Result<ModeFit> {
    if profiles.len() < 4 {
        return Err(Error::Config(format!(
            "two-mode fit needs at least 4 layers, got {}",
            profiles.len()
        )));
    }
    let xs: Vec<f64> = profiles.iter().map(|p| p.sigma_hat).collect();
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::DegenerateFit(
            "all layer sigmas are identical; use a single prior instead".into(),
        ));
    }

    let (means, weights, variances, labels, objective) = match method {
        FitMethod::Gmm => {
            let mut best: Option<EmRun> = None;
            for _ in 0..RESTARTS {
                let mut init = kmeanspp_seed(&xs, rng);
                if init[0] == init[1] {
                    init[1] = xs[rng.below(xs.len())];
                }
                let run = em_two_component(&xs, init);
                let ll = *run.log_likelihood.last().expect("at least one EM iteration");
                if best
                    .as_ref()
                    .is_none_or(|b| ll > *b.log_likelihood.last().unwrap())
                {
                    best = Some(run);
                }
            }
            let run = best.expect("restarts > 0");
            let labels: Vec<usize> = xs
                .iter()
                .map(|&x| {
                    let p0 = run.weights[0] * normal_pdf(x, run.means[0], run.variances[0]);
                    let p1 = run.weights[1] * normal_pdf(x, run.means[1], run.variances[1]);
                    if p0 == 0.0 && p1 == 0.0 {
                        nearest(x, &run.means)
                    } else {
                        usize::from(p1 > p0)
                    }
                })
                .collect();
            let ll = *run.log_likelihood.last().unwrap();
            (run.means, run.weights, run.variances, labels, ll)
        }
        FitMethod::Kmeans => {
            let mut best: Option<KmeansRun> = None;
            for _ in 0..RESTARTS {
                let run = lloyd_two(&xs, kmeanspp_seed(&xs, rng));
                if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
                    best = Some(run);
                }
            }
            let run = best.expect("restarts > 0");
            let n = xs.len() as f64;
            let mut weights = [0.0; 2];
            let mut variances = [0.0; 2];
            let floor = (sample_variance(&xs) * 1e-6).max(f64::MIN_POSITIVE);
            for k in 0..2 {
                let members: Vec<f64> = xs.iter().zip(&run.labels).filter(|(_, &l)| l == k).map(|(x, _)| *x).collect();
                weights[k] = members.len() as f64 / n;
                variances[k] = if members.is_empty() {
                    floor
                } else {
                    sample_variance(&members).max(floor)
                };
            }
            (run.centres, weights, variances, run.labels, -run.inertia)
        }
    };

    if means[0] == means[1] {
        return Err(Error::DegenerateFit("both modes converged to the same mean".into()));
    }
    // Sort modes ascending and relabel.
    let order: [usize; 2] = if means[0] <= means[1] { [0, 1] } else { [1, 0] };
    let relabel = |k: usize| if order[0] == k { 0 } else { 1 };
    let assignment = profiles
        .iter()
        .zip(&labels)
        .map(|(p, &l)| (p.layer.clone(), relabel(l)))
        .collect();
    Ok(ModeFit {
        means: [means[order[0]], means[order[1]]],
        weights: [weights[order[0]], weights[order[1]]],
        variances: [variances[order[0]], variances[order[1]]],
        method,
        assignment,
        objective,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    #[default]
    Single,
    Dual,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(PriorKind::Single),
            "dual" => Ok(PriorKind::Dual),
            other => Err(Error::Config(format!("unknown prior kind {other:?} (expected single|dual)"))),
        }
    }
}

/// What a dual prior assigns to each layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualSigma {
    /// The mean of the layer's mode.
    #[default]
    ModeMean,
    /// The layer's own empirical sigma (ablation).
    LayerSigma,
}

/// The `priors.json` document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub mu_p: f64,
    pub method: Option<FitMethod>,
    pub mode_means: Vec<f64>,
    pub sigma_map: BTreeMap<String, f64>,
}

pub const DEFAULT_SINGLE_SIGMA: f64 = 1.0;

/// Builds a prior over `layers`.
///
/// `profiles` is only consulted for the [`DualSigma::LayerSigma`] variant.
pub fn build_prior(
    layers: &[String],
    fit: Option<&ModeFit>,
    kind: PriorKind,
    single_sigma: f64,
    dual_sigma: DualSigma,
    profiles: &[LayerStdProfile],
) -> Result<PriorSpec> {
    let sigma_map: BTreeMap<String, f64> = match kind {
        PriorKind::Single => {
            if !(single_sigma > 0.0) {
                return Err(Error::Config(format!("single prior sigma must be positive, got {single_sigma}")));
            }
            layers.iter().map(|l| (l.clone(), single_sigma)).collect()
        }
        PriorKind::Dual => {
            let fit = fit.ok_or_else(|| Error::Config("a dual prior needs a two-mode fit".into()))?;
            layers
                .iter()
                .map(|l| {
                    let mode = *fit
                        .assignment
                        .get(l)
                        .ok_or_else(|| Error::Config(format!("layer {l} missing from mode assignment")))?;
                    let sigma = match dual_sigma {
                        DualSigma::ModeMean => fit.means[mode],
                        DualSigma::LayerSigma => profiles
                            .iter()
                            .find(|p| &p.layer == l)
                            .map(|p| p.sigma_hat)
                            .ok_or_else(|| Error::Config(format!("no sigma profile for layer {l}")))?,
                    };
                    Ok((l.clone(), sigma))
                })
                .collect::<Result<_>>()?
        }
    };
    let spec = PriorSpec {
        kind,
        mu_p: 0.0,
        method: fit.map(|f| f.method),
        mode_means: fit.map(|f| f.means.to_vec()).unwrap_or_default(),
        sigma_map,
    };
    spec.to_gaussian()?;
    Ok(spec)
}

impl PriorSpec {
    pub fn to_gaussian(&self) -> Result<GaussianPrior> {
        let prior = GaussianPrior {
            mu_p: self.mu_p,
            sigma: self.sigma_map.clone(),
        };
        prior.validate()?;
        Ok(prior)
    }
}

/// CSV rows `layer,sigma_hat,mode` for histogram plotting.
pub fn histogram_csv(profiles: &[LayerStdProfile], fit: Option<&ModeFit>) -> String {
    let mut out = String::from("layer,sigma_hat,mode\n");
    for p in profiles {
        let mode = fit
            .and_then(|f| f.assignment.get(&p.layer))
            .map_or(String::new(), |m| m.to_string());
        out.push_str(&format!("{},{},{}\n", p.layer, p.sigma_hat, mode));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profiles(values: &[f64]) -> Vec<LayerStdProfile> {
        values
            .iter()
            .enumerate()
            .map(|(i, &s)| LayerStdProfile {
                layer: format!("layer{i:03}"),
                sigma_hat: s,
                count: 100,
                mean: 0.0,
            })
            .collect()
    }

    fn planted(rng: &mut RngStream) -> Vec<f64> {
        let mut xs: Vec<f64> = (0..100).map(|_| 0.02 + 0.002 * rng.normal()).collect();
        xs.extend((0..100).map(|_| 0.08 + 0.005 * rng.normal()));
        xs
    }

    #[test]
    fn constant_matrix_has_zero_sigma() {
        let p = layer_std("c", &Matrix::filled(3, 4, 0.7)).unwrap();
        assert_eq!(p.sigma_hat, 0.0);
        assert_eq!(p.mean, 0.7);
    }

    #[test]
    fn hand_example() {
        let p = layer_std("w", &Matrix::from_rows(&[[1.0, -1.0], [1.0, -1.0]]).unwrap()).unwrap();
        assert_eq!(p.mean, 0.0);
        assert!((p.sigma_hat - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((p.sigma_hat - 1.154701).abs() < 1e-6);
    }

    #[test]
    fn two_pass_brute_force() {
        let mut rng = RngStream::new(21, 0);
        let w = rng.normal_matrix(50, 50, 0.3);
        let p = layer_std("w", &w).unwrap();
        let mut sum = 0.0;
        for v in w.data() {
            sum += v;
        }
        let mean = sum / 2500.0;
        let mut ss = 0.0;
        for v in w.data() {
            ss += (v - mean) * (v - mean);
        }
        assert!((p.sigma_hat - (ss / 2499.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn too_few_weights() {
        assert!(matches!(layer_std("w", &Matrix::zeros(1, 1)), Err(Error::Domain(_))));
    }

    #[test]
    fn planted_modes_are_recovered() {
        let mut rng = RngStream::new(5, 0);
        let ps = profiles(&planted(&mut rng));
        for method in [FitMethod::Gmm, FitMethod::Kmeans] {
            let fit = fit_two_modes(&ps, method, &mut RngStream::new(1, 2)).unwrap();
            assert!((fit.means[0] - 0.02).abs() / 0.02 < 0.05, "{method:?} {:?}", fit.means);
            assert!((fit.means[1] - 0.08).abs() / 0.08 < 0.05, "{method:?} {:?}", fit.means);
            assert!((fit.weights[0] + fit.weights[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_kmeans_is_exact() {
        let mut xs = vec![0.01; 50];
        xs.extend(vec![0.09; 50]);
        let fit = fit_two_modes(&profiles(&xs), FitMethod::Kmeans, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(fit.means, [0.01, 0.09]);
    }

    #[test]
    fn gmm_and_kmeans_agree_when_well_separated() {
        let mut rng = RngStream::new(8, 0);
        let mut xs: Vec<f64> = (0..40).map(|_| 0.02 + 0.001 * rng.normal()).collect();
        xs.extend((0..40).map(|_| 0.05 + 0.001 * rng.normal()));
        let ps = profiles(&xs);
        let g = fit_two_modes(&ps, FitMethod::Gmm, &mut RngStream::new(3, 0)).unwrap();
        let k = fit_two_modes(&ps, FitMethod::Kmeans, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(g.assignment, k.assignment);
    }

    #[test]
    fn identical_sigmas_are_degenerate() {
        let r = fit_two_modes(&profiles(&[0.1; 6]), FitMethod::Gmm, &mut RngStream::new(0, 0));
        assert!(matches!(r, Err(Error::DegenerateFit(_))));
        let r = fit_two_modes(&profiles(&[0.1, 0.2, 0.3]), FitMethod::Gmm, &mut RngStream::new(0, 0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = RngStream::new(9, 0);
        let ps = profiles(&planted(&mut rng));
        for method in [FitMethod::Gmm, FitMethod::Kmeans] {
            let a = fit_two_modes(&ps, method, &mut RngStream::new(4, 4)).unwrap();
            let b = fit_two_modes(&ps, method, &mut RngStream::new(4, 4)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn em_log_likelihood_never_decreases() {
        let mut rng = RngStream::new(12, 0);
        let xs = planted(&mut rng);
        for init in [[0.01, 0.1], [0.05, 0.06], [0.03, 0.02]] {
            let run = em_two_component(&xs, init);
            for w in run.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn build_prior_variants() {
        let layers: Vec<String> = (0..4).map(|i| format!("layer{i:03}")).collect();
        let single = build_prior(&layers, None, PriorKind::Single, 1.0, DualSigma::ModeMean, &[]).unwrap();
        assert!(single.sigma_map.values().all(|&s| s == 1.0));
        assert_eq!(single.mu_p, 0.0);
        let half = build_prior(&layers, None, PriorKind::Single, 0.5, DualSigma::ModeMean, &[]).unwrap();
        assert!(half.sigma_map.values().all(|&s| s == 0.5));

        assert!(matches!(
            build_prior(&layers, None, PriorKind::Dual, 1.0, DualSigma::ModeMean, &[]),
            Err(Error::Config(_))
        ));

        let ps = profiles(&[0.02, 0.021, 0.079, 0.081]);
        let fit = fit_two_modes(&ps, FitMethod::Gmm, &mut RngStream::new(0, 0)).unwrap();
        let dual = build_prior(&layers, Some(&fit), PriorKind::Dual, 1.0, DualSigma::ModeMean, &ps).unwrap();
        let mut distinct: Vec<f64> = dual.sigma_map.values().copied().collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
        assert_eq!(dual.sigma_map["layer000"], fit.means[0]);
        assert_eq!(dual.sigma_map["layer003"], fit.means[1]);

        let per_layer = build_prior(&layers, Some(&fit), PriorKind::Dual, 1.0, DualSigma::LayerSigma, &ps).unwrap();
        assert_eq!(per_layer.sigma_map["layer002"], 0.079);
    }

    #[test]
    fn histogram_has_one_row_per_layer() {
        let ps = profiles(&[0.02, 0.021, 0.079, 0.081]);
        let fit = fit_two_modes(&ps, FitMethod::Kmeans, &mut RngStream::new(0, 0)).unwrap();
        let csv = histogram_csv(&ps, Some(&fit));
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("layer003,0.081,1"));
    }
}
