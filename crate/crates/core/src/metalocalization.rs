//! RSS fingerprint localization with a reconfigurable surface.
//!
//! Each cycle the access point picks a surface configuration, the radio map
//! (expected RSS per block) follows from the channel model, every user
//! measures its RSS and the loss-minimizing estimator maps the measurement
//! to a block. Users' block priors are refined across cycles by Bayes
//! filtering.
//!
//! The RSS error is static multipath: for a given user and configuration it
//! is a fixed Gaussian draw (σ_s dB), redrawn only when the configuration
//! changes. Measuring twice under the same configuration therefore carries
//! no new information, and the prior update skips repeated configurations.

use std::collections::HashSet;

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::channel::{los_gain, ris_path_gain, Scene};
use crate::error::{Error, Result};
pub use crate::ris::ConfigSearch;
use crate::ris::{neighbor_descent, RisConfig};
use crate::rng::SeedPath;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Expected RSS per block (dB) and the measurement noise σ_s (dB).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioMap {
    pub rss: Vec<f64>,
    pub sigma: f64,
}

impl RadioMap {
    pub fn new(rss: Vec<f64>, sigma: f64) -> Result<Self> {
        if rss.is_empty() || rss.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("radio map entries must be finite"));
        }
        if !(sigma >= 0.0) {
            return Err(Error::invalid("RSS noise must be nonnegative"));
        }
        Ok(RadioMap { rss, sigma })
    }

    pub fn blocks(&self) -> usize {
        self.rss.len()
    }

    fn log_density(&self, s: f64, q: usize) -> f64 {
        let d = s - self.rss[q];
        -d * d / (2.0 * self.sigma * self.sigma)
    }
}

/// Single-tone channel gains from the access point to every block centre,
/// aggregated per element group.
#[derive(Debug, Clone)]
pub struct MapModel {
    base: Vec<Complex64>,
    groups: DMatrix<Complex64>,
    responses: Vec<Complex64>,
    centers: Vec<Vector3<f64>>,
}

impl MapModel {
    pub fn new(scene: &Scene) -> Result<Self> {
        let centers = scene.block_centers();
        let lambda = scene.grid.center_wavelength();
        let (g_t, g_r) = (scene.tx.gain, scene.rx.gain);
        let scatter = scene.scatter_response()[0];
        let base = centers
            .iter()
            .map(|c| Ok(los_gain((c - scene.tx.position).norm(), g_t, g_r, lambda)? + scatter))
            .collect::<Result<Vec<_>>>()?;
        let (groups, responses) = match &scene.panel {
            None => (DMatrix::from_element(0, centers.len(), ZERO), Vec::new()),
            Some(panel) => {
                let mut m = DMatrix::from_element(panel.group_count(), centers.len(), ZERO);
                let one = Complex64::new(1.0, 0.0);
                for (g, members) in panel.groups().iter().enumerate() {
                    for &e in members {
                        let p = panel.elements()[e];
                        let d_t = (p - scene.tx.position).norm();
                        for (q, c) in centers.iter().enumerate() {
                            m[(g, q)] += ris_path_gain(d_t, (c - p).norm(), one, g_t, g_r, lambda)?;
                        }
                    }
                }
                (m, panel.state_responses())
            }
        };
        Ok(MapModel {
            base,
            groups,
            responses,
            centers,
        })
    }

    pub fn block_count(&self) -> usize {
        self.base.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups.nrows()
    }

    pub fn state_count(&self) -> usize {
        self.responses.len()
    }

    pub fn centers(&self) -> &[Vector3<f64>] {
        &self.centers
    }

    pub fn map(&self, config: &RisConfig, sigma: f64) -> Result<RadioMap> {
        config.validate(self.group_count(), self.state_count().max(1))?;
        let rss = (0..self.block_count())
            .map(|q| {
                let mut h = self.base[q];
                for g in 0..self.group_count() {
                    h += self.responses[config.0[g]] * self.groups[(g, q)];
                }
                10.0 * h.norm_sqr().log10()
            })
            .collect();
        RadioMap::new(rss, sigma)
    }

    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> RisConfig {
        RisConfig::random(self.group_count(), self.state_count().max(1), rng)
    }
}

/// Radio map of `config` evaluated directly from the channel model at each
/// block centre (noise off).
pub fn build_radio_map(scene: &Scene, config: &RisConfig, sigma: f64) -> Result<RadioMap> {
    MapModel::new(scene)?.map(config, sigma)
}

/// Per-user block probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorGrid(Vec<Vec<f64>>);

impl PriorGrid {
    pub fn new(users: Vec<Vec<f64>>) -> Result<Self> {
        for p in &users {
            if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::invalid("prior entries must be nonnegative"));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("user prior sums to {s}")));
            }
        }
        Ok(PriorGrid(users))
    }

    pub fn uniform(users: usize, blocks: usize) -> Self {
        PriorGrid(vec![vec![1.0 / blocks as f64; blocks]; users])
    }

    pub fn users(&self) -> usize {
        self.0.len()
    }

    pub fn user(&self, i: usize) -> &[f64] {
        &self.0[i]
    }

    pub fn set_user(&mut self, i: usize, p: Vec<f64>) {
        self.0[i] = p;
    }
}

/// `γ_{q,q'}`: Euclidean distance between block centres.
#[derive(Debug, Clone, PartialEq)]
pub struct MislocalizationWeights(DMatrix<f64>);

impl MislocalizationWeights {
    pub fn from_centers(centers: &[Vector3<f64>]) -> Self {
        let n = centers.len();
        MislocalizationWeights(DMatrix::from_fn(n, n, |i, j| {
            (centers[i] - centers[j]).norm()
        }))
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid("weights must be square"));
        }
        for i in 0..m.nrows() {
            if m[(i, i)] != 0.0 {
                return Err(Error::invalid("weights need a zero diagonal"));
            }
        }
        if m.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("weights must be nonnegative"));
        }
        Ok(MislocalizationWeights(m))
    }

    pub fn get(&self, q: usize, q2: usize) -> f64 {
        self.0[(q, q2)]
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

fn argmin_risk(mass: &[f64], weights: &MislocalizationWeights) -> usize {
    let n = mass.len();
    let mut best = (f64::INFINITY, 0);
    for q2 in 0..n {
        let r: f64 = (0..n)
            .filter(|&q| mass[q] > 0.0)
            .map(|q| mass[q] * weights.get(q, q2))
            .sum();
        if r < best.0 {
            best = (r, q2);
        }
    }
    best.1
}

/// Unnormalized posterior mass `p_q·N(s; map_q, σ_s²)` scaled so the largest
/// entry is 1. With σ_s = 0 only blocks whose map value equals `s` keep mass.
fn likelihood_mass(map: &RadioMap, prior: &[f64], s: f64) -> Vec<f64> {
    if map.sigma > 0.0 {
        let logs: Vec<f64> = prior
            .iter()
            .enumerate()
            .map(|(q, p)| {
                if *p > 0.0 {
                    p.ln() + map.log_density(s, q)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return vec![0.0; prior.len()];
        }
        logs.iter().map(|l| (l - top).exp()).collect()
    } else {
        prior
            .iter()
            .zip(&map.rss)
            .map(|(p, m)| {
                if (m - s).abs() <= 1e-12 * (1.0 + m.abs()) {
                    *p
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Loss-minimizing estimator for one user and one radio map:
/// `argmin_{q'} Σ_q p_q·γ_{q,q'}·N(s; map_q, σ_s²)`, ties to the lowest index.
#[derive(Debug, Clone, Copy)]
pub struct OptimalRule<'a> {
    pub map: &'a RadioMap,
    pub prior: &'a [f64],
    pub weights: &'a MislocalizationWeights,
}

impl OptimalRule<'_> {
    pub fn decide(&self, s: f64) -> usize {
        argmin_risk(&likelihood_mass(self.map, self.prior, s), self.weights)
    }
}

pub fn optimal_rule<'a>(
    map: &'a RadioMap,
    prior: &'a [f64],
    weights: &'a MislocalizationWeights,
) -> OptimalRule<'a> {
    OptimalRule {
        map,
        prior,
        weights,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte Carlo expected mislocalization distance of `rule` for one user:
/// block drawn from the prior, RSS drawn around the map value.
pub fn localization_loss<R, D>(
    map: &RadioMap,
    mut rule: D,
    prior: &[f64],
    weights: &MislocalizationWeights,
    samples: usize,
    rng: &mut R,
) -> Result<LossEstimate>
where
    R: Rng + ?Sized,
    D: FnMut(f64) -> usize,
{
    if samples == 0 {
        return Err(Error::invalid("samples must be at least one"));
    }
    check_sizes(map, prior, weights)?;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut q = prior.len() - 1;
        for (i, p) in prior.iter().enumerate() {
            acc += p;
            if u < acc {
                q = i;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        let l = weights.get(q, rule(map.rss[q] + map.sigma * z));
        sum += l;
        sum_sq += l * l;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = if samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(LossEstimate {
        mean,
        std_error: (var / n).sqrt(),
        samples,
    })
}

fn check_sizes(map: &RadioMap, prior: &[f64], weights: &MislocalizationWeights) -> Result<()> {
    if prior.len() != map.blocks() || weights.len() != map.blocks() {
        return Err(Error::invalid(
            "map, prior and weights must cover the same blocks",
        ));
    }
    Ok(())
}

/// Expected loss of the optimal rule,
/// `∫ min_{q'} Σ_q p_q·γ_{q,q'}·N(s; map_q, σ_s²) ds`.
///
/// The RSS axis is split where the decision switches (located on a grid of
/// step σ_s/4 and refined by bisection); within each segment the decision is
/// constant and the integral is a sum of Gaussian CDF differences.
pub fn expected_loss(map: &RadioMap, prior: &[f64], weights: &MislocalizationWeights) -> f64 {
    let live: Vec<usize> = (0..prior.len()).filter(|&q| prior[q] > 1e-15).collect();
    if live.len() <= 1 {
        return 0.0;
    }
    if map.sigma == 0.0 {
        let rule = optimal_rule(map, prior, weights);
        return live
            .iter()
            .map(|&q| prior[q] * weights.get(q, rule.decide(map.rss[q])))
            .sum();
    }
    let sigma = map.sigma;
    let n = prior.len();
    let log_p: Vec<f64> = live.iter().map(|&q| prior[q].ln()).collect();
    let means: Vec<f64> = live.iter().map(|&q| map.rss[q]).collect();
    // γ restricted to live rows, laid out decision-major
    let gam: Vec<f64> = (0..n)
        .flat_map(|d| live.iter().map(move |&q| weights.get(q, d)))
        .collect();
    let mut mass = vec![0.0; live.len()];
    let mut decide = |s: f64| {
        let mut top = f64::NEG_INFINITY;
        for (i, m) in mass.iter_mut().enumerate() {
            let z = s - means[i];
            *m = log_p[i] - z * z / (2.0 * sigma * sigma);
            top = top.max(*m);
        }
        for m in mass.iter_mut() {
            *m = (*m - top).exp();
        }
        let mut best = (f64::INFINITY, 0);
        for d in 0..n {
            let row = &gam[d * live.len()..(d + 1) * live.len()];
            let r: f64 = row.iter().zip(&mass).map(|(g, m)| g * m).sum();
            if r < best.0 {
                best = (r, d);
            }
        }
        best.1
    };
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 7.0 * sigma;
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 7.0 * sigma;
    let h = sigma / 4.0;
    let steps = ((hi - lo) / h).ceil() as usize;
    let mut cuts = vec![f64::NEG_INFINITY];
    let mut decisions = vec![decide(lo)];
    let mut prev_s = lo;
    for k in 1..=steps {
        let s = lo + k as f64 * h;
        let d = decide(s);
        let last = *decisions.last().unwrap();
        if d != last {
            let (mut a, mut b) = (prev_s, s);
            for _ in 0..48 {
                let m = 0.5 * (a + b);
                if decide(m) == last {
                    a = m;
                } else {
                    b = m;
                }
            }
            cuts.push(0.5 * (a + b));
            decisions.push(d);
        }
        prev_s = s;
    }
    cuts.push(f64::INFINITY);
    let cdf = |x: f64, m: f64| {
        if x == f64::INFINITY {
            1.0
        } else if x == f64::NEG_INFINITY {
            0.0
        } else {
            0.5 * erfc(-(x - m) / (sigma * std::f64::consts::SQRT_2))
        }
    };
    let mut total = 0.0;
    for (seg, &d) in decisions.iter().enumerate() {
        let (a, b) = (cuts[seg], cuts[seg + 1]);
        for (i, &q) in live.iter().enumerate() {
            let w = weights.get(q, d);
            if w > 0.0 {
                total += prior[q] * w * (cdf(b, means[i]) - cdf(a, means[i]));
            }
        }
    }
    total
}

/// Loss of deciding from the prior alone (no new measurement).
pub fn prior_risk(prior: &[f64], weights: &MislocalizationWeights) -> f64 {
    let q2 = argmin_risk(prior, weights);
    (0..prior.len())
        .map(|q| prior[q] * weights.get(q, q2))
        .sum()
}

/// `p_q ∝ p_q·N(s; map_q, σ_s²)`, in log space.
pub fn cycle_update(prior: &[f64], s: f64, map: &RadioMap) -> Result<Vec<f64>> {
    if prior.len() != map.blocks() {
        return Err(Error::invalid("prior and map must cover the same blocks"));
    }
    let w = likelihood_mass(map, prior, s);
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Unresolved(
            "measurement inconsistent with every block of nonzero mass".into(),
        ));
    }
    Ok(w.iter().map(|v| v / total).collect())
}

/// Configuration selection schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigScheme {
    Fixed,
    Random,
    Greedy,
    SimAnneal,
}

impl ConfigScheme {
    pub fn name(self) -> &'static str {
        match self {
            ConfigScheme::Fixed => "fixed",
            ConfigScheme::Random => "random",
            ConfigScheme::Greedy => "greedy",
            ConfigScheme::SimAnneal => "sim_anneal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(ConfigScheme::Fixed),
            "random" => Some(ConfigScheme::Random),
            "greedy" => Some(ConfigScheme::Greedy),
            "sim_anneal" => Some(ConfigScheme::SimAnneal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Objective evaluations per selection.
    pub budget: usize,
    /// Annealing start temperature relative to the start loss.
    pub temperature: f64,
    /// Geometric cooling factor per step.
    pub cooling: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            budget: 100,
            temperature: 0.05,
            cooling: 0.97,
        }
    }
}

/// Sum over users of the expected loss after measuring under a config.
/// Configurations already measured add no information and score the
/// users' prior-only risk.
pub struct SelectionObjective<'a> {
    pub model: &'a MapModel,
    pub priors: &'a PriorGrid,
    pub weights: &'a MislocalizationWeights,
    pub sigma: f64,
    pub measured: &'a HashSet<RisConfig>,
}

impl SelectionObjective<'_> {
    pub fn loss(&self, config: &RisConfig) -> f64 {
        if self.measured.contains(config) {
            return (0..self.priors.users())
                .map(|i| prior_risk(self.priors.user(i), self.weights))
                .sum();
        }
        let map = match self.model.map(config, self.sigma) {
            Ok(m) => m,
            Err(_) => return f64::INFINITY,
        };
        (0..self.priors.users())
            .map(|i| expected_loss(&map, self.priors.user(i), self.weights))
            .sum()
    }
}

/// Multi-start best-improvement neighbour descent.
pub fn greedy_search<R, L>(
    model: &MapModel,
    loss: L,
    budget: usize,
    rng: &mut R,
) -> Result<ConfigSearch>
where
    R: Rng + ?Sized,
    L: FnMut(&RisConfig) -> f64,
{
    neighbor_descent(model.group_count(), model.state_count(), loss, budget, rng)
}

/// Simulated annealing over single-group moves with geometric cooling.
/// Temperature 0 accepts only improvements.
pub fn anneal_search<R, L>(
    model: &MapModel,
    mut loss: L,
    options: &SearchOptions,
    rng: &mut R,
) -> Result<ConfigSearch>
where
    R: Rng + ?Sized,
    L: FnMut(&RisConfig) -> f64,
{
    if options.budget == 0 {
        return Err(Error::invalid(
            "search budget must be at least one evaluation",
        ));
    }
    let k = model.state_count().max(1);
    let mut current = model.random_config(rng);
    let mut current_loss = loss(&current);
    let initial_loss = current_loss;
    let mut best = (current.clone(), current_loss);
    let mut path = vec![current_loss];
    let mut temp = options.temperature * current_loss.abs().max(f64::MIN_POSITIVE);
    let mut evals = 1;
    while evals < options.budget && k >= 2 && model.group_count() > 0 {
        let mut cand = current.clone();
        let g = rng.random_range(0..model.group_count());
        let shift = rng.random_range(1..k);
        cand.0[g] = (cand.0[g] + shift) % k;
        let v = loss(&cand);
        evals += 1;
        let accept = v < current_loss
            || (temp > 0.0 && rng.random::<f64>() < (-(v - current_loss) / temp).exp());
        if accept {
            current = cand;
            current_loss = v;
            if v < best.1 {
                best = (current.clone(), v);
            }
        }
        path.push(current_loss);
        temp *= options.cooling;
    }
    Ok(ConfigSearch {
        config: best.0,
        loss: best.1,
        initial_loss,
        path,
        evaluations: evals,
    })
}

/// Configuration for the next cycle.
pub fn select_config<R: Rng + ?Sized>(
    objective: &SelectionObjective,
    scheme: ConfigScheme,
    fixed: &RisConfig,
    options: &SearchOptions,
    rng: &mut R,
) -> Result<RisConfig> {
    Ok(match scheme {
        ConfigScheme::Fixed => fixed.clone(),
        ConfigScheme::Random => objective.model.random_config(rng),
        ConfigScheme::Greedy => {
            greedy_search(objective.model, |c| objective.loss(c), options.budget, rng)?.config
        }
        ConfigScheme::SimAnneal => {
            anneal_search(objective.model, |c| objective.loss(c), options, rng)?.config
        }
    })
}

/// Static RSS error of `user` under `config`.
pub fn rss_error(seed: SeedPath, user: usize, config: &RisConfig, sigma: f64) -> f64 {
    let mut path = seed.label("rss").index(user as u64);
    for &s in &config.0 {
        path = path.index(s as u64);
    }
    let z: f64 = path.rng().sample(StandardNormal);
    sigma * z
}

/// Per-run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeOptions {
    pub cycles: usize,
    pub sigma: f64,
    pub scheme: ConfigScheme,
    pub search: SearchOptions,
    pub fixed_config: RisConfig,
}

/// Mean mislocalization distance per cycle. `error_seed` fixes the static
/// RSS errors (shared across schemes for paired comparisons); `rng` drives
/// the scheme's own choices.
pub fn localize_run<R: Rng + ?Sized>(
    model: &MapModel,
    users: &[usize],
    options: &LocalizeOptions,
    error_seed: SeedPath,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let q = model.block_count();
    if users.is_empty() || users.iter().any(|&u| u >= q) {
        return Err(Error::invalid("users must sit in SOI blocks"));
    }
    let weights = MislocalizationWeights::from_centers(model.centers());
    let mut priors = PriorGrid::uniform(users.len(), q);
    let mut measured: HashSet<RisConfig> = HashSet::new();
    let mut errors = Vec::with_capacity(options.cycles);
    for _ in 0..options.cycles {
        let config = {
            let obj = SelectionObjective {
                model,
                priors: &priors,
                weights: &weights,
                sigma: options.sigma,
                measured: &measured,
            };
            select_config(
                &obj,
                options.scheme,
                &options.fixed_config,
                &options.search,
                rng,
            )?
        };
        let map = model.map(&config, options.sigma)?;
        let fresh = measured.insert(config.clone());
        let mut err = 0.0;
        for (i, &truth) in users.iter().enumerate() {
            let prior = priors.user(i).to_vec();
            let estimate = if fresh {
                let s = map.rss[truth] + rss_error(error_seed, i, &config, options.sigma);
                let e = optimal_rule(&map, &prior, &weights).decide(s);
                priors.set_user(i, cycle_update(&prior, s, &map)?);
                e
            } else {
                argmin_risk(&prior, &weights)
            };
            err += weights.get(truth, estimate);
        }
        errors.push(err / users.len() as f64);
    }
    Ok(errors)
}
