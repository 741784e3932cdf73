//! Multi-target detection with a surface-assisted MIMO radar.
//!
//! The space of interest is split into angular blocks seen from a uniform
//! linear array. A hypothesis states which blocks hold a target. Each cycle
//! the radar picks a waveform and surface configurations, records one echo,
//! refits every hypothesis on the whole echo history and updates the
//! posterior from the initial prior.
//!
//! Echoes are probed on `L` tones around the carrier so that target delays
//! are identifiable: `ȳ[k, l] = Σ_r γ_r·v_k(θ_r, c_rx)·(v(θ_r, c_tx)ᵀw)·e^{−j2π f_l τ_r}`,
//! where `f_l` is the tone's offset from the carrier and the composite
//! steering `v` adds the surface-relayed path to the direct one.

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_gaussian, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::ris::{RisConfig, RisPanel};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Default number of top-posterior hypotheses whose pairwise separation is
/// optimized.
pub const DEFAULT_TOP_P: usize = 4;

/// Per-target order penalty in units of `ln n`, with `n` the number of real
/// observations in the history.
pub const DEFAULT_ORDER_PENALTY: f64 = 1.5;

/// Target blocks, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hypothesis {
    blocks: Vec<usize>,
}

impl Hypothesis {
    pub fn new(mut blocks: Vec<usize>) -> Result<Self> {
        blocks.sort_unstable();
        if blocks.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("hypothesis blocks must be distinct"));
        }
        Ok(Hypothesis { blocks })
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn target_count(&self) -> usize {
        self.blocks.len()
    }
}

pub type HypothesisSet = Vec<Hypothesis>;

/// Every block combination for each target count in `r_min..=r_max`,
/// ordered by count then lexicographically.
pub fn enumerate_hypotheses(
    r_min: usize,
    r_max: usize,
    block_count: usize,
) -> Result<HypothesisSet> {
    if r_min > r_max || r_max > block_count {
        return Err(Error::invalid("need 0 <= r_min <= r_max <= block_count"));
    }
    let mut out = Vec::new();
    for r in r_min..=r_max {
        let mut combo: Vec<usize> = (0..r).collect();
        loop {
            out.push(Hypothesis {
                blocks: combo.clone(),
            });
            // advance to the next combination
            let mut i = r;
            while i > 0 && combo[i - 1] == block_count - r + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            combo[i - 1] += 1;
            for j in i..r {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    Ok(out)
}

/// Waveform and surface configurations used for one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarParams {
    pub waveform: Vec<Complex64>,
    pub tx_config: RisConfig,
    pub rx_config: RisConfig,
}

impl RadarParams {
    pub fn new(
        waveform: Vec<Complex64>,
        tx_config: RisConfig,
        rx_config: RisConfig,
    ) -> Result<Self> {
        let p = RadarParams {
            waveform,
            tx_config,
            rx_config,
        };
        let power: f64 = p.waveform.iter().map(|w| w.norm_sqr()).sum();
        if (power - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "waveform power is {power}, expected 1"
            )));
        }
        Ok(p)
    }
}

/// Normalized probabilities over a hypothesis set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior(Vec<f64>);

impl Posterior {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("posterior needs nonnegative entries"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("posterior sums to {s}")));
        }
        Ok(Posterior(p))
    }

    pub fn uniform(n: usize) -> Self {
        Posterior(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Highest-probability index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// `p(U_j) ∝ prior(U_j)·exp(log_likelihood_j)`, evaluated in log space.
/// For the cycle update the prior is the initial one and the likelihoods
/// cover the whole echo history.
pub fn bayes_update(prior: &Posterior, log_likelihoods: &[f64]) -> Result<Posterior> {
    if log_likelihoods.len() != prior.0.len() {
        return Err(Error::invalid("one likelihood per hypothesis required"));
    }
    let logs: Vec<f64> = prior
        .0
        .iter()
        .zip(log_likelihoods)
        .map(|(p, l)| {
            if *p > 0.0 {
                p.ln() + l
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::invalid(
            "numerical underflow: no hypothesis keeps mass",
        ));
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(Posterior(w.iter().map(|v| v / s).collect()))
}

/// Symmetric relative entropy between two equal-covariance complex Gaussian
/// echo models: `‖ȳ_j − ȳ_j'‖²/σ²`.
pub fn symmetric_kl(mean_a: &[Complex64], mean_b: &[Complex64], noise_power: f64) -> f64 {
    let d: f64 = mean_a
        .iter()
        .zip(mean_b)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    if d == 0.0 {
        0.0
    } else {
        d / noise_power
    }
}

/// Radar geometry and probing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarScene {
    pub carrier: f64,
    pub antennas: usize,
    /// Antenna spacing (m); the array lies on the x axis centred at the origin.
    pub spacing: f64,
    pub tone_count: usize,
    pub tone_spacing: f64,
    /// Block directions (rad from the array broadside, +y).
    pub block_angles: Vec<f64>,
    /// Number of delay grid points, spaced `1/(L·Δf)` apart.
    pub delay_bins: usize,
    pub panel: Option<RisPanel>,
}

impl RadarScene {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier
    }

    pub fn without_panel(&self) -> RadarScene {
        RadarScene {
            panel: None,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.carrier > 0.0 && self.spacing > 0.0 && self.tone_spacing > 0.0) {
            return Err(Error::invalid(
                "carrier, spacing and tone spacing must be positive",
            ));
        }
        if self.antennas == 0 || self.tone_count == 0 || self.delay_bins == 0 {
            return Err(Error::invalid(
                "antennas, tones and delay bins must be positive",
            ));
        }
        if self.delay_bins > self.tone_count {
            return Err(Error::invalid("delay grid exceeds the unambiguous window"));
        }
        if self.block_angles.is_empty() {
            return Err(Error::invalid("at least one angular block required"));
        }
        Ok(())
    }
}

/// Precomputed steering terms for a radar scene.
#[derive(Debug, Clone)]
pub struct RadarModel {
    antennas: usize,
    tone_offsets: Vec<f64>,
    delay_grid: Vec<f64>,
    /// `[block][antenna]` direct-path steering.
    direct: Vec<Vec<Complex64>>,
    /// `[group][block][antenna]` relayed steering at unit element response.
    relay: Vec<Vec<Vec<Complex64>>>,
    responses: Vec<Complex64>,
}

impl RadarModel {
    pub fn new(scene: &RadarScene) -> Result<Self> {
        scene.validate()?;
        let lambda = scene.wavelength();
        let v = scene.antennas;
        let half = (v as f64 - 1.0) / 2.0;
        let ant: Vec<Vector3<f64>> = (0..v)
            .map(|k| Vector3::new((k as f64 - half) * scene.spacing, 0.0, 0.0))
            .collect();
        let dir = |theta: f64| Vector3::new(theta.sin(), theta.cos(), 0.0);
        let phase = |len: f64| Complex64::from_polar(1.0, -std::f64::consts::TAU * len / lambda);
        let direct = scene
            .block_angles
            .iter()
            .map(|&t| ant.iter().map(|p| phase(-p.dot(&dir(t)))).collect())
            .collect();
        let (relay, responses) = match &scene.panel {
            None => (Vec::new(), Vec::new()),
            Some(panel) => {
                let mut relay = Vec::with_capacity(panel.group_count());
                for members in panel.groups() {
                    let mut per_block = Vec::with_capacity(scene.block_angles.len());
                    for &t in &scene.block_angles {
                        let u = dir(t);
                        let mut col = vec![ZERO; v];
                        for &m in members {
                            let pm = panel.elements()[m];
                            for (k, pk) in ant.iter().enumerate() {
                                let d = (pm - pk).norm();
                                if d <= 0.0 {
                                    return Err(Error::DegenerateGeometry(
                                        "element on an antenna".into(),
                                    ));
                                }
                                col[k] += phase(d - pm.dot(&u))
                                    * (lambda / (4.0 * std::f64::consts::PI * d));
                            }
                        }
                        per_block.push(col);
                    }
                    relay.push(per_block);
                }
                (relay, panel.state_responses())
            }
        };
        let l = scene.tone_count;
        let tone_offsets = (0..l)
            .map(|i| (i as f64 - (l as f64 - 1.0) / 2.0) * scene.tone_spacing)
            .collect();
        let step = 1.0 / (l as f64 * scene.tone_spacing);
        let delay_grid = (0..scene.delay_bins).map(|i| i as f64 * step).collect();
        Ok(RadarModel {
            antennas: v,
            tone_offsets,
            delay_grid,
            direct,
            relay,
            responses,
        })
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn tones(&self) -> usize {
        self.tone_offsets.len()
    }

    pub fn block_count(&self) -> usize {
        self.direct.len()
    }

    pub fn group_count(&self) -> usize {
        self.relay.len()
    }

    pub fn state_count(&self) -> usize {
        self.responses.len()
    }

    pub fn delay_grid(&self) -> &[f64] {
        &self.delay_grid
    }

    pub fn echo_len(&self) -> usize {
        self.antennas * self.tones()
    }

    pub fn validate_params(&self, params: &RadarParams) -> Result<()> {
        if params.waveform.len() != self.antennas {
            return Err(Error::invalid(
                "waveform length must equal the antenna count",
            ));
        }
        let k = self.state_count().max(1);
        params.tx_config.validate(self.group_count(), k)?;
        params.rx_config.validate(self.group_count(), k)
    }

    /// Composite steering `v(θ_b, config)`.
    pub fn steering(&self, block: usize, config: &RisConfig) -> Vec<Complex64> {
        let mut v = self.direct[block].clone();
        for (g, rel) in self.relay.iter().enumerate() {
            let gamma = self.responses[config.0[g]];
            for (vk, r) in v.iter_mut().zip(&rel[block]) {
                *vk += gamma * r;
            }
        }
        v
    }

    /// `e^{−j2π f_l τ}` over tones.
    pub fn delay_signature(&self, tau: f64) -> Vec<Complex64> {
        self.tone_offsets
            .iter()
            .map(|f| Complex64::from_polar(1.0, -std::f64::consts::TAU * f * tau))
            .collect()
    }

    /// Echo of a unit target in `block` at grid delay index `delay`
    /// (antenna-major, tone-minor layout).
    fn column(
        &self,
        rx_steer: &[Complex64],
        tx_gain: Complex64,
        sig: &[Complex64],
    ) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.echo_len());
        for v in rx_steer {
            for e in sig {
                out.push(v * tx_gain * e);
            }
        }
        out
    }

    fn tx_gain(&self, block: usize, params: &RadarParams) -> Complex64 {
        self.steering(block, &params.tx_config)
            .iter()
            .zip(&params.waveform)
            .map(|(v, w)| v * w)
            .sum()
    }

    /// Noise-free echo under `hypothesis` with explicit delays and responses.
    pub fn expected_echo(
        &self,
        hypothesis: &Hypothesis,
        delays: &[f64],
        gains: &[Complex64],
        params: &RadarParams,
    ) -> Result<Vec<Complex64>> {
        self.validate_params(params)?;
        let r = hypothesis.target_count();
        if delays.len() != r || gains.len() != r {
            return Err(Error::invalid(
                "one delay and one response per target required",
            ));
        }
        let window = 1.0 / self.tone_step();
        let mut y = vec![ZERO; self.echo_len()];
        for ((&b, &tau), &g) in hypothesis.blocks.iter().zip(delays).zip(gains) {
            if b >= self.block_count() {
                return Err(Error::invalid("block index out of range"));
            }
            if !(0.0..window).contains(&tau) {
                return Err(Error::invalid("delay outside the unambiguous window"));
            }
            let col = self.column(
                &self.steering(b, &params.rx_config),
                self.tx_gain(b, params),
                &self.delay_signature(tau),
            );
            for (yi, c) in y.iter_mut().zip(col) {
                *yi += g * c;
            }
        }
        Ok(y)
    }

    fn tone_step(&self) -> f64 {
        if self.tone_offsets.len() > 1 {
            self.tone_offsets[1] - self.tone_offsets[0]
        } else {
            // a single tone has no delay resolution; any positive step works
            1.0
        }
    }

    /// Uniform-power waveform and default configurations.
    pub fn initial_params(&self) -> RadarParams {
        let a = 1.0 / (self.antennas as f64).sqrt();
        RadarParams {
            waveform: vec![Complex64::new(a, 0.0); self.antennas],
            tx_config: RisConfig::uniform(self.group_count(), 0),
            rx_config: RisConfig::uniform(self.group_count(), 0),
        }
    }

    /// Random unit-power waveform and random configurations.
    pub fn random_params<R: Rng + ?Sized>(&self, rng: &mut R) -> RadarParams {
        let w: Vec<Complex64> = (0..self.antennas)
            .map(|_| complex_gaussian(1.0, rng))
            .collect();
        let n = w.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let k = self.state_count().max(1);
        RadarParams {
            waveform: w.iter().map(|v| v / n).collect(),
            tx_config: RisConfig::random(self.group_count(), k, rng),
            rx_config: RisConfig::random(self.group_count(), k, rng),
        }
    }
}

/// Sufficient statistics of an echo history over every (block, delay)
/// column: Gram matrix, matched-filter outputs and total energy.
#[derive(Debug, Clone)]
pub struct EchoHistory {
    delay_bins: usize,
    gram: DMatrix<Complex64>,
    matched: DVector<Complex64>,
    energy: f64,
    cycles: usize,
    observations: usize,
}

impl EchoHistory {
    pub fn new(model: &RadarModel) -> Self {
        let n = model.block_count() * model.delay_grid.len();
        EchoHistory {
            delay_bins: model.delay_grid.len(),
            gram: DMatrix::from_element(n, n, ZERO),
            matched: DVector::from_element(n, ZERO),
            energy: 0.0,
            cycles: 0,
            observations: 0,
        }
    }

    pub fn cycles(&self) -> usize {
        self.cycles
    }

    /// Fold one cycle's echo into the statistics.
    pub fn push(
        &mut self,
        model: &RadarModel,
        params: &RadarParams,
        y: &[Complex64],
    ) -> Result<()> {
        model.validate_params(params)?;
        if y.len() != model.echo_len() {
            return Err(Error::invalid("echo length mismatch"));
        }
        let sigs: Vec<Vec<Complex64>> = model
            .delay_grid
            .iter()
            .map(|&t| model.delay_signature(t))
            .collect();
        let mut cols = Vec::with_capacity(self.matched.len());
        for b in 0..model.block_count() {
            let rx = model.steering(b, &params.rx_config);
            let g = model.tx_gain(b, params);
            for sig in &sigs {
                cols.push(model.column(&rx, g, sig));
            }
        }
        for (i, ci) in cols.iter().enumerate() {
            self.matched[i] += ci
                .iter()
                .zip(y)
                .map(|(c, v)| c.conj() * v)
                .sum::<Complex64>();
            for (j, cj) in cols.iter().enumerate().skip(i) {
                let ip: Complex64 = ci.iter().zip(cj).map(|(a, b)| a.conj() * b).sum();
                self.gram[(i, j)] += ip;
                if i != j {
                    self.gram[(j, i)] += ip.conj();
                }
            }
        }
        self.energy += y.iter().map(|v| v.norm_sqr()).sum::<f64>();
        self.cycles += 1;
        self.observations += 2 * y.len();
        Ok(())
    }
}

/// Nuisance fit of one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFit {
    pub delays: Vec<f64>,
    pub gains: Vec<Complex64>,
    pub residual: f64,
}

/// Joint delay-grid search with closed-form least-squares responses.
pub fn ml_fit(
    history: &EchoHistory,
    hypothesis: &Hypothesis,
    model: &RadarModel,
) -> Result<TargetFit> {
    let r = hypothesis.target_count();
    if r == 0 {
        return Ok(TargetFit {
            delays: vec![],
            gains: vec![],
            residual: history.energy,
        });
    }
    if hypothesis.blocks.iter().any(|&b| b >= model.block_count()) {
        return Err(Error::invalid("block index out of range"));
    }
    let d = history.delay_bins;
    let mut idx = vec![0usize; r];
    let mut best: Option<(f64, Vec<usize>, DVector<Complex64>)> = None;
    loop {
        let cols: Vec<usize> = hypothesis
            .blocks
            .iter()
            .zip(&idx)
            .map(|(b, t)| b * d + t)
            .collect();
        let g = DMatrix::from_fn(r, r, |i, j| history.gram[(cols[i], cols[j])]);
        let m = DVector::from_fn(r, |i, _| history.matched[cols[i]]);
        if let Some(ch) = g.cholesky() {
            let gamma = ch.solve(&m);
            let explained = m.dotc(&gamma).re;
            let res = (history.energy - explained).max(0.0);
            if best.as_ref().is_none_or(|b| res < b.0) {
                best = Some((res, idx.clone(), gamma));
            }
        }
        // odometer over delay indices
        let mut i = r;
        loop {
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            if idx[i - 1] < d {
                break;
            }
            idx[i - 1] = 0;
            i -= 1;
        }
        if i == 0 {
            break;
        }
    }
    let (residual, idx, gamma) = best.ok_or_else(|| {
        Error::Unidentifiable("steering matrix rank-deficient for every delay".into())
    })?;
    Ok(TargetFit {
        delays: idx.iter().map(|&i| model.delay_grid[i]).collect(),
        gains: gamma.iter().copied().collect(),
        residual,
    })
}

/// `−residual/σ² − penalty·R·ln n` (the constant of the Gaussian density is
/// dropped; it cancels in the posterior).
pub fn log_likelihood(
    fit: &TargetFit,
    history: &EchoHistory,
    noise_power: f64,
    order_penalty: f64,
) -> f64 {
    let r = fit.delays.len() as f64;
    let n = history.observations.max(1) as f64;
    -fit.residual / noise_power - order_penalty * r * n.ln()
}

/// Fits and posterior for the whole set. With zero noise the mass goes to
/// the smallest hypotheses that explain the history exactly.
pub fn posterior_from_history(
    history: &EchoHistory,
    hypotheses: &[Hypothesis],
    prior: &Posterior,
    model: &RadarModel,
    noise_power: f64,
    order_penalty: f64,
) -> Result<(Vec<Option<TargetFit>>, Posterior)> {
    let fits: Vec<Option<TargetFit>> = hypotheses
        .iter()
        .map(|h| match ml_fit(history, h, model) {
            Ok(f) => Ok(Some(f)),
            Err(Error::Unidentifiable(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let logs: Vec<f64> = if noise_power > 0.0 {
        fits.iter()
            .map(|f| match f {
                Some(f) => log_likelihood(f, history, noise_power, order_penalty),
                None => f64::NEG_INFINITY,
            })
            .collect()
    } else {
        let tol = 1e-9 * history.energy.max(f64::MIN_POSITIVE);
        let exact: Vec<bool> = fits
            .iter()
            .map(|f| f.as_ref().is_some_and(|f| f.residual <= tol))
            .collect();
        let min_r = hypotheses
            .iter()
            .zip(&exact)
            .filter(|(_, e)| **e)
            .map(|(h, _)| h.target_count())
            .min();
        hypotheses
            .iter()
            .zip(&exact)
            .map(|(h, e)| {
                if *e && Some(h.target_count()) == min_r {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    };
    Ok((fits, bayes_update(prior, &logs)?))
}

/// Pairwise-separation objective: the smallest `d_jj'/w_jj'` over pairs of
/// the top-P hypotheses, where `w_jj' = (p_j + p_j')/max(p_i + p_i')` down-weights
/// pairs the posterior already considers unlikely.
#[derive(Debug, Clone)]
pub struct SeparationObjective<'a> {
    model: &'a RadarModel,
    members: Vec<(&'a Hypothesis, Vec<f64>, Vec<Complex64>, f64)>,
    noise_power: f64,
}

impl<'a> SeparationObjective<'a> {
    /// `fits[j] = None` uses unit responses at the first grid delay (no echo
    /// seen yet).
    pub fn new(
        model: &'a RadarModel,
        hypotheses: &'a [Hypothesis],
        posterior: &Posterior,
        fits: &[Option<TargetFit>],
        noise_power: f64,
        top_p: usize,
    ) -> Self {
        let mut order: Vec<usize> = (0..hypotheses.len())
            .filter(|&j| posterior.0[j] > 0.0)
            .collect();
        order.sort_by(|&a, &b| posterior.0[b].total_cmp(&posterior.0[a]).then(a.cmp(&b)));
        order.truncate(top_p.max(2));
        let members = order
            .into_iter()
            .map(|j| {
                let h = &hypotheses[j];
                let (delays, gains) = match fits.get(j).and_then(|f| f.as_ref()) {
                    Some(f) => (f.delays.clone(), f.gains.clone()),
                    None => (
                        vec![model.delay_grid[0]; h.target_count()],
                        vec![Complex64::new(1.0, 0.0); h.target_count()],
                    ),
                };
                (h, delays, gains, posterior.0[j])
            })
            .collect();
        SeparationObjective {
            model,
            members,
            noise_power: if noise_power > 0.0 { noise_power } else { 1.0 },
        }
    }

    pub fn pair_count(&self) -> usize {
        let n = self.members.len();
        n * n.saturating_sub(1) / 2
    }

    fn means(&self, params: &RadarParams) -> Vec<Vec<Complex64>> {
        self.members
            .iter()
            .map(|(h, d, g, _)| {
                self.model
                    .expected_echo(h, d, g, params)
                    .expect("validated params")
            })
            .collect()
    }

    fn weights(&self) -> Vec<Vec<f64>> {
        let n = self.members.len();
        let mut w = vec![vec![0.0; n]; n];
        let mut top: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                w[i][j] = self.members[i].3 + self.members[j].3;
                top = top.max(w[i][j]);
            }
        }
        for row in &mut w {
            for v in row.iter_mut() {
                *v /= top;
            }
        }
        w
    }

    /// Objective value and the active (minimizing) pair.
    pub fn evaluate(&self, params: &RadarParams) -> (f64, (usize, usize)) {
        let means = self.means(params);
        let w = self.weights();
        let n = means.len();
        let mut best = (f64::INFINITY, (0, 0));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = symmetric_kl(&means[i], &means[j], self.noise_power) / w[i][j];
                if v < best.0 {
                    best = (v, (i, j));
                }
            }
        }
        best
    }

    pub fn value(&self, params: &RadarParams) -> f64 {
        self.evaluate(params).0
    }

    /// Gradient direction of the active pair's distance with respect to the
    /// conjugate waveform, at fixed configurations.
    fn waveform_gradient(&self, params: &RadarParams, pair: (usize, usize)) -> Vec<Complex64> {
        // d = ‖(M_i − M_j)w‖², gradient ∝ (M_i − M_j)^H (M_i − M_j) w
        let v = self.model.antennas;
        let basis: Vec<RadarParams> = (0..v)
            .map(|k| {
                let mut p = params.clone();
                p.waveform = vec![ZERO; v];
                p.waveform[k] = Complex64::new(1.0, 0.0);
                p
            })
            .collect();
        let (a, b) = (&self.members[pair.0], &self.members[pair.1]);
        let echo = |m: &(&Hypothesis, Vec<f64>, Vec<Complex64>, f64), p: &RadarParams| {
            // expected_echo without the norm check on basis waveforms
            let mut y = vec![ZERO; self.model.echo_len()];
            for ((&blk, &tau), &g) in m.0.blocks.iter().zip(&m.1).zip(&m.2) {
                let col = self.model.column(
                    &self.model.steering(blk, &p.rx_config),
                    self.model.tx_gain(blk, p),
                    &self.model.delay_signature(tau),
                );
                for (yi, c) in y.iter_mut().zip(col) {
                    *yi += g * c;
                }
            }
            y
        };
        let diff_cols: Vec<Vec<Complex64>> = basis
            .iter()
            .map(|p| {
                echo(a, p)
                    .iter()
                    .zip(echo(b, p))
                    .map(|(x, y)| x - y)
                    .collect()
            })
            .collect();
        let dw: Vec<Complex64> = (0..self.model.echo_len())
            .map(|i| (0..v).map(|k| diff_cols[k][i] * params.waveform[k]).sum())
            .collect();
        (0..v)
            .map(|k| {
                diff_cols[k]
                    .iter()
                    .zip(&dw)
                    .map(|(c, d)| c.conj() * d)
                    .sum()
            })
            .collect()
    }
}

/// Options for [`optimize_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOptions {
    pub budget: usize,
    pub optimize_waveform: bool,
    pub step: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            budget: 400,
            optimize_waveform: true,
            step: 0.5,
        }
    }
}

/// Alternating ascent: normalized-gradient waveform steps (accepted only if
/// they raise the objective) and group-wise joint (tx, rx) state selection.
/// Returns the start unchanged when fewer than two hypotheses keep mass.
pub fn optimize_params(
    objective: &SeparationObjective,
    start: &RadarParams,
    options: &OptimizeOptions,
) -> Result<RadarParams> {
    if options.budget == 0 {
        return Err(Error::invalid(
            "search budget must be at least one evaluation",
        ));
    }
    objective.model.validate_params(start)?;
    if objective.pair_count() == 0 {
        return Ok(start.clone());
    }
    let mut current = start.clone();
    let (mut value, mut pair) = objective.evaluate(&current);
    let mut evals = 1usize;
    let mut step = options.step;
    let k = objective.model.state_count();
    loop {
        let mut improved = false;
        if options.optimize_waveform {
            for _ in 0..8 {
                if evals >= options.budget {
                    return Ok(current);
                }
                let g = objective.waveform_gradient(&current, pair);
                let gn = g.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
                if gn == 0.0 {
                    break;
                }
                let w: Vec<Complex64> = current
                    .waveform
                    .iter()
                    .zip(&g)
                    .map(|(w, d)| w + d * (step / gn))
                    .collect();
                let n = w.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
                let mut trial = current.clone();
                trial.waveform = w.iter().map(|v| v / n).collect();
                let (v, p) = objective.evaluate(&trial);
                evals += 1;
                if v > value {
                    current = trial;
                    value = v;
                    pair = p;
                    improved = true;
                } else {
                    step *= 0.5;
                }
            }
        }
        for g in 0..objective.model.group_count() {
            let orig = (current.tx_config.0[g], current.rx_config.0[g]);
            let mut pick = (orig, value, pair);
            for st in 0..k {
                for sr in 0..k {
                    if (st, sr) == orig {
                        continue;
                    }
                    if evals >= options.budget {
                        current.tx_config.0[g] = pick.0 .0;
                        current.rx_config.0[g] = pick.0 .1;
                        return Ok(current);
                    }
                    current.tx_config.0[g] = st;
                    current.rx_config.0[g] = sr;
                    let (v, p) = objective.evaluate(&current);
                    evals += 1;
                    if v > pick.1 {
                        pick = ((st, sr), v, p);
                    }
                }
            }
            current.tx_config.0[g] = pick.0 .0;
            current.rx_config.0[g] = pick.0 .1;
            if pick.0 != orig {
                value = pick.1;
                pair = pick.2;
                improved = true;
            }
        }
        if !improved {
            return Ok(current);
        }
    }
}

/// How each cycle's parameters are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadarScheme {
    Optimized,
    Random,
    /// Plain MIMO: the surface is removed and waveforms are random.
    NoRis,
}

impl RadarScheme {
    pub fn name(self) -> &'static str {
        match self {
            RadarScheme::Optimized => "optimized",
            RadarScheme::Random => "random",
            RadarScheme::NoRis => "no_ris",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "optimized" => Some(RadarScheme::Optimized),
            "random" => Some(RadarScheme::Random),
            "no_ris" => Some(RadarScheme::NoRis),
            _ => None,
        }
    }
}

/// Ground-truth target set.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarTruth {
    pub hypothesis: usize,
    pub delays: Vec<f64>,
    pub gains: Vec<Complex64>,
}

impl RadarTruth {
    /// Hypothesis drawn uniformly; grid delays; unit-magnitude responses.
    pub fn random<R: Rng + ?Sized>(
        hypotheses: &[Hypothesis],
        model: &RadarModel,
        rng: &mut R,
    ) -> Self {
        let j = rng.random_range(0..hypotheses.len());
        let r = hypotheses[j].target_count();
        let delays = (0..r)
            .map(|_| model.delay_grid[rng.random_range(0..model.delay_grid.len())])
            .collect();
        let gains = (0..r)
            .map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        RadarTruth {
            hypothesis: j,
            delays,
            gains,
        }
    }
}

/// Per-run settings of the detection loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub cycles: usize,
    pub noise_power: f64,
    pub top_p: usize,
    pub order_penalty: f64,
    pub optimize: OptimizeOptions,
}

/// Posterior after each cycle and the final decision.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTrace {
    pub posteriors: Vec<Posterior>,
    pub chosen: usize,
}

impl DetectionTrace {
    /// First cycle (1-based) at which the truth holds at least `level`
    /// posterior mass.
    pub fn cycles_to_confidence(&self, truth: usize, level: f64) -> Option<usize> {
        self.posteriors
            .iter()
            .position(|p| p.0[truth] >= level)
            .map(|c| c + 1)
    }

    /// Whether the maximum a posteriori hypothesis after each cycle is `truth`.
    pub fn detections(&self, truth: usize) -> Vec<bool> {
        self.posteriors
            .iter()
            .map(|p| p.argmax() == truth)
            .collect()
    }
}

/// Runs the optimize / transmit-receive / detect loop. `noise_rng` drives
/// the echo noise and `scheme_rng` the random parameter draws, so schemes
/// run on the same seed see identical noise.
pub fn detect<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    scene: &RadarScene,
    hypotheses: &[Hypothesis],
    truth: &RadarTruth,
    scheme: RadarScheme,
    options: &DetectOptions,
    noise_rng: &mut R1,
    scheme_rng: &mut R2,
) -> Result<DetectionTrace> {
    if hypotheses.is_empty() || truth.hypothesis >= hypotheses.len() {
        return Err(Error::invalid("truth must index the hypothesis set"));
    }
    if !(options.noise_power >= 0.0) {
        return Err(Error::invalid("noise power must be nonnegative"));
    }
    let model = match scheme {
        RadarScheme::NoRis => RadarModel::new(&scene.without_panel())?,
        _ => RadarModel::new(scene)?,
    };
    let prior = Posterior::uniform(hypotheses.len());
    let mut posterior = prior.clone();
    let mut fits: Vec<Option<TargetFit>> = vec![None; hypotheses.len()];
    let mut history = EchoHistory::new(&model);
    let mut params = model.initial_params();
    let mut trace = Vec::with_capacity(options.cycles);
    let truth_h = &hypotheses[truth.hypothesis];
    for _ in 0..options.cycles {
        params = match scheme {
            RadarScheme::Optimized => {
                let obj = SeparationObjective::new(
                    &model,
                    hypotheses,
                    &posterior,
                    &fits,
                    options.noise_power,
                    options.top_p,
                );
                optimize_params(&obj, &params, &options.optimize)?
            }
            RadarScheme::Random | RadarScheme::NoRis => model.random_params(scheme_rng),
        };
        let mut y = model.expected_echo(truth_h, &truth.delays, &truth.gains, &params)?;
        if options.noise_power > 0.0 {
            for v in y.iter_mut() {
                *v += complex_gaussian(options.noise_power, noise_rng);
            }
        }
        history.push(&model, &params, &y)?;
        let (f, p) = posterior_from_history(
            &history,
            hypotheses,
            &prior,
            &model,
            options.noise_power,
            options.order_penalty,
        )?;
        fits = f;
        posterior = p;
        trace.push(posterior.clone());
    }
    Ok(DetectionTrace {
        chosen: posterior.argmax(),
        posteriors: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ris::{PhaseCodebook, RisType};
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;

    fn scene(panel: bool) -> RadarScene {
        let lambda = SPEED_OF_LIGHT / 3.198e9;
        RadarScene {
            carrier: 3.198e9,
            antennas: 4,
            spacing: lambda / 2.0,
            tone_count: 8,
            tone_spacing: 10e6,
            block_angles: vec![-0.8, -0.27, 0.27, 0.8],
            delay_bins: 8,
            panel: panel.then(|| {
                RisPanel::grid(
                    Vector3::new(-1.0, 0.6, 0.0),
                    Vector3::y(),
                    Vector3::z(),
                    8,
                    8,
                    0.015,
                    4,
                    4,
                    RisType::Reflective,
                    PhaseCodebook::table1(),
                )
                .unwrap()
            }),
        }
    }

    #[test]
    fn hypothesis_counts() {
        assert_eq!(enumerate_hypotheses(1, 1, 3).unwrap().len(), 3);
        assert_eq!(enumerate_hypotheses(1, 2, 4).unwrap().len(), 10);
        let empty = enumerate_hypotheses(0, 0, 5).unwrap();
        assert_eq!(empty.len(), 1);
        assert_eq!(empty[0].target_count(), 0);
        let all = enumerate_hypotheses(0, 5, 5).unwrap();
        assert_eq!(all.len(), 32);
        assert!(all
            .iter()
            .all(|h| h.blocks().windows(2).all(|w| w[0] < w[1])));
        assert!(enumerate_hypotheses(2, 1, 4).is_err());
        assert!(enumerate_hypotheses(1, 5, 4).is_err());
    }

    #[test]
    fn echo_reductions() {
        let s = scene(false);
        let m = RadarModel::new(&s).unwrap();
        let p = m.initial_params();
        let none = Hypothesis::new(vec![]).unwrap();
        assert!(m
            .expected_echo(&none, &[], &[], &p)
            .unwrap()
            .iter()
            .all(|v| *v == ZERO));

        // Boresight, no surface: the per-antenna echo across antennas is the
        // plain ULA steering vector.
        let boresight = RadarScene {
            block_angles: vec![0.0],
            ..s.clone()
        };
        let m0 = RadarModel::new(&boresight).unwrap();
        let h = Hypothesis::new(vec![0]).unwrap();
        let y = m0
            .expected_echo(
                &h,
                &[0.0],
                &[Complex64::new(1.0, 0.0)],
                &m0.initial_params(),
            )
            .unwrap();
        let l = m0.tones();
        let first = y[0];
        for k in 0..4 {
            assert_abs_diff_eq!((y[k * l] - first).norm(), 0.0, epsilon = 1e-12);
        }

        // Linearity in the target response.
        let ps = RadarModel::new(&scene(true)).unwrap();
        let pr = ps.random_params(&mut rng_from_seed(1));
        let h2 = Hypothesis::new(vec![1, 3]).unwrap();
        let d = [ps.delay_grid()[2], ps.delay_grid()[5]];
        let g1 = [Complex64::new(1.0, 0.5), Complex64::new(-0.3, 0.2)];
        let g2 = [Complex64::new(2.0, 1.0), Complex64::new(-0.6, 0.4)];
        let y1 = ps.expected_echo(&h2, &d, &g1, &pr).unwrap();
        let y2 = ps.expected_echo(&h2, &d, &g2, &pr).unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert_abs_diff_eq!((a * 2.0 - b).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn surface_changes_echo() {
        let m = RadarModel::new(&scene(true)).unwrap();
        let h = Hypothesis::new(vec![2]).unwrap();
        let g = [Complex64::new(1.0, 0.0)];
        let mut p = m.initial_params();
        let a = m.expected_echo(&h, &[0.0], &g, &p).unwrap();
        p.tx_config.0[0] = 2;
        let b = m.expected_echo(&h, &[0.0], &g, &p).unwrap();
        assert!(symmetric_kl(&a, &b, 1.0) > 0.0);
    }

    #[test]
    fn ml_fit_recovers_noiseless_truth() {
        let m = RadarModel::new(&scene(true)).unwrap();
        let h = Hypothesis::new(vec![0, 2]).unwrap();
        let delays = [m.delay_grid()[3], m.delay_grid()[6]];
        let gains = [Complex64::new(0.8, -0.2), Complex64::new(-0.1, 0.9)];
        let mut hist = EchoHistory::new(&m);
        let mut rng = rng_from_seed(4);
        for _ in 0..2 {
            let p = m.random_params(&mut rng);
            let y = m.expected_echo(&h, &delays, &gains, &p).unwrap();
            hist.push(&m, &p, &y).unwrap();
        }
        let fit = ml_fit(&hist, &h, &m).unwrap();
        assert_eq!(fit.delays, delays.to_vec());
        for (a, b) in fit.gains.iter().zip(&gains) {
            assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-9);
        }
        assert!(fit.residual < 1e-9 * hist.energy);

        let empty = ml_fit(&hist, &Hypothesis::new(vec![]).unwrap(), &m).unwrap();
        assert_eq!(empty.residual, hist.energy);

        let swapped = ml_fit(&hist, &Hypothesis::new(vec![2, 0]).unwrap(), &m).unwrap();
        assert_eq!(swapped.residual, fit.residual);
    }

    /// Brute-force least squares on explicit stacked columns.
    #[test]
    fn sufficient_statistics_match_direct_least_squares() {
        let m = RadarModel::new(&scene(true)).unwrap();
        let h = Hypothesis::new(vec![1, 3]).unwrap();
        let mut rng = rng_from_seed(9);
        let mut hist = EchoHistory::new(&m);
        let mut data = Vec::new();
        for _ in 0..3 {
            let p = m.random_params(&mut rng);
            let y: Vec<Complex64> = (0..m.echo_len())
                .map(|_| complex_gaussian(1.0, &mut rng))
                .collect();
            hist.push(&m, &p, &y).unwrap();
            data.push((p, y));
        }
        let fit = ml_fit(&hist, &h, &m).unwrap();
        let mut best = f64::INFINITY;
        for i in 0..m.delay_grid().len() {
            for j in 0..m.delay_grid().len() {
                let d = [m.delay_grid()[i], m.delay_grid()[j]];
                let rows: usize = data.len() * m.echo_len();
                let mut a = DMatrix::from_element(rows, 2, ZERO);
                let mut yv = DVector::from_element(rows, ZERO);
                for (c, (p, y)) in data.iter().enumerate() {
                    for t in 0..2 {
                        let mut g = [ZERO; 2];
                        g[t] = Complex64::new(1.0, 0.0);
                        let col = m.expected_echo(&h, &d, &g, p).unwrap();
                        for (r, v) in col.iter().enumerate() {
                            a[(c * m.echo_len() + r, t)] = *v;
                        }
                    }
                    for (r, v) in y.iter().enumerate() {
                        yv[c * m.echo_len() + r] = *v;
                    }
                }
                let sol = a.clone().svd(true, true).solve(&yv, 1e-12).unwrap();
                let res = (yv - a * sol).norm_squared();
                best = best.min(res);
            }
        }
        assert!((fit.residual - best).abs() <= 1e-9 * best);
    }

    #[test]
    fn likelihood_monotone_in_residual() {
        let m = RadarModel::new(&scene(false)).unwrap();
        let hist = EchoHistory::new(&m);
        let f = |r: f64| TargetFit {
            delays: vec![0.0],
            gains: vec![ZERO],
            residual: r,
        };
        assert!(
            log_likelihood(&f(1.0), &hist, 0.5, 1.5) > log_likelihood(&f(2.0), &hist, 0.5, 1.5)
        );
        assert_eq!(log_likelihood(&f(0.0), &hist, 0.5, 0.0), 0.0);
    }

    #[test]
    fn bayes_cases() {
        let u = Posterior::uniform(2);
        let p = bayes_update(&u, &[3f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p.probs()[1], 0.25, epsilon = 1e-15);
        let prior = Posterior::new(vec![0.2, 0.3, 0.5]).unwrap();
        let same = bayes_update(&prior, &[-4.0; 3]).unwrap();
        for (a, b) in same.probs().iter().zip(prior.probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let mut rng = rng_from_seed(3);
        let mut post = Posterior::uniform(10);
        for _ in 0..100 {
            let l: Vec<f64> = (0..10).map(|_| rng.random_range(-500.0..0.0)).collect();
            post = bayes_update(&post, &l).unwrap();
            assert!((post.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(bayes_update(&u, &[f64::NEG_INFINITY; 2]).is_err());
    }

    /// Two hypotheses, explicit likelihoods: the posterior must equal the
    /// normalized product computed by direct quadrature of the Gaussian
    /// densities over a scalar observation.
    #[test]
    fn two_hypothesis_posterior_matches_density_ratio() {
        let (mu0, mu1, s2) = (0.0f64, 1.0f64, 0.7f64);
        for y in [-0.5f64, 0.3, 0.5, 1.4] {
            let l0 = -(y - mu0).powi(2) / s2;
            let l1 = -(y - mu1).powi(2) / s2;
            let p = bayes_update(&Posterior::uniform(2), &[l0, l1]).unwrap();
            let d0 = (-(y - mu0).powi(2) / s2).exp();
            let d1 = (-(y - mu1).powi(2) / s2).exp();
            assert_abs_diff_eq!(p.probs()[0], d0 / (d0 + d1), epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_kl_cases() {
        let a = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)];
        let b = [Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)];
        assert_eq!(symmetric_kl(&a, &a, 1.0), 0.0);
        assert_abs_diff_eq!(symmetric_kl(&a, &b, 1.0), 2.0, epsilon = 1e-15);
        assert_eq!(symmetric_kl(&a, &b, 0.3), symmetric_kl(&b, &a, 0.3));
        // closed-form KL of CN(μ₁, σ²I) vs CN(μ₂, σ²I) is ‖Δμ‖²/σ² each way
        let kl_one_way = 2.0 / 0.5;
        assert_abs_diff_eq!(
            symmetric_kl(&a, &b, 0.5) / 2.0,
            kl_one_way / 2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn optimize_keeps_params_with_one_live_hypothesis() {
        let m = RadarModel::new(&scene(true)).unwrap();
        let hs = enumerate_hypotheses(1, 2, 4).unwrap();
        let mut p = vec![0.0; hs.len()];
        p[3] = 1.0;
        let post = Posterior::new(p).unwrap();
        let obj = SeparationObjective::new(&m, &hs, &post, &vec![None; hs.len()], 1.0, 4);
        let start = m.random_params(&mut rng_from_seed(2));
        assert_eq!(
            optimize_params(&obj, &start, &OptimizeOptions::default()).unwrap(),
            start
        );
    }

    #[test]
    fn optimize_ascends() {
        let m = RadarModel::new(&scene(true)).unwrap();
        let hs = enumerate_hypotheses(1, 2, 4).unwrap();
        let post = Posterior::uniform(hs.len());
        let obj = SeparationObjective::new(&m, &hs, &post, &vec![None; hs.len()], 1.0, 4);
        let start = m.random_params(&mut rng_from_seed(6));
        let out = optimize_params(&obj, &start, &OptimizeOptions::default()).unwrap();
        assert!(obj.value(&out) >= obj.value(&start));
        let w: f64 = out.waveform.iter().map(|v| v.norm_sqr()).sum();
        assert_abs_diff_eq!(w, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn optimize_single_group_matches_exhaustive() {
        let mut s = scene(true);
        s.panel = Some(
            RisPanel::grid(
                Vector3::new(-1.0, 0.6, 0.0),
                Vector3::y(),
                Vector3::z(),
                4,
                4,
                0.015,
                4,
                4,
                RisType::Reflective,
                PhaseCodebook::table1(),
            )
            .unwrap(),
        );
        let m = RadarModel::new(&s).unwrap();
        assert_eq!(m.group_count(), 1);
        let hs = vec![
            Hypothesis::new(vec![0]).unwrap(),
            Hypothesis::new(vec![1]).unwrap(),
        ];
        let post = Posterior::uniform(2);
        let obj = SeparationObjective::new(&m, &hs, &post, &[None, None], 1.0, 4);
        let start = m.initial_params();
        let opts = OptimizeOptions {
            budget: 1000,
            optimize_waveform: false,
            step: 0.5,
        };
        let out = optimize_params(&obj, &start, &opts).unwrap();
        let mut best = f64::NEG_INFINITY;
        for a in 0..4 {
            for b in 0..4 {
                let mut p = start.clone();
                p.tx_config.0[0] = a;
                p.rx_config.0[0] = b;
                best = best.max(obj.value(&p));
            }
        }
        assert_eq!(obj.value(&out), best);
    }

    #[test]
    fn noiseless_detection_in_one_cycle() {
        let s = scene(true);
        let hs = enumerate_hypotheses(1, 2, 4).unwrap();
        let m = RadarModel::new(&s).unwrap();
        let opts = DetectOptions {
            cycles: 1,
            noise_power: 0.0,
            top_p: 4,
            order_penalty: DEFAULT_ORDER_PENALTY,
            optimize: OptimizeOptions::default(),
        };
        for seed in 0..5 {
            let truth = RadarTruth::random(&hs, &m, &mut rng_from_seed(seed));
            for scheme in [RadarScheme::Optimized, RadarScheme::Random] {
                let tr = detect(
                    &s,
                    &hs,
                    &truth,
                    scheme,
                    &opts,
                    &mut rng_from_seed(1),
                    &mut rng_from_seed(2),
                )
                .unwrap();
                assert_abs_diff_eq!(
                    tr.posteriors[0].probs()[truth.hypothesis],
                    1.0,
                    epsilon = 1e-12
                );
                assert_eq!(tr.chosen, truth.hypothesis);
            }
        }
    }

    #[test]
    fn random_without_panel_equals_no_ris() {
        let s = scene(true);
        let hs = enumerate_hypotheses(1, 2, 4).unwrap();
        let m = RadarModel::new(&s.without_panel()).unwrap();
        let truth = RadarTruth::random(&hs, &m, &mut rng_from_seed(3));
        let opts = DetectOptions {
            cycles: 4,
            noise_power: 2.0,
            top_p: 4,
            order_penalty: DEFAULT_ORDER_PENALTY,
            optimize: OptimizeOptions::default(),
        };
        let a = detect(
            &s.without_panel(),
            &hs,
            &truth,
            RadarScheme::Random,
            &opts,
            &mut rng_from_seed(1),
            &mut rng_from_seed(2),
        )
        .unwrap();
        let b = detect(
            &s,
            &hs,
            &truth,
            RadarScheme::NoRis,
            &opts,
            &mut rng_from_seed(1),
            &mut rng_from_seed(2),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn detection_is_deterministic() {
        let s = scene(true);
        let hs = enumerate_hypotheses(1, 2, 4).unwrap();
        let m = RadarModel::new(&s).unwrap();
        let truth = RadarTruth::random(&hs, &m, &mut rng_from_seed(8));
        let opts = DetectOptions {
            cycles: 3,
            noise_power: 1.0,
            top_p: 4,
            order_penalty: DEFAULT_ORDER_PENALTY,
            optimize: OptimizeOptions {
                budget: 100,
                ..OptimizeOptions::default()
            },
        };
        let run = || {
            detect(
                &s,
                &hs,
                &truth,
                RadarScheme::Optimized,
                &opts,
                &mut rng_from_seed(1),
                &mut rng_from_seed(2),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        for p in &a.posteriors {
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
