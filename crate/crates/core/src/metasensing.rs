//! Sensing with commodity signals through a reconfigurable surface.
//!
//! A cycle records one reference sample under the default configuration and
//! then one sample per frame under the scheduled configurations. The
//! difference vector `ŷ = y − y₀` is linear in the block reflectivities:
//! `ŷ = Γ̃·ν·x + ω̃`, where `Γ̃[f, q]` is the change of the Tx→surface→block→Rx
//! cascade gain between frame `f`'s configuration and the default.
//!
//! The receiver is assumed to see the surface only through the space of
//! interest (no direct surface→Rx path), so the line of sight and the frozen
//! diffuse scattering are the only terms the reference subtraction removes.
//!
//! Known objects (postures) are classified with the Bayes rule under the
//! Gaussian model; unknown objects are reconstructed with ridge least squares
//! followed by a logistic occupancy map and scored by cross-entropy.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_gaussian, element_block_gain, los_gain, Scene};
use crate::error::{Error, Result};
use crate::ris::{RisConfig, RisPanel};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Lower clip applied to occupancy probabilities before taking logs.
pub const CROSS_ENTROPY_CLIP: f64 = 1e-9;

/// Per-frame configurations of one data-collection phase plus the
/// calibration (default) configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSchedule {
    pub configs: Vec<RisConfig>,
    pub default_config: RisConfig,
}

impl FrameSchedule {
    pub fn new(
        configs: Vec<RisConfig>,
        default_config: RisConfig,
        panel: &RisPanel,
    ) -> Result<Self> {
        let s = FrameSchedule {
            configs,
            default_config,
        };
        s.validate(panel.group_count(), panel.codebook().len())?;
        Ok(s)
    }

    pub fn random<R: Rng + ?Sized>(
        groups: usize,
        states: usize,
        frames: usize,
        rng: &mut R,
    ) -> Self {
        FrameSchedule {
            configs: (0..frames)
                .map(|_| RisConfig::random(groups, states, rng))
                .collect(),
            default_config: RisConfig::uniform(groups, 0),
        }
    }

    pub fn validate(&self, groups: usize, states: usize) -> Result<()> {
        if self.configs.is_empty() {
            return Err(Error::invalid("schedule needs at least one frame"));
        }
        self.default_config.validate(groups, states)?;
        for c in &self.configs {
            c.validate(groups, states)?;
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.configs.len()
    }
}

/// `F × Q` matrix mapping block reflectivities to measurement differences.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix(DMatrix<Complex64>);

impl MeasurementMatrix {
    pub fn from_matrix(m: DMatrix<Complex64>) -> Self {
        MeasurementMatrix(m)
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn blocks(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    /// `Γ̃·ν·x`
    pub fn apply(&self, nu: &[Complex64], x: Complex64) -> Vec<Complex64> {
        let v = DVector::from_column_slice(nu);
        (&self.0 * v).iter().map(|g| g * x).collect()
    }
}

/// Cascade gains aggregated per element group: `G[g, q] = Σ_{m∈g} gain(m, q)`
/// at unit element response and unit reflectivity. With it, any schedule's
/// measurement matrix is `Γ̃[f, q] = Σ_g (γ(c_f[g]) − γ(c₀[g]))·G[g, q]`.
#[derive(Debug, Clone)]
pub struct BlockGainTable {
    gains: DMatrix<Complex64>,
    responses: Vec<Complex64>,
}

impl BlockGainTable {
    /// Built at the scene's centre wavelength (single-tone probing).
    pub fn new(scene: &Scene) -> Result<Self> {
        let panel = scene
            .panel
            .as_ref()
            .ok_or_else(|| Error::invalid("sensing needs a surface panel"))?;
        let lambda = scene.grid.center_wavelength();
        let q = scene.soi.block_count();
        let mut gains = DMatrix::from_element(panel.group_count(), q, ZERO);
        for (g, members) in panel.groups().iter().enumerate() {
            for &m in members {
                for b in 0..q {
                    gains[(g, b)] += element_block_gain(scene, panel, m, b, lambda)?;
                }
            }
        }
        Ok(BlockGainTable {
            gains,
            responses: panel.state_responses(),
        })
    }

    pub fn group_count(&self) -> usize {
        self.gains.nrows()
    }

    pub fn block_count(&self) -> usize {
        self.gains.ncols()
    }

    pub fn state_count(&self) -> usize {
        self.responses.len()
    }

    pub fn gains(&self) -> &DMatrix<Complex64> {
        &self.gains
    }

    pub fn matrix(&self, schedule: &FrameSchedule) -> Result<MeasurementMatrix> {
        schedule.validate(self.group_count(), self.state_count())?;
        let f = schedule.frames();
        let mut diff = DMatrix::from_element(f, self.group_count(), ZERO);
        for (row, cfg) in schedule.configs.iter().enumerate() {
            for g in 0..self.group_count() {
                diff[(row, g)] =
                    self.responses[cfg.0[g]] - self.responses[schedule.default_config.0[g]];
            }
        }
        Ok(MeasurementMatrix(diff * &self.gains))
    }

    pub fn random_schedule<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> FrameSchedule {
        FrameSchedule::random(self.group_count(), self.state_count(), frames, rng)
    }
}

/// Measurement matrix of `schedule` in `scene`.
pub fn measurement_matrix(scene: &Scene, schedule: &FrameSchedule) -> Result<MeasurementMatrix> {
    BlockGainTable::new(scene)?.matrix(schedule)
}

/// One noiseless-plus-noise received sample under `config` with block
/// reflectivities `nu`.
pub fn sensing_sample<R: Rng + ?Sized>(
    scene: &Scene,
    table: &BlockGainTable,
    config: &RisConfig,
    nu: &[Complex64],
    x: Complex64,
    noise_power: f64,
    rng: &mut R,
) -> Result<Complex64> {
    if nu.len() != table.block_count() {
        return Err(Error::invalid("one reflectivity per block required"));
    }
    config.validate(table.group_count(), table.state_count())?;
    let lambda = scene.grid.center_wavelength();
    let d = (scene.rx.position - scene.tx.position).norm();
    let mut h = los_gain(d, scene.tx.gain, scene.rx.gain, lambda)? + scene.scatter_response()[0];
    for g in 0..table.group_count() {
        let gamma = table.responses[config.0[g]];
        for (q, n) in nu.iter().enumerate() {
            h += gamma * table.gains[(g, q)] * n;
        }
    }
    let noise = if noise_power > 0.0 {
        complex_gaussian(noise_power, rng)
    } else {
        ZERO
    };
    Ok(h * x + noise)
}

/// Raw samples of one cycle: reference and per-frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSamples {
    pub reference: Complex64,
    pub frames: Vec<Complex64>,
}

/// Calibration plus data-collection phases of one cycle.
pub fn collect_cycle<R: Rng + ?Sized>(
    scene: &Scene,
    table: &BlockGainTable,
    schedule: &FrameSchedule,
    nu: &[Complex64],
    x: Complex64,
    noise_power: f64,
    rng: &mut R,
) -> Result<CycleSamples> {
    let reference = sensing_sample(
        scene,
        table,
        &schedule.default_config,
        nu,
        x,
        noise_power,
        rng,
    )?;
    let frames = schedule
        .configs
        .iter()
        .map(|c| sensing_sample(scene, table, c, nu, x, noise_power, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(CycleSamples { reference, frames })
}

/// `ŷ = y − y₀`
pub fn measurement_vector(frames: &[Complex64], reference: Complex64) -> Vec<Complex64> {
    frames.iter().map(|y| y - reference).collect()
}

/// Mean normalised inner product `|γ_q^H γ_q'| / (‖γ_q‖‖γ_q'‖)` over ordered
/// pairs of distinct columns.
pub fn mutual_coherence(m: &MeasurementMatrix) -> Result<f64> {
    let q = m.blocks();
    if q < 2 {
        return Err(Error::invalid("coherence needs at least two columns"));
    }
    let cols: Vec<_> = (0..q).map(|i| m.0.column(i)).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.norm()).collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::invalid("measurement matrix has a zero column"));
    }
    let mut total = 0.0;
    for i in 0..q {
        for j in (i + 1)..q {
            let ip = cols[i].dotc(&cols[j]).norm() / (norms[i] * norms[j]);
            total += 2.0 * ip.min(1.0);
        }
    }
    Ok(total / (q * (q - 1)) as f64)
}

/// Outcome of a schedule search.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSearch {
    pub schedule: FrameSchedule,
    pub loss: f64,
    /// Best loss seen after each evaluation.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

/// Greedy coordinate descent over `(frame, group)` coordinates in
/// frame-major, group-minor order, trying every state of the visited
/// coordinate with the rest frozen. A full pass that changes nothing
/// triggers a restart from a fresh random schedule.
fn schedule_descent<R, L>(
    table: &BlockGainTable,
    frames: usize,
    mut loss: L,
    budget: usize,
    rng: &mut R,
) -> Result<ScheduleSearch>
where
    R: Rng + ?Sized,
    L: FnMut(&FrameSchedule) -> f64,
{
    if budget == 0 {
        return Err(Error::invalid(
            "search budget must be at least one evaluation",
        ));
    }
    if frames == 0 {
        return Err(Error::invalid("schedule needs at least one frame"));
    }
    let groups = table.group_count();
    let k = table.state_count();
    let mut trace = Vec::with_capacity(budget);
    let mut evals = 0usize;
    let mut best: Option<(FrameSchedule, f64)> = None;

    let record = |s: &FrameSchedule,
                  v: f64,
                  best: &mut Option<(FrameSchedule, f64)>,
                  trace: &mut Vec<f64>| {
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            *best = Some((s.clone(), v));
        }
        trace.push(best.as_ref().map(|b| b.1).unwrap());
    };

    'restarts: while evals < budget {
        let mut current = table.random_schedule(frames, rng);
        let mut current_loss = loss(&current);
        evals += 1;
        record(&current, current_loss, &mut best, &mut trace);
        if k < 2 {
            break;
        }
        loop {
            let mut changed = false;
            for f in 0..frames {
                for g in 0..groups {
                    let original = current.configs[f].0[g];
                    let mut pick = (original, current_loss);
                    for s in 0..k {
                        if s == original {
                            continue;
                        }
                        if evals >= budget {
                            break 'restarts;
                        }
                        current.configs[f].0[g] = s;
                        let v = loss(&current);
                        evals += 1;
                        record(&current, v, &mut best, &mut trace);
                        if v < pick.1 {
                            pick = (s, v);
                        }
                    }
                    current.configs[f].0[g] = pick.0;
                    if pick.0 != original {
                        current_loss = pick.1;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }
    let (schedule, loss) = best.expect("at least one evaluation");
    Ok(ScheduleSearch {
        schedule,
        loss,
        trace,
        evaluations: evals,
    })
}

/// Schedule minimising the mutual coherence of its measurement matrix.
/// Schedules with a zero column score 1.
pub fn optimize_schedule_coherence<R: Rng + ?Sized>(
    table: &BlockGainTable,
    frames: usize,
    budget: usize,
    rng: &mut R,
) -> Result<ScheduleSearch> {
    schedule_descent(
        table,
        frames,
        |s| {
            table
                .matrix(s)
                .and_then(|m| mutual_coherence(&m))
                .unwrap_or(1.0)
        },
        budget,
        rng,
    )
}

/// Greedy traversal of the configuration decision process: states are
/// visited frame by frame, group by group; each step keeps the phase state
/// whose completed schedule scores the lowest loss.
pub fn greedy_config_search<R, L>(
    table: &BlockGainTable,
    frames: usize,
    eval: L,
    budget: usize,
    rng: &mut R,
) -> Result<ScheduleSearch>
where
    R: Rng + ?Sized,
    L: FnMut(&FrameSchedule) -> f64,
{
    schedule_descent(table, frames, eval, budget, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posture {
    pub label: String,
    pub reflectivity: Vec<Complex64>,
    pub prior: f64,
}

/// Known object set with priors and a misrecognition cost matrix
/// (`costs[i][j]`: cost of reporting `j` when the truth is `i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureLibrary {
    postures: Vec<Posture>,
    costs: Vec<Vec<f64>>,
}

impl PostureLibrary {
    pub fn new(postures: Vec<Posture>, costs: Vec<Vec<f64>>) -> Result<Self> {
        let n = postures.len();
        if n == 0 {
            return Err(Error::invalid("posture library is empty"));
        }
        let q = postures[0].reflectivity.len();
        if postures.iter().any(|p| p.reflectivity.len() != q) {
            return Err(Error::invalid("postures must share the block count"));
        }
        if postures.iter().any(|p| !(p.prior >= 0.0)) {
            return Err(Error::invalid("priors must be nonnegative"));
        }
        let total: f64 = postures.iter().map(|p| p.prior).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("priors sum to {total}, not 1")));
        }
        if costs.len() != n || costs.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("cost matrix must be square over postures"));
        }
        for (i, row) in costs.iter().enumerate() {
            if row[i] != 0.0 {
                return Err(Error::invalid("correct recognition must cost zero"));
            }
            if row.iter().any(|c| !(*c >= 0.0)) {
                return Err(Error::invalid("costs must be nonnegative"));
            }
        }
        Ok(PostureLibrary { postures, costs })
    }

    /// Library with 0–1 costs.
    pub fn with_zero_one_costs(postures: Vec<Posture>) -> Result<Self> {
        let n = postures.len();
        let costs = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        Self::new(postures, costs)
    }

    /// `count` equiprobable postures, each occupying `occupied` random blocks
    /// with unit-magnitude, random-phase reflectivity.
    pub fn synthetic<R: Rng + ?Sized>(
        blocks: usize,
        count: usize,
        occupied: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if occupied > blocks {
            return Err(Error::invalid("more occupied blocks than blocks"));
        }
        let postures = (0..count)
            .map(|i| {
                let mut nu = vec![ZERO; blocks];
                let mut idx: Vec<usize> = (0..blocks).collect();
                for j in 0..occupied {
                    let pick = rng.random_range(j..blocks);
                    idx.swap(j, pick);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    nu[idx[j]] = Complex64::from_polar(1.0, phase);
                }
                Posture {
                    label: format!("posture-{i}"),
                    reflectivity: nu,
                    prior: 1.0 / count as f64,
                }
            })
            .collect();
        Self::with_zero_one_costs(postures)
    }

    pub fn postures(&self) -> &[Posture] {
        &self.postures
    }

    pub fn costs(&self) -> &[Vec<f64>] {
        &self.costs
    }

    pub fn len(&self) -> usize {
        self.postures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.postures.is_empty()
    }
}

/// Minimum expected cost rule for a fixed measurement matrix.
#[derive(Debug, Clone)]
pub struct PostureClassifier {
    means: Vec<Vec<Complex64>>,
    priors: Vec<f64>,
    costs: Vec<Vec<f64>>,
    noise_power: f64,
}

impl PostureClassifier {
    pub fn new(
        gamma: &MeasurementMatrix,
        library: &PostureLibrary,
        noise_power: f64,
        x: Complex64,
    ) -> Self {
        PostureClassifier {
            means: library
                .postures
                .iter()
                .map(|p| gamma.apply(&p.reflectivity, x))
                .collect(),
            priors: library.postures.iter().map(|p| p.prior).collect(),
            costs: library.costs.clone(),
            noise_power,
        }
    }

    pub fn means(&self) -> &[Vec<Complex64>] {
        &self.means
    }

    /// `argmin_j Σ_i p_i·χ_{i,j}·N(ŷ; μ_i, 2σ²I)`; ties go to the lowest index.
    pub fn classify(&self, y_hat: &[Complex64]) -> usize {
        let residuals: Vec<f64> = self
            .means
            .iter()
            .map(|mu| mu.iter().zip(y_hat).map(|(m, y)| (y - m).norm_sqr()).sum())
            .collect();
        let weights: Vec<f64> = if self.noise_power > 0.0 {
            let logs: Vec<f64> = residuals
                .iter()
                .map(|r| -r / (2.0 * self.noise_power))
                .collect();
            let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            logs.iter().map(|l| (l - top).exp()).collect()
        } else {
            let min = residuals.iter().cloned().fold(f64::INFINITY, f64::min);
            let tol = 1e-12 * (1.0 + min);
            residuals
                .iter()
                .map(|r| if *r <= min + tol { 1.0 } else { 0.0 })
                .collect()
        };
        let n = self.means.len();
        let mut best = (f64::INFINITY, 0);
        for j in 0..n {
            let risk: f64 = (0..n)
                .map(|i| self.priors[i] * self.costs[i][j] * weights[i])
                .sum();
            if risk < best.0 {
                best = (risk, j);
            }
        }
        best.1
    }
}

/// Bayes decision for one measurement vector.
pub fn map_classify(
    y_hat: &[Complex64],
    gamma: &MeasurementMatrix,
    library: &PostureLibrary,
    noise_power: f64,
    x: Complex64,
) -> usize {
    PostureClassifier::new(gamma, library, noise_power, x).classify(y_hat)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Monte Carlo average misrecognition cost of `rule`. Each trial draws a
/// posture from the prior and a measurement vector whose noise is the
/// protocol's `ω_f − ω₀` (per-entry variance `2σ²`).
pub fn avg_cost<R, D>(
    mut rule: D,
    library: &PostureLibrary,
    gamma: &MeasurementMatrix,
    noise_power: f64,
    x: Complex64,
    trials: usize,
    rng: &mut R,
) -> Result<CostEstimate>
where
    R: Rng + ?Sized,
    D: FnMut(&[Complex64]) -> usize,
{
    if trials == 0 {
        return Err(Error::invalid("trials must be at least one"));
    }
    let means: Vec<Vec<Complex64>> = library
        .postures
        .iter()
        .map(|p| gamma.apply(&p.reflectivity, x))
        .collect();
    let priors: Vec<f64> = library.postures.iter().map(|p| p.prior).collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut y = vec![ZERO; gamma.frames()];
    for _ in 0..trials {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut truth = priors.len() - 1;
        for (i, p) in priors.iter().enumerate() {
            acc += p;
            if u < acc {
                truth = i;
                break;
            }
        }
        let reference = if noise_power > 0.0 {
            complex_gaussian(noise_power, rng)
        } else {
            ZERO
        };
        for (yf, m) in y.iter_mut().zip(&means[truth]) {
            let frame = if noise_power > 0.0 {
                complex_gaussian(noise_power, rng)
            } else {
                ZERO
            };
            *yf = m + frame - reference;
        }
        let c = library.costs[truth][rule(&y)];
        sum += c;
        sum_sq += c * c;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = if trials > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(CostEstimate {
        mean,
        std_error: (var / n).sqrt(),
        trials,
    })
}

/// Logistic occupancy map parameters: `p̂ = σ((|ν̂| − threshold)/scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyParams {
    pub threshold: f64,
    pub scale: f64,
}

impl Default for OccupancyParams {
    /// Calibrated for unit-magnitude reflectors.
    fn default() -> Self {
        Self::from_threshold(0.5)
    }
}

impl OccupancyParams {
    pub fn from_threshold(threshold: f64) -> Self {
        OccupancyParams {
            threshold,
            scale: threshold / 16.0,
        }
    }

    /// Threshold at half the median reconstructed magnitude of occupied
    /// blocks in calibration scenes.
    pub fn calibrate(occupied_magnitudes: &[f64]) -> Result<Self> {
        if occupied_magnitudes.is_empty() {
            return Err(Error::invalid("no calibration magnitudes"));
        }
        let mut v = occupied_magnitudes.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        if !(median > 0.0) {
            return Err(Error::invalid("calibration median must be positive"));
        }
        Ok(Self::from_threshold(median / 2.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyEstimate(pub Vec<f64>);

/// Ridge solution `(Γ̃^HΓ̃ + εI)^{-1}Γ̃^H(ŷ/x)` with
/// `ε = 1e-6·trace(Γ̃^HΓ̃)/Q`.
pub fn ridge_reflectivity(
    y_hat: &[Complex64],
    gamma: &MeasurementMatrix,
    x: Complex64,
) -> Result<Vec<Complex64>> {
    if y_hat.len() != gamma.frames() {
        return Err(Error::invalid(
            "measurement length must equal the frame count",
        ));
    }
    if x.norm() == 0.0 {
        return Err(Error::invalid("probe symbol must be nonzero"));
    }
    let g = gamma.as_matrix();
    let q = gamma.blocks();
    let mut gram = g.adjoint() * g;
    let trace: f64 = (0..q).map(|i| gram[(i, i)].re).sum();
    let eps = (1e-6 * trace / q as f64).max(f64::MIN_POSITIVE);
    for i in 0..q {
        gram[(i, i)] += Complex64::new(eps, 0.0);
    }
    let rhs = g.adjoint() * DVector::from_iterator(y_hat.len(), y_hat.iter().map(|y| y / x));
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Unidentifiable("regularised Gram matrix not positive definite".into())
    })?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Occupancy probabilities from a measurement vector.
pub fn reconstruct_occupancy(
    y_hat: &[Complex64],
    gamma: &MeasurementMatrix,
    x: Complex64,
    params: &OccupancyParams,
) -> Result<OccupancyEstimate> {
    let nu = ridge_reflectivity(y_hat, gamma, x)?;
    Ok(OccupancyEstimate(
        nu.iter()
            .map(|n| 1.0 / (1.0 + (-(n.norm() - params.threshold) / params.scale).exp()))
            .collect(),
    ))
}

/// Binary cross-entropy between estimated occupancy and ground truth
/// (`p_q = 1` iff `|ν_q| > 0`), with estimates clipped to `[δ, 1−δ]`.
pub fn cross_entropy(p_hat: &[f64], truth: &[Complex64]) -> Result<f64> {
    if p_hat.len() != truth.len() {
        return Err(Error::invalid("estimate and truth differ in length"));
    }
    Ok(p_hat
        .iter()
        .zip(truth)
        .map(|(&p, t)| {
            let p = p.clamp(CROSS_ENTROPY_CLIP, 1.0 - CROSS_ENTROPY_CLIP);
            if t.norm() > 0.0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

/// Training objective for unknown-object sensing: mean cross-entropy over a
/// fixed set of scenes with frozen noise realisations.
#[derive(Debug, Clone)]
pub struct OccupancyObjective {
    scenes: Vec<Vec<Complex64>>,
    noise: Vec<Vec<Complex64>>,
    x: Complex64,
    params: OccupancyParams,
}

impl OccupancyObjective {
    /// `scenes` random occupancies with `occupied` blocks each; noise drawn as
    /// the protocol difference `ω_f − ω₀` with per-sample power `noise_power`.
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        blocks: usize,
        frames: usize,
        scenes: usize,
        occupied: usize,
        noise_power: f64,
        x: Complex64,
        params: OccupancyParams,
        rng: &mut R,
    ) -> Result<Self> {
        let lib = PostureLibrary::synthetic(blocks, scenes.max(1), occupied, rng)?;
        let scenes_v: Vec<Vec<Complex64>> =
            lib.postures.into_iter().map(|p| p.reflectivity).collect();
        let noise = (0..scenes_v.len())
            .map(|_| protocol_noise(frames, noise_power, rng))
            .collect();
        Ok(OccupancyObjective {
            scenes: scenes_v,
            noise,
            x,
            params,
        })
    }

    pub fn scenes(&self) -> &[Vec<Complex64>] {
        &self.scenes
    }

    pub fn loss(&self, gamma: &MeasurementMatrix) -> f64 {
        let mut total = 0.0;
        for (nu, w) in self.scenes.iter().zip(&self.noise) {
            let y: Vec<Complex64> = gamma
                .apply(nu, self.x)
                .iter()
                .zip(w)
                .map(|(m, n)| m + n)
                .collect();
            total += reconstruct_occupancy(&y, gamma, self.x, &self.params)
                .and_then(|p| cross_entropy(&p.0, nu))
                .unwrap_or(f64::INFINITY);
        }
        total / self.scenes.len() as f64
    }
}

/// `ω_f − ω₀` for `frames` frames.
pub fn protocol_noise<R: Rng + ?Sized>(
    frames: usize,
    noise_power: f64,
    rng: &mut R,
) -> Vec<Complex64> {
    if noise_power <= 0.0 {
        return vec![ZERO; frames];
    }
    let reference = complex_gaussian(noise_power, rng);
    (0..frames)
        .map(|_| complex_gaussian(noise_power, rng) - reference)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        two_bounce_gain, ReceiverArray, ScatterModel, SoiGrid, SubcarrierGrid, Transmitter,
    };
    use crate::ris::{PhaseCodebook, RisType};
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn scene(rows: usize, group: usize, divisions: [usize; 3]) -> Scene {
        let panel = RisPanel::grid(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::x(),
            Vector3::z(),
            rows,
            rows,
            0.015,
            group,
            group,
            RisType::Reflective,
            PhaseCodebook::table1(),
        )
        .unwrap();
        Scene::new(
            Transmitter {
                position: Vector3::new(-0.8, 0.3, 1.0),
                gain: 4.0,
            },
            ReceiverArray {
                position: Vector3::new(0.8, 0.3, 1.0),
                gain: 4.0,
                antenna_count: 1,
                spacing: 0.05,
            },
            Some(panel),
            SoiGrid::new(
                Vector3::new(-0.6, 1.0, 0.6),
                Vector3::new(0.6, 2.2, 1.4),
                divisions,
            )
            .unwrap(),
            SubcarrierGrid::single_tone(3.198e9).unwrap(),
            ScatterModel {
                variance: 1e-8,
                seed: 3,
            },
        )
        .unwrap()
    }

    #[test]
    fn default_everywhere_gives_zero_matrix() {
        let s = scene(8, 2, [2, 2, 1]);
        let panel = s.panel.as_ref().unwrap();
        let sched = FrameSchedule::new(
            vec![panel.default_config(); 3],
            panel.default_config(),
            panel,
        )
        .unwrap();
        let m = measurement_matrix(&s, &sched).unwrap();
        assert!(m.as_matrix().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn single_element_matches_two_bounce_difference() {
        let s = scene(1, 1, [1, 1, 1]);
        let panel = s.panel.as_ref().unwrap();
        let cfg = RisConfig(vec![2]);
        let sched = FrameSchedule::new(vec![cfg.clone()], panel.default_config(), panel).unwrap();
        let m = measurement_matrix(&s, &sched).unwrap();
        let lambda = s.grid.center_wavelength();
        let one = Complex64::new(1.0, 0.0);
        let expected = two_bounce_gain(&s, 0, 0, one, &cfg, lambda).unwrap()
            - two_bounce_gain(&s, 0, 0, one, &panel.default_config(), lambda).unwrap();
        assert_abs_diff_eq!(
            (m.as_matrix()[(0, 0)] - expected).norm(),
            0.0,
            epsilon = 1e-18
        );
    }

    #[test]
    fn table_matches_per_element_definition() {
        let s = scene(4, 2, [2, 2, 1]);
        let panel = s.panel.as_ref().unwrap();
        let mut rng = rng_from_seed(5);
        let sched = FrameSchedule::random(panel.group_count(), 4, 3, &mut rng);
        let m = measurement_matrix(&s, &sched).unwrap();
        let lambda = s.grid.center_wavelength();
        let one = Complex64::new(1.0, 0.0);
        for f in 0..3 {
            for q in 0..4 {
                let mut direct = ZERO;
                for e in 0..panel.element_count() {
                    direct += two_bounce_gain(&s, e, q, one, &sched.configs[f], lambda).unwrap()
                        - two_bounce_gain(&s, e, q, one, &sched.default_config, lambda).unwrap();
                }
                assert!(
                    (m.as_matrix()[(f, q)] - direct).norm() <= 1e-12 * direct.norm().max(1e-30)
                );
            }
        }
    }

    #[test]
    fn end_to_end_linearity() {
        let s = scene(8, 2, [2, 2, 1]);
        let table = BlockGainTable::new(&s).unwrap();
        let mut rng = rng_from_seed(8);
        let sched = table.random_schedule(5, &mut rng);
        let gamma = table.matrix(&sched).unwrap();
        let x = Complex64::new(0.7, 0.2);
        let nu1: Vec<Complex64> = (0..4)
            .map(|i| Complex64::new(i as f64 * 0.3, 0.1))
            .collect();
        let nu2: Vec<Complex64> = (0..4).map(|i| Complex64::new(0.2, -(i as f64))).collect();
        let yhat = |nu: &[Complex64]| {
            let c = collect_cycle(&s, &table, &sched, nu, x, 0.0, &mut rng_from_seed(0)).unwrap();
            measurement_vector(&c.frames, c.reference)
        };
        let y1 = yhat(&nu1);
        let model = gamma.apply(&nu1, x);
        for (a, b) in y1.iter().zip(&model) {
            assert!((a - b).norm() <= 1e-9 * b.norm());
        }
        let zero = yhat(&[ZERO; 4]);
        assert!(zero.iter().all(|v| v.norm() < 1e-15));
        let (a, b) = (2.0, -0.5);
        let mix: Vec<Complex64> = nu1.iter().zip(&nu2).map(|(p, q)| p * a + q * b).collect();
        let y2 = yhat(&nu2);
        for ((m, p), q) in yhat(&mix).iter().zip(&y1).zip(&y2) {
            let expect = p * a + q * b;
            assert!((m - expect).norm() <= 1e-9 * expect.norm());
        }
    }

    #[test]
    fn protocol_noise_variance_is_twice_sigma2() {
        let sigma2 = 0.5;
        let mut rng = rng_from_seed(12);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += protocol_noise(2, sigma2, &mut rng)[1].norm_sqr();
        }
        let var = acc / n as f64;
        assert!(
            (var - 2.0 * sigma2).abs() / (2.0 * sigma2) < 0.02,
            "var {var}"
        );
    }

    #[test]
    fn coherence_cases() {
        let c = |rows: &[&[f64]]| {
            let r = rows.len();
            let q = rows[0].len();
            MeasurementMatrix::from_matrix(DMatrix::from_fn(r, q, |i, j| {
                Complex64::new(rows[i][j], 0.0)
            }))
        };
        assert_abs_diff_eq!(
            mutual_coherence(&c(&[&[1.0, 1.0], &[1.0, -1.0]])).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            mutual_coherence(&c(&[&[1.0, 1.0], &[2.0, 2.0]])).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert!(mutual_coherence(&c(&[&[1.0, 0.0], &[2.0, 0.0]])).is_err());
    }

    #[test]
    fn coherence_matches_naive_double_loop() {
        let mut rng = rng_from_seed(21);
        let m = DMatrix::from_fn(8, 4, |_, _| complex_gaussian(1.0, &mut rng));
        let mm = MeasurementMatrix::from_matrix(m.clone());
        let mut naive = 0.0;
        for q in 0..4 {
            for p in 0..4 {
                if p == q {
                    continue;
                }
                let mut ip = ZERO;
                let (mut nq, mut np) = (0.0, 0.0);
                for f in 0..8 {
                    ip += m[(f, q)].conj() * m[(f, p)];
                    nq += m[(f, q)].norm_sqr();
                    np += m[(f, p)].norm_sqr();
                }
                naive += ip.norm() / (nq.sqrt() * np.sqrt());
            }
        }
        naive /= 12.0;
        assert_abs_diff_eq!(mutual_coherence(&mm).unwrap(), naive, epsilon = 1e-12);
        // Column permutation invariance.
        let perm = DMatrix::from_fn(8, 4, |i, j| m[(i, [2, 0, 3, 1][j])]);
        assert_abs_diff_eq!(
            mutual_coherence(&MeasurementMatrix::from_matrix(perm)).unwrap(),
            naive,
            epsilon = 1e-12
        );
    }

    #[test]
    fn coherence_search_contracts() {
        let s = scene(8, 2, [2, 2, 1]);
        let table = BlockGainTable::new(&s).unwrap();
        let one = optimize_schedule_coherence(&table, 4, 1, &mut rng_from_seed(1)).unwrap();
        assert_eq!(one.evaluations, 1);
        let first = table.random_schedule(4, &mut rng_from_seed(1));
        assert_eq!(one.schedule, first);
        let run = optimize_schedule_coherence(&table, 4, 400, &mut rng_from_seed(2)).unwrap();
        assert!(run.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(run.trace.len(), run.evaluations);
        assert_eq!(*run.trace.last().unwrap(), run.loss);
        let again = optimize_schedule_coherence(&table, 4, 400, &mut rng_from_seed(2)).unwrap();
        assert_eq!(run, again);
        let mut rng = rng_from_seed(3);
        let mean_random: f64 = (0..100)
            .map(|_| {
                let sched = table.random_schedule(4, &mut rng);
                mutual_coherence(&table.matrix(&sched).unwrap()).unwrap_or(1.0)
            })
            .sum::<f64>()
            / 100.0;
        assert!(run.loss <= mean_random);
    }

    fn scalar_library(mu: [f64; 2], costs: [[f64; 2]; 2]) -> (PostureLibrary, MeasurementMatrix) {
        let postures = mu
            .iter()
            .enumerate()
            .map(|(i, &m)| Posture {
                label: format!("p{i}"),
                reflectivity: vec![Complex64::new(m, 0.0)],
                prior: 0.5,
            })
            .collect();
        let lib =
            PostureLibrary::new(postures, costs.iter().map(|r| r.to_vec()).collect()).unwrap();
        let gamma =
            MeasurementMatrix::from_matrix(DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)));
        (lib, gamma)
    }

    /// Decision boundary of the Bayes rule found by minimising the expected
    /// cost of threshold rules with a quadrature oracle on the real axis.
    fn oracle_threshold(mu: [f64; 2], costs: [[f64; 2]; 2], sigma2: f64) -> f64 {
        // Real part of CN(0, 2σ²) has variance σ².
        let sd = sigma2.sqrt();
        let pdf = |y: f64, m: f64| {
            (-(y - m).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
        };
        let risk = |t: f64| {
            // say posture 0 below t, posture 1 above
            let (lo, hi, n) = (-10.0, 10.0, 20_000);
            let h = (hi - lo) / n as f64;
            let mut r = 0.0;
            for k in 0..=n {
                let y = lo + k as f64 * h;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                let decide = if y < t { 0 } else { 1 };
                r += w
                    * h
                    * (0.5 * costs[0][decide] * pdf(y, mu[0])
                        + 0.5 * costs[1][decide] * pdf(y, mu[1]));
            }
            r
        };
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=2000 {
            let t = -1.0 + 3.0 * k as f64 / 2000.0;
            let r = risk(t);
            if r < best.0 {
                best = (r, t);
            }
        }
        best.1
    }

    fn empirical_threshold(lib: &PostureLibrary, gamma: &MeasurementMatrix, sigma2: f64) -> f64 {
        let clf = PostureClassifier::new(gamma, lib, sigma2, Complex64::new(1.0, 0.0));
        let (mut lo, mut hi) = (-1.0, 2.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if clf.classify(&[Complex64::new(mid, 0.0)]) == 0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn map_rule_thresholds_match_oracle() {
        let sigma2 = 0.09;
        let zero_one = [[0.0, 1.0], [1.0, 0.0]];
        let (lib, gamma) = scalar_library([0.0, 1.0], zero_one);
        let t = empirical_threshold(&lib, &gamma, sigma2);
        assert_abs_diff_eq!(t, 0.5, epsilon = 1e-9);
        assert!((t - oracle_threshold([0.0, 1.0], zero_one, sigma2)).abs() <= 2e-3);

        let skew = [[0.0, 10.0], [1.0, 0.0]];
        let (lib, gamma) = scalar_library([0.0, 1.0], skew);
        let t = empirical_threshold(&lib, &gamma, sigma2);
        assert!(t > 0.5, "threshold moves toward posture 2's mean: {t}");
        assert!((t - oracle_threshold([0.0, 1.0], skew, sigma2)).abs() <= 2e-3);
    }

    #[test]
    fn map_exact_mean_noiseless() {
        let s = scene(8, 2, [2, 2, 1]);
        let table = BlockGainTable::new(&s).unwrap();
        let mut rng = rng_from_seed(4);
        let gamma = table.matrix(&table.random_schedule(6, &mut rng)).unwrap();
        let lib = PostureLibrary::synthetic(4, 3, 2, &mut rng).unwrap();
        let x = Complex64::new(1.0, 0.0);
        for (i, p) in lib.postures().iter().enumerate() {
            let y = gamma.apply(&p.reflectivity, x);
            assert_eq!(map_classify(&y, &gamma, &lib, 0.0, x), i);
            assert_eq!(map_classify(&y, &gamma, &lib, 1e-6, x), i);
        }
    }

    #[test]
    fn map_invariant_to_prior_scaling() {
        let mut rng = rng_from_seed(9);
        let lib = PostureLibrary::synthetic(3, 4, 2, &mut rng).unwrap();
        let gamma = MeasurementMatrix::from_matrix(DMatrix::from_fn(5, 3, |_, _| {
            complex_gaussian(1.0, &mut rng)
        }));
        let x = Complex64::new(1.0, 0.0);
        let base = PostureClassifier::new(&gamma, &lib, 0.3, x);
        let mut scaled = base.clone();
        scaled.priors.iter_mut().for_each(|p| *p *= 7.5);
        for _ in 0..200 {
            let y: Vec<Complex64> = (0..5).map(|_| complex_gaussian(2.0, &mut rng)).collect();
            assert_eq!(base.classify(&y), scaled.classify(&y));
        }
    }

    #[test]
    fn avg_cost_limits_and_closed_form() {
        let zero_one = [[0.0, 1.0], [1.0, 0.0]];
        let (lib, gamma) = scalar_library([0.0, 1.0], zero_one);
        let x = Complex64::new(1.0, 0.0);
        let mut rng = rng_from_seed(30);
        let noiseless = avg_cost(
            |y| map_classify(y, &gamma, &lib, 0.0, x),
            &lib,
            &gamma,
            0.0,
            x,
            1000,
            &mut rng,
        )
        .unwrap();
        assert_eq!(noiseless.mean, 0.0);
        let loud = avg_cost(
            |y| map_classify(y, &gamma, &lib, 1e8, x),
            &lib,
            &gamma,
            1e8,
            x,
            20_000,
            &mut rng,
        )
        .unwrap();
        assert!((loud.mean - 0.5).abs() < 3.0 * loud.std_error + 1e-3);

        // Closed form: the difference of two CN(0, σ²) draws has real part
        // with variance σ², so P_e = Q(d / (2σ)).
        let sigma2: f64 = 0.16;
        let clf = PostureClassifier::new(&gamma, &lib, sigma2, x);
        let est = avg_cost(
            |y| clf.classify(y),
            &lib,
            &gamma,
            sigma2,
            x,
            200_000,
            &mut rng,
        )
        .unwrap();
        let z = 1.0 / (2.0 * sigma2.sqrt());
        let q = 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
        assert!(
            (est.mean - q).abs() <= 3.0 * est.std_error,
            "{} vs {q}",
            est.mean
        );
    }

    #[test]
    fn map_beats_fixed_and_random_rules() {
        let s = scene(8, 2, [2, 2, 1]);
        let table = BlockGainTable::new(&s).unwrap();
        let mut rng = rng_from_seed(44);
        let gamma = table.matrix(&table.random_schedule(4, &mut rng)).unwrap();
        let lib = PostureLibrary::synthetic(4, 4, 2, &mut rng).unwrap();
        let x = Complex64::new(1.0, 0.0);
        let scale: f64 = gamma.as_matrix().iter().map(|v| v.norm_sqr()).sum::<f64>() / 16.0;
        let sigma2 = scale * 0.5;
        let clf = PostureClassifier::new(&gamma, &lib, sigma2, x);
        let map = avg_cost(
            |y| clf.classify(y),
            &lib,
            &gamma,
            sigma2,
            x,
            20_000,
            &mut rng_from_seed(1),
        )
        .unwrap();
        for fixed in 0..4 {
            let c = avg_cost(
                |_| fixed,
                &lib,
                &gamma,
                sigma2,
                x,
                20_000,
                &mut rng_from_seed(1),
            )
            .unwrap();
            assert!(map.mean <= c.mean + 3.0 * (map.std_error + c.std_error));
        }
        let mut guess_rng = rng_from_seed(77);
        let guess = avg_cost(
            |_| guess_rng.random_range(0..4),
            &lib,
            &gamma,
            sigma2,
            x,
            20_000,
            &mut rng_from_seed(1),
        )
        .unwrap();
        assert!(map.mean <= guess.mean + 3.0 * (map.std_error + guess.std_error));
    }

    #[test]
    fn cross_entropy_cases() {
        let one = Complex64::new(1.0, 0.0);
        let truth = [one, ZERO, ZERO];
        let v = cross_entropy(&[0.9, 0.2, 0.1], &truth).unwrap();
        let oracle = -(0.9f64.ln() + 0.8f64.ln() + 0.9f64.ln());
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.433_864_6, epsilon = 1e-6);
        assert_abs_diff_eq!(
            cross_entropy(&[0.5; 3], &truth).unwrap(),
            3.0 * 2f64.ln(),
            epsilon = 1e-12
        );
        let perfect = cross_entropy(&[1.0, 0.0, 0.0], &truth).unwrap();
        assert!(perfect <= 3.0 * (1.0 / (1.0 - CROSS_ENTROPY_CLIP)).ln() + 1e-15);
    }

    #[test]
    fn occupancy_empty_and_single_block() {
        let mut rng = rng_from_seed(2);
        let m = DMatrix::from_fn(6, 6, |_, _| complex_gaussian(1.0, &mut rng));
        let gamma = MeasurementMatrix::from_matrix(m);
        let x = Complex64::new(1.0, 0.0);
        let params = OccupancyParams::default();
        let empty = reconstruct_occupancy(&[ZERO; 6], &gamma, x, &params).unwrap();
        assert!(empty.0.iter().all(|&p| p < 0.5));
        let mut nu = vec![ZERO; 6];
        nu[3] = Complex64::from_polar(1.0, 0.4);
        let y = gamma.apply(&nu, x);
        let est = reconstruct_occupancy(&y, &gamma, x, &params).unwrap();
        for (q, p) in est.0.iter().enumerate() {
            if q == 3 {
                assert!(*p > 0.99);
            } else {
                assert!(*p < 0.01);
            }
        }
    }

    #[test]
    fn calibrate_threshold() {
        let p = OccupancyParams::calibrate(&[0.8, 1.2, 1.0]).unwrap();
        assert_abs_diff_eq!(p.threshold, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.scale, 0.5 / 16.0, epsilon = 1e-15);
        assert!(OccupancyParams::calibrate(&[]).is_err());
    }

    #[test]
    fn greedy_single_group_matches_exhaustive() {
        let s = scene(4, 4, [2, 2, 1]);
        let table = BlockGainTable::new(&s).unwrap();
        assert_eq!(table.group_count(), 1);
        let objective = OccupancyObjective::random(
            4,
            1,
            8,
            1,
            1e-14,
            Complex64::new(1.0, 0.0),
            OccupancyParams::default(),
            &mut rng_from_seed(6),
        )
        .unwrap();
        let loss = |sch: &FrameSchedule| objective.loss(&table.matrix(sch).unwrap());
        let brute = (0..4)
            .map(|k| {
                let sch = FrameSchedule {
                    configs: vec![RisConfig(vec![k])],
                    default_config: RisConfig(vec![0]),
                };
                loss(&sch)
            })
            .fold(f64::INFINITY, f64::min);
        let run = greedy_config_search(&table, 1, loss, 4, &mut rng_from_seed(1)).unwrap();
        assert_eq!(run.loss, brute);
        assert!(run.loss <= run.trace[0]);
    }

    #[test]
    fn greedy_with_single_state_codebook() {
        let mut s = scene(4, 2, [2, 2, 1]);
        let panel = s.panel.take().unwrap();
        let single = RisPanel::new(
            panel.elements().to_vec(),
            panel.groups().to_vec(),
            RisType::Reflective,
            *panel.plane(),
            PhaseCodebook::uniform(1, 1.0).unwrap(),
        )
        .unwrap();
        s.panel = Some(single);
        let table = BlockGainTable::new(&s).unwrap();
        let run = greedy_config_search(&table, 2, |_| 1.0, 50, &mut rng_from_seed(1)).unwrap();
        assert_eq!(run.evaluations, 1);
        assert!(run
            .schedule
            .configs
            .iter()
            .all(|c| c.0.iter().all(|&v| v == 0)));
    }
}
