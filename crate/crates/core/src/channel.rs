//! Scene geometry and received-signal synthesis.
//!
//! Per subcarrier the received sample is
//! `y_n = (h_los + Σ_m h_m + h_sc)·x_n + ω_n`, with free-space line of sight,
//! one single-bounce path per surface element, a frozen diffuse scattering
//! term, and circularly symmetric Gaussian noise.

use std::f64::consts::PI;

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ris::{RisConfig, RisPanel};
use crate::rng::SeedPath;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// `e^{−j2πd/λ}`
fn propagation_phase(d: f64, lambda: f64) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * PI * (d / lambda).fract())
}

/// Line-of-sight gain `(λ/4π)·√(g_T g_R)·e^{−j2πd/λ}/d`.
pub fn los_gain(d_los: f64, g_t: f64, g_r: f64, lambda: f64) -> Result<Complex64> {
    if !(d_los > 0.0) || !d_los.is_finite() {
        return Err(Error::invalid(format!(
            "LoS distance {d_los} must be positive"
        )));
    }
    check_link(g_t, g_r, lambda)?;
    Ok(propagation_phase(d_los, lambda) * (lambda / (4.0 * PI) * (g_t * g_r).sqrt() / d_los))
}

/// Single-element surface path gain
/// `λ·√(g_T g_R)·γ·e^{−j2π(d_T+d_R)/λ} / (8π^{3/2} d_T d_R)`.
pub fn ris_path_gain(
    d_t: f64,
    d_r: f64,
    gamma: Complex64,
    g_t: f64,
    g_r: f64,
    lambda: f64,
) -> Result<Complex64> {
    if !(d_t > 0.0 && d_r > 0.0) || !(d_t.is_finite() && d_r.is_finite()) {
        return Err(Error::invalid("surface path distances must be positive"));
    }
    check_link(g_t, g_r, lambda)?;
    let amp = lambda * (g_t * g_r).sqrt() / (8.0 * PI.powf(1.5) * d_t * d_r);
    Ok(gamma * propagation_phase(d_t + d_r, lambda) * amp)
}

fn check_link(g_t: f64, g_r: f64, lambda: f64) -> Result<()> {
    if !(g_t >= 0.0 && g_r >= 0.0) {
        return Err(Error::invalid("antenna gains must be nonnegative"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("wavelength must be positive"));
    }
    Ok(())
}

/// Circularly symmetric complex Gaussian draw with total variance `variance`.
pub fn complex_gaussian<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Far-field ULA phases `e^{−j2π·spacing·v·sin(aoa)/λ}`, `v = 0..V−1`.
pub fn ula_steering(antennas: usize, spacing: f64, aoa: f64, lambda: f64) -> Vec<Complex64> {
    let k = -2.0 * PI * spacing * aoa.sin() / lambda;
    (0..antennas)
        .map(|v| Complex64::from_polar(1.0, k * v as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transmitter {
    pub position: Vector3<f64>,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverArray {
    pub position: Vector3<f64>,
    pub gain: f64,
    pub antenna_count: usize,
    pub spacing: f64,
}

/// Axis-aligned box split into `nx × ny × nz` equal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoiGrid {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub divisions: [usize; 3],
}

impl SoiGrid {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>, divisions: [usize; 3]) -> Result<Self> {
        if divisions.contains(&0) {
            return Err(Error::invalid("SOI divisions must be positive"));
        }
        if (0..3).any(|i| !(max[i] >= min[i])) {
            return Err(Error::invalid("SOI max must dominate min"));
        }
        Ok(SoiGrid {
            min,
            max,
            divisions,
        })
    }

    pub fn block_count(&self) -> usize {
        self.divisions.iter().product()
    }

    pub fn block_size(&self) -> Vector3<f64> {
        let span = self.max - self.min;
        Vector3::new(
            span.x / self.divisions[0] as f64,
            span.y / self.divisions[1] as f64,
            span.z / self.divisions[2] as f64,
        )
    }

    /// Block centres, x fastest, then y, then z.
    pub fn block_centers(&self) -> Vec<Vector3<f64>> {
        let size = self.block_size();
        let [nx, ny, nz] = self.divisions;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(
                        self.min
                            + Vector3::new(
                                (i as f64 + 0.5) * size.x,
                                (j as f64 + 0.5) * size.y,
                                (k as f64 + 0.5) * size.z,
                            ),
                    );
                }
            }
        }
        out
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// OFDM subcarrier layout around a centre frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubcarrierGrid {
    pub count: usize,
    pub center_frequency: f64,
    pub spacing: f64,
}

impl SubcarrierGrid {
    pub fn new(count: usize, center_frequency: f64, spacing: f64) -> Result<Self> {
        let grid = SubcarrierGrid {
            count,
            center_frequency,
            spacing,
        };
        if count == 0 {
            return Err(Error::invalid("subcarrier count must be positive"));
        }
        if !(center_frequency > 0.0) || !(spacing >= 0.0) {
            return Err(Error::invalid("frequencies must be positive"));
        }
        if grid.frequency(0) <= 0.0 {
            return Err(Error::invalid(
                "lowest subcarrier frequency must be positive",
            ));
        }
        Ok(grid)
    }

    /// Single tone at `frequency`.
    pub fn single_tone(frequency: f64) -> Result<Self> {
        Self::new(1, frequency, 0.0)
    }

    /// Frequency of subcarrier `i` (0-based): `f + (i + 1 − (N+1)/2)·Δf`.
    pub fn frequency(&self, i: usize) -> f64 {
        self.center_frequency + (i as f64 + 1.0 - (self.count as f64 + 1.0) / 2.0) * self.spacing
    }

    pub fn wavelength(&self, i: usize) -> f64 {
        SPEED_OF_LIGHT / self.frequency(i)
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.wavelength(i)).collect()
    }

    pub fn center_wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.center_frequency
    }

    /// Sample period `1/(N·Δf)`.
    pub fn sample_period(&self) -> f64 {
        1.0 / (self.count as f64 * self.spacing)
    }
}

/// Diffuse environment scattering: variance and the seed that freezes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterModel {
    pub variance: f64,
    pub seed: u64,
}

/// Draw one diffuse scattering gain.
pub fn scatter_gain<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> Complex64 {
    if variance <= 0.0 {
        return ZERO;
    }
    complex_gaussian(variance, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub tx: Transmitter,
    pub rx: ReceiverArray,
    pub panel: Option<RisPanel>,
    pub soi: SoiGrid,
    pub grid: SubcarrierGrid,
    pub scatter: ScatterModel,
}

impl Scene {
    pub fn new(
        tx: Transmitter,
        rx: ReceiverArray,
        panel: Option<RisPanel>,
        soi: SoiGrid,
        grid: SubcarrierGrid,
        scatter: ScatterModel,
    ) -> Result<Self> {
        if soi.contains(&tx.position) || soi.contains(&rx.position) {
            return Err(Error::invalid(
                "transmitter and receiver must lie outside the SOI",
            ));
        }
        if rx.antenna_count == 0 {
            return Err(Error::invalid("receiver needs at least one antenna"));
        }
        if !(scatter.variance >= 0.0) {
            return Err(Error::invalid("scatter variance must be nonnegative"));
        }
        if (tx.position - rx.position).norm() <= 0.0 {
            return Err(Error::invalid("transmitter and receiver coincide"));
        }
        Ok(Scene {
            tx,
            rx,
            panel,
            soi,
            grid,
            scatter,
        })
    }

    pub fn without_panel(&self) -> Scene {
        Scene {
            panel: None,
            ..self.clone()
        }
    }

    /// Same scene with the diffuse scattering redrawn under a new seed
    /// (used to advance from one protocol cycle to the next).
    pub fn with_scatter_seed(&self, seed: u64) -> Scene {
        let mut s = self.clone();
        s.scatter.seed = seed;
        s
    }

    pub fn block_centers(&self) -> Vec<Vector3<f64>> {
        self.soi.block_centers()
    }

    fn panel_or_err(&self) -> Result<&RisPanel> {
        self.panel
            .as_ref()
            .ok_or_else(|| Error::invalid("scene has no surface panel"))
    }

    /// Frozen per-subcarrier diffuse scattering `h_sc`.
    pub fn scatter_response(&self) -> Vec<Complex64> {
        let base = SeedPath::root(self.scatter.seed).label("scatter");
        (0..self.grid.count)
            .map(|n| scatter_gain(self.scatter.variance, &mut base.index(n as u64).rng()))
            .collect()
    }
}

/// Tx → element m → block q → Rx gain for block reflectivity `nu`.
///
/// The first two segments use the single-element surface form with the block
/// in the receiver's place (unit gain); the last segment is a free-space
/// line-of-sight term to the receiver. Phase accumulates over all three
/// segments.
pub fn two_bounce_gain(
    scene: &Scene,
    element: usize,
    block: usize,
    nu: Complex64,
    config: &RisConfig,
    lambda: f64,
) -> Result<Complex64> {
    let panel = scene.panel_or_err()?;
    let responses = panel.group_responses(config)?;
    let owner = panel.element_groups();
    if element >= panel.element_count() {
        return Err(Error::invalid("element index out of range"));
    }
    let gamma = responses[owner[element]];
    Ok(element_block_gain(scene, panel, element, block, lambda)? * gamma * nu)
}

/// `two_bounce_gain` with unit element response and unit reflectivity.
pub fn element_block_gain(
    scene: &Scene,
    panel: &RisPanel,
    element: usize,
    block: usize,
    lambda: f64,
) -> Result<Complex64> {
    let centers = scene.block_centers();
    let p_block = centers
        .get(block)
        .ok_or_else(|| Error::invalid("block index out of range"))?;
    let p_elem = panel.elements()[element];
    let d1 = (p_elem - scene.tx.position).norm();
    let d2 = (p_block - p_elem).norm();
    let d3 = (scene.rx.position - p_block).norm();
    if !(d1 > 0.0 && d2 > 0.0 && d3 > 0.0) {
        return Err(Error::DegenerateGeometry(
            "zero-length cascade segment".into(),
        ));
    }
    let first = ris_path_gain(d1, d2, Complex64::new(1.0, 0.0), scene.tx.gain, 1.0, lambda)?;
    let last = los_gain(d3, 1.0, scene.rx.gain, lambda)?;
    Ok(first * last)
}

/// Per-element surface path gains `h_m` toward `rx_position` for explicit
/// element responses.
pub fn element_path_gains(
    scene: &Scene,
    rx_position: &Vector3<f64>,
    responses: &[Complex64],
    lambda: f64,
) -> Result<Vec<Complex64>> {
    let panel = scene.panel_or_err()?;
    if responses.len() != panel.element_count() {
        return Err(Error::invalid("one response per element required"));
    }
    panel
        .elements()
        .iter()
        .zip(responses)
        .map(|(p, &gamma)| {
            ris_path_gain(
                (p - scene.tx.position).norm(),
                (rx_position - p).norm(),
                gamma,
                scene.tx.gain,
                scene.rx.gain,
                lambda,
            )
        })
        .collect()
}

/// Unit-amplitude, continuous-phase element responses that cancel each
/// element's propagation phase, so every `h_m` arrives with phase zero.
pub fn aligned_responses(
    scene: &Scene,
    rx_position: &Vector3<f64>,
    lambda: f64,
) -> Result<Vec<Complex64>> {
    let panel = scene.panel_or_err()?;
    Ok(panel
        .elements()
        .iter()
        .map(|p| {
            let d = (p - scene.tx.position).norm() + (rx_position - p).norm();
            propagation_phase(d, lambda).conj()
        })
        .collect())
}

/// Which components of the channel to include.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub los: bool,
    pub reflect: bool,
    pub scatter: bool,
}

impl Components {
    pub const ALL: Components = Components {
        los: true,
        reflect: true,
        scatter: true,
    };
    pub const NONE: Components = Components {
        los: false,
        reflect: false,
        scatter: false,
    };
}

/// Per-subcarrier channel split into its components.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelResponse {
    pub los: Vec<Complex64>,
    pub reflect: Vec<Complex64>,
    pub scatter: Vec<Complex64>,
    pub total: Vec<Complex64>,
}

/// Channel at an arbitrary receiver position (first antenna).
pub fn channel_response_at(
    scene: &Scene,
    rx_position: &Vector3<f64>,
    config: Option<&RisConfig>,
    components: Components,
) -> Result<ChannelResponse> {
    let n = scene.grid.count;
    let lambdas = scene.grid.wavelengths();
    let (g_t, g_r) = (scene.tx.gain, scene.rx.gain);

    let mut los = vec![ZERO; n];
    if components.los {
        let d = (rx_position - scene.tx.position).norm();
        for (h, &lambda) in los.iter_mut().zip(&lambdas) {
            *h = los_gain(d, g_t, g_r, lambda)?;
        }
    }

    let mut reflect = vec![ZERO; n];
    if components.reflect {
        if let Some(panel) = &scene.panel {
            let default = panel.default_config();
            let gammas = crate::ris::expand_config(panel, config.unwrap_or(&default))?;
            for (p, gamma) in panel.elements().iter().zip(gammas) {
                let d_t = (p - scene.tx.position).norm();
                let d_r = (rx_position - p).norm();
                for (h, &lambda) in reflect.iter_mut().zip(&lambdas) {
                    *h += ris_path_gain(d_t, d_r, gamma, g_t, g_r, lambda)?;
                }
            }
        }
    }

    let scatter = if components.scatter {
        scene.scatter_response()
    } else {
        vec![ZERO; n]
    };

    let total = (0..n).map(|i| los[i] + reflect[i] + scatter[i]).collect();
    Ok(ChannelResponse {
        los,
        reflect,
        scatter,
        total,
    })
}

/// Channel at the scene's receiver.
pub fn channel_response(
    scene: &Scene,
    config: Option<&RisConfig>,
    components: Components,
) -> Result<ChannelResponse> {
    channel_response_at(scene, &scene.rx.position, config, components)
}

/// Add `CN(0, σ²)` noise to each sample.
pub fn add_noise<R: Rng + ?Sized>(y: &mut [Complex64], noise_power: f64, rng: &mut R) {
    if noise_power > 0.0 {
        for v in y {
            *v += complex_gaussian(noise_power, rng);
        }
    }
}

/// Received OFDM symbol `y = X·h_total + ω`.
pub fn received_symbol<R: Rng + ?Sized>(
    scene: &Scene,
    config: Option<&RisConfig>,
    x: &[Complex64],
    noise_power: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    received_symbol_with(scene, config, Components::ALL, x, noise_power, rng)
}

pub fn received_symbol_with<R: Rng + ?Sized>(
    scene: &Scene,
    config: Option<&RisConfig>,
    components: Components,
    x: &[Complex64],
    noise_power: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    if x.len() != scene.grid.count {
        return Err(Error::invalid(
            "symbol length must equal the subcarrier count",
        ));
    }
    if !(noise_power >= 0.0) {
        return Err(Error::invalid("noise power must be nonnegative"));
    }
    let h = channel_response(scene, config, components)?;
    let mut y: Vec<Complex64> = h.total.iter().zip(x).map(|(h, x)| h * x).collect();
    add_noise(&mut y, noise_power, rng);
    Ok(y)
}
