//! Particle-filter SLAM with a surface acting as a controllable landmark.
//!
//! The world is planar. The agent carries its transmitter at a fixed offset
//! from the receiver, so wall reflections arrive from virtual transmitters
//! that move with the agent, while scatterers and the surface stay put.
//! Each resolved path gives a delay, an angle of arrival and a complex
//! amplitude. Paths are back-projected into the world under a
//! single-bounce model; the ones that land on the same spot cycle after
//! cycle become static landmarks and feed a FastSLAM filter that keeps one
//! small EKF per landmark per particle.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::{complex_gaussian, los_gain, ris_path_gain, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::ris::{neighbor_descent_with, ConfigSearch, Descent, PhaseCodebook, RisConfig};
use crate::rng::SeedPath;

pub type Point = Vector2<f64>;

const MIN_STD: f64 = 1e-6;

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Direction of `to` seen from `from`, radians from +x.
pub fn bearing(from: &Point, to: &Point) -> f64 {
    let d = to - from;
    d.y.atan2(d.x)
}

/// Planar mirror `n·p = offset` with unit normal `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reflector {
    normal: Point,
    offset: f64,
    coefficient: f64,
}

impl Reflector {
    /// The normal is rescaled to unit length, and the offset with it.
    /// `coefficient` is the amplitude reflection coefficient.
    pub fn new(normal: Point, offset: f64, coefficient: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0) || !n.is_finite() || !offset.is_finite() {
            return Err(Error::invalid(
                "reflector normal must be finite and nonzero",
            ));
        }
        if !(0.0..=1.0).contains(&coefficient) {
            return Err(Error::invalid("reflection coefficient must lie in [0, 1]"));
        }
        Ok(Reflector {
            normal: normal / n,
            offset: offset / n,
            coefficient,
        })
    }

    pub fn normal(&self) -> Point {
        self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    /// Signed distance of `p`, positive on the side the normal points to.
    pub fn signed_distance(&self, p: &Point) -> f64 {
        self.normal.dot(p) - self.offset
    }

    fn same_side(&self, a: &Point, b: &Point) -> bool {
        self.signed_distance(a) * self.signed_distance(b) > 0.0
    }
}

/// Image of `p` across the reflector.
pub fn mirror(p: &Point, reflector: &Reflector) -> Point {
    p - reflector.normal * (2.0 * reflector.signed_distance(p))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub position: Point,
    /// Scalar reflectivity applied to a single-bounce path.
    pub reflectivity: f64,
}

/// A linear surface: elements on a segment, split into consecutive groups
/// that share a phase state.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamPanel {
    elements: Vec<Point>,
    group_size: usize,
    codebook: PhaseCodebook,
}

impl SlamPanel {
    /// `count` elements spaced `spacing` apart along `direction`, centred on
    /// `center`. `count` must be a multiple of `group_size`.
    pub fn line(
        center: Point,
        direction: Point,
        count: usize,
        spacing: f64,
        group_size: usize,
        codebook: PhaseCodebook,
    ) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid("panel direction must be nonzero"));
        }
        if count == 0 || group_size == 0 || count % group_size != 0 {
            return Err(Error::invalid(format!(
                "element count {count} must be a positive multiple of group size {group_size}"
            )));
        }
        if !(spacing > 0.0) {
            return Err(Error::invalid("element spacing must be positive"));
        }
        let u = direction / n;
        let mid = (count as f64 - 1.0) / 2.0;
        let elements = (0..count)
            .map(|i| center + u * ((i as f64 - mid) * spacing))
            .collect();
        Ok(SlamPanel {
            elements,
            group_size,
            codebook,
        })
    }

    pub fn elements(&self) -> &[Point] {
        &self.elements
    }

    pub fn center(&self) -> Point {
        self.elements.iter().sum::<Point>() / self.elements.len() as f64
    }

    pub fn group_count(&self) -> usize {
        self.elements.len() / self.group_size
    }

    pub fn codebook(&self) -> &PhaseCodebook {
        &self.codebook
    }

    /// Per-group sums of unit-reflectivity element gains from `tx` to `rx`.
    pub fn group_gains(&self, tx: &Point, rx: &Point, lambda: f64) -> Result<Vec<Complex64>> {
        self.elements
            .chunks(self.group_size)
            .map(|chunk| {
                chunk.iter().try_fold(Complex64::new(0.0, 0.0), |acc, e| {
                    let g = ris_path_gain(
                        (tx - e).norm(),
                        (e - rx).norm(),
                        Complex64::new(1.0, 0.0),
                        1.0,
                        1.0,
                        lambda,
                    )?;
                    Ok(acc + g)
                })
            })
            .collect()
    }

    /// Combine precomputed group gains under a configuration.
    pub fn combine(&self, group_gains: &[Complex64], config: &RisConfig) -> Result<Complex64> {
        config.validate(self.group_count(), self.codebook.len())?;
        let states = self.codebook.states();
        Ok(group_gains
            .iter()
            .zip(config.states())
            .map(|(g, &s)| g * states[s].response())
            .sum())
    }

    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> RisConfig {
        RisConfig::random(self.group_count(), self.codebook.len(), rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamWorld {
    pub carrier: f64,
    /// Transmitter position relative to the receiver on the agent.
    pub tx_offset: Point,
    pub reflectors: Vec<Reflector>,
    pub scatterers: Vec<Scatterer>,
    pub panel: Option<SlamPanel>,
    /// Emit scatterer-then-wall paths.
    pub virtual_scatterers: bool,
}

impl SlamWorld {
    pub fn lambda(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier
    }

    /// Square room `[0, side]²` with inward-facing walls, four scatterers
    /// near the corners and a 64-element surface on the top wall, every
    /// element driven on its own.
    pub fn default_room() -> Self {
        let side = 6.0;
        let walls = [
            (Point::new(1.0, 0.0), 0.0),
            (Point::new(-1.0, 0.0), -side),
            (Point::new(0.0, 1.0), 0.0),
            (Point::new(0.0, -1.0), -side),
        ];
        let carrier = 3.198e9;
        let lambda = SPEED_OF_LIGHT / carrier;
        SlamWorld {
            carrier,
            tx_offset: Point::new(0.1, 0.0),
            reflectors: walls
                .iter()
                .map(|(n, o)| Reflector::new(*n, *o, 0.5).expect("valid wall"))
                .collect(),
            scatterers: [(1.0, 4.8), (4.9, 1.1), (5.0, 4.9), (1.2, 1.0)]
                .iter()
                .map(|&(x, y)| Scatterer {
                    position: Point::new(x, y),
                    reflectivity: 2.0,
                })
                .collect(),
            panel: Some(
                SlamPanel::line(
                    Point::new(3.0, side - 0.05),
                    Point::new(1.0, 0.0),
                    64,
                    lambda / 2.0,
                    1,
                    PhaseCodebook::table1(),
                )
                .expect("valid panel"),
            ),
            virtual_scatterers: true,
        }
    }
}

/// Where a path came from. Kept on synthesized observations for diagnostics
/// only; the estimation chain never reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    LineOfSight,
    Reflector(usize),
    Scatterer(usize),
    Surface,
    VirtualScatterer { scatterer: usize, reflector: usize },
}

impl PathKind {
    fn stream_label(&self) -> String {
        match self {
            PathKind::LineOfSight => "los".into(),
            PathKind::Reflector(r) => format!("wall{r}"),
            PathKind::Scatterer(s) => format!("scatter{s}"),
            PathKind::Surface => "surface".into(),
            PathKind::VirtualScatterer {
                scatterer,
                reflector,
            } => format!("vs{scatterer}-{reflector}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathObservation {
    pub kind: PathKind,
    /// Seconds.
    pub delay: f64,
    /// Radians in `(−π, π]`, world frame.
    pub aoa: f64,
    pub amplitude: Complex64,
}

impl PathObservation {
    pub fn range(&self) -> f64 {
        self.delay * SPEED_OF_LIGHT
    }
}

/// Noise-free paths seen by an agent whose receiver sits at `pose`.
/// `config` is required when the world has a panel.
pub fn synthesize_paths(
    world: &SlamWorld,
    pose: &Point,
    config: Option<&RisConfig>,
) -> Result<Vec<PathObservation>> {
    let lambda = world.lambda();
    let tx = pose + world.tx_offset;
    let rx = *pose;
    let c = SPEED_OF_LIGHT;
    let mut out = Vec::new();
    let d_los = world.tx_offset.norm();
    if d_los > 0.0 {
        out.push(PathObservation {
            kind: PathKind::LineOfSight,
            delay: d_los / c,
            aoa: bearing(&rx, &tx),
            amplitude: los_gain(d_los, 1.0, 1.0, lambda)?,
        });
    }
    for (i, r) in world.reflectors.iter().enumerate() {
        if !r.same_side(&tx, &rx) {
            continue;
        }
        let vt = mirror(&tx, r);
        let d = (vt - rx).norm();
        out.push(PathObservation {
            kind: PathKind::Reflector(i),
            delay: d / c,
            aoa: bearing(&rx, &vt),
            amplitude: los_gain(d, 1.0, 1.0, lambda)? * r.coefficient,
        });
    }
    let gamma = |s: &Scatterer| Complex64::new(s.reflectivity, 0.0);
    for (i, s) in world.scatterers.iter().enumerate() {
        let (dt, dr) = ((tx - s.position).norm(), (s.position - rx).norm());
        out.push(PathObservation {
            kind: PathKind::Scatterer(i),
            delay: (dt + dr) / c,
            aoa: bearing(&rx, &s.position),
            amplitude: ris_path_gain(dt, dr, gamma(s), 1.0, 1.0, lambda)?,
        });
    }
    match (&world.panel, config) {
        (Some(panel), Some(cfg)) => {
            let center = panel.center();
            let gains = panel.group_gains(&tx, &rx, lambda)?;
            out.push(PathObservation {
                kind: PathKind::Surface,
                delay: ((tx - center).norm() + (center - rx).norm()) / c,
                aoa: bearing(&rx, &center),
                amplitude: panel.combine(&gains, cfg)?,
            });
        }
        (Some(_), None) => {
            return Err(Error::invalid(
                "world has a panel but no configuration was given",
            ))
        }
        (None, Some(_)) => {
            return Err(Error::invalid(
                "configuration given for a world without a panel",
            ))
        }
        (None, None) => {}
    }
    if world.virtual_scatterers {
        for (i, s) in world.scatterers.iter().enumerate() {
            for (j, r) in world.reflectors.iter().enumerate() {
                if !r.same_side(&s.position, &rx) {
                    continue;
                }
                let image = mirror(&s.position, r);
                let (dt, dr) = ((tx - s.position).norm(), (image - rx).norm());
                out.push(PathObservation {
                    kind: PathKind::VirtualScatterer {
                        scatterer: i,
                        reflector: j,
                    },
                    delay: (dt + dr) / c,
                    aoa: bearing(&rx, &image),
                    amplitude: ris_path_gain(dt, dr, gamma(s), 1.0, 1.0, lambda)? * r.coefficient,
                });
            }
        }
    }
    Ok(out)
}

/// Path estimation errors that shrink as the path gets stronger: standard
/// deviations scale with `reference_amplitude / |a|`, capped above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathNoise {
    /// Range (delay times c) error in metres at the reference amplitude.
    pub range_std: f64,
    /// Angle error in radians at the reference amplitude.
    pub aoa_std: f64,
    pub reference_amplitude: f64,
    /// Standard deviation of the complex amplitude error.
    pub amplitude_std: f64,
    pub max_range_std: f64,
    pub max_aoa_std: f64,
}

impl Default for PathNoise {
    fn default() -> Self {
        PathNoise {
            range_std: 0.05,
            aoa_std: 0.02,
            reference_amplitude: 1e-3,
            amplitude_std: 2e-5,
            max_range_std: 2.0,
            max_aoa_std: 0.5,
        }
    }
}

impl PathNoise {
    pub fn noiseless() -> Self {
        PathNoise {
            range_std: 0.0,
            aoa_std: 0.0,
            amplitude_std: 0.0,
            ..PathNoise::default()
        }
    }

    /// (range std, angle std) for a path of magnitude `amplitude`.
    pub fn stds(&self, amplitude: f64) -> (f64, f64) {
        let scale = if amplitude > 0.0 {
            self.reference_amplitude / amplitude
        } else {
            f64::INFINITY
        };
        let pick = |base: f64, cap: f64| {
            if base == 0.0 {
                0.0
            } else {
                (base * scale).min(cap)
            }
        };
        (
            pick(self.range_std, self.max_range_std),
            pick(self.aoa_std, self.max_aoa_std),
        )
    }
}

/// Perturb paths with estimation noise. Each path kind draws from its own
/// stream under `cycle_seed`, so runs that differ in which paths exist
/// still see the same errors on the paths they share.
pub fn observe(
    paths: &[PathObservation],
    noise: &PathNoise,
    cycle_seed: SeedPath,
) -> Vec<PathObservation> {
    paths
        .iter()
        .map(|p| {
            let mut rng = cycle_seed.label(&p.kind.stream_label()).rng();
            let (sr, sa) = noise.stds(p.amplitude.norm());
            let zr: f64 = StandardNormal.sample(&mut rng);
            let za: f64 = StandardNormal.sample(&mut rng);
            let amp = p.amplitude + complex_gaussian(noise.amplitude_std.powi(2), &mut rng);
            PathObservation {
                kind: p.kind,
                delay: ((p.range() + sr * zr) / SPEED_OF_LIGHT).max(0.0),
                aoa: wrap_angle(p.aoa + sa * za),
                amplitude: amp,
            }
        })
        .collect()
}

/// Gradient with respect to the agent position of the delay of a
/// single-bounce path through `landmark`, in seconds per metre.
pub fn delay_gradient(pose: &Point, landmark: &Point, tx_offset: &Point) -> Result<Point> {
    let a = pose + tx_offset - landmark;
    let b = pose - landmark;
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::DegenerateGeometry(
            "landmark coincides with the agent".into(),
        ));
    }
    Ok((a / na + b / nb) / SPEED_OF_LIGHT)
}

/// Gradient with respect to the agent position of the bearing to `landmark`.
pub fn aoa_gradient(pose: &Point, landmark: &Point) -> Result<Point> {
    let d = landmark - pose;
    let r2 = d.norm_squared();
    if !(r2 > 0.0) {
        return Err(Error::DegenerateGeometry(
            "landmark coincides with the agent".into(),
        ));
    }
    Ok(Point::new(d.y, -d.x) / r2)
}

/// One path's contribution to the pose information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathInfo {
    pub delay_gradient: Point,
    pub aoa_gradient: Point,
    /// Inverse delay variance, s⁻².
    pub delay_weight: f64,
    /// Inverse angle variance, rad⁻².
    pub aoa_weight: f64,
}

impl PathInfo {
    /// Information from a single-bounce path through `landmark` with the given
    /// range and angle error standard deviations. A zero std is treated as
    /// [`MIN_STD`] so that noiseless paths stay finite.
    pub fn single_bounce(
        pose: &Point,
        landmark: &Point,
        tx_offset: &Point,
        range_std: f64,
        aoa_std: f64,
    ) -> Result<Self> {
        let delay_std = range_std.max(MIN_STD) / SPEED_OF_LIGHT;
        Ok(PathInfo {
            delay_gradient: delay_gradient(pose, landmark, tx_offset)?,
            aoa_gradient: aoa_gradient(pose, landmark)?,
            delay_weight: delay_std.powi(-2),
            aoa_weight: aoa_std.max(MIN_STD).powi(-2),
        })
    }
}

/// Fisher information on the agent position:
/// `Σ w_τ ∇τ∇τᵀ + w_θ ∇θ∇θᵀ`.
pub fn fisher_information(paths: &[PathInfo]) -> Matrix2<f64> {
    paths.iter().fold(Matrix2::zeros(), |acc, p| {
        acc + p.delay_gradient * p.delay_gradient.transpose() * p.delay_weight
            + p.aoa_gradient * p.aoa_gradient.transpose() * p.aoa_weight
    })
}

/// Trace of the inverse information, the position error bound in m².
pub fn position_crlb(info: &Matrix2<f64>) -> Result<f64> {
    let det = info.determinant();
    let tr = info.trace();
    if !(det > 1e-12 * tr * tr) || !det.is_finite() {
        return Err(Error::UnlocalizablePose(format!(
            "information matrix is singular (det {det:.3e}, trace {tr:.3e})"
        )));
    }
    Ok(tr / det)
}

/// Error bound on the pose as a function of the surface configuration, at a
/// fixed pose estimate. Information from the other landmarks is folded into
/// `base`.
pub struct CrlbObjective<'a> {
    pub panel: &'a SlamPanel,
    pub base: Matrix2<f64>,
    pub noise: &'a PathNoise,
    group_gains: Vec<Complex64>,
    delay_gradient: Point,
    aoa_gradient: Point,
}

impl<'a> CrlbObjective<'a> {
    pub fn new(
        world: &'a SlamWorld,
        pose: &Point,
        base: Matrix2<f64>,
        noise: &'a PathNoise,
    ) -> Result<Self> {
        let panel = world
            .panel
            .as_ref()
            .ok_or_else(|| Error::invalid("configuration selection needs a panel"))?;
        let center = panel.center();
        Ok(CrlbObjective {
            panel,
            base,
            noise,
            group_gains: panel.group_gains(&(pose + world.tx_offset), pose, world.lambda())?,
            delay_gradient: delay_gradient(pose, &center, &world.tx_offset)?,
            aoa_gradient: aoa_gradient(pose, &center)?,
        })
    }

    pub fn surface_amplitude(&self, config: &RisConfig) -> Result<f64> {
        Ok(self.panel.combine(&self.group_gains, config)?.norm())
    }

    /// Infinite when the pose is unidentifiable under `config`.
    pub fn loss(&self, config: &RisConfig) -> f64 {
        let Ok(amp) = self.surface_amplitude(config) else {
            return f64::INFINITY;
        };
        let (sr, sa) = self.noise.stds(amp);
        let info = PathInfo {
            delay_gradient: self.delay_gradient,
            aoa_gradient: self.aoa_gradient,
            delay_weight: (sr.max(MIN_STD) / SPEED_OF_LIGHT).powi(-2),
            aoa_weight: sa.max(MIN_STD).powi(-2),
        };
        position_crlb(&(self.base + fisher_information(&[info]))).unwrap_or(f64::INFINITY)
    }
}

/// Configuration with the lowest pose error bound found by multi-start
/// first-improvement neighbour descent.
pub fn select_config_crlb<R: Rng + ?Sized>(
    objective: &CrlbObjective<'_>,
    budget: usize,
    rng: &mut R,
) -> Result<ConfigSearch> {
    neighbor_descent_with(
        Descent::FirstImprovement,
        objective.panel.group_count(),
        objective.panel.codebook().len(),
        |c| objective.loss(c),
        budget,
        rng,
    )
}

/// Single-linkage clusters of paths whose angles of arrival chain together
/// within `threshold` radians, with wrap-around at ±π. Groups are listed in
/// increasing angle.
pub fn group_paths(paths: &[PathObservation], threshold: f64) -> Result<Vec<Vec<usize>>> {
    if !(threshold > 0.0) {
        return Err(Error::invalid("grouping threshold must be positive"));
    }
    if paths.is_empty() {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..paths.len()).collect();
    order.sort_by(|&a, &b| paths[a].aoa.total_cmp(&paths[b].aoa));
    let n = order.len();
    let gap = |i: usize| {
        let (a, b) = (paths[order[i]].aoa, paths[order[(i + 1) % n]].aoa);
        if i + 1 == n {
            b + TAU - a
        } else {
            b - a
        }
    };
    // Start right after a break so that no cluster straddles the seam.
    let Some(brk) = (0..n).rev().find(|&i| gap(i) > threshold) else {
        return Ok(vec![order]);
    };
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    for k in 1..=n {
        let i = (brk + k) % n;
        current.push(order[i]);
        if gap(i) > threshold {
            groups.push(std::mem::take(&mut current));
        }
    }
    groups.sort_by(|a, b| {
        let key = |g: &Vec<usize>| paths[g[0]].aoa;
        key(a).total_cmp(&key(b))
    });
    Ok(groups)
}

/// Point that would explain a path as a single bounce, seen from `pose`.
/// `None` when no such point exists in front of the receiver (the direct
/// path, for one).
pub fn back_project(pose: &Point, range: f64, aoa: f64, tx_offset: &Point) -> Option<Point> {
    let u = Point::new(aoa.cos(), aoa.sin());
    let denom = 2.0 * (range - tx_offset.dot(&u));
    if !(denom > 1e-9) {
        return None;
    }
    let r = (range * range - tx_offset.norm_squared()) / denom;
    (r > 1e-6 && r.is_finite()).then(|| pose + u * r)
}

/// Probability that each discovered landmark is the surface.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkBelief(Vec<f64>);

impl LandmarkBelief {
    pub fn uniform(n: usize) -> Self {
        LandmarkBelief(vec![1.0 / n.max(1) as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> Option<usize> {
        (0..self.0.len()).max_by(|&a, &b| self.0[a].total_cmp(&self.0[b]))
    }

    /// Admit a newly discovered landmark with an equal share of the mass.
    pub fn push_landmark(&mut self) {
        let n = self.0.len() + 1;
        let share = 1.0 / n as f64;
        for p in &mut self.0 {
            *p *= 1.0 - share;
        }
        self.0.push(share);
    }

    /// Remove a landmark from consideration and renormalize.
    pub fn retire(&mut self, index: usize) {
        if let Some(p) = self.0.get_mut(index) {
            *p = 0.0;
        }
        let total: f64 = self.0.iter().sum();
        if total > 0.0 {
            for p in &mut self.0 {
                *p /= total;
            }
        }
    }
}

/// Bayes update of the surface-landmark belief from this cycle's path
/// magnitudes. Under "landmark i is the surface" its magnitude should match
/// `predicted` (what the current configuration would produce) while every
/// other landmark should match its own running mean. Magnitude errors are
/// Gaussian with std `sigma`.
pub fn ris_landmark_update(
    prior: &LandmarkBelief,
    observed: &[f64],
    predicted: f64,
    running_means: &[f64],
    sigma: f64,
) -> Result<LandmarkBelief> {
    if observed.len() != prior.len() || running_means.len() != prior.len() {
        return Err(Error::invalid(format!(
            "belief over {} landmarks got {} magnitudes and {} means",
            prior.len(),
            observed.len(),
            running_means.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("magnitude noise must be positive"));
    }
    let s2 = 2.0 * sigma * sigma;
    let logs: Vec<f64> = prior
        .0
        .iter()
        .zip(observed.iter().zip(running_means))
        .map(|(&p, (&a, &m))| p.ln() + ((a - m).powi(2) - (a - predicted).powi(2)) / s2)
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Unresolved("surface belief has no mass left".into()));
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(LandmarkBelief(w.into_iter().map(|x| x / total).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkEstimate {
    pub mean: Point,
    pub cov: Matrix2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub pose: Point,
    /// Pose at every cycle so far, oldest first, ending with `pose`.
    pub history: Vec<Point>,
    pub landmarks: Vec<Option<LandmarkEstimate>>,
    pub weight: f64,
}

/// A measured single-bounce path attributed to a static landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkObservation {
    pub landmark: usize,
    pub range: f64,
    pub aoa: f64,
    pub range_std: f64,
    pub aoa_std: f64,
}

impl LandmarkObservation {
    fn noise(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.range_std.max(MIN_STD).powi(2),
            0.0,
            0.0,
            self.aoa_std.max(MIN_STD).powi(2),
        )
    }
}

/// Predicted (range, bearing) of a landmark and the Jacobian with respect to
/// the landmark position. The Jacobian with respect to the pose is its
/// negative.
fn predict(
    pose: &Point,
    landmark: &Point,
    tx_offset: &Point,
) -> Option<(Vector2<f64>, Matrix2<f64>)> {
    let a = landmark - (pose + tx_offset);
    let b = landmark - pose;
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0 && nb > 0.0) {
        return None;
    }
    let grad_r = a / na + b / nb;
    let grad_t = Point::new(-b.y, b.x) / (nb * nb);
    let h = Vector2::new(na + nb, b.y.atan2(b.x));
    let jac = Matrix2::new(grad_r.x, grad_r.y, grad_t.x, grad_t.y);
    Some((h, jac))
}

fn ekf_init(pose: &Point, ob: &LandmarkObservation, tx_offset: &Point) -> Option<LandmarkEstimate> {
    let mean = back_project(pose, ob.range, ob.aoa, tx_offset)?;
    let (_, jac) = predict(pose, &mean, tx_offset)?;
    let inv = jac.try_inverse()?;
    Some(LandmarkEstimate {
        mean,
        cov: inv * ob.noise() * inv.transpose(),
    })
}

/// EKF correction of one landmark; returns the observation log-likelihood.
fn ekf_update(
    lm: &mut LandmarkEstimate,
    pose: &Point,
    ob: &LandmarkObservation,
    tx_offset: &Point,
) -> Option<f64> {
    let r = ob.noise();
    let (h, jac) = predict(pose, &lm.mean, tx_offset)?;
    let nu = Vector2::new(ob.range - h.x, wrap_angle(ob.aoa - h.y));
    let s = jac * lm.cov * jac.transpose() + r;
    let s_inv = s.try_inverse()?;
    let k = lm.cov * jac.transpose() * s_inv;
    lm.mean += k * nu;
    let ikh = Matrix2::identity() - k * jac;
    let cov = ikh * lm.cov * ikh.transpose() + k * r * k.transpose();
    lm.cov = (cov + cov.transpose()) * 0.5;
    Some(-0.5 * (nu.transpose() * s_inv * nu)[0] - 0.5 * s.determinant().ln() - TAU.ln())
}

/// Update or initialize a particle's landmark from one observation taken at
/// `pose`; returns the log-likelihood contribution.
fn absorb(
    landmarks: &mut Vec<Option<LandmarkEstimate>>,
    pose: &Point,
    ob: &LandmarkObservation,
    tx_offset: &Point,
) -> f64 {
    if landmarks.len() <= ob.landmark {
        landmarks.resize(ob.landmark + 1, None);
    }
    match &mut landmarks[ob.landmark] {
        Some(lm) => ekf_update(lm, pose, ob, tx_offset).unwrap_or(0.0),
        slot @ None => {
            *slot = ekf_init(pose, ob, tx_offset);
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    degenerate: bool,
}

impl ParticleSet {
    /// `count` equally weighted particles drawn around `pose` with isotropic
    /// standard deviation `spread`.
    pub fn new<R: Rng + ?Sized>(
        pose: Point,
        count: usize,
        spread: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("particle count must be positive"));
        }
        let w = 1.0 / count as f64;
        let particles = (0..count)
            .map(|_| {
                let dx: f64 = StandardNormal.sample(rng);
                let dy: f64 = StandardNormal.sample(rng);
                let start = pose + Point::new(dx, dy) * spread;
                Particle {
                    pose: start,
                    history: vec![start],
                    landmarks: Vec::new(),
                    weight: w,
                }
            })
            .collect();
        Ok(ParticleSet {
            particles,
            degenerate: false,
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    /// Whether the last update left every particle with zero weight.
    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn mean_pose(&self) -> Point {
        self.particles.iter().map(|p| p.pose * p.weight).sum()
    }

    pub fn pose_cov(&self) -> Matrix2<f64> {
        let m = self.mean_pose();
        self.particles
            .iter()
            .map(|p| (p.pose - m) * (p.pose - m).transpose() * p.weight)
            .sum()
    }

    pub fn effective_size(&self) -> f64 {
        1.0 / self
            .particles
            .iter()
            .map(|p| p.weight * p.weight)
            .sum::<f64>()
    }

    /// Weighted mean and covariance of a landmark over the particles that
    /// have mapped it.
    pub fn landmark_estimate(&self, index: usize) -> Option<LandmarkEstimate> {
        let mut acc = Point::zeros();
        let mut total = 0.0;
        for p in &self.particles {
            if let Some(Some(l)) = p.landmarks.get(index) {
                acc += l.mean * p.weight;
                total += p.weight;
            }
        }
        if !(total > 0.0) {
            return None;
        }
        let mean = acc / total;
        let mut cov = Matrix2::zeros();
        for p in &self.particles {
            if let Some(Some(l)) = p.landmarks.get(index) {
                let d = l.mean - mean;
                cov += (l.cov + d * d.transpose()) * (p.weight / total);
            }
        }
        Some(LandmarkEstimate { mean, cov })
    }

    pub fn landmark_mean(&self, index: usize) -> Option<Point> {
        self.landmark_estimate(index).map(|l| l.mean)
    }

    /// Normalized innovation squared of `ob` against the mean map, with the
    /// pose shifted by `shift` and its covariance inflated by `extra_var`·I.
    /// `None` if the landmark is unmapped.
    pub fn innovation_nis(
        &self,
        ob: &LandmarkObservation,
        shift: &Point,
        extra_var: f64,
        tx_offset: &Point,
    ) -> Option<f64> {
        let lm = self.landmark_estimate(ob.landmark)?;
        let pose = self.mean_pose() + shift;
        let (h, jac) = predict(&pose, &lm.mean, tx_offset)?;
        let nu = Vector2::new(ob.range - h.x, wrap_angle(ob.aoa - h.y));
        let p = lm.cov + self.pose_cov() + Matrix2::identity() * extra_var;
        let s = jac * p * jac.transpose() + ob.noise();
        Some((nu.transpose() * s.try_inverse()? * nu)[0])
    }

    /// Map a landmark from sightings taken at earlier cycles. Each particle
    /// initializes it from its own pose at the first sighting and folds in
    /// the rest, reweighting by their likelihood.
    pub fn initialize_landmark(
        &mut self,
        sightings: &[(usize, LandmarkObservation)],
        tx_offset: &Point,
    ) -> Result<()> {
        let mut logw = Vec::with_capacity(self.particles.len());
        for p in &mut self.particles {
            let mut lw = p.weight.ln();
            for (cycle, ob) in sightings {
                let pose = *p
                    .history
                    .get(*cycle)
                    .ok_or_else(|| Error::invalid(format!("no pose recorded for cycle {cycle}")))?;
                lw += absorb(&mut p.landmarks, &pose, ob, tx_offset);
            }
            logw.push(lw);
        }
        self.set_log_weights(&logw);
        Ok(())
    }

    fn set_log_weights(&mut self, logw: &[f64]) {
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.degenerate = !top.is_finite();
        if self.degenerate {
            let u = 1.0 / self.particles.len() as f64;
            for p in &mut self.particles {
                p.weight = u;
            }
            return;
        }
        let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        for (p, wi) in self.particles.iter_mut().zip(w) {
            p.weight = wi / total;
        }
    }

    /// Systematic resampling.
    fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let n = self.particles.len();
        let step = 1.0 / n as f64;
        let mut u = rng.random::<f64>() * step;
        let mut cum = self.particles[0].weight;
        let mut i = 0;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            while u > cum && i + 1 < n {
                i += 1;
                cum += self.particles[i].weight;
            }
            let mut p = self.particles[i].clone();
            p.weight = step;
            out.push(p);
            u += step;
        }
        self.particles = out;
    }
}

/// One filter cycle: move every particle by the odometry plus motion noise,
/// then update or initialize each observed landmark's EKF and reweight.
/// Resamples when the effective size drops below half the particle count.
/// If every weight vanishes they are reset to uniform and the set is
/// flagged degenerate.
pub fn pf_step<R: Rng + ?Sized>(
    set: &mut ParticleSet,
    odometry: &Point,
    motion_std: f64,
    observations: &[LandmarkObservation],
    tx_offset: &Point,
    rng: &mut R,
) -> Result<()> {
    if !(motion_std >= 0.0) {
        return Err(Error::invalid("motion noise must be nonnegative"));
    }
    let mut logw = Vec::with_capacity(set.particles.len());
    for p in &mut set.particles {
        let dx: f64 = StandardNormal.sample(rng);
        let dy: f64 = StandardNormal.sample(rng);
        p.pose += odometry + Point::new(dx, dy) * motion_std;
        p.history.push(p.pose);
        let mut lw = p.weight.ln();
        for ob in observations {
            lw += absorb(&mut p.landmarks, &p.pose, ob, tx_offset);
        }
        logw.push(lw);
    }
    set.set_log_weights(&logw);
    if set.effective_size() < set.particles.len() as f64 / 2.0 {
        set.resample(rng);
    }
    Ok(())
}

/// How the surface is driven during a SLAM run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlamScheme {
    /// Minimize the pose error bound at the predicted pose.
    Proposed,
    /// A fresh random configuration every cycle.
    RandomConfig,
    /// The surface is absent.
    NoRis,
}

impl SlamScheme {
    pub const ALL: [SlamScheme; 3] = [
        SlamScheme::Proposed,
        SlamScheme::RandomConfig,
        SlamScheme::NoRis,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SlamScheme::Proposed => "proposed",
            SlamScheme::RandomConfig => "random_config",
            SlamScheme::NoRis => "no_ris",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown SLAM scheme '{s}' (expected proposed, random_config or no_ris)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamOptions {
    pub particles: usize,
    /// Odometry error std per axis per step, metres.
    pub motion_std: f64,
    pub noise: PathNoise,
    /// Angle threshold for merging paths into one group, radians.
    pub group_threshold: f64,
    /// Paths weaker than this are not used for mapping.
    pub min_magnitude: f64,
    /// Maximum jump of a back-projected point between sightings.
    pub association_gate: f64,
    /// A track is static once `static_sightings` recent back-projections lie
    /// within `static_spread` of each other.
    pub static_spread: f64,
    pub static_sightings: usize,
    /// Cycles a track may go unseen before it is dropped.
    pub track_window: usize,
    /// Demote a static landmark when a sighting's normalized innovation
    /// exceeds this.
    pub consistency_nis: f64,
    pub max_landmarks: usize,
    /// Configuration search budget per cycle.
    pub budget: usize,
}

impl Default for SlamOptions {
    fn default() -> Self {
        SlamOptions {
            particles: 500,
            motion_std: 0.05,
            noise: PathNoise::default(),
            group_threshold: 0.03,
            min_magnitude: 3e-4,
            association_gate: 0.4,
            static_spread: 0.3,
            static_sightings: 3,
            track_window: 6,
            consistency_nis: 25.0,
            max_landmarks: 10,
            budget: 400,
        }
    }
}

impl SlamOptions {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::invalid("particle count must be positive"));
        }
        if self.static_sightings < 2 {
            return Err(Error::invalid(
                "a static landmark needs at least two sightings",
            ));
        }
        for (name, v) in [
            ("group_threshold", self.group_threshold),
            ("association_gate", self.association_gate),
            ("static_spread", self.static_spread),
            ("consistency_nis", self.consistency_nis),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.motion_std >= 0.0) || !(self.min_magnitude >= 0.0) {
            return Err(Error::invalid(
                "motion noise and minimum magnitude must be nonnegative",
            ));
        }
        if self.budget == 0 || self.track_window == 0 {
            return Err(Error::invalid(
                "search budget and track window must be positive",
            ));
        }
        Ok(())
    }
}

/// `cycles + 1` poses evenly spaced on a circle, starting at angle 0.
pub fn circle_trajectory(center: Point, radius: f64, cycles: usize) -> Vec<Point> {
    (0..=cycles)
        .map(|t| {
            let a = TAU * t as f64 / cycles.max(1) as f64;
            center + Point::new(a.cos(), a.sin()) * radius
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TrackState {
    Tentative,
    Static(usize),
    Moving,
}

#[derive(Debug, Clone)]
struct Sighting {
    cycle: usize,
    point: Point,
    observation: LandmarkObservation,
    magnitude: f64,
}

#[derive(Debug, Clone)]
struct Track {
    sightings: Vec<Sighting>,
    state: TrackState,
}

impl Track {
    fn last(&self) -> &Sighting {
        self.sightings.last().expect("tracks start with a sighting")
    }

    fn recent(&self, now: usize, window: usize) -> impl Iterator<Item = &Sighting> {
        self.sightings
            .iter()
            .filter(move |s| s.cycle + window > now)
    }
}

/// Per-cycle outputs of a SLAM run.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamTrace {
    /// Position error of the weighted-mean pose after each cycle.
    pub errors: Vec<f64>,
    /// Root mean square of the errors up to and including each cycle.
    pub rmse: Vec<f64>,
    /// Belief mass on landmarks mapped within the association gate of the
    /// surface, 0 when none is.
    pub surface_belief: Vec<f64>,
    /// Static landmarks in use after each cycle.
    pub landmarks: Vec<usize>,
    /// Final mean map.
    pub map: Vec<Point>,
}

/// Run the agent along `trajectory` (the first pose is the known start).
pub fn slam_run(
    world: &SlamWorld,
    trajectory: &[Point],
    scheme: SlamScheme,
    opts: &SlamOptions,
    seed: SeedPath,
) -> Result<SlamTrace> {
    opts.validate()?;
    if trajectory.len() < 2 {
        return Err(Error::invalid("trajectory needs at least two poses"));
    }
    let mut world = world.clone();
    if scheme == SlamScheme::NoRis {
        world.panel = None;
    } else if world.panel.is_none() {
        return Err(Error::invalid(format!(
            "scheme {} needs a panel",
            scheme.name()
        )));
    }
    let off = world.tx_offset;
    let mut odo_rng = seed.label("odometry").rng();
    let mut pf_rng = seed.label("filter").rng();
    let mut scheme_rng = seed.label(scheme.name()).rng();
    let mut set = ParticleSet::new(trajectory[0], opts.particles, 0.0, &mut pf_rng)?;
    let mut tracks: Vec<Track> = Vec::new();
    // landmark index -> track index
    let mut mapped: Vec<usize> = Vec::new();
    let mut belief = LandmarkBelief(Vec::new());
    let mut trace = SlamTrace {
        errors: Vec::new(),
        rmse: Vec::new(),
        surface_belief: Vec::new(),
        landmarks: Vec::new(),
        map: Vec::new(),
    };
    let is_active =
        |tracks: &[Track], idx: usize, ti: usize| tracks[ti].state == TrackState::Static(idx);
    let mut sq_sum = 0.0;

    // Cycle 0 only looks around from the known start; the filter moves from cycle 1 on.
    for t in 0..trajectory.len() {
        let truth = trajectory[t];
        let odometry = if t == 0 {
            Point::zeros()
        } else {
            let ox: f64 = StandardNormal.sample(&mut odo_rng);
            let oy: f64 = StandardNormal.sample(&mut odo_rng);
            truth - trajectory[t - 1] + Point::new(ox, oy) * opts.motion_std
        };
        let predicted = set.mean_pose() + odometry;

        let config = match scheme {
            SlamScheme::NoRis => None,
            SlamScheme::RandomConfig => {
                Some(world.panel.as_ref().unwrap().random_config(&mut scheme_rng))
            }
            SlamScheme::Proposed => {
                let surface = belief.argmax().filter(|&i| belief.probs()[i] > 0.5);
                let mut infos = Vec::new();
                for (idx, &ti) in mapped.iter().enumerate() {
                    if Some(idx) == surface || !is_active(&tracks, idx, ti) {
                        continue;
                    }
                    let Some(pos) = set.landmark_mean(idx) else {
                        continue;
                    };
                    let (sr, sa) = opts.noise.stds(tracks[ti].last().magnitude);
                    if let Ok(info) = PathInfo::single_bounce(&predicted, &pos, &off, sr, sa) {
                        infos.push(info);
                    }
                }
                let objective = CrlbObjective::new(
                    &world,
                    &predicted,
                    fisher_information(&infos),
                    &opts.noise,
                )?;
                Some(select_config_crlb(&objective, opts.budget, &mut scheme_rng)?.config)
            }
        };

        let paths = synthesize_paths(&world, &truth, config.as_ref())?;
        let obs = observe(&paths, &opts.noise, seed.label("paths").index(t as u64));
        let groups = group_paths(&obs, opts.group_threshold)?;
        let reps: Vec<(PathObservation, Point)> = groups
            .iter()
            .filter_map(|g| {
                let best = g
                    .iter()
                    .map(|&i| obs[i])
                    .max_by(|a, b| a.amplitude.norm().total_cmp(&b.amplitude.norm()))?;
                if best.amplitude.norm() < opts.min_magnitude {
                    return None;
                }
                back_project(&predicted, best.range(), best.aoa, &off).map(|p| (best, p))
            })
            .collect();

        // Greedy nearest association of back-projections to live tracks.
        let live: Vec<usize> = (0..tracks.len())
            .filter(|&i| {
                tracks[i].state != TrackState::Moving
                    && tracks[i].last().cycle + opts.track_window > t
            })
            .collect();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ri, (_, bp)) in reps.iter().enumerate() {
            for &ti in &live {
                let d = (tracks[ti].last().point - bp).norm();
                if d <= opts.association_gate {
                    pairs.push((d, ri, ti));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut rep_track: Vec<Option<usize>> = vec![None; reps.len()];
        let mut taken = vec![false; tracks.len()];
        for (_, ri, ti) in pairs {
            if rep_track[ri].is_none() && !taken[ti] {
                rep_track[ri] = Some(ti);
                taken[ti] = true;
            }
        }

        let motion_var = opts.motion_std * opts.motion_std;
        let mut observations = Vec::new();
        let mut magnitudes_now: Vec<Option<f64>> = vec![None; mapped.len()];
        for (ri, (ob, bp)) in reps.iter().enumerate() {
            let magnitude = ob.amplitude.norm();
            let (range_std, aoa_std) = opts.noise.stds(magnitude);
            let mut lo = LandmarkObservation {
                landmark: usize::MAX,
                range: ob.range(),
                aoa: ob.aoa,
                range_std,
                aoa_std,
            };
            let ti = rep_track[ri].unwrap_or_else(|| {
                tracks.push(Track {
                    sightings: Vec::new(),
                    state: TrackState::Tentative,
                });
                tracks.len() - 1
            });
            if tracks[ti].state == TrackState::Tentative && mapped.len() < opts.max_landmarks {
                let recent: Vec<Point> = tracks[ti]
                    .recent(t, opts.track_window)
                    .map(|s| s.point)
                    .chain(std::iter::once(*bp))
                    .collect();
                let spread = recent
                    .iter()
                    .flat_map(|a| recent.iter().map(move |b| (a - b).norm()))
                    .fold(0.0, f64::max);
                if recent.len() >= opts.static_sightings && spread <= opts.static_spread {
                    let idx = mapped.len();
                    tracks[ti].state = TrackState::Static(idx);
                    mapped.push(ti);
                    belief.push_landmark();
                    magnitudes_now.push(None);
                    let past: Vec<(usize, LandmarkObservation)> = tracks[ti]
                        .recent(t, opts.track_window)
                        .map(|s| {
                            (
                                s.cycle,
                                LandmarkObservation {
                                    landmark: idx,
                                    ..s.observation
                                },
                            )
                        })
                        .collect();
                    set.initialize_landmark(&past, &off)?;
                }
            }
            if let TrackState::Static(idx) = tracks[ti].state {
                lo.landmark = idx;
                let nis = set.innovation_nis(&lo, &odometry, motion_var, &off);
                if nis.is_some_and(|v| v > opts.consistency_nis) {
                    tracks[ti].state = TrackState::Moving;
                    belief.retire(idx);
                } else {
                    observations.push(lo);
                    magnitudes_now[idx] = Some(magnitude);
                }
            }
            tracks[ti].sightings.push(Sighting {
                cycle: t,
                point: *bp,
                observation: lo,
                magnitude,
            });
        }

        if t == 0 {
            continue;
        }
        pf_step(
            &mut set,
            &odometry,
            opts.motion_std,
            &observations,
            &off,
            &mut pf_rng,
        )?;

        if let (Some(panel), Some(cfg)) = (&world.panel, &config) {
            let est = set.mean_pose();
            let gains = panel.group_gains(&(est + off), &est, world.lambda())?;
            let predicted_mag = panel.combine(&gains, cfg)?.norm();
            let seen: Vec<usize> = (0..mapped.len())
                .filter(|&i| magnitudes_now[i].is_some() && tracks[mapped[i]].sightings.len() >= 2)
                .collect();
            let mass: f64 = seen.iter().map(|&i| belief.probs()[i]).sum();
            if mass > 0.0 {
                let sub = LandmarkBelief(seen.iter().map(|&i| belief.probs()[i] / mass).collect());
                let observed: Vec<f64> = seen.iter().map(|&i| magnitudes_now[i].unwrap()).collect();
                let means: Vec<f64> = seen
                    .iter()
                    .map(|&i| {
                        let s = &tracks[mapped[i]].sightings;
                        let past = &s[..s.len() - 1];
                        past.iter().map(|x| x.magnitude).sum::<f64>() / past.len() as f64
                    })
                    .collect();
                let sigma = opts
                    .noise
                    .amplitude_std
                    .max(1e-3 * opts.noise.reference_amplitude);
                let post = ris_landmark_update(&sub, &observed, predicted_mag, &means, sigma)?;
                for (k, &i) in seen.iter().enumerate() {
                    belief.0[i] = post.0[k] * mass;
                }
            }
        }

        let err = (set.mean_pose() - truth).norm();
        sq_sum += err * err;
        trace.errors.push(err);
        trace.rmse.push((sq_sum / t as f64).sqrt());
        let active: Vec<usize> = (0..mapped.len())
            .filter(|&i| is_active(&tracks, i, mapped[i]))
            .collect();
        let surface_mass = world.panel.as_ref().map_or(0.0, |panel| {
            let c = panel.center();
            active
                .iter()
                .filter(|&&i| {
                    set.landmark_mean(i)
                        .is_some_and(|m| (m - c).norm() < opts.association_gate)
                })
                .map(|&i| belief.probs()[i])
                .sum()
        });
        trace.surface_belief.push(surface_mass);
        trace.landmarks.push(active.len());
        if t + 1 == trajectory.len() {
            trace.map = active
                .iter()
                .filter_map(|&i| set.landmark_mean(i))
                .collect();
        }
    }
    Ok(trace)
}
