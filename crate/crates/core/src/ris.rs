//! Reconfigurable surface elements, panels and discrete phase codebooks.
//!
//! An element's complex response is `Γ·e^{−jθ}` where `(θ, Γ)` is one entry of
//! a finite codebook. Hybrid elements split incident power between a
//! reflected and a refracted branch with power ratio `β`.
//!
//! Elements are controlled in groups: every element of a group carries the
//! same codebook state, so a configuration is one state index per group.

use std::f64::consts::{FRAC_PI_4, PI, TAU};

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Amplitude/phase pair of one selectable element state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    phase: f64,
    amplitude: f64,
}

impl PhaseState {
    /// Phase is wrapped into `[0, 2π)`; amplitude must lie in `[0, 1]`.
    pub fn new(phase: f64, amplitude: f64) -> Result<Self> {
        if !phase.is_finite() {
            return Err(Error::invalid("phase must be finite"));
        }
        if !(0.0..=1.0).contains(&amplitude) {
            return Err(Error::invalid(format!(
                "amplitude {amplitude} outside [0, 1]"
            )));
        }
        let mut phase = phase.rem_euclid(TAU);
        if phase >= TAU {
            phase = 0.0;
        }
        Ok(PhaseState { phase, amplitude })
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// `Γ·e^{−jθ}`
    pub fn response(&self) -> Complex64 {
        Complex64::from_polar(self.amplitude, -self.phase)
    }
}

/// Ordered set of element states, addressed by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCodebook {
    states: Vec<PhaseState>,
}

impl PhaseCodebook {
    /// States must have pairwise distinct phases. A single-state codebook is
    /// accepted so that degenerate search spaces can be expressed.
    pub fn new(states: Vec<PhaseState>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("codebook needs at least one state"));
        }
        for (i, a) in states.iter().enumerate() {
            for b in &states[i + 1..] {
                if (a.phase - b.phase).abs() < 1e-12 {
                    return Err(Error::invalid("codebook phases must be distinct"));
                }
            }
        }
        Ok(PhaseCodebook { states })
    }

    /// `K` states with phases `2πk/K` and a common amplitude.
    pub fn uniform(k: usize, amplitude: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("codebook size must be positive"));
        }
        let states = (0..k)
            .map(|i| PhaseState::new(TAU * i as f64 / k as f64, amplitude))
            .collect::<Result<Vec<_>>>()?;
        Self::new(states)
    }

    /// The measured four-state element profile at 3.198 GHz (two of its
    /// states share a PIN pattern; they are kept apart by index).
    pub fn table1() -> Self {
        let raw = [
            (FRAC_PI_4, 0.97),
            (3.0 * FRAC_PI_4, 0.97),
            (5.0 * FRAC_PI_4, 0.92),
            (7.0 * FRAC_PI_4, 0.88),
        ];
        PhaseCodebook {
            states: raw
                .iter()
                .map(|&(phase, amplitude)| PhaseState { phase, amplitude })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[PhaseState] {
        &self.states
    }

    pub fn state(&self, index: usize) -> Option<&PhaseState> {
        self.states.get(index)
    }
}

/// Operating mode of the surface. `beta` is the reflected-to-refracted power
/// ratio; `f64::INFINITY` stands for a purely reflective split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RisType {
    Reflective,
    Refractive,
    Hybrid { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Reflect,
    Refract,
}

/// Complex response of one element in the given state for the requested branch.
pub fn element_response(
    state: &PhaseState,
    ris_type: RisType,
    branch: Branch,
) -> Result<Complex64> {
    let base = state.response();
    match (ris_type, branch) {
        (RisType::Reflective, Branch::Reflect) | (RisType::Refractive, Branch::Refract) => Ok(base),
        (RisType::Reflective, Branch::Refract) => {
            Err(Error::invalid("reflective element has no refract branch"))
        }
        (RisType::Refractive, Branch::Reflect) => {
            Err(Error::invalid("refractive element has no reflect branch"))
        }
        (RisType::Hybrid { beta }, branch) => {
            if beta.is_nan() || beta < 0.0 {
                return Err(Error::invalid(format!("hybrid beta {beta} must be >= 0")));
            }
            Ok(base * hybrid_split(beta, branch))
        }
    }
}

/// Amplitude factor of a hybrid split, using the limit forms at `β = ∞`.
pub fn hybrid_split(beta: f64, branch: Branch) -> f64 {
    if beta.is_infinite() {
        return match branch {
            Branch::Reflect => 1.0,
            Branch::Refract => 0.0,
        };
    }
    match branch {
        Branch::Reflect => (beta / (1.0 + beta)).sqrt(),
        Branch::Refract => (1.0 / (1.0 + beta)).sqrt(),
    }
}

/// One state index per element group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RisConfig(pub Vec<usize>);

impl RisConfig {
    /// Every group in state `index`.
    pub fn uniform(groups: usize, index: usize) -> Self {
        RisConfig(vec![index; groups])
    }

    pub fn random<R: Rng + ?Sized>(groups: usize, k: usize, rng: &mut R) -> Self {
        RisConfig((0..groups).map(|_| rng.random_range(0..k)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn states(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, groups: usize, k: usize) -> Result<()> {
        if self.0.len() != groups {
            return Err(Error::invalid(format!(
                "config has {} entries, panel has {groups} groups",
                self.0.len()
            )));
        }
        if let Some(bad) = self.0.iter().find(|&&s| s >= k) {
            return Err(Error::invalid(format!(
                "state index {bad} >= codebook size {k}"
            )));
        }
        Ok(())
    }
}

/// Iterator over all configurations that differ from a base in exactly one group.
pub struct Neighbors<'a> {
    base: &'a RisConfig,
    k: usize,
    group: usize,
    offset: usize,
}

impl Iterator for Neighbors<'_> {
    type Item = RisConfig;

    fn next(&mut self) -> Option<RisConfig> {
        if self.k < 2 {
            return None;
        }
        while self.group < self.base.len() {
            if self.offset < self.k - 1 {
                self.offset += 1;
                let mut next = self.base.clone();
                next.0[self.group] = (self.base.0[self.group] + self.offset) % self.k;
                return Some(next);
            }
            self.group += 1;
            self.offset = 0;
        }
        None
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let total = self.base.len() * self.k.saturating_sub(1);
        let done = self.group * self.k.saturating_sub(1) + self.offset;
        let left = total.saturating_sub(done);
        (left, Some(left))
    }
}

/// All single-group moves from `config`: `groups × (K − 1)` of them.
pub fn neighbor_configs<'a>(config: &'a RisConfig, codebook: &PhaseCodebook) -> Neighbors<'a> {
    Neighbors {
        base: config,
        k: codebook.len(),
        group: 0,
        offset: 0,
    }
}

/// Outcome of a configuration search.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSearch {
    pub config: RisConfig,
    pub loss: f64,
    pub initial_loss: f64,
    /// Loss of the search's current state after each step.
    pub path: Vec<f64>,
    pub evaluations: usize,
}

/// How a descent picks its next single-group move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Descent {
    /// Scan every neighbour, take the best.
    BestImprovement,
    /// Sweep groups cyclically and take the first move that helps.
    FirstImprovement,
}

/// Multi-start best-improvement neighbour descent over `groups` groups with
/// `states` phase states each, stopping after `budget` loss evaluations.
pub fn neighbor_descent<R, L>(
    groups: usize,
    states: usize,
    loss: L,
    budget: usize,
    rng: &mut R,
) -> Result<ConfigSearch>
where
    R: Rng + ?Sized,
    L: FnMut(&RisConfig) -> f64,
{
    neighbor_descent_with(Descent::BestImprovement, groups, states, loss, budget, rng)
}

/// Multi-start neighbour descent with a chosen move rule.
pub fn neighbor_descent_with<R, L>(
    rule: Descent,
    groups: usize,
    states: usize,
    mut loss: L,
    budget: usize,
    rng: &mut R,
) -> Result<ConfigSearch>
where
    R: Rng + ?Sized,
    L: FnMut(&RisConfig) -> f64,
{
    if budget == 0 {
        return Err(Error::invalid(
            "search budget must be at least one evaluation",
        ));
    }
    let codebook_k = states.max(1);
    let mut evals = 0;
    let mut best: Option<(RisConfig, f64)> = None;
    let mut initial_loss = f64::NAN;
    let mut path = Vec::new();
    'starts: while evals < budget {
        let mut current = RisConfig::random(groups, codebook_k, rng);
        let mut current_loss = loss(&current);
        evals += 1;
        if initial_loss.is_nan() {
            initial_loss = current_loss;
        }
        path.push(current_loss);
        if best.as_ref().is_none_or(|b| current_loss < b.1) {
            best = Some((current.clone(), current_loss));
        }
        if codebook_k < 2 || groups == 0 {
            break;
        }
        if rule == Descent::FirstImprovement {
            let moves = groups * (codebook_k - 1);
            let mut idle = 0;
            let mut pos = 0;
            while idle < moves {
                if evals >= budget {
                    break 'starts;
                }
                let (g, off) = (pos / (codebook_k - 1), pos % (codebook_k - 1) + 1);
                pos = (pos + 1) % moves;
                let mut cand = current.clone();
                cand.0[g] = (current.0[g] + off) % codebook_k;
                let v = loss(&cand);
                evals += 1;
                if v < current_loss {
                    current = cand;
                    current_loss = v;
                    path.push(v);
                    if v < best.as_ref().unwrap().1 {
                        best = Some((current.clone(), v));
                    }
                    idle = 0;
                } else {
                    idle += 1;
                }
            }
            continue;
        }
        loop {
            let mut step: Option<(RisConfig, f64)> = None;
            let mut exhausted = false;
            for cand in neighbors(&current, codebook_k) {
                if evals >= budget {
                    exhausted = true;
                    break;
                }
                let v = loss(&cand);
                evals += 1;
                if v < step.as_ref().map_or(current_loss, |s| s.1) {
                    step = Some((cand, v));
                }
            }
            match step {
                Some((c, v)) => {
                    current = c;
                    current_loss = v;
                    path.push(v);
                    if v < best.as_ref().unwrap().1 {
                        best = Some((current.clone(), v));
                    }
                }
                None if !exhausted => break,
                None => {}
            }
            if exhausted {
                break 'starts;
            }
        }
    }
    let (config, loss) = best.expect("at least one evaluation");
    Ok(ConfigSearch {
        config,
        loss,
        initial_loss,
        path,
        evaluations: evals,
    })
}

fn neighbors(config: &RisConfig, k: usize) -> Neighbors<'_> {
    Neighbors {
        base: config,
        k,
        group: 0,
        offset: 0,
    }
}

/// Plane holding the panel: a point on it and its unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelPlane {
    pub origin: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// A surface: element positions, group partition, mode and codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RisPanel {
    elements: Vec<Vector3<f64>>,
    groups: Vec<Vec<usize>>,
    ris_type: RisType,
    branch: Branch,
    plane: PanelPlane,
    codebook: PhaseCodebook,
}

impl RisPanel {
    pub fn new(
        elements: Vec<Vector3<f64>>,
        groups: Vec<Vec<usize>>,
        ris_type: RisType,
        plane: PanelPlane,
        codebook: PhaseCodebook,
    ) -> Result<Self> {
        let m = elements.len();
        if m == 0 {
            return Err(Error::invalid("panel needs at least one element"));
        }
        let mut seen = vec![false; m];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::invalid("empty element group"));
            }
            for &e in g {
                if e >= m || seen[e] {
                    return Err(Error::invalid("groups must partition the element indices"));
                }
                seen[e] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("groups must cover every element"));
        }
        let n = plane.normal.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::invalid("panel normal must be nonzero"));
        }
        let plane = PanelPlane {
            origin: plane.origin,
            normal: plane.normal / n,
        };
        let scale = elements
            .iter()
            .map(|p| (p - plane.origin).norm())
            .fold(1.0_f64, f64::max);
        if elements
            .iter()
            .any(|p| (p - plane.origin).dot(&plane.normal).abs() > 1e-9 * scale)
        {
            return Err(Error::invalid(
                "element positions must lie in the panel plane",
            ));
        }
        let branch = match ris_type {
            RisType::Refractive => Branch::Refract,
            _ => Branch::Reflect,
        };
        Ok(RisPanel {
            elements,
            groups,
            ris_type,
            branch,
            plane,
            codebook,
        })
    }

    /// Rectangular panel centred at `center`, spanned by unit directions `u`
    /// and `v`, with `rows × cols` elements at pitch `spacing`. Groups are
    /// square tiles of `group_rows × group_cols` elements.
    #[allow(clippy::too_many_arguments)]
    pub fn grid(
        center: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        rows: usize,
        cols: usize,
        spacing: f64,
        group_rows: usize,
        group_cols: usize,
        ris_type: RisType,
        codebook: PhaseCodebook,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || group_rows == 0 || group_cols == 0 {
            return Err(Error::invalid("panel dimensions must be positive"));
        }
        if rows % group_rows != 0 || cols % group_cols != 0 {
            return Err(Error::invalid("group tiles must divide the panel evenly"));
        }
        if !(spacing > 0.0) {
            return Err(Error::invalid("element spacing must be positive"));
        }
        let u = u.normalize();
        let v = v.normalize();
        if u.dot(&v).abs() > 1e-9 {
            return Err(Error::invalid("panel axes must be orthogonal"));
        }
        let mut elements = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let du = (c as f64 - (cols as f64 - 1.0) / 2.0) * spacing;
                let dv = (r as f64 - (rows as f64 - 1.0) / 2.0) * spacing;
                elements.push(center + u * du + v * dv);
            }
        }
        let tiles_c = cols / group_cols;
        let tiles_r = rows / group_rows;
        let mut groups = vec![Vec::with_capacity(group_rows * group_cols); tiles_r * tiles_c];
        for r in 0..rows {
            for c in 0..cols {
                groups[(r / group_rows) * tiles_c + c / group_cols].push(r * cols + c);
            }
        }
        let plane = PanelPlane {
            origin: center,
            normal: u.cross(&v),
        };
        Self::new(elements, groups, ris_type, plane, codebook)
    }

    pub fn elements(&self) -> &[Vector3<f64>] {
        &self.elements
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn ris_type(&self) -> RisType {
        self.ris_type
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// Select which hybrid branch feeds the channel. Pure types accept only
    /// their own branch.
    pub fn with_branch(mut self, branch: Branch) -> Result<Self> {
        let probe = PhaseState {
            phase: 0.0,
            amplitude: 1.0,
        };
        element_response(&probe, self.ris_type, branch)?;
        self.branch = branch;
        Ok(self)
    }

    pub fn plane(&self) -> &PanelPlane {
        &self.plane
    }

    pub fn codebook(&self) -> &PhaseCodebook {
        &self.codebook
    }

    pub fn center(&self) -> Vector3<f64> {
        self.elements.iter().sum::<Vector3<f64>>() / self.elements.len() as f64
    }

    /// Group index owning each element.
    pub fn element_groups(&self) -> Vec<usize> {
        let mut owner = vec![0; self.elements.len()];
        for (g, members) in self.groups.iter().enumerate() {
            for &e in members {
                owner[e] = g;
            }
        }
        owner
    }

    /// Response of a codebook state on this panel's active branch.
    pub fn state_response(&self, index: usize) -> Result<Complex64> {
        let state = self
            .codebook
            .state(index)
            .ok_or_else(|| Error::invalid(format!("state index {index} out of range")))?;
        element_response(state, self.ris_type, self.branch)
    }

    /// Responses of all codebook states, indexed by state.
    pub fn state_responses(&self) -> Vec<Complex64> {
        (0..self.codebook.len())
            .map(|k| {
                self.state_response(k)
                    .expect("branch validated at construction")
            })
            .collect()
    }

    /// Per-group responses for `config`.
    pub fn group_responses(&self, config: &RisConfig) -> Result<Vec<Complex64>> {
        config.validate(self.group_count(), self.codebook.len())?;
        let table = self.state_responses();
        Ok(config.0.iter().map(|&s| table[s]).collect())
    }

    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> RisConfig {
        RisConfig::random(self.group_count(), self.codebook.len(), rng)
    }

    pub fn default_config(&self) -> RisConfig {
        RisConfig::uniform(self.group_count(), 0)
    }
}

/// Per-element complex responses for `config` (length M).
pub fn expand_config(panel: &RisPanel, config: &RisConfig) -> Result<Vec<Complex64>> {
    let per_group = panel.group_responses(config)?;
    let mut out = vec![Complex64::new(0.0, 0.0); panel.element_count()];
    for (g, members) in panel.groups().iter().enumerate() {
        for &e in members {
            out[e] = per_group[g];
        }
    }
    Ok(out)
}

/// Nearest codebook index to a desired phase (used for phase alignment).
pub fn nearest_state(codebook: &PhaseCodebook, phase: f64) -> usize {
    let target = phase.rem_euclid(TAU);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, s) in codebook.states().iter().enumerate() {
        let mut d = (s.phase() - target).abs();
        if d > PI {
            d = TAU - d;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small_panel(groups: Vec<Vec<usize>>, m: usize) -> RisPanel {
        let elements = (0..m)
            .map(|i| Vector3::new(i as f64 * 0.01, 0.0, 0.0))
            .collect();
        let plane = PanelPlane {
            origin: Vector3::zeros(),
            normal: Vector3::z(),
        };
        RisPanel::new(
            elements,
            groups,
            RisType::Reflective,
            plane,
            PhaseCodebook::table1(),
        )
        .unwrap()
    }

    #[test]
    fn identity_response() {
        let s = PhaseState::new(0.0, 1.0).unwrap();
        let r = element_response(&s, RisType::Reflective, Branch::Reflect).unwrap();
        assert_abs_diff_eq!(r.re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn table1_state_one_response() {
        let book = PhaseCodebook::table1();
        let r = element_response(&book.states()[0], RisType::Reflective, Branch::Reflect).unwrap();
        let expected = Complex64::from_polar(0.97, -FRAC_PI_4);
        assert_abs_diff_eq!((r - expected).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn table1_contents() {
        let book = PhaseCodebook::table1();
        assert_eq!(book.len(), 4);
        assert_eq!(book.states()[0].phase(), FRAC_PI_4);
        assert_eq!(book.states()[0].amplitude(), 0.97);
        assert_eq!(book.states()[3].phase(), 7.0 * FRAC_PI_4);
        assert_eq!(book.states()[3].amplitude(), 0.88);
    }

    #[test]
    fn hybrid_equal_split() {
        let s = PhaseState::new(0.3, 1.0).unwrap();
        let r = element_response(&s, RisType::Hybrid { beta: 1.0 }, Branch::Reflect).unwrap();
        assert_abs_diff_eq!(r.norm(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn pure_types_reject_foreign_branch() {
        let s = PhaseState::new(0.0, 1.0).unwrap();
        assert!(element_response(&s, RisType::Reflective, Branch::Refract).is_err());
        assert!(element_response(&s, RisType::Refractive, Branch::Reflect).is_err());
        assert!(element_response(&s, RisType::Hybrid { beta: -1.0 }, Branch::Reflect).is_err());
    }

    #[test]
    fn hybrid_limits() {
        let s = PhaseState::new(1.1, 0.9).unwrap();
        let inf = RisType::Hybrid {
            beta: f64::INFINITY,
        };
        let refl = element_response(&s, inf, Branch::Reflect).unwrap();
        let refr = element_response(&s, inf, Branch::Refract).unwrap();
        assert_eq!(refl, s.response());
        assert_eq!(refr.norm(), 0.0);
        let zero = RisType::Hybrid { beta: 0.0 };
        assert_eq!(
            element_response(&s, zero, Branch::Refract).unwrap(),
            s.response()
        );
        assert_eq!(
            element_response(&s, zero, Branch::Reflect).unwrap().norm(),
            0.0
        );
        let big = RisType::Hybrid { beta: 1e12 };
        let r = element_response(&s, big, Branch::Reflect).unwrap();
        assert!((r - s.response()).norm() < 1e-9);
    }

    #[test]
    fn codebook_validation() {
        assert!(PhaseCodebook::uniform(0, 1.0).is_err());
        let dup = vec![
            PhaseState::new(0.1, 1.0).unwrap(),
            PhaseState::new(0.1, 0.5).unwrap(),
        ];
        assert!(PhaseCodebook::new(dup).is_err());
        let u = PhaseCodebook::uniform(4, 1.0).unwrap();
        let phases: Vec<f64> = u.states().iter().map(|s| s.phase()).collect();
        assert_eq!(phases, vec![0.0, PI / 2.0, PI, 3.0 * PI / 2.0]);
        assert!(PhaseState::new(0.0, 1.5).is_err());
        assert_abs_diff_eq!(
            PhaseState::new(-PI / 2.0, 1.0).unwrap().phase(),
            1.5 * PI,
            epsilon = 1e-15
        );
    }

    #[test]
    fn expand_single_group() {
        let panel = small_panel(vec![vec![0, 1, 2, 3]], 4);
        let out = expand_config(&panel, &RisConfig(vec![0])).unwrap();
        assert!(out.iter().all(|&r| r == out[0]));
    }

    #[test]
    fn expand_two_groups() {
        let panel = small_panel(vec![vec![0, 1], vec![2, 3]], 4);
        let out = expand_config(&panel, &RisConfig(vec![0, 2])).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[2], out[3]);
        assert_ne!(out[0], out[2]);
        assert!(expand_config(&panel, &RisConfig(vec![0])).is_err());
        assert!(expand_config(&panel, &RisConfig(vec![0, 4])).is_err());
    }

    #[test]
    fn expand_prototype_panel_has_at_most_sixteen_values() {
        let panel = RisPanel::grid(
            Vector3::zeros(),
            Vector3::x(),
            Vector3::y(),
            12,
            12,
            0.015,
            3,
            3,
            RisType::Reflective,
            PhaseCodebook::table1(),
        )
        .unwrap();
        assert_eq!(panel.element_count(), 144);
        assert_eq!(panel.group_count(), 16);
        let mut rng = crate::rng::rng_from_seed(3);
        let cfg = panel.random_config(&mut rng);
        let out = expand_config(&panel, &cfg).unwrap();
        let mut distinct: Vec<Complex64> = Vec::new();
        for r in out {
            if !distinct.contains(&r) {
                distinct.push(r);
            }
        }
        assert!(distinct.len() <= 16);
        let distinct_states = {
            let mut s = cfg.0.clone();
            s.sort();
            s.dedup();
            s.len()
        };
        assert_eq!(distinct.len(), distinct_states);
    }

    #[test]
    fn panel_validation() {
        let plane = PanelPlane {
            origin: Vector3::zeros(),
            normal: Vector3::z(),
        };
        let elems = vec![Vector3::zeros(), Vector3::x()];
        let book = PhaseCodebook::table1();
        assert!(RisPanel::new(
            elems.clone(),
            vec![vec![0]],
            RisType::Reflective,
            plane,
            book.clone()
        )
        .is_err());
        assert!(RisPanel::new(
            elems.clone(),
            vec![vec![0, 1], vec![1]],
            RisType::Reflective,
            plane,
            book.clone()
        )
        .is_err());
        let off = vec![Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0)];
        assert!(RisPanel::new(off, vec![vec![0, 1]], RisType::Reflective, plane, book).is_err());
    }

    #[test]
    fn neighbor_counts() {
        let book = PhaseCodebook::table1();
        let one = RisConfig(vec![2]);
        assert_eq!(neighbor_configs(&one, &book).count(), 3);
        let many = RisConfig(vec![0; 16]);
        let n: Vec<_> = neighbor_configs(&many, &book).collect();
        assert_eq!(n.len(), 48);
        assert!(n
            .iter()
            .all(|c| c.0.iter().zip(&many.0).filter(|(a, b)| a != b).count() == 1));
        let single = PhaseCodebook::uniform(1, 1.0).unwrap();
        assert_eq!(neighbor_configs(&one, &single).count(), 0);
    }

    #[test]
    fn neighbor_reversal_returns_original() {
        let book = PhaseCodebook::table1();
        let base = RisConfig(vec![1, 3, 0]);
        for n in neighbor_configs(&base, &book) {
            assert!(neighbor_configs(&n, &book).any(|back| back == base));
        }
    }

    proptest! {
        #[test]
        fn response_magnitude_bounded(phase in 0.0..TAU, amp in 0.0..=1.0f64, beta in 0.0..1e6f64) {
            let s = PhaseState::new(phase, amp).unwrap();
            for t in [RisType::Reflective, RisType::Hybrid { beta }] {
                prop_assert!(element_response(&s, t, Branch::Reflect).unwrap().norm() <= 1.0 + 1e-15);
            }
            prop_assert!(element_response(&s, RisType::Refractive, Branch::Refract).unwrap().norm() <= 1.0 + 1e-15);
        }

        #[test]
        fn hybrid_energy_split(a_refl in 0.0..=1.0f64, a_refr in 0.0..=1.0f64, beta in 0.0..1e4f64,
                               p1 in 0.0..TAU, p2 in 0.0..TAU) {
            let t = RisType::Hybrid { beta };
            let refl = element_response(&PhaseState::new(p1, a_refl).unwrap(), t, Branch::Reflect).unwrap();
            let refr = element_response(&PhaseState::new(p2, a_refr).unwrap(), t, Branch::Refract).unwrap();
            let total = refl.norm_sqr() + refr.norm_sqr();
            let expected = (beta * a_refl * a_refl + a_refr * a_refr) / (1.0 + beta);
            prop_assert!((total - expected).abs() < 1e-12);
            prop_assert!(total <= 1.0 + 1e-12);
            let unit = element_response(&PhaseState::new(p1, 1.0).unwrap(), t, Branch::Reflect).unwrap().norm_sqr()
                + element_response(&PhaseState::new(p2, 1.0).unwrap(), t, Branch::Refract).unwrap().norm_sqr();
            prop_assert!((unit - 1.0).abs() < 1e-12);
        }

        #[test]
        fn expand_is_pure(states in proptest::collection::vec(0usize..4, 4)) {
            let panel = small_panel(vec![vec![0, 1], vec![2], vec![3, 4], vec![5]], 6);
            let cfg = RisConfig(states);
            let a = expand_config(&panel, &cfg).unwrap();
            let b = expand_config(&panel, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
