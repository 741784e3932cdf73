//! Scenario files, experiment runners and record output.
//!
//! A scenario is a TOML document. Only `id` and `modules` are required;
//! every other key has a default, and unknown keys are rejected. Each
//! module reads its own table (`[sense]`, `[radar]`, `[localize]`,
//! `[slam]`). Geometry tables (`[sense.scene]`, `[localize.scene]`) replace
//! the built-in geometry as a whole and must give every key.
//!
//! Running a scenario yields flat [`RunRecord`]s, one per
//! (seed, scheme, cycle, metric). Seeds run in parallel; every random draw
//! comes from a labelled stream under the seed, so output does not depend
//! on thread count or scheduling.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    ReceiverArray, ScatterModel, Scene, SoiGrid, SubcarrierGrid, Transmitter, SPEED_OF_LIGHT,
};
use crate::metalocalization::{
    localize_run, ConfigScheme, LocalizeOptions, MapModel, SearchOptions,
};
use crate::metaradar::{
    detect, enumerate_hypotheses, DetectOptions, HypothesisSet, OptimizeOptions, RadarModel,
    RadarScene, RadarScheme, RadarTruth, DEFAULT_ORDER_PENALTY,
};
use crate::metasensing::{
    avg_cost, greedy_config_search, mutual_coherence, optimize_schedule_coherence, BlockGainTable,
    FrameSchedule, OccupancyObjective, OccupancyParams, PostureClassifier, PostureLibrary,
};
use crate::metaslam::{
    circle_trajectory, slam_run, PathNoise, Point, Reflector, Scatterer, SlamOptions, SlamPanel,
    SlamScheme, SlamWorld,
};
use crate::ris::{PhaseCodebook, RisConfig, RisPanel, RisType};
use crate::rng::SeedPath;
use crate::{Error, Result};

/// CSV header of the record stream.
pub const CSV_HEADER: [&str; 7] = [
    "scenario", "module", "scheme", "seed", "cycle", "metric", "value",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Sense,
    Radar,
    Localize,
    Slam,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Sense, Module::Radar, Module::Localize, Module::Slam];

    pub fn name(self) -> &'static str {
        match self {
            Module::Sense => "sense",
            Module::Radar => "radar",
            Module::Localize => "localize",
            Module::Slam => "slam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Module::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Scheme names the module accepts, in default run order.
    pub fn schemes(self) -> &'static [&'static str] {
        match self {
            Module::Sense => &["optimized", "random"],
            Module::Radar => &["optimized", "random", "no_ris"],
            Module::Localize => &["fixed", "random", "greedy", "sim_anneal"],
            Module::Slam => &["proposed", "random_config", "no_ris"],
        }
    }
}

fn owned(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Transmitter, receiver, a square surface and the sensing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGeometry {
    pub carrier: f64,
    pub tx: [f64; 3],
    pub tx_gain: f64,
    pub rx: [f64; 3],
    pub rx_gain: f64,
    pub panel_center: [f64; 3],
    pub panel_u: [f64; 3],
    pub panel_v: [f64; 3],
    /// Elements per panel side.
    pub panel_rows: usize,
    pub element_spacing: f64,
    /// Elements per group side.
    pub group_size: usize,
    pub soi_min: [f64; 3],
    pub soi_max: [f64; 3],
    pub divisions: [usize; 3],
}

impl SceneGeometry {
    /// Surface on the z = 1 m wall facing a thin vertical slab of blocks.
    pub fn sensing() -> Self {
        SceneGeometry {
            carrier: 3.198e9,
            tx: [-0.8, 0.3, 1.0],
            tx_gain: 4.0,
            rx: [0.8, 0.3, 1.0],
            rx_gain: 4.0,
            panel_center: [0.0, 0.0, 1.0],
            panel_u: [1.0, 0.0, 0.0],
            panel_v: [0.0, 0.0, 1.0],
            panel_rows: 16,
            element_spacing: 0.015,
            group_size: 2,
            soi_min: [-1.2, 1.5, 0.0],
            soi_max: [1.2, 1.6, 2.0],
            divisions: [4, 1, 4],
        }
    }

    /// Horizontal 4 x 4 block floor plan at table height.
    pub fn localization() -> Self {
        SceneGeometry {
            carrier: 3.198e9,
            tx: [-2.0, 0.5, 1.5],
            tx_gain: 1.0,
            rx: [3.0, 0.5, 1.0],
            rx_gain: 1.0,
            panel_center: [0.0, 0.0, 1.0],
            panel_u: [1.0, 0.0, 0.0],
            panel_v: [0.0, 0.0, 1.0],
            panel_rows: 48,
            element_spacing: 0.015,
            group_size: 12,
            soi_min: [-1.0, 1.0, 0.8],
            soi_max: [1.0, 3.0, 1.2],
            divisions: [4, 4, 1],
        }
    }

    pub fn build(&self) -> Result<Scene> {
        let v = |a: [f64; 3]| Vector3::new(a[0], a[1], a[2]);
        let panel = RisPanel::grid(
            v(self.panel_center),
            v(self.panel_u),
            v(self.panel_v),
            self.panel_rows,
            self.panel_rows,
            self.element_spacing,
            self.group_size,
            self.group_size,
            RisType::Reflective,
            PhaseCodebook::table1(),
        )?;
        Scene::new(
            Transmitter {
                position: v(self.tx),
                gain: self.tx_gain,
            },
            ReceiverArray {
                position: v(self.rx),
                gain: self.rx_gain,
                antenna_count: 1,
                spacing: 0.05,
            },
            Some(panel),
            SoiGrid::new(v(self.soi_min), v(self.soi_max), self.divisions)?,
            SubcarrierGrid::single_tone(self.carrier)?,
            ScatterModel {
                variance: 0.0,
                seed: 0,
            },
        )
    }

    fn check(&self, key: &str) -> Result<()> {
        let floats = [
            self.carrier,
            self.tx_gain,
            self.rx_gain,
            self.element_spacing,
        ];
        let vectors = [
            self.tx,
            self.rx,
            self.panel_center,
            self.panel_u,
            self.panel_v,
            self.soi_min,
            self.soi_max,
        ];
        if floats
            .iter()
            .chain(vectors.iter().flatten())
            .any(|x| !x.is_finite())
        {
            return Err(Error::scenario(key, "all values must be finite"));
        }
        positive(&format!("{key}.carrier"), self.carrier)?;
        positive(&format!("{key}.element_spacing"), self.element_spacing)?;
        at_least(&format!("{key}.panel_rows"), self.panel_rows, 1)?;
        at_least(&format!("{key}.group_size"), self.group_size, 1)?;
        if self.divisions.contains(&0) {
            return Err(Error::scenario(
                format!("{key}.divisions"),
                "divisions must be positive",
            ));
        }
        self.build()
            .map(|_| ())
            .map_err(|e| Error::scenario(key, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SenseCase {
    /// Posture recognition over a known library.
    Posture,
    /// Occupancy reconstruction of unknown scenes.
    Occupancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostureCase {
    pub postures: usize,
    /// Occupied blocks per posture.
    pub occupied: usize,
    pub frames: usize,
    /// Noise level relative to the mean block power, dB.
    pub snr_db: f64,
    pub trials: usize,
    pub budget: usize,
}

impl Default for PostureCase {
    fn default() -> Self {
        PostureCase {
            postures: 4,
            occupied: 1,
            frames: 8,
            snr_db: -3.0,
            trials: 2000,
            budget: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OccupancyCase {
    pub frames: usize,
    /// Scenes per training and evaluation set.
    pub scenes: usize,
    pub occupied: usize,
    pub snr_db: f64,
    pub budget: usize,
    /// Reflectivity magnitude at which a block reads as half occupied.
    pub threshold: f64,
}

impl Default for OccupancyCase {
    fn default() -> Self {
        OccupancyCase {
            frames: 16,
            scenes: 20,
            occupied: 1,
            snr_db: 5.0,
            budget: 1500,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SenseSpec {
    pub schemes: Vec<String>,
    pub cases: Vec<SenseCase>,
    pub scene: SceneGeometry,
    pub posture: PostureCase,
    pub occupancy: OccupancyCase,
}

impl Default for SenseSpec {
    fn default() -> Self {
        SenseSpec {
            schemes: owned(Module::Sense.schemes()),
            cases: vec![SenseCase::Posture, SenseCase::Occupancy],
            scene: SceneGeometry::sensing(),
            posture: PostureCase::default(),
            occupancy: OccupancyCase::default(),
        }
    }
}

impl SenseSpec {
    fn check(&self) -> Result<()> {
        check_schemes("sense.schemes", &self.schemes, Module::Sense)?;
        if self.cases.is_empty() {
            return Err(Error::scenario(
                "sense.cases",
                "at least one case is required",
            ));
        }
        if (1..self.cases.len()).any(|i| self.cases[..i].contains(&self.cases[i])) {
            return Err(Error::scenario("sense.cases", "cases must be distinct"));
        }
        self.scene.check("sense.scene")?;
        let p = &self.posture;
        at_least("sense.posture.postures", p.postures, 2)?;
        at_least("sense.posture.occupied", p.occupied, 1)?;
        at_least("sense.posture.frames", p.frames, 1)?;
        at_least("sense.posture.trials", p.trials, 1)?;
        at_least("sense.posture.budget", p.budget, 1)?;
        finite("sense.posture.snr_db", p.snr_db)?;
        let o = &self.occupancy;
        at_least("sense.occupancy.frames", o.frames, 1)?;
        at_least("sense.occupancy.scenes", o.scenes, 1)?;
        at_least("sense.occupancy.occupied", o.occupied, 1)?;
        at_least("sense.occupancy.budget", o.budget, 1)?;
        finite("sense.occupancy.snr_db", o.snr_db)?;
        positive("sense.occupancy.threshold", o.threshold)?;
        let blocks: usize = self.scene.divisions.iter().product();
        if p.occupied > blocks {
            return Err(Error::scenario(
                "sense.posture.occupied",
                "more occupied blocks than blocks",
            ));
        }
        if o.occupied > blocks {
            return Err(Error::scenario(
                "sense.occupancy.occupied",
                "more occupied blocks than blocks",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarSpec {
    pub schemes: Vec<String>,
    pub cycles: usize,
    pub noise_power: f64,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Posterior mass on the truth that counts as a confident detection.
    pub confidence: f64,
    pub carrier: f64,
    pub antennas: usize,
    /// Antenna spacing in wavelengths.
    pub antenna_spacing: f64,
    pub tone_count: usize,
    pub tone_spacing: f64,
    /// Block directions, radians from broadside.
    pub block_angles: Vec<f64>,
    pub delay_bins: usize,
    pub panel_center: [f64; 3],
    pub panel_u: [f64; 3],
    pub panel_v: [f64; 3],
    pub panel_rows: usize,
    pub element_spacing: f64,
    pub group_size: usize,
    pub budget: usize,
    pub optimize_waveform: bool,
    pub step: f64,
    pub top_p: usize,
    pub order_penalty: f64,
}

impl Default for RadarSpec {
    fn default() -> Self {
        let o = OptimizeOptions::default();
        RadarSpec {
            schemes: owned(Module::Radar.schemes()),
            cycles: 20,
            noise_power: 40.0,
            min_targets: 1,
            max_targets: 2,
            confidence: 0.95,
            carrier: 3.198e9,
            antennas: 4,
            antenna_spacing: 0.5,
            tone_count: 8,
            tone_spacing: 10e6,
            block_angles: vec![-0.8, -0.27, 0.27, 0.8],
            delay_bins: 8,
            panel_center: [-1.0, 0.6, 0.0],
            panel_u: [0.0, 1.0, 0.0],
            panel_v: [0.0, 0.0, 1.0],
            panel_rows: 24,
            element_spacing: 0.015,
            group_size: 4,
            budget: 300,
            optimize_waveform: o.optimize_waveform,
            step: o.step,
            top_p: 4,
            order_penalty: DEFAULT_ORDER_PENALTY,
        }
    }
}

impl RadarSpec {
    pub fn build(&self) -> Result<RadarScene> {
        let v = |a: [f64; 3]| Vector3::new(a[0], a[1], a[2]);
        let panel = RisPanel::grid(
            v(self.panel_center),
            v(self.panel_u),
            v(self.panel_v),
            self.panel_rows,
            self.panel_rows,
            self.element_spacing,
            self.group_size,
            self.group_size,
            RisType::Reflective,
            PhaseCodebook::table1(),
        )?;
        Ok(RadarScene {
            carrier: self.carrier,
            antennas: self.antennas,
            spacing: self.antenna_spacing * SPEED_OF_LIGHT / self.carrier,
            tone_count: self.tone_count,
            tone_spacing: self.tone_spacing,
            block_angles: self.block_angles.clone(),
            delay_bins: self.delay_bins,
            panel: Some(panel),
        })
    }

    pub fn detect_options(&self) -> DetectOptions {
        DetectOptions {
            cycles: self.cycles,
            noise_power: self.noise_power,
            top_p: self.top_p,
            order_penalty: self.order_penalty,
            optimize: OptimizeOptions {
                budget: self.budget,
                optimize_waveform: self.optimize_waveform,
                step: self.step,
            },
        }
    }

    fn check(&self) -> Result<()> {
        check_schemes("radar.schemes", &self.schemes, Module::Radar)?;
        at_least("radar.cycles", self.cycles, 1)?;
        nonnegative("radar.noise_power", self.noise_power)?;
        positive("radar.confidence", self.confidence)?;
        if self.confidence > 1.0 {
            return Err(Error::scenario("radar.confidence", "must not exceed 1"));
        }
        positive("radar.carrier", self.carrier)?;
        at_least("radar.antennas", self.antennas, 1)?;
        positive("radar.antenna_spacing", self.antenna_spacing)?;
        at_least("radar.tone_count", self.tone_count, 1)?;
        positive("radar.tone_spacing", self.tone_spacing)?;
        if self.block_angles.is_empty() || self.block_angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::scenario(
                "radar.block_angles",
                "need at least one finite angle",
            ));
        }
        at_least("radar.delay_bins", self.delay_bins, 1)?;
        at_least("radar.min_targets", self.min_targets, 1)?;
        if self.max_targets < self.min_targets || self.max_targets > self.block_angles.len() {
            return Err(Error::scenario(
                "radar.max_targets",
                "need min_targets <= max_targets <= number of blocks",
            ));
        }
        at_least("radar.panel_rows", self.panel_rows, 1)?;
        positive("radar.element_spacing", self.element_spacing)?;
        at_least("radar.group_size", self.group_size, 1)?;
        at_least("radar.budget", self.budget, 1)?;
        positive("radar.step", self.step)?;
        at_least("radar.top_p", self.top_p, 2)?;
        nonnegative("radar.order_penalty", self.order_penalty)?;
        let scene = self
            .build()
            .map_err(|e| Error::scenario("radar", e.to_string()))?;
        RadarModel::new(&scene).map_err(|e| Error::scenario("radar", e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeSpec {
    pub schemes: Vec<String>,
    pub cycles: usize,
    /// Standard deviation of the static RSS map error, dB.
    pub sigma: f64,
    pub users: usize,
    pub budget: usize,
    pub temperature: f64,
    pub cooling: f64,
    /// Phase state every group holds under the fixed scheme.
    pub fixed_state: usize,
    pub scene: SceneGeometry,
}

impl Default for LocalizeSpec {
    fn default() -> Self {
        let s = SearchOptions::default();
        LocalizeSpec {
            schemes: owned(Module::Localize.schemes()),
            cycles: 20,
            sigma: 4.0,
            users: 3,
            budget: s.budget,
            temperature: s.temperature,
            cooling: s.cooling,
            fixed_state: 0,
            scene: SceneGeometry::localization(),
        }
    }
}

impl LocalizeSpec {
    fn check(&self) -> Result<()> {
        check_schemes("localize.schemes", &self.schemes, Module::Localize)?;
        at_least("localize.cycles", self.cycles, 1)?;
        nonnegative("localize.sigma", self.sigma)?;
        at_least("localize.users", self.users, 1)?;
        at_least("localize.budget", self.budget, 1)?;
        positive("localize.temperature", self.temperature)?;
        positive("localize.cooling", self.cooling)?;
        if self.cooling >= 1.0 {
            return Err(Error::scenario("localize.cooling", "must be below 1"));
        }
        if self.fixed_state >= PhaseCodebook::table1().len() {
            return Err(Error::scenario(
                "localize.fixed_state",
                "not a codebook state",
            ));
        }
        self.scene.check("localize.scene")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlamSpec {
    pub schemes: Vec<String>,
    pub cycles: usize,
    pub particles: usize,
    pub motion_std: f64,
    /// Circular trajectory.
    pub center: [f64; 2],
    pub radius: f64,
    pub budget: usize,
    pub range_std: f64,
    pub aoa_std: f64,
    pub carrier: f64,
    /// Side of the square room with one corner at the origin.
    pub room_side: f64,
    pub wall_coefficient: f64,
    pub scatterers: Vec<[f64; 2]>,
    pub reflectivity: f64,
    /// Surface elements along the wall opposite the origin, at half-wavelength pitch.
    pub panel_elements: usize,
    pub group_size: usize,
}

impl Default for SlamSpec {
    fn default() -> Self {
        let noise = PathNoise::default();
        SlamSpec {
            schemes: owned(Module::Slam.schemes()),
            cycles: 30,
            particles: 500,
            motion_std: 0.05,
            center: [3.0, 3.0],
            radius: 1.5,
            budget: 400,
            range_std: noise.range_std,
            aoa_std: noise.aoa_std,
            carrier: 3.198e9,
            room_side: 6.0,
            wall_coefficient: 0.5,
            scatterers: vec![[1.0, 4.8], [4.9, 1.1], [5.0, 4.9], [1.2, 1.0]],
            reflectivity: 2.0,
            panel_elements: 64,
            group_size: 1,
        }
    }
}

impl SlamSpec {
    pub fn world(&self) -> Result<SlamWorld> {
        let side = self.room_side;
        let walls = [
            (Point::new(1.0, 0.0), 0.0),
            (Point::new(-1.0, 0.0), -side),
            (Point::new(0.0, 1.0), 0.0),
            (Point::new(0.0, -1.0), -side),
        ];
        let lambda = SPEED_OF_LIGHT / self.carrier;
        Ok(SlamWorld {
            carrier: self.carrier,
            tx_offset: Point::new(0.1, 0.0),
            reflectors: walls
                .iter()
                .map(|(n, o)| Reflector::new(*n, *o, self.wall_coefficient))
                .collect::<Result<_>>()?,
            scatterers: self
                .scatterers
                .iter()
                .map(|p| Scatterer {
                    position: Point::new(p[0], p[1]),
                    reflectivity: self.reflectivity,
                })
                .collect(),
            panel: Some(SlamPanel::line(
                Point::new(side / 2.0, side - 0.05),
                Point::new(1.0, 0.0),
                self.panel_elements,
                lambda / 2.0,
                self.group_size,
                PhaseCodebook::table1(),
            )?),
            virtual_scatterers: true,
        })
    }

    pub fn options(&self) -> SlamOptions {
        SlamOptions {
            particles: self.particles,
            motion_std: self.motion_std,
            noise: PathNoise {
                range_std: self.range_std,
                aoa_std: self.aoa_std,
                ..PathNoise::default()
            },
            budget: self.budget,
            ..SlamOptions::default()
        }
    }

    pub fn trajectory(&self) -> Vec<Point> {
        circle_trajectory(
            Point::new(self.center[0], self.center[1]),
            self.radius,
            self.cycles,
        )
    }

    fn check(&self) -> Result<()> {
        check_schemes("slam.schemes", &self.schemes, Module::Slam)?;
        at_least("slam.cycles", self.cycles, 1)?;
        at_least("slam.particles", self.particles, 1)?;
        nonnegative("slam.motion_std", self.motion_std)?;
        positive("slam.radius", self.radius)?;
        at_least("slam.budget", self.budget, 1)?;
        positive("slam.range_std", self.range_std)?;
        positive("slam.aoa_std", self.aoa_std)?;
        positive("slam.carrier", self.carrier)?;
        positive("slam.room_side", self.room_side)?;
        nonnegative("slam.wall_coefficient", self.wall_coefficient)?;
        positive("slam.reflectivity", self.reflectivity)?;
        at_least("slam.panel_elements", self.panel_elements, 1)?;
        at_least("slam.group_size", self.group_size, 1)?;
        let inside = |p: &[f64; 2]| p.iter().all(|&x| x > 0.0 && x < self.room_side);
        if !self.scatterers.iter().all(inside) {
            return Err(Error::scenario(
                "slam.scatterers",
                "scatterers must lie inside the room",
            ));
        }
        let (c, r) = (self.center, self.radius);
        if !inside(&[c[0] - r, c[1] - r]) || !inside(&[c[0] + r, c[1] + r]) {
            return Err(Error::scenario(
                "slam.radius",
                "trajectory must stay inside the room",
            ));
        }
        self.world()
            .map_err(|e| Error::scenario("slam", e.to_string()))?;
        Ok(())
    }
}

/// A full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: String,
    pub modules: Vec<Module>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sense: SenseSpec,
    #[serde(default)]
    pub radar: RadarSpec,
    #[serde(default)]
    pub localize: LocalizeSpec,
    #[serde(default)]
    pub slam: SlamSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ScenarioSpec {
    /// Defaults for every module section.
    pub fn new(id: impl Into<String>, modules: Vec<Module>) -> Self {
        ScenarioSpec {
            id: id.into(),
            modules,
            seeds: default_seeds(),
            sense: SenseSpec::default(),
            radar: RadarSpec::default(),
            localize: LocalizeSpec::default(),
            slam: SlamSpec::default(),
        }
    }

    /// Sets the cycle count of every cycle-based module.
    pub fn set_cycles(&mut self, cycles: usize) {
        self.radar.cycles = cycles;
        self.localize.cycles = cycles;
        self.slam.cycles = cycles;
    }

    /// Restricts `module` to a single scheme.
    pub fn set_scheme(&mut self, module: Module, scheme: &str) -> Result<()> {
        if !module.schemes().contains(&scheme) {
            return Err(Error::scenario(
                format!("{}.schemes", module.name()),
                format!(
                    "unknown scheme `{scheme}`, expected one of {:?}",
                    module.schemes()
                ),
            ));
        }
        let list = vec![scheme.to_string()];
        match module {
            Module::Sense => self.sense.schemes = list,
            Module::Radar => self.radar.schemes = list,
            Module::Localize => self.localize.schemes = list,
            Module::Slam => self.slam.schemes = list,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let id_ok = !self.id.is_empty()
            && self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
        if !id_ok {
            return Err(Error::scenario(
                "id",
                "use letters, digits, '_', '-' or '.'",
            ));
        }
        if self.modules.is_empty() {
            return Err(Error::scenario(
                "modules",
                "at least one module is required",
            ));
        }
        if (1..self.modules.len()).any(|i| self.modules[..i].contains(&self.modules[i])) {
            return Err(Error::scenario("modules", "modules must be distinct"));
        }
        if self.seeds.is_empty() {
            return Err(Error::scenario("seeds", "at least one seed is required"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::scenario("seeds", "seeds must be distinct"));
        }
        self.sense.check()?;
        self.radar.check()?;
        self.localize.check()?;
        self.slam.check()
    }
}

fn check_schemes(key: &str, schemes: &[String], module: Module) -> Result<()> {
    if schemes.is_empty() {
        return Err(Error::scenario(key, "at least one scheme is required"));
    }
    for (i, s) in schemes.iter().enumerate() {
        if !module.schemes().contains(&s.as_str()) {
            return Err(Error::scenario(
                key,
                format!(
                    "unknown scheme `{s}`, expected one of {:?}",
                    module.schemes()
                ),
            ));
        }
        if schemes[..i].contains(s) {
            return Err(Error::scenario(key, format!("scheme `{s}` listed twice")));
        }
    }
    Ok(())
}

fn finite(key: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::scenario(key, "must be finite"))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::scenario(key, format!("must be positive, got {v}")))
    }
}

fn nonnegative(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::scenario(
            key,
            format!("must be nonnegative, got {v}"),
        ))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::scenario(
            key,
            format!("must be at least {min}, got {v}"),
        ))
    }
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec> {
    let spec: ScenarioSpec = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}

/// Scenario as TOML with every default spelled out.
pub fn scenario_to_toml(spec: &ScenarioSpec) -> Result<String> {
    toml::to_string(spec).map_err(|e| Error::Io(e.to_string()))
}

// Names the key a TOML error is about: the field quoted in the message,
// else the key on the line the error points at.
fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let msg = e.message();
    let quoted = ["unknown field `", "missing field `", "duplicate key `"]
        .iter()
        .find_map(|p| msg.find(p).map(|i| &msg[i + p.len()..]))
        .and_then(|rest| rest.split('`').next())
        .map(str::to_string);
    let from_span = e.span().and_then(|span| {
        let start = text[..span.start.min(text.len())]
            .rfind('\n')
            .map_or(0, |i| i + 1);
        let line = text[start..].lines().next()?;
        let key = line
            .split('=')
            .next()?
            .trim()
            .trim_matches(|c| c == '[' || c == ']');
        (!key.is_empty()).then(|| key.to_string())
    });
    let key = quoted
        .or(from_span)
        .unwrap_or_else(|| "<document>".to_string());
    Error::scenario(key, e.to_string().trim_end())
}

/// One output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub module: String,
    pub scheme: String,
    pub seed: u64,
    pub cycle: usize,
    pub metric: String,
    pub value: f64,
}

// Objects built once per run and shared by all seeds.
struct Prepared {
    sense: Option<SensePrepared>,
    radar: Option<RadarPrepared>,
    localize: Option<MapModel>,
    slam: Option<SlamWorld>,
}

struct SensePrepared {
    table: BlockGainTable,
    /// Mean per-block received power with unit reflectivity.
    reference_power: f64,
}

impl SensePrepared {
    fn noise_power(&self, snr_db: f64) -> f64 {
        self.reference_power * 10f64.powf(-snr_db / 10.0)
    }
}

struct RadarPrepared {
    scene: RadarScene,
    model: RadarModel,
    hypotheses: HypothesisSet,
}

impl Prepared {
    fn new(spec: &ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let has = |m| spec.modules.contains(&m);
        let sense = if has(Module::Sense) {
            let table = BlockGainTable::new(&spec.sense.scene.build()?)?;
            let q = table.block_count() as f64;
            let reference_power = table.gains().iter().map(|z| z.norm_sqr()).sum::<f64>() / q;
            Some(SensePrepared {
                table,
                reference_power,
            })
        } else {
            None
        };
        let radar = if has(Module::Radar) {
            let scene = spec.radar.build()?;
            let model = RadarModel::new(&scene)?;
            let hypotheses = enumerate_hypotheses(
                spec.radar.min_targets,
                spec.radar.max_targets,
                scene.block_angles.len(),
            )?;
            Some(RadarPrepared {
                scene,
                model,
                hypotheses,
            })
        } else {
            None
        };
        let localize = if has(Module::Localize) {
            Some(MapModel::new(&spec.localize.scene.build()?)?)
        } else {
            None
        };
        let slam = if has(Module::Slam) {
            Some(spec.slam.world()?)
        } else {
            None
        };
        Ok(Prepared {
            sense,
            radar,
            localize,
            slam,
        })
    }
}

struct Sink<'a> {
    scenario: &'a str,
    module: Module,
    seed: u64,
    records: Vec<RunRecord>,
}

impl Sink<'_> {
    fn push(&mut self, scheme: &str, cycle: usize, metric: &str, value: f64) {
        self.records.push(RunRecord {
            scenario: self.scenario.to_string(),
            module: self.module.name().to_string(),
            scheme: scheme.to_string(),
            seed: self.seed,
            cycle,
            metric: metric.to_string(),
            value,
        });
    }
}

/// Runs every module on every seed. Records are ordered by seed, then
/// cycle, then module, scheme and metric in the order they were produced.
pub fn run(spec: &ScenarioSpec) -> Result<Vec<RunRecord>> {
    match run_partial(spec) {
        (records, None) => Ok(records),
        (_, Some(e)) => Err(e),
    }
}

/// Like [`run`], but keeps the records of all seeds before the first
/// failing one.
pub fn run_partial(spec: &ScenarioSpec) -> (Vec<RunRecord>, Option<Error>) {
    let prepared = match Prepared::new(spec) {
        Ok(p) => p,
        Err(e) => return (Vec::new(), Some(e)),
    };
    let mut seeds = spec.seeds.clone();
    seeds.sort_unstable();
    let results: Vec<Result<Vec<RunRecord>>> = seeds
        .par_iter()
        .map(|&seed| run_seed(spec, &prepared, seed))
        .collect();
    let mut out = Vec::new();
    for r in results {
        match r {
            Ok(mut records) => {
                records.sort_by_key(|r| r.cycle);
                out.extend(records);
            }
            Err(e) => return (out, Some(e)),
        }
    }
    (out, None)
}

fn run_seed(spec: &ScenarioSpec, prepared: &Prepared, seed: u64) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for &module in &spec.modules {
        let mut sink = Sink {
            scenario: &spec.id,
            module,
            seed,
            records: Vec::new(),
        };
        let root = SeedPath::root(seed);
        match module {
            Module::Sense => run_sense(
                &spec.sense,
                prepared.sense.as_ref().expect("prepared"),
                root,
                &mut sink,
            )?,
            Module::Radar => run_radar(
                &spec.radar,
                prepared.radar.as_ref().expect("prepared"),
                root,
                &mut sink,
            )?,
            Module::Localize => run_localize(
                &spec.localize,
                prepared.localize.as_ref().expect("prepared"),
                root,
                &mut sink,
            )?,
            Module::Slam => run_slam(
                &spec.slam,
                prepared.slam.as_ref().expect("prepared"),
                root,
                &mut sink,
            )?,
        }
        records.extend(sink.records);
    }
    Ok(records)
}

// Posture recognition and occupancy reconstruction for each scheme.
// "optimized" minimises mutual coherence for postures and the training-set
// cross-entropy for occupancy.
fn run_sense(spec: &SenseSpec, p: &SensePrepared, root: SeedPath, sink: &mut Sink) -> Result<()> {
    let x = Complex64::new(1.0, 0.0);
    let table = &p.table;
    let q = table.block_count();
    for case in &spec.cases {
        match case {
            SenseCase::Posture => {
                let c = &spec.posture;
                let noise = p.noise_power(c.snr_db);
                let library = PostureLibrary::synthetic(
                    q,
                    c.postures,
                    c.occupied,
                    &mut root.label("library").rng(),
                )?;
                for scheme in &spec.schemes {
                    let schedule = match scheme.as_str() {
                        "random" => {
                            table.random_schedule(c.frames, &mut root.label("random").rng())
                        }
                        _ => {
                            optimize_schedule_coherence(
                                table,
                                c.frames,
                                c.budget,
                                &mut root.label("optimized").rng(),
                            )?
                            .schedule
                        }
                    };
                    let m = table.matrix(&schedule)?;
                    let classifier = PostureClassifier::new(&m, &library, noise, x);
                    let cost = avg_cost(
                        |y| classifier.classify(y),
                        &library,
                        &m,
                        noise,
                        x,
                        c.trials,
                        &mut root.label("trials").rng(),
                    )?;
                    sink.push(scheme, 0, "posture_cost", cost.mean);
                    sink.push(scheme, 0, "posture_cost_se", cost.std_error);
                    sink.push(scheme, 0, "posture_coherence", mutual_coherence(&m)?);
                }
            }
            SenseCase::Occupancy => {
                let c = &spec.occupancy;
                let noise = p.noise_power(c.snr_db);
                let params = OccupancyParams::from_threshold(c.threshold);
                let objective = |label: &str, noise: f64| {
                    OccupancyObjective::random(
                        q,
                        c.frames,
                        c.scenes,
                        c.occupied,
                        noise,
                        x,
                        params,
                        &mut root.label(label).rng(),
                    )
                };
                let train = objective("train", noise)?;
                let eval = objective("eval", noise)?;
                // same scenes as `eval`, no noise
                let clean = objective("eval", 0.0)?;
                for scheme in &spec.schemes {
                    let schedule: FrameSchedule = match scheme.as_str() {
                        "random" => table
                            .random_schedule(c.frames, &mut root.label("occupancy-random").rng()),
                        _ => {
                            let loss = |s: &FrameSchedule| {
                                table.matrix(s).map_or(f64::INFINITY, |m| train.loss(&m))
                            };
                            greedy_config_search(
                                table,
                                c.frames,
                                loss,
                                c.budget,
                                &mut root.label("occupancy-optimized").rng(),
                            )?
                            .schedule
                        }
                    };
                    let m = table.matrix(&schedule)?;
                    sink.push(scheme, 0, "occupancy_ce", eval.loss(&m));
                    sink.push(scheme, 0, "occupancy_ce_noiseless", clean.loss(&m));
                }
            }
        }
    }
    Ok(())
}

// Per cycle: posterior mass on the true target set and whether the MAP
// decision is correct. Cycle 0 carries the cycles needed to reach the
// confidence level (cycles + 1 if never) and the true target count.
fn run_radar(spec: &RadarSpec, p: &RadarPrepared, root: SeedPath, sink: &mut Sink) -> Result<()> {
    let truth = RadarTruth::random(&p.hypotheses, &p.model, &mut root.label("truth").rng());
    let options = spec.detect_options();
    for scheme in &spec.schemes {
        let kind = RadarScheme::parse(scheme).expect("validated scheme");
        let trace = detect(
            &p.scene,
            &p.hypotheses,
            &truth,
            kind,
            &options,
            &mut root.label("noise").rng(),
            &mut root.label("scheme").rng(),
        )?;
        let reached = trace
            .cycles_to_confidence(truth.hypothesis, spec.confidence)
            .unwrap_or(spec.cycles + 1);
        sink.push(scheme, 0, "cycles_to_confidence", reached as f64);
        sink.push(
            scheme,
            0,
            "target_count",
            p.hypotheses[truth.hypothesis].blocks().len() as f64,
        );
        for (c, post) in trace.posteriors.iter().enumerate() {
            sink.push(scheme, c + 1, "posterior", post.probs()[truth.hypothesis]);
            let hit = post.argmax() == truth.hypothesis;
            sink.push(scheme, c + 1, "detected", if hit { 1.0 } else { 0.0 });
        }
    }
    Ok(())
}

// Per cycle: mean mislocalization distance over the users.
fn run_localize(
    spec: &LocalizeSpec,
    model: &MapModel,
    root: SeedPath,
    sink: &mut Sink,
) -> Result<()> {
    let mut user_rng = root.label("users").rng();
    let users: Vec<usize> = (0..spec.users)
        .map(|_| user_rng.random_range(0..model.block_count()))
        .collect();
    for scheme in &spec.schemes {
        let kind = ConfigScheme::parse(scheme).expect("validated scheme");
        let options = LocalizeOptions {
            cycles: spec.cycles,
            sigma: spec.sigma,
            scheme: kind,
            search: SearchOptions {
                budget: spec.budget,
                temperature: spec.temperature,
                cooling: spec.cooling,
            },
            fixed_config: RisConfig(vec![spec.fixed_state; model.group_count()]),
        };
        let errors = localize_run(
            model,
            &users,
            &options,
            root.label("errors"),
            &mut root.label(kind.name()).rng(),
        )?;
        for (c, e) in errors.iter().enumerate() {
            sink.push(scheme, c + 1, "error", *e);
        }
    }
    Ok(())
}

// Per moving cycle (1-based): position error, cumulative RMSE,
// belief mass on the surface landmark and the number of mapped landmarks.
fn run_slam(spec: &SlamSpec, world: &SlamWorld, root: SeedPath, sink: &mut Sink) -> Result<()> {
    let trajectory = spec.trajectory();
    let options = spec.options();
    for scheme in &spec.schemes {
        let kind = SlamScheme::parse(scheme)?;
        let trace = slam_run(world, &trajectory, kind, &options, root)?;
        for t in 0..trace.errors.len() {
            sink.push(scheme, t + 1, "error", trace.errors[t]);
            sink.push(scheme, t + 1, "rmse", trace.rmse[t]);
            sink.push(scheme, t + 1, "surface_belief", trace.surface_belief[t]);
            sink.push(scheme, t + 1, "landmarks", trace.landmarks[t] as f64);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::invalid(format!(
                "unknown format `{s}`, expected csv or json"
            ))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Floats with 17 significant digits, enough to round-trip any f64.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn emit_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_error)?;
    for r in records {
        w.write_record([
            r.scenario.as_str(),
            r.module.as_str(),
            r.scheme.as_str(),
            &r.seed.to_string(),
            &r.cycle.to_string(),
            r.metric.as_str(),
            &format_value(r.value),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_json<W: Write>(records: &[RunRecord], mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, records).map_err(|e| Error::Io(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn emit<W: Write>(records: &[RunRecord], format: Format, out: W) -> Result<()> {
    match format {
        Format::Csv => emit_csv(records, out),
        Format::Json => emit_json(records, out),
    }
}

/// Reads records written by [`emit_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::invalid("unexpected CSV header"));
    }
    reader.deserialize().map(|r| r.map_err(csv_error)).collect()
}

pub fn parse_json(text: &str) -> Result<Vec<RunRecord>> {
    serde_json::from_str(text).map_err(|e| Error::invalid(e.to_string()))
}
