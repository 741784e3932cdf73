//! Python bindings: scenarios, runs and record output, plus the channel,
//! metric and posterior primitives.

use std::path::PathBuf;

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use ris_sim::harness::{self, Module, RunRecord, ScenarioSpec};
use ris_sim::{channel, metaradar, metrics, ris, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Scenario { .. } | Error::InvalidInput(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn module(name: &str) -> PyResult<Module> {
    Module::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown module `{name}`")))
}

/// One output row of a run.
#[pyclass(name = "Record", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyRecord {
    scenario: String,
    module: String,
    scheme: String,
    seed: u64,
    cycle: usize,
    metric: String,
    value: f64,
}

#[pymethods]
impl PyRecord {
    fn __repr__(&self) -> String {
        format!(
            "Record({}, {}, {}, seed={}, cycle={}, {}={})",
            self.scenario, self.module, self.scheme, self.seed, self.cycle, self.metric, self.value
        )
    }
}

impl From<RunRecord> for PyRecord {
    fn from(r: RunRecord) -> Self {
        PyRecord {
            scenario: r.scenario,
            module: r.module,
            scheme: r.scheme,
            seed: r.seed,
            cycle: r.cycle,
            metric: r.metric,
            value: r.value,
        }
    }
}

impl From<&PyRecord> for RunRecord {
    fn from(r: &PyRecord) -> Self {
        RunRecord {
            scenario: r.scenario.clone(),
            module: r.module.clone(),
            scheme: r.scheme.clone(),
            seed: r.seed,
            cycle: r.cycle,
            metric: r.metric.clone(),
            value: r.value,
        }
    }
}

/// Experiment description; defaults for every key not set.
#[pyclass(name = "Scenario")]
struct PyScenario {
    spec: ScenarioSpec,
}

#[pymethods]
impl PyScenario {
    #[new]
    fn new(id: String, modules: Vec<String>) -> PyResult<Self> {
        let modules = modules.iter().map(|m| module(m)).collect::<PyResult<_>>()?;
        let spec = ScenarioSpec::new(id, modules);
        spec.validate().map_err(to_py)?;
        Ok(PyScenario { spec })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        harness::parse_scenario(text)
            .map(|spec| PyScenario { spec })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        harness::load_scenario(&path)
            .map(|spec| PyScenario { spec })
            .map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        harness::scenario_to_toml(&self.spec).map_err(to_py)
    }

    #[getter]
    fn id(&self) -> String {
        self.spec.id.clone()
    }

    #[getter]
    fn modules(&self) -> Vec<&'static str> {
        self.spec.modules.iter().map(|m| m.name()).collect()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.spec.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) -> PyResult<()> {
        let mut spec = self.spec.clone();
        spec.seeds = seeds;
        spec.validate().map_err(to_py)?;
        self.spec = spec;
        Ok(())
    }

    /// Cycle count of the radar, localization and SLAM modules.
    fn set_cycles(&mut self, cycles: usize) -> PyResult<()> {
        let mut spec = self.spec.clone();
        spec.set_cycles(cycles);
        spec.validate().map_err(to_py)?;
        self.spec = spec;
        Ok(())
    }

    fn set_scheme(&mut self, module_name: &str, scheme: &str) -> PyResult<()> {
        self.spec
            .set_scheme(module(module_name)?, scheme)
            .map_err(to_py)
    }

    /// Runs every module on every seed; the GIL is released meanwhile.
    fn run(&self, py: Python<'_>) -> PyResult<Vec<PyRecord>> {
        let spec = self.spec.clone();
        let records = py.detach(move || harness::run(&spec)).map_err(to_py)?;
        Ok(records.into_iter().map(PyRecord::from).collect())
    }
}

fn collect(records: &[PyRef<'_, PyRecord>]) -> Vec<RunRecord> {
    records.iter().map(|r| RunRecord::from(&**r)).collect()
}

#[pyfunction]
fn emit_csv(records: Vec<PyRef<'_, PyRecord>>) -> PyResult<String> {
    let mut out = Vec::new();
    harness::emit_csv(&collect(&records), &mut out).map_err(to_py)?;
    String::from_utf8(out).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn emit_json(records: Vec<PyRef<'_, PyRecord>>) -> PyResult<String> {
    let mut out = Vec::new();
    harness::emit_json(&collect(&records), &mut out).map_err(to_py)?;
    String::from_utf8(out).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Line-of-sight complex gain.
#[pyfunction]
fn los_gain(distance: f64, tx_gain: f64, rx_gain: f64, wavelength: f64) -> PyResult<Complex64> {
    channel::los_gain(distance, tx_gain, rx_gain, wavelength).map_err(to_py)
}

/// Single-element surface path gain with element response `gamma`.
#[pyfunction]
fn ris_path_gain(
    d_tx: f64,
    d_rx: f64,
    gamma: Complex64,
    tx_gain: f64,
    rx_gain: f64,
    wavelength: f64,
) -> PyResult<Complex64> {
    channel::ris_path_gain(d_tx, d_rx, gamma, tx_gain, rx_gain, wavelength).map_err(to_py)
}

/// (phase, amplitude) of each state of the measured 2-bit codebook.
#[pyfunction]
fn codebook() -> Vec<(f64, f64)> {
    ris::PhaseCodebook::table1()
        .states()
        .iter()
        .map(|s| (s.phase(), s.amplitude()))
        .collect()
}

#[pyfunction]
fn doppler_shift(speed: f64, direction: f64, frequency: f64) -> f64 {
    metrics::doppler_shift(speed, direction, frequency)
}

#[pyfunction]
fn fmcw_tof(beat_hz: f64, slope_hz_per_s: f64) -> PyResult<f64> {
    metrics::fmcw_tof(beat_hz, slope_hz_per_s).map_err(to_py)
}

/// Least-squares intersection of bearings `[((x, y), angle), ...]`.
#[pyfunction]
fn triangulate_aoa(measurements: Vec<((f64, f64), f64)>) -> PyResult<(f64, f64)> {
    let m: Vec<_> = measurements
        .into_iter()
        .map(|((x, y), phi)| (ris_sim::metaslam::Point::new(x, y), phi))
        .collect();
    metrics::triangulate_aoa(&m)
        .map(|p| (p.x, p.y))
        .map_err(to_py)
}

/// Posterior from a prior and per-hypothesis log-likelihoods.
#[pyfunction]
fn bayes_update(prior: Vec<f64>, log_likelihoods: Vec<f64>) -> PyResult<Vec<f64>> {
    let prior = metaradar::Posterior::new(prior).map_err(to_py)?;
    metaradar::bayes_update(&prior, &log_likelihoods)
        .map(|p| p.probs().to_vec())
        .map_err(to_py)
}

#[pymodule]
#[pyo3(name = "ris_sim")]
fn ris_sim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRecord>()?;
    m.add_function(wrap_pyfunction!(emit_csv, m)?)?;
    m.add_function(wrap_pyfunction!(emit_json, m)?)?;
    m.add_function(wrap_pyfunction!(los_gain, m)?)?;
    m.add_function(wrap_pyfunction!(ris_path_gain, m)?)?;
    m.add_function(wrap_pyfunction!(codebook, m)?)?;
    m.add_function(wrap_pyfunction!(doppler_shift, m)?)?;
    m.add_function(wrap_pyfunction!(fmcw_tof, m)?)?;
    m.add_function(wrap_pyfunction!(triangulate_aoa, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_update, m)?)?;
    Ok(())
}
