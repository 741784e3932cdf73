//! Measurement metrics: received power, time of flight (OFDM and FMCW),
//! Doppler, angle of arrival, and bearing-only position fixes.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{Fft, FftPlanner};

use crate::channel::{ula_steering, SubcarrierGrid, SPEED_OF_LIGHT};
use crate::error::{Error, Result};

/// Default delay-grid oversampling for [`tof_estimate_ofdm`].
pub const DEFAULT_TOF_OVERSAMPLE: usize = 16;

/// Peak-to-leakage ratio below which a delay spectrum counts as flat.
pub const MIN_PEAK_TO_LEAKAGE: f64 = 2.0;

fn gaussian<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    } else {
        0.0
    }
}

/// Log-distance path loss `P_T − 10·α·log10(d) + e`, `e ~ N(0, σ²)` in dB.
pub fn rss_logdistance<R: Rng + ?Sized>(
    p_t_db: f64,
    alpha: f64,
    d: f64,
    sigma_db: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::invalid(format!("distance {d} must be positive")));
    }
    Ok(p_t_db - 10.0 * alpha * d.log10() + gaussian(sigma_db, rng))
}

/// Mean received power in dB; `-inf` for an all-zero vector.
pub fn rss_of(y: &[Complex64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("empty signal"));
    }
    let p = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / y.len() as f64;
    Ok(10.0 * p.log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TofEstimate {
    /// First-arrival delay in seconds.
    pub tau: f64,
    /// Peak power over mean spectrum power; 1 for a flat spectrum, N for a
    /// single clean path.
    pub peak_to_leakage: f64,
}

fn fft(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    }
}

/// Magnitude of `Σ_n H_n e^{j2π n Δf τ}` on the delay grid
/// `τ_k = k·T_s/oversample`, `k = 0..N·oversample`.
pub fn delay_spectrum(channel: &[Complex64], oversample: usize) -> Vec<f64> {
    let len = channel.len() * oversample;
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    buf[..channel.len()].copy_from_slice(channel);
    fft(len, true).process(&mut buf);
    buf.iter().map(|v| v.norm()).collect()
}

/// First-arrival delay from a received OFDM symbol.
///
/// The channel is deconvolved per subcarrier (`H_n = y_n/x_n`), turned into
/// an oversampled delay spectrum, and the earliest local peak holding at
/// least half of the global maximum is reported.
pub fn tof_estimate_ofdm(
    y: &[Complex64],
    x: &[Complex64],
    grid: &SubcarrierGrid,
    oversample: usize,
) -> Result<TofEstimate> {
    if y.len() != x.len() || y.len() != grid.count {
        return Err(Error::invalid(
            "y, x and the subcarrier grid must agree in length",
        ));
    }
    if oversample == 0 {
        return Err(Error::invalid("oversample must be positive"));
    }
    if !(grid.spacing > 0.0) {
        return Err(Error::invalid("subcarrier spacing must be positive"));
    }
    if x.iter().any(|v| v.norm() == 0.0) {
        return Err(Error::invalid("pilot symbols must be nonzero"));
    }
    let h: Vec<Complex64> = y.iter().zip(x).map(|(y, x)| y / x).collect();
    let spectrum = delay_spectrum(&h, oversample);
    let len = spectrum.len();
    let peak = spectrum.iter().cloned().fold(0.0_f64, f64::max);
    let mean_power = spectrum.iter().map(|v| v * v).sum::<f64>() / len as f64;
    if !(peak > 0.0) || mean_power <= 0.0 {
        return Err(Error::Unresolved("zero channel".into()));
    }
    let ratio = peak * peak / mean_power;
    if ratio < MIN_PEAK_TO_LEAKAGE {
        return Err(Error::Unresolved(format!(
            "peak-to-leakage {ratio:.3} below floor"
        )));
    }
    let first = (0..len)
        .find(|&k| {
            let v = spectrum[k];
            v >= 0.5 * peak && v >= spectrum[(k + len - 1) % len] && v >= spectrum[(k + 1) % len]
        })
        .expect("global maximum qualifies");
    let step = grid.sample_period() / oversample as f64;
    Ok(TofEstimate {
        tau: first as f64 * step,
        peak_to_leakage: ratio,
    })
}

/// Frequency-domain channel of a sum of delayed paths on `grid`
/// (phase ramp `e^{−j2π f_n τ}` per path).
pub fn multipath_channel(grid: &SubcarrierGrid, paths: &[(Complex64, f64)]) -> Vec<Complex64> {
    (0..grid.count)
        .map(|n| {
            let f = grid.frequency(n);
            paths
                .iter()
                .map(|&(a, tau)| a * Complex64::from_polar(1.0, -2.0 * PI * f * tau))
                .sum()
        })
        .collect()
}

/// `τ = f_d/η` for an FMCW beat frequency `f_d` and chirp slope `η`.
pub fn fmcw_tof(beat_hz: f64, slope_hz_per_s: f64) -> Result<f64> {
    if !(slope_hz_per_s > 0.0) {
        return Err(Error::invalid("chirp slope must be positive"));
    }
    if !(beat_hz >= 0.0) {
        return Err(Error::invalid("beat frequency must be nonnegative"));
    }
    Ok(beat_hz / slope_hz_per_s)
}

/// Range `c·τ` for an FMCW beat frequency.
pub fn fmcw_range(beat_hz: f64, slope_hz_per_s: f64) -> Result<f64> {
    Ok(SPEED_OF_LIGHT * fmcw_tof(beat_hz, slope_hz_per_s)?)
}

/// Dechirped (mixed) real signal for an echo delayed by `tau`:
/// `cos(2π·η·τ·t)` sampled at `fs` for `duration` seconds.
pub fn fmcw_mixed_signal(
    tau: f64,
    slope_hz_per_s: f64,
    fs: f64,
    duration: f64,
) -> Result<Vec<f64>> {
    let beat = slope_hz_per_s * tau;
    if !(fs > 2.0 * beat) {
        return Err(Error::invalid(format!(
            "beat frequency {beat} Hz above Nyquist for fs = {fs} Hz"
        )));
    }
    let n = (duration * fs).round() as usize;
    Ok((0..n)
        .map(|i| (2.0 * PI * beat * i as f64 / fs).cos())
        .collect())
}

/// Dominant frequency of a real mixed signal (FFT peak over `[0, fs/2]`).
pub fn fmcw_beat(mixed: &[f64], fs: f64) -> Result<f64> {
    if mixed.is_empty() {
        return Err(Error::invalid("empty signal"));
    }
    if !(fs > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let n = mixed.len();
    let mut buf: Vec<Complex64> = mixed.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft(n, false).process(&mut buf);
    let half = n / 2;
    let k = (0..=half)
        .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()).then(b.cmp(&a)))
        .expect("nonempty");
    Ok(k as f64 * fs / n as f64)
}

/// Two-way Doppler shift `2·v·cos(φ)·f/c`; positive when approaching.
pub fn doppler_shift(speed: f64, direction: f64, frequency: f64) -> f64 {
    2.0 * speed * direction.cos() * frequency / SPEED_OF_LIGHT
}

/// Slow-time samples `e^{j2π·Δf·k/prf}` for a Doppler shift `Δf`.
pub fn doppler_slow_time(shift_hz: f64, prf: f64, pulses: usize) -> Result<Vec<Complex64>> {
    if !(prf > 0.0) {
        return Err(Error::invalid("PRF must be positive"));
    }
    if shift_hz.abs() >= prf / 2.0 {
        return Err(Error::invalid(format!(
            "Doppler {shift_hz} Hz aliases at PRF {prf} Hz"
        )));
    }
    Ok((0..pulses)
        .map(|k| Complex64::from_polar(1.0, 2.0 * PI * shift_hz * k as f64 / prf))
        .collect())
}

/// Signed dominant slow-time frequency.
pub fn doppler_estimate(slow_time: &[Complex64], prf: f64) -> Result<f64> {
    if slow_time.is_empty() {
        return Err(Error::invalid("empty slow-time record"));
    }
    if !(prf > 0.0) {
        return Err(Error::invalid("PRF must be positive"));
    }
    let n = slow_time.len();
    let mut buf = slow_time.to_vec();
    fft(n, false).process(&mut buf);
    let k = (0..n)
        .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()).then(b.cmp(&a)))
        .expect("nonempty");
    let signed = if k > n / 2 {
        k as f64 - n as f64
    } else {
        k as f64
    };
    Ok(signed * prf / n as f64)
}

/// Bearing from anchor `a` to point `u`, plus `N(0, σ²)` noise.
pub fn aoa_geometric<R: Rng + ?Sized>(
    u: &Vector2<f64>,
    a: &Vector2<f64>,
    sigma: f64,
    rng: &mut R,
) -> Result<f64> {
    let d = u - a;
    if d.norm() == 0.0 {
        return Err(Error::DegenerateGeometry(
            "point coincides with anchor".into(),
        ));
    }
    Ok(d.y.atan2(d.x) + gaussian(sigma, rng))
}

/// Least-squares intersection of bearing lines `(anchor, bearing)`.
pub fn triangulate_aoa(measurements: &[(Vector2<f64>, f64)]) -> Result<Vector2<f64>> {
    if measurements.len() < 2 {
        return Err(Error::invalid("at least two bearings are required"));
    }
    let mut a = Matrix2::zeros();
    let mut b = Vector2::zeros();
    for (anchor, phi) in measurements {
        let n = Vector2::new(-phi.sin(), phi.cos());
        let nn = n * n.transpose();
        a += nn;
        b += nn * anchor;
    }
    let det = a.determinant();
    if det.abs() <= 1e-12 * a.trace().powi(2) {
        return Err(Error::DegenerateGeometry(
            "bearing lines are parallel".into(),
        ));
    }
    a.try_inverse()
        .map(|inv| inv * b)
        .ok_or_else(|| Error::DegenerateGeometry("bearing lines are parallel".into()))
}

/// Beamscan AoA over `[−π/2, π/2]` for a ULA snapshot.
pub fn beamscan_aoa(
    snapshot: &[Complex64],
    spacing: f64,
    lambda: f64,
    points: usize,
) -> Result<f64> {
    if snapshot.is_empty() || points < 2 {
        return Err(Error::invalid(
            "need a snapshot and at least two scan points",
        ));
    }
    let v = snapshot.len();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..points {
        let theta = -PI / 2.0 + PI * i as f64 / (points - 1) as f64;
        let a = ula_steering(v, spacing, theta, lambda);
        let p = a
            .iter()
            .zip(snapshot)
            .map(|(a, y)| a.conj() * y)
            .sum::<Complex64>()
            .norm();
        if p > best.0 {
            best = (p, theta);
        }
    }
    Ok(best.1)
}

/// Angular resolution limit `λ/(V·spacing)` of a ULA (radians).
pub fn ula_resolution(antennas: usize, spacing: f64, lambda: f64) -> f64 {
    lambda / (antennas as f64 * spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid() -> SubcarrierGrid {
        SubcarrierGrid::new(64, 5.0e9, 312.5e3).unwrap()
    }

    #[test]
    fn rss_logdistance_cases() {
        let mut rng = rng_from_seed(0);
        assert_abs_diff_eq!(
            rss_logdistance(10.0, 2.0, 100.0, 0.0, &mut rng).unwrap(),
            -30.0,
            epsilon = 1e-12
        );
        assert_eq!(
            rss_logdistance(10.0, 2.0, 1.0, 0.0, &mut rng).unwrap(),
            10.0
        );
        assert!(rss_logdistance(10.0, 2.0, 0.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn rss_logdistance_slope_regression() {
        let mut rng = rng_from_seed(0);
        let alpha = 2.7;
        let pts: Vec<(f64, f64)> = (1..=1000)
            .map(|d| {
                let d = d as f64;
                (
                    d.log10(),
                    rss_logdistance(0.0, alpha, d, 0.0, &mut rng).unwrap(),
                )
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        assert_abs_diff_eq!(sxy / sxx, -10.0 * alpha, epsilon = 1e-9);
    }

    #[test]
    fn rss_of_cases() {
        let ones = vec![Complex64::new(1.0, 0.0); 5];
        assert_abs_diff_eq!(rss_of(&ones).unwrap(), 0.0, epsilon = 1e-15);
        let tens: Vec<Complex64> = ones.iter().map(|v| v * 10.0).collect();
        assert_abs_diff_eq!(rss_of(&tens).unwrap(), 20.0, epsilon = 1e-12);
        assert_eq!(
            rss_of(&[Complex64::new(0.0, 0.0)]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(rss_of(&[]).is_err());
    }

    #[test]
    fn tof_single_path_on_grid() {
        let g = grid();
        let ts = g.sample_period();
        let x: Vec<Complex64> = (0..g.count)
            .map(|n| Complex64::from_polar(1.0, n as f64 * 0.7))
            .collect();
        let h = multipath_channel(&g, &[(Complex64::new(0.8, 0.1), 3.0 * ts)]);
        let y: Vec<Complex64> = h.iter().zip(&x).map(|(h, x)| h * x).collect();
        let est = tof_estimate_ofdm(&y, &x, &g, DEFAULT_TOF_OVERSAMPLE).unwrap();
        assert!((est.tau - 3.0 * ts).abs() <= ts / DEFAULT_TOF_OVERSAMPLE as f64 / 2.0);
        assert_abs_diff_eq!(est.peak_to_leakage, g.count as f64, epsilon = 1e-6);
    }

    #[test]
    fn tof_zero_delay() {
        let g = grid();
        let x = vec![Complex64::new(1.0, 0.0); g.count];
        let y = multipath_channel(&g, &[(Complex64::new(1.0, 0.0), 0.0)]);
        assert_eq!(tof_estimate_ofdm(&y, &x, &g, 16).unwrap().tau, 0.0);
    }

    #[test]
    fn tof_two_paths_picks_earlier() {
        let g = grid();
        let ts = g.sample_period();
        let x = vec![Complex64::new(1.0, 0.0); g.count];
        let y = multipath_channel(
            &g,
            &[
                (Complex64::new(1.0, 0.0), 5.0 * ts),
                (Complex64::new(0.0, 0.7), 7.0 * ts),
            ],
        );
        let est = tof_estimate_ofdm(&y, &x, &g, 16).unwrap();
        assert!(
            (est.tau - 5.0 * ts).abs() <= ts / 32.0,
            "tau {}",
            est.tau / ts
        );
    }

    #[test]
    fn tof_flat_spectrum_unresolved() {
        let g = grid();
        let x = vec![Complex64::new(1.0, 0.0); g.count];
        let mut y = vec![Complex64::new(0.0, 0.0); g.count];
        y[5] = Complex64::new(1.0, 0.0);
        assert!(matches!(
            tof_estimate_ofdm(&y, &x, &g, 16),
            Err(Error::Unresolved(_))
        ));
        let zero = vec![Complex64::new(0.0, 0.0); g.count];
        assert!(matches!(
            tof_estimate_ofdm(&zero, &x, &g, 16),
            Err(Error::Unresolved(_))
        ));
    }

    #[test]
    fn fmcw_cases() {
        let tau = fmcw_tof(1e6, 1e12).unwrap();
        assert_abs_diff_eq!(tau, 1e-6, epsilon = 1e-18);
        assert_abs_diff_eq!(fmcw_range(1e6, 1e12).unwrap(), 299.792458, epsilon = 1e-9);
        assert_eq!(fmcw_tof(0.0, 1e12).unwrap(), 0.0);
        assert!(fmcw_tof(1.0, 0.0).is_err());
        assert!(fmcw_mixed_signal(1e-6, 1e13, 10e6, 1e-3).is_err());
    }

    #[test]
    fn fmcw_round_trip() {
        let fs = 10e6;
        let slope = 1e12;
        let tau = 250e3 / slope;
        let mixed = fmcw_mixed_signal(tau, slope, fs, 1e-3).unwrap();
        let beat = fmcw_beat(&mixed, fs).unwrap();
        assert!((beat - 250e3).abs() <= 1e3);
        let back = fmcw_tof(beat, slope).unwrap();
        assert!((back - tau).abs() <= 1e3 / slope);
    }

    #[test]
    fn doppler_cases() {
        assert_abs_diff_eq!(doppler_shift(1.0, 0.0, 3.198e9), 21.335, epsilon = 1e-3);
        assert_eq!(doppler_shift(0.0, 0.3, 3.198e9), 0.0);
        assert_abs_diff_eq!(doppler_shift(1.0, PI / 2.0, 3.198e9), 0.0, epsilon = 1e-12);
        let prf = 100.0;
        let st = doppler_slow_time(-21.0, prf, 1000).unwrap();
        let est = doppler_estimate(&st, prf).unwrap();
        assert!((est + 21.0).abs() <= prf / 1000.0);
        assert!(doppler_slow_time(60.0, prf, 10).is_err());
    }

    #[test]
    fn aoa_cases() {
        let mut rng = rng_from_seed(0);
        let o = Vector2::zeros();
        assert_abs_diff_eq!(
            aoa_geometric(&Vector2::new(1.0, 1.0), &o, 0.0, &mut rng).unwrap(),
            PI / 4.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            aoa_geometric(&Vector2::new(-1.0, 0.0), &o, 0.0, &mut rng).unwrap(),
            PI,
            epsilon = 1e-15
        );
        assert!(aoa_geometric(&o, &o, 0.0, &mut rng).is_err());
    }

    #[test]
    fn triangulation_exact_and_degenerate() {
        let mut rng = rng_from_seed(0);
        let u = Vector2::new(0.3, 0.7);
        let anchors = [
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 1.5),
        ];
        let meas: Vec<_> = anchors
            .iter()
            .map(|a| (*a, aoa_geometric(&u, a, 0.0, &mut rng).unwrap()))
            .collect();
        assert!((triangulate_aoa(&meas[..2]).unwrap() - u).norm() < 1e-9);
        assert!((triangulate_aoa(&meas).unwrap() - u).norm() < 1e-9);
        let parallel = [(Vector2::new(0.0, 0.0), 0.3), (Vector2::new(0.0, 1.0), 0.3)];
        assert!(matches!(
            triangulate_aoa(&parallel),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(triangulate_aoa(&meas[..1]).is_err());
    }

    #[test]
    fn triangulation_perturbed_matches_grid_oracle() {
        let mut rng = rng_from_seed(17);
        let u = Vector2::new(0.6, 0.8);
        let anchors = [
            Vector2::new(0.0, 0.0),
            Vector2::new(1.2, 0.0),
            Vector2::new(0.0, 1.6),
        ];
        let meas: Vec<_> = anchors
            .iter()
            .map(|a| (*a, aoa_geometric(&u, a, 1e-3, &mut rng).unwrap()))
            .collect();
        let est = triangulate_aoa(&meas).unwrap();
        assert!((est - u).norm() < 1e-2);
        // Brute-force oracle: minimise the same perpendicular-distance cost on a grid.
        let cost = |p: Vector2<f64>| -> f64 {
            meas.iter()
                .map(|(a, phi)| (-(phi.sin()) * (p.x - a.x) + phi.cos() * (p.y - a.y)).powi(2))
                .sum()
        };
        let mut best = (f64::INFINITY, Vector2::zeros());
        let step = 2e-4;
        for i in 0..=200 {
            for j in 0..=200 {
                let p = Vector2::new(0.58 + i as f64 * step, 0.78 + j as f64 * step);
                let c = cost(p);
                if c < best.0 {
                    best = (c, p);
                }
            }
        }
        assert!((best.1 - est).norm() <= step);
    }

    #[test]
    fn beamscan_recovers_angle() {
        let lambda = 0.1;
        let snap = ula_steering(8, 0.05, 0.4, lambda);
        let est = beamscan_aoa(&snap, 0.05, lambda, 3601).unwrap();
        assert!((est - 0.4).abs() < 1e-3);
        assert_abs_diff_eq!(ula_resolution(8, 0.05, lambda), 0.25, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn doppler_symmetries(v in 0.01..50.0f64, phi in -3.0..3.0f64) {
            let f = 3.198e9;
            prop_assert!((doppler_shift(-v, phi, f) + doppler_shift(v, phi, f)).abs() < 1e-9);
            prop_assert!((doppler_shift(v, -phi, f) - doppler_shift(v, phi, f)).abs() < 1e-9);
            let d = doppler_shift(v, phi, f);
            if phi.cos() > 1e-9 { prop_assert!(d > 0.0); }
            if phi.cos() < -1e-9 { prop_assert!(d < 0.0); }
        }

        #[test]
        fn tof_on_grid_within_half_step(k in 0usize..(64 * 16)) {
            let g = grid();
            let step = g.sample_period() / 16.0;
            let tau = k as f64 * step;
            let x = vec![Complex64::new(1.0, 0.0); g.count];
            let y = multipath_channel(&g, &[(Complex64::new(1.0, 0.0), tau)]);
            let est = tof_estimate_ofdm(&y, &x, &g, 16).unwrap();
            let period = g.sample_period() * g.count as f64;
            let err = (est.tau - tau).rem_euclid(period);
            prop_assert!(err.min(period - err) <= step / 2.0 + 1e-15);
        }

        #[test]
        fn triangulation_exact_any_count(ux in -2.0..2.0f64, uy in 3.0..5.0f64, n in 2usize..6) {
            let u = Vector2::new(ux, uy);
            let meas: Vec<_> = (0..n).map(|i| {
                let a = Vector2::new(i as f64 - 2.0, (i % 2) as f64 * 0.5);
                let d = u - a;
                (a, d.y.atan2(d.x))
            }).collect();
            prop_assert!((triangulate_aoa(&meas).unwrap() - u).norm() < 1e-9);
        }
    }
}
