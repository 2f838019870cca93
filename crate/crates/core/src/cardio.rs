//! Two-element Windkessel model of the arterial circulation.
//!
//! The algebraic pressure expressions are the fixed decoder of the
//! physiology-driven autoencoder and the observation model of the simulator.
//! [`integrate_reference`] steps the underlying ODE and exists only to check
//! the closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds per minute; links heart rate (beats/min) and filling time (s).
pub const SECONDS_PER_MINUTE: f64 = 60.0;

/// Deviations are clamped to this magnitude before the exponential map.
pub const MAX_DEVIATION: f64 = 4.0;

/// Hidden cardiovascular state.
///
/// Units: `r` mmHg·s/mL, `c` mL/mmHg, `sv` mL, `f` beats/min, `t` s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CardioParams {
    r: f64,
    c: f64,
    sv: f64,
    f: f64,
    t: f64,
}

impl CardioParams {
    /// Validates positivity and the `F·T = 60` link.
    pub fn new(r: f64, c: f64, sv: f64, f: f64, t: f64) -> Result<Self> {
        for (name, v) in [("R", r), ("C", c), ("SV", sv), ("F", f), ("T", t)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and positive, got {v}")));
            }
        }
        let rel = (f * t - SECONDS_PER_MINUTE).abs() / SECONDS_PER_MINUTE;
        if rel > 1e-9 {
            return Err(Error::Domain(format!("F·T must equal 60 (F={f}, T={t})")));
        }
        let tau = r * c;
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Domain(format!("time constant R·C = {tau} is not finite and positive")));
        }
        Ok(Self { r, c, sv, f, t })
    }

    /// Builds parameters from a heart rate, deriving the filling time.
    pub fn from_rate(r: f64, c: f64, sv: f64, f: f64) -> Result<Self> {
        Self::new(r, c, sv, f, SECONDS_PER_MINUTE / f)
    }

    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn sv(&self) -> f64 {
        self.sv
    }
    pub fn f(&self) -> f64 {
        self.f
    }
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn time_constant(&self) -> f64 {
        self.r * self.c
    }
}

/// Observable pressures (mmHg) and heart rate (beats/min).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pressures {
    pub sys: f64,
    pub dias: f64,
    pub map: f64,
    pub hr: f64,
}

impl Pressures {
    pub fn to_array(&self) -> [f64; 4] {
        [self.sys, self.dias, self.map, self.hr]
    }
}

/// Fixed reference values that latent deviations are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CardioBaselines {
    pub r0: f64,
    pub c0: f64,
    pub sv0: f64,
    pub f0: f64,
}

impl Default for CardioBaselines {
    fn default() -> Self {
        Self { r0: 1.0, c0: 2.0, sv0: 70.0, f0: 75.0 }
    }
}

impl CardioBaselines {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("R0", self.r0), ("C0", self.c0), ("SV0", self.sv0), ("F0", self.f0)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("baseline {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> CardioParams {
        CardioParams::from_rate(self.r0, self.c0, self.sv0, self.f0).expect("validated baselines are positive")
    }
}

fn decay_terms(p: &CardioParams) -> Result<(f64, f64, f64)> {
    let k = p.t / p.time_constant();
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Domain(format!("T/RC = {k} is not finite and positive")));
    }
    let q = (-k).exp();
    // 1 - e^{-k}, accurate for small k
    let d = -(-k).exp_m1();
    if d <= 0.0 || !d.is_finite() {
        return Err(Error::Domain(format!("1 - e^(-T/RC) underflows for T/RC = {k}")));
    }
    Ok((k, q, d))
}

/// Closed-form systolic, diastolic and mean pressure for one beat.
pub fn decode(params: &CardioParams) -> Result<Pressures> {
    let (_, q, d) = decay_terms(params)?;
    let pulse = params.sv / params.c;
    Ok(Pressures { sys: pulse / d, dias: pulse * q / d, map: params.sv * params.r / params.t, hr: params.f })
}

/// Partial derivatives of `(sys, dias, map, hr)` with respect to
/// `(ln R, ln C, ln SV, ln F)`, with `T = 60/F` tied to the heart rate.
///
/// Rows are outputs, columns are log-parameters. Under the exponential
/// deviation map these are exactly the derivatives with respect to the
/// deviations themselves.
pub fn decode_log_jacobian(params: &CardioParams) -> Result<(Pressures, [[f64; 4]; 4])> {
    let out = decode(params)?;
    let (k, q, d) = decay_terms(params)?;
    let pulse = params.sv / params.c;
    // k = 60 / (F R C) so dk/dln(R) = dk/dln(C) = dk/dln(F) = -k, and
    // d sys/dk = d dias/dk = -pulse q / d^2.
    let via_k = pulse * q * k / (d * d);
    let jac = [
        [via_k, -out.sys + via_k, out.sys, via_k],
        [via_k, -out.dias + via_k, out.dias, via_k],
        [out.map, 0.0, out.map, out.map],
        [0.0, 0.0, 0.0, out.hr],
    ];
    Ok((out, jac))
}

/// Cardiac output in mL/min.
pub fn cardiac_output(params: &CardioParams) -> f64 {
    params.sv * params.f
}

/// Maps latent log-deviations `(δR, δC, δSV, δF)` onto physical parameters.
///
/// Each deviation is clamped to `[-4, 4]`; `T` is re-derived from `F`.
pub fn from_deviations(delta: [f64; 4], baselines: &CardioBaselines) -> CardioParams {
    let c = |x: f64| x.clamp(-MAX_DEVIATION, MAX_DEVIATION);
    let f = baselines.f0 * c(delta[3]).exp();
    CardioParams {
        r: baselines.r0 * c(delta[0]).exp(),
        c: baselines.c0 * c(delta[1]).exp(),
        sv: baselines.sv0 * c(delta[2]).exp(),
        f,
        t: SECONDS_PER_MINUTE / f,
    }
}

/// Steps `dP/dt = -P/(RC)` with an `SV/C` pressure jump at every beat onset
/// and returns the time-averaged pressure over the beats after the first 20%.
pub fn integrate_reference(params: &CardioParams, beats: usize, dt: f64) -> Result<f64> {
    if !(dt > 0.0 && dt <= params.t / 100.0 * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("dt = {dt} must be in (0, T/100] for T = {}", params.t)));
    }
    if beats < 2 {
        return Err(Error::Domain("need at least two beats".into()));
    }
    let steps_per_beat = (params.t / dt).round().max(1.0) as usize;
    let h = params.t / steps_per_beat as f64;
    let decay = h / params.time_constant();
    let jump = params.sv / params.c;
    let skip = beats / 5;

    let mut p = 0.0_f64;
    let mut acc = 0.0;
    let mut n = 0usize;
    for beat in 0..beats {
        p += jump;
        for _ in 0..steps_per_beat {
            // left-endpoint average over the step
            if beat >= skip {
                acc += p;
                n += 1;
            }
            p -= decay * p;
            if p < 0.0 {
                return Err(Error::Instability(format!("pressure became negative at beat {beat}")));
            }
        }
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn decode_reference_values() {
        let p = CardioParams::from_rate(1.0, 2.0, 70.0, 75.0).unwrap();
        assert!((p.t() - 0.8).abs() < 1e-15);
        let out = decode(&p).unwrap();
        // e^{-0.4} = 0.670320046...
        assert!((out.sys - 106.163).abs() < 1e-3, "{}", out.sys);
        assert!((out.dias - 71.163).abs() < 1e-3, "{}", out.dias);
        assert_eq!(out.map, 87.5);
        assert_eq!(out.hr, 75.0);
        assert!(close(out.sys - out.dias, 35.0, 1e-12));
    }

    #[test]
    fn long_filling_time_limit() {
        let p = CardioParams::from_rate(1.0, 2.0, 70.0, 0.5).unwrap(); // T = 120 s
        let out = decode(&p).unwrap();
        assert!(close(out.sys, 35.0, 1e-12));
        assert!(out.dias < 1e-10);
    }

    #[test]
    fn cardiac_output_is_product() {
        let p = CardioParams::from_rate(1.0, 2.0, 70.0, 75.0).unwrap();
        assert_eq!(cardiac_output(&p), 5250.0);
        let p = CardioParams::from_rate(1.0, 2.0, 60.0, 110.0).unwrap();
        assert!((cardiac_output(&p) - 6600.0).abs() < 1e-9);
        let p = CardioParams::from_rate(1.0, 2.0, 1e-12, 75.0).unwrap();
        assert!(cardiac_output(&p) < 1e-9);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(CardioParams::new(1.0, 2.0, 70.0, 75.0, 0.9).is_err());
        assert!(CardioParams::from_rate(-1.0, 2.0, 70.0, 75.0).is_err());
        assert!(CardioParams::from_rate(1.0, 0.0, 70.0, 75.0).is_err());
        assert!(CardioParams::from_rate(1.0, 2.0, f64::NAN, 75.0).is_err());
    }

    #[test]
    fn deviations_identity_and_scaling() {
        let b = CardioBaselines::default();
        let p = from_deviations([0.0; 4], &b);
        assert_eq!(p.r(), b.r0);
        assert_eq!(p.c(), b.c0);
        assert_eq!(p.sv(), b.sv0);
        assert_eq!(p.f(), b.f0);
        assert_eq!(p.t(), 0.8);

        let p = from_deviations([2f64.ln(), 0.0, 0.0, 0.0], &b);
        assert!(close(p.r(), 2.0, 1e-15));
        assert_eq!(p.c(), b.c0);

        let p = from_deviations([0.0, 0.0, 0.0, 1.2f64.ln()], &b);
        assert!(close(p.f(), 90.0, 1e-14));
        assert!(close(p.t(), 2.0 / 3.0, 1e-14));
    }

    #[test]
    fn deviations_are_clamped() {
        let b = CardioBaselines::default();
        let p = from_deviations([100.0, -100.0, 0.0, 0.0], &b);
        assert!(close(p.r(), 4f64.exp(), 1e-14));
        assert!(close(p.c(), 2.0 * (-4f64).exp(), 1e-14));
    }

    #[test]
    fn ode_mean_matches_closed_form() {
        let p = CardioParams::from_rate(1.0, 2.0, 70.0, 75.0).unwrap();
        let mean = integrate_reference(&p, 200, p.t() / 200.0).unwrap();
        assert!(close(mean, 87.5, 0.01), "{mean}");
    }

    #[test]
    fn ode_large_resistance_mean_near_peak() {
        // T/RC = 0.05: almost no decay within a beat
        let p = CardioParams::from_rate(8.0, 2.0, 70.0, 75.0).unwrap();
        let mean = integrate_reference(&p, 1500, p.t() / 100.0).unwrap();
        let sys = decode(&p).unwrap().sys;
        assert!(mean / sys > 0.97 && mean / sys < 1.0, "{}", mean / sys);
    }

    #[test]
    fn ode_zero_stroke_volume() {
        let p = CardioParams::from_rate(1.0, 2.0, 1e-12, 75.0).unwrap();
        let mean = integrate_reference(&p, 50, p.t() / 100.0).unwrap();
        assert!(mean < 1e-9);
    }

    #[test]
    fn ode_rejects_coarse_step() {
        let p = CardioParams::from_rate(1.0, 2.0, 70.0, 75.0).unwrap();
        assert!(integrate_reference(&p, 10, p.t() / 10.0).is_err());
    }

    #[test]
    fn log_jacobian_matches_finite_differences() {
        let b = CardioBaselines::default();
        let delta = [0.2, -0.3, 0.1, 0.25];
        let (_, jac) = decode_log_jacobian(&from_deviations(delta, &b)).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut up = delta;
            let mut dn = delta;
            up[j] += h;
            dn[j] -= h;
            let fu = decode(&from_deviations(up, &b)).unwrap().to_array();
            let fd = decode(&from_deviations(dn, &b)).unwrap().to_array();
            for i in 0..4 {
                let num = (fu[i] - fd[i]) / (2.0 * h);
                assert!((num - jac[i][j]).abs() <= 1e-6 * (1.0 + num.abs()), "({i},{j}) {num} vs {}", jac[i][j]);
            }
        }
    }

    proptest! {
        #[test]
        fn pulse_pressure_and_ratio_identities(
            r in 0.05f64..10.0, c in 0.1f64..10.0, sv in 5.0f64..200.0, f in 30.0f64..200.0
        ) {
            let p = CardioParams::from_rate(r, c, sv, f).unwrap();
            let out = decode(&p).unwrap();
            prop_assert!(close(out.sys - out.dias, sv / c, 1e-9));
            prop_assert!(close(out.dias / out.sys, (-p.t() / (r * c)).exp(), 1e-9));
            prop_assert!(out.sys > out.dias && out.dias > 0.0);
        }

        #[test]
        fn deviation_decode_is_deterministic(d in proptest::array::uniform4(-4.0f64..4.0)) {
            let b = CardioBaselines::default();
            let a = decode(&from_deviations(d, &b)).unwrap();
            let c = decode(&from_deviations(d, &b)).unwrap();
            prop_assert_eq!(a, c);
        }
    }
}
