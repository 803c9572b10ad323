//! Power, battery and carbon accounting, plus the energy-profile channel through
//! which locations report their state to the controller.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ServerState, SimTick};

pub const SECONDS_PER_HOUR: f64 = 3600.0;
pub const WH_PER_MWH: f64 = 1_000_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("load must be within [0, 1], got {0}")]
    LoadOutOfRange(f64),
    #[error("maximum power must be positive, got {0} W")]
    NonPositivePower(f64),
    #[error("invalid energy state for {location}: {reason}")]
    InvalidState { location: String, reason: String },
}

/// Marginal operating emissions rate, lbs CO2 per MWh.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CarbonIntensity(pub f64);

impl CarbonIntensity {
    pub fn new(lbs_per_mwh: f64) -> Option<Self> {
        (lbs_per_mwh >= 0.0 && lbs_per_mwh.is_finite()).then_some(CarbonIntensity(lbs_per_mwh))
    }
}

/// Battery and solar state of one location; shared by every server there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyState {
    pub location_id: String,
    /// Stored energy, Wh.
    pub battery_level: f64,
    /// Wh.
    pub battery_capacity: f64,
    /// W.
    pub max_discharge_rate: f64,
    /// Fraction of capacity held back from scheduling decisions.
    pub buffer_fraction: f64,
    /// Current solar output, W.
    pub solar_output: f64,
    /// Window, in seconds, over which the energy above the buffer is spread when
    /// converting it to a sustainable discharge power.
    pub discharge_horizon_s: f64,
}

impl EnergyState {
    pub const DEFAULT_BUFFER_FRACTION: f64 = 0.20;
    pub const DEFAULT_DISCHARGE_HORIZON_S: f64 = 7200.0;

    pub fn new(location_id: impl Into<String>, capacity_wh: f64, max_discharge_rate: f64) -> Self {
        EnergyState {
            location_id: location_id.into(),
            battery_level: capacity_wh,
            battery_capacity: capacity_wh,
            max_discharge_rate,
            buffer_fraction: Self::DEFAULT_BUFFER_FRACTION,
            solar_output: 0.0,
            discharge_horizon_s: Self::DEFAULT_DISCHARGE_HORIZON_S,
        }
    }

    pub fn buffer_wh(&self) -> f64 {
        self.buffer_fraction * self.battery_capacity
    }

    pub fn soc(&self) -> f64 {
        self.battery_level / self.battery_capacity
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        let fail = |reason: String| {
            Err(EnergyError::InvalidState {
                location: self.location_id.clone(),
                reason,
            })
        };
        if !(self.battery_capacity > 0.0) {
            return fail(format!("capacity {} Wh must be positive", self.battery_capacity));
        }
        if !(0.0..=self.battery_capacity).contains(&self.battery_level) {
            return fail(format!(
                "level {} Wh outside [0, {}]",
                self.battery_level, self.battery_capacity
            ));
        }
        if !(self.max_discharge_rate > 0.0) {
            return fail(format!("max discharge {} W must be positive", self.max_discharge_rate));
        }
        if !(0.0..1.0).contains(&self.buffer_fraction) {
            return fail(format!("buffer fraction {} outside [0,1)", self.buffer_fraction));
        }
        if !(self.solar_output >= 0.0) {
            return fail(format!("solar output {} W is negative", self.solar_output));
        }
        if !(self.discharge_horizon_s > 0.0) {
            return fail(format!("discharge horizon {} s must be positive", self.discharge_horizon_s));
        }
        Ok(())
    }

    /// Discharge power the battery can sustain without dipping into the buffer.
    pub fn usable_discharge(&self) -> f64 {
        let above = self.battery_level - self.buffer_wh();
        if above <= 0.0 {
            return 0.0;
        }
        (above * SECONDS_PER_HOUR / self.discharge_horizon_s).min(self.max_discharge_rate)
    }
}

/// Linear power model. Offline servers draw nothing.
pub fn power_draw(s: &ServerState, load: f64) -> Result<f64, EnergyError> {
    if !(0.0..=1.0).contains(&load) {
        return Err(EnergyError::LoadOutOfRange(load));
    }
    if !s.online {
        return Ok(0.0);
    }
    Ok(s.p_idle + load * (s.p_peak - s.p_idle))
}

/// How long, in seconds, the energy buffer keeps a location running at `p_max` watts.
/// This is the largest profile staleness the buffer can absorb.
pub fn op_time(e: &EnergyState, p_max: f64) -> Result<f64, EnergyError> {
    if !(p_max > 0.0) {
        return Err(EnergyError::NonPositivePower(p_max));
    }
    Ok(e.buffer_wh() / p_max * SECONDS_PER_HOUR)
}

/// Usable battery discharge plus solar, minus what running functions draw. Negative
/// values mean the location is already overcommitted.
pub fn avail_energy(e: &EnergyState, running_load_watts: f64) -> f64 {
    e.usable_discharge() + e.solar_output - running_load_watts
}

/// Result of one battery integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryStep {
    pub state: EnergyState,
    pub charged_wh: f64,
    pub discharged_wh: f64,
    /// The load could not be fully served: the battery ran empty or the discharge
    /// rate limit was below the deficit.
    pub shutdown: bool,
}

/// Integrates solar charge and load discharge over `dt` seconds.
///
/// Charging is bounded only by headroom. The buffer is not enforced here: running
/// work may drain the battery below it.
pub fn battery_step(e: &EnergyState, solar: f64, load: f64, dt: f64) -> BatteryStep {
    let mut state = e.clone();
    state.solar_output = solar;
    let net = solar - load;
    let hours = dt / SECONDS_PER_HOUR;
    let mut charged_wh = 0.0;
    let mut discharged_wh = 0.0;
    let mut shutdown = false;
    if net >= 0.0 {
        let headroom = e.battery_capacity - e.battery_level;
        charged_wh = (net * hours).min(headroom).max(0.0);
        state.battery_level = e.battery_level + charged_wh;
    } else {
        let deficit = -net;
        let rate = deficit.min(e.max_discharge_rate);
        if deficit > e.max_discharge_rate {
            shutdown = true;
        }
        let wanted = rate * hours;
        if wanted > e.battery_level {
            discharged_wh = e.battery_level;
            state.battery_level = 0.0;
            shutdown = true;
        } else {
            discharged_wh = wanted;
            state.battery_level = e.battery_level - wanted;
        }
    }
    state.battery_level = state.battery_level.clamp(0.0, state.battery_capacity);
    BatteryStep {
        state,
        charged_wh,
        discharged_wh,
        shutdown,
    }
}

/// Emissions in lbs for `energy_wh` consumed at `moer` lbs/MWh.
pub fn scaled_emissions(energy_wh: f64, moer: f64) -> f64 {
    energy_wh / WH_PER_MWH * moer
}

/// Timestamped snapshot a location publishes to the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfileMsg {
    pub location_id: String,
    pub timestamp: SimTick,
    /// Grid-connected: current MOER.
    pub carbon_intensity: Option<f64>,
    /// Grid-isolated: battery and solar state.
    pub energy: Option<EnergyState>,
}

/// Ordered, delayed delivery of profile messages for one location.
#[derive(Debug, Clone, Default)]
pub struct ProfileChannel {
    in_flight: VecDeque<(SimTick, EnergyProfileMsg)>,
    latest: Option<EnergyProfileMsg>,
}

impl ProfileChannel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sends `msg` so that it becomes visible at `msg.timestamp + delay`.
    pub fn publish(&mut self, msg: EnergyProfileMsg, delay: u64) {
        let deliver_at = msg.timestamp.plus(delay);
        self.in_flight.push_back((deliver_at, msg));
    }

    /// Delivers everything due by `now` and returns the freshest visible snapshot.
    pub fn deliver(&mut self, now: SimTick) -> Option<&EnergyProfileMsg> {
        while let Some((due, _)) = self.in_flight.front() {
            if *due > now {
                break;
            }
            let (_, msg) = self.in_flight.pop_front().expect("front checked");
            self.latest = Some(msg);
        }
        self.latest.as_ref()
    }

    pub fn latest(&self) -> Option<&EnergyProfileMsg> {
        self.latest.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pi() -> ServerState {
        ServerState::new("pi", "loc", 3, 3.0, 7.0)
    }

    fn battery(level: f64, capacity: f64) -> EnergyState {
        let mut e = EnergyState::new("loc", capacity, 10_000.0);
        e.battery_level = level;
        e
    }

    #[test]
    fn power_model_points() {
        let s = pi();
        assert_eq!(power_draw(&s, 0.5).unwrap(), 5.0);
        assert_eq!(power_draw(&s, 0.0).unwrap(), 3.0);
        assert_eq!(power_draw(&s, 1.0).unwrap(), 7.0);
        assert!(power_draw(&s, 1.01).is_err());
        assert!(power_draw(&s, -0.1).is_err());
        let mut off = pi();
        off.online = false;
        assert_eq!(power_draw(&off, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn op_time_examples() {
        let mut e = EnergyState::new("loc", 5000.0, 1000.0);
        assert_eq!(op_time(&e, 500.0).unwrap(), 7200.0);
        e.buffer_fraction = 0.0;
        assert_eq!(op_time(&e, 500.0).unwrap(), 0.0);
        let e = EnergyState::new("loc", 3800.0, 1000.0);
        // 760 Wh at 7 W is 108.571 hours.
        let secs = op_time(&e, 7.0).unwrap();
        assert!((secs - 760.0 / 7.0 * 3600.0).abs() < 1e-6);
        assert!((secs / 3600.0 - 108.571).abs() < 1e-3);
        assert!(op_time(&e, 0.0).is_err());
    }

    #[test]
    fn avail_energy_examples() {
        // 100 W usable discharge: 200 Wh above the buffer spread over 2 h.
        let mut e = battery(1000.0 + 200.0, 5000.0);
        e.solar_output = 200.0;
        assert!((e.usable_discharge() - 100.0).abs() < 1e-9);
        assert!((avail_energy(&e, 50.0) - 250.0).abs() < 1e-9);

        let mut at_buffer = battery(1000.0, 5000.0);
        at_buffer.solar_output = 0.0;
        assert_eq!(avail_energy(&at_buffer, 0.0), 0.0);

        let mut empty = battery(0.0, 5000.0);
        empty.solar_output = 100.0;
        assert_eq!(avail_energy(&empty, 300.0), -200.0);
    }

    #[test]
    fn usable_discharge_respects_rate_limit() {
        let mut e = battery(5000.0, 5000.0);
        e.max_discharge_rate = 300.0;
        assert_eq!(e.usable_discharge(), 300.0);
    }

    #[test]
    fn battery_step_examples() {
        let e = battery(1000.0, 3800.0);
        let r = battery_step(&e, 200.0, 500.0, 3600.0);
        assert!((r.state.battery_level - 700.0).abs() < 1e-9);
        assert!(!r.shutdown);

        let e = battery(3700.0, 3800.0);
        let r = battery_step(&e, 400.0, 200.0, 3600.0);
        assert_eq!(r.state.battery_level, 3800.0);
        assert_eq!(r.charged_wh, 100.0);

        let e = battery(1234.5, 3800.0);
        let r = battery_step(&e, 150.0, 150.0, 1.0);
        assert_eq!(r.state.battery_level, 1234.5);
        assert!(!r.shutdown);
    }

    #[test]
    fn battery_step_shutdown_paths() {
        let e = battery(10.0, 3800.0);
        let r = battery_step(&e, 0.0, 100.0, 3600.0);
        assert_eq!(r.state.battery_level, 0.0);
        assert_eq!(r.discharged_wh, 10.0);
        assert!(r.shutdown);

        let mut e = battery(3000.0, 3800.0);
        e.max_discharge_rate = 50.0;
        let r = battery_step(&e, 0.0, 100.0, 3600.0);
        assert!(r.shutdown);
        assert!((r.discharged_wh - 50.0).abs() < 1e-9);
    }

    #[test]
    fn emissions_conversion() {
        assert!((scaled_emissions(1.0, 1000.0) - 0.001).abs() < 1e-15);
        assert!((scaled_emissions(1.0, 991.0) - 9.91e-4).abs() < 1e-15);
        assert_eq!(scaled_emissions(0.0, 991.0), 0.0);
    }

    fn msg(t: u64, ci: f64) -> EnergyProfileMsg {
        EnergyProfileMsg {
            location_id: "loc".into(),
            timestamp: SimTick(t),
            carbon_intensity: Some(ci),
            energy: None,
        }
    }

    #[test]
    fn channel_without_delay_is_current() {
        let mut ch = ProfileChannel::new();
        assert!(ch.deliver(SimTick(0)).is_none());
        for t in 0..10 {
            ch.publish(msg(t, t as f64), 0);
            assert_eq!(ch.deliver(SimTick(t)).unwrap().timestamp, SimTick(t));
        }
    }

    #[test]
    fn channel_with_delay_is_stale() {
        let mut ch = ProfileChannel::new();
        for t in 0..=100 {
            ch.publish(msg(t, t as f64), 30);
            let seen = ch.deliver(SimTick(t)).map(|m| m.timestamp);
            if t < 30 {
                assert_eq!(seen, None);
            } else {
                assert_eq!(seen, Some(SimTick(t - 30)));
            }
        }
    }

    proptest! {
        #[test]
        fn step_stays_in_bounds_and_conserves(
            level_frac in 0.0f64..=1.0,
            capacity in 1.0f64..10_000.0,
            solar in 0.0f64..2000.0,
            load in 0.0f64..2000.0,
            rate in 1.0f64..3000.0,
            dt in 0.1f64..3600.0,
        ) {
            let mut e = battery(level_frac * capacity, capacity);
            e.max_discharge_rate = rate;
            let r = battery_step(&e, solar, load, dt);
            prop_assert!(r.state.battery_level >= 0.0);
            prop_assert!(r.state.battery_level <= capacity);
            let delta = r.state.battery_level - e.battery_level;
            prop_assert!((delta - (r.charged_wh - r.discharged_wh)).abs() <= 1e-6);
        }

        #[test]
        fn power_monotone_in_load(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let s = pi();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p_lo = power_draw(&s, lo).unwrap();
            let p_hi = power_draw(&s, hi).unwrap();
            prop_assert!(p_lo <= p_hi);
            prop_assert!(p_lo >= s.p_idle && p_hi <= s.p_peak);
        }

        #[test]
        fn emissions_linear(e in 0.0f64..1e6, m in 0.0f64..2000.0, k in 0.0f64..100.0) {
            let base = scaled_emissions(e, m);
            prop_assert!((scaled_emissions(k * e, m) - k * base).abs() <= 1e-9 * (1.0 + k * base));
            prop_assert!((scaled_emissions(e, k * m) - k * base).abs() <= 1e-9 * (1.0 + k * base));
        }
    }
}
