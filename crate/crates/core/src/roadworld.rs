//! Synthetic driving-scene generator with an action-conditioned next frame.
//!
//! Each frame is a grayscale view of a straight road: sky above a horizon
//! line, a road surface with two perspective lane lines converging toward a
//! vanishing point, and a dark lead vehicle ahead in the lane. The hidden
//! state is two scalars — camera `lateral` offset and lead-vehicle apparent
//! `lead_scale` — and actions drive it:
//!
//! * steering shifts the whole scene laterally by `gain_steer` px per unit
//!   (the offset saturates at `±lateral_max`, the road edges),
//! * acceleration scales the lead vehicle by `1 + gain_accel · accel`
//!   (clamped to `[0.5, 2.0]`),
//! * braking dims the *next* frame's brightness by `1 − gain_brake · brake`
//!   (a one-frame transient).
//!
//! Rendering is a pure per-pixel closed form evaluated in `f64`, so a frame
//! is an exact deterministic function of `(state, brake)` and integer lateral
//! shifts reproduce pixel values bit-for-bit (up to edge fill). With pixel
//! coordinates `v = y + 0.5`, `u = x + 0.5 − (width/2 + lateral)`:
//!
//! ```text
//! sky   (v < horizon):  val = 0.70
//! road  (v ≥ horizon):  depth = (v − horizon) / (height − horizon)
//!                       val = 0.32 + 0.10 · depth
//! lane lines (side ∈ {−1, +1}, road rows only):
//!     center = side · lane_half_width · depth
//!     half   = line_width · (0.25 + 0.75 · depth)
//!     cov    = clamp(half − |u − center| + 0.5, 0, 1)
//!     val    += (0.92 − val) · cov
//! lead vehicle (any row): ρ = lead_scale
//!     bottom = horizon + lead_distance · ρ,  top = bottom − lead_height · ρ
//!     cw  = clamp(lead_width · ρ − |u| + 0.5, 0, 1)
//!     cv  = clamp(min(v − top, bottom − v) + 0.5, 0, 1)
//!     val += (0.15 − val) · cw · cv
//! brightness: val ·= 1 − gain_brake · brake,  then clamp to [0, 1]
//! ```
//!
//! Actions are a smooth clamped random walk, and optional Gaussian pixel
//! noise is added to rendered frames before the final clamp. Actions and
//! pixel noise use separate ChaCha streams of the same seed, so the action
//! sequence is independent of the noise setting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{ActionVector, DrivingLog};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gray levels of the scene elements.
const SKY_LEVEL: f64 = 0.70;
const ROAD_BASE: f64 = 0.32;
const ROAD_GRADIENT: f64 = 0.10;
const LINE_LEVEL: f64 = 0.92;
const LEAD_LEVEL: f64 = 0.15;

/// Apparent lead-vehicle scale is confined to this range.
const LEAD_SCALE_MIN: f64 = 0.5;
const LEAD_SCALE_MAX: f64 = 2.0;

/// Random-walk coefficients: next = clamp(decay · prev + noise_scale · z + bias).
const STEER_DECAY: f64 = 0.9;
const STEER_NOISE: f64 = 0.35;
const STEER_MAX: f64 = 3.0;
const ACCEL_DECAY: f64 = 0.9;
const ACCEL_NOISE: f64 = 0.30;
const ACCEL_MAX: f64 = 2.0;
const BRAKE_DECAY: f64 = 0.8;
const BRAKE_NOISE: f64 = 0.15;
const BRAKE_BIAS: f64 = -0.05;

/// Geometry, action gains, and noise level of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadworldConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Row (in pixel units) of the horizon line.
    pub horizon: f64,
    /// Distance from road center to each lane line at the bottom row, px.
    pub lane_half_width: f64,
    /// Painted-line half width at the bottom row, px.
    pub line_width: f64,
    /// Lead-vehicle half width at scale 1, px.
    pub lead_width: f64,
    /// Lead-vehicle height at scale 1, px.
    pub lead_height: f64,
    /// Rows between horizon and the vehicle's bottom edge at scale 1, px.
    pub lead_distance: f64,
    /// Lateral px shift per unit of steering.
    pub gain_steer: f64,
    /// Camera lateral offset saturates at ±this many px (the road edges).
    pub lateral_max: f64,
    /// Relative lead-scale change per unit of acceleration.
    pub gain_accel: f64,
    /// Brightness drop at full brake.
    pub gain_brake: f64,
    /// Std-dev of per-pixel Gaussian noise added to rendered frames.
    pub noise_sigma: f64,
}

impl Default for RoadworldConfig {
    fn default() -> Self {
        RoadworldConfig {
            seed: 0,
            n_frames: 500,
            height: 80,
            width: 160,
            horizon: 28.0,
            lane_half_width: 55.0,
            line_width: 2.5,
            lead_width: 18.0,
            lead_height: 14.0,
            lead_distance: 26.0,
            gain_steer: 2.0,
            lateral_max: 40.0,
            gain_accel: 0.05,
            gain_brake: 0.5,
            noise_sigma: 0.01,
        }
    }
}

/// The hidden scene state actions act upon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadState {
    pub lateral: f64,
    pub lead_scale: f64,
}

impl RoadworldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::InvalidConfig(format!(
                "roadworld needs at least 2 frames, got {}",
                self.n_frames
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("frame dimensions must be nonzero".into()));
        }
        if !(0.0..self.height as f64).contains(&self.horizon) {
            return Err(Error::InvalidConfig(format!(
                "horizon {} outside frame height {}",
                self.horizon, self.height
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.gain_brake) {
            return Err(Error::InvalidConfig(format!(
                "brake gain must lie in [0,1], got {}",
                self.gain_brake
            )));
        }
        if !(self.lateral_max > 0.0 && self.lateral_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lateral_max must be positive and finite, got {}",
                self.lateral_max
            )));
        }
        Ok(())
    }

    /// Camera centered, lead vehicle at unit scale.
    pub fn initial_state(&self) -> RoadState {
        RoadState {
            lateral: 0.0,
            lead_scale: 1.0,
        }
    }

    /// Applies one action to the hidden state.
    pub fn step(&self, state: RoadState, action: ActionVector) -> RoadState {
        RoadState {
            lateral: (state.lateral + self.gain_steer * action.steer() as f64)
                .clamp(-self.lateral_max, self.lateral_max),
            lead_scale: (state.lead_scale * (1.0 + self.gain_accel * action.accel() as f64))
                .clamp(LEAD_SCALE_MIN, LEAD_SCALE_MAX),
        }
    }

    /// Renders the scene for `state`, dimmed by the brake value of the action
    /// that produced it (0 for the first frame). Pure and noise-free.
    pub fn render(&self, state: RoadState, brake: f32) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let center = w as f64 / 2.0 + state.lateral;
        let rho = state.lead_scale;
        let lead_half_w = self.lead_width * rho;
        let lead_bottom = self.horizon + self.lead_distance * rho;
        let lead_top = lead_bottom - self.lead_height * rho;
        let dim = 1.0 - self.gain_brake * brake as f64;

        let mut out = Tensor::zeros(&[h, w, 1]);
        for y in 0..h {
            let v = y as f64 + 0.5;
            let row = &mut out.data_mut()[y * w..(y + 1) * w];
            for (x, px) in row.iter_mut().enumerate() {
                let u = x as f64 + 0.5 - center;
                let mut val = if v < self.horizon {
                    SKY_LEVEL
                } else {
                    let depth = (v - self.horizon) / (h as f64 - self.horizon);
                    let mut val = ROAD_BASE + ROAD_GRADIENT * depth;
                    for side in [-1.0, 1.0] {
                        let line_center = side * self.lane_half_width * depth;
                        let half = self.line_width * (0.25 + 0.75 * depth);
                        let cov = (half - (u - line_center).abs() + 0.5).clamp(0.0, 1.0);
                        val += (LINE_LEVEL - val) * cov;
                    }
                    val
                };
                let cw = (lead_half_w - u.abs() + 0.5).clamp(0.0, 1.0);
                let cv = ((v - lead_top).min(lead_bottom - v) + 0.5).clamp(0.0, 1.0);
                val += (LEAD_LEVEL - val) * cw * cv;
                *px = ((val * dim).clamp(0.0, 1.0)) as f32;
            }
        }
        out
    }
}

/// Draws `n` actions as a smooth clamped random walk starting at rest.
pub fn random_actions(rng: &mut ChaCha8Rng, n: usize) -> Vec<ActionVector> {
    let mut actions = Vec::with_capacity(n);
    let (mut accel, mut steer, mut brake) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let za: f64 = rng.sample(StandardNormal);
        let zs: f64 = rng.sample(StandardNormal);
        let zb: f64 = rng.sample(StandardNormal);
        accel = (ACCEL_DECAY * accel + ACCEL_NOISE * za).clamp(-ACCEL_MAX, ACCEL_MAX);
        steer = (STEER_DECAY * steer + STEER_NOISE * zs).clamp(-STEER_MAX, STEER_MAX);
        brake = (BRAKE_DECAY * brake + BRAKE_NOISE * zb + BRAKE_BIAS).clamp(0.0, 1.0);
        actions.push(ActionVector::new(accel as f32, steer as f32, brake as f32));
    }
    actions
}

/// Rolls the given action sequence through the world and renders
/// `actions.len() + 1` frames, with `config.noise_sigma` pixel noise drawn
/// from the config's noise stream.
pub fn simulate(config: &RoadworldConfig, actions: &[ActionVector]) -> Result<DrivingLog> {
    config.validate()?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(1);
    let mut add_noise = |frame: Tensor<f32>| -> Tensor<f32> {
        if config.noise_sigma == 0.0 {
            return frame;
        }
        let sigma = config.noise_sigma;
        let mut frame = frame;
        for px in frame.data_mut() {
            let z: f64 = noise_rng.sample(StandardNormal);
            *px = ((*px as f64 + sigma * z).clamp(0.0, 1.0)) as f32;
        }
        frame
    };

    let mut state = config.initial_state();
    let mut frames = Vec::with_capacity(actions.len() + 1);
    frames.push(add_noise(config.render(state, 0.0)));
    for a in actions {
        state = config.step(state, *a);
        frames.push(add_noise(config.render(state, a.brake())));
    }
    DrivingLog::new(frames, actions.to_vec())
}

/// Generates a full log: a seeded random-walk action sequence
/// (`n_frames − 1` actions) rolled through [`simulate`].
pub fn generate(config: &RoadworldConfig) -> Result<DrivingLog> {
    config.validate()?;
    let mut action_rng = ChaCha8Rng::seed_from_u64(config.seed);
    action_rng.set_stream(0);
    let actions = random_actions(&mut action_rng, config.n_frames - 1);
    simulate(config, &actions)
}
