//! Straight-line minimum-jerk references.

use serde::{Deserialize, Serialize};

use crate::world::{self, Point};

/// Peak of `s'(τ)` for the quintic time scaling, reached at `τ = 0.5`.
pub const PEAK_RATE: f64 = 1.875;

const ZERO_LENGTH: f64 = 1e-12;

pub fn s(tau: f64) -> f64 {
    let t3 = tau * tau * tau;
    t3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)
}

pub fn ds(tau: f64) -> f64 {
    let t2 = tau * tau;
    30.0 * t2 * (1.0 - 2.0 * tau + tau * tau)
}

pub fn dds(tau: f64) -> f64 {
    60.0 * tau * (1.0 - 3.0 * tau + 2.0 * tau * tau)
}

/// Duration of a segment of `length` meters under the speed limit. The limit is shaded by a few
/// ulps so that the rounded peak speed never exceeds `v_max`.
pub fn segment_duration(length: f64, v_max: f64, min_duration: f64) -> f64 {
    (PEAK_RATE * length / (v_max * (1.0 - 4.0 * f64::EPSILON))).max(min_duration)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Starts at rest from the current position.
    RestToRest,
    /// Starts on the speed profile where the reference speed equals the current speed along the
    /// segment, so consecutive subgoals do not force a stop.
    #[default]
    PhaseMatched,
}

/// Quintic segment, sampled by time since activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinJerk {
    /// Position at `τ = 0`. Lies behind the current position when phase-matched.
    pub origin: Point,
    pub direction: Vec<f64>,
    pub length: f64,
    pub duration: f64,
    pub tau0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSample {
    pub position: Point,
    pub velocity: Vec<f64>,
    pub acceleration: Vec<f64>,
}

impl MinJerk {
    pub fn stationary(at: &[f64]) -> Self {
        Self {
            origin: at.to_vec(),
            direction: vec![0.0; at.len()],
            length: 0.0,
            duration: 0.0,
            tau0: 0.0,
        }
    }

    pub fn rest_to_rest(from: &[f64], target: &[f64], v_max: f64, min_duration: f64) -> Self {
        let d: Vec<f64> = target.iter().zip(from).map(|(t, p)| t - p).collect();
        let length = world::norm(&d);
        if length < ZERO_LENGTH {
            return Self::stationary(target);
        }
        Self {
            origin: from.to_vec(),
            direction: d.iter().map(|c| c / length).collect(),
            length,
            duration: segment_duration(length, v_max, min_duration),
            tau0: 0.0,
        }
    }

    pub fn phase_matched(from: &[f64], velocity: &[f64], target: &[f64], v_max: f64, min_duration: f64) -> Self {
        let d: Vec<f64> = target.iter().zip(from).map(|(t, p)| t - p).collect();
        let remaining = world::norm(&d);
        if remaining < ZERO_LENGTH {
            return Self::stationary(target);
        }
        let direction: Vec<f64> = d.iter().map(|c| c / remaining).collect();
        let along: f64 = velocity.iter().zip(&direction).map(|(v, u)| v * u).sum();
        let rate = PEAK_RATE * (along / v_max).clamp(0.0, 1.0);
        let tau0 = invert_rate(rate);
        let length = remaining / (1.0 - s(tau0));
        Self {
            origin: from.iter().zip(&direction).map(|(p, u)| p - u * (length - remaining)).collect(),
            direction,
            length,
            duration: segment_duration(length, v_max, min_duration),
            tau0,
        }
    }

    pub fn new(mode: ReferenceMode, from: &[f64], velocity: &[f64], target: &[f64], v_max: f64, min_duration: f64) -> Self {
        match mode {
            ReferenceMode::RestToRest => Self::rest_to_rest(from, target, v_max, min_duration),
            ReferenceMode::PhaseMatched => Self::phase_matched(from, velocity, target, v_max, min_duration),
        }
    }

    pub fn target(&self) -> Point {
        self.origin.iter().zip(&self.direction).map(|(o, u)| o + u * self.length).collect()
    }

    /// Time from activation until the segment ends.
    pub fn remaining_time(&self) -> f64 {
        (1.0 - self.tau0) * self.duration
    }

    pub fn sample(&self, elapsed: f64) -> ReferenceSample {
        if self.duration <= 0.0 {
            let zero = vec![0.0; self.origin.len()];
            return ReferenceSample {
                position: self.origin.clone(),
                velocity: zero.clone(),
                acceleration: zero,
            };
        }
        let tau = (self.tau0 + elapsed.max(0.0) / self.duration).min(1.0);
        let (pos, vel, acc) = (
            self.length * s(tau),
            self.length * ds(tau) / self.duration,
            self.length * dds(tau) / (self.duration * self.duration),
        );
        ReferenceSample {
            position: self.origin.iter().zip(&self.direction).map(|(o, u)| o + u * pos).collect(),
            velocity: self.direction.iter().map(|u| u * vel).collect(),
            acceleration: self.direction.iter().map(|u| u * acc).collect(),
        }
    }
}

/// Solves `s'(τ) = rate` on `[0, 0.5]`, where `s'` is increasing.
fn invert_rate(rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    if rate >= PEAK_RATE {
        return 0.5;
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if ds(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Reference sampled at `dt` spacing from `t = 0` through `horizon` inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub dt: f64,
    pub duration: f64,
    pub positions: Vec<Point>,
    pub velocities: Vec<Vec<f64>>,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn peak_speed(&self) -> f64 {
        self.velocities.iter().map(|v| world::norm(v)).fold(0.0, f64::max)
    }
}

/// Rest-to-rest segment from `p0` along `displacement`.
pub fn min_jerk_reference(
    p0: &[f64],
    displacement: &[f64],
    v_max: f64,
    dt: f64,
    horizon: f64,
    min_duration: f64,
) -> ReferenceTrajectory {
    let target: Point = p0.iter().zip(displacement).map(|(p, d)| p + d).collect();
    let segment = MinJerk::rest_to_rest(p0, &target, v_max, min_duration);
    let steps = (horizon / dt).round() as usize;
    let mut positions = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let sample = segment.sample(k as f64 * dt);
        positions.push(sample.position);
        velocities.push(sample.velocity);
    }
    ReferenceTrajectory {
        dt,
        duration: segment.duration,
        positions,
        velocities,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quintic_boundary_values() {
        assert_eq!((s(0.0), s(1.0)), (0.0, 1.0));
        assert_eq!((ds(0.0), ds(1.0)), (0.0, 0.0));
        assert_eq!((dds(0.0), dds(1.0)), (0.0, 0.0));
        assert_eq!(ds(0.5), PEAK_RATE);
        assert!((s(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_differences() {
        let h = 1e-6;
        for i in 1..20 {
            let t = i as f64 / 20.0;
            assert!(((s(t + h) - s(t - h)) / (2.0 * h) - ds(t)).abs() < 1e-8);
            assert!(((ds(t + h) - ds(t - h)) / (2.0 * h) - dds(t)).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_displacement_is_constant() {
        let r = min_jerk_reference(&[3.0, 4.0], &[0.0, 0.0], 2.0, 0.01, 1.5, 0.5);
        assert_eq!(r.len(), 151);
        assert!(r.positions.iter().all(|p| p == &vec![3.0, 4.0]));
        assert_eq!(r.peak_speed(), 0.0);
    }

    #[test]
    fn four_meters_at_two_meters_per_second() {
        let r = min_jerk_reference(&[0.0, 0.0], &[4.0, 0.0], 2.0, 0.01, 4.0, 0.5);
        assert!((r.duration - 3.75).abs() < 1e-14);
        assert!(r.peak_speed() <= 2.0);
        let seg = MinJerk::rest_to_rest(&[0.0, 0.0], &[4.0, 0.0], 2.0, 0.5);
        let peak = world::norm(&seg.sample(seg.duration / 2.0).velocity);
        assert!((peak - 2.0).abs() < 1e-12);
        let end = r.positions.last().unwrap();
        assert!((end[0] - 4.0).abs() < 1e-12);
        assert!(world::norm(r.velocities.last().unwrap()) < 1e-12);
    }

    #[test]
    fn short_segments_use_minimum_duration() {
        let seg = MinJerk::rest_to_rest(&[0.0, 0.0], &[0.1, 0.0], 2.0, 0.5);
        assert_eq!(seg.duration, 0.5);
        assert!(seg.sample(0.25).velocity[0] < 2.0);
    }

    #[test]
    fn phase_matched_continues_from_current_state() {
        let from = [1.0, 1.0];
        let target = [5.0, 1.0];
        let seg = MinJerk::phase_matched(&from, &[1.2, 0.0], &target, 2.0, 0.5);
        let start = seg.sample(0.0);
        assert!(world::distance(&start.position, &from) < 1e-12);
        assert!((start.velocity[0] - 1.2).abs() < 1e-9);
        assert!(world::distance(&seg.target(), &target) < 1e-12);
        assert!((seg.sample(seg.remaining_time()).position[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn phase_matched_ignores_retreating_velocity() {
        let seg = MinJerk::phase_matched(&[0.0, 0.0], &[-1.0, 0.5], &[2.0, 0.0], 2.0, 0.5);
        assert_eq!(seg, MinJerk::rest_to_rest(&[0.0, 0.0], &[2.0, 0.0], 2.0, 0.5));
    }

    #[test]
    fn phase_matched_at_top_speed_starts_mid_segment() {
        let seg = MinJerk::phase_matched(&[0.0, 0.0], &[2.0, 0.0], &[3.0, 0.0], 2.0, 0.5);
        assert_eq!(seg.tau0, 0.5);
        assert!((seg.length - 6.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn speed_never_exceeds_limit(dx in -10.0f64..10.0, dy in -10.0f64..10.0, vx in -3.0f64..3.0, vy in -3.0f64..3.0, v_max in 0.5f64..3.0) {
            let from = [5.0, 5.0];
            let target = [5.0 + dx, 5.0 + dy];
            for seg in [
                MinJerk::rest_to_rest(&from, &target, v_max, 0.5),
                MinJerk::phase_matched(&from, &[vx, vy], &target, v_max, 0.5),
            ] {
                let peak_time = (0.5 - seg.tau0).max(0.0) * seg.duration;
                for t in (0..=400).map(|k| k as f64 * 0.01).chain([peak_time]) {
                    let v = world::norm(&seg.sample(t).velocity);
                    prop_assert!(v <= v_max, "{} > {}", v, v_max);
                }
            }
        }
    }
}
