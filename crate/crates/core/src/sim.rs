//! The processing environment agents act on.
//!
//! A [`Simulator`] owns one device, the services running on it and a clock.
//! Every service has a hidden [`GroundTruthModel`] producing its throughput.
//! Scaling requests change the configuration (and the core allocation)
//! immediately, but throughput follows the configuration as it was one
//! settling window earlier.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lgbn::MetricSnapshot;
use crate::slo::{Device, DeviceError, ServiceSpec, ServiceState, SpecError};
use crate::{seeded_rng, SimRng};

/// Hidden throughput model of a simulated service.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub intercept: f64,
    pub cores_coef: f64,
    pub pixel_coef: f64,
    pub sigma: f64,
    /// Diminishing returns per core squared; zero keeps the model linear.
    #[serde(default)]
    pub cores_curvature: f64,
}

impl GroundTruthModel {
    pub fn linear(intercept: f64, cores_coef: f64, pixel_coef: f64, sigma: f64) -> Self {
        GroundTruthModel {
            intercept,
            cores_coef,
            pixel_coef,
            sigma,
            cores_curvature: 0.0,
        }
    }

    pub fn mean_fps(&self, pixel: u32, cores: u32) -> f64 {
        let c = f64::from(cores);
        self.intercept + self.cores_coef * c + self.pixel_coef * f64::from(pixel)
            - self.cores_curvature * c * c
    }

    /// One noisy observation, clamped at zero. Consumes one normal draw.
    pub fn sample<R: Rng + ?Sized>(&self, pixel: u32, cores: u32, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.mean_fps(pixel, cores) + self.sigma * z).max(0.0)
    }
}

/// Discrete simulation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub tick: u64,
    pub tick_seconds: f64,
}

impl SimClock {
    pub fn seconds(&self) -> f64 {
        self.tick as f64 * self.tick_seconds
    }
}

/// Configuration that becomes effective at `effective_tick`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingConfig {
    pub pixel: u32,
    pub cores: u32,
    pub effective_tick: u64,
}

/// Who changed a service configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeCause {
    Agent,
    Swap,
    /// Exogenous changes: calibration sweeps, phase resets, reclaimed cores.
    Harness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub tick: u64,
    pub pixel: u32,
    pub cores: u32,
    pub cause: ChangeCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningService {
    pub spec: ServiceSpec,
    pub truth: GroundTruthModel,
    /// Configured values and the last observed fps.
    pub state: ServiceState,
    /// Configuration currently generating throughput.
    pub effective: (u32, u32),
    /// Requested configurations still settling, oldest first.
    pub pending: VecDeque<PendingConfig>,
    metrics: Vec<MetricSnapshot>,
    action_log: Vec<ActionRecord>,
}

impl RunningService {
    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn metrics(&self) -> &[MetricSnapshot] {
        &self.metrics
    }

    pub fn action_log(&self) -> &[ActionRecord] {
        &self.action_log
    }

    pub fn action_ticks(&self) -> Vec<u64> {
        let mut ticks: Vec<u64> = self.action_log.iter().map(|a| a.tick).collect();
        ticks.dedup();
        ticks
    }

    /// Snapshots with `tick > since_tick`; never mutates the buffer.
    pub fn read_buffer(&self, since_tick: u64) -> &[MetricSnapshot] {
        let start = self.metrics.partition_point(|s| s.tick <= since_tick);
        &self.metrics[start..]
    }

    pub fn latest(&self) -> Option<&MetricSnapshot> {
        self.metrics.last()
    }
}

/// Why a scaling request was refused. Refusals leave all state untouched.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    #[error("requested {requested} more cores but only {free} are free")]
    InsufficientCores { requested: u32, free: u32 },
    #[error("pixel {pixel} outside [{min}, {max}]")]
    PixelOutOfBounds { pixel: u32, min: u32, max: u32 },
    #[error("service must keep at least one core")]
    MinimumCores,
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("cannot swap a core with itself")]
    SameService,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("initial pixel {0} outside the service bounds")]
    InitialPixel(u32),
}

/// Single-threaded device simulation; the loop owns every mutable piece.
#[derive(Debug, Clone)]
pub struct Simulator {
    device: Device,
    services: Vec<RunningService>,
    clock: SimClock,
    settling_window: u64,
    rng: SimRng,
}

impl Simulator {
    pub fn new(c_phy: u32, tick_seconds: f64, settling_window: u64, seed: u64) -> Result<Self, SimError> {
        Ok(Simulator {
            device: Device::new(c_phy)?,
            services: Vec::new(),
            clock: SimClock {
                tick: 0,
                tick_seconds,
            },
            settling_window,
            rng: seeded_rng(seed),
        })
    }

    /// Adds a service; the service list stays sorted by id.
    pub fn add_service(
        &mut self,
        spec: ServiceSpec,
        truth: GroundTruthModel,
        pixel: u32,
        cores: u32,
    ) -> Result<(), SimError> {
        spec.validate()?;
        let (lo, hi) = spec.pixel_bounds;
        if pixel < lo || pixel > hi {
            return Err(SimError::InitialPixel(pixel));
        }
        self.device.register(&spec.id, cores)?;
        let svc = RunningService {
            state: ServiceState {
                pixel,
                cores,
                fps: 0.0,
                tick: self.clock.tick,
            },
            effective: (pixel, cores),
            pending: VecDeque::new(),
            metrics: Vec::new(),
            action_log: Vec::new(),
            spec,
            truth,
        };
        let at = self.services.partition_point(|s| s.spec.id < svc.spec.id);
        self.services.insert(at, svc);
        Ok(())
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn now(&self) -> u64 {
        self.clock.tick
    }

    pub fn settling_window(&self) -> u64 {
        self.settling_window
    }

    pub fn c_free(&self) -> u32 {
        self.device.c_free()
    }

    pub fn services(&self) -> &[RunningService] {
        &self.services
    }

    pub fn service(&self, id: &str) -> Option<&RunningService> {
        self.index(id).map(|i| &self.services[i])
    }

    pub fn service_mut(&mut self, id: &str) -> Option<&mut RunningService> {
        self.index(id).map(move |i| &mut self.services[i])
    }

    fn index(&self, id: &str) -> Option<usize> {
        self.services
            .binary_search_by(|s| s.spec.id.as_str().cmp(id))
            .ok()
    }

    pub fn read_buffer(&self, id: &str, since_tick: u64) -> &[MetricSnapshot] {
        self.service(id).map_or(&[], |s| s.read_buffer(since_tick))
    }

    /// Advances the clock by one tick and logs one snapshot per service.
    ///
    /// # Panics
    ///
    /// If the device is over-allocated; that can only be a simulator bug.
    pub fn tick(&mut self) -> Vec<MetricSnapshot> {
        assert!(
            self.device.is_consistent(),
            "core over-allocation: {} of {}",
            self.device.allocated(),
            self.device.capacity()
        );
        let now = self.clock.tick;
        let next = now + 1;
        let mut out = Vec::with_capacity(self.services.len());
        for svc in &mut self.services {
            while let Some(p) = svc.pending.front() {
                if now < p.effective_tick {
                    break;
                }
                svc.effective = (p.pixel, p.cores);
                svc.pending.pop_front();
            }
            let (pixel, cores) = svc.effective;
            let fps = svc.truth.sample(pixel, cores, &mut self.rng);
            svc.state.fps = fps;
            svc.state.tick = next;
            let snap = MetricSnapshot {
                service_id: svc.spec.id.clone(),
                tick: next,
                pixel: svc.state.pixel,
                cores: svc.state.cores,
                fps,
            };
            svc.metrics.push(snap.clone());
            out.push(snap);
        }
        self.clock.tick = next;
        out
    }

    fn reconfigure(&mut self, i: usize, pixel: u32, cores: u32, cause: ChangeCause) {
        let now = self.clock.tick;
        let window = self.settling_window;
        let svc = &mut self.services[i];
        svc.state.pixel = pixel;
        svc.state.cores = cores;
        svc.pending.push_back(PendingConfig {
            pixel,
            cores,
            effective_tick: now + window,
        });
        svc.action_log.push(ActionRecord {
            tick: now,
            pixel,
            cores,
            cause,
        });
    }

    /// Requests a new `(pixel, cores)` configuration for `id`.
    ///
    /// Extra cores must fit into the free pool; on success the allocation is
    /// updated at once while throughput settles. A request equal to the
    /// current configuration is accepted without logging an action.
    pub fn apply_scaling(
        &mut self,
        id: &str,
        pixel: u32,
        cores: u32,
        cause: ChangeCause,
    ) -> Result<(), Rejection> {
        let i = self
            .index(id)
            .ok_or_else(|| Rejection::UnknownService(id.into()))?;
        let (min, max) = self.services[i].spec.pixel_bounds;
        if pixel < min || pixel > max {
            return Err(Rejection::PixelOutOfBounds { pixel, min, max });
        }
        if cores == 0 {
            return Err(Rejection::MinimumCores);
        }
        let state = self.services[i].state;
        if state.pixel == pixel && state.cores == cores {
            return Ok(());
        }
        self.device
            .set_allocation(id, cores)
            .map_err(|e| match e {
                DeviceError::Insufficient { requested, free } => {
                    Rejection::InsufficientCores { requested, free }
                }
                _ => Rejection::MinimumCores,
            })?;
        self.reconfigure(i, pixel, cores, cause);
        Ok(())
    }

    /// Moves one core from `from` to `to`; the total allocation is unchanged.
    pub fn swap_core(&mut self, from: &str, to: &str) -> Result<(), Rejection> {
        if from == to {
            return Err(Rejection::SameService);
        }
        let a = self
            .index(from)
            .ok_or_else(|| Rejection::UnknownService(from.into()))?;
        let b = self
            .index(to)
            .ok_or_else(|| Rejection::UnknownService(to.into()))?;
        let (from_cores, to_cores) = (self.services[a].state.cores, self.services[b].state.cores);
        if from_cores <= 1 {
            return Err(Rejection::MinimumCores);
        }
        // Shrink first so the grow always fits.
        let shrunk = self.device.set_allocation(from, from_cores - 1);
        let grown = shrunk.and_then(|_| self.device.set_allocation(to, to_cores + 1));
        if grown.is_err() {
            // Unreachable with a consistent device; restore and report.
            let _ = self.device.set_allocation(from, from_cores);
            return Err(Rejection::MinimumCores);
        }
        let (pa, pb) = (self.services[a].state.pixel, self.services[b].state.pixel);
        self.reconfigure(a, pa, from_cores - 1, ChangeCause::Swap);
        self.reconfigure(b, pb, to_cores + 1, ChangeCause::Swap);
        Ok(())
    }

    /// Restricts the usable cores, reclaiming from the largest allocations
    /// (ties by id) when the current total does not fit.
    pub fn set_capacity(&mut self, capacity: u32) -> Result<(), SimError> {
        let floor = self.services.len() as u32;
        if capacity < floor {
            return Err(SimError::Device(DeviceError::Insufficient {
                requested: floor,
                free: capacity,
            }));
        }
        if capacity > self.device.c_phy() {
            return Err(SimError::Device(DeviceError::CapacityAbovePhysical {
                capacity,
                c_phy: self.device.c_phy(),
            }));
        }
        while self.device.allocated() > capacity {
            let i = (0..self.services.len())
                .max_by(|&x, &y| {
                    self.services[x]
                        .state
                        .cores
                        .cmp(&self.services[y].state.cores)
                        .then(y.cmp(&x))
                })
                .expect("at least one service when cores are allocated");
            let svc = &self.services[i];
            let (id, pixel, cores) = (svc.spec.id.clone(), svc.state.pixel, svc.state.cores - 1);
            self.device.set_allocation(&id, cores)?;
            self.reconfigure(i, pixel, cores, ChangeCause::Harness);
        }
        self.device.set_capacity(capacity)?;
        Ok(())
    }

    /// Replaces the threshold of `variable` in the SLO set of `id`.
    pub fn set_threshold(
        &mut self,
        id: &str,
        variable: crate::slo::Variable,
        threshold: f64,
    ) -> Result<(), crate::slo::SloError> {
        if let Some(svc) = self.service_mut(id) {
            svc.spec.set_threshold(variable, threshold)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgbn::{exclude_settling, fit};
    use crate::slo::cv_service_slos;

    fn spec(id: &str) -> ServiceSpec {
        ServiceSpec {
            id: id.into(),
            slos: cv_service_slos(800.0, 33.0).unwrap(),
            pixel_bounds: (100, 2000),
            pixel_step: 100,
            cores_step: 1,
        }
    }

    fn truth(sigma: f64) -> GroundTruthModel {
        GroundTruthModel::linear(5.0, 6.0, -0.01, sigma)
    }

    fn single(sigma: f64) -> Simulator {
        let mut sim = Simulator::new(10, 0.5, 4, 1).unwrap();
        sim.add_service(spec("cv"), truth(sigma), 800, 6).unwrap();
        sim
    }

    #[test]
    fn noise_free_snapshot_follows_ground_truth() {
        let mut sim = single(0.0);
        let snaps = sim.tick();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].fps, 33.0);
        assert_eq!(snaps[0].tick, 1);
        assert_eq!(sim.now(), 1);
    }

    #[test]
    fn settling_delays_new_configuration() {
        let mut sim = single(0.0);
        for _ in 0..3 {
            sim.tick();
        }
        let t = sim.now();
        sim.apply_scaling("cv", 800, 7, ChangeCause::Agent).unwrap();
        for k in 1..=4 {
            let s = sim.tick().remove(0);
            assert_eq!(s.tick, t + k);
            assert_eq!(s.cores, 7);
            assert_eq!(s.fps, 33.0, "tick {}", s.tick);
        }
        let s = sim.tick().remove(0);
        assert_eq!(s.tick, t + 5);
        assert_eq!(s.fps, 39.0);
    }

    #[test]
    fn two_services_leave_one_core_free() {
        let mut sim = Simulator::new(10, 0.5, 4, 1).unwrap();
        sim.add_service(spec("a"), truth(0.0), 800, 6).unwrap();
        sim.add_service(spec("b"), truth(0.0), 800, 3).unwrap();
        sim.tick();
        assert_eq!(sim.c_free(), 1);
    }

    #[test]
    fn scaling_respects_free_cores_and_bounds() {
        let mut sim = Simulator::new(10, 0.5, 4, 1).unwrap();
        sim.add_service(spec("a"), truth(0.0), 800, 6).unwrap();
        sim.add_service(spec("b"), truth(0.0), 800, 3).unwrap();
        sim.apply_scaling("b", 800, 4, ChangeCause::Agent).unwrap();
        assert_eq!(sim.c_free(), 0);
        let before = sim.service("b").unwrap().clone();
        assert_eq!(
            sim.apply_scaling("b", 800, 5, ChangeCause::Agent),
            Err(Rejection::InsufficientCores {
                requested: 1,
                free: 0
            })
        );
        assert_eq!(
            sim.apply_scaling("b", 2100, 4, ChangeCause::Agent),
            Err(Rejection::PixelOutOfBounds {
                pixel: 2100,
                min: 100,
                max: 2000
            })
        );
        assert_eq!(sim.service("b").unwrap(), &before);
        assert_eq!(sim.device().allocation("b"), Some(4));
    }

    #[test]
    fn swap_conserves_and_inverts() {
        let mut sim = Simulator::new(10, 0.5, 4, 1).unwrap();
        sim.add_service(spec("alice"), truth(0.0), 800, 4).unwrap();
        sim.add_service(spec("bob"), truth(0.0), 800, 6).unwrap();
        sim.swap_core("bob", "alice").unwrap();
        assert_eq!(sim.device().allocation("alice"), Some(5));
        assert_eq!(sim.device().allocation("bob"), Some(5));
        assert_eq!(sim.device().allocated(), 10);
        sim.swap_core("alice", "bob").unwrap();
        assert_eq!(sim.device().allocation("alice"), Some(4));
        assert_eq!(sim.device().allocation("bob"), Some(6));
        assert_eq!(sim.service("bob").unwrap().state.cores, 6);
        assert!(!sim.service("alice").unwrap().pending.is_empty());
    }

    #[test]
    fn swap_keeps_one_core() {
        let mut sim = Simulator::new(4, 0.5, 4, 1).unwrap();
        sim.add_service(spec("alice"), truth(0.0), 800, 3).unwrap();
        sim.add_service(spec("bob"), truth(0.0), 800, 1).unwrap();
        assert_eq!(sim.swap_core("bob", "alice"), Err(Rejection::MinimumCores));
        assert_eq!(sim.device().allocation("bob"), Some(1));
        assert_eq!(sim.swap_core("bob", "bob"), Err(Rejection::SameService));
    }

    #[test]
    fn buffer_reads() {
        let mut sim = single(1.0);
        for _ in 0..5 {
            sim.tick();
        }
        assert_eq!(sim.read_buffer("cv", 0).len(), 5);
        assert!(sim.read_buffer("cv", sim.now()).is_empty());
        let before = sim.read_buffer("cv", 2).len();
        sim.tick();
        assert_eq!(sim.read_buffer("cv", 2).len(), before + 1);
    }

    #[test]
    fn capacity_shrink_reclaims_from_largest() {
        let mut sim = Simulator::new(10, 0.5, 4, 1).unwrap();
        sim.add_service(spec("a"), truth(0.0), 800, 6).unwrap();
        sim.add_service(spec("b"), truth(0.0), 800, 3).unwrap();
        sim.set_capacity(5).unwrap();
        assert_eq!(sim.device().allocated(), 5);
        // 6/3 -> 5/3 -> 4/3 -> 3/3 -> tie goes to "a" -> 2/3
        assert_eq!(sim.device().allocation("a"), Some(2));
        assert_eq!(sim.device().allocation("b"), Some(3));
        assert!(sim.set_capacity(1).is_err());
        sim.set_capacity(10).unwrap();
        assert_eq!(sim.c_free(), 5);
    }

    #[test]
    fn noise_free_run_recovers_ground_truth() {
        let mut sim = single(0.0);
        let mut rng = seeded_rng(3);
        for t in 0..400 {
            if t % 10 == 0 {
                // Stay where the mean is non-negative so the zero clamp never bites.
                let pixel = rng.random_range(1..=11u32) * 100;
                let cores = rng.random_range(1..=10u32);
                sim.apply_scaling("cv", pixel, cores, ChangeCause::Harness).unwrap();
            }
            sim.tick();
        }
        let svc = sim.service("cv").unwrap();
        let data = exclude_settling(svc.metrics(), &svc.action_ticks(), 4);
        let m = fit(&data).unwrap();
        assert!((m.intercept - 5.0).abs() < 1e-6);
        assert!((m.cores_coef - 6.0).abs() < 1e-6);
        assert!((m.pixel_coef + 0.01).abs() < 1e-6);
    }
}
