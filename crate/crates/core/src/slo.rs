//! Service/device data model and the fuzzy SLO calculus.
//!
//! An [`Slo`] states that a service variable should stay above or below a
//! threshold. Its fulfillment `phi` is a ratio rather than a boolean: `m / t`
//! for `>` objectives and `1 - m / t` for `<` objectives. The agents are
//! rewarded for keeping every `phi` close to [`PHI_OPT`], and performance is
//! reported as the weighted, per-SLO clamped sum `phi_sigma`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The fulfillment value every SLO aims for: met, but not overprovisioned.
pub const PHI_OPT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SloError {
    #[error("metric for {0} must be non-negative, got {1}")]
    NegativeMetric(Variable, f64),
    #[error("no metric value for SLO variable {0}")]
    MissingMetric(Variable),
    #[error("threshold for {0} must be positive, got {1}")]
    NonPositiveThreshold(Variable, f64),
    #[error("weight for {0} must be positive, got {1}")]
    NonPositiveWeight(Variable, f64),
    #[error("variable {0} appears in more than one SLO")]
    DuplicateVariable(Variable),
}

/// Observable service variables an SLO can constrain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Pixel,
    Cores,
    Fps,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::Pixel, Variable::Cores, Variable::Fps];

    pub fn as_str(self) -> &'static str {
        match self {
            Variable::Pixel => "pixel",
            Variable::Cores => "cores",
            Variable::Fps => "fps",
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = ">")]
    GreaterThan,
    #[serde(rename = "<")]
    LessThan,
}

/// One constraint `<variable, relation, threshold, weight>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slo {
    pub variable: Variable,
    pub relation: Relation,
    pub threshold: f64,
    pub weight: f64,
}

impl Slo {
    pub fn new(
        variable: Variable,
        relation: Relation,
        threshold: f64,
        weight: f64,
    ) -> Result<Self, SloError> {
        let slo = Slo {
            variable,
            relation,
            threshold,
            weight,
        };
        slo.validate()?;
        Ok(slo)
    }

    pub fn greater(variable: Variable, threshold: f64, weight: f64) -> Result<Self, SloError> {
        Self::new(variable, Relation::GreaterThan, threshold, weight)
    }

    pub fn less(variable: Variable, threshold: f64, weight: f64) -> Result<Self, SloError> {
        Self::new(variable, Relation::LessThan, threshold, weight)
    }

    pub fn validate(&self) -> Result<(), SloError> {
        // Written as negated comparisons so NaN is rejected too.
        if !(self.threshold > 0.0) {
            return Err(SloError::NonPositiveThreshold(self.variable, self.threshold));
        }
        if !(self.weight > 0.0) {
            return Err(SloError::NonPositiveWeight(self.variable, self.weight));
        }
        Ok(())
    }
}

/// Checks every SLO and that no variable is constrained twice.
pub fn validate_slos(slos: &[Slo]) -> Result<(), SloError> {
    for (i, q) in slos.iter().enumerate() {
        q.validate()?;
        if slos[..i].iter().any(|p| p.variable == q.variable) {
            return Err(SloError::DuplicateVariable(q.variable));
        }
    }
    Ok(())
}

/// The SLO set of the CV service: `pixel > t_pixel` (0.8), `cores < 10` (0.4)
/// and `fps > t_fps` (1.2).
pub fn cv_service_slos(t_pixel: f64, t_fps: f64) -> Result<Vec<Slo>, SloError> {
    Ok(alloc::vec![
        Slo::greater(Variable::Pixel, t_pixel, 0.8)?,
        Slo::less(Variable::Cores, 10.0, 0.4)?,
        Slo::greater(Variable::Fps, t_fps, 1.2)?,
    ])
}

/// Anything that can report a value for a service variable.
pub trait MetricSource {
    fn metric(&self, variable: Variable) -> Option<f64>;
}

impl MetricSource for BTreeMap<Variable, f64> {
    fn metric(&self, variable: Variable) -> Option<f64> {
        self.get(&variable).copied()
    }
}

impl MetricSource for [(Variable, f64)] {
    fn metric(&self, variable: Variable) -> Option<f64> {
        self.iter().find(|(v, _)| *v == variable).map(|(_, m)| *m)
    }
}

impl<const N: usize> MetricSource for [(Variable, f64); N] {
    fn metric(&self, variable: Variable) -> Option<f64> {
        self.as_slice().metric(variable)
    }
}

/// A complete `(pixel, cores, fps)` observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pixel: f64,
    pub cores: f64,
    pub fps: f64,
}

impl MetricSource for Observation {
    fn metric(&self, variable: Variable) -> Option<f64> {
        Some(match variable {
            Variable::Pixel => self.pixel,
            Variable::Cores => self.cores,
            Variable::Fps => self.fps,
        })
    }
}

/// Fulfillment of a single SLO for metric value `m`.
///
/// Unclamped: a `>` objective that is overfulfilled yields values above 1.
pub fn slo_fulfillment(q: &Slo, m: f64) -> Result<f64, SloError> {
    if !(m >= 0.0) {
        return Err(SloError::NegativeMetric(q.variable, m));
    }
    if !(q.threshold > 0.0) {
        return Err(SloError::NonPositiveThreshold(q.variable, q.threshold));
    }
    let ratio = m / q.threshold;
    Ok(match q.relation {
        Relation::GreaterThan => ratio,
        Relation::LessThan => 1.0 - ratio,
    })
}

fn fulfillments<'a, M: MetricSource + ?Sized>(
    slos: &'a [Slo],
    metrics: &'a M,
) -> impl Iterator<Item = Result<(f64, f64), SloError>> + 'a {
    slos.iter().map(move |q| {
        let m = metrics
            .metric(q.variable)
            .ok_or(SloError::MissingMetric(q.variable))?;
        Ok((slo_fulfillment(q, m)?, q.weight))
    })
}

/// Compensated (Neumaier) running sum, so e.g. the CV weights 0.8, 0.4, 1.2 add up
/// to exactly 2.4 rather than to the next float above it.
#[derive(Default)]
struct ExactSum {
    sum: f64,
    comp: f64,
}

impl ExactSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        self.comp += if libm::fabs(self.sum) >= libm::fabs(x) {
            (self.sum - t) + x
        } else {
            (x - t) + self.sum
        };
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn weighted_terms<M, F>(slos: &[Slo], metrics: &M, term: F) -> Result<f64, SloError>
where
    M: MetricSource + ?Sized,
    F: Fn(f64, f64) -> f64,
{
    let mut acc = ExactSum::default();
    for r in fulfillments(slos, metrics) {
        let (phi, w) = r?;
        acc.add(term(phi, w));
    }
    Ok(acc.value())
}

/// Weighted distance of all fulfillments from [`PHI_OPT`]. Zero is optimal.
pub fn weighted_delta<M: MetricSource + ?Sized>(slos: &[Slo], metrics: &M) -> Result<f64, SloError> {
    weighted_terms(slos, metrics, |phi, w| libm::fabs(PHI_OPT - phi) * w)
}

/// Cumulative fulfillment `phi_sigma`: each `phi` clamped at 1 and weighted.
/// Bounded above by the sum of the SLO weights.
pub fn cumulative_fulfillment<M: MetricSource + ?Sized>(
    slos: &[Slo],
    metrics: &M,
) -> Result<f64, SloError> {
    weighted_terms(slos, metrics, |phi, w| phi.min(PHI_OPT) * w)
}

/// Upper bound of [`cumulative_fulfillment`] for an SLO set.
pub fn max_fulfillment(slos: &[Slo]) -> f64 {
    let mut acc = ExactSum::default();
    slos.iter().for_each(|q| acc.add(q.weight));
    acc.value()
}

/// Static description of a scalable service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub id: String,
    pub slos: Vec<Slo>,
    /// Inclusive `[p_min, p_max]`.
    pub pixel_bounds: (u32, u32),
    pub pixel_step: u32,
    pub cores_step: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("pixel bounds [{0}, {1}] must satisfy 0 < p_min <= p_max")]
    PixelBounds(u32, u32),
    #[error("scaling steps must be at least 1")]
    Step,
    #[error(transparent)]
    Slo(#[from] SloError),
}

impl ServiceSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let (lo, hi) = self.pixel_bounds;
        if lo == 0 || lo > hi {
            return Err(SpecError::PixelBounds(lo, hi));
        }
        if self.pixel_step == 0 || self.cores_step == 0 {
            return Err(SpecError::Step);
        }
        validate_slos(&self.slos)?;
        Ok(())
    }

    pub fn clamp_pixel(&self, pixel: i64) -> u32 {
        let (lo, hi) = self.pixel_bounds;
        pixel.clamp(i64::from(lo), i64::from(hi)) as u32
    }

    pub fn slo(&self, variable: Variable) -> Option<&Slo> {
        self.slos.iter().find(|q| q.variable == variable)
    }

    /// Replaces the threshold of the SLO on `variable`, if there is one.
    pub fn set_threshold(&mut self, variable: Variable, threshold: f64) -> Result<(), SloError> {
        if let Some(q) = self.slos.iter_mut().find(|q| q.variable == variable) {
            let mut updated = *q;
            updated.threshold = threshold;
            updated.validate()?;
            *q = updated;
        }
        Ok(())
    }
}

/// Current configuration and observed throughput of a service.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceState {
    pub pixel: u32,
    pub cores: u32,
    pub fps: f64,
    pub tick: u64,
}

impl ServiceState {
    pub fn observation(&self) -> Observation {
        Observation {
            pixel: f64::from(self.pixel),
            cores: f64::from(self.cores),
            fps: self.fps,
        }
    }
}

/// Core accounting for one edge device.
///
/// `c_phy` is the physical core count; `capacity` is the share of it that is
/// currently usable (experiments restrict it per phase). Every allocation is
/// at least one core and the allocations never sum past `capacity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    c_phy: u32,
    capacity: u32,
    allocations: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device must have at least one core")]
    NoCores,
    #[error("capacity {capacity} exceeds physical cores {c_phy}")]
    CapacityAbovePhysical { capacity: u32, c_phy: u32 },
    #[error("service {0} already has an allocation")]
    Duplicate(String),
    #[error("unknown service {0}")]
    Unknown(String),
    #[error("allocation must be at least one core")]
    ZeroAllocation,
    #[error("requested {requested} cores but only {free} are free")]
    Insufficient { requested: u32, free: u32 },
}

impl Device {
    pub fn new(c_phy: u32) -> Result<Self, DeviceError> {
        if c_phy == 0 {
            return Err(DeviceError::NoCores);
        }
        Ok(Device {
            c_phy,
            capacity: c_phy,
            allocations: BTreeMap::new(),
        })
    }

    pub fn c_phy(&self) -> u32 {
        self.c_phy
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn allocated(&self) -> u32 {
        self.allocations.values().sum()
    }

    pub fn c_free(&self) -> u32 {
        self.capacity.saturating_sub(self.allocated())
    }

    pub fn allocation(&self, id: &str) -> Option<u32> {
        self.allocations.get(id).copied()
    }

    pub fn allocations(&self) -> &BTreeMap<String, u32> {
        &self.allocations
    }

    pub fn register(&mut self, id: &str, cores: u32) -> Result<(), DeviceError> {
        if self.allocations.contains_key(id) {
            return Err(DeviceError::Duplicate(id.into()));
        }
        if cores == 0 {
            return Err(DeviceError::ZeroAllocation);
        }
        let free = self.c_free();
        if cores > free {
            return Err(DeviceError::Insufficient {
                requested: cores,
                free,
            });
        }
        self.allocations.insert(id.into(), cores);
        Ok(())
    }

    /// Sets the allocation of `id`, failing without change if it would not fit.
    pub fn set_allocation(&mut self, id: &str, cores: u32) -> Result<(), DeviceError> {
        if cores == 0 {
            return Err(DeviceError::ZeroAllocation);
        }
        let current = self
            .allocation(id)
            .ok_or_else(|| DeviceError::Unknown(id.into()))?;
        if cores > current {
            let free = self.c_free();
            if cores - current > free {
                return Err(DeviceError::Insufficient {
                    requested: cores - current,
                    free,
                });
            }
        }
        self.allocations.insert(id.into(), cores);
        Ok(())
    }

    /// Changes the usable capacity. Does not touch allocations; callers
    /// reclaim cores first when shrinking.
    pub fn set_capacity(&mut self, capacity: u32) -> Result<(), DeviceError> {
        if capacity == 0 {
            return Err(DeviceError::NoCores);
        }
        if capacity > self.c_phy {
            return Err(DeviceError::CapacityAbovePhysical {
                capacity,
                c_phy: self.c_phy,
            });
        }
        self.capacity = capacity;
        Ok(())
    }

    pub fn is_consistent(&self) -> bool {
        self.allocated() <= self.capacity && self.allocations.values().all(|&c| c >= 1)
    }
}
