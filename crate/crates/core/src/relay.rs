//! Hand-over from heuristic to learned rendering elements part-way through training.

use crate::diff::{ParamId, ParamStore};
use crate::primitives::Organizer;
use crate::sampling::SamplerMode;
use thiserror::Error;

/// A rendering element that can be relayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    Gauge,
    Sampling,
    Organization,
}

impl Element {
    pub const ALL: [Element; 3] = [Element::Gauge, Element::Sampling, Element::Organization];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Element::Gauge => "gauge",
            Element::Sampling => "sampling",
            Element::Organization => "organization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Heuristic,
    Evolutive,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelayError {
    #[error("relay fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("total steps must be positive")]
    NoSteps,
    #[error("{} element already relayed", .0.name())]
    AlreadyRelayed(Element),
}

/// When each element switches. Relay step = `floor(fraction * total)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaySchedule {
    pub total_steps: usize,
    pub fraction: f64,
    overrides: [Option<f64>; 3],
}

fn check_fraction(f: f64) -> Result<f64, RelayError> {
    if (0.0..=1.0).contains(&f) {
        Ok(f)
    } else {
        Err(RelayError::BadFraction(f))
    }
}

impl RelaySchedule {
    pub const DEFAULT_FRACTION: f64 = 0.1;

    pub fn new(total_steps: usize, fraction: f64) -> Result<Self, RelayError> {
        if total_steps == 0 {
            return Err(RelayError::NoSteps);
        }
        Ok(Self {
            total_steps,
            fraction: check_fraction(fraction)?,
            overrides: [None; 3],
        })
    }

    /// Gives `element` its own fraction.
    pub fn with_override(mut self, element: Element, fraction: f64) -> Result<Self, RelayError> {
        self.overrides[element.slot()] = Some(check_fraction(fraction)?);
        Ok(self)
    }

    pub fn fraction_of(&self, element: Element) -> f64 {
        self.overrides[element.slot()].unwrap_or(self.fraction)
    }

    pub fn relay_step(&self, element: Element) -> usize {
        ((self.fraction_of(element) * self.total_steps as f64).floor() as usize).min(self.total_steps)
    }

    pub fn phase(&self, element: Element, step: usize) -> Phase {
        if step < self.relay_step(element) {
            Phase::Heuristic
        } else {
            Phase::Evolutive
        }
    }
}

/// The switches a training loop reads each step.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayState {
    /// Render through the learned gauge offsets.
    pub gauge_live: bool,
    pub sampler: SamplerMode,
    /// Weight of the coarse photometric loss used by the heuristic sampler.
    pub aux_weight: f64,
    pub organizer: Organizer,
    /// Organizer used once organization is relayed.
    pub evolutive_organizer: Organizer,
    /// Gauge offset tensors, frozen until the gauge relay.
    pub gauge_params: Vec<ParamId>,
    done: [bool; 3],
}

impl RelayState {
    /// All elements heuristic. Freezes `gauge_params` in `store`.
    pub fn heuristic(store: &mut ParamStore, gauge_params: Vec<ParamId>, aux_weight: f64, evolutive_organizer: Organizer) -> Self {
        for &id in &gauge_params {
            store.get_mut(id).set_requires_grad(false);
        }
        Self {
            gauge_live: false,
            sampler: SamplerMode::Heuristic,
            aux_weight,
            organizer: Organizer::Heuristic,
            evolutive_organizer,
            gauge_params,
            done: [false; 3],
        }
    }

    pub fn relayed(&self, element: Element) -> bool {
        self.done[element.slot()]
    }

    /// Switches `element` to its learned counterpart. Newly enabled gauge
    /// parameters start with fresh optimizer moments.
    pub fn on_relay(&mut self, element: Element, store: &mut ParamStore) -> Result<(), RelayError> {
        if self.done[element.slot()] {
            return Err(RelayError::AlreadyRelayed(element));
        }
        self.done[element.slot()] = true;
        match element {
            Element::Gauge => {
                self.gauge_live = true;
                for &id in &self.gauge_params {
                    store.get_mut(id).set_requires_grad(true);
                }
            }
            Element::Sampling => {
                self.sampler = SamplerMode::Evolutive;
                self.aux_weight = 0.0;
            }
            Element::Organization => self.organizer = self.evolutive_organizer,
        }
        Ok(())
    }

    /// Fires every relay due at `step` that has not fired yet; returns them.
    pub fn advance(&mut self, sched: &RelaySchedule, step: usize, store: &mut ParamStore) -> Result<Vec<Element>, RelayError> {
        let mut fired = Vec::new();
        for e in Element::ALL {
            if !self.relayed(e) && sched.phase(e, step) == Phase::Evolutive {
                self.on_relay(e, store)?;
                fired.push(e);
            }
        }
        Ok(fired)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ParamTensor;

    #[test]
    fn phase_examples() {
        let s = RelaySchedule::new(1000, 0.1).unwrap();
        assert_eq!(s.phase(Element::Gauge, 99), Phase::Heuristic);
        assert_eq!(s.phase(Element::Gauge, 100), Phase::Evolutive);
        let s = RelaySchedule::new(1000, 0.0).unwrap();
        assert_eq!(s.phase(Element::Sampling, 0), Phase::Evolutive);
        let s = RelaySchedule::new(1000, 1.0).unwrap();
        assert!((0..1000).all(|t| s.phase(Element::Organization, t) == Phase::Heuristic));
        assert!(RelaySchedule::new(10, 1.5).is_err() && RelaySchedule::new(0, 0.1).is_err());
    }

    #[test]
    fn overrides_are_per_element() {
        let s = RelaySchedule::new(200, 0.1).unwrap().with_override(Element::Gauge, 0.5).unwrap();
        assert_eq!(s.relay_step(Element::Gauge), 100);
        assert_eq!(s.relay_step(Element::Sampling), 20);
    }

    #[test]
    fn relay_flips_switches_once() {
        let mut store = ParamStore::new();
        let off = store.add(ParamTensor::zeros("g.offset0", &[4]).unwrap());
        let mut st = RelayState::heuristic(&mut store, vec![off], 0.5, Organizer::Full);
        assert!(!store.get(off).requires_grad());
        let sched = RelaySchedule::new(100, 0.1).unwrap();
        assert!(st.advance(&sched, 9, &mut store).unwrap().is_empty());
        assert_eq!(st.advance(&sched, 10, &mut store).unwrap(), Element::ALL.to_vec());
        assert!(st.gauge_live && store.get(off).requires_grad());
        assert_eq!((st.sampler, st.aux_weight, st.organizer), (SamplerMode::Evolutive, 0.0, Organizer::Full));
        assert!(st.advance(&sched, 11, &mut store).unwrap().is_empty());
        assert_eq!(st.on_relay(Element::Gauge, &mut store), Err(RelayError::AlreadyRelayed(Element::Gauge)));
    }
}
