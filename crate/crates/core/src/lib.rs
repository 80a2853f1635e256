//! Differentiable rendering with learnable rendering elements: gauge
//! transforms, inverse-CDF ray sampling and primitive organization, plus the
//! relay schedule that hands training over from heuristic to learned elements.

pub mod diff;
pub mod fields;
pub mod gauge;
pub mod par;
pub mod primitives;
pub mod relay;
pub mod sampling;
pub mod volren;
