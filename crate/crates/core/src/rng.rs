//! Deterministic random-stream derivation.
//!
//! Every component of a run draws from its own ChaCha20 stream. The key is the
//! run's master seed; the 64-bit stream selector is `component << 32 | iteration`.
//! Streams therefore never overlap and depend only on `(master_seed, component,
//! iteration)`, not on how many numbers other components consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    InitialDesign = 1,
    Fit = 2,
    Grid = 3,
    Thompson = 4,
    Expansion = 5,
    ExpansionSample = 6,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::InitialDesign,
        Component::Fit,
        Component::Grid,
        Component::Thompson,
        Component::Expansion,
        Component::ExpansionSample,
    ];

    pub fn id(self) -> u64 {
        self as u64
    }
}

pub fn stream_selector(component: Component, iteration: u32) -> u64 {
    (component.id() << 32) | iteration as u64
}

pub fn component_rng(master_seed: u64, component: Component, iteration: u32) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_selector(component, iteration));
    rng
}
