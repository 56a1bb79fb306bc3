//! Shared fixtures for the benchmarks.

use pilrecon_core::geometry::{reference_grid, GridSpec};
use pilrecon_core::loss::{LossWeights, Poles};
use pilrecon_core::synth::{generate, SynthSpec};
use pilrecon_core::trainer::Problem;

/// Synthetic map with a step-8 reference grid, the usual desk-scale setup.
pub fn problem(height: usize, width: usize, gradient_weight: f64) -> Problem {
    let world = generate(&SynthSpec {
        polar_strength: 4.0,
        ..SynthSpec::new(height, width, 0)
    })
    .expect("synthetic map");
    let spec = GridSpec::new(height, width).expect("grid");
    let refs = reference_grid(&spec, 8, &world.target).expect("reference grid");
    let weights = LossWeights {
        gradient: gradient_weight,
        ..LossWeights::default()
    };
    Problem::new(&world.filaments, &spec, &refs, Poles::default(), weights).expect("problem")
}
