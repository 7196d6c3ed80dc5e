// SPDX-License-Identifier: Apache-2.0

//! Shared inputs for the criterion benches.

use pruneleak_core::{ExperimentSpec, ImageSet, NeuronConfig, PatternLibrary, Simulator, TraceSet, Variant};

/// Default layer and `count` traces of experiment 0.
pub struct Fixture {
    pub spec: ExperimentSpec,
    pub lib: PatternLibrary,
    pub neurons: Vec<NeuronConfig>,
    pub images: ImageSet,
    pub traces: TraceSet,
}

pub fn fixture(variant: Variant, count: usize) -> Fixture {
    let mut spec = ExperimentSpec::default();
    spec.sim.variant = variant;
    spec.trace_count = count;
    let lib = PatternLibrary::reference();
    let neurons = spec.neurons().expect("default layer");
    let images = spec.images(0).expect("images");
    let traces = Simulator::new(&neurons, &spec.sim_config(0), &lib)
        .and_then(|s| s.run(&images))
        .expect("simulation")
        .0;
    Fixture {
        spec,
        lib,
        neurons,
        images,
        traces,
    }
}
