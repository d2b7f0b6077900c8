//! Reference probes: per-layer linear probing on pooled tokens and the
//! adapter restricted to a subset of layers.

mod probe;
mod restriction;

pub use probe::{
    job_seed, layer_sweep, linear_probe, pooled_features, CurveRow, LayerCurve, LinearProbeConfig,
    ProbeResult, ProbeTarget,
};
pub use restriction::{combo_layer_restriction, restrict_layers, LayerMode};
