//! Polarity-map reconstruction from filament observations.
//!
//! A small tanh MLP is fitted on a cylindrical embedding of a synoptic map so
//! that its zero level passes through the observed filaments. Several
//! independently seeded fits are combined into a confidence map.

pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod raster;
pub mod synth;
pub mod trainer;

pub use ensemble::{member_seed, train_ensemble, EnsembleResult, Strategy};
pub use error::{Error, Result};
pub use geometry::{
    BandMasks, Embedding, GridSpec, LatitudeMode, Provenance, ReferencePoint, ReferencePointSet,
};
pub use loss::{LossBreakdown, LossWeights, PixelPartition, Poles};
pub use metrics::{error_fractions, pearson, pixel_counts, ErrorReport, PixelCounts, ReportRow};
pub use net::{AdamConfig, MlpParams, MlpSpec, DEFAULT_LAYERS};
pub use raster::{ConfidenceMap, FilamentMask, PolarityMap, Raster, RasterKind};
pub use synth::{SynthSpec, SynthWorld};
pub use trainer::{predict_map, train_single, Problem, TrainConfig, TrainedModel};
