//! Out-of-distribution detection at desk scale.
//!
//! The crate trains small MLP classifiers with decomposed-confidence
//! (dividend/divisor) heads on synthetic distribution-shift benchmarks and
//! evaluates OoD scoring functions (max-softmax baseline, temperature-scaled
//! ODIN, layer-wise Mahalanobis, DeConf h/g) with AUROC and TNR@TPR95.
//! Everything is f64, seeded, and deterministic: the same config and seed
//! reproduce checkpoints and reports byte for byte.

pub mod checkpoint;
pub mod deconf;
pub mod evalkit;
pub mod fdiff;
pub mod model;
pub mod netcore;
pub mod numgrad;
pub mod perturb;
pub mod scorer;
pub mod seeds;
pub mod shiftbench;
pub mod trainer;
