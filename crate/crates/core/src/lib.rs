//! Instance-aware multi-label recognition on a small vision transformer.
//!
//! A frozen, seeded ViT produces patch tokens and per-layer attention. Attention
//! rollout turns the attention into a spatial prior, a 1×1 category head turns
//! the tokens into class maps, and the two are combined into instance maps.
//! Each selected class map is thresholded into a box, the box is cropped and
//! re-fed through the backbone, and the local scores are fused with the global
//! ones by an elementwise maximum.
//!
//! ```
//! use did::{init_weights, predict, HeadKernel, Image, PipelineConfig, ViTConfig};
//!
//! let cfg = PipelineConfig { top_n: 2, ..PipelineConfig::default() };
//! let weights = init_weights(&ViTConfig::toy(), 7).unwrap();
//! let head = HeadKernel::init(4, 32, 7);
//! let image = Image::filled(64, 64, [0.5, 0.2, 0.1]);
//! let result = predict(&image, &weights, &head, &cfg).unwrap();
//! assert_eq!(result.fused_scores.len(), 4);
//! assert!(result.proposals.len() <= 2);
//! ```

pub mod cli;
pub mod dataset;
pub mod error;
pub mod image;
pub mod io;
pub mod localization;
pub mod metrics;
pub mod pipeline;
pub mod reconstraint;
pub mod rollout;
pub mod semantic;
pub mod tensor;
pub mod training;
pub mod vit;

pub use cli::{run_cli, RunConfig};
pub use dataset::{generate_synthetic, LabeledImage};
pub use error::{DidError, Result};
pub use image::Image;
pub use localization::{BoundingBox, InstanceProposal};
pub use metrics::{average_precision, compute_metrics, MetricMode, MetricsReport};
pub use pipeline::{predict, PipelineConfig, PredictionResult};
pub use reconstraint::Strategy;
pub use semantic::{HeadKernel, SelectionOrder};
pub use tensor::Tensor;
pub use training::{train_head, TrainConfig};
pub use vit::{init_weights, BackboneWeights, ViTConfig};
