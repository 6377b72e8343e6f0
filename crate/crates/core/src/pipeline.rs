//! The multi-view prediction flow: a global backbone pass produces category
//! maps and the rollout prior, the fused maps yield one box per selected class,
//! each box is cropped, resized and passed through the backbone again, and the
//! per-view probabilities are max-fused with the global ones.

use rayon::prelude::*;

use crate::error::{DidError, Result};
use crate::image::Image;
use crate::localization::{localize, BoundingBox, InstanceProposal};
use crate::reconstraint::{apply_strategy, Strategy};
use crate::rollout::spatial_prior;
use crate::semantic::{
    pool_scores, project_categories, project_selected, reshape_tokens, select_topn, HeadKernel,
    SelectionOrder,
};
use crate::tensor::{average_pool_spatial, resample_plane, sigmoid, Tensor};
use crate::vit::{forward, BackboneWeights, ViTConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub lambda: f64,
    pub top_n: usize,
    pub strategy: Strategy,
    pub order: SelectionOrder,
    /// Base seed for [`SelectionOrder::Random`]; mixed with an image hash so
    /// different images draw different classes.
    pub selection_seed: u64,
    pub vit: ViTConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lambda: 0.6,
            top_n: 4,
            strategy: Strategy::Hadamard,
            order: SelectionOrder::Descending,
            selection_seed: 0,
            vit: ViTConfig::toy(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(DidError::Config(format!(
                "lambda must lie in (0, 1), got {}",
                self.lambda
            )));
        }
        self.vit.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    pub global_scores: Vec<f64>,
    pub fused_scores: Vec<f64>,
    pub proposals: Vec<InstanceProposal>,
    /// One probability vector per proposal, same order.
    pub per_view_scores: Vec<Vec<f64>>,
}

/// Backbone-only quantities of a view: the `D x h x w` token features and the
/// `h x w` rollout prior.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    pub features: Tensor,
    pub prior: Tensor,
}

impl ViewFeatures {
    pub fn compute(image: &Image, weights: &BackboneWeights) -> Result<Self> {
        let out = forward(image, weights)?;
        Ok(ViewFeatures {
            features: reshape_tokens(&out.patch_tokens)?,
            prior: spatial_prior(&out.attention)?,
        })
    }

    /// Per-channel spatial means of the token features.
    pub fn pooled(&self) -> Vec<f64> {
        average_pool_spatial(&self.features).expect("features are rank 3")
    }
}

/// Crops the inclusive box and resamples each colour plane to `out x out`.
pub fn crop_resize(image: &Image, bbox: &BoundingBox, out: usize) -> Result<Image> {
    bbox.validate(image.width(), image.height())?;
    if out == 0 {
        return Err(DidError::Config("crop size must be positive".into()));
    }
    let (bw, bh) = (bbox.width(), bbox.height());
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let mut crop = Vec::with_capacity(bw * bh);
            for y in bbox.y0..=bbox.y1 {
                for x in bbox.x0..=bbox.x1 {
                    crop.push(image.pixel(y, x)[c]);
                }
            }
            resample_plane(&crop, bh, bw, out, out)
        })
        .collect();
    Ok(Image::from_planes(out, out, [&planes[0], &planes[1], &planes[2]]))
}

/// Elementwise maximum over the global vector and every local vector.
pub fn fuse_scores(global: &[f64], locals: &[Vec<f64>]) -> Vec<f64> {
    let mut fused = global.to_vec();
    for local in locals {
        for (f, &l) in fused.iter_mut().zip(local) {
            *f = f.max(l);
        }
    }
    fused
}

/// Pre-sigmoid class scores `B` of a view.
pub fn view_logits(features: &Tensor, head: &HeadKernel) -> Result<Vec<f64>> {
    pool_scores(&project_categories(features, head)?)
}

fn image_seed(image: &Image) -> u64 {
    // FNV-1a over the pixel bits
    image.data().iter().fold(0xcbf2_9ce4_8422_2325, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Steps two to four for one image: select classes, fuse the prior into their
/// maps and box each one.
pub fn propose(
    image: &Image,
    view: &ViewFeatures,
    logits: &[f64],
    head: &HeadKernel,
    cfg: &PipelineConfig,
) -> Result<Vec<InstanceProposal>> {
    let seed = match cfg.order {
        SelectionOrder::Random => cfg.selection_seed ^ image_seed(image),
        _ => cfg.selection_seed,
    };
    let classes = select_topn(logits, cfg.top_n, cfg.order, seed);
    if classes.is_empty() {
        return Ok(Vec::new());
    }
    let selected = project_selected(&view.features, head, &classes)?;
    let fused = apply_strategy(&selected, &view.prior, cfg.strategy)?;
    let confidences: Vec<f64> = classes.iter().map(|&c| sigmoid(logits[c])).collect();
    localize(
        &fused,
        &classes,
        &confidences,
        cfg.lambda,
        image.height(),
        image.width(),
    )
}

/// Backbone features of the crop under `bbox`, resized to the backbone input.
pub fn local_view(image: &Image, bbox: &BoundingBox, weights: &BackboneWeights) -> Result<Tensor> {
    let crop = crop_resize(image, bbox, weights.config.image_size)?;
    reshape_tokens(&forward(&crop, weights)?.patch_tokens)
}

pub fn predict(
    image: &Image,
    weights: &BackboneWeights,
    head: &HeadKernel,
    cfg: &PipelineConfig,
) -> Result<PredictionResult> {
    cfg.validate()?;
    let global = ViewFeatures::compute(image, weights)?;
    predict_with_global(image, &global, weights, head, cfg)
}

/// [`predict`] with the global pass supplied by the caller, for callers that
/// cache backbone features of a frozen backbone.
pub fn predict_with_global(
    image: &Image,
    global: &ViewFeatures,
    weights: &BackboneWeights,
    head: &HeadKernel,
    cfg: &PipelineConfig,
) -> Result<PredictionResult> {
    let logits = view_logits(&global.features, head)?;
    let proposals = propose(image, global, &logits, head, cfg)?;
    let per_view_scores = proposals
        .par_iter()
        .map(|p| {
            let local = local_view(image, &p.bbox, weights)?;
            Ok(view_logits(&local, head)?.into_iter().map(sigmoid).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let global_scores: Vec<f64> = logits.into_iter().map(sigmoid).collect();
    let fused_scores = fuse_scores(&global_scores, &per_view_scores);
    Ok(PredictionResult {
        global_scores,
        fused_scores,
        proposals,
        per_view_scores,
    })
}
