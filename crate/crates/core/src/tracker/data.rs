//! Videos turned into what the network consumes: feature grids, normalized
//! targets and per-prompt referral sets.

use super::config::TrackerConfig;
use super::targets::GtTarget;
use crate::dataset::Video;
use crate::error::{Error, Result};
use crate::promptlang::ReferralMap;
use crate::scenesim::{rasterize_all, GridSpec};

#[derive(Debug, Clone)]
pub struct PreparedPrompt {
    pub id: String,
    pub text: String,
    pub referral: ReferralMap,
}

#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub name: String,
    pub image: (f64, f64),
    /// One `cells × channels` grid per frame.
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<GtTarget>>,
    pub prompts: Vec<PreparedPrompt>,
}

impl PreparedVideo {
    pub fn num_frames(&self) -> usize {
        self.features.len()
    }
}

pub fn grid_spec(cfg: &TrackerConfig, image: (u32, u32)) -> GridSpec {
    GridSpec {
        grid_w: cfg.grid.0,
        grid_h: cfg.grid.1,
        image_w: image.0 as f64,
        image_h: image.1 as f64,
        num_colors: cfg.num_colors,
    }
}

pub fn prepare(video: &Video, cfg: &TrackerConfig) -> Result<PreparedVideo> {
    if video.palette.len() > cfg.num_colors {
        return Err(Error::config(
            "num_colors",
            format!(
                "video {} has {} colors but the model was built for {}",
                video.name,
                video.palette.len(),
                cfg.num_colors
            ),
        ));
    }
    let (w, h) = (video.gt.image_size.0 as f64, video.gt.image_size.1 as f64);
    let features = rasterize_all(&video.gt, &video.attributes(), &grid_spec(cfg, video.gt.image_size));
    let targets = video
        .gt
        .frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|e| GtTarget {
                    id: e.id,
                    bbox: e.bbox.to_normalized(w, h),
                })
                .collect()
        })
        .collect();
    let prompts = video
        .prompts
        .iter()
        .zip(&video.referrals)
        .map(|(p, r)| PreparedPrompt {
            id: p.id.clone(),
            text: p.text.clone(),
            referral: r.clone(),
        })
        .collect();
    Ok(PreparedVideo {
        name: video.name.clone(),
        image: (w, h),
        features,
        targets,
        prompts,
    })
}
