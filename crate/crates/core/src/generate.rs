//! End-to-end benchmark generation: worlds, ground truth, prompts, split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{video_from_scene, write_benchmark, Benchmark, Video};
use crate::error::{Error, Result};
use crate::promptlang::{combine, filter_by_support, scene_atoms, PromptPolicy};
use crate::scenesim::{build_world, project, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Template world; video `k` uses `world.seed + k`.
    pub world: WorldConfig,
    pub prompts: PromptPolicy,
    pub train_videos: usize,
    pub test_videos: usize,
    /// Frame counts override `world.num_frames` per split when set.
    pub train_frames: Option<usize>,
    pub test_frames: Option<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            prompts: PromptPolicy::default(),
            train_videos: 3,
            test_videos: 1,
            train_frames: None,
            test_frames: None,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.prompts.validate()?;
        if self.train_videos + self.test_videos == 0 {
            return Err(Error::config("train_videos", "at least one video is needed"));
        }
        for (f, v) in [("train_frames", self.train_frames), ("test_frames", self.test_frames)] {
            if v == Some(0) {
                return Err(Error::config(f, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::config("benchmark", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Benchmark,
    pub test: Benchmark,
}

fn make_video(name: String, world: &WorldConfig, policy: &PromptPolicy) -> Result<Video> {
    let scene = build_world(world)?;
    let gt = project(&scene);
    let trees = combine(&scene_atoms(&scene), policy, world.seed);
    let prompts = filter_by_support(&trees, &scene, &gt, policy.support_threshold)?;
    video_from_scene(&name, &scene, &gt, prompts)
}

/// Generate every video of the split. Deterministic in the config.
pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<Split> {
    cfg.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let total = cfg.train_videos + cfg.test_videos;
    for k in 0..total {
        let is_train = k < cfg.train_videos;
        let frames = if is_train { cfg.train_frames } else { cfg.test_frames };
        let world = WorldConfig {
            seed: cfg.world.seed.wrapping_add(k as u64),
            num_frames: frames.unwrap_or(cfg.world.num_frames),
            ..cfg.world.clone()
        };
        if is_train {
            train.push(make_video(format!("train-{k:02}"), &world, &cfg.prompts)?);
        } else {
            test.push(make_video(format!("test-{:02}", k - cfg.train_videos), &world, &cfg.prompts)?);
        }
    }
    Ok(Split {
        train: Benchmark { videos: train },
        test: Benchmark { videos: test },
    })
}

/// Write a split as `root/train` and `root/test`.
pub fn write_split(root: &Path, split: &Split) -> Result<()> {
    write_benchmark(&root.join("train"), &split.train)?;
    write_benchmark(&root.join("test"), &split.test)
}
