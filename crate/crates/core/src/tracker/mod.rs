//! Text-guided query tracker.
//!
//! A feature grid is fused with the prompt in the encoder; detect and track
//! queries are guided by the prompt, decoded against the fused tokens, and
//! scored for class, box and referring. Track queries carry identities from
//! frame to frame.

mod config;
mod data;
mod infer;
mod model;
mod suite;
mod targets;
mod text;
mod train;

pub use config::{ReferHead, RunConfig, SgmVariant, TrackerConfig, TrainConfig};
pub use data::{grid_spec, prepare, PreparedPrompt, PreparedVideo};
pub use infer::{predict_benchmark, referred_rows, step, track_prompt, FramePrediction, ObjectPrediction, Track, TrackState};
pub use model::{anchor_boxes, cosine_rows, displacement, extrapolate, point_code, HeadOut, Model, RefBox};
pub use suite::{composite_suite, tiny_config, tiny_video, tolerance, BLOCK_TOL, LOSS_TOL};
pub use targets::{assign_targets, frame_loss, match_cost, GtTarget, LossParts};
pub use text::{encode_text, orthonormal_rows, tokenize, TextVars};
pub use train::{clip_loss, load_checkpoint, save_checkpoint, train, TrainReport};
