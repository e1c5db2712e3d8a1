//! Training-free local-control operators over attention maps, masks and latents.

mod config;
mod ftr;
mod mask;
mod matching;
mod rdloss;
mod update;

pub use config::GuidanceConfig;
pub use ftr::{focused_token_response, ftr_factors};
pub use mask::{ControlMask, MASK_FACTORS};
pub use matching::{
    count_max, in_mask_mass, match_control_concept, select_by_mass, ConceptMatchState,
};
pub use rdloss::{rdloss, rdloss_gradient, RdLoss, TokenLoss};
pub use update::update_latent;
