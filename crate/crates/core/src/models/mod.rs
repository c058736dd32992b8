//! BranchyNet-LeNet, its truncated lightweight classifier, the converting
//! autoencoders and the checkpoint format.

pub mod builders;
pub mod checkpoint;
pub mod network;

pub use builders::{
    build_branchy_lenet, build_converting_autoencoder, build_lenet, build_lightweight, classifier_input_shape,
    AutoencoderProfile, BRANCH_TAP, ENCODER_TAP,
};
pub use checkpoint::{checkpoint_id, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use network::{ActivationPattern, Architecture, Branch, ForwardTrace, Network, NetworkMeta};
