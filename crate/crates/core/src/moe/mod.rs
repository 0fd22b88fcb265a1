//! Toy mixture-of-experts model, synthetic corpus and teacher training.

pub mod checkpoint;
mod config;
pub mod corpus;
mod model;
mod routing;
pub mod train;

pub use config::MoEConfig;
pub use corpus::MarkovCorpus;
pub use model::{
    ffn_forward, Block, BoundBlock, BoundModel, ExpertWeights, ForwardOutput, MoELayer, MoEModel,
    ParamId, FFN_NAMES,
};
pub use routing::{gate_scores, LayerRouting, RoutingRecord, SlotMasker, SlotWeights};
pub use train::{gen_synthetic_model, TeacherConfig, TeacherLog};
