//! Miniature DETR-style detection stack: transformer encoder-decoder head
//! with learned object queries, Hungarian set matching, set-prediction loss,
//! and a plain gradient-descent training loop.

pub mod checkpoint;
pub mod head;
pub mod hungarian;
pub mod loss;
pub mod model;
pub mod train;

pub use head::{encode_decode, positional_encoding, predict_heads, HeadConfig, HeadParams};
pub use hungarian::{hungarian_match, Assignment};
pub use loss::{matching_costs, set_loss, GtObject, DEFAULT_LAMBDA_BOX};
pub use model::{
    extract_detections, image_to_tensor, Detection, Model, ModelConfig, ModelParams, RunMode,
    ALL_MODES,
};
pub use train::{train_step, TrainError, TrainSample};
