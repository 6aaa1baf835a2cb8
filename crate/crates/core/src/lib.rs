//! Bayesian encoder-decoder with Monte Carlo dropout for unsupervised
//! anomaly segmentation.
//!
//! A dual-head U-Net is trained on healthy paired images with a
//! heteroscedastic Gaussian likelihood. At prediction time dropout stays
//! active; the spread of `T` stochastic forward passes gives the epistemic
//! variance, the mean of the predicted variance head gives the aleatoric
//! variance, and their voxel-wise quotient (the *scibilic* map) highlights
//! regions the model could learn to predict but does not.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mc;
pub mod ops;
pub mod phantom;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volume;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, FormatError, Result};
pub use eval::{threshold_sweep, EvalReport};
pub use mc::{
    mc_predict, scibilic_map, segmented_inference, McConfig, PredictiveOutput, Predictor,
};
pub use phantom::{
    build_dataset, generate_phantom_pair, normalize_tissue_mean, Dataset, PhantomPair, PhantomSpec,
};
pub use real::Real;
pub use rng::RngStream;
pub use tensor::Tensor;
pub use train::{adamw_step, heteroscedastic_loss, train, OptimState, TrainConfig};
pub use unet::{build_model, ForwardMode, NetworkWeights, UNetConfig};
pub use volume::{read_volume, write_volume, Mask, Volume};
