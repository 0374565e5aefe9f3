//! The complete two-pass model: parameters, both passes and the joint training step.

mod config;
mod offline;
mod online;
mod params;
mod train;

pub use config::{ModelConfig, TextInput, BOS, EOS, FIRST_TOKEN, PAD};
pub use offline::{
    best_token, full_encoder, offline_decoder_forward, offline_encode, offline_forward, offline_greedy_decode,
    stride_conv_downsample, stride_conv_linear, text_encoder, OfflineMemory,
};
pub use online::{
    online_decoder_forward, online_encoder_chunked, online_encoder_forward, online_encoder_oracle,
    online_encoder_states, online_greedy_hypothesis, predictor_chunk_logits, shift_right, DecoderStream,
};
pub use params::{init_model, parameter_inventory, Graph, Init, ModelParams};
pub use train::{
    batch_loss, dlt_sample_chunk_size, loss_and_gradients, loss_only, universal_training_step, LossReport,
    StepDraws,
};
