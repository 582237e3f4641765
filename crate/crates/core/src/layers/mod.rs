//! The network layer math: LSTM/BiLSTM, attention pooling, multi-head
//! self-attention with encoder blocks, and the pyramid convolution stack.
//!
//! Parameter structs are generic over their storage: `Params<Tensor>` holds
//! the trainable values, and `register` clones them onto a tape yielding
//! `Params<TensorId>` for graph building.

mod attention;
mod conv;
mod encoder;
pub mod init;
mod lstm;

pub use attention::{
    attention_pool, multi_head_self_attention, AttnPoolOut, AttnPoolParams, HeadParams, MhsaOut,
    MultiHeadParams,
};
pub use conv::{
    dpcnn_block_count, dpcnn_forward, dpcnn_length_schedule, equal_width_conv, halving_pool,
    text_cnn_forward, ConvLayer, ConvStackParams, DpcnnOut, TextCnnParams, TEXT_CNN_FILTERS,
    TEXT_CNN_WIDTHS,
};
pub use encoder::{encoder_block, encoder_forward, EncoderBlockParams};
pub use lstm::{bilstm, bilstm_full, lstm_forward, lstm_step, BilstmOut, LstmParams};
