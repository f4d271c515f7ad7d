//! Toy grounding decoder: interleaved frame/timestamp/query sequences, a
//! small causal transformer with adapters on its early layers and LoRA on
//! the rest, and greedy decoding of `[a.bs, c.ds]` windows.

mod model;
mod sequence;
mod vocab;

pub use model::{
    ce_loss, greedy_decode_with, lora_apply, text_positions, AdapterKind, DecoderConfig, DecoderOutput,
    GroundingDecoder,
};
pub use sequence::{build_sequence, parse_window, TokenKind, TokenSequence, VideoSample};
pub use vocab::{format_timestamp, render_window, tokenize_timestamp, Vocab, BOS, EOS, PAD, VIS};
