//! Toy decoder-only transformer: config, weights, byte tokenizer, forward
//! pass, embedding gradient and the checkpoint format.

pub mod config;
pub mod format;
pub mod forward;
pub mod grad;
pub mod tokenizer;
pub mod weights;

pub use config::ModelConfig;
pub use format::{load_weights, save_weights};
pub use forward::{forward, hidden_states, last_logits};
pub use grad::{embedding_gradient, next_token_loss};
pub use tokenizer::{tokenize, ByteTokenizer, TokenId, EOS_ID, SEP_ID};
pub use weights::{LayerWeights, ModelWeights};
