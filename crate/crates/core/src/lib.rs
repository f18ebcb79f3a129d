//! Interface numerics for a vision-language-action model: action and state
//! tokenization, flow matching, the action expert, adaptive depth tokens,
//! sequence packing and prompt assembly.

pub mod bpe;
pub mod codec;
pub mod corpus;
pub mod dct;
pub mod depth;
pub mod expert;
pub mod flow;
pub mod normalize;
pub mod packing;
pub mod prompt;
pub mod rng;
pub mod state;
pub mod synth;
pub mod tokenizer;
