//! Tokenization, frame sampling, the synthetic motion corpus and its files.

pub mod io;
pub mod sampling;
pub mod synth;
pub mod tokenizer;

pub use sampling::{center_crop, prepare_clip, uniform_sample_frames};
pub use synth::{synth_generate, train_eval_split, ClassSpec, Clip, Corpus, Motion, Shape, SynthSpec, VOCABULARY};
pub use tokenizer::Tokenizer;
