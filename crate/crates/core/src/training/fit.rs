use super::mixing::single_source;
use super::trainer::{StepRecord, Trainer, VisualInput};
use crate::data::{Corpus, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::clip_inputs;
use crate::model::{FrameTokenEmbeddings, TextBatch, VideoBatch, VideoCoCa};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// Where each training example's visual input comes from.
#[derive(Debug, Clone)]
pub enum TrainInputs<F> {
    /// `[T, H, W, C]` per clip.
    Clips(Vec<Tensor<F>>),
    /// Encoder tokens per clip.
    Cached(Vec<FrameTokenEmbeddings<F>>),
}

impl<F: Real> TrainInputs<F> {
    pub fn len(&self) -> usize {
        match self {
            TrainInputs::Clips(c) => c.len(),
            TrainInputs::Cached(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sampled and cropped model inputs for every clip of `corpus`.
pub fn corpus_clips<F: Real>(model: &VideoCoCa, corpus: &Corpus) -> Result<TrainInputs<F>> {
    Ok(TrainInputs::Clips(clip_inputs(model, &corpus.clips, model.config.num_frames)?))
}

/// Encoder tokens for every clip of `corpus`, computed `batch` clips at a time.
pub fn corpus_tokens<F: Real>(
    model: &VideoCoCa,
    store: &ParameterStore<F>,
    corpus: &Corpus,
    batch: usize,
) -> Result<TrainInputs<F>> {
    let clips = clip_inputs::<F>(model, &corpus.clips, model.config.num_frames)?;
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch.max(1)) {
        let emb = model.frame_token_embeddings(store, &VideoBatch::from_clips(chunk)?)?;
        for i in 0..chunk.len() {
            out.push(emb.clip(i)?);
        }
    }
    Ok(TrainInputs::Cached(out))
}

/// Framed caption ids for every clip.
pub fn corpus_captions(tokenizer: &Tokenizer, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
    corpus.clips.iter().map(|c| tokenizer.frame(&c.caption)).collect()
}

/// Runs `steps` optimizer steps over reshuffled epochs of `inputs`.
/// `on_step` sees every record as it is produced.
pub fn fit<F: Real>(
    trainer: &mut Trainer<'_, F>,
    inputs: &TrainInputs<F>,
    captions: &[Vec<usize>],
    steps: usize,
    batch_size: usize,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if inputs.len() != captions.len() {
        return Err(Error::shape("fit", &[inputs.len()], &[captions.len()]));
    }
    let vocab = trainer.model.config.vocab_size;
    let mut records = Vec::with_capacity(steps);
    for idx in single_source(inputs.len(), batch_size, seed)?.take(steps) {
        let rows: Vec<Vec<usize>> = idx.iter().map(|&i| captions[i].clone()).collect();
        let text = TextBatch::new(&rows, vocab, None)?;
        let record = match inputs {
            TrainInputs::Clips(clips) => {
                let picked: Vec<Tensor<F>> = idx.iter().map(|&i| clips[i].clone()).collect();
                trainer.train_step(VisualInput::Video(&VideoBatch::from_clips(&picked)?), &text)?
            }
            TrainInputs::Cached(cache) => {
                let picked: Vec<FrameTokenEmbeddings<F>> = idx.iter().map(|&i| cache[i].clone()).collect();
                trainer.train_step(VisualInput::Cached(&FrameTokenEmbeddings::concat(&picked)?), &text)?
            }
        };
        on_step(&record);
        records.push(record);
    }
    Ok(records)
}
