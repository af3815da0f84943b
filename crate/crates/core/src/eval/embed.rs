use crate::autodiff::Graph;
use crate::data::synth::Clip;
use crate::data::{prepare_clip, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{TextBatch, VideoBatch, VideoCoCa};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// Row-major `[n, d]` embeddings in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Unit-norm `[CLS]` embeddings of `texts`, `batch` at a time.
pub fn embed_texts<F: Real>(
    model: &VideoCoCa,
    store: &ParameterStore<F>,
    tokenizer: &Tokenizer,
    texts: &[String],
    batch: usize,
) -> Result<Embeddings> {
    let d = model.config.width;
    let mut data = Vec::with_capacity(texts.len() * d);
    for chunk in texts.chunks(batch.max(1)) {
        let rows = chunk.iter().map(|t| tokenizer.frame(t)).collect::<Result<Vec<_>>>()?;
        let text = TextBatch::new(&rows, model.config.vocab_size, None)?;
        let mut g = Graph::new();
        let (_, cls) = model.decode_unimodal(&mut g, store, &text)?;
        data.extend(g.value(cls).to_f64_vec());
    }
    Ok(Embeddings {
        rows: texts.len(),
        width: d,
        data,
    })
}

/// `[T, H, W, C]` model inputs for each clip: `frames` uniformly sampled
/// frames, center-cropped to the model resolution.
pub fn clip_inputs<F: Real>(model: &VideoCoCa, clips: &[Clip], frames: usize) -> Result<Vec<Tensor<F>>> {
    let c = &model.config;
    clips
        .iter()
        .map(|clip| prepare_clip(&clip.frames.cast::<F>(), frames, c.frame_height, c.frame_width))
        .collect()
}

/// Pooled video outputs of a set of clips.
#[derive(Debug, Clone)]
pub struct VideoEmbeddings<F> {
    pub contrastive: Embeddings,
    /// One `[n_gen, d]` generative tensor per clip.
    pub generative: Vec<Tensor<F>>,
}

/// Runs the full video path over `clips` with `frames` frames each.
pub fn embed_clips<F: Real>(
    model: &VideoCoCa,
    store: &ParameterStore<F>,
    clips: &[Clip],
    frames: usize,
    batch: usize,
) -> Result<VideoEmbeddings<F>> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips to embed"));
    }
    let inputs = clip_inputs::<F>(model, clips, frames)?;
    let d = model.config.width;
    let mut data = Vec::with_capacity(clips.len() * d);
    let mut generative = Vec::with_capacity(clips.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let video = VideoBatch::from_clips(chunk)?;
        let pooled = model.embed_video(store, &video)?;
        data.extend(pooled.contrastive.to_f64_vec());
        for i in 0..chunk.len() {
            generative.push(pooled.generative.index_first(i)?);
        }
    }
    Ok(VideoEmbeddings {
        contrastive: Embeddings {
            rows: clips.len(),
            width: d,
            data,
        },
        generative,
    })
}
