//! Retrieval, classification, mAP and BLEU metrics, prompt ensembles,
//! the frames ablation and report output.

pub mod embed;
pub mod metrics;
pub mod prompts;
pub mod report;

pub use embed::{clip_inputs, embed_clips, embed_texts, Embeddings, VideoEmbeddings};
pub use metrics::{
    bidirectional_recall, bleu4, corpus_bleu4, mean_average_precision, modified_precision, rank_of, recall_at_k,
    top_k, zero_shot_classify, Classification, SimilarityMatrix,
};
pub use prompts::{build_class_embeddings, PromptSet};
pub use report::{EvalReport, MetricRecord, REPORT_HEADER};

use crate::data::{Corpus, Tokenizer};
use crate::error::{Error, Result};
use crate::model::VideoCoCa;
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

const EMBED_BATCH: usize = 16;

/// Classification and retrieval scores of one model at one frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScores {
    pub frames: usize,
    pub top1: f64,
    pub top5: f64,
    pub t2v_r1: f64,
    pub t2v_r5: f64,
    pub v2t_r1: f64,
    pub v2t_r5: f64,
}

/// Caption-to-clip ground truth: every clip whose caption equals the query's.
pub fn caption_truth(corpus: &Corpus) -> Vec<Vec<usize>> {
    corpus
        .clips
        .iter()
        .map(|q| {
            corpus
                .clips
                .iter()
                .enumerate()
                .filter(|(_, c)| c.caption == q.caption)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

/// Embeds `corpus` at `frames` frames and scores prompt classification and
/// caption retrieval.
pub fn evaluate<F: Real>(
    model: &VideoCoCa,
    store: &ParameterStore<F>,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    prompts: &PromptSet,
    frames: usize,
) -> Result<EvalScores> {
    let classes = build_class_embeddings(model, store, tokenizer, &corpus.class_names, prompts)?;
    let videos = embed_clips(model, store, &corpus.clips, frames, EMBED_BATCH)?.contrastive;
    let labels: Vec<usize> = corpus.clips.iter().map(|c| c.class_id).collect();
    let cls = zero_shot_classify(&videos.data, &classes.data, videos.width, &labels, 1)?;
    let captions: Vec<String> = corpus.clips.iter().map(|c| c.caption.clone()).collect();
    let texts = embed_texts(model, store, tokenizer, &captions, 64)?;
    let sim = SimilarityMatrix::from_embeddings(&texts.data, &videos.data, videos.width, caption_truth(corpus))?;
    let (t2v_r1, v2t_r1) = bidirectional_recall(&sim, 1)?;
    let (t2v_r5, v2t_r5) = bidirectional_recall(&sim, 5)?;
    Ok(EvalScores {
        frames,
        top1: cls.top1,
        top5: cls.top5,
        t2v_r1,
        t2v_r5,
        v2t_r1,
        v2t_r5,
    })
}

/// Re-samples every clip at each frame count and evaluates the same weights.
pub fn frames_ablation<F: Real>(
    model: &VideoCoCa,
    store: &ParameterStore<F>,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    prompts: &PromptSet,
    frame_counts: &[usize],
) -> Result<Vec<EvalScores>> {
    if frame_counts.is_empty() {
        return Err(Error::invalid("frames ablation needs at least one frame count"));
    }
    frame_counts
        .iter()
        .map(|&t| evaluate(model, store, tokenizer, corpus, prompts, t))
        .collect()
}

/// Class-wise mAP of prompt-similarity scores against the corpus
/// multi-labels.
pub fn multilabel_map<F: Real>(
    model: &VideoCoCa,
    store: &ParameterStore<F>,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    prompts: &PromptSet,
    frames: usize,
) -> Result<f64> {
    let labels = build_class_embeddings(model, store, tokenizer, &corpus.label_names, prompts)?;
    let videos = embed_clips(model, store, &corpus.clips, frames, EMBED_BATCH)?.contrastive;
    let k = labels.rows;
    let mut scores = Vec::with_capacity(videos.rows * k);
    for i in 0..videos.rows {
        for c in 0..k {
            scores.push(videos.row(i).iter().zip(labels.row(c)).map(|(a, b)| a * b).sum());
        }
    }
    let truth: Vec<Vec<usize>> = corpus.clips.iter().map(|c| c.multi_labels.clone()).collect();
    mean_average_precision(&scores, k, &truth)
}

/// Greedy captions for every clip and their corpus BLEU-4 against the
/// reference captions.
pub fn caption_bleu<F: Real>(
    model: &VideoCoCa,
    store: &ParameterStore<F>,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    frames: usize,
) -> Result<(f64, Vec<String>)> {
    let videos = embed_clips(model, store, &corpus.clips, frames, EMBED_BATCH)?;
    let max_len = model.config.max_text_len;
    let mut pairs = Vec::with_capacity(corpus.len());
    let mut texts = Vec::with_capacity(corpus.len());
    for (clips, gens) in corpus.clips.chunks(EMBED_BATCH).zip(videos.generative.chunks(EMBED_BATCH)) {
        let gen = Tensor::stack(gens)?;
        for (clip, out) in clips.iter().zip(model.generate_from_pooled(store, &gen, max_len)?) {
            texts.push(tokenizer.detokenize(&out));
            pairs.push((out, tokenizer.tokenize(&clip.caption)?));
        }
    }
    Ok((corpus_bleu4(&pairs), texts))
}
