use super::fit::TrainInputs;
use super::mixing::single_source;
use super::optim::{Optimizer, OptimizerConfig};
use super::tuning::{freeze_mask, TuningMode};
use crate::autodiff::{Graph, Var};
use crate::data::{Corpus, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{argmax, FrameTokenEmbeddings, TextBatch, VideoBatch, VideoCoCa, VqaHead};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// One question about one clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaExample {
    pub clip: usize,
    pub question: String,
    pub answer: usize,
}

/// Motion and shape questions answerable from the class name of every clip.
/// Returns the answer vocabulary and the examples.
pub fn vqa_examples(corpus: &Corpus) -> Result<(Vec<String>, Vec<VqaExample>)> {
    let mut answers: Vec<String> = Vec::new();
    let mut id = |w: &str| match answers.iter().position(|a| a == w) {
        Some(i) => i,
        None => {
            answers.push(w.to_string());
            answers.len() - 1
        }
    };
    let mut examples = Vec::new();
    for (i, clip) in corpus.clips.iter().enumerate() {
        let name = corpus
            .class_names
            .get(clip.class_id)
            .ok_or_else(|| Error::invalid(format!("clip {} has no class name", clip.id)))?;
        let words: Vec<&str> = name.split_whitespace().collect();
        let (shape, motion) = match words.as_slice() {
            [shape, "moving", dir] => (*shape, *dir),
            [shape, "standing", "still"] => (*shape, "still"),
            _ => return Err(Error::invalid(format!("cannot form questions from class `{name}`"))),
        };
        examples.push(VqaExample {
            clip: i,
            question: "which way does the shape move".into(),
            answer: id(motion),
        });
        examples.push(VqaExample {
            clip: i,
            question: "what shape is it".into(),
            answer: id(shape),
        });
    }
    Ok((answers, examples))
}

fn batch_logits<F: Real>(
    model: &VideoCoCa,
    head: &VqaHead,
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    tokenizer: &Tokenizer,
    inputs: &TrainInputs<F>,
    picked: &[&VqaExample],
) -> Result<Var> {
    let pooled = match inputs {
        TrainInputs::Clips(clips) => {
            let v: Vec<Tensor<F>> = picked.iter().map(|e| clips[e.clip].clone()).collect();
            model.video_forward(g, store, &VideoBatch::from_clips(&v)?)?
        }
        TrainInputs::Cached(cache) => {
            let c: Vec<FrameTokenEmbeddings<F>> = picked.iter().map(|e| cache[e.clip].clone()).collect();
            model.adapt_cached(g, store, &FrameTokenEmbeddings::concat(&c)?)?
        }
    };
    let rows = picked
        .iter()
        .map(|e| tokenizer.frame(&e.question))
        .collect::<Result<Vec<_>>>()?;
    let text = TextBatch::new(&rows, model.config.vocab_size, None)?;
    head.answer_logits(model, g, store, pooled.generative, &text)
}

/// Trains the answer head (and whatever else `tuning` leaves trainable) with
/// cross-entropy. Returns the per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn train_vqa<F: Real>(
    model: &VideoCoCa,
    head: &VqaHead,
    store: &mut ParameterStore<F>,
    tokenizer: &Tokenizer,
    inputs: &TrainInputs<F>,
    examples: &[VqaExample],
    tuning: TuningMode,
    optimizer: OptimizerConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if matches!(inputs, TrainInputs::Cached(_)) && matches!(tuning, TuningMode::FT | TuningMode::FrozenThenFT { .. }) {
        return Err(Error::invalid("cached encoder tokens require a frozen encoder"));
    }
    let mut opt = Optimizer::new(optimizer)?;
    let mut losses = Vec::with_capacity(optimizer.total_steps);
    for (step, idx) in single_source(examples.len(), batch_size, seed)?
        .take(optimizer.total_steps)
        .enumerate()
    {
        store.apply_trainable(&freeze_mask(tuning, step));
        let picked: Vec<&VqaExample> = idx.iter().map(|&i| &examples[i]).collect();
        let mut g = Graph::new();
        let logits = batch_logits(model, head, &mut g, store, tokenizer, inputs, &picked)?;
        let targets: Vec<Option<usize>> = picked.iter().map(|e| Some(e.answer)).collect();
        let loss = g.cross_entropy(logits, &targets)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("VQA loss at step {}", step + 1)));
        }
        let grads = g.backward(loss)?.into_named();
        drop(g);
        opt.step(store, grads, step + 1)?;
        losses.push(value);
    }
    Ok(losses)
}

/// Fraction of examples whose highest-scoring answer is correct.
pub fn vqa_accuracy<F: Real>(
    model: &VideoCoCa,
    head: &VqaHead,
    store: &ParameterStore<F>,
    tokenizer: &Tokenizer,
    inputs: &TrainInputs<F>,
    examples: &[VqaExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no VQA examples"));
    }
    let mut correct = 0;
    for chunk in examples.chunks(32) {
        let picked: Vec<&VqaExample> = chunk.iter().collect();
        let mut g = Graph::new();
        let logits = batch_logits(model, head, &mut g, store, tokenizer, inputs, &picked)?;
        let k = head.answers;
        for (row, e) in g.value(logits).data().chunks_exact(k).zip(chunk) {
            correct += usize::from(argmax(row) == e.answer);
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}
