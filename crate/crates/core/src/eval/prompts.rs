use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::VideoCoCa;
use crate::params::ParameterStore;
use crate::tensor::Real;

use super::embed::{embed_texts, Embeddings};

/// Text templates with a `{label}` slot; each class embedding averages them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: [
                "a small {label}",
                "a large {label}",
                "a {label} slowly",
                "a {label} quickly",
                "a small {label} slowly",
                "a small {label} quickly",
                "a large {label} slowly",
                "a large {label} quickly",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl PromptSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() || templates.iter().any(|t| !t.contains("{label}")) {
            return Err(Error::invalid("every prompt template needs a {label} slot"));
        }
        Ok(PromptSet { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn render(&self, label: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replace("{label}", label)).collect()
    }
}

/// Per-class text embeddings: each prompt embedding is normalized, the
/// prompts of a class are averaged and the average is renormalized.
pub fn build_class_embeddings<F: Real>(
    model: &VideoCoCa,
    store: &ParameterStore<F>,
    tokenizer: &Tokenizer,
    labels: &[String],
    prompts: &PromptSet,
) -> Result<Embeddings> {
    if labels.is_empty() {
        return Err(Error::invalid("no class labels"));
    }
    let p = prompts.templates().len();
    let texts: Vec<String> = labels.iter().flat_map(|l| prompts.render(l)).collect();
    let emb = embed_texts(model, store, tokenizer, &texts, 64)?;
    let d = emb.width;
    let mut data = Vec::with_capacity(labels.len() * d);
    for k in 0..labels.len() {
        let mut mean = vec![0.0; d];
        for j in 0..p {
            let row = emb.row(k * p + j);
            let n = l2(row);
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x / n / p as f64;
            }
        }
        let n = l2(&mean);
        data.extend(mean.iter().map(|x| x / n));
    }
    Ok(Embeddings {
        rows: labels.len(),
        width: d,
        data,
    })
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
}
