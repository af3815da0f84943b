//! The video captioner: patch embedding, frame encoder, the four video
//! adaptors, the two-stage text decoder and caption generation.
//!
//! Parameter names are stable and double as checkpoint record names:
//!
//! | prefix          | component       |
//! |-----------------|-----------------|
//! | `enc.*`         | encoder         |
//! | `gen_pool.*`    | gen_pooler      |
//! | `con_pool.*`    | con_pooler      |
//! | `temporal.*`    | adaptor_extra   |
//! | `txt.*`         | decoder         |
//! | `loss.log_tau`  | loss            |
//! | `vqa.*`         | task_head       |

pub mod checkpoint;
pub mod config;
pub mod flops;
pub mod text;
pub mod video;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use self::config::{AdaptorMode, ModelConfig};
pub use self::text::TextBatch;
pub use self::video::{flatten_temporal, unflatten_temporal, FrameTokenEmbeddings, VideoBatch};

use crate::autodiff::{Graph, Var};
use crate::data::tokenizer::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, AttentionalPooler, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::params::{Component, Init, ParameterStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TAU: f64 = 0.07;

/// Graph handles for one pooled batch.
#[derive(Debug, Clone, Copy)]
pub struct PooledVars {
    /// `[B, n_gen, d]` (or `[B, T, d]` for the factorized encoder).
    pub generative: Var,
    /// `[B, d]`, unit rows.
    pub contrastive: Var,
}

/// Materialized pooled outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRepresentation<F> {
    pub generative: Tensor<F>,
    pub contrastive: Tensor<F>,
}

/// Where the encoder output of a video batch lives and how it is laid out.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVideo {
    /// `[B*T, N, d]` for per-frame modes, `[B, T*N, d]` for joint space-time.
    pub tokens: Var,
    pub batch: usize,
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct VideoCoCa {
    pub config: ModelConfig,
    patch: Linear,
    encoder: Vec<TransformerBlock>,
    gen_pool: AttentionalPooler,
    con_pool: AttentionalPooler,
    temporal: Vec<TransformerBlock>,
    temporal_ln: LayerNorm,
    unimodal: Vec<TransformerBlock>,
    multimodal: Vec<TransformerBlock>,
    cls_ln: LayerNorm,
    final_ln: LayerNorm,
    head: Linear,
}

impl VideoCoCa {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let h = config.n_heads;
        let r = config.mlp_ratio;
        let blocks = |prefix: &str, n: usize, cross: bool| -> Result<Vec<TransformerBlock>> {
            (0..n)
                .map(|i| TransformerBlock::new(&format!("{prefix}.{i}"), d, h, r, cross))
                .collect()
        };
        Ok(VideoCoCa {
            patch: Linear::new("enc.patch", config.patch_dim(), d),
            encoder: blocks("enc.blocks", config.encoder_depth, false)?,
            gen_pool: AttentionalPooler::new("gen_pool", config.n_query_gen, d, h)?,
            con_pool: AttentionalPooler::new("con_pool", config.n_query_con, d, h)?,
            temporal: blocks("temporal.blocks", config.temporal_depth, false)?,
            temporal_ln: LayerNorm::new("temporal.ln_f", d),
            unimodal: blocks("txt.uni", config.unimodal_depth, false)?,
            multimodal: blocks("txt.mm", config.multimodal_depth, true)?,
            cls_ln: LayerNorm::new("txt.cls_ln", d),
            final_ln: LayerNorm::new("txt.ln_f", d),
            head: Linear::new("txt.head", d, config.vocab_size),
            config,
        })
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init_params<F: Real>(&self, seed: u64) -> Result<ParameterStore<F>> {
        let c = &self.config;
        let d = c.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut s = ParameterStore::new();

        self.patch.init(&mut s, Component::Encoder, &mut init)?;
        let pos: Tensor<F> = init.normal(&[c.num_patches(), d], INIT_STD)?;
        if c.adaptor == AdaptorMode::JointSpaceTime {
            s.insert("enc.pos_joint", repeat_rows(&pos, c.num_frames)?, Component::Encoder)?;
        }
        s.insert("enc.pos", pos, Component::Encoder)?;
        for b in &self.encoder {
            b.init(&mut s, Component::Encoder, &mut init)?;
        }
        self.gen_pool.init(&mut s, Component::GenPooler, &mut init)?;
        self.con_pool.init(&mut s, Component::ConPooler, &mut init)?;
        if c.adaptor == AdaptorMode::FactorizedEncoder {
            s.insert(
                "temporal.pos",
                init.normal(&[c.num_frames, d], INIT_STD)?,
                Component::AdaptorExtra,
            )?;
            for b in &self.temporal {
                b.init(&mut s, Component::AdaptorExtra, &mut init)?;
            }
            self.temporal_ln.init(&mut s, Component::AdaptorExtra)?;
        }
        s.insert("txt.embed", init.normal(&[c.vocab_size, d], INIT_STD)?, Component::Decoder)?;
        s.insert("txt.pos", init.normal(&[c.max_text_len, d], INIT_STD)?, Component::Decoder)?;
        for b in self.unimodal.iter().chain(&self.multimodal) {
            b.init(&mut s, Component::Decoder, &mut init)?;
        }
        self.cls_ln.init(&mut s, Component::Decoder)?;
        self.final_ln.init(&mut s, Component::Decoder)?;
        self.head.init(&mut s, Component::Decoder, &mut init)?;
        s.insert("loss.log_tau", Tensor::scalar(F::of(DEFAULT_TAU.ln())), Component::Loss)?;
        Ok(s)
    }

    pub fn encoder_blocks(&self) -> &[TransformerBlock] {
        &self.encoder
    }

    pub fn unimodal_blocks(&self) -> &[TransformerBlock] {
        &self.unimodal
    }

    pub fn multimodal_blocks(&self) -> &[TransformerBlock] {
        &self.multimodal
    }

    // ------------------------------------------------------------ vision

    /// Linear patch embedding, `[B*T, N, d]`, without positions.
    pub fn patchify<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, video: &VideoBatch<F>) -> Result<Var> {
        let c = &self.config;
        let (b, t, h, w, ch) = video.dims();
        if (h, w, ch) != (c.frame_height, c.frame_width, c.channels) {
            return Err(Error::shape(
                "patchify",
                &[h, w, ch],
                &[c.frame_height, c.frame_width, c.channels],
            ));
        }
        let frames = video.frames().clone().reshape(vec![b * t, h, w, ch])?;
        let patches = video::extract_patches(&frames, c.patch_height, c.patch_width)?;
        let n = c.num_patches();
        let x = g.constant(patches.reshape(vec![b * t * n, c.patch_dim()])?);
        let y = self.patch.forward(g, store, x)?;
        g.reshape(y, &[b * t, n, c.width])
    }

    /// Adds the learned `[N, d]` table to every frame.
    pub fn add_spatial_positions<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, z: Var) -> Result<Var> {
        let p = store.bind(g, "enc.pos")?;
        g.add(z, p)
    }

    /// Runs the encoder blocks on every leading-axis slice independently.
    pub fn encode_frames<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, z: Var) -> Result<Var> {
        let mut x = z;
        for b in &self.encoder {
            x = b.forward(g, store, x, None, None)?;
        }
        Ok(x)
    }

    /// Full encoder path for a video batch, honoring joint space-time mode.
    pub fn encode_video<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, video: &VideoBatch<F>) -> Result<EncodedVideo> {
        let (b, t, ..) = video.dims();
        let z = self.patchify(g, store, video)?;
        let tokens = if self.config.adaptor == AdaptorMode::JointSpaceTime {
            let n = self.config.num_patches();
            let table = store.bind(g, "enc.pos_joint")?;
            let available = g.shape(table)[0];
            if t * n > available {
                return Err(Error::invalid(format!(
                    "{t} frames exceed the joint positional table ({} frames)",
                    available / n
                )));
            }
            let pos = g.slice(table, 0, 0, t * n)?;
            let z = g.reshape(z, &[b, t * n, self.config.width])?;
            let z = g.add(z, pos)?;
            self.encode_frames(g, store, z)?
        } else {
            let z = self.add_spatial_positions(g, store, z)?;
            self.encode_frames(g, store, z)?
        };
        Ok(EncodedVideo {
            tokens,
            batch: b,
            frames: t,
        })
    }

    /// Turns encoder output into generative tokens and a unit contrastive embedding.
    pub fn adapt<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, enc: EncodedVideo) -> Result<PooledVars> {
        let EncodedVideo { tokens, batch: b, frames: t } = enc;
        if t == 0 {
            return Err(Error::invalid("video with zero frames"));
        }
        let d = self.config.width;
        match self.config.adaptor {
            AdaptorMode::AttentionalPooler | AdaptorMode::JointSpaceTime => {
                let s = g.shape(tokens).to_vec();
                let flat = g.reshape(tokens, &[b, s[0] * s[1] / b, d])?;
                self.pool_both(g, store, flat)
            }
            AdaptorMode::MeanPooling => {
                let n_gen = self.config.n_query_gen;
                let gen = self.gen_pool.forward(g, store, tokens)?;
                let gen = g.reshape(gen, &[b, t, n_gen, d])?;
                let generative = g.mean(gen, 1)?;
                let con = self.con_pool.forward(g, store, tokens)?;
                let con = g.reshape(con, &[b, t, d])?;
                let con = g.mean(con, 1)?;
                let contrastive = g.l2_normalize(con);
                Ok(PooledVars {
                    generative,
                    contrastive,
                })
            }
            AdaptorMode::FactorizedEncoder => {
                let per_frame = self.con_pool.forward(g, store, tokens)?;
                let x = g.reshape(per_frame, &[b, t, d])?;
                let table = store.bind(g, "temporal.pos")?;
                if t > g.shape(table)[0] {
                    return Err(Error::invalid(format!(
                        "{t} frames exceed the temporal positional table"
                    )));
                }
                let pos = g.slice(table, 0, 0, t)?;
                let mut x = g.add(x, pos)?;
                for blk in &self.temporal {
                    x = blk.forward(g, store, x, None, None)?;
                }
                let generative = self.temporal_ln.forward(g, store, x)?;
                let con = g.mean(generative, 1)?;
                let contrastive = g.l2_normalize(con);
                Ok(PooledVars {
                    generative,
                    contrastive,
                })
            }
        }
    }

    fn pool_both<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, tokens: Var) -> Result<PooledVars> {
        let b = g.shape(tokens)[0];
        let generative = self.gen_pool.forward(g, store, tokens)?;
        let con = self.con_pool.forward(g, store, tokens)?;
        let con = g.reshape(con, &[b, self.config.width])?;
        Ok(PooledVars {
            generative,
            contrastive: g.l2_normalize(con),
        })
    }

    /// Video batch to pooled representation.
    pub fn video_forward<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, video: &VideoBatch<F>) -> Result<PooledVars> {
        let enc = self.encode_video(g, store, video)?;
        self.adapt(g, store, enc)
    }

    /// Single-image path: `[B, H, W, C]` through the encoder and both poolers.
    pub fn image_forward<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, images: &Tensor<F>) -> Result<PooledVars> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::shape("image_forward", s, &[0, 0, 0, 0]));
        }
        let video = VideoBatch::new(images.clone().reshape(vec![s[0], 1, s[1], s[2], s[3]])?)?;
        let z = self.patchify(g, store, &video)?;
        let z = self.add_spatial_positions(g, store, z)?;
        let z = self.encode_frames(g, store, z)?;
        self.pool_both(g, store, z)
    }

    /// Pooled outputs from cached encoder tokens.
    pub fn adapt_cached<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, cached: &FrameTokenEmbeddings<F>) -> Result<PooledVars> {
        if cached.fingerprint != self.config.encoder_fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: self.config.encoder_fingerprint(),
                found: cached.fingerprint,
            });
        }
        let tokens = g.constant(cached.tokens.clone());
        let enc = EncodedVideo {
            tokens,
            batch: cached.batch(),
            frames: cached.frames,
        };
        self.adapt(g, store, enc)
    }

    /// Runs the encoder without recording gradients and returns the tokens.
    pub fn frame_token_embeddings<F: Real>(&self, store: &ParameterStore<F>, video: &VideoBatch<F>) -> Result<FrameTokenEmbeddings<F>> {
        let mut g = Graph::new();
        let enc = self.encode_video(&mut g, store, video)?;
        let (b, t) = (enc.batch, enc.frames);
        let n = self.config.num_patches();
        let tokens = g.value(enc.tokens).clone();
        let tokens = if self.config.adaptor == AdaptorMode::JointSpaceTime {
            tokens.reshape(vec![b * t, n, self.config.width])?
        } else {
            tokens
        };
        Ok(FrameTokenEmbeddings {
            tokens,
            frames: t,
            fingerprint: self.config.encoder_fingerprint(),
        })
    }

    /// Inference-only pooled outputs.
    pub fn embed_video<F: Real>(&self, store: &ParameterStore<F>, video: &VideoBatch<F>) -> Result<PooledRepresentation<F>> {
        let mut g = Graph::new();
        let p = self.video_forward(&mut g, store, video)?;
        Ok(PooledRepresentation {
            generative: g.value(p.generative).clone(),
            contrastive: g.value(p.contrastive).clone(),
        })
    }

    // -------------------------------------------------------------- text

    fn embed_tokens<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        if len > self.config.max_text_len {
            return Err(Error::invalid(format!(
                "text of length {len} exceeds max_text_len {}",
                self.config.max_text_len
            )));
        }
        let table = store.bind(g, "txt.embed")?;
        let x = g.gather(table, ids)?;
        let x = g.reshape(x, &[batch, len, self.config.width])?;
        let pos = store.bind(g, "txt.pos")?;
        let pos = g.slice(pos, 0, 0, len)?;
        g.add(x, pos)
    }

    fn unimodal_states<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let mut x = self.embed_tokens(g, store, ids, batch, len)?;
        let mask = causal_mask(len)?;
        for b in &self.unimodal {
            x = b.forward(g, store, x, Some(&mask), None)?;
        }
        Ok(x)
    }

    /// Causal unimodal decoder. Returns token states `[B, len, d]` and the
    /// unit-norm `[CLS]` embedding `[B, d]`.
    pub fn decode_unimodal<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, text: &TextBatch) -> Result<(Var, Var)> {
        let (b, len) = (text.batch(), text.len());
        let states = self.unimodal_states(g, store, text.ids(), b, len)?;
        let flat = g.reshape(states, &[b * len, self.config.width])?;
        let rows: Vec<usize> = text
            .cls_positions()
            .iter()
            .enumerate()
            .map(|(r, &p)| r * len + p)
            .collect();
        let cls = g.gather(flat, &rows)?;
        let cls = self.cls_ln.forward(g, store, cls)?;
        Ok((states, g.l2_normalize(cls)))
    }

    /// Multimodal decoder states after the final layer norm, `[B, len, d]`.
    pub fn decode_multimodal_states<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, states: Var, generative: Var) -> Result<Var> {
        let len = g.shape(states)[1];
        let mask = causal_mask(len)?;
        let mut x = states;
        for b in &self.multimodal {
            x = b.forward(g, store, x, Some(&mask), Some(generative))?;
        }
        self.final_ln.forward(g, store, x)
    }

    /// Vocabulary logits `[B, len, V]`.
    pub fn decode_multimodal<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, states: Var, generative: Var) -> Result<Var> {
        let x = self.decode_multimodal_states(g, store, states, generative)?;
        self.head.forward(g, store, x)
    }

    /// Greedy decoding from `[BOS]` for every video in the batch. Output rows
    /// exclude `[BOS]` and stop before `[EOS]` or after `max_len` tokens.
    pub fn generate_caption<F: Real>(&self, store: &ParameterStore<F>, video: &VideoBatch<F>, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let pooled = self.embed_video(store, video)?;
        self.generate_from_pooled(store, &pooled.generative, max_len)
    }

    pub fn generate_from_pooled<F: Real>(&self, store: &ParameterStore<F>, generative: &Tensor<F>, max_len: usize) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let b = generative.shape()[0];
        let max_len = max_len.min(self.config.max_text_len - 1);
        let max_len = max_len.max(1);
        let mut prefix: Vec<Vec<usize>> = vec![vec![BOS]; b];
        let mut done = vec![false; b];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        for step in 0..max_len {
            let len = step + 1;
            let ids: Vec<usize> = prefix.iter().flatten().copied().collect();
            let mut g = Graph::new();
            let gen = g.constant(generative.clone());
            let states = self.unimodal_states(&mut g, store, &ids, b, len)?;
            let logits = self.decode_multimodal(&mut g, store, states, gen)?;
            let v = self.config.vocab_size;
            let lv = g.value(logits).data();
            for r in 0..b {
                let row = &lv[(r * len + step) * v..(r * len + step + 1) * v];
                let next = argmax(row);
                if !done[r] {
                    if next == EOS {
                        done[r] = true;
                    } else {
                        out[r].push(next);
                    }
                }
                prefix[r].push(next);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Stacks `times` copies of a `[N, d]` table into `[times*N, d]`.
pub fn repeat_rows<F: Real>(table: &Tensor<F>, times: usize) -> Result<Tensor<F>> {
    let s = table.shape();
    let mut data = Vec::with_capacity(table.numel() * times);
    for _ in 0..times {
        data.extend_from_slice(table.data());
    }
    Tensor::new(vec![s[0] * times, s[1]], data)
}

/// `[B, K]` answer logits from multimodal decoder states via a fresh
/// single-query pooler and one linear layer.
#[derive(Debug, Clone)]
pub struct VqaHead {
    pub answers: usize,
    pool: AttentionalPooler,
    fc: Linear,
}

impl VqaHead {
    pub fn new(config: &ModelConfig, answers: usize) -> Result<Self> {
        if answers < 2 {
            return Err(Error::invalid("a VQA head needs at least two answers"));
        }
        Ok(VqaHead {
            answers,
            pool: AttentionalPooler::new("vqa.pool", 1, config.width, config.n_heads)?,
            fc: Linear::new("vqa.fc", config.width, answers),
        })
    }

    /// Registers the head's parameters; the output layer starts at zero.
    pub fn init<F: Real>(&self, store: &mut ParameterStore<F>, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        self.pool.init(store, Component::TaskHead, &mut init)?;
        self.fc.init(store, Component::TaskHead, &mut init)?;
        let w = store.value("vqa.fc.w")?.zeros_like();
        store.set_value("vqa.fc.w", w)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, states: Var) -> Result<Var> {
        let b = g.shape(states)[0];
        let pooled = self.pool.forward(g, store, states)?;
        let pooled = g.reshape(pooled, &[b, g.shape(pooled)[2]])?;
        self.fc.forward(g, store, pooled)
    }

    /// Question + video to answer logits.
    pub fn answer_logits<F: Real>(
        &self,
        model: &VideoCoCa,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        generative: Var,
        question: &TextBatch,
    ) -> Result<Var> {
        let (states, _) = model.decode_unimodal(g, store, question)?;
        let states = model.decode_multimodal_states(g, store, states, generative)?;
        self.forward(g, store, states)
    }
}
