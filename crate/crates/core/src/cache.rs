//! Precomputed encoder tokens for training with a frozen encoder.
//!
//! Layout (little-endian): `b"VCCA"`, `u32` version, `u32` patches per
//! frame, `u32` width, `u32` frames per clip, `u64` encoder config
//! fingerprint, `u64` encoder weight checksum, `u32` entry count, then the
//! index (`u32` id length, UTF-8 id, `u64` data offset, `u32` frames) and
//! the `f32` token data. Offsets count bytes from the start of the data
//! section and strictly increase.

use std::collections::HashMap;
use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::clip_inputs;
use crate::model::{FrameTokenEmbeddings, VideoBatch, VideoCoCa};
use crate::params::{Component, ParameterStore};
use crate::tensor::Tensor;
use crate::training::TrainInputs;

pub const MAGIC: &[u8; 4] = b"VCCA";
pub const VERSION: u32 = 1;

/// Checksum of the encoder weights in `store`.
pub fn encoder_checksum(store: &ParameterStore<f32>) -> u64 {
    store
        .checksums()
        .get(&Component::Encoder)
        .copied()
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenCache {
    pub num_patches: usize,
    pub width: usize,
    pub frames: usize,
    pub fingerprint: u64,
    pub encoder_checksum: u64,
    ids: Vec<String>,
    tokens: Vec<Tensor<f32>>,
    lookup: HashMap<String, usize>,
}

impl TokenCache {
    fn from_parts(header: [usize; 3], fingerprint: u64, checksum: u64, ids: Vec<String>, tokens: Vec<Tensor<f32>>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::Format(format!("cache lists `{id}` twice")));
            }
        }
        Ok(TokenCache {
            num_patches: header[0],
            width: header[1],
            frames: header[2],
            fingerprint,
            encoder_checksum: checksum,
            ids,
            tokens,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Tokens `[T, N, d]` for one clip.
    pub fn get(&self, id: &str) -> Result<FrameTokenEmbeddings<f32>> {
        let i = *self
            .lookup
            .get(id)
            .ok_or_else(|| Error::invalid(format!("clip `{id}` is not in the cache")))?;
        Ok(FrameTokenEmbeddings {
            tokens: self.tokens[i].clone(),
            frames: self.frames,
            fingerprint: self.fingerprint,
        })
    }

    /// Errors unless the cache was produced by this encoder config and these
    /// encoder weights.
    pub fn check(&self, model: &VideoCoCa, store: &ParameterStore<f32>) -> Result<()> {
        let expected = model.config.encoder_fingerprint();
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        let expected = encoder_checksum(store);
        if self.encoder_checksum != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.encoder_checksum,
            });
        }
        if self.frames != model.config.num_frames {
            return Err(Error::Config(format!(
                "cache holds {} frames per clip but the model samples {}",
                self.frames, model.config.num_frames
            )));
        }
        Ok(())
    }

    /// Cached inputs for every clip of `corpus`, in corpus order.
    pub fn inputs_for(&self, corpus: &Corpus) -> Result<TrainInputs<f32>> {
        Ok(TrainInputs::Cached(
            corpus.clips.iter().map(|c| self.get(&c.id)).collect::<Result<_>>()?,
        ))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.len_u32(self.num_patches)?;
        w.len_u32(self.width)?;
        w.len_u32(self.frames)?;
        w.u64(self.fingerprint);
        w.u64(self.encoder_checksum);
        w.len_u32(self.len())?;
        let mut offset = 0u64;
        for (id, t) in self.ids.iter().zip(&self.tokens) {
            w.len_u32(id.len())?;
            w.bytes(id.as_bytes());
            w.u64(offset);
            w.len_u32(t.shape()[0])?;
            offset += 4 * t.numel() as u64;
        }
        for t in &self.tokens {
            w.f32s(t.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "token cache");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let (n, d, t) = (r.usize32()?, r.usize32()?, r.usize32()?);
        if n == 0 || d == 0 || t == 0 {
            return Err(Error::Format("cache header has a zero dimension".into()));
        }
        let fingerprint = r.u64()?;
        let checksum = r.u64()?;
        let count = r.usize32()?;
        let mut index = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.usize32()?;
            let id = r.utf8(len)?.to_string();
            let offset = r.u64()?;
            let frames = r.usize32()?;
            if frames != t {
                return Err(Error::Format(format!("clip `{id}` has {frames} frames, header says {t}")));
            }
            index.push((id, offset, frames));
        }
        let data_start = r.position();
        let mut ids = Vec::with_capacity(index.len());
        let mut tokens = Vec::with_capacity(index.len());
        let mut expected = 0u64;
        for (id, offset, frames) in index {
            if offset != expected {
                return Err(Error::Format(format!(
                    "clip `{id}` starts at offset {offset}, expected {expected}"
                )));
            }
            let numel = frames * n * d;
            let pos = usize::try_from(offset)
                .ok()
                .and_then(|o| o.checked_add(data_start))
                .ok_or_else(|| Error::Format("cache offset overflows".into()))?;
            r.seek(pos)?;
            tokens.push(Tensor::new(vec![frames, n, d], r.f32s(numel)?)?);
            expected += 4 * numel as u64;
            ids.push(id);
        }
        if !r.is_at_end() {
            return Err(Error::Format("token cache has trailing bytes".into()));
        }
        Self::from_parts([n, d, t], fingerprint, checksum, ids, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Encodes every clip of `corpus` with the encoder weights in `store`.
pub fn precompute_cache(model: &VideoCoCa, store: &ParameterStore<f32>, corpus: &Corpus, batch: usize) -> Result<TokenCache> {
    let c = &model.config;
    let clips = clip_inputs::<f32>(model, &corpus.clips, c.num_frames)?;
    let mut tokens = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch.max(1)) {
        let emb = model.frame_token_embeddings(store, &VideoBatch::from_clips(chunk)?)?;
        for i in 0..chunk.len() {
            tokens.push(emb.clip(i)?.tokens);
        }
    }
    TokenCache::from_parts(
        [c.num_patches(), c.width, c.num_frames],
        c.encoder_fingerprint(),
        encoder_checksum(store),
        corpus.clips.iter().map(|c| c.id.clone()).collect(),
        tokens,
    )
}
