use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How per-frame tokens become one video-level representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaptorMode {
    /// Flatten all frames' tokens into one sequence and run both poolers over it.
    AttentionalPooler,
    /// Pool each frame separately, then average over time.
    MeanPooling,
    /// Per-frame contrastive pooling followed by a temporal transformer.
    FactorizedEncoder,
    /// Encoder attends over all frames jointly with temporally repeated positions.
    JointSpaceTime,
}

impl AdaptorMode {
    pub const ALL: [AdaptorMode; 4] = [
        AdaptorMode::AttentionalPooler,
        AdaptorMode::MeanPooling,
        AdaptorMode::FactorizedEncoder,
        AdaptorMode::JointSpaceTime,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptorMode::AttentionalPooler => "attentional_pooler",
            AdaptorMode::MeanPooling => "mean_pooling",
            AdaptorMode::FactorizedEncoder => "factorized_encoder",
            AdaptorMode::JointSpaceTime => "joint_space_time",
        }
    }
}

impl fmt::Display for AdaptorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdaptorMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adaptor `{s}`")))
    }
}

/// Architecture hyperparameters. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub width: usize,
    pub encoder_depth: usize,
    pub temporal_depth: usize,
    pub unimodal_depth: usize,
    pub multimodal_depth: usize,
    pub n_query_gen: usize,
    pub n_query_con: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Frames per clip; sizes the temporal and joint positional tables.
    pub num_frames: usize,
    pub adaptor: AdaptorMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default used by tests and the acceptance suite.
    pub fn toy() -> Self {
        ModelConfig {
            frame_height: 32,
            frame_width: 32,
            channels: 3,
            patch_height: 8,
            patch_width: 8,
            width: 64,
            encoder_depth: 4,
            temporal_depth: 4,
            unimodal_depth: 2,
            multimodal_depth: 2,
            n_query_gen: 16,
            n_query_con: 1,
            vocab_size: 64,
            max_text_len: 16,
            n_heads: 4,
            mlp_ratio: 4,
            num_frames: 8,
            adaptor: AdaptorMode::AttentionalPooler,
        }
    }

    /// Ablation-scale geometry (224px frames, 16px patches, 256 generative tokens)
    /// with base-sized widths. Expressible, not meant to be trained here.
    pub fn small() -> Self {
        ModelConfig {
            frame_height: 224,
            frame_width: 224,
            patch_height: 16,
            patch_width: 16,
            width: 768,
            encoder_depth: 12,
            unimodal_depth: 6,
            multimodal_depth: 6,
            n_query_gen: 256,
            vocab_size: 64_000,
            max_text_len: 64,
            n_heads: 12,
            ..Self::toy()
        }
    }

    /// Main-results geometry: 576px frames with 18px patches.
    pub fn large_geometry() -> Self {
        ModelConfig {
            frame_height: 576,
            frame_width: 576,
            patch_height: 18,
            patch_width: 18,
            width: 1408,
            encoder_depth: 40,
            unimodal_depth: 18,
            multimodal_depth: 18,
            n_heads: 16,
            ..Self::small()
        }
    }

    /// Patches per frame, `floor(H/h) * floor(W/w)`.
    pub fn num_patches(&self) -> usize {
        (self.frame_height / self.patch_height) * (self.frame_width / self.patch_width)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_height * self.patch_width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("channels", self.channels),
            ("patch_height", self.patch_height),
            ("patch_width", self.patch_width),
            ("width", self.width),
            ("n_query_gen", self.n_query_gen),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_frames", self.num_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.frame_height < self.patch_height || self.frame_width < self.patch_width {
            return Err(Error::Config(format!(
                "frame {}x{} is smaller than patch {}x{}",
                self.frame_height, self.frame_width, self.patch_height, self.patch_width
            )));
        }
        if self.n_query_con != 1 {
            return Err(Error::Config("n_query_con must be 1".into()));
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by n_heads {}",
                self.width, self.n_heads
            )));
        }
        if self.vocab_size <= crate::data::tokenizer::NUM_SPECIAL {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        Ok(())
    }

    /// `(key, value)` pairs in canonical order; keys match field names.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("frame_height", self.frame_height.to_string()),
            ("frame_width", self.frame_width.to_string()),
            ("channels", self.channels.to_string()),
            ("patch_height", self.patch_height.to_string()),
            ("patch_width", self.patch_width.to_string()),
            ("width", self.width.to_string()),
            ("encoder_depth", self.encoder_depth.to_string()),
            ("temporal_depth", self.temporal_depth.to_string()),
            ("unimodal_depth", self.unimodal_depth.to_string()),
            ("multimodal_depth", self.multimodal_depth.to_string()),
            ("n_query_gen", self.n_query_gen.to_string()),
            ("n_query_con", self.n_query_con.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_text_len", self.max_text_len.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("num_frames", self.num_frames.to_string()),
            ("adaptor", self.adaptor.to_string()),
        ]
    }

    /// Sets one key. Returns `Ok(false)` when the key is not a model key.
    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let slot = match key {
            "frame_height" => &mut self.frame_height,
            "frame_width" => &mut self.frame_width,
            "channels" => &mut self.channels,
            "patch_height" => &mut self.patch_height,
            "patch_width" => &mut self.patch_width,
            "width" => &mut self.width,
            "encoder_depth" => &mut self.encoder_depth,
            "temporal_depth" => &mut self.temporal_depth,
            "unimodal_depth" => &mut self.unimodal_depth,
            "multimodal_depth" => &mut self.multimodal_depth,
            "n_query_gen" => &mut self.n_query_gen,
            "n_query_con" => &mut self.n_query_con,
            "vocab_size" => &mut self.vocab_size,
            "max_text_len" => &mut self.max_text_len,
            "n_heads" => &mut self.n_heads,
            "mlp_ratio" => &mut self.mlp_ratio,
            "num_frames" => &mut self.num_frames,
            "adaptor" => {
                self.adaptor = value.parse()?;
                return Ok(true);
            }
            _ => return Ok(false),
        };
        *slot = value
            .parse()
            .map_err(|_| Error::Config(format!("`{key}` expects a non-negative integer, got `{value}`")))?;
        Ok(true)
    }

    /// Parses the text produced by [`ModelConfig::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::toy();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad model config line `{line}`")))?;
            if !c.set_kv(k.trim(), v.trim())? {
                return Err(Error::Format(format!("unknown model key `{}`", k.trim())));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Canonical bytes of the settings that determine encoder outputs.
    /// The layout is `key=value;` pairs in a fixed order, UTF-8.
    pub fn encoder_canonical(&self) -> String {
        let joint = self.adaptor == AdaptorMode::JointSpaceTime;
        format!(
            "H={};W={};C={};h={};w={};d={};L={};heads={};mlp={};patch_order=row_major;joint={};",
            self.frame_height,
            self.frame_width,
            self.channels,
            self.patch_height,
            self.patch_width,
            self.width,
            self.encoder_depth,
            self.n_heads,
            self.mlp_ratio,
            joint
        )
    }

    /// FNV-1a 64 over [`ModelConfig::encoder_canonical`].
    pub fn encoder_fingerprint(&self) -> u64 {
        crate::hash::fnv1a64(self.encoder_canonical().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_count_follows_floor_grid() {
        let mut c = ModelConfig::toy();
        assert_eq!(c.num_patches(), 16);
        (c.frame_height, c.frame_width, c.patch_height, c.patch_width) = (224, 224, 16, 16);
        assert_eq!(c.num_patches(), 196);
        (c.frame_height, c.frame_width, c.patch_height, c.patch_width) = (576, 576, 18, 18);
        assert_eq!(c.num_patches(), 1024);
        (c.frame_height, c.frame_width, c.patch_height, c.patch_width) = (33, 33, 16, 16);
        assert_eq!(c.num_patches(), 4);
    }

    #[test]
    fn text_form_round_trips() {
        let mut c = ModelConfig::small();
        c.adaptor = AdaptorMode::FactorizedEncoder;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(ModelConfig::from_text("bogus = 1").is_err());
    }

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::toy(), ModelConfig::small(), ModelConfig::large_geometry()] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::small().n_query_gen, 256);
    }

    #[test]
    fn fingerprint_tracks_encoder_fields_only() {
        let base = ModelConfig::toy();
        let mut other = base.clone();
        other.multimodal_depth = 7;
        assert_eq!(base.encoder_fingerprint(), other.encoder_fingerprint());
        for tweak in [
            |c: &mut ModelConfig| c.patch_height = 4,
            |c: &mut ModelConfig| c.patch_width = 4,
            |c: &mut ModelConfig| c.width = 32,
            |c: &mut ModelConfig| c.encoder_depth = 2,
            |c: &mut ModelConfig| c.frame_height = 16,
            |c: &mut ModelConfig| c.frame_width = 16,
        ] {
            let mut c = base.clone();
            tweak(&mut c);
            assert_ne!(base.encoder_fingerprint(), c.encoder_fingerprint());
        }
    }
}
