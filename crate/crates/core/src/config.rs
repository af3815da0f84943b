//! Run configuration: `key = value` lines, `#` comments, unknown keys are
//! errors. [`RunConfig::resolved`] writes every key in a fixed order so a
//! run can be replayed from its `config.resolved` file.

use std::path::Path;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{LossWeights, OptimizerConfig, TrainConfig, TuningMode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub tuning_mode: String,
    pub switch_step: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub w_con: f64,
    pub w_cap: f64,
    pub use_cache: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            tuning_mode: "LiT".into(),
            switch_step: 0,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            ema_decay: 0.99,
            w_con: 1.0,
            w_cap: 2.0,
            use_cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub videos_per_class: usize,
    pub eval_per_class: usize,
    pub native_frames: usize,
    pub data_height: usize,
    pub data_width: usize,
    pub visible_frames: usize,
    pub distractors: usize,
    pub noise: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        let s = SynthSpec::default();
        DataSettings {
            videos_per_class: s.videos_per_class,
            eval_per_class: 16,
            native_frames: s.native_frames,
            data_height: s.height,
            data_width: s.width,
            visible_frames: s.visible_frames,
            distractors: s.distractors,
            noise: s.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub eval_frames: Vec<usize>,
    pub use_ema: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            eval_frames: vec![1, 2, 4, 8],
            use_ema: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::toy(),
            train: TrainSettings::default(),
            data: DataSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

impl RunConfig {
    /// Applies `text` on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    /// Applies one `key=value` assignment.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{assignment}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if self.model.set_kv(key, v)? {
            return Ok(());
        }
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "tuning_mode" => {
                TuningMode::parse(v, 0)?;
                t.tuning_mode = v.to_string();
            }
            "switch_step" => t.switch_step = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "ema_decay" => t.ema_decay = parse(key, v)?,
            "w_con" => t.w_con = parse(key, v)?,
            "w_cap" => t.w_cap = parse(key, v)?,
            "use_cache" => t.use_cache = parse(key, v)?,
            "videos_per_class" => d.videos_per_class = parse(key, v)?,
            "eval_per_class" => d.eval_per_class = parse(key, v)?,
            "native_frames" => d.native_frames = parse(key, v)?,
            "data_height" => d.data_height = parse(key, v)?,
            "data_width" => d.data_width = parse(key, v)?,
            "visible_frames" => d.visible_frames = parse(key, v)?,
            "distractors" => d.distractors = parse(key, v)?,
            "noise" => d.noise = parse(key, v)?,
            "eval_frames" => {
                self.eval.eval_frames = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<_>>()?;
            }
            "use_ema" => self.eval.use_ema = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its value, in canonical order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let d = &self.data;
        let mut out = vec![("seed", self.seed.to_string())];
        out.extend(self.model.to_kv());
        out.extend([
            ("tuning_mode", t.tuning_mode.clone()),
            ("switch_step", t.switch_step.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", fmt_f64(t.lr)),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("beta1", fmt_f64(t.beta1)),
            ("beta2", fmt_f64(t.beta2)),
            ("adam_eps", fmt_f64(t.adam_eps)),
            ("weight_decay", fmt_f64(t.weight_decay)),
            ("clip_norm", fmt_f64(t.clip_norm)),
            ("ema_decay", fmt_f64(t.ema_decay)),
            ("w_con", fmt_f64(t.w_con)),
            ("w_cap", fmt_f64(t.w_cap)),
            ("use_cache", t.use_cache.to_string()),
            ("videos_per_class", d.videos_per_class.to_string()),
            ("eval_per_class", d.eval_per_class.to_string()),
            ("native_frames", d.native_frames.to_string()),
            ("data_height", d.data_height.to_string()),
            ("data_width", d.data_width.to_string()),
            ("visible_frames", d.visible_frames.to_string()),
            ("distractors", d.distractors.to_string()),
            ("noise", fmt_f64(d.noise)),
            (
                "eval_frames",
                self.eval
                    .eval_frames
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("use_ema", self.eval.use_ema.to_string()),
        ]);
        out
    }

    /// Canonical text; parsing it yields an equal config.
    pub fn resolved(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config()?.optimizer.validate()?;
        self.train_config()?.loss.validate()?;
        self.synth_spec().validate()?;
        if self.train.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.eval.eval_frames.contains(&0) || self.eval.eval_frames.is_empty() {
            return Err(Error::Config("eval_frames must list positive frame counts".into()));
        }
        if self.data.data_height < self.model.frame_height || self.data.data_width < self.model.frame_width {
            return Err(Error::Config("data frames are smaller than the model input".into()));
        }
        Ok(())
    }

    pub fn tuning(&self) -> Result<TuningMode> {
        TuningMode::parse(&self.train.tuning_mode, self.train.switch_step)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            tuning: self.tuning()?,
            optimizer: OptimizerConfig {
                base_lr: t.lr,
                warmup_steps: t.warmup_steps,
                total_steps: t.steps,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
                weight_decay: t.weight_decay,
                clip_norm: t.clip_norm,
                ema_decay: t.ema_decay,
            },
            loss: LossWeights {
                contrastive: t.w_con,
                captioning: t.w_cap,
            },
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let d = &self.data;
        SynthSpec {
            videos_per_class: d.videos_per_class,
            native_frames: d.native_frames,
            height: d.data_height,
            width: d.data_width,
            visible_frames: d.visible_frames,
            distractors: d.distractors,
            noise: d.noise,
            seed: self.seed,
            ..SynthSpec::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nlr = 0.0005  # trailing\nadaptor = mean_pooling\neval_frames = 1, 8\n")
            .unwrap();
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.eval.eval_frames, vec![1, 8]);
        assert_eq!(RunConfig::from_text(&c.resolved()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(RunConfig::from_text("learning_rate = 1").is_err());
        assert!(RunConfig::from_text("steps = many").is_err());
        assert!(RunConfig::from_text("tuning_mode = Partial").is_err());
        assert!(RunConfig::from_text("just words").is_err());
    }
}
