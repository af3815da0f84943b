//! `videococa`: generate the synthetic corpus, train, cache encoder tokens
//! and run the evaluation protocols.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use videococa_core::cache::precompute_cache;
use videococa_core::data::io::{read_corpus, write_corpus};
use videococa_core::data::{train_eval_split, Corpus, Tokenizer, VOCABULARY};
use videococa_core::eval::{
    bidirectional_recall, caption_bleu, caption_truth, embed_clips, embed_texts, evaluate, frames_ablation,
    multilabel_map, EvalReport, PromptSet, SimilarityMatrix,
};
use videococa_core::model::{checkpoint, VqaHead};
use videococa_core::training::{
    corpus_captions, corpus_clips, fit, step_log, train_vqa, vqa_accuracy, vqa_examples, TrainInputs,
    Trainer, TuningMode, STEP_LOG_HEADER,
};
use videococa_core::{ParameterStore, RunConfig, TokenCache, VideoCoCa};

#[derive(Parser, Debug)]
#[command(name = "videococa", version, about = "Toy video-text contrastive captioner")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; created if missing.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// Corpus directory written by `gen-data`; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate the training split instead of the held-out split.
    #[arg(long)]
    train_split: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and eval corpora.
    GenData,
    /// Train with the joint contrastive and captioning objective.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Token cache from `precompute-cache`.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Starting weights; defaults to a fresh initialization from the seed.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Encode the training split once with the frozen encoder.
    PrecomputeCache {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Prompt-ensembled classification accuracy and multi-label mAP.
    EvalCls(EvalArgs),
    /// Text-to-video and video-to-text recall.
    EvalRetrieval(EvalArgs),
    /// Greedy captions and BLEU-4.
    EvalCaption(EvalArgs),
    /// Classification and retrieval for each configured frame count.
    AblateFrames(EvalArgs),
    /// Train a question-answering head on top of a checkpoint.
    VqaTrain(EvalArgs),
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                bail!("config file {} does not exist", path.display());
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o).with_context(|| format!("bad override `{o}`"))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn corpora(&self, data: &DataArgs) -> Result<(Corpus, Corpus, Tokenizer)> {
        match &data.data {
            Some(dir) => {
                let tok = Tokenizer::load(&dir.join("vocab.txt"))?;
                Ok((read_corpus(dir, "train")?, read_corpus(dir, "eval")?, tok))
            }
            None => {
                let (train, eval) = train_eval_split(&self.cfg.synth_spec(), self.cfg.data.eval_per_class)?;
                Ok((train, eval, Tokenizer::new(VOCABULARY)))
            }
        }
    }

    fn initial(&self, init: Option<&Path>) -> Result<(VideoCoCa, ParameterStore<f32>)> {
        match init {
            Some(path) => {
                let (config, store) = checkpoint::load(path)?;
                Ok((VideoCoCa::new(config)?, store))
            }
            None => {
                let model = VideoCoCa::new(self.cfg.model.clone())?;
                let store = model.init_params(self.cfg.seed)?;
                Ok((model, store))
            }
        }
    }

    fn trained(&self, path: &Path) -> Result<(VideoCoCa, ParameterStore<f32>)> {
        let (config, store) = checkpoint::load(path)?;
        Ok((VideoCoCa::new(config)?, store))
    }
}

fn gen_data(run: &Run) -> Result<()> {
    let (train, eval) = train_eval_split(&run.cfg.synth_spec(), run.cfg.data.eval_per_class)?;
    let dir = run.out.join("data");
    write_corpus(&dir, "train", &train)?;
    write_corpus(&dir, "eval", &eval)?;
    fs::write(dir.join("vocab.txt"), Tokenizer::new(VOCABULARY).to_vocab_file())?;
    println!("wrote {} train and {} eval clips to {}", train.len(), eval.len(), dir.display());
    Ok(())
}

fn precompute(run: &Run, data: &DataArgs, init: Option<&Path>) -> Result<()> {
    let (train, _, _) = run.corpora(data)?;
    let (model, store) = run.initial(init)?;
    let cache = precompute_cache(&model, &store, &train, 16)?;
    cache.save(&run.out.join("cache.vcca"))?;
    checkpoint::save(&run.out.join("init.vcck"), &model.config, &store)?;
    println!("cached {} clips, fingerprint {:#018x}", cache.len(), cache.fingerprint);
    Ok(())
}

fn train(run: &Run, data: &DataArgs, cache: Option<&Path>, init: Option<&Path>) -> Result<()> {
    let (train, _, tok) = run.corpora(data)?;
    let (model, store) = run.initial(init)?;
    let tc = run.cfg.train_config()?;
    let inputs = if run.cfg.train.use_cache && tc.tuning == TuningMode::LiT {
        let cache = match cache {
            Some(path) => {
                let c = TokenCache::load(path)?;
                c.check(&model, &store)?;
                c
            }
            None => precompute_cache(&model, &store, &train, 16)?,
        };
        cache.inputs_for(&train)?
    } else {
        if cache.is_some() {
            bail!("a token cache can only be used with tuning_mode = LiT and use_cache = true");
        }
        corpus_clips(&model, &train)?
    };
    let captions = corpus_captions(&tok, &train)?;
    let mut trainer = Trainer::new(&model, store, tc)?;
    let every = (run.cfg.train.steps / 20).max(1);
    println!("{STEP_LOG_HEADER}");
    let records = fit(
        &mut trainer,
        &inputs,
        &captions,
        run.cfg.train.steps,
        run.cfg.train.batch_size,
        run.cfg.seed,
        |r| {
            if r.step % every == 0 {
                println!("{}", r.to_tsv());
            }
        },
    )?;
    run.write("steps.tsv", &step_log(&records))?;
    let store = if run.cfg.eval.use_ema {
        trainer.store.ema_snapshot()
    } else {
        trainer.store.clone()
    };
    checkpoint::save(&run.out.join("model.vcck"), &model.config, &store)?;
    Ok(())
}

fn eval_split(run: &Run, args: &EvalArgs) -> Result<(Corpus, Tokenizer, &'static str)> {
    let (train, eval, tok) = run.corpora(&args.data)?;
    Ok(if args.train_split {
        (train, tok, "train")
    } else {
        (eval, tok, "eval")
    })
}

fn finish(run: &Run, report: &EvalReport) -> Result<()> {
    print!("{}", report.to_tsv());
    run.write("report.tsv", &report.to_tsv())?;
    run.write("report.jsonl", &report.to_jsonl())
}

fn eval_cls(run: &Run, args: &EvalArgs) -> Result<()> {
    let (corpus, tok, split) = eval_split(run, args)?;
    let (model, store) = run.trained(&args.checkpoint)?;
    let t = model.config.num_frames;
    let prompts = PromptSet::default();
    let s = evaluate(&model, &store, &tok, &corpus, &prompts, t)?;
    let map = multilabel_map(&model, &store, &tok, &corpus, &prompts, t)?;
    let p = [("frames", t.to_string())];
    let mut report = EvalReport::default();
    report.push("top1", split, s.top1, &p);
    report.push("top5", split, s.top5, &p);
    report.push("mAP", split, map, &p);
    finish(run, &report)
}

fn eval_retrieval(run: &Run, args: &EvalArgs) -> Result<()> {
    let (corpus, tok, split) = eval_split(run, args)?;
    let (model, store) = run.trained(&args.checkpoint)?;
    let t = model.config.num_frames;
    let videos = embed_clips(&model, &store, &corpus.clips, t, 16)?.contrastive;
    let captions: Vec<String> = corpus.clips.iter().map(|c| c.caption.clone()).collect();
    let texts = embed_texts(&model, &store, &tok, &captions, 64)?;
    let sim = SimilarityMatrix::from_embeddings(&texts.data, &videos.data, videos.width, caption_truth(&corpus))?;
    let mut report = EvalReport::default();
    for k in [1, 5, 10] {
        let (t2v, v2t) = bidirectional_recall(&sim, k)?;
        let p = [("frames", t.to_string()), ("k", k.to_string())];
        report.push(&format!("t2v_R@{k}"), split, t2v, &p);
        report.push(&format!("v2t_R@{k}"), split, v2t, &p);
    }
    finish(run, &report)
}

fn eval_caption(run: &Run, args: &EvalArgs) -> Result<()> {
    let (corpus, tok, split) = eval_split(run, args)?;
    let (model, store) = run.trained(&args.checkpoint)?;
    let t = model.config.num_frames;
    let (bleu, texts) = caption_bleu(&model, &store, &tok, &corpus, t)?;
    let mut lines = String::from("id\treference\tgenerated\n");
    for (clip, text) in corpus.clips.iter().zip(&texts) {
        lines.push_str(&format!("{}\t{}\t{}\n", clip.id, clip.caption, text));
    }
    run.write("captions.tsv", &lines)?;
    let mut report = EvalReport::default();
    report.push("BLEU-4", split, bleu, &[("frames", t.to_string()), ("decoding", "greedy".into())]);
    finish(run, &report)
}

fn ablate_frames(run: &Run, args: &EvalArgs) -> Result<()> {
    let (corpus, tok, split) = eval_split(run, args)?;
    let (model, store) = run.trained(&args.checkpoint)?;
    let rows = frames_ablation(&model, &store, &tok, &corpus, &PromptSet::default(), &run.cfg.eval.eval_frames)?;
    let mut report = EvalReport::default();
    for r in rows {
        let p = [("frames", r.frames.to_string())];
        report.push("top1", split, r.top1, &p);
        report.push("top5", split, r.top5, &p);
        report.push("t2v_R@1", split, r.t2v_r1, &p);
        report.push("v2t_R@1", split, r.v2t_r1, &p);
    }
    finish(run, &report)
}

fn vqa(run: &Run, args: &EvalArgs) -> Result<()> {
    let (train, eval, tok) = run.corpora(&args.data)?;
    let (model, mut store) = run.trained(&args.checkpoint)?;
    let (answers, train_ex) = vqa_examples(&train)?;
    let (eval_answers, eval_ex) = vqa_examples(&eval)?;
    if eval_answers.iter().any(|a| !answers.contains(a)) {
        bail!("held-out answers are missing from the training answers");
    }
    let eval_ex: Vec<_> = eval_ex
        .into_iter()
        .map(|mut e| {
            e.answer = answers
                .iter()
                .position(|a| *a == eval_answers[e.answer])
                .expect("checked above");
            e
        })
        .collect();
    let head = VqaHead::new(&model.config, answers.len())?;
    head.init(&mut store, run.cfg.seed)?;
    let optimizer = run.cfg.train_config()?.optimizer;
    let train_in = precompute_cache(&model, &store, &train, 16)?.inputs_for(&train)?;
    let losses = train_vqa(
        &model,
        &head,
        &mut store,
        &tok,
        &train_in,
        &train_ex,
        TuningMode::Frozen,
        optimizer,
        run.cfg.train.batch_size,
        run.cfg.seed,
    )?;
    let eval_in: TrainInputs<f32> = precompute_cache(&model, &store, &eval, 16)?.inputs_for(&eval)?;
    let acc = vqa_accuracy(&model, &head, &store, &tok, &eval_in, &eval_ex)?;
    let mut log = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{}\t{l}\n", i + 1));
    }
    run.write("vqa_steps.tsv", &log)?;
    checkpoint::save(&run.out.join("vqa.vcck"), &model.config, &store)?;
    let mut report = EvalReport::default();
    report.push("vqa_accuracy", "eval", acc, &[("answers", answers.join(","))]);
    finish(run, &report)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let run = Run {
        cfg,
        out: cli.out.clone(),
    };
    run.write("config.resolved", &run.cfg.resolved())?;
    match &cli.command {
        Command::GenData => gen_data(&run),
        Command::Train { data, cache, init } => train(&run, data, cache.as_deref(), init.as_deref()),
        Command::PrecomputeCache { data, init } => precompute(&run, data, init.as_deref()),
        Command::EvalCls(a) => eval_cls(&run, a),
        Command::EvalRetrieval(a) => eval_retrieval(&run, a),
        Command::EvalCaption(a) => eval_caption(&run, a),
        Command::AblateFrames(a) => ablate_frames(&run, a),
        Command::VqaTrain(a) => vqa(&run, a),
    }
}
