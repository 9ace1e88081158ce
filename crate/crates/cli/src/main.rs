use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avmoe::checkpoint::Checkpoint;
use avmoe::data::{generate_corpus, load_utterances, task_next_to, SyntheticTaskSpec, Utterance, Vocabulary};
use avmoe::decode::attention_greedy_decode;
use avmoe::frontend::{features, load_audio, stack_frames};
use avmoe::fusion::load_visual_embeddings;
use avmoe::model::Example;
use avmoe::train::{encode_plain, evaluate, train, TrainConfig, TrainOutputs, TrainState, LAST_CHECKPOINT};
use avmoe::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "avmoe", version, about = "Audiovisual speech recognition with a mixture-of-experts encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (manifests, audio, visual embeddings).
    Generate {
        /// Task spec JSON, or `reference` for the built-in task.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Write manifests without visual embeddings.
        #[arg(long)]
        audio_only: bool,
    },
    /// Train a model; writes a checkpoint and a metrics line per epoch.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Training config JSON. Omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dev manifest; defaults to dev.jsonl next to the training manifest.
        #[arg(long)]
        dev_manifest: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        renorm_topk: Option<bool>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Ignore visual embeddings.
        #[arg(long)]
        audio_only: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a manifest and report WER. Prints one JSON line per
    /// utterance, then a summary line.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        audio_only: bool,
        #[arg(long, value_enum)]
        subset: Option<Subset>,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
    },
    /// Decode one recording.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// VEMB file; omit for audio-only decoding.
        #[arg(long)]
        visual: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    /// Utterances containing a homophone-group word.
    Homophone,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Input(_)
        | Error::Ingest { .. }
        | Error::CtcInfeasible { .. }
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Checkpoint(_)
        | Error::Checksum { .. }
        | Error::CheckpointShape(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { spec, out, seed, audio_only } => {
            let mut spec = if spec == "reference" {
                SyntheticTaskSpec::reference()
            } else {
                SyntheticTaskSpec::load(Path::new(&spec))?
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            for s in generate_corpus(&spec, &out, audio_only)? {
                println!("{}", serde_json::to_string(&s)?);
            }
            Ok(())
        }
        Command::Train {
            manifest,
            config,
            ckpt_dir,
            seed,
            dev_manifest,
            alpha,
            beta,
            experts,
            top_k,
            renorm_topk,
            epochs,
            audio_only,
            resume,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            let spec = task_next_to(&manifest)?
                .ok_or_else(|| Error::Input(format!("no task.json next to {}", manifest.display())))?;
            cfg.model.vocab_size = spec.vocab.len() + cfg.model.special.count();
            cfg.model.visual_dim = spec.visual_dim();
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            cfg.beta = beta.unwrap_or(cfg.beta);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            if experts.is_some() || top_k.is_some() || renorm_topk.is_some() {
                let mut moe = cfg.model.moe.unwrap_or_default();
                moe.num_experts = experts.unwrap_or(moe.num_experts);
                moe.top_k = top_k.unwrap_or(moe.top_k);
                moe.renormalize_topk = renorm_topk.unwrap_or(moe.renormalize_topk);
                cfg.model.moe = Some(moe);
            }
            cfg.validate()?;
            let vocab = Vocabulary::new(&spec.vocab, &cfg.model.special)?;
            let fe = cfg.model.frontend;
            let train_set = load_utterances(&manifest, &vocab, &fe, audio_only)?;
            let dev_path = dev_manifest.or_else(|| {
                let p = manifest.parent().unwrap_or(Path::new(".")).join("dev.jsonl");
                (p.exists() && p != manifest).then_some(p)
            });
            let dev_set = dev_path.map(|p| load_utterances(&p, &vocab, &fe, audio_only)).transpose()?;
            let mut state = match &resume {
                Some(p) => TrainState::resume(&cfg, &Checkpoint::load(p)?)?,
                None => TrainState::new(&cfg, seed)?,
            };
            let outputs = TrainOutputs { ckpt_dir: Some(ckpt_dir.clone()), stop_after_epoch: None };
            let task = spec.task_info();
            train(&cfg, &mut state, &train_set, dev_set.as_deref(), &task, &outputs, &mut |m| {
                println!("{}", serde_json::to_string(m).expect("metrics serialize"));
            })?;
            eprintln!("final checkpoint: {}", ckpt_dir.join(LAST_CHECKPOINT).display());
            Ok(())
        }
        Command::Eval { manifest, ckpt, audio_only, subset, max_len } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (model, store) = ck.restore_model()?;
            let vocab = Vocabulary::new(&ck.task.words, &model.cfg.special)?;
            let mut utts: Vec<Utterance> = load_utterances(&manifest, &vocab, &model.cfg.frontend, audio_only)?;
            if let Some(Subset::Homophone) = subset {
                utts.retain(|u| !ck.task.homophone_slots(&u.words).is_empty());
            }
            let report = evaluate(&model, &store, &utts, &ck.task, max_len)?;
            for r in &report.records {
                println!("{}", serde_json::to_string(r)?);
            }
            let mut summary = serde_json::to_value(&report)?;
            if let Some(obj) = summary.as_object_mut() {
                obj.remove("records");
                obj.insert("mode".into(), (if audio_only { "audio_only" } else { "audiovisual" }).into());
            }
            println!("{summary}");
            Ok(())
        }
        Command::Decode { ckpt, audio, visual, max_len } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (model, store) = ck.restore_model()?;
            let vocab = Vocabulary::new(&ck.task.words, &model.cfg.special)?;
            let wave = load_audio(&audio)?;
            let mel = features(&wave, &model.cfg.frontend)?;
            let stacked = stack_frames(&mel, model.cfg.frontend.stack_factor)?;
            let visual = visual.map(|p| load_visual_embeddings(&p)).transpose()?;
            let ex = Example { stacked, visual, tokens: Vec::new() };
            let (states, _) = encode_plain(&model, &store, &ex)?;
            let hyp = attention_greedy_decode(&model, &store, &states, max_len)?;
            let out = serde_json::json!({
                "transcript": vocab.decode(&hyp.tokens).join(" "),
                "tokens": hyp.tokens,
                "score": hyp.score,
            });
            println!("{out}");
            Ok(())
        }
    }
}
