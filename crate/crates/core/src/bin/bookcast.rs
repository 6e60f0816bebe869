//! Command-line front end for the audiobook synthesis pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation/parse failure,
//! 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use bookcast::cast::{build_prompt_table, mean_similarity, save_prompt_table, PromptPolicy};
use bookcast::corpus::{load_corpus, save_corpus, Persona};
use bookcast::distill::{run_distillation, DistillSpec, FilterThresholds};
use bookcast::error::Error;
use bookcast::eval::{
    build_testsets, emit_report, evaluate, id_map, load_report_records, pipeline_run, run_ablation,
    split_corpus, stage1_records, stage2_records, AblationInputs, PipelineSource, ReportRecord,
    TestSizes,
};
use bookcast::extract::corpus_from_fiction;
use bookcast::instruction::{decompose, render_attribute_tokens, InstructionLexicon};
use bookcast::model::{
    generate, init_model, load_checkpoint, save_checkpoint, train_stage, ModelConfig,
    SamplingConfig, TrainConfig,
};
use bookcast::oracle::{make_corpus, CorpusSpec, WorldConfig};
use bookcast::sequence::{
    build_inference_prefix, load_dataset, save_dataset, DatasetRecord, InferenceMode,
};
use bookcast::Result;

#[derive(Parser)]
#[command(name = "bookcast", version, about = "Fiction-to-speech-token pipeline")]
struct Cli {
    /// Optional TOML file overriding the world and corpus settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the synthetic world and every derived random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for generated artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    world: Option<WorldConfig>,
    corpus: Option<CorpusSpec>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse raw fiction into a corpus with oracle speech tokens.
    Extract {
        /// Path to the fiction text file.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated character names in cast order.
        #[arg(long, value_delimiter = ',')]
        personas: Vec<String>,
        /// Fixed token count per sentence.
        #[arg(long, default_value_t = 6)]
        text_len: usize,
        /// Per-utterance voiceprint noise.
        #[arg(long, default_value_t = 0.1)]
        jitter: f64,
    },
    /// Generate a synthetic corpus directly from the world rule.
    MakeWorld(MakeWorldArgs),
    /// Build and store the prompt table for a corpus.
    Cast {
        #[arg(long)]
        corpus: PathBuf,
        /// Prompt policy: non_decoupled or decoupled.
        #[arg(long, default_value = "decoupled")]
        mode: String,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
    },
    /// Compile a free-text instruction into attribute control tokens.
    CompileInstruction {
        #[arg(long)]
        instruction: String,
        /// Speaker name used for persona defaults.
        #[arg(long, default_value = "narrator")]
        speaker: String,
    },
    /// Render training sequences from a corpus.
    BuildData {
        #[arg(long)]
        corpus: PathBuf,
        /// Curriculum stage the data is for (1 or 2).
        #[arg(long)]
        stage: u8,
        /// Context sentences on each side (stage 2 only).
        #[arg(long, default_value_t = 1)]
        k_ctx: usize,
    },
    /// Run one training stage and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long)]
        stage: u8,
        /// Checkpoint to continue from (required for stages 2 and 3).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the stage's default step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Synthesize, filter and rebalance a distilled dataset.
    Distill {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples_per_cell: usize,
    },
    /// Generate speech tokens for one utterance.
    Synth {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        utterance: u64,
        #[arg(long, default_value = "ctx_inst")]
        mode: InferenceMode,
    },
    /// Evaluate a checkpoint on one of the held-out suites.
    Eval(EvalArgs),
    /// Run one named ablation.
    Ablate {
        /// decoupling, threshold_sweep, context_text or emotion_control.
        #[arg(long)]
        name: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long)]
        stage3: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        held_out_chapters: usize,
    },
    /// Re-render stored machine records as a text report.
    Report {
        /// One or more .jsonl record files.
        #[arg(long, required = true)]
        records: Vec<PathBuf>,
    },
    /// Full end-to-end run: extract, cast, synthesize, score.
    Pipeline {
        /// Fiction input; omit to use a synthetic corpus file.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, conflicts_with = "input")]
        corpus: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        personas: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict synthesis to these chapter ids.
        #[arg(long, value_delimiter = ',')]
        chapters: Option<Vec<u64>>,
    },
}

#[derive(Args)]
struct MakeWorldArgs {
    #[arg(long, default_value_t = 4)]
    chapters: u64,
    #[arg(long, default_value_t = 25)]
    utterances: u64,
    #[arg(long, default_value_t = 4)]
    speakers: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// nar, dia or chap.
    #[arg(long, default_value = "dia")]
    suite: String,
    #[arg(long, default_value = "plain")]
    mode: InferenceMode,
    #[arg(long, default_value_t = 1)]
    held_out_chapters: usize,
    #[arg(long, default_value_t = 2)]
    nar_items: usize,
    #[arg(long, default_value_t = 8)]
    dia_items: usize,
    #[arg(long, default_value_t = 1)]
    chap_items: usize,
}

fn load_file_config(cli: &Cli) -> Result<FileConfig> {
    let Some(path) = &cli.config else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(path, 0, e.to_string()))
}

fn world_config(cli: &Cli, file: &FileConfig) -> WorldConfig {
    let mut cfg = file.world.clone().unwrap_or_default();
    cfg.seed = cli.seed;
    cfg
}

fn out_path(cli: &Cli, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    Ok(cli.out_dir.join(name))
}

fn parse_personas(names: &[String]) -> Vec<Persona> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| Persona::named(i as u64 + 1, n.trim()))
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    let file = load_file_config(cli)?;
    let world = world_config(cli, &file);
    match &cli.cmd {
        Cmd::Extract {
            input,
            personas,
            text_len,
            jitter,
        } => {
            let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
            let doc = bookcast::extract::RawDocument::new(text)?;
            let (corpus, warnings) = corpus_from_fiction(
                &doc,
                &parse_personas(personas),
                &InstructionLexicon::default(),
                &world,
                *text_len,
                *jitter,
            )?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let path = out_path(cli, "corpus.jsonl")?;
            save_corpus(&corpus, &path)?;
            println!(
                "extracted {} chapters / {} utterances -> {}",
                corpus.chapters.len(),
                corpus.n_utterances(),
                path.display()
            );
            Ok(())
        }
        Cmd::MakeWorld(args) => {
            let spec = file
                .corpus
                .clone()
                .unwrap_or_else(|| CorpusSpec::new(args.chapters, args.utterances, args.speakers));
            let corpus = make_corpus(&spec, &world)?;
            let path = out_path(cli, "corpus.jsonl")?;
            save_corpus(&corpus, &path)?;
            println!(
                "made {} chapters / {} utterances -> {}",
                corpus.chapters.len(),
                corpus.n_utterances(),
                path.display()
            );
            Ok(())
        }
        Cmd::Cast {
            corpus,
            mode,
            threshold,
        } => {
            let corpus = load_corpus(corpus)?;
            let policy = match mode.as_str() {
                "non_decoupled" => PromptPolicy::non_decoupled(),
                "decoupled" => PromptPolicy::decoupled(*threshold),
                other => return Err(Error::Usage(format!("unknown prompt mode '{other}'"))),
            };
            let table = build_prompt_table(&corpus, &policy, &[])?;
            let path = out_path(cli, "prompts.jsonl")?;
            save_prompt_table(&table, &path)?;
            let ss = mean_similarity(&table, false).unwrap_or(f64::NAN);
            println!("{} assignments, mean similarity {ss:.4} -> {}", table.len(), path.display());
            Ok(())
        }
        Cmd::CompileInstruction {
            instruction,
            speaker,
        } => {
            let persona = Persona::named(0, speaker.as_str());
            let attrs = decompose(instruction, &persona, &InstructionLexicon::default())?;
            let tokens = render_attribute_tokens(&attrs, &id_map(&world));
            println!("attributes: {attrs:?}");
            let rendered: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
            println!("control tokens: {}", rendered.join(" "));
            Ok(())
        }
        Cmd::BuildData {
            corpus,
            stage,
            k_ctx,
        } => {
            let corpus = load_corpus(corpus)?;
            let records = match stage {
                1 => stage1_records(&corpus)?,
                2 => stage2_records(&corpus, *k_ctx, *k_ctx)?,
                other => {
                    return Err(Error::Usage(format!(
                        "build-data stage must be 1 or 2, got {other}"
                    )))
                }
            };
            let path = out_path(cli, &format!("stage{stage}_data.jsonl"))?;
            save_dataset(&records, &path)?;
            println!("{} records -> {}", records.len(), path.display());
            Ok(())
        }
        Cmd::Train {
            data,
            held_out,
            stage,
            checkpoint,
            steps,
        } => {
            let records = load_dataset(data)?;
            let held: Vec<DatasetRecord> = match held_out {
                Some(p) => load_dataset(p)?,
                None => Vec::new(),
            };
            let mut ckpt = match checkpoint {
                Some(p) => load_checkpoint(p)?,
                None if *stage == 1 => init_model(&ModelConfig {
                    seed: cli.seed,
                    ..ModelConfig::default()
                })?,
                None => {
                    return Err(Error::Usage(format!(
                        "stage {stage} continues from a checkpoint; pass --checkpoint"
                    )))
                }
            };
            let mut cfg = TrainConfig::for_stage(*stage);
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            let report = train_stage(&mut ckpt, &records, &held, &cfg)?;
            let path = out_path(cli, &format!("stage{stage}.ckpt"))?;
            save_checkpoint(&ckpt, &path)?;
            println!(
                "stage {} done: loss {:.4} -> {:.4}, checkpoint {}",
                stage, report.initial_loss, report.final_loss, path.display()
            );
            Ok(())
        }
        Cmd::Distill {
            corpus,
            checkpoint,
            samples_per_cell,
        } => {
            let corpus = load_corpus(corpus)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let spec = DistillSpec {
                source_ids: corpus.utterances().map(|u| u.id).collect(),
                grid: bookcast::distill::full_grid(),
                samples_per_cell: *samples_per_cell,
                seed: cli.seed,
            };
            let target: Vec<_> = spec
                .grid
                .iter()
                .map(|&c| (c, *samples_per_cell))
                .collect();
            let (records, _samples, audit) =
                run_distillation(&ckpt, &corpus, &spec, &FilterThresholds::default(), &target)?;
            let path = out_path(cli, "stage3_data.jsonl")?;
            save_dataset(&records, &path)?;
            println!(
                "synthesized {}, kept {}, balanced {} records -> {}",
                audit.synthesized,
                audit.kept,
                records.len(),
                path.display()
            );
            Ok(())
        }
        Cmd::Synth {
            corpus,
            checkpoint,
            utterance,
            mode,
        } => {
            let corpus = load_corpus(corpus)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let map = id_map(&corpus.meta);
            let (ch, i, u) = corpus
                .chapters
                .iter()
                .find_map(|ch| {
                    ch.utterances
                        .iter()
                        .position(|u| u.id == *utterance)
                        .map(|i| (ch, i, &ch.utterances[i]))
                })
                .ok_or_else(|| Error::validation(format!("utterance {utterance} not found")))?;
            let ctx = mode
                .uses_context()
                .then(|| bookcast::eval::context_texts_for(ch, i, 1, 1));
            let payload = mode
                .uses_instruction()
                .then(|| render_attribute_tokens(&u.attributes, &map));
            let prefix = build_inference_prefix(
                *mode,
                u.embedding.clone(),
                ctx.as_ref(),
                payload.as_deref(),
                &u.text,
                &map,
            )?;
            let out = generate(
                &ckpt,
                &prefix,
                &map,
                u.speech.len() + 2,
                &SamplingConfig::Greedy,
            )?;
            let tokens: Vec<String> = out.speech.iter().map(|t| t.0.to_string()).collect();
            println!("{}", tokens.join(" "));
            Ok(())
        }
        Cmd::Eval(args) => {
            let corpus = load_corpus(&args.corpus)?;
            let ckpt = load_checkpoint(&args.checkpoint)?;
            let (_, held_out) = split_corpus(&corpus, args.held_out_chapters)?;
            let sizes = TestSizes {
                nar_paragraphs: args.nar_items,
                dia_sentences: args.dia_items,
                chap_chapters: args.chap_items,
            };
            let suites = build_testsets(&held_out, &sizes, cli.seed)?;
            let suite = match args.suite.as_str() {
                "nar" => &suites.nar,
                "dia" => &suites.dia,
                "chap" => &suites.chap,
                other => return Err(Error::Usage(format!("unknown suite '{other}'"))),
            };
            let metrics = evaluate(
                &ckpt,
                &held_out,
                suite,
                args.mode,
                &PromptPolicy::non_decoupled(),
            )?;
            let records = vec![
                ReportRecord::Header {
                    config_hash: bookcast::util::fnv64(&cli.seed.to_le_bytes()),
                    seed: cli.seed,
                },
                ReportRecord::Metrics(metrics.clone()),
            ];
            let path = out_path(cli, "eval_report.txt")?;
            emit_report(&records, &path)?;
            println!(
                "{} {}: per {:.4} ss {:.4} tok {:.4} -> {}",
                metrics.suite, metrics.mode, metrics.per, metrics.ss, metrics.token_accuracy,
                path.display()
            );
            Ok(())
        }
        Cmd::Ablate {
            name,
            corpus,
            stage2,
            stage3,
            held_out_chapters,
        } => {
            let corpus = load_corpus(corpus)?;
            let (_, held_out) = split_corpus(&corpus, *held_out_chapters)?;
            let s2 = stage2.as_ref().map(|p| load_checkpoint(p)).transpose()?;
            let s3 = stage3.as_ref().map(|p| load_checkpoint(p)).transpose()?;
            let dia_ids: Vec<u64> = held_out
                .utterances()
                .filter(|u| u.kind == bookcast::corpus::UtteranceKind::Dialogue)
                .map(|u| u.id)
                .collect();
            let report = run_ablation(
                name,
                &AblationInputs {
                    corpus: &corpus,
                    held_out: &held_out,
                    dia_ids: &dia_ids,
                    stage2: s2.as_ref(),
                    stage3: s3.as_ref(),
                },
            )?;
            for (label, v) in &report.rows {
                println!("{label:<30} {v:.4}");
            }
            let records = vec![
                ReportRecord::Header {
                    config_hash: bookcast::util::fnv64(&cli.seed.to_le_bytes()),
                    seed: cli.seed,
                },
                ReportRecord::Ablation(report),
            ];
            emit_report(&records, &out_path(cli, &format!("ablation_{name}.txt"))?)
        }
        Cmd::Report { records } => {
            let mut all = Vec::new();
            for p in records {
                all.extend(load_report_records(p)?);
            }
            let path = out_path(cli, "combined_report.txt")?;
            emit_report(&all, &path)?;
            println!("{} records -> {}", all.len(), path.display());
            Ok(())
        }
        Cmd::Pipeline {
            input,
            corpus,
            personas,
            checkpoint,
            chapters,
        } => {
            let source = match (input, corpus) {
                (Some(p), _) => PipelineSource::Fiction {
                    text: std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                    personas: parse_personas(personas),
                },
                (None, Some(p)) => PipelineSource::Corpus(load_corpus(p)?),
                (None, None) => {
                    return Err(Error::Usage(
                        "pipeline needs --input fiction or --corpus file".to_string(),
                    ))
                }
            };
            if !checkpoint.exists() {
                return Err(Error::validation(format!(
                    "checkpoint {} does not exist; train one first",
                    checkpoint.display()
                )));
            }
            let ckpt = load_checkpoint(checkpoint)?;
            std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
            let out = pipeline_run(source, &ckpt, &world, chapters.as_deref(), &cli.out_dir)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            for (id, per) in &out.chapter_per {
                println!("chapter {id}: per {per:.4}");
            }
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Validation(_) | Error::Parse { .. } | Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
