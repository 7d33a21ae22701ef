//! `hola`: command-line driver for the toolkit.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hola_core::bench::{
    calibrate_delta, calibration_set, default_corpus, gen_synthetic_tasks, run_pipeline, write_report,
    PipelineConfig, ReportFormat,
};
use hola_core::error::{ErrorClass, HolaError, Result};
use hola_core::hsd::{decode, decode_verifier_only, HsdConfig};
use hola_core::lobi::{
    assign_precisions, load_adapters, load_any_weights, merge_lora, quantize_model, random_adapters, save_adapters,
    save_quantized, AssignOptions, PrecisionMap,
};
use hola_core::model::{save_weights, tokenize, ModelConfig, ModelWeights};
use hola_core::quant::Precision;
use hola_core::rag::{build_index, save_index};

#[derive(Parser)]
#[command(name = "hola", version, about = "Speculative decoding, adaptive retrieval and mixed-precision compression for toy transformers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    topk: Option<usize>,
    #[arg(long, global = true)]
    calib_size: Option<usize>,
    #[arg(long, global = true)]
    block_size: Option<usize>,
    #[arg(long, global = true)]
    no_hsd: bool,
    #[arg(long, global = true)]
    no_rag: bool,
    #[arg(long, global = true)]
    no_lobi: bool,
    #[arg(long, global = true)]
    parallel: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Draft,
    Verifier,
    FullDraft,
    FullVerifier,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random checkpoint.
    InitModel {
        #[arg(long, value_enum, default_value = "draft")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed documents into an index file.
    BuildIndex {
        #[arg(long)]
        model: PathBuf,
        /// JSON lines of `{"id": .., "text": ..}`; the built-in corpus when omitted.
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge LoRA adapters into a checkpoint.
    MergeLora {
        #[arg(long)]
        model: PathBuf,
        /// Adapter file; random adapters of `--rank` are generated when omitted.
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long, default_value_t = hola_core::lobi::DEFAULT_RANK)]
        rank: usize,
        #[arg(long, default_value_t = 0.01)]
        scale: f32,
        /// Also write the adapters that were applied.
        #[arg(long)]
        save_adapters: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure per-block errors and choose precisions.
    AssignPrecisions {
        #[arg(long)]
        model: PathBuf,
        /// Slack relative to the mean calibration logit norm.
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack a checkpoint according to a precision map.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate from a prompt with entropy-gated decoding.
    Decode {
        #[arg(long)]
        draft: PathBuf,
        #[arg(long)]
        verifier: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        max_tokens: usize,
        #[arg(long, default_value_t = 4)]
        draft_chunk: usize,
        /// Per-token trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the end-to-end benchmark.
    Bench {
        #[arg(long)]
        draft: Option<PathBuf>,
        #[arg(long)]
        verifier: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        max_tokens: Option<usize>,
        /// Report path; stdout when omitted (JSON only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Suggest a routing threshold from validation queries.
    CalibrateDelta {
        #[arg(long)]
        model: PathBuf,
        /// Number of synthetic validation queries.
        #[arg(long, default_value_t = 101)]
        queries: usize,
    },
    /// Print synthetic tasks as JSON lines.
    GenTasks {
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
}

impl Global {
    fn pipeline(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.format {
            cfg.format = match v {
                Format::Json => ReportFormat::Json,
                Format::Csv => ReportFormat::Csv,
            };
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.topk {
            cfg.top_k = v;
        }
        if let Some(v) = self.calib_size {
            cfg.calib_size = v;
        }
        if let Some(v) = self.block_size {
            cfg.block_size = v;
        }
        if let Some(v) = self.parallel {
            cfg.parallel = v;
        }
        cfg.no_hsd |= self.no_hsd;
        cfg.no_rag |= self.no_rag;
        cfg.no_lobi |= self.no_lobi;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn json_err(e: serde_json::Error) -> HolaError {
    HolaError::Format(e.to_string())
}

fn read_docs(path: &PathBuf) -> Result<Vec<(String, Vec<u8>)>> {
    let file = fs::File::open(path).map_err(|e| HolaError::io(path, e))?;
    let mut docs = Vec::new();
    for line in io::BufReader::new(file).lines() {
        let line = line.map_err(|e| HolaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).map_err(json_err)?;
        let field = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .ok_or_else(|| HolaError::Format(format!("doc line lacks string field {k:?}")))
        };
        docs.push((field("id")?, field("text")?.into_bytes()));
    }
    Ok(docs)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = g.pipeline()?;
    let mut stdout = io::stdout().lock();
    let out_err = |e: io::Error| HolaError::io("<stdout>", e);
    match cli.command {
        Command::InitModel { preset, out } => {
            let config = match preset {
                Preset::Draft => ModelConfig::draft(),
                Preset::Verifier => ModelConfig::verifier(),
                Preset::FullDraft => ModelConfig::full_draft(),
                Preset::FullVerifier => ModelConfig::full_verifier(),
            };
            let w = ModelWeights::init_random(config, cfg.seed)?;
            save_weights(&w, &out)?;
            writeln!(stdout, "wrote {} ({} parameters)", out.display(), w.parameter_count()).map_err(out_err)?;
        }
        Command::BuildIndex { model, docs, out } => {
            let w = load_any_weights(&model)?;
            let docs = match docs {
                Some(p) => read_docs(&p)?,
                None => default_corpus(),
            };
            let index = build_index(&w, &docs)?;
            save_index(&index, &out)?;
            writeln!(stdout, "indexed {} documents into {}", index.len(), out.display()).map_err(out_err)?;
        }
        Command::MergeLora {
            model,
            adapters,
            rank,
            scale,
            save_adapters: keep,
            out,
        } => {
            let w = load_any_weights(&model)?;
            let adapters = match adapters {
                Some(p) => load_adapters(&p)?,
                None => random_adapters(&w, rank, scale, cfg.seed)?,
            };
            if let Some(p) = keep {
                save_adapters(&adapters, &p)?;
            }
            let merged = merge_lora(&w, &adapters)?;
            save_weights(&merged, &out)?;
            writeln!(stdout, "merged {} adapters into {}", adapters.len(), out.display()).map_err(out_err)?;
        }
        Command::AssignPrecisions { model, tolerance, out } => {
            let w = load_any_weights(&model)?;
            let calib = calibration_set(cfg.seed, cfg.calib_size)?;
            let opts = AssignOptions {
                block_size: cfg.block_size,
                relative_tolerance: tolerance,
                ..AssignOptions::default()
            };
            let map = assign_precisions(&w, &calib, &opts)?;
            map.save(&out)?;
            writeln!(
                stdout,
                "{} blocks: 4-bit {:.1}%, 8-bit {:.1}%, 16-bit {:.1}%",
                map.block_count(),
                100.0 * map.fraction_at(Precision::Int4),
                100.0 * map.fraction_at(Precision::Int8),
                100.0 * map.fraction_at(Precision::Int16)
            )
            .map_err(out_err)?;
        }
        Command::Quantize { model, map, out } => {
            let w = load_any_weights(&model)?;
            let q = quantize_model(&w, &PrecisionMap::load(&map)?)?;
            save_quantized(&q, &out)?;
            writeln!(
                stdout,
                "packed {} bytes (f32: {} bytes); quantized payload {:.3} of f32",
                q.packed_bytes(),
                w.f32_bytes(),
                q.quantized_payload_bytes() as f64 / q.dense_payload_bytes() as f64
            )
            .map_err(out_err)?;
        }
        Command::Decode {
            draft,
            verifier,
            prompt,
            max_tokens,
            draft_chunk,
            trace,
        } => {
            let v = load_any_weights(&verifier)?;
            let ids = tokenize(prompt.as_bytes());
            let (tokens, t) = if cfg.no_hsd {
                decode_verifier_only(&v, &ids, max_tokens)?
            } else {
                let d = load_any_weights(&draft)?;
                let hsd = HsdConfig {
                    tau: cfg.tau,
                    max_tokens,
                    draft_chunk,
                };
                decode(&d, &v, &ids, &hsd)?
            };
            if let Some(p) = trace {
                let f = fs::File::create(&p).map_err(|e| HolaError::io(&p, e))?;
                t.write_jsonl(io::BufWriter::new(f))?;
            }
            writeln!(stdout, "{}", hola_core::bench::render_output(&tokens)).map_err(out_err)?;
            writeln!(
                stdout,
                "tokens {} accepted {} verifier_calls {} draft_calls {}",
                t.emitted(),
                t.accepted_count,
                t.verifier_calls,
                t.draft_calls
            )
            .map_err(out_err)?;
        }
        Command::Bench {
            draft,
            verifier,
            index,
            tasks,
            max_tokens,
            out,
        } => {
            let mut cfg = cfg;
            cfg.draft = draft.or(cfg.draft);
            cfg.verifier = verifier.or(cfg.verifier);
            cfg.index = index.or(cfg.index);
            cfg.tasks = tasks.unwrap_or(cfg.tasks);
            cfg.max_tokens = max_tokens.unwrap_or(cfg.max_tokens);
            cfg.output = out.or(cfg.output);
            let report = run_pipeline(&cfg)?;
            match &cfg.output {
                Some(p) => write_report(&report, cfg.format, p)?,
                None if cfg.format == ReportFormat::Csv => report.write_rows_csv(&mut stdout)?,
                None => writeln!(stdout, "{}", report.to_json()).map_err(out_err)?,
            }
        }
        Command::CalibrateDelta { model, queries } => {
            let w = load_any_weights(&model)?;
            let qs: Vec<_> = gen_synthetic_tasks(cfg.seed, queries).iter().map(|t| t.prompt_tokens()).collect();
            writeln!(stdout, "{}", calibrate_delta(&w, &qs)?).map_err(out_err)?;
        }
        Command::GenTasks { n } => {
            for t in gen_synthetic_tasks(cfg.seed, n) {
                writeln!(stdout, "{}", serde_json::to_string(&t).map_err(json_err)?).map_err(out_err)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hola: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Capacity => 4,
            })
        }
    }
}
