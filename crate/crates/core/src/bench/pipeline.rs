use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::alloc::measure;
use super::config::{PipelineConfig, ReportFormat};
use super::report::{row_statistics, Aggregates, BenchReport, RunRow, Stages, SCHEMA_VERSION};
use super::tasks::{default_corpus, extract_answer, gen_synthetic_tasks, render_output, SyntheticTask};
use crate::error::{HolaError, Result, Stage, StageExt};
use crate::hsd::{decode, decode_verifier_only, modeled_speedup, DecodeTrace};
use crate::lobi::{
    assign_precisions, load_adapters, load_any_weights, merge_lora, quantize_model, AssignOptions, CalibrationSet, PrecisionMap,
    QuantizedModel,
};
use crate::model::{last_logits, ModelConfig, ModelWeights, TokenId};
use crate::rag::{build_index, load_index, route_and_augment_within, DocIndex};

/// Calibration prompts are drawn from a stream independent of the tasks.
const CALIBRATION_SEED_SALT: u64 = 0xCA11_B4A7;

pub fn calibration_set(seed: u64, size: usize) -> Result<CalibrationSet> {
    CalibrationSet::new(
        gen_synthetic_tasks(seed ^ CALIBRATION_SEED_SALT, size)
            .iter()
            .map(SyntheticTask::prompt_tokens)
            .collect(),
    )
}

/// Models and index after the offline stages.
pub struct Prepared {
    pub draft: ModelWeights,
    pub verifier: ModelWeights,
    pub model_bytes: usize,
    pub quantized: Option<(QuantizedModel, QuantizedModel)>,
    pub maps: Option<(PrecisionMap, PrecisionMap)>,
    pub index: Option<DocIndex>,
}

fn load_or_init(path: &Option<PathBuf>, preset: ModelConfig, seed: u64) -> Result<ModelWeights> {
    match path {
        Some(p) => load_any_weights(p),
        None => ModelWeights::init_random(preset, seed),
    }
}

fn merge_from(weights: ModelWeights, path: &Option<PathBuf>) -> Result<ModelWeights> {
    match path {
        Some(p) => merge_lora(&weights, &load_adapters(p)?),
        None => Ok(weights),
    }
}

fn precision_map(
    weights: &ModelWeights,
    path: &Option<PathBuf>,
    calib: &CalibrationSet,
    cfg: &PipelineConfig,
) -> Result<PrecisionMap> {
    match path {
        Some(p) => PrecisionMap::load(p),
        None => {
            let opts = AssignOptions {
                block_size: cfg.block_size,
                relative_tolerance: cfg.lobi_tolerance,
                ..AssignOptions::default()
            };
            assign_precisions(weights, calib, &opts)
        }
    }
}

/// Load, merge, calibrate and quantize; build or load the index.
pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    cfg.validate()?;
    let draft = load_or_init(&cfg.draft, ModelConfig::draft(), cfg.seed).stage(Stage::Load)?;
    let verifier =
        load_or_init(&cfg.verifier, ModelConfig::verifier(), cfg.seed.wrapping_add(1)).stage(Stage::Load)?;
    if draft.config.vocab_size != verifier.config.vocab_size {
        return Err(HolaError::Validation("draft and verifier vocabularies differ".into()).at(Stage::Load));
    }
    let draft = merge_from(draft, &cfg.draft_adapters).stage(Stage::LoraMerge)?;
    let verifier = merge_from(verifier, &cfg.verifier_adapters).stage(Stage::LoraMerge)?;

    let (draft, verifier, model_bytes, quantized, maps) = if cfg.no_lobi {
        let bytes = draft.f32_bytes() + verifier.f32_bytes();
        (draft, verifier, bytes, None, None)
    } else {
        let calib = calibration_set(cfg.seed, cfg.calib_size).stage(Stage::Calibration)?;
        let dmap = precision_map(&draft, &cfg.draft_map, &calib, cfg).stage(Stage::Calibration)?;
        let vmap = precision_map(&verifier, &cfg.verifier_map, &calib, cfg).stage(Stage::Calibration)?;
        let dq = quantize_model(&draft, &dmap).stage(Stage::Quantize)?;
        let vq = quantize_model(&verifier, &vmap).stage(Stage::Quantize)?;
        let bytes = dq.packed_bytes() + vq.packed_bytes();
        let d = dq.dequantize().stage(Stage::Quantize)?;
        let v = vq.dequantize().stage(Stage::Quantize)?;
        (d, v, bytes, Some((dq, vq)), Some((dmap, vmap)))
    };

    let index = if cfg.no_rag {
        None
    } else {
        let index = match &cfg.index {
            Some(p) => load_index(p),
            None => build_index(&draft, &default_corpus()),
        }
        .stage(Stage::Routing)?;
        if index.dim() != draft.config.d_model {
            return Err(HolaError::Shape(format!(
                "index dimension {} does not match draft width {}",
                index.dim(),
                draft.config.d_model
            ))
            .at(Stage::Routing));
        }
        Some(index)
    };
    Ok(Prepared {
        draft,
        verifier,
        model_bytes,
        quantized,
        maps,
        index,
    })
}

/// Mean wall-clock micros of one last-position forward pass on `ids`.
pub fn forward_cost_micros(weights: &ModelWeights, ids: &[TokenId], repeats: usize) -> Result<f64> {
    last_logits(weights, ids)?;
    let start = Instant::now();
    for _ in 0..repeats.max(1) {
        std::hint::black_box(last_logits(weights, ids)?);
    }
    Ok(start.elapsed().as_nanos() as f64 / 1000.0 / repeats.max(1) as f64)
}

/// Generated tokens, their trace, retrieved ids and `C(q)`.
type Served = (Vec<TokenId>, DecodeTrace, Vec<String>, Option<f64>);

fn run_task(cfg: &PipelineConfig, p: &Prepared, task: &SyntheticTask) -> Result<RunRow> {
    let budget = p
        .draft
        .config
        .max_seq_len
        .min(p.verifier.config.max_seq_len)
        .saturating_sub(cfg.max_tokens);
    let hsd = cfg.hsd();
    let m = measure(|| -> Result<Served> {
        let prompt = task.prompt_tokens();
        let (ctx, retrieved, complexity) = match &p.index {
            None => (prompt, Vec::new(), None),
            Some(index) => {
                let (x, d) = route_and_augment_within(&p.draft, index, &prompt, cfg.delta, cfg.top_k, budget)
                    .stage(Stage::Routing)?;
                (x, d.retrieved, Some(d.complexity))
            }
        };
        let (out, trace) = if cfg.no_hsd {
            decode_verifier_only(&p.verifier, &ctx, cfg.max_tokens)
        } else {
            decode(&p.draft, &p.verifier, &ctx, &hsd)
        }
        .stage(Stage::Decode)?;
        Ok((out, trace, retrieved, complexity))
    });
    let (tokens, trace, retrieved, complexity) = m.value?;
    let answer = extract_answer(&tokens);
    Ok(RunRow {
        task_id: task.id.clone(),
        prompt: task.prompt.clone(),
        expected: task.answer.clone(),
        output: render_output(&tokens),
        correct: answer == task.answer,
        tokens,
        latency_micros: m.latency_micros,
        peak_bytes: m.peak_bytes,
        verifier_calls: trace.verifier_calls,
        draft_calls: trace.draft_calls,
        emitted: trace.emitted(),
        retrieved,
        complexity,
    })
}

/// Runs the per-task stages on prepared models.
pub fn run_prepared(cfg: &PipelineConfig, p: &Prepared) -> Result<BenchReport> {
    let tasks = gen_synthetic_tasks(cfg.seed, cfg.tasks);
    let rows: Vec<RunRow> = if cfg.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel)
            .build()
            .map_err(|e| HolaError::Config(e.to_string()))?;
        pool.install(|| tasks.par_iter().map(|t| run_task(cfg, p, t)).collect::<Result<_>>())?
    } else {
        tasks.iter().map(|t| run_task(cfg, p, t)).collect::<Result<_>>()?
    };

    let probe = tasks[0].prompt_tokens();
    let cost_draft = forward_cost_micros(&p.draft, &probe, 5).stage(Stage::Report)?;
    let cost_verifier = forward_cost_micros(&p.verifier, &probe, 5).stage(Stage::Report)?;
    let total_tokens: usize = rows.iter().map(|r| r.emitted).sum();
    let total_verifier_calls: usize = rows.iter().map(|r| r.verifier_calls).sum();
    let total_draft_calls: usize = rows.iter().map(|r| r.draft_calls).sum();
    let modeled = if cfg.no_hsd {
        1.0
    } else {
        modeled_speedup(total_tokens, total_verifier_calls, cost_draft, cost_verifier).stage(Stage::Report)?
    };
    let (accuracy_pct, latency_mean_ms, latency_std_ms, latency_per_token_mean_ms, peak_mem_mean_mb, peak_mem_std_mb) =
        row_statistics(&rows);
    let aggregates = Aggregates {
        tasks: rows.len(),
        accuracy_pct,
        latency_mean_ms,
        latency_std_ms,
        latency_per_token_mean_ms,
        peak_mem_mean_mb,
        peak_mem_std_mb,
        model_bytes: p.model_bytes,
        total_tokens,
        total_verifier_calls,
        total_draft_calls,
        acceptance_rate: if total_tokens == 0 {
            0.0
        } else {
            (total_tokens - total_verifier_calls) as f64 / total_tokens as f64
        },
        cost_draft_micros: cost_draft,
        cost_verifier_micros: cost_verifier,
        modeled_speedup: modeled,
        contended: cfg.parallel > 1,
    };
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        stages: Stages {
            hsd: !cfg.no_hsd,
            rag: !cfg.no_rag,
            lobi: !cfg.no_lobi,
        },
        rows,
        aggregates,
    })
}

/// Offline stages once, then every task.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<BenchReport> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared)
}

fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}_summary.csv"))
}

/// Writes the report in `format`. CSV output goes to two files: the rows
/// at `path` and the aggregates next to it with a `_summary` suffix.
pub fn write_report(report: &BenchReport, format: ReportFormat, path: &Path) -> Result<()> {
    let create = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| HolaError::io(p, e));
    match format {
        ReportFormat::Json => {
            let mut f = create(path)?;
            f.write_all(report.to_json().as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| HolaError::io(path, e))
        }
        ReportFormat::Csv => {
            report.write_rows_csv(create(path)?)?;
            report.write_summary_csv(create(&summary_path(path))?)
        }
    }
    .stage(Stage::Report)
}
