use std::fs;
use std::path::Path;
use std::time::Instant;

use mole::analyst::{
    check_csv, cost_csv, expected_expert_loads, latency_csv, latency_report, published_check, table_report,
    BandwidthModel, Verdict,
};
use mole::engine::{cache_capacity, decode, EngineConfig, MeterSummary, Routing, Runtime};
use mole::lut_store::{open_lut, verify_tolerance, write_lut, LutDtype, LutFileHeader};
use mole::model::{read_checkpoint, table_presets, write_checkpoint, ModelConfig};
use mole::reparam::{reparameterize, verify_equivalence};
use mole::trainer;
use mole::{ModelParams, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{load_corpus, load_model_list, load_run_config, model_from, LoadedConfig};
use crate::error::{CliError, CliResult, WithPath};
use crate::manifest::{sidecar, RunManifest};
use crate::{
    BenchArgs, Format, InferArgs, ModelSource, QuantizeArgs, ReparamArgs, ReportArgs, ReportKind, RoutingKind,
    RuntimeKind, TrainArgs, VerifyArgs,
};

const DEFAULT_NF_BLOCK: usize = 64;

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn read_params(path: &Path) -> CliResult<ModelParams<f32>> {
    read_checkpoint::<f32>(path).at(path)
}

fn normalized(cfg: ModelConfig) -> CliResult<ModelConfig> {
    Ok(cfg.normalized()?)
}

fn load_source(source: &ModelSource) -> CliResult<(Option<LoadedConfig>, ModelConfig)> {
    let loaded = source.config.as_deref().map(load_run_config).transpose()?;
    let model = normalized(model_from(loaded.as_ref().map(|l| &l.run), source.preset.as_deref())?)?;
    Ok((loaded, model))
}

fn random_prompts(n: usize, max_len: usize, vocab: usize, seed: u64, fixed_len: bool) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = if fixed_len {
                max_len
            } else {
                rng.random_range(1..=max_len)
            };
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect()
}

fn block_size_for(dtype: LutDtype, flag: Option<usize>) -> CliResult<usize> {
    match (dtype.is_quantized(), flag) {
        (true, None) => Ok(DEFAULT_NF_BLOCK),
        (true, Some(b)) => Ok(b),
        (false, None | Some(0)) => Ok(0),
        (false, Some(b)) => Err(CliError::usage(format!(
            "block-size: {b} given but {} is not block-quantized",
            dtype.name()
        ))),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    out_dir: String,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    reduction: f64,
    checkpoint_sha256: String,
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let (loaded, model) = load_source(&args.source)?;
    let mut tc = loaded.as_ref().map(|l| l.run.train.clone()).unwrap_or_default();
    if let Some(s) = args.source.seed {
        tc.seed = s;
    }
    if let Some(s) = args.steps {
        tc.total_steps = s;
    }
    if let Some(b) = args.batch {
        tc.batch = b;
    }
    if let Some(l) = args.seq_len {
        tc.seq_len = l;
    }
    if let Some(lr) = args.lr {
        tc.peak_lr = lr;
    }
    tc.validate()?;
    let corpus_path = args
        .corpus
        .clone()
        .or_else(|| loaded.as_ref().and_then(|l| l.run.corpus.clone()));
    let corpus = load_corpus(corpus_path.as_deref())?;

    let params = ModelParams::<f32>::init(&model, tc.seed)?;
    let outcome = trainer::train(params, &corpus, &tc)?;
    let (first, last) = (
        outcome.initial_loss().unwrap_or(f64::NAN),
        outcome.final_loss().unwrap_or(f64::NAN),
    );
    if !last.is_finite() {
        return Err(CliError::Failed(format!("final loss is not finite ({last})")));
    }

    fs::create_dir_all(&args.out).at(&args.out)?;
    let ckpt = args.out.join("checkpoint.bin");
    let loss = args.out.join("loss.csv");
    write_checkpoint(&outcome.params, &ckpt).at(&ckpt)?;
    fs::write(&loss, outcome.loss_csv()).at(&loss)?;

    let mut m = RunManifest::new("train");
    if let Some(l) = &loaded {
        m.config_file(&l.path, &l.bytes);
    }
    if let Some(p) = &corpus_path {
        m.input("corpus", p)?;
    }
    m.model = Some(model);
    m.train = Some(tc.clone());
    m.seed = Some(tc.seed);
    m.output("checkpoint", &ckpt)?;
    m.output("loss", &loss)?;
    m.write(&args.out.join("manifest.json"))?;

    let summary = TrainSummary {
        out_dir: args.out.display().to_string(),
        steps: tc.total_steps,
        initial_loss: first,
        final_loss: last,
        reduction: 1.0 - last / first,
        checkpoint_sha256: m.outputs[0].sha256.clone(),
    };
    match args.format {
        Format::Json => print_json(&summary),
        Format::Csv => {
            println!("steps,initial_loss,final_loss,reduction,checkpoint_sha256");
            println!(
                "{},{},{},{:.4},{}",
                summary.steps, summary.initial_loss, summary.final_loss, summary.reduction, summary.checkpoint_sha256
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct LutSummary {
    path: String,
    header: LutFileHeader,
    payload_bytes: u64,
    file_bytes: u64,
    bytes_per_token_step: u64,
}

fn lut_summary(path: &Path, header: LutFileHeader) -> CliResult<LutSummary> {
    Ok(LutSummary {
        path: path.display().to_string(),
        header,
        payload_bytes: header.payload_bytes().map_err(mole::Error::from)?,
        file_bytes: header.file_bytes().map_err(mole::Error::from)?,
        bytes_per_token_step: header.token_bytes() * header.n_layers as u64,
    })
}

fn print_lut_summary(s: &LutSummary, format: Format) {
    match format {
        Format::Json => print_json(s),
        Format::Csv => {
            let h = &s.header;
            println!("path,layers,vocab,experts,d,dtype,block_size,payload_bytes,file_bytes,bytes_per_token_step");
            println!(
                "{},{},{},{},{},{},{},{},{},{}",
                s.path,
                h.n_layers,
                h.vocab,
                h.n_experts,
                h.d,
                h.dtype.name(),
                h.block_size,
                s.payload_bytes,
                s.file_bytes,
                s.bytes_per_token_step
            );
        }
    }
}

pub fn reparam(args: ReparamArgs) -> CliResult<()> {
    let params = read_params(&args.checkpoint)?;
    let c = &params.config;
    if c.variant != Variant::Mole {
        return Err(CliError::usage(format!(
            "checkpoint is a {} model; only mole models have routed experts that depend on the token id alone",
            c.variant.name()
        )));
    }
    if params.is_lut_form() {
        return Err(CliError::usage("checkpoint is already in lookup form"));
    }
    let block = block_size_for(args.dtype, args.block_size)?;
    let (_, tables) = reparameterize(&params)?;
    let header = write_lut(&tables, &args.out, args.dtype, block).at(&args.out)?;

    let mut m = RunManifest::new("reparam");
    m.model = Some(params.config.clone());
    m.input("checkpoint", &args.checkpoint)?;
    m.output("lut", &args.out)?;
    m.write(&sidecar(&args.out))?;
    print_lut_summary(&lut_summary(&args.out, header)?, args.format);
    Ok(())
}

#[derive(Serialize)]
struct VerifyOutput {
    dtype: &'static str,
    report: mole::reparam::EquivalenceReport,
    worst_prompt: Option<usize>,
}

pub fn verify(args: VerifyArgs) -> CliResult<()> {
    let params = read_params(&args.checkpoint)?;
    let lut = open_lut(&args.lut).at(&args.lut)?;
    if params.config.variant != Variant::Mole || params.is_lut_form() {
        return Err(CliError::usage("verify needs a training-form mole checkpoint"));
    }
    let (infer, _) = reparameterize(&params)?;
    let (h, c) = (lut.header(), &params.config);
    let dims = (
        h.n_layers as usize,
        h.vocab as usize,
        h.n_experts as usize,
        h.d as usize,
    );
    if dims != (c.n_layers, c.vocab, c.n_experts, c.d_model) {
        return Err(CliError::usage(format!(
            "LUT dims (layers, vocab, experts, d) = {dims:?} do not match the checkpoint's {:?}",
            (c.n_layers, c.vocab, c.n_experts, c.d_model)
        )));
    }
    if args.prompts == 0 || args.prompt_len == 0 {
        return Err(CliError::usage(
            "prompts: need at least one prompt of length at least one",
        ));
    }
    let max_len = args.prompt_len.min(c.max_seq);
    let prompts = random_prompts(args.prompts, max_len, c.vocab, args.seed, false);
    let tolerance = args.tolerance.unwrap_or_else(|| verify_tolerance(h.dtype));
    let report = verify_equivalence(&params, &infer, &lut, &prompts, tolerance)?;
    let worst_prompt = report
        .prompts
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .map(|p| p.prompt);
    let out = VerifyOutput {
        dtype: h.dtype.name(),
        report,
        worst_prompt,
    };
    match args.format {
        Format::Json => print_json(&out),
        Format::Csv => {
            println!("prompt,len,rel_error");
            for p in &out.report.prompts {
                println!("{},{},{:e}", p.prompt, p.len, p.rel_error);
            }
            let worst = out.worst_prompt.map_or("none".to_string(), |i| i.to_string());
            eprintln!("{} (dtype {}, worst prompt {worst})", out.report.summary(), out.dtype);
        }
    }
    if out.report.passed {
        Ok(())
    } else {
        Err(CliError::Failed(out.report.summary()))
    }
}

fn parse_ids(s: &str) -> CliResult<Vec<u32>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| CliError::usage(format!("ids: {t:?} is not a token id")))
        })
        .collect()
}

#[derive(Serialize)]
struct InferLane {
    prompt: Vec<u32>,
    tokens: Vec<u32>,
    text: Option<String>,
}

#[derive(Serialize)]
struct InferOutput {
    runtime: &'static str,
    lanes: Vec<InferLane>,
    meter: MeterSummary,
}

pub fn infer(args: InferArgs) -> CliResult<()> {
    let params = read_params(&args.checkpoint)?;
    let byte_vocab = params.config.vocab >= 256;
    let mut prompts: Vec<Vec<u32>> = Vec::new();
    for p in &args.prompt {
        if !byte_vocab {
            return Err(CliError::usage(
                "prompt: text prompts need a byte vocabulary; use --ids",
            ));
        }
        prompts.push(p.bytes().map(u32::from).collect());
    }
    for s in &args.ids {
        prompts.push(parse_ids(s)?);
    }
    if prompts.is_empty() || prompts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage("prompt: give at least one non-empty --prompt or --ids"));
    }

    let lut = args.lut.as_deref().map(|p| open_lut(p).at(p)).transpose()?;
    let infer_params;
    let runtime = match (params.config.variant, &lut) {
        (Variant::Dense, None) => Runtime::dense(&params)?,
        (Variant::Moe, None) => Runtime::moe(&params, Routing::Model)?,
        (Variant::Mole, None) => Runtime::mole_train(&params)?,
        (Variant::Mole, Some(l)) => {
            infer_params = reparameterize(&params)?.0;
            Runtime::mole_lut(&infer_params, l)?
        }
        (v, Some(_)) => {
            return Err(CliError::usage(format!(
                "lut: a {} model has no lookup tables",
                v.name()
            )));
        }
    };
    let out = decode(&runtime, &prompts, args.steps, &EngineConfig::default())?;
    let lanes: Vec<InferLane> = prompts
        .into_iter()
        .zip(out.tokens)
        .map(|(prompt, tokens)| {
            let text = (byte_vocab && tokens.iter().all(|&t| t < 256))
                .then(|| String::from_utf8_lossy(&tokens.iter().map(|&t| t as u8).collect::<Vec<u8>>()).into_owned());
            InferLane { prompt, tokens, text }
        })
        .collect();
    let result = InferOutput {
        runtime: runtime.name(),
        lanes,
        meter: out.meter.summary(),
    };
    match args.format {
        Format::Json => print_json(&result),
        Format::Csv => {
            println!("lane,tokens,text");
            for (i, l) in result.lanes.iter().enumerate() {
                let ids: Vec<String> = l.tokens.iter().map(u32::to_string).collect();
                let text = l.text.as_deref().map_or(String::new(), |t| format!("{t:?}"));
                println!("{i},{},{text}", ids.join(" "));
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchSummary {
    #[serde(flatten)]
    meter: MeterSummary,
    bandwidth_gbps: f64,
    prompt_len: usize,
    /// Measured wall-clock compute per step on this machine.
    compute_seconds_per_step: f64,
    /// Simulated transfer time over transfer plus measured compute.
    transfer_share: f64,
}

pub fn bench(args: BenchArgs) -> CliResult<()> {
    let bandwidth = BandwidthModel::from_gbps(args.bandwidth_gbps).map_err(|_| {
        CliError::usage(format!(
            "bandwidth-gbps: {} is not a positive finite rate",
            args.bandwidth_gbps
        ))
    })?;
    let loaded;
    let params = match &args.checkpoint {
        Some(p) => {
            loaded = None;
            read_params(p)?
        }
        None => {
            let (l, model) = load_source(&args.source)?;
            loaded = l;
            ModelParams::<f32>::init(&model, args.source.seed.unwrap_or(0))?
        }
    };
    let c = params.config.clone();
    if args.batch == 0 || args.steps == 0 || args.prompt_len == 0 {
        return Err(CliError::usage("batch/steps/prompt-len: must be positive"));
    }
    if args.prompt_len + args.steps - 1 > c.max_seq {
        return Err(CliError::usage(format!(
            "prompt-len: prompt plus steps exceeds max_seq {}",
            c.max_seq
        )));
    }
    let seed = args.source.seed.unwrap_or(0);
    let engine = EngineConfig {
        bandwidth,
        cache_seed: seed,
        ..EngineConfig::default()
    };

    let lut = args.lut.as_deref().map(|p| open_lut(p).at(p)).transpose()?;
    let (infer_params, tables);
    let runtime = match args.runtime {
        RuntimeKind::Dense => Runtime::dense(&params)?,
        RuntimeKind::MoeOffload => {
            let routing = match args.routing {
                RoutingKind::Uniform => Routing::Uniform { seed },
                RoutingKind::Model => Routing::Model,
            };
            Runtime::moe(&params, routing)?
        }
        RuntimeKind::MoleLut => {
            if c.variant != Variant::Mole {
                return Err(CliError::usage(format!(
                    "runtime: mole-lut needs a mole model, got {}",
                    c.variant.name()
                )));
            }
            let split = reparameterize(&params)?;
            infer_params = split.0;
            tables = split.1;
            match &lut {
                Some(l) => Runtime::mole_lut(&infer_params, l)?,
                None => Runtime::mole_tables(&infer_params, &tables)?,
            }
        }
    };
    if lut.is_some() && args.runtime != RuntimeKind::MoleLut {
        return Err(CliError::usage("lut: only the mole-lut runtime reads a LUT file"));
    }

    let prompts = random_prompts(args.batch, args.prompt_len, c.vocab, seed.wrapping_add(1), true);
    let start = Instant::now();
    let out = decode(&runtime, &prompts, args.steps, &engine)?;
    let compute = start.elapsed().as_secs_f64() / args.steps as f64;
    let meter = out.meter.summary();
    let sim = meter.total_sim_seconds / args.steps as f64;
    let summary = BenchSummary {
        transfer_share: if sim + compute > 0.0 {
            sim / (sim + compute)
        } else {
            0.0
        },
        meter,
        bandwidth_gbps: args.bandwidth_gbps,
        prompt_len: args.prompt_len,
        compute_seconds_per_step: compute,
    };

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).at(dir)?;
        let csv = dir.join("meter.csv");
        let js = dir.join("summary.json");
        fs::write(&csv, out.meter.to_csv()).at(&csv)?;
        fs::write(
            &js,
            serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
        )
        .at(&js)?;
        let mut m = RunManifest::new("bench");
        if let Some(l) = &loaded {
            m.config_file(&l.path, &l.bytes);
        }
        if let Some(p) = &args.checkpoint {
            m.input("checkpoint", p)?;
        }
        if let Some(p) = &args.lut {
            m.input("lut", p)?;
        }
        m.model = Some(c);
        m.engine = Some(engine);
        m.seed = Some(seed);
        m.output("meter", &csv)?;
        m.write(&dir.join("manifest.json"))?;
    }
    match args.format {
        Format::Json => print_json(&serde_json::json!({ "summary": summary, "records": out.meter.records })),
        Format::Csv => {
            print!("{}", out.meter.to_csv());
            let s = &summary;
            eprintln!(
                "{}: {} steps x {} lanes, decode {:.1} bytes/step, {:.3} experts/layer/step, simulated transfer {:.3e} s/step, measured compute {:.3e} s/step, transfer share {:.1}%",
                s.meter.runtime,
                s.meter.steps,
                s.meter.lanes,
                s.meter.decode_bytes_per_step,
                s.meter.decode_experts_loaded_per_layer,
                s.meter.decode_seconds_per_step,
                s.compute_seconds_per_step,
                100.0 * s.transfer_share
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct QuantizeSummary {
    input: LutSummary,
    output: LutSummary,
    ratio: f64,
}

pub fn quantize(args: QuantizeArgs) -> CliResult<()> {
    let src = open_lut(&args.lut).at(&args.lut)?;
    let block = block_size_for(args.dtype, args.block_size)?;
    if src.header().dtype.is_quantized() {
        eprintln!(
            "mole: warning: source is already {}; re-encoding compounds quantization error",
            src.header().dtype.name()
        );
    }
    let tables = src.read_tables().at(&args.lut)?;
    let header = write_lut(&tables, &args.out, args.dtype, block).at(&args.out)?;
    let mut m = RunManifest::new("quantize");
    m.input("lut", &args.lut)?;
    m.output("lut", &args.out)?;
    m.write(&sidecar(&args.out))?;

    let input = lut_summary(&args.lut, *src.header())?;
    let output = lut_summary(&args.out, header)?;
    let ratio = output.payload_bytes as f64 / input.payload_bytes as f64;
    match args.format {
        Format::Json => print_json(&QuantizeSummary { input, output, ratio }),
        Format::Csv => {
            print_lut_summary(&output, Format::Csv);
            eprintln!(
                "payload {} -> {} bytes (ratio {ratio:.4} of the {} input)",
                input.payload_bytes,
                output.payload_bytes,
                input.header.dtype.name()
            );
        }
    }
    Ok(())
}

pub fn report(args: ReportArgs) -> CliResult<()> {
    let kind = args.kind.unwrap_or(if args.config.is_some() {
        ReportKind::Table
    } else {
        ReportKind::PublishedCheck
    });
    let configs = || -> CliResult<Vec<(String, ModelConfig)>> {
        match &args.config {
            Some(p) => load_model_list(p),
            None => Ok(table_presets().into_iter().map(|p| (p.label(), p.config)).collect()),
        }
    };
    match kind {
        ReportKind::PublishedCheck => {
            if args.config.is_some() {
                return Err(CliError::usage(
                    "config: paper-check compares the published configurations; use `report table --config` for custom ones",
                ));
            }
            let cells = published_check();
            match args.format {
                Format::Json => print_json(&cells),
                Format::Csv => print!("{}", check_csv(&cells)),
            }
            let count = |v| cells.iter().filter(|c| c.verdict == v).count();
            let (pass, warn, fail) = (count(Verdict::Pass), count(Verdict::Warn), count(Verdict::Fail));
            eprintln!("{pass} PASS, {warn} WARN, {fail} FAIL");
            if fail > 0 {
                return Err(CliError::Failed(format!(
                    "{fail} cells disagree with the published values"
                )));
            }
        }
        ReportKind::Table => {
            let rows = table_report(&configs()?);
            match args.format {
                Format::Json => print_json(&rows),
                Format::Csv => print!("{}", cost_csv(&rows)),
            }
        }
        ReportKind::Loads => {
            if args.trials == 0 || args.top_k == 0 {
                return Err(CliError::usage("trials/top-k: must be positive"));
            }
            let mut rows = Vec::new();
            for &n in &args.experts {
                if args.top_k > n {
                    return Err(CliError::usage(format!("top-k: {} exceeds {n} experts", args.top_k)));
                }
                for &b in &args.batch {
                    if b == 0 {
                        return Err(CliError::usage("batch: must be positive"));
                    }
                    let cap = cache_capacity(args.top_k, b);
                    rows.push(expected_expert_loads(n, args.top_k, b, cap, args.trials, args.seed));
                }
            }
            match args.format {
                Format::Json => print_json(&rows),
                Format::Csv => {
                    println!("n_experts,top_k,batch,capacity,trials,monte_carlo,std_error,closed_form");
                    for r in &rows {
                        println!(
                            "{},{},{},{},{},{:.4},{:.4},{:.4}",
                            r.n_experts,
                            r.top_k,
                            r.batch,
                            r.capacity,
                            r.trials,
                            r.monte_carlo,
                            r.std_error,
                            r.closed_form
                        );
                    }
                }
            }
        }
        ReportKind::Latency => {
            let bw = BandwidthModel::from_gbps(args.bandwidth_gbps).map_err(|_| {
                CliError::usage(format!(
                    "bandwidth-gbps: {} is not a positive finite rate",
                    args.bandwidth_gbps
                ))
            })?;
            let list = match &args.config {
                Some(p) => load_model_list(p)?,
                None => ["410M MoE-10E", "410M MoLE-4E"]
                    .iter()
                    .map(|l| {
                        (
                            l.to_string(),
                            mole::model::find_preset(l).expect("preset exists").config,
                        )
                    })
                    .collect(),
            };
            let rows = latency_report(&list, &bw, &args.batch);
            match args.format {
                Format::Json => print_json(&rows),
                Format::Csv => print!("{}", latency_csv(&rows)),
            }
        }
    }
    Ok(())
}
