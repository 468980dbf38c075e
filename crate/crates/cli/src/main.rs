//! `scot`: command-line front end for scot-core.
//!
//! Exit status is 0 on success, 1 on validation failure and 2 on I/O or
//! transport failure. Machine-readable output goes to stdout, diagnostics to
//! stderr.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scot_core::codec;
use scot_core::constraints::{self, Categories, Layout};
use scot_core::dataset::{self, DatasetError};
use scot_core::flowmatch::{self as fm, BoxSampler, ConditionEmbedder, FlowError, ModelShape, TrainConfig};
use scot_core::metrics;
use scot_core::mllm_client::{ClientConfig, ClientError, PlannerClient};
use scot_core::planner::{self, EntitySpec, LayoutPlan, SceneSpec, SizeClass, StepSchedule};
use scot_core::render::{self, RenderStyle};
use scot_core::InterleavedInstruction;
use serde::Serialize;

const DEFAULT_MAX_ITERS: usize = 200;

#[derive(Parser)]
#[command(name = "scot", version, about = "Layout planning, grounded instructions and layout metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Records (JSONL) to interleaved instructions, one per line.
    Encode {
        /// Record file, or `-` for stdin.
        #[arg(default_value = "-")]
        input: PathBuf,
    },
    /// Interleaved instructions, one per line, to records (JSONL).
    Decode {
        /// Instruction file, or `-` for stdin.
        #[arg(default_value = "-")]
        input: PathBuf,
        /// Record ids are `<prefix>-<line>`.
        #[arg(long, default_value = "decoded")]
        id_prefix: String,
        #[arg(long, default_value = "decoded")]
        source: String,
    },
    /// Plan a layout and print it in the planner JSON schema.
    Plan(PlanArgs),
    /// Report constraint violations of a layout; exits 1 if any.
    Check {
        #[command(flatten)]
        layout: LayoutArgs,
    },
    /// Repair a layout against constraints and print the plan.
    Repair {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
    },
    /// SR, I-SR and mIoU of predicted records against reference records.
    Eval {
        references: PathBuf,
        predictions: PathBuf,
        #[arg(long, default_value_t = metrics::DEFAULT_IOU_THRESHOLD)]
        iou_threshold: f64,
        /// Include per-sample matches in the report.
        #[arg(long)]
        per_sample: bool,
    },
    /// Draw planner output or a layout plan as SVG.
    Render {
        /// Planner JSON or a plan printed by `repair`.
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Scene spec used to label a layout plan with phrases.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        canvas_px: u32,
    },
    #[command(subcommand)]
    Dataset(DatasetCommand),
    #[command(subcommand)]
    Toy(ToyCommand),
}

#[derive(Args)]
struct PlanArgs {
    /// Scene spec (JSON), or the prompt text with `--mllm`.
    input: PathBuf,
    /// Ask a chat-completion model instead of the built-in layout search.
    #[arg(long)]
    mllm: bool,
    /// Client config (JSON) for `--mllm`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Endpoint base URL for `--mllm` when no config file is given.
    #[arg(long)]
    base_url: Option<String>,
    /// Model name for `--mllm` when no config file is given.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    /// Print the interleaved instruction instead of planner JSON.
    #[arg(long)]
    instruction: bool,
}

#[derive(Args)]
struct LayoutArgs {
    /// JSON object mapping entity id to box, or a plan printed by `repair`.
    layout: PathBuf,
    /// Constraints, one JSON object per line.
    constraints: PathBuf,
    /// JSON object mapping entity id to category; ids are their own
    /// category otherwise.
    #[arg(long)]
    categories: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate synthetic records.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        max_entities: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Summary statistics of a record file.
    Stats { input: PathBuf },
    /// Planner JSON files to records; each record id is the file stem.
    Convert {
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "planner")]
        source: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ToyCommand {
    /// Train a velocity model on the boxes of one or more instructions.
    Train {
        /// Interleaved instructions, one per line.
        instructions: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Loss curve (`step loss` per line).
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-2)]
        learning_rate: f64,
        /// Init, data and noise seeds are `seed`, `seed+1`, `seed+2`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        embed_seed: u64,
        #[arg(long, default_value_t = 128)]
        width: usize,
    },
    /// Sample points for an instruction from a trained checkpoint.
    Sample {
        checkpoint: PathBuf,
        /// Interleaved instruction text.
        instruction: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = fm::DEFAULT_SAMPLE_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare backprop gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        params: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 128)]
        width: usize,
    },
}

// ---------------------------------------------------------------------------
// Failures

struct Failure {
    code: u8,
    message: String,
}

fn invalid(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

fn io_failure(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

impl From<FlowError> for Failure {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Io(_) => io_failure(e),
            _ => invalid(e),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Transport { .. } => io_failure(e),
            _ => invalid(e),
        }
    }
}

type Result<T, E = Failure> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// I/O helpers

fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| io_failure(format!("stdin: {e}")))?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| io_failure(format!("{}: {e}", path.display())))
}

fn in_file(path: &Path, e: impl std::fmt::Display) -> String {
    format!("{}: {e}", path.display())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_input(path)?).map_err(|e| invalid(in_file(path, e)))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| io_failure(in_file(p, e))),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| io_failure(format!("stdout: {e}")))
        }
    }
}

fn emit_json(value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    emit(None, &text)
}

fn load_records(path: &Path) -> Result<Vec<dataset::GroundedRecord>> {
    let text = read_input(path)?;
    dataset::read_records(text.as_bytes()).map_err(|e| match e {
        DatasetError::Io(_) => io_failure(in_file(path, e)),
        _ => invalid(in_file(path, e)),
    })
}

fn records_text(records: &[dataset::GroundedRecord]) -> String {
    let mut buf = Vec::new();
    dataset::write_records(&mut buf, records).expect("in-memory write");
    String::from_utf8(buf).expect("records are UTF-8")
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

// ---------------------------------------------------------------------------
// Commands

fn encode(input: &Path) -> Result<()> {
    let mut out = String::new();
    for r in load_records(input)? {
        let inst = dataset::record_to_instruction(&r).map_err(|e| invalid(format!("record {}: {e}", r.id)))?;
        out.push_str(&inst.serialize());
        out.push('\n');
    }
    emit(None, &out)
}

fn decode(input: &Path, id_prefix: &str, source: &str) -> Result<()> {
    let text = read_input(input)?;
    let mut records = Vec::new();
    for (line, l) in non_blank_lines(&text) {
        let inst = codec::parse(l).map_err(|e| invalid(format!("line {line}: {e}")))?;
        records.push(dataset::record_from_instruction(&format!("{id_prefix}-{line}"), source, &inst));
    }
    emit(None, &records_text(&records))
}

fn plan_cmd(args: &PlanArgs) -> Result<()> {
    let (out, satisfied) = if args.mllm {
        let config = match (&args.config, &args.base_url, &args.model) {
            (Some(p), _, _) => read_json::<ClientConfig>(p)?,
            (None, Some(url), Some(model)) => ClientConfig::new(url, model),
            _ => return Err(invalid("--mllm needs --config or both --base-url and --model")),
        };
        let prompt = read_input(&args.input)?;
        let client = PlannerClient::new(config)?;
        (client.request_plan(prompt.trim())?, true)
    } else {
        let spec: SceneSpec = read_json(&args.input)?;
        let plan = planner::plan(&spec, args.seed, args.max_iters).map_err(invalid)?;
        let satisfied = plan.is_satisfied();
        if !satisfied {
            eprintln!(
                "warning: {} constraint violations remain after {} passes",
                plan.residual.len(),
                plan.iterations
            );
            for v in &plan.residual {
                eprintln!("  [{}] {}", v.index, v.message);
            }
        }
        (planner::plan_to_output(&spec, &plan).map_err(invalid)?, satisfied)
    };
    if args.instruction {
        let inst = planner::to_instruction(&out).map_err(invalid)?;
        emit(None, &format!("{}\n", inst.serialize()))?;
    } else {
        emit_json(&out)?;
    }
    if satisfied {
        Ok(())
    } else {
        Err(invalid("layout does not satisfy every constraint"))
    }
}

fn read_layout(path: &Path) -> Result<Layout> {
    let value: serde_json::Value = read_json(path)?;
    let boxes = match value.get("boxes") {
        Some(b) => b.clone(),
        None => value,
    };
    serde_json::from_value(boxes).map_err(|e| invalid(in_file(path, e)))
}

struct LayoutInput {
    layout: Layout,
    spec: SceneSpec,
}

/// A spec whose entities are the layout's ids, in id order.
fn layout_input(args: &LayoutArgs) -> Result<LayoutInput> {
    let layout = read_layout(&args.layout)?;
    let constraints = dataset::load_constraints(&args.constraints).map_err(|e| match e {
        DatasetError::Io(_) => io_failure(in_file(&args.constraints, e)),
        _ => invalid(in_file(&args.constraints, e)),
    })?;
    let categories: Categories = match &args.categories {
        Some(p) => read_json(p)?,
        None => Categories::new(),
    };
    let entities = layout
        .keys()
        .map(|id| EntitySpec {
            category: categories.get(id).cloned(),
            ..EntitySpec::new(id, id, SizeClass::default())
        })
        .collect();
    let spec = SceneSpec {
        entities,
        constraints,
        tail: None,
    };
    Ok(LayoutInput { layout, spec })
}

fn check_cmd(args: &LayoutArgs) -> Result<()> {
    let LayoutInput { layout, spec } = layout_input(args)?;
    let violations = constraints::check(&layout, &spec.categories(), &spec.constraints).map_err(invalid)?;
    emit_json(&violations)?;
    if violations.is_empty() {
        Ok(())
    } else {
        Err(invalid(format!("{} constraint violations", violations.len())))
    }
}

fn repair_cmd(args: &LayoutArgs, max_iters: usize) -> Result<()> {
    let LayoutInput { layout, spec } = layout_input(args)?;
    let plan = planner::repair(&layout, &spec, max_iters, StepSchedule::default()).map_err(invalid)?;
    emit_json(&plan)?;
    if plan.is_satisfied() {
        Ok(())
    } else {
        Err(invalid(format!("{} violations remain after {} passes", plan.residual.len(), plan.iterations)))
    }
}

#[derive(Serialize)]
struct Summary {
    iou_threshold: f64,
    sr: f64,
    isr: f64,
    miou: f64,
    samples: usize,
}

fn eval_cmd(references: &Path, predictions: &Path, iou_threshold: f64, per_sample: bool) -> Result<()> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(invalid("--iou-threshold must lie in [0, 1]"));
    }
    let refs = load_records(references)?;
    let preds = load_records(predictions)?;
    let samples = metrics::samples_from_records(&refs, &preds);
    let report = metrics::evaluate(&samples, iou_threshold).map_err(invalid)?;
    if per_sample {
        emit_json(&report)
    } else {
        emit_json(&Summary {
            iou_threshold: report.iou_threshold,
            sr: report.sr,
            isr: report.isr,
            miou: report.miou,
            samples: report.samples.len(),
        })
    }
}

fn render_cmd(input: &Path, output: Option<&Path>, spec: Option<&Path>, canvas_px: u32) -> Result<()> {
    if canvas_px == 0 {
        return Err(invalid("--canvas-px must be positive"));
    }
    let text = read_input(input)?;
    let items = match planner::parse_planner_output(&text) {
        Ok(out) => render::items_from_output(&out),
        Err(planner_err) => {
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| invalid(in_file(input, e)))?;
            if value.get("objects").is_some() {
                return Err(invalid(in_file(input, planner_err)));
            }
            let plan: LayoutPlan = match value.get("boxes") {
                Some(_) => serde_json::from_value(value).map_err(|e| invalid(in_file(input, e)))?,
                None => LayoutPlan {
                    boxes: serde_json::from_value(value).map_err(|e| invalid(in_file(input, e)))?,
                    iterations: 0,
                    residual: Vec::new(),
                    trace: Vec::new(),
                },
            };
            let spec: Option<SceneSpec> = spec.map(read_json).transpose()?;
            render::items_from_plan(&plan, spec.as_ref())
        }
    };
    let style = RenderStyle {
        canvas_px,
        ..RenderStyle::default()
    };
    emit(output, &render::render_svg(&items, &style))
}

fn dataset_cmd(cmd: &DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Synth {
            seed,
            n,
            max_entities,
            output,
        } => {
            if *max_entities == 0 {
                return Err(invalid("--max-entities must be at least 1"));
            }
            emit(output.as_deref(), &records_text(&dataset::synth_generate(*seed, *n, *max_entities)))
        }
        DatasetCommand::Stats { input } => emit_json(&dataset::stats(&load_records(input)?)),
        DatasetCommand::Convert { inputs, source, output } => {
            let mut records = Vec::with_capacity(inputs.len());
            for p in inputs {
                let out = planner::parse_planner_output(&read_input(p)?).map_err(|e| invalid(in_file(p, e)))?;
                let inst = planner::to_instruction(&out).map_err(|e| invalid(in_file(p, e)))?;
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                records.push(dataset::record_from_instruction(&id, source, &inst));
            }
            emit(output.as_deref(), &records_text(&records))
        }
    }
}

fn read_instructions(path: &Path) -> Result<Vec<InterleavedInstruction>> {
    let text = read_input(path)?;
    let insts = non_blank_lines(&text)
        .map(|(line, l)| codec::parse(l).map_err(|e| invalid(format!("{}: line {line}: {e}", path.display()))))
        .collect::<Result<Vec<_>>>()?;
    if insts.is_empty() || insts.iter().any(|i| i.entities().is_empty()) {
        return Err(invalid(format!("{}: need at least one instruction, each with a box", path.display())));
    }
    Ok(insts)
}

#[derive(Serialize)]
struct Samples {
    in_box_fraction: f64,
    samples: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct GradCheck {
    max_relative_error: f64,
    tolerance: f64,
    params_checked: usize,
}

fn toy_cmd(cmd: &ToyCommand) -> Result<()> {
    match cmd {
        ToyCommand::Train {
            instructions,
            output,
            curve,
            steps,
            batch_size,
            learning_rate,
            seed,
            embed_seed,
            width,
        } => {
            if *steps == 0 || *batch_size == 0 || *width == 0 {
                return Err(invalid("--steps, --batch-size and --width must be positive"));
            }
            let insts = read_instructions(instructions)?;
            let embedder = ConditionEmbedder::new(*embed_seed, fm::DEFAULT_EMBED_DIM);
            let sampler = BoxSampler::from_instructions(&embedder, &insts);
            let config = TrainConfig {
                steps: *steps,
                batch_size: *batch_size,
                learning_rate: *learning_rate,
                init_seed: *seed,
                data_seed: seed.wrapping_add(1),
                noise_seed: seed.wrapping_add(2),
            };
            let shape = ModelShape {
                width: *width,
                ..ModelShape::default()
            };
            let (model, losses) = fm::train(shape, &config, &sampler);
            fm::save_checkpoint(output, &fm::checkpoint_bytes(&model, Some(&config), Some(*embed_seed)))?;
            if let Some(p) = curve {
                let f = fs::File::create(p).map_err(|e| io_failure(in_file(p, e)))?;
                fm::write_loss_curve(io::BufWriter::new(f), &losses).map_err(|e| io_failure(in_file(p, e)))?;
            }
            let window = losses.len().min(100);
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            eprintln!(
                "trained {steps} steps: first-{window} mean loss {:.4}, last-{window} mean loss {:.4}",
                mean(&losses[..window]),
                mean(&losses[losses.len() - window..])
            );
            Ok(())
        }
        ToyCommand::Sample {
            checkpoint,
            instruction,
            n,
            steps,
            seed,
        } => {
            if *steps == 0 {
                return Err(invalid("--steps must be at least 1"));
            }
            let (model, header) = fm::load_checkpoint(checkpoint)?;
            let inst = codec::parse(instruction).map_err(invalid)?;
            let embedder = ConditionEmbedder::new(header.embed_seed.unwrap_or(0), header.shape.m);
            let samples = fm::sample(&model, &embedder.embed(&inst), header.shape.d, *n, *steps, *seed);
            let in_box_fraction = fm::in_box_fraction(&samples, &inst.boxes(), fm::DEFAULT_IN_BOX_TOLERANCE);
            emit_json(&Samples {
                in_box_fraction,
                samples,
            })
        }
        ToyCommand::Gradcheck {
            seed,
            params,
            h,
            tolerance,
            width,
        } => {
            if *params == 0 || *width == 0 || *h <= 0.0 {
                return Err(invalid("--params, --width and --h must be positive"));
            }
            let embedder = ConditionEmbedder::new(*seed, fm::DEFAULT_EMBED_DIM);
            let inst = codec::interleave("a red ball", &[("red ball", scot_core::BBox::new(200, 200, 500, 500).expect("valid box"))])
                .expect("phrase is in caption");
            let sampler = BoxSampler::from_instructions(&embedder, &[inst]);
            let shape = ModelShape {
                width: *width,
                ..ModelShape::default()
            };
            let model = fm::VelocityModel::new(shape, *seed);
            let batch = sampler.seeded_batch(32, *seed);
            let err = fm::gradient_check(&model, &batch, seed.wrapping_add(1), *params, *h, seed.wrapping_add(2));
            emit_json(&GradCheck {
                max_relative_error: err,
                tolerance: *tolerance,
                params_checked: (*params).min(shape.param_count()),
            })?;
            if err <= *tolerance {
                Ok(())
            } else {
                Err(invalid(format!("relative error {err:.3e} exceeds {tolerance:e}")))
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode { input } => encode(&input),
        Command::Decode {
            input,
            id_prefix,
            source,
        } => decode(&input, &id_prefix, &source),
        Command::Plan(args) => plan_cmd(&args),
        Command::Check { layout } => check_cmd(&layout),
        Command::Repair { layout, max_iters } => repair_cmd(&layout, max_iters),
        Command::Eval {
            references,
            predictions,
            iou_threshold,
            per_sample,
        } => eval_cmd(&references, &predictions, iou_threshold, per_sample),
        Command::Render {
            input,
            output,
            spec,
            canvas_px,
        } => render_cmd(&input, output.as_deref(), spec.as_deref(), canvas_px),
        Command::Dataset(cmd) => dataset_cmd(&cmd),
        Command::Toy(cmd) => toy_cmd(&cmd),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
