use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use daam::daam::{daam_fc, daam_knn, AttentionFlow, AttentionMap, MapOptions};
use daam::eval::{evaluate_image, format_report, parse_metrics, BBox, ImageEval, Metric};
use daam::memory_bank::MemoryBank;
use daam::model_io::{load_and_preprocess, load_bank, load_model, load_rgb, resize_rgb, IMAGENET};
use daam::numerics::{bilinear_resize, softmax_in_place};
use daam::render::{RgbImage, hconcat, render_flow, render_overlay, save_png, FlowNorm, DEFAULT_ALPHA};
use daam::sanity::{randomize_cascading, sanity_score, RandomizationPlan};
use daam::vit::{ForwardTrace, JacobianMode, ViTConfig, VisionTransformer};
use daam::{Error, Tensor};

#[derive(Parser)]
#[command(name = "daam", version, about = "Dynamic accumulated attention maps for ViT models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain one image with the accumulated map up to a block.
    Explain(ExplainArgs),
    /// Render the whole attention flow, one frame per block.
    Flow(FlowArgs),
    /// Explain a memory-bank prediction and render its flow.
    KnnExplain(KnnExplainArgs),
    /// Localization and faithfulness metrics over a directory of images.
    Eval(EvalArgs),
    /// Compare maps before and after cascading weight randomization.
    Sanity(SanityArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Weight archive.
    #[arg(long)]
    weights: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Jacobian mode: full or residual.
    #[arg(long, default_value = "full")]
    mode: JacobianMode,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    image: PathBuf,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    class_index: Option<usize>,
    /// Accumulate blocks 1..=BLOCK; defaults to every block.
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BankArgs {
    /// Memory-bank archive.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Neighbours used for the vote and the importance weight.
    #[arg(long, default_value_t = 20)]
    k: usize,
}

#[derive(Args)]
struct FlowArgs {
    #[command(flatten)]
    explain: ExplainArgs,
    /// Scale every frame by the final frame's maximum.
    #[arg(long)]
    global_norm: bool,
    /// Explain through the memory bank instead of the classifier head.
    #[arg(long)]
    knn: bool,
    #[command(flatten)]
    bank: BankArgs,
}

#[derive(Args)]
struct KnnExplainArgs {
    #[command(flatten)]
    explain: ExplainArgs,
    #[arg(long)]
    global_norm: bool,
    #[command(flatten)]
    bank: BankArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    images: PathBuf,
    /// Directory of `<stem>.txt` box files; needed for iou.
    #[arg(long)]
    bboxes: Option<PathBuf>,
    #[arg(long, default_value = "iou,ins,del,pos,neg,adp,pic")]
    metrics: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SanityArgs {
    #[command(flatten)]
    explain: ExplainArgs,
    /// First block (1-based) whose attention weights are re-drawn.
    #[arg(long)]
    randomize_from: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. }
            | Error::Archive(_)
            | Error::Image { .. }
            | Error::UnsupportedFormat(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Explain(a) => cmd_explain(&a),
        Command::Flow(a) => cmd_flow(&a),
        Command::KnnExplain(a) => cmd_knn_explain(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sanity(a) => cmd_sanity(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(args: &ModelArgs) -> CliResult<VisionTransformer> {
    let cfg = ViTConfig::from_json_file(&args.config)?;
    Ok(load_model(&args.weights, cfg)?)
}

struct Prepared {
    model: VisionTransformer,
    trace: ForwardTrace,
    display: RgbImage,
}

fn prepare(args: &ExplainArgs) -> CliResult<Prepared> {
    let model = load(&args.model)?;
    let cfg = model.config();
    if let Some(b) = args.block {
        if b == 0 || b > cfg.depth {
            return Err(usage(format!("--block {b} outside 1..={}", cfg.depth)));
        }
    }
    let input = load_and_preprocess(&args.image, cfg)?;
    let display = resize_rgb(&load_rgb(&args.image)?, cfg.image_size)?;
    let trace = model.forward(&input)?;
    Ok(Prepared {
        model,
        trace,
        display,
    })
}

/// Picks the class to explain and prints the prediction.
fn classifier_target(p: &Prepared, class_index: Option<usize>) -> CliResult<usize> {
    let cfg = p.model.config();
    if !cfg.has_head() {
        return Err(usage("model has no classification head; use the memory-bank path"));
    }
    if let Some(c) = class_index {
        if c >= cfg.num_classes {
            return Err(usage(format!(
                "--class-index {c} out of range for {} classes",
                cfg.num_classes
            )));
        }
    }
    let logits = p.trace.logits.as_ref().expect("head present").data().to_vec();
    let predicted = p.trace.predicted_class().expect("head present");
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    println!("predicted class {predicted} score {:.6}", probs[predicted]);
    let target = class_index.unwrap_or(predicted);
    if target != predicted {
        println!("explaining class {target} score {:.6}", probs[target]);
    }
    Ok(target)
}

fn open_bank(bank: &BankArgs, dim: usize) -> CliResult<MemoryBank> {
    let path = bank
        .bank
        .as_ref()
        .ok_or_else(|| usage("--bank is required for memory-bank explanations"))?;
    let b = load_bank(path)?;
    if b.dim() != dim {
        return Err(Error::Shape {
            op: "memory bank",
            expected: vec![b.len(), dim],
            actual: b.features().shape().to_vec(),
        }
        .into());
    }
    if bank.k == 0 || bank.k > b.len() {
        return Err(usage(format!("--k {} outside 1..={}", bank.k, b.len())));
    }
    Ok(b)
}

fn knn_flow(p: &Prepared, bank: &BankArgs, mode: JacobianMode) -> CliResult<AttentionFlow> {
    let b = open_bank(bank, p.model.config().dim)?;
    let pred = b.knn_predict(p.trace.class_token.data(), bank.k)?;
    println!("predicted label {}", pred.label);
    Ok(daam_knn(&p.model, &p.trace, &b, bank.k, mode, MapOptions::default())?)
}

fn write_map(display: &RgbImage, map: &AttentionMap, out: &Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let path = out.join(format!("block_{:02}.png", map.block));
    save_png(&render_overlay(display, map, DEFAULT_ALPHA)?, &path)?;
    Ok(path)
}

fn cmd_explain(a: &ExplainArgs) -> CliResult {
    let p = prepare(a)?;
    let class = classifier_target(&p, a.class_index)?;
    let flow = daam_fc(&p.model, &p.trace, class, a.model.mode, MapOptions::default())?;
    let map = flow.up_to(a.block.unwrap_or(flow.depth()))?;
    let path = write_map(&p.display, map, &a.out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_flow(display: &RgbImage, flow: &AttentionFlow, out: &Path, global: bool) -> CliResult {
    let norm = if global {
        FlowNorm::Global
    } else {
        FlowNorm::PerFrame
    };
    let paths = render_flow(display, flow, out, norm)?;
    println!("wrote {} files to {}", paths.len(), out.display());
    Ok(())
}

fn cmd_flow(a: &FlowArgs) -> CliResult {
    let p = prepare(&a.explain)?;
    let mode = a.explain.model.mode;
    let flow = if a.knn {
        knn_flow(&p, &a.bank, mode)?
    } else {
        let class = classifier_target(&p, a.explain.class_index)?;
        daam_fc(&p.model, &p.trace, class, mode, MapOptions::default())?
    };
    write_flow(&p.display, &flow, &a.explain.out, a.global_norm)
}

fn cmd_knn_explain(a: &KnnExplainArgs) -> CliResult {
    let p = prepare(&a.explain)?;
    let flow = knn_flow(&p, &a.bank, a.explain.model.mode)?;
    write_flow(&p.display, &flow, &a.explain.out, a.global_norm)
}

fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no PNG or PPM images in {}", dir.display())));
    }
    Ok(paths)
}

fn read_bbox(dir: &Path, image: &Path) -> CliResult<BBox> {
    let stem = image.file_stem().unwrap_or_default();
    let path = dir.join(stem).with_extension("txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(BBox::parse_sidecar(&text)?)
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let metrics = parse_metrics(&a.metrics).map_err(|e| usage(e.to_string()))?;
    let needs_boxes = metrics.contains(&Metric::Iou);
    if needs_boxes && a.bboxes.is_none() {
        return Err(usage("--bboxes is required for the iou metric"));
    }
    let model = load(&a.model)?;
    let cfg = model.config().clone();
    if !cfg.has_head() {
        return Err(usage("evaluation needs a classification head"));
    }
    let images = list_images(&a.images)?;
    let mut rows = Vec::with_capacity(images.len());
    for path in &images {
        let input = load_and_preprocess(path, &cfg)?;
        let trace = model.forward(&input)?;
        let target = trace.predicted_class().expect("head present");
        let flow = daam_fc(&model, &trace, target, a.model.mode, MapOptions::default())?;
        let saliency = bilinear_resize(&flow.final_map().grid, cfg.image_size, cfg.image_size)?;
        let ground_truth = match (&a.bboxes, needs_boxes) {
            (Some(dir), true) => {
                let b = read_bbox(dir, path)?;
                if !b.fits(cfg.image_size, cfg.image_size) {
                    return Err(Error::InvalidArgument(format!(
                        "box for {} exceeds the {}px frame",
                        path.display(),
                        cfg.image_size
                    ))
                    .into());
                }
                Some(b)
            }
            _ => None,
        };
        let values = evaluate_image(
            &ImageEval {
                model: &model,
                image: &input,
                saliency: &saliency,
                target,
                ground_truth,
                norm: &IMAGENET,
            },
            &metrics,
        )?;
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        rows.push((name, values));
    }
    let report = format_report(&metrics, &rows);
    std::fs::write(&a.out, report).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    println!("evaluated {} images, wrote {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_sanity(a: &SanityArgs) -> CliResult {
    let p = prepare(&a.explain)?;
    let depth = p.model.config().depth;
    if a.randomize_from == 0 || a.randomize_from > depth {
        return Err(usage(format!(
            "--randomize-from {} outside 1..={depth}",
            a.randomize_from
        )));
    }
    let class = classifier_target(&p, a.explain.class_index)?;
    let mode = a.explain.model.mode;
    let until = a.explain.block.unwrap_or(depth);
    let original = daam_fc(&p.model, &p.trace, class, mode, MapOptions::default())?;

    let plan = RandomizationPlan {
        from_block: a.randomize_from,
        seed: a.seed,
    };
    let weights = randomize_cascading(p.model.weights(), plan)?;
    let randomized_model = VisionTransformer::new(p.model.config().clone(), weights)?;
    let input: Tensor = load_and_preprocess(&a.explain.image, p.model.config())?;
    let trace = randomized_model.forward(&input)?;
    let randomized = daam_fc(&randomized_model, &trace, class, mode, MapOptions::default())?;

    let (m0, m1) = (original.up_to(until)?, randomized.up_to(until)?);
    let score = sanity_score(m0, m1)?;
    let out = &a.explain.out;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let pair = hconcat(&[
        render_overlay(&p.display, m0, DEFAULT_ALPHA)?,
        render_overlay(&p.display, m1, DEFAULT_ALPHA)?,
    ])?;
    let path = out.join("sanity.png");
    save_png(&pair, &path)?;
    println!("spearman {score:.6}");
    println!("wrote {}", path.display());
    Ok(())
}
