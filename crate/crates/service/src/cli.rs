//! The `pavescan` command line.
//!
//! Every subcommand accepts `--config <file>` with `key = value` lines
//! named like its long options; explicit flags override the file.
//! Exit codes: 0 success, 1 user error, 2 internal error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use pavescan::data::{generate_synthetic, kmeans_anchors, DatasetManifest, Split, SyntheticConfig};
use pavescan::evaluation::{ApMode, EvalOptions};
use pavescan::gradcam::render;
use pavescan::training::{evaluate_samples, fit, load_samples, OptimizerKind, TrainConfig};
use pavescan::{Checkpoint, Detector, NetworkConfig};

use crate::config::ConfigFile;
use crate::error::{Result, ServiceError};
use crate::inference::{detect_image, frames_response, gradcam_image, DetectParams, Frame, GradcamParams};
use crate::model::Model;
use crate::server::{self, AppState, ServerConfig};

#[derive(Parser, Debug)]
#[command(name = "pavescan", version, about = "Pavement distress detection: data, training, evaluation and inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic labelled dataset with a train/val split.
    GenData(GenDataArgs),
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Detect distresses in images; prints JSON.
    Detect(DetectArgs),
    /// Grad-CAM overlay for one detection.
    Gradcam(GradcamArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub num_images: usize,
    #[arg(long, default_value_t = 160)]
    pub image_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 3)]
    pub max_objects: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory holding `manifest.txt`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub warmup_epochs: f64,
    #[arg(long, default_value_t = 0.5)]
    pub flip_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Network input size; defaults to the dataset image size.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Channel width multiplier.
    #[arg(long, default_value_t = 0.5)]
    pub width: f64,
    /// Channel reduction ratio of the attention MLP; must divide every
    /// attention block's channel count.
    #[arg(long)]
    pub cbam_reduction: Option<usize>,
    /// Attention in the backbone C3 blocks.
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    pub cbam: bool,
    /// Fit anchors to the training boxes with k-means.
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    pub kmeans_anchors: bool,
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ApModeArg {
    All,
    #[value(name = "101")]
    Point101,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.01)]
    pub conf: f64,
    #[arg(long, default_value_t = 0.6)]
    pub nms: f64,
    /// IoU needed for a true positive.
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, value_enum, default_value_t = ApModeArg::All)]
    pub ap_mode: ApModeArg,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct DetectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = DetectParams::default().conf)]
    pub conf: f64,
    #[arg(long, default_value_t = DetectParams::default().nms_iou)]
    pub nms: f64,
    /// Treat the images as an ordered frame sequence; failed frames become
    /// error records instead of aborting.
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    pub frames: bool,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GradcamArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    pub image: PathBuf,
    /// Index of the detection to explain (default: the top one).
    #[arg(long)]
    pub detection: Option<usize>,
    /// Layer name (default: the last backbone block).
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = DetectParams::default().conf)]
    pub conf: f64,
    #[arg(long, default_value_t = DetectParams::default().nms_iou)]
    pub nms: f64,
    /// Overlay PNG path.
    #[arg(long)]
    pub out: PathBuf,
    /// Colormapped heatmap PNG path.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Response JSON path.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = server::DEFAULT_MAX_UPLOAD_BYTES)]
    pub max_upload_bytes: usize,
    #[arg(long, default_value_t = server::DEFAULT_MAX_CONCURRENT)]
    pub max_concurrent: usize,
    /// Static client assets served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

pub fn main() -> i32 {
    run(std::env::args_os().collect())
}

/// Parses `args` (program name first) and runs the command; returns the
/// exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 1 };
        }
    };
    match std::panic::catch_unwind(|| execute(cli.command)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
        Err(_) => 2,
    }
}

/// Splices the entries of a `--config` file in right after the subcommand,
/// so flags given on the command line take precedence.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate().skip(1) {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
            break;
        }
        if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            break;
        }
    }
    let Some(path) = path else { return Ok(args) };
    let cfg = ConfigFile::load(&path)?;
    let mut out: Vec<OsString> = args[..2.min(args.len())].to_vec();
    out.extend(cfg.to_args().into_iter().map(OsString::from));
    out.extend(args.into_iter().skip(2));
    Ok(out)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Detect(a) => detect(a),
        Command::Gradcam(a) => gradcam(a),
        Command::Serve(a) => serve(a),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::BadRequest(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serialisable");
    s.push(b'\n');
    s
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_images: a.num_images,
        seed: a.seed,
        train_ratio: a.train_ratio,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        ..SyntheticConfig::for_size(a.image_size)
    };
    let m = generate_synthetic(&cfg, &a.out)?;
    let n_train = m.entries.iter().filter(|e| e.split == Split::Train).count();
    println!(
        "wrote {} images to {} ({} train, {} val)",
        m.entries.len(),
        a.out.display(),
        n_train,
        m.entries.len() - n_train
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.data)?;
    let train_m = manifest.subset(Split::Train);
    let val_m = manifest.subset(Split::Val);
    if train_m.entries.is_empty() {
        return Err(ServiceError::BadRequest(format!("{}: no training images", a.data.display())));
    }
    let size = a
        .image_size
        .unwrap_or_else(|| train_m.entries[0].width.max(train_m.entries[0].height));
    let mut net = NetworkConfig {
        input_size: size,
        num_classes: manifest.classes.len(),
        width_multiple: a.width,
        ..NetworkConfig::toy()
    };
    if !a.cbam {
        net.cbam_sites.clear();
    }
    if let Some(r) = a.cbam_reduction {
        net.cbam_reduction = r;
    }
    let train_s = load_samples(&train_m, size)?;
    let val_s = load_samples(&val_m, size)?;
    if a.kmeans_anchors {
        let s = size as f64;
        let shapes: Vec<[f64; 2]> = train_s
            .iter()
            .flat_map(|x| x.labels.iter().map(|l| [l.w * s, l.h * s]))
            .collect();
        net.anchors = kmeans_anchors(&shapes, net.num_scales, net.anchors_per_scale(), a.seed)?;
    }
    net.validate()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        warmup_epochs: a.warmup_epochs,
        flip_prob: a.flip_prob,
        seed: a.seed,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam,
        },
        ..TrainConfig::default()
    };
    let mut det = Detector::<f32>::new(net, a.seed)?;
    if !a.quiet {
        eprintln!(
            "training on {} images, validating on {}, {} parameters",
            train_s.len(),
            val_s.len(),
            det.params().entries().iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum::<usize>()
        );
    }
    let quiet = a.quiet;
    let report = fit(&mut det, &train_s, &val_s, &manifest.classes, &cfg, |e| {
        if !quiet {
            let val = e.val.map_or(String::new(), |v| format!(" val box={:.4} obj={:.4} cls={:.4}", v.box_loss, v.obj, v.cls));
            let map = e.val_map.map_or(String::new(), |m| format!(" mAP@0.5={m:.4}"));
            eprintln!(
                "epoch {:>3} lr={:.5} train box={:.4} obj={:.4} cls={:.4}{val}{map} ({:.1}s)",
                e.epoch, e.lr, e.train.box_loss, e.train.obj, e.train.cls, e.seconds
            );
        }
    })?;
    let out = &a.out;
    std::fs::create_dir_all(out).map_err(|e| ServiceError::BadRequest(format!("{}: {e}", out.display())))?;
    report
        .best
        .save(&out.join("best.ckpt"))
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), cfg.epochs.to_string());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    Checkpoint::from_detector(&det, manifest.classes.clone(), meta)
        .save(&out.join("last.ckpt"))
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    write(&out.join("history.txt"), report.history.to_text().as_bytes())?;
    let mut maps = String::from("epoch map50\n");
    for (i, m) in report.history.val_map.iter().enumerate() {
        maps.push_str(&format!("{} {m:.6}\n", i + 1));
    }
    write(&out.join("val_map.txt"), maps.as_bytes())?;
    write(&out.join("train_config.json"), &to_json(&cfg))?;
    if !val_s.is_empty() {
        let best = report.best.detector()?;
        let r = evaluate_samples(&best, &val_s, &manifest.classes, cfg.eval_conf, cfg.eval_nms_iou, &EvalOptions::default())?;
        write(&out.join("report.txt"), r.to_text().as_bytes())?;
        println!("best epoch {}: {}", report.best_epoch, r.summary());
    } else {
        println!("trained {} epochs (no validation split)", cfg.epochs);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let subset = match a.split {
        SplitArg::Train => manifest.subset(Split::Train),
        SplitArg::Val => manifest.subset(Split::Val),
        SplitArg::All => manifest.clone(),
    };
    if subset.entries.is_empty() {
        return Err(ServiceError::BadRequest("selected split is empty".into()));
    }
    DetectParams { conf: a.conf, nms_iou: a.nms }.validate()?;
    let samples = load_samples(&subset, model.input_size())?;
    let opts = EvalOptions {
        iou_threshold: a.iou,
        ap_mode: match a.ap_mode {
            ApModeArg::All => ApMode::AllPoint,
            ApModeArg::Point101 => ApMode::Point101,
        },
        ..EvalOptions::default()
    };
    let report = evaluate_samples(model.detector(), &samples, model.classes(), a.conf, a.nms, &opts)?;
    print!("{}", report.to_text());
    println!("{}", report.summary());
    if let Some(p) = &a.json {
        write(p, &to_json(&report))?;
    }
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let params = DetectParams { conf: a.conf, nms_iou: a.nms };
    params.validate()?;
    let body = if a.frames {
        let frames = a
            .images
            .iter()
            .map(|p| {
                Ok(Frame {
                    name: p.display().to_string(),
                    bytes: read(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        to_json(&frames_response(&model, frames, params)?)
    } else {
        let mut responses = Vec::with_capacity(a.images.len());
        for p in &a.images {
            let bytes = read(p)?;
            responses.push(detect_image(&model, &bytes, &params).map_err(|e| match e {
                ServiceError::BadRequest(m) => ServiceError::BadRequest(format!("{}: {m}", p.display())),
                other => other,
            })?);
        }
        if responses.len() == 1 {
            to_json(&responses[0])
        } else {
            to_json(&responses)
        }
    };
    match &a.out {
        Some(p) => write(p, &body),
        None => {
            use std::io::Write as _;
            std::io::stdout()
                .write_all(&body)
                .map_err(|e| ServiceError::Internal(format!("stdout: {e}")))
        }
    }
}

fn gradcam(a: GradcamArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let bytes = read(&a.image)?;
    let params = GradcamParams {
        detect: DetectParams { conf: a.conf, nms_iou: a.nms },
        detection: a.detection,
        layer: a.layer.clone(),
        alpha: a.alpha,
    };
    let out = gradcam_image(&model, &bytes, &params)?;
    let png = |img: &image::RgbImage, path: &Path| -> Result<()> {
        let mut buf = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
            .map_err(|e| ServiceError::Internal(format!("PNG encoding failed: {e}")))?;
        write(path, &buf)
    };
    png(&out.overlay, &a.out)?;
    if let Some(p) = &a.heatmap {
        png(&render(&out.heatmap), p)?;
    }
    if let Some(p) = &a.json {
        write(p, &to_json(&out.response))?;
    }
    let r = &out.response;
    match &r.detection {
        Some(d) => println!(
            "explained detection {} ({} {:.3}) at layer {}",
            r.detection_index.unwrap_or(0),
            d.class_name,
            d.confidence,
            r.layer
        ),
        None => println!("no detection above threshold; explained {} at layer {}", r.target, r.layer),
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServiceError::Internal(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.bind)
            .await
            .map_err(|e| ServiceError::BadRequest(format!("cannot bind {}: {e}", a.bind)))?;
        let state = AppState::new(ServerConfig {
            max_upload_bytes: a.max_upload_bytes,
            max_concurrent: a.max_concurrent,
            static_dir: a.static_dir.clone(),
        });
        eprintln!("listening on {}", listener.local_addr().map_err(|e| ServiceError::Internal(e.to_string()))?);
        let loader = {
            let state = state.clone();
            let path = a.model.clone();
            tokio::task::spawn_blocking(move || -> Result<()> {
                let model = Model::load(&path)?;
                let id = model.model_id().to_string();
                state.set_model(model);
                eprintln!("model {id} ready");
                Ok(())
            })
        };
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        let server = server::serve(listener, state, shutdown);
        tokio::pin!(server);
        tokio::select! {
            loaded = loader => {
                loaded.map_err(|e| ServiceError::Internal(e.to_string()))??;
            }
            r = &mut server => {
                return r.map_err(|e| ServiceError::Internal(e.to_string()));
            }
        }
        server.await.map_err(|e| ServiceError::Internal(e.to_string()))
    })
}
