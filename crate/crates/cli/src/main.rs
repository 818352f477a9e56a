use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail};
use chromalink::colorspace::LabFrame;
use chromalink::data::{self, discover_clips, load_clip, load_lab, resize_planes, save_clip, synth_clip, Clip, SynthSpec};
use chromalink::flowlab::{load_flow, FlowDirection, FlowField, OcclusionMask};
use chromalink::pipeline::{
    ablate, block_size_sweep, colorize_video, evaluate_frames, TableReport, Trainer, Variant,
};
use chromalink::{Error, Model32, PipelineConfig};
use clap::{Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "chromalink", version, about = "Exemplar-based video colorization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config to start from: desk, tiny or full.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override any config key, e.g. `--set lambda_adv=0`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "block-size", global = true)]
    block_size: Option<usize>,
    /// Working resolution, e.g. `96x64`.
    #[arg(long, global = true, value_name = "WxH")]
    resize: Option<String>,
    #[arg(long, global = true, value_name = "VARIANT")]
    ablate: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic panning-shape clips with exact flows and masks.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        clips: usize,
        #[arg(long = "clip-len", default_value_t = 8)]
        clip_len: usize,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
    },
    /// Train on a directory of clips.
    Train {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total optimizer steps (overrides `max_steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Initialize from this checkpoint's weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Colorize a frame directory from one reference image.
    Colorize {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score predicted frames: PSNR (with --gt), colorfulness, warp error (with --flows).
    Eval {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        flows: Option<PathBuf>,
        /// Report file, or directory receiving `report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate ablation variants on ground-truth clips.
    Ablate {
        #[arg(long)]
        frames: PathBuf,
        /// A checkpoint, or a directory holding `<variant>.ckpt` or `<variant>/final.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one clip for every block size 1..=max-n.
    SweepN {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "max-n", default_value_t = 6)]
        max_n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("resize {s:?}: expected WxH")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("resize {s:?}: expected WxH")));
    Ok((p(w)?, p(h)?))
}

fn apply_sets(cfg: PipelineConfig, sets: &[String]) -> anyhow::Result<PipelineConfig> {
    if sets.is_empty() {
        return Ok(cfg);
    }
    let mut table: toml::Table = toml::from_str(&cfg.to_toml_string()).map_err(|e| Error::Config(e.to_string()))?;
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
        let value: toml::Value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.trim().to_string(), value);
    }
    Ok(PipelineConfig::from_toml_str(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)?)
}

impl Common {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match (&self.config, self.preset.as_deref()) {
            (Some(p), _) => PipelineConfig::load(p)?,
            (None, None | Some("desk")) => PipelineConfig::default(),
            (None, Some("tiny")) => PipelineConfig::tiny(),
            (None, Some("full")) => PipelineConfig::full_scale(),
            (None, Some(other)) => bail!(Error::Config(format!("preset {other:?}; valid: desk, tiny, full"))),
        };
        cfg = apply_sets(cfg, &self.set)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.block_size {
            cfg.block_size = n;
        }
        if let Some(r) = &self.resize {
            (cfg.width, cfg.height) = parse_size(r)?;
        }
        if let Some(v) = &self.ablate {
            v.parse::<Variant>()?.apply(&mut cfg);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn echo_config(dir: &Path, cfg: &PipelineConfig) -> anyhow::Result<()> {
    ensure_dir(dir)?;
    cfg.save(&dir.join("config.toml"))?;
    Ok(())
}

/// Loads weights from a checkpoint, keeping the command's ablation switches
/// and block size; without one, initializes from the config seed.
fn load_model(checkpoint: Option<&Path>, cfg: &PipelineConfig, common: &Common) -> anyhow::Result<Model32> {
    match checkpoint {
        Some(p) => {
            let mut m = Model32::load(p)?;
            if common.ablate.is_some() {
                m.set_ablation(cfg.no_transformer_branch, cfg.single_head, cfg.no_linkage);
            }
            if common.block_size.is_some() {
                m.config.block_size = cfg.block_size;
            }
            if common.resize.is_some() {
                (m.config.width, m.config.height) = (cfg.width, cfg.height);
            }
            Ok(m)
        }
        None => {
            log::warn!("no checkpoint given; using untrained weights (seed {})", cfg.seed);
            Ok(Model32::new(cfg.clone())?)
        }
    }
}

fn report_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "json") {
        out.to_path_buf()
    } else {
        out.join("report.json")
    }
}

fn emit(out: Option<&Path>, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Err(e) = writeln!(std::io::stdout(), "{text}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(e.into());
        }
    }
    if let Some(o) = out {
        let p = report_path(o);
        if let Some(parent) = p.parent() {
            ensure_dir(parent)?;
        }
        write_json(&p, value)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.common.config()?;
    let size = Some((cfg.width, cfg.height));
    match cli.cmd {
        Command::SynthData { out, clips, clip_len, shapes } => {
            ensure_dir(&out)?;
            for k in 0..clips {
                let spec = SynthSpec::new(cfg.seed.wrapping_add(k as u64), clip_len, cfg.height, cfg.width, shapes);
                save_clip(&out.join(format!("clip_{k:03}")), &synth_clip(&spec)?)?;
            }
            echo_config(&out, &cfg)?;
            println!("wrote {clips} clips to {}", out.display());
        }
        Command::Train { frames, out, steps, checkpoint } => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.max_steps = s;
            }
            let clips = discover_clips(&frames)?
                .iter()
                .map(|d| load_clip(d, size))
                .collect::<chromalink::Result<Vec<Clip>>>()?;
            echo_config(&out, &cfg)?;
            let mut model = Model32::new(cfg.clone())?;
            if let Some(p) = checkpoint {
                let ck = chromalink::Checkpoint::<f32>::load(&p)?;
                ck.restore_into(&mut model.store, |_| true)?;
            }
            let mut trainer = Trainer::new(model);
            let recs = trainer.fit(&clips, Some(&out), |_| {})?;
            let last = recs.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("trained {} steps on {} clips; final loss {last:.5}; wrote {}", recs.len(), clips.len(), out.join("final.ckpt").display());
        }
        Command::Colorize { frames, reference, out, checkpoint } => {
            let model = load_model(checkpoint.as_deref(), &cfg, &cli.common)?;
            let size = Some((model.config.width, model.config.height));
            let paths = data::list_images(&frames)?;
            if paths.is_empty() {
                bail!(Error::Input(format!("{}: no frames", frames.display())));
            }
            let full: Vec<LabFrame<f32>> = paths.iter().map(|p| load_lab(p, None)).collect::<chromalink::Result<_>>()?;
            let work: Vec<LabFrame<f32>> = paths.iter().map(|p| load_lab(p, size)).collect::<chromalink::Result<_>>()?;
            let reference = load_lab(&reference, size)?;
            let started = Instant::now();
            let pred = colorize_video(&model, &work, &reference)?;
            let spf = started.elapsed().as_secs_f64() / pred.len() as f64;
            ensure_dir(&out)?;
            let mut written = Vec::with_capacity(pred.len());
            for ((p, src), path) in pred.iter().zip(&full).zip(&paths) {
                let ab = resize_planes(&p.ab, src.height(), src.width());
                let frame = LabFrame::new(src.l.clone(), ab)?;
                let name = Path::new(path.file_name().unwrap()).with_extension("png");
                data::write_lab(&out.join(&name), &frame)?;
                written.push(frame);
            }
            let mut report = evaluate_frames("colorize", &written, None, None)?;
            report.block_size = Some(model.config.block_size);
            report.variant = Some(variant_of(&model.config).to_string());
            report.seconds_per_frame = Some(spf);
            write_json(&out.join("report.json"), &report)?;
            echo_config(&out, &model.config)?;
            println!("colorized {} frames into {}", written.len(), out.display());
        }
        Command::Eval { frames, gt, flows, out } => {
            let pred = load_clip(&frames, None)?.frames;
            let gt = match gt {
                Some(d) => Some(load_clip(&d, None)?.frames),
                None => None,
            };
            let pairs = match flows {
                Some(d) => Some(load_pairs(&d, pred.len(), &cfg)?),
                None => None,
            };
            let report = evaluate_frames("eval", &pred, gt.as_deref(), pairs.as_deref())?;
            emit(out.as_deref(), &report)?;
        }
        Command::Ablate { frames, checkpoint, out } => {
            let clips = discover_clips(&frames)?
                .iter()
                .map(|d| load_clip(d, size))
                .collect::<chromalink::Result<Vec<Clip>>>()?;
            let variants = match cli.common.ablate.as_deref() {
                None | Some("all") => Variant::ALL.to_vec(),
                Some(v) => vec![v.parse::<Variant>()?],
            };
            let mut rows = Vec::new();
            for v in variants {
                let path = variant_checkpoint(&checkpoint, v)?;
                let model = load_model(Some(&path), &cfg, &cli.common)?;
                rows.push(ablate(&model, v, &clips)?);
            }
            emit(out.as_deref(), &TableReport::new("ablation", rows))?;
        }
        Command::SweepN { frames, checkpoint, max_n, out } => {
            let model = load_model(checkpoint.as_deref(), &cfg, &cli.common)?;
            let size = Some((model.config.width, model.config.height));
            let clip = load_clip(&frames, size)?;
            let sizes: Vec<usize> = (1..=max_n.max(1)).collect();
            let table = block_size_sweep(&model, &clip, &sizes)?;
            emit(out.as_deref(), &table)?;
        }
    }
    Ok(())
}

fn variant_of(cfg: &PipelineConfig) -> Variant {
    Variant::ALL
        .into_iter()
        .find(|v| v.switches() == (cfg.no_transformer_branch, cfg.single_head, cfg.no_linkage))
        .unwrap_or(Variant::Full)
}

fn variant_checkpoint(path: &Path, v: Variant) -> anyhow::Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let candidates = [path.join(format!("{}.ckpt", v.name())), path.join(v.name()).join("final.ckpt")];
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| anyhow!(Error::Input(format!("no checkpoint for variant {v} under {}", path.display()))))
}

/// Flow pairs for warp error from either a clip directory (`flows/`,
/// `flows_bwd/`, `masks/`) or a bare directory of forward `.flo` files.
fn load_pairs(dir: &Path, frames: usize, cfg: &PipelineConfig) -> anyhow::Result<Vec<(FlowField, OcclusionMask)>> {
    let has_layout = ["flows", "flows_bwd"].iter().any(|s| dir.join(s).is_dir());
    let clip = if has_layout {
        let fwd = read_flows(&dir.join("flows"), FlowDirection::Forward)?;
        let bwd = read_flows(&dir.join("flows_bwd"), FlowDirection::Backward)?;
        let masks = match dir.join("masks") {
            m if m.is_dir() => Some(data::list_images(&m)?.iter().map(|p| data::read_mask(p)).collect::<chromalink::Result<Vec<_>>>()?),
            _ => None,
        };
        Clip { frames: Vec::new(), names: Vec::new(), fwd, bwd, masks }
    } else {
        let fwd = read_flows(dir, FlowDirection::Forward)?;
        Clip { frames: Vec::new(), names: Vec::new(), fwd, bwd: None, masks: None }
    };
    let pairs = clip
        .temporal_pairs(cfg.occlusion_thresholds())?
        .ok_or_else(|| Error::Input(format!("{}: no flow files", dir.display())))?;
    if pairs.len() + 1 != frames {
        bail!(Error::Input(format!("{} flow pairs for {frames} frames", pairs.len())));
    }
    Ok(pairs)
}

fn read_flows(dir: &Path, direction: FlowDirection) -> anyhow::Result<Option<Vec<FlowField>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.into(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "flo"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Ok(None);
    }
    Ok(Some(files.iter().map(|p| load_flow(p, direction)).collect::<chromalink::Result<Vec<_>>>()?))
}

fn category(e: &anyhow::Error) -> &'static str {
    if let Some(err) = e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        err.category()
    } else if e.downcast_ref::<serde_json::Error>().is_some() {
        "format"
    } else {
        "internal"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", category(&e), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
