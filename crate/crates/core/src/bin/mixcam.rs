use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use mixcam::classnet::{cam_normalized, ClassNet};
use mixcam::config::RunConfig;
use mixcam::diffcore::{Checkpoint, Tensor};
use mixcam::evalkit::{
    evaluate, format_aligned, iou_rows, pseudo_labels, run_ablation, write_csv, AblationRow, AblationTable,
    PseudoLabelConfig, SweepParam, IOU_HEADERS,
};
use mixcam::imageio::{encode_pgm16, encode_pgm8, encode_ppm, planar_to_rgb8, write_file};
use mixcam::run::{train_run, CHECKPOINT_FILE, CONFIG_FILE};
use mixcam::synthdata::{generate_dataset, load_dataset, save_dataset, Dataset, ShapeKind};

const TRAIN_FILE: &str = "train.mxds";
const VAL_FILE: &str = "val.mxds";

#[derive(Parser)]
#[command(
    name = "mixcam",
    version,
    about = "Mixup CAM training and evaluation on synthetic shapes"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and validation splits.
    GenData,
    /// Train a network and write checkpoints plus a loss log.
    Train {
        /// Directory holding the generated splits.
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score response maps against the ground-truth masks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Also report background size and mIoU for thresholds 0.1 to 0.9.
        #[arg(long)]
        tau_sweep: bool,
    },
    /// Write input images, normalized maps and pseudo labels for some samples.
    ExportCam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
    },
    /// Train and score the loss-configuration grid and optional sweeps.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Grid rows to run; all five when neither this nor --sweep is given.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<AblationRow>>,
        /// Number of seeds, counting up from the configured seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// One-dimensional sweep, e.g. `--sweep alpha 0.1,0.2,0.5`.
        #[arg(long, num_args = 2, value_names = ["PARAM", "VALUES"])]
        sweep: Option<Vec<String>>,
    },
}

/// A failure reported as `error[category]: message`.
struct Failure {
    category: &'static str,
    message: String,
}

fn fail(category: &'static str, e: impl Display) -> Failure {
    Failure {
        category,
        message: e.to_string(),
    }
}

fn resolve_config(global: &GlobalArgs, run_dir: Option<&Path>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &global.config {
        cfg.apply_file(path).map_err(|e| fail("config", e))?;
    } else if let Some(path) = run_dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.exists()) {
        info!("using {}", path.display());
        cfg.apply_file(&path).map_err(|e| fail("config", e))?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.out = out.clone();
    }
    for kv in &global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| fail("config", format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v).map_err(|e| fail("config", e))?;
    }
    cfg.validate().map_err(|e| fail("config", e))?;
    Ok(cfg)
}

fn create_out(cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.out).map_err(|e| fail("io", format!("{}: {e}", cfg.out.display())))
}

fn load_split(dir: &Path, split: Split, cfg: &RunConfig) -> Result<Dataset, Failure> {
    let path = dir.join(match split {
        Split::Train => TRAIN_FILE,
        Split::Val => VAL_FILE,
    });
    let data = load_dataset(&path).map_err(|e| fail("data", format!("{}: {e}", path.display())))?;
    if data.classes != cfg.classes || data.height != cfg.extent || data.width != cfg.extent {
        return Err(fail(
            "data",
            format!(
                "{} holds {} classes at {}x{}, config expects {} at {}x{}",
                path.display(),
                data.classes,
                data.height,
                data.width,
                cfg.classes,
                cfg.extent,
                cfg.extent
            ),
        ));
    }
    Ok(data)
}

fn load_net(path: &Path, cfg: &RunConfig) -> Result<ClassNet, Failure> {
    let ck = Checkpoint::load(path).map_err(|e| fail("checkpoint", format!("{}: {e}", path.display())))?;
    ClassNet::from_params(cfg.net_config(), ck.params()).map_err(|e| fail("checkpoint", e))
}

fn class_names(classes: usize) -> Vec<&'static str> {
    ShapeKind::ALL[..classes].iter().map(|k| k.name()).collect()
}

fn write_table(path: &Path, headers: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
    write_csv(path, headers, rows).map_err(|e| fail("io", format!("{}: {e}", path.display())))
}

fn gen_data(cfg: &RunConfig) -> Result<(), Failure> {
    create_out(cfg)?;
    let (train, val) = generate_dataset(&cfg.dataset_config()).map_err(|e| fail("data", e))?;
    for (name, split) in [(TRAIN_FILE, &train), (VAL_FILE, &val)] {
        let path = cfg.out.join(name);
        save_dataset(split, &path).map_err(|e| fail("io", format!("{}: {e}", path.display())))?;
        info!("wrote {} samples to {}", split.len(), path.display());
    }
    let path = cfg.out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).map_err(|e| fail("io", e))
}

fn train(cfg: &RunConfig, data: &Path, resume: bool) -> Result<(), Failure> {
    let train_set = load_split(data, Split::Train, cfg)?;
    let val_set = load_split(data, Split::Val, cfg)?;
    let checkpoint = if resume {
        let path = cfg.out.join(CHECKPOINT_FILE);
        Some(Checkpoint::load(&path).map_err(|e| fail("checkpoint", format!("{}: {e}", path.display())))?)
    } else {
        None
    };
    let outcome = train_run(
        cfg,
        &train_set.training_view(),
        &val_set,
        Some(&cfg.out),
        checkpoint.as_ref(),
    )
    .map_err(|e| fail("train", e))?;
    println!("val_accuracy = {:.6}", outcome.val_accuracy);
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, split: Split, tau_sweep: bool) -> Result<(), Failure> {
    let net = load_net(checkpoint, cfg)?;
    let set = load_split(data, split, cfg)?;
    create_out(cfg)?;
    let report = evaluate(&net, &set, &cfg.pseudo_config()).map_err(|e| fail("eval", e))?;
    let rows = iou_rows(&report, &class_names(cfg.classes));
    print!("{}", format_aligned(&IOU_HEADERS, &rows));
    write_table(&cfg.out.join("eval_iou.csv"), &IOU_HEADERS, &rows)?;
    let summary = vec![
        vec!["miou".to_string(), report.iou.miou.to_string()],
        vec!["coverage".into(), report.coverage.to_string()],
        vec!["uniformity".into(), report.uniformity.to_string()],
        vec!["accuracy".into(), report.accuracy.to_string()],
        vec!["background_pixels".into(), report.background_pixels.to_string()],
        vec!["samples".into(), report.samples.to_string()],
    ];
    println!();
    print!("{}", format_aligned(&["metric", "value"], &summary));
    write_table(&cfg.out.join("eval_summary.csv"), &["metric", "value"], &summary)?;

    if tau_sweep {
        let mut rows = Vec::new();
        for i in 1..=9 {
            let tau = i as f64 / 10.0;
            let pcfg = PseudoLabelConfig {
                tau_bg: tau,
                ..cfg.pseudo_config()
            };
            let r = evaluate(&net, &set, &pcfg).map_err(|e| fail("eval", e))?;
            rows.push(vec![
                format!("{tau:.1}"),
                r.background_pixels.to_string(),
                format!("{:.6}", r.iou.miou),
            ]);
        }
        let headers = ["tau_bg", "background_pixels", "miou"];
        println!();
        print!("{}", format_aligned(&headers, &rows));
        write_table(&cfg.out.join("eval_tau_sweep.csv"), &headers, &rows)?;
    }
    Ok(())
}

fn export_cam(cfg: &RunConfig, checkpoint: &Path, data: &Path, split: Split, ids: &[u64]) -> Result<(), Failure> {
    let net = load_net(checkpoint, cfg)?;
    let set = load_split(data, split, cfg)?;
    let range = match (set.samples.first(), set.samples.last()) {
        (Some(a), Some(b)) => format!("{}..={}", a.id, b.id),
        _ => "none".into(),
    };
    let samples = ids
        .iter()
        .map(|&id| {
            set.find(id)
                .ok_or_else(|| fail("data", format!("unknown sample id {id} (valid ids: {range})")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let dir = cfg.out.join("cams");
    fs::create_dir_all(&dir).map_err(|e| fail("io", e))?;
    let extent = cfg.extent;
    let names = class_names(cfg.classes);
    let write = |name: String, bytes: Vec<u8>| {
        let path = dir.join(name);
        write_file(&path, &bytes).map_err(|e| fail("io", format!("{}: {e}", path.display())))
    };
    for s in samples {
        let image = Tensor::new(&[3, extent, extent], s.image.clone()).map_err(|e| fail("data", e))?;
        let raw = net.cam_raw(&image, s.valid_classes()).map_err(|e| fail("eval", e))?;
        let norm = cam_normalized(&raw);
        let id = s.id;
        write(
            format!("{id}_input.ppm"),
            encode_ppm(extent, extent, &planar_to_rgb8(&s.image, extent, extent)),
        )?;
        for (c, name) in names.iter().enumerate().take(raw.classes) {
            let px: Vec<u16> = norm.plane(c).iter().map(|&v| (v * 65535.0).round() as u16).collect();
            write(
                format!("{id}_cam{c}_{name}.pgm"),
                encode_pgm16(raw.width, raw.height, &px),
            )?;
        }
        let mask = pseudo_labels(&raw, extent, &cfg.pseudo_config());
        if mask.empty_valid {
            warn!("sample {id} has no valid classes; pseudo labels are all background");
        }
        write(format!("{id}_pseudo.pgm"), encode_pgm8(extent, extent, &mask.mask))?;
        write(format!("{id}.mxrm"), raw.to_raw_bytes())?;
        info!("exported sample {id}");
    }
    Ok(())
}

fn ablate(
    cfg: &RunConfig,
    data: &Path,
    rows: Option<&[AblationRow]>,
    seeds: u64,
    sweep: Option<&[String]>,
) -> Result<(), Failure> {
    if seeds == 0 {
        return Err(fail("usage", "--seeds must be at least 1"));
    }
    let train_set = load_split(data, Split::Train, cfg)?.training_view();
    let val_set = load_split(data, Split::Val, cfg)?;
    create_out(cfg)?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();

    let mut jobs: Vec<(&str, Vec<(String, RunConfig)>)> = Vec::new();
    let grid_rows: Option<Vec<AblationRow>> = match (rows, sweep) {
        (Some(r), _) => Some(r.to_vec()),
        (None, None) => Some(AblationRow::ALL.to_vec()),
        (None, Some(_)) => None,
    };
    if let Some(rows) = grid_rows {
        let configs = rows.iter().map(|r| (r.name().to_string(), r.apply(cfg))).collect();
        jobs.push(("ablation", configs));
    }
    let sweep_name;
    if let Some([param, values]) = sweep {
        let p: SweepParam = param.parse().map_err(|e| fail("usage", e))?;
        let mut configs = Vec::new();
        for v in values.split(',') {
            let value: f64 = v
                .trim()
                .parse()
                .map_err(|e| fail("usage", format!("sweep value `{v}`: {e}")))?;
            let c = p.apply(cfg, value);
            c.validate().map_err(|e| fail("config", e))?;
            configs.push((format!("{}={value}", p.name()), c));
        }
        sweep_name = format!("sweep_{}", p.name());
        jobs.push((&sweep_name, configs));
    }

    for (name, configs) in jobs {
        let table = run_ablation(&configs, &seed_list, &train_set, &val_set).map_err(|e| fail("eval", e))?;
        let rows = table.rows();
        println!("{name}");
        print!("{}", format_aligned(&AblationTable::HEADERS, &rows));
        write_table(&cfg.out.join(format!("{name}.csv")), &AblationTable::HEADERS, &rows)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let global = &cli.global;
    match &cli.command {
        Command::GenData => gen_data(&resolve_config(global, None)?),
        Command::Train { data, resume } => train(&resolve_config(global, None)?, data, *resume),
        Command::Eval {
            checkpoint,
            data,
            split,
            tau_sweep,
        } => {
            let cfg = resolve_config(global, checkpoint.parent())?;
            eval(&cfg, checkpoint, data, *split, *tau_sweep)
        }
        Command::ExportCam {
            checkpoint,
            data,
            split,
            ids,
        } => {
            let cfg = resolve_config(global, checkpoint.parent())?;
            export_cam(&cfg, checkpoint, data, *split, ids)
        }
        Command::Ablate {
            data,
            rows,
            seeds,
            sweep,
        } => ablate(
            &resolve_config(global, None)?,
            data,
            rows.as_deref(),
            *seeds,
            sweep.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.category, f.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
