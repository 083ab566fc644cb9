use clap::{Parser, Subcommand, ValueEnum};
use gbdnet::pipeline::ablation::{beta_variants, format_table, gate_variants, pad_variants, run_variants};
use gbdnet::pipeline::data::{read_ppm, write_ppm};
use gbdnet::pipeline::infer::{detect, draw_detections, write_detection_lines, write_detections};
use gbdnet::pipeline::proposals::grid_proposals;
use gbdnet::pipeline::{evaluate_model, gen_synthetic_dataset, load_dataset, save_dataset, train, DatasetSpec, InferOptions, Model, RunConfig};
use gbdnet::eval::ImageDetection;
use gbdnet::suite::gradient_suite;
use gbdnet::Result;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gbdnet", about = "Gated bi-directional context detection head on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Pads,
    Beta,
    Gates,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// DatasetSpec as JSON; defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        flip: bool,
        #[arg(long)]
        pyramid: bool,
        #[arg(long)]
        nms_thresh: Option<f64>,
        /// Global context fusion weight in [0, 1].
        #[arg(long)]
        context: Option<f64>,
        /// Write detections as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect objects in one PPM image using dense grid proposals.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write the image with detections drawn on it.
        #[arg(long)]
        draw: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        min_score: f64,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Train and evaluate ablation variants on an 80/20 split of a dataset.
    Ablate {
        #[arg(long, value_enum)]
        what: Ablation,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData { out, num, seed, spec } => {
            let spec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => DatasetSpec::default(),
            };
            let ds = gen_synthetic_dataset(&spec, num, seed)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} scenes to {}", ds.len(), out.display());
        }
        Cmd::Train { config, data, out } => {
            let config = load_config(&config)?;
            let ds = load_dataset(&data)?;
            let outcome = train(&config, &ds)?;
            for (e, l) in outcome.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}  loss {l:.5}", e + 1);
            }
            outcome.model.save(&out)?;
            println!("saved {}", out.display());
        }
        Cmd::Eval { ckpt, data, flip, pyramid, nms_thresh, context, out } => {
            let model = Model::load(&ckpt)?;
            let ds = load_dataset(&data)?;
            let mut opts = InferOptions::from_config(&model.config);
            opts.flip |= flip;
            opts.pyramid = pyramid;
            if let Some(t) = nms_thresh {
                opts.nms_thresh = t;
            }
            opts.context_weight = context.or(model.config.context_weight_search.then_some(model.config.context_weight));
            let (res, dets) = evaluate_model(&model, &ds, &opts)?;
            println!("{}", serde_json::to_string_pretty(&res)?);
            if let Some(p) = out {
                write_detections(&p, &dets)?;
            }
        }
        Cmd::Infer { ckpt, image, draw, min_score } => {
            let model = Model::load(&ckpt)?;
            let img = read_ppm(&image)?;
            let (h, w) = (img.shape().h, img.shape().w);
            let proposals = grid_proposals(w, h, &[8.0, 11.0, 16.0], 2.0);
            let opts = InferOptions::from_config(&model.config);
            let dets: Vec<_> = detect(&model, &img, &proposals, &opts)?.into_iter().filter(|d| d.score >= min_score).collect();
            let lines: Vec<ImageDetection> = dets.iter().map(|d| ImageDetection { image_id: 0, detection: *d }).collect();
            write_detection_lines(&mut std::io::stdout().lock(), &lines)?;
            if let Some(p) = draw {
                write_ppm(&p, &draw_detections(&img, &dets))?;
            }
        }
        Cmd::Gradcheck { seeds } => {
            let cases = gradient_suite(seeds)?;
            let mut ok = true;
            for c in &cases {
                let tag = if c.passed() { "PASS" } else { "FAIL" };
                println!("{tag}  {:<30} max rel err {:.3e}  checked {:>6}  skipped {:>4}", c.name, c.max_rel_error, c.checked, c.skipped);
                ok &= c.passed();
            }
            return Ok(ok);
        }
        Cmd::Ablate { what, data, config } => {
            let base = load_config(&config)?;
            let ds = load_dataset(&data)?;
            let (train_set, test_set) = ds.split_at(ds.len() * 4 / 5);
            let (title, variants) = match what {
                Ablation::Pads => ("context pads", pad_variants(&base)),
                Ablation::Beta => ("message scale beta", beta_variants(&base)),
                Ablation::Gates => ("gating", gate_variants(&base)),
            };
            let rows = run_variants(&variants, &train_set, &test_set)?;
            print!("{}", format_table(title, &rows));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
