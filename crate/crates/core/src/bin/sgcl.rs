use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sgcl::crops::{format_pairs, make_pair};
use sgcl::featmap::{load_tensor, save_tensor};
use sgcl::harness::render::render_pgm;
use sgcl::harness::scene::{gen_scene, SceneConfig};
use sgcl::harness::train::{constant_baseline, dataset, evaluate, train};
use sgcl::harness::TrainConfig;
use sgcl::model::{self, load_params};
use sgcl::ncut::{self, SaliencyMap, DEFAULT_EIGEN_TOL, DEFAULT_EPS_CLAMP};
use sgcl::regions::{extract_regions, format_regions, sample_regions, DEFAULT_MIN_AREA, DEFAULT_T};
use sgcl::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "sgcl", version, about = "Saliency-guided contrastive learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the saliency map of a feature map.
    Saliency {
        featmap: PathBuf,
        /// Output path; `.pgm` renders an image, anything else writes SGFM.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPS_CLAMP)]
        eps: f64,
    },
    /// List the scored regions of a saliency map.
    Regions {
        saliency: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
        min_area: usize,
    },
    /// Sample positive crop pairs from a saliency map.
    Pairs {
        saliency: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(short, default_value_t = DEFAULT_T)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
        min_area: usize,
    },
    /// Run the training loop and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report mean saliency IoU of a checkpoint on its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render a saliency map as an 8-bit PGM.
    Render { saliency: PathBuf, out: PathBuf },
    /// Write one synthetic scene image (and its mask as PGM).
    Scene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Encode an image into a feature map with a checkpoint's online encoder.
    Encode {
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn load_saliency(path: &Path) -> Result<SaliencyMap> {
    SaliencyMap::from_tensor(&load_tensor(path)?)
}

fn write_saliency(s: &SaliencyMap, out: &Path) -> Result<()> {
    if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        render_pgm(s, out)
    } else {
        save_tensor(&s.to_tensor(), out)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Saliency { featmap, out, eps } => {
            let s = ncut::saliency_map(&load_tensor(featmap)?, eps, DEFAULT_EIGEN_TOL)?;
            write_saliency(&s, &out)
        }
        Command::Regions { saliency, min_area } => {
            let regions = extract_regions(&load_saliency(&saliency)?, min_area)?;
            print!("{}", format_regions(&regions));
            Ok(())
        }
        Command::Pairs {
            saliency,
            image,
            t,
            seed,
            min_area,
        } => {
            let s = load_saliency(&saliency)?;
            let img = load_tensor(image)?;
            if img.height() % s.height() != 0 || img.height() / s.height() != img.width() / s.width() {
                return Err(Error::Argument(format!(
                    "image {}x{} is not a stride multiple of saliency {}x{}",
                    img.height(),
                    img.width(),
                    s.height(),
                    s.width()
                )));
            }
            let stride = img.height() / s.height();
            let regions = extract_regions(&s, min_area)?;
            let mut r = rng::stream(seed);
            let pairs = sample_regions(&regions, t, &mut r)?
                .iter()
                .map(|region| make_pair(region, stride, &img, &mut r))
                .collect::<Result<Vec<_>>>()?;
            print!("{}", format_pairs(&pairs));
            Ok(())
        }
        Command::Train { config, out } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            let scenes = dataset(&cfg);
            let outcome = train(&cfg, &scenes)?;
            outcome.save(&out)?;
            print!("{}", outcome.eval_log());
            println!("baseline {}", outcome.baseline_iou);
            Ok(())
        }
        Command::Eval { checkpoint } => {
            let cfg = TrainConfig::load(checkpoint.join("config.txt"))?;
            let params = load_params(checkpoint.join("online.sgfm"), checkpoint.join("online.manifest"))?;
            if params.dims != cfg.model_dims() {
                return Err(Error::Format("checkpoint dims do not match config.txt".into()));
            }
            let scenes = dataset(&cfg);
            let e = evaluate(&params, &scenes, &cfg)?;
            println!("mean_iou {}", e.mean_iou);
            println!("baseline_iou {}", constant_baseline(&scenes));
            println!("failures {}", e.failures);
            Ok(())
        }
        Command::Render { saliency, out } => render_pgm(&load_saliency(&saliency)?, out),
        Command::Scene { seed, size, out, mask } => {
            if size < 16 {
                return Err(Error::Argument("size must be at least 16".into()));
            }
            let scene = gen_scene(seed, &SceneConfig { size, ..SceneConfig::default() });
            save_tensor(&scene.image, out)?;
            if let Some(m) = mask {
                let values = scene.gt_mask.bits().iter().map(|&b| f64::from(u8::from(b))).collect();
                render_pgm(&SaliencyMap::new(size, size, values)?, m)?;
            }
            Ok(())
        }
        Command::Encode { image, checkpoint, out } => {
            let params = load_params(checkpoint.join("online.sgfm"), checkpoint.join("online.manifest"))?;
            save_tensor(&model::encode(&params, &load_tensor(image)?)?, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
