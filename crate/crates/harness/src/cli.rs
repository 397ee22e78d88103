//! The `card` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use card_core::gradcheck::{run_cases, GradCheckConfig};
use card_core::model::Upsampler;
use card_core::saa::{attention_flops, dense_attention_core, synced_axial_core, AttentionConfig, AttentionVariant};
use card_core::{autodiff::kernels, Graph, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{KeyValues, RunConfig};
use crate::dataset::{self, Dataset};
use crate::error::{write_file, Error, Result};
use crate::maps::{class_dependency_map, pixel_relation_map};
use crate::metrics::eval_miou;
use crate::pnm;
use crate::run::{self, CHECKPOINT_FILE};

#[derive(Parser, Debug)]
#[command(name = "card", version, about = "Class-aware regularization experiments on biased synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UpsamplerArg {
    Ejpu,
    Dilated,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub car: Option<OnOff>,
    #[arg(long, value_enum)]
    pub upsampler: Option<UpsamplerArg>,
    /// Output directory.
    #[arg(long, default_value = "card-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Source {
    /// Dataset directory written by `gen-data`; generated from the seed
    /// when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the biased dataset as PPM/PGM files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train, evaluate and write reports plus a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Class dependency and pixel relation maps of a checkpoint.
    Maps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Attention-core cost of dense vs synced axial attention.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        h: usize,
        #[arg(long, default_value_t = 64)]
        w: usize,
        #[arg(long, default_value_t = 64)]
        c: usize,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at `--seed` (default 1).
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let kv = match &common.config {
        Some(path) => KeyValues::load(path)?,
        None => KeyValues::default(),
    };
    let mut cfg = RunConfig::from_kv(&kv)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(c) = common.car {
        cfg.car_on = c == OnOff::On;
    }
    if let Some(u) = common.upsampler {
        cfg.model.upsampler = match u {
            UpsamplerArg::Ejpu => Upsampler::Ejpu,
            UpsamplerArg::Dilated => Upsampler::DilatedOs8,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, source: &Source) -> Result<Dataset> {
    match &source.data {
        None => dataset::gen_dataset(&cfg.data, cfg.seed),
        Some(dir) => Ok(Dataset {
            spec: cfg.data.clone(),
            train: dataset::load_split(&dir.join("train"), cfg.data.n_class)?,
            test: dataset::load_split(&dir.join("test"), cfg.data.n_class)?,
        }),
    }
}

fn checkpoint_path(common: &Common, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| common.out.join(CHECKPOINT_FILE))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Multiplies counted while running one attention core on random inputs.
fn measured_flops(h: usize, w: usize, c: usize, variant: AttentionVariant) -> Result<u64> {
    let cfg = AttentionConfig {
        heads: 1,
        d_model: c,
        column_first: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let mut t = || g.constant(Tensor::uniform(&[1, h, w, c], -1.0, 1.0, &mut rng));
    let (q, k, v) = (t(), t(), t());
    kernels::reset_multiply_counter();
    match variant {
        AttentionVariant::Saa => {
            synced_axial_core(&mut g, q, k, v, &cfg)?;
        }
        AttentionVariant::Dense => {
            dense_attention_core(&mut g, q, k, v, &cfg)?;
        }
    }
    Ok(kernels::multiply_count())
}

/// Largest grid for which the dense core is actually executed.
const MEASURE_LIMIT: usize = 1024;

fn flops(out: &mut dyn Write, dir: &Path, h: usize, w: usize, c: usize) -> Result<()> {
    let dense = attention_flops(h, w, c, AttentionVariant::Dense)?;
    let saa = attention_flops(h, w, c, AttentionVariant::Saa)?;
    let d = gcd(saa, dense);
    let mut csv = String::from("variant,analytic,measured\n");
    let mut line = |name: &str, analytic: u64, variant: AttentionVariant| -> Result<()> {
        let measured = if h * w <= MEASURE_LIMIT {
            measured_flops(h, w, c, variant)?.to_string()
        } else {
            String::new()
        };
        let _ = writeln!(out, "{name:<6} {analytic:>16}  measured {}", if measured.is_empty() { "-" } else { &measured });
        csv.push_str(&format!("{name},{analytic},{measured}\n"));
        Ok(())
    };
    line("dense", dense, AttentionVariant::Dense)?;
    line("saa", saa, AttentionVariant::Saa)?;
    let _ = writeln!(out, "ratio  {}/{} = {}", saa / d, dense / d, saa as f64 / dense as f64);
    write_file(&dir.join("flops.csv"), csv.as_bytes())
}

fn gradcheck(out: &mut dyn Write, dir: &Path, first: u64, count: u64) -> Result<()> {
    let cfg = GradCheckConfig::default();
    let seeds: Vec<u64> = (first..first + count).collect();
    let results = run_cases(&seeds, &cfg)?;
    let mut csv = String::from("op,seeds,max_rel_error,passed\n");
    for r in &results {
        let _ = writeln!(
            out,
            "{:<16} {:.3e} {}",
            r.name,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!("{},{},{},{}\n", r.name, r.seeds, r.max_rel_error, r.passed));
    }
    write_file(&dir.join("gradcheck.csv"), csv.as_bytes())?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn class_histogram(split: &[dataset::Example], n_class: usize) -> Vec<u64> {
    let mut h = vec![0; n_class];
    for ex in split {
        for &l in ex.sample.labels.raw() {
            if (l as usize) < n_class {
                h[l as usize] += 1;
            }
        }
    }
    h
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData { common } => {
            let cfg = resolve(&common)?;
            let ds = dataset::gen_dataset(&cfg.data, cfg.seed)?;
            dataset::save(&ds, &common.out)?;
            let _ = writeln!(out, "wrote {} train and {} test images to {}", ds.train.len(), ds.test.len(), common.out.display());
            let _ = writeln!(out, "train class pixels: {:?}", class_histogram(&ds.train, cfg.data.n_class));
        }
        Command::Train { common, source } => {
            let cfg = resolve(&common)?;
            let ds = dataset(&cfg, &source)?;
            let (model, report) = run::experiment(&cfg, &ds)?;
            let written = run::write_run(&common.out, &cfg, &model, &report)?;
            let _ = write!(out, "{}", run::summary(&report, &written));
        }
        Command::Eval {
            common,
            source,
            checkpoint,
        } => {
            let cfg = resolve(&common)?;
            let ds = dataset(&cfg, &source)?;
            let model = run::read_checkpoint(&checkpoint_path(&common, &checkpoint), &cfg)?;
            let eval = eval_miou(&model, &ds.test)?;
            let csv = run::eval_csv(&eval);
            write_file(&common.out.join("eval.csv"), csv.as_bytes())?;
            let _ = write!(out, "{csv}");
        }
        Command::Maps {
            common,
            source,
            checkpoint,
        } => {
            let cfg = resolve(&common)?;
            let ds = dataset(&cfg, &source)?;
            let model = run::read_checkpoint(&checkpoint_path(&common, &checkpoint), &cfg)?;
            let dep = class_dependency_map(&model, &ds.test)?;
            let ex = ds
                .test
                .get(cfg.map_image)
                .ok_or_else(|| Error::config(format!("map_image {} outside test split", cfg.map_image)))?;
            let rel = pixel_relation_map(&model, &ex.sample.image, cfg.map_pixel)?;
            let scale = ex.sample.image.shape()[0] / rel.height.max(1);
            write_file(&common.out.join("dependency.csv"), dep.to_csv().as_bytes())?;
            write_file(&common.out.join("dependency.pgm"), &pnm::encode(&dep.to_pgm(16)))?;
            write_file(&common.out.join("relation.csv"), rel.to_csv().as_bytes())?;
            write_file(&common.out.join("relation.pgm"), &pnm::encode(&rel.to_pgm(scale.max(1))))?;
            let _ = write!(out, "{}", dep.to_csv());
            let _ = writeln!(out, "off-diagonal mean = {}", dep.off_diagonal_mean());
        }
        Command::Flops { common, h, w, c } => flops(out, &common.out, h, w, c)?,
        Command::Gradcheck { common, seeds } => gradcheck(out, &common.out, common.seed.unwrap_or(1), seeds)?,
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
