use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nofonet::autodiff::parallel;
use nofonet::data::{make_pairs, synth_cohort, CohortSpec, FollowUpPair, Manifest};
use nofonet::metrics::growth_curve;
use nofonet::nets::ModelKind;
use nofonet::runner::{
    classify_manifest, fit, load_nofonet, run_cv_experiment, trainer_by_name, write_classification_csv, CvConfig,
    TrainConfig,
};
use nofonet::volgrid::{load_mask, load_volume, save_volume, Volume};
use nofonet::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "nofonet", version, about = "Lung nodule follow-up prediction")]
struct Cli {
    /// Serial kernels and reductions throughout.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 48³ cubes, three scans per nodule
    Standard,
    /// small cubes, fast-growing versus frozen nodules
    Easy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrainKind {
    Warp,
    Texture,
    Baseline,
    BaselineTem,
}

impl TrainKind {
    fn name(self) -> &'static str {
        match self {
            TrainKind::Warp => "warp",
            TrainKind::Texture => "texture",
            TrainKind::Baseline => "baseline",
            TrainKind::BaselineTem => "baseline-tem",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known labels.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nodules: usize,
        #[arg(long = "pd-frac")]
        pd_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Preset::Standard)]
        preset: Preset,
        /// Cube edge; defaults to 48 (standard) or 16 (easy).
        #[arg(long)]
        cube: Option<usize>,
    },
    /// Train one model on every pair of a manifest.
    Train {
        #[arg(value_enum)]
        kind: TrainKind,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding the WarpNet for texture training; defaults to --out.
        #[arg(long)]
        warp_ckpt: Option<PathBuf>,
    },
    /// Predict a follow-up scan.
    Predict {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        t_day: i64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predicted nodule volume over a list of intervals.
    Curve {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        t_days: Vec<i64>,
        /// Also write curve.json and mid-slice images here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patient-grouped cross-validation; trains one model set per fold.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train a TextureNet per fold with this config.
        #[arg(long)]
        texture_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Label every nodule of a manifest from its masks.
    Classify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    parallel::init_threads_from_env();
    if cli.deterministic {
        parallel::set_deterministic(true);
    }
    match run(cli.command, cli.deterministic) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load_config(path: Option<&Path>, pairs: &[FollowUpPair], deterministic: bool) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig { cube_size: pairs.first().map_or(48, |p| p.shape()[0]), ..Default::default() },
    };
    cfg.deterministic |= deterministic;
    Ok(cfg)
}

fn load_pairs(manifest: &Path) -> Result<Vec<FollowUpPair>> {
    let pairs = make_pairs(&Manifest::load(manifest)?)?;
    if pairs.is_empty() {
        return Err(Error::Manifest("manifest yields no follow-up pairs".into()));
    }
    Ok(pairs)
}

fn run(command: Command, deterministic: bool) -> Result<()> {
    match command {
        Command::Synth { out, nodules, pd_frac, seed, preset, cube } => {
            let spec = match preset {
                Preset::Standard => CohortSpec { cube: cube.unwrap_or(48), ..CohortSpec::standard() },
                Preset::Easy => CohortSpec::easy(cube.unwrap_or(16)),
            };
            let cohort = synth_cohort(&spec, nodules, pd_frac, seed)?;
            let manifest = cohort.write(&out)?;
            let positives = cohort.nodules.iter().filter(|n| n.is_pd).count();
            println!(
                "{}",
                serde_json::json!({"nodules": nodules, "scans": manifest.rows.len(), "pd": positives, "out": out})
            );
        }
        Command::Train { kind, manifest, config, out, warp_ckpt } => {
            let pairs = load_pairs(&manifest)?;
            let cfg = load_config(config.as_deref(), &pairs, deterministic)?;
            let warp = match kind {
                TrainKind::Texture => {
                    let dir = warp_ckpt.as_deref().unwrap_or(&out);
                    let (net, _) = nofonet::nets::load_model(dir, ModelKind::Warp)?;
                    Some(nofonet::nets::WarpNet::from_unet(net)?)
                }
                _ => None,
            };
            let trainer = trainer_by_name(kind.name(), &cfg, warp)?;
            let (_, record) = fit(trainer.as_ref(), &pairs, &[], &cfg, Some(&out))?;
            let last = record.steps.last().map(|r| r.total);
            println!(
                "{}",
                serde_json::json!({"trainer": record.trainer, "steps": record.steps.len(), "final_loss": last, "checkpoints": record.checkpoints})
            );
        }
        Command::Predict { ckpt_dir, volume, mask, t_day, out } => {
            let model = load_nofonet(&ckpt_dir)?;
            let x = load_volume(&volume)?;
            let s = load_mask(&mask)?;
            let p = model.predict(&x, &s, t_day)?;
            fs::create_dir_all(&out)?;
            save_volume(&out.join("predicted.vg01"), &p.predicted)?;
            save_volume(&out.join("warped.vg01"), &p.warped)?;
            save_volume(&out.join("warped_mask.vg01"), p.warped_mask.volume())?;
            p.field.save(&out.join("field.vg01"))?;
            write_pgm(&out.join("baseline.pgm"), &x, -1.0, 1.0)?;
            write_pgm(&out.join("predicted.pgm"), &p.predicted, -1.0, 1.0)?;
            write_pgm(&out.join("warped.pgm"), &p.warped, -1.0, 1.0)?;
            write_pgm(&out.join("warped_mask.pgm"), p.warped_mask.volume(), 0.0, 1.0)?;
            let magnitude = field_magnitude(&p.field)?;
            let top = magnitude.data().iter().fold(0f32, |a, &b| a.max(b)).max(1e-6);
            write_pgm(&out.join("field.pgm"), &magnitude, 0.0, top)?;
            let vol = nofonet::volgrid::mask_volume_mm3(&p.warped_mask.threshold(0.5))?;
            println!(
                "{}",
                serde_json::json!({"t_day": t_day, "t_itv": p.t_itv, "predicted_volume_mm3": vol, "max_displacement": p.field.max_abs()})
            );
        }
        Command::Curve { ckpt_dir, volume, mask, t_days, out } => {
            let model = load_nofonet(&ckpt_dir)?;
            let x = load_volume(&volume)?;
            let s = load_mask(&mask)?;
            let points = growth_curve(&x, &s, &t_days, &model)?;
            let rows: Vec<_> = points
                .iter()
                .map(|p| serde_json::json!({"t_day": p.t_day, "t_itv": p.t_itv, "volume_mm3": p.volume_mm3}))
                .collect();
            for r in &rows {
                println!("{r}");
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("curve.json"), serde_json::to_vec_pretty(&rows)?)?;
                for p in &points {
                    write_pgm(&dir.join(format!("mask_t{}.pgm", p.t_day)), p.warped_mask.volume(), 0.0, 1.0)?;
                    write_pgm(&dir.join(format!("pred_t{}.pgm", p.t_day)), &p.predicted, -1.0, 1.0)?;
                }
            }
        }
        Command::Evaluate { manifest, ckpt_dir, folds, report, config, texture_config, seed } => {
            let pairs = load_pairs(&manifest)?;
            let warp = load_config(config.as_deref(), &pairs, deterministic)?;
            let texture = match texture_config {
                Some(p) => Some(load_config(Some(&p), &pairs, deterministic)?),
                None => None,
            };
            let cfg = CvConfig { k: folds, seed, warp, texture };
            let rep = run_cv_experiment(&pairs, &cfg, Some(&ckpt_dir))?;
            if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&report, serde_json::to_vec_pretty(&rep)?)?;
            println!("{}", serde_json::to_string(&rep.pooled)?);
        }
        Command::Classify { manifest, out } => {
            let rows = classify_manifest(&Manifest::load(&manifest)?)?;
            write_classification_csv(&out, &rows)?;
            let positives = rows.iter().filter(|r| r.is_pd).count();
            println!("{}", serde_json::json!({"nodules": rows.len(), "pd": positives}));
        }
    }
    Ok(())
}

fn field_magnitude(field: &nofonet::warp::DisplacementField) -> Result<Volume> {
    let [d, h, w] = field.spatial();
    let n = d * h * w;
    let u = field.tensor().data();
    let data = (0..n)
        .map(|i| (u[i] * u[i] + u[n + i] * u[n + i] + u[2 * n + i] * u[2 * n + i]).sqrt() as f32)
        .collect();
    Volume::new([d, h, w], data, [1.0; 3])
}

/// Middle axial slice as 8-bit binary PGM, `lo..hi` mapped to `0..255`.
fn write_pgm(path: &Path, vol: &Volume, lo: f32, hi: f32) -> Result<()> {
    let [d, h, w] = vol.shape();
    let z = d / 2;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = (vol.get(z, y, x) - lo) / (hi - lo);
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
