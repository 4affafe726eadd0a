//! Training loops, the optimizer, cross-validation and cohort classification.
//!
//! Each trainable model is a [`Trainer`]: it builds its network and turns one
//! follow-up pair into a loss report plus parameter gradients. [`fit`] owns
//! the epoch loop (shuffling, augmentation, clipping, Adam, checkpoints) and
//! is shared by all of them. Trainers are looked up by name through
//! [`trainer_by_name`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{parallel, Graph, ParamStore, Tensor, Var};
use crate::data::{split_patients, Augmentation, FollowUpPair, Manifest};
use crate::error::{Error, Result};
use crate::losses::{
    dice_loss, mse_loss, residual_reg_loss, similarity_by_name, smooth_loss, texturenet_objective_var,
    warp_reg_loss, warpnet_objective_var, Emphasis, LossReport, LossWeights, Similarity, TextureTerms, WarpTerms,
    DEFAULT_NCC_WINDOW, DICE_EPS,
};
use crate::metrics::{
    assess_masks, dice_coef, psnr, psnr_masked, Confusion, PairAssessment, PSNR_PEAK,
};
use crate::nets::{load_model, save_model, ModelKind, NetConfig, NoFoNet, TextureNet, UNet, WarpNet};
use crate::tem::discretize_interval;
use crate::volgrid::{load_mask, SegMask, DEFAULT_CUBE};
use crate::warp::warp_var;

pub const CLIP_NORM: f64 = 5.0;
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetSize {
    #[default]
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub cube_size: usize,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub deterministic: bool,
    pub net: NetSize,
    /// Image similarity of the warp objective.
    pub similarity: String,
    pub ncc_window: usize,
    pub augment: bool,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_weights: LossWeights::default(),
            seed: 0,
            cube_size: DEFAULT_CUBE,
            checkpoint_every: 0,
            deterministic: false,
            net: NetSize::Full,
            similarity: "ncc".into(),
            ncc_window: DEFAULT_NCC_WINDOW,
            augment: true,
            clip_norm: CLIP_NORM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        self.loss_weights.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|source| Error::Open { path: path.to_path_buf(), source })?;
        let cfg: TrainConfig = serde_json::from_slice(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn net_config(&self, kind: ModelKind) -> NetConfig {
        let (i, o) = kind.io_channels();
        match self.net {
            NetSize::Full => NetConfig::full(i, o, self.cube_size, self.seed),
            NetSize::Desk => NetConfig::desk(i, o, self.cube_size, self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape { op: "adam_step", expected: vec![params.len()], got: vec![grads.len()] });
    }
    state.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.t as i32);
    for (k, p) in params.values_mut().enumerate() {
        let g = &grads[k];
        if g.shape() != p.value.shape() {
            return Err(Error::Shape { op: "adam_step", expected: p.value.shape().to_vec(), got: g.shape().to_vec() });
        }
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for i in 0..g.numel() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        }
        if !p.trainable {
            continue;
        }
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let mh = m[i] / b1t;
            let vh = v[i] / b2t;
            w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// A trainable model variant.
pub trait Trainer: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn kind(&self) -> ModelKind;
    fn net_config(&self, cfg: &TrainConfig) -> NetConfig;
    /// Loss on one pair and the gradient of every parameter of `net`.
    fn loss_and_grads(&self, net: &UNet, pair: &FollowUpPair, step: usize) -> Result<(LossReport, Vec<Tensor>)>;
}

fn volume_var(g: &Graph, v: &crate::volgrid::Volume) -> Var {
    g.constant(Tensor::from_volume(v))
}

fn mask_var(g: &Graph, m: &SegMask) -> Var {
    g.constant(Tensor::from_mask(m))
}

fn finish(g: &Graph, total: Var, net: &UNet, binding: &crate::autodiff::Binding) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(total)?;
    Ok(net.params().gradients(binding, &mut grads))
}

#[derive(Debug)]
pub struct WarpTrainer {
    pub sim: Box<dyn Similarity>,
    pub weights: LossWeights,
}

impl Trainer for WarpTrainer {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Warp
    }

    fn net_config(&self, cfg: &TrainConfig) -> NetConfig {
        cfg.net_config(ModelKind::Warp)
    }

    fn loss_and_grads(&self, net: &UNet, pair: &FollowUpPair, step: usize) -> Result<(LossReport, Vec<Tensor>)> {
        let t_itv = discretize_interval(pair.t_day)?;
        let g = Graph::new();
        let b = net.params().bind(&g);
        let x = volume_var(&g, &pair.baseline);
        let y = volume_var(&g, &pair.target);
        let s = mask_var(&g, &pair.baseline_mask);
        let st = mask_var(&g, &pair.target_mask);
        let enc = net.encode(&g, &b, x)?;
        let u = net.decode(&g, &b, &enc, net.temporal_code(t_itv)?.as_ref())?;
        let xw = warp_var(&g, x, u)?;
        let sw = warp_var(&g, s, u)?;
        let emphasis = Emphasis { mask: st, alpha: self.weights.alpha };
        let terms = WarpTerms {
            sim: self.sim.loss(&g, xw, y, Some(emphasis))?,
            seg: dice_loss(&g, sw, st, DICE_EPS)?,
            smooth: smooth_loss(&g, u)?,
            reg: {
                let u0 = net.decode(&g, &b, &enc, net.temporal_code(0)?.as_ref())?;
                warp_reg_loss(&g, self.sim.as_ref(), u0, x, y)?
            },
        };
        let total = warpnet_objective_var(&g, terms, &self.weights)?;
        let values = WarpTerms {
            sim: g.scalar_value(terms.sim),
            seg: g.scalar_value(terms.seg),
            smooth: g.scalar_value(terms.smooth),
            reg: g.scalar_value(terms.reg),
        };
        let report = LossReport::warp(step, values, &self.weights)?;
        Ok((report, finish(&g, total, net, &b)?))
    }
}

/// Trains the residual network against a frozen WarpNet.
#[derive(Debug)]
pub struct TextureTrainer {
    pub warp: WarpNet,
    pub weights: LossWeights,
}

impl Trainer for TextureTrainer {
    fn name(&self) -> &'static str {
        "texture"
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Texture
    }

    fn net_config(&self, cfg: &TrainConfig) -> NetConfig {
        cfg.net_config(ModelKind::Texture)
    }

    fn loss_and_grads(&self, net: &UNet, pair: &FollowUpPair, step: usize) -> Result<(LossReport, Vec<Tensor>)> {
        let t_itv = discretize_interval(pair.t_day)?;
        let g = Graph::new();
        let wb = self.warp.net.bind_frozen(&g);
        let x = volume_var(&g, &pair.baseline);
        let y = volume_var(&g, &pair.target);
        let s = mask_var(&g, &pair.baseline_mask);
        let st = mask_var(&g, &pair.target_mask);
        let enc = self.warp.net.encode(&g, &wb, x)?;
        let u = self.warp.net.decode(&g, &wb, &enc, self.warp.net.temporal_code(t_itv)?.as_ref())?;
        let u0 = self.warp.net.decode(&g, &wb, &enc, self.warp.net.temporal_code(0)?.as_ref())?;
        let xw = warp_var(&g, x, u)?;
        let sw = warp_var(&g, s, u)?;
        let xw0 = warp_var(&g, x, u0)?;

        let b = net.params().bind(&g);
        let r = net.forward(&g, &b, g.concat(x, xw)?, t_itv)?;
        let pred = g.add(xw, g.mul(sw, r)?)?;
        let r0 = net.forward(&g, &b, g.concat(x, xw0)?, 0)?;
        let terms = TextureTerms {
            sim: mse_loss(&g, pred, y, Some(Emphasis { mask: st, alpha: self.weights.alpha }))?,
            reg: residual_reg_loss(&g, r0),
        };
        let total = texturenet_objective_var(&g, terms, &self.weights)?;
        let values = TextureTerms { sim: g.scalar_value(terms.sim), reg: g.scalar_value(terms.reg) };
        let report = LossReport::texture(step, values, &self.weights)?;
        Ok((report, finish(&g, total, net, &b)?))
    }
}

/// Direct image-to-image U-Net, with or without the temporal encoding.
#[derive(Debug)]
pub struct BaselineTrainer {
    pub temporal: bool,
    pub weights: LossWeights,
}

impl Trainer for BaselineTrainer {
    fn name(&self) -> &'static str {
        if self.temporal {
            "baseline-tem"
        } else {
            "baseline"
        }
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Baseline
    }

    fn net_config(&self, cfg: &TrainConfig) -> NetConfig {
        NetConfig { temporal: self.temporal, ..cfg.net_config(ModelKind::Baseline) }
    }

    fn loss_and_grads(&self, net: &UNet, pair: &FollowUpPair, step: usize) -> Result<(LossReport, Vec<Tensor>)> {
        let t_itv = discretize_interval(pair.t_day)?;
        let g = Graph::new();
        let b = net.params().bind(&g);
        let x = volume_var(&g, &pair.baseline);
        let y = volume_var(&g, &pair.target);
        let st = mask_var(&g, &pair.target_mask);
        let pred = net.forward(&g, &b, x, t_itv)?;
        let sim = mse_loss(&g, pred, y, Some(Emphasis { mask: st, alpha: self.weights.alpha }))?;
        let report = LossReport::similarity_only(step, g.scalar_value(sim))?;
        Ok((report, finish(&g, sim, net, &b)?))
    }
}

pub const TRAINERS: &[&str] = &["warp", "texture", "baseline", "baseline-tem"];

/// Looks up a trainer. `texture` needs the frozen WarpNet it refines.
pub fn trainer_by_name(name: &str, cfg: &TrainConfig, warp: Option<WarpNet>) -> Result<Box<dyn Trainer>> {
    let weights = cfg.loss_weights;
    match name {
        "warp" => Ok(Box::new(WarpTrainer { sim: similarity_by_name(&cfg.similarity, cfg.ncc_window)?, weights })),
        "texture" => {
            let warp = warp.ok_or_else(|| Error::invalid("texture training needs a trained WarpNet"))?;
            Ok(Box::new(TextureTrainer { warp, weights }))
        }
        "baseline" => Ok(Box::new(BaselineTrainer { temporal: false, weights })),
        "baseline-tem" => Ok(Box::new(BaselineTrainer { temporal: true, weights })),
        other => Err(Error::UnknownStrategy { kind: "trainer", name: other.into(), available: TRAINERS.join(", ") }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trainer: String,
    pub config: TrainConfig,
    pub steps: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct NanDump<'a> {
    step: usize,
    epoch: usize,
    patient_id: &'a str,
    nodule_id: &'a str,
    t_day: i64,
    detail: String,
    param_norms: IndexMap<&'a str, f64>,
    last_reports: &'a [LossReport],
}

fn diverged(
    out: Option<&Path>,
    net: &UNet,
    step: usize,
    epoch: usize,
    pair: &FollowUpPair,
    detail: String,
    steps: &[LossReport],
) -> Error {
    if let Some(dir) = out {
        let dump = NanDump {
            step,
            epoch,
            patient_id: &pair.patient_id,
            nodule_id: &pair.nodule_id,
            t_day: pair.t_day,
            detail: detail.clone(),
            param_norms: net.params().iter().map(|(n, p)| (n, p.value.sq_norm().sqrt())).collect(),
            last_reports: &steps[steps.len().saturating_sub(10)..],
        };
        if let Ok(text) = serde_json::to_string_pretty(&dump) {
            let _ = fs::create_dir_all(dir).and_then(|_| fs::write(dir.join(NAN_DUMP_FILE), text));
        }
    }
    Error::Diverged { step, detail }
}

fn check_pairs(pairs: &[FollowUpPair], cube: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    for p in pairs {
        p.check()?;
        if p.shape() != [cube; 3] {
            return Err(Error::Shape { op: "training pair", expected: vec![cube; 3], got: p.shape().to_vec() });
        }
    }
    Ok(())
}

/// Runs the epoch loop for `trainer`. With `out` set, losses stream to
/// `losses.jsonl`, and the final model plus `run_record.json` land there.
pub fn fit(
    trainer: &dyn Trainer,
    pairs: &[FollowUpPair],
    val: &[FollowUpPair],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(UNet, RunRecord)> {
    cfg.validate()?;
    check_pairs(pairs, cfg.cube_size)?;
    if !val.is_empty() {
        check_pairs(val, cfg.cube_size)?;
    }
    if cfg.deterministic {
        parallel::set_deterministic(true);
    }
    let mut net = UNet::new(trainer.net_config(cfg))?;
    let mut state = AdamState::new(net.params());
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(dir.join(LOSSES_FILE))?))
        }
        None => None,
    };
    let mut record = RunRecord {
        trainer: trainer.name().into(),
        config: cfg.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for &i in &order {
            step += 1;
            let pair = if cfg.augment {
                Augmentation::random(&mut rng).apply_pair(&pairs[i])?
            } else {
                pairs[i].clone()
            };
            let (report, mut grads) = match trainer.loss_and_grads(&net, &pair, step) {
                Ok(v) => v,
                Err(Error::NonFinite(detail)) => {
                    return Err(diverged(out, &net, step, epoch, &pair, detail, &record.steps));
                }
                Err(e) => return Err(e),
            };
            if let Some(bad) = grads.iter().position(|t| !t.all_finite()) {
                let name = net.params().iter().nth(bad).map(|(n, _)| n.to_string()).unwrap_or_default();
                let detail = format!("non-finite gradient for {name}");
                return Err(diverged(out, &net, step, epoch, &pair, detail, &record.steps));
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adam_step(net.params_mut(), &grads, &mut state, &adam)?;
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &report)?;
                w.write_all(b"\n")?;
            }
            epoch_total += report.total;
            record.steps.push(report);
            if let (Some(dir), true) = (out, cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                let ck = save_model(&dir.join(format!("step{step:06}")), trainer.kind(), &net, &cfg.loss_weights)?;
                record.checkpoints.push(ck);
            }
        }
        let val_total = if val.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            for p in val {
                sum += trainer.loss_and_grads(&net, p, step)?.0.total;
            }
            Some(sum / val.len() as f64)
        };
        record.epochs.push(EpochSummary { epoch, mean_total: epoch_total / pairs.len() as f64, val_total });
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = out {
        record.checkpoints.push(save_model(dir, trainer.kind(), &net, &cfg.loss_weights)?);
        fs::write(dir.join(RUN_RECORD_FILE), serde_json::to_vec_pretty(&record)?)?;
    }
    Ok((net, record))
}

pub fn train_warpnet(pairs: &[FollowUpPair], cfg: &TrainConfig, out: Option<&Path>) -> Result<(WarpNet, RunRecord)> {
    let trainer = trainer_by_name("warp", cfg, None)?;
    let (net, record) = fit(trainer.as_ref(), pairs, &[], cfg, out)?;
    Ok((WarpNet::from_unet(net)?, record))
}

pub fn train_texturenet(
    pairs: &[FollowUpPair],
    warp: &WarpNet,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(TextureNet, RunRecord)> {
    let trainer = trainer_by_name("texture", cfg, Some(warp.clone()))?;
    let (net, record) = fit(trainer.as_ref(), pairs, &[], cfg, out)?;
    Ok((TextureNet::from_unet(net)?, record))
}

/// Texture training from a WarpNet checkpoint directory.
pub fn train_texturenet_from(
    pairs: &[FollowUpPair],
    warpnet_dir: &Path,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(TextureNet, RunRecord)> {
    let (net, _) = load_model(warpnet_dir, ModelKind::Warp)?;
    train_texturenet(pairs, &WarpNet::from_unet(net)?, cfg, out)
}

pub fn train_baseline(
    pairs: &[FollowUpPair],
    cfg: &TrainConfig,
    temporal: bool,
    out: Option<&Path>,
) -> Result<(UNet, RunRecord)> {
    let trainer = BaselineTrainer { temporal, weights: cfg.loss_weights };
    fit(&trainer, pairs, &[], cfg, out)
}

/// Loads WarpNet and, when present, TextureNet from one directory.
pub fn load_nofonet(dir: &Path) -> Result<NoFoNet> {
    let (warp, _) = load_model(dir, ModelKind::Warp)?;
    let texture = match load_model(dir, ModelKind::Texture) {
        Ok((net, _)) => Some(TextureNet::from_unet(net)?),
        Err(Error::Open { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(NoFoNet { warp: WarpNet::from_unet(warp)?, texture })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub warp: TrainConfig,
    /// Train a TextureNet per fold as well.
    pub texture: Option<TrainConfig>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { k: 5, seed: 0, warp: TrainConfig::default(), texture: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub patient_id: String,
    pub nodule_id: String,
    pub t_day: i64,
    pub psnr: f64,
    pub psnr_star: f64,
    pub dice: f64,
    pub truth: PairAssessment,
    pub predicted: PairAssessment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleOutcome {
    pub patient_id: String,
    pub nodule_id: String,
    pub fold: usize,
    pub label: bool,
    pub predicted: bool,
}

/// The six summary columns; classification entries are absent when a fold
/// lacks one of the classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub psnr: f64,
    pub psnr_star: f64,
    pub dice: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub g_mean: Option<f64>,
    pub counts: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub patients: Vec<String>,
    pub train_pairs: usize,
    pub metrics: MetricRow,
    pub pairs: Vec<PairOutcome>,
    pub nodules: Vec<NoduleOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub pooled: MetricRow,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn metric_row(pairs: &[PairOutcome], nodules: &[NoduleOutcome]) -> Result<MetricRow> {
    let preds: Vec<bool> = nodules.iter().map(|n| n.predicted).collect();
    let labels: Vec<bool> = nodules.iter().map(|n| n.label).collect();
    let counts = Confusion::tally(&preds, &labels)?;
    let report = counts.report().ok();
    Ok(MetricRow {
        psnr: mean(pairs.iter().map(|p| p.psnr)),
        psnr_star: mean(pairs.iter().map(|p| p.psnr_star)),
        dice: mean(pairs.iter().map(|p| p.dice)),
        sensitivity: report.map(|r| r.sensitivity),
        specificity: report.map(|r| r.specificity),
        g_mean: report.map(|r| r.g_mean),
        counts,
    })
}

/// Predicts one held-out pair and scores it.
pub fn evaluate_pair(model: &NoFoNet, pair: &FollowUpPair) -> Result<PairOutcome> {
    let pred = model.predict(&pair.baseline, &pair.baseline_mask, pair.t_day)?;
    let warped_mask = pred.warped_mask.threshold(0.5);
    let t = pair.t_day as f64;
    Ok(PairOutcome {
        patient_id: pair.patient_id.clone(),
        nodule_id: pair.nodule_id.clone(),
        t_day: pair.t_day,
        psnr: psnr(&pred.predicted, &pair.target, PSNR_PEAK)?,
        psnr_star: psnr_masked(&pred.predicted, &pair.target, &pair.target_mask, PSNR_PEAK)?,
        dice: dice_coef(&warped_mask, &pair.target_mask)?,
        truth: assess_masks(&pair.baseline_mask, &pair.target_mask, t)?,
        predicted: assess_masks(&pair.baseline_mask, &warped_mask, t)?,
    })
}

/// Nodule-level outcomes in first-appearance order: a nodule is positive if
/// any of its pairs is.
fn nodule_outcomes(pairs: &[PairOutcome], fold: usize) -> Vec<NoduleOutcome> {
    let mut out: IndexMap<(String, String), NoduleOutcome> = IndexMap::new();
    for p in pairs {
        let e = out.entry((p.patient_id.clone(), p.nodule_id.clone())).or_insert_with(|| NoduleOutcome {
            patient_id: p.patient_id.clone(),
            nodule_id: p.nodule_id.clone(),
            fold,
            label: false,
            predicted: false,
        });
        e.label |= p.truth.is_pd;
        e.predicted |= p.predicted.is_pd;
    }
    out.into_values().collect()
}

/// Patient-grouped k-fold cross-validation. With `ckpt_dir`, each fold's
/// models are written to `ckpt_dir/fold{i}`.
pub fn run_cv_experiment(pairs: &[FollowUpPair], cfg: &CvConfig, ckpt_dir: Option<&Path>) -> Result<CvReport> {
    let patients: Vec<String> = pairs.iter().map(|p| p.patient_id.clone()).collect();
    let folds = split_patients(&patients, cfg.k, cfg.seed)?;
    let mut reports = Vec::with_capacity(cfg.k);
    for f in 0..cfg.k {
        let (test, train): (Vec<FollowUpPair>, Vec<FollowUpPair>) =
            pairs.iter().cloned().partition(|p| folds.fold_of(&p.patient_id) == Some(f));
        let dir = ckpt_dir.map(|d| d.join(format!("fold{f}")));
        let (warp, _) = train_warpnet(&train, &cfg.warp, dir.as_deref())?;
        let texture = match &cfg.texture {
            Some(tc) => Some(train_texturenet(&train, &warp, tc, dir.as_deref())?.0),
            None => None,
        };
        let model = NoFoNet { warp, texture };
        let outcomes = test.iter().map(|p| evaluate_pair(&model, p)).collect::<Result<Vec<_>>>()?;
        let nodules = nodule_outcomes(&outcomes, f);
        reports.push(FoldReport {
            fold: f,
            patients: folds.patients_in(f).into_iter().map(String::from).collect(),
            train_pairs: train.len(),
            metrics: metric_row(&outcomes, &nodules)?,
            pairs: outcomes,
            nodules,
        });
    }
    let all_pairs: Vec<PairOutcome> = reports.iter().flat_map(|r| r.pairs.clone()).collect();
    let all_nodules: Vec<NoduleOutcome> = reports.iter().flat_map(|r| r.nodules.clone()).collect();
    let pooled = metric_row(&all_pairs, &all_nodules)?;
    Ok(CvReport { k: cfg.k, folds: reports, pooled })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleClassification {
    pub nodule_id: String,
    pub is_pd: bool,
    /// First pair meeting the criterion, as `t<i>-t<j>` timepoint indices.
    pub triggering_pair: String,
}

/// Labels every nodule of a manifest from its delineated masks.
pub fn classify_manifest(manifest: &Manifest) -> Result<Vec<NoduleClassification>> {
    manifest.validate()?;
    let mut out = Vec::new();
    for ((_, nid), rows) in manifest.nodules() {
        let masks = rows
            .iter()
            .map(|r| load_mask(&manifest.resolve(&r.mask_path)))
            .collect::<Result<Vec<SegMask>>>()?;
        let mut trigger = None;
        'pairs: for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let t = (rows[j].days_from_first - rows[i].days_from_first) as f64;
                if assess_masks(&masks[i], &masks[j], t)?.is_pd {
                    trigger = Some(format!("t{}-t{}", rows[i].timepoint_index, rows[j].timepoint_index));
                    break 'pairs;
                }
            }
        }
        out.push(NoduleClassification { nodule_id: nid, is_pd: trigger.is_some(), triggering_pair: trigger.unwrap_or_default() });
    }
    Ok(out)
}

pub fn write_classification_csv(path: &Path, rows: &[NoduleClassification]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
