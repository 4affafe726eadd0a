//! Encoder–decoder networks and the composed follow-up predictor.
//!
//! All three models share one U-Net backbone: stride-2 convolutions down,
//! trilinear 2× upsampling plus skip concatenation back up, leaky-ReLU
//! activations, and a near-zero final layer so a fresh model predicts an
//! almost-identity warp (or an almost-zero residual). The temporal encoding
//! is added to the bottleneck.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, Binding, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::tem::{self, TemporalEncoding};
use crate::volgrid::{SegMask, Volume};
use crate::warp::{warp_var, DisplacementField, FieldPredictor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const FINAL_INIT_STD: f64 = 1e-5;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub output_channels: usize,
    pub cube_size: usize,
    pub seed: u64,
    /// inject the temporal encoding at the bottleneck
    pub temporal: bool,
}

impl NetConfig {
    pub fn full(input_channels: usize, output_channels: usize, cube_size: usize, seed: u64) -> Self {
        NetConfig {
            input_channels,
            encoder_channels: vec![16, 32, 32, 32],
            decoder_channels: vec![32, 32, 32, 32, 16, 16],
            output_channels,
            cube_size,
            seed,
            temporal: true,
        }
    }

    /// Half-width channel plan for desk-scale runs.
    pub fn desk(input_channels: usize, output_channels: usize, cube_size: usize, seed: u64) -> Self {
        NetConfig {
            encoder_channels: vec![8, 16, 16, 16],
            decoder_channels: vec![16, 16, 16, 16, 8, 8],
            ..NetConfig::full(input_channels, output_channels, cube_size, seed)
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.encoder_channels.len();
        if levels == 0 || self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::invalid("channel lists must be non-empty and positive"));
        }
        if self.decoder_channels.len() < levels + 1 {
            return Err(Error::invalid(format!(
                "need at least {} decoder stages for {levels} encoder stages",
                levels + 1
            )));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::invalid("input/output channels must be positive"));
        }
        let factor = 1usize << levels;
        if self.cube_size == 0 || self.cube_size % factor != 0 {
            return Err(Error::invalid(format!(
                "cube size {} not divisible by {factor}",
                self.cube_size
            )));
        }
        if self.temporal && self.bottleneck_channels() < 2 {
            return Err(Error::invalid("temporal encoding needs >= 2 bottleneck channels"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlots {
    w: usize,
    b: usize,
}

/// Activations kept from the encoder: the input plus one map per level.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub input: Var,
    pub levels: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: NetConfig,
    params: ParamStore,
    enc: Vec<ConvSlots>,
    dec: Vec<ConvSlots>,
    out: ConvSlots,
}

fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl UNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let k3 = KERNEL * KERNEL * KERNEL;
        let gain = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
        let mut conv = |params: &mut ParamStore, name: String, cin: usize, cout: usize, std: Option<f64>| -> Result<ConvSlots> {
            let std = std.unwrap_or_else(|| (gain / (cin * k3) as f64).sqrt());
            let w = params.register(format!("{name}.weight"), he_init(&mut rng, &[cout, cin, KERNEL, KERNEL, KERNEL], std))?;
            let b = params.register(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
            Ok(ConvSlots { w, b })
        };

        let levels = config.encoder_channels.len();
        let mut enc = Vec::with_capacity(levels);
        let mut cin = config.input_channels;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            enc.push(conv(&mut params, format!("enc{i}"), cin, c, None)?);
            cin = c;
        }
        let mut dec = Vec::with_capacity(config.decoder_channels.len());
        for (j, &c) in config.decoder_channels.iter().enumerate() {
            let skip = match j {
                0 => 0,
                j if j < levels => config.encoder_channels[levels - 1 - j],
                j if j == levels => config.input_channels,
                _ => 0,
            };
            dec.push(conv(&mut params, format!("dec{j}"), cin + skip, c, None)?);
            cin = c;
        }
        let out = conv(&mut params, "out".into(), cin, config.output_channels, Some(FINAL_INIT_STD))?;
        Ok(UNet { config, params, enc, dec, out })
    }

    /// Rebuilds a network around stored parameters, checking names and shapes.
    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        let mut net = UNet::new(config)?;
        if params.len() != net.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, network expects {}",
                params.len(),
                net.params.len()
            )));
        }
        for ((name, p), (want, q)) in params.iter().zip(net.params.iter()) {
            if name != want || p.value.shape() != q.value.shape() {
                return Err(Error::invalid(format!("checkpoint parameter {name} does not match {want}")));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn conv_act(&self, g: &Graph, b: &Binding, x: Var, slots: ConvSlots, stride: usize) -> Result<Var> {
        let y = g.conv3d(x, b.var(slots.w), Some(b.var(slots.b)), stride, KERNEL / 2)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.shape(x);
        let n = self.config.cube_size;
        let want = vec![self.config.input_channels, n, n, n];
        if shape != want {
            return Err(Error::Shape { op: "network input", expected: want, got: shape });
        }
        Ok(())
    }

    pub fn encode(&self, g: &Graph, b: &Binding, x: Var) -> Result<Encoded> {
        self.check_input(g, x)?;
        let mut levels = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for slots in &self.enc {
            h = self.conv_act(g, b, h, *slots, 2)?;
            levels.push(h);
        }
        Ok(Encoded { input: x, levels })
    }

    pub fn decode(&self, g: &Graph, b: &Binding, enc: &Encoded, code: Option<&TemporalEncoding>) -> Result<Var> {
        let depth = self.enc.len();
        let mut h = *enc.levels.last().expect("at least one level");
        if let Some(code) = code {
            h = tem::inject(g, h, code)?;
        }
        for (j, slots) in self.dec.iter().enumerate() {
            if j >= 1 && j <= depth {
                h = g.upsample2x(h)?;
                let skip = if j < depth { enc.levels[depth - 1 - j] } else { enc.input };
                h = g.concat(h, skip)?;
            }
            h = self.conv_act(g, b, h, *slots, 1)?;
        }
        g.conv3d(h, b.var(self.out.w), Some(b.var(self.out.b)), 1, KERNEL / 2)
    }

    pub fn temporal_code(&self, t_itv: u32) -> Result<Option<TemporalEncoding>> {
        if self.config.temporal {
            Ok(Some(tem::encode(t_itv, self.config.bottleneck_channels())?))
        } else {
            Ok(None)
        }
    }

    pub fn forward(&self, g: &Graph, b: &Binding, x: Var, t_itv: u32) -> Result<Var> {
        let enc = self.encode(g, b, x)?;
        self.decode(g, b, &enc, self.temporal_code(t_itv)?.as_ref())
    }

    /// Places parameters on `g` as constants, for inference.
    pub fn bind_frozen(&self, g: &Graph) -> Binding {
        let mut frozen = self.params.clone();
        frozen.set_trainable(false);
        frozen.bind(g)
    }

    /// Inference on plain tensors.
    pub fn infer(&self, input: Tensor, t_itv: u32) -> Result<Tensor> {
        let g = Graph::new();
        let b = self.bind_frozen(&g);
        let x = g.constant(input);
        let y = self.forward(&g, &b, x, t_itv)?;
        Ok(g.value(y).as_ref().clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Warp,
    Texture,
    Baseline,
}

impl ModelKind {
    pub fn stem(self) -> &'static str {
        match self {
            ModelKind::Warp => "warpnet",
            ModelKind::Texture => "texturenet",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn io_channels(self) -> (usize, usize) {
        match self {
            ModelKind::Warp => (1, 3),
            ModelKind::Texture => (2, 1),
            ModelKind::Baseline => (1, 1),
        }
    }
}

/// JSON written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: ModelKind,
    pub config: NetConfig,
    pub loss_weights: LossWeights,
}

pub fn checkpoint_paths(dir: &Path, kind: ModelKind) -> (PathBuf, PathBuf) {
    (dir.join(format!("{}.ck01", kind.stem())), dir.join(format!("{}.json", kind.stem())))
}

pub fn save_model(dir: &Path, kind: ModelKind, net: &UNet, weights: &LossWeights) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let (ck, side) = checkpoint_paths(dir, kind);
    save_checkpoint(&ck, net.params())?;
    let sidecar = Sidecar { kind, config: net.config().clone(), loss_weights: *weights };
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(ck)
}

pub fn load_model(dir: &Path, kind: ModelKind) -> Result<(UNet, Sidecar)> {
    let (ck, side) = checkpoint_paths(dir, kind);
    let text = std::fs::read(&side).map_err(|source| Error::Open { path: side.clone(), source })?;
    let sidecar: Sidecar = serde_json::from_slice(&text)?;
    if sidecar.kind != kind {
        return Err(Error::invalid(format!("{} holds a {:?} model", side.display(), sidecar.kind)));
    }
    let net = UNet::from_params(sidecar.config.clone(), load_checkpoint(&ck)?)?;
    Ok((net, sidecar))
}

fn expect_io(net: &UNet, kind: ModelKind) -> Result<()> {
    let (i, o) = kind.io_channels();
    let c = net.config();
    if c.input_channels != i || c.output_channels != o {
        return Err(Error::invalid(format!(
            "{kind:?} needs {i} input / {o} output channels, config has {} / {}",
            c.input_channels, c.output_channels
        )));
    }
    Ok(())
}

/// Predicts the displacement field `u` from a baseline cube and interval.
#[derive(Debug, Clone)]
pub struct WarpNet {
    pub net: UNet,
}

impl WarpNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        WarpNet::from_unet(UNet::new(config)?)
    }

    pub fn from_unet(net: UNet) -> Result<Self> {
        expect_io(&net, ModelKind::Warp)?;
        Ok(WarpNet { net })
    }

    pub fn forward(&self, g: &Graph, b: &Binding, x: Var, t_itv: u32) -> Result<Var> {
        self.net.forward(g, b, x, t_itv)
    }
}

impl FieldPredictor for WarpNet {
    fn predict_field(&self, baseline: &Volume, t_itv: u32) -> Result<DisplacementField> {
        DisplacementField::new(self.net.infer(Tensor::from_volume(baseline), t_itv)?)
    }
}

/// Predicts the intensity residual `r` from the baseline and its warp.
#[derive(Debug, Clone)]
pub struct TextureNet {
    pub net: UNet,
}

impl TextureNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        TextureNet::from_unet(UNet::new(config)?)
    }

    pub fn from_unet(net: UNet) -> Result<Self> {
        expect_io(&net, ModelKind::Texture)?;
        Ok(TextureNet { net })
    }

    pub fn forward(&self, g: &Graph, b: &Binding, baseline: Var, warped: Var, t_itv: u32) -> Result<Var> {
        let (sa, sb) = (g.shape(baseline), g.shape(warped));
        if sa != sb {
            return Err(Error::Shape { op: "texturenet inputs", expected: sa, got: sb });
        }
        let x = g.concat(baseline, warped)?;
        self.net.forward(g, b, x, t_itv)
    }

    pub fn predict_residual(&self, baseline: &Volume, warped: &Volume, t_itv: u32) -> Result<Tensor> {
        let g = Graph::new();
        let b = self.net.bind_frozen(&g);
        let x = g.constant(Tensor::from_volume(baseline));
        let w = g.constant(Tensor::from_volume(warped));
        let r = self.forward(&g, &b, x, w, t_itv)?;
        Ok(g.value(r).as_ref().clone())
    }
}

/// Direct image-to-image predictor used as a comparison baseline.
#[derive(Debug, Clone)]
pub struct BaselineNet {
    pub net: UNet,
}

impl BaselineNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        BaselineNet::from_unet(UNet::new(config)?)
    }

    pub fn from_unet(net: UNet) -> Result<Self> {
        expect_io(&net, ModelKind::Baseline)?;
        Ok(BaselineNet { net })
    }

    pub fn forward(&self, g: &Graph, b: &Binding, x: Var, t_itv: u32) -> Result<Var> {
        self.net.forward(g, b, x, t_itv)
    }

    pub fn predict(&self, baseline: &Volume, t_itv: u32) -> Result<Volume> {
        let out = self.net.infer(Tensor::from_volume(baseline), t_itv)?;
        out.channel_volume(0)
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub t_day: i64,
    pub t_itv: u32,
    pub field: DisplacementField,
    pub warped: Volume,
    pub warped_mask: SegMask,
    pub residual: Option<Volume>,
    pub predicted: Volume,
}

/// WarpNet plus an optional TextureNet: `ŷ = φ∘x + (φ∘s)·r`.
#[derive(Debug, Clone)]
pub struct NoFoNet {
    pub warp: WarpNet,
    pub texture: Option<TextureNet>,
}

impl NoFoNet {
    pub fn predict(&self, baseline: &Volume, mask: &SegMask, t_day: i64) -> Result<Prediction> {
        mask.check_pairs_with(baseline)?;
        let t_itv = tem::discretize_interval(t_day)?;
        let g = Graph::new();
        let wb = self.warp.net.bind_frozen(&g);
        let x = g.constant(Tensor::from_volume(baseline));
        let s = g.constant(Tensor::from_mask(mask));
        let u = self.warp.forward(&g, &wb, x, t_itv)?;
        let xw = warp_var(&g, x, u)?;
        let sw = warp_var(&g, s, u)?;
        self.compose(&g, x, u, xw, sw, t_itv, t_day, baseline)
    }

    /// Prediction with a caller-supplied field, bypassing WarpNet.
    pub fn predict_with_field(
        &self,
        baseline: &Volume,
        mask: &SegMask,
        field: &DisplacementField,
        t_day: i64,
    ) -> Result<Prediction> {
        let t_itv = tem::discretize_interval(t_day)?;
        let g = Graph::new();
        let x = g.constant(Tensor::from_volume(baseline));
        let s = g.constant(Tensor::from_mask(mask));
        let u = g.constant(field.tensor().clone());
        let xw = warp_var(&g, x, u)?;
        let sw = warp_var(&g, s, u)?;
        self.compose(&g, x, u, xw, sw, t_itv, t_day, baseline)
    }

    #[allow(clippy::too_many_arguments)]
    fn compose(
        &self,
        g: &Graph,
        x: Var,
        u: Var,
        xw: Var,
        sw: Var,
        t_itv: u32,
        t_day: i64,
        baseline: &Volume,
    ) -> Result<Prediction> {
        let with_meta = |mut v: Volume| {
            v.spacing = baseline.spacing;
            v.with_origin(baseline.origin)
        };
        let field = DisplacementField::new(g.value(u).as_ref().clone())?;
        let warped = with_meta(g.value(xw).channel_volume(0)?);
        let warped_mask = SegMask::new(with_meta(g.value(sw).channel_volume(0)?).map(|v| v.clamp(0.0, 1.0)))?;
        let (residual, predicted) = match &self.texture {
            Some(tex) => {
                let tb = tex.net.bind_frozen(g);
                let r = tex.forward(g, &tb, x, xw, t_itv)?;
                let masked = g.mul(sw, r)?;
                let y = g.add(xw, masked)?;
                (Some(with_meta(g.value(r).channel_volume(0)?)), with_meta(g.value(y).channel_volume(0)?))
            }
            None => (None, warped.clone()),
        };
        Ok(Prediction { t_day, t_itv, field, warped, warped_mask, residual, predicted })
    }
}
