//! High-resolution refinement network: a U-shaped encoder/decoder built
//! entirely from spectrally normalized convolutions, guided by a one-hot
//! trimap, with saliency and log-variance heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrscn::saliency_plane;
use crate::nn::layers::{BatchNorm, NormTrace, SnConv};
use crate::nn::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::raster::{Image, SaliencyMap, Trimap, UncertaintyMap, TRIMAP_BACKGROUND, TRIMAP_SALIENT};

pub use crate::nn::spectral::{spectral_normalize, MatrixView, SpectralState};

pub const INPUT_CHANNELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HrrnConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Width is doubled per encoder stage up to this many channels.
    pub max_channels: usize,
    /// Channels of the raw-input shortcut.
    pub input_shortcut_channels: usize,
}

impl Default for HrrnConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            max_channels: 256,
            input_shortcut_channels: 16,
        }
    }
}

impl HrrnConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            max_channels: 32,
            input_shortcut_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 6 {
            return Err(Error::param(format!("depth {} outside 1..=6", self.depth)));
        }
        if self.base_channels == 0 || self.input_shortcut_channels == 0 {
            return Err(Error::param("channel counts must be positive"));
        }
        if self.max_channels < self.base_channels {
            return Err(Error::param("max_channels below base_channels"));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        (self.base_channels << stage.min(20)).min(self.max_channels)
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let m = 1 << self.depth;
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::shape(format!("tile {height}x{width} is not divisible by {m}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrrnInput {
    pub image: Image,
    pub trimap: Trimap,
}

impl HrrnInput {
    pub fn new(image: Image, trimap: Trimap) -> Result<Self> {
        if image.dims() != trimap.dims() {
            return Err(Error::shape(format!(
                "image {:?} and trimap {:?} differ",
                image.dims(),
                trimap.dims()
            )));
        }
        Ok(Self { image, trimap })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// RGB followed by the three one-hot trimap planes.
    pub fn channels(&self) -> Vec<f64> {
        let mut v = self.image.to_chw();
        v.extend(self.trimap.one_hot());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrrnOutput {
    pub saliency: SaliencyMap,
    pub logvar: UncertaintyMap,
}

#[derive(Debug, Clone, Copy)]
pub struct HrrnVars {
    pub saliency: Var,
    pub logvar: Var,
}

/// Weight of the newest batch in the running normalization statistics.
const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
struct SnBlock {
    conv: SnConv,
    norm: BatchNorm,
}

impl SnBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: SnConv::new(store, rng, &format!("{name}.conv"), cin, cout, (3, 3), stride),
            norm: BatchNorm::new(store, &format!("{name}.norm"), cout, ParamGroup::Head),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, trace: Option<&mut NormTrace>) -> Var {
        let y = self.conv.forward(g, s, x);
        let y = self.norm.forward(g, s, y, trace);
        g.relu(y)
    }
}

/// Two blocks mapping a feature to `cout` channels.
#[derive(Debug, Clone)]
struct Shortcut {
    first: SnBlock,
    second: SnBlock,
}

impl Shortcut {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            first: SnBlock::new(store, rng, &format!("{name}.0"), cin, cout, 1),
            second: SnBlock::new(store, rng, &format!("{name}.1"), cout, cout, 1),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, mut trace: Option<&mut NormTrace>) -> Var {
        let y = self.first.forward(g, s, x, trace.as_deref_mut());
        self.second.forward(g, s, y, trace)
    }
}

#[derive(Debug, Clone)]
pub struct Hrrn {
    pub config: HrrnConfig,
    pub store: ParamStore,
    encoder: Vec<SnBlock>,
    bottleneck: SnBlock,
    skips: Vec<Shortcut>,
    decoder: Vec<SnBlock>,
    input_shortcut: Shortcut,
    saliency_head: SnConv,
    logvar_head: SnConv,
}

impl Hrrn {
    pub fn new(config: HrrnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (st, r) = (&mut store, &mut rng);
        let depth = config.depth;
        let ch = |i: usize| config.stage_channels(i);

        // encoder[i] produces stage i at 1/2^(i+1) resolution
        let mut encoder = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for i in 0..depth {
            encoder.push(SnBlock::new(st, r, &format!("enc{i}"), cin, ch(i), 2));
            cin = ch(i);
        }
        let bottleneck = SnBlock::new(st, r, "bottleneck", ch(depth - 1), ch(depth - 1), 1);
        let mut skips = Vec::new();
        let mut decoder = Vec::new();
        for i in (0..depth).rev() {
            skips.push(Shortcut::new(st, r, &format!("skip{i}"), ch(i), ch(i)));
            let out = if i == 0 { config.base_channels } else { ch(i - 1) };
            decoder.push(SnBlock::new(st, r, &format!("dec{i}"), ch(i), out, 1));
        }
        let isc = config.input_shortcut_channels;
        let input_shortcut = Shortcut::new(st, r, "input_shortcut", INPUT_CHANNELS, isc);
        let head_in = config.base_channels + isc;
        let saliency_head = SnConv::new(st, r, "head.saliency", head_in, 1, (3, 3), 1);
        let logvar_head = SnConv::new(st, r, "head.logvar", head_in, 1, (3, 3), 1);
        Ok(Self {
            config,
            store,
            encoder,
            bottleneck,
            skips,
            decoder,
            input_shortcut,
            saliency_head,
            logvar_head,
        })
    }

    fn sn_layers(&self) -> Vec<&SnConv> {
        let mut v: Vec<&SnConv> = self.encoder.iter().map(|b| &b.conv).collect();
        v.push(&self.bottleneck.conv);
        for s in self.skips.iter().chain(std::iter::once(&self.input_shortcut)) {
            v.push(&s.first.conv);
            v.push(&s.second.conv);
        }
        v.extend(self.decoder.iter().map(|b| &b.conv));
        v.push(&self.saliency_head);
        v.push(&self.logvar_head);
        v
    }

    /// Every spectrally normalized kernel and its `u` estimate, by layer name.
    pub fn spectral_layers(&self) -> Vec<(String, &Tensor, &[f64])> {
        self.sn_layers()
            .into_iter()
            .map(|l| {
                let name = self.store.entry(l.conv.weight).name.clone();
                (name, self.store.get(l.conv.weight), self.store.get(l.u).data.as_slice())
            })
            .collect()
    }

    /// Advances every layer's power iteration.
    pub fn power_iterate(&mut self, iterations: usize) {
        let layers: Vec<SnConv> = self.sn_layers().into_iter().cloned().collect();
        for l in layers {
            l.power_iterate(&mut self.store, iterations);
        }
    }

    /// Inference graph: normalization uses the running statistics.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<HrrnVars> {
        self.build_graph(g, x, None)
    }

    /// Training graph: normalization uses the batch statistics, which are
    /// logged in the returned trace for [`Hrrn::update_running_statistics`].
    pub fn forward_graph_train(&self, g: &mut Graph, x: Var) -> Result<(HrrnVars, NormTrace)> {
        let mut trace = NormTrace::default();
        let vars = self.build_graph(g, x, Some(&mut trace))?;
        Ok((vars, trace))
    }

    pub fn update_running_statistics(&mut self, g: &Graph, trace: &NormTrace) {
        trace.update_running(g, &mut self.store, NORM_MOMENTUM);
    }

    fn build_graph(&self, g: &mut Graph, x: Var, mut trace: Option<&mut NormTrace>) -> Result<HrrnVars> {
        let [_, c, h, w] = g.shape(x);
        if c != INPUT_CHANNELS {
            return Err(Error::shape(format!("expected {INPUT_CHANNELS} input channels, got {c}")));
        }
        self.config.check_dims(h, w)?;
        let s = &self.store;
        let mut feats = Vec::with_capacity(self.config.depth);
        let mut y = x;
        for block in &self.encoder {
            y = block.forward(g, s, y, trace.as_deref_mut());
            feats.push(y);
        }
        y = self.bottleneck.forward(g, s, y, trace.as_deref_mut());
        for (k, i) in (0..self.config.depth).rev().enumerate() {
            let skip = self.skips[k].forward(g, s, feats[i], trace.as_deref_mut());
            y = g.add(y, skip);
            let (th, tw) = (h >> i, w >> i);
            y = g.resize_nearest(y, th, tw);
            y = self.decoder[k].forward(g, s, y, trace.as_deref_mut());
        }
        let raw = self.input_shortcut.forward(g, s, x, trace);
        let fin = g.concat(&[y, raw]);
        let z = self.saliency_head.forward(g, s, fin);
        let saliency = g.sigmoid(z);
        let logvar = self.logvar_head.forward(g, s, fin);
        Ok(HrrnVars { saliency, logvar })
    }

    pub fn forward_batch(&self, inputs: &[HrrnInput]) -> Result<Vec<HrrnOutput>> {
        let x = inputs_to_tensor(inputs)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let vars = self.forward_graph(&mut g, xv)?;
        let lv = g.value(vars.logvar);
        if !lv.is_finite() {
            return Err(Error::NonFinite("log-variance".into()));
        }
        Ok((0..inputs.len())
            .map(|n| HrrnOutput {
                saliency: saliency_plane(g.value(vars.saliency), n),
                logvar: UncertaintyMap::from_raw(lv.h(), lv.w(), lv.plane(n, 0).to_vec()),
            })
            .collect())
    }

    pub fn forward(&self, input: &HrrnInput) -> Result<HrrnOutput> {
        Ok(self.forward_batch(std::slice::from_ref(input))?.remove(0))
    }

    pub fn refine(&self, image: &Image, trimap: &Trimap) -> Result<HrrnOutput> {
        self.forward(&HrrnInput::new(image.clone(), trimap.clone())?)
    }
}

pub fn inputs_to_tensor(inputs: &[HrrnInput]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::param("empty tile batch"))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(inputs.len() * INPUT_CHANNELS * h * w);
    for inp in inputs {
        if inp.dims() != (h, w) {
            return Err(Error::shape(format!("batch mixes {h}x{w} and {:?}", inp.dims())));
        }
        data.extend(inp.channels());
    }
    Ok(Tensor::from_vec([inputs.len(), INPUT_CHANNELS, h, w], data))
}

/// Optional post-processing: replaces the prediction on definite pixels by
/// the trimap label.
pub fn overwrite_definite(saliency: &SaliencyMap, trimap: &Trimap) -> Result<SaliencyMap> {
    if saliency.dims() != trimap.dims() {
        return Err(Error::shape("saliency and trimap differ in size"));
    }
    let data = saliency
        .as_slice()
        .iter()
        .zip(trimap.as_slice())
        .map(|(&s, &t)| match t {
            TRIMAP_BACKGROUND => 0.0,
            TRIMAP_SALIENT => 1.0,
            _ => s,
        })
        .collect();
    Ok(SaliencyMap::from_raw(saliency.height(), saliency.width(), data))
}
