//! Low-resolution saliency classification network: a small convolutional
//! pyramid, one MECF bridge per level, a bottom-up decoder and the
//! saliency-guided attention head that emits trimap logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv, ConvBlock};
use crate::nn::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::raster::{Image, SaliencyMap, Trimap, TRIMAP_UNCERTAIN};

pub const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of F3..F6.
    pub stage_channels: [usize; 4],
    pub input_size: usize,
    /// Downsampling factor of F3..F6 relative to the input.
    pub stage_strides: [usize; 4],
    pub stem_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [32, 64, 128, 128],
            input_size: 128,
            stage_strides: [4, 8, 16, 32],
            stem_channels: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0 || c % 2 != 0) {
            return Err(Error::param(format!(
                "stage channels must be positive and even, got {:?}",
                self.stage_channels
            )));
        }
        if self.stage_strides != [4, 8, 16, 32] {
            return Err(Error::param(format!(
                "stage strides must be [4, 8, 16, 32], got {:?}",
                self.stage_strides
            )));
        }
        if self.stem_channels == 0 {
            return Err(Error::param("stem channels must be positive"));
        }
        check_divisible(self.input_size, self.input_size)
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides[3]
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!("input {h}x{w} is not divisible by 32")));
    }
    Ok(())
}

/// Large-kernel sizes of the GCN stack at each level, finest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcnSchedule {
    pub kernels_per_level: [Vec<usize>; 4],
}

impl Default for GcnSchedule {
    fn default() -> Self {
        Self {
            kernels_per_level: [vec![7, 11, 15], vec![7, 11, 15], vec![7, 11], vec![7]],
        }
    }
}

impl GcnSchedule {
    pub fn validate(&self) -> Result<()> {
        for k in self.kernels_per_level.iter().flatten() {
            if k % 2 == 0 {
                return Err(Error::param(format!("GCN kernel {k} is even")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrscnConfig {
    pub backbone: BackboneConfig,
    pub gcn: GcnSchedule,
    pub decoder_channels: usize,
    pub norm_groups: usize,
}

impl Default for LrscnConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            gcn: GcnSchedule::default(),
            decoder_channels: 32,
            norm_groups: 4,
        }
    }
}

impl LrscnConfig {
    /// Narrow variant used for CPU training.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_channels: [16, 32, 48, 64],
                stem_channels: 8,
                ..BackboneConfig::default()
            },
            decoder_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.gcn.validate()?;
        if self.decoder_channels == 0 || self.norm_groups == 0 {
            return Err(Error::param("decoder channels and norm groups must be positive"));
        }
        Ok(())
    }
}

/// Three logit planes (background, uncertain, salient), channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimapLogits {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl TrimapLogits {
    pub fn plane(&self, label: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[label * n..(label + 1) * n]
    }

    /// Per-pixel argmax; any tie for the maximum resolves to the uncertain label.
    pub fn argmax(&self) -> Trimap {
        let n = self.height * self.width;
        let labels = (0..n)
            .map(|i| {
                let z = [self.data[i], self.data[n + i], self.data[2 * n + i]];
                let m = z[0].max(z[1]).max(z[2]);
                let hits = z.iter().filter(|&&v| v == m).count();
                if hits > 1 || z[1] == m {
                    TRIMAP_UNCERTAIN
                } else if z[2] == m {
                    2
                } else {
                    0
                }
            })
            .collect();
        Trimap::from_raw(self.height, self.width, labels)
    }
}

#[derive(Debug, Clone)]
pub struct LrscnOutput {
    /// D3..D6 saliency, finest first; D3 is the SGA saliency.
    pub saliency_levels: Vec<SaliencyMap>,
    pub trimap_logits: TrimapLogits,
    pub refined_saliency: SaliencyMap,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LrscnVars {
    /// Sigmoid saliency of D3..D6.
    pub levels: [Var; 4],
    pub trimap_logits: Var,
}

#[derive(Debug, Clone)]
struct Gcn {
    a1: Conv,
    a2: Conv,
    b1: Conv,
    b2: Conv,
}

impl Gcn {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, k: usize) -> Self {
        let h = ParamGroup::Head;
        Self {
            a1: Conv::new(store, rng, &format!("{name}.a1"), c, c, (k, 1), 1, h),
            a2: Conv::new(store, rng, &format!("{name}.a2"), c, c, (1, k), 1, h),
            b1: Conv::new(store, rng, &format!("{name}.b1"), c, c, (1, k), 1, h),
            b2: Conv::new(store, rng, &format!("{name}.b2"), c, c, (k, 1), 1, h),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let a = self.a1.forward(g, s, x);
        let a = self.a2.forward(g, s, a);
        let b = self.b1.forward(g, s, x);
        let b = self.b2.forward(g, s, b);
        g.add(a, b)
    }
}

#[derive(Debug, Clone)]
struct Mecf {
    half: usize,
    down: Conv,
    gcns: Vec<Gcn>,
    compress: Conv,
    cf1: Conv,
    cf2: Conv,
    align: Conv,
}

impl Mecf {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, level: usize, c: usize, c_high: usize, kernels: &[usize]) -> Self {
        let name = format!("mecf{}", level + 3);
        let h = ParamGroup::Head;
        let half = c / 2;
        let squeeze = half.div_ceil(2);
        Self {
            half,
            down: Conv::new(store, rng, &format!("{name}.down"), half, half, (3, 3), 1, h),
            gcns: kernels
                .iter()
                .map(|&k| Gcn::new(store, rng, &format!("{name}.gcn{k}"), half, k))
                .collect(),
            compress: Conv::new(store, rng, &format!("{name}.compress"), half, squeeze, (1, 1), 1, h),
            cf1: Conv::new(store, rng, &format!("{name}.cf1"), squeeze, squeeze, (3, 3), 1, h),
            cf2: Conv::new(store, rng, &format!("{name}.cf2"), squeeze, half, (3, 3), 1, h),
            align: Conv::new(store, rng, &format!("{name}.align"), c_high / 2, half, (1, 1), 1, h),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, f_l: Var, f_h: Var) -> Var {
        let [_, _, h, w] = g.shape(f_l);
        let me = g.slice_channels(f_l, 0, self.half);
        let cf = g.slice_channels(f_l, self.half, self.half);

        let mut m = me;
        if h % 2 == 0 && w % 2 == 0 {
            let p = g.avg_pool2(me);
            let p = self.down.forward(g, s, p);
            let up = g.resize_nearest(p, h, w);
            let sum = g.add(me, up);
            m = g.relu(sum);
        }
        for gcn in &self.gcns {
            let y = gcn.forward(g, s, m);
            m = g.relu(y);
        }

        let c = self.compress.forward(g, s, cf);
        let c = g.relu(c);
        let c = self.cf1.forward(g, s, c);
        let c = g.relu(c);
        let c = self.cf2.forward(g, s, c);
        let ch = g.shape(f_h)[1];
        let high = g.slice_channels(f_h, ch / 2, ch / 2);
        let high = self.align.forward(g, s, high);
        let high = g.resize_nearest(high, h, w);
        let fused = g.add(c, high);
        let fused = g.relu(fused);
        g.concat(&[m, fused])
    }
}

/// The full network with its parameters.
#[derive(Debug, Clone)]
pub struct Lrscn {
    pub config: LrscnConfig,
    pub store: ParamStore,
    stem: ConvBlock,
    stages: Vec<(ConvBlock, ConvBlock)>,
    mecf: Vec<Mecf>,
    decoder: Vec<ConvBlock>,
    heads: Vec<Conv>,
    sga_saliency: Conv,
    sga_logits: Conv,
}

impl Lrscn {
    pub fn new(config: LrscnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let st = &mut store;
        let r = &mut rng;
        let bb = &config.backbone;
        let ng = config.norm_groups;
        let (b, h) = (ParamGroup::Backbone, ParamGroup::Head);

        let stem = ConvBlock::new(st, r, "stem", 3, bb.stem_channels, (3, 3), 2, ng, b);
        let mut stages = Vec::new();
        let mut cin = bb.stem_channels;
        for (i, &c) in bb.stage_channels.iter().enumerate() {
            let name = format!("stage{}", i + 3);
            let down = ConvBlock::new(st, r, &format!("{name}.down"), cin, c, (3, 3), 2, ng, b);
            let body = ConvBlock::new(st, r, &format!("{name}.body"), c, c, (3, 3), 1, ng, b);
            stages.push((down, body));
            cin = c;
        }

        let c_high = bb.stage_channels[3];
        let mecf = (0..LEVELS)
            .map(|l| Mecf::new(st, r, l, bb.stage_channels[l], c_high, &config.gcn.kernels_per_level[l]))
            .collect();

        let dc = config.decoder_channels;
        let mut decoder = Vec::new();
        for l in 0..LEVELS {
            let extra = if l == LEVELS - 1 { 0 } else { dc };
            decoder.push(ConvBlock::new(
                st,
                r,
                &format!("decoder{}", l + 3),
                bb.stage_channels[l] + extra,
                dc,
                (3, 3),
                1,
                ng,
                h,
            ));
        }
        let heads = (1..LEVELS)
            .map(|l| Conv::new(st, r, &format!("head{}", l + 3), dc, 1, (3, 3), 1, h))
            .collect();
        let sga_saliency = Conv::new(st, r, "sga.saliency", dc, 1, (3, 3), 1, h);
        let sga_logits = Conv::new(st, r, "sga.logits", dc, 3, (3, 3), 1, h);

        Ok(Self {
            config,
            store,
            stem,
            stages,
            mecf,
            decoder,
            heads,
            sga_saliency,
            sga_logits,
        })
    }

    pub fn backbone_graph(&self, g: &mut Graph, x: Var) -> Result<[Var; 4]> {
        let [_, _, h, w] = g.shape(x);
        check_divisible(h, w)?;
        let s = &self.store;
        let mut y = self.stem.forward(g, s, x);
        let mut feats = [y; 4];
        for (i, (down, body)) in self.stages.iter().enumerate() {
            y = down.forward(g, s, y);
            y = body.forward(g, s, y);
            feats[i] = y;
        }
        Ok(feats)
    }

    /// MECF bridge of `level` (0 = F3); `f_h` is the highest-level feature.
    pub fn mecf_graph(&self, g: &mut Graph, level: usize, f_l: Var, f_h: Var) -> Result<Var> {
        let c = g.shape(f_l)[1];
        if c % 2 != 0 {
            return Err(Error::shape(format!("MECF input has odd channel count {c}")));
        }
        if level >= LEVELS {
            return Err(Error::param(format!("no MECF at level index {level}")));
        }
        Ok(self.mecf[level].forward(g, &self.store, f_l, f_h))
    }

    /// Returns the decoder features D3..D6 and their sigmoid saliency maps.
    pub fn decoder_graph(&self, g: &mut Graph, bridged: [Var; 4]) -> Result<([Var; 4], [Var; 4])> {
        for l in 0..LEVELS - 1 {
            let (a, b) = (g.shape(bridged[l]), g.shape(bridged[l + 1]));
            if a[2] <= b[2] || a[3] <= b[3] {
                return Err(Error::shape(format!(
                    "decoder levels must shrink: {}x{} then {}x{}",
                    a[2], a[3], b[2], b[3]
                )));
            }
        }
        let s = &self.store;
        let mut feats = [bridged[0]; 4];
        let mut prev = self.decoder[LEVELS - 1].forward(g, s, bridged[LEVELS - 1]);
        feats[LEVELS - 1] = prev;
        for l in (0..LEVELS - 1).rev() {
            let [_, _, h, w] = g.shape(bridged[l]);
            let up = g.resize_nearest(prev, h, w);
            let cat = g.concat(&[bridged[l], up]);
            prev = self.decoder[l].forward(g, s, cat);
            feats[l] = prev;
        }
        let mut maps = [feats[0]; 4];
        let z = self.sga_saliency.forward(g, s, feats[0]);
        maps[0] = g.sigmoid(z);
        for l in 1..LEVELS {
            let z = self.heads[l - 1].forward(g, s, feats[l]);
            maps[l] = g.sigmoid(z);
        }
        Ok((feats, maps))
    }

    /// Saliency-guided attention on D3: returns `(saliency, trimap logits)`.
    pub fn sga_graph(&self, g: &mut Graph, d3: Var) -> (Var, Var) {
        let s = &self.store;
        let z = self.sga_saliency.forward(g, s, d3);
        let sal = g.sigmoid(z);
        self.sga_with(g, d3, sal)
    }

    fn sga_with(&self, g: &mut Graph, d3: Var, sal: Var) -> (Var, Var) {
        let weighted = g.mul_plane(d3, sal);
        let refined = g.add(weighted, d3);
        let logits = self.sga_logits.forward(g, &self.store, refined);
        (sal, logits)
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<LrscnVars> {
        let feats = self.backbone_graph(g, x)?;
        let mut bridged = feats;
        for l in 0..LEVELS {
            bridged[l] = self.mecf_graph(g, l, feats[l], feats[LEVELS - 1])?;
        }
        let (d, maps) = self.decoder_graph(g, bridged)?;
        let (_, logits) = self.sga_with(g, d[0], maps[0]);
        Ok(LrscnVars {
            levels: maps,
            trimap_logits: logits,
        })
    }

    /// Backbone features F3..F6 of one image.
    pub fn backbone_forward(&self, image: &Image) -> Result<[Tensor; 4]> {
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(&[image])?);
        let f = self.backbone_graph(&mut g, x)?;
        Ok(f.map(|v| g.value(v).clone()))
    }

    pub fn forward(&self, image: &Image) -> Result<LrscnOutput> {
        Ok(self.forward_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn forward_batch(&self, images: &[Image]) -> Result<Vec<LrscnOutput>> {
        let refs: Vec<&Image> = images.iter().collect();
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(&refs)?);
        let vars = self.forward_graph(&mut g, x)?;
        let logits = g.value(vars.trimap_logits);
        if !logits.is_finite() {
            return Err(Error::NonFinite("trimap logits".into()));
        }
        Ok((0..images.len())
            .map(|n| {
                let levels: Vec<SaliencyMap> = vars.levels.iter().map(|&v| saliency_plane(g.value(v), n)).collect();
                LrscnOutput {
                    refined_saliency: levels[0].clone(),
                    saliency_levels: levels,
                    trimap_logits: TrimapLogits {
                        height: logits.h(),
                        width: logits.w(),
                        data: logits.sample(n).to_vec(),
                    },
                }
            })
            .collect())
    }
}

/// Argmax of the logits, nearest-upsampled to `height x width`.
pub fn predict_trimap(output: &LrscnOutput, height: usize, width: usize) -> Result<Trimap> {
    let l = &output.trimap_logits;
    if height < l.height || width < l.width {
        return Err(Error::param(format!(
            "target {height}x{width} is smaller than the logits ({}x{})",
            l.height, l.width
        )));
    }
    Ok(l.argmax().resize_nearest(height, width))
}

/// Stacks images into an `N x 3 x H x W` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::param("empty image batch"))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if im.dims() != (h, w) {
            return Err(Error::shape(format!("batch mixes {h}x{w} and {:?}", im.dims())));
        }
        data.extend(im.to_chw());
    }
    Ok(Tensor::from_vec([images.len(), 3, h, w], data))
}

pub(crate) fn saliency_plane(t: &Tensor, n: usize) -> SaliencyMap {
    SaliencyMap::from_raw(t.h(), t.w(), t.plane(n, 0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LrscnConfig {
        LrscnConfig {
            backbone: BackboneConfig {
                stage_channels: [4, 6, 8, 8],
                stem_channels: 4,
                input_size: 64,
                ..BackboneConfig::default()
            },
            gcn: GcnSchedule {
                kernels_per_level: [vec![3, 5], vec![3], vec![3], vec![3]],
            },
            decoder_channels: 4,
            norm_groups: 2,
        }
    }

    fn gradient_image(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn backbone_shapes() {
        let net = Lrscn::new(LrscnConfig::default(), 0).unwrap();
        let f = net.backbone_forward(&gradient_image(128, 128)).unwrap();
        let shapes: Vec<_> = f.iter().map(|t| t.shape).collect();
        assert_eq!(
            shapes,
            vec![[1, 32, 32, 32], [1, 64, 16, 16], [1, 128, 8, 8], [1, 128, 4, 4]]
        );
        let f = net.backbone_forward(&gradient_image(256, 256)).unwrap();
        assert_eq!(f[3].shape, [1, 128, 8, 8]);
        assert!(net.backbone_forward(&gradient_image(48, 48)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features_and_half_saliency() {
        let mut net = Lrscn::new(tiny(), 1).unwrap();
        net.store.zero_trainable();
        let out = net.forward(&gradient_image(64, 64)).unwrap();
        for l in &out.saliency_levels {
            assert!(l.as_slice().iter().all(|&v| v == 0.5));
        }
        assert!(out.trimap_logits.data.iter().all(|&v| v == 0.0));
        let f = net.backbone_forward(&gradient_image(64, 64)).unwrap();
        assert!(f.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn output_shapes_and_determinism() {
        let net = Lrscn::new(tiny(), 2).unwrap();
        let img = gradient_image(64, 64);
        let a = net.forward(&img).unwrap();
        let b = net.forward(&img).unwrap();
        assert_eq!(a.trimap_logits, b.trimap_logits);
        let dims: Vec<_> = a.saliency_levels.iter().map(|s| s.dims()).collect();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!((a.trimap_logits.height, a.trimap_logits.width), (16, 16));
        assert_eq!(a.refined_saliency.dims(), a.saliency_levels[0].dims());
        let t = predict_trimap(&a, 64, 64).unwrap();
        assert!(t.as_slice().iter().all(|&v| v <= 2));
    }

    #[test]
    fn batch_matches_single() {
        let net = Lrscn::new(tiny(), 3).unwrap();
        let a = gradient_image(64, 64);
        let b = Image::constant(64, 64, [0.2, 0.5, 0.9]);
        let batch = net.forward_batch(&[a.clone(), b]).unwrap();
        let single = net.forward(&a).unwrap();
        for (x, y) in batch[0].trimap_logits.data.iter().zip(&single.trimap_logits.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_tie_breaks_to_uncertain() {
        let logits = TrimapLogits {
            height: 1,
            width: 4,
            data: vec![0.0, 1.0, 2.0, 5.0, 0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 2.0, 5.0],
        };
        assert_eq!(logits.argmax().as_slice(), &[1, 2, 1, 1]);
    }

    #[test]
    fn upsampling_scales_histogram() {
        let n = 32 * 32;
        let data = (0..3 * n).map(|i| ((i * 31) % 17) as f64).collect();
        let out = LrscnOutput {
            saliency_levels: vec![],
            refined_saliency: SaliencyMap::constant(32, 32, 0.5),
            trimap_logits: TrimapLogits {
                height: 32,
                width: 32,
                data,
            },
        };
        let small = predict_trimap(&out, 32, 32).unwrap().histogram();
        let big = predict_trimap(&out, 128, 128).unwrap().histogram();
        assert_eq!(big, small.map(|c| c * 16));
        assert!(predict_trimap(&out, 16, 16).is_err());
    }
}
