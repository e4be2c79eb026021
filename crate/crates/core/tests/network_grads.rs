//! End-to-end gradients of both networks' training losses against central
//! differences on a sample of weights.

use disent_sod::checkpoint::Model;
use disent_sod::datamodel::gen_synthetic_scene;
use disent_sod::hrrn::{inputs_to_tensor, Hrrn, HrrnConfig, HrrnInput};
use disent_sod::losses::{l1_definite_grad, saliency_loss_grad, trimap_ce_grad, uncertainty_grad, SsimConfig};
use disent_sod::lrscn::{images_to_tensor, BackboneConfig, GcnSchedule, Lrscn, LrscnConfig};
use disent_sod::nn::{Graph, ParamGroup, ParamId, Tensor};
use disent_sod::trimap::trimap_from_mask;
use disent_sod::{BinaryMask, Image, SaliencyMap, Trimap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-3;

fn scene(size: usize, seed: u64) -> (Image, BinaryMask) {
    gen_synthetic_scene(seed, size, 2).unwrap()
}

fn plane(t: &Tensor, n: usize) -> SaliencyMap {
    SaliencyMap::new(t.h(), t.w(), t.plane(n, 0).to_vec()).unwrap()
}

fn seed_tensor(shape: [usize; 4], grad: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, grad)
}

fn lrscn_loss(model: &Lrscn, image: &Image, mask: &BinaryMask, trimap: &Trimap, grads: bool) -> (f64, Vec<(ParamId, Tensor)>) {
    let mut g = Graph::new();
    let x = g.input(images_to_tensor(&[image]).unwrap());
    let vars = model.forward_graph(&mut g, x).unwrap();
    let levels: Vec<(SaliencyMap, BinaryMask)> =
        vars.levels.iter().map(|&v| (plane(g.value(v), 0), mask.clone())).collect();
    let (sl, sg) = saliency_loss_grad(&levels, &SsimConfig::default()).unwrap();
    let logits = g.value(vars.trimap_logits);
    let labels = trimap.resize_nearest(logits.h(), logits.w());
    let (cl, cg) = trimap_ce_grad(logits.sample(0), labels.as_slice()).unwrap();
    if !grads {
        return (sl.value + cl.value, Vec::new());
    }
    let mut seeds: Vec<(_, Tensor)> = vars
        .levels
        .iter()
        .zip(sg)
        .map(|(&v, gr)| (v, seed_tensor(g.shape(v), gr)))
        .collect();
    seeds.push((vars.trimap_logits, seed_tensor(g.shape(vars.trimap_logits), cg)));
    (sl.value + cl.value, g.backward(seeds).params())
}

fn hrrn_loss(model: &Hrrn, input: &HrrnInput, mask: &BinaryMask, grads: bool) -> (f64, Vec<(ParamId, Tensor)>) {
    let mut g = Graph::new();
    let x = g.input(inputs_to_tensor(std::slice::from_ref(input)).unwrap());
    let (vars, _) = model.forward_graph_train(&mut g, x).unwrap();
    let s = g.value(vars.saliency).sample(0).to_vec();
    let lv = g.value(vars.logvar).sample(0).to_vec();
    let gt = mask.to_saliency();
    let labels = input.trimap.as_slice();
    let (l1, mut gs) = l1_definite_grad(&s, gt.as_slice(), labels).unwrap();
    let (u, gu, glv) = uncertainty_grad(&s, gt.as_slice(), &lv, labels).unwrap();
    if !grads {
        return (l1.value + u.value, Vec::new());
    }
    gs.iter_mut().zip(&gu).for_each(|(a, b)| *a += b);
    let seeds = vec![
        (vars.saliency, seed_tensor(g.shape(vars.saliency), gs)),
        (vars.logvar, seed_tensor(g.shape(vars.logvar), glv)),
    ];
    (l1.value + u.value, g.backward(seeds).params())
}

/// Compares analytic and numeric derivatives on `fraction` of the trainable
/// scalars; returns (worst relative error, number checked).
fn check<M: Model>(model: &mut M, fraction: f64, seed: u64, loss: impl Fn(&M, bool) -> (f64, Vec<(ParamId, Tensor)>)) -> (f64, usize) {
    let (_, analytic) = loss(model, true);
    let mut coords: Vec<(ParamId, usize)> = model
        .store()
        .ids()
        .filter(|&id| model.store().entry(id).group != ParamGroup::Buffer)
        .flat_map(|id| (0..model.store().get(id).numel()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    let n = ((coords.len() as f64 * fraction).ceil() as usize).max(20);
    let mut worst = 0.0f64;
    for &(id, i) in coords.iter().take(n) {
        let a = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map_or(0.0, |(_, t)| t.data[i]);
        let orig = model.store().get(id).data[i];
        model.store_mut().get_mut(id).data[i] = orig + EPS;
        let plus = loss(model, false).0;
        model.store_mut().get_mut(id).data[i] = orig - EPS;
        let minus = loss(model, false).0;
        model.store_mut().get_mut(id).data[i] = orig;
        let num = (plus - minus) / (2.0 * EPS);
        // absolute floor keeps round-off on vanishing derivatives out of the ratio
        let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
        worst = worst.max(err);
    }
    (worst, n)
}

#[test]
fn lrscn_loss_gradient_matches_central_differences() {
    let config = LrscnConfig {
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
    };
    let mut model = Lrscn::new(config, 11).unwrap();
    let (image, mask) = scene(64, 3);
    let trimap = trimap_from_mask(&mask, 5).unwrap();
    let (worst, n) = check(&mut model, 0.01, 5, |m, gr| lrscn_loss(m, &image, &mask, &trimap, gr));
    assert!(worst < TOL, "worst relative error {worst:e} over {n} weights");
}

#[test]
fn hrrn_loss_gradient_matches_central_differences() {
    let config = HrrnConfig {
        depth: 2,
        base_channels: 4,
        max_channels: 8,
        input_shortcut_channels: 4,
    };
    let mut model = Hrrn::new(config, 2).unwrap();
    model.power_iterate(5);
    let (image, mask) = scene(32, 8);
    let trimap = trimap_from_mask(&mask, 5).unwrap();
    let input = HrrnInput::new(image, trimap).unwrap();
    let (worst, n) = check(&mut model, 0.02, 9, |m, gr| hrrn_loss(m, &input, &mask, gr));
    assert!(worst < TOL, "worst relative error {worst:e} over {n} weights");
}
