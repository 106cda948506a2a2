//! Small seeded problem families with exact or brute-force answers, used to
//! check the differentiation engine and both solvers against oracles.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::{argmax, best_other, Attribute, ModelBundle};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::image::Image;
use crate::network::{Activation, DenseNet};
use crate::pn::PnHyperParams;
use crate::pp::PpHyperParams;
use crate::segmentation::{apply_mask, MaskVector, SuperpixelPartition};
use crate::tensor::Tensor;

pub struct GradientCase {
    pub graph: Graph,
    pub inputs: BTreeMap<NodeId, Tensor>,
    pub loss: NodeId,
}

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data)
}

fn activate(g: &mut Graph, node: NodeId, relu: bool) -> Result<NodeId> {
    if relu {
        g.relu(node)
    } else {
        g.sigmoid(node)
    }
}

/// Two dense layers with random widths and ReLU/sigmoid activations, reduced
/// to a scalar by summation. Every tensor (data, weights, biases) is an input.
pub fn random_dense_graph(seed: u64) -> Result<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, hidden, n_out) = (
        rng.random_range(2..7),
        rng.random_range(2..9),
        rng.random_range(1..5),
    );
    let mut g = Graph::new();
    let x = g.input(&[n_in])?;
    let w1 = g.input(&[hidden, n_in])?;
    let b1 = g.input(&[hidden])?;
    let w2 = g.input(&[n_out, hidden])?;
    let b2 = g.input(&[n_out])?;
    let pre1 = g.matmul(w1, x)?;
    let pre1 = g.add(pre1, b1)?;
    let h = activate(&mut g, pre1, rng.random_bool(0.5))?;
    let pre2 = g.matmul(w2, h)?;
    let pre2 = g.add(pre2, b2)?;
    let y = activate(&mut g, pre2, rng.random_bool(0.5))?;
    let loss = g.sum(y)?;

    let mut inputs = BTreeMap::new();
    inputs.insert(x, random_tensor(&mut rng, &[n_in], 2.0)?);
    inputs.insert(w1, random_tensor(&mut rng, &[hidden, n_in], 1.5)?);
    inputs.insert(b1, random_tensor(&mut rng, &[hidden], 0.5)?);
    inputs.insert(w2, random_tensor(&mut rng, &[n_out, hidden], 1.5)?);
    inputs.insert(b2, random_tensor(&mut rng, &[n_out], 0.5)?);
    Ok(GradientCase {
        graph: g,
        inputs,
        loss,
    })
}

/// Largest `|a - b| / max(|a|, |b|, 1e-3)` over matching entries.
pub fn max_relative_error(a: &BTreeMap<NodeId, Tensor>, b: &BTreeMap<NodeId, Tensor>) -> f64 {
    let mut worst: f64 = 0.0;
    for (id, ta) in a {
        let Some(tb) = b.get(id) else {
            return f64::INFINITY;
        };
        for (x, y) in ta.data().iter().zip(tb.data()) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1e-3));
        }
    }
    worst
}

fn linear(rows: usize, cols: usize, w: Vec<f64>, b: Vec<f64>, act: Activation) -> Result<DenseNet> {
    DenseNet::linear(Tensor::matrix(rows, cols, w)?, Tensor::vector(b)?, act)
}

/// One-pixel problem with an identity decoder and encoder.
///
/// The classifier scores are `[w x, w (1 - x)]`, so the original image
/// (`x0 > 0.5`) is class 0 and class 1 wins by at least `kappa` exactly when
/// `x <= (1 - kappa / w) / 2`. The single attribute is darkness `1 - x`,
/// which a move toward class 1 adds.
pub struct PnLineInstance {
    pub bundle: ModelBundle,
    pub x0: Image,
    pub hp: PnHyperParams,
    pub slope: f64,
}

impl PnLineInstance {
    /// Largest latent value that is a valid pertinent negative.
    pub fn boundary(&self) -> f64 {
        (1.0 - self.hp.kappa / self.slope) / 2.0
    }
}

pub fn pn_line_instance(seed: u64) -> Result<PnLineInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = rng.random_range(4.0..10.0);
    let x0 = rng.random_range(0.65..0.95);
    let kappa = rng.random_range(0.2..1.0);
    let bundle = ModelBundle::new(
        [1, 1, 1],
        1,
        vec!["bright".into(), "dark".into()],
        linear(2, 1, vec![slope, -slope], vec![0.0, slope], Activation::Identity)?,
        DenseNet::identity(1)?,
        Some(DenseNet::identity(1)?),
        vec![Attribute::new(
            "darkness",
            linear(1, 1, vec![-1.0], vec![1.0], Activation::Identity)?,
            0.0,
            1.0,
        )?],
    )?;
    Ok(PnLineInstance {
        bundle,
        x0: Image::new(1, 1, 1, vec![x0])?,
        hp: PnHyperParams {
            kappa,
            beta: 0.0,
            ..PnHyperParams::default()
        },
        slope,
    })
}

/// Scans `z = lo, lo + step, ..., hi` and returns the valid point (class
/// differs from `t0` by margin at least `kappa`) closest to `z_x0`.
pub fn pn_grid_oracle(
    bundle: &ModelBundle,
    z_x0: f64,
    t0: usize,
    kappa: f64,
    (lo, hi, step): (f64, f64, f64),
) -> Result<Option<f64>> {
    let n = ((hi - lo) / step).round() as usize;
    let mut best: Option<f64> = None;
    for i in 0..=n {
        let z = lo + i as f64 * step;
        let scores = bundle.classify(&bundle.decode(&[z])?)?;
        let (_, other) = best_other(&scores, t0);
        if argmax(&scores) != t0 && other - scores[t0] >= kappa
            && best.is_none_or(|b| (z - z_x0).abs() < (b - z_x0).abs())
        {
            best = Some(z);
        }
    }
    Ok(best)
}

pub struct PpToyInstance {
    pub bundle: ModelBundle,
    pub x0: Image,
    pub partition: SuperpixelPartition,
    pub hp: PpHyperParams,
    /// For the single-decisive family, the superpixel that alone decides.
    pub decisive: Option<usize>,
}

const TOY_H: usize = 3;
const TOY_W: usize = 4;

fn random_partition<R: Rng>(rng: &mut R, n_sp: usize) -> Result<SuperpixelPartition> {
    let n = TOY_H * TOY_W;
    let mut labels: Vec<usize> = (0..n).map(|i| if i < n_sp { i } else { rng.random_range(0..n_sp) }).collect();
    labels.shuffle(rng);
    SuperpixelPartition::from_labels(TOY_H, TOY_W, labels)
}

fn toy_image<R: Rng>(rng: &mut R, lo: f64) -> Result<Image> {
    let data = (0..TOY_H * TOY_W).map(|_| rng.random_range(lo..1.0)).collect();
    Ok(Image::new(TOY_H, TOY_W, 1, data)?.quantized())
}

fn brightness() -> Result<Attribute> {
    let n = TOY_H * TOY_W;
    Attribute::new(
        "brightness",
        linear(1, n, vec![1.0 / n as f64; n], vec![0.0], Activation::Identity)?,
        0.0,
        1.0,
    )
}


/// Random 3-class linear classifier on a 3x4 image with 4 to 12 superpixels.
pub fn pp_random_instance(seed: u64) -> Result<PpToyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = TOY_H * TOY_W;
    let n_sp = rng.random_range(4..=12);
    let partition = random_partition(&mut rng, n_sp)?;
    let w = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let bundle = ModelBundle::new(
        [TOY_H, TOY_W, 1],
        n,
        vec!["a".into(), "b".into(), "c".into()],
        linear(3, n, w, b, Activation::Identity)?,
        DenseNet::identity(n)?,
        None,
        vec![brightness()?],
    )?;
    Ok(PpToyInstance {
        bundle,
        x0: toy_image(&mut rng, 0.0)?,
        partition,
        hp: PpHyperParams::default(),
        decisive: None,
    })
}

/// Two classes where one superpixel carries all the evidence for the
/// original class; the background-only image belongs to the other class.
pub fn pp_single_decisive_instance(seed: u64) -> Result<PpToyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = TOY_H * TOY_W;
    let n_sp = rng.random_range(4..=12);
    let partition = random_partition(&mut rng, n_sp)?;
    let k = rng.random_range(0..partition.count());
    let t0 = rng.random_range(0..2);
    let size_k = partition.sizes()[k] as f64;
    let mut w = vec![0.0; 2 * n];
    for (p, &label) in partition.labels().iter().enumerate() {
        if label == k {
            w[t0 * n + p] = 20.0 / size_k;
        } else {
            w[t0 * n + p] = rng.random_range(-0.05..0.05);
            w[(1 - t0) * n + p] = rng.random_range(-0.05..0.05);
        }
    }
    let mut b = vec![0.0; 2];
    b[1 - t0] = 2.0;
    let bundle = ModelBundle::new(
        [TOY_H, TOY_W, 1],
        n,
        vec!["a".into(), "b".into()],
        linear(2, n, w, b, Activation::Identity)?,
        DenseNet::identity(n)?,
        None,
        vec![brightness()?],
    )?;
    Ok(PpToyInstance {
        bundle,
        x0: toy_image(&mut rng, 0.6)?,
        partition,
        hp: PpHyperParams::default(),
        decisive: Some(k),
    })
}

/// Exhaustive search over all binary masks for the fewest superpixels whose
/// masked image is classified as `t0`. Limited to 16 superpixels.
pub fn pp_brute_force_min(
    bundle: &ModelBundle,
    x0: &Image,
    partition: &SuperpixelPartition,
    t0: usize,
    background: f64,
) -> Result<Option<usize>> {
    let n = partition.count();
    assert!(n <= 16, "brute force limited to 16 superpixels");
    let mut best: Option<usize> = None;
    for bits in 0u32..(1 << n) {
        let count = bits.count_ones() as usize;
        if best.is_some_and(|b| count >= b) {
            continue;
        }
        let mask: Vec<f64> = (0..n).map(|i| f64::from((bits >> i) & 1)).collect();
        let image = apply_mask(x0, partition, &MaskVector::new(mask)?, background)?;
        if bundle.predict(&image)? == t0 {
            best = Some(count);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_cases_are_reproducible() {
        let a = random_dense_graph(3).unwrap();
        let b = random_dense_graph(3).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.graph.len(), b.graph.len());
    }

    #[test]
    fn line_boundary_is_valid() {
        let inst = pn_line_instance(1).unwrap();
        let zb = inst.boundary();
        let scores = inst.bundle.classify(&Image::new(1, 1, 1, vec![zb - 1e-9]).unwrap()).unwrap();
        assert!(scores[1] - scores[0] >= inst.hp.kappa);
        let scores = inst.bundle.classify(&Image::new(1, 1, 1, vec![zb + 1e-6]).unwrap()).unwrap();
        assert!(scores[1] - scores[0] < inst.hp.kappa);
    }

    #[test]
    fn grid_oracle_finds_the_analytic_boundary() {
        let inst = pn_line_instance(5).unwrap();
        let z0 = inst.x0.data()[0];
        let z = pn_grid_oracle(&inst.bundle, z0, 0, inst.hp.kappa, (-0.5, 1.5, 1e-3))
            .unwrap()
            .unwrap();
        assert!(z <= inst.boundary() && inst.boundary() - z < 1e-3 + 1e-12);
    }

    #[test]
    fn decisive_superpixel_alone_suffices() {
        for seed in 0..10 {
            let inst = pp_single_decisive_instance(seed).unwrap();
            let t0 = inst.bundle.predict(&inst.x0).unwrap();
            let k = inst.decisive.unwrap();
            let n = inst.partition.count();
            let only_k = MaskVector::from_selection(n, &[k]).unwrap();
            let img = apply_mask(&inst.x0, &inst.partition, &only_k, 0.0).unwrap();
            assert_eq!(inst.bundle.predict(&img).unwrap(), t0);
            let all_but_k: Vec<usize> = (0..n).filter(|&i| i != k).collect();
            let rest = MaskVector::from_selection(n, &all_but_k).unwrap();
            let img = apply_mask(&inst.x0, &inst.partition, &rest, 0.0).unwrap();
            assert_ne!(inst.bundle.predict(&img).unwrap(), t0);
            assert_eq!(
                pp_brute_force_min(&inst.bundle, &inst.x0, &inst.partition, t0, 0.0).unwrap(),
                Some(1)
            );
        }
    }
}
