//! Pertinent positives.
//!
//! A pertinent positive is a small set of superpixels of `x0` that on its own
//! (everything else replaced by the background value) is still classified as
//! `t0`. The relaxed mask `m` in `[0, 1]^S` minimises
//!
//! ```text
//!   gamma * sum_i max(g_i(delta) - g_i(x0), 0)      no attributes added
//! + beta  * ||m||_1
//! - c     * min(f_t0(delta) - max_{i != t0} f_i(delta), kappa)
//! ```
//!
//! with `delta = apply_mask(x0, m)`, solved by ISTA: a gradient step on the
//! smooth first and last terms followed by soft thresholding and projection
//! onto the unit box. The sparsest iterate that keeps `t0` by margin `kappa`
//! ranks the superpixels, which are then added greedily until the binary
//! masked image is classified as `t0`.

use serde::{Deserialize, Serialize};

use crate::bundle::{argmax, best_other, ModelBundle};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pn::{update_c, IterateIndex};
use crate::segmentation::{apply_mask, mask_gradient, MaskVector, SuperpixelPartition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpHyperParams {
    pub kappa: f64,
    pub gamma: f64,
    pub beta: f64,
    pub c0: f64,
    pub rounds: usize,
    pub iters: usize,
    pub step: f64,
    pub background: f64,
}

impl Default for PpHyperParams {
    fn default() -> Self {
        Self {
            kappa: 5.0,
            gamma: 100.0,
            beta: 0.1,
            c0: 1.0,
            rounds: 9,
            iters: 100,
            step: 0.01,
            background: 0.0,
        }
    }
}

impl PpHyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kappa", self.kappa),
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("c0", self.c0),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.c0 == 0.0 {
            return Err(Error::InvalidArgument("c0 must be positive".into()));
        }
        if self.rounds < 1 || self.iters < 1 {
            return Err(Error::InvalidArgument("rounds and iters must be at least 1".into()));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {}", self.step)));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::InvalidArgument(format!(
                "background must lie in [0, 1], got {}",
                self.background
            )));
        }
        Ok(())
    }
}

/// `sign(v) * max(|v| - lambda, 0)` entrywise, before projection.
pub fn shrink(v: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be a finite non-negative number, got {lambda}"
        )));
    }
    Ok(v
        .iter()
        .map(|&x| x.signum() * (x.abs() - lambda).max(0.0))
        .collect())
}

/// Proximal step of the mask: [`shrink`] followed by clipping to `[0, 1]`.
pub fn soft_threshold(v: &[f64], lambda: f64) -> Result<Vec<f64>> {
    Ok(shrink(v, lambda)?
        .into_iter()
        .map(|x| x.clamp(0.0, 1.0))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpTerms {
    pub attribute_addition: f64,
    pub mask_sparsity: f64,
    pub class_loss: f64,
}

impl PpTerms {
    pub fn as_array(&self) -> [f64; 3] {
        [self.attribute_addition, self.mask_sparsity, self.class_loss]
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

/// `f_t0 - max_{i != t0} f_i`.
fn pp_margin(scores: &[f64], t0: usize) -> (usize, f64) {
    let (other, best) = best_other(scores, t0);
    (other, scores[t0] - best)
}

fn check_inputs(
    bundle: &ModelBundle,
    x0: &Image,
    partition: &SuperpixelPartition,
    t0: usize,
) -> Result<()> {
    bundle.check_image(x0)?;
    if partition.height() != x0.height() || partition.width() != x0.width() {
        return Err(Error::Shape("partition does not match the image".into()));
    }
    if t0 >= bundle.n_classes() {
        return Err(Error::InvalidArgument(format!("class {t0} out of range")));
    }
    Ok(())
}

pub fn pp_objective(
    bundle: &ModelBundle,
    x0: &Image,
    partition: &SuperpixelPartition,
    mask: &MaskVector,
    t0: usize,
    hp: &PpHyperParams,
    c: f64,
) -> Result<(f64, PpTerms)> {
    check_inputs(bundle, x0, partition, t0)?;
    let delta = apply_mask(x0, partition, mask, hp.background)?;
    let g0 = bundle.eval_attributes(x0)?;
    let g = bundle.eval_attributes(&delta)?;
    let (_, margin) = pp_margin(&bundle.classify(&delta)?, t0);
    let terms = PpTerms {
        attribute_addition: hp.gamma
            * g.iter().zip(&g0).map(|(a, b)| (a - b).max(0.0)).sum::<f64>(),
        mask_sparsity: hp.beta * mask.l1_norm(),
        class_loss: -c * margin.min(hp.kappa),
    };
    Ok((terms.total(), terms))
}

struct Evaluated {
    terms: PpTerms,
    smooth_grad: Vec<f64>,
    scores: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn value_and_grad(
    bundle: &ModelBundle,
    x0: &Image,
    g0: &[f64],
    partition: &SuperpixelPartition,
    mask: &MaskVector,
    t0: usize,
    hp: &PpHyperParams,
    c: f64,
) -> Result<Evaluated> {
    let delta = apply_mask(x0, partition, mask, hp.background)?;
    let g = bundle.eval_attributes(&delta)?;
    let attr_cot: Vec<f64> = g
        .iter()
        .zip(g0)
        .map(|(gi, g0i)| if gi - g0i > 0.0 { hp.gamma } else { 0.0 })
        .collect();
    let (_, attr_grad) = bundle.attributes_vjp(&delta, &attr_cot)?;

    let scores = bundle.classify(&delta)?;
    let (other, margin) = pp_margin(&scores, t0);
    let mut class_cot = vec![0.0; scores.len()];
    if margin < hp.kappa {
        class_cot[t0] = -c;
        class_cot[other] = c;
    }
    let (_, class_grad) = bundle.classifier_vjp(&delta, &class_cot)?;
    let image_grad: Vec<f64> = attr_grad.iter().zip(&class_grad).map(|(a, b)| a + b).collect();
    let smooth_grad = mask_gradient(x0, partition, hp.background, &image_grad)?;

    let terms = PpTerms {
        attribute_addition: hp.gamma
            * g.iter().zip(g0).map(|(a, b)| (a - b).max(0.0)).sum::<f64>(),
        mask_sparsity: hp.beta * mask.l1_norm(),
        class_loss: -c * margin.min(hp.kappa),
    };
    Ok(Evaluated {
        terms,
        smooth_grad,
        scores,
    })
}

/// `[f(x0 masked by the first j + 1 ids)]_t0` for every prefix of `order`.
pub fn pp_score_trace(
    bundle: &ModelBundle,
    x0: &Image,
    partition: &SuperpixelPartition,
    order: &[usize],
    t0: usize,
    background: f64,
) -> Result<Vec<f64>> {
    check_inputs(bundle, x0, partition, t0)?;
    let n = partition.count();
    let mut seen = vec![false; n];
    let mut mask = vec![0.0; n];
    let mut trace = Vec::with_capacity(order.len());
    for &id in order {
        if id >= n {
            return Err(Error::InvalidArgument(format!("superpixel {id} out of range 0..{n}")));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::InvalidArgument(format!("superpixel {id} listed twice")));
        }
        mask[id] = 1.0;
        let image = apply_mask(x0, partition, &MaskVector::new(mask.clone())?, background)?;
        trace.push(bundle.classify(&image)?[t0]);
    }
    Ok(trace)
}

/// Superpixel ids by descending mask value, lower id first on ties.
pub fn rank_superpixels(mask: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..mask.len()).collect();
    ids.sort_by(|&a, &b| mask[b].total_cmp(&mask[a]).then(a.cmp(&b)));
    ids
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpRoundLog {
    pub c: f64,
    pub found: bool,
    pub objective: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpResult {
    pub t0: usize,
    /// Selected superpixels in the order they were added.
    pub selected: Vec<usize>,
    pub mask: MaskVector,
    pub image: Image,
    pub predicted: usize,
    pub scores: Vec<f64>,
    /// `f_t0 - max_{i != t0} f_i` of the masked image.
    pub margin: f64,
    /// `[f]_t0` after each addition.
    pub score_trace: Vec<f64>,
    /// Full ranking that drove the greedy completion.
    pub ranking: Vec<usize>,
    /// ISTA mask used for the ranking.
    pub relaxed_mask: Vec<f64>,
    /// No ISTA iterate reached margin `kappa`; the ranking came from the last iterate.
    pub fallback: bool,
    /// Terms and `c` at the selected ISTA iterate (absent on fallback).
    pub terms: Option<PpTerms>,
    pub objective: Option<f64>,
    pub c: Option<f64>,
    pub iterate: Option<IterateIndex>,
    pub rounds: Vec<PpRoundLog>,
}

impl PpResult {
    pub fn c_schedule(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.c).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PpOutcome {
    Found(Box<PpResult>),
    NotFound { t0: usize, rounds: Vec<PpRoundLog> },
}

impl PpOutcome {
    pub fn found(&self) -> Option<&PpResult> {
        match self {
            PpOutcome::Found(r) => Some(r),
            PpOutcome::NotFound { .. } => None,
        }
    }
}

struct Best {
    mask: Vec<f64>,
    norm: f64,
    terms: PpTerms,
    c: f64,
    iterate: IterateIndex,
}

/// Pertinent positive for the class `x0` is predicted as.
pub fn solve_pp(
    bundle: &ModelBundle,
    x0: &Image,
    partition: &SuperpixelPartition,
    hp: &PpHyperParams,
) -> Result<PpOutcome> {
    let t0 = bundle.predict(x0)?;
    solve_pp_for(bundle, x0, partition, t0, hp)
}

/// Like [`solve_pp`], but fails if `x0` is not predicted as `t0`.
pub fn solve_pp_for(
    bundle: &ModelBundle,
    x0: &Image,
    partition: &SuperpixelPartition,
    t0: usize,
    hp: &PpHyperParams,
) -> Result<PpOutcome> {
    hp.validate()?;
    check_inputs(bundle, x0, partition, t0)?;
    let predicted = bundle.predict(x0)?;
    if predicted != t0 {
        return Err(Error::Precondition(format!(
            "x0 is predicted as class {predicted}, not {t0}"
        )));
    }
    let g0 = bundle.eval_attributes(x0)?;
    let n = partition.count();

    let mut m = vec![1.0; n];
    let mut c = hp.c0;
    let mut best: Option<Best> = None;
    let mut rounds = Vec::with_capacity(hp.rounds);

    for round in 0..hp.rounds {
        let mut entry = PpRoundLog {
            c,
            found: false,
            objective: Vec::with_capacity(hp.iters + 1),
        };
        for t in 0..=hp.iters {
            let mask = MaskVector::new(m.clone())?;
            let eval = value_and_grad(bundle, x0, &g0, partition, &mask, t0, hp, c)?;
            entry.objective.push(eval.terms.total());
            let (_, margin) = pp_margin(&eval.scores, t0);
            if argmax(&eval.scores) == t0 && margin >= hp.kappa {
                entry.found = true;
                let norm = mask.l1_norm();
                if best.as_ref().is_none_or(|b| norm < b.norm) {
                    best = Some(Best {
                        mask: m.clone(),
                        norm,
                        terms: eval.terms,
                        c,
                        iterate: IterateIndex { round, step: t },
                    });
                }
            }
            if t < hp.iters {
                let moved: Vec<f64> = m
                    .iter()
                    .zip(&eval.smooth_grad)
                    .map(|(mi, gi)| mi - hp.step * gi)
                    .collect();
                m = soft_threshold(&moved, hp.step * hp.beta)?;
            }
        }
        log::debug!("pp round {round}: c = {c}, found = {}", entry.found);
        let found = entry.found;
        rounds.push(entry);
        c = update_c(c, found);
    }

    let fallback = best.is_none();
    let relaxed_mask = best.as_ref().map_or_else(|| m.clone(), |b| b.mask.clone());
    let ranking = rank_superpixels(&relaxed_mask);

    // Greedy completion, starting from the background-only image.
    let mut selected = Vec::new();
    let mut binary = vec![0.0; n];
    let mut score_trace = Vec::new();
    let mut image = apply_mask(x0, partition, &MaskVector::zeros(n), hp.background)?;
    let mut scores = bundle.classify(&image)?;
    let mut ranked = ranking.iter();
    while argmax(&scores) != t0 {
        let Some(&id) = ranked.next() else {
            return Ok(PpOutcome::NotFound { t0, rounds });
        };
        selected.push(id);
        binary[id] = 1.0;
        image = apply_mask(x0, partition, &MaskVector::new(binary.clone())?, hp.background)?;
        scores = bundle.classify(&image)?;
        score_trace.push(scores[t0]);
    }

    let mask = MaskVector::new(binary)?;
    let predicted = bundle.predict(&image)?;
    if predicted != t0 || image != apply_mask(x0, partition, &mask, hp.background)? {
        return Err(Error::Precondition("greedy selection failed re-validation".into()));
    }
    let (_, margin) = pp_margin(&scores, t0);
    Ok(PpOutcome::Found(Box::new(PpResult {
        t0,
        selected,
        mask,
        image,
        predicted,
        scores,
        margin,
        score_trace,
        ranking,
        relaxed_mask,
        fallback,
        terms: best.as_ref().map(|b| b.terms),
        objective: best.as_ref().map(|b| b.terms.total()),
        c: best.as_ref().map(|b| b.c),
        iterate: best.as_ref().map(|b| b.iterate),
        rounds,
    })))
}
