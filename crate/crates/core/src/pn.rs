//! Pertinent negatives.
//!
//! A pertinent negative is a decoded image `delta = D(z)` that the classifier
//! puts in a different class than `x0` by at least `kappa`, reached by only
//! adding attribute concepts and staying close to `x0` in image and latent
//! space. The objective over the latent code `z` is
//!
//! ```text
//!   gamma * sum_i max(g_i(x0) - g_i(delta), 0)      attributes may only grow
//! + beta  * ||g(delta)||_1                          few attributes change
//! - c     * min(max_{i != t0} f_i(delta) - f_t0(delta), kappa)
//! + eta   * ||x0 - delta||^2
//! + nu    * ||z_x0 - z||^2
//! ```
//!
//! and is minimised by subgradient descent, with the class weight `c` tuned
//! across rounds by [`update_c`].

use serde::{Deserialize, Serialize};

use crate::bundle::{argmax, best_other, ModelBundle};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnHyperParams {
    pub kappa: f64,
    pub gamma: f64,
    pub beta: f64,
    pub eta: f64,
    pub nu: f64,
    pub c0: f64,
    pub rounds: usize,
    pub iters: usize,
    pub step: f64,
}

impl Default for PnHyperParams {
    fn default() -> Self {
        Self {
            kappa: 5.0,
            gamma: 100.0,
            beta: 100.0,
            eta: 1.0,
            nu: 1.0,
            c0: 1.0,
            rounds: 9,
            iters: 1000,
            step: 0.01,
        }
    }
}

impl PnHyperParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("kappa", self.kappa),
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("eta", self.eta),
            ("nu", self.nu),
            ("c0", self.c0),
        ];
        for (name, v) in nonneg {
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
        Ok(())
    }
}

/// The five weighted terms of the objective, in order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PnTerms {
    pub attribute_hinge: f64,
    pub attribute_sparsity: f64,
    pub class_loss: f64,
    pub input_distance: f64,
    pub latent_distance: f64,
}

impl PnTerms {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.attribute_hinge,
            self.attribute_sparsity,
            self.class_loss,
            self.input_distance,
            self.latent_distance,
        ]
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

/// Multiplies `c` by 10 when a round found no pertinent negative and halves it
/// otherwise.
pub fn update_c(c: f64, found: bool) -> f64 {
    debug_assert!(c > 0.0);
    if found {
        c / 2.0
    } else {
        c * 10.0
    }
}

/// `max_{i != t0} f_i - f_t0`.
fn pn_margin(scores: &[f64], t0: usize) -> (usize, f64) {
    let (other, best) = best_other(scores, t0);
    (other, best - scores[t0])
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_inputs(bundle: &ModelBundle, x0: &Image, z_x0: &[f64], t0: usize, z: &[f64]) -> Result<()> {
    bundle.check_image(x0)?;
    if z_x0.len() != bundle.latent_dim() || z.len() != bundle.latent_dim() {
        return Err(Error::Shape(format!(
            "latent codes must have {} entries",
            bundle.latent_dim()
        )));
    }
    if t0 >= bundle.n_classes() {
        return Err(Error::InvalidArgument(format!("class {t0} out of range")));
    }
    Ok(())
}

/// Evaluates the objective at latent code `z`.
pub fn pn_objective(
    bundle: &ModelBundle,
    x0: &Image,
    z_x0: &[f64],
    t0: usize,
    z: &[f64],
    hp: &PnHyperParams,
    c: f64,
) -> Result<(f64, PnTerms)> {
    check_inputs(bundle, x0, z_x0, t0, z)?;
    let g0 = bundle.eval_attributes(x0)?;
    let delta = bundle.decode(z)?;
    let g = bundle.eval_attributes(&delta)?;
    let scores = bundle.classify(&delta)?;
    let (_, margin) = pn_margin(&scores, t0);
    let terms = PnTerms {
        attribute_hinge: hp.gamma
            * g0.iter().zip(&g).map(|(a, b)| (a - b).max(0.0)).sum::<f64>(),
        attribute_sparsity: hp.beta * g.iter().map(|v| v.abs()).sum::<f64>(),
        class_loss: -c * margin.min(hp.kappa),
        input_distance: hp.eta * squared_distance(x0.data(), delta.data()),
        latent_distance: hp.nu * squared_distance(z_x0, z),
    };
    Ok((terms.total(), terms))
}

struct Evaluated {
    terms: PnTerms,
    grad: Vec<f64>,
    image: Image,
    scores: Vec<f64>,
}

/// Objective terms and a subgradient at `z`. Kinks take the zero branch; the
/// class hinge differentiates through the single attaining runner-up class.
fn value_and_grad(
    bundle: &ModelBundle,
    x0: &Image,
    g0: &[f64],
    z_x0: &[f64],
    t0: usize,
    z: &[f64],
    hp: &PnHyperParams,
    c: f64,
) -> Result<Evaluated> {
    let delta = bundle.decode(z)?;

    let mut attr_cot = vec![0.0; g0.len()];
    let (g, attr_grad) = {
        let g = bundle.eval_attributes(&delta)?;
        for (i, (&gi, &g0i)) in g.iter().zip(g0).enumerate() {
            if g0i - gi > 0.0 {
                attr_cot[i] -= hp.gamma;
            }
            if gi != 0.0 {
                attr_cot[i] += hp.beta * gi.signum();
            }
        }
        bundle.attributes_vjp(&delta, &attr_cot)?
    };

    let scores = bundle.classify(&delta)?;
    let (other, margin) = pn_margin(&scores, t0);
    let mut class_cot = vec![0.0; scores.len()];
    if margin < hp.kappa {
        class_cot[other] = -c;
        class_cot[t0] = c;
    }
    let (_, class_grad) = bundle.classifier_vjp(&delta, &class_cot)?;

    let image_cot: Vec<f64> = delta
        .data()
        .iter()
        .zip(x0.data())
        .zip(attr_grad.iter().zip(&class_grad))
        .map(|((d, x), (ga, gc))| 2.0 * hp.eta * (d - x) + ga + gc)
        .collect();
    let (_, mut grad) = bundle.decoder_vjp(z, &image_cot)?;
    for ((gz, zi), z0i) in grad.iter_mut().zip(z).zip(z_x0) {
        *gz += 2.0 * hp.nu * (zi - z0i);
    }

    let terms = PnTerms {
        attribute_hinge: hp.gamma
            * g0.iter().zip(&g).map(|(a, b)| (a - b).max(0.0)).sum::<f64>(),
        attribute_sparsity: hp.beta * g.iter().map(|v| v.abs()).sum::<f64>(),
        class_loss: -c * margin.min(hp.kappa),
        input_distance: hp.eta * squared_distance(x0.data(), delta.data()),
        latent_distance: hp.nu * squared_distance(z_x0, z),
    };
    Ok(Evaluated {
        terms,
        grad,
        image: delta,
        scores,
    })
}

/// Change of one attribute between `x0` and the explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeChange {
    pub index: usize,
    pub name: String,
    pub original: f64,
    pub explained: f64,
    pub threshold: f64,
}

impl AttributeChange {
    pub fn delta(&self) -> f64 {
        self.explained - self.original
    }

    /// The concept was added: its score rose by more than the threshold.
    pub fn is_added(&self) -> bool {
        self.delta() > self.threshold
    }

    /// The score dropped, which the attribute hinge discourages but does not forbid.
    pub fn is_violation(&self) -> bool {
        self.delta() < 0.0
    }
}

/// Where an iterate came from: round `round`, step `step` within that round
/// (`0` is the round's starting point).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterateIndex {
    pub round: usize,
    pub step: usize,
}

/// One c-search round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub c: f64,
    pub step: f64,
    pub found: bool,
    /// Objective value at every evaluated iterate.
    pub objective: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub t0: usize,
    pub z_x0: Vec<f64>,
    pub rounds: Vec<RoundLog>,
}

impl SearchLog {
    pub fn c_schedule(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.c).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnResult {
    pub z: Vec<f64>,
    pub image: Image,
    pub predicted: usize,
    pub scores: Vec<f64>,
    /// `max_{i != t0} f_i - f_t0` at the returned image.
    pub margin: f64,
    pub terms: PnTerms,
    pub objective: f64,
    pub c: f64,
    pub iterate: IterateIndex,
    pub attributes: Vec<AttributeChange>,
    pub log: SearchLog,
}

impl PnResult {
    pub fn t0(&self) -> usize {
        self.log.t0
    }

    pub fn added(&self) -> impl Iterator<Item = &AttributeChange> {
        self.attributes.iter().filter(|a| a.is_added())
    }

    pub fn violations(&self) -> impl Iterator<Item = &AttributeChange> {
        self.attributes.iter().filter(|a| a.is_violation())
    }

    pub fn latent_distance(&self) -> f64 {
        squared_distance(&self.z, &self.log.z_x0).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PnOutcome {
    Found(Box<PnResult>),
    /// No iterate changed the class by the required margin.
    NotFound(SearchLog),
}

impl PnOutcome {
    pub fn found(&self) -> Option<&PnResult> {
        match self {
            PnOutcome::Found(r) => Some(r),
            PnOutcome::NotFound(_) => None,
        }
    }

    pub fn log(&self) -> &SearchLog {
        match self {
            PnOutcome::Found(r) => &r.log,
            PnOutcome::NotFound(log) => log,
        }
    }
}

struct Best {
    z: Vec<f64>,
    distance: f64,
    eval: Evaluated,
    c: f64,
    iterate: IterateIndex,
}

enum RoundEnd {
    Completed { last: Vec<f64> },
    Diverged(String),
}

/// Finds a pertinent negative for `x0`, obtaining `z_x0` from the bundle's
/// encoder or by decoder inversion.
pub fn solve_pn(bundle: &ModelBundle, x0: &Image, hp: &PnHyperParams) -> Result<PnOutcome> {
    let z_x0 = bundle.latent_code(x0)?;
    solve_pn_from(bundle, x0, &z_x0, hp)
}

pub fn solve_pn_from(
    bundle: &ModelBundle,
    x0: &Image,
    z_x0: &[f64],
    hp: &PnHyperParams,
) -> Result<PnOutcome> {
    hp.validate()?;
    let t0 = bundle.predict(x0)?;
    check_inputs(bundle, x0, z_x0, t0, z_x0)?;
    let g0 = bundle.eval_attributes(x0)?;

    let mut log = SearchLog {
        t0,
        z_x0: z_x0.to_vec(),
        rounds: Vec::with_capacity(hp.rounds),
    };
    let mut best: Option<Best> = None;
    let mut z = z_x0.to_vec();
    let mut c = hp.c0;
    let mut step = hp.step;

    for round in 0..hp.rounds {
        let mut retried = false;
        let (entry, end) = loop {
            let mut entry = RoundLog {
                c,
                step,
                found: false,
                objective: Vec::with_capacity(hp.iters + 1),
            };
            let end = run_round(
                bundle, x0, &g0, z_x0, t0, hp, c, step, round, &z, &mut entry, &mut best,
            )?;
            match end {
                RoundEnd::Diverged(reason) if !retried => {
                    log::warn!("round {round} diverged ({reason}); halving step and retrying");
                    retried = true;
                    step /= 2.0;
                }
                end => break (entry, end),
            }
        };
        let last = match end {
            RoundEnd::Completed { last } => last,
            RoundEnd::Diverged(reason) => {
                return Err(Error::Diverged(format!(
                    "round {round} diverged twice: {reason}"
                )))
            }
        };
        log::debug!(
            "pn round {round}: c = {c}, found = {}, best distance = {:?}",
            entry.found,
            best.as_ref().map(|b| b.distance)
        );
        let found = entry.found;
        log.rounds.push(entry);
        // Continue from the best pertinent negative so far, if any.
        z = best.as_ref().map_or(last, |b| b.z.clone());
        c = update_c(c, found);
    }

    let Some(best) = best else {
        return Ok(PnOutcome::NotFound(log));
    };

    let image = bundle.decode(&best.z)?;
    let scores = bundle.classify(&image)?;
    let predicted = argmax(&scores);
    let (_, margin) = pn_margin(&scores, t0);
    if image != best.eval.image || predicted == t0 || margin < hp.kappa {
        return Err(Error::Precondition(format!(
            "selected iterate failed re-validation (class {predicted}, margin {margin})"
        )));
    }
    let explained = bundle.eval_attributes(&image)?;
    let attributes = bundle
        .attributes()
        .iter()
        .enumerate()
        .map(|(index, a)| AttributeChange {
            index,
            name: a.name.clone(),
            original: g0[index],
            explained: explained[index],
            threshold: a.threshold,
        })
        .collect();

    Ok(PnOutcome::Found(Box::new(PnResult {
        objective: best.eval.terms.total(),
        terms: best.eval.terms,
        z: best.z,
        image,
        predicted,
        scores,
        margin,
        c: best.c,
        iterate: best.iterate,
        attributes,
        log,
    })))
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    bundle: &ModelBundle,
    x0: &Image,
    g0: &[f64],
    z_x0: &[f64],
    t0: usize,
    hp: &PnHyperParams,
    c: f64,
    step: f64,
    round: usize,
    start: &[f64],
    entry: &mut RoundLog,
    best: &mut Option<Best>,
) -> Result<RoundEnd> {
    let mut z = start.to_vec();
    for t in 0..=hp.iters {
        let eval = match value_and_grad(bundle, x0, g0, z_x0, t0, &z, hp, c) {
            Ok(e) => e,
            Err(Error::NonFinite { node, op }) => {
                return Ok(RoundEnd::Diverged(format!("node {node} ({op}) overflowed")))
            }
            Err(e) => return Err(e),
        };
        let total = eval.terms.total();
        if !total.is_finite() {
            return Ok(RoundEnd::Diverged("objective is not finite".into()));
        }
        entry.objective.push(total);

        let (_, margin) = pn_margin(&eval.scores, t0);
        let valid = argmax(&eval.scores) != t0 && margin >= hp.kappa;
        let grad = if t < hp.iters { Some(eval.grad.clone()) } else { None };
        if valid {
            entry.found = true;
            let distance = squared_distance(&z, z_x0).sqrt();
            if best.as_ref().is_none_or(|b| distance < b.distance) {
                *best = Some(Best {
                    z: z.clone(),
                    distance,
                    eval,
                    c,
                    iterate: IterateIndex { round, step: t },
                });
            }
        }

        if let Some(grad) = grad {
            let rate = step / ((t + 1) as f64).sqrt();
            for (zi, gi) in z.iter_mut().zip(&grad) {
                *zi -= rate * gi;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Ok(RoundEnd::Diverged("latent code is not finite".into()));
            }
        }
    }
    Ok(RoundEnd::Completed { last: z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::Attribute;
    use crate::network::{Activation, DenseNet};
    use crate::tensor::Tensor;

    fn linear(w: Vec<f64>, b: Vec<f64>, n_in: usize) -> DenseNet {
        let n_out = b.len();
        DenseNet::linear(
            Tensor::matrix(n_out, n_in, w).unwrap(),
            Tensor::vector(b).unwrap(),
            Activation::Identity,
        )
        .unwrap()
    }

    fn identity_attribute() -> Attribute {
        Attribute::new("value", DenseNet::identity(1).unwrap(), 0.0, 1.0).unwrap()
    }

    /// Scalar "image", identity decoder, f(x) = [x, 1 - x].
    fn toy_bundle() -> ModelBundle {
        ModelBundle::new(
            [1, 1, 1],
            1,
            vec!["high".into(), "low".into()],
            linear(vec![1.0, -1.0], vec![0.0, 1.0], 1),
            DenseNet::identity(1).unwrap(),
            None,
            vec![identity_attribute()],
        )
        .unwrap()
    }

    fn pixel(v: f64) -> Image {
        Image::new(1, 1, 1, vec![v]).unwrap()
    }

    #[test]
    fn update_c_schedule() {
        assert_eq!(update_c(1.0, false), 10.0);
        assert_eq!(update_c(10.0, true), 5.0);
        let mut c = 1.0;
        let mut used = vec![];
        for _ in 0..9 {
            used.push(c);
            c = update_c(c, false);
        }
        assert_eq!(used.last(), Some(&1e8));
    }

    #[test]
    fn hand_computed_toy_terms() {
        let b = toy_bundle();
        let hp = PnHyperParams {
            kappa: 0.0,
            gamma: 1.0,
            beta: 1.0,
            eta: 1.0,
            nu: 1.0,
            ..PnHyperParams::default()
        };
        let (total, terms) = pn_objective(&b, &pixel(0.2), &[0.2], 0, &[0.5], &hp, 0.0).unwrap();
        // Independent arithmetic: hinge max(0.2 - 0.5, 0) = 0, |0.5| = 0.5,
        // c = 0, (0.2 - 0.5)^2 = 0.09 twice.
        let expected = [0.0, 0.5, 0.0, 0.09, 0.09];
        for (a, e) in terms.as_array().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        assert!((total - 0.68).abs() < 1e-12);
    }

    #[test]
    fn self_reconstruction_leaves_only_sparsity() {
        let b = ModelBundle::new(
            [1, 2, 1],
            2,
            vec!["a".into(), "b".into()],
            linear(vec![0.0; 4], vec![0.0, 0.0], 2),
            DenseNet::identity(2).unwrap(),
            None,
            vec![Attribute::new(
                "mean",
                linear(vec![0.5, 0.5], vec![0.0], 2),
                0.0,
                1.0,
            )
            .unwrap()],
        )
        .unwrap();
        let x0 = Image::new(1, 2, 1, vec![0.3, 0.5]).unwrap();
        let hp = PnHyperParams {
            beta: 3.0,
            ..PnHyperParams::default()
        };
        let (total, terms) = pn_objective(&b, &x0, &[0.3, 0.5], 0, &[0.3, 0.5], &hp, 7.0).unwrap();
        assert_eq!(terms.attribute_hinge, 0.0);
        assert_eq!(terms.class_loss, 0.0);
        assert_eq!(terms.input_distance, 0.0);
        assert_eq!(terms.latent_distance, 0.0);
        assert!((total - 3.0 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn hinge_saturates_at_zero_kappa() {
        let b = toy_bundle();
        let hp = PnHyperParams {
            kappa: 0.0,
            ..PnHyperParams::default()
        };
        // z = 0.2: f = [0.2, 0.8], runner-up beats t0 = 0.
        let (_, terms) = pn_objective(&b, &pixel(0.9), &[0.9], 0, &[0.2], &hp, 4.0).unwrap();
        assert_eq!(terms.class_loss, 0.0);
    }

    #[test]
    fn subgradient_matches_finite_differences_away_from_kinks() {
        let b = toy_bundle();
        let hp = PnHyperParams {
            kappa: 0.5,
            gamma: 2.0,
            beta: 1.5,
            eta: 0.7,
            nu: 1.3,
            ..PnHyperParams::default()
        };
        let x0 = pixel(0.9);
        let g0 = b.eval_attributes(&x0).unwrap();
        for z in [0.3, 0.6, 0.95] {
            let eval = value_and_grad(&b, &x0, &g0, &[0.8], 0, &[z], &hp, 2.0).unwrap();
            let f = |v: f64| pn_objective(&b, &x0, &[0.8], 0, &[v], &hp, 2.0).unwrap().0;
            let fd = (f(z + 1e-6) - f(z - 1e-6)) / 2e-6;
            assert!((fd - eval.grad[0]).abs() < 1e-6, "z = {z}: {fd} vs {}", eval.grad[0]);
        }
    }

    #[test]
    fn constant_classifier_is_not_found() {
        let b = ModelBundle::new(
            [1, 1, 1],
            1,
            vec!["a".into(), "b".into()],
            linear(vec![0.0, 0.0], vec![1.0, 0.0], 1),
            DenseNet::identity(1).unwrap(),
            None,
            vec![identity_attribute()],
        )
        .unwrap();
        let hp = PnHyperParams {
            iters: 20,
            ..PnHyperParams::default()
        };
        match solve_pn(&b, &pixel(0.5), &hp).unwrap() {
            PnOutcome::NotFound(log) => {
                assert_eq!(
                    log.c_schedule(),
                    vec![1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8]
                );
                assert!(log.rounds.iter().all(|r| r.objective.len() == 21));
            }
            PnOutcome::Found(_) => panic!("constant classifier cannot change class"),
        }
    }

    #[test]
    fn toy_pn_crosses_the_boundary() {
        let b = toy_bundle();
        let hp = PnHyperParams {
            kappa: 0.0,
            gamma: 0.0,
            beta: 0.0,
            ..PnHyperParams::default()
        };
        let x0 = pixel(0.9);
        let r = match solve_pn(&b, &x0, &hp).unwrap() {
            PnOutcome::Found(r) => r,
            PnOutcome::NotFound(_) => panic!("expected a pertinent negative"),
        };
        assert_eq!(r.predicted, 1);
        assert!(r.z[0] < 0.5 && r.z[0] > 0.45, "z = {}", r.z[0]);
        assert_eq!(r.image, b.decode(&r.z).unwrap());
        let (total, terms) = pn_objective(&b, &x0, &[0.9], 0, &r.z, &hp, r.c).unwrap();
        assert!((total - r.objective).abs() < 1e-9);
        for (a, e) in terms.as_array().iter().zip(r.terms.as_array()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_invalid_hyperparameters() {
        let b = toy_bundle();
        for hp in [
            PnHyperParams { kappa: -1.0, ..Default::default() },
            PnHyperParams { rounds: 0, ..Default::default() },
            PnHyperParams { step: 0.0, ..Default::default() },
            PnHyperParams { c0: 0.0, ..Default::default() },
        ] {
            assert!(solve_pn(&b, &pixel(0.9), &hp).is_err());
        }
    }

    #[test]
    fn divergence_is_reported() {
        // A huge step blows up the latent code.
        let b = toy_bundle();
        let hp = PnHyperParams {
            step: 1e306,
            kappa: 0.0,
            iters: 5,
            ..PnHyperParams::default()
        };
        assert!(matches!(solve_pn(&b, &pixel(0.9), &hp), Err(Error::Diverged(_))));
    }
}
