//! Desk-scale fixture bundles.
//!
//! Synthetic class-conditional images (one Gaussian blob per class, placed
//! on a ring around the image centre) train a small dense classifier with
//! full-batch gradient descent and a dense autoencoder whose halves become
//! the bundle's encoder and decoder. Attributes are analytic region means.
//! Everything is driven by a single seed and is bit-for-bit reproducible.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{argmax, Attribute, ModelBundle};
use crate::error::{Error, Result};
use crate::image::{write_image, Image};
use crate::kv;
use crate::network::{Activation, DenseNet};
use crate::tensor::Tensor;
use crate::weights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub latent_dim: usize,
    pub samples_per_class: usize,
    pub fixture_images: usize,
    pub classifier_hidden: usize,
    pub classifier_epochs: usize,
    pub autoencoder_hidden: usize,
    pub autoencoder_epochs: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 1,
            classes: 3,
            latent_dim: 4,
            samples_per_class: 60,
            fixture_images: 10,
            classifier_hidden: 16,
            classifier_epochs: 400,
            autoencoder_hidden: 32,
            autoencoder_epochs: 300,
        }
    }
}

impl FixtureConfig {
    /// Parses `key = value` text; omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for entry in kv::parse(text)? {
            let slot = match entry.key.as_str() {
                "height" => &mut cfg.height,
                "width" => &mut cfg.width,
                "channels" => &mut cfg.channels,
                "classes" => &mut cfg.classes,
                "latent_dim" => &mut cfg.latent_dim,
                "samples_per_class" => &mut cfg.samples_per_class,
                "fixture_images" => &mut cfg.fixture_images,
                "classifier_hidden" => &mut cfg.classifier_hidden,
                "classifier_epochs" => &mut cfg.classifier_epochs,
                "autoencoder_hidden" => &mut cfg.autoencoder_hidden,
                "autoencoder_epochs" => &mut cfg.autoencoder_epochs,
                _ => return Err(entry.unknown()),
            };
            *slot = entry.parse_value()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "fixture needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidArgument("fixture images must be at least 2x2".into()));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::InvalidArgument("fixture images have 1 or 3 channels".into()));
        }
        let positive = [
            ("latent_dim", self.latent_dim),
            ("samples_per_class", self.samples_per_class),
            ("fixture_images", self.fixture_images),
            ("classifier_hidden", self.classifier_hidden),
            ("autoencoder_hidden", self.autoencoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.height * self.width * self.channels > 1 << 16 {
            return Err(Error::InvalidArgument("fixture images are limited to 65536 values".into()));
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureImageInfo {
    pub file: String,
    pub label: usize,
    pub predicted: usize,
    pub attributes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub seed: u64,
    pub config: FixtureConfig,
    pub train_accuracy: f64,
    pub reconstruction_mae: f64,
    pub attribute_names: Vec<String>,
    pub images: Vec<FixtureImageInfo>,
}

#[derive(Clone, Debug)]
pub struct FixtureSet {
    pub bundle: ModelBundle,
    pub images: Vec<Image>,
    pub manifest: FixtureManifest,
}

pub const FIXTURE_MANIFEST: &str = "fixtures.toml";
pub const BUNDLE_DIR: &str = "bundle";
pub const IMAGES_DIR: &str = "images";

struct BlobSampler {
    cfg: FixtureConfig,
}

impl BlobSampler {
    fn centre(&self, class: usize) -> (f64, f64) {
        let (h, w) = (self.cfg.height as f64, self.cfg.width as f64);
        let angle = 2.0 * PI * class as f64 / self.cfg.classes as f64 + PI / 4.0;
        let radius = 0.3 * h.min(w);
        ((h - 1.0) / 2.0 + radius * angle.sin(), (w - 1.0) / 2.0 + radius * angle.cos())
    }

    fn sample<R: Rng>(&self, class: usize, rng: &mut R) -> Image {
        let cfg = &self.cfg;
        let scale = cfg.height.min(cfg.width) as f64 / 8.0;
        let (cy, cx) = self.centre(class);
        let cy = cy + rng.random_range(-0.6..0.6) * scale;
        let cx = cx + rng.random_range(-0.6..0.6) * scale;
        let sigma = rng.random_range(1.0..1.4) * scale;
        let amplitude = rng.random_range(0.75..1.0);
        let mut data = Vec::with_capacity(cfg.pixels());
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                let v = amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                for ch in 0..cfg.channels {
                    let tint = 1.0 - 0.3 * ((class + ch) % cfg.channels) as f64 / cfg.channels as f64;
                    data.push((v * tint).clamp(0.0, 1.0));
                }
            }
        }
        Image::new(cfg.height, cfg.width, cfg.channels, data)
            .expect("blob values are in range")
            .quantized()
    }
}

/// Region-mean attribute over pixels where `include(row, col)` holds.
fn region_mean(cfg: &FixtureConfig, name: &str, include: impl Fn(usize, usize) -> bool) -> Result<Attribute> {
    let mut w = Vec::with_capacity(cfg.pixels());
    let mut count = 0usize;
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let inside = include(r, c);
            count += usize::from(inside) * cfg.channels;
            for _ in 0..cfg.channels {
                w.push(if inside { 1.0 } else { 0.0 });
            }
        }
    }
    let w = w.into_iter().map(|v| v / count as f64).collect();
    let mut net = DenseNet::linear(
        Tensor::matrix(1, cfg.pixels(), w)?,
        Tensor::vector(vec![0.0])?,
        Activation::Identity,
    )?;
    quantize_net(&mut net)?;
    let threshold = Attribute::default_threshold(&net);
    Attribute::new(name, net, threshold, 1.0)
}

fn fixture_attributes(cfg: &FixtureConfig) -> Result<Vec<Attribute>> {
    let (h, w) = (cfg.height, cfg.width);
    Ok(vec![
        region_mean(cfg, "brightness", |_, _| true)?,
        region_mean(cfg, "top_mass", |r, _| 2 * r < h)?,
        region_mean(cfg, "bottom_mass", |r, _| 2 * r >= h)?,
        region_mean(cfg, "left_mass", |_, c| 2 * c < w)?,
        region_mean(cfg, "right_mass", |_, c| 2 * c >= w)?,
    ])
}

fn softmax_ce_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 })
        .collect()
}

fn apply_update(net: &mut DenseNet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
    let params = net
        .params()
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let data = p.data().iter().zip(g).map(|(v, gv)| v - lr * gv).collect();
            Tensor::new(p.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    net.set_params(params)
}

fn zero_grads(net: &DenseNet) -> Vec<Vec<f64>> {
    net.params().iter().map(|p| vec![0.0; p.numel()]).collect()
}

fn add_grads(acc: &mut [Vec<f64>], grads: &[Tensor], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += scale * y);
    }
}

/// Full-batch gradient descent on softmax cross-entropy.
fn train_classifier(net: &mut DenseNet, data: &[(Image, usize)], epochs: usize, lr: f64) -> Result<()> {
    let scale = 1.0 / data.len() as f64;
    for _ in 0..epochs {
        let mut acc = zero_grads(net);
        for (image, label) in data {
            let logits = net.forward(image.data())?;
            let cot = softmax_ce_grad(&logits, *label);
            let (_, _, grads) = net.vjp_params(image.data(), &cot)?;
            add_grads(&mut acc, &grads, scale);
        }
        apply_update(net, &acc, lr)?;
    }
    Ok(())
}

/// Mini-batch gradient descent with momentum on per-pixel squared error.
fn train_autoencoder<R: Rng>(
    encoder: &mut DenseNet,
    decoder: &mut DenseNet,
    data: &[Image],
    epochs: usize,
    rng: &mut R,
) -> Result<()> {
    const LR: f64 = 0.01;
    const MOMENTUM: f64 = 0.9;
    const BATCH: usize = 16;
    let mut vel_enc = zero_grads(encoder);
    let mut vel_dec = zero_grads(decoder);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        // Fisher-Yates with the fixture RNG so the order is reproducible.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(BATCH) {
            let mut g_enc = zero_grads(encoder);
            let mut g_dec = zero_grads(decoder);
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let x = data[idx].data();
                let z = encoder.forward(x)?;
                let recon = decoder.forward(&z)?;
                let cot: Vec<f64> = recon
                    .iter()
                    .zip(x)
                    .map(|(r, t)| 2.0 * (r - t))
                    .collect();
                let (_, gz, gd) = decoder.vjp_params(&z, &cot)?;
                let (_, _, ge) = encoder.vjp_params(x, &gz)?;
                add_grads(&mut g_dec, &gd, scale);
                add_grads(&mut g_enc, &ge, scale);
            }
            for (net, vel, grads) in [
                (&mut *encoder, &mut vel_enc, &g_enc),
                (&mut *decoder, &mut vel_dec, &g_dec),
            ] {
                for (v, g) in vel.iter_mut().zip(grads) {
                    v.iter_mut().zip(g).for_each(|(vi, gi)| *vi = MOMENTUM * *vi + gi);
                }
                apply_update(net, vel, LR)?;
            }
        }
    }
    Ok(())
}

/// Rounds every parameter through `f32` so in-memory results match a saved bundle.
fn quantize_net(net: &mut DenseNet) -> Result<()> {
    let params = net.params().iter().map(weights::quantize).collect();
    net.set_params(params)
}

pub fn train_fixture(cfg: &FixtureConfig, seed: u64) -> Result<FixtureSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = BlobSampler { cfg: cfg.clone() };

    let mut train = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for i in 0..cfg.classes * cfg.samples_per_class {
        let label = i % cfg.classes;
        train.push((sampler.sample(label, &mut rng), label));
    }
    let n = cfg.pixels();

    let mut classifier = DenseNet::random(
        vec![n, cfg.classifier_hidden, cfg.classes],
        vec![Activation::Relu, Activation::Identity],
        &mut rng,
    )?;
    train_classifier(&mut classifier, &train, cfg.classifier_epochs, 0.5)?;
    quantize_net(&mut classifier)?;

    let mut encoder = DenseNet::random(
        vec![n, cfg.autoencoder_hidden, cfg.latent_dim],
        vec![Activation::Relu, Activation::Identity],
        &mut rng,
    )?;
    let mut decoder = DenseNet::random(
        vec![cfg.latent_dim, cfg.autoencoder_hidden, n],
        vec![Activation::Relu, Activation::Sigmoid],
        &mut rng,
    )?;
    let images: Vec<Image> = train.iter().map(|(img, _)| img.clone()).collect();
    train_autoencoder(&mut encoder, &mut decoder, &images, cfg.autoencoder_epochs, &mut rng)?;
    quantize_net(&mut encoder)?;
    quantize_net(&mut decoder)?;

    let class_names = (0..cfg.classes).map(|k| format!("blob{k}")).collect();
    let bundle = ModelBundle::new(
        [cfg.height, cfg.width, cfg.channels],
        cfg.latent_dim,
        class_names,
        classifier,
        decoder,
        Some(encoder),
        fixture_attributes(cfg)?,
    )?;

    let correct = train
        .iter()
        .map(|(img, label)| Ok(usize::from(bundle.predict(img)? == *label)))
        .sum::<Result<usize>>()?;
    let train_accuracy = correct as f64 / train.len() as f64;

    // Held-out fixture images from an independent stream.
    let mut fixture_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1c7_u64);
    let mut fixture_images = Vec::with_capacity(cfg.fixture_images);
    let mut infos = Vec::with_capacity(cfg.fixture_images);
    let mut mae_sum = 0.0;
    for i in 0..cfg.fixture_images {
        let label = i % cfg.classes;
        let image = sampler.sample(label, &mut fixture_rng);
        let recon = bundle.decode(&bundle.latent_code(&image)?)?;
        mae_sum += recon
            .data()
            .iter()
            .zip(image.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64;
        infos.push(FixtureImageInfo {
            file: format!("img_{i:02}.pgm"),
            label,
            predicted: argmax(&bundle.classify(&image)?),
            attributes: bundle.eval_attributes(&image)?,
        });
        fixture_images.push(image);
    }
    if cfg.channels == 3 {
        for info in &mut infos {
            info.file = info.file.replace(".pgm", ".ppm");
        }
    }

    let manifest = FixtureManifest {
        seed,
        config: cfg.clone(),
        train_accuracy,
        reconstruction_mae: mae_sum / cfg.fixture_images as f64,
        attribute_names: bundle.attributes().iter().map(|a| a.name.clone()).collect(),
        images: infos,
    };
    log::info!(
        "fixture trained: accuracy {:.3}, reconstruction MAE {:.4}",
        manifest.train_accuracy,
        manifest.reconstruction_mae
    );
    Ok(FixtureSet {
        bundle,
        images: fixture_images,
        manifest,
    })
}

impl FixtureSet {
    /// Writes `bundle/`, `images/` and the fixture manifest under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.bundle.save(&dir.join(BUNDLE_DIR))?;
        let images_dir = dir.join(IMAGES_DIR);
        std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for (image, info) in self.images.iter().zip(&self.manifest.images) {
            write_image(&images_dir.join(&info.file), image)?;
        }
        let text = toml::to_string(&self.manifest).map_err(|e| Error::Manifest(e.to_string()))?;
        let path = dir.join(FIXTURE_MANIFEST);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn read_fixture_manifest(dir: &Path) -> Result<FixtureManifest> {
    let path = dir.join(FIXTURE_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let cfg = FixtureConfig::parse("classes = 2\nheight=6").unwrap();
        assert_eq!(cfg.classes, 2);
        assert_eq!(cfg.height, 6);
        assert_eq!(cfg.width, 8);
        assert!(FixtureConfig::parse("classes = 0").is_err());
        assert!(FixtureConfig::parse("colour = 1").is_err());
        assert!(FixtureConfig::parse("channels = 2").is_err());
    }

    #[test]
    fn zero_classes_is_unsatisfiable() {
        let cfg = FixtureConfig {
            classes: 0,
            ..FixtureConfig::default()
        };
        assert!(train_fixture(&cfg, 1).is_err());
    }

    #[test]
    fn softmax_gradient_sums_to_zero() {
        let g = softmax_ce_grad(&[1.0, 2.0, -0.5], 1);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(g[1] < 0.0);
    }
}
