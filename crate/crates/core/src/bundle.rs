//! Model bundle: classifier, decoder, optional encoder and attribute functions.
//!
//! On disk a bundle is a directory holding a TOML `manifest.toml` and one
//! CMAF weight file per component (see [`crate::weights`]).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{Activation, DenseNet};
use crate::weights;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const BUNDLE_FORMAT: &str = "cemmaf-bundle";
pub const BUNDLE_VERSION: u32 = 1;

/// Gradient-descent schedule used to find a latent code when no encoder ships.
pub const INVERSION_STEPS: usize = 500;
pub const INVERSION_STEP_SIZE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub file: String,
    pub layers: Vec<usize>,
    pub activations: Vec<Activation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub file: String,
    pub layers: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Increase beyond which a change counts as an added concept.
    pub threshold: f64,
    /// `1` if larger network output means more of the concept, `-1` otherwise.
    pub direction: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// `[height, width, channels]`.
    pub image_shape: [usize; 3],
    pub latent_dim: usize,
    pub class_names: Vec<String>,
    pub classifier: ComponentSpec,
    pub decoder: ComponentSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<ComponentSpec>,
    pub attributes: Vec<AttributeSpec>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let manifest: Manifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Manifest(format!(
            "format {:?}, expected {BUNDLE_FORMAT:?}",
            manifest.format
        )));
    }
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::Manifest(format!(
            "version {}, expected {BUNDLE_VERSION}",
            manifest.version
        )));
    }
    let files = std::iter::once(&manifest.classifier.file)
        .chain(std::iter::once(&manifest.decoder.file))
        .chain(manifest.encoder.iter().map(|e| &e.file))
        .chain(manifest.attributes.iter().map(|a| &a.file));
    for file in files {
        if file.is_empty()
            || file.contains(['/', '\\'])
            || file == "."
            || file == ".."
        {
            return Err(Error::Manifest(format!(
                "component file {file:?} must be a plain file name"
            )));
        }
    }
    Ok(manifest)
}

/// Interpretable concept score `g(x) = direction * net(x)`.
#[derive(Clone, Debug)]
pub struct Attribute {
    pub name: String,
    pub net: DenseNet,
    pub threshold: f64,
    pub direction: f64,
}

impl Attribute {
    pub fn new(name: impl Into<String>, net: DenseNet, threshold: f64, direction: f64) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::Shape("attribute networks must have a single output".into()));
        }
        if direction != 1.0 && direction != -1.0 {
            return Err(Error::InvalidArgument("attribute direction must be 1 or -1".into()));
        }
        if !threshold.is_finite() {
            return Err(Error::InvalidArgument("attribute threshold must be finite".into()));
        }
        Ok(Self {
            name: name.into(),
            net,
            threshold,
            direction,
        })
    }

    /// Default threshold: 0.5 for sigmoid outputs, 0.0 otherwise.
    pub fn default_threshold(net: &DenseNet) -> f64 {
        match net.activations().last() {
            Some(Activation::Sigmoid) => 0.5,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    image_shape: [usize; 3],
    latent_dim: usize,
    class_names: Vec<String>,
    classifier: DenseNet,
    decoder: DenseNet,
    encoder: Option<DenseNet>,
    attributes: Vec<Attribute>,
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Largest score among classes other than `exclude` (lowest index on ties).
pub fn best_other(scores: &[f64], exclude: usize) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if i != exclude && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.expect("at least two classes")
}

impl ModelBundle {
    pub fn new(
        image_shape: [usize; 3],
        latent_dim: usize,
        class_names: Vec<String>,
        classifier: DenseNet,
        decoder: DenseNet,
        encoder: Option<DenseNet>,
        attributes: Vec<Attribute>,
    ) -> Result<Self> {
        let n_in: usize = image_shape.iter().product();
        if n_in == 0 || latent_dim == 0 {
            return Err(Error::Shape("image shape and latent dimension must be positive".into()));
        }
        if class_names.len() < 2 {
            return Err(Error::InvalidArgument("a classifier needs at least two classes".into()));
        }
        if classifier.input_dim() != n_in || classifier.output_dim() != class_names.len() {
            return Err(Error::Shape(format!(
                "classifier maps {} -> {}, bundle needs {n_in} -> {}",
                classifier.input_dim(),
                classifier.output_dim(),
                class_names.len()
            )));
        }
        if decoder.input_dim() != latent_dim || decoder.output_dim() != n_in {
            return Err(Error::Shape(format!(
                "decoder maps {} -> {}, bundle needs {latent_dim} -> {n_in}",
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        if let Some(enc) = &encoder {
            if enc.input_dim() != n_in || enc.output_dim() != latent_dim {
                return Err(Error::Shape(format!(
                    "encoder maps {} -> {}, bundle needs {n_in} -> {latent_dim}",
                    enc.input_dim(),
                    enc.output_dim()
                )));
            }
        }
        if attributes.is_empty() {
            return Err(Error::InvalidArgument("a bundle needs at least one attribute".into()));
        }
        let mut names = BTreeSet::new();
        for a in &attributes {
            if a.net.input_dim() != n_in {
                return Err(Error::Shape(format!(
                    "attribute {:?} expects {} inputs, bundle images have {n_in}",
                    a.name,
                    a.net.input_dim()
                )));
            }
            if !names.insert(a.name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate attribute name {:?}",
                    a.name
                )));
            }
        }
        Ok(Self {
            image_shape,
            latent_dim,
            class_names,
            classifier,
            decoder,
            encoder,
            attributes,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn classifier(&self) -> &DenseNet {
        &self.classifier
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub fn encoder(&self) -> Option<&DenseNet> {
        self.encoder.as_ref()
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.shape() != self.image_shape {
            return Err(Error::Shape(format!(
                "image is {:?}, bundle expects {:?}",
                image.shape(),
                self.image_shape
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent code has {} entries, bundle expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Raw class logits.
    pub fn classify(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        self.classifier.forward(image.data())
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.classify(image)?))
    }

    /// Decoder output clamped to `[0, 1]`.
    pub fn decode(&self, z: &[f64]) -> Result<Image> {
        self.check_latent(z)?;
        let raw = self.decoder.forward(z)?;
        self.to_image(raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn eval_attributes(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        self.attributes
            .iter()
            .map(|a| Ok(a.direction * a.net.forward(image.data())?[0]))
            .collect()
    }

    fn to_image(&self, data: Vec<f64>) -> Result<Image> {
        let [h, w, c] = self.image_shape;
        Image::new(h, w, c, data)
    }

    /// Scores and `J_f(x)^T cotangent`.
    pub fn classifier_vjp(&self, image: &Image, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_image(image)?;
        self.classifier.vjp(image.data(), cotangent)
    }

    /// Decoded image and the latent gradient of `<cotangent, decode(z)>`.
    /// Clamped entries contribute no gradient.
    pub fn decoder_vjp(&self, z: &[f64], cotangent: &[f64]) -> Result<(Image, Vec<f64>)> {
        self.check_latent(z)?;
        let raw = self.decoder.forward(z)?;
        let masked: Vec<f64> = cotangent
            .iter()
            .zip(&raw)
            .map(|(g, v)| if (0.0..=1.0).contains(v) { *g } else { 0.0 })
            .collect();
        let (_, gz) = self.decoder.vjp(z, &masked)?;
        let image = self.to_image(raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        Ok((image, gz))
    }

    /// Attribute values and the image gradient of `sum_i cotangent_i * g_i(x)`.
    pub fn attributes_vjp(&self, image: &Image, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_image(image)?;
        if cotangent.len() != self.attributes.len() {
            return Err(Error::Shape("attribute cotangent length mismatch".into()));
        }
        let mut values = Vec::with_capacity(self.attributes.len());
        let mut grad = vec![0.0; image.data().len()];
        for (a, &c) in self.attributes.iter().zip(cotangent) {
            let (out, g) = a.net.vjp(image.data(), &[a.direction * c])?;
            values.push(a.direction * out[0]);
            grad.iter_mut().zip(g).for_each(|(acc, v)| *acc += v);
        }
        Ok((values, grad))
    }

    /// Latent code of `image`: the encoder when present, otherwise
    /// gradient-descent inversion of the decoder starting from `z = 0`.
    pub fn latent_code(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        match &self.encoder {
            Some(enc) => enc.forward(image.data()),
            None => self.invert(image, INVERSION_STEPS, INVERSION_STEP_SIZE),
        }
    }

    /// Minimises `||x - decode(z)||^2` by plain gradient descent from zero.
    pub fn invert(&self, image: &Image, steps: usize, step_size: f64) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let mut z = vec![0.0; self.latent_dim];
        for _ in 0..steps {
            let raw = self.decoder.forward(&z)?;
            let cot: Vec<f64> = raw
                .iter()
                .zip(image.data())
                .map(|(d, x)| {
                    if (0.0..=1.0).contains(d) {
                        2.0 * (d - x)
                    } else {
                        0.0
                    }
                })
                .collect();
            let (_, g) = self.decoder.vjp(&z, &cot)?;
            z.iter_mut().zip(g).for_each(|(zi, gi)| *zi -= step_size * gi);
        }
        Ok(z)
    }

    pub fn manifest(&self) -> Manifest {
        let spec = |file: &str, net: &DenseNet| ComponentSpec {
            file: file.to_string(),
            layers: net.sizes().to_vec(),
            activations: net.activations().to_vec(),
        };
        Manifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            image_shape: self.image_shape,
            latent_dim: self.latent_dim,
            class_names: self.class_names.clone(),
            classifier: spec("classifier.cmaf", &self.classifier),
            decoder: spec("decoder.cmaf", &self.decoder),
            encoder: self.encoder.as_ref().map(|e| spec("encoder.cmaf", e)),
            attributes: self
                .attributes
                .iter()
                .enumerate()
                .map(|(i, a)| AttributeSpec {
                    name: a.name.clone(),
                    file: format!("attribute_{i}.cmaf"),
                    layers: a.net.sizes().to_vec(),
                    activations: a.net.activations().to_vec(),
                    threshold: a.threshold,
                    direction: a.direction as i8,
                })
                .collect(),
        }
    }

    /// Writes the manifest and weight files into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        let text = toml::to_string(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        let mut components: Vec<(&str, &DenseNet)> = vec![
            (&manifest.classifier.file, &self.classifier),
            (&manifest.decoder.file, &self.decoder),
        ];
        if let (Some(spec), Some(enc)) = (&manifest.encoder, &self.encoder) {
            components.push((&spec.file, enc));
        }
        for (spec, a) in manifest.attributes.iter().zip(&self.attributes) {
            components.push((&spec.file, &a.net));
        }
        for (file, net) in components {
            let path = dir.join(file);
            std::fs::write(&path, weights::encode(net.params())?)
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingComponent(format!(
                    "manifest {}",
                    path.display()
                )))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let manifest = parse_manifest(&text)?;

        let load_net = |role: &str, spec: &ComponentSpec| -> Result<DenseNet> {
            let path = dir.join(&spec.file);
            let bytes = match std::fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(Error::MissingComponent(format!(
                        "{role} weights {}",
                        path.display()
                    )))
                }
                Err(e) => return Err(Error::io(&path, e)),
            };
            let params = weights::decode(&bytes)
                .map_err(|e| Error::Format(format!("{role} weights: {e}")))?;
            DenseNet::new(spec.layers.clone(), spec.activations.clone(), params)
                .map_err(|e| Error::Manifest(format!("{role}: {e}")))
        };

        let classifier = load_net("classifier", &manifest.classifier)?;
        let decoder = load_net("decoder", &manifest.decoder)?;
        let encoder = manifest
            .encoder
            .as_ref()
            .map(|spec| load_net("encoder", spec))
            .transpose()?;
        let attributes = manifest
            .attributes
            .iter()
            .map(|spec| {
                let net = load_net(&format!("attribute {:?}", spec.name), &ComponentSpec {
                    file: spec.file.clone(),
                    layers: spec.layers.clone(),
                    activations: spec.activations.clone(),
                })?;
                Attribute::new(spec.name.clone(), net, spec.threshold, spec.direction as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        ModelBundle::new(
            manifest.image_shape,
            manifest.latent_dim,
            manifest.class_names,
            classifier,
            decoder,
            encoder,
            attributes,
        )
        .map_err(|e| Error::Manifest(e.to_string()))
    }
}
