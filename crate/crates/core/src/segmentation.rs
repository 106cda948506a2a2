//! Superpixel partitions and mask application.

use crate::error::{Error, Result};
use crate::image::{decode_pnm, encode_pnm, Image, Pnm};

/// Assignment of every pixel to one of `count` superpixels.
///
/// Labels are shared by all channels of a pixel. Every id in `0..count`
/// labels at least one pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelPartition {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    count: usize,
}

impl SuperpixelPartition {
    pub fn from_labels(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map of {} entries for a {height}x{width} image",
                labels.len()
            )));
        }
        let count = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "superpixel id {missing} labels no pixel (ids must be 0..{count})"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::Shape(format!(
                "partition is {}x{}, image is {}x{}",
                self.height,
                self.width,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }
}

/// Rectangular grid partition with roughly `target_count` cells.
///
/// `rows = round(sqrt(target * H / W))` clamped to `[1, H]`, then
/// `cols = ceil(target / rows)` clamped to `[1, W]`. Requests larger than the
/// pixel count are clamped to one superpixel per pixel; the actual count is
/// `rows * cols`.
pub fn grid_segment(height: usize, width: usize, target_count: usize) -> Result<SuperpixelPartition> {
    if target_count < 1 {
        return Err(Error::InvalidArgument("target superpixel count must be at least 1".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::Shape("image dimensions must be positive".into()));
    }
    let rows = ((target_count as f64 * height as f64 / width as f64).sqrt().round() as usize)
        .clamp(1, height);
    let cols = target_count.div_ceil(rows).clamp(1, width);
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        let cell_row = r * rows / height;
        for c in 0..width {
            labels.push(cell_row * cols + c * cols / width);
        }
    }
    SuperpixelPartition::from_labels(height, width, labels)
}

/// Relaxed or binary mask over superpixels, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector(Vec<f64>);

impl MaskVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "mask entry {pos} = {} outside [0, 1]",
                values[pos]
            )));
        }
        Ok(Self(values))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Binary mask with the listed superpixels switched on.
    pub fn from_selection(n: usize, selected: &[usize]) -> Result<Self> {
        let mut m = vec![0.0; n];
        for &id in selected {
            *m.get_mut(id).ok_or_else(|| {
                Error::InvalidArgument(format!("superpixel {id} out of range 0..{n}"))
            })? = 1.0;
        }
        Ok(Self(m))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `pixel <- m * x0 + (1 - m) * background`, using the mask entry of the
/// pixel's superpixel for every channel.
pub fn apply_mask(
    image: &Image,
    partition: &SuperpixelPartition,
    mask: &MaskVector,
    background: f64,
) -> Result<Image> {
    partition.check_image(image)?;
    if mask.len() != partition.count() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} superpixels",
            mask.len(),
            partition.count()
        )));
    }
    if !(0.0..=1.0).contains(&background) {
        return Err(Error::InvalidArgument(format!(
            "background {background} outside [0, 1]"
        )));
    }
    let c = image.channels();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let m = mask.0[partition.labels[i / c]];
            m * x + (1.0 - m) * background
        })
        .collect();
    Image::new(image.height(), image.width(), c, data)
}

/// Chain rule through [`apply_mask`]: gradient with respect to the mask given
/// the gradient with respect to the masked image.
pub fn mask_gradient(
    image: &Image,
    partition: &SuperpixelPartition,
    background: f64,
    image_grad: &[f64],
) -> Result<Vec<f64>> {
    partition.check_image(image)?;
    if image_grad.len() != image.data().len() {
        return Err(Error::Shape("image gradient length mismatch".into()));
    }
    let c = image.channels();
    let mut grad = vec![0.0; partition.count()];
    for (i, (&x, &g)) in image.data().iter().zip(image_grad).enumerate() {
        grad[partition.labels[i / c]] += (x - background) * g;
    }
    Ok(grad)
}

/// Label map as a PGM whose sample values are superpixel ids.
pub fn encode_label_map(partition: &SuperpixelPartition) -> Result<Vec<u8>> {
    let maxval = if partition.count <= 256 {
        255
    } else if partition.count <= 65536 {
        65535
    } else {
        return Err(Error::Format(format!(
            "{} superpixels do not fit in a 16-bit label map",
            partition.count
        )));
    };
    encode_pnm(&Pnm {
        width: partition.width,
        height: partition.height,
        channels: 1,
        maxval,
        samples: partition.labels.iter().map(|&l| l as u16).collect(),
    })
}

pub fn decode_label_map(bytes: &[u8]) -> Result<SuperpixelPartition> {
    let pnm = decode_pnm(bytes)?;
    if pnm.channels != 1 {
        return Err(Error::Format("label map must be a greyscale PGM".into()));
    }
    SuperpixelPartition::from_labels(
        pnm.height,
        pnm.width,
        pnm.samples.iter().map(|&s| s as usize).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let n = h * w * c;
        Image::new(h, w, c, (0..n).map(|i| (i + 1) as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn quadrants() {
        let p = grid_segment(8, 8, 4).unwrap();
        assert_eq!(p.count(), 4);
        assert_eq!(p.sizes(), vec![16; 4]);
        assert_eq!(p.label(0, 0), 0);
        assert_eq!(p.label(0, 7), 1);
        assert_eq!(p.label(7, 0), 2);
        assert_eq!(p.label(7, 7), 3);
    }

    #[test]
    fn single_superpixel() {
        let p = grid_segment(8, 8, 1).unwrap();
        assert_eq!(p.count(), 1);
        assert_eq!(p.sizes(), vec![64]);
    }

    #[test]
    fn twenty_eight_square() {
        let p = grid_segment(28, 28, 196).unwrap();
        assert_eq!(p.count(), 196);
        assert!(p.sizes().iter().all(|&s| s == 4));
        // 2x2 cells: pixel (3, 5) sits in cell row 1, cell col 2.
        assert_eq!(p.label(3, 5), 14 + 2);
    }

    #[test]
    fn oversized_request_is_clamped() {
        let p = grid_segment(8, 8, 200).unwrap();
        assert_eq!(p.count(), 64);
        assert!(grid_segment(8, 8, 0).is_err());
    }

    #[test]
    fn mask_examples() {
        let img = ramp(8, 8, 1);
        let p = grid_segment(8, 8, 4).unwrap();
        assert_eq!(apply_mask(&img, &p, &MaskVector::ones(4), 0.0).unwrap(), img);
        let zero = apply_mask(&img, &p, &MaskVector::zeros(4), 0.0).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let one = apply_mask(&img, &p, &MaskVector::from_selection(4, &[3]).unwrap(), 0.0).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let i = r * 8 + c;
                let expected = if r >= 4 && c >= 4 { img.data()[i] } else { 0.0 };
                assert_eq!(one.data()[i], expected);
            }
        }
    }

    #[test]
    fn mask_errors() {
        let img = ramp(4, 4, 1);
        let p = grid_segment(4, 4, 4).unwrap();
        assert!(apply_mask(&img, &p, &MaskVector::ones(3), 0.0).is_err());
        assert!(apply_mask(&img, &p, &MaskVector::ones(4), 1.5).is_err());
        assert!(apply_mask(&ramp(4, 5, 1), &p, &MaskVector::ones(4), 0.0).is_err());
        assert!(MaskVector::new(vec![0.5, 1.1]).is_err());
        assert!(MaskVector::from_selection(4, &[4]).is_err());
    }

    #[test]
    fn background_fill_per_channel() {
        let img = ramp(2, 2, 3);
        let p = grid_segment(2, 2, 4).unwrap();
        let out = apply_mask(&img, &p, &MaskVector::zeros(4), 0.25).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn label_map_round_trip() {
        let p = grid_segment(28, 28, 196).unwrap();
        let back = decode_label_map(&encode_label_map(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        let wide = grid_segment(20, 20, 400).unwrap();
        assert_eq!(decode_label_map(&encode_label_map(&wide).unwrap()).unwrap(), wide);
    }

    #[test]
    fn label_map_with_gap_is_rejected() {
        let bytes = b"P2\n2 1\n255\n0 2\n";
        assert!(decode_label_map(bytes).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let img = ramp(4, 4, 2);
        let p = grid_segment(4, 4, 4).unwrap();
        let weights: Vec<f64> = (0..32).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let objective = |m: &[f64]| {
            let out = apply_mask(&img, &p, &MaskVector::new(m.to_vec()).unwrap(), 0.1).unwrap();
            out.data().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let grad = mask_gradient(&img, &p, 0.1, &weights).unwrap();
        let m = [0.5; 4];
        for j in 0..4 {
            let (mut up, mut down) = (m, m);
            up[j] += 1e-6;
            down[j] -= 1e-6;
            let fd = (objective(&up) - objective(&down)) / 2e-6;
            assert!((fd - grad[j]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn grid_covers_every_pixel(h in 1usize..40, w in 1usize..40, target in 1usize..300) {
            let p = grid_segment(h, w, target).unwrap();
            prop_assert_eq!(p.sizes().iter().sum::<usize>(), h * w);
            prop_assert!(p.sizes().iter().all(|&s| s > 0));
        }

        #[test]
        fn mask_is_linear(alpha in 0.0f64..=1.0, m in proptest::collection::vec(0.0f64..=1.0, 4)) {
            let img = ramp(4, 4, 1);
            let p = grid_segment(4, 4, 4).unwrap();
            let base = apply_mask(&img, &p, &MaskVector::new(m.clone()).unwrap(), 0.0).unwrap();
            let scaled_mask = MaskVector::new(m.iter().map(|v| alpha * v).collect()).unwrap();
            let scaled = apply_mask(&img, &p, &scaled_mask, 0.0).unwrap();
            for (a, b) in scaled.data().iter().zip(base.data()) {
                prop_assert!((a - alpha * b).abs() <= 1e-15);
            }
        }

        #[test]
        fn binary_mask_is_idempotent(bits in proptest::collection::vec(any::<bool>(), 4)) {
            let img = ramp(4, 4, 1);
            let p = grid_segment(4, 4, 4).unwrap();
            let m = MaskVector::new(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
            let once = apply_mask(&img, &p, &m, 0.0).unwrap();
            let twice = apply_mask(&once, &p, &m, 0.0).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
