use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::network::BoxXyxy;
use crate::tensor::Tensor;

/// Pixels added on every side of the box before cropping a mask.
pub const MASK_BOX_PAD: f32 = 2.0;

/// Row-major binary image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BitMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn intersection(&self, other: &BitMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count()
    }

    pub fn iou(&self, other: &BitMask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight `[x1, y1, x2, y2]` pixel-edge box, `None` when empty.
    pub fn bbox(&self) -> Option<BoxXyxy> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then_some([x1 as f32, y1 as f32, x2 as f32, y2 as f32])
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| f32::from(v)).collect();
        Tensor::new(vec![self.height, self.width], data).expect("H×W")
    }

    /// Uncompressed row-major run lengths, alternating 0-runs and 1-runs,
    /// starting with a (possibly empty) 0-run.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for &v in &self.data {
            let v = u8::from(v != 0);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(height: usize, width: usize, counts: &[u32]) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        if total != (height * width) as u64 {
            return Err(Error::Usage(format!(
                "run lengths sum to {total}, mask has {} pixels",
                height * width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for (i, &c) in counts.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
        }
        Ok(Self { height, width, data })
    }
}

/// Pre-sigmoid prototype combination `Σ_k coeffs_k · proto_k`.
pub fn mask_logits(prototypes: &Tensor, coeffs: &[f32]) -> Tensor {
    let k = prototypes.dim(0);
    assert_eq!(k, coeffs.len(), "one coefficient per prototype");
    let (h, w) = (prototypes.dim(1), prototypes.dim(2));
    let mut out = vec![0.0f32; h * w];
    for (c, proto) in coeffs.iter().zip(prototypes.data().chunks(h * w)) {
        for (o, p) in out.iter_mut().zip(proto) {
            *o += c * p;
        }
    }
    Tensor::new(vec![h, w], out).expect("H_m×W_m")
}

/// Instance mask at image resolution: nearest upsampling, `sigmoid > 0.5`
/// (strict), and nothing outside the box grown by [`MASK_BOX_PAD`].
pub fn assemble_mask(prototypes: &Tensor, coeffs: &[f32], bbox: &BoxXyxy, image_size: [usize; 2]) -> BitMask {
    let logits = mask_logits(prototypes, coeffs);
    let (hm, wm) = (logits.dim(0), logits.dim(1));
    let [h, w] = image_size;
    let (fy, fx) = (h / hm, w / wm);
    let x_lo = (bbox[0] - MASK_BOX_PAD).floor().max(0.0) as usize;
    let y_lo = (bbox[1] - MASK_BOX_PAD).floor().max(0.0) as usize;
    let x_hi = ((bbox[2] + MASK_BOX_PAD).ceil().max(0.0) as usize).min(w);
    let y_hi = ((bbox[3] + MASK_BOX_PAD).ceil().max(0.0) as usize).min(h);
    let mut m = BitMask::new(h, w);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let v = logits.data()[(y / fy) * wm + x / fx];
            if sigmoid(v) > 0.5 {
                m.set(y, x, true);
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coefficients_give_an_empty_mask() {
        let protos = Tensor::ones(&[3, 4, 4]);
        let m = assemble_mask(&protos, &[0.0; 3], &[0.0, 0.0, 16.0, 16.0], [16, 16]);
        assert_eq!(m.area(), 0);
    }

    #[test]
    fn positive_prototype_fills_the_box() {
        let mut protos = Tensor::zeros(&[2, 4, 4]);
        protos.data_mut()[16..].iter_mut().for_each(|v| *v = 10.0);
        let m = assemble_mask(&protos, &[0.0, 1.0], &[4.0, 4.0, 8.0, 8.0], [16, 16]);
        // box grown by 2 px on each side
        assert_eq!(m.area(), 8 * 8);
        assert_eq!(m.bbox(), Some([2.0, 2.0, 10.0, 10.0]));
    }

    #[test]
    fn rle_round_trip_starts_with_zero_run() {
        let mut m = BitMask::new(2, 3);
        m.set(0, 0, true);
        m.set(1, 2, true);
        let rle = m.to_rle();
        assert_eq!(rle, vec![0, 1, 4, 1]);
        assert_eq!(BitMask::from_rle(2, 3, &rle).unwrap(), m);
        assert!(BitMask::from_rle(2, 3, &[1, 2]).is_err());
    }
}
