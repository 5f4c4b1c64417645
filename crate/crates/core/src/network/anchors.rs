use crate::tensor::Tensor;

use super::config::ModelConfig;

/// `[x1, y1, x2, y2]` in input pixels.
pub type BoxXyxy = [f32; 4];

/// Anchor centers, level-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub points: Vec<[f32; 2]>,
    pub stride_of: Vec<f32>,
    pub image_size: [usize; 2],
}

impl AnchorGrid {
    pub fn new(config: &ModelConfig) -> Self {
        let mut points = Vec::with_capacity(config.num_anchors());
        let mut stride_of = Vec::with_capacity(config.num_anchors());
        for (&s, (h, w)) in config.strides.iter().zip(config.level_sizes()) {
            for y in 0..h {
                for x in 0..w {
                    points.push([(x as f32 + 0.5) * s as f32, (y as f32 + 0.5) * s as f32]);
                    stride_of.push(s as f32);
                }
            }
        }
        Self {
            points,
            stride_of,
            image_size: config.input_size,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Unclipped box of one anchor.
    pub fn raw_box(&self, n: usize, d: &[f32]) -> BoxXyxy {
        let [cx, cy] = self.points[n];
        let s = self.stride_of[n];
        [cx - d[0] * s, cy - d[1] * s, cx + d[2] * s, cy + d[3] * s]
    }
}

/// Decodes N×4 distances to clipped pixel boxes.
pub fn decode_boxes(deltas: &Tensor, anchors: &AnchorGrid) -> Vec<BoxXyxy> {
    assert_eq!(deltas.shape(), &[anchors.len(), 4], "deltas must be N×4");
    let [h, w] = anchors.image_size;
    let (w, h) = (w as f32, h as f32);
    (0..anchors.len())
        .map(|n| {
            let b = anchors.raw_box(n, deltas.row(n));
            let x1 = b[0].clamp(0.0, w);
            let y1 = b[1].clamp(0.0, h);
            [x1, y1, b[2].clamp(x1, w), b[3].clamp(y1, h)]
        })
        .collect()
}

/// Inverse of the unclipped decode.
pub fn encode_boxes(boxes: &[BoxXyxy], anchors: &AnchorGrid) -> Tensor {
    let mut out = Vec::with_capacity(boxes.len() * 4);
    for (n, b) in boxes.iter().enumerate() {
        let [cx, cy] = anchors.points[n];
        let s = anchors.stride_of[n];
        out.extend([(cx - b[0]) / s, (cy - b[1]) / s, (b[2] - cx) / s, (b[3] - cy) / s]);
    }
    Tensor::new(vec![boxes.len(), 4], out).expect("N×4")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> AnchorGrid {
        AnchorGrid::new(&ModelConfig::new(8, 1, 16, 4, 64))
    }

    #[test]
    fn first_anchor_and_ordering() {
        let g = grid();
        assert_eq!(g.len(), 84);
        assert_eq!(g.points[0], [4.0, 4.0]);
        assert_eq!(g.points[1], [12.0, 4.0]);
        assert_eq!(g.points[8], [4.0, 12.0]);
        assert_eq!(g.points[64], [8.0, 8.0]);
        assert_eq!(g.stride_of[83], 32.0);
    }

    #[test]
    fn zero_deltas_give_point_boxes() {
        let g = grid();
        let boxes = decode_boxes(&Tensor::zeros(&[84, 4]), &g);
        for (b, p) in boxes.iter().zip(&g.points) {
            assert_eq!(*b, [p[0], p[1], p[0], p[1]]);
        }
    }

    #[test]
    fn unit_deltas_clip_at_origin() {
        let g = grid();
        let boxes = decode_boxes(&Tensor::ones(&[84, 4]), &g);
        assert_eq!(boxes[0], [0.0, 0.0, 12.0, 12.0]);
    }
}
