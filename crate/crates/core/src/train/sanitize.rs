//! Clean-up for noisy external masks.

use crate::inference::BitMask;
use crate::network::BoxXyxy;

/// Clears pixels whose centre lies outside `bbox`.
pub fn suppress_leakage(mask: &BitMask, bbox: &BoxXyxy) -> BitMask {
    let mut out = mask.clone();
    for y in 0..mask.height {
        for x in 0..mask.width {
            let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
            if cx < bbox[0] || cx > bbox[2] || cy < bbox[1] || cy > bbox[3] {
                out.set(y, x, false);
            }
        }
    }
    out
}

/// Removes 4-connected components smaller than `min_area` pixels.
pub fn remove_fragments(mask: &BitMask, min_area: usize) -> BitMask {
    let (h, w) = (mask.height, mask.width);
    let mut out = mask.clone();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data[start] == 0 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        component.clear();
        while let Some(i) = stack.pop() {
            component.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && mask.data[j] != 0 {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if component.len() < min_area {
            for &i in &component {
                out.data[i] = 0;
            }
        }
    }
    out
}

/// Out-of-box suppression followed by fragment removal.
pub fn sanitize_mask(mask: &BitMask, bbox: Option<&BoxXyxy>, min_area: usize) -> BitMask {
    let clipped = match bbox {
        Some(b) => suppress_leakage(mask, b),
        None => mask.clone(),
    };
    remove_fragments(&clipped, min_area)
}
