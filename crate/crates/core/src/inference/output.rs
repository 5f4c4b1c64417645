use serde::{Deserialize, Serialize};

use super::Detection;

/// One line of detection output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub anchor_id: usize,
    pub label: String,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub mask_rle: Vec<u32>,
}

impl DetectionRecord {
    pub fn new(image: &str, d: &Detection) -> Self {
        Self {
            image: image.to_string(),
            anchor_id: d.anchor_id,
            label: d.label.clone(),
            score: d.score,
            bbox: d.bbox,
            mask_rle: d.mask.to_rle(),
        }
    }
}

/// Line-delimited JSON, one record per detection, newline-terminated.
pub fn detections_to_jsonl(image: &str, detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        out.push_str(&serde_json::to_string(&DetectionRecord::new(image, d)).expect("plain record"));
        out.push('\n');
    }
    out
}
