//! Synthetic color-shape scenes with exact masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::BitMask;
use crate::io::ppm;
use crate::network::BoxXyxy;
use crate::params::InitRng;
use crate::tensor::Tensor;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];

const RGB: [[f32; 3]; 4] = [[0.85, 0.15, 0.12], [0.15, 0.75, 0.2], [0.15, 0.25, 0.88], [0.92, 0.85, 0.15]];
const MAX_PLACEMENT_TRIES: usize = 200;

fn default_min_instances() -> usize {
    1
}

fn default_size_range() -> [f32; 2] {
    [0.18, 0.34]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub max_instances: usize,
    #[serde(default = "default_min_instances")]
    pub min_instances: usize,
    pub seed: u64,
    /// Categories never generated.
    #[serde(default)]
    pub exclude: Vec<String>,
    /// When non-empty, the only categories generated.
    #[serde(default)]
    pub only: Vec<String>,
    /// Object extent as a fraction of the shorter image side.
    #[serde(default = "default_size_range")]
    pub size_range: [f32; 2],
}

impl DatasetSpec {
    pub fn new(count: usize, size: usize, max_instances: usize, seed: u64) -> Self {
        Self {
            count,
            height: size,
            width: size,
            shapes: SHAPES.iter().map(|s| s.to_string()).collect(),
            colors: COLORS.iter().map(|s| s.to_string()).collect(),
            max_instances,
            min_instances: 1,
            seed,
            exclude: Vec::new(),
            only: Vec::new(),
            size_range: default_size_range(),
        }
    }

    /// Generated category names, color-major.
    pub fn categories(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.colors {
            for s in &self.shapes {
                let name = format!("{c} {s}");
                let allowed = !self.exclude.contains(&name) && (self.only.is_empty() || self.only.contains(&name));
                if allowed {
                    out.push(name);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.shapes.is_empty() || self.colors.is_empty() {
            return fail("dataset needs at least one shape and one color".into());
        }
        for s in &self.shapes {
            if !SHAPES.contains(&s.as_str()) {
                return fail(format!("unknown shape {s:?} (known: {SHAPES:?})"));
            }
        }
        for c in &self.colors {
            if !COLORS.contains(&c.as_str()) {
                return fail(format!("unknown color {c:?} (known: {COLORS:?})"));
            }
        }
        if self.categories().is_empty() {
            return fail("exclude/only leave no categories".into());
        }
        if self.max_instances == 0 || self.min_instances == 0 || self.min_instances > self.max_instances {
            return fail("need 1 <= min_instances <= max_instances".into());
        }
        if self.height < 16 || self.width < 16 {
            return fail("images must be at least 16×16".into());
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return fail(format!("size_range {:?} must satisfy 0 < lo <= hi <= 1", self.size_range));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub name: String,
    pub bbox: BoxXyxy,
    pub mask: BitMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: Tensor,
    /// Drawing order (later instances are on top).
    pub instances: Vec<Instance>,
}

impl SyntheticScene {
    /// Mirror image left to right.
    pub fn flipped(&self) -> Self {
        let (h, w) = (self.image.dim(1), self.image.dim(2));
        let mut img = self.image.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.data_mut()[(c * h + y) * w + x] = self.image.data()[(c * h + y) * w + (w - 1 - x)];
                }
            }
        }
        let instances = self
            .instances
            .iter()
            .map(|i| {
                let mut m = BitMask::new(h, w);
                for y in 0..h {
                    for x in 0..w {
                        m.set(y, x, i.mask.get(y, w - 1 - x));
                    }
                }
                let wf = w as f32;
                Instance {
                    name: i.name.clone(),
                    bbox: [wf - i.bbox[2], i.bbox[1], wf - i.bbox[0], i.bbox[3]],
                    mask: m,
                }
            })
            .collect();
        Self { image: img, instances }
    }
}

fn inside(shape: &str, u: f32, v: f32) -> bool {
    // (u, v) relative to the shape's square frame, both in [-1, 1]
    match shape {
        "circle" => u * u + v * v <= 1.0,
        "square" => u.abs() <= 0.8 && v.abs() <= 0.8,
        "triangle" => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8,
        _ => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
    }
}

/// Scene `index` of `spec`; each scene has its own generator stream.
pub fn generate_scene(spec: &DatasetSpec, index: usize) -> SyntheticScene {
    let (h, w) = (spec.height, spec.width);
    let mut rng = InitRng::new(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_add(1));
    let cats = spec.categories();
    let side = h.min(w) as f32;

    let mut image = vec![0.0f32; 3 * h * w];
    let bg: Vec<f32> = (0..3).map(|_| rng.uniform(0.05, 0.3)).collect();
    for c in 0..3 {
        for i in 0..h * w {
            image[c * h * w + i] = (bg[c] + rng.uniform(-0.03, 0.03)).clamp(0.0, 1.0);
        }
    }

    let mut want = spec.min_instances + rng.below(spec.max_instances - spec.min_instances + 1);
    let mut frames: Vec<(f32, f32, f32, usize)>;
    loop {
        frames = Vec::new();
        let mut failed = false;
        for _ in 0..want {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let s = rng.uniform(spec.size_range[0], spec.size_range[1]) * side;
                let x0 = rng.uniform(0.0, w as f32 - s);
                let y0 = rng.uniform(0.0, h as f32 - s);
                let clear = frames.iter().all(|&(fx, fy, fs, _)| {
                    x0 + s + 2.0 <= fx || fx + fs + 2.0 <= x0 || y0 + s + 2.0 <= fy || fy + fs + 2.0 <= y0
                });
                if clear {
                    frames.push((x0, y0, s, rng.below(cats.len())));
                    placed = true;
                    break;
                }
            }
            if !placed {
                failed = true;
                break;
            }
        }
        if !failed || want == 1 {
            break;
        }
        want -= 1;
    }

    let mut instances = Vec::new();
    for (x0, y0, s, cat) in frames {
        let name = cats[cat].clone();
        let (color, shape) = name.split_once(' ').expect("color shape");
        let ci = COLORS.iter().position(|c| *c == color).expect("known color");
        let tint: Vec<f32> = (0..3).map(|c| (RGB[ci][c] + rng.uniform(-0.07, 0.07)).clamp(0.0, 1.0)).collect();
        let (cx, cy, r) = (x0 + s / 2.0, y0 + s / 2.0, s / 2.0);
        let mut mask = BitMask::new(h, w);
        let (ylo, yhi) = (y0.floor().max(0.0) as usize, ((y0 + s).ceil() as usize).min(h));
        let (xlo, xhi) = (x0.floor().max(0.0) as usize, ((x0 + s).ceil() as usize).min(w));
        for y in ylo..yhi {
            for x in xlo..xhi {
                let u = (x as f32 + 0.5 - cx) / r;
                let v = (y as f32 + 0.5 - cy) / r;
                if inside(shape, u, v) {
                    mask.set(y, x, true);
                    for c in 0..3 {
                        image[(c * h + y) * w + x] = (tint[c] + rng.uniform(-0.03, 0.03)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        if let Some(bbox) = mask.bbox() {
            instances.push(Instance { name, bbox, mask });
        }
    }
    SyntheticScene {
        image: Tensor::new(vec![3, h, w], image).expect("3×H×W"),
        instances,
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SyntheticScene>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| generate_scene(spec, i)).collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    name: String,
    #[serde(rename = "box")]
    bbox: BoxXyxy,
    mask_rle: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    instances: Vec<InstanceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    spec: DatasetSpec,
    seed: u64,
    count: usize,
}

/// Writes `scenes/<i>.ppm`, `scenes/<i>.json` and `manifest.json`.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, scenes: &[SyntheticScene]) -> Result<()> {
    let sd = dir.join("scenes");
    std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
    for (i, s) in scenes.iter().enumerate() {
        ppm::write_ppm(&sd.join(format!("{i}.ppm")), &s.image)?;
        let rec = SceneRecord {
            instances: s
                .instances
                .iter()
                .map(|inst| InstanceRecord {
                    name: inst.name.clone(),
                    bbox: inst.bbox,
                    mask_rle: inst.mask.to_rle(),
                })
                .collect(),
        };
        ppm::write(&sd.join(format!("{i}.json")), serde_json::to_string(&rec)?.as_bytes())?;
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        seed: spec.seed,
        count: scenes.len(),
    };
    ppm::write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<SyntheticScene>)> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut scenes = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let image = ppm::read_ppm(&dir.join("scenes").join(format!("{i}.ppm")))?;
        let jpath = dir.join("scenes").join(format!("{i}.json"));
        let text = std::fs::read_to_string(&jpath).map_err(|e| Error::io(&jpath, e))?;
        let rec: SceneRecord = serde_json::from_str(&text)?;
        let (h, w) = (image.dim(1), image.dim(2));
        let instances = rec
            .instances
            .into_iter()
            .map(|r| {
                Ok(Instance {
                    name: r.name,
                    bbox: r.bbox,
                    mask: BitMask::from_rle(h, w, &r.mask_rle)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        scenes.push(SyntheticScene { image, instances });
    }
    Ok((manifest.spec, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_area_matches_analytic() {
        let mut spec = DatasetSpec::new(1, 96, 1, 4);
        spec.shapes = vec!["circle".into()];
        spec.colors = vec!["red".into()];
        spec.size_range = [0.3, 0.3];
        let scenes = generate_dataset(&spec).unwrap();
        assert_eq!(scenes[0].instances.len(), 1);
        let inst = &scenes[0].instances[0];
        assert_eq!(inst.name, "red circle");
        let r = 0.3 * 96.0 / 2.0;
        let analytic = std::f32::consts::PI * r * r;
        let area = inst.mask.area() as f32;
        assert!((area - analytic).abs() / analytic <= 0.05, "{area} vs {analytic}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec::new(3, 64, 3, 11);
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
    }

    #[test]
    fn categories_respect_filters() {
        let mut spec = DatasetSpec::new(1, 64, 1, 0);
        spec.exclude = vec!["red circle".into()];
        assert_eq!(spec.categories().len(), 15);
        spec.only = vec!["blue cross".into()];
        assert_eq!(spec.categories(), ["blue cross"]);
        spec.shapes = vec!["hexagon".into()];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = generate_scene(&DatasetSpec::new(1, 64, 3, 2), 0);
        assert_eq!(s.flipped().flipped(), s);
        let f = s.flipped();
        for (a, b) in f.instances.iter().zip(&s.instances) {
            assert_eq!(a.mask.bbox().unwrap(), a.bbox);
            assert_eq!(a.mask.area(), b.mask.area());
        }
    }
}
