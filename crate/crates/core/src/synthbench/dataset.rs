//! Seeded toy videos: moving category-shaped blobs on a small grid.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seeding::{self, Rng};

const FAMILIES: [&str; 10] = [
    "disc", "square", "hbar", "vbar", "ell", "tee", "cross", "ring", "diag", "antidiag",
];

/// Name of a category: its shape family, with a numeric suffix past the first ten.
pub fn category_name(id: usize) -> String {
    let family = FAMILIES[id % FAMILIES.len()];
    match id / FAMILIES.len() {
        0 => family.to_string(),
        k => format!("{family}-{k}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_categories: usize,
    pub videos_per_category: usize,
    pub frames_per_video: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub blob_min: usize,
    pub blob_max: usize,
    pub max_instances: usize,
    pub motion_step: usize,
    pub noise: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_categories: 8,
            videos_per_category: 63,
            frames_per_video: 2,
            grid_height: 12,
            grid_width: 12,
            blob_min: 3,
            blob_max: 5,
            max_instances: 3,
            motion_step: 1,
            noise: 0.1,
            feature_dim: 16,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_categories", self.num_categories),
            ("videos_per_category", self.videos_per_category),
            ("frames_per_video", self.frames_per_video),
            ("grid_height", self.grid_height),
            ("grid_width", self.grid_width),
            ("blob_min", self.blob_min),
            ("max_instances", self.max_instances),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.blob_max < self.blob_min {
            return Err(Error::Config("blob_max must be >= blob_min".into()));
        }
        let travel = self.motion_step * (self.frames_per_video - 1);
        if self.blob_max + travel > self.grid_height.min(self.grid_width) {
            return Err(Error::Config(format!(
                "blob of size {} moving {travel} cells cannot fit a {}x{} grid",
                self.blob_max, self.grid_height, self.grid_width
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.grid_height * self.grid_width
    }
}

/// One object track: category and a binary mask per frame (row-major H·W).
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub track: usize,
    pub category: usize,
    pub masks: Vec<Vec<bool>>,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.masks.iter().map(|m| m.iter().filter(|b| **b).count()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub split: Split,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// One (H·W)×d matrix per frame.
    pub pixel_features: Vec<Matrix>,
    pub instances: Vec<Instance>,
}

impl SyntheticVideo {
    pub fn categories(&self) -> BTreeSet<usize> {
        self.instances.iter().map(|i| i.category).collect()
    }

    /// All frames' features stacked: the cross-attention memory.
    pub fn feature_memory(&self) -> Matrix {
        let refs: Vec<&Matrix> = self.pixel_features.iter().collect();
        Matrix::vstack(&refs).expect("frames share a feature width")
    }
}

/// Fixed feature codes shared by every video generated under one seed.
struct FeatureCodes {
    category: Vec<Vec<f64>>,
    /// Code of pixels no blob covers.
    background: Vec<f64>,
    position: Matrix,
}

impl FeatureCodes {
    fn new(config: &GeneratorConfig) -> Self {
        let d = config.feature_dim;
        let mut rng = seeding::rng(config.seed, "feature-codes");
        let category = (0..config.num_categories).map(|_| unit(&mut rng, d)).collect();
        let background = unit(&mut rng, d);
        let position = seeding::gaussian_matrix(&mut rng, config.pixels(), d, 0.3 / (d as f64).sqrt());
        Self {
            category,
            background,
            position,
        }
    }
}

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| seeding::gaussian(rng)).collect();
    let n = crate::numerics::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Cells of a `size`×`size` box covered by a shape family.
fn shape_cells(category: usize, size: usize) -> Vec<(usize, usize)> {
    let s = size as isize;
    let c = (s - 1) as f64 / 2.0;
    let mut cells = Vec::new();
    for y in 0..s {
        for x in 0..s {
            let (fy, fx) = (y as f64 - c, x as f64 - c);
            let mid = y == s / 2 || x == s / 2;
            let inside = match category % FAMILIES.len() {
                0 => fy * fy + fx * fx <= (c + 0.5) * (c + 0.5),
                1 => true,
                2 => (fy).abs() <= 0.5,
                3 => (fx).abs() <= 0.5,
                4 => x == 0 || y == s - 1,
                5 => y == 0 || x == s / 2,
                6 => mid,
                7 => y == 0 || x == 0 || y == s - 1 || x == s - 1,
                8 => (x - y).abs() <= 0,
                _ => (x + y - (s - 1)).abs() <= 0,
            };
            if inside {
                cells.push((y as usize, x as usize));
            }
        }
    }
    cells
}

struct Placement {
    category: usize,
    size: usize,
    origin: (usize, usize),
    velocity: (isize, isize),
}

impl Placement {
    fn corner(&self, frame: usize) -> (usize, usize) {
        let y = self.origin.0 as isize + self.velocity.0 * frame as isize;
        let x = self.origin.1 as isize + self.velocity.1 * frame as isize;
        (y as usize, x as usize)
    }

    fn overlaps(&self, other: &Placement, frames: usize) -> bool {
        (0..frames).any(|f| {
            let (ay, ax) = self.corner(f);
            let (by, bx) = other.corner(f);
            ay < by + other.size && by < ay + self.size && ax < bx + other.size && bx < ax + self.size
        })
    }
}

fn place(rng: &mut Rng, config: &GeneratorConfig, category: usize) -> Placement {
    let size = rng.random_range(config.blob_min..=config.blob_max);
    let step = config.motion_step as i64;
    let velocity = (
        rng.random_range(-step..=step) as isize,
        rng.random_range(-step..=step) as isize,
    );
    let travel = (config.frames_per_video - 1) as isize;
    let axis = |extent: usize, v: isize, rng: &mut Rng| {
        let span = v.abs() * travel;
        let lo = if v < 0 { span } else { 0 };
        let hi = extent as isize - size as isize - if v > 0 { span } else { 0 };
        rng.random_range(lo as i64..=hi as i64) as usize
    };
    let oy = axis(config.grid_height, velocity.0, rng);
    let ox = axis(config.grid_width, velocity.1, rng);
    Placement {
        category,
        size,
        origin: (oy, ox),
        velocity,
    }
}

fn render(
    config: &GeneratorConfig,
    codes: &FeatureCodes,
    rng: &mut Rng,
    id: String,
    placements: &[Placement],
) -> SyntheticVideo {
    let (h, w, d) = (config.grid_height, config.grid_width, config.feature_dim);
    let mut instances = Vec::with_capacity(placements.len());
    let mut appearance = Vec::with_capacity(placements.len());
    for (track, p) in placements.iter().enumerate() {
        let cells = shape_cells(p.category, p.size);
        let masks = (0..config.frames_per_video)
            .map(|f| {
                let (cy, cx) = p.corner(f);
                let mut m = vec![false; h * w];
                for &(dy, dx) in &cells {
                    m[(cy + dy) * w + cx + dx] = true;
                }
                m
            })
            .collect();
        instances.push(Instance {
            track,
            category: p.category,
            masks,
        });
        appearance.push(unit(rng, d));
    }
    let pixel_features = (0..config.frames_per_video)
        .map(|f| {
            let mut feat = config_noise(rng, config);
            for px in 0..h * w {
                let row = feat.row_mut(px);
                for (v, pos) in row.iter_mut().zip(codes.position.row(px)) {
                    *v += pos;
                }
                let mut covered = false;
                for (inst, app) in instances.iter().zip(&appearance) {
                    if inst.masks[f][px] {
                        covered = true;
                        for ((v, c), a) in row.iter_mut().zip(&codes.category[inst.category]).zip(app) {
                            *v += c + 0.25 * a;
                        }
                    }
                }
                if !covered {
                    for (v, b) in row.iter_mut().zip(&codes.background) {
                        *v += b;
                    }
                }
            }
            feat
        })
        .collect();
    SyntheticVideo {
        id,
        split: Split::Train,
        frames: config.frames_per_video,
        height: h,
        width: w,
        pixel_features,
        instances,
    }
}

fn config_noise(rng: &mut Rng, config: &GeneratorConfig) -> Matrix {
    seeding::gaussian_matrix(rng, config.pixels(), config.feature_dim, config.noise)
}

/// Renders `videos_per_category` videos for each category of `class_set`.
///
/// Each video has a primary blob of its category plus up to
/// `max_instances − 1` extra blobs drawn from the same class set. The first
/// 80% of every category's videos (rounded) go to the training split.
pub fn generate_dataset(
    config: &GeneratorConfig,
    class_set: &[usize],
) -> Result<(Vec<SyntheticVideo>, Vec<SyntheticVideo>)> {
    config.validate()?;
    if class_set.is_empty() {
        return Err(Error::Config("class set is empty".into()));
    }
    if let Some(c) = class_set.iter().find(|c| **c >= config.num_categories) {
        return Err(Error::Config(format!(
            "category {c} outside {} configured categories",
            config.num_categories
        )));
    }
    let codes = FeatureCodes::new(config);
    let n_train = (config.videos_per_category * 4 + 2) / 5;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for &category in class_set {
        for k in 0..config.videos_per_category {
            let mut rng = seeding::rng(config.seed, &format!("video-{category}-{k}"));
            let mut placements = vec![place(&mut rng, config, category)];
            let extra = rng.random_range(0..config.max_instances);
            for _ in 0..extra {
                let other = class_set[rng.random_range(0..class_set.len())];
                // A few attempts to find a free spot; crowded videos keep fewer blobs.
                for _ in 0..8 {
                    let p = place(&mut rng, config, other);
                    if placements.iter().all(|q| !p.overlaps(q, config.frames_per_video)) {
                        placements.push(p);
                        break;
                    }
                }
            }
            let mut video = render(config, &codes, &mut rng, format!("c{category}-v{k}"), &placements);
            if k < n_train {
                train.push(video);
            } else {
                video.split = Split::Val;
                val.push(video);
            }
        }
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Persistence: JSON with run-length-encoded masks plus a binary feature sidecar.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    features: FeatureSidecar,
    videos: Vec<VideoRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureSidecar {
    file: String,
    dim: usize,
    encoding: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoRecord {
    id: String,
    split: Split,
    frames: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    instances: Vec<InstanceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    track: usize,
    category: usize,
    masks: Vec<Vec<usize>>,
}

/// Run lengths of alternating false/true values, starting with false.
pub fn rle_encode(mask: &[bool]) -> Vec<usize> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for &b in mask {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[usize], len: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(len);
    for (i, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, c));
    }
    if out.len() != len {
        return Err(Error::Parse(format!(
            "mask run lengths cover {} of {len} pixels",
            out.len()
        )));
    }
    Ok(out)
}

/// Writes `videos` to `json_path` and their features to a `.features.bin`
/// sidecar next to it (little-endian f64, video by video, frame by frame).
pub fn save_dataset(json_path: &Path, videos: &[SyntheticVideo]) -> Result<()> {
    let dim = videos.first().map_or(0, |v| v.pixel_features[0].cols());
    let stem = json_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Parameter(format!("bad dataset path {}", json_path.display())))?;
    let sidecar = format!("{stem}.features.bin");
    let mut bin = Vec::new();
    for v in videos {
        for f in &v.pixel_features {
            for x in f.data() {
                bin.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let file = DatasetFile {
        features: FeatureSidecar {
            file: sidecar.clone(),
            dim,
            encoding: "f64-le".into(),
        },
        videos: videos
            .iter()
            .map(|v| VideoRecord {
                id: v.id.clone(),
                split: v.split,
                frames: v.frames,
                height: v.height,
                width: v.width,
                instances: v
                    .instances
                    .iter()
                    .map(|i| InstanceRecord {
                        track: i.track,
                        category: i.category,
                        masks: i.masks.iter().map(|m| rle_encode(m)).collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
    let bin_path = json_path.with_file_name(sidecar);
    std::fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))
}

pub fn load_dataset(json_path: &Path) -> Result<Vec<SyntheticVideo>> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let file: DatasetFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", json_path.display())))?;
    if file.features.encoding != "f64-le" {
        return Err(Error::Parse(format!(
            "unsupported feature encoding {}",
            file.features.encoding
        )));
    }
    let bin_path = json_path.with_file_name(&file.features.file);
    let bin = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut floats = bin
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let d = file.features.dim;
    let mut videos = Vec::with_capacity(file.videos.len());
    for rec in file.videos {
        let hw = rec.height * rec.width;
        let mut pixel_features = Vec::with_capacity(rec.frames);
        for _ in 0..rec.frames {
            let data: Vec<f64> = floats.by_ref().take(hw * d).collect();
            if data.len() != hw * d {
                return Err(Error::Parse(format!("feature sidecar truncated at video {}", rec.id)));
            }
            pixel_features.push(Matrix::new(hw, d, data)?);
        }
        let instances = rec
            .instances
            .into_iter()
            .map(|i| {
                let masks = i.masks.iter().map(|m| rle_decode(m, hw)).collect::<Result<Vec<_>>>()?;
                if masks.len() != rec.frames {
                    return Err(Error::Parse(format!("track {} has {} frames", i.track, masks.len())));
                }
                Ok(Instance {
                    track: i.track,
                    category: i.category,
                    masks,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        videos.push(SyntheticVideo {
            id: rec.id,
            split: rec.split,
            frames: rec.frames,
            height: rec.height,
            width: rec.width,
            pixel_features,
            instances,
        });
    }
    if floats.next().is_some() {
        return Err(Error::Parse("feature sidecar has trailing data".into()));
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            num_categories: 4,
            videos_per_category: 10,
            feature_dim: 8,
            seed: 3,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn counts_and_bounds() {
        let cfg = small();
        let (train, val) = generate_dataset(&cfg, &[0, 1, 2, 3]).unwrap();
        assert_eq!(train.len() + val.len(), 40);
        assert_eq!(train.len(), 32);
        for v in train.iter().chain(&val) {
            assert!(!v.instances.is_empty() && v.instances.len() <= 3);
            for inst in &v.instances {
                assert!(inst.area() > 0);
                assert!(inst.masks.iter().all(|m| m.len() == 144));
            }
            let tracks: BTreeSet<usize> = v.instances.iter().map(|i| i.track).collect();
            assert_eq!(tracks.len(), v.instances.len());
            assert_eq!(v.pixel_features.len(), 2);
            assert_eq!(v.pixel_features[0].shape(), (144, 8));
        }
    }

    #[test]
    fn primary_category_counts_match_config() {
        let cfg = small();
        let (train, val) = generate_dataset(&cfg, &[1, 3]).unwrap();
        for c in [1, 3] {
            let n = train
                .iter()
                .chain(&val)
                .filter(|v| v.instances[0].category == c)
                .count();
            assert_eq!(n, cfg.videos_per_category);
        }
        assert!(train
            .iter()
            .chain(&val)
            .all(|v| v.categories().is_subset(&[1, 3].into())));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        assert_eq!(
            generate_dataset(&cfg, &[0, 2]).unwrap(),
            generate_dataset(&cfg, &[0, 2]).unwrap()
        );
    }

    #[test]
    fn oversized_blobs_are_rejected() {
        let cfg = GeneratorConfig {
            blob_max: 12,
            ..small()
        };
        assert!(matches!(generate_dataset(&cfg, &[0]), Err(Error::Config(_))));
        assert!(generate_dataset(&small(), &[]).is_err());
        assert!(generate_dataset(&small(), &[9]).is_err());
    }

    #[test]
    fn rle_round_trip() {
        let m = vec![true, true, false, true, false, false];
        let rle = rle_encode(&m);
        assert_eq!(rle, vec![0, 2, 1, 1, 2]);
        assert_eq!(rle_decode(&rle, 6).unwrap(), m);
        assert!(rle_decode(&rle, 7).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let (train, val) = generate_dataset(&cfg, &[0, 1]).unwrap();
        let all: Vec<_> = train.into_iter().chain(val).collect();
        let path = dir.path().join("step0.json");
        save_dataset(&path, &all).unwrap();
        assert!(dir.path().join("step0.features.bin").exists());
        assert_eq!(load_dataset(&path).unwrap(), all);
    }

    #[test]
    fn shapes_differ_between_families() {
        let shapes: BTreeSet<Vec<(usize, usize)>> = (0..10).map(|c| shape_cells(c, 5)).collect();
        assert_eq!(shapes.len(), 10);
        assert_eq!(category_name(3), "vbar");
        assert_eq!(category_name(13), "vbar-1");
    }
}
