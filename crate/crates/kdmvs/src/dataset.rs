//! On-disk scene datasets.
//!
//! Layout per scene directory:
//!
//! ```text
//! scene_000/
//!   images/000.ppm ...   8-bit binary P6, one per view
//!   cams/000_cam.txt ... intrinsics, pose, depth range
//!   gt/000.pfm ...       analytic depth maps (evaluation only)
//!   pair.txt             per reference view: "ref count src src ..."
//! ```
//!
//! Training loaders return [`TrainingScene`], which has no ground-truth
//! field and never opens the `gt/` directory — evaluation code loads depth
//! maps through the separate [`load_gt_depths`]. Keeping the two paths
//! disjoint is what the training-isolation audit leans on.

use std::fs;
use std::path::{Path, PathBuf};

use crate::geometry::CameraModel;
use crate::grid::Grid;
use crate::synth::{render_scene, GeometryKind, RenderedScene, SceneSpec};
use crate::{io, Error, Result};

pub fn image_path(scene: &Path, view: usize) -> PathBuf {
    scene.join("images").join(format!("{view:03}.ppm"))
}

pub fn cam_path(scene: &Path, view: usize) -> PathBuf {
    scene.join("cams").join(format!("{view:03}_cam.txt"))
}

pub fn gt_path(scene: &Path, view: usize) -> PathBuf {
    scene.join("gt").join(format!("{view:03}.pfm"))
}

pub fn pair_path(scene: &Path) -> PathBuf {
    scene.join("pair.txt")
}

/// Source views for each reference view, nearest camera first.
pub fn pairs_to_string(cams: &[CameraModel]) -> String {
    let mut out = String::new();
    for (r, ref_cam) in cams.iter().enumerate() {
        let mut srcs: Vec<(usize, f64)> = cams
            .iter()
            .enumerate()
            .filter(|(s, _)| *s != r)
            .map(|(s, c)| (s, (c.center() - ref_cam.center()).norm()))
            .collect();
        // index breaks distance ties so the file is deterministic
        srcs.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        out.push_str(&format!("{r} {}", srcs.len()));
        for (s, _) in &srcs {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
    }
    out
}

/// Parses "ref count src..." lines into per-reference source lists.
/// Reference ids must be 0..n in order and sources must be valid ids.
pub fn parse_pairs(text: &str) -> std::result::Result<Vec<Vec<usize>>, String> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|f| f.parse::<usize>().map_err(|e| format!("line {}: {e}", lineno + 1)))
            .collect::<std::result::Result<_, _>>()?;
        if fields.len() < 2 || fields.len() != 2 + fields[1] {
            return Err(format!(
                "line {}: expected \"ref count src...\", got {} fields",
                lineno + 1,
                fields.len()
            ));
        }
        if fields[0] != pairs.len() {
            return Err(format!(
                "line {}: reference id {} out of order (expected {})",
                lineno + 1,
                fields[0],
                pairs.len()
            ));
        }
        pairs.push(fields[2..].to_vec());
    }
    let n = pairs.len();
    for (r, srcs) in pairs.iter().enumerate() {
        if srcs.iter().any(|&s| s >= n || s == r) {
            return Err(format!("reference {r} lists an invalid source view"));
        }
    }
    if n < 2 {
        return Err(format!("{n} views is not enough for multi-view matching"));
    }
    Ok(pairs)
}

/// Writes a rendered scene in the on-disk layout.
pub fn write_scene(dir: &Path, scene: &RenderedScene) -> Result<()> {
    for sub in ["images", "cams", "gt"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (v, cam) in scene.cams.iter().enumerate() {
        io::ppm::write(image_path(dir, v), &scene.images[v])?;
        // the conventional metadata interval: the coarsest uniform sweep
        let interval = (cam.depth_max - cam.depth_min) / 31.0;
        io::cams::write(cam_path(dir, v), cam, interval)?;
        io::pfm::write(gt_path(dir, v), &scene.gt_depth[v])?;
    }
    io::write_file(&pair_path(dir), pairs_to_string(&scene.cams).as_bytes())
}

/// A scene as the training loop is allowed to see it: images, cameras,
/// and view pairings — no ground truth.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub images: Vec<Grid>,
    pub cams: Vec<CameraModel>,
    pub pairs: Vec<Vec<usize>>,
    pub dir: PathBuf,
}

impl TrainingScene {
    /// Reference image followed by its paired sources, capped at `n_src`,
    /// with the matching cameras.
    pub fn view_group(&self, r: usize, n_src: usize) -> (Vec<Grid>, Vec<CameraModel>) {
        let mut images = vec![self.images[r].clone()];
        let mut cams = vec![self.cams[r].clone()];
        for &s in self.pairs[r].iter().take(n_src) {
            images.push(self.images[s].clone());
            cams.push(self.cams[s].clone());
        }
        (images, cams)
    }

    pub fn n_views(&self) -> usize {
        self.images.len()
    }
}

/// Loads images, cameras, and pairings. Never opens `gt/`.
pub fn load_training_scene(dir: &Path) -> Result<TrainingScene> {
    let text = String::from_utf8(io::read_file(&pair_path(dir))?)
        .map_err(|e| Error::parse(pair_path(dir), e.to_string()))?;
    let pairs = parse_pairs(&text).map_err(|e| Error::parse(pair_path(dir), e))?;
    let mut images = Vec::new();
    let mut cams = Vec::new();
    for v in 0..pairs.len() {
        images.push(io::ppm::read(image_path(dir, v))?);
        cams.push(io::cams::read(cam_path(dir, v))?.0);
    }
    let shape = images[0].shape();
    if images.iter().any(|i| i.shape() != shape) {
        return Err(Error::InvalidArgument(format!(
            "views of {} disagree on image shape",
            dir.display()
        )));
    }
    Ok(TrainingScene {
        images,
        cams,
        pairs,
        dir: dir.to_path_buf(),
    })
}

/// Loads the analytic depth maps — for evaluation only.
pub fn load_gt_depths(dir: &Path, n_views: usize) -> Result<Vec<Grid>> {
    (0..n_views).map(|v| io::pfm::read(gt_path(dir, v))).collect()
}

/// Procedurally generates `n_scenes` scene directories under `root`,
/// cycling geometry kinds and deriving per-scene seeds from `base_seed`.
/// Returns the scene directories in order.
pub fn generate_dataset(
    root: &Path,
    base_seed: u64,
    n_scenes: usize,
    n_views: usize,
    height: usize,
    width: usize,
) -> Result<Vec<PathBuf>> {
    let kinds = [
        GeometryKind::TiltedPlanes,
        GeometryKind::SphereOnPlane,
        GeometryKind::StepRelief,
    ];
    let mut dirs = Vec::new();
    for i in 0..n_scenes {
        let scene = render_scene(&SceneSpec {
            seed: base_seed.wrapping_add(i as u64),
            kind: kinds[i % kinds.len()],
            height,
            width,
            n_views,
            lighting_jitter: false,
        })?;
        let dir = root.join(format!("scene_{i:03}"));
        write_scene(&dir, &scene)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Scene directories under `root` (those containing a pair.txt), sorted
/// by name.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root.to_path_buf(), e))? {
        let entry = entry.map_err(|e| Error::io(root.to_path_buf(), e))?;
        let path = entry.path();
        if path.is_dir() && pair_path(&path).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
