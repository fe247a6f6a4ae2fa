//! On-disk monocular sequence layout:
//!
//! ```text
//! dataset/
//!   meta.json          frame count, resolution, background color
//!   skeleton.json      rest skeleton
//!   cameras.json       {"frames": [camera per frame]}
//!   poses.json         {"frames": [pose per frame]}
//!   frames_raw/0000.imgf ...   float ground-truth frames
//!   flow/0001.flo ...          flow from frame k-1 to k, in frame k-1 pixels
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::flo::{read_flo, write_flo};
use super::imgf::{read_imgf, write_imgf};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::flowdens::FlowField;
use crate::img::Image;
use crate::skeleton::{Pose, Skeleton};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub background: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct FrameList<T> {
    frames: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct FrameDataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub skeleton: Skeleton,
    pub cameras: Vec<Camera>,
    pub poses: Vec<Pose>,
    pub frames: Vec<Image>,
    /// `flows[k-1]` maps frame k-1 to frame k.
    pub flows: Vec<FlowField>,
    /// Hex SHA-256 of meta.json, recorded in checkpoints.
    pub hash: String,
}

pub fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("frames_raw").join(format!("{k:04}.imgf"))
}

pub fn flow_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("flow").join(format!("{k:04}.flo"))
}

pub fn dataset_hash(dir: &Path) -> Result<String> {
    let path = dir.join("meta.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every file of the layout above.
pub fn write_dataset(
    dir: &Path,
    meta: &DatasetMeta,
    skeleton: &Skeleton,
    cameras: &[Camera],
    poses: &[Pose],
    frames: &[Image],
    flows: &[FlowField],
) -> Result<()> {
    for sub in ["frames_raw", "flow"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_json(&dir.join("meta.json"), meta)?;
    let skel_path = dir.join("skeleton.json");
    std::fs::write(&skel_path, skeleton.to_json()).map_err(|e| Error::io(&skel_path, e))?;
    write_json(&dir.join("cameras.json"), &FrameList { frames: cameras.to_vec() })?;
    write_json(&dir.join("poses.json"), &FrameList { frames: poses.to_vec() })?;
    for (k, img) in frames.iter().enumerate() {
        write_imgf(&frame_path(dir, k), img)?;
    }
    for (k, flow) in flows.iter().enumerate() {
        write_flo(&flow_path(dir, k + 1), flow)?;
    }
    Ok(())
}

impl FrameDataset {
    pub fn load(dir: &Path) -> Result<FrameDataset> {
        let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
        if meta.frame_count < 2 {
            return Err(Error::data(format!(
                "dataset needs at least two frames, meta declares {}",
                meta.frame_count
            )));
        }
        let skel_path = dir.join("skeleton.json");
        let skel_text = std::fs::read_to_string(&skel_path).map_err(|e| Error::io(&skel_path, e))?;
        let skeleton = Skeleton::from_json(&skel_text)?;
        let cameras: FrameList<Camera> = read_json(&dir.join("cameras.json"))?;
        let poses: FrameList<Pose> = read_json(&dir.join("poses.json"))?;
        let (cameras, poses) = (cameras.frames, poses.frames);

        let n = meta.frame_count;
        if cameras.len() != n || poses.len() != n {
            return Err(Error::data(format!(
                "meta declares {n} frames but found {} cameras and {} poses",
                cameras.len(),
                poses.len()
            )));
        }
        for (k, cam) in cameras.iter().enumerate() {
            cam.validate()?;
            if cam.width != meta.width || cam.height != meta.height {
                return Err(Error::data(format!(
                    "camera {k} is {}x{}, dataset is {}x{}",
                    cam.width, cam.height, meta.width, meta.height
                )));
            }
        }
        for (k, pose) in poses.iter().enumerate() {
            pose.validate(skeleton.bones().len())
                .map_err(|e| Error::data(format!("pose {k}: {e}")))?;
        }

        let mut frames = Vec::with_capacity(n);
        for k in 0..n {
            let img = read_imgf(&frame_path(dir, k))?;
            if img.width != meta.width as usize || img.height != meta.height as usize || img.channels != 3
            {
                return Err(Error::data(format!(
                    "frame {k} is {}x{}x{}, dataset is {}x{}x3",
                    img.width, img.height, img.channels, meta.width, meta.height
                )));
            }
            frames.push(img);
        }
        let mut flows = Vec::with_capacity(n - 1);
        for k in 1..n {
            let flow = read_flo(&flow_path(dir, k))?;
            if flow.width != meta.width as usize || flow.height != meta.height as usize {
                return Err(Error::data(format!(
                    "flow {k} is {}x{}, dataset is {}x{}",
                    flow.width, flow.height, meta.width, meta.height
                )));
            }
            flows.push(flow);
        }

        let hash = dataset_hash(dir)?;
        Ok(FrameDataset {
            dir: dir.to_path_buf(),
            meta,
            skeleton,
            cameras,
            poses,
            frames,
            flows,
            hash,
        })
    }

    /// Normalized time of frame k, spanning [0, 1] across the sequence.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / (self.meta.frame_count - 1) as f64
    }
}
