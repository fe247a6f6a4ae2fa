//! Binary model checkpoints. Layout (all integers and floats little-endian):
//! magic "STGA", format version, color mode, splat count, polynomial degrees,
//! feature width, bone count, encoding configuration, MLP layer dimensions,
//! then structure-of-arrays f32 splat fields (positions, motion coefficients,
//! temporal centers, rotation coefficients, log scales, opacity, sharpness,
//! features, skinning indices with -1 padding, skinning weights), then MLP
//! weights and biases layer by layer. A JSON sidecar at `<path>.json` records
//! training provenance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_exact_at, read_f32_vec, read_u32, write_all_at, write_f32_slice};
use crate::appearance::{ColorMlp, EncodingConfig, Linear};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gauss::SpacetimeGaussian;
use crate::math::*;
use crate::model::{AvatarModel, ColorModel};
use crate::skeleton::{BoneWeights, MAX_INFLUENCES};

pub const CKPT_MAGIC: &[u8; 4] = b"STGA";
pub const CKPT_VERSION: u32 = 1;

const MODE_MLP: u32 = 0;
const MODE_SH: u32 = 1;
const MAX_COUNT: u32 = 1 << 24;

pub fn save_checkpoint(path: &Path, model: &AvatarModel, bone_count: usize) -> Result<()> {
    model.validate()?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let n = model.gaussians.len();

    write_all_at(&mut w, CKPT_MAGIC, path)?;
    for v in [
        CKPT_VERSION,
        match model.color {
            ColorModel::Mlp(_) => MODE_MLP,
            ColorModel::Sh => MODE_SH,
        },
        n as u32,
        model.n_p as u32,
        model.n_q as u32,
        model.feat_dim as u32,
        bone_count as u32,
        model.encoding.l_pos as u32,
        model.encoding.l_view as u32,
        model.encoding.l_pose as u32,
        model.encoding.motion_feat as u32,
    ] {
        write_all_at(&mut w, &v.to_le_bytes(), path)?;
    }
    match &model.color {
        ColorModel::Mlp(mlp) => {
            write_all_at(&mut w, &4u32.to_le_bytes(), path)?;
            for l in [&mlp.motion_proj, &mlp.l1, &mlp.l2, &mlp.l3] {
                write_all_at(&mut w, &(l.in_dim as u32).to_le_bytes(), path)?;
                write_all_at(&mut w, &(l.out_dim as u32).to_le_bytes(), path)?;
            }
        }
        ColorModel::Sh => write_all_at(&mut w, &0u32.to_le_bytes(), path)?,
    }

    let mut field = Vec::with_capacity(n * 4);
    let flush = |w: &mut BufWriter<File>, field: &mut Vec<f32>| -> Result<()> {
        write_f32_slice(w, field, path)?;
        field.clear();
        Ok(())
    };

    for g in &model.gaussians {
        field.extend(g.canonical_pos.iter().map(|&v| v as f32));
    }
    flush(&mut w, &mut field)?;
    for g in &model.gaussians {
        for b in &g.motion_coeffs {
            field.extend(b.iter().map(|&v| v as f32));
        }
    }
    flush(&mut w, &mut field)?;
    for g in &model.gaussians {
        field.push(g.temporal_center_pos as f32);
    }
    flush(&mut w, &mut field)?;
    for g in &model.gaussians {
        for c in &g.rot_coeffs {
            field.extend(c.iter().map(|&v| v as f32));
        }
    }
    flush(&mut w, &mut field)?;
    for g in &model.gaussians {
        field.push(g.temporal_center_rot as f32);
    }
    flush(&mut w, &mut field)?;
    for g in &model.gaussians {
        field.extend(g.log_scales.iter().map(|&v| v as f32));
    }
    flush(&mut w, &mut field)?;
    for g in &model.gaussians {
        field.push(g.base_opacity as f32);
    }
    flush(&mut w, &mut field)?;
    for g in &model.gaussians {
        field.push(g.temporal_sharpness as f32);
    }
    flush(&mut w, &mut field)?;
    for g in &model.gaussians {
        field.extend(g.appearance_feat.iter().map(|&v| v as f32));
    }
    flush(&mut w, &mut field)?;
    for s in &model.skinning {
        for k in 0..MAX_INFLUENCES {
            field.push(if k < s.count { s.bones[k] as f32 } else { -1.0 });
        }
    }
    flush(&mut w, &mut field)?;
    for s in &model.skinning {
        for k in 0..MAX_INFLUENCES {
            field.push(if k < s.count { s.weights[k] as f32 } else { 0.0 });
        }
    }
    flush(&mut w, &mut field)?;

    if let ColorModel::Mlp(mlp) = &model.color {
        for l in [&mlp.motion_proj, &mlp.l1, &mlp.l2, &mlp.l3] {
            let wv: Vec<f32> = l.w.iter().map(|&v| v as f32).collect();
            write_f32_slice(&mut w, &wv, path)?;
            let bv: Vec<f32> = l.b.iter().map(|&v| v as f32).collect();
            write_f32_slice(&mut w, &bv, path)?;
        }
    }
    Ok(())
}

/// Loads a checkpoint. `bone_count` returns alongside the model so callers
/// can cross-check the skeleton they pair it with.
pub fn load_checkpoint(path: &Path) -> Result<(AvatarModel, usize)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, path)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::data(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r, path)?;
    if version != CKPT_VERSION {
        return Err(Error::data(format!(
            "{}: checkpoint format version {version} is not supported (expected {CKPT_VERSION})",
            path.display()
        )));
    }
    let mode = read_u32(&mut r, path)?;
    let count = read_u32(&mut r, path)?;
    let n_p = read_u32(&mut r, path)? as usize;
    let n_q = read_u32(&mut r, path)? as usize;
    let feat_dim = read_u32(&mut r, path)? as usize;
    let bone_count = read_u32(&mut r, path)? as usize;
    if count > MAX_COUNT || n_p == 0 || n_p > 8 || n_q > 8 || feat_dim > 4096 || bone_count == 0 {
        return Err(Error::data(format!(
            "{}: implausible checkpoint header",
            path.display()
        )));
    }
    let encoding = EncodingConfig {
        l_pos: read_u32(&mut r, path)? as usize,
        l_view: read_u32(&mut r, path)? as usize,
        l_pose: read_u32(&mut r, path)? as usize,
        motion_feat: read_u32(&mut r, path)? as usize,
    };
    let layer_count = read_u32(&mut r, path)?;
    let mut layer_dims = Vec::new();
    for _ in 0..layer_count {
        let in_dim = read_u32(&mut r, path)? as usize;
        let out_dim = read_u32(&mut r, path)? as usize;
        if in_dim == 0 || out_dim == 0 || in_dim > 1 << 16 || out_dim > 1 << 16 {
            return Err(Error::data(format!("{}: implausible layer shape", path.display())));
        }
        layer_dims.push((in_dim, out_dim));
    }
    match (mode, layer_count) {
        (MODE_MLP, 4) | (MODE_SH, 0) => {}
        _ => {
            return Err(Error::data(format!(
                "{}: color mode {mode} with {layer_count} layers is invalid",
                path.display()
            )))
        }
    }

    let n = count as usize;
    let canonical = read_f32_vec(&mut r, n * 3, path)?;
    let motion = read_f32_vec(&mut r, n * 3 * n_p, path)?;
    let tc_pos = read_f32_vec(&mut r, n, path)?;
    let rot = read_f32_vec(&mut r, n * 4 * (n_q + 1), path)?;
    let tc_rot = read_f32_vec(&mut r, n, path)?;
    let scales = read_f32_vec(&mut r, n * 3, path)?;
    let opacity = read_f32_vec(&mut r, n, path)?;
    let sharpness = read_f32_vec(&mut r, n, path)?;
    let feat = read_f32_vec(&mut r, n * feat_dim, path)?;
    let skin_idx = read_f32_vec(&mut r, n * MAX_INFLUENCES, path)?;
    let skin_w = read_f32_vec(&mut r, n * MAX_INFLUENCES, path)?;

    let mut gaussians = Vec::with_capacity(n);
    let mut skinning = Vec::with_capacity(n);
    for i in 0..n {
        let v3 = |a: &[f32], o: usize| Vec3::new(a[o] as f64, a[o + 1] as f64, a[o + 2] as f64);
        gaussians.push(SpacetimeGaussian {
            canonical_pos: v3(&canonical, i * 3),
            motion_coeffs: (0..n_p).map(|k| v3(&motion, (i * n_p + k) * 3)).collect(),
            temporal_center_pos: tc_pos[i] as f64,
            rot_coeffs: (0..=n_q)
                .map(|k| {
                    let o = (i * (n_q + 1) + k) * 4;
                    Vec4::new(rot[o] as f64, rot[o + 1] as f64, rot[o + 2] as f64, rot[o + 3] as f64)
                })
                .collect(),
            temporal_center_rot: tc_rot[i] as f64,
            log_scales: v3(&scales, i * 3),
            base_opacity: opacity[i] as f64,
            temporal_sharpness: sharpness[i] as f64,
            appearance_feat: feat[i * feat_dim..(i + 1) * feat_dim]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        });
        let mut bw = BoneWeights {
            bones: [0; MAX_INFLUENCES],
            weights: [0.0; MAX_INFLUENCES],
            count: 0,
        };
        for k in 0..MAX_INFLUENCES {
            let idx = skin_idx[i * MAX_INFLUENCES + k];
            if idx < 0.0 {
                break;
            }
            bw.bones[k] = idx as u32;
            bw.weights[k] = skin_w[i * MAX_INFLUENCES + k] as f64;
            bw.count = k + 1;
        }
        bw.validate(bone_count).map_err(|e| {
            Error::data(format!("{}: splat {i} skinning invalid: {e}", path.display()))
        })?;
        skinning.push(bw);
    }

    let color = if mode == MODE_MLP {
        let mut layers = Vec::with_capacity(4);
        for &(in_dim, out_dim) in &layer_dims {
            let w = read_f32_vec(&mut r, in_dim * out_dim, path)?;
            let b = read_f32_vec(&mut r, out_dim, path)?;
            layers.push(Linear {
                in_dim,
                out_dim,
                w: w.into_iter().map(f64::from).collect(),
                b: b.into_iter().map(f64::from).collect(),
            });
        }
        let l3 = layers.pop().unwrap();
        let l2 = layers.pop().unwrap();
        let l1 = layers.pop().unwrap();
        let motion_proj = layers.pop().unwrap();
        ColorModel::Mlp(ColorMlp { motion_proj, l1, l2, l3 })
    } else {
        ColorModel::Sh
    };

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::data(format!(
            "{}: trailing bytes after checkpoint payload",
            path.display()
        )));
    }

    let model = AvatarModel {
        n_p,
        n_q,
        feat_dim,
        gaussians,
        skinning,
        encoding,
        color,
    };
    model.validate()?;
    Ok((model, bone_count))
}

/// Training provenance stored next to a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: String,
    pub seed: u64,
    pub iterations_run: u64,
    pub dataset_hash: String,
    pub config: TrainConfig,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn write_meta(ckpt: &Path, meta: &CheckpointMeta) -> Result<()> {
    let path = sidecar_path(ckpt);
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(ckpt: &Path) -> Result<CheckpointMeta> {
    let path = sidecar_path(ckpt);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SH_FEAT_DIM;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_model(rng: &mut StdRng, color: ColorModel, feat: usize, n: usize) -> AvatarModel {
        let gaussians = (0..n)
            .map(|_| SpacetimeGaussian {
                canonical_pos: Vec3::new(rng.random(), rng.random(), rng.random()),
                motion_coeffs: vec![
                    Vec3::new(rng.random(), rng.random(), rng.random()),
                    Vec3::new(rng.random(), rng.random(), rng.random()),
                ],
                temporal_center_pos: rng.random(),
                rot_coeffs: vec![
                    Vec4::new(1.0, 0.1 * rng.random::<f64>(), 0.0, 0.0),
                    Vec4::new(rng.random(), rng.random(), rng.random(), rng.random()),
                ],
                temporal_center_rot: rng.random(),
                log_scales: Vec3::new(-rng.random::<f64>(), -rng.random::<f64>(), -rng.random::<f64>()),
                base_opacity: rng.random_range(-2.0..2.0),
                temporal_sharpness: rng.random(),
                appearance_feat: (0..feat).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let skinning = (0..n)
            .map(|i| {
                if i % 3 == 0 {
                    BoneWeights::single(i as u32 % 5)
                } else {
                    BoneWeights {
                        bones: [0, 1 + i as u32 % 4, 0, 0],
                        weights: [0.25, 0.75, 0.0, 0.0],
                        count: 2,
                    }
                }
            })
            .collect();
        AvatarModel {
            n_p: 2,
            n_q: 1,
            feat_dim: feat,
            gaussians,
            skinning,
            encoding: EncodingConfig::default(),
            color,
        }
    }

    #[test]
    fn mlp_checkpoint_roundtrips_byte_identically() {
        let mut rng = StdRng::seed_from_u64(21);
        let enc = EncodingConfig::default();
        let mlp = ColorMlp::new(&enc, 2, 1, 8, 5, 16, &mut rng);
        let model = random_model(&mut rng, ColorModel::Mlp(mlp), 8, 17);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &model, 5).unwrap();
        let (loaded, bones) = load_checkpoint(&p1).unwrap();
        assert_eq!(bones, 5);
        assert_eq!(loaded.gaussians.len(), 17);
        // f32 -> f64 -> f32 is exact, so a second save is byte-identical.
        save_checkpoint(&p2, &loaded, 5).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // Skinning with padding survives.
        assert_eq!(loaded.skinning[1].count, 2);
        assert_eq!(loaded.skinning[1].bones[1], model.skinning[1].bones[1]);
        match &loaded.color {
            ColorModel::Mlp(m) => assert_eq!(m.l1.in_dim, ColorMlp::input_dim(&enc, 8, 5)),
            _ => panic!("expected MLP"),
        }
    }

    #[test]
    fn sh_checkpoint_roundtrips() {
        let mut rng = StdRng::seed_from_u64(22);
        let model = random_model(&mut rng, ColorModel::Sh, SH_FEAT_DIM, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sh.ckpt");
        save_checkpoint(&p, &model, 5).unwrap();
        let (loaded, _) = load_checkpoint(&p).unwrap();
        assert!(matches!(loaded.color, ColorModel::Sh));
        for (a, b) in loaded.gaussians.iter().zip(&model.gaussians) {
            assert_eq!(a.canonical_pos.x, b.canonical_pos.x as f32 as f64);
            assert_eq!(a.appearance_feat.len(), SH_FEAT_DIM);
        }
    }

    #[test]
    fn version_and_magic_mismatches_are_rejected() {
        let mut rng = StdRng::seed_from_u64(23);
        let model = random_model(&mut rng, ColorModel::Sh, SH_FEAT_DIM, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        save_checkpoint(&p, &model, 5).unwrap();

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99; // version field
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "unexpected error: {err}");

        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn truncated_and_padded_files_are_rejected() {
        let mut rng = StdRng::seed_from_u64(24);
        let model = random_model(&mut rng, ColorModel::Sh, SH_FEAT_DIM, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        save_checkpoint(&p, &model, 5).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&p).is_err());
        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0; 4]);
        std::fs::write(&p, &padded).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn sidecar_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        let meta = CheckpointMeta {
            mode: "full".to_string(),
            seed: 7,
            iterations_run: 100,
            dataset_hash: "abcd".to_string(),
            config: TrainConfig::default(),
        };
        write_meta(&ckpt, &meta).unwrap();
        assert_eq!(sidecar_path(&ckpt), dir.path().join("m.ckpt.json"));
        let back = read_meta(&ckpt).unwrap();
        assert_eq!(back.mode, "full");
        assert_eq!(back.seed, 7);
        assert_eq!(back.config.iterations, meta.config.iterations);
    }
}
