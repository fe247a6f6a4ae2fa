use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::*;

pub const MAX_INFLUENCES: usize = 4;
pub const DEFAULT_WEIGHT_SHARPNESS: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    /// Rigid transform from this bone's frame to its parent's frame at rest.
    pub local_rest: Mat4,
}

#[derive(Debug, Clone)]
pub struct Skeleton {
    bones: Vec<Bone>,
    rest_world: Vec<Mat4>,
    rest_world_inv: Vec<Mat4>,
}

/// Per-frame articulation: one unit quaternion (w,x,y,z) per bone applied
/// about the bone's own joint, plus a global root translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pose {
    pub rotations: Vec<[f64; 4]>,
    pub root_translation: [f64; 3],
}

impl Pose {
    pub fn rest(bone_count: usize) -> Pose {
        Pose {
            rotations: vec![[1.0, 0.0, 0.0, 0.0]; bone_count],
            root_translation: [0.0; 3],
        }
    }

    pub fn rotation(&self, b: usize) -> Vec4 {
        let q = self.rotations[b];
        Vec4::new(q[0], q[1], q[2], q[3])
    }

    pub fn validate(&self, bone_count: usize) -> Result<()> {
        if self.rotations.len() != bone_count {
            return Err(Error::data(format!(
                "pose has {} rotations for {} bones",
                self.rotations.len(),
                bone_count
            )));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let n = Vec4::new(q[0], q[1], q[2], q[3]).norm();
            if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
                return Err(Error::data(format!("pose rotation {i} is not unit (norm {n})")));
            }
        }
        if self.root_translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("pose root translation is not finite"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct BoneFile {
    name: String,
    parent: i64,
    /// Row-major 4x4.
    rest: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    bones: Vec<BoneFile>,
}

impl Skeleton {
    /// Bones must be listed parents-first with exactly one root at index 0;
    /// every rest transform must be rigid.
    pub fn new(bones: Vec<Bone>) -> Result<Skeleton> {
        if bones.is_empty() {
            return Err(Error::data("skeleton has no bones"));
        }
        for (i, b) in bones.iter().enumerate() {
            match b.parent {
                None if i != 0 => {
                    return Err(Error::data(format!(
                        "bone {i} ({}) is a second root; only bone 0 may have no parent",
                        b.name
                    )));
                }
                Some(p) if p >= i => {
                    return Err(Error::data(format!(
                        "bone {i} ({}) has parent {p}; bones must be listed parents-first",
                        b.name
                    )));
                }
                _ => {}
            }
            if !is_rigid(&b.local_rest, 1e-6) {
                return Err(Error::data(format!("bone {i} ({}) rest transform is not rigid", b.name)));
            }
        }
        let mut rest_world = Vec::with_capacity(bones.len());
        for (i, b) in bones.iter().enumerate() {
            let w = match b.parent {
                Some(p) => rest_world[p] * b.local_rest,
                None => b.local_rest,
            };
            let _ = i;
            rest_world.push(w);
        }
        let rest_world_inv = rest_world.iter().map(rigid_inverse).collect();
        Ok(Skeleton {
            bones,
            rest_world,
            rest_world_inv,
        })
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn rest_world(&self, b: usize) -> &Mat4 {
        &self.rest_world[b]
    }

    /// Joint position of bone `b` at rest.
    pub fn joint(&self, b: usize) -> Vec3 {
        translation_part(&self.rest_world[b])
    }

    /// Skinning transforms B_b for a pose: each bone's posed world transform
    /// times the inverse of its rest world transform, so the rest pose maps
    /// every B_b to the identity.
    ///
    /// Rotations apply about each bone's own joint (after its rest offset);
    /// the root additionally receives the global translation on the left.
    pub fn forward_kinematics(&self, pose: &Pose) -> Result<Vec<Mat4>> {
        pose.validate(self.bones.len())?;
        let mut posed_world: Vec<Mat4> = Vec::with_capacity(self.bones.len());
        for (i, b) in self.bones.iter().enumerate() {
            let rot = compose_rt(&quat_to_matrix(pose.rotation(i).normalize()), Vec3::zeros());
            let local = b.local_rest * rot;
            let w = match b.parent {
                Some(p) => posed_world[p] * local,
                None => {
                    let t = pose.root_translation;
                    compose_rt(&Mat3::identity(), Vec3::new(t[0], t[1], t[2])) * local
                }
            };
            posed_world.push(w);
        }
        Ok(posed_world
            .iter()
            .zip(&self.rest_world_inv)
            .map(|(p, inv)| p * inv)
            .collect())
    }

    /// Influence segments of bone `b`: joint-to-child-joint spans, or for a
    /// leaf the span extended past its joint by the parent-to-joint offset.
    pub fn bone_segments(&self, b: usize) -> Vec<(Vec3, Vec3)> {
        let jb = self.joint(b);
        let children: Vec<usize> = (0..self.bones.len())
            .filter(|&c| self.bones[c].parent == Some(b))
            .collect();
        if !children.is_empty() {
            return children.iter().map(|&c| (jb, self.joint(c))).collect();
        }
        match self.bones[b].parent {
            Some(p) => vec![(jb, jb + (jb - self.joint(p)))],
            None => vec![(jb, jb)],
        }
    }

    pub fn to_json(&self) -> String {
        let file = SkeletonFile {
            bones: self
                .bones
                .iter()
                .map(|b| BoneFile {
                    name: b.name.clone(),
                    parent: b.parent.map(|p| p as i64).unwrap_or(-1),
                    rest: b.local_rest.transpose().as_slice().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("skeleton serializes")
    }

    pub fn from_json(json: &str) -> Result<Skeleton> {
        let file: SkeletonFile = serde_json::from_str(json)?;
        let bones = file
            .bones
            .into_iter()
            .enumerate()
            .map(|(i, b)| {
                if b.rest.len() != 16 {
                    return Err(Error::data(format!(
                        "bone {i} ({}) rest has {} values, expected 16",
                        b.name,
                        b.rest.len()
                    )));
                }
                Ok(Bone {
                    name: b.name,
                    parent: if b.parent < 0 { None } else { Some(b.parent as usize) },
                    local_rest: Mat4::from_row_slice(&b.rest),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Skeleton::new(bones)
    }
}

/// Up to four bone influences per point, weights summing to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoneWeights {
    pub bones: [u32; MAX_INFLUENCES],
    pub weights: [f64; MAX_INFLUENCES],
    pub count: usize,
}

impl BoneWeights {
    pub fn single(bone: u32) -> BoneWeights {
        let mut w = BoneWeights {
            bones: [0; MAX_INFLUENCES],
            weights: [0.0; MAX_INFLUENCES],
            count: 1,
        };
        w.bones[0] = bone;
        w.weights[0] = 1.0;
        w
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.count).map(|i| (self.bones[i] as usize, self.weights[i]))
    }

    pub fn validate(&self, bone_count: usize) -> Result<()> {
        if self.count == 0 || self.count > MAX_INFLUENCES {
            return Err(Error::data(format!("bone influence count {} out of range", self.count)));
        }
        let mut sum = 0.0;
        for (b, w) in self.iter() {
            if b >= bone_count {
                return Err(Error::data(format!("bone index {b} out of range")));
            }
            if !(0.0..=1.0 + 1e-9).contains(&w) {
                return Err(Error::data(format!("bone weight {w} outside [0,1]")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::data(format!("bone weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Influence with the largest weight; ties go to the lower bone index.
    pub fn dominant_bone(&self) -> usize {
        let mut best = 0usize;
        for i in 1..self.count {
            if self.weights[i] > self.weights[best] {
                best = i;
            }
        }
        self.bones[best] as usize
    }
}

/// Linear blend skinning: Σ_b w_b (B_b x).
pub fn lbs_transform(x: Vec3, weights: &BoneWeights, transforms: &[Mat4]) -> Vec3 {
    let mut out = Vec3::zeros();
    for (b, w) in weights.iter() {
        out += transform_point(&transforms[b], x) * w;
    }
    out
}

/// Jacobian of `lbs_transform` w.r.t. the input point: Σ_b w_b R_b.
pub fn lbs_rotation(weights: &BoneWeights, transforms: &[Mat4]) -> Mat3 {
    let mut out = Mat3::zeros();
    for (b, w) in weights.iter() {
        out += rotation_part(&transforms[b]) * w;
    }
    out
}

/// Distance-based skinning weights: for each point, the `k` nearest bones by
/// segment distance receive weight ∝ exp(-sharpness d²), renormalized.
pub fn assign_skinning_weights(
    points: &[Vec3],
    skel: &Skeleton,
    k: usize,
    sharpness: f64,
) -> Vec<BoneWeights> {
    let k = k.clamp(1, MAX_INFLUENCES);
    let segments: Vec<Vec<(Vec3, Vec3)>> = (0..skel.bone_count()).map(|b| skel.bone_segments(b)).collect();
    points
        .iter()
        .map(|&p| {
            let mut dists: Vec<(usize, f64)> = segments
                .iter()
                .enumerate()
                .map(|(b, segs)| {
                    let d = segs
                        .iter()
                        .map(|&(a, bseg)| point_segment_distance(p, a, bseg))
                        .fold(f64::INFINITY, f64::min);
                    (b, d)
                })
                .collect();
            dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            dists.truncate(k.min(dists.len()));
            // Shift by the nearest distance so the exponentials cannot all underflow.
            let d0 = dists[0].1;
            let mut w = BoneWeights {
                bones: [0; MAX_INFLUENCES],
                weights: [0.0; MAX_INFLUENCES],
                count: dists.len(),
            };
            let mut sum = 0.0;
            for (i, &(b, d)) in dists.iter().enumerate() {
                let v = (-sharpness * (d * d - d0 * d0)).exp();
                w.bones[i] = b as u32;
                w.weights[i] = v;
                sum += v;
            }
            for i in 0..w.count {
                w.weights[i] /= sum;
            }
            w
        })
        .collect()
}
