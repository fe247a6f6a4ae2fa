//! End-to-end optimization: round-robin over training frames, photometric +
//! flow + temporal + regularization losses with adaptive weighting, Adam
//! updates per parameter group, and scheduled flow-guided densification.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adam::{retain_by_mask, update_mlp, update_splat, MlpAdam, SplatAdam, SplatLayout};
use crate::appearance::{encode_pose, ColorMlp, MlpGrad};
use crate::camera::{Camera, NEAR_CLIP};
use crate::config::{TrainConfig, TrainMode};
use crate::deform::{deform_backward, deform_batch_posed};
use crate::error::{Error, Result};
use crate::flowdens::{
    consistency_error, density_report, detect_dynamic, motion_stats, sample_along_flow,
    select_prune, MotionStats, PruneInput, SampleContext,
};
use crate::gauss::{GaussianGrad, PosedGaussian, PosedGrad, SpacetimeGaussian};
use crate::img::{Image, Mask};
use crate::io::dataset::FrameDataset;
use crate::losses::{flow_loss, reg_loss, rgb_loss, temporal_loss, AdaptiveWeights, FlowSample};
use crate::math::*;
use crate::metrics::{psnr, ssim};
use crate::model::{AvatarModel, ColorModel, SH_FEAT_DIM};
use crate::render::{
    point_projection_backward, project, project_backward, render, RenderOptions, RenderOutput,
    Splat2D,
};
use crate::skeleton::{
    assign_skinning_weights, lbs_rotation, DEFAULT_WEIGHT_SHARPNESS, MAX_INFLUENCES,
};

pub const METRICS_HEADER: &str =
    "iteration,rgb,flow,temp,reg,lambda1,lambda2,lambda3,total,splat_count,psnr_train";

/// One iteration's loss values and the weights that combined them.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub flow: f64,
    pub temp: f64,
    pub reg: f64,
    pub lambda: [f64; 3],
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(rgb: f64, flow: f64, temp: f64, reg: f64, lambda: [f64; 3]) -> Self {
        LossBreakdown {
            rgb,
            flow,
            temp,
            reg,
            lambda,
            total: rgb + lambda[0] * flow + lambda[1] * temp + lambda[2] * reg,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub splat_count: usize,
    pub psnr_train: f64,
}

impl MetricsRow {
    fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e}",
            self.iteration,
            l.rgb,
            l.flow,
            l.temp,
            l.reg,
            l.lambda[0],
            l.lambda[1],
            l.lambda[2],
            l.total,
            self.splat_count,
            self.psnr_train
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: AvatarModel,
    pub metrics_csv: String,
    pub rows: Vec<MetricsRow>,
    /// Parameter tensors whose update was skipped for non-finite gradients.
    pub skipped_tensors: u64,
    pub iterations_run: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Splats anchored to the skeleton's bone segments with Gaussian jitter,
/// identity rotations, flat temporal envelopes, and mid-sequence centers.
pub fn init_model(dataset: &FrameDataset, cfg: &TrainConfig, mode: TrainMode) -> Result<AvatarModel> {
    let skel = &dataset.skeleton;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut segments = Vec::new();
    let mut total_len = 0.0;
    for b in 0..skel.bone_count() {
        for (a, bb) in skel.bone_segments(b) {
            let len = (bb - a).norm();
            if len > 1e-9 {
                total_len += len;
                segments.push((a, bb, total_len));
            }
        }
    }
    if segments.is_empty() {
        return Err(Error::data("skeleton has no extended bone segments to anchor splats"));
    }

    let anchor_noise = Normal::new(0.0, 0.05).unwrap();
    let feat_dim = if mode == TrainMode::Sh { SH_FEAT_DIM } else { cfg.feat_dim };
    let feat_noise = Normal::new(0.0, 0.1).unwrap();
    // Spacing for a uniform cover of the jitter tube around the segments.
    let s0 = (0.3 * total_len / cfg.init_count as f64).sqrt().clamp(5e-3, 3e-2);

    let mut gaussians = Vec::with_capacity(cfg.init_count);
    for _ in 0..cfg.init_count {
        let r: f64 = rng.random_range(0.0..total_len);
        let seg = segments
            .iter()
            .find(|(_, _, cum)| r < *cum)
            .unwrap_or(segments.last().unwrap());
        let u: f64 = rng.random_range(0.0..1.0);
        let anchor = seg.0 + (seg.1 - seg.0) * u;
        let jitter = Vec3::new(
            anchor_noise.sample(&mut rng),
            anchor_noise.sample(&mut rng),
            anchor_noise.sample(&mut rng),
        );
        let mut rot_coeffs = vec![Vec4::zeros(); cfg.n_q + 1];
        rot_coeffs[0] = QUAT_IDENTITY;
        gaussians.push(SpacetimeGaussian {
            canonical_pos: anchor + jitter,
            motion_coeffs: vec![Vec3::zeros(); cfg.n_p],
            temporal_center_pos: 0.5,
            rot_coeffs,
            temporal_center_rot: 0.5,
            log_scales: Vec3::from_element(s0.ln()),
            base_opacity: logit(0.1),
            temporal_sharpness: 0.0,
            appearance_feat: (0..feat_dim).map(|_| feat_noise.sample(&mut rng)).collect(),
        });
    }

    let positions: Vec<Vec3> = gaussians.iter().map(|g| g.canonical_pos).collect();
    let skinning = assign_skinning_weights(&positions, skel, MAX_INFLUENCES, DEFAULT_WEIGHT_SHARPNESS);

    let color = if mode == TrainMode::Sh {
        ColorModel::Sh
    } else {
        ColorModel::Mlp(ColorMlp::new(
            &cfg.encoding,
            cfg.n_p,
            cfg.n_q,
            feat_dim,
            skel.bone_count(),
            cfg.hidden,
            &mut rng,
        ))
    };

    let model = AvatarModel {
        n_p: cfg.n_p,
        n_q: cfg.n_q,
        feat_dim,
        gaussians,
        skinning,
        encoding: cfg.encoding,
        color,
    };
    model.validate()?;
    Ok(model)
}

/// Everything the loop touches for one frame: the posed splats, their
/// projections, and the rendered output.
pub struct FrameRender {
    pub posed: Vec<PosedGaussian>,
    pub colors: Vec<[f64; 3]>,
    pub caches: crate::model::ColorCaches,
    pub splats: Vec<Splat2D>,
    pub out: RenderOutput,
}

pub fn render_frame(
    model: &AvatarModel,
    bts: &[Mat4],
    pose_enc: &[f64],
    cam: &Camera,
    t: f64,
    background: [f64; 3],
    opts: &RenderOptions,
) -> FrameRender {
    let posed = deform_batch_posed(&model.gaussians, t, bts, &model.skinning);
    let (colors, caches) = model.splat_colors(pose_enc, &posed, cam);
    let splats: Vec<Splat2D> = posed
        .iter()
        .zip(&colors)
        .enumerate()
        .filter_map(|(i, (p, &c))| project(p, c, cam, i as u32))
        .collect();
    let out = render(&splats, cam, background, opts);
    FrameRender {
        posed,
        colors,
        caches,
        splats,
        out,
    }
}

/// Renders dataset frame `k` with the model's current parameters.
pub fn render_dataset_frame(model: &AvatarModel, ds: &FrameDataset, k: usize) -> Result<Image> {
    if k >= ds.meta.frame_count {
        return Err(Error::argument(format!(
            "frame {k} out of range, dataset has {}",
            ds.meta.frame_count
        )));
    }
    let bts = ds.skeleton.forward_kinematics(&ds.poses[k])?;
    let pose_enc = encode_pose(&ds.poses[k], model.encoding.l_pose);
    let fr = render_frame(
        model,
        &bts,
        &pose_enc,
        &ds.cameras[k],
        ds.time(k),
        ds.meta.background,
        &RenderOptions::default(),
    );
    Ok(fr.out.image)
}

/// Mean PSNR/SSIM of the model's renders over the held-out frames.
pub fn eval_holdout(model: &AvatarModel, ds: &FrameDataset, holdout: &[usize]) -> Result<Metrics> {
    if holdout.is_empty() {
        return Err(Error::argument("holdout must name at least one frame"));
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for &k in holdout {
        let img = render_dataset_frame(model, ds, k)?;
        p += psnr(&img, &ds.frames[k])?;
        s += ssim(&img, &ds.frames[k])?;
    }
    Ok(Metrics {
        psnr: p / holdout.len() as f64,
        ssim: s / holdout.len() as f64,
    })
}

struct FrameContext {
    bts: Vec<Mat4>,
    pose_enc: Vec<f64>,
    /// Valid (moving) region from the flow window ending at this frame.
    stats: Option<MotionStats>,
}

fn frame_contexts(ds: &FrameDataset, cfg: &TrainConfig) -> Result<Vec<FrameContext>> {
    let window = cfg.densify.window.max(1);
    (0..ds.meta.frame_count)
        .map(|k| {
            let bts = ds.skeleton.forward_kinematics(&ds.poses[k])?;
            let pose_enc = encode_pose(&ds.poses[k], cfg.encoding.l_pose);
            let stats = if k == 0 {
                None
            } else {
                let lo = k.saturating_sub(window);
                let flows: Vec<&crate::flowdens::FlowField> =
                    ds.flows[lo..k].iter().collect();
                Some(motion_stats(&flows, cfg.densify.motion_threshold)?)
            };
            Ok(FrameContext { bts, pose_enc, stats })
        })
        .collect()
}

fn train_frame_list(ds: &FrameDataset, cfg: &TrainConfig) -> Result<Vec<usize>> {
    for &h in &cfg.holdout {
        if h >= ds.meta.frame_count {
            return Err(Error::argument(format!(
                "holdout frame {h} out of range, dataset has {}",
                ds.meta.frame_count
            )));
        }
    }
    let list: Vec<usize> =
        (0..ds.meta.frame_count).filter(|k| !cfg.holdout.contains(k)).collect();
    if list.is_empty() {
        return Err(Error::argument("every frame is held out, nothing to train on"));
    }
    Ok(list)
}

/// Zeroes every gradient that would move a splat in time, leaving plain
/// skinned 3D Gaussians.
fn freeze_time_grads(grad: &mut GaussianGrad) {
    for b in &mut grad.motion_coeffs {
        *b = Vec3::zeros();
    }
    for c in grad.rot_coeffs.iter_mut().skip(1) {
        *c = Vec4::zeros();
    }
    grad.temporal_center_pos = 0.0;
    grad.temporal_center_rot = 0.0;
    grad.temporal_sharpness = 0.0;
}

struct Trainer<'a> {
    ds: &'a FrameDataset,
    cfg: &'a TrainConfig,
    mode: TrainMode,
    model: AvatarModel,
    states: Vec<SplatAdam>,
    mlp_state: Option<MlpAdam>,
    strikes: Vec<u8>,
    /// Per-splat max render contribution since the last densify event.
    contrib_acc: Vec<f64>,
    weights: AdaptiveWeights,
    contexts: Vec<FrameContext>,
    train_frames: Vec<usize>,
    /// Most recent render of each frame, kept for the temporal loss.
    last_renders: Vec<Option<Image>>,
    opts: RenderOptions,
    skipped_tensors: u64,
    rows: Vec<MetricsRow>,
    csv: String,
}

pub fn train(ds: &FrameDataset, cfg: &TrainConfig, mode: TrainMode) -> Result<TrainOutcome> {
    cfg.validate()?;
    let contexts = frame_contexts(ds, cfg)?;
    let train_frames = train_frame_list(ds, cfg)?;
    let model = init_model(ds, cfg, mode)?;

    let states = model
        .gaussians
        .iter()
        .map(|g| SplatAdam::zeros(SplatLayout::for_gaussian(g)))
        .collect();
    let mlp_state = match &model.color {
        ColorModel::Mlp(mlp) => Some(MlpAdam::new(mlp)),
        ColorModel::Sh => None,
    };
    let n_frames = ds.meta.frame_count;
    let mut trainer = Trainer {
        ds,
        cfg,
        mode,
        model,
        states,
        mlp_state,
        strikes: vec![0; cfg.init_count],
        contrib_acc: vec![0.0; cfg.init_count],
        weights: AdaptiveWeights::new(cfg.loss_ratios, cfg.ema_decay),
        contexts,
        train_frames,
        last_renders: vec![None; n_frames],
        opts: RenderOptions::default(),
        skipped_tensors: 0,
        rows: Vec::new(),
        csv: format!("{METRICS_HEADER}\n"),
    };
    trainer.run()?;
    let Trainer { model, rows, csv, skipped_tensors, .. } = trainer;
    Ok(TrainOutcome {
        model,
        metrics_csv: csv,
        rows,
        skipped_tensors,
        iterations_run: cfg.iterations,
    })
}

impl Trainer<'_> {
    fn run(&mut self) -> Result<()> {
        let mut consecutive_bad = 0u32;
        for iter in 0..self.cfg.iterations {
            let finite = self.step(iter)?;
            if finite {
                consecutive_bad = 0;
            } else {
                consecutive_bad += 1;
                if consecutive_bad >= 10 {
                    return Err(Error::numeric(format!(
                        "loss non-finite for {consecutive_bad} consecutive iterations, last at {}",
                        iter + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// One optimization step; returns whether the loss was finite.
    fn step(&mut self, iter: u64) -> Result<bool> {
        let j = self.train_frames[(iter as usize) % self.train_frames.len()];
        let t = self.ds.time(j);
        let cam = &self.ds.cameras[j];
        let gt = &self.ds.frames[j];
        let ctx = &self.contexts[j];
        let n = self.model.gaussians.len();

        let fr = render_frame(
            &self.model,
            &ctx.bts,
            &ctx.pose_enc,
            cam,
            t,
            self.ds.meta.background,
            &self.opts,
        );

        for (acc, &c) in self.contrib_acc.iter_mut().zip(&fr.out.contrib) {
            *acc = acc.max(c);
        }

        let (rgb, d_img_rgb) = rgb_loss(&fr.out.image, gt, self.cfg.ssim_weight)?;

        // The previous frame enters through its stored render (temporal loss)
        // and through each splat's reprojected position (flow loss).
        let prev = (j > 0).then(|| j - 1);
        let posed_prev = prev.map(|p| {
            deform_batch_posed(
                &self.model.gaussians,
                self.ds.time(p),
                &self.contexts[p].bts,
                &self.model.skinning,
            )
        });

        let temp_pair = match prev.and_then(|p| self.last_renders[p].as_ref()) {
            Some(prev_img) => {
                let exclude = self
                    .contexts[j]
                    .stats
                    .as_ref()
                    .map(|s| s.valid.clone())
                    .unwrap_or_else(|| Mask::new(gt.width, gt.height));
                Some(temporal_loss(&fr.out.image, prev_img, &exclude)?)
            }
            None => None,
        };

        let flow_pair = match (prev, &posed_prev) {
            (Some(p), Some(pp)) => {
                let flow = &self.ds.flows[j - 1];
                let cam_prev = &self.ds.cameras[p];
                let mut samples = Vec::new();
                let mut indices = Vec::new();
                for i in 0..n {
                    let w = fr.out.contrib.get(i).copied().unwrap_or(0.0);
                    if w <= 0.0 {
                        continue;
                    }
                    let (q_cur, z_cur) = cam.project(fr.posed[i].position);
                    let (q_prev, z_prev) = cam_prev.project(pp[i].position);
                    if z_cur <= NEAR_CLIP || z_prev <= NEAR_CLIP {
                        continue;
                    }
                    samples.push(FlowSample {
                        weight: w,
                        traj: q_cur - q_prev,
                        flow: flow.sample(q_prev),
                    });
                    indices.push(i);
                }
                let (value, grads) = flow_loss(&samples);
                Some((value, grads, indices))
            }
            _ => None,
        };

        // Raw value first so the adaptive weights see it; zero scale leaves
        // the gradient accumulators untouched.
        let mut grads: Vec<GaussianGrad> =
            self.model.gaussians.iter().map(GaussianGrad::zeros_like).collect();
        let reg = reg_loss(&self.model.gaussians, &mut grads, 0.0);

        let flow_val = flow_pair.as_ref().map(|(v, _, _)| *v);
        let temp_val = temp_pair.as_ref().map(|(v, _)| *v);
        let lambda = self
            .weights
            .update(rgb, [flow_val, temp_val, Some(reg)]);
        let loss = LossBreakdown::assemble(
            rgb,
            flow_val.unwrap_or(0.0),
            temp_val.unwrap_or(0.0),
            reg,
            lambda,
        );

        if self.should_log(iter) {
            let row = MetricsRow {
                iteration: iter + 1,
                loss,
                splat_count: n,
                psnr_train: psnr(&fr.out.image, gt)?,
            };
            let _ = writeln!(self.csv, "{}", row.csv_line());
            self.rows.push(row);
        }

        if !loss.total.is_finite() {
            self.last_renders[j] = Some(fr.out.image);
            return Ok(false);
        }

        // Backward. Image-space gradients combine before one render pass.
        let mut d_img = d_img_rgb;
        if let Some((_, d_temp)) = &temp_pair {
            for (g, dt) in d_img.data.iter_mut().zip(&d_temp.data) {
                *g += lambda[1] * dt;
            }
        }
        let splat_grads =
            crate::render::render_backward(&fr.splats, cam, self.ds.meta.background, &d_img, &self.opts);

        let mut upstream: Vec<PosedGrad> =
            (0..n).map(|_| PosedGrad::zeros(self.model.feat_dim)).collect();
        let mut d_rgb = vec![[0.0; 3]; n];
        for (k, s2d) in fr.splats.iter().enumerate() {
            let i = s2d.source as usize;
            let pg = project_backward(&fr.posed[i], cam, &splat_grads[k]);
            upstream[i].position += pg.position;
            upstream[i].covariance += pg.covariance;
            upstream[i].opacity += pg.opacity;
            for (a, b) in d_rgb[i].iter_mut().zip(pg.color) {
                *a += b;
            }
        }

        let mut mlp_grad = match &self.model.color {
            ColorModel::Mlp(mlp) => Some(MlpGrad::zeros_like(mlp)),
            ColorModel::Sh => None,
        };
        self.model.colors_backward(&fr.caches, &d_rgb, &mut grads, &mut mlp_grad);

        reg_loss(&self.model.gaussians, &mut grads, lambda[2]);

        if let Some((_, d_trajs, indices)) = &flow_pair {
            let p = prev.unwrap();
            let pp = posed_prev.as_ref().unwrap();
            let cam_prev = &self.ds.cameras[p];
            let t_prev = self.ds.time(p);
            for (&i, d) in indices.iter().zip(d_trajs) {
                let d_uv = d * lambda[0];
                upstream[i].position +=
                    point_projection_backward(cam, fr.posed[i].position, d_uv);
                let mut up_prev = PosedGrad::zeros(self.model.feat_dim);
                up_prev.position =
                    point_projection_backward(cam_prev, pp[i].position, -d_uv);
                let g_prev = deform_backward(
                    &self.model.gaussians[i],
                    t_prev,
                    &self.contexts[p].bts,
                    &self.model.skinning[i],
                    &up_prev,
                );
                grads[i].add_assign(&g_prev);
            }
        }

        for i in 0..n {
            let g = deform_backward(
                &self.model.gaussians[i],
                t,
                &ctx.bts,
                &self.model.skinning[i],
                &upstream[i],
            );
            grads[i].add_assign(&g);
        }

        if self.mode == TrainMode::NoStg {
            for g in &mut grads {
                freeze_time_grads(g);
            }
        }

        let step = iter + 1;
        let lrs = self.cfg.lr.splat_lrs();
        for i in 0..n {
            self.skipped_tensors += u64::from(update_splat(
                &mut self.model.gaussians[i],
                &grads[i],
                &mut self.states[i],
                &lrs,
                step,
            ));
        }
        if let (Some(mg), Some(ms)) = (&mlp_grad, &mut self.mlp_state) {
            if let ColorModel::Mlp(mlp) = &mut self.model.color {
                self.skipped_tensors += u64::from(update_mlp(mlp, mg, ms, self.cfg.lr.mlp, step));
            }
        }

        if self.is_densify_iteration(step) {
            self.densify_event(step, j, &fr, posed_prev.as_ref())?;
        }

        self.last_renders[j] = Some(fr.out.image);
        Ok(true)
    }

    fn should_log(&self, iter: u64) -> bool {
        (iter + 1) % self.cfg.metrics_every == 0 || iter + 1 == self.cfg.iterations
    }

    fn is_densify_iteration(&self, step: u64) -> bool {
        step >= self.cfg.densify_start
            && step <= self.cfg.densify_stop
            && (step - self.cfg.densify_start) % self.cfg.densify_interval == 0
    }

    /// Structural update: strike inconsistent splats, prune, and (outside
    /// no-flow mode) spawn new splats along the flow in under-dense moving
    /// cells. All per-splat state stays in lockstep.
    fn densify_event(
        &mut self,
        step: u64,
        j: usize,
        fr: &FrameRender,
        posed_prev: Option<&Vec<PosedGaussian>>,
    ) -> Result<()> {
        let n = self.model.gaussians.len();
        if self.mode == TrainMode::NoFlow {
            let keep: Vec<bool> = self
                .model
                .gaussians
                .iter()
                .map(|g| sigmoid(g.base_opacity) >= self.cfg.prune_floor)
                .collect();
            self.apply_retain(&keep);
            self.contrib_acc.fill(0.0);
            return Ok(());
        }

        let cam = &self.ds.cameras[j];
        let (Some(stats), Some(pp)) = (&self.contexts[j].stats, posed_prev) else {
            return Ok(());
        };
        let flow_prev = &self.ds.flows[j - 1];

        let mut splat_px: Vec<Option<Vec2>> = Vec::with_capacity(n);
        let mut strength = vec![0.0; n];
        let mut contribution = vec![0.0; n];
        for i in 0..n {
            let (q, z) = cam.project(fr.posed[i].position);
            let visible = z > NEAR_CLIP;
            splat_px.push(visible.then_some(q));
            if visible {
                strength[i] = stats.strength_at(q);
            }
            contribution[i] = self.contrib_acc[i];

            let (q_prev, z_prev) = self.ds.cameras[j - 1].project(pp[i].position);
            if visible && z_prev > NEAR_CLIP {
                let ok = consistency_error(q_prev, q, flow_prev) <= self.cfg.densify.consistency_tol;
                self.strikes[i] = if ok { 0 } else { self.strikes[i].saturating_add(1) };
            }
        }

        let report = density_report(&splat_px, stats, &self.cfg.densify);
        let dynamic =
            detect_dynamic(&fr.out.image, &self.ds.frames[j], self.cfg.densify.error_threshold)?;

        // Newborns are appended after the prune and skip it for one event.
        let headroom = self.cfg.max_new_per_event.min(self.cfg.splat_budget);
        let new =
            self.spawn_along_flow(step, j, fr, &report, &dynamic, &splat_px, &contribution, headroom);

        let consistency_ok: Vec<bool> = self.strikes.iter().map(|&s| s < 2).collect();
        let max_opacity: Vec<f64> = self
            .model
            .gaussians
            .iter()
            .map(|g| sigmoid(g.base_opacity))
            .collect();
        let mut keep = select_prune(
            &PruneInput {
                max_opacity: &max_opacity,
                contribution: &contribution,
                strength: &strength,
                consistency_ok: &consistency_ok,
            },
            self.cfg.prune_floor,
            self.cfg.densify.flow_protection,
            self.cfg.splat_budget.saturating_sub(new.len()),
        );
        for (k, &s) in keep.iter_mut().zip(&self.strikes) {
            if s >= 2 {
                *k = false;
            }
        }

        if std::env::var_os("AVATAR_DENSIFY_TRACE").is_some() {
            let surviving = keep.iter().filter(|&&k| k).count();
            let dyn_px = (0..dynamic.height)
                .flat_map(|y| (0..dynamic.width).map(move |x| (x, y)))
                .filter(|&(x, y)| dynamic.get(x, y))
                .count();
            let deficit: f64 = report.deficit_cells().iter().map(|d| d.2).sum();
            let floor_kills = (0..n)
                .filter(|&i| max_opacity[i] < self.cfg.prune_floor)
                .count();
            let strike_kills = (0..n)
                .filter(|&i| keep[i] || max_opacity[i] >= self.cfg.prune_floor)
                .filter(|&i| self.strikes[i] >= 2)
                .count();
            eprintln!(
                "densify step {step} frame {j}: n {n} pruned {} (floor {floor_kills} strikes {strike_kills}) dyn_px {dyn_px} deficit_cells {} deficit {:.1} spawned {}",
                n - surviving,
                report.deficit_cells().len(),
                deficit,
                new.len()
            );
        }

        self.apply_retain(&keep);
        self.append_new(new);
        self.contrib_acc.fill(0.0);
        Ok(())
    }

    /// New splats for under-dense moving cells, seeded from the strongest
    /// contributors already in each cell.
    #[allow(clippy::too_many_arguments)]
    fn spawn_along_flow(
        &self,
        step: u64,
        j: usize,
        fr: &FrameRender,
        report: &crate::flowdens::DensityReport,
        dynamic: &Mask,
        splat_px: &[Option<Vec2>],
        contribution: &[f64],
        headroom: usize,
    ) -> Vec<SpacetimeGaussian> {
        if headroom == 0 {
            return Vec::new();
        }
        let cam = &self.ds.cameras[j];
        let flow_prev = &self.ds.flows[j - 1];
        let t = self.ds.time(j);
        let cell = self.cfg.densify.cell_size;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );

        let mut deficits = report.deficit_cells();
        deficits.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

        let cell_has_dynamic = |cx: usize, cy: usize| {
            let x1 = ((cx + 1) * cell).min(dynamic.width);
            let y1 = ((cy + 1) * cell).min(dynamic.height);
            (cy * cell..y1).any(|y| (cx * cell..x1).any(|x| dynamic.get(x, y)))
        };

        let mut new = Vec::new();
        for (cx, cy, deficit) in deficits {
            if new.len() >= headroom {
                break;
            }
            if !cell_has_dynamic(cx, cy) {
                continue;
            }
            let mut seeds: Vec<usize> = splat_px
                .iter()
                .enumerate()
                .filter_map(|(i, q)| {
                    q.filter(|q| {
                        (q.x / cell as f64) as usize == cx && (q.y / cell as f64) as usize == cy
                    })
                    .map(|_| i)
                })
                .collect();
            if seeds.is_empty() {
                continue;
            }
            seeds.sort_by(|&a, &b| {
                contribution[b].total_cmp(&contribution[a]).then(a.cmp(&b))
            });
            seeds.truncate(8);
            let want = (deficit.ceil() as usize).min(headroom - new.len());
            for &s in seeds.iter().cycle().take(want) {
                let q = splat_px[s].unwrap();
                let ctx = SampleContext {
                    camera: cam,
                    lbs_jacobian: lbs_rotation(&self.model.skinning[s], &self.contexts[j].bts),
                    seed_world: fr.posed[s].position,
                };
                if let Some(g) = sample_along_flow(
                    &self.model.gaussians[s],
                    &ctx,
                    flow_prev.sample(q),
                    t,
                    &self.cfg.densify,
                    &mut rng,
                ) {
                    new.push(g);
                }
            }
        }
        new
    }

    fn apply_retain(&mut self, keep: &[bool]) {
        retain_by_mask(&mut self.model.gaussians, keep);
        retain_by_mask(&mut self.model.skinning, keep);
        retain_by_mask(&mut self.states, keep);
        retain_by_mask(&mut self.strikes, keep);
        retain_by_mask(&mut self.contrib_acc, keep);
    }

    fn append_new(&mut self, new: Vec<SpacetimeGaussian>) {
        if new.is_empty() {
            return;
        }
        let positions: Vec<Vec3> = new.iter().map(|g| g.canonical_pos).collect();
        let weights = assign_skinning_weights(
            &positions,
            &self.ds.skeleton,
            MAX_INFLUENCES,
            DEFAULT_WEIGHT_SHARPNESS,
        );
        for (g, w) in new.into_iter().zip(weights) {
            self.states.push(SplatAdam::zeros(SplatLayout::for_gaussian(&g)));
            self.strikes.push(0);
            self.contrib_acc.push(0.0);
            self.model.gaussians.push(g);
            self.model.skinning.push(w);
        }
    }
}

/// Ratio of splat density in moving screen cells to static cells at frame
/// `j`, using the dataset's own flow for the motion labels.
pub fn moving_density_ratio(model: &AvatarModel, ds: &FrameDataset, j: usize, cfg: &TrainConfig) -> Result<Option<f64>> {
    if j == 0 || j >= ds.meta.frame_count {
        return Err(Error::argument(format!("frame {j} has no flow window")));
    }
    let lo = j.saturating_sub(cfg.densify.window.max(1));
    let flows: Vec<&crate::flowdens::FlowField> = ds.flows[lo..j].iter().collect();
    let stats = motion_stats(&flows, cfg.densify.motion_threshold)?;
    let bts = ds.skeleton.forward_kinematics(&ds.poses[j])?;
    let posed = deform_batch_posed(&model.gaussians, ds.time(j), &bts, &model.skinning);
    let cam = &ds.cameras[j];
    let splat_px: Vec<Option<Vec2>> = posed
        .iter()
        .map(|p| {
            let (q, z) = cam.project(p.position);
            (z > NEAR_CLIP).then_some(q)
        })
        .collect();
    let report = density_report(&splat_px, &stats, &cfg.densify);
    Ok(report.moving_static_ratio())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, MotionScript, SynthConfig};
    use tempfile::tempdir;

    fn small_dataset() -> (tempfile::TempDir, FrameDataset) {
        let dir = tempdir().unwrap();
        let cfg = SynthConfig {
            frames: 6,
            width: 32,
            height: 32,
            points: 400,
            seed: 11,
            script: MotionScript::Walk,
        };
        generate(dir.path(), &cfg).unwrap();
        let ds = FrameDataset::load(dir.path()).unwrap();
        (dir, ds)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            iterations: 12,
            init_count: 150,
            splat_budget: 400,
            hidden: 16,
            feat_dim: 4,
            holdout: vec![5],
            metrics_every: 4,
            densify_start: 6,
            densify_interval: 4,
            encoding: crate::appearance::EncodingConfig {
                l_pos: 2,
                l_view: 1,
                l_pose: 1,
                motion_feat: 4,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn init_anchors_near_skeleton_and_validates() {
        let (_dir, ds) = small_dataset();
        let cfg = small_config();
        let model = init_model(&ds, &cfg, TrainMode::Full).unwrap();
        assert_eq!(model.gaussians.len(), 150);
        model.validate().unwrap();
        // Splats hug the figure: all within jitter reach of some bone segment.
        for g in &model.gaussians {
            let mut best = f64::INFINITY;
            for b in 0..ds.skeleton.bone_count() {
                for (a, bb) in ds.skeleton.bone_segments(b) {
                    let ab = bb - a;
                    let len2 = ab.norm_squared();
                    let u = if len2 > 0.0 {
                        ((g.canonical_pos - a).dot(&ab) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    best = best.min((g.canonical_pos - (a + ab * u)).norm());
                }
            }
            assert!(best < 0.3, "splat strays {best} from the skeleton");
        }
        // Time-neutral start.
        for g in &model.gaussians {
            assert!(g.motion_coeffs.iter().all(|b| b.norm() == 0.0));
            assert_eq!(g.temporal_sharpness, 0.0);
        }
    }

    #[test]
    fn sh_mode_uses_sh_color_model() {
        let (_dir, ds) = small_dataset();
        let model = init_model(&ds, &small_config(), TrainMode::Sh).unwrap();
        assert!(matches!(model.color, ColorModel::Sh));
        assert_eq!(model.feat_dim, SH_FEAT_DIM);
    }

    #[test]
    fn loss_decreases_over_short_run() {
        let (_dir, ds) = small_dataset();
        let mut cfg = small_config();
        cfg.iterations = 60;
        cfg.metrics_every = 10;
        cfg.densify_start = 1000;
        let out = train(&ds, &cfg, TrainMode::Full).unwrap();
        let first = out.rows.first().unwrap().loss.rgb;
        let last = out.rows.last().unwrap().loss.rgb;
        assert!(last < first, "rgb loss went {first} -> {last}");
        assert!(out.rows.iter().all(|r| r.loss.total.is_finite()));
        // Assembly identity.
        for r in &out.rows {
            let l = &r.loss;
            let expect = l.rgb + l.lambda[0] * l.flow + l.lambda[1] * l.temp + l.lambda[2] * l.reg;
            assert!((l.total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (_dir, ds) = small_dataset();
        let cfg = small_config();
        let a = train(&ds, &cfg, TrainMode::Full).unwrap();
        let b = train(&ds, &cfg, TrainMode::Full).unwrap();
        assert_eq!(a.metrics_csv, b.metrics_csv);
        assert_eq!(a.model.gaussians.len(), b.model.gaussians.len());
        for (x, y) in a.model.gaussians.iter().zip(&b.model.gaussians) {
            assert_eq!(x.canonical_pos, y.canonical_pos);
            assert_eq!(x.base_opacity, y.base_opacity);
        }
    }

    #[test]
    fn no_stg_keeps_time_coefficients_zero() {
        let (_dir, ds) = small_dataset();
        let mut cfg = small_config();
        cfg.iterations = 20;
        cfg.densify_start = 8;
        let out = train(&ds, &cfg, TrainMode::NoStg).unwrap();
        for g in &out.model.gaussians {
            assert!(g.motion_coeffs.iter().all(|b| b.norm() == 0.0));
            assert!(g.rot_coeffs.iter().skip(1).all(|c| c.norm() == 0.0));
            assert_eq!(g.temporal_sharpness, 0.0);
        }
    }

    #[test]
    fn no_flow_never_adds_splats() {
        let (_dir, ds) = small_dataset();
        let mut cfg = small_config();
        cfg.iterations = 20;
        cfg.densify_start = 4;
        cfg.densify_interval = 4;
        let out = train(&ds, &cfg, TrainMode::NoFlow).unwrap();
        assert!(out.model.gaussians.len() <= cfg.init_count);
    }

    #[test]
    fn eval_holdout_checks_inputs() {
        let (_dir, ds) = small_dataset();
        let model = init_model(&ds, &small_config(), TrainMode::Sh).unwrap();
        assert!(eval_holdout(&model, &ds, &[]).is_err());
        assert!(eval_holdout(&model, &ds, &[99]).is_err());
        let m = eval_holdout(&model, &ds, &[5]).unwrap();
        assert!(m.psnr > 0.0 && m.ssim <= 1.0);
        // Deterministic per checkpoint.
        let m2 = eval_holdout(&model, &ds, &[5]).unwrap();
        assert_eq!(m.psnr, m2.psnr);
        assert_eq!(m.ssim, m2.ssim);
    }

    #[test]
    fn metrics_csv_has_declared_columns() {
        let (_dir, ds) = small_dataset();
        let out = train(&ds, &small_config(), TrainMode::Sh).unwrap();
        let mut lines = out.metrics_csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let first = lines.next().unwrap();
        assert_eq!(first.split(',').count(), 11);
        assert!(first.starts_with("4,"));
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (_dir, ds) = small_dataset();
        let mut cfg = small_config();
        cfg.iterations = 0;
        let out = train(&ds, &cfg, TrainMode::Full).unwrap();
        let fresh = init_model(&ds, &cfg, TrainMode::Full).unwrap();
        assert_eq!(out.model.gaussians.len(), fresh.gaussians.len());
        for (a, b) in out.model.gaussians.iter().zip(&fresh.gaussians) {
            assert_eq!(a.canonical_pos, b.canonical_pos);
            assert_eq!(a.appearance_feat, b.appearance_feat);
        }
        assert_eq!(out.rows.len(), 0);
    }
}
