use avatar_splat::config::{TrainConfig, TrainMode};
use avatar_splat::flowdens::DensifyConfig;
use avatar_splat::io::dataset::FrameDataset;
use avatar_splat::synth::{generate, MotionScript, SynthConfig};
use avatar_splat::train::{eval_holdout, moving_density_ratio, train};

fn main() {
    let dir = std::path::Path::new("/tmp/fix_ds2");
    if !dir.join("meta.json").exists() {
        let cfg = SynthConfig {
            script: MotionScript::WalkFixedCam,
            ..SynthConfig::default()
        };
        generate(dir, &cfg).unwrap();
        eprintln!("generated {}", dir.display());
    }
    let ds = FrameDataset::load(dir).unwrap();
    let cfg = TrainConfig {
        splat_budget: 1500,
        ..TrainConfig::default()
    };

    for (mode, name) in [(TrainMode::Full, "full"), (TrainMode::NoFlow, "noflow")] {
        let out = train(&ds, &cfg, mode).unwrap();
        let m = eval_holdout(&out.model, &ds, &cfg.holdout).unwrap();
        avatar_splat::io::checkpoint::save_checkpoint(
            std::path::Path::new(&format!("/tmp/fa_{name}.ckpt")),
            &out.model,
            ds.skeleton.bone_count(),
        )
        .unwrap();
        eprintln!(
            "{name}: splats {} psnr {:.2} ssim {:.4}",
            out.model.gaussians.len(),
            m.psnr,
            m.ssim
        );
        for cell in [16usize, 8] {
            let dcfg = DensifyConfig {
                cell_size: cell,
                ..cfg.densify.clone()
            };
            let mcfg = TrainConfig {
                densify: dcfg,
                ..cfg.clone()
            };
            let mut ratios = Vec::new();
            for j in 5..ds.frames.len() {
                if let Some(r) = moving_density_ratio(&out.model, &ds, j, &mcfg).unwrap() {
                    ratios.push(r);
                }
            }
            let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
            eprintln!(
                "{name} cell {cell}: defined {}/{} mean {:.3} min {:.3} max {:.3}",
                ratios.len(),
                ds.frames.len() - 5,
                mean,
                ratios.iter().cloned().fold(f64::INFINITY, f64::min),
                ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
        }
    }
}
