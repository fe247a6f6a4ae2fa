use avatar_splat::config::TrainConfig;
use avatar_splat::deform::deform_batch_posed;
use avatar_splat::flowdens::{density_report, motion_stats, DensifyConfig};
use avatar_splat::io::checkpoint::load_checkpoint;
use avatar_splat::io::dataset::FrameDataset;
use avatar_splat::camera::NEAR_CLIP;
use avatar_splat::math::Vec2;

fn main() {
    let ds = FrameDataset::load(std::path::Path::new("/tmp/fix_ds2")).unwrap();
    let cfg = TrainConfig::default();
    let window = cfg.densify.window;

    for name in ["full", "noflow"] {
        let (model, _) =
            load_checkpoint(std::path::Path::new(&format!("/tmp/fa_{name}.ckpt"))).unwrap();
        for cell in [16usize, 8, 4] {
            let dcfg = DensifyConfig {
                cell_size: cell,
                ..cfg.densify.clone()
            };
            let mut ratios = Vec::new();
            let mut mov_mean = 0.0;
            let mut sta_mean = 0.0;
            let mut defined = 0usize;
            for j in 5..ds.frames.len() {
                let lo = j.saturating_sub(window);
                let flows: Vec<_> = ds.flows[lo..j].iter().collect();
                let stats = motion_stats(&flows, dcfg.motion_threshold).unwrap();
                let pose = &ds.poses[j];
                let bts = ds.skeleton.forward_kinematics(pose).unwrap();
                let posed =
                    deform_batch_posed(&model.gaussians, ds.time(j), &bts, &model.skinning);
                let px: Vec<Option<Vec2>> = posed
                    .iter()
                    .map(|p| {
                        let (q, z) = ds.cameras[j].project(p.position);
                        (z > NEAR_CLIP).then_some(q)
                    })
                    .collect();
                let report = density_report(&px, &stats, &dcfg);
                if j == 12 && cell == 8 {
                    eprintln!("{name} frame 12 base {:.1}", report.base);
                    for cy in 0..report.cells_y {
                        let row: Vec<String> = (0..report.cells_x)
                            .map(|cx| {
                                let c = cy * report.cells_x + cx;
                                format!(
                                    "{:>3}/{:.1}",
                                    report.count[c] as i64, report.valid_frac[c]
                                )
                            })
                            .collect();
                        eprintln!("  {}", row.join(" "));
                    }
                }
                let (mut mov, mut movn, mut sta, mut stan) = (0.0, 0usize, 0.0, 0usize);
                for c in 0..report.count.len() {
                    if report.valid_frac[c] >= 0.5 {
                        mov += report.count[c];
                        movn += 1;
                    } else if report.valid_frac[c] == 0.0 && report.count[c] > 0.0 {
                        sta += report.count[c];
                        stan += 1;
                    }
                }
                if movn > 0 && stan > 0 {
                    let m = mov / movn as f64;
                    let s = sta / stan as f64;
                    ratios.push(m / s);
                    mov_mean += m;
                    sta_mean += s;
                    defined += 1;
                }
            }
            let n = defined.max(1) as f64;
            let mean = ratios.iter().sum::<f64>() / n;
            eprintln!(
                "{name} cell {cell}: defined {}/{} ratio-mean {:.3} mov-mean {:.2} sta-mean {:.2} agg {:.3}",
                defined,
                ds.frames.len() - 5,
                mean,
                mov_mean / n,
                sta_mean / n,
                (mov_mean / n) / (sta_mean / n).max(1e-9),
            );
        }
    }
}
