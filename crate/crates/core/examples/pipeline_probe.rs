//! Scaled-down end-to-end probe of the training pipeline.

use dereflect::datagen::procedural_scene_groups;
use dereflect::diffusion::{ConvPyramidDistance, NoiseSchedule};
use dereflect::metrics::{psnr, ssim};
use dereflect::network::{Model, NetworkConfig};
use dereflect::trainer::*;
use std::time::Instant;

fn eval(model: &Model, sched: &NoiseSchedule, test: &[dereflect::datagen::SceneGroup]) -> (f64, f64, f64, f64) {
    let mut psnr_m = 0.0;
    let mut psnr_out = 0.0;
    let mut ssim_m = 0.0;
    let mut ssim_out = 0.0;
    let mut n = 0.0;
    for g in test {
        for tr in &g.triples {
            let (out, _) = model.infer(&tr.mixed, sched).unwrap();
            psnr_m += psnr(&tr.mixed, &tr.transmission).unwrap();
            psnr_out += psnr(&out, &tr.transmission).unwrap();
            ssim_m += ssim(&tr.mixed, &tr.transmission).unwrap();
            ssim_out += ssim(&out, &tr.transmission).unwrap();
            n += 1.0;
        }
    }
    (psnr_m / n, psnr_out / n, ssim_m / n, ssim_out / n)
}

fn main() {
    let sched = NoiseSchedule::toy().unwrap();
    let train = procedural_scene_groups(40, 3, 64, 1001).unwrap();
    let test = procedural_scene_groups(8, 3, 64, 2002).unwrap();
    let mut model = Model::new(NetworkConfig::default(), 42);
    let perc = ConvPyramidDistance::default_seeded();

    let t0 = Instant::now();
    let prior_cfg = StageConfig { steps: 600, codec_steps: 1500, ..StageConfig::defaults(Stage::Prior, 7) };
    let rep = run_stage_prior(&mut model, &sched, &train, &prior_cfg).unwrap();
    let mae = codec_round_trip_mae(&model, &test).unwrap();
    let last = &rep.records.last().unwrap();
    println!("[{:6.1}s] prior done: codec MAE {:.4}, last prior loss {:?}", t0.elapsed().as_secs_f32(), mae, last.l_diff_1);

    let f_cfg = StageConfig { steps: 800, ..StageConfig::defaults(Stage::Foundation, 8) };
    let rep = run_stage_foundation(&mut model, &sched, &train, &f_cfg, false).unwrap();
    let (h, t) = smoothed_endpoints(&rep.records, 50).unwrap();
    println!("[{:6.1}s] foundation: smoothed loss {:.4} -> {:.4}", t0.elapsed().as_secs_f32(), h, t);
    let c1 = probe_consistency(&model, &sched, &test).unwrap();
    let (pm, po, sm, so) = eval(&model, &sched, &test);
    println!("          PSNR M {pm:.2} out {po:.2} | SSIM M {sm:.3} out {so:.3} | probe con {c1:.5}");

    let i_cfg = StageConfig { steps: 400, ..StageConfig::defaults(Stage::InvariantFinetune, 9) };
    run_stage_invariant(&mut model, &sched, &train, &i_cfg, false).unwrap();
    let c2 = probe_consistency(&model, &sched, &test).unwrap();
    let (pm, po, sm, so) = eval(&model, &sched, &test);
    println!("[{:6.1}s] invariant: PSNR M {pm:.2} out {po:.2} | SSIM M {sm:.3} out {so:.3} | probe con {c1:.5} -> {c2:.5}", t0.elapsed().as_secs_f32());

    let d_cfg = StageConfig { steps: 400, ..StageConfig::defaults(Stage::Decoder, 10) };
    run_stage_decoder(&mut model, &sched, &train, &d_cfg, false, &perc).unwrap();
    let (pm, po, sm, so) = eval(&model, &sched, &test);
    println!("[{:6.1}s] decoder:   PSNR M {pm:.2} out {po:.2} (gain {:+.2} dB) | SSIM M {sm:.3} out {so:.3}", t0.elapsed().as_secs_f32(), po - pm);
}
