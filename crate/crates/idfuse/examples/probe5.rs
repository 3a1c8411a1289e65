use std::path::Path;
use idfuse::checkpoint;
use idfuse::config::RunConfig;
use idfuse::diffusion::{sample, NoiseSchedule, SamplerConfig};
use idfuse::eval;
use idfuse::faces;
use idfuse::imageio;
use idfuse::metrics::cosine_distance;
use idfuse::raster::BoolRaster;
use idfuse::seeding::derive_rng;
use idfuse::tensor::Tensor;
use idfuse::unet::Conditioning;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig::load(Path::new(&args[1])).unwrap();
    let state = checkpoint::load_unet(Path::new(&args[2])).unwrap();
    let guidance: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let nrefs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(6);
    let (identity, _, _) = eval::embedder_fixture(&cfg.dataset_dir, &cfg).unwrap();
    let refs = eval::load_eval_references(&cfg.dataset_dir, nrefs).unwrap();
    let side = cfg.unet.base_resolution;
    let img_full = BoolRaster::new(refs[0].image.side, refs[0].image.side, vec![true; refs[0].image.side * refs[0].image.side]).unwrap();
    let ref_emb: Vec<Vec<f64>> = refs.iter().map(|r| identity.embedding(&r.image, &r.mask).unwrap()).collect();
    let latents: Vec<Tensor> = refs.iter().map(|r| r.latent.clone()).collect();
    let schedule = NoiseSchedule::linear(cfg.unet.timesteps);
    let sampler = SamplerConfig { steps: cfg.sample_steps, guidance };
    let text = faces::embed_prompt(&eval::eval_prompt_list(1)[0]);
    let null_text = faces::null_prompt_embedding();
    let (mut d_assigned, mut d_other, mut ok, mut n, mut no) = (0.0, 0.0, 0, 0, 0);
    for k in 0..nrefs {
        for s in 0..6u64 {
            let mut rng = derive_rng(0xD1A7, "gap", (k as u64) * 100 + s);
            let lat: Vec<Tensor> = vec![latents[k].clone()];
            let cond = Conditioning { text: &text, refs: &lat, identity_of: &[0], masks: None, strict_mask: false };
            let z = sample(&state, &schedule, &cond, &null_text, sampler, &mut rng).unwrap();
            let img = imageio::decode_latent(&z, side).unwrap();
            let emb = identity.embedding(&img, &img_full).unwrap();
            let mut best = (f64::INFINITY, 0usize);
            for (j, re) in ref_emb.iter().enumerate() {
                let d = cosine_distance(&emb, re).unwrap();
                if j == k { d_assigned += d; n += 1; } else { d_other += d; no += 1; }
                if d < best.0 { best = (d, j); }
            }
            if best.1 == k { ok += 1; }
        }
    }
    println!("guidance {guidance}: d_assigned {:.4}, d_other {:.4}, gap {:.4}, top1 {}/{}",
        d_assigned / n as f64, d_other / no as f64, d_other / no as f64 - d_assigned / n as f64, ok, n);
}
