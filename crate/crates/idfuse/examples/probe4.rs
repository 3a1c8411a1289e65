use std::path::Path;
use idfuse::attention::IdentityMaskSet;
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

fn half_masks(side: usize) -> Vec<BoolRaster> {
    let left: Vec<bool> = (0..side * side).map(|i| i % side < side / 2).collect();
    let right: Vec<bool> = left.iter().map(|&b| !b).collect();
    vec![BoolRaster::new(side, side, left).unwrap(), BoolRaster::new(side, side, right).unwrap()]
}

fn full_mask(side: usize) -> BoolRaster {
    BoolRaster::new(side, side, vec![true; side * side]).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig::load(Path::new(&args[1])).unwrap();
    let state = checkpoint::load_unet(Path::new(&args[2])).unwrap();
    let (identity, _, _) = eval::embedder_fixture(&cfg.dataset_dir, &cfg).unwrap();
    let refs = eval::load_eval_references(&cfg.dataset_dir, 2).unwrap();
    let side = cfg.unet.base_resolution;
    let img_full = full_mask(refs[0].image.side);
    let ref_emb: Vec<Vec<f64>> = refs.iter().map(|r| identity.embedding(&r.image, &r.mask).unwrap()).collect();
    let latents: Vec<Tensor> = refs.iter().map(|r| r.latent.clone()).collect();
    let schedule = NoiseSchedule::linear(cfg.unet.timesteps);
    let sampler = SamplerConfig { steps: cfg.sample_steps, guidance: 1.0 };
    let text = faces::embed_prompt(&eval::eval_prompt_list(1)[0]);
    let null_text = faces::null_prompt_embedding();

    // Scenario A: masks = halves, both assigned to ref k. Full image should match ref k.
    // Scenario B: masks = [full], single ref k. Should match the no-mask single-ref path.
    for scenario in ["halves-same", "full-mask"] {
        let mut ok = 0;
        for k in 0..2usize {
            for s in 0..10u64 {
                let mut rng = derive_rng(0xD1A6, scenario, k as u64 * 100 + s);
                let (mask_set, ids, lat): (IdentityMaskSet, Vec<usize>, Vec<Tensor>) = match scenario {
                    "halves-same" => (IdentityMaskSet::new(half_masks(side)).unwrap(), vec![k, k], latents.clone()),
                    _ => (IdentityMaskSet::new(vec![full_mask(side)]).unwrap(), vec![0], vec![latents[k].clone()]),
                };
                let cond = Conditioning { text: &text, refs: &lat, identity_of: &ids, masks: Some(&mask_set), strict_mask: false };
                let z = sample(&state, &schedule, &cond, &null_text, sampler, &mut rng).unwrap();
                let img = imageio::decode_latent(&z, side).unwrap();
                let emb = identity.embedding(&img, &img_full).unwrap();
                let d0 = cosine_distance(&emb, &ref_emb[0]).unwrap();
                let d1 = cosine_distance(&emb, &ref_emb[1]).unwrap();
                if (if d0 < d1 { 0 } else { 1 }) == k { ok += 1; }
            }
        }
        println!("{scenario}: {ok}/20 full-image nearest to assigned ref");
    }

    // Scenario C: no-mask single-ref baseline for comparison.
    let mut ok = 0;
    for k in 0..2usize {
        for s in 0..10u64 {
            let mut rng = derive_rng(0xD1A6, "no-mask", k as u64 * 100 + s);
            let lat = vec![latents[k].clone()];
            let cond = Conditioning { text: &text, refs: &lat, identity_of: &[0], masks: None, strict_mask: false };
            let z = sample(&state, &schedule, &cond, &null_text, sampler, &mut rng).unwrap();
            let img = imageio::decode_latent(&z, side).unwrap();
            let emb = identity.embedding(&img, &img_full).unwrap();
            let d0 = cosine_distance(&emb, &ref_emb[0]).unwrap();
            let d1 = cosine_distance(&emb, &ref_emb[1]).unwrap();
            if (if d0 < d1 { 0 } else { 1 }) == k { ok += 1; }
        }
    }
    println!("no-mask: {ok}/20 full-image nearest to assigned ref");
}
