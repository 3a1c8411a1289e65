use std::path::Path;
use idfuse::attention::IdentityMaskSet;
use idfuse::checkpoint;
use idfuse::config::RunConfig;
use idfuse::diffusion::{sample, NoiseSchedule, SamplerConfig};
use idfuse::eval;
use idfuse::faces;
use idfuse::imageio::{self, Image};
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

fn mean_rgb(img: &Image, mask: &BoolRaster) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for y in 0..img.side {
        for x in 0..img.side {
            if mask.get(y, x) {
                for c in 0..3 {
                    acc[c] += img.at(y, x, c);
                }
                n += 1.0;
            }
        }
    }
    for c in &mut acc {
        *c /= n;
    }
    acc
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg_path = Path::new(&args[1]);
    let ckpt = Path::new(&args[2]);
    let guidance: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let strict = args.get(4).map(|s| s == "strict").unwrap_or(false);
    let cfg = RunConfig::load(cfg_path).unwrap();
    let state = checkpoint::load_unet(ckpt).unwrap();
    let (identity, _, _) = eval::embedder_fixture(&cfg.dataset_dir, &cfg).unwrap();
    let refs = eval::load_eval_references(&cfg.dataset_dir, 2).unwrap();
    let mask_set = IdentityMaskSet::new(half_masks(cfg.unet.base_resolution)).unwrap();
    let region_masks = half_masks(refs[0].image.side);
    let ref_emb: Vec<Vec<f64>> = refs.iter().map(|r| identity.embedding(&r.image, &r.mask).unwrap()).collect();
    let ref_rgb: Vec<[f64; 3]> = refs.iter().map(|r| mean_rgb(&r.image, &r.mask)).collect();
    let latents: Vec<Tensor> = refs.iter().map(|r| r.latent.clone()).collect();
    let schedule = NoiseSchedule::linear(cfg.unet.timesteps);
    let sampler = SamplerConfig { steps: cfg.sample_steps, guidance };
    let prompt = eval::eval_prompt_list(1)[0];
    let text = faces::embed_prompt(&prompt);
    let null_text = faces::null_prompt_embedding();
    let (mut emb_ok, mut hue_ok) = (0, 0);
    for s in 0..20u64 {
        let mut rng = derive_rng(0xACCE97, "criterion-08", s);
        let cond = Conditioning { text: &text, refs: &latents, identity_of: &[0, 1], masks: Some(&mask_set), strict_mask: strict };
        let z = sample(&state, &schedule, &cond, &null_text, sampler, &mut rng).unwrap();
        let img = imageio::decode_latent(&z, cfg.unet.base_resolution).unwrap();
        for (region, mask) in region_masks.iter().enumerate() {
            let emb = identity.embedding(&img, mask).unwrap();
            let d0 = cosine_distance(&emb, &ref_emb[0]).unwrap();
            let d1 = cosine_distance(&emb, &ref_emb[1]).unwrap();
            if (if d0 < d1 { 0 } else { 1 }) == region { emb_ok += 1; }
            let rgb = mean_rgb(&img, mask);
            if (if dist(&rgb, &ref_rgb[0]) < dist(&rgb, &ref_rgb[1]) { 0 } else { 1 }) == region { hue_ok += 1; }
        }
    }
    println!("guidance {guidance} strict {strict}: embedding {emb_ok}/40, hue {hue_ok}/40");
}
