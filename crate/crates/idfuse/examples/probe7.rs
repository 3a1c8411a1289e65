use std::path::Path;
use idfuse::attention::IdentityMaskSet;
use idfuse::checkpoint;
use idfuse::config::RunConfig;
use idfuse::diffusion::{sample, NoiseSchedule, SamplerConfig};
use idfuse::eval;
use idfuse::faces;
use idfuse::imageio::{self, Image};
use idfuse::raster::BoolRaster;
use idfuse::seeding::derive_rng;
use idfuse::tensor::Tensor;
use idfuse::unet::Conditioning;

fn col_halves(side: usize) -> Vec<BoolRaster> {
    let left: Vec<bool> = (0..side * side).map(|i| i % side < side / 2).collect();
    let right: Vec<bool> = left.iter().map(|&b| !b).collect();
    vec![BoolRaster::new(side, side, left).unwrap(), BoolRaster::new(side, side, right).unwrap()]
}

fn row_halves(side: usize) -> Vec<BoolRaster> {
    let top: Vec<bool> = (0..side * side).map(|i| i / side < side / 2).collect();
    let bot: Vec<bool> = top.iter().map(|&b| !b).collect();
    vec![BoolRaster::new(side, side, top).unwrap(), BoolRaster::new(side, side, bot).unwrap()]
}

fn mean_rgb(img: &Image, mask: &BoolRaster) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for y in 0..img.side {
        for x in 0..img.side {
            if mask.get(y, x) {
                for c in 0..3 { acc[c] += img.at(y, x, c); }
                n += 1.0;
            }
        }
    }
    for c in &mut acc { *c /= n; }
    acc
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig::load(Path::new(&args[1])).unwrap();
    let state = checkpoint::load_unet(Path::new(&args[2])).unwrap();
    let guidance: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let refs = eval::load_eval_references(&cfg.dataset_dir, 2).unwrap();
    let side = cfg.unet.base_resolution;
    let img_side = refs[0].image.side;
    let ref_rgb: Vec<[f64; 3]> = refs.iter().map(|r| mean_rgb(&r.image, &r.mask)).collect();
    let latents: Vec<Tensor> = refs.iter().map(|r| r.latent.clone()).collect();
    let schedule = NoiseSchedule::linear(cfg.unet.timesteps);
    let sampler = SamplerConfig { steps: cfg.sample_steps, guidance };
    let text = faces::embed_prompt(&eval::eval_prompt_list(1)[0]);
    let null_text = faces::null_prompt_embedding();
    let mask_set = IdentityMaskSet::new(col_halves(side)).unwrap();
    let (lr_masks, tb_masks) = (col_halves(img_side), row_halves(img_side));
    let (mut lr_ok, mut tb_ok) = (0, 0);
    for s in 0..20u64 {
        let mut rng = derive_rng(0xACCE97, "criterion-08", s);
        let cond = Conditioning { text: &text, refs: &latents, identity_of: &[0, 1], masks: Some(&mask_set), strict_mask: false };
        let z = sample(&state, &schedule, &cond, &null_text, sampler, &mut rng).unwrap();
        let img = imageio::decode_latent(&z, side).unwrap();
        for (region, mask) in lr_masks.iter().enumerate() {
            let rgb = mean_rgb(&img, mask);
            if (if dist(&rgb, &ref_rgb[0]) < dist(&rgb, &ref_rgb[1]) { 0 } else { 1 }) == region { lr_ok += 1; }
        }
        for (region, mask) in tb_masks.iter().enumerate() {
            let rgb = mean_rgb(&img, mask);
            if (if dist(&rgb, &ref_rgb[0]) < dist(&rgb, &ref_rgb[1]) { 0 } else { 1 }) == region { tb_ok += 1; }
        }
    }
    println!("guidance {guidance}: left/right hue {lr_ok}/40, top/bottom hue {tb_ok}/40");
}
