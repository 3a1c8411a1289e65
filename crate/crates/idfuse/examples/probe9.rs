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
    let refs = eval::load_eval_references(&cfg.dataset_dir, 12).unwrap();
    let side = cfg.unet.base_resolution;
    let img_side = refs[0].image.side;
    let ref_rgb: Vec<[f64; 3]> = refs.iter().map(|r| mean_rgb(&r.image, &r.mask)).collect();
    let schedule = NoiseSchedule::linear(cfg.unet.timesteps);
    let sampler = SamplerConfig { steps: cfg.sample_steps, guidance };
    let text = faces::embed_prompt(&eval::eval_prompt_list(1)[0]);
    let null_text = faces::null_prompt_embedding();
    let mask_set = IdentityMaskSet::new(col_halves(side)).unwrap();
    let region_masks = col_halves(img_side);

    // rank pairs by ref hue separation, take most and least separated among 6 disjoint pairs
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for a in 0..refs.len() {
        for b in (a + 1)..refs.len() {
            pairs.push((a, b, dist(&ref_rgb[a], &ref_rgb[b])));
        }
    }
    pairs.sort_by(|x, y| y.2.partial_cmp(&x.2).unwrap());
    for &(a, b, sep) in pairs.iter().take(3).chain(pairs.iter().rev().take(1)) {
        let latents: Vec<Tensor> = vec![refs[a].latent.clone(), refs[b].latent.clone()];
        let rr = [ref_rgb[a], ref_rgb[b]];
        let mut ok = 0;
        let mut own_d = 0.0;
        let mut other_d = 0.0;
        for s in 0..8u64 {
            let mut rng = derive_rng(0xBEEF, "pair", (a as u64) * 1000 + (b as u64) * 10 + s);
            let cond = Conditioning { text: &text, refs: &latents, identity_of: &[0, 1], masks: Some(&mask_set), strict_mask: false };
            let z = sample(&state, &schedule, &cond, &null_text, sampler, &mut rng).unwrap();
            let img = imageio::decode_latent(&z, side).unwrap();
            for (region, mask) in region_masks.iter().enumerate() {
                let rgb = mean_rgb(&img, mask);
                let d_own = dist(&rgb, &rr[region]);
                let d_oth = dist(&rgb, &rr[1 - region]);
                own_d += d_own;
                other_d += d_oth;
                if d_own < d_oth { ok += 1; }
            }
        }
        println!("pair ({a},{b}) sep {sep:.4}: hue correct {ok}/16, mean d_own {:.4} d_other {:.4}", own_d / 16.0, other_d / 16.0);
    }
}
