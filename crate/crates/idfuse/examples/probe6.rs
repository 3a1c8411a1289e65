use std::path::Path;
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

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    cov / (vx.sqrt() * vy.sqrt()).max(1e-12)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig::load(Path::new(&args[1])).unwrap();
    let state = checkpoint::load_unet(Path::new(&args[2])).unwrap();
    let guidance: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let nrefs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10);
    let refs = eval::load_eval_references(&cfg.dataset_dir, nrefs).unwrap();
    let side = cfg.unet.base_resolution;
    let img_side = refs[0].image.side;
    let full = BoolRaster::new(img_side, img_side, vec![true; img_side * img_side]).unwrap();
    let schedule = NoiseSchedule::linear(cfg.unet.timesteps);
    let sampler = SamplerConfig { steps: cfg.sample_steps, guidance };
    let text = faces::embed_prompt(&eval::eval_prompt_list(1)[0]);
    let null_text = faces::null_prompt_embedding();
    let mut gen: Vec<[f64; 3]> = Vec::new();
    let mut rf: Vec<[f64; 3]> = Vec::new();
    for (k, r) in refs.iter().enumerate() {
        let ref_face = mean_rgb(&r.image, &r.mask);
        for s in 0..3u64 {
            let mut rng = derive_rng(0xD1A8, "hue", (k as u64) * 100 + s);
            let lat: Vec<Tensor> = vec![r.latent.clone()];
            let cond = Conditioning { text: &text, refs: &lat, identity_of: &[0], masks: None, strict_mask: false };
            let z = sample(&state, &schedule, &cond, &null_text, sampler, &mut rng).unwrap();
            let img = imageio::decode_latent(&z, side).unwrap();
            gen.push(mean_rgb(&img, &full));
            rf.push(ref_face);
        }
    }
    for c in 0..3 {
        let xs: Vec<f64> = rf.iter().map(|v| v[c]).collect();
        let ys: Vec<f64> = gen.iter().map(|v| v[c]).collect();
        println!("channel {c}: ref std {:.4}, gen std {:.4}, pearson {:.3}",
            (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64 - (xs.iter().sum::<f64>() / xs.len() as f64).powi(2)).sqrt(),
            (ys.iter().map(|x| x * x).sum::<f64>() / ys.len() as f64 - (ys.iter().sum::<f64>() / ys.len() as f64).powi(2)).sqrt(),
            pearson(&xs, &ys));
    }
}
