use std::path::Path;
use idfuse::attention::IdentityMaskSet;
use idfuse::checkpoint;
use idfuse::config::RunConfig;
use idfuse::eval;
use idfuse::faces;
use idfuse::raster::BoolRaster;
use idfuse::seeding::derive_rng;
use idfuse::tensor::randn;
use idfuse::unet::Conditioning;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig::load(Path::new(&args[1])).unwrap();
    let state = checkpoint::load_unet(Path::new(&args[2])).unwrap();
    let refs = eval::load_eval_references(&cfg.dataset_dir, 1).unwrap();
    let side = cfg.unet.base_resolution;
    let left: Vec<bool> = (0..side * side).map(|i| i % side < side / 2).collect();
    let mask_set = IdentityMaskSet::new(vec![BoolRaster::new(side, side, left).unwrap()]).unwrap();
    let text = faces::embed_prompt(&eval::eval_prompt_list(1)[0]);
    let lat = vec![refs[0].latent.clone()];
    let mut rng = derive_rng(7, "probe8", 0);
    let z = randn(side * side, cfg.unet.latent_channels, 1.0, &mut rng);
    for t in [100usize, 500, 900] {
        let cond = Conditioning { text: &text, refs: &lat, identity_of: &[0], masks: Some(&mask_set), strict_mask: true };
        let with_ref = state.forward(&z, t, &cond).unwrap();
        let base = state.forward(&z, t, &Conditioning::text_only(&text)).unwrap();
        // mean |delta| per column band of the base grid, row-major assumption
        let mut col_mass = vec![0.0f64; side];
        for r in 0..side * side {
            let (y, x) = (r / side, r % side);
            let _ = y;
            let mut m = 0.0;
            for c in 0..with_ref.cols() {
                m += (with_ref.at(r, c) - base.at(r, c)).abs();
            }
            col_mass[x] += m;
        }
        let leftsum: f64 = col_mass[..side / 2].iter().sum();
        let rightsum: f64 = col_mass[side / 2..].iter().sum();
        println!("t={t}: left mass {leftsum:.4}, right mass {rightsum:.4}, ratio {:.2}", leftsum / rightsum.max(1e-12));
    }
}
