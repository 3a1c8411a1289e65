use std::path::Path;
use idfuse::checkpoint;
use idfuse::config::RunConfig;
use idfuse::eval;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg_path = Path::new(&args[1]);
    let ckpt = Path::new(&args[2]);
    let base = Path::new(&args[3]);
    let alpha: f64 = args[4].parse().unwrap();
    let guidance: f64 = args[5].parse().unwrap();
    let mut cfg = RunConfig::load(cfg_path).unwrap();
    cfg.guidance = guidance;
    let (identity, prompt, _) = eval::embedder_fixture(&cfg.dataset_dir, &cfg).unwrap();
    let mut run = |path: &Path, with_refs: bool, scale: f64| {
        let mut state = checkpoint::load_unet(path).unwrap();
        for layer in &mut state.attn {
            layer.weights.alpha *= scale;
        }
        let r = eval::evaluate_run(&state, &identity, &prompt, &cfg.dataset_dir, &cfg, cfg.seed, with_refs, "x".into()).unwrap();
        (r.summary.cosine_distance_mean, r.summary.prompt_alignment_mean)
    };
    let (bc, bp) = run(base, false, 1.0);
    let (fc, fp) = run(ckpt, true, alpha);
    println!("alpha {alpha} guidance {guidance}: base cos {bc:.4} pa {bp:.4} | fused cos {fc:.4} pa {fp:.4} | ratio {:.3}", fc / bc);
}
