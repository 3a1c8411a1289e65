use std::path::Path;
use idfuse::config::RunConfig;
use idfuse::eval;
use idfuse::faces::{self, Split};
use idfuse::imageio;
use idfuse::metrics::{cosine_distance, crop_resize_masked};
use idfuse::tensor::Tensor;

fn main() {
    let dir_s = std::env::args().nth(1).unwrap();
    let dir = Path::new(&dir_s);
    let cfg = RunConfig::default();
    let (identity, _) = eval::train_embedders(dir, &cfg).unwrap();
    let rows = faces::load_manifest(dir).unwrap();
    // logits for every render, then center
    let logits = |img: &imageio::Image, mask: &idfuse::raster::BoolRaster| -> Vec<f64> {
        let x = crop_resize_masked(img, mask).unwrap();
        identity.net.hidden(&x).unwrap().matmul(&identity.net.w2).unwrap().row(0).to_vec()
    };
    let mut center = vec![0.0; identity.net.w2.cols()];
    let mut n = 0.0;
    let mut all: Vec<(usize, Split, Vec<f64>)> = Vec::new();
    for row in &rows {
        let img = imageio::read_rgb_png(&dir.join(&row.image)).unwrap();
        let mask = imageio::read_mask_png(&dir.join(&row.mask)).unwrap();
        let l = logits(&img, &mask);
        for (c, v) in center.iter_mut().zip(&l) { *c += v; }
        n += 1.0;
        all.push((row.identity, row.split, l));
    }
    for c in center.iter_mut() { *c /= n; }
    let norm = |v: &[f64]| -> Vec<f64> {
        let c: Vec<f64> = v.iter().zip(&center).map(|(a, b)| a - b).collect();
        let nn = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        c.iter().map(|x| x / nn).collect()
    };
    // refs: first eval render per identity (canonical), roundtripped
    let mut refs: Vec<(usize, Vec<f64>)> = Vec::new();
    for row in rows.iter().filter(|r| r.split == Split::Eval) {
        if refs.iter().any(|(id, _)| *id == row.identity) { continue; }
        let img = imageio::pyramid_roundtrip(&imageio::read_rgb_png(&dir.join(&row.image)).unwrap()).unwrap();
        let mask = imageio::read_mask_png(&dir.join(&row.mask)).unwrap();
        refs.push((row.identity, norm(&logits(&img, &mask))));
    }
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for (id, split, l) in &all {
        if *split != Split::Eval { continue; }
        let e = norm(l);
        for (rid, remb) in &refs {
            let d = cosine_distance(&e, remb).unwrap();
            if rid == id { same.push(d); } else { diff.push(d); }
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    println!("logit-space: same {:.4} cross {:.4} ratio {:.2}", mean(&same), mean(&diff), mean(&diff)/mean(&same));
}
