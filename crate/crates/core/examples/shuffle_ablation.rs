//! Fine-tune-stage test Dice with and without slice shuffling of the labeled volume.
//!
//! `cargo run --release -p cfr-core --example shuffle_ablation -- [seeds] [epochs] [labeled]`

use cfr_core::grid_concat::{concatenate, perturb, GridLayout, Perturbation};
use cfr_core::metrics::evaluate;
use cfr_core::pseudo_label::pseudo_label;
use cfr_core::seg2d::{build_seg2d, finetune, FinetuneConfig, Seg2DConfig};
use cfr_core::volume_io::generate_phantom;

fn main() -> cfr_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(3, |s| s.parse().unwrap());
    let epochs: usize = args.get(1).map_or(40, |s| s.parse().unwrap());
    let m: u64 = args.get(2).map_or(4, |s| s.parse().unwrap());
    let dims = [32, 32, 36];
    let layout = GridLayout::for_dims(dims);
    let (mut plain_sum, mut shuf_sum) = (0.0, 0.0);
    for seed in 0..seeds {
        let pool: Vec<_> = (0..20).map(|i| generate_phantom(seed * 1000 + i, dims, 2)).collect::<Result<_, _>>()?;
        let (labeled, test) = (&pool[..m as usize], &pool[16..]);
        let cfg = Seg2DConfig { input_size: 192, patch_size: 8, seed, ..Default::default() };
        let ft = FinetuneConfig { epochs, seed, ..Default::default() };
        let mut scores = [0.0; 2];
        for (arm, shuffle) in [false, true].into_iter().enumerate() {
            let mut pairs = Vec::new();
            for (j, (v, l)) in labeled.iter().enumerate() {
                let (v, l) = if shuffle {
                    let p = perturb(v, Some(l), &Perturbation::ShuffleSlices, seed * 31 + j as u64)?;
                    (p.volume, p.labels.unwrap())
                } else {
                    (v.clone(), l.clone())
                };
                pairs.push((concatenate(&v, &layout)?, concatenate(&l, &layout)?));
            }
            let mut model = build_seg2d(&cfg)?;
            finetune(&mut model, &pairs, &ft)?;
            for (v, l) in test {
                scores[arm] += evaluate(&pseudo_label(&model, v)?, l)?.dice / test.len() as f64;
            }
        }
        println!("seed {seed}: plain {:.2} shuffled {:.2}", scores[0], scores[1]);
        plain_sum += scores[0];
        shuf_sum += scores[1];
    }
    println!("mean: plain {:.2} shuffled {:.2}", plain_sum / seeds as f64, shuf_sum / seeds as f64);
    Ok(())
}
