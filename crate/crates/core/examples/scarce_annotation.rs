//! One-labeled-volume phantom experiment: fine-tune the 2D model on the single
//! labeled grid, pseudo-label the pool, then compare three re-training arms.
//!
//! `cargo run --release -p cfr-core --example scarce_annotation -- [seeds] [epochs] [sigma]`

use std::time::Instant;

use cfr_core::grid_concat::{concatenate, GridLayout};
use cfr_core::metrics::evaluate;
use cfr_core::pseudo_label::pseudo_label;
use cfr_core::seg2d::{build_seg2d, finetune, FinetuneConfig, Seg2DConfig};
use cfr_core::ssl3d::{mean_dice, train_ssl, Method, PluginRegistry, SSLConfig, Seg3DConfig, SslData, UnlabeledCase};
use cfr_core::volume_io::{generate_phantom_with, PhantomConfig};

const ARMS: [(&str, Method, bool); 3] = [
    ("CFR_MT", Method::MeanTeacher, true),
    ("MT", Method::MeanTeacher, false),
    ("Labeled-only", Method::Supervised, false),
];

fn main() -> cfr_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(3, |s| s.parse().expect("seeds"));
    let epochs: usize = args.get(1).map_or(10, |s| s.parse().expect("epochs"));
    let sigma: f64 = args.get(2).map_or(0.05, |s| s.parse().expect("sigma"));
    let dims = [32, 32, 36];
    let pc = PhantomConfig { noise_sigma: sigma, ..PhantomConfig::new(dims, 2) };
    let layout = GridLayout::for_dims(dims);
    let mut totals = [0.0; 3];
    for seed in 0..seeds {
        let pool: Vec<_> = (0..20).map(|i| generate_phantom_with(seed * 1000 + i, &pc)).collect::<Result<_, _>>()?;
        let (labeled, rest) = pool.split_at(1);
        let (unlabeled, test) = rest.split_at(15);

        let t = Instant::now();
        let mut m2 = build_seg2d(&Seg2DConfig { input_size: 192, patch_size: 8, seed, ..Default::default() })?;
        let pairs = vec![(concatenate(&labeled[0].0, &layout)?, concatenate(&labeled[0].1, &layout)?)];
        finetune(&mut m2, &pairs, &FinetuneConfig { epochs: 100, seed, ..Default::default() })?;
        let mut pl_dice = 0.0;
        let mut cases = Vec::new();
        for (img, lab) in unlabeled {
            let p = pseudo_label(&m2, img)?;
            pl_dice += evaluate(&p, lab)?.dice / unlabeled.len() as f64;
            cases.push(UnlabeledCase { image: img.clone(), pseudo: Some(p) });
        }
        println!("seed {seed}: pseudo-label Dice {pl_dice:.2} ({:.1} s)", t.elapsed().as_secs_f64());

        let data = SslData { labeled: labeled.to_vec(), unlabeled: cases, val: vec![] };
        let cfg3 = Seg3DConfig { seed, ..Default::default() };
        for (i, (name, method, use_pseudo_labels)) in ARMS.iter().cloned().enumerate() {
            let t = Instant::now();
            let c = SSLConfig {
                method,
                use_pseudo_labels,
                epochs,
                ramp_len: 0.4 * epochs as f64,
                seed,
                ..Default::default()
            };
            let (model, _) = train_ssl(&cfg3, &c, &data, &PluginRegistry::new())?;
            let dice = mean_dice(&model, test)?;
            totals[i] += dice / seeds as f64;
            println!("  {name}: test Dice {dice:.2} ({:.1} s)", t.elapsed().as_secs_f64());
        }
    }
    for ((name, ..), d) in ARMS.iter().zip(totals) {
        println!("mean {name}: {d:.2}");
    }
    Ok(())
}
