//! Desk-scale pilot: train on synthetic rectangles, score against ellipses.
//!
//! `cargo run --release --example pilot -- <protocol> <iterations> <base_width> <latent> <batch> <seed>`

use std::time::Instant;

use dgad::data_io::{load_dataset, DatasetSpec, Split};
use dgad::evaluation::{discriminator_accuracy, evaluate_one_class, EvalOptions, Scorer, Subset};
use dgad::networks::NetConfig;
use dgad::pretext::Protocol;
use dgad::trainer::{TrainConfig, Trainer};

fn main() -> dgad::Result<()> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let arg = |i: usize, d: u64| args.get(i).copied().unwrap_or(d);
    let protocol = Protocol::from_number(arg(0, 1) as u8)?;
    let config = TrainConfig {
        protocol,
        net: NetConfig {
            image_size: 32,
            image_channels: 1,
            base_width: arg(2, 4) as usize,
            latent_channels: arg(3, 8) as usize,
            ..Default::default()
        },
        iterations: arg(1, 200),
        batch_size: arg(4, 16) as usize,
        seed: arg(5, 0),
        ..Default::default()
    };
    let spec = DatasetSpec {
        synthetic_count: 2000,
        ..Default::default()
    };
    let train = load_dataset(&spec)?;
    let test = load_dataset(&DatasetSpec {
        split: Split::Test,
        synthetic_count: 500,
        ..spec
    })?;
    let mut trainer = Trainer::new(config)?;
    let dir = std::env::temp_dir().join(format!("dgad-pilot-{}", std::process::id()));
    let t0 = Instant::now();
    trainer.train(&train.images()?, &dir)?;
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "train {:.1}s ({:.1} ms/step) last {:?}",
        secs,
        1e3 * secs / trainer.state.iteration as f64,
        trainer.state.running
    );
    let opts = EvalOptions {
        batch_size: 64,
        ..Default::default()
    };
    for scorer in [Scorer::SRec, Scorer::SDir] {
        let (r, _) = evaluate_one_class(&trainer.nets, protocol, Some(&train), &test, scorer, &opts)?;
        println!("{:?} auc {:.4} throughput {:.1} im/s", scorer, r.auc, r.throughput);
    }
    let n = discriminator_accuracy(&trainer.nets, protocol, &test, Subset::NormalOnly, 64)?;
    let a = discriminator_accuracy(&trainer.nets, protocol, &test, Subset::All, 64)?;
    println!("disc acc normal {n:.4} all {a:.4}");
    let _ = std::fs::remove_dir_all(dir);
    Ok(())
}
