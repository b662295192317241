//! Trains ERM, random augmentation and adversarial augmentation on the
//! default synthetic task and reports held-out accuracy per seed.
//!
//! Usage: `cargo run --release --example compare_methods [seeds] [epochs]`
//!
//! `SYNTH` may hold a partial JSON synthetic configuration and `LR` a
//! learning rate.

use casa_core::adversary::PgdConfig;
use casa_core::model::MlpClassifier;
use casa_core::synth::{generate_dataset, SynthConfig};
use casa_core::trainer::{evaluate, train_casa, train_erm, train_random_aug, Split, TrainConfig};

fn main() -> casa_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(5);
    let epochs = args.get(1).copied().unwrap_or(5);

    // Optional partial JSON override of the synthetic configuration.
    let base: SynthConfig = match std::env::var("SYNTH") {
        Ok(json) => serde_json::from_str(&json)?,
        Err(_) => SynthConfig::default(),
    };
    let lr = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(TrainConfig::default().learning_rate);

    let mut sums = [0.0; 3];
    for seed in 0..seeds as u64 {
        let synth = generate_dataset(&SynthConfig { seed, ..base.clone() })?;
        let train = synth.dataset.split(Split::Train);
        let test = synth.dataset.split(Split::Test);
        let cfg = TrainConfig { epochs, seed, learning_rate: lr, ..TrainConfig::default() };
        let mut init = MlpClassifier::with_defaults(cfg.init_scale, seed);
        let images: Vec<_> = train.patches().iter().map(|p| &p.image).collect();
        init.fit_input_normalization(&images)?;
        let pgd = PgdConfig { seed, ..PgdConfig::default() };

        let (erm, _) = train_erm(&train, init.clone(), &cfg)?;
        let (rnd, _) = train_random_aug(&train, init.clone(), &synth.budget, &cfg)?;
        let (adv, log) = train_casa(&train, init, &synth.budget, &pgd, &cfg)?;
        let accs = [evaluate(&erm, &test)?.acc_avg, evaluate(&rnd, &test)?.acc_avg, evaluate(&adv, &test)?.acc_avg];
        let train_acc = evaluate(&erm, &train)?.acc_avg;
        println!(
            "seed {seed}: tau_w {:.3} tau_h {:.3} s {:.2} | erm {:.3} (train {:.3}) random {:.3} casa {:.3} (train acc {:.3})",
            synth.budget.tau_w,
            synth.budget.tau_h,
            synth.specs.last().unwrap().concentration_scale[0],
            accs[0],
            train_acc,
            accs[1],
            accs[2],
            log.epochs.last().map_or(0.0, |e| e.train_acc),
        );
        for k in 0..3 {
            sums[k] += accs[k];
        }
    }
    let n = seeds as f64;
    println!("mean: erm {:.3} random {:.3} casa {:.3}", sums[0] / n, sums[1] / n, sums[2] / n);
    Ok(())
}
