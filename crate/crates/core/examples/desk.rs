//! Synthetic train-and-evaluate run with optional overrides from the
//! environment: `LR`, `EPOCHS`, `SEED`, `MARGIN`, `NUISANCE`.

use std::time::Instant;

use ghostvlad::experiment::{run_desk, DeskConfig};

fn env<T: std::str::FromStr>(name: &str) -> Option<T> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn main() {
    let mut cfg = DeskConfig::default();
    if let Some(lr) = env("LR") {
        cfg.optimiser.learning_rate = lr;
    }
    if let Some(e) = env("EPOCHS") {
        cfg.epochs = e;
    }
    if let Some(s) = env("SEED") {
        cfg.seed = s;
    }
    if let Some(m) = env("MARGIN") {
        cfg.loss.margin = m;
    }
    if let Some(k) = env("NUISANCE") {
        cfg.dataset.nuisance = k;
    }
    let start = Instant::now();
    let run = run_desk(
        &cfg,
        |_| {},
        |s, t| {
            let r: Vec<String> = t.recall.iter().map(|(n, r)| format!("@{n}={r:.3}")).collect();
            eprintln!(
                "epoch {:2} loss {:.4} {} [{:.0}s]",
                s.epoch,
                s.mean_loss,
                r.join(" "),
                start.elapsed().as_secs_f64()
            );
        },
    )
    .unwrap();
    println!("untrained\n{}", run.untrained);
    println!("trained\n{}", run.trained());
}
