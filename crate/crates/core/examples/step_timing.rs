//! Times pre-training steps at the default desk configuration.

use std::time::Instant;

use cmae::pipeline::{synthetic_dataset, Split, TrainConfig, Trainer};

fn main() -> cmae::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(128);
    let cfg = TrainConfig { num_images: 512, batch_size: batch, ..TrainConfig::default() };
    let ds = synthetic_dataset(cfg.num_images, 0, Split::Train)?;
    let mut t = Trainer::<f32>::new(&cfg, &ds)?;
    for _ in 0..steps {
        let start = Instant::now();
        let r = t.step_once()?;
        println!(
            "step {} {:.3}s total {:.4} recon {:.4} contrastive {:.4}",
            r.step,
            start.elapsed().as_secs_f64(),
            r.loss.total,
            r.loss.recon,
            r.loss.contrastive
        );
    }
    Ok(())
}
