use allin_core::encoder::{EncoderConfig, Norm};
use allin_core::projection::ProjectionMode;
use allin_core::rng::SeedStream;
use allin_core::synthetic::{generate_sbm_dataset, SbmConfig};
use allin_core::train::{pretrain, TrainConfig};

fn main() {
    let sbm = SbmConfig::default();
    let mut gen_stream = SeedStream::new(0, "accept/sbm-source");
    let source = generate_sbm_dataset("sbm-source", &sbm, &mut gen_stream).unwrap();
    let mut enc = EncoderConfig::uniform(2, 20, 2, 16, 4);
    enc.norm = Norm::Layer;
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 16,
        learning_rate: 1e-3,
        head_learning_rate: 1e-3,
        projection_mode: ProjectionMode::Cached,
        refresh_interval: 100,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = pretrain(&[source], &enc, &cfg, None).unwrap();
    for m in &out.metrics {
        if m.split == "train" {
            println!("epoch {:2} {} {} = {:.4}", m.epoch, m.split, m.metric, m.value);
        }
    }
}
