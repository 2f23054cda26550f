use dfr_core::datagen::{generate_dataset, DatasetSpec};
use dfr_core::nn::{train_erm, TrainConfig};

#[test]
fn early_epoch_loss_mostly_decreases_on_default_data() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let model = train_erm(
        &ds,
        &TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let losses: Vec<f64> = model.log.iter().map(|e| e.mean_loss).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 1, "{losses:?}");
}
