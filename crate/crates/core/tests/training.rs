use pdm_core::synthdata::{generate, SyntheticSpec};
use pdm_core::trainer::{train, TrainConfig};

#[test]
fn loss_falls_over_the_first_twenty_epochs() {
    let data = generate(&SyntheticSpec::default()).unwrap();
    let log = train(&TrainConfig::default(), &data).unwrap().log;
    assert_eq!(log.len(), 30);
    // epochs in the log are 0-based: "epoch 1" is log[0]
    let (first, twentieth) = (log[0].report.total, log[19].report.total);
    assert!(twentieth < first, "{twentieth} !< {first}");
}
