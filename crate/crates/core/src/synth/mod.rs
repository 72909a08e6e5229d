//! Synthetic slender-object scenes and the strip versus square regression experiment.

pub mod experiment;
pub mod scene;
pub mod toy;

pub use experiment::{
    compare_square_vs_strip, evaluate_toy, generate_samples, matched_square_side, regression_loss,
    train_toy_regressor, Arm, LrSchedule, ArmReport, BinDelta, BinStat, ExperimentConfig, ExperimentReport, Sample,
    SeedRun, TrainOutcome,
};
pub use scene::{generate_scene, Background, SceneConfig};
pub use toy::{Sgd, ToyConfig, ToyNet};
