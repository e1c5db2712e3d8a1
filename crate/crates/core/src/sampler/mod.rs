//! Noise schedule, training loops and the guided sampling loop.

mod combine;
mod sample;
mod schedule;
mod train;

pub use combine::{noise_mask_combine, noise_mask_combine_values};
pub use sample::{
    diagnostics_csv, guidance_objective, sample, Mode, SampleRequest, SampleResult,
    StepDiagnostics, Toggles, DIAGNOSTICS_CSV_HEADER,
};
pub use schedule::{
    add_noise, denoise_step, gaussian, predict_clean, LatentState, NoiseSchedule, ScheduleConfig,
    StepConfig,
};
pub use train::{
    batch_loss, make_batch, train_control_branch, train_denoiser, train_phase, Adam, Batch,
    LossCurve, TrainConfig,
};
