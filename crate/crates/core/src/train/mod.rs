//! Desk-scale training and evaluation: L1 loss, Adam with step decay,
//! a synthetic paired dataset, Y-channel PSNR/SSIM and PPM image I/O.

mod config;
mod data;
mod metrics;
mod optim;
mod ppm;
mod trainer;

pub use config::{TrainConfig, TRAIN_KEYS};
pub use data::{box_downsample, flip_horizontal, synthetic_image, PairSampler, SyntheticSet};
pub use metrics::{psnr_y, rgb_to_y, ssim_y, to_u8_domain, EvalResult, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use optim::{Adam, StepSchedule};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};
pub use trainer::{l1_loss, loss_csv, train_loop, train_step, TrainRecord, TrainReport};
