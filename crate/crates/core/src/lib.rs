pub mod aetrain;
pub mod diagnostics;
pub mod error;
pub mod evaluate;
pub mod gantrain;
pub mod gradcheck;
pub mod image;
pub mod models;
pub mod optim;
pub mod preproc;
pub mod rng;
pub mod synthdata;
pub mod transfer;

pub use error::{Error, Result};
pub use image::GrayImage;
