pub mod avatar;
pub mod camera;
pub mod dataset;
pub mod editor;
pub mod error;
pub mod guides;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod stylize;
pub mod synthetic;

pub use error::{Error, Result};
pub use image::Image;
