//! Subcommand implementations: thin glue between parsed flags, files on
//! disk and the library stages.

pub mod data;
pub mod demo;
pub mod infer;
pub mod maps;
pub mod scoring;
pub mod stacking;
pub mod trainer;

use std::path::Path;

use histopath::image::Image;
use histopath::tiling::{mean_subtract, scale_values};
use histopath::{Error, Result};

/// Attach the originating file to an error without changing its class
/// (validation errors must still exit with the validation code).
pub fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| {
        let p = path.display();
        match e {
            Error::Validation(m) => Error::Validation(format!("{p}: {m}")),
            Error::Shape(m) => Error::Shape(format!("{p}: {m}")),
            Error::Format { offset, detail } => Error::Format {
                offset,
                detail: format!("{p}: {detail}"),
            },
            Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("{p}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{p}: {m}")),
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{p}: {io}"))),
        }
    })
}

/// The network input convention: center channels by their slide-wide
/// mean, then scale 8-bit counts into roughly unit range.
pub fn preprocess_for_net(img: &Image) -> Result<Image> {
    scale_values(&mean_subtract(img), 1.0 / 255.0)
}
