pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod geo;
pub mod geojson;
pub mod layers;
pub mod pipeline;
pub mod plot;
pub mod poi;
pub mod proxies;
pub mod raster;
pub mod regress;
pub mod synth;

pub use error::{Error, Result};
