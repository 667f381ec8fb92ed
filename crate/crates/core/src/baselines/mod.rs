//! Non-graph baselines: gradient-boosted trees and a tile-map CNN.

pub mod cnn;
pub mod gbt;
pub mod raster;

pub use cnn::{cnn_train, CnnConfig, CnnModel};
pub use gbt::{gbt_train, GbtConfig, GbtModel};
pub use raster::{rasterize, TileGrid, DEFAULT_TILE_UM};
