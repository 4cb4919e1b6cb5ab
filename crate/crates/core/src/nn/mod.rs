//! Layers, parameter storage and the parameter file format.

mod layers;
mod params;
pub mod serialize;

pub use layers::{
    dense, dropout, Activation, AvgPool2d, BatchNorm, Bound, Conv2d, Dense, Forward, Layer, LayerNorm, Mode,
    SeparableConv2d, StatUpdate,
};
pub use params::{glorot_uniform, Param, ParamId, ParamStore};
