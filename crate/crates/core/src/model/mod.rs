//! Toy decoder-only transformer (pre-norm RMS blocks, rotary positions,
//! grouped-query attention, SwiGLU feed-forward) and student construction by
//! teacher-layer selection.

mod config;
mod selection;
mod transformer;

pub use config::{ModuleShape, Projection, TransformerConfig};
pub use selection::{select_layers, LayerSelection, SelectionMode};
pub use transformer::{
    Block, ForwardPass, Linear, ParamKind, ParamPath, ParamScope, TrainMode, TransformerModel, NORM_EPS,
    ROPE_BASE,
};
