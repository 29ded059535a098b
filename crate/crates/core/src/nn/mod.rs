//! The per-node network: a dense tanh MLP over the flattened aggregation
//! sequence, trained with mean-squared error and Adam.

mod adam;
mod mlp;
mod model_io;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{
    forward, glorot_limit, init_params, loss, loss_and_gradient, Architecture, Minibatch, MlpParams,
    Workspace,
};
pub use model_io::{
    check_architecture, decode_model, encode_model, load_model, load_model_for, read_header, save_model,
    ModelHeader, FORMAT_VERSION, MAGIC,
};
