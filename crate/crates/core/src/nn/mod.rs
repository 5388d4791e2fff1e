//! Small reverse-mode neural network substrate: matrices, a gradient tape,
//! dense and LSTM layers, NAdam, penalties and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod mat;
pub mod store;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use layers::{dense_forward, lstm_cell_forward, regularized, Activation, DenseParams, LstmCellParams};
pub use mat::Mat;
pub use store::{glorot_init, Nadam, ParamId, ParameterStore};
pub use tape::{BackwardStats, Tape, Var};
