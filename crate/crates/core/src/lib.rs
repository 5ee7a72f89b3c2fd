//! Non-autoregressive insertion-based semantic parsing with pointer and copy
//! mechanisms.

pub mod autograd;
pub mod corpus;
pub mod decode_eval;
pub mod error;
pub mod exec;
pub mod model;
pub mod oracle;
pub mod parse_ir;
pub mod training;
