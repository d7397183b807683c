//! Command-line front end: dataset generation, training, inference,
//! evaluation and the verification suite.

pub mod commands;
pub mod oracle;
pub mod verify;
