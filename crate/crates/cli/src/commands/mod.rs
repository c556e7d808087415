pub mod compare;
pub mod eval;
pub mod init;
pub mod landscape;
pub mod quantize;
pub mod search;
pub mod setup;
pub mod synth;
