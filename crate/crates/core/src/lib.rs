pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod networks;
pub mod tensor;
pub mod train;
