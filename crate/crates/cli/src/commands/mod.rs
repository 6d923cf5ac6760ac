pub mod bench;
pub mod calibrate;
pub mod mask_gen;
pub mod optimize;
pub mod reconstruct;
pub mod simulate;
pub mod tactile;
pub mod train_filter;
