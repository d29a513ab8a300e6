pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod reduce;
pub mod resample;
pub mod sample;
pub mod shape;
