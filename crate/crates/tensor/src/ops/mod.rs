mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod sample;
mod shape;

pub use shape::reflect_index;
