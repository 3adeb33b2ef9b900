pub mod hash;
pub mod htf;
pub mod result;
pub mod tuple;
