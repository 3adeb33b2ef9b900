pub mod gen;
pub mod node;
pub mod orchestrate;
pub mod simulate;
