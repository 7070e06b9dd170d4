pub mod erase;
pub mod gen;
pub mod trials;
pub mod attacks;
