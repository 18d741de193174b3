pub mod evaluate;
pub mod factor;
pub mod gen;
pub mod perturb;
pub mod report;
