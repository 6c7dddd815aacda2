pub mod format;
pub mod generator;
pub mod report;
