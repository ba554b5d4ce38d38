pub mod checkpoint;
pub mod config;
pub mod diffcore;
pub mod encoder;
pub mod evaluation;
pub mod explain;
pub mod flowdata;
pub mod heads;
pub mod ltn;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod preprocess;
pub mod trainer;
