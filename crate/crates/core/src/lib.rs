pub mod bounds;
pub mod calibration;
pub mod commit;
pub mod exec;
pub mod graph;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod zoo;
pub mod attack;
