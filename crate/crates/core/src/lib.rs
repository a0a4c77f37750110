pub mod augmentation;
pub mod classifiers;
pub mod data_io;
pub mod encoder;
pub mod harness;
pub mod numerics;
