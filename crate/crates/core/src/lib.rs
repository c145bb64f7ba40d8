pub mod channel;
pub mod geometry;
pub mod harness;
pub mod ofdm;
pub mod orientation;
pub mod spectral;
