//! Dense arithmetic, FFT, reverse-mode differentiation, Adam and seeded RNG.

pub mod adam;
pub mod fft;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use fft::{fft_real, ifft_real, FftPlan, RealSpectrum};
pub use rng::Rng;
pub use tape::{Backward, Gradients, NodeId, Tape};
pub use tensor::{ComplexVector, Tensor};
