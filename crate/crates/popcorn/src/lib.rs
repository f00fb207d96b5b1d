//! Oblivious CNN inference over the Paillier cryptosystem.
//!
//! A server evaluates a compressed convolutional network over a client's
//! element-wise encrypted input. Linear layers run locally on the server via
//! homomorphic additions and plaintext multiplications; non-linear layers
//! (ReLU, max-pooling) run as blinded round trips in which the key-holding
//! client performs the comparison on multiplicatively masked values.
//!
//! Module map:
//!
//! * [`paillier`] — keys, encryption, homomorphic operators, modular inverses.
//! * [`encoding`] — signed/fixed-point encodings, shaped ciphertext tensors.
//! * [`compress`] — BN folding, magnitude pruning, codebook quantization,
//!   binarization, and the integerized model format.
//! * [`linear`] — encrypted conv/fc evaluation for every weight variant,
//!   adjacent-output difference kernels, exact operation accounting.
//! * [`protocols`] — blinded ReLU, pairwise secure max, pooling tournaments,
//!   and the fused relu→maxpool path.
//! * [`session`] — wire framing, the two-party session loop, byte metering.
//! * [`reference`] — plaintext integer evaluator used as the correctness
//!   oracle by tests, examples and the self-test command.
//! * [`cli`] — operator entry points backing the `popcorn` binary.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod compress;
pub mod encoding;
pub mod error;
pub mod fixtures;
pub mod linear;
pub mod paillier;
pub mod protocols;
pub mod reference;
pub mod seed;
pub mod session;

pub use error::{AbortReason, Error, Result};

/// Initialize the global worker pool, honoring `POPCORN_THREADS`.
///
/// Safe to call more than once; only the first call takes effect.
pub fn init_threads() {
    if let Ok(v) = std::env::var("POPCORN_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}
