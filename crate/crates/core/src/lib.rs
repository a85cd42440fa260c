//! Per-pixel embedding learner trained by contrasting salient object masks.
//!
//! The crate trains a small convolutional encoder-decoder that maps every
//! pixel of an image onto the unit hypersphere. Supervision comes from a
//! binary saliency mask per image: all pixels of the salient object in one
//! augmented view are pulled towards the object's mean embedding ("prototype")
//! computed from a second view by a momentum-averaged key network, and pushed
//! away from the prototypes of other images held in a FIFO memory bank.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense row-major tensors plus a binary on-disk format.
//! * [`ops`] — plain (non-recorded) numeric kernels: convolution, bilinear
//!   upsampling, normalization, losses, pooling, and their hand-written
//!   backward passes.
//! * [`autodiff`] — a tape of the above ops with reverse-mode gradients.
//! * [`gradcheck`] — finite-difference verification of the tape.
//! * [`model`] — the encoder-decoder with embedding and saliency heads,
//!   parameter init, and checkpoint I/O.
//! * [`maskcontrast`] — object prototypes, the memory bank, the contrastive
//!   objective, and momentum updates of the key network.
//! * [`augment`] — paired random-crop / flip / photometric views that keep
//!   the object visible.
//! * [`trainer`] — the SGD training loop (poly schedule, momentum, metric
//!   logging) and supervised fine-tuning of a classifier head.
//! * [`eval`] — K-Means over object descriptors, Hungarian and majority-vote
//!   cluster-to-class matching, mIoU, and a frozen linear probe.
//! * [`retrieval`] — nearest-neighbour search over object descriptors.
//!
//! Everything is deterministic given a seed: random streams are xoshiro256**
//! generators derived per (epoch, image) so that results are reproducible
//! bit-for-bit across runs and thread counts.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod maskcontrast;
pub mod model;
pub mod ops;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
