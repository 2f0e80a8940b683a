//! Dense and bit-packed matrices, products, norms, and the leading singular
//! triplet.

mod bits;
mod dense;
mod svd;

pub use bits::{matmul_bool, matmul_bool_t, BitMatrix};
pub use dense::{matmul_dense, matmul_nn, matmul_tn, norms, DenseMatrix};
pub use svd::{
    leading_triplet_general, top_singular_triplet, SingularTriplet, TripletStatus,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
