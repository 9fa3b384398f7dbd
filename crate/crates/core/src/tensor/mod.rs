//! Small dense blocks, associative scans and numerical differentiation.

pub mod fd;
pub mod mat;
pub mod scan;

pub use fd::finite_difference_jacobian;
pub use mat::{matk_mul, MatK, ScanPair, VecK, MAX_K};
pub use scan::{
    inclusive_scan, inclusive_scan_with, reverse_scan_pairs, reverse_scan_pairs_into,
    reverse_scan_q, scan_matprod_suffix, tree_len, Monoid,
};
