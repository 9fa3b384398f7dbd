//! Work-efficient (Blelloch) associative scans.
//!
//! The reduction tree is fixed: inputs are padded with identity elements to
//! the next power of two and combined level by level. Every level may be
//! split across threads, but the set of products evaluated never depends on
//! the worker count, so results are bit-identical for any pool size.

use rayon::prelude::*;

use crate::error::{HyprError, Result};
use crate::scalar::Scalar;
use crate::tensor::mat::{MatK, ScanPair, VecK};

/// Sequences shorter than this are scanned on the calling thread.
const PAR_MIN_LEN: usize = 1024;

/// An associative (not necessarily commutative) binary operator.
pub trait Monoid: Copy + Send + Sync {
    fn op(&self, rhs: &Self) -> Self;
}

impl<T: Scalar> Monoid for MatK<T> {
    #[inline(always)]
    fn op(&self, rhs: &Self) -> Self {
        self.mul(rhs)
    }
}

impl<T: Scalar> Monoid for ScanPair<T> {
    #[inline(always)]
    fn op(&self, rhs: &Self) -> Self {
        self.combine(rhs)
    }
}

/// Workspace length needed to scan `n` elements.
pub fn tree_len(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Inclusive scan `out[j] = item(0) • item(1) • … • item(j)`.
///
/// `tree` must hold at least `tree_len(n)` elements and `out` exactly `n`.
/// Items are produced on demand so callers can scan views without copying.
pub fn inclusive_scan_with<M: Monoid>(
    n: usize,
    identity: M,
    item: impl Fn(usize) -> M + Sync,
    tree: &mut [M],
    out: &mut [M],
    parallel: bool,
) {
    assert_eq!(out.len(), n);
    if n == 0 {
        return;
    }
    let len = tree_len(n);
    let tree = &mut tree[..len];
    for (j, slot) in tree.iter_mut().enumerate() {
        *slot = if j < n { item(j) } else { identity };
    }
    let parallel = parallel && n >= PAR_MIN_LEN;

    // Up-sweep: the last slot of each block of width 2s accumulates the block.
    let mut s = 1;
    while s < len {
        let w = 2 * s;
        let up = |blk: &mut [M]| blk[w - 1] = blk[s - 1].op(&blk[w - 1]);
        if parallel && len / w >= 2 {
            tree.par_chunks_mut(w).for_each(up);
        } else {
            tree.chunks_mut(w).for_each(up);
        }
        s = w;
    }

    // Down-sweep to an exclusive scan. The right slot holds the prefix of
    // everything before the block; the left slot holds the left half's sum.
    tree[len - 1] = identity;
    let mut w = len;
    while w >= 2 {
        let h = w / 2;
        let down = |blk: &mut [M]| {
            let left_sum = blk[h - 1];
            let prefix = blk[w - 1];
            blk[h - 1] = prefix;
            blk[w - 1] = prefix.op(&left_sum);
        };
        if parallel && len / w >= 2 {
            tree.par_chunks_mut(w).for_each(down);
        } else {
            tree.chunks_mut(w).for_each(down);
        }
        w = h;
    }

    let finish = |(j, o): (usize, &mut M)| *o = tree[j].op(&item(j));
    if parallel {
        let tree = &*tree;
        out.par_iter_mut()
            .enumerate()
            .for_each(|(j, o)| *o = tree[j].op(&item(j)));
    } else {
        out.iter_mut().enumerate().for_each(finish);
    }
}

/// Allocating inclusive scan over a slice.
pub fn inclusive_scan<M: Monoid>(items: &[M], identity: M) -> Vec<M> {
    let n = items.len();
    let mut tree = vec![identity; tree_len(n)];
    let mut out = vec![identity; n];
    inclusive_scan_with(n, identity, |j| items[j], &mut tree, &mut out, true);
    out
}

fn common_k<T: Scalar>(a_seq: &[MatK<T>]) -> Result<Option<usize>> {
    let Some(first) = a_seq.first() else {
        return Ok(None);
    };
    let k = first.k();
    if let Some(bad) = a_seq.iter().position(|a| a.k() != k) {
        return Err(HyprError::dim(format!(
            "transition {bad} has k={} but the sequence started with k={k}",
            a_seq[bad].k()
        )));
    }
    Ok(Some(k))
}

/// Cumulative transitions `[φ^{λ:1}, …, φ^{λ:λ}]` with
/// `φ^{λ:t} = A^λ · A^{λ-1} ⋯ A^t` for `a_seq = [A^1, …, A^λ]`.
pub fn scan_matprod_suffix<T: Scalar>(a_seq: &[MatK<T>]) -> Result<Vec<MatK<T>>> {
    let Some(k) = common_k(a_seq)? else {
        return Ok(Vec::new());
    };
    let n = a_seq.len();
    let identity = MatK::identity(k);
    let mut tree = vec![identity; tree_len(n)];
    let mut prefix = vec![identity; n];
    // Prefix j of the reversed sequence is A^λ ⋯ A^{λ-j}.
    inclusive_scan_with(
        n,
        identity,
        |j| a_seq[n - 1 - j],
        &mut tree,
        &mut prefix,
        true,
    );
    prefix.reverse();
    Ok(prefix)
}

fn check_pairs<T: Scalar>(a_seq: &[MatK<T>], l_seq: &[VecK<T>]) -> Result<Option<usize>> {
    if a_seq.len() != l_seq.len() {
        return Err(HyprError::dim(format!(
            "{} transitions but {} loss gradients",
            a_seq.len(),
            l_seq.len()
        )));
    }
    let k = common_k(a_seq)?;
    if let Some(k) = k {
        if let Some(bad) = l_seq.iter().position(|l| l.k() != k) {
            return Err(HyprError::dim(format!(
                "loss gradient {bad} has length {} but transitions are {k}x{k}",
                l_seq[bad].k()
            )));
        }
    }
    Ok(k)
}

/// Reverse scan over the tuples `(A^{t+1}, ℓ^t)`, `t = λ … 1`, with
/// `A^{λ+1} = I`.
///
/// Writes `out[t-1] = (φ^{λ:t+1}, q^t)` for `t = 1..=λ`, where
/// `q^t = q^{t+1} A^{t+1} + ℓ^t` and `φ^{λ:λ+1} = I`. `tree` needs
/// `tree_len(λ)` slots. Unchecked: callers guarantee consistent k.
pub fn reverse_scan_pairs_into<T: Scalar>(
    a_seq: &[MatK<T>],
    l_seq: &[VecK<T>],
    tree: &mut [ScanPair<T>],
    out: &mut [ScanPair<T>],
    parallel: bool,
) {
    let n = a_seq.len();
    if n == 0 {
        return;
    }
    let k = a_seq[0].k();
    let identity = ScanPair::identity(k);
    // Scan element j is p^{λ-j}; the resulting prefix j belongs to t = λ - j.
    let item = |j: usize| {
        let t = n - j;
        ScanPair {
            m: if t == n { MatK::identity(k) } else { a_seq[t] },
            v: l_seq[t - 1],
        }
    };
    inclusive_scan_with(n, identity, item, tree, out, parallel);
    out.reverse();
}

/// Allocating, checked form of [`reverse_scan_pairs_into`].
pub fn reverse_scan_pairs<T: Scalar>(
    a_seq: &[MatK<T>],
    l_seq: &[VecK<T>],
) -> Result<Vec<ScanPair<T>>> {
    let Some(k) = check_pairs(a_seq, l_seq)? else {
        return Ok(Vec::new());
    };
    let n = a_seq.len();
    let identity = ScanPair::identity(k);
    let mut tree = vec![identity; tree_len(n)];
    let mut out = vec![identity; n];
    reverse_scan_pairs_into(a_seq, l_seq, &mut tree, &mut out, true);
    Ok(out)
}

/// Backward coefficients `[q^0, q^1, …, q^λ]` for `a_seq = [A^1 … A^λ]`
/// and `l_seq = [ℓ^1 … ℓ^λ]`, with `q^λ = ℓ^λ`, `q^t = q^{t+1} A^{t+1} + ℓ^t`
/// and `q^0 = q^1 A^1` (ℓ^0 = 0).
pub fn reverse_scan_q<T: Scalar>(a_seq: &[MatK<T>], l_seq: &[VecK<T>]) -> Result<Vec<VecK<T>>> {
    let pairs = reverse_scan_pairs(a_seq, l_seq)?;
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut q = Vec::with_capacity(pairs.len() + 1);
    q.push(pairs[0].v.mul_mat(&a_seq[0]));
    q.extend(pairs.iter().map(|p| p.v));
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> MatK<f64> {
        let v: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-scale..scale)).collect();
        MatK::from_rows(k, &v).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, k: usize) -> VecK<f64> {
        let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        VecK::from_slice(&v).unwrap()
    }

    // Sequential right-to-left products, independent of the tree.
    fn suffix_oracle(a: &[MatK<f64>]) -> Vec<MatK<f64>> {
        let n = a.len();
        let mut out = vec![MatK::identity(a[0].k()); n];
        let mut acc = MatK::identity(a[0].k());
        for t in (0..n).rev() {
            // φ^{λ:t} = φ^{λ:t+1} · A^t
            acc = acc.mul(&a[t]);
            out[t] = acc;
        }
        out
    }

    fn q_oracle(a: &[MatK<f64>], l: &[VecK<f64>]) -> Vec<VecK<f64>> {
        let n = a.len();
        let mut q = vec![VecK::zeros(a[0].k()); n + 1];
        q[n] = l[n - 1];
        for t in (1..n).rev() {
            q[t] = q[t + 1].mul_mat(&a[t]).add(&l[t - 1]);
        }
        q[0] = q[1].mul_mat(&a[0]);
        q
    }

    #[test]
    fn identity_sequence_gives_identities() {
        let a = vec![MatK::<f64>::identity(3); 4];
        for phi in scan_matprod_suffix(&a).unwrap() {
            assert_eq!(phi, MatK::identity(3));
        }
    }

    #[test]
    fn scalar_suffix_products() {
        let a: Vec<_> = (0..3).map(|_| MatK::scaled_identity(1, 0.5)).collect();
        let phi = scan_matprod_suffix(&a).unwrap();
        let got: Vec<f64> = phi.iter().map(|m| m.get(0, 0)).collect();
        assert_eq!(got, vec![0.125, 0.25, 0.5]);
    }

    #[test]
    fn empty_input_is_empty_output() {
        assert!(scan_matprod_suffix::<f64>(&[]).unwrap().is_empty());
        assert!(reverse_scan_q::<f64>(&[], &[]).unwrap().is_empty());
    }

    #[test]
    fn random_suffix_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<_> = (0..16).map(|_| rand_mat(&mut rng, 2, 1.0)).collect();
        let got = scan_matprod_suffix(&a).unwrap();
        let want = suffix_oracle(&a);
        for (g, w) in got.iter().zip(&want) {
            let scale = (0..2)
                .flat_map(|r| (0..2).map(move |c| (r, c)))
                .map(|(r, c)| w.get(r, c).abs())
                .fold(1e-300, f64::max);
            assert!(g.max_abs_diff(w) / scale <= 1e-12);
        }
    }

    #[test]
    fn zero_transitions_give_plain_losses() {
        let l: Vec<_> = (1..=5)
            .map(|i| VecK::from_slice(&[i as f64, -(i as f64)]).unwrap())
            .collect();
        let a = vec![MatK::zeros(2); 5];
        let q = reverse_scan_q(&a, &l).unwrap();
        assert_eq!(q[0], VecK::zeros(2));
        for t in 1..=5 {
            assert_eq!(q[t], l[t - 1]);
        }
    }

    #[test]
    fn hand_recursion_two_steps() {
        let a = vec![MatK::scaled_identity(1, 0.5); 2];
        let l = vec![VecK::from_slice(&[1.0]).unwrap(); 2];
        let q: Vec<f64> = reverse_scan_q(&a, &l)
            .unwrap()
            .iter()
            .map(|v| v.get(0))
            .collect();
        assert_eq!(q, vec![0.75, 1.5, 1.0]);
    }

    #[test]
    fn random_q_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<_> = (0..32).map(|_| rand_mat(&mut rng, 3, 0.6)).collect();
        let l: Vec<_> = (0..32).map(|_| rand_vec(&mut rng, 3)).collect();
        let got = reverse_scan_q(&a, &l).unwrap();
        let want = q_oracle(&a, &l);
        for (g, w) in got.iter().zip(&want) {
            let scale = w.as_slice().iter().fold(1e-300_f64, |m, v| m.max(v.abs()));
            assert!(g.max_abs_diff(w) / scale <= 1e-12, "{g:?} vs {w:?}");
        }
    }

    #[test]
    fn pairs_carry_shifted_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<_> = (0..9).map(|_| rand_mat(&mut rng, 2, 1.0)).collect();
        let l: Vec<_> = (0..9).map(|_| rand_vec(&mut rng, 2)).collect();
        let pairs = reverse_scan_pairs(&a, &l).unwrap();
        let phi = suffix_oracle(&a);
        for t in 1..=9 {
            let want = if t == 9 { MatK::identity(2) } else { phi[t] };
            assert!(pairs[t - 1].m.max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let a = vec![MatK::<f64>::identity(2); 3];
        let l = vec![VecK::zeros(2); 2];
        assert!(reverse_scan_q(&a, &l).is_err());
        let l = vec![VecK::zeros(3); 3];
        assert!(reverse_scan_q(&a, &l).is_err());
        let mixed = vec![MatK::<f64>::identity(2), MatK::identity(3)];
        assert!(scan_matprod_suffix(&mixed).is_err());
    }

    #[test]
    fn parallel_levels_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 3000;
        let items: Vec<_> = (0..n)
            .map(|_| ScanPair {
                m: rand_mat(&mut rng, 3, 0.7),
                v: rand_vec(&mut rng, 3),
            })
            .collect();
        let id = ScanPair::identity(3);
        let mut tree = vec![id; tree_len(n)];
        let mut seq = vec![id; n];
        inclusive_scan_with(n, id, |j| items[j], &mut tree, &mut seq, false);
        for workers in [1, 2, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap();
            let par = pool.install(|| inclusive_scan(&items, id));
            assert_eq!(par, seq);
        }
    }
}
