//! Bucketed relative-position attention bias.
//!
//! A key at signed distance `d = key_pos - query_pos` falls into a bucket
//! that depends only on `|d|`: distances below `buckets / 2` get their own
//! bucket, larger ones share log2-spaced buckets (`[e, 2e)`, `[2e, 4e)`, ...
//! for `e = buckets / 2`) capped at `buckets - 1`. The bucket indexes a
//! learned `buckets x heads` table.

use super::Tensor;

/// Bucket for a signed relative distance.
pub fn bucket(distance: isize, buckets: usize) -> usize {
    assert!(buckets >= 1, "need at least one bucket");
    let dist = distance.unsigned_abs();
    let exact = (buckets / 2).max(1);
    if dist < exact {
        return dist;
    }
    let log_bucket = exact + (dist / exact).ilog2() as usize;
    log_bucket.min(buckets - 1)
}

/// Row-major `q_len x k_len` bucket indices for queries starting at absolute
/// position `q_start` and keys starting at `k_start`.
pub fn bucket_matrix_at(
    q_start: usize,
    k_start: usize,
    q_len: usize,
    k_len: usize,
    buckets: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(q_len * k_len);
    for i in 0..q_len {
        for j in 0..k_len {
            let d = (k_start + j) as isize - (q_start + i) as isize;
            out.push(bucket(d, buckets));
        }
    }
    out
}

pub fn bucket_matrix(q_len: usize, k_len: usize, buckets: usize) -> Vec<usize> {
    bucket_matrix_at(0, 0, q_len, k_len, buckets)
}

/// Additive bias `heads x q_len x k_len` gathered from a `buckets x heads`
/// table.
pub fn relative_position_bias(table: &Tensor, q_len: usize, k_len: usize) -> Tensor {
    let buckets = table.rows();
    let heads = table.cols();
    let idx = bucket_matrix(q_len, k_len, buckets);
    gather_bias(table.data(), &idx, buckets, heads, q_len * k_len)
}

pub(crate) fn gather_bias(
    table: &[f64],
    idx: &[usize],
    buckets: usize,
    heads: usize,
    cells: usize,
) -> Tensor {
    debug_assert_eq!(table.len(), buckets * heads);
    let mut data = vec![0.0; heads * cells];
    for h in 0..heads {
        for (c, &b) in idx.iter().enumerate() {
            data[h * cells + c] = table[b * heads + h];
        }
    }
    Tensor::new(vec![heads, cells], data).expect("bias shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_bucket_zero() {
        let m = bucket_matrix(7, 7, 8);
        for i in 0..7 {
            assert_eq!(m[i * 7 + i], 0);
        }
    }

    #[test]
    fn translation_invariant() {
        let a = bucket_matrix_at(0, 0, 5, 6, 6);
        let b = bucket_matrix_at(3, 3, 5, 6, 6);
        assert_eq!(a, b);
        let mut table = Tensor::zeros(&[6, 2]);
        for (i, v) in table.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let bias = relative_position_bias(&table, 5, 6);
        let shifted = gather_bias(table.data(), &b, 6, 2, 30);
        assert_eq!(bias, shifted);
    }

    #[test]
    fn four_buckets_len_six_matches_enumerated_table() {
        // exact buckets for |d| in {0, 1}; [2, 4) -> 2; [4, 8) -> 3.
        let by_distance = [0usize, 1, 2, 2, 3, 3];
        let m = bucket_matrix(6, 6, 4);
        for i in 0..6 {
            for j in 0..6 {
                let d = (j as isize - i as isize).unsigned_abs();
                assert_eq!(m[i * 6 + j], by_distance[d], "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn far_distances_cap_at_last_bucket() {
        assert_eq!(bucket(1000, 8), 7);
        assert_eq!(bucket(-1000, 8), 7);
        assert_eq!(bucket(3, 1), 0);
    }
}
