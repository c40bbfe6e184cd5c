//! Fast Walsh–Hadamard transforms, orderings and complementary patterns.
//!
//! The transform is unnormalized: `H` has ±1 entries, so `H·H = N·I` and the
//! inverse is the forward transform divided by `N`. Natural (Sylvester)
//! ordering is the native layout; sequency orderings are permutations applied
//! on top of it.

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    /// Sylvester order, row `i` of `H` is `(-1)^popcount(i & j)`.
    Natural,
    /// 1D: rows by number of sign changes. 2D: additive sequency, see
    /// [`sequency_order_2d`].
    Sequency,
}

impl Ordering {
    pub fn as_str(self) -> &'static str {
        match self {
            Ordering::Natural => "natural",
            Ordering::Sequency => "sequency",
        }
    }
}

impl std::str::FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(Ordering::Natural),
            "sequency" | "2d-sequency" => Ok(Ordering::Sequency),
            other => Err(Error::invalid(format!("unknown ordering `{other}`"))),
        }
    }
}

/// Shape and coefficient ordering of a Hadamard transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HadamardSpec {
    n: usize,
    dims: Dims,
    ordering: Ordering,
}

impl HadamardSpec {
    pub fn new(n: usize, dims: Dims, ordering: Ordering) -> Result<Self> {
        if !n.is_power_of_two() {
            return Err(Error::invalid(format!("side length {n} is not a power of two")));
        }
        Ok(HadamardSpec { n, dims, ordering })
    }

    /// Natural-order 2D transform of an `n × n` image.
    pub fn image(n: usize) -> Result<Self> {
        Self::new(n, Dims::Two, Ordering::Natural)
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn ordering(&self) -> Ordering {
        self.ordering
    }

    pub fn with_ordering(self, ordering: Ordering) -> Self {
        HadamardSpec { ordering, ..self }
    }

    /// Total coefficient count `N`.
    pub fn len(&self) -> usize {
        match self.dims {
            Dims::One => self.n,
            Dims::Two => self.n * self.n,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Natural-order index of each coefficient position in this ordering.
    pub fn order(&self) -> Vec<usize> {
        match (self.dims, self.ordering) {
            (_, Ordering::Natural) => (0..self.len()).collect(),
            (Dims::One, Ordering::Sequency) => sequency_permutation(self.n),
            (Dims::Two, Ordering::Sequency) => sequency_order_2d(self.n),
        }
    }
}

/// In-place natural-order transform of a power-of-two length slice.
pub fn fwht_in_place(data: &mut [f64]) {
    let len = data.len();
    debug_assert!(len.is_power_of_two());
    let mut half = 1;
    while half < len {
        for block in data.chunks_exact_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        half *= 2;
    }
}

/// In-place separable transform of a row-major `n × n` field: every row, then
/// every column.
pub fn fwht2d_in_place(data: &mut [f64], n: usize) {
    debug_assert_eq!(data.len(), n * n);
    for row in data.chunks_exact_mut(n) {
        fwht_in_place(row);
    }
    // Column pass: the same butterfly with whole rows as the elements.
    let mut half = 1;
    while half < n {
        for block in data.chunks_exact_mut(2 * half * n) {
            let (lo, hi) = block.split_at_mut(half * n);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        half *= 2;
    }
}

fn transform_natural(v: &mut [f64], spec: &HadamardSpec) {
    match spec.dims {
        Dims::One => fwht_in_place(v),
        Dims::Two => fwht2d_in_place(v, spec.n),
    }
}

/// `H·v` with coefficients laid out in the spec's ordering.
pub fn wht_forward(v: &[f64], spec: &HadamardSpec) -> Result<Vec<f64>> {
    check_len(spec.len(), v.len())?;
    let mut out = v.to_vec();
    transform_natural(&mut out, spec);
    if spec.ordering == Ordering::Natural {
        return Ok(out);
    }
    Ok(spec.order().into_iter().map(|i| out[i]).collect())
}

/// Inverse of [`wht_forward`]: `H·c / N` after undoing the ordering.
pub fn wht_inverse(c: &[f64], spec: &HadamardSpec) -> Result<Vec<f64>> {
    check_len(spec.len(), c.len())?;
    let mut natural = match spec.ordering {
        Ordering::Natural => c.to_vec(),
        Ordering::Sequency => {
            let mut out = vec![0.0; c.len()];
            for (k, i) in spec.order().into_iter().enumerate() {
                out[i] = c[k];
            }
            out
        }
    };
    transform_natural(&mut natural, spec);
    let scale = 1.0 / spec.len() as f64;
    natural.iter_mut().for_each(|x| *x *= scale);
    Ok(natural)
}

fn reverse_bits(value: usize, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        value.reverse_bits() >> (usize::BITS - bits)
    }
}

/// Permutation `p` such that natural row `p[k]` has exactly `k` sign changes.
///
/// `p[k] = bitreverse(gray(k))`.
pub fn sequency_permutation(n: usize) -> Vec<usize> {
    assert!(n.is_power_of_two(), "n must be a power of two");
    let bits = n.trailing_zeros();
    (0..n).map(|k| reverse_bits(k ^ (k >> 1), bits)).collect()
}

/// Sequency (sign-change count) of every natural-order row.
pub fn sequency_of_rows(n: usize) -> Vec<usize> {
    let perm = sequency_permutation(n);
    let mut seq = vec![0; n];
    for (k, &row) in perm.iter().enumerate() {
        seq[row] = k;
    }
    seq
}

/// Flat natural indices `r * n + c` of an `n × n` coefficient grid, sorted in
/// 2D-sequency order: by `su + sv`, then `max(su, sv)`, then `su`, where
/// `su`, `sv` are the 1D sequencies of row `r` and column `c`.
pub fn sequency_order_2d(n: usize) -> Vec<usize> {
    let seq = sequency_of_rows(n);
    let mut idx: Vec<usize> = (0..n * n).collect();
    idx.sort_by_key(|&i| {
        let (su, sv) = (seq[i / n], seq[i % n]);
        (su + sv, su.max(sv), su)
    });
    idx
}

/// Position of each natural flat index in [`sequency_order_2d`].
pub fn sequency_rank_2d(n: usize) -> Vec<usize> {
    let order = sequency_order_2d(n);
    let mut rank = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        rank[i] = k;
    }
    rank
}

fn natural_entry(row: usize, col: usize) -> i8 {
    if (row & col).count_ones() % 2 == 0 {
        1
    } else {
        -1
    }
}

/// Row `index` (in the spec's ordering) of `H` as ±1 entries.
pub fn hadamard_row(index: usize, spec: &HadamardSpec) -> Result<Vec<i8>> {
    if index >= spec.len() {
        return Err(Error::invalid(format!(
            "row index {index} out of range for {} coefficients",
            spec.len()
        )));
    }
    let natural = match spec.ordering {
        Ordering::Natural => index,
        Ordering::Sequency => spec.order()[index],
    };
    let n = spec.n;
    Ok(match spec.dims {
        Dims::One => (0..n).map(|j| natural_entry(natural, j)).collect(),
        Dims::Two => {
            let (u, v) = (natural / n, natural % n);
            (0..n * n)
                .map(|p| natural_entry(u, p / n) * natural_entry(v, p % n))
                .collect()
        }
    })
}

/// Binary illumination patterns `(H⁺ᵢ, H⁻ᵢ) = ((1 + Hᵢ)/2, (1 − Hᵢ)/2)`.
pub fn complementary_patterns(index: usize, spec: &HadamardSpec) -> Result<(Vec<u8>, Vec<u8>)> {
    let row = hadamard_row(index, spec)?;
    let plus = row.iter().map(|&h| u8::from(h > 0)).collect();
    let minus = row.iter().map(|&h| u8::from(h < 0)).collect();
    Ok((plus, minus))
}

/// Number of sign changes along a ±1 pattern.
pub fn sign_changes(row: &[i8]) -> usize {
    row.windows(2).filter(|w| w[0] != w[1]).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense Sylvester Hadamard matrix, built by recursion `[[H, H], [H, -H]]`.
    fn dense_sylvester(n: usize) -> Vec<Vec<f64>> {
        let mut h = vec![vec![1.0]];
        while h.len() < n {
            let m = h.len();
            let mut next = vec![vec![0.0; 2 * m]; 2 * m];
            for i in 0..m {
                for j in 0..m {
                    next[i][j] = h[i][j];
                    next[i][j + m] = h[i][j];
                    next[i + m][j] = h[i][j];
                    next[i + m][j + m] = -h[i][j];
                }
            }
            h = next;
        }
        h
    }

    fn dense_apply(h: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        h.iter()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn random_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn two_point_transform() {
        let spec = HadamardSpec::new(2, Dims::One, Ordering::Natural).unwrap();
        assert_eq!(wht_forward(&[1.0, 0.0], &spec).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn constant_maps_to_dc() {
        let spec = HadamardSpec::new(16, Dims::One, Ordering::Natural).unwrap();
        let out = wht_forward(&[2.5; 16], &spec).unwrap();
        assert_eq!(out[0], 40.0);
        assert!(out[1..].iter().all(|&c| c == 0.0));
    }

    #[test]
    fn matches_dense_oracle_n8() {
        let h = dense_sylvester(8);
        let v = random_vec(8, 3);
        let spec = HadamardSpec::new(8, Dims::One, Ordering::Natural).unwrap();
        let fast = wht_forward(&v, &spec).unwrap();
        for (a, b) in fast.iter().zip(dense_apply(&h, &v)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn inverse_roundtrips() {
        let spec = HadamardSpec::new(64, Dims::One, Ordering::Natural).unwrap();
        let v = random_vec(64, 11);
        let back = wht_inverse(&wht_forward(&v, &spec).unwrap(), &spec).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }

        let mut dc = vec![0.0; 64];
        dc[0] = 64.0;
        assert!(wht_inverse(&dc, &spec).unwrap().iter().all(|&x| x == 1.0));

        for ordering in [Ordering::Natural, Ordering::Sequency] {
            let spec2 = HadamardSpec::new(16, Dims::Two, ordering).unwrap();
            let img = random_vec(256, 12);
            let back = wht_inverse(&wht_forward(&img, &spec2).unwrap(), &spec2).unwrap();
            for (a, b) in img.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(HadamardSpec::new(12, Dims::One, Ordering::Natural).is_err());
        let spec = HadamardSpec::new(8, Dims::One, Ordering::Natural).unwrap();
        assert!(matches!(
            wht_forward(&[0.0; 7], &spec),
            Err(Error::LengthMismatch { expected: 8, actual: 7 })
        ));
        assert!(wht_inverse(&[0.0; 9], &spec).is_err());
        assert!(complementary_patterns(8, &spec).is_err());
    }

    #[test]
    fn sequency_permutation_small_cases() {
        assert_eq!(sequency_permutation(2), vec![0, 1]);
        assert_eq!(sequency_permutation(4), vec![0, 2, 3, 1]);
        let spec = HadamardSpec::new(4, Dims::One, Ordering::Natural).unwrap();
        let counts: Vec<usize> = (0..4)
            .map(|i| sign_changes(&hadamard_row(i, &spec).unwrap()))
            .collect();
        assert_eq!(counts, vec![0, 3, 1, 2]);
    }

    #[test]
    fn sequency_permutation_exhaustive() {
        let mut n = 1;
        while n <= 64 {
            let spec = HadamardSpec::new(n, Dims::One, Ordering::Natural).unwrap();
            for (k, &row) in sequency_permutation(n).iter().enumerate() {
                assert_eq!(sign_changes(&hadamard_row(row, &spec).unwrap()), k, "n={n}");
            }
            n *= 2;
        }
    }

    #[test]
    fn sequency_forward_is_permuted_natural() {
        let v = random_vec(32, 5);
        let nat = wht_forward(&v, &HadamardSpec::new(32, Dims::One, Ordering::Natural).unwrap()).unwrap();
        let seq_spec = HadamardSpec::new(32, Dims::One, Ordering::Sequency).unwrap();
        let seq = wht_forward(&v, &seq_spec).unwrap();
        for (k, &row) in sequency_permutation(32).iter().enumerate() {
            assert_eq!(seq[k], nat[row]);
            let dense_row = hadamard_row(k, &seq_spec).unwrap();
            let direct: f64 = dense_row.iter().zip(&v).map(|(&h, x)| h as f64 * x).sum();
            assert!((direct - seq[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_dimensional_is_rows_then_columns() {
        let n = 8;
        let img = random_vec(n * n, 9);
        let spec = HadamardSpec::image(n).unwrap();
        let fast = wht_forward(&img, &spec).unwrap();

        let mut manual = img.clone();
        for r in 0..n {
            fwht_in_place(&mut manual[r * n..(r + 1) * n]);
        }
        for c in 0..n {
            let mut col: Vec<f64> = (0..n).map(|r| manual[r * n + c]).collect();
            fwht_in_place(&mut col);
            for r in 0..n {
                manual[r * n + c] = col[r];
            }
        }
        assert_eq!(fast, manual);

        // and against the explicit 2D patterns
        for i in [0, 5, 17, 63] {
            let row = hadamard_row(i, &spec).unwrap();
            let direct: f64 = row.iter().zip(&img).map(|(&h, x)| h as f64 * x).sum();
            assert!((direct - fast[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sequency_order_2d_starts_at_dc_and_is_sorted() {
        let n = 4;
        let order = sequency_order_2d(n);
        let seq = sequency_of_rows(n);
        assert_eq!(order[0], 0);
        let keys: Vec<(usize, usize, usize)> = order
            .iter()
            .map(|&i| {
                let (su, sv) = (seq[i / n], seq[i % n]);
                (su + sv, su.max(sv), su)
            })
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        // the four lowest: (0,0), then the two (0,1)/(1,0), then (1,1)
        let lowest: Vec<(usize, usize)> = order[..4].iter().map(|&i| (seq[i / n], seq[i % n])).collect();
        assert_eq!(lowest, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let rank = sequency_rank_2d(n);
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(rank[i], k);
        }
    }

    #[test]
    fn complementary_pattern_identities() {
        let spec = HadamardSpec::new(2, Dims::One, Ordering::Natural).unwrap();
        assert_eq!(complementary_patterns(1, &spec).unwrap(), (vec![1, 0], vec![0, 1]));

        let spec = HadamardSpec::image(8).unwrap();
        let (plus, minus) = complementary_patterns(0, &spec).unwrap();
        assert!(plus.iter().all(|&p| p == 1) && minus.iter().all(|&m| m == 0));
        for i in 0..spec.len() {
            let row = hadamard_row(i, &spec).unwrap();
            let (plus, minus) = complementary_patterns(i, &spec).unwrap();
            for j in 0..row.len() {
                assert_eq!(plus[j] as i8 - minus[j] as i8, row[j]);
                assert_eq!(plus[j] + minus[j], 1);
                assert_eq!(plus[j] * minus[j], 0);
            }
        }
    }

    #[test]
    fn parseval() {
        let spec = HadamardSpec::image(16).unwrap();
        let v = random_vec(256, 21);
        let out = wht_forward(&v, &spec).unwrap();
        let lhs: f64 = out.iter().map(|x| x * x).sum();
        let rhs: f64 = 256.0 * v.iter().map(|x| x * x).sum::<f64>();
        assert!((lhs - rhs).abs() <= 1e-10 * rhs);
    }
}
