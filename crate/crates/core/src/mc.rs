//! Deterministic parallel Monte Carlo plumbing.
//!
//! Work is cut into fixed-size chunks independent of the worker count, every
//! sample draws from its own substream, and chunk results are merged by a
//! pairwise tree in chunk order. Results are therefore bit-identical for any
//! thread pool size.

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 64;

/// Sum, sum of squares and an optional vector sum over a set of samples.
#[derive(Debug, Clone)]
pub(crate) struct Accumulator {
    pub count: usize,
    pub sum: f64,
    pub sum_sq: f64,
    pub vec: Vec<f64>,
}

impl Accumulator {
    pub fn new(vec_len: usize) -> Self {
        Self { count: 0, sum: 0.0, sum_sq: 0.0, vec: vec![0.0; vec_len] }
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        for (a, b) in self.vec.iter_mut().zip(&other.vec) {
            *a += b;
        }
        self
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Standard error of the mean from the sample variance.
    pub fn std_error(&self) -> f64 {
        let n = self.count as f64;
        if self.count < 2 {
            return f64::NAN;
        }
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }

    pub fn vec_mean(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.vec.iter().map(|v| v / n).collect()
    }
}

/// Pairwise reduction in input order.
pub(crate) fn tree_reduce<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Runs `f` over `0..total` in chunks of [`CHUNK`] and returns per-chunk
/// results in chunk order.
pub(crate) fn map_chunks<T, F>(total: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    let chunks = total.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(total)))
        .collect()
}

/// Parallel map over `0..total` with chunk-ordered pairwise merging.
pub(crate) fn reduce_samples<F>(total: usize, vec_len: usize, f: F) -> Accumulator
where
    F: Fn(std::ops::Range<usize>, &mut Accumulator) + Sync,
{
    let parts = map_chunks(total, |range| {
        let mut acc = Accumulator::new(vec_len);
        f(range, &mut acc);
        acc
    });
    tree_reduce(parts, Accumulator::merge).unwrap_or_else(|| Accumulator::new(vec_len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_reduce_orders() {
        let v: Vec<String> = (0..7).map(|i| i.to_string()).collect();
        assert_eq!(tree_reduce(v, |a, b| a + &b).unwrap(), "0123456");
        assert!(tree_reduce(Vec::<u8>::new(), |a, _| a).is_none());
    }

    #[test]
    fn standard_error_of_constant_is_zero() {
        let mut acc = Accumulator::new(0);
        for _ in 0..10 {
            acc.push(2.5);
        }
        assert_eq!(acc.mean(), 2.5);
        assert!(acc.std_error() < 1e-12);
    }

    #[test]
    fn pool_size_does_not_change_result() {
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                reduce_samples(1000, 0, |range, acc| {
                    for i in range {
                        acc.push((i as f64).sqrt().sin());
                    }
                })
                .sum
            })
        };
        assert_eq!(run(1).to_bits(), run(3).to_bits());
    }
}
