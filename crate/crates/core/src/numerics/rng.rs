use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Distributions available to [`RandomStream::draw`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    /// Uniform on `[0, 1)`.
    Uniform,
    StandardNormal,
    /// `1` with probability `p`, else `0`.
    Bernoulli(f64),
}

/// Seeded, counter-based random stream.
///
/// Backed by ChaCha8, so a `(seed, stream)` pair fixes the whole sequence on
/// every platform. [`RandomStream::substream`] derives independent streams
/// keyed by an integer, which keeps per-batch draws reproducible regardless
/// of how many values earlier batches consumed.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this one's identity and `key`; does
    /// not advance `self`.
    pub fn substream(&self, key: u64) -> RandomStream {
        Self::with_stream(self.seed, mix(self.stream ^ mix(key)))
    }

    pub fn draw(&mut self, dist: Distribution, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = match dist {
            Distribution::Uniform => (0..n).map(|_| self.uniform()).collect(),
            Distribution::StandardNormal => (0..n).map(|_| self.normal()).collect(),
            Distribution::Bernoulli(p) => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(contract(format!("bernoulli p = {p} outside [0, 1]")));
                }
                (0..n).map(|_| if self.uniform() < p { 1.0 } else { 0.0 }).collect()
            }
        };
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// `k` distinct values from `0..n`, in draw order.
    pub fn distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_zero_is_all_zeros() {
        let mut s = RandomStream::new(1);
        let t = s.draw(Distribution::Bernoulli(0.0), &[10]).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_draws() {
        let a = RandomStream::new(42).draw(Distribution::StandardNormal, &[3, 4]).unwrap();
        let b = RandomStream::new(42).draw(Distribution::StandardNormal, &[3, 4]).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = RandomStream::new(43).draw(Distribution::StandardNormal, &[3, 4]).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn bernoulli_half_monte_carlo() {
        let mut s = RandomStream::new(7);
        let t = s.draw(Distribution::Bernoulli(0.5), &[100_000]).unwrap();
        let mean = t.sum() / t.len() as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
    }

    #[test]
    fn invalid_p_rejected() {
        let mut s = RandomStream::new(0);
        assert!(s.draw(Distribution::Bernoulli(1.5), &[2]).is_err());
        assert!(s.draw(Distribution::Bernoulli(-0.1), &[2]).is_err());
    }

    #[test]
    fn substreams_are_independent_of_parent_position() {
        let mut parent = RandomStream::new(9);
        let before = parent.substream(3).uniform();
        parent.uniform();
        parent.uniform();
        assert_eq!(before, parent.substream(3).uniform());
        assert_ne!(parent.substream(3).uniform(), parent.substream(4).uniform());
    }
}
