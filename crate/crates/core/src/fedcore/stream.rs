use crate::rng::{perturbation_seed, CounterRng};
use crate::tensor::{Tensor, TensorMap};

/// The perturbations one client draws during one round.
///
/// Perturbation `k` of local iteration `i` is the `k`-th block of the
/// SplitMix64 stream keyed by `perturbation_seed(base, round, client, i)`.
/// A block covers the trainable tensors in entry order, element by element,
/// and starts at word offset `k · 2⌈n/2⌉` where `n` is the number of
/// perturbed scalars, so any block can be regenerated on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbationStream {
    pub base_seed: u64,
    pub round: u64,
    pub client: u64,
    zero: bool,
}

impl PerturbationStream {
    pub fn new(base_seed: u64, round: u64, client: u64) -> Self {
        Self {
            base_seed,
            round,
            client,
            zero: false,
        }
    }

    /// A stream whose every perturbation is identically zero (test hook).
    pub fn zeroed(mut self) -> Self {
        self.zero = true;
        self
    }

    pub fn seed(&self, iteration: u64) -> u64 {
        perturbation_seed(self.base_seed, self.round, self.client, iteration)
    }

    fn block_rng(&self, iteration: u64, k: usize, numel: usize) -> CounterRng {
        let words = 2 * numel.div_ceil(2) as u64;
        CounterRng::with_counter(self.seed(iteration), k as u64 * words)
    }

    /// Perturbation `k` shaped like `like`.
    pub fn tangent(&self, iteration: u64, k: usize, like: &TensorMap) -> TensorMap {
        let numel = like.values().map(Tensor::numel).sum();
        let mut rng = self.block_rng(iteration, k, numel);
        like.iter()
            .map(|(name, t)| {
                let mut v = Tensor::zeros(t.shape());
                if !self.zero {
                    rng.fill_normal(v.data_mut());
                }
                (name.clone(), v)
            })
            .collect()
    }

    /// Perturbations `0..k` of one iteration.
    pub fn tangents(&self, iteration: u64, k: usize, like: &TensorMap) -> Vec<TensorMap> {
        (0..k).map(|j| self.tangent(iteration, j, like)).collect()
    }

    /// Regenerates perturbation `k` one tensor at a time into a scratch
    /// buffer; `f(p, v)` receives the index into `sizes` and that tensor's
    /// values. Produces the same numbers as [`tangent`](Self::tangent).
    pub fn for_each_tensor(&self, iteration: u64, k: usize, sizes: &[usize], mut f: impl FnMut(usize, &[f64])) {
        let numel = sizes.iter().sum();
        let mut rng = self.block_rng(iteration, k, numel);
        let mut scratch = vec![0.0; sizes.iter().copied().max().unwrap_or(0)];
        for (p, &n) in sizes.iter().enumerate() {
            let buf = &mut scratch[..n];
            if self.zero {
                buf.fill(0.0);
            } else {
                rng.fill_normal(buf);
            }
            f(p, buf);
        }
    }
}
