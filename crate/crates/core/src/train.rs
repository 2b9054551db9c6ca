//! Batched gradient accumulation. Items are split into fixed-size chunks,
//! each chunk gets its own tape, and chunk gradients are summed in chunk
//! order, so the result is the same for any number of worker threads.

use rayon::prelude::*;

use crate::net::{NetError, Seq2Seq};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHUNK: usize = 4;

/// Sum of per-item losses and its gradient with respect to every parameter
/// of `net`. `item_loss` returns `None` for items that contribute nothing.
pub fn batch_gradient<F>(net: &Seq2Seq, n_items: usize, item_loss: F) -> Result<(f64, Vec<Tensor>), NetError>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var], usize) -> Result<Option<Var>, NetError> + Sync,
{
    let chunks: Vec<(usize, usize)> = (0..n_items)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n_items)))
        .collect();
    let parts: Vec<Option<(f64, Vec<Tensor>)>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut tape = Tape::new(net.precision());
            let p = net.register(&mut tape);
            let mut total: Option<Var> = None;
            for i in lo..hi {
                if let Some(l) = item_loss(&mut tape, &p, i)? {
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
            }
            let Some(total) = total else {
                return Ok(None);
            };
            let grads = tape.backward(total)?;
            let value = tape.value(total).item();
            Ok(Some((value, p.iter().map(|&v| grads.get(&tape, v)).collect())))
        })
        .collect::<Result<_, NetError>>()?;

    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = net.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (value, g) in parts.into_iter().flatten() {
        loss += value;
        for (acc, part) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
    }
    Ok((loss, grads))
}

pub fn scale_grads(grads: &mut [Tensor], c: f64) {
    for g in grads {
        for v in g.data_mut() {
            *v *= c;
        }
    }
}

pub fn flatten(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().copied()).collect()
}

/// Minibatch order over `n` items: a fresh seeded permutation per epoch.
pub struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: crate::seeding::Rng,
}

impl Sampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            pos: n,
            rng: crate::seeding::rng(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::PolicyConfig;
    use crate::policy::decoder_input;

    fn item<'a>(
        net: &Seq2Seq,
        tape: &mut Tape<'a>,
        p: &[Var],
        i: usize,
    ) -> Result<Option<Var>, NetError> {
        let src = vec![3 + i % 4, 4, 5];
        let out = vec![4 + i % 3, 2];
        let logits = net.forward(tape, p, &src, &decoder_input(&out))?;
        let lsm = tape.log_softmax_rows(logits)?;
        Ok(Some(tape.sum(lsm)))
    }

    #[test]
    fn gradient_independent_of_workers() {
        let net = Seq2Seq::new(PolicyConfig::desk(8, 6, 6), 6, 1).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| batch_gradient(&net, 11, |t, p, i| item(&net, t, p, i)).unwrap())
        };
        let (la, ga) = run(1);
        let (lb, gb) = run(3);
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(flatten(&ga), flatten(&gb));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(10, 3);
        let mut seen = s.next_batch(4);
        seen.extend(s.next_batch(6));
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(Sampler::new(3, 1).next_batch(8).len(), 3);
    }
}
