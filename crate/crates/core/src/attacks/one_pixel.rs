use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{chunk_rng, AttackResult, Oracle};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnePixelConfig {
    pub pixels: usize,
    pub population: usize,
    pub generations: usize,
    pub de_crossover: f64,
    pub de_factor: f64,
    pub seed: u64,
}

impl Default for OnePixelConfig {
    fn default() -> Self {
        Self {
            pixels: 1,
            population: 40,
            generations: 30,
            de_crossover: 0.7,
            de_factor: 0.5,
            seed: 0,
        }
    }
}

/// `(channels, height, width)` of one sample; flat inputs count as a single
/// row of one-channel pixels.
fn image_dims(sample_shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *sample_shape {
        [c, h, w] => Ok((c, h, w)),
        [w] => Ok((1, 1, w)),
        _ => Err(Error::invalid(
            "one_pixel",
            format!("expected [C, H, W] samples, got {sample_shape:?}"),
        )),
    }
}

/// Candidate genes per pixel: row, column, then one value per channel.
struct Layout {
    c: usize,
    h: usize,
    w: usize,
    pixels: usize,
}

impl Layout {
    fn genes(&self) -> usize {
        self.pixels * (2 + self.c)
    }

    fn bounds(&self, gene: usize) -> (f64, f64) {
        match gene % (2 + self.c) {
            0 => (0.0, self.h as f64),
            1 => (0.0, self.w as f64),
            _ => (-1.0, 1.0),
        }
    }

    fn random(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.genes())
            .map(|g| {
                let (lo, hi) = self.bounds(g);
                rng.random_range(lo..hi)
            })
            .collect()
    }

    fn clip(&self, genes: &mut [f64]) {
        for (g, v) in genes.iter_mut().enumerate() {
            let (lo, hi) = self.bounds(g);
            // Coordinates use a half-open range.
            let hi = if g % (2 + self.c) < 2 { hi - 1e-9 } else { hi };
            *v = v.clamp(lo, hi);
        }
    }

    fn apply<S: Scalar>(&self, image: &[S], genes: &[f64]) -> Vec<S> {
        let mut out = image.to_vec();
        for p in genes.chunks(2 + self.c) {
            let y = (p[0].floor() as usize).min(self.h - 1);
            let x = (p[1].floor() as usize).min(self.w - 1);
            for ch in 0..self.c {
                out[(ch * self.h + y) * self.w + x] = S::of(p[2 + ch]);
            }
        }
        out
    }
}

/// Margin of the true class over the best other class; below zero means
/// misclassified.
fn margins<S: Scalar>(logits: &Tensor<S>, label: usize) -> Vec<f64> {
    let c = logits.row_len();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let other = (0..c)
                .filter(|&j| j != label)
                .map(|j| row[j].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            row[label].f64() - other
        })
        .collect()
}

/// Differential evolution (DE/rand/1/bin) over pixel positions and values.
/// Black-box: only forward passes are used. Each sample draws from its own
/// random stream keyed by `first + row`, so results do not depend on batching.
pub fn one_pixel<S: Scalar>(
    oracle: &Oracle<'_, S>,
    x: &Tensor<S>,
    labels: &[usize],
    cfg: &OnePixelConfig,
    first: usize,
) -> Result<AttackResult<S>> {
    if cfg.pixels == 0 || cfg.population == 0 {
        return Err(Error::invalid("one_pixel", "pixels and population must be at least 1"));
    }
    let (c, h, w) = image_dims(&x.shape()[1..])?;
    let layout = Layout {
        c,
        h,
        w,
        pixels: cfg.pixels,
    };
    let n = x.row_len();
    let mut sample_shape = x.shape().to_vec();
    let mut adv = Vec::with_capacity(x.numel());
    let mut iterations = Vec::with_capacity(x.rows());

    let mut evaluate = |image: &[S], pop: &[Vec<f64>], label: usize| -> Result<(Vec<f64>, Vec<bool>)> {
        sample_shape[0] = pop.len();
        let batch: Vec<S> = pop.iter().flat_map(|g| layout.apply(image, g)).collect();
        let logits = oracle.logits(&Tensor::new(sample_shape.clone(), batch)?)?;
        let fooled = logits.argmax_rows().iter().map(|&p| p != label).collect();
        Ok((margins(&logits, label), fooled))
    };

    for (s, &label) in labels.iter().enumerate() {
        let image = &x.data()[s * n..(s + 1) * n];
        let mut rng = chunk_rng(cfg.seed, (first + s) as u64);
        let mut pop: Vec<Vec<f64>> = (0..cfg.population).map(|_| layout.random(&mut rng)).collect();
        let (mut fit, mut fooled) = evaluate(image, &pop, label)?;
        let mut gens = 0;
        while gens < cfg.generations && !fooled.iter().any(|&f| f) {
            let np = pop.len();
            let trials: Vec<Vec<f64>> = (0..np)
                .map(|i| {
                    let pick = |rng: &mut ChaCha8Rng| {
                        if np >= 4 {
                            loop {
                                let r = rng.random_range(0..np);
                                if r != i {
                                    return r;
                                }
                            }
                        } else {
                            rng.random_range(0..np)
                        }
                    };
                    let (r1, mut r2, mut r3) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
                    if np >= 4 {
                        while r2 == r1 {
                            r2 = pick(&mut rng);
                        }
                        while r3 == r1 || r3 == r2 {
                            r3 = pick(&mut rng);
                        }
                    }
                    let forced = rng.random_range(0..layout.genes());
                    let mut trial = pop[i].clone();
                    for (g, t) in trial.iter_mut().enumerate() {
                        if g == forced || rng.random::<f64>() < cfg.de_crossover {
                            *t = pop[r1][g] + cfg.de_factor * (pop[r2][g] - pop[r3][g]);
                        }
                    }
                    layout.clip(&mut trial);
                    trial
                })
                .collect();
            let (tfit, tfooled) = evaluate(image, &trials, label)?;
            for i in 0..np {
                if tfooled[i] || (!fooled[i] && tfit[i] <= fit[i]) {
                    pop[i] = trials[i].clone();
                    fit[i] = tfit[i];
                    fooled[i] = tfooled[i];
                }
            }
            gens += 1;
        }
        let best = (0..pop.len())
            .min_by(|&a, &b| fooled[b].cmp(&fooled[a]).then(fit[a].total_cmp(&fit[b])))
            .expect("population is non-empty");
        adv.extend(layout.apply(image, &pop[best]));
        iterations.push(gens);
    }
    oracle.finish(x, labels, Tensor::new(x.shape().to_vec(), adv)?, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, ModelState};

    #[test]
    fn single_candidate_without_generations() {
        let m = ModelState::<f64>::build("mlp:16-4-3".parse::<Arch>().unwrap(), 1);
        let x = Tensor::from_fn(&[1, 16], |i| i as f64 / 16.0);
        let cfg = OnePixelConfig {
            population: 1,
            generations: 0,
            ..OnePixelConfig::default()
        };
        let o = Oracle::new(&m);
        let r = one_pixel(&o, &x, &[0], &cfg, 0).unwrap();
        // One candidate batch plus the final prediction.
        assert_eq!(r.forward_calls, 2);
        assert_eq!(r.gradient_calls, 0);
        let changed = r.adv.sub(&x).unwrap().data().iter().filter(|v| **v != 0.0).count();
        assert!(changed <= 1);
    }

    #[test]
    fn never_uses_gradients() {
        let m = ModelState::<f64>::build("mlp:12-6-3".parse::<Arch>().unwrap(), 5);
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| ((i % 5) as f64 / 2.5) - 1.0);
        let cfg = OnePixelConfig {
            population: 6,
            generations: 3,
            ..OnePixelConfig::default()
        };
        let r = one_pixel(&Oracle::new(&m), &x, &[0, 1], &cfg, 0).unwrap();
        assert_eq!(r.gradient_calls, 0);
        assert!(r.adv.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
