//! Synthetic streams mixing hierarchical and cyclical class layouts.
//!
//! Tree classes sit at the leaves of a balanced binary tree whose edge lengths
//! shrink geometrically with depth; cycle classes sit evenly on circles in
//! random planes. Samples add isotropic Gaussian noise to the class mean.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::stream::{is_test_row, Instance, Stream, StreamTask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub steps: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Share of classes placed on tree leaves; the rest go on circles.
    pub tree_fraction: f64,
    pub noise: f64,
    pub test_ratio: f64,
    pub root_edge: f64,
    pub edge_decay: f64,
    pub circle_radius: f64,
    pub classes_per_circle: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            steps: 5,
            samples_per_class: 200,
            input_dim: 16,
            tree_fraction: 0.5,
            noise: 0.35,
            test_ratio: 0.2,
            root_edge: 2.0,
            edge_decay: 0.6,
            circle_radius: 1.5,
            classes_per_circle: 5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.steps == 0 || !self.classes.is_multiple_of(self.steps) {
            return Err(Error::config(format!(
                "{} classes cannot be divided into {} steps",
                self.classes, self.steps
            )));
        }
        if self.samples_per_class == 0 || self.input_dim < 2 || self.classes_per_circle == 0 {
            return Err(Error::config("synthetic stream needs samples, input_dim ≥ 2 and classes_per_circle ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.tree_fraction) || !(0.0..1.0).contains(&self.test_ratio) {
            return Err(Error::config("tree_fraction must lie in [0, 1] and test_ratio in [0, 1)"));
        }
        let finite_nonneg = [self.noise, self.root_edge, self.edge_decay, self.circle_radius]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite_nonneg {
            return Err(Error::config("noise and layout lengths must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn tree_classes(&self) -> usize {
        (self.classes as f64 * self.tree_fraction).round() as usize
    }
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn tree_means<R: Rng>(spec: &SynthSpec, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    if count == 0 {
        return Vec::new();
    }
    let dim = spec.input_dim;
    let depth = (count as f64).log2().ceil() as usize;
    let mut level = vec![vec![0.0; dim]];
    for l in 0..depth {
        let edge = spec.root_edge * spec.edge_decay.powi(l as i32);
        level = level
            .iter()
            .flat_map(|p| {
                (0..2)
                    .map(|_| p.iter().zip(random_unit(dim, rng)).map(|(a, u)| a + edge * u).collect())
                    .collect::<Vec<Vec<f64>>>()
            })
            .collect();
    }
    level.truncate(count);
    level
}

fn cycle_means<R: Rng>(spec: &SynthSpec, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let dim = spec.input_dim;
    let mut means = Vec::with_capacity(count);
    let mut remaining = count;
    while remaining > 0 {
        let k = remaining.min(spec.classes_per_circle);
        let center: Vec<f64> = random_unit(dim, rng).into_iter().map(|c| c * spec.root_edge).collect();
        let e1 = random_unit(dim, rng);
        let mut e2 = random_unit(dim, rng);
        let proj: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
        e2.iter_mut().zip(&e1).for_each(|(b, a)| *b -= proj * a);
        let n2 = e2.iter().map(|x| x * x).sum::<f64>().sqrt();
        e2.iter_mut().for_each(|b| *b /= n2);
        let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        for i in 0..k {
            let th = phase + std::f64::consts::TAU * i as f64 / k as f64;
            let (s, c) = th.sin_cos();
            means.push(
                (0..dim)
                    .map(|d| center[d] + spec.circle_radius * (c * e1[d] + s * e2[d]))
                    .collect(),
            );
        }
        remaining -= k;
    }
    means
}

/// Builds a stream; identical `(spec, seed)` give bit-identical streams.
pub fn generate_synthetic_stream(spec: &SynthSpec, seed: u64) -> Result<Stream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tree = spec.tree_classes();
    let mut means = tree_means(spec, n_tree, &mut rng);
    means.extend(cycle_means(spec, spec.classes - n_tree, &mut rng));
    // Class id c takes layout slot order[c], so every step mixes both kinds.
    let mut order: Vec<usize> = (0..spec.classes).collect();
    order.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let per_step = spec.classes / spec.steps;
    let mut tasks: Vec<StreamTask> = (0..spec.steps)
        .map(|t| StreamTask {
            step: t,
            labels: (t * per_step..(t + 1) * per_step).collect(),
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    let mut row = 0u64;
    for (c, &slot) in order.iter().enumerate() {
        let mean = &means[slot];
        for _ in 0..spec.samples_per_class {
            let input = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            let inst = Instance { input, label: c };
            let task = &mut tasks[c / per_step];
            if is_test_row(seed, row, spec.test_ratio) {
                task.test.push(inst);
            } else {
                task.train.push(inst);
            }
            row += 1;
        }
    }
    Stream::new(spec.input_dim, tasks)
}

/// Whether class `c` of a stream built from `(spec, seed)` lies on the tree.
pub fn is_tree_class(spec: &SynthSpec, seed: u64, c: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tree = spec.tree_classes();
    tree_means(spec, n_tree, &mut rng);
    cycle_means(spec, spec.classes - n_tree, &mut rng);
    let mut order: Vec<usize> = (0..spec.classes).collect();
    order.shuffle(&mut rng);
    order[c] < n_tree
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_into_steps() {
        let spec = SynthSpec { samples_per_class: 10, ..SynthSpec::default() };
        let s = generate_synthetic_stream(&spec, 1).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.tasks().iter().all(|t| t.labels.len() == 4));
        assert_eq!(s.num_classes(), 20);
    }

    #[test]
    fn indivisible_classes_rejected() {
        let spec = SynthSpec { classes: 7, steps: 2, ..SynthSpec::default() };
        assert!(matches!(generate_synthetic_stream(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_collapses_to_means() {
        let spec = SynthSpec { noise: 0.0, samples_per_class: 5, ..SynthSpec::default() };
        let s = generate_synthetic_stream(&spec, 2).unwrap();
        for task in s.tasks() {
            for l in &task.labels {
                let items: Vec<&Instance> = task.train.iter().chain(&task.test).filter(|i| i.label == *l).collect();
                assert!(items.windows(2).all(|w| w[0].input == w[1].input));
            }
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = SynthSpec { samples_per_class: 8, ..SynthSpec::default() };
        assert_eq!(generate_synthetic_stream(&spec, 9).unwrap(), generate_synthetic_stream(&spec, 9).unwrap());
        assert_ne!(generate_synthetic_stream(&spec, 9).unwrap(), generate_synthetic_stream(&spec, 10).unwrap());
    }

    #[test]
    fn tree_share_matches_fraction() {
        let spec = SynthSpec::default();
        let tree = (0..spec.classes).filter(|&c| is_tree_class(&spec, 4, c)).count();
        assert_eq!(tree, 10);
    }
}
