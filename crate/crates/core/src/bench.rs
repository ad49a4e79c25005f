//! Synthetic continual missing-modality benchmark.
//!
//! Every class owns a latent vector; both modalities observe the same latent
//! through their own frozen per-token projections plus Gaussian noise. Tasks
//! differ by a latent offset whose length is `separation`; offsets are
//! mutually orthogonal while `tasks ≤ latent_dim`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Availability, BackboneConfig, Label, MultimodalSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const AVAIL_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Multiclass,
    Multilabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Fraction of modality-incomplete samples per task.
    pub eta: f64,
    /// Fraction of samples carrying an image.
    pub image_avail: f64,
    /// Fraction of samples carrying text.
    pub text_avail: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Length of each task's latent offset.
    pub separation: f64,
    /// Scale of class latents around the task offset.
    pub class_spread: f64,
    pub noise_sigma: f64,
    /// Sub-domains per task. Class directions alternate in sign between
    /// consecutive domains.
    pub domains_per_task: usize,
    /// Distance of each domain centre from its task offset, as a fraction
    /// of `separation`.
    pub domain_shift: f64,
    /// Correlation between the text and visual token projections.
    pub modality_coupling: f64,
    pub latent_dim: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 4,
            eta: 0.7,
            image_avail: 0.65,
            text_avail: 0.65,
            n_train: 400,
            n_test: 100,
            separation: 12.0,
            class_spread: 1.5,
            noise_sigma: 1.0,
            domains_per_task: 2,
            domain_shift: 1.0 / 3.0,
            modality_coupling: 0.9,
            latent_dim: 8,
            label_mode: LabelMode::Multiclass,
            seed: 0,
        }
    }
}

/// Split of one task's samples by availability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub complete: usize,
    pub image_only: usize,
    pub text_only: usize,
}

impl Partition {
    pub fn total(&self) -> usize {
        self.complete + self.image_only + self.text_only
    }

    pub fn incomplete(&self) -> usize {
        self.image_only + self.text_only
    }
}

impl BenchmarkSpec {
    /// The three availability patterns at missing ratio `eta`: text-heavy
    /// missing, image-heavy missing, and both split evenly.
    pub fn patterns(eta: f64) -> [(f64, f64); 3] {
        [(1.0, 1.0 - eta), (1.0 - eta, 1.0), (1.0 - eta / 2.0, 1.0 - eta / 2.0)]
    }

    pub fn validate(&self) -> Result<()> {
        let field = |n: &str| format!("benchmark.{n}");
        for (n, v) in [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("latent_dim", self.latent_dim),
            ("domains_per_task", self.domains_per_task),
        ] {
            if v == 0 {
                return Err(Error::config(field(n), "must be at least 1"));
            }
        }
        if self.label_mode == LabelMode::Multilabel && self.classes_per_task < 2 {
            return Err(Error::config(field("classes_per_task"), "multilabel tasks need at least 2 classes"));
        }
        for (n, v) in [
            ("eta", self.eta),
            ("image_avail", self.image_avail),
            ("text_avail", self.text_avail),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field(n), "must lie in [0, 1]"));
            }
        }
        for (n, v) in [
            ("separation", self.separation),
            ("class_spread", self.class_spread),
            ("noise_sigma", self.noise_sigma),
            ("domain_shift", self.domain_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field(n), "must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.modality_coupling) {
            return Err(Error::config(field("modality_coupling"), "must lie in [0, 1]"));
        }
        let implied = 2.0 - self.image_avail - self.text_avail;
        if (self.eta - implied).abs() > AVAIL_TOLERANCE {
            return Err(Error::config(
                field("eta"),
                format!(
                    "infeasible: image_avail {} and text_avail {} imply a missing ratio of {implied}",
                    self.image_avail, self.text_avail
                ),
            ));
        }
        Ok(())
    }

    /// Sample counts per availability group for a split of size `n`.
    pub fn partition(&self, n: usize) -> Result<Partition> {
        self.validate()?;
        let nf = n as f64;
        let image_only = (nf * (1.0 - self.text_avail)).round() as usize;
        let text_only = (nf * (1.0 - self.image_avail)).round() as usize;
        let complete = n
            .checked_sub(image_only + text_only)
            .ok_or_else(|| Error::config("benchmark.eta", "availability groups exceed the split size"))?;
        Ok(Partition {
            complete,
            image_only,
            text_only,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub task_id: u32,
    pub num_classes: usize,
    pub train: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub seq_v: usize,
    pub seq_t: usize,
    pub d_raw: usize,
    pub tasks: Vec<TaskData>,
}

impl Benchmark {
    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("benchmark serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("benchmark serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Benchmark = serde_json::from_str(s).map_err(|e| Error::Format(format!("benchmark: {e}")))?;
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<()> {
        let cfg = BackboneConfig {
            seq_v: self.seq_v,
            seq_t: self.seq_t,
            d_raw: self.d_raw,
            ..Default::default()
        };
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_id as usize != i + 1 || t.num_classes == 0 {
                return Err(Error::Format(format!("benchmark task {} is malformed", i + 1)));
            }
            for s in t.train.iter().chain(&t.test) {
                s.validate(&cfg).map_err(|e| Error::Format(format!("task {}: {e}", t.task_id)))?;
                let ok = s.task_id == t.task_id
                    && match &s.label {
                        Label::Class(c) => *c < t.num_classes,
                        Label::Multi(bits) => bits.len() == t.num_classes && bits.iter().all(|&b| b <= 1),
                    };
                if !ok {
                    return Err(Error::Format(format!("task {}: sample label or task id invalid", t.task_id)));
                }
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector orthogonal to every previous one while the latent space has
/// room, otherwise an unconstrained random direction.
fn orthogonal_unit(rng: &mut ChaCha8Rng, dim: usize, previous: &[Vec<f64>]) -> Vec<f64> {
    if previous.len() >= dim {
        return unit(rng, dim);
    }
    loop {
        let mut v = unit(rng, dim);
        for p in previous {
            let d: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(p).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Frozen per-token map from latent space to raw token features.
struct TokenProjection {
    /// `[seq, d_raw, latent]`, row-major.
    weights: Vec<f64>,
    seq: usize,
    d_raw: usize,
    latent: usize,
}

impl TokenProjection {
    fn new(seq: usize, d_raw: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (latent as f64).sqrt();
        let weights = gaussian(rng, seq * d_raw * latent).into_iter().map(|w| w * scale).collect();
        Self {
            weights,
            seq,
            d_raw,
            latent,
        }
    }

    /// Mixes in `other`'s map at correlation `rho`; token `i` pairs with
    /// token `i mod other.seq`.
    fn coupled_to(mut self, other: &TokenProjection, rho: f64) -> Self {
        let block = self.d_raw * self.latent;
        let own_scale = (1.0 - rho * rho).sqrt();
        for (i, chunk) in self.weights.chunks_mut(block).enumerate() {
            let j = i % other.seq;
            let shared = &other.weights[j * block..(j + 1) * block];
            for (w, s) in chunk.iter_mut().zip(shared) {
                *w = rho * s + own_scale * *w;
            }
        }
        self
    }

    fn tokens(&self, z: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = Vec::with_capacity(self.seq * self.d_raw);
        for row in self.weights.chunks(self.latent) {
            let clean: f64 = row.iter().zip(z).map(|(w, z)| w * z).sum();
            let e: f64 = StandardNormal.sample(rng);
            data.push(clean + noise * e);
        }
        Tensor::new(vec![self.seq, self.d_raw], data).expect("consistent shape")
    }
}

fn availability_plan(p: Partition, rng: &mut ChaCha8Rng) -> Vec<Availability> {
    let mut plan = Vec::with_capacity(p.total());
    plan.extend(std::iter::repeat_n(Availability::Complete, p.complete));
    plan.extend(std::iter::repeat_n(Availability::ImageOnly, p.image_only));
    plan.extend(std::iter::repeat_n(Availability::TextOnly, p.text_only));
    plan.shuffle(rng);
    plan
}

/// Generates `spec.tasks` tasks whose tokens fit the given backbone geometry.
pub fn generate_benchmark(spec: &BenchmarkSpec, backbone: &BackboneConfig) -> Result<Benchmark> {
    spec.validate()?;
    let train_split = spec.partition(spec.n_train)?;
    let test_split = spec.partition(spec.n_test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.latent_dim;
    let proj_v = TokenProjection::new(backbone.seq_v, backbone.d_raw, l, &mut rng);
    let proj_t = TokenProjection::new(backbone.seq_t, backbone.d_raw, l, &mut rng)
        .coupled_to(&proj_v, spec.modality_coupling);
    let c = spec.classes_per_task;
    let mut tasks = Vec::with_capacity(spec.tasks);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(spec.tasks);
    for _ in 0..spec.tasks {
        let dir = orthogonal_unit(&mut rng, l, &directions);
        directions.push(dir);
    }
    for (k, dir) in directions.iter().enumerate() {
        let task_id = k as u32 + 1;
        let offset: Vec<f64> = dir.iter().map(|x| x * spec.separation).collect();
        let class_dirs: Vec<Vec<f64>> = (0..c)
            .map(|_| gaussian(&mut rng, l).into_iter().map(|x| x * spec.class_spread).collect())
            .collect();
        let shift = spec.separation * spec.domain_shift;
        let domain_offsets: Vec<Vec<f64>> = (0..spec.domains_per_task)
            .map(|_| {
                let u = orthogonal_unit(&mut rng, l, &directions);
                offset.iter().zip(&u).map(|(o, u)| o + shift * u).collect()
            })
            .collect();
        let make_split = |split: Partition, rng: &mut ChaCha8Rng| -> Vec<MultimodalSample> {
            availability_plan(split, rng)
                .into_iter()
                .map(|avail| {
                    let domain = rng.random_range(0..spec.domains_per_task);
                    let centre = &domain_offsets[domain];
                    let sign = if domain % 2 == 0 { 1.0 } else { -1.0 };
                    let (label, z) = match spec.label_mode {
                        LabelMode::Multiclass => {
                            let cls = rng.random_range(0..c);
                            let z: Vec<f64> = centre.iter().zip(&class_dirs[cls]).map(|(o, d)| o + sign * d).collect();
                            (Label::Class(cls), z)
                        }
                        LabelMode::Multilabel => {
                            let mut bits: Vec<u8> = (0..c).map(|_| u8::from(rng.random_bool(0.5))).collect();
                            if bits.iter().all(|&b| b == 0) {
                                bits[rng.random_range(0..c)] = 1;
                            }
                            let mut z = centre.clone();
                            for (cls, &b) in bits.iter().enumerate() {
                                if b == 1 {
                                    for (zi, d) in z.iter_mut().zip(&class_dirs[cls]) {
                                        *zi += sign * d;
                                    }
                                }
                            }
                            (Label::Multi(bits), z)
                        }
                    };
                    let visual = proj_v.tokens(&z, spec.noise_sigma, rng);
                    let text = proj_t.tokens(&z, spec.noise_sigma, rng);
                    MultimodalSample {
                        visual: avail.has_visual().then_some(visual),
                        text: avail.has_text().then_some(text),
                        label,
                        task_id,
                    }
                })
                .collect()
        };
        let train = make_split(train_split, &mut rng);
        let test = make_split(test_split, &mut rng);
        tasks.push(TaskData {
            task_id,
            num_classes: c,
            train,
            test,
        });
    }
    Ok(Benchmark {
        spec: spec.clone(),
        seq_v: backbone.seq_v,
        seq_t: backbone.seq_t,
        d_raw: backbone.d_raw,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (BenchmarkSpec, BackboneConfig) {
        let spec = BenchmarkSpec {
            tasks: 2,
            n_train: 40,
            n_test: 20,
            ..Default::default()
        };
        let bb = BackboneConfig {
            seq_v: 3,
            seq_t: 2,
            d_raw: 4,
            ..Default::default()
        };
        (spec, bb)
    }

    fn counts(samples: &[MultimodalSample]) -> Partition {
        let n = |a| samples.iter().filter(|s| s.availability() == Some(a)).count();
        Partition {
            complete: n(Availability::Complete),
            image_only: n(Availability::ImageOnly),
            text_only: n(Availability::TextOnly),
        }
    }

    #[test]
    fn eta_zero_is_all_complete() {
        let (mut spec, bb) = small();
        spec.eta = 0.0;
        spec.image_avail = 1.0;
        spec.text_avail = 1.0;
        let b = generate_benchmark(&spec, &bb).unwrap();
        assert!(b.tasks.iter().all(|t| t.train.iter().chain(&t.test).all(|s| s.is_complete())));
    }

    #[test]
    fn even_split_pattern() {
        let spec = BenchmarkSpec::default();
        let p = spec.partition(200).unwrap();
        assert_eq!(p, Partition { complete: 60, image_only: 70, text_only: 70 });
    }

    #[test]
    fn text_heavy_missing_pattern() {
        let spec = BenchmarkSpec {
            eta: 0.9,
            image_avail: 1.0,
            text_avail: 0.1,
            ..Default::default()
        };
        let p = spec.partition(100).unwrap();
        assert_eq!(p, Partition { complete: 10, image_only: 90, text_only: 0 });
    }

    #[test]
    fn infeasible_combination_is_rejected() {
        let spec = BenchmarkSpec {
            eta: 0.5,
            image_avail: 1.0,
            text_avail: 1.0,
            ..Default::default()
        };
        assert!(spec.validate().unwrap_err().is_config());
    }

    #[test]
    fn patterns_are_feasible() {
        for eta in [0.1, 0.3, 0.5, 0.7, 0.9] {
            for (ia, ta) in BenchmarkSpec::patterns(eta) {
                let spec = BenchmarkSpec {
                    eta,
                    image_avail: ia,
                    text_avail: ta,
                    ..Default::default()
                };
                spec.validate().unwrap();
            }
        }
    }

    #[test]
    fn generated_splits_match_partition() {
        let (spec, bb) = small();
        let b = generate_benchmark(&spec, &bb).unwrap();
        for t in &b.tasks {
            assert_eq!(counts(&t.train), spec.partition(40).unwrap());
            assert_eq!(counts(&t.test), spec.partition(20).unwrap());
            for s in t.train.iter().chain(&t.test) {
                s.validate(&bb).unwrap();
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (spec, bb) = small();
        let a = generate_benchmark(&spec, &bb).unwrap();
        let b = generate_benchmark(&spec, &bb).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let other = BenchmarkSpec { seed: 1, ..spec };
        assert_ne!(generate_benchmark(&other, &bb).unwrap().fingerprint(), a.fingerprint());
    }

    #[test]
    fn multilabel_vectors_are_binary_and_nonempty() {
        let (mut spec, bb) = small();
        spec.label_mode = LabelMode::Multilabel;
        let b = generate_benchmark(&spec, &bb).unwrap();
        for s in &b.tasks[0].train {
            let Label::Multi(bits) = &s.label else { panic!("expected multilabel") };
            assert_eq!(bits.len(), spec.classes_per_task);
            assert!(bits.contains(&1));
        }
    }

    #[test]
    fn json_round_trip() {
        let (spec, bb) = small();
        let b = generate_benchmark(&spec, &bb).unwrap();
        assert_eq!(Benchmark::from_json(&b.to_json()).unwrap(), b);
        assert!(Benchmark::from_json("{\"spec\":1}").is_err());
    }
}
