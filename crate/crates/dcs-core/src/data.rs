//! Identity-clustered synthetic datasets standing in for retrieval data at
//! desk scale, plus PK batch sampling for the triplet loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Well-separated identity clusters.
    Separable,
    /// Only a known 25% subset of channels carries identity signal; the rest
    /// carry a shared nuisance direction, amplified on one corrupted token
    /// per sample so that unmasked affinities pool the corruption.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub identities: usize,
    pub per_identity: usize,
    pub tokens: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
    pub kind: GeneratorKind,
    pub query_fraction: f64,
}

impl GeneratorSpec {
    pub fn dim(&self) -> usize {
        self.tokens * self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityDataset {
    pub spec: GeneratorSpec,
    /// n x (tokens * channels), row-major token grids.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    /// Channel indices carrying identity signal (Hard kind only).
    pub signal_channels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub identities: Vec<usize>,
    pub indices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema_version: u32,
    dataset: IdentityDataset,
}

const CENTROID_RADIUS: f64 = 5.0;
const CLEAN_BEACON: f64 = 0.5;
const OUTLIER_BEACON: f64 = 2.0;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

pub fn generate(spec: &GeneratorSpec) -> Result<IdentityDataset> {
    if spec.identities < 2 || spec.per_identity < 2 {
        return Err(Error::InvalidParameter(
            "need at least 2 identities with 2 samples each".into(),
        ));
    }
    if !(0.0..1.0).contains(&spec.query_fraction) || spec.query_fraction == 0.0 {
        return Err(Error::InvalidParameter(
            "query_fraction must be in (0, 1)".into(),
        ));
    }
    let dim = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let signal_channels: Option<Vec<usize>> = match spec.kind {
        GeneratorKind::Separable => None,
        GeneratorKind::Hard => {
            let count = (spec.channels / 4).max(1);
            let mut chans: Vec<usize> = (0..spec.channels).collect();
            chans.shuffle(&mut rng);
            let mut chosen: Vec<usize> = chans.into_iter().take(count).collect();
            chosen.sort_unstable();
            Some(chosen)
        }
    };

    // identity centroids on a scaled sphere
    let centroids: Vec<Vec<f64>> = (0..spec.identities)
        .map(|_| {
            unit_vector(dim, &mut rng)
                .into_iter()
                .map(|v| v * CENTROID_RADIUS)
                .collect()
        })
        .collect();

    // shared per-channel nuisance direction for the hard generator
    let channel_basis: Vec<f64> = (0..spec.channels).map(|_| normal(&mut rng)).collect();
    // corrupted tokens carry centroid-scale extra noise in signal channels
    let junk_scale = CENTROID_RADIUS / (dim as f64).sqrt();
    let is_signal = |flat: usize| -> bool {
        match &signal_channels {
            None => true,
            Some(set) => set.binary_search(&(flat % spec.channels)).is_ok(),
        }
    };

    let n = spec.identities * spec.per_identity;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (id, centroid) in centroids.iter().enumerate() {
        for _ in 0..spec.per_identity {
            labels.push(id);
            match spec.kind {
                GeneratorKind::Separable => {
                    for &c in centroid.iter() {
                        data.push(c + spec.noise * normal(&mut rng));
                    }
                }
                GeneratorKind::Hard => {
                    // one corrupted token per sample: junk in the signal
                    // channels plus an amplified nuisance beacon that hijacks
                    // unmasked affinities
                    let outlier = if spec.tokens > 1 {
                        Some(rng.gen_range(0..spec.tokens))
                    } else {
                        None
                    };
                    for (flat, &c) in centroid.iter().enumerate() {
                        let junk = Some(flat / spec.channels) == outlier;
                        if is_signal(flat) {
                            if junk {
                                data.push(junk_scale * normal(&mut rng));
                            } else {
                                data.push(c + spec.noise * normal(&mut rng));
                            }
                        } else {
                            let beacon = if junk { OUTLIER_BEACON } else { CLEAN_BEACON };
                            data.push(
                                beacon * channel_basis[flat % spec.channels]
                                    + spec.noise * normal(&mut rng),
                            );
                        }
                    }
                }
            }
        }
    }
    let samples = Tensor::matrix(n, dim, data)?;

    // disjoint query/gallery split; every query identity stays in the gallery
    let per_query = ((spec.per_identity as f64 * spec.query_fraction).ceil() as usize)
        .clamp(1, spec.per_identity - 1);
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for id in 0..spec.identities {
        let base = id * spec.per_identity;
        let mut idx: Vec<usize> = (base..base + spec.per_identity).collect();
        idx.shuffle(&mut rng);
        query.extend_from_slice(&idx[..per_query]);
        gallery.extend_from_slice(&idx[per_query..]);
    }
    query.sort_unstable();
    gallery.sort_unstable();

    Ok(IdentityDataset {
        spec: spec.clone(),
        samples,
        labels,
        query,
        gallery,
        signal_channels,
    })
}

impl IdentityDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.identities
    }

    /// Sample row reshaped into its tokens x channels grid.
    pub fn token_grid(&self, i: usize) -> Tensor {
        Tensor::matrix(
            self.spec.tokens,
            self.spec.channels,
            self.samples.row(i).to_vec(),
        )
        .expect("grid dims match sample dim")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = DatasetFile {
            schema_version: DATASET_SCHEMA_VERSION,
            dataset: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<IdentityDataset> {
        let text = std::fs::read_to_string(path)?;
        let file: DatasetFile = serde_json::from_str(&text)?;
        if file.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported dataset schema version {}",
                file.schema_version
            )));
        }
        Ok(file.dataset)
    }
}

/// P distinct identities, K distinct samples each, uniform without
/// replacement.
pub fn sample_pk_batch(
    dataset: &IdentityDataset,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PkBatch> {
    if p == 0 || p > dataset.num_classes() {
        return Err(Error::InvalidParameter(format!(
            "P={p} infeasible for {} identities",
            dataset.num_classes()
        )));
    }
    if k < 2 || k > dataset.spec.per_identity {
        return Err(Error::InvalidParameter(format!(
            "K={k} infeasible for {} samples per identity",
            dataset.spec.per_identity
        )));
    }
    let mut ids: Vec<usize> = (0..dataset.num_classes()).collect();
    ids.shuffle(rng);
    ids.truncate(p);
    let mut indices = Vec::with_capacity(p * k);
    for &id in &ids {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == id)
            .collect();
        members.shuffle(rng);
        indices.extend_from_slice(&members[..k]);
    }
    Ok(PkBatch {
        identities: ids,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GeneratorKind, noise: f64, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            identities: 10,
            per_identity: 20,
            tokens: 4,
            channels: 8,
            noise,
            seed,
            kind,
            query_fraction: 0.25,
        }
    }

    #[test]
    fn zero_noise_collapses_identities() {
        let ds = generate(&spec(GeneratorKind::Separable, 0.0, 1)).unwrap();
        for id in 0..10 {
            let base = id * 20;
            for i in base + 1..base + 20 {
                assert_eq!(ds.samples.row(base), ds.samples.row(i));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let a = generate(&spec(GeneratorKind::Hard, 0.3, 42)).unwrap();
        let b = generate(&spec(GeneratorKind::Hard, 0.3, 42)).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec(GeneratorKind::Hard, 0.3, 43)).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn nearest_centroid_probe_on_separable_data() {
        let ds = generate(&spec(GeneratorKind::Separable, 0.3, 7)).unwrap();
        // train a nearest-centroid probe on the gallery, classify the queries
        let dim = ds.spec.dim();
        let mut centroids = vec![vec![0.0; dim]; 10];
        let mut counts = vec![0usize; 10];
        for &i in &ds.gallery {
            counts[ds.labels[i]] += 1;
            for (j, &v) in ds.samples.row(i).iter().enumerate() {
                centroids[ds.labels[i]][j] += v;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut correct = 0;
        for &i in &ds.query {
            let row = ds.samples.row(i);
            let best = (0..10)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&centroids[a]).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = row.iter().zip(&centroids[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.query.len() as f64;
        assert!(acc >= 0.99, "probe accuracy {acc}");
    }

    #[test]
    fn query_gallery_split_invariants() {
        let ds = generate(&spec(GeneratorKind::Separable, 0.5, 3)).unwrap();
        for &q in &ds.query {
            assert!(!ds.gallery.contains(&q));
            assert!(ds.gallery.iter().any(|&g| ds.labels[g] == ds.labels[q]));
        }
        assert_eq!(ds.query.len() + ds.gallery.len(), ds.len());
        // every identity keeps >= 2 samples
        for id in 0..10 {
            assert!(ds.labels.iter().filter(|&&l| l == id).count() >= 2);
        }
    }

    #[test]
    fn hard_generator_marks_quarter_of_channels() {
        let ds = generate(&spec(GeneratorKind::Hard, 0.3, 5)).unwrap();
        let signal = ds.signal_channels.as_ref().unwrap();
        assert_eq!(signal.len(), 2); // 8 channels / 4
        assert!(signal.iter().all(|&c| c < 8));
    }

    #[test]
    fn pk_batch_invariants_over_many_draws() {
        let ds = generate(&spec(GeneratorKind::Separable, 0.3, 9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let batch = sample_pk_batch(&ds, 4, 3, &mut rng).unwrap();
            assert_eq!(batch.indices.len(), 12);
            let mut seen = batch.indices.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 12, "samples distinct");
            for &id in &batch.identities {
                let count = batch
                    .indices
                    .iter()
                    .filter(|&&i| ds.labels[i] == id)
                    .count();
                assert_eq!(count, 3, "exactly K per chosen identity");
            }
        }
    }

    #[test]
    fn pk_batch_whole_dataset_and_infeasible() {
        let ds = generate(&spec(GeneratorKind::Separable, 0.3, 9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_pk_batch(&ds, 10, 20, &mut rng).unwrap();
        assert_eq!(batch.indices.len(), ds.len());
        assert!(sample_pk_batch(&ds, 11, 3, &mut rng).is_err());
        assert!(sample_pk_batch(&ds, 4, 1, &mut rng).is_err());
        assert!(sample_pk_batch(&ds, 4, 21, &mut rng).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let ds = generate(&spec(GeneratorKind::Hard, 0.37, 11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.save(&path).unwrap();
        let loaded = IdentityDataset::load(&path).unwrap();
        assert_eq!(ds, loaded);
        assert_eq!(ds.samples.data(), loaded.samples.data());
    }
}
