//! Timing harness for FAF reuse across mesh convolution layers.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::{face_count, AdjacencyCache, MeshHierarchy, SphericalMesh};
use crate::mesh_ops::{mesh_conv, MeshConvParams, MeshFeature};
use crate::tensor::{Tape, Tensor};

pub const MAX_BENCH_MR: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FafBench {
    /// Layer `i` runs at `levels[i % levels.len()]`.
    pub levels: Vec<usize>,
    pub layers: usize,
    pub channels: usize,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FafBenchReport {
    pub layers: usize,
    pub distinct_levels: usize,
    pub faf_computations: usize,
    pub elapsed: Duration,
    /// Sum of all outputs, so the work cannot be skipped.
    pub checksum: f64,
}

impl FafBench {
    pub fn single(mr: usize, layers: usize, cached: bool) -> Self {
        Self {
            levels: vec![mr],
            layers,
            channels: 4,
            cached,
        }
    }

    /// Runs the layers against a fresh cache. Mesh geometry is built before
    /// the clock starts; the timing covers FAF lookups or rebuilds plus the
    /// convolutions.
    pub fn run(&self) -> Result<FafBenchReport> {
        if self.levels.is_empty() || self.channels == 0 {
            return Err(Error::Usage("benchmark needs levels and channels".into()));
        }
        if let Some(&mr) = self.levels.iter().find(|&&mr| mr > MAX_BENCH_MR) {
            return Err(Error::Usage(format!(
                "mr {mr} exceeds the benchmark limit {MAX_BENCH_MR}"
            )));
        }
        let hierarchy = MeshHierarchy::new();
        let distinct: BTreeSet<usize> = self.levels.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = self.channels;
        let features: Vec<(usize, Tensor)> = distinct
            .iter()
            .map(|&mr| {
                hierarchy.level(mr);
                (mr, Tensor::from_fn([face_count(mr), c], |_| rng.random_range(-1.0..1.0)))
            })
            .collect();
        let conv = MeshConvParams::kaiming(c, c, &mut rng);

        let cache = AdjacencyCache::new();
        let mut rebuilt = 0;
        let mut checksum = 0.0;
        let start = Instant::now();
        for i in 0..self.layers {
            let mr = self.levels[i % self.levels.len()];
            let mesh = if self.cached {
                cache.get_mesh(&hierarchy, mr)
            } else {
                rebuilt += 1;
                Arc::new(SphericalMesh::from_geometry(hierarchy.level(mr))?)
            };
            let input = &features.iter().find(|(m, _)| *m == mr).expect("level prepared").1;
            let tape = Tape::new();
            let vars = conv.bind(&tape, false);
            let feat = MeshFeature::new(mr, tape.constant(input.clone()))?;
            checksum += mesh_conv(feat, &vars, &mesh)?.values().value().sum();
        }
        let elapsed = start.elapsed();
        let faf_computations = if self.cached {
            cache.faf_computations()
        } else {
            rebuilt
        };
        Ok(FafBenchReport {
            layers: self.layers,
            distinct_levels: distinct.len(),
            faf_computations,
            elapsed,
            checksum,
        })
    }
}
