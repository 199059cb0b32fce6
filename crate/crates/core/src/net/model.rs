use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::mesh::{face_count, AdjacencyCache, MeshHierarchy, SphericalMesh};
use crate::mesh_ops::{
    mesh_conv, mesh_max_pool, mesh_res_block, mesh_unpool, MeshConvParams, MeshConvVars,
    MeshFeature,
};
use crate::net::config::NetworkConfig;
use crate::net::fusion::{fuse, init_fusion, FusionVars, Gates};
use crate::projection::{build_projection_table, EquirectGrid, ProjectionTable};
use crate::tensor::{concat, BoundParams, Conv2dSpec, Parameters, Tape, Tensor, Var};

/// Meshes and projection tables shared by every forward pass of one network.
///
/// All mesh levels a configuration touches go through a single
/// [`AdjacencyCache`], so each level's FAF table is built once no matter how
/// many layers use it.
#[derive(Debug)]
pub struct NetworkResources {
    config: NetworkConfig,
    hierarchy: MeshHierarchy,
    cache: AdjacencyCache,
    feature_tables: Vec<ProjectionTable>,
    input_table: ProjectionTable,
    output_table: ProjectionTable,
}

impl NetworkResources {
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        Self::build_with(config, MeshHierarchy::new(), AdjacencyCache::new())
    }

    pub fn build_with(
        config: &NetworkConfig,
        hierarchy: MeshHierarchy,
        cache: AdjacencyCache,
    ) -> Result<Self> {
        config.validate()?;
        for mr in config.mr_lo..=config.mr_out() {
            cache.get_mesh(&hierarchy, mr);
        }
        let image_grid = EquirectGrid::new(config.image_w, config.image_h)?;
        let feature_tables = if config.fusion.uses_image() {
            (0..config.encoder_scales())
                .map(|k| {
                    let (h, w) = config.image_scale_size(k);
                    build_projection_table(EquirectGrid::new(w, h)?, &hierarchy, config.mr_hi - k)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let input_table = build_projection_table(image_grid, &hierarchy, config.mr_hi)?;
        let output_table = if config.extra_levels == 0 {
            input_table.clone()
        } else {
            build_projection_table(image_grid, &hierarchy, config.mr_out())?
        };
        Ok(Self {
            config: config.clone(),
            hierarchy,
            cache,
            feature_tables,
            input_table,
            output_table,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn cache(&self) -> &AdjacencyCache {
        &self.cache
    }

    pub fn hierarchy(&self) -> &MeshHierarchy {
        &self.hierarchy
    }

    /// Mesh with FAF for level `mr`, which must be one the network uses.
    pub fn mesh(&self, mr: usize) -> Result<Arc<SphericalMesh>> {
        if mr < self.config.mr_lo || mr > self.config.mr_out() {
            return Err(Error::Config(format!(
                "mr {mr} outside the network's levels {}..={}",
                self.config.mr_lo,
                self.config.mr_out()
            )));
        }
        Ok(self.cache.get_mesh(&self.hierarchy, mr))
    }

    /// Image-grid table for encoder scale `k`.
    pub fn feature_table(&self, k: usize) -> Result<&ProjectionTable> {
        self.feature_tables
            .get(k)
            .ok_or_else(|| Error::Config(format!("no projection table for scale {k}")))
    }

    /// Full image grid against the finest encoder level.
    pub fn input_table(&self) -> &ProjectionTable {
        &self.input_table
    }

    /// Full image grid against the finest output level.
    pub fn output_table(&self) -> &ProjectionTable {
        &self.output_table
    }
}

/// Network inputs: the image channel-first plus its E2S resampling at the
/// finest encoder level.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput {
    pub image: Tensor,
    pub face_rgb: Tensor,
}

impl NetworkInput {
    /// `rgb` is `[H, W, 3]` with values in `[0, 1]`; inputs are shifted to
    /// `[-1, 1]`.
    pub fn from_rgb(rgb: &Tensor, resources: &NetworkResources) -> Result<Self> {
        let cfg = resources.config();
        if rgb.shape() != [cfg.image_h, cfg.image_w, 3] {
            return shape_err(format!(
                "image {:?}, network expects [{}, {}, 3]",
                rgb.shape(),
                cfg.image_h,
                cfg.image_w
            ));
        }
        let centered = rgb.map(|x| 2.0 * x - 1.0);
        let face_rgb = resources.input_table().e2s_resample(&centered)?;
        let (h, w) = (cfg.image_h, cfg.image_w);
        let image = Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            centered.data()[p * 3 + c]
        });
        Ok(Self { image, face_rgb })
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

fn encoder_in(config: &NetworkConfig, k: usize) -> usize {
    if k == 0 {
        config.channels[0]
    } else {
        config.channels[k - 1]
    }
}

fn decoder_in(config: &NetworkConfig, j: usize) -> usize {
    let k = config.encoder_scales();
    match j {
        0 => config.channels[k - 1],
        j if j < k => config.decoder_channels[j - 1] + config.channels[k - 1 - j],
        j => config.decoder_channels[j - 1],
    }
}

fn first_output_level(config: &NetworkConfig) -> usize {
    config.decoder_levels() - config.scales
}

/// Seeded parameter initialisation for `config`.
pub fn init_parameters(config: &NetworkConfig) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Parameters::new();
    let k_scales = config.encoder_scales();
    if config.fusion.uses_mesh() {
        MeshConvParams::kaiming(3, config.channels[0], &mut rng).insert_into(&mut params, "mesh.stem");
        for k in 0..k_scales {
            let (c_in, c_out) = (encoder_in(config, k), config.channels[k]);
            MeshConvParams::kaiming(c_in, c_out, &mut rng)
                .insert_into(&mut params, &format!("mesh.s{k}.conv1"));
            MeshConvParams::kaiming(c_out, c_out, &mut rng)
                .insert_into(&mut params, &format!("mesh.s{k}.conv2"));
            if c_in != c_out {
                let w = normal_tensor(&[c_in, c_out], (1.0 / c_in as f64).sqrt(), &mut rng);
                params.insert(format!("mesh.s{k}.proj"), w);
            }
        }
    }
    if config.fusion.uses_image() {
        for k in 0..k_scales {
            let c_in = if k == 0 { 3 } else { config.channels[k - 1] };
            let c = config.channels[k];
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            params.insert(format!("image.s{k}.weight"), normal_tensor(&[c, c_in, 3, 3], std, &mut rng));
            params.insert(format!("image.s{k}.bias"), Tensor::zeros([c]));
            let std = (1.0 / c as f64).sqrt();
            params.insert(format!("image.align{k}.weight"), normal_tensor(&[c, c, 1, 1], std, &mut rng));
            params.insert(format!("image.align{k}.bias"), Tensor::zeros([c]));
        }
    }
    if let Some(kind) = config.fusion.kind() {
        for k in 0..k_scales {
            init_fusion(kind, config.channels[k], &format!("fuse{k}"), &mut params, &mut rng);
        }
    }
    for j in 0..config.decoder_levels() {
        let d = config.decoder_channels[j];
        MeshConvParams::kaiming(decoder_in(config, j), d, &mut rng)
            .insert_into(&mut params, &format!("dec{j}.conv"));
        if j >= first_output_level(config) {
            MeshConvParams::kaiming(d, 1, &mut rng).insert_into(&mut params, &format!("dec{j}.head"));
        }
    }
    Ok(params)
}

/// Stride-2 conv stack with a 1×1 channel alignment per scale. Returns the
/// aligned `[C_k, H/2^(k+1), W/2^(k+1)]` maps.
pub fn image_encoder_forward<'t>(
    image: Var<'t>,
    params: &BoundParams<'t>,
    config: &NetworkConfig,
) -> Result<Vec<Var<'t>>> {
    if image.shape() != [3, config.image_h, config.image_w] {
        return shape_err(format!(
            "image {:?}, expected [3, {}, {}]",
            image.shape(),
            config.image_h,
            config.image_w
        ));
    }
    let down = Conv2dSpec { stride: 2, padding: 1 };
    let mut x = image;
    let mut out = Vec::with_capacity(config.encoder_scales());
    for k in 0..config.encoder_scales() {
        x = x
            .conv2d(
                params.get(&format!("image.s{k}.weight"))?,
                Some(params.get(&format!("image.s{k}.bias"))?),
                down,
            )?
            .relu();
        out.push(x.conv2d(
            params.get(&format!("image.align{k}.weight"))?,
            Some(params.get(&format!("image.align{k}.bias"))?),
            Conv2dSpec::default(),
        )?);
    }
    Ok(out)
}

/// Residual blocks separated by max pooling, one feature per level from
/// `mr_hi` down to `mr_lo`.
pub fn mesh_encoder_forward<'t>(
    face_rgb: Var<'t>,
    params: &BoundParams<'t>,
    resources: &NetworkResources,
) -> Result<Vec<MeshFeature<'t>>> {
    let config = resources.config();
    let mut mr = config.mr_hi;
    let input = MeshFeature::new(mr, face_rgb)?;
    if input.channels() != 3 {
        return shape_err(format!("mesh input has {} channels, expected 3", input.channels()));
    }
    let conv = |name: &str| MeshConvVars::from_bound(params, name);
    let mesh = resources.mesh(mr)?;
    let stem = mesh_conv(input, &conv("mesh.stem")?, &mesh)?;
    let mut x = MeshFeature::new(mr, stem.values().relu())?;
    let mut out = Vec::with_capacity(config.encoder_scales());
    for k in 0..config.encoder_scales() {
        if k > 0 {
            x = mesh_max_pool(x)?;
            mr -= 1;
        }
        let proj = if encoder_in(config, k) != config.channels[k] {
            Some(params.get(&format!("mesh.s{k}.proj"))?)
        } else {
            None
        };
        x = mesh_res_block(
            x,
            &conv(&format!("mesh.s{k}.conv1"))?,
            &conv(&format!("mesh.s{k}.conv2"))?,
            proj,
            &*resources.mesh(mr)?,
        )?;
        out.push(x);
    }
    Ok(out)
}

/// Per-scale fused features, finest first.
pub fn fused_features<'t>(
    input: &NetworkInput,
    params: &BoundParams<'t>,
    resources: &NetworkResources,
    tape: &'t Tape,
    gates: Gates,
) -> Result<Vec<MeshFeature<'t>>> {
    let config = resources.config();
    let variant = config.fusion;
    let spherical = if variant.uses_mesh() {
        mesh_encoder_forward(tape.constant(input.face_rgb.clone()), params, resources)?
    } else {
        Vec::new()
    };
    let projected = if variant.uses_image() {
        let maps = image_encoder_forward(tape.constant(input.image.clone()), params, config)?;
        maps.into_iter()
            .enumerate()
            .map(|(k, m)| {
                let faces = resources.feature_table(k)?.sample_faces(m)?;
                MeshFeature::new(config.mr_hi - k, faces)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    match variant.kind() {
        None if variant.uses_mesh() => Ok(spherical),
        None => Ok(projected),
        Some(kind) => spherical
            .into_iter()
            .zip(projected)
            .enumerate()
            .map(|(k, (sp, eq))| {
                let vars = FusionVars::from_bound(kind, params, &format!("fuse{k}"))?;
                fuse(&vars, sp, eq, &*resources.mesh(sp.mr())?, gates)
            })
            .collect(),
    }
}

/// UNet-style mesh decoder from the coarsest fused feature up to the finest
/// output level. Returns positive `[F, 1]` distances, ascending in mr.
pub fn decode<'t>(
    fused: &[MeshFeature<'t>],
    params: &BoundParams<'t>,
    resources: &NetworkResources,
) -> Result<Vec<MeshFeature<'t>>> {
    let config = resources.config();
    let k_scales = config.encoder_scales();
    if fused.len() != k_scales {
        return shape_err(format!("{} fused scales, expected {k_scales}", fused.len()));
    }
    let conv = |name: &str| MeshConvVars::from_bound(params, name);
    let mut x = fused[k_scales - 1];
    let mut outputs = Vec::with_capacity(config.scales);
    for j in 0..config.decoder_levels() {
        if j > 0 {
            x = mesh_unpool(x)?;
        }
        if j > 0 && j < k_scales {
            let skip = fused[k_scales - 1 - j];
            x = MeshFeature::new(x.mr(), concat(&[x.values(), skip.values()], 1)?)?;
        }
        let mesh = resources.mesh(x.mr())?;
        let y = mesh_conv(x, &conv(&format!("dec{j}.conv"))?, &mesh)?;
        x = MeshFeature::new(y.mr(), y.values().relu())?;
        if j >= first_output_level(config) {
            let head = mesh_conv(x, &conv(&format!("dec{j}.head"))?, &mesh)?;
            outputs.push(MeshFeature::new(head.mr(), head.values().softplus())?);
        }
    }
    Ok(outputs)
}

/// Full forward pass: per-scale distance maps on the mesh, ascending in mr.
pub fn sphere_fusion_forward<'t>(
    input: &NetworkInput,
    params: &BoundParams<'t>,
    resources: &NetworkResources,
    tape: &'t Tape,
) -> Result<Vec<MeshFeature<'t>>> {
    let fused = fused_features(input, params, resources, tape, Gates::Learned)?;
    decode(&fused, params, resources)
}

/// Replicates a per-face target down the hierarchy by max pooling;
/// returns `levels` targets ascending in mr, the last being `finest`.
pub fn pooled_targets(finest: &Tensor, mr: usize, levels: usize) -> Result<Vec<Tensor>> {
    if finest.shape() != [face_count(mr), 1] {
        return shape_err(format!(
            "target {:?} does not match mr {mr}",
            finest.shape()
        ));
    }
    if levels == 0 || levels > mr + 1 {
        return Err(Error::Level(format!("cannot pool {levels} levels from mr {mr}")));
    }
    let tape = Tape::new();
    let mut x = MeshFeature::new(mr, tape.constant(finest.clone()))?;
    let mut out = vec![finest.clone()];
    for _ in 1..levels {
        x = mesh_max_pool(x)?;
        out.push((*x.values().value()).clone());
    }
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::config::FusionVariant;

    fn two_scale() -> NetworkConfig {
        NetworkConfig {
            mr_hi: 3,
            mr_lo: 2,
            channels: vec![4, 8],
            decoder_channels: vec![8, 4],
            scales: 2,
            loss_weights: vec![1.0, 1.0],
            ..NetworkConfig::toy()
        }
    }

    fn random_rgb(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([h, w, 3], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn image_encoder_halves_per_scale() {
        let cfg = two_scale();
        let params = init_parameters(&cfg).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let image = tape.constant(Tensor::zeros([3, 64, 128]));
        let maps = image_encoder_forward(image, &bound, &cfg).unwrap();
        assert_eq!(maps[0].shape(), vec![4, 32, 64]);
        assert_eq!(maps[1].shape(), vec![8, 16, 32]);
        let bad = tape.constant(Tensor::zeros([3, 32, 128]));
        assert!(image_encoder_forward(bad, &bound, &cfg).is_err());
    }

    #[test]
    fn image_encoder_constant_rows() {
        let cfg = two_scale();
        let params = init_parameters(&cfg).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let image = tape.constant(Tensor::full([3, 64, 128], 0.3));
        for map in image_encoder_forward(image, &bound, &cfg).unwrap() {
            let v = map.value();
            let &[c, h, w] = v.shape() else { unreachable!() };
            for plane in v.data().chunks(h * w).take(c) {
                for row in plane.chunks(w) {
                    assert!(row.iter().all(|&x| x == row[0]));
                }
                // Only the top row sees latitude padding at the first scale.
                if h == 32 {
                    assert!(plane[w..].iter().all(|&x| x == plane[w]));
                }
            }
        }
    }

    #[test]
    fn mesh_encoder_shapes_and_zero_weights() {
        let cfg = two_scale();
        let res = NetworkResources::build(&cfg).unwrap();
        let mut params = init_parameters(&cfg).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let rgb = tape.constant(Tensor::full([1280, 3], 0.5));
        let feats = mesh_encoder_forward(rgb, &bound, &res).unwrap();
        assert_eq!((feats[0].mr(), feats[0].channels()), (3, 4));
        assert_eq!((feats[1].mr(), feats[1].channels()), (2, 8));

        for (name, t) in params.iter_mut() {
            if name.starts_with("mesh.") {
                t.data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let rgb = tape.constant(Tensor::full([1280, 3], 0.5));
        for f in mesh_encoder_forward(rgb, &bound, &res).unwrap() {
            assert!(f.values().value().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn outputs_ascend_and_are_positive() {
        for fusion in FusionVariant::ALL {
            let cfg = NetworkConfig { fusion, ..two_scale() };
            let res = NetworkResources::build(&cfg).unwrap();
            let params = init_parameters(&cfg).unwrap();
            let input = NetworkInput::from_rgb(&random_rgb(64, 128, 3), &res).unwrap();
            let tape = Tape::new();
            let bound = params.bind(&tape, false);
            let outs = sphere_fusion_forward(&input, &bound, &res, &tape).unwrap();
            assert_eq!(outs.len(), cfg.scales);
            assert_eq!(outs.iter().map(|o| o.mr()).collect::<Vec<_>>(), cfg.output_mrs());
            for o in &outs {
                assert_eq!(o.channels(), 1);
                assert!(o.values().value().data().iter().all(|&d| d > 0.0));
            }
        }
    }

    #[test]
    fn extra_levels_and_partial_scales() {
        let cfg = NetworkConfig {
            image_h: 16,
            image_w: 32,
            mr_hi: 2,
            mr_lo: 1,
            channels: vec![4, 8],
            decoder_channels: vec![8, 4, 4],
            extra_levels: 1,
            scales: 2,
            loss_weights: vec![1.0, 1.0],
            ..NetworkConfig::toy()
        };
        let res = NetworkResources::build(&cfg).unwrap();
        let params = init_parameters(&cfg).unwrap();
        let input = NetworkInput::from_rgb(&random_rgb(16, 32, 1), &res).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let outs = sphere_fusion_forward(&input, &bound, &res, &tape).unwrap();
        assert_eq!(outs.iter().map(|o| o.mr()).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(res.output_table().mr(), 3);
    }

    #[test]
    fn faf_built_once_per_level() {
        let cfg = two_scale();
        let res = NetworkResources::build(&cfg).unwrap();
        let params = init_parameters(&cfg).unwrap();
        let input = NetworkInput::from_rgb(&random_rgb(64, 128, 2), &res).unwrap();
        for _ in 0..3 {
            let tape = Tape::new();
            let bound = params.bind(&tape, false);
            sphere_fusion_forward(&input, &bound, &res, &tape).unwrap();
        }
        assert_eq!(res.cache().faf_computations(), 2);
        assert!(res.cache().stats().hits > 10);
        assert!(res.mesh(4).is_err());
    }

    #[test]
    fn missing_table_is_config_error() {
        let mesh_only = NetworkConfig {
            fusion: FusionVariant::MeshOnly,
            ..two_scale()
        };
        let res = NetworkResources::build(&mesh_only).unwrap();
        assert!(matches!(res.feature_table(0), Err(Error::Config(_))));
        let image_only = NetworkConfig {
            fusion: FusionVariant::ImageOnly,
            ..two_scale()
        };
        let params = init_parameters(&image_only).unwrap();
        let input = NetworkInput::from_rgb(&random_rgb(64, 128, 2), &res).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let err = sphere_fusion_forward(&input, &bound, &res, &tape).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn pooled_targets_take_max() {
        let t = Tensor::from_fn([80, 1], |i| i as f64);
        let out = pooled_targets(&t, 1, 2).unwrap();
        assert_eq!(out[1], t);
        assert_eq!(out[0].data()[0], 3.0);
        assert_eq!(out[0].data()[19], 79.0);
        assert!(pooled_targets(&t, 1, 3).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = two_scale();
        let a = init_parameters(&cfg).unwrap();
        let b = init_parameters(&cfg).unwrap();
        let c = init_parameters(&NetworkConfig { seed: 1, ..cfg }).unwrap();
        let flat = |p: &Parameters| p.iter().flat_map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }
}
