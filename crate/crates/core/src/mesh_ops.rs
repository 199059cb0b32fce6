//! Differentiable operators on per-face features.
//!
//! Mesh convolution gathers each face together with its three FAF
//! neighbours into a `[F, 4 * C_in]` matrix and applies one linear map whose
//! four row blocks are the per-position weights `w0..w3`. Pooling and
//! unpooling rely only on the child convention `parent i <-> 4i..4i+4`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::mesh::{face_count, SphericalMesh};
use crate::tensor::{linear, GatherIndex, Parameters, Tape, Tensor, Var};

/// `[F, C]` features on the mesh at resolution `mr`.
#[derive(Debug, Clone, Copy)]
pub struct MeshFeature<'t> {
    mr: usize,
    values: Var<'t>,
}

impl<'t> MeshFeature<'t> {
    pub fn new(mr: usize, values: Var<'t>) -> Result<Self> {
        match values.shape()[..] {
            [f, _] if f == face_count(mr) => Ok(Self { mr, values }),
            ref s => shape_err(format!(
                "features {s:?} do not fit mr {mr} ({} faces)",
                face_count(mr)
            )),
        }
    }

    pub fn mr(&self) -> usize {
        self.mr
    }

    pub fn values(&self) -> Var<'t> {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Weights of one mesh convolution: `weight` is `[4 * C_in, C_out]` with row
/// block `k` holding `w_k` (block 0 acts on the face itself, blocks 1..3 on
/// FAF slots 0..2), `bias` is `[C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl MeshConvParams {
    pub fn from_blocks(blocks: [&Tensor; 4], bias: Tensor) -> Result<Self> {
        let shape = blocks[0].shape().to_vec();
        let &[c_in, c_out] = &shape[..] else {
            return shape_err(format!("weight blocks must be matrices, got {shape:?}"));
        };
        if blocks.iter().any(|b| b.shape() != shape.as_slice()) || bias.shape() != [c_out] {
            return shape_err("weight blocks / bias disagree in shape");
        }
        let mut data = Vec::with_capacity(4 * c_in * c_out);
        for b in blocks {
            data.extend_from_slice(b.data());
        }
        Ok(Self {
            weight: Tensor::new([4 * c_in, c_out], data)?,
            bias,
        })
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Tensor::zeros([4 * c_in, c_out]),
            bias: Tensor::zeros([c_out]),
        }
    }

    /// Fan-in scaled normal weights over the `4 * C_in` effective inputs,
    /// zero bias.
    pub fn kaiming(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (4 * c_in) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            weight: Tensor::from_fn([4 * c_in, c_out], |_| normal.sample(rng)),
            bias: Tensor::zeros([c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0] / 4
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Stores as `{prefix}.weight` / `{prefix}.bias`.
    pub fn insert_into(self, params: &mut Parameters, prefix: &str) {
        params.insert(format!("{prefix}.weight"), self.weight);
        params.insert(format!("{prefix}.bias"), self.bias);
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> MeshConvVars<'t> {
        let reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        MeshConvVars {
            weight: reg(&self.weight),
            bias: reg(&self.bias),
        }
    }
}

/// Tape handles of a [`MeshConvParams`].
#[derive(Debug, Clone, Copy)]
pub struct MeshConvVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> MeshConvVars<'t> {
    pub fn from_bound(params: &crate::tensor::BoundParams<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: params.get(&format!("{prefix}.weight"))?,
            bias: params.get(&format!("{prefix}.bias"))?,
        })
    }
}

/// `[F, 4]` gather table: each face followed by its FAF slots.
pub fn conv_index(mesh: &SphericalMesh) -> GatherIndex {
    let idx: Vec<usize> = mesh
        .faf()
        .iter()
        .enumerate()
        .flat_map(|(f, n)| [f, n[0], n[1], n[2]])
        .collect();
    GatherIndex::new(idx, 4).expect("four columns")
}

fn check_level(feat: &MeshFeature<'_>, mesh: &SphericalMesh) -> Result<()> {
    if feat.mr != mesh.mr() {
        return shape_err(format!(
            "feature at mr {} used with FAF of mr {}",
            feat.mr,
            mesh.mr()
        ));
    }
    Ok(())
}

/// `out = w0 f_self + w1 f_n1 + w2 f_n2 + w3 f_n3 + b0` on every face.
pub fn mesh_conv<'t>(
    feat: MeshFeature<'t>,
    params: &MeshConvVars<'t>,
    mesh: &SphericalMesh,
) -> Result<MeshFeature<'t>> {
    check_level(&feat, mesh)?;
    let (f, c) = (mesh.face_count(), feat.channels());
    let w_shape = params.weight.shape();
    if w_shape.len() != 2 || w_shape[0] != 4 * c {
        return shape_err(format!(
            "mesh conv weight {w_shape:?} for {c} input channels"
        ));
    }
    let gathered = feat
        .values
        .gather(&conv_index(mesh))?
        .reshape([f, 4 * c])?;
    MeshFeature::new(feat.mr, linear(gathered, params.weight, Some(params.bias))?)
}

/// Per-channel max over the four children of each parent face. The
/// gradient goes to the first maximal child.
pub fn mesh_max_pool(feat: MeshFeature<'_>) -> Result<MeshFeature<'_>> {
    if feat.mr == 0 {
        return Err(Error::Level("cannot pool below mr 0".into()));
    }
    let x = feat.values.value();
    let c = feat.channels();
    let parents = face_count(feat.mr - 1);
    let mut out = vec![0.0; parents * c];
    let mut argmax = vec![0usize; parents * c];
    for p in 0..parents {
        for ch in 0..c {
            let mut best = 4 * p;
            for child in 4 * p + 1..4 * p + 4 {
                if x.data()[child * c + ch] > x.data()[best * c + ch] {
                    best = child;
                }
            }
            out[p * c + ch] = x.data()[best * c + ch];
            argmax[p * c + ch] = best * c + ch;
        }
    }
    let n = x.numel();
    let shape = x.shape().to_vec();
    let values = feat.values.tape().record(
        &[feat.values],
        Tensor::new([parents, c], out)?,
        move |g| {
            let mut dx = vec![0.0; n];
            for (&src, &go) in argmax.iter().zip(g.data()) {
                dx[src] += go;
            }
            vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
        },
    );
    MeshFeature::new(feat.mr - 1, values)
}

/// Copies each parent's feature to its four children.
pub fn mesh_unpool(feat: MeshFeature<'_>) -> Result<MeshFeature<'_>> {
    let children = face_count(feat.mr + 1);
    let idx: Arc<[usize]> = (0..children).map(|j| j / 4).collect();
    let index = GatherIndex::new(idx, 1)?;
    let c = feat.channels();
    let values = feat.values.gather(&index)?.reshape([children, c])?;
    MeshFeature::new(feat.mr + 1, values)
}

/// `relu(skip(x) + conv2(relu(conv1(x))))`, where `skip` is the identity or
/// a bias-free `[C_in, C_out]` projection.
pub fn mesh_res_block<'t>(
    feat: MeshFeature<'t>,
    conv1: &MeshConvVars<'t>,
    conv2: &MeshConvVars<'t>,
    projection: Option<Var<'t>>,
    mesh: &SphericalMesh,
) -> Result<MeshFeature<'t>> {
    let hidden = mesh_conv(feat, conv1, mesh)?;
    let hidden = MeshFeature::new(hidden.mr, hidden.values.relu())?;
    let residual = mesh_conv(hidden, conv2, mesh)?;
    let skip = match projection {
        Some(w) => linear(feat.values, w, None)?,
        None => feat.values,
    };
    if skip.shape() != residual.values.shape() {
        return shape_err(format!(
            "residual {:?} vs skip {:?}; a projection is needed",
            residual.values.shape(),
            skip.shape()
        ));
    }
    MeshFeature::new(feat.mr, skip.add(residual.values)?.relu())
}
