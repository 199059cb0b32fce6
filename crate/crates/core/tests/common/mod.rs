//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use panomesh::mesh::SphericalMesh;

/// MAE, MRE, RMSE, log10 RMSE and δ1..δ3 by explicit loops over the valid
/// elements. Returns `None` when nothing is valid.
pub fn reference_metrics(gt: &[f64], pr: &[f64], min: f64, max: f64) -> Option<[f64; 7]> {
    let valid: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] >= min && gt[i] <= max).collect();
    if valid.is_empty() {
        return None;
    }
    let n = valid.len() as f64;
    let mut out = [0.0; 7];
    for &i in &valid {
        let (g, p) = (gt[i], pr[i]);
        out[0] += (g - p).abs();
        out[1] += (g - p).abs() / g;
        out[2] += (g - p) * (g - p);
        out[3] += (g.log10() - p.log10()) * (g.log10() - p.log10());
        let ratio = if g > p { g / p } else { p / g };
        let mut limit = 1.0;
        for k in 0..3 {
            limit *= 1.25;
            if ratio < limit {
                out[4 + k] += 1.0;
            }
        }
    }
    for v in out.iter_mut() {
        *v /= n;
    }
    out[2] = out[2].sqrt();
    out[3] = out[3].sqrt();
    Some(out)
}

/// Per-face mesh convolution: `w[0] x_f + w[1] x_n0 + w[2] x_n1 + w[3] x_n2 + b`
/// with `w[k]` the `[c_in, c_out]` block of slot `k` of a `[4 c_in, c_out]`
/// weight. `order` picks the neighbour slot order per face.
pub fn naive_mesh_conv(
    mesh: &SphericalMesh,
    x: &[f64],
    c_in: usize,
    weight: &[f64],
    bias: &[f64],
    order: impl Fn(usize) -> [usize; 3],
) -> Vec<f64> {
    let c_out = bias.len();
    let mut out = vec![0.0; mesh.face_count() * c_out];
    for f in 0..mesh.face_count() {
        let nb = mesh.faf()[f];
        let perm = order(f);
        let sources = [f, nb[perm[0]], nb[perm[1]], nb[perm[2]]];
        for o in 0..c_out {
            let mut acc = bias[o];
            for (slot, &src) in sources.iter().enumerate() {
                for i in 0..c_in {
                    acc += weight[(slot * c_in + i) * c_out + o] * x[src * c_in + i];
                }
            }
            out[f * c_out + o] = acc;
        }
    }
    out
}
