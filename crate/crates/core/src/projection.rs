//! Conversions between the equirectangular image plane, spherical-mesh
//! faces and 3D points.
//!
//! Image coordinates are continuous: pixel `(col, row)` covers
//! `[col, col + 1) x [row, row + 1)` and its center sits at
//! `(col + 0.5, row + 0.5)`. Longitude grows with the column, latitude with
//! the row, so row 0 is the south pole (`latitude = -pi/2`).

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::mesh::{norm, MeshHierarchy, Triangulation, Vec3};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EquirectGrid {
    width: usize,
    height: usize,
}

impl EquirectGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if height < 2 || width != 2 * height {
            return shape_err(format!(
                "equirectangular grid must be 2H x H with H >= 2, got {width}x{height}"
            ));
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Direction through the center of pixel `(col, row)`.
    pub fn pixel_center_direction(&self, col: usize, row: usize) -> Vec3 {
        let ll = pixel_to_lonlat(self, col as f64 + 0.5, row as f64 + 0.5)
            .expect("pixel centers are in range");
        lonlat_to_direction(ll)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LonLat {
    pub longitude: f64,
    pub latitude: f64,
}

pub fn pixel_to_lonlat(grid: &EquirectGrid, u: f64, v: f64) -> Result<LonLat> {
    let (w, h) = (grid.width as f64, grid.height as f64);
    if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
        return Err(Error::Domain(format!(
            "pixel ({u}, {v}) outside {}x{} grid",
            grid.width, grid.height
        )));
    }
    Ok(LonLat {
        longitude: (2.0 * u / w - 1.0) * PI,
        latitude: (v / h - 0.5) * PI,
    })
}

/// Longitude/latitude of a unit vector; `atan2(0, 0)` is taken as 0 so the
/// poles have longitude 0.
pub fn center_to_lonlat(c: Vec3) -> Result<LonLat> {
    if (norm(c) - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{c:?} is not a unit vector")));
    }
    let mut longitude = c[1].atan2(c[0]);
    if longitude >= PI {
        longitude -= 2.0 * PI;
    }
    Ok(LonLat {
        longitude,
        latitude: c[2].atan2(c[0].hypot(c[1])),
    })
}

pub fn lonlat_to_pixel(grid: &EquirectGrid, ll: LonLat) -> (f64, f64) {
    (
        (1.0 + ll.longitude / PI) * grid.width as f64 / 2.0,
        (0.5 + ll.latitude / PI) * grid.height as f64,
    )
}

pub fn lonlat_to_direction(ll: LonLat) -> Vec3 {
    lonlat_to_point(ll, 1.0)
}

/// Reprojects a radial distance `d` along `ll`.
pub fn lonlat_to_point(ll: LonLat, d: f64) -> Vec3 {
    let (sin_lat, cos_lat) = ll.latitude.sin_cos();
    let (sin_lon, cos_lon) = ll.longitude.sin_cos();
    [cos_lat * cos_lon * d, cos_lat * sin_lon * d, sin_lat * d]
}

/// Bilinear sample of one face center: four pixels (row-major flat indices,
/// order `(r0,c0) (r0,c1) (r1,c0) (r1,c1)`) and the fractional offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearSample {
    pub pixels: [usize; 4],
    pub fx: f64,
    pub fy: f64,
}

impl BilinearSample {
    /// Samples continuous image position `(u, v)`, wrapping columns and
    /// clamping rows.
    pub fn at(grid: &EquirectGrid, u: f64, v: f64) -> Self {
        let (w, h) = (grid.width as isize, grid.height as isize);
        let x = u - 0.5;
        let y = v - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let c0 = x0.rem_euclid(w) as usize;
        let c1 = (x0 + 1).rem_euclid(w) as usize;
        let r0 = y0.clamp(0, h - 1) as usize;
        let r1 = (y0 + 1).clamp(0, h - 1) as usize;
        let width = grid.width;
        Self {
            pixels: [
                r0 * width + c0,
                r0 * width + c1,
                r1 * width + c0,
                r1 * width + c1,
            ],
            fx,
            fy,
        }
    }

    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }

    /// Interpolates `[a, b, c, d]` as nested lerps so equal corners return
    /// that value exactly.
    #[inline]
    pub fn interpolate(&self, corners: [f64; 4]) -> f64 {
        let [a, b, c, d] = corners;
        let top = a + self.fx * (b - a);
        let bottom = c + self.fx * (d - c);
        top + self.fy * (bottom - top)
    }
}

/// Precomputed E2S samples and S2E face lookups for one `(grid, mr)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTable {
    grid: EquirectGrid,
    mr: usize,
    e2s: Vec<BilinearSample>,
    s2e: Vec<usize>,
}

pub fn build_projection_table(
    grid: EquirectGrid,
    hierarchy: &MeshHierarchy,
    mr: usize,
) -> Result<ProjectionTable> {
    let level = hierarchy.level(mr);
    let e2s = e2s_samples(&grid, &level)?;
    let locator = hierarchy.locator(mr);
    let s2e = (0..grid.pixel_count())
        .into_par_iter()
        .map(|p| locator.locate(grid.pixel_center_direction(p % grid.width, p / grid.width)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProjectionTable { grid, mr, e2s, s2e })
}

fn e2s_samples(grid: &EquirectGrid, level: &Triangulation) -> Result<Vec<BilinearSample>> {
    level
        .centers()
        .iter()
        .map(|&c| {
            let (u, v) = lonlat_to_pixel(grid, center_to_lonlat(c)?);
            Ok(BilinearSample::at(grid, u, v))
        })
        .collect()
}

impl ProjectionTable {
    pub fn grid(&self) -> EquirectGrid {
        self.grid
    }

    pub fn mr(&self) -> usize {
        self.mr
    }

    pub fn face_count(&self) -> usize {
        self.e2s.len()
    }

    pub fn e2s(&self) -> &[BilinearSample] {
        &self.e2s
    }

    /// Face index for every pixel, row-major.
    pub fn s2e(&self) -> &[usize] {
        &self.s2e
    }

    fn check_image(&self, image: &Tensor) -> Result<usize> {
        match *image.shape() {
            [h, w, c] if h == self.grid.height && w == self.grid.width => Ok(c),
            ref s => shape_err(format!(
                "image {s:?} does not match {}x{} grid",
                self.grid.height, self.grid.width
            )),
        }
    }

    fn check_faces(&self, faces: &Tensor) -> Result<usize> {
        match *faces.shape() {
            [f, c] if f == self.face_count() => Ok(c),
            ref s => shape_err(format!(
                "face values {s:?} do not match {} faces at mr {}",
                self.face_count(),
                self.mr
            )),
        }
    }

    /// `[H, W, C]` image to `[F, C]` face values by bilinear sampling at the
    /// face centers.
    pub fn e2s_resample(&self, image: &Tensor) -> Result<Tensor> {
        let c = self.check_image(image)?;
        let px = image.data();
        let mut out = vec![0.0; self.face_count() * c];
        out.par_chunks_mut(c.max(1))
            .zip(&self.e2s)
            .for_each(|(row, s)| {
                for (ch, o) in row.iter_mut().enumerate() {
                    *o = s.interpolate(s.pixels.map(|p| px[p * c + ch]));
                }
            });
        Tensor::new([self.face_count(), c], out)
    }

    /// `[F, C]` face values to an `[H, W, C]` image, each pixel taking the
    /// value of the face containing its center.
    pub fn s2e_resample(&self, faces: &Tensor) -> Result<Tensor> {
        let c = self.check_faces(faces)?;
        let values = faces.data();
        let mut out = vec![0.0; self.grid.pixel_count() * c];
        out.par_chunks_mut(c.max(1))
            .zip(&self.s2e)
            .for_each(|(px, &f)| px.copy_from_slice(&values[f * c..(f + 1) * c]));
        Tensor::new([self.grid.height, self.grid.width, c], out)
    }

    /// Differentiable E2S of a channel-first feature map `[C, H, W]` into
    /// face features `[F, C]`.
    pub fn sample_faces<'t>(&self, features: Var<'t>) -> Result<Var<'t>> {
        let x = features.value();
        let &[c, h, w] = x.shape() else {
            return shape_err(format!("expected [C, H, W] features, got {:?}", x.shape()));
        };
        if h != self.grid.height || w != self.grid.width {
            return shape_err(format!(
                "features {h}x{w} do not match {}x{} grid",
                self.grid.height, self.grid.width
            ));
        }
        let plane = h * w;
        let f = self.face_count();
        let mut out = vec![0.0; f * c];
        for (row, s) in out.chunks_mut(c).zip(&self.e2s) {
            for (ch, o) in row.iter_mut().enumerate() {
                let data = &x.data()[ch * plane..(ch + 1) * plane];
                *o = s.interpolate(s.pixels.map(|p| data[p]));
            }
        }
        let samples = self.e2s.clone();
        let shape = x.shape().to_vec();
        Ok(features
            .tape()
            .record(&[features], Tensor::new([f, c], out)?, move |g| {
                let mut dx = vec![0.0; c * plane];
                for (row, s) in g.data().chunks(c).zip(&samples) {
                    let weights = s.weights();
                    for (ch, &go) in row.iter().enumerate() {
                        for (&p, &wt) in s.pixels.iter().zip(&weights) {
                            dx[ch * plane + p] += wt * go;
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }))
    }
}

/// Points with optional 8-bit colors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_distance(d: f64, at: usize) -> Result<bool> {
    if d.is_nan() || d < 0.0 || d.is_infinite() {
        return Err(Error::Domain(format!("invalid distance {d} at element {at}")));
    }
    Ok(d > 0.0)
}

fn build_cloud(
    directions: impl Iterator<Item = LonLat>,
    distances: &[f64],
    rgb: Option<&[[u8; 3]]>,
) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut colors = rgb.map(|_| Vec::new());
    for (i, (ll, &d)) in directions.zip(distances).enumerate() {
        if !check_distance(d, i)? {
            continue;
        }
        points.push(lonlat_to_point(ll, d));
        if let (Some(colors), Some(rgb)) = (colors.as_mut(), rgb) {
            colors.push(rgb[i]);
        }
    }
    Ok(PointCloud { points, colors })
}

/// Reprojects a row-major equirectangular distance map; zero distances are
/// invalid and skipped.
pub fn pointcloud_from_equirect(
    grid: &EquirectGrid,
    distances: &[f64],
    rgb: Option<&[[u8; 3]]>,
) -> Result<PointCloud> {
    if distances.len() != grid.pixel_count() || rgb.is_some_and(|c| c.len() != distances.len()) {
        return shape_err(format!(
            "{} distances / {:?} colors for a {}x{} grid",
            distances.len(),
            rgb.map(<[_]>::len),
            grid.width,
            grid.height
        ));
    }
    let dirs = (0..grid.pixel_count()).map(|p| {
        pixel_to_lonlat(
            grid,
            (p % grid.width) as f64 + 0.5,
            (p / grid.width) as f64 + 0.5,
        )
        .unwrap()
    });
    build_cloud(dirs, distances, rgb)
}

/// Reprojects per-face distances along the face centers.
pub fn pointcloud_from_faces(
    centers: &[Vec3],
    distances: &[f64],
    rgb: Option<&[[u8; 3]]>,
) -> Result<PointCloud> {
    if distances.len() != centers.len() || rgb.is_some_and(|c| c.len() != distances.len()) {
        return shape_err(format!(
            "{} distances for {} faces",
            distances.len(),
            centers.len()
        ));
    }
    let dirs = centers
        .iter()
        .map(|&c| center_to_lonlat(c))
        .collect::<Result<Vec<_>>>()?;
    build_cloud(dirs.into_iter(), distances, rgb)
}

/// Smooth test signal made of low-degree polynomials of the view direction.
pub fn band_limited_signal(d: Vec3) -> f64 {
    let [x, y, z] = d;
    0.5 + 0.2 * x + 0.15 * y * z + 0.1 * (x * x - y * y) + 0.08 * z * z * z - 0.06 * x * y * z
}

/// Single-channel `[H, W, 1]` test card sampled at pixel centers.
pub fn band_limited_test_card(grid: &EquirectGrid) -> Tensor {
    let w = grid.width;
    Tensor::from_fn([grid.height, w, 1], |p| {
        band_limited_signal(grid.pixel_center_direction(p % w, p / w))
    })
}

pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err(format!("rmse of {:?} and {:?}", a.shape(), b.shape()));
    }
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sq / a.numel() as f64).sqrt())
}

/// Latitude of a pixel-row center, handy for pole-aware checks.
pub fn row_latitude(grid: &EquirectGrid, row: usize) -> f64 {
    ((row as f64 + 0.5) / grid.height as f64 - 0.5) * PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn grid() -> EquirectGrid {
        EquirectGrid::new(128, 64).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn grid_validation() {
        assert!(EquirectGrid::new(100, 64).is_err());
        assert!(EquirectGrid::new(2, 1).is_err());
        assert!(EquirectGrid::new(4, 2).is_ok());
    }

    #[test]
    fn pixel_to_lonlat_examples() {
        let g = grid();
        let (w, h) = (128.0, 64.0);
        let ll = pixel_to_lonlat(&g, w / 2.0, h / 2.0).unwrap();
        assert_eq!((ll.longitude, ll.latitude), (0.0, 0.0));
        let ll = pixel_to_lonlat(&g, 0.0, 0.0).unwrap();
        assert_eq!((ll.longitude, ll.latitude), (-PI, -FRAC_PI_2));
        let ll = pixel_to_lonlat(&g, 0.75 * w, 0.25 * h).unwrap();
        assert!(close(ll.longitude, FRAC_PI_2) && close(ll.latitude, -FRAC_PI_4));
        assert!(pixel_to_lonlat(&g, w, 0.0).is_err());
        assert!(pixel_to_lonlat(&g, 0.0, -0.1).is_err());
    }

    #[test]
    fn center_to_lonlat_examples() {
        let ll = center_to_lonlat([1.0, 0.0, 0.0]).unwrap();
        assert_eq!((ll.longitude, ll.latitude), (0.0, 0.0));
        let ll = center_to_lonlat([0.0, 0.0, 1.0]).unwrap();
        assert_eq!((ll.longitude, ll.latitude), (0.0, FRAC_PI_2));
        let ll = center_to_lonlat([0.0, -1.0, 0.0]).unwrap();
        assert_eq!((ll.longitude, ll.latitude), (-FRAC_PI_2, 0.0));
        // atan2(+0, -1) = pi wraps into [-pi, pi)
        let ll = center_to_lonlat([-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ll.longitude, -PI);
        assert!(center_to_lonlat([0.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn lonlat_to_pixel_examples() {
        let g = grid();
        let zero = LonLat {
            longitude: 0.0,
            latitude: 0.0,
        };
        assert_eq!(lonlat_to_pixel(&g, zero), (64.0, 32.0));
        let east = LonLat {
            longitude: FRAC_PI_2,
            latitude: 0.0,
        };
        assert_eq!(lonlat_to_pixel(&g, east), (96.0, 32.0));
    }

    #[test]
    fn point_examples() {
        let p = lonlat_to_point(
            LonLat {
                longitude: 0.0,
                latitude: 0.0,
            },
            2.0,
        );
        assert_eq!(p, [2.0, 0.0, 0.0]);
        let p = lonlat_to_point(
            LonLat {
                longitude: 1.0,
                latitude: FRAC_PI_2,
            },
            3.0,
        );
        assert!(p[0].abs() < 1e-15 && p[1].abs() < 1e-15 && close(p[2], 3.0));
    }

    #[test]
    fn seam_wraps_to_column_zero() {
        let g = grid();
        let s = BilinearSample::at(&g, 128.0 - 0.3, 32.0);
        let cols: Vec<usize> = s.pixels.iter().map(|p| p % 128).collect();
        assert!(cols.contains(&0) && cols.contains(&127));
        assert!(close(s.weights().iter().sum::<f64>(), 1.0));
    }

    #[test]
    fn pole_rows_clamp() {
        let g = grid();
        let s = BilinearSample::at(&g, 10.0, 0.1);
        assert!(s.pixels.iter().all(|p| p / 128 == 0));
        let s = BilinearSample::at(&g, 10.0, 63.9);
        assert!(s.pixels.iter().all(|p| p / 128 == 63));
    }

    #[test]
    fn table_weights_and_constant_images() {
        let h = MeshHierarchy::new();
        let table = build_projection_table(grid(), &h, 3).unwrap();
        for s in table.e2s() {
            assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(table.s2e().iter().all(|&f| f < 1280));

        let image = Tensor::full([64, 128, 2], 7.0);
        let faces = table.e2s_resample(&image).unwrap();
        assert!(faces.data().iter().all(|&v| v == 7.0));
        let back = table.s2e_resample(&faces).unwrap();
        assert_eq!(back, image);
    }

    #[test]
    fn one_hot_face_paints_its_pixels() {
        let h = MeshHierarchy::new();
        let table = build_projection_table(grid(), &h, 2).unwrap();
        let mut faces = Tensor::zeros([320, 1]);
        faces.data_mut()[17] = 1.0;
        let img = table.s2e_resample(&faces).unwrap();
        for (p, &v) in img.data().iter().enumerate() {
            assert_eq!(v != 0.0, table.s2e()[p] == 17);
        }
    }

    #[test]
    fn longitude_ramp_is_reproduced() {
        let g = grid();
        let h = MeshHierarchy::new();
        let table = build_projection_table(g, &h, 4).unwrap();
        let ramp = Tensor::from_fn([64, 128, 1], |p| ((p % 128) as f64 + 0.5) / 128.0);
        let faces = table.e2s_resample(&ramp).unwrap();
        let level = h.level(4);
        let mut checked = 0;
        for (f, &c) in level.centers().iter().enumerate() {
            let ll = center_to_lonlat(c).unwrap();
            if ll.longitude.abs() < 1.0 {
                let (u, _) = lonlat_to_pixel(&g, ll);
                assert!((faces.data()[f] - u / 128.0).abs() < 1e-12);
                if ll.longitude.abs() < 0.05 {
                    assert!((faces.data()[f] - 0.5).abs() < 0.01);
                }
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn shape_errors() {
        let h = MeshHierarchy::new();
        let table = build_projection_table(grid(), &h, 1).unwrap();
        assert!(table.e2s_resample(&Tensor::zeros([32, 64, 1])).is_err());
        assert!(table.s2e_resample(&Tensor::zeros([81, 1])).is_err());
    }

    #[test]
    fn pointcloud_skips_zero_and_rejects_negative() {
        let g = EquirectGrid::new(8, 4).unwrap();
        let mut d = vec![2.0; 32];
        d[3] = 0.0;
        let cloud = pointcloud_from_equirect(&g, &d, None).unwrap();
        assert_eq!(cloud.len(), 31);
        for p in &cloud.points {
            assert!((norm(*p) - 2.0).abs() < 1e-12);
        }
        d[5] = -1.0;
        assert!(matches!(
            pointcloud_from_equirect(&g, &d, None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn point_roundtrip() {
        let g = grid();
        for p in (0..g.pixel_count()).step_by(37) {
            let ll = pixel_to_lonlat(&g, (p % 128) as f64 + 0.5, (p / 128) as f64 + 0.5).unwrap();
            let d = 0.5 + (p % 11) as f64;
            let point = lonlat_to_point(ll, d);
            let r = norm(point);
            let back = lonlat_to_point(
                center_to_lonlat([point[0] / r, point[1] / r, point[2] / r]).unwrap(),
                r,
            );
            for k in 0..3 {
                assert!((back[k] - point[k]).abs() < 1e-9 * d);
            }
        }
    }
}
