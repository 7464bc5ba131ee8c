//! Point clouds with per-point attribute streams, their conversion into
//! equirectangular spherical maps, and the `VIPC` / `VISM` file formats.

use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::geometry::{bins_of_angles, viewpoint_from_direction, UnitVector};
use crate::tensor::{read_exact, read_u32, Scalar, Tensor};

pub const DEFAULT_RESOLUTION: usize = 64;

/// One named attribute stream: `N×channels` values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub name: String,
    pub channels: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub streams: Vec<Stream>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, streams: Vec<Stream>) -> Result<Self> {
        if points.is_empty() {
            return invalid("point cloud needs at least one point");
        }
        for s in &streams {
            if s.channels == 0 || s.values.len() != points.len() * s.channels {
                return invalid(format!(
                    "stream {:?}: {} values for {} points × {} channels",
                    s.name,
                    s.values.len(),
                    points.len(),
                    s.channels
                ));
            }
            if s.name.is_empty() || s.name.len() > u8::MAX as usize {
                return invalid(format!("stream name {:?} must be 1..=255 bytes", s.name));
            }
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        Ok(PointCloud { points, streams })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn stream(&self, name: &str) -> Option<&Stream> {
        self.streams.iter().find(|s| s.name == name)
    }

    pub fn centroid(&self) -> [f64; 3] {
        centroid(&self.points)
    }

    pub fn write_vipc<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"VIPC")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.points.len() as u32).to_le_bytes())?;
        w.write_all(&(self.streams.len() as u32).to_le_bytes())?;
        for s in &self.streams {
            w.write_all(&[s.name.len() as u8])?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&(s.channels as u32).to_le_bytes())?;
        }
        for p in &self.points {
            for &x in p {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        for s in &self.streams {
            for &x in &s.values {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_vipc<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != b"VIPC" {
            return Err(Error::Format(format!("bad point-cloud magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported point-cloud version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let stream_count = read_u32(&mut r)? as usize;
        let mut catalog = Vec::with_capacity(stream_count.min(256));
        for _ in 0..stream_count {
            let mut len = [0u8; 1];
            read_exact(&mut r, &mut len)?;
            let mut name = vec![0u8; len[0] as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("stream name is not UTF-8".into()))?;
            let channels = read_u32(&mut r)? as usize;
            catalog.push((name, channels));
        }
        let coords = read_f32s(&mut r, n * 3)?;
        let points = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut streams = Vec::with_capacity(catalog.len());
        for (name, channels) in catalog {
            let values = read_f32s(&mut r, n * channels)?;
            streams.push(Stream { name, channels, values });
        }
        PointCloud::new(points, streams).map_err(|e| Error::Format(e.to_string()))
    }
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; count * 4];
    read_exact(r, &mut raw)?;
    Ok(raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for i in 0..3 {
            c[i] += p[i];
        }
    }
    c.map(|x| x / n)
}

/// Maps every point to `(p − t) / ‖s‖`.
pub fn normalize_cloud(points: &[[f64; 3]], t: [f64; 3], s: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    let norm = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return invalid(format!("size vector {s:?} must have positive finite norm"));
    }
    Ok(points
        .iter()
        .map(|p| [(p[0] - t[0]) / norm, (p[1] - t[1]) / norm, (p[2] - t[2]) / norm])
        .collect())
}

/// Per-point distance to the origin, as a one-channel stream.
pub fn radial_distance_stream(cloud: &PointCloud) -> Stream {
    Stream {
        name: "radial".into(),
        channels: 1,
        values: cloud
            .points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .collect(),
    }
}

/// Dense `C×H×W` signal on the (inclination, azimuth) grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// Cells that received a point; zero means the conversion saw no usable
    /// point.
    pub occupied: usize,
}

impl SphericalMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        check_resolution(height, width)?;
        Ok(SphericalMap { channels, height, width, data: vec![0.0; channels * height * width], occupied: 0 })
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&x| T::from_f64(x)).collect(),
        )
        .expect("consistent dimensions")
    }

    pub fn write_vism<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"VISM")?;
        for v in [1u32, self.channels as u32, self.height as u32, self.width as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_vism<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != b"VISM" {
            return Err(Error::Format(format!("bad spherical-map magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported spherical-map version {version}")));
        }
        let c = read_u32(&mut r)? as usize;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let data = read_f32s(&mut r, c * h * w)?;
        let occupied = (0..h * w).filter(|&i| (0..c).any(|ch| data[ch * h * w + i] != 0.0)).count();
        Ok(SphericalMap { channels: c, height: h, width: w, data, occupied })
    }
}

fn check_resolution(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 || !width.is_multiple_of(2) {
        return invalid(format!("spherical resolution {height}×{width} needs H, W ≥ 2 and even W"));
    }
    Ok(())
}

/// Zero-based `(h, w)` cell of a point's direction, `None` at the origin.
pub fn bin_of_point(p: &[f64; 3], height: usize, width: usize) -> Option<(usize, usize)> {
    let dir = UnitVector::normalize(p[0], p[1], p[2])?;
    Some(bins_of_angles(&viewpoint_from_direction(&dir), height, width))
}

/// Each cell takes the attributes of its farthest point (lowest index on
/// ties); cells without points stay zero and points at the origin are
/// skipped.
pub fn to_spherical_map(cloud: &PointCloud, stream: &str, height: usize, width: usize) -> Result<SphericalMap> {
    check_resolution(height, width)?;
    let s = cloud
        .stream(stream)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown stream {stream:?}")))?;
    let mut best: Vec<Option<(f64, usize)>> = vec![None; height * width];
    for (i, p) in cloud.points.iter().enumerate() {
        let Some((h, w)) = bin_of_point(p, height, width) else { continue };
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let cell = &mut best[h * width + w];
        if cell.is_none_or(|(rb, _)| r > rb) {
            *cell = Some((r, i));
        }
    }
    let mut map = SphericalMap::zeros(s.channels, height, width)?;
    for (cell, b) in best.iter().enumerate() {
        if let Some((_, i)) = b {
            map.occupied += 1;
            for c in 0..s.channels {
                map.data[c * height * width + cell] = s.values[i * s.channels + c];
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_z;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cloud(points: Vec<[f64; 3]>, attr: Vec<f64>) -> PointCloud {
        PointCloud::new(points, vec![Stream { name: "a".into(), channels: 1, values: attr }]).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let points: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let color: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.1..1.0)).collect();
        let mut c = PointCloud::new(points, vec![Stream { name: "color".into(), channels: 3, values: color }]).unwrap();
        let radial = radial_distance_stream(&c);
        c.streams.push(radial);
        c
    }

    #[test]
    fn normalize_examples() {
        let t = [1.0, -2.0, 3.0];
        assert_eq!(normalize_cloud(&[t], t, [1.0, 1.0, 1.0]).unwrap(), vec![[0.0; 3]]);
        let s = [0.0, 2.0, 0.0];
        assert_eq!(normalize_cloud(&[[2.0, 0.0, 0.0]], [0.0; 3], s).unwrap(), vec![[1.0, 0.0, 0.0]]);
        assert!(normalize_cloud(&[t], t, [0.0; 3]).is_err());
    }

    #[test]
    fn normalized_random_cloud_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let pts: Vec<[f64; 3]> = (0..500).map(|_| std::array::from_fn(|_| rng.gen_range(-5.0..9.0))).collect();
            let s = std::array::from_fn(|_| rng.gen_range(0.1..3.0));
            let out = normalize_cloud(&pts, centroid(&pts), s).unwrap();
            assert!(centroid(&out).iter().all(|x| x.abs() < 1e-9));
        }
    }

    #[test]
    fn radial_distance_examples() {
        let c = cloud(vec![[0.0; 3], [3.0, 4.0, 0.0]], vec![0.0, 0.0]);
        assert_eq!(radial_distance_stream(&c).values, vec![0.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 100);
        let r = radial_distance_stream(&c);
        for (p, v) in c.points.iter().zip(&r.values) {
            assert!((p.iter().map(|x| x * x).sum::<f64>().sqrt() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_zenith_point_fills_one_cell() {
        let c = cloud(vec![[0.0, 0.0, 1.0]], vec![7.0]);
        let m = to_spherical_map(&c, "a", 4, 4).unwrap();
        // brute force over all cells
        for h in 0..4 {
            for w in 0..4 {
                let expect = if (h, w) == (0, 0) { 7.0 } else { 0.0 };
                assert_eq!(m.get(0, h, w), expect);
            }
        }
        assert_eq!(m.occupied, 1);
    }

    #[test]
    fn farthest_point_wins_and_empty_cells_are_zero() {
        let dir = [0.3_f64, 0.5, 0.8];
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let near = dir.map(|x| 0.5 * x / n);
        let far = dir.map(|x| 0.9 * x / n);
        let c = cloud(vec![near, far, [0.0; 3]], vec![1.0, 2.0, 3.0]);
        let m = to_spherical_map(&c, "a", 8, 8).unwrap();
        let (h, w) = bin_of_point(&far, 8, 8).unwrap();
        assert_eq!(m.get(0, h, w), 2.0);
        assert_eq!(m.occupied, 1);
        assert_eq!(m.data.iter().filter(|&&x| x != 0.0).count(), 1);
        // ties keep the lowest index
        let c = cloud(vec![far, far], vec![1.0, 2.0]);
        assert_eq!(to_spherical_map(&c, "a", 8, 8).unwrap().get(0, h, w), 1.0);
    }

    #[test]
    fn origin_only_cloud_gives_empty_map() {
        let c = cloud(vec![[0.0; 3]; 3], vec![1.0, 2.0, 3.0]);
        let m = to_spherical_map(&c, "a", 4, 6).unwrap();
        assert_eq!(m.occupied, 0);
        assert!(m.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bad_resolution_or_stream() {
        let c = cloud(vec![[1.0, 0.0, 0.0]], vec![1.0]);
        assert!(to_spherical_map(&c, "a", 4, 5).is_err());
        assert!(to_spherical_map(&c, "a", 1, 4).is_err());
        assert!(to_spherical_map(&c, "b", 4, 4).is_err());
    }

    #[test]
    fn azimuth_rotation_shifts_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (16, 24);
        for k in [1usize, 5, 12, 23] {
            let c = random_cloud(&mut rng, 800);
            let r = rot_z(2.0 * PI * k as f64 / w as f64).unwrap();
            let mut rotated = c.clone();
            rotated.points = c.points.iter().map(|p| r.apply(p)).collect();
            let a = to_spherical_map(&c, "color", h, w).unwrap();
            let b = to_spherical_map(&rotated, "color", h, w).unwrap();
            for ch in 0..3 {
                for hh in 0..h {
                    for ww in 0..w {
                        assert_eq!(b.get(ch, hh, (ww + k) % w), a.get(ch, hh, ww));
                    }
                }
            }
        }
    }

    #[test]
    fn entries_are_zero_or_verbatim_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cloud(&mut rng, 300);
        let m = to_spherical_map(&c, "color", 8, 8).unwrap();
        let s = c.stream("color").unwrap();
        for cell in 0..64 {
            let v: Vec<f64> = (0..3).map(|ch| m.data[ch * 64 + cell]).collect();
            if v.iter().all(|&x| x == 0.0) {
                continue;
            }
            assert!(s.values.chunks(3).any(|row| row == v.as_slice()));
        }
    }

    #[test]
    fn permutation_invariance_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cloud(&mut rng, 400);
        let mut order: Vec<usize> = (0..c.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = PointCloud::new(
            order.iter().map(|&i| c.points[i]).collect(),
            c.streams
                .iter()
                .map(|s| Stream {
                    name: s.name.clone(),
                    channels: s.channels,
                    values: order.iter().flat_map(|&i| s.values[i * s.channels..(i + 1) * s.channels].to_vec()).collect(),
                })
                .collect(),
        )
        .unwrap();
        for name in ["color", "radial"] {
            assert_eq!(to_spherical_map(&c, name, 16, 16).unwrap(), to_spherical_map(&shuffled, name, 16, 16).unwrap());
        }
    }

    #[test]
    fn file_formats_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cloud(&mut rng, 50);
        let mut buf = Vec::new();
        c.write_vipc(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VIPC");
        assert_eq!(buf.len(), 16 + (1 + 5 + 4) + (1 + 6 + 4) + 50 * 3 * 4 + 50 * 4 * 4);
        let back = PointCloud::read_vipc(buf.as_slice()).unwrap();
        assert_eq!(back.streams.len(), 2);
        for (a, b) in c.points.iter().zip(&back.points) {
            for i in 0..3 {
                assert_eq!(a[i] as f32 as f64, b[i]);
            }
        }
        assert!(matches!(PointCloud::read_vipc(&buf[..20]), Err(Error::Format(_))));

        let m = to_spherical_map(&c, "color", 4, 6).unwrap();
        let mut buf = Vec::new();
        m.write_vism(&mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 3 * 4 * 6 * 4);
        let back = SphericalMap::read_vism(buf.as_slice()).unwrap();
        assert_eq!((back.channels, back.height, back.width), (3, 4, 6));
        assert_eq!(back.occupied, m.occupied);
        assert!(matches!(SphericalMap::read_vism(&b"VIPC"[..]), Err(Error::Format(_))));
    }
}
