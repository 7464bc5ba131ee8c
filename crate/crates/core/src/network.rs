//! The rotation network: a multi-stream spherical feature pyramid, a
//! viewpoint head that classifies the zenith direction as independent
//! azimuth and inclination bins, a feature transformation that re-samples
//! the spherical features as seen from the predicted zenith, and an
//! in-plane head that regresses the remaining rotation in 6D form.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    bin_rotation, decode_azimuth, decode_inclination, sixd_to_rotation, Rotation, ViewpointAngles,
};
use crate::spa_conv::SpaConvLayer;
use crate::sphermap::{to_spherical_map, PointCloud};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, SparseMap, Tensor, Var};

/// Residual blocks per encoder stage.
pub const BLOCKS_PER_STAGE: usize = 2;
const COPY_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Viewpoint classification, feature transformation, residual regression.
    Full,
    /// Ablation: regress the whole rotation from the untransformed features.
    DirectRegression,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub stage_widths: [usize; 4],
    pub channels: usize,
    pub vp_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// 2 normally; 1 keeps the first stage at input resolution.
    pub stem_stride: usize,
    pub neighbors: usize,
    pub streams: Vec<(String, usize)>,
    pub variant: Variant,
}

impl NetConfig {
    /// Widths of a ResNet18-sized backbone.
    pub fn paper() -> Self {
        NetConfig {
            stage_widths: [64, 128, 256, 512],
            channels: 128,
            vp_channels: 256,
            input_height: 64,
            input_width: 64,
            stem_stride: 2,
            neighbors: 3,
            streams: vec![("radial".into(), 1), ("color".into(), 3)],
            variant: Variant::Full,
        }
    }

    pub fn tiny() -> Self {
        NetConfig { stage_widths: [16, 32, 64, 128], channels: 64, vp_channels: 128, ..Self::paper() }
    }

    /// Single-core desk profile: 32×32 input, 16×16 features.
    pub fn micro() -> Self {
        NetConfig {
            stage_widths: [8, 16, 16, 32],
            channels: 32,
            vp_channels: 32,
            input_height: 32,
            input_width: 32,
            ..Self::paper()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            _ => invalid(format!("unknown architecture profile {name:?}")),
        }
    }

    pub fn output_height(&self) -> usize {
        self.input_height / self.stem_stride
    }

    pub fn output_width(&self) -> usize {
        self.input_width / self.stem_stride
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, s) = (self.input_height, self.input_width, self.stem_stride);
        if s != 1 && s != 2 {
            return invalid(format!("stem stride must be 1 or 2, got {s}"));
        }
        // three strided stages after the stem must leave at least two rows
        // for the padded 3×3 kernels
        if h % (16 * s) != 0 || w % (16 * s) != 0 || h == 0 || w == 0 {
            return invalid(format!("input resolution {h}×{w} must be a positive multiple of {}", 16 * s));
        }
        if self.stage_widths.contains(&0) || self.channels == 0 || self.vp_channels == 0 {
            return invalid("channel widths must be positive");
        }
        if self.streams.is_empty() || self.streams.iter().any(|(_, c)| *c == 0) {
            return invalid("at least one stream with positive channel count is required");
        }
        let cells = self.output_height() * self.output_width();
        if self.neighbors == 0 || self.neighbors > cells {
            return invalid(format!("neighbor count {} outside 1..={cells}", self.neighbors));
        }
        Ok(())
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let widths: Vec<String> = self.stage_widths.iter().map(|w| w.to_string()).collect();
        let streams: Vec<String> = self.streams.iter().map(|(n, c)| format!("{n}:{c}")).collect();
        let _ = writeln!(s, "stage_widths={}", widths.join(","));
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "vp_channels={}", self.vp_channels);
        let _ = writeln!(s, "input_height={}", self.input_height);
        let _ = writeln!(s, "input_width={}", self.input_width);
        let _ = writeln!(s, "stem_stride={}", self.stem_stride);
        let _ = writeln!(s, "neighbors={}", self.neighbors);
        let _ = writeln!(s, "streams={}", streams.join(","));
        let variant = match self.variant {
            Variant::Full => "full",
            Variant::DirectRegression => "direct",
        };
        let _ = writeln!(s, "variant={variant}");
        s
    }

    /// Applies one `key=value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| -> Result<usize> {
            v.trim().parse().map_err(|_| Error::InvalidArgument(format!("{key}: expected an integer, got {v:?}")))
        };
        match key {
            "profile" => {
                let keep = (self.streams.clone(), self.variant, self.neighbors);
                *self = Self::profile(value.trim())?;
                (self.streams, self.variant, self.neighbors) = keep;
            }
            "stage_widths" => {
                let v: Vec<usize> = value.split(',').map(num).collect::<Result<_>>()?;
                self.stage_widths = v
                    .try_into()
                    .map_err(|_| Error::InvalidArgument("stage_widths needs four entries".into()))?;
            }
            "channels" => self.channels = num(value)?,
            "vp_channels" => self.vp_channels = num(value)?,
            "input_height" => self.input_height = num(value)?,
            "input_width" => self.input_width = num(value)?,
            "stem_stride" => self.stem_stride = num(value)?,
            "neighbors" => self.neighbors = num(value)?,
            "streams" => {
                self.streams = value
                    .split(',')
                    .map(|item| {
                        let (n, c) = item.split_once(':').ok_or_else(|| {
                            Error::InvalidArgument(format!("stream entry {item:?} must be name:channels"))
                        })?;
                        Ok((n.trim().to_string(), num(c)?))
                    })
                    .collect::<Result<_>>()?;
            }
            "variant" => {
                self.variant = match value.trim() {
                    "full" => Variant::Full,
                    "direct" => Variant::DirectRegression,
                    v => return invalid(format!("unknown variant {v:?}")),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut cfg = Self::tiny();
        for (key, value) in parse_key_values(text)? {
            if !cfg.set(&key, &value)? {
                return invalid(format!("unknown architecture key {key:?}"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `key=value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Unit directions at the centers of all `H×W` bins, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f64; 3]>,
}

impl AnchorGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        let mut points = Vec::with_capacity(height * width);
        for h in 0..height {
            let theta = decode_inclination(h, height)?;
            for w in 0..width {
                let phi = decode_azimuth(w, width)?;
                let d = ViewpointAngles { phi, theta }.direction();
                points.push([d.x, d.y, d.z]);
            }
        }
        Ok(AnchorGrid { height, width, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Inverse-square-distance interpolation from the anchors rotated by
/// `r_vpᵀ` back onto the canonical anchors, using the `k` nearest rotated
/// anchors (lowest index on distance ties). An anchor that coincides with a
/// rotated anchor (distance below 1e-9) copies it verbatim.
pub fn interpolation_map(grid: &AnchorGrid, r_vp: &Rotation, k: usize) -> Result<SparseMap<f64>> {
    let n = grid.len();
    if k == 0 || k > n {
        return invalid(format!("neighbor count {k} outside 1..={n}"));
    }
    let inv = r_vp.transpose();
    let rotated: Vec<[f64; 3]> = grid.points.iter().map(|g| inv.apply(g)).collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut src = Vec::with_capacity(n * k);
    let mut weight = Vec::with_capacity(n * k);
    offsets.push(0);
    let mut nearest: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for g in &grid.points {
        nearest.clear();
        for (i, q) in rotated.iter().enumerate() {
            let d = sq_dist(g, q);
            if nearest.len() == k && d >= nearest[k - 1].0 {
                continue;
            }
            let pos = nearest.partition_point(|&(e, _)| e <= d);
            nearest.insert(pos, (d, i));
            nearest.truncate(k);
        }
        if nearest[0].0.sqrt() < COPY_EPS {
            src.push(nearest[0].1 as u32);
            weight.push(1.0);
        } else {
            let total: f64 = nearest.iter().map(|&(d, _)| 1.0 / d).sum();
            for &(d, i) in &nearest {
                src.push(i as u32);
                weight.push(1.0 / d / total);
            }
        }
        offsets.push(src.len());
    }
    Ok(SparseMap { in_len: n, out_shape: vec![grid.height, grid.width], offsets, src, weight })
}

fn cast_map<T: Scalar>(m: &SparseMap<f64>) -> SparseMap<T> {
    SparseMap {
        in_len: m.in_len,
        out_shape: m.out_shape.clone(),
        offsets: m.offsets.clone(),
        src: m.src.clone(),
        weight: m.weight.iter().map(|&w| T::from_f64(w)).collect(),
    }
}

/// Re-samples `C×H×W` features as seen after aligning the predicted zenith
/// with the canonical one. `r_vp` is a constant: gradients reach `s` only.
pub fn transform_features<T: Scalar>(
    g: &mut Graph<T>,
    s: Var,
    grid: &AnchorGrid,
    r_vp: &Rotation,
    k: usize,
) -> Result<Var> {
    let map = interpolation_map(grid, r_vp, k)?;
    g.sparse_mix(s, Arc::new(cast_map(&map)))
}

/// A smooth random signal on the sphere: per channel, a sum of von
/// Mises–Fisher lobes. Sampling it at bin centers gives the same underlying
/// function at any resolution.
#[derive(Clone, Debug)]
pub struct SmoothField {
    channels: usize,
    lobes: Vec<([f64; 3], f64, Vec<f64>)>,
}

impl SmoothField {
    pub fn random<R: Rng>(channels: usize, lobes: usize, rng: &mut R) -> Self {
        let lobes = (0..lobes)
            .map(|_| {
                let d = loop {
                    let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if n > 0.1 && n <= 1.0 {
                        break [v[0] / n, v[1] / n, v[2] / n];
                    }
                };
                let kappa = rng.gen_range(1.0..4.0);
                let amp = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (d, kappa, amp)
            })
            .collect();
        SmoothField { channels, lobes }
    }

    pub fn sample(&self, grid: &AnchorGrid) -> Tensor<f64> {
        let n = grid.len();
        let mut data = vec![0.0; self.channels * n];
        for (j, p) in grid.points.iter().enumerate() {
            for (d, kappa, amp) in &self.lobes {
                let e = (kappa * (p[0] * d[0] + p[1] * d[1] + p[2] * d[2] - 1.0)).exp();
                for (c, a) in amp.iter().enumerate() {
                    data[c * n + j] += a * e;
                }
            }
        }
        Tensor::from_parts(vec![self.channels, grid.height, grid.width], data)
    }
}

/// Relative equivariance discrepancy of one stride-1 spherical convolution
/// `F` under feature transformation by `r`:
/// `‖T_r(F(S)) − F(T_r(S))‖ / ‖T_r(F(S))‖`.
pub fn resampling_discrepancy(
    s: &Tensor<f64>,
    kernel: &Tensor<f64>,
    grid: &AnchorGrid,
    r: &Rotation,
    k: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(s.clone());
    let w = g.input(kernel.clone());
    let fx = crate::spa_conv::spa_sconv(&mut g, x, w, 1)?;
    let lhs = transform_features(&mut g, fx, grid, r, k)?;
    let tx = transform_features(&mut g, x, grid, r, k)?;
    let rhs = crate::spa_conv::spa_sconv(&mut g, tx, w, 1)?;
    let (a, b) = (g.value(lhs).data(), g.value(rhs).data());
    let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    let norm: f64 = a.iter().map(|p| p * p).sum();
    if norm == 0.0 {
        return invalid("discrepancy undefined for an all-zero response");
    }
    Ok((diff / norm).sqrt())
}

fn upsample_index(channels: usize, height: usize, width: usize) -> Arc<[u32]> {
    let (oh, ow) = (2 * height, 2 * width);
    (0..channels)
        .flat_map(|c| {
            (0..oh).flat_map(move |y| (0..ow).map(move |x| ((c * height + y / 2) * width + x / 2) as u32))
        })
        .collect()
}

/// Nearest-neighbour 2× upsampling of a `C×H×W` node.
pub fn upsample2<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (c, h, w) = match *g.shape(x) {
        [c, h, w] => (c, h, w),
        ref s => return invalid(format!("upsample2 expects C×H×W, got {s:?}")),
    };
    g.gather(x, upsample_index(c, h, w), &[c, 2 * h, 2 * w])
}

#[derive(Clone, Debug)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore<f64>, name: &str, c: usize) -> Result<Self> {
        Ok(Norm {
            scale: store.add(&format!("{name}.scale"), Tensor::filled(&[c], 1.0))?,
            shift: store.add(&format!("{name}.shift"), Tensor::zeros(&[c]))?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.instance_standardize(x, p[self.scale.index()], p[self.shift.index()])
    }
}

/// Spherical convolution, optional standardization, optional ReLU.
#[derive(Clone, Debug)]
struct ConvUnit {
    conv: SpaConvLayer,
    norm: Option<Norm>,
    relu: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        norm: bool,
        relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = SpaConvLayer::new(store, &format!("{name}.conv"), c_in, c_out, k, stride, rng)?;
        let norm = if norm { Some(Norm::new(store, &format!("{name}.norm"), c_out)?) } else { None };
        Ok(ConvUnit { conv, norm, relu })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let mut y = self.conv.forward(g, p, x)?;
        if let Some(n) = &self.norm {
            y = n.forward(g, p, y)?;
        }
        if self.relu {
            y = g.relu(y);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    first: ConvUnit,
    second: ConvUnit,
    shortcut: Option<ConvUnit>,
}

impl BasicBlock {
    fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = ConvUnit::new(store, &format!("{name}.a"), c_in, c_out, 3, stride, true, true, rng)?;
        let second = ConvUnit::new(store, &format!("{name}.b"), c_out, c_out, 3, 1, true, false, rng)?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvUnit::new(store, &format!("{name}.down"), c_in, c_out, 1, stride, true, false, rng)?)
        } else {
            None
        };
        Ok(BasicBlock { first, second, shortcut })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let a = self.first.forward(g, p, x)?;
        let b = self.second.forward(g, p, a)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        let sum = g.add(b, skip)?;
        Ok(g.relu(sum))
    }
}

/// ResNet18-shaped encoder for one input stream.
#[derive(Clone, Debug)]
struct StreamEncoder {
    stem: ConvUnit,
    stages: Vec<Vec<BasicBlock>>,
}

impl StreamEncoder {
    fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        name: &str,
        c0: usize,
        widths: &[usize; 4],
        first_stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let stem = ConvUnit::new(store, &format!("{name}.stem"), c0, widths[0], 3, first_stride, true, true, rng)?;
        let mut stages = Vec::new();
        let mut c_in = widths[0];
        for (s, &c_out) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..BLOCKS_PER_STAGE {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, &format!("{name}.stage{}.block{b}", s + 1), c_in, c_out, stride, rng)?);
                c_in = c_out;
            }
            stages.push(blocks);
        }
        Ok(StreamEncoder { stem, stages })
    }

    /// Outputs of the four stages, finest first.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Vec<Var>> {
        let mut y = self.stem.forward(g, p, x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                y = block.forward(g, p, y)?;
            }
            outs.push(y);
        }
        Ok(outs)
    }
}

/// Multi-stream spherical feature pyramid.
#[derive(Clone, Debug)]
pub struct SphericalFpn {
    encoders: Vec<StreamEncoder>,
    laterals: Vec<SpaConvLayer>,
}

impl SphericalFpn {
    fn new<R: Rng>(store: &mut ParamStore<f64>, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let encoders = cfg
            .streams
            .iter()
            .map(|(name, c0)| StreamEncoder::new(store, &format!("fpn.{name}"), *c0, &cfg.stage_widths, cfg.stem_stride, rng))
            .collect::<Result<Vec<_>>>()?;
        let n = cfg.streams.len();
        let laterals = cfg
            .stage_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| SpaConvLayer::new(store, &format!("fpn.lateral{}", i + 1), n * w, cfg.channels, 1, 1, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SphericalFpn { encoders, laterals })
    }

    /// Concatenated per-stage features, finest first.
    pub fn stage_features<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], maps: &[Var]) -> Result<Vec<Var>> {
        if maps.len() != self.encoders.len() {
            return invalid(format!("expected {} stream maps, got {}", self.encoders.len(), maps.len()));
        }
        let res = g.shape(maps[0])[1..].to_vec();
        if maps.iter().any(|&m| g.shape(m)[1..] != res[..]) {
            return invalid("stream maps differ in resolution");
        }
        let per_stream = self
            .encoders
            .iter()
            .zip(maps)
            .map(|(e, &m)| e.forward(g, p, m))
            .collect::<Result<Vec<_>>>()?;
        (0..self.laterals.len())
            .map(|s| {
                let parts: Vec<Var> = per_stream.iter().map(|o| o[s]).collect();
                if parts.len() == 1 {
                    Ok(parts[0])
                } else {
                    g.concat(&parts)
                }
            })
            .collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], maps: &[Var]) -> Result<Var> {
        let stages = self.stage_features(g, p, maps)?;
        let mut top = self.laterals[3].forward(g, p, stages[3])?;
        for s in (0..3).rev() {
            let lat = self.laterals[s].forward(g, p, stages[s])?;
            let up = upsample2(g, top)?;
            top = g.add(lat, up)?;
        }
        Ok(top)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn new<R: Rng>(store: &mut ParamStore<f64>, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Dense {
            weight: store.add_uniform(&format!("{name}.weight"), &[c_out, c_in], c_in, rng)?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
        })
    }

    fn pointwise<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.pointwise(x, p[self.weight.index()], Some(p[self.bias.index()]))
    }

    fn linear<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.weight.index()], Some(p[self.bias.index()]))
    }
}

/// Viewpoint head: per-anchor channel lift, pooling along one angle, and a
/// per-bin scoring MLP for each of azimuth and inclination.
#[derive(Clone, Debug)]
pub struct ViewpointBranch {
    lift: [Dense; 2],
    phi_head: [Dense; 2],
    theta_head: [Dense; 2],
}

/// Raw per-bin scores of the viewpoint head.
#[derive(Clone, Copy, Debug)]
pub struct ViewpointScores {
    /// `W` sigmoid probabilities over azimuth bins.
    pub y_phi: Var,
    /// `H` sigmoid probabilities over inclination bins.
    pub y_theta: Var,
}

impl ViewpointBranch {
    fn new<R: Rng>(store: &mut ParamStore<f64>, c: usize, c_vp: usize, rng: &mut R) -> Result<Self> {
        Ok(ViewpointBranch {
            lift: [Dense::new(store, "vp.lift1", c, c_vp, rng)?, Dense::new(store, "vp.lift2", c_vp, c_vp, rng)?],
            phi_head: [Dense::new(store, "vp.phi1", c_vp, c_vp, rng)?, Dense::new(store, "vp.phi2", c_vp, 1, rng)?],
            theta_head: [
                Dense::new(store, "vp.theta1", c_vp, c_vp, rng)?,
                Dense::new(store, "vp.theta2", c_vp, 1, rng)?,
            ],
        })
    }

    fn head<T: Scalar>(head: &[Dense; 2], g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = head[0].pointwise(g, p, x)?;
        let h = g.relu(h);
        let logits = head[1].pointwise(g, p, h)?;
        let n = g.value(logits).len();
        let flat = g.reshape(logits, &[n])?;
        Ok(g.sigmoid(flat))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], s: Var) -> Result<ViewpointScores> {
        let h = self.lift[0].pointwise(g, p, s)?;
        let h = g.relu(h);
        let s_vp = self.lift[1].pointwise(g, p, h)?;
        let f_phi = g.axis_max_pool(s_vp, 1)?;
        let f_theta = g.axis_max_pool(s_vp, 2)?;
        Ok(ViewpointScores {
            y_phi: Self::head(&self.phi_head, g, p, f_phi)?,
            y_theta: Self::head(&self.theta_head, g, p, f_theta)?,
        })
    }
}

/// Decoded viewpoint prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewpointDistribution {
    pub y_phi: Vec<f64>,
    pub y_theta: Vec<f64>,
    pub w_max: usize,
    pub h_max: usize,
    pub r_vp: Rotation,
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl ViewpointDistribution {
    pub fn decode(y_phi: Vec<f64>, y_theta: Vec<f64>) -> Result<Self> {
        if y_phi.len() < 2 || y_theta.len() < 2 {
            return invalid("viewpoint scores need at least two bins per angle");
        }
        let w_max = argmax(&y_phi);
        let h_max = argmax(&y_theta);
        let r_vp = bin_rotation(h_max, w_max, y_theta.len(), y_phi.len())?;
        Ok(ViewpointDistribution { y_phi, y_theta, w_max, h_max, r_vp })
    }
}

/// In-plane head: three strided spherical convolutions, a flattened global
/// feature, and a two-layer MLP emitting the 6D representation.
#[derive(Clone, Debug)]
pub struct InPlaneBranch {
    convs: Vec<ConvUnit>,
    mlp: [Dense; 2],
}

impl InPlaneBranch {
    fn new<R: Rng>(store: &mut ParamStore<f64>, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        let convs = (0..3)
            .map(|i| ConvUnit::new(store, &format!("ip.conv{}", i + 1), c, c, 3, 2, i < 2, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let flat = c * (cfg.output_height() / 8) * (cfg.output_width() / 8);
        let mlp = [Dense::new(store, "ip.fc1", flat, c, rng)?, Dense::new(store, "ip.fc2", c, 6, rng)?];
        // start at the identity rotation rather than the degenerate zero 6D vector
        *store.tensor_mut(mlp[1].bias) = Tensor::new(&[6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])?;
        Ok(InPlaneBranch { convs, mlp })
    }

    /// Returns the 6-vector node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], s_ip: Var) -> Result<Var> {
        let (h, w) = (g.shape(s_ip)[1], g.shape(s_ip)[2]);
        if h % 8 != 0 || w % 8 != 0 {
            return invalid(format!("in-plane head needs a resolution divisible by 8, got {h}×{w}"));
        }
        let mut y = s_ip;
        for c in &self.convs {
            y = c.forward(g, p, y)?;
        }
        let n = g.value(y).len();
        let flat = g.reshape(y, &[n])?;
        let hdn = self.mlp[0].linear(g, p, flat)?;
        let hdn = g.relu(hdn);
        self.mlp[1].linear(g, p, hdn)
    }

    /// Parameter ids of the final layer (weight, bias).
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.mlp[1].weight, self.mlp[1].bias)
    }
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub scores: Option<ViewpointScores>,
    pub viewpoint: Option<ViewpointDistribution>,
    pub sixd: Var,
    /// Row-major `3×3` node of `R_vp · R_ip`.
    pub rotation_var: Var,
    pub r_ip: Rotation,
    pub rotation: Rotation,
}

pub struct RotationNet {
    config: NetConfig,
    fpn: SphericalFpn,
    viewpoint: Option<ViewpointBranch>,
    in_plane: InPlaneBranch,
    anchors: AnchorGrid,
    interp_cache: Mutex<HashMap<(usize, usize), Arc<SparseMap<f64>>>>,
}

impl RotationNet {
    /// Builds the architecture and its freshly initialized parameters.
    pub fn new<R: Rng>(config: NetConfig, rng: &mut R) -> Result<(Self, ParamStore<f64>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let fpn = SphericalFpn::new(&mut store, &config, rng)?;
        let viewpoint = match config.variant {
            Variant::Full => Some(ViewpointBranch::new(&mut store, config.channels, config.vp_channels, rng)?),
            Variant::DirectRegression => None,
        };
        let in_plane = InPlaneBranch::new(&mut store, &config, rng)?;
        let anchors = AnchorGrid::new(config.output_height(), config.output_width())?;
        let net = RotationNet {
            config,
            fpn,
            viewpoint,
            in_plane,
            anchors,
            interp_cache: Mutex::new(HashMap::new()),
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn anchors(&self) -> &AnchorGrid {
        &self.anchors
    }

    pub fn fpn(&self) -> &SphericalFpn {
        &self.fpn
    }

    pub fn in_plane(&self) -> &InPlaneBranch {
        &self.in_plane
    }

    /// One spherical map per configured stream.
    pub fn input_maps<T: Scalar>(&self, cloud: &PointCloud) -> Result<Vec<Tensor<T>>> {
        self.config
            .streams
            .iter()
            .map(|(name, c)| {
                let m = to_spherical_map(cloud, name, self.config.input_height, self.config.input_width)?;
                if m.channels != *c {
                    return invalid(format!("stream {name:?} has {} channels, expected {c}", m.channels));
                }
                Ok(m.to_tensor())
            })
            .collect()
    }

    /// Leaf nodes for every parameter, indexed by parameter id.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Vec<Var> {
        store.ids().map(|id| g.param(store, id)).collect()
    }

    fn interpolation(&self, h_max: usize, w_max: usize, r_vp: &Rotation) -> Result<Arc<SparseMap<f64>>> {
        let key = (h_max, w_max);
        if let Some(m) = self.interp_cache.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let m = Arc::new(interpolation_map(&self.anchors, r_vp, self.config.neighbors)?);
        self.interp_cache.lock().unwrap().insert(key, m.clone());
        Ok(m)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var], maps: Vec<Tensor<T>>) -> Result<ForwardOutput> {
        let (h0, w0) = (self.config.input_height, self.config.input_width);
        if maps.len() != self.config.streams.len() {
            return invalid(format!("expected {} stream maps, got {}", self.config.streams.len(), maps.len()));
        }
        for (m, (name, c)) in maps.iter().zip(&self.config.streams) {
            if m.shape() != [*c, h0, w0] {
                return invalid(format!("stream {name:?}: map shape {:?}, expected {:?}", m.shape(), [*c, h0, w0]));
            }
        }
        let inputs: Vec<Var> = maps.into_iter().map(|m| g.input(m)).collect();
        let s = self.fpn.forward(g, params, &inputs)?;

        let (scores, viewpoint, s_ip, r_vp) = match &self.viewpoint {
            Some(vb) => {
                let scores = vb.forward(g, params, s)?;
                let dist = ViewpointDistribution::decode(
                    g.value(scores.y_phi).to_f64(),
                    g.value(scores.y_theta).to_f64(),
                )?;
                let map = self.interpolation(dist.h_max, dist.w_max, &dist.r_vp)?;
                let s_ip = g.sparse_mix(s, Arc::new(cast_map(&map)))?;
                let r_vp = dist.r_vp;
                (Some(scores), Some(dist), s_ip, r_vp)
            }
            None => (None, None, s, Rotation::identity()),
        };

        let sixd = self.in_plane.forward(g, params, s_ip)?;
        let raw: [f64; 6] = std::array::from_fn(|i| g.value(sixd).data()[i].as_f64());
        let r_ip = sixd_to_rotation(&raw)?;
        let r_ip_var = g.sixd_to_matrix(sixd)?;
        let m: Vec<T> = r_vp.to_row_major().iter().map(|&x| T::from_f64(x)).collect();
        let rotation_var = g.const_matmul(&m, 3, r_ip_var)?;
        g.check_finite()?;
        Ok(ForwardOutput {
            features: s,
            scores,
            viewpoint,
            sixd,
            rotation_var,
            r_ip,
            rotation: r_vp * r_ip,
        })
    }

    /// Inference on a normalized cloud.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, cloud: &PointCloud) -> Result<Prediction> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, store);
        let out = self.forward(&mut g, &params, self.input_maps(cloud)?)?;
        Ok(Prediction { rotation: out.rotation, r_ip: out.r_ip, viewpoint: out.viewpoint })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub rotation: Rotation,
    pub r_ip: Rotation,
    pub viewpoint: Option<ViewpointDistribution>,
}
