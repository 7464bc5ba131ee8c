//! Losses, ground-truth labels, the synthetic dataset, Adam with cosine
//! annealing, the training loop and rotation-error evaluation.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::{bins_of_angles, geodesic_degrees, uniform_rotation, viewpoint_from_direction, Rotation};
use crate::network::{parse_key_values, NetConfig, RotationNet, Variant, ViewpointDistribution};
use crate::sphermap::{centroid, radial_distance_stream, PointCloud, Stream};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};

/// Probabilities are clamped to `[CLAMP, 1 − CLAMP]` before the logarithm.
pub const CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.5, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) || !(gamma >= 0.0) || !gamma.is_finite() {
            return invalid(format!("focal parameters need alpha in (0,1] and gamma >= 0, got {alpha}, {gamma}"));
        }
        Ok(FocalParams { alpha, gamma })
    }
}

/// Mean focal loss of `y` against binary targets.
pub fn focal_loss(y: &[f64], y_hat: &[bool], p: FocalParams) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return invalid(format!("focal loss: {} probabilities vs {} labels", y.len(), y_hat.len()));
    }
    let total: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&y, &hot)| {
            let y = y.clamp(CLAMP, 1.0 - CLAMP);
            let yt = if hot { y } else { 1.0 - y };
            -p.alpha * (1.0 - yt).powf(p.gamma) * yt.ln()
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// One-hot viewpoint targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GtLabels {
    pub y_hat_phi: Vec<bool>,
    pub y_hat_theta: Vec<bool>,
}

impl GtLabels {
    pub fn hot_phi(&self) -> usize {
        self.y_hat_phi.iter().position(|&b| b).unwrap_or(0)
    }

    pub fn hot_theta(&self) -> usize {
        self.y_hat_theta.iter().position(|&b| b).unwrap_or(0)
    }
}

/// Labels from the bin containing the third column of `r_hat`.
pub fn make_gt_labels(r_hat: &Rotation, height: usize, width: usize) -> Result<GtLabels> {
    if height == 0 || width == 0 {
        return invalid("label grid needs positive dimensions");
    }
    let (h, w) = bins_of_angles(&viewpoint_from_direction(&r_hat.zenith()), height, width);
    let mut y_hat_phi = vec![false; width];
    let mut y_hat_theta = vec![false; height];
    y_hat_phi[w] = true;
    y_hat_theta[h] = true;
    Ok(GtLabels { y_hat_phi, y_hat_theta })
}

pub fn viewpoint_loss(dist: &ViewpointDistribution, gt: &GtLabels, p: FocalParams) -> Result<f64> {
    Ok(focal_loss(&dist.y_phi, &gt.y_hat_phi, p)? + focal_loss(&dist.y_theta, &gt.y_hat_theta, p)?)
}

/// Frobenius distance between two rotations.
pub fn rotation_loss(r: &Rotation, r_hat: &Rotation) -> f64 {
    (r.matrix() - r_hat.matrix()).norm()
}

pub fn total_loss(l_ip: f64, l_vp: f64, lambda: f64) -> f64 {
    l_ip + lambda * l_vp
}

/// Independent random streams derived from one seed by name.
pub fn rng_stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a of the stream name selects the ChaCha stream
    let id = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub cloud: PointCloud,
    pub gt_rotation: Rotation,
}

/// Template shape parameters; the template is the same object for every
/// dataset seed so that training and held-out splits share it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeParams {
    pub points: usize,
    pub template_seed: u64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams { points: 2048, template_seed: 0x5eed }
    }
}

fn box_surface<R: Rng>(rng: &mut R, center: [f64; 3], half: [f64; 3]) -> [f64; 3] {
    let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
    let total: f64 = areas.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    let mut axis = 2;
    for (i, a) in areas.iter().enumerate() {
        if u < *a {
            axis = i;
            break;
        }
        u -= a;
    }
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for i in 0..3 {
        p[i] = center[i] + if i == axis { sign * half[i] } else { rng.gen_range(-half[i]..half[i]) };
    }
    p
}

// Lateral surface of a cone with its base on z = base_z and apex above it.
fn cone_surface<R: Rng>(rng: &mut R, base: [f64; 3], radius: f64, height: f64) -> [f64; 3] {
    // area density grows linearly towards the base
    let s = rng.gen_range(0.0f64..1.0).sqrt();
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    [base[0] + s * radius * a.cos(), base[1] + s * radius * a.sin(), base[2] + (1.0 - s) * height]
}

// Sphere points with local z above `cut` (as a fraction of the radius).
fn cap_surface<R: Rng>(rng: &mut R, center: [f64; 3], radius: f64, cut: f64) -> [f64; 3] {
    let z = rng.gen_range(cut..1.0);
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    [center[0] + radius * r * a.cos(), center[1] + radius * r * a.sin(), center[2] + radius * z]
}

/// The canonical asymmetric object: an offset box, cone and sphere cap,
/// centered and scaled into the unit ball, with radial distance and a
/// per-point pseudo-color.
pub fn template(shape: &ShapeParams) -> Result<PointCloud> {
    if shape.points < 3 {
        return invalid("template needs at least three points");
    }
    let mut rng = rng_stream(shape.template_seed, "template");
    let n_box = shape.points * 2 / 5;
    let n_cone = shape.points * 3 / 10;
    let mut raw = Vec::with_capacity(shape.points);
    let mut base = Vec::with_capacity(shape.points);
    for i in 0..shape.points {
        let (p, c) = if i < n_box {
            (box_surface(&mut rng, [0.6, 0.0, -0.1], [0.5, 0.3, 0.2]), [0.9, 0.2, 0.2])
        } else if i < n_box + n_cone {
            (cone_surface(&mut rng, [-0.3, 0.25, 0.1], 0.35, 0.9), [0.2, 0.8, 0.3])
        } else {
            (cap_surface(&mut rng, [-0.35, -0.5, -0.3], 0.4, -0.2), [0.2, 0.3, 0.9])
        };
        raw.push(p);
        base.push(c);
    }
    let c = centroid(&raw);
    let centered: Vec<[f64; 3]> = raw.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let scale = centered.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
    let points: Vec<[f64; 3]> = centered.iter().map(|p| [p[0] / scale, p[1] / scale, p[2] / scale]).collect();
    let color: Vec<f64> = points
        .iter()
        .zip(&base)
        .flat_map(|(p, b)| (0..3).map(move |i| (b[i] + 0.1 * p[i]).clamp(0.0, 1.0)))
        .collect();
    let mut cloud = PointCloud::new(points, vec![])?;
    let radial = radial_distance_stream(&cloud);
    cloud.streams = vec![radial, Stream { name: "color".into(), channels: 3, values: color }];
    Ok(cloud)
}

/// `n` uniformly rotated copies of the template. Deterministic in `seed`.
pub fn synth_dataset(seed: u64, n: usize, shape: &ShapeParams) -> Result<Vec<Sample>> {
    if n == 0 {
        return invalid("dataset needs at least one sample");
    }
    let canonical = template(shape)?;
    let mut rng = rng_stream(seed, "data");
    (0..n)
        .map(|i| {
            let r = uniform_rotation(&mut rng);
            let points = canonical.points.iter().map(|p| r.apply(p)).collect();
            // attributes are rotation-invariant per point
            let cloud = PointCloud::new(points, canonical.streams.clone())?;
            Ok(Sample { id: i as u64, cloud, gt_rotation: r })
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.txt";

fn sample_file(index: usize) -> String {
    format!("{index:06}.vipc")
}

/// One `VIPC` file per sample plus `manifest.txt` with lines
/// `index id r00 r01 … r22`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let f = fs::File::create(dir.join(sample_file(i)))?;
        s.cloud.write_vipc(BufWriter::new(f))?;
        let _ = write!(manifest, "{i} {}", s.id);
        for x in s.gt_rotation.to_row_major() {
            let _ = write!(manifest, " {x}");
        }
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("{MANIFEST} line {}: expected index, id and 9 reals", n + 1));
        if fields.len() != 11 {
            return Err(bad());
        }
        let index: usize = fields[0].parse().map_err(|_| bad())?;
        let id: u64 = fields[1].parse().map_err(|_| bad())?;
        let m: Vec<f64> = fields[2..].iter().map(|f| f.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let gt_rotation = Rotation::from_row_slice(&m)
            .map_err(|e| Error::Format(format!("{MANIFEST} line {}: {e}", n + 1)))?;
        let f = fs::File::open(dir.join(sample_file(index)))?;
        let cloud = PointCloud::read_vipc(BufReader::new(f))?;
        samples.push(Sample { id, cloud, gt_rotation });
    }
    if samples.is_empty() {
        return Err(Error::Format(format!("{} lists no samples", dir.join(MANIFEST).display())));
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub focal: FocalParams,
    pub seed: u64,
    /// Held-out evaluation period in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub precision: Precision,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 16,
            learning_rate: 1e-3,
            lambda: 100.0,
            focal: FocalParams::default(),
            seed: 0,
            eval_every: 1000,
            precision: Precision::F32,
            net: NetConfig::tiny(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return invalid("iterations and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return invalid(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        FocalParams::new(self.focal.alpha, self.focal.gamma)?;
        self.net.validate()
    }

    /// Applies `key=value` text on top of the current values. Architecture
    /// keys (including `profile`) are forwarded to the network config.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_key_values(text)? {
            let bad = || Error::InvalidArgument(format!("{key}: cannot parse {value:?}"));
            match key.as_str() {
                "iterations" => self.iterations = value.parse().map_err(|_| bad())?,
                "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
                "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad())?,
                "lambda" => self.lambda = value.parse().map_err(|_| bad())?,
                "focal_alpha" => self.focal.alpha = value.parse().map_err(|_| bad())?,
                "focal_gamma" => self.focal.gamma = value.parse().map_err(|_| bad())?,
                "seed" => self.seed = value.parse().map_err(|_| bad())?,
                "eval_every" => self.eval_every = value.parse().map_err(|_| bad())?,
                "precision" => {
                    self.precision = match value.as_str() {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => return Err(bad()),
                    }
                }
                _ => {
                    if !self.net.set(&key, &value)? {
                        return invalid(format!("unknown config key {key:?}"));
                    }
                }
            }
        }
        self.validate()
    }

    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn to_key_value(&self) -> String {
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        format!(
            "iterations={}\nbatch_size={}\nlearning_rate={}\nlambda={}\nfocal_alpha={}\nfocal_gamma={}\nseed={}\neval_every={}\nprecision={precision}\n{}",
            self.iterations,
            self.batch_size,
            self.learning_rate,
            self.lambda,
            self.focal.alpha,
            self.focal.gamma,
            self.seed,
            self.eval_every,
            self.net.to_key_value()
        )
    }
}

/// Cosine annealing from `lr0` at iteration 0 to 0 at iteration `total`.
pub fn cosine_lr(lr0: f64, iter: usize, total: usize) -> f64 {
    lr0 / 2.0 * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos())
}

pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: store.zero_grads(), v: store.zero_grads() }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 - self.beta1.powi(self.step));
        let c2 = T::from_f64(1.0 - self.beta2.powi(self.step));
        let (lr, eps, one) = (T::from_f64(lr), T::from_f64(self.eps), T::one());
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let p = store.tensor_mut(id).data_mut();
            for (k, &g) in grads[i].iter().enumerate() {
                let m = b1 * self.m[i][k] + (one - b1) * g;
                let v = b2 * self.v[i][k] + (one - b2) * g * g;
                self.m[i][k] = m;
                self.v[i][k] = v;
                p[k] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
        }
    }
}

/// Per-sample loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub loss_vp: f64,
    pub loss_ip: f64,
}

/// Forward, loss and parameter gradients for one sample.
pub fn sample_gradients<T: Scalar>(
    net: &RotationNet,
    store: &ParamStore<T>,
    maps: &[Tensor<T>],
    labels: &GtLabels,
    gt: &Rotation,
    lambda: f64,
    focal: FocalParams,
) -> Result<(LossTerms, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let params = net.bind(&mut g, store);
    let out = net.forward(&mut g, &params, maps.to_vec())?;
    let target: Vec<T> = gt.to_row_major().iter().map(|&x| T::from_f64(x)).collect();
    let l_ip = g.distance(out.rotation_var, &target)?;
    let (loss, l_vp) = match out.scores {
        Some(s) => {
            let a = g.focal(s.y_phi, &labels.y_hat_phi, focal.alpha, focal.gamma)?;
            let b = g.focal(s.y_theta, &labels.y_hat_theta, focal.alpha, focal.gamma)?;
            let l_vp = g.add(a, b)?;
            let weighted = g.scale(l_vp, lambda);
            (g.add(l_ip, weighted)?, Some(l_vp))
        }
        None => (l_ip, None),
    };
    g.check_finite()?;
    let grads = g.backward(loss)?;
    let mut acc = store.zero_grads();
    g.accumulate_param_grads(&grads, &mut acc);
    let scalar = |v| g.value(v).data()[0].as_f64();
    let terms = LossTerms { loss: scalar(loss), loss_vp: l_vp.map_or(0.0, scalar), loss_ip: scalar(l_ip) };
    Ok((terms, acc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub terms: LossTerms,
    pub lr: f64,
    pub median_deg: Option<f64>,
}

pub const CSV_HEADER: &str = "iter,loss,loss_vp,loss_ip,lr,median_deg";

pub fn write_csv<W: Write>(rows: &[LogRow], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        let median = r.median_deg.map(|m| m.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{median}", r.iter, r.terms.loss, r.terms.loss_vp, r.terms.loss_ip, r.lr)?;
    }
    w.flush()?;
    Ok(())
}

/// Maps and labels of a dataset, precomputed once.
pub struct Prepared<T> {
    pub maps: Vec<Vec<Tensor<T>>>,
    pub labels: Vec<GtLabels>,
}

pub fn prepare<T: Scalar>(net: &RotationNet, samples: &[Sample], pool: &rayon::ThreadPool) -> Result<Prepared<T>> {
    let cfg = net.config();
    let maps = pool.install(|| samples.par_iter().map(|s| net.input_maps(&s.cloud)).collect::<Result<Vec<_>>>())?;
    let labels = samples
        .iter()
        .map(|s| make_gt_labels(&s.gt_rotation, cfg.output_height(), cfg.output_width()))
        .collect::<Result<_>>()?;
    Ok(Prepared { maps, labels })
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

pub struct TrainOutcome<T> {
    pub store: ParamStore<T>,
    pub log: Vec<LogRow>,
}

/// Runs the optimizer. Batch gradients are reduced in sample order, so the
/// result does not depend on the thread count.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    net: &RotationNet,
    mut store: ParamStore<T>,
    samples: &[Sample],
    heldout: Option<&[Sample]>,
    threads: usize,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return invalid("training set is empty");
    }
    let pool = thread_pool(threads)?;
    let data = prepare::<T>(net, samples, &pool)?;
    let held = heldout.map(|h| prepare::<T>(net, h, &pool)).transpose()?;
    let mut shuffle = rng_stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut adam = Adam::new(&store);
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| {
                    sample_gradients(
                        net,
                        &store,
                        &data.maps[i],
                        &data.labels[i],
                        &samples[i].gt_rotation,
                        cfg.lambda,
                        cfg.focal,
                    )
                })
                .collect::<Vec<_>>()
        });
        let ids: Vec<u64> = batch.iter().map(|&i| samples[i].id).collect();
        let mut total = store.zero_grads();
        let mut terms = LossTerms::default();
        for r in results {
            let (t, grads) = r.map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("iteration {it}, batch sample ids {ids:?}: {m}")),
                e => e,
            })?;
            if !t.loss.is_finite() {
                return Err(Error::NonFinite(format!("iteration {it}: loss {} in batch sample ids {ids:?}", t.loss)));
            }
            terms.loss += t.loss;
            terms.loss_vp += t.loss_vp;
            terms.loss_ip += t.loss_ip;
            for (acc, g) in total.iter_mut().zip(&grads) {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        let n = batch.len() as f64;
        let inv = T::from_f64(1.0 / n);
        for g in total.iter_mut().flatten() {
            *g *= inv;
        }
        terms.loss /= n;
        terms.loss_vp /= n;
        terms.loss_ip /= n;
        let lr = cosine_lr(cfg.learning_rate, it, cfg.iterations);
        adam.update(&mut store, &total, lr);
        let last = it + 1 == cfg.iterations;
        let due = last || (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0);
        let median_deg = match (&held, heldout) {
            (Some(p), Some(h)) if due => Some(evaluate_prepared(net, &store, p, h, &pool)?.median_deg),
            _ => None,
        };
        let row = LogRow { iter: it + 1, terms, lr, median_deg };
        progress(&row);
        log.push(row);
    }
    Ok(TrainOutcome { store, log })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub count: usize,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub acc5: f64,
    pub acc10: f64,
    pub acc15: f64,
    /// Fraction of samples whose predicted bin is within one bin of the
    /// label (cyclically for azimuth); absent for the direct variant.
    pub phi_top1: Option<f64>,
    pub theta_top1: Option<f64>,
    pub errors_deg: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Summary statistics of per-sample errors and bin hits.
pub fn summarize(errors_deg: Vec<f64>, bins: Option<(Vec<bool>, Vec<bool>)>) -> Metrics {
    let n = errors_deg.len() as f64;
    let frac = |t: f64| errors_deg.iter().filter(|&&e| e < t).count() as f64 / n;
    let rate = |hits: &[bool]| hits.iter().filter(|&&b| b).count() as f64 / hits.len() as f64;
    Metrics {
        count: errors_deg.len(),
        mean_deg: errors_deg.iter().sum::<f64>() / n,
        median_deg: median(&errors_deg),
        acc5: frac(5.0),
        acc10: frac(10.0),
        acc15: frac(15.0),
        phi_top1: bins.as_ref().map(|(p, _)| rate(p)),
        theta_top1: bins.as_ref().map(|(_, t)| rate(t)),
        errors_deg,
    }
}

fn evaluate_prepared<T: Scalar>(
    net: &RotationNet,
    store: &ParamStore<T>,
    data: &Prepared<T>,
    samples: &[Sample],
    pool: &rayon::ThreadPool,
) -> Result<Metrics> {
    let preds = pool.install(|| {
        data.maps
            .par_iter()
            .map(|maps| {
                let mut g = Graph::new();
                let params = net.bind(&mut g, store);
                net.forward(&mut g, &params, maps.clone())
                    .map(|o| (o.rotation, o.viewpoint.map(|v| (v.h_max, v.w_max))))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let width = net.config().output_width();
    let errors = preds.iter().zip(samples).map(|((r, _), s)| geodesic_degrees(r, &s.gt_rotation)).collect();
    let bins = match net.config().variant {
        Variant::Full => {
            let mut phi = Vec::with_capacity(samples.len());
            let mut theta = Vec::with_capacity(samples.len());
            for ((_, vp), l) in preds.iter().zip(&data.labels) {
                let (h, w) = vp.expect("full variant decodes a viewpoint");
                let dw = (w as isize - l.hot_phi() as isize).rem_euclid(width as isize);
                phi.push(dw <= 1 || dw == width as isize - 1);
                theta.push(h.abs_diff(l.hot_theta()) <= 1);
            }
            Some((phi, theta))
        }
        Variant::DirectRegression => None,
    };
    Ok(summarize(errors, bins))
}

/// Geodesic error statistics of the model on `samples`. Deterministic and
/// independent of `threads`.
pub fn evaluate<T: Scalar>(net: &RotationNet, store: &ParamStore<T>, samples: &[Sample], threads: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return invalid("evaluation set is empty");
    }
    let pool = thread_pool(threads)?;
    let data = prepare::<T>(net, samples, &pool)?;
    evaluate_prepared(net, store, &data, samples, &pool)
}
