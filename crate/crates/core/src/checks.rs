//! Self-checks shared by the command line and the acceptance suite:
//! finite-difference gradient checks for every differentiable operation and
//! the two equivariance measurements.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::uniform_rotation;
use crate::network::{resampling_discrepancy, transform_features, AnchorGrid, NetConfig, RotationNet, SmoothField, Variant};
use crate::spa_conv::{roll_columns, spa_sconv};
use crate::tensor::gradcheck::{self, project, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};
use crate::training::{make_gt_labels, FocalParams};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

// Values bounded away from the ReLU / max kinks.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

fn elementwise(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let a = away_from_zero(&[3, 4], rng);
    let b = random(&[3, 4], rng).map(|x| x * 0.05);
    gradcheck::check(&[a, b], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let r = g.relu(d);
        let x = g.maximum(m, r)?;
        let sg = g.sigmoid(x);
        let sc = g.scale(sg, 1.5);
        project(g, sc, 1)
    })
}

fn conv2d(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for stride in [1, 2] {
        let x = random(&[2, 6, 7], rng);
        let k = random(&[3, 2, 3, 3], rng);
        report.merge(&gradcheck::check(&[x, k], |g, v| {
            let y = g.conv2d_valid(v[0], v[1], stride)?;
            project(g, y, 2)
        })?);
    }
    Ok(report)
}

fn spa(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for stride in [1, 2] {
        let x = random(&[2, 4, 8], rng);
        let k = random(&[2, 2, 3, 3], rng);
        report.merge(&gradcheck::check(&[x, k], |g, v| {
            let y = spa_sconv(g, v[0], v[1], stride)?;
            project(g, y, 3)
        })?);
    }
    Ok(report)
}

fn dense(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut report = gradcheck::check(&[random(&[5], rng), random(&[3, 5], rng), random(&[3], rng)], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, 4)
    })?;
    report.merge(&gradcheck::check(
        &[random(&[4, 3, 5], rng), random(&[2, 4], rng), random(&[2], rng)],
        |g, v| {
            let y = g.pointwise(v[0], v[1], Some(v[2]))?;
            project(g, y, 5)
        },
    )?);
    Ok(report)
}

fn pooling(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = random(&[3, 4, 6], rng);
    gradcheck::check(&[x], |g, v| {
        let a = g.axis_max_pool(v[0], 1)?;
        let b = g.axis_max_pool(v[0], 2)?;
        let c = g.global_avg_pool(v[0])?;
        let (pa, pb, pc) = (project(g, a, 6)?, project(g, b, 7)?, project(g, c, 8)?);
        let s = g.add(pa, pb)?;
        g.add(s, pc)
    })
}

fn standardize(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    gradcheck::check(&[random(&[3, 4, 5], rng), random(&[3], rng), random(&[3], rng)], |g, v| {
        let y = g.instance_standardize(v[0], v[1], v[2])?;
        project(g, y, 9)
    })
}

fn interpolation(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let grid = AnchorGrid::new(6, 8)?;
    let r = uniform_rotation(rng);
    gradcheck::check(&[random(&[2, 6, 8], rng)], |g, v| {
        let y = transform_features(g, v[0], &grid, &r, 3)?;
        project(g, y, 10)
    })
}

fn focal(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let labels: Vec<bool> = (0..12).map(|i| i == 5).collect();
    let p = FocalParams::default();
    gradcheck::check(&[random(&[12], rng).map(|x| 3.0 * x)], |g, v| {
        let y = g.sigmoid(v[0]);
        g.focal(y, &labels, p.alpha, p.gamma)
    })
}

fn rotation(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let r_vp = uniform_rotation(rng).to_row_major();
    let target = uniform_rotation(rng).to_row_major();
    gradcheck::check(&[random(&[6], rng)], |g, v| {
        let r_ip = g.sixd_to_matrix(v[0])?;
        let r = g.const_matmul(&r_vp, 3, r_ip)?;
        g.distance(r, &target)
    })
}

/// Smallest network the architecture admits: 16×16 inputs with a stride-1
/// stem, two channels everywhere.
pub fn gradcheck_config() -> NetConfig {
    NetConfig {
        stage_widths: [2, 2, 2, 2],
        channels: 2,
        vp_channels: 2,
        input_height: 16,
        input_width: 16,
        stem_stride: 1,
        neighbors: 3,
        streams: vec![("radial".into(), 1), ("color".into(), 1)],
        variant: Variant::Full,
    }
}

// Parameters moved off their initial values (zero biases, unit scales) so
// that no pre-activation sits exactly on a ReLU or max kink.
fn generic_params(store: &crate::tensor::ParamStore<f64>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    store
        .ids()
        .map(|id| {
            let t = store.tensor(id);
            let data = t.data().iter().map(|&x| x + rng.gen_range(-0.1..0.1)).collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        })
        .collect()
}

fn network_inputs(net: &RotationNet, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let cfg = net.config();
    cfg.streams
        .iter()
        .map(|(_, c)| random(&[*c, cfg.input_height, cfg.input_width], rng).map(|x| x.abs()))
        .collect()
}

fn in_plane(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (net, store) = RotationNet::new(gradcheck_config(), rng)?;
    let cfg = net.config();
    let s_ip = random(&[cfg.channels, cfg.output_height(), cfg.output_width()], rng);
    let mut inputs = generic_params(&store, rng);
    let n = inputs.len();
    inputs.push(s_ip);
    // in-plane parameters and the feature map
    let wrt: Vec<usize> = store
        .ids()
        .filter(|&id| store.name(id).starts_with("ip."))
        .map(|id| id.index())
        .chain([n])
        .collect();
    gradcheck::check_selected(&inputs, Some(&wrt), |g, v| {
        let sixd = net.in_plane().forward(g, &v[..n], v[n])?;
        let r = g.sixd_to_matrix(sixd)?;
        project(g, r, 11)
    })
}

/// Total loss of a full forward pass with respect to every parameter.
fn network(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (net, store) = RotationNet::new(gradcheck_config(), rng)?;
    let maps = network_inputs(&net, rng);
    let gt = uniform_rotation(rng);
    let cfg = net.config();
    let labels = make_gt_labels(&gt, cfg.output_height(), cfg.output_width())?;
    let target = gt.to_row_major();
    let p = FocalParams::default();
    let n = store.len();
    let mut inputs = generic_params(&store, rng);
    inputs.extend(maps.iter().cloned());
    let wrt: Vec<usize> = (0..n).collect();
    gradcheck::check_selected(&inputs, Some(&wrt), |g, v| {
        let (params, maps) = v.split_at(n);
        let out = forward_on_vars(&net, g, params, maps)?;
        let scores = out.scores.expect("full variant");
        let l_ip = g.distance(out.rotation_var, &target)?;
        let a = g.focal(scores.y_phi, &labels.y_hat_phi, p.alpha, p.gamma)?;
        let b = g.focal(scores.y_theta, &labels.y_hat_theta, p.alpha, p.gamma)?;
        let l_vp = g.add(a, b)?;
        let w = g.scale(l_vp, 100.0);
        g.add(l_ip, w)
    })
}

fn forward_on_vars(
    net: &RotationNet,
    g: &mut Graph<f64>,
    params: &[Var],
    maps: &[Var],
) -> Result<crate::network::ForwardOutput> {
    let tensors: Vec<Tensor<f64>> = maps.iter().map(|&m| g.value(m).clone()).collect();
    // maps are constants here; parameters are the checked leaves
    net.forward(g, params, tensors)
}

pub type CheckFn = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

/// Every gradient check by name, in a fixed order.
pub const GRADCHECKS: &[(&str, CheckFn)] = &[
    ("elementwise", elementwise),
    ("conv2d_valid", conv2d),
    ("spa_sconv", spa),
    ("linear", dense),
    ("pooling", pooling),
    ("instance_standardize", standardize),
    ("interpolation", interpolation),
    ("focal_loss", focal),
    ("rotation_loss", rotation),
    ("i_branch", in_plane),
    ("network", network),
];

/// Runs the named check (or all of them for `"all"`), each from its own
/// seeded generator.
pub fn run_gradchecks(which: &str, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let selected: Vec<_> = GRADCHECKS.iter().filter(|(n, _)| which == "all" || *n == which).collect();
    if selected.is_empty() {
        let names: Vec<&str> = GRADCHECKS.iter().map(|(n, _)| *n).collect();
        return invalid(format!("unknown gradient check {which:?}; expected all or one of {}", names.join(", ")));
    }
    selected
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            Ok((*name, f(&mut rng)?))
        })
        .collect()
}

/// Largest `|F(roll(x)) − roll(F(x))|` of a stride-1 spherical convolution
/// over `trials` random inputs, kernels, resolutions and shifts.
pub fn shift_equivariance_error(trials: usize, resolutions: &[usize], seed: u64) -> Result<f64> {
    if resolutions.is_empty() || resolutions.iter().any(|&r| r < 2 || r % 2 != 0) {
        return invalid("resolutions must be even and at least 2");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = resolutions[t % resolutions.len()];
        let (c_in, c_out) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let k = if n >= 4 && rng.gen_bool(0.5) { 3 } else { 1 };
        let x = random(&[c_in, n, n], &mut rng);
        let kernel = random(&[c_out, c_in, k, k], &mut rng);
        let shift = rng.gen_range(0..n as isize);
        let conv = |input: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut g = Graph::new();
            let (xv, kv) = (g.input(input.clone()), g.input(kernel.clone()));
            let y = spa_sconv(&mut g, xv, kv, 1)?;
            Ok(g.value(y).clone())
        };
        let lhs = conv(&roll_columns(&x, shift))?;
        let rhs = roll_columns(&conv(&x)?, shift);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Mean resampling discrepancy per resolution for one fixed smooth field,
/// one fixed random stride-1 layer and `trials` fixed random rotations.
pub fn resampling_convergence(trials: usize, resolutions: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 2;
    let field = SmoothField::random(channels, 8, &mut rng);
    let kernel = random(&[channels, channels, 3, 3], &mut rng);
    let rotations: Vec<_> = (0..trials).map(|_| uniform_rotation(&mut rng)).collect();
    resolutions
        .iter()
        .map(|&n| {
            let grid = AnchorGrid::new(n, n)?;
            let s = field.sample(&grid);
            let total = rotations
                .iter()
                .map(|r| resampling_discrepancy(&s, &kernel, &grid, r, 3))
                .sum::<Result<f64>>()?;
            Ok((n, total / trials as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_gradient_check_passes() {
        for (name, report) in run_gradchecks("all", 0).unwrap() {
            assert!(report.passed(), "{name}: {report:?}");
            assert!(report.entries > 0);
        }
    }

    #[test]
    fn unknown_check_is_rejected() {
        assert!(run_gradchecks("nope", 0).is_err());
    }

    #[test]
    fn shift_error_is_roundoff() {
        assert!(shift_equivariance_error(10, &[8, 16], 1).unwrap() < 1e-12);
    }
}
