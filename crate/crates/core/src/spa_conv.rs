//! Spatial spherical convolution on equirectangular maps.
//!
//! A `C×H×W` map (rows = inclination bins, columns = azimuth bins) is padded
//! by `P = (K−1)/2` cells so that neighbours across the poles and across the
//! azimuth seam are the true neighbours on the sphere, then convolved with a
//! kernel and with its azimuth-mirrored copy; the elementwise maximum of the
//! two responses is the output.
//!
//! Padding, in the one-based indices of the padded map:
//! 1. centre: `pad(h+P, w+P) = S(h, w)`;
//! 2. across the poles, for `p = 1..P`:
//!    `pad(p, w+P) = pad(2P−p+1, w')` and
//!    `pad(H+P+p, w+P) = pad(H+P−p+1, w')`, where `w' = w ± W/2 + P`
//!    (the column on the opposite meridian);
//! 3. around the seam, over all `H+2P` rows:
//!    `pad(h, p) = pad(h, W+p)` and `pad(h, W+P+p) = pad(h, P+p)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Source index (into the flattened `C×H×W` input) of every cell of the
/// padded `C×(H+2P)×(W+2P)` map.
pub fn pad_index_map(channels: usize, height: usize, width: usize, pad: usize) -> Result<Arc<[u32]>> {
    check_pad(height, width, pad)?;
    type Key = (usize, usize, usize, usize);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<[u32]>>>> = OnceLock::new();
    let key = (channels, height, width, pad);
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().unwrap().get(&key) {
        return Ok(m.clone());
    }
    let map: Arc<[u32]> = build_pad_map(channels, height, width, pad).into();
    cache.lock().unwrap().insert(key, map.clone());
    Ok(map)
}

fn check_pad(height: usize, width: usize, pad: usize) -> Result<()> {
    if !width.is_multiple_of(2) {
        return invalid(format!("spherical padding needs an even azimuth count, got W = {width}"));
    }
    if pad > 0 && (pad >= height || pad > width / 2) {
        return invalid(format!("pad width {pad} too large for a {height}×{width} map"));
    }
    Ok(())
}

// Applies the three padding passes in order on a grid of source indices.
fn build_pad_map(channels: usize, height: usize, width: usize, pad: usize) -> Vec<u32> {
    let (ph, pw) = (height + 2 * pad, width + 2 * pad);
    let mut grid = vec![0u32; ph * pw];
    // One-based accessors for the padded plane.
    let at = |h: usize, w: usize| (h - 1) * pw + (w - 1);
    for h in 1..=height {
        for w in 1..=width {
            grid[at(h + pad, w + pad)] = ((h - 1) * width + (w - 1)) as u32;
        }
    }
    for p in 1..=pad {
        for w in 1..=width {
            let w_opp = if w <= width / 2 { w + width / 2 + pad } else { w - width / 2 + pad };
            grid[at(p, w + pad)] = grid[at(2 * pad - p + 1, w_opp)];
            grid[at(height + pad + p, w + pad)] = grid[at(height + pad - p + 1, w_opp)];
        }
    }
    for h in 1..=ph {
        for p in 1..=pad {
            grid[at(h, p)] = grid[at(h, width + p)];
            grid[at(h, width + pad + p)] = grid[at(h, pad + p)];
        }
    }
    let plane = (height * width) as u32;
    (0..channels as u32)
        .flat_map(|c| grid.iter().map(move |&i| c * plane + i))
        .collect()
}

/// A spherical map padded for a `(2P+1)`-wide kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedMap<T> {
    pub data: Tensor<T>,
    pub pad: usize,
}

/// Pads a `C×H×W` map; `P = 0` returns the input unchanged.
pub fn pad<T: Scalar>(map: &Tensor<T>, pad: usize) -> Result<PaddedMap<T>> {
    let (c, h, w) = dims3(map.shape())?;
    let index = pad_index_map(c, h, w, pad)?;
    let src = map.data();
    let data = index.iter().map(|&i| src[i as usize]).collect();
    Ok(PaddedMap { data: Tensor::new(&[c, h + 2 * pad, w + 2 * pad], data)?, pad })
}

/// Differentiable padding on a graph node.
pub fn pad_var<T: Scalar>(g: &mut Graph<T>, x: Var, pad: usize) -> Result<Var> {
    let (c, h, w) = dims3(g.shape(x))?;
    if pad == 0 {
        check_pad(h, w, 0)?;
        return Ok(x);
    }
    let index = pad_index_map(c, h, w, pad)?;
    g.gather(x, index, &[c, h + 2 * pad, w + 2 * pad])
}

/// Reverses the last (azimuth) axis of a `C_out×C_in×K×K` kernel.
pub fn flip_kernel<T: Scalar>(g: &mut Graph<T>, kernel: Var) -> Result<Var> {
    let shape = g.shape(kernel).to_vec();
    let Some(&k) = shape.last() else {
        return invalid("flip_kernel of a rank-0 tensor");
    };
    let n: usize = shape.iter().product();
    let index: Arc<[u32]> = (0..n).map(|i| (i - i % k + (k - 1 - i % k)) as u32).collect();
    g.gather(kernel, index, &shape)
}

fn dims3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => invalid(format!("expected a C×H×W map, got shape {shape:?}")),
    }
}

fn check_conv(h: usize, w: usize, k: usize, stride: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return invalid(format!("kernel size {k} must be odd"));
    }
    if stride != 1 && stride != 2 {
        return invalid(format!("stride {stride} must be 1 or 2"));
    }
    if stride == 2 && (!h.is_multiple_of(2) || !w.is_multiple_of(2)) {
        return invalid(format!("stride 2 needs even map dimensions, got {h}×{w}"));
    }
    Ok(())
}

/// Symmetric spherical convolution of `x` with the kernel node `kernel`.
pub fn spa_sconv<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: Var, stride: usize) -> Result<Var> {
    let (_, h, w) = dims3(g.shape(x))?;
    let k = *g.shape(kernel).last().unwrap_or(&0);
    check_conv(h, w, k, stride)?;
    let padded = pad_var(g, x, (k - 1) / 2)?;
    g.sym_conv2d(padded, kernel, stride)
}

/// The same operator composed from its primitives: pad, two valid
/// convolutions (kernel and flipped kernel) and an elementwise maximum.
pub fn spa_sconv_composed<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: Var, stride: usize) -> Result<Var> {
    let (_, h, w) = dims3(g.shape(x))?;
    let k = *g.shape(kernel).last().unwrap_or(&0);
    check_conv(h, w, k, stride)?;
    let padded = pad_var(g, x, (k - 1) / 2)?;
    let flipped = flip_kernel(g, kernel)?;
    let a = g.conv2d_valid(padded, kernel, stride)?;
    let b = g.conv2d_valid(padded, flipped, stride)?;
    g.maximum(a, b)
}

/// A learned spherical convolution: `C_out×C_in×K×K` kernel, stride 1 or 2.
#[derive(Clone, Debug)]
pub struct SpaConvLayer {
    pub kernel: ParamId,
    pub kernel_size: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl SpaConvLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) || !(stride == 1 || stride == 2) {
            return invalid(format!("{name}: kernel {kernel_size} / stride {stride}"));
        }
        let kernel = store.add_uniform(
            &format!("{name}.kernel"),
            &[c_out, c_in, kernel_size, kernel_size],
            c_in * kernel_size * kernel_size,
            rng,
        )?;
        Ok(SpaConvLayer { kernel, kernel_size, stride, c_in, c_out })
    }

    /// `params` maps parameter indices to their leaf nodes in `g`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        spa_sconv(g, x, params[self.kernel.index()], self.stride)
    }
}

/// Cyclic shift of the azimuth (last) axis by `k` columns.
pub fn roll_columns<T: Scalar>(map: &Tensor<T>, k: isize) -> Tensor<T> {
    let shape = map.shape();
    let w = *shape.last().unwrap();
    let data = map
        .data()
        .chunks(w)
        .flat_map(|row| (0..w).map(move |j| row[(j as isize - k).rem_euclid(w as isize) as usize]))
        .collect();
    Tensor::new(shape, data).expect("same shape")
}

/// Reverses the azimuth (last) axis.
pub fn mirror_columns<T: Scalar>(map: &Tensor<T>) -> Tensor<T> {
    let w = *map.shape().last().unwrap();
    let data = map.data().chunks(w).flat_map(|row| row.iter().rev().copied()).collect();
    Tensor::new(map.shape(), data).expect("same shape")
}
