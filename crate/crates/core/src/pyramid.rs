//! Gaussian and Laplacian pyramids, plus the learned upsampler that joins
//! adjacent levels inside the network.
//!
//! Reduction blurs with the separable binomial kernel `[1, 4, 6, 4, 1] / 16`
//! (reflect-101 borders) and keeps every second sample, so extents halve
//! with ceiling division. Expansion is the matching binomial interpolation
//! onto the recorded parent extents; taps that fall outside the coarse grid
//! are dropped and the remaining weights renormalized. Both passes
//! accumulate integer-weighted sums in 64 bits, which reproduces constant
//! images exactly.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::ops::ConvParams;
use crate::tensor::{Real, Tensor};

const BINOMIAL: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let last = n as isize - 1;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

/// Extents of each pyramid level, finest first: level `i` (0-based) is
/// `ceil(h / 2^i) x ceil(w / 2^i)`.
pub fn level_extents(h: usize, w: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(levels);
    let (mut ch, mut cw) = (h, w);
    for _ in 0..levels {
        out.push((ch, cw));
        ch = ch.div_ceil(2);
        cw = cw.div_ceil(2);
    }
    out
}

/// Blur with the 5-tap binomial kernel, then drop every other row and column.
pub fn blur_downsample<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("blur_downsample on an empty image"));
    }
    if (h, w) == (1, 1) {
        return Ok(x.clone());
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut rows = vec![0.0f64; h * ow];
    for plane in x.data().chunks(h * w) {
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for ox in 0..ow {
                let centre = 2 * ox as isize;
                let acc: f64 = BINOMIAL
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * src[reflect101(centre + t as isize - 2, w)].f64())
                    .sum();
                rows[y * ow + ox] = acc / 16.0;
            }
        }
        for oy in 0..oh {
            let centre = 2 * oy as isize;
            for ox in 0..ow {
                let acc: f64 = BINOMIAL
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * rows[reflect101(centre + t as isize - 2, h) * ow + ox])
                    .sum();
                out.push(T::of(acc / 16.0));
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Interpolation taps `(coarse index, weight)` for each fine index.
fn expand_taps(coarse: usize, fine: usize) -> Vec<Vec<(usize, f64)>> {
    (0..fine)
        .map(|x| {
            let mut taps = Vec::with_capacity(3);
            for j in 0..coarse {
                let offset = 2 * j as isize - x as isize;
                if (-2..=2).contains(&offset) {
                    taps.push((j, BINOMIAL[(offset + 2) as usize]));
                }
            }
            taps
        })
        .collect()
}

/// Fixed binomial expansion of `x` onto `out_h x out_w`, where each output
/// extent is twice the input's or one less.
pub fn expand<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h.div_ceil(2) != h || out_w.div_ceil(2) != w {
        return Err(Error::shape(format!(
            "cannot expand {h}x{w} onto {out_h}x{out_w}: extents must halve with ceiling"
        )));
    }
    let ty = expand_taps(h, out_h);
    let tx = expand_taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut cols = vec![0.0f64; out_h * w];
    for plane in x.data().chunks(h * w) {
        for (oy, taps) in ty.iter().enumerate() {
            let norm: f64 = taps.iter().map(|t| t.1).sum();
            for xx in 0..w {
                let acc: f64 = taps.iter().map(|&(j, k)| k * plane[j * w + xx].f64()).sum();
                cols[oy * w + xx] = acc / norm;
            }
        }
        for oy in 0..out_h {
            for taps in &tx {
                let norm: f64 = taps.iter().map(|t| t.1).sum();
                let acc: f64 = taps.iter().map(|&(j, k)| k * cols[oy * w + j]).sum();
                out.push(T::of(acc / norm));
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Detail levels (finest first) plus the low-frequency base.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianStack<T = f32> {
    pub details: Vec<Tensor<T>>,
    pub base: Tensor<T>,
}

impl<T: Real> LaplacianStack<T> {
    pub fn depth(&self) -> usize {
        self.details.len() + 1
    }

    /// `a * self + b * other`, level by level.
    pub fn combine(&self, a: T, other: &Self, b: T) -> Result<Self> {
        if self.depth() != other.depth() {
            return Err(Error::shape("stacks of different depth"));
        }
        let lin = |x: &Tensor<T>, y: &Tensor<T>| x.zip_map(y, |p, q| a * p + b * q);
        Ok(LaplacianStack {
            details: self.details.iter().zip(&other.details).map(|(x, y)| lin(x, y)).collect::<Result<_>>()?,
            base: lin(&self.base, &other.base)?,
        })
    }
}

fn check_depth(h: usize, w: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("pyramid depth must be at least 1"));
    }
    let min = 1usize << (n - 1);
    if h < min || w < min {
        return Err(Error::shape(format!("{h}x{w} image is too small for a {n}-level pyramid (needs {min}x{min})")));
    }
    Ok(())
}

/// Splits `image` into `n - 1` band-pass levels and a base.
pub fn lp_decompose<T: Real>(image: &Tensor<T>, n: usize) -> Result<LaplacianStack<T>> {
    let (_, _, h, w) = image.dims4()?;
    check_depth(h, w, n)?;
    let mut details = Vec::with_capacity(n - 1);
    let mut current = image.clone();
    for _ in 1..n {
        let (ch, cw) = current.hw();
        let reduced = blur_downsample(&current)?;
        let detail = current.zip_map(&expand(&reduced, ch, cw)?, |a, b| a - b)?;
        details.push(detail);
        current = reduced;
    }
    Ok(LaplacianStack { details, base: current })
}

/// Inverse of [`lp_decompose`].
pub fn lp_reconstruct<T: Real>(stack: &LaplacianStack<T>) -> Result<Tensor<T>> {
    let mut current = stack.base.clone();
    for detail in stack.details.iter().rev() {
        let (h, w) = detail.hw();
        let up = expand(&current, h, w)?;
        current = up.zip_map(detail, |a, b| a + b)?;
    }
    Ok(current)
}

/// Gaussian pyramid, finest level first; level 0 is the input itself.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidTarget<T = f32> {
    pub levels: Vec<Tensor<T>>,
}

pub fn gaussian_pyramid<T: Real>(image: &Tensor<T>, n: usize) -> Result<PyramidTarget<T>> {
    let (_, _, h, w) = image.dims4()?;
    check_depth(h, w, n)?;
    let mut levels = vec![image.clone()];
    for _ in 1..n {
        let next = blur_downsample(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(PyramidTarget { levels })
}

/// Bilinear x2 followed by a learned 3x3 convolution (3 -> 3 channels).
#[derive(Clone, Debug)]
pub struct LearnedUpsampler {
    pub conv: Conv2d,
}

impl LearnedUpsampler {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        Ok(LearnedUpsampler { conv: Conv2d::register(store, name, 3, 3, 3, ConvParams::same3(1))? })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let up = tape.resize(x, out_h, out_w)?;
        self.conv.forward(tape, store, up)
    }

    pub fn param_count() -> usize {
        Conv2d::param_count(3, 3, 3)
    }
}

/// Next-level base sequence: the upsampled level output added to each
/// frame's detail map. `output` has batch 1, `details` batch `K`.
pub fn compose_base<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    output: Var,
    details: Var,
    upsampler: &LearnedUpsampler,
) -> Result<Var> {
    let (on, _, oh, ow) = tape.value(output).dims4()?;
    let (k, _, h, w) = tape.value(details).dims4()?;
    if on != 1 {
        return Err(Error::shape(format!("level output must have batch 1, got {on}")));
    }
    if h.div_ceil(2) != oh || w.div_ceil(2) != ow {
        return Err(Error::shape(format!("detail level {h}x{w} does not sit above a {oh}x{ow} output")));
    }
    let up = upsampler.forward(tape, store, output, h, w)?;
    let up = tape.expand_batch(up, k)?;
    tape.add(up, details)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(&shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn downsample_extents_ceil() {
        let a = blur_downsample(&Tensor::<f32>::zeros(&[1, 1, 8, 8])).unwrap();
        assert_eq!(a.hw(), (4, 4));
        let b = blur_downsample(&Tensor::<f32>::zeros(&[1, 1, 9, 9])).unwrap();
        assert_eq!(b.hw(), (5, 5));
        let one = Tensor::<f32>::full(&[1, 3, 1, 1], 0.7);
        assert_eq!(blur_downsample(&one).unwrap(), one);
    }

    #[test]
    fn constant_preserved_exactly() {
        for &c in &[0.3f32, 0.1, 0.77, 1.0 / 3.0] {
            let x = Tensor::full(&[2, 3, 13, 9], c);
            let d = blur_downsample(&x).unwrap();
            assert!(d.data().iter().all(|&v| v == c));
            let e = expand(&d, 13, 9).unwrap();
            assert!(e.data().iter().all(|&v| v == c));
        }
    }

    #[test]
    fn separable_blur_matches_dense_kernel() {
        let x = noise([1, 1, 8, 8], 3);
        let fast = blur_downsample(&x).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut acc = 0.0;
                for ty in 0..5 {
                    for tx in 0..5 {
                        let yy = reflect101(2 * oy as isize + ty as isize - 2, 8);
                        let xx = reflect101(2 * ox as isize + tx as isize - 2, 8);
                        acc += BINOMIAL[ty] * BINOMIAL[tx] / 256.0 * x.at4(0, 0, yy, xx);
                    }
                }
                assert!((fast.at4(0, 0, oy, ox) - acc).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn constant_image_has_zero_details() {
        let x = Tensor::<f32>::full(&[1, 3, 17, 12], 0.42);
        for n in 1..=4 {
            let s = lp_decompose(&x, n).unwrap();
            assert_eq!(s.depth(), n);
            assert!(s.details.iter().all(|d| d.data().iter().all(|&v| v == 0.0)));
            assert!(s.base.data().iter().all(|&v| v == 0.42));
        }
    }

    #[test]
    fn depth_one_is_identity() {
        let x = noise([1, 3, 6, 5], 1).cast::<f32>();
        let s = lp_decompose(&x, 1).unwrap();
        assert!(s.details.is_empty());
        assert_eq!(s.base, x);
        assert_eq!(lp_reconstruct(&s).unwrap(), x);
    }

    #[test]
    fn too_small_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 7, 16]);
        assert!(lp_decompose(&x, 4).is_err());
        assert!(lp_decompose(&x, 3).is_ok());
        assert!(gaussian_pyramid(&x, 4).is_err());
    }

    #[test]
    fn reconstruct_rejects_inconsistent_levels() {
        let s =
            LaplacianStack { details: vec![Tensor::<f32>::zeros(&[1, 3, 10, 10])], base: Tensor::zeros(&[1, 3, 4, 5]) };
        assert!(lp_reconstruct(&s).is_err());
    }

    #[test]
    fn zero_details_reconstruct_to_constant() {
        let s = LaplacianStack {
            details: vec![Tensor::<f32>::zeros(&[1, 3, 9, 7]), Tensor::zeros(&[1, 3, 5, 4])],
            base: Tensor::full(&[1, 3, 3, 2], 0.25),
        };
        let r = lp_reconstruct(&s).unwrap();
        assert_eq!(r.hw(), (9, 7));
        assert!(r.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn reconstruction_is_linear() {
        let a = lp_decompose(&noise([1, 3, 19, 22], 5), 3).unwrap();
        let b = lp_decompose(&noise([1, 3, 19, 22], 6), 3).unwrap();
        let lhs = lp_reconstruct(&a.combine(0.7, &b, -1.3).unwrap()).unwrap();
        let ra = lp_reconstruct(&a).unwrap();
        let rb = lp_reconstruct(&b).unwrap();
        let rhs = ra.zip_map(&rb, |p, q| 0.7 * p - 1.3 * q).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn gaussian_base_matches_laplacian_base() {
        let g = noise([1, 3, 33, 40], 9).cast::<f32>();
        let gp = gaussian_pyramid(&g, 4).unwrap();
        let lp = lp_decompose(&g, 4).unwrap();
        assert_eq!(gp.levels[3], lp.base);
        let extents: Vec<_> = gp.levels.iter().map(|t| t.hw()).collect();
        assert_eq!(extents, level_extents(33, 40, 4));
    }

    #[test]
    fn constant_gaussian_pyramid() {
        let g = Tensor::<f32>::full(&[1, 3, 16, 16], 0.6);
        let gp = gaussian_pyramid(&g, 4).unwrap();
        assert!(gp.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.6)));
    }
}
