//! Multimodal fusion of two feature vectors. The main operator is compact
//! bilinear pooling: both vectors are projected with Count Sketch and
//! combined by circular convolution (computed via FFT), which sketches
//! their outer product without ever materializing it. Elementwise product
//! and concatenation are the baselines behind the same dispatch point.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft;
use crate::rng::stream;
use crate::tensor::{Graph, Var};

/// Which input of the fusion pair a sketch map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    X,
    Y,
}

/// Hash and sign maps for sketching both fusion inputs. Immutable after
/// construction and fully determined by the seed.
#[derive(Debug, Clone)]
pub struct SketchParams {
    pub n_x: usize,
    pub n_y: usize,
    /// Sketch width; always a power of two so the convolution can run
    /// through the radix-2 FFT.
    pub d: usize,
    pub seed: u64,
    h_x: Arc<Vec<usize>>,
    s_x: Arc<Vec<f64>>,
    h_y: Arc<Vec<usize>>,
    s_y: Arc<Vec<f64>>,
}

impl SketchParams {
    /// Draw fresh maps. A non-power-of-two `d` is rounded up.
    pub fn new(n_x: usize, n_y: usize, d: usize, seed: u64) -> Result<Self> {
        if n_x == 0 || n_y == 0 || d == 0 {
            return Err(Error::config(format!(
                "sketch dims must be positive, got n_x={n_x}, n_y={n_y}, d={d}"
            )));
        }
        let d = fft::next_pow2(d);
        let (h_x, s_x) = draw_maps(n_x, d, &mut stream(seed, "sketch.x"));
        let (h_y, s_y) = draw_maps(n_y, d, &mut stream(seed, "sketch.y"));
        Ok(SketchParams {
            n_x,
            n_y,
            d,
            seed,
            h_x,
            s_x,
            h_y,
            s_y,
        })
    }

    /// Build from explicit maps (test fixtures, frozen cases).
    pub fn from_maps(
        h_x: Vec<usize>,
        s_x: Vec<f64>,
        h_y: Vec<usize>,
        s_y: Vec<f64>,
        d: usize,
    ) -> Result<Self> {
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::config(format!(
                "sketch width must be a positive power of two, got {d}"
            )));
        }
        if h_x.len() != s_x.len() || h_y.len() != s_y.len() {
            return Err(Error::config(
                "hash and sign maps must pair up per side".to_string(),
            ));
        }
        for (h, s) in [(&h_x, &s_x), (&h_y, &s_y)] {
            if h.iter().any(|&b| b >= d) {
                return Err(Error::config(format!("hash bucket out of range 0..{d}")));
            }
            if s.iter().any(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::config("signs must be +1 or -1".to_string()));
            }
        }
        Ok(SketchParams {
            n_x: h_x.len(),
            n_y: h_y.len(),
            d,
            seed: 0,
            h_x: Arc::new(h_x),
            s_x: Arc::new(s_x),
            h_y: Arc::new(h_y),
            s_y: Arc::new(s_y),
        })
    }

    pub fn maps(&self, side: Side) -> (&Arc<Vec<usize>>, &Arc<Vec<f64>>) {
        match side {
            Side::X => (&self.h_x, &self.s_x),
            Side::Y => (&self.h_y, &self.s_y),
        }
    }
}

fn draw_maps(n: usize, d: usize, rng: &mut ChaCha8Rng) -> (Arc<Vec<usize>>, Arc<Vec<f64>>) {
    let h = (0..n).map(|_| rng.gen_range(0..d)).collect();
    let s = (0..n)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    (Arc::new(h), Arc::new(s))
}

/// Sketch one side's vector down to width d: out[j] = sum of s(i)*x[i]
/// over the indices hashing to bucket j.
pub fn count_sketch(g: &mut Graph, x: Var, p: &SketchParams, side: Side) -> Result<Var> {
    let (h, s) = p.maps(side);
    g.count_sketch(x, h, s, p.d)
}

/// Compact bilinear fusion: sketch both inputs, convolve circularly, then
/// optionally apply the signed square root and l2 normalization.
pub fn mcb_fuse(
    g: &mut Graph,
    x: Var,
    y: Var,
    p: &SketchParams,
    signed_sqrt: bool,
    l2: bool,
) -> Result<Var> {
    let sx = count_sketch(g, x, p, Side::X)?;
    let sy = count_sketch(g, y, p, Side::Y)?;
    let mut out = g.circular_conv(sx, sy)?;
    if signed_sqrt {
        out = g.signed_sqrt(out)?;
    }
    if l2 {
        out = g.l2_normalize(out)?;
    }
    Ok(out)
}

/// Fusion operator choice; each variant carries exactly the state its kind
/// needs. The compact bilinear posts default to on.
#[derive(Debug, Clone)]
pub enum FusionConfig {
    Mcb {
        sketch: SketchParams,
        signed_sqrt: bool,
        l2: bool,
    },
    Hadamard,
    Concat,
}

impl FusionConfig {
    pub fn mcb(sketch: SketchParams) -> Self {
        FusionConfig::Mcb {
            sketch,
            signed_sqrt: true,
            l2: true,
        }
    }

    /// Output width for inputs of the given lengths.
    pub fn out_width(&self, n_x: usize, n_y: usize) -> Result<usize> {
        match self {
            FusionConfig::Mcb { sketch, .. } => Ok(sketch.d),
            FusionConfig::Hadamard => {
                if n_x != n_y {
                    return Err(Error::dim(
                        "fuse",
                        format!("elementwise product needs equal lengths, got {n_x} and {n_y}"),
                    ));
                }
                Ok(n_x)
            }
            FusionConfig::Concat => Ok(n_x + n_y),
        }
    }
}

/// Fuse two 1-d vectors under the configured operator.
pub fn fuse(g: &mut Graph, x: Var, y: Var, cfg: &FusionConfig) -> Result<Var> {
    let (nx, ny) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if nx.len() != 1 || ny.len() != 1 {
        return Err(Error::dim(
            "fuse",
            format!("inputs must be 1-d, got {nx:?} and {ny:?}"),
        ));
    }
    cfg.out_width(nx[0], ny[0])?;
    match cfg {
        FusionConfig::Mcb {
            sketch,
            signed_sqrt,
            l2,
        } => mcb_fuse(g, x, y, sketch, *signed_sqrt, *l2),
        FusionConfig::Hadamard => g.mul(x, y),
        FusionConfig::Concat => g.concat(&[x, y], 0),
    }
}

/// Reference oracle: sketch the flattened outer product x (x) y directly,
/// bucketing entry (i, j) at (h_x(i)+h_y(j)) mod d with sign s_x(i)*s_y(j).
/// The convolution of the two sketches must reproduce this exactly.
pub fn outer_sketch_brute_force(x: &[f64], y: &[f64], p: &SketchParams) -> Vec<f64> {
    let mut out = vec![0.0; p.d];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &yj) in y.iter().enumerate() {
            let bucket = (p.h_x[i] + p.h_y[j]) % p.d;
            out[bucket] += p.s_x[i] * p.s_y[j] * xi * yj;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_multi;
    use crate::tensor::Tensor;

    fn random_vec(n: usize, seed: u64, label: &str) -> Vec<f64> {
        let mut rng = stream(seed, label);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn sketch_plain(x: &[f64], h: &[usize], s: &[f64], d: usize) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(x.to_vec()).unwrap());
        let out = g
            .count_sketch(v, &Arc::new(h.to_vec()), &Arc::new(s.to_vec()), d)
            .unwrap();
        g.data(out).to_vec()
    }

    #[test]
    fn identity_hash_is_identity_map() {
        let x = vec![3.0, -5.0, 7.0, 2.0];
        let h: Vec<usize> = (0..4).collect();
        let s = vec![1.0; 4];
        assert_eq!(sketch_plain(&x, &h, &s, 4), x);
    }

    #[test]
    fn frozen_scatter_example() {
        let x = vec![3.0, 5.0, 7.0, 2.0];
        let h = vec![0, 0, 2, 3];
        let s = vec![1.0, -1.0, 1.0, 1.0];
        assert_eq!(sketch_plain(&x, &h, &s, 4), vec![-2.0, 0.0, 7.0, 2.0]);
    }

    #[test]
    fn sketch_is_exactly_linear_on_integer_inputs() {
        // Integer-valued inputs and power-of-two coefficients keep every
        // intermediate exactly representable, so linearity holds bitwise
        // even with colliding buckets.
        let p = SketchParams::new(10, 10, 8, 41).unwrap();
        let mut rng = stream(42, "ints");
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-9i32..9) as f64).collect();
        let y: Vec<f64> = (0..10).map(|_| rng.gen_range(-9i32..9) as f64).collect();
        let (a, b) = (2.0, -4.0);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(xi, yi)| a * xi + b * yi).collect();
        let (h, s) = p.maps(Side::X);
        let lhs = sketch_plain(&combo, h, s, p.d);
        let sx = sketch_plain(&x, h, s, p.d);
        let sy = sketch_plain(&y, h, s, p.d);
        for ((l, xs), ys) in lhs.iter().zip(&sx).zip(&sy) {
            assert_eq!(l.to_bits(), (a * xs + b * ys).to_bits());
        }
    }

    #[test]
    fn sketch_linearity_on_real_inputs() {
        let p = SketchParams::new(16, 16, 8, 43).unwrap();
        let x = random_vec(16, 44, "x");
        let y = random_vec(16, 44, "y");
        let (a, b) = (0.37, -1.21);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(xi, yi)| a * xi + b * yi).collect();
        let (h, s) = p.maps(Side::X);
        let lhs = sketch_plain(&combo, h, s, p.d);
        let sx = sketch_plain(&x, h, s, p.d);
        let sy = sketch_plain(&y, h, s, p.d);
        for ((l, xs), ys) in lhs.iter().zip(&sx).zip(&sy) {
            assert!((l - (a * xs + b * ys)).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_reproduces_maps() {
        let a = SketchParams::new(16, 12, 64, 7).unwrap();
        let b = SketchParams::new(16, 12, 64, 7).unwrap();
        assert_eq!(a.maps(Side::X).0, b.maps(Side::X).0);
        assert_eq!(a.maps(Side::Y).1, b.maps(Side::Y).1);
        let c = SketchParams::new(16, 12, 64, 8).unwrap();
        assert_ne!(a.maps(Side::X).0, c.maps(Side::X).0);
    }

    #[test]
    fn width_rounds_up_to_power_of_two() {
        let p = SketchParams::new(4, 4, 100, 1).unwrap();
        assert_eq!(p.d, 128);
        assert!(SketchParams::new(0, 4, 16, 1).is_err());
    }

    #[test]
    fn convolution_of_sketches_matches_outer_product_sketch() {
        for seed in 0..50 {
            let p = SketchParams::new(8, 8, 16, seed).unwrap();
            let x = random_vec(8, seed, "px");
            let y = random_vec(8, seed, "py");
            let expect = outer_sketch_brute_force(&x, &y, &p);
            let mut g = Graph::new();
            let xv = g.leaf(Tensor::vector(x).unwrap());
            let yv = g.leaf(Tensor::vector(y).unwrap());
            let out = mcb_fuse(&mut g, xv, yv, &p, false, false).unwrap();
            for (got, want) in g.data(out).iter().zip(&expect) {
                assert!(
                    (got - want).abs() < 1e-9,
                    "seed {seed}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn impulse_sketch_passes_other_side_through() {
        // One x-entry hashing to bucket 0 with sign +1 sketches to the
        // impulse, and convolving with an impulse is the identity.
        let p = SketchParams::from_maps(
            vec![0],
            vec![1.0],
            vec![3, 1, 4, 1, 5, 2, 6, 0],
            vec![1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0],
            8,
        )
        .unwrap();
        let y = random_vec(8, 9, "y");
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::vector(vec![1.0]).unwrap());
        let yv = g.leaf(Tensor::vector(y.clone()).unwrap());
        let sy = count_sketch(&mut g, yv, &p, Side::Y).unwrap();
        let out = mcb_fuse(&mut g, xv, yv, &p, false, false).unwrap();
        for (got, want) in g.data(out).iter().zip(g.data(sy)) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences_with_posts_on() {
        // Inputs are kept positive and the seed pinned so no convolution
        // output sits near the signed-sqrt kink.
        let p = SketchParams::new(6, 6, 16, 21).unwrap();
        let mut rng = stream(22, "grad");
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
        let y: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
        let inputs = [Tensor::vector(x).unwrap(), Tensor::vector(y).unwrap()];
        let report = grad_check_multi(&inputs, |g, vars| {
            let fused = mcb_fuse(g, vars[0], vars[1], &p, true, true)?;
            g.sum(fused)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sketch_inner_products_are_unbiased() {
        // Shared maps preserve inner products in expectation; the mean
        // over 500 independent sketches must sit within three standard
        // errors of the true value.
        let n = 16;
        let x = random_vec(n, 33, "x");
        let y = random_vec(n, 33, "y");
        let truth: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut estimates = Vec::with_capacity(500);
        for seed in 0..500 {
            let p = SketchParams::new(n, n, 64, seed).unwrap();
            let (h, s) = p.maps(Side::X);
            let sx = sketch_plain(&x, h, s, p.d);
            let sy = sketch_plain(&y, h, s, p.d);
            estimates.push(sx.iter().zip(&sy).map(|(a, b)| a * b).sum::<f64>());
        }
        let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
        let var = estimates
            .iter()
            .map(|e| (e - mean).powi(2))
            .sum::<f64>()
            / (estimates.len() - 1) as f64;
        let se = (var / estimates.len() as f64).sqrt();
        assert!(
            (mean - truth).abs() <= 3.0 * se,
            "mean {mean} vs truth {truth}, se {se}"
        );
    }

    #[test]
    fn fusion_is_bilinear_with_posts_off() {
        // Scaling one input by a power of two scales the output bitwise:
        // exponent shifts commute with every rounding in the pipeline.
        let p = SketchParams::new(8, 8, 16, 51).unwrap();
        let x = random_vec(8, 52, "x");
        let y = random_vec(8, 52, "y");
        for a in [2.0, -0.5] {
            let scaled: Vec<f64> = x.iter().map(|v| a * v).collect();
            let mut g = Graph::new();
            let xv = g.leaf(Tensor::vector(x.clone()).unwrap());
            let sv = g.leaf(Tensor::vector(scaled).unwrap());
            let yv = g.leaf(Tensor::vector(y.clone()).unwrap());
            let base = mcb_fuse(&mut g, xv, yv, &p, false, false).unwrap();
            let moved = mcb_fuse(&mut g, sv, yv, &p, false, false).unwrap();
            for (m, b) in g.data(moved).iter().zip(g.data(base)) {
                assert_eq!(m.to_bits(), (a * b).to_bits());
            }
        }
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.5, -2.0, 0.25]).unwrap());
        let ones = g.leaf(Tensor::vector(vec![1.0; 3]).unwrap());
        let out = fuse(&mut g, x, ones, &FusionConfig::Hadamard).unwrap();
        assert_eq!(g.data(out), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn hadamard_rejects_unequal_lengths() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0; 3]).unwrap());
        let y = g.leaf(Tensor::vector(vec![1.0; 4]).unwrap());
        assert!(matches!(
            fuse(&mut g, x, y, &FusionConfig::Hadamard),
            Err(Error::Dim { .. })
        ));
    }

    #[test]
    fn concat_keeps_both_inputs() {
        let cfg = FusionConfig::Concat;
        assert_eq!(cfg.out_width(3, 4).unwrap(), 7);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.leaf(Tensor::vector(vec![3.0]).unwrap());
        let out = fuse(&mut g, x, y, &cfg).unwrap();
        assert_eq!(g.data(out), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dispatch_matches_direct_call() {
        let p = SketchParams::new(8, 8, 16, 61).unwrap();
        let cfg = FusionConfig::mcb(p.clone());
        let x = random_vec(8, 62, "x");
        let y = random_vec(8, 62, "y");
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::vector(x).unwrap());
        let yv = g.leaf(Tensor::vector(y).unwrap());
        let via_dispatch = fuse(&mut g, xv, yv, &cfg).unwrap();
        let direct = mcb_fuse(&mut g, xv, yv, &p, true, true).unwrap();
        assert_eq!(cfg.out_width(8, 8).unwrap(), 16);
        for (a, b) in g.data(via_dispatch).iter().zip(g.data(direct)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
