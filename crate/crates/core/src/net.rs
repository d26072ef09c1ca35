//! Bilinear inter-sentence features, the lightweight-convolution global
//! module and window scoring.

use rand::Rng;
use ucoh_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetDims {
    /// Sentence representation width `d = 2p`.
    pub d: usize,
    pub q: usize,
    pub k: usize,
    pub groups: usize,
    pub layers: usize,
}

impl NetDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.q == 0 || self.k == 0 || self.groups == 0 {
            return Err(Error::Invalid("network sizes must be positive".into()));
        }
        if self.k % 2 == 0 {
            return Err(Error::Invalid(format!("kernel width {} must be odd", self.k)));
        }
        if self.d % self.groups != 0 {
            return Err(Error::Invalid(format!("width {} not divisible by {} groups", self.d, self.groups)));
        }
        Ok(())
    }

    /// Scoring input width `2q + d`.
    pub fn z_width(&self) -> usize {
        2 * self.q + self.d
    }

    /// Weights in the whole convolution stack: `layers * G * k`.
    pub fn conv_param_count(&self) -> usize {
        self.layers * self.groups * self.k
    }

    /// Weights one layer would need as a plain depth-wise convolution.
    pub fn depthwise_param_count(&self) -> usize {
        self.d * self.k
    }

    /// Weights one layer would need as a full convolution.
    pub fn full_conv_param_count(&self) -> usize {
        self.d * self.d * self.k
    }
}

#[derive(Clone, Debug)]
pub struct NetIds {
    pub dims: NetDims,
    pub bilinear_weight: ParamId,
    pub bilinear_bias: ParamId,
    pub conv: Vec<ParamId>,
    pub score_weight: ParamId,
    pub score_bias: ParamId,
}

impl NetIds {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, dims: NetDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let NetDims { d, q, k, groups, layers } = dims;
        let rb = 1.0 / d as f64;
        let bilinear_weight = store.add("bilinear.weight", Tensor::uniform(&[q, d, d], -rb, rb, rng)?)?;
        let bilinear_bias = store.add("bilinear.bias", Tensor::zeros(&[q])?)?;
        let conv = (0..layers)
            .map(|l| Ok(store.add(format!("gconv.{l}.weight"), Tensor::uniform(&[groups, k], -0.1, 0.1, rng)?)?))
            .collect::<Result<Vec<_>>>()?;
        let rs = 1.0 / (dims.z_width() as f64).sqrt();
        let score_weight = store.add("score.weight", Tensor::uniform(&[dims.z_width(), 1], -rs, rs, rng)?)?;
        let score_bias = store.add("score.bias", Tensor::zeros(&[1])?)?;
        Ok(NetIds {
            dims,
            bilinear_weight,
            bilinear_bias,
            conv,
            score_weight,
            score_bias,
        })
    }

    pub fn bind(store: &ParamStore, dims: NetDims) -> Result<Self> {
        dims.validate()?;
        let NetDims { d, q, k, groups, layers } = dims;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(name)?;
            if store.get(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        Ok(NetIds {
            dims,
            bilinear_weight: get("bilinear.weight", &[q, d, d])?,
            bilinear_bias: get("bilinear.bias", &[q])?,
            conv: (0..layers)
                .map(|l| get(&format!("gconv.{l}.weight"), &[groups, k]))
                .collect::<Result<_>>()?,
            score_weight: get("score.weight", &[dims.z_width(), 1])?,
            score_bias: get("score.bias", &[1])?,
        })
    }

    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> NetVars {
        NetVars {
            dims: self.dims,
            bilinear_weight: g.param(store, self.bilinear_weight),
            bilinear_bias: g.param(store, self.bilinear_bias),
            conv: self.conv.iter().map(|&id| g.param(store, id)).collect(),
            score_weight: g.param(store, self.score_weight),
            score_bias: g.param(store, self.score_bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetVars {
    pub dims: NetDims,
    pub bilinear_weight: Var,
    pub bilinear_bias: Var,
    pub conv: Vec<Var>,
    pub score_weight: Var,
    pub score_bias: Var,
}

/// Row-wise `v[n, r] = left[n]^T W[r] right[n] + b[r]`.
pub fn bilinear_pair(g: &mut Graph, left: Var, right: Var, weight: Var, bias: Var) -> Result<Var> {
    let v = g.bilinear(left, right, weight)?;
    Ok(g.add_row_bias(v, bias)?)
}

/// How raw kernel weights become convolution taps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelNorm {
    #[default]
    Softmax,
    /// Raw weights used as-is. Only meaningful for mutation testing.
    Unnormalized,
}

/// Zero-based group of channel `c` when `d` channels are split into `groups`
/// equal contiguous blocks.
pub fn channel_group(c: usize, d: usize, groups: usize) -> usize {
    c / (d / groups)
}

/// `G x k` kernels after normalization along the kernel axis.
pub fn group_kernels(g: &mut Graph, wraw: Var, norm: KernelNorm) -> Result<Var> {
    Ok(match norm {
        KernelNorm::Softmax => g.softmax(wraw, 1)?,
        KernelNorm::Unnormalized => wraw,
    })
}

/// Depth-wise convolution of `x` (`n x d`) where channel `c` uses the
/// normalized kernel of its group.
pub fn lightweight_conv(g: &mut Graph, x: Var, wraw: Var, norm: KernelNorm) -> Result<Var> {
    let d = g.shape(x)[1];
    let groups = g.shape(wraw)[0];
    if groups == 0 || d % groups != 0 {
        return Err(Error::Invalid(format!("width {d} not divisible by {groups} groups")));
    }
    let kernels = group_kernels(g, wraw, norm)?;
    let rows: Vec<usize> = (0..d).map(|c| channel_group(c, d, groups)).collect();
    let per_channel = g.gather_rows(kernels, &rows)?;
    Ok(g.depthwise_conv(x, per_channel)?)
}

/// Residual stack `X <- tanh(lconv(X)) + X` followed by a mean over rows.
/// Returns a `1 x d` row.
pub fn global_features(g: &mut Graph, h: Var, conv: &[Var], norm: KernelNorm) -> Result<Var> {
    let mut x = h;
    for &w in conv {
        let c = lightweight_conv(g, x, w, norm)?;
        let a = g.tanh(c);
        x = g.add(a, x)?;
    }
    let d = g.shape(x)[1];
    let u = g.mean_axis(x, 0)?;
    Ok(g.reshape(u, &[1, d])?)
}

/// Per-window scores `y` (shape `[n]`) for sentence representations `h`
/// (`n x d`). Two zero rows are appended so window `i` spans sentences `i`,
/// `i + 1` and `i + 2`. With `use_global` off the document feature is zero.
pub fn window_scores(g: &mut Graph, h: Var, net: &NetVars, use_global: bool, norm: KernelNorm) -> Result<Var> {
    let (n, d) = (g.shape(h)[0], g.shape(h)[1]);
    let padded = g.pad(h, 0, 0, 2)?;
    let left = g.slice(padded, 0, 0, n + 1)?;
    let right = g.slice(padded, 0, 1, n + 2)?;
    let v = bilinear_pair(g, left, right, net.bilinear_weight, net.bilinear_bias)?;
    let va = g.slice(v, 0, 0, n)?;
    let vb = g.slice(v, 0, 1, n + 1)?;
    let u = if use_global {
        let u = global_features(g, h, &net.conv, norm)?;
        g.gather_rows(u, &vec![0; n])?
    } else {
        g.constant(Tensor::zeros(&[n, d])?)
    };
    let z = g.concat(&[va, vb, u], 1)?;
    let y = g.matmul(z, net.score_weight)?;
    let y = g.add_row_bias(y, net.score_bias)?;
    Ok(g.reshape(y, &[n])?)
}

/// Document score: the sum of its window scores.
pub fn doc_score(y: &[f64]) -> f64 {
    y.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn zero_bilinear_weight_gives_bias() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[1, 2], vec![3.0, -1.0]).unwrap());
        let r = g.constant(Tensor::new(&[1, 2], vec![0.5, 2.0]).unwrap());
        let w = g.constant(Tensor::zeros(&[2, 2, 2]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.25, -4.0]).unwrap());
        let v = bilinear_pair(&mut g, l, r, w, b).unwrap();
        assert_eq!(g.value(v).data(), [0.25, -4.0]);
    }

    #[test]
    fn bilinear_identity_example_and_scaling() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]).unwrap());
        let r = g.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let v = bilinear_pair(&mut g, l, r, w, b).unwrap();
        assert_eq!(g.value(v).data(), [11.0]);
        let r2 = g.scale(r, 2.5);
        let v2 = bilinear_pair(&mut g, l, r2, w, b).unwrap();
        assert_eq!(g.value(v2).data(), [27.5]);
    }

    #[test]
    fn zero_raw_kernel_is_moving_average() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4, 2], vec![3.0, 0.0, 6.0, 3.0, 9.0, 6.0, 0.0, 0.0]).unwrap());
        let w = g.constant(Tensor::zeros(&[1, 3]).unwrap());
        let o = lightweight_conv(&mut g, x, w, KernelNorm::Softmax).unwrap();
        let out = g.value(o).data();
        assert!((out[2] - 6.0).abs() < 1e-12);
        assert!((out[3] - 3.0).abs() < 1e-12);
        assert!((out[4] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn group_assignment() {
        let groups: Vec<_> = (0..4).map(|c| channel_group(c, 4, 2)).collect();
        assert_eq!(groups, [0, 0, 1, 1]);
    }

    #[test]
    fn indivisible_groups_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 5]).unwrap());
        let w = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(lightweight_conv(&mut g, x, w, KernelNorm::Softmax).is_err());
    }

    #[test]
    fn parameter_counts() {
        let dims = NetDims { d: 256, q: 64, k: 5, groups: 16, layers: 6 };
        assert_eq!(dims.groups * dims.k, 80);
        assert_eq!(dims.depthwise_param_count(), 1280);
        assert_eq!(dims.full_conv_param_count(), 327_680);
        assert_eq!(dims.conv_param_count(), 480);
        let mut store = ParamStore::new();
        let ids = NetIds::init(&mut store, dims, &mut rng()).unwrap();
        let stored: usize = ids.conv.iter().map(|&id| store.get(id).numel()).sum();
        assert_eq!(stored, dims.conv_param_count());
    }

    #[test]
    fn zero_input_gives_zero_global_feature() {
        let dims = NetDims { d: 4, q: 2, k: 3, groups: 2, layers: 6 };
        let mut store = ParamStore::new();
        let ids = NetIds::init(&mut store, dims, &mut rng()).unwrap();
        let mut g = Graph::new();
        let vars = ids.vars(&mut g, &store);
        let h = g.constant(Tensor::zeros(&[3, 4]).unwrap());
        let u = global_features(&mut g, h, &vars.conv, KernelNorm::Softmax).unwrap();
        assert!(g.value(u).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_scores_without_weights() {
        let dims = NetDims { d: 4, q: 2, k: 3, groups: 2, layers: 6 };
        let mut store = ParamStore::new();
        let ids = NetIds::init(&mut store, dims, &mut rng()).unwrap();
        store.get_mut(ids.score_weight).data_mut().fill(0.0);
        store.get_mut(ids.score_bias).data_mut()[0] = 0.5;
        for n in [1, 4] {
            let mut g = Graph::new();
            let vars = ids.vars(&mut g, &store);
            let h = g.constant(Tensor::uniform(&[n, 4], -1.0, 1.0, &mut rng()).unwrap());
            let y = window_scores(&mut g, h, &vars, true, KernelNorm::Softmax).unwrap();
            assert_eq!(g.value(y).data(), vec![0.5; n]);
        }
    }

    #[test]
    fn doc_score_sums() {
        assert_eq!(doc_score(&[0.5, 0.5]), 1.0);
        assert_eq!(doc_score(&[1.0, -1.0]), 0.0);
    }
}
