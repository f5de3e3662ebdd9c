//! Sensor-aware feature fusion.
//!
//! Per-modality toy feature extractors, measurement-certainty estimation
//! (scalar weights and spatial masks), and the five fusion operators:
//! certainty-weighted average (`sa`) and concatenation (`sc`), masked average
//! (`ma`) and concatenation (`mc`), and stochastic selective fusion (`sf`)
//! driven by Gumbel-Softmax encodings.
//!
//! The scalar certainty weight is the product of a small conditioning network
//! and the mean of the first `k` feature channels, where the mean factor is
//! wrapped in a stop-gradient so that back-propagation cannot distort the
//! feature maps through it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensorcore::{Graph, ParamGroup, Result, Tensor, TensorError};

/// Lower clamp for the uniform draw feeding the Gumbel transform; keeps
/// -log(-log(u)) finite at both ends.
const UNIFORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Ir,
    Depth,
}

/// Channels x rows x cols feature tensor for one modality.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    pub tensor: Tensor,
    pub modality: Modality,
}

impl FeatureVolume {
    pub fn new(tensor: Tensor, modality: Modality) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "feature_volume",
                detail: format!("{:?}", s),
            });
        }
        Ok(FeatureVolume { tensor, modality })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// Fusion operator selector, by identifier string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    ScalarAvg,
    ScalarConcat,
    MaskAvg,
    MaskConcat,
    Stochastic,
}

impl FusionMode {
    pub fn id(&self) -> &'static str {
        match self {
            FusionMode::ScalarAvg => "sa",
            FusionMode::ScalarConcat => "sc",
            FusionMode::MaskAvg => "ma",
            FusionMode::MaskConcat => "mc",
            FusionMode::Stochastic => "sf",
        }
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sa" => Ok(FusionMode::ScalarAvg),
            "sc" => Ok(FusionMode::ScalarConcat),
            "ma" => Ok(FusionMode::MaskAvg),
            "mc" => Ok(FusionMode::MaskConcat),
            "sf" => Ok(FusionMode::Stochastic),
            other => Err(format!("unknown fusion mode `{other}` (expected sa|sc|ma|mc|sf)")),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

// ── toy backbone ─────────────────────────────────────────────────────

/// One conv layer: 3x3 kernel, stride 1, pad 1, followed by ReLU and 2x2
/// average pooling.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Parameters of the toy three-layer backbone. Channel progression is
/// in -> 8 -> 16 -> 32; each layer halves the spatial dims, so a 64x64 image
/// produces a 32x8x8 feature volume.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub layers: Vec<ConvLayer>,
}

pub const BACKBONE_CHANNELS: [usize; 3] = [8, 16, 32];

impl BackboneParams {
    pub fn init(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for &cout in &BACKBONE_CHANNELS {
            layers.push(ConvLayer {
                kernel: xavier(vec![cout, cin, 3, 3], rng),
                bias: Tensor::zeros(vec![cout]),
            });
            cin = cout;
        }
        BackboneParams { layers }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.kernel.shape()[0]).unwrap_or(0)
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map(|l| l.kernel.shape()[1]).unwrap_or(0)
    }
}

impl ParamGroup for BackboneParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("conv{i}.kernel"), &layer.kernel);
            f(&format!("conv{i}.bias"), &layer.bias);
        }
    }

    fn map(&self, f: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(ConvLayer {
                kernel: f(&format!("conv{i}.kernel"), &layer.kernel)?,
                bias: f(&format!("conv{i}.bias"), &layer.bias)?,
            });
        }
        Ok(BackboneParams { layers })
    }
}

/// Xavier-uniform init on fan-in/fan-out of a kernel or matrix shape.
fn xavier(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = match shape.len() {
        4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
        2 => (shape[0], shape[1]),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -a, a, rng)
}

/// Run the toy backbone over an image tensor (C_in x H x W, values in [0,1]).
pub fn extract_features(
    g: &Graph,
    image: &Tensor,
    params: &BackboneParams,
    modality: Modality,
) -> Result<FeatureVolume> {
    let s = image.shape();
    if s.len() != 3 || s[0] != params.in_channels() {
        return Err(TensorError::InvalidShape {
            op: "extract_features",
            detail: format!(
                "image {:?} does not match backbone input channels {}",
                s,
                params.in_channels()
            ),
        });
    }
    let mut x = g.input(image)?;
    for layer in &params.layers {
        let kernel = g.input(&layer.kernel)?;
        let bias = g.input(&layer.bias)?;
        let conv = g.conv2d(&x, &kernel, 1)?;
        let conv = g.add_bias_chw(&conv, &bias)?;
        let act = g.relu(&conv)?;
        x = g.avg_pool2(&act)?;
    }
    FeatureVolume::new(x, modality)
}

// ── certainty estimation ─────────────────────────────────────────────

/// Parameters of the scalar certainty network: 3x3 conv to 8 channels, ReLU,
/// global average pool, dense to 1, sigmoid.
#[derive(Debug, Clone)]
pub struct EstimatorParams {
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    pub dense_weight: Tensor,
    pub dense_bias: Tensor,
}

pub const ESTIMATOR_HIDDEN: usize = 8;

impl EstimatorParams {
    pub fn init(feature_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        EstimatorParams {
            conv_kernel: xavier(vec![ESTIMATOR_HIDDEN, feature_channels, 3, 3], rng),
            conv_bias: Tensor::zeros(vec![ESTIMATOR_HIDDEN]),
            dense_weight: xavier(vec![ESTIMATOR_HIDDEN, 1], rng),
            dense_bias: Tensor::zeros(vec![1]),
        }
    }

    /// All-zero parameters; the network then outputs sigmoid(0) = 0.5.
    pub fn zeroed(feature_channels: usize) -> Self {
        EstimatorParams {
            conv_kernel: Tensor::zeros(vec![ESTIMATOR_HIDDEN, feature_channels, 3, 3]),
            conv_bias: Tensor::zeros(vec![ESTIMATOR_HIDDEN]),
            dense_weight: Tensor::zeros(vec![ESTIMATOR_HIDDEN, 1]),
            dense_bias: Tensor::zeros(vec![1]),
        }
    }
}

impl ParamGroup for EstimatorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("conv.kernel", &self.conv_kernel);
        f("conv.bias", &self.conv_bias);
        f("dense.weight", &self.dense_weight);
        f("dense.bias", &self.dense_bias);
    }

    fn map(&self, f: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(EstimatorParams {
            conv_kernel: f("conv.kernel", &self.conv_kernel)?,
            conv_bias: f("conv.bias", &self.conv_bias)?,
            dense_weight: f("dense.weight", &self.dense_weight)?,
            dense_bias: f("dense.bias", &self.dense_bias)?,
        })
    }
}

/// Parameters of the mask network: one 3x3 conv to a single channel, sigmoid.
#[derive(Debug, Clone)]
pub struct MaskParams {
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
}

impl MaskParams {
    pub fn init(feature_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        MaskParams {
            conv_kernel: xavier(vec![1, feature_channels, 3, 3], rng),
            conv_bias: Tensor::zeros(vec![1]),
        }
    }

    pub fn zeroed(feature_channels: usize) -> Self {
        MaskParams {
            conv_kernel: Tensor::zeros(vec![1, feature_channels, 3, 3]),
            conv_bias: Tensor::zeros(vec![1]),
        }
    }
}

impl ParamGroup for MaskParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("conv.kernel", &self.conv_kernel);
        f("conv.bias", &self.conv_bias);
    }

    fn map(&self, f: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(MaskParams {
            conv_kernel: f("conv.kernel", &self.conv_kernel)?,
            conv_bias: f("conv.bias", &self.conv_bias)?,
        })
    }
}

/// Scalar measurement certainty of one modality.
///
/// `w = raw * mean_ng` exactly, where `raw` is the sigmoid-bounded output of
/// the conditioning network and `mean_ng` is the stop-gradient mean of the
/// first `k` feature channels.
#[derive(Debug, Clone)]
pub struct CertaintyWeight {
    pub w: Tensor,
    pub raw: Tensor,
    pub mean_ng: Tensor,
}

/// Single-channel spatial certainty mask, sigmoid-bounded in (0,1).
#[derive(Debug, Clone)]
pub struct CertaintyMask {
    pub m: Tensor,
}

/// Per-row approximate one-hot encoding of a feature volume.
#[derive(Debug, Clone)]
pub struct CategoricalEncoding {
    pub e: Tensor,
}

/// Estimate the scalar certainty weight of a modality from its features.
///
/// The conditioning network runs on the full volume; the multiplier is the
/// mean over rows, cols and the first `k` channels, taken without gradient.
pub fn estimate_certainty(
    g: &Graph,
    s: &FeatureVolume,
    params: &EstimatorParams,
    k: usize,
) -> Result<CertaintyWeight> {
    let c = s.channels();
    if k == 0 || k > c {
        return Err(TensorError::InvalidParameter {
            op: "estimate_certainty",
            detail: format!("k = {k} out of range 1..={c}"),
        });
    }
    let kernel = g.input(&params.conv_kernel)?;
    let cbias = g.input(&params.conv_bias)?;
    let dw = g.input(&params.dense_weight)?;
    let db = g.input(&params.dense_bias)?;

    let conv = g.conv2d(&s.tensor, &kernel, 1)?;
    let conv = g.add_bias_chw(&conv, &cbias)?;
    let act = g.relu(&conv)?;
    // Global average pool each hidden channel, then a dense layer to one unit.
    let hw = act.shape()[1] * act.shape()[2];
    let flat = g.reshape(&act, vec![ESTIMATOR_HIDDEN, hw])?;
    let pooled = g.scale(&flat, 1.0 / hw as f64)?;
    let ones = g.input(&Tensor::filled(vec![hw, 1], 1.0))?;
    let pooled = g.matmul(&pooled, &ones)?; // [hidden, 1]
    let pooled = g.transpose(&pooled)?; // [1, hidden]
    let logit = g.matmul(&pooled, &dw)?;
    let logit = g.add_bias_rows(&logit, &db)?;
    let logit = g.reshape(&logit, vec![1])?;
    let raw = g.sigmoid(&logit)?;

    let first_k = g.slice_channels(&s.tensor, 0, k)?;
    let mean = g.mean(&first_k)?;
    let mean_ng = g.stop_gradient(&mean)?;

    let w = g.hadamard(&raw, &mean_ng)?;
    Ok(CertaintyWeight { w, raw, mean_ng })
}

/// Estimate a 1xHxW certainty mask from a feature volume.
pub fn estimate_mask(g: &Graph, s: &FeatureVolume, params: &MaskParams) -> Result<CertaintyMask> {
    let kernel = g.input(&params.conv_kernel)?;
    let bias = g.input(&params.conv_bias)?;
    let conv = g.conv2d(&s.tensor, &kernel, 1)?;
    let conv = g.add_bias_chw(&conv, &bias)?;
    let m = g.sigmoid(&conv)?;
    Ok(CertaintyMask { m })
}

// ── fusion operators ─────────────────────────────────────────────────

fn check_pair(op: &'static str, a: &FeatureVolume, b: &FeatureVolume) -> Result<()> {
    if a.tensor.shape() != b.tensor.shape() {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("{:?} vs {:?}", a.tensor.shape(), b.tensor.shape()),
        });
    }
    Ok(())
}

/// Scalar-weighted average fusion: elementwise mean of the weighted volumes.
pub fn fuse_scalar_avg(
    g: &Graph,
    a: &FeatureVolume,
    b: &FeatureVolume,
    wa: &CertaintyWeight,
    wb: &CertaintyWeight,
) -> Result<Tensor> {
    check_pair("fuse_scalar_avg", a, b)?;
    let va = g.mul_scalar(&wa.w, &a.tensor)?;
    let vb = g.mul_scalar(&wb.w, &b.tensor)?;
    g.scale(&g.add(&va, &vb)?, 0.5)
}

/// Scalar-weighted concatenation fusion: channel concat of the weighted volumes.
pub fn fuse_scalar_concat(
    g: &Graph,
    a: &FeatureVolume,
    b: &FeatureVolume,
    wa: &CertaintyWeight,
    wb: &CertaintyWeight,
) -> Result<Tensor> {
    check_pair("fuse_scalar_concat", a, b)?;
    let va = g.mul_scalar(&wa.w, &a.tensor)?;
    let vb = g.mul_scalar(&wb.w, &b.tensor)?;
    g.concat_channels(&va, &vb)
}

/// Mask-weighted average fusion.
pub fn fuse_mask_avg(
    g: &Graph,
    a: &FeatureVolume,
    b: &FeatureVolume,
    ma: &CertaintyMask,
    mb: &CertaintyMask,
) -> Result<Tensor> {
    check_pair("fuse_mask_avg", a, b)?;
    let va = g.mul_mask(&ma.m, &a.tensor)?;
    let vb = g.mul_mask(&mb.m, &b.tensor)?;
    g.scale(&g.add(&va, &vb)?, 0.5)
}

/// Mask-weighted concatenation fusion.
pub fn fuse_mask_concat(
    g: &Graph,
    a: &FeatureVolume,
    b: &FeatureVolume,
    ma: &CertaintyMask,
    mb: &CertaintyMask,
) -> Result<Tensor> {
    check_pair("fuse_mask_concat", a, b)?;
    let va = g.mul_mask(&ma.m, &a.tensor)?;
    let vb = g.mul_mask(&mb.m, &b.tensor)?;
    g.concat_channels(&va, &vb)
}

/// Selective fusion: Hadamard product of each volume with its categorical
/// encoding, then channel concatenation.
pub fn fuse_stochastic(
    g: &Graph,
    a: &FeatureVolume,
    b: &FeatureVolume,
    ea: &CategoricalEncoding,
    eb: &CategoricalEncoding,
) -> Result<Tensor> {
    check_pair("fuse_stochastic", a, b)?;
    if ea.e.shape() != a.tensor.shape() || eb.e.shape() != b.tensor.shape() {
        return Err(TensorError::InvalidShape {
            op: "fuse_stochastic",
            detail: format!(
                "encoding {:?}/{:?} vs volume {:?}",
                ea.e.shape(),
                eb.e.shape(),
                a.tensor.shape()
            ),
        });
    }
    let va = g.hadamard(&ea.e, &a.tensor)?;
    let vb = g.hadamard(&eb.e, &b.tensor)?;
    g.concat_channels(&va, &vb)
}

// ── Gumbel-Softmax ───────────────────────────────────────────────────

/// Standard Gumbel transform of a uniform draw, clamped away from 0 and 1.
pub(crate) fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// Draw i.i.d. standard Gumbel noise of the given shape.
pub fn sample_gumbel<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect();
    Tensor::new(shape.to_vec(), data).expect("gumbel draws are finite")
}

/// Gumbel-Softmax resampling of log-probabilities, row-wise along the width
/// axis of a CxHxW tensor: e = softmax_temp(logpi + G, axis = 2, tau).
///
/// Differentiable with respect to `logpi`; the noise enters as a constant.
pub fn gumbel_softmax<R: Rng>(
    g: &Graph,
    logpi: &Tensor,
    tau: f64,
    rng: &mut R,
) -> Result<CategoricalEncoding> {
    let noise = sample_gumbel(logpi.shape(), rng);
    gumbel_softmax_with_noise(g, logpi, tau, &noise)
}

/// Deterministic variant used by tests: the caller supplies the noise tensor.
pub fn gumbel_softmax_with_noise(
    g: &Graph,
    logpi: &Tensor,
    tau: f64,
    noise: &Tensor,
) -> Result<CategoricalEncoding> {
    if logpi.shape().len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "gumbel_softmax",
            detail: format!("expected CxHxW, got {:?}", logpi.shape()),
        });
    }
    if noise.shape() != logpi.shape() {
        return Err(TensorError::InvalidShape {
            op: "gumbel_softmax",
            detail: format!("noise {:?} vs logpi {:?}", noise.shape(), logpi.shape()),
        });
    }
    let lp = g.input(logpi)?;
    let gn = g.input(noise)?;
    let perturbed = g.add(&lp, &gn)?;
    let e = g.softmax_temp(&perturbed, 2, tau)?;
    Ok(CategoricalEncoding { e })
}

// ── certainty report ─────────────────────────────────────────────────

/// Normalized sensor contributions for the report bar.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CertaintyReport {
    pub a: f64,
    pub b: f64,
    /// Set when both weights were zero and the 0.5/0.5 fallback was used.
    pub degenerate: bool,
}

/// Normalize a pair of non-negative certainty weights to contributions that
/// sum to one. Both zero is reported as 0.5/0.5 with the degenerate flag set.
pub fn certainty_report(wa: f64, wb: f64) -> Result<CertaintyReport> {
    if wa < 0.0 || wb < 0.0 || !wa.is_finite() || !wb.is_finite() {
        return Err(TensorError::InvalidParameter {
            op: "certainty_report",
            detail: format!("weights must be non-negative and finite, got ({wa}, {wb})"),
        });
    }
    let total = wa + wb;
    if total == 0.0 {
        return Ok(CertaintyReport { a: 0.5, b: 0.5, degenerate: true });
    }
    Ok(CertaintyReport { a: wa / total, b: wb / total, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::gradcheck::{check_gradient, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn vol(g: &Graph, shape: &[usize], data: &[f64]) -> FeatureVolume {
        let t = g.input(&Tensor::new(shape.to_vec(), data.to_vec()).unwrap()).unwrap();
        FeatureVolume::new(t, Modality::Rgb).unwrap()
    }

    fn unit_weight(g: &Graph, v: f64) -> CertaintyWeight {
        let w = g.input(&Tensor::scalar(v)).unwrap();
        CertaintyWeight {
            w: w.clone(),
            raw: w.clone(),
            mean_ng: g.input(&Tensor::scalar(1.0)).unwrap(),
        }
    }

    #[test]
    fn backbone_shape_64_to_8() {
        let mut r = rng(1);
        let params = BackboneParams::init(3, &mut r);
        let g = Graph::new();
        let img = Tensor::zeros(vec![3, 64, 64]);
        let f = extract_features(&g, &img, &params, Modality::Rgb).unwrap();
        assert_eq!(f.tensor.shape(), &[32, 8, 8]);
    }

    #[test]
    fn backbone_zero_image_zero_bias_gives_zero_volume() {
        let mut r = rng(2);
        let params = BackboneParams::init(3, &mut r); // biases init to zero
        let g = Graph::new();
        let img = Tensor::zeros(vec![3, 16, 16]);
        let f = extract_features(&g, &img, &params, Modality::Rgb).unwrap();
        assert!(f.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_is_deterministic() {
        let build = || {
            let mut r = rng(3);
            let params = BackboneParams::init(3, &mut r);
            let g = Graph::new();
            let mut ir = rng(4);
            let img = Tensor::rand_uniform(vec![3, 16, 16], 0.0, 1.0, &mut ir);
            extract_features(&g, &img, &params, Modality::Rgb)
                .unwrap()
                .tensor
                .data()
                .to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn backbone_rejects_wrong_channel_count() {
        let mut r = rng(5);
        let params = BackboneParams::init(3, &mut r);
        let g = Graph::new();
        let img = Tensor::zeros(vec![1, 16, 16]);
        assert!(extract_features(&g, &img, &params, Modality::Ir).is_err());
    }

    #[test]
    fn certainty_zero_features_means_zero_weight() {
        let mut r = rng(6);
        let params = EstimatorParams::init(2, &mut r);
        let g = Graph::new();
        let s = vol(&g, &[2, 4, 4], &vec![0.0; 32]);
        let cw = estimate_certainty(&g, &s, &params, 2).unwrap();
        assert_eq!(cw.w.item(), 0.0);
    }

    #[test]
    fn certainty_arithmetic_example() {
        // Zero-parameter network gives raw = sigmoid(0) = 0.5; single channel
        // 2x2 = [1,2,3,4] with k = 1 has mean 2.5, so w = 1.25.
        let params = EstimatorParams::zeroed(1);
        let g = Graph::new();
        let s = vol(&g, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let cw = estimate_certainty(&g, &s, &params, 1).unwrap();
        assert!((cw.raw.item() - 0.5).abs() < 1e-15);
        assert!((cw.mean_ng.item() - 2.5).abs() < 1e-15);
        assert!((cw.w.item() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn certainty_rejects_bad_k() {
        let params = EstimatorParams::zeroed(2);
        let g = Graph::new();
        let s = vol(&g, &[2, 2, 2], &[0.5; 8]);
        assert!(estimate_certainty(&g, &s, &params, 0).is_err());
        assert!(estimate_certainty(&g, &s, &params, 3).is_err());
    }

    #[test]
    fn certainty_gradient_skips_mean_branch() {
        // Split the volume into two leaves: one feeds the conditioning
        // network, the other feeds the mean factor. The mean branch must get
        // an exactly-zero gradient even though perturbing it moves the loss.
        let mut r = rng(7);
        let params = EstimatorParams::init(2, &mut r);
        let data = Tensor::rand_uniform(vec![2, 4, 4], 0.1, 1.0, &mut r);

        let g = Graph::new();
        let s_net = g.input(&data).unwrap();
        let s_mean = g.input(&data).unwrap();
        let net_vol = FeatureVolume::new(s_net.clone(), Modality::Rgb).unwrap();

        // Reproduce estimate_certainty but with the mean taken from s_mean.
        let cw = estimate_certainty(&g, &net_vol, &params, 2).unwrap();
        let mean = g.mean(&g.slice_channels(&s_mean, 0, 2).unwrap()).unwrap();
        let mean_ng = g.stop_gradient(&mean).unwrap();
        let w = g.hadamard(&cw.raw, &mean_ng).unwrap();

        let grads = g.backward(&w).unwrap();
        let grad_mean_branch = grads.wrt(&s_mean).unwrap();
        assert!(grad_mean_branch.data().iter().all(|&v| v == 0.0));
        let grad_net_branch = grads.wrt(&s_net).unwrap();
        assert!(grad_net_branch.data().iter().any(|&v| v != 0.0));

        // Forward delta through the mean branch alone is nonzero.
        let g2 = Graph::new();
        let s_net2 = g2.input(&data).unwrap();
        let bumped = data.with_value_at(0, data.data()[0] + 0.5);
        let s_mean2 = g2.input(&bumped).unwrap();
        let net_vol2 = FeatureVolume::new(s_net2, Modality::Rgb).unwrap();
        let cw2 = estimate_certainty(&g2, &net_vol2, &params, 2).unwrap();
        let mean2 = g2.mean(&g2.slice_channels(&s_mean2, 0, 2).unwrap()).unwrap();
        let mean_ng2 = g2.stop_gradient(&mean2).unwrap();
        let w2 = g2.hadamard(&cw2.raw, &mean_ng2).unwrap();
        assert!((w2.item() - w.item()).abs() > 1e-9);
    }

    #[test]
    fn mask_of_zero_params_is_half() {
        let params = MaskParams::zeroed(2);
        let g = Graph::new();
        let s = vol(&g, &[2, 3, 3], &vec![0.3; 18]);
        let cm = estimate_mask(&g, &s, &params).unwrap();
        assert_eq!(cm.m.shape(), &[1, 3, 3]);
        assert!(cm.m.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn mask_shape_and_determinism() {
        let mut r = rng(8);
        let params = MaskParams::init(4, &mut r);
        let run = || {
            let g = Graph::new();
            let mut ir = rng(9);
            let t = g.input(&Tensor::rand_uniform(vec![4, 5, 6], 0.0, 1.0, &mut ir)).unwrap();
            let s = FeatureVolume::new(t, Modality::Ir).unwrap();
            estimate_mask(&g, &s, &params).unwrap().m.data().to_vec()
        };
        let m1 = run();
        assert_eq!(m1.len(), 30);
        assert_eq!(m1, run());
    }

    #[test]
    fn scalar_fusion_arithmetic_example() {
        // s_a = [2], s_b = [4], w_a = 0.8, w_b = 0.2.
        let g = Graph::new();
        let a = vol(&g, &[1, 1, 1], &[2.0]);
        let b = vol(&g, &[1, 1, 1], &[4.0]);
        let wa = unit_weight(&g, 0.8);
        let wb = unit_weight(&g, 0.2);
        let avg = fuse_scalar_avg(&g, &a, &b, &wa, &wb).unwrap();
        assert!((avg.data()[0] - 1.2).abs() < 1e-15);
        let cat = fuse_scalar_concat(&g, &a, &b, &wa, &wb).unwrap();
        assert_eq!(cat.shape(), &[2, 1, 1]);
        assert!((cat.data()[0] - 1.6).abs() < 1e-15);
        assert!((cat.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_weights_reduce_to_plain_average() {
        let mut r = rng(10);
        let data_a = Tensor::rand_uniform(vec![2, 3, 3], -1.0, 1.0, &mut r);
        let data_b = Tensor::rand_uniform(vec![2, 3, 3], -1.0, 1.0, &mut r);
        let g = Graph::new();
        let a = FeatureVolume::new(g.input(&data_a).unwrap(), Modality::Rgb).unwrap();
        let b = FeatureVolume::new(g.input(&data_b).unwrap(), Modality::Ir).unwrap();
        let wa = unit_weight(&g, 1.0);
        let wb = unit_weight(&g, 1.0);
        let fused = fuse_scalar_avg(&g, &a, &b, &wa, &wb).unwrap();
        for i in 0..fused.numel() {
            let plain = (data_a.data()[i] + data_b.data()[i]) * 0.5;
            assert_eq!(fused.data()[i].to_bits(), plain.to_bits());
        }
    }

    #[test]
    fn zero_weight_annihilates_a_modality() {
        let mut r = rng(11);
        let data_a = Tensor::rand_uniform(vec![2, 2, 2], -1.0, 1.0, &mut r);
        let eval = |b_vals: &Tensor| {
            let g = Graph::new();
            let a = FeatureVolume::new(g.input(&data_a).unwrap(), Modality::Rgb).unwrap();
            let b = FeatureVolume::new(g.input(b_vals).unwrap(), Modality::Ir).unwrap();
            let wa = unit_weight(&g, 0.7);
            let wb = unit_weight(&g, 0.0);
            fuse_scalar_avg(&g, &a, &b, &wa, &wb).unwrap().data().to_vec()
        };
        let b1 = Tensor::rand_uniform(vec![2, 2, 2], -1.0, 1.0, &mut r);
        let b2 = Tensor::rand_uniform(vec![2, 2, 2], -1.0, 1.0, &mut r);
        let o1 = eval(&b1);
        assert_eq!(o1, eval(&b2));
        for (i, &v) in o1.iter().enumerate() {
            assert_eq!(v.to_bits(), (0.7 * data_a.data()[i] / 2.0).to_bits());
        }
    }

    #[test]
    fn swap_symmetry() {
        let mut r = rng(12);
        let da = Tensor::rand_uniform(vec![2, 2, 2], -1.0, 1.0, &mut r);
        let db = Tensor::rand_uniform(vec![2, 2, 2], -1.0, 1.0, &mut r);
        let run = |swap: bool| {
            let g = Graph::new();
            let a = FeatureVolume::new(g.input(&da).unwrap(), Modality::Rgb).unwrap();
            let b = FeatureVolume::new(g.input(&db).unwrap(), Modality::Ir).unwrap();
            let wa = unit_weight(&g, 0.3);
            let wb = unit_weight(&g, 0.9);
            let (x, y, wx, wy) = if swap { (&b, &a, &wb, &wa) } else { (&a, &b, &wa, &wb) };
            (
                fuse_scalar_avg(&g, x, y, wx, wy).unwrap().data().to_vec(),
                fuse_scalar_concat(&g, x, y, wx, wy).unwrap().data().to_vec(),
            )
        };
        let (avg1, cat1) = run(false);
        let (avg2, cat2) = run(true);
        assert_eq!(avg1, avg2);
        // Concatenation swaps its channel blocks exactly.
        let half = cat1.len() / 2;
        assert_eq!(&cat1[..half], &cat2[half..]);
        assert_eq!(&cat1[half..], &cat2[..half]);
    }

    #[test]
    fn mask_fusion_against_scalar_loop() {
        let g = Graph::new();
        let a = vol(&g, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = vol(&g, &[1, 2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let ma = CertaintyMask {
            m: g.input(&Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap(),
        };
        let mb = CertaintyMask {
            m: g.input(&Tensor::new(vec![1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap()).unwrap(),
        };
        let avg = fuse_mask_avg(&g, &a, &b, &ma, &mb).unwrap();
        let expect: Vec<f64> = (0..4)
            .map(|i| {
                let wa = [1.0, 0.0, 0.0, 1.0][i] * a.tensor.data()[i];
                let wb = 0.5 * b.tensor.data()[i];
                (wa + wb) * 0.5
            })
            .collect();
        for i in 0..4 {
            assert!((avg.data()[i] - expect[i]).abs() < 1e-15);
        }

        let cat = fuse_mask_concat(&g, &a, &b, &ma, &mb).unwrap();
        assert_eq!(cat.shape(), &[2, 2, 2]);
        assert!((cat.data()[1] - 0.0).abs() < 1e-15); // masked out
        assert!((cat.data()[4] - 2.5).abs() < 1e-15); // 0.5 * 5.0
    }

    #[test]
    fn mask_all_ones_is_plain_average_and_zero_blanks_block() {
        let g = Graph::new();
        let a = vol(&g, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = vol(&g, &[1, 2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let ones = CertaintyMask { m: g.input(&Tensor::filled(vec![1, 2, 2], 1.0)).unwrap() };
        let zeros = CertaintyMask { m: g.input(&Tensor::zeros(vec![1, 2, 2])).unwrap() };
        let avg = fuse_mask_avg(&g, &a, &b, &ones, &ones).unwrap();
        assert_eq!(avg.data(), &[3.0, 4.0, 5.0, 6.0]);
        let cat = fuse_mask_concat(&g, &a, &b, &ones, &zeros).unwrap();
        assert!(cat.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gumbel_analytic_points() {
        assert!((gumbel_from_uniform((-1.0f64).exp()) - 0.0).abs() < 1e-12);
        assert!((gumbel_from_uniform((-std::f64::consts::E).exp()) - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn gumbel_softmax_zero_noise_reduces_to_softmax() {
        let mut r = rng(13);
        let logpi = Tensor::rand_uniform(vec![2, 3, 4], -1.0, 1.0, &mut r);
        let g = Graph::new();
        let zero = Tensor::zeros(vec![2, 3, 4]);
        let enc = gumbel_softmax_with_noise(&g, &logpi, 1.0, &zero).unwrap();
        let lp = g.input(&logpi).unwrap();
        let plain = g.softmax_temp(&lp, 2, 1.0).unwrap();
        assert_eq!(enc.e.data(), plain.data());
    }

    #[test]
    fn gumbel_softmax_rows_sum_to_one() {
        let mut r = rng(14);
        let logpi = Tensor::rand_uniform(vec![3, 4, 5], -2.0, 2.0, &mut r);
        let g = Graph::new();
        let enc = gumbel_softmax(&g, &logpi, 0.5, &mut r).unwrap();
        for c in 0..3 {
            for row in 0..4 {
                let base = (c * 4 + row) * 5;
                let s: f64 = enc.e.data()[base..base + 5].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(enc.e.data()[base..base + 5].iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn stochastic_fusion_scalar_loop_case() {
        let g = Graph::new();
        let a = vol(&g, &[1, 1, 3], &[1.0, 2.0, 3.0]);
        let b = vol(&g, &[1, 1, 3], &[4.0, 5.0, 6.0]);
        let ea = CategoricalEncoding {
            e: g.input(&Tensor::new(vec![1, 1, 3], vec![0.7, 0.2, 0.1]).unwrap()).unwrap(),
        };
        let eb = CategoricalEncoding {
            e: g.input(&Tensor::new(vec![1, 1, 3], vec![0.1, 0.1, 0.8]).unwrap()).unwrap(),
        };
        let fused = fuse_stochastic(&g, &a, &b, &ea, &eb).unwrap();
        assert_eq!(fused.shape(), &[2, 1, 3]);
        let expect = [0.7, 0.4, 0.3, 0.4, 0.5, 4.8];
        for i in 0..6 {
            assert!((fused.data()[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn stochastic_fusion_uniform_encoding_scales_by_inverse_width() {
        let g = Graph::new();
        let a = vol(&g, &[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let b = vol(&g, &[1, 1, 4], &[8.0, 8.0, 8.0, 8.0]);
        let u = CategoricalEncoding { e: g.input(&Tensor::filled(vec![1, 1, 4], 0.25)).unwrap() };
        let fused = fuse_stochastic(&g, &a, &b, &u, &u).unwrap();
        assert_eq!(fused.data(), &[0.25, 0.5, 0.75, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn certainty_report_cases() {
        let r = certainty_report(1.0, 1.0).unwrap();
        assert_eq!((r.a, r.b, r.degenerate), (0.5, 0.5, false));
        let r = certainty_report(3.0, 1.0).unwrap();
        assert_eq!((r.a, r.b), (0.75, 0.25));
        let r = certainty_report(0.0, 0.0).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.a, r.b), (0.5, 0.5));
        assert!(certainty_report(-1.0, 1.0).is_err());
    }

    #[test]
    fn fusion_operators_are_differentiable() {
        let mut r = rng(15);
        let da = Tensor::rand_uniform(vec![2, 4, 4], 0.1, 1.0, &mut r);
        let db = Tensor::rand_uniform(vec![2, 4, 4], 0.1, 1.0, &mut r);

        // Operator-level check: volumes and scalar weights as free inputs.
        // (Gradients through the full weight-estimation chain are deliberately
        // inexact against finite differences: the mean factor is stopped.)
        let report = check_gradient(
            &|g: &Graph, inp: &[Tensor]| {
                let a = FeatureVolume::new(inp[0].clone(), Modality::Rgb).unwrap();
                let b = FeatureVolume::new(inp[1].clone(), Modality::Ir).unwrap();
                let mk = |w: &Tensor| CertaintyWeight {
                    w: w.clone(),
                    raw: w.clone(),
                    mean_ng: w.clone(),
                };
                let fused = fuse_scalar_avg(g, &a, &b, &mk(&inp[2]), &mk(&inp[3]))?;
                g.sum(&g.hadamard(&fused, &fused)?)
            },
            &[
                da.clone(),
                db.clone(),
                Tensor::scalar(0.8),
                Tensor::scalar(0.3),
            ],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "sa: {}", report.max_rel_err);

        // Full chain check with respect to the estimator parameters: the mean
        // factor is constant in theta, so finite differences agree here.
        let est_a = EstimatorParams::init(2, &mut r);
        let report = check_gradient(
            &|g: &Graph, inp: &[Tensor]| {
                let params = EstimatorParams {
                    conv_kernel: inp[0].clone(),
                    conv_bias: inp[1].clone(),
                    dense_weight: inp[2].clone(),
                    dense_bias: inp[3].clone(),
                };
                let a = FeatureVolume::new(g.input(&da)?, Modality::Rgb).unwrap();
                let b = FeatureVolume::new(g.input(&db)?, Modality::Ir).unwrap();
                let wa = estimate_certainty(g, &a, &params, 2)?;
                let wb = estimate_certainty(g, &b, &params, 2)?;
                let fused = fuse_scalar_concat(g, &a, &b, &wa, &wb)?;
                g.sum(&fused)
            },
            &[
                est_a.conv_kernel.clone(),
                est_a.conv_bias.clone(),
                est_a.dense_weight.clone(),
                est_a.dense_bias.clone(),
            ],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "sc/theta: {}", report.max_rel_err);

        // Stochastic path with injected noise held fixed; gradient flows both
        // through the encodings and the volumes.
        let noise = sample_gumbel(&[2, 4, 4], &mut r);
        let report = check_gradient(
            &|g: &Graph, inp: &[Tensor]| {
                let a = FeatureVolume::new(inp[0].clone(), Modality::Rgb).unwrap();
                let b = FeatureVolume::new(inp[1].clone(), Modality::Ir).unwrap();
                let ea = gumbel_softmax_with_noise(g, &inp[0], 1.0, &noise)?;
                let eb = gumbel_softmax_with_noise(g, &inp[1], 1.0, &noise)?;
                let fused = fuse_stochastic(g, &a, &b, &ea, &eb)?;
                g.sum(&g.hadamard(&fused, &fused)?)
            },
            &[da, db],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "sf: {}", report.max_rel_err);
    }
}
