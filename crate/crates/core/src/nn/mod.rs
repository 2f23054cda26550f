//! Small convolutional encoder with global average pooling and a single
//! sigmoid output unit.
//!
//! Every stage is `conv3x3 (stride 1, zero pad 1) -> ReLU -> maxpool 2x2`.
//! The encoder's final pooled maps are the per-channel spatial maps used by
//! CAM; their global average is the feature vector fed to the head.
//! All arithmetic is `f64`.

mod gradcheck;
mod train;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_MIN_PARAMS};
pub use train::{train_erm, EpochLog, TrainConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Image;
use crate::error::{Error, Result};

/// Clamp used by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Default channel widths after the input channels.
pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvStage {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub image_size: usize,
    pub input_channels: usize,
    pub stages: Vec<ConvStage>,
}

impl Encoder {
    /// All-zero encoder. With no widths it passes the image straight to
    /// pooling, so features are the per-channel image means.
    pub fn zeros(image_size: usize, input_channels: usize, widths: &[usize]) -> Result<Self> {
        if input_channels == 0 || widths.contains(&0) {
            return Err(Error::Argument("channel widths must be positive".into()));
        }
        let stride = 1usize
            .checked_shl(widths.len() as u32)
            .ok_or_else(|| Error::Argument("too many stages".into()))?;
        if image_size == 0 || image_size % stride != 0 {
            return Err(Error::Argument(format!(
                "image_size {image_size} is not divisible by 2^{} for {} pooling stages",
                widths.len(),
                widths.len()
            )));
        }
        let mut stages = Vec::with_capacity(widths.len());
        let mut cin = input_channels;
        for &cout in widths {
            stages.push(ConvStage::zeros(cin, cout));
            cin = cout;
        }
        Ok(Self {
            image_size,
            input_channels,
            stages,
        })
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(
        image_size: usize,
        input_channels: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut enc = Self::zeros(image_size, input_channels, widths)?;
        for stage in &mut enc.stages {
            let limit = (6.0 / (stage.in_channels * 9) as f64).sqrt();
            for w in &mut stage.weight {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(enc)
    }

    pub fn output_channels(&self) -> usize {
        self.stages
            .last()
            .map_or(self.input_channels, |s| s.out_channels)
    }

    pub fn output_side(&self) -> usize {
        self.image_size >> self.stages.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.out_channels).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Head {
    pub fn zeros(d: usize) -> Self {
        Self {
            weights: vec![0.0; d],
            bias: 0.0,
        }
    }

    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (d + 1) as f64).sqrt();
        Self {
            weights: (0..d).map(|_| rng.random_range(-limit..limit)).collect(),
            bias: 0.0,
        }
    }

    pub fn logit(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.weights.len() {
            return Err(Error::shape(
                "head input",
                self.weights.len(),
                features.len(),
            ));
        }
        Ok(dot(&self.weights, features) + self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub encoder: Encoder,
    pub head: Head,
    pub log: Vec<EpochLog>,
}

impl TrainedModel {
    pub fn new(encoder: Encoder, head: Head) -> Result<Self> {
        if head.weights.len() != encoder.output_channels() {
            return Err(Error::shape(
                "head weights",
                encoder.output_channels(),
                head.weights.len(),
            ));
        }
        Ok(Self {
            encoder,
            head,
            log: Vec::new(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_channels()
    }

    /// A model of the same architecture with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let widths = self.encoder.widths();
        Self {
            encoder: Encoder::zeros(self.encoder.image_size, self.encoder.input_channels, &widths)
                .expect("architecture already validated"),
            head: Head::zeros(self.feature_dim()),
            log: Vec::new(),
        }
    }

    /// Parameter tensors in a fixed order, each tagged with whether it is a
    /// weight (subject to weight decay) or a bias.
    pub fn params(&self) -> Vec<(&[f64], bool)> {
        let mut out = Vec::with_capacity(2 * self.encoder.stages.len() + 2);
        for s in &self.encoder.stages {
            out.push((s.weight.as_slice(), true));
            out.push((s.bias.as_slice(), false));
        }
        out.push((self.head.weights.as_slice(), true));
        out.push((std::slice::from_ref(&self.head.bias), false));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out = Vec::with_capacity(2 * self.encoder.stages.len() + 2);
        for s in &mut self.encoder.stages {
            out.push((s.weight.as_mut_slice(), true));
            out.push((s.bias.as_mut_slice(), false));
        }
        out.push((self.head.weights.as_mut_slice(), true));
        out.push((std::slice::from_mut(&mut self.head.bias), false));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(p, _)| p.len()).sum()
    }

    pub fn predict_image(&self, image: &Image) -> Result<f64> {
        let out = forward(&self.encoder, image)?;
        predict(&self.head, &out.features)
    }
}

/// `channels × height × width` activation maps, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMaps {
    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub maps: FeatureMaps,
    pub features: Vec<f64>,
}

/// Spatial mean of one map: row-major sum, then a single division.
#[inline]
pub fn spatial_mean(map: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in map {
        acc += v;
    }
    acc / map.len() as f64
}

pub fn forward(encoder: &Encoder, image: &Image) -> Result<ForwardOutput> {
    let mut ws = Workspace::new(encoder);
    ws.run(encoder, image)?;
    Ok(ws.output())
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn predict(head: &Head, features: &[f64]) -> Result<f64> {
    head.logit(features).map(sigmoid)
}

pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Dot product with eight interleaved partial sums, so the reduction is not
/// one serial dependency chain. Summation order is fixed, hence deterministic.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Per-stage buffers kept from the forward pass for backprop.
#[derive(Clone, Debug)]
pub(crate) struct StageCache {
    side: usize,
    /// Input with a one-pixel zero border: `[in][side+2][side+2]`.
    padded: Vec<f64>,
    /// Post-ReLU convolution output: `[out][side][side + 2]`, last two
    /// columns of each row zero.
    act: Vec<f64>,
    /// Flat index into `act` of each pooled maximum.
    argmax: Vec<u32>,
    pooled: Vec<f64>,
}

/// Reusable forward buffers. After `run`, `maps` holds the final spatial
/// maps and `features` their spatial means.
#[derive(Clone, Debug)]
pub(crate) struct Workspace {
    pub(crate) caches: Vec<StageCache>,
    pub(crate) maps: Vec<f64>,
    pub(crate) features: Vec<f64>,
    pub(crate) side: usize,
    pub(crate) channels: usize,
}

impl Workspace {
    pub(crate) fn new(encoder: &Encoder) -> Self {
        let mut side = encoder.image_size;
        let caches = encoder
            .stages
            .iter()
            .map(|s| {
                let c = StageCache {
                    side,
                    padded: vec![0.0; s.in_channels * (side + 2) * (side + 2)],
                    act: vec![0.0; s.out_channels * side * (side + 2)],
                    argmax: vec![0; s.out_channels * (side / 2) * (side / 2)],
                    pooled: vec![0.0; s.out_channels * (side / 2) * (side / 2)],
                };
                side /= 2;
                c
            })
            .collect();
        let channels = encoder.output_channels();
        Self {
            caches,
            maps: vec![0.0; channels * side * side],
            features: vec![0.0; channels],
            side,
            channels,
        }
    }

    pub(crate) fn run(&mut self, encoder: &Encoder, image: &Image) -> Result<()> {
        let n = encoder.image_size;
        if image.height != n || image.width != n || image.channels != encoder.input_channels {
            return Err(Error::shape(
                "encoder input",
                format!("{n}x{n}x{}", encoder.input_channels),
                format!("{}x{}x{}", image.height, image.width, image.channels),
            ));
        }
        if image.data.len() != n * n * image.channels {
            return Err(Error::shape(
                "image buffer",
                n * n * image.channels,
                image.data.len(),
            ));
        }

        // HWC image -> CHW input of the first stage (or the output maps).
        {
            let c_in = image.channels;
            let (dst, stride, off) = match self.caches.first_mut() {
                Some(c) => (&mut c.padded, n + 2, 1),
                None => (&mut self.maps, n, 0),
            };
            for c in 0..c_in {
                for y in 0..n {
                    let row = &mut dst[c * stride * stride + (y + off) * stride + off..][..n];
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = image.data[(y * n + x) * c_in + c];
                    }
                }
            }
        }

        for s in 0..encoder.stages.len() {
            let (head, tail) = self.caches.split_at_mut(s + 1);
            let cache = &mut head[s];
            conv_relu_pool(&encoder.stages[s], cache);
            let out_side = cache.side / 2;
            let next = match tail.first_mut() {
                Some(next) => (&mut next.padded, out_side + 2, 1),
                None => (&mut self.maps, out_side, 0),
            };
            let (dst, stride, off) = next;
            for c in 0..encoder.stages[s].out_channels {
                for y in 0..out_side {
                    let src = &cache.pooled[(c * out_side + y) * out_side..][..out_side];
                    dst[c * stride * stride + (y + off) * stride + off..][..out_side]
                        .copy_from_slice(src);
                }
            }
        }

        let hw = self.side * self.side;
        for k in 0..self.channels {
            self.features[k] = spatial_mean(&self.maps[k * hw..(k + 1) * hw]);
        }
        Ok(())
    }

    /// Appends the piecewise-linear regime of the last pass (ReLU on/off
    /// bits and max-pool winners) to `out`.
    pub(crate) fn activation_pattern(&self, out: &mut Vec<u32>) {
        for c in &self.caches {
            out.extend_from_slice(&c.argmax);
            out.extend(c.act.iter().map(|&v| (v > 0.0) as u32));
        }
    }

    pub(crate) fn output(&self) -> ForwardOutput {
        ForwardOutput {
            maps: FeatureMaps {
                channels: self.channels,
                height: self.side,
                width: self.side,
                data: self.maps.clone(),
            },
            features: self.features.clone(),
        }
    }
}

/// Length of the flat output range covered by one kernel tap in the wide
/// layout: every row of `side + 2` entries except the last two pad columns.
#[inline]
fn wide_len(side: usize) -> usize {
    side * (side + 2) - 2
}

/// `out[j] += sum_t k[t] * src[j + off_t]` over the nine 3x3 tap offsets
/// `off = ky * stride + kx`, all taps fused into one pass over `out`.
#[inline]
fn taps3x3(out: &mut [f64], src: &[f64], stride: usize, k: &[f64; 9]) {
    let len = out.len();
    let r0 = &src[..len + 2];
    let r1 = &src[stride..stride + len + 2];
    let r2 = &src[2 * stride..2 * stride + len + 2];
    for j in 0..len {
        let a = k[0] * r0[j] + k[1] * r0[j + 1] + k[2] * r0[j + 2];
        let b = k[3] * r1[j] + k[4] * r1[j + 1] + k[5] * r1[j + 2];
        let c = k[6] * r2[j] + k[7] * r2[j + 1] + k[8] * r2[j + 2];
        out[j] += a + b + c;
    }
}

/// The nine sums `sum_j g[j] * src[j + off_t]`, one per 3x3 tap, each with
/// four interleaved partial sums in a fixed order.
#[inline]
fn tap_dots3x3(g: &[f64], src: &[f64], stride: usize) -> [f64; 9] {
    let len = g.len();
    let offs = [0, 1, 2, stride, stride + 1, stride + 2, 2 * stride, 2 * stride + 1, 2 * stride + 2];
    let mut acc = [[0.0f64; 4]; 9];
    let full = len / 4 * 4;
    let mut j = 0;
    while j < full {
        let gv = [g[j], g[j + 1], g[j + 2], g[j + 3]];
        for t in 0..9 {
            let sv = &src[j + offs[t]..j + offs[t] + 4];
            for l in 0..4 {
                acc[t][l] += gv[l] * sv[l];
            }
        }
        j += 4;
    }
    let mut out = [0.0; 9];
    for t in 0..9 {
        let mut tail = 0.0;
        for jj in full..len {
            tail += g[jj] * src[jj + offs[t]];
        }
        out[t] = (acc[t][0] + acc[t][2]) + (acc[t][1] + acc[t][3]) + tail;
    }
    out
}

fn conv_relu_pool(stage: &ConvStage, cache: &mut StageCache) {
    let n = cache.side;
    let p = n + 2;
    let plane = p * p;
    let len = wide_len(n);
    for o in 0..stage.out_channels {
        // Output rows use the padded stride `p`, so each tap is a single
        // contiguous multiply-add over the input plane. Columns n, n+1 of
        // each row are scratch and get zeroed below.
        let out = &mut cache.act[o * n * p..(o + 1) * n * p];
        out.fill(stage.bias[o]);
        for i in 0..stage.in_channels {
            let input = &cache.padded[i * plane..(i + 1) * plane];
            let k: &[f64; 9] = stage.weight[(o * stage.in_channels + i) * 9..][..9]
                .try_into()
                .expect("3x3 kernel");
            taps3x3(&mut out[..len], input, p, k);
        }
        for y in 0..n {
            let row = &mut out[y * p..(y + 1) * p];
            for v in row[..n].iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            row[n..].fill(0.0);
        }
        let h = n / 2;
        for y in 0..h {
            for x in 0..h {
                let base = o * n * p + 2 * y * p + 2 * x;
                let mut best = base;
                for cand in [base + 1, base + p, base + p + 1] {
                    if cache.act[cand] > cache.act[best] {
                        best = cand;
                    }
                }
                let j = (o * h + y) * h + x;
                cache.argmax[j] = best as u32;
                cache.pooled[j] = cache.act[best];
            }
        }
    }
}

/// Accumulates into `grad` the gradient of a loss whose derivative with
/// respect to the logit is `dlogit`, using the caches of the last `ws.run`.
pub(crate) fn backward(
    model: &TrainedModel,
    ws: &Workspace,
    dlogit: f64,
    grad: &mut TrainedModel,
    scratch: &mut BackwardScratch,
) {
    let d = ws.channels;
    for k in 0..d {
        grad.head.weights[k] += dlogit * ws.features[k];
    }
    grad.head.bias += dlogit;
    if model.encoder.stages.is_empty() {
        return;
    }

    let hw = ws.side * ws.side;
    let inv = 1.0 / hw as f64;
    let dmaps = &mut scratch.dpooled;
    dmaps.clear();
    for k in 0..d {
        let g = dlogit * model.head.weights[k] * inv;
        dmaps.extend(std::iter::repeat_n(g, hw));
    }

    for s in (0..model.encoder.stages.len()).rev() {
        let stage = &model.encoder.stages[s];
        let gstage = &mut grad.encoder.stages[s];
        let cache = &ws.caches[s];
        let n = cache.side;
        let p = n + 2;
        let plane = p * p;

        let len = wide_len(n);
        let dact = &mut scratch.dact;
        dact.clear();
        dact.resize(stage.out_channels * n * p, 0.0);
        for (j, &g) in scratch.dpooled.iter().enumerate() {
            let a = cache.argmax[j] as usize;
            if cache.act[a] > 0.0 {
                dact[a] += g;
            }
        }

        let need_input_grad = s > 0;
        // Input gradient is the correlation of the output gradient with the
        // flipped kernel; `dbuf` holds `dact` behind a 2p+2 zero margin.
        let margin = 2 * p + 2;
        if need_input_grad {
            scratch.dpad.clear();
            scratch.dpad.resize(stage.in_channels * plane, 0.0);
            scratch.dbuf.clear();
            scratch.dbuf.resize(stage.out_channels * (plane + margin), 0.0);
            for o in 0..stage.out_channels {
                scratch.dbuf[o * (plane + margin) + margin..][..n * p]
                    .copy_from_slice(&dact[o * n * p..(o + 1) * n * p]);
            }
        }

        for o in 0..stage.out_channels {
            let dout = &dact[o * n * p..(o + 1) * n * p];
            gstage.bias[o] += dout.iter().sum::<f64>();
            let dout = &dout[..len];
            for i in 0..stage.in_channels {
                let input = &cache.padded[i * plane..(i + 1) * plane];
                let widx = (o * stage.in_channels + i) * 9;
                let g = tap_dots3x3(dout, input, p);
                for (gw, gv) in gstage.weight[widx..widx + 9].iter_mut().zip(g) {
                    *gw += gv;
                }
                if need_input_grad {
                    let w = &stage.weight[widx..widx + 9];
                    let flipped = [w[8], w[7], w[6], w[5], w[4], w[3], w[2], w[1], w[0]];
                    let src = &scratch.dbuf[o * (plane + margin)..(o + 1) * (plane + margin)];
                    taps3x3(&mut scratch.dpad[i * plane..(i + 1) * plane], src, p, &flipped);
                }
            }
        }

        if need_input_grad {
            scratch.dpooled.clear();
            for i in 0..stage.in_channels {
                for y in 0..n {
                    let row = &scratch.dpad[i * plane + (y + 1) * p + 1..][..n];
                    scratch.dpooled.extend_from_slice(row);
                }
            }
        }
    }
}

#[derive(Default, Debug)]
pub(crate) struct BackwardScratch {
    dpooled: Vec<f64>,
    dact: Vec<f64>,
    dpad: Vec<f64>,
    dbuf: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn random_image(n: usize, c: usize, s: u64) -> Image {
        let mut rng = seed::rng(s, &[99]);
        let mut img = Image::zeros(n, n, c);
        for v in &mut img.data {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn predict_examples() {
        let head = Head::zeros(3);
        assert_eq!(predict(&head, &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        let head = Head {
            weights: vec![1.0, 0.0, 0.0],
            bias: 0.0,
        };
        assert_eq!(predict(&head, &[0.0, 0.0, 0.0]).unwrap(), 0.5);
        let head = Head {
            weights: vec![1.0],
            bias: 0.0,
        };
        let p = predict(&head, &[3f64.ln()]).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
        assert!(matches!(predict(&head, &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0, 1) <= -(1.0 - BCE_EPS).ln() + 1e-18);
        assert!(bce_loss(1.0, 0).is_finite());
        assert!(bce_loss(0.0, 0) >= 0.0);
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let enc = Encoder::zeros(16, 3, &[4, 4, 8]).unwrap();
        let out = forward(&enc, &random_image(16, 3, 1)).unwrap();
        assert_eq!(out.features, vec![0.0; 8]);
        assert_eq!((out.maps.height, out.maps.width, out.maps.channels), (2, 2, 8));
    }

    #[test]
    fn constant_final_map_pools_to_constant() {
        // Only the bias of channel 1 in the last stage is nonzero; with
        // zero weights that channel's map is the constant relu(bias).
        let mut enc = Encoder::zeros(8, 3, &[2, 3]).unwrap();
        enc.stages[1].bias[1] = 0.37;
        let out = forward(&enc, &random_image(8, 3, 2)).unwrap();
        assert!(out.maps.channel(1).iter().all(|&v| v == 0.37));
        assert_eq!(out.features[1], 0.37);
    }

    /// Independent direct-loop reference forward pass.
    fn reference_forward(enc: &Encoder, img: &Image) -> (Vec<Vec<Vec<f64>>>, usize) {
        let n = enc.image_size;
        let mut cur: Vec<Vec<Vec<f64>>> = (0..img.channels)
            .map(|c| (0..n).map(|y| (0..n).map(|x| img.at(y, x, c)).collect()).collect())
            .collect();
        let mut side = n;
        for st in &enc.stages {
            let mut conv = vec![vec![vec![0.0; side]; side]; st.out_channels];
            for o in 0..st.out_channels {
                for y in 0..side {
                    for x in 0..side {
                        let mut acc = st.bias[o];
                        for i in 0..st.in_channels {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let yy = y as isize + ky as isize - 1;
                                    let xx = x as isize + kx as isize - 1;
                                    if yy >= 0 && xx >= 0 && (yy as usize) < side && (xx as usize) < side {
                                        acc += st.weight[((o * st.in_channels + i) * 3 + ky) * 3 + kx]
                                            * cur[i][yy as usize][xx as usize];
                                    }
                                }
                            }
                        }
                        conv[o][y][x] = acc.max(0.0);
                    }
                }
            }
            side /= 2;
            cur = conv
                .iter()
                .map(|m| {
                    (0..side)
                        .map(|y| {
                            (0..side)
                                .map(|x| {
                                    m[2 * y][2 * x]
                                        .max(m[2 * y][2 * x + 1])
                                        .max(m[2 * y + 1][2 * x])
                                        .max(m[2 * y + 1][2 * x + 1])
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
        }
        (cur, side)
    }

    #[test]
    fn features_match_direct_summation_oracle() {
        let mut rng = seed::rng(5, &[1]);
        let enc = Encoder::init(8, 3, &[3, 4], &mut rng).unwrap();
        let img = random_image(8, 3, 3);
        let out = forward(&enc, &img).unwrap();
        let (maps, side) = reference_forward(&enc, &img);
        assert_eq!(out.features.len(), 4);
        for k in 0..4 {
            let mut sum = 0.0;
            for row in &maps[k] {
                for &v in row {
                    sum += v;
                }
            }
            let mean = sum / (side * side) as f64;
            assert!((out.features[k] - mean).abs() < 1e-12, "channel {k}");
            for y in 0..side {
                for x in 0..side {
                    assert!((out.maps.channel(k)[y * side + x] - maps[k][y][x]).abs() < 1e-12);
                }
            }
            // Exact under the row-major summation contract.
            assert_eq!(out.features[k], spatial_mean(out.maps.channel(k)));
        }
    }

    #[test]
    fn identity_encoder_pools_the_image() {
        let enc = Encoder::zeros(4, 2, &[]).unwrap();
        let img = random_image(4, 2, 4);
        let out = forward(&enc, &img).unwrap();
        for c in 0..2 {
            let mut s = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    s += img.at(y, x, c);
                }
            }
            assert_eq!(out.features[c], s / 16.0);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let enc = Encoder::zeros(8, 3, &[2]).unwrap();
        let err = forward(&enc, &random_image(16, 3, 0)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(err.to_string().contains("8x8x3"));
        assert!(Encoder::zeros(12, 3, &[2, 2, 2]).is_err());
    }
}
