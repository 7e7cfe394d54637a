//! Two-head fully convolutional segmenter.
//!
//! A trunk of same-padded `conv + relu` layers feeds two classifiers: the
//! auxiliary head reads the activation after `aux_tap` trunk layers, the
//! primary head reads the last one. Each head is dropout followed by a 1x1
//! convolution to class logits. The heads see different receptive fields,
//! so their predictions disagree on unfamiliar inputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::image::{Image, LabelMap};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RSEGNET\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Number of trunk layers in front of the auxiliary head.
    pub aux_tap: usize,
    pub dropout_rate: f64,
    pub classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 8, 16, 16],
            kernel: 3,
            aux_tap: 2,
            dropout_rate: 0.1,
            classes: 5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let depth = self.widths.len();
        if depth < 2 {
            return Err(Error::invalid(format!("trunk depth {depth} < 2")));
        }
        if self.aux_tap < 1 || self.aux_tap >= depth {
            return Err(Error::invalid(format!(
                "aux_tap {} must lie in [1, {})",
                self.aux_tap, depth
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel {} must be odd",
                self.kernel
            )));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::invalid(format!("class count {}", self.classes)));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("zero channel width"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init<R: Rng>(k: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (k * k * cin) as f64).sqrt();
        let w = (0..k * k * cin * cout)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(vec![k, k, cin, cout], w)
                .expect("valid shape")
                .with_grad(),
            bias: Tensor::zeros(vec![cout]).with_grad(),
        }
    }
}

/// Per-pixel class probabilities, `height x width x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl ProbMap {
    /// Validates that each pixel is a probability simplex (to 1e-6).
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * classes {
            return Err(Error::shape(
                "prob_map",
                format!("{height}x{width}x{classes} vs {} values", probs.len()),
            ));
        }
        if classes < 2 {
            return Err(Error::shape("prob_map", "fewer than 2 classes"));
        }
        for (i, px) in probs.chunks(classes).enumerate() {
            let s: f64 = px.iter().sum();
            if px.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "pixel {i} is not a distribution: {px:?}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            probs,
        })
    }

    /// Softmax of channels-last logits.
    pub fn from_logits(height: usize, width: usize, classes: usize, logits: &[f64]) -> Self {
        let mut probs = logits.to_vec();
        for px in probs.chunks_mut(classes) {
            let m = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            px.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = px.iter().sum();
            px.iter_mut().for_each(|v| *v /= s);
        }
        Self {
            height,
            width,
            classes,
            probs,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn same_shape(&self, other: &ProbMap) -> bool {
        self.height == other.height && self.width == other.width && self.classes == other.classes
    }

    /// Argmax per pixel, ties to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let labels = self.probs.chunks(self.classes).map(argmax_first).collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Logits that reproduce these probabilities under softmax.
    pub fn to_logits(&self) -> Vec<f64> {
        self.probs
            .iter()
            .map(|p| p.max(f64::MIN_POSITIVE).ln())
            .collect()
    }
}

pub(crate) fn argmax_first(px: &[f64]) -> u8 {
    let mut best = 0;
    for (i, v) in px.iter().enumerate() {
        if *v > px[best] {
            best = i;
        }
    }
    best as u8
}

pub const INPUT_CENTER: f64 = 0.5;

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct HeadLogits {
    pub primary: Var,
    pub aux: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoHeadSegNet {
    pub config: NetConfig,
    pub trunk: Vec<ConvLayer>,
    pub primary_head: ConvLayer,
    pub aux_head: ConvLayer,
}

impl TwoHeadSegNet {
    /// He-uniform weights, zero biases; deterministic in `seed`.
    pub fn init(seed: u64, config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = config.in_channels;
        let mut trunk = Vec::with_capacity(config.widths.len());
        for &w in &config.widths {
            trunk.push(ConvLayer::init(config.kernel, cin, w, &mut rng));
            cin = w;
        }
        let primary_head = ConvLayer::init(1, cin, config.classes, &mut rng);
        let aux_in = config.widths[config.aux_tap - 1];
        let aux_head = ConvLayer::init(1, aux_in, config.classes, &mut rng);
        Ok(Self {
            config,
            trunk,
            primary_head,
            aux_head,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Parameters in checkpoint order: trunk, primary head, aux head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.trunk.len() + 4);
        for l in self
            .trunk
            .iter()
            .chain([&self.primary_head, &self.aux_head])
        {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.trunk.len() + 4);
        for l in self
            .trunk
            .iter_mut()
            .chain([&mut self.primary_head, &mut self.aux_head])
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a graph leaf, in [`Self::params`] order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|p| g.leaf(p)).collect()
    }

    /// Records the forward pass on `x` (`[N, H, W, in_channels]` or
    /// `[H, W, in_channels]`). Primary-head dropout draws from `rng` before
    /// aux-head dropout.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<HeadLogits> {
        let depth = self.trunk.len();
        // Inputs live in [0, 1]; the trunk sees them centered.
        let mut h = g.add_scalar(x, -INPUT_CENTER);
        let mut tap = None;
        for i in 0..depth {
            let z = g.conv2d(h, params[2 * i], params[2 * i + 1])?;
            h = g.relu(z);
            if i + 1 == self.config.aux_tap {
                tap = Some(h);
            }
        }
        let tap = tap.expect("aux_tap validated against depth");
        let rate = self.config.dropout_rate;
        let hp = g.dropout(h, rate, mode, rng)?;
        let primary = g.conv2d(hp, params[2 * depth], params[2 * depth + 1])?;
        let ha = g.dropout(tap, rate, mode, rng)?;
        let aux = g.conv2d(ha, params[2 * depth + 2], params[2 * depth + 3])?;
        Ok(HeadLogits { primary, aux })
    }

    /// Probability maps of both heads for each image.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        images: &[&Image],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<(ProbMap, ProbMap)>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = (first.height, first.width);
        if images.iter().any(|im| im.height != h || im.width != w) {
            return Err(Error::shape("forward_batch", "images differ in size"));
        }
        if self.config.in_channels != 3 {
            return Err(Error::shape(
                "forward_batch",
                "network does not take RGB input",
            ));
        }
        let mut g = Graph::new();
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| {
                g.constant(p.shape().to_vec(), p.data().to_vec())
                    .expect("parameters are valid tensors")
            })
            .collect();
        let data: Vec<f64> = images
            .iter()
            .flat_map(|im| im.data.iter().copied())
            .collect();
        let x = g.constant(vec![images.len(), h, w, 3], data)?;
        let out = self.forward_graph(&mut g, &params, x, mode, rng)?;
        let c = self.config.classes;
        let per = h * w * c;
        let (vp, va) = (g.value(out.primary), g.value(out.aux));
        Ok((0..images.len())
            .map(|i| {
                (
                    ProbMap::from_logits(h, w, c, &vp[i * per..(i + 1) * per]),
                    ProbMap::from_logits(h, w, c, &va[i * per..(i + 1) * per]),
                )
            })
            .collect())
    }

    /// `(P, P_aux)` for one image.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Image,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(ProbMap, ProbMap)> {
        Ok(self.forward_batch(&[x], mode, rng)?.remove(0))
    }

    /// Dropout-free forward; no randomness consumed.
    pub fn predict(&self, x: &Image) -> Result<(ProbMap, ProbMap)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(x, Mode::Eval, &mut rng)
    }

    // ---- checkpoints --------------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.in_channels,
            c.classes,
            c.kernel,
            c.aux_tap,
            c.widths.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &w in &c.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout_rate.to_le_bytes());
        out.extend_from_slice(&(self.num_params() as u64).to_le_bytes());
        for p in self.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |d: &str| Error::format("<checkpoint>", d.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| fail("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        let u32_at = |r: &mut &[u8]| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| fail("truncated header"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = u32_at(&mut r)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let in_channels = u32_at(&mut r)?;
        let classes = u32_at(&mut r)?;
        let kernel = u32_at(&mut r)?;
        let aux_tap = u32_at(&mut r)?;
        let depth = u32_at(&mut r)?;
        if depth > 64 {
            return Err(fail("implausible depth"));
        }
        let widths = (0..depth)
            .map(|_| u32_at(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)
            .map_err(|_| fail("truncated header"))?;
        let dropout_rate = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)
            .map_err(|_| fail("truncated header"))?;
        let count = u64::from_le_bytes(b8) as usize;
        let config = NetConfig {
            in_channels,
            widths,
            kernel,
            aux_tap,
            dropout_rate,
            classes,
        };
        let mut net = Self::init(0, config)?;
        if count != net.num_params() || r.len() != 8 * count {
            return Err(fail("payload size does not match architecture"));
        }
        for p in net.params_mut() {
            for v in p.data_mut() {
                r.read_exact(&mut b8)
                    .map_err(|_| fail("truncated payload"))?;
                *v = f64::from_le_bytes(b8);
                if !v.is_finite() {
                    return Err(fail("non-finite weight"));
                }
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path, detail),
            other => other,
        })
    }
}

/// Per-pixel argmax of `alpha * P + beta * P_aux`, ties to the lowest class.
pub fn combined_prediction(
    p: &ProbMap,
    p_aux: &ProbMap,
    alpha: f64,
    beta: f64,
) -> Result<LabelMap> {
    if !p.same_shape(p_aux) {
        return Err(Error::shape(
            "combined_prediction",
            "head maps differ in shape",
        ));
    }
    if alpha < 0.0 || beta < 0.0 || (alpha == 0.0 && beta == 0.0) || !(alpha + beta).is_finite() {
        return Err(Error::invalid(format!(
            "inference weights ({alpha}, {beta}) must be nonnegative and not both zero"
        )));
    }
    let c = p.classes;
    let mut buf = vec![0.0; c];
    let labels = p
        .probs
        .chunks(c)
        .zip(p_aux.probs.chunks(c))
        .map(|(a, b)| {
            for k in 0..c {
                buf[k] = alpha * a[k] + beta * b[k];
            }
            argmax_first(&buf)
        })
        .collect();
    Ok(LabelMap {
        height: p.height,
        width: p.width,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
    }

    fn pm(probs: &[f64]) -> ProbMap {
        ProbMap::new(1, 1, probs.len(), probs.to_vec()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = TwoHeadSegNet::init(1, NetConfig::default()).unwrap();
        let b = TwoHeadSegNet::init(1, NetConfig::default()).unwrap();
        let c = TwoHeadSegNet::init(2, NetConfig::default()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn aux_tap_out_of_range_rejected() {
        for tap in [0, 4, 7] {
            let cfg = NetConfig {
                aux_tap: tap,
                ..NetConfig::default()
            };
            assert!(TwoHeadSegNet::init(0, cfg).is_err());
        }
    }

    #[test]
    fn head_shapes_follow_input() {
        let net = TwoHeadSegNet::init(3, NetConfig::default()).unwrap();
        let (p, pa) = net.predict(&random_image(0, 32, 32)).unwrap();
        assert_eq!((p.height, p.width, p.classes), (32, 32, 5));
        assert_eq!((pa.height, pa.width, pa.classes), (32, 32, 5));
        for px in p.probs.chunks(5) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_is_pure_train_is_stochastic() {
        let net = TwoHeadSegNet::init(3, NetConfig::default()).unwrap();
        let x = random_image(1, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = net.forward(&x, Mode::Eval, &mut rng).unwrap();
        let b = net.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
        let c = net.forward(&x, Mode::Train, &mut rng).unwrap();
        let d = net.forward(&x, Mode::Train, &mut rng).unwrap();
        assert_ne!(c.0, d.0);
    }

    #[test]
    fn combined_prediction_examples() {
        let p = pm(&[0.4, 0.6]);
        let q = pm(&[0.9, 0.1]);
        assert_eq!(
            combined_prediction(&p, &q, 1.0, 0.5).unwrap().labels,
            vec![0]
        );
        assert_eq!(
            combined_prediction(&p, &q, 1.0, 0.0).unwrap().labels,
            vec![1]
        );
        assert_eq!(
            combined_prediction(&p, &q, 3.0, 1.5).unwrap().labels,
            vec![0]
        );
        assert!(combined_prediction(&p, &q, 0.0, 0.0).is_err());
        let u = pm(&[0.5, 0.5]);
        assert_eq!(
            combined_prediction(&u, &u, 1.0, 1.0).unwrap().labels,
            vec![0]
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = TwoHeadSegNet::init(11, NetConfig::default()).unwrap();
        let bytes = net.to_bytes();
        let back = TwoHeadSegNet::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, net);
        assert!(TwoHeadSegNet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TwoHeadSegNet::from_bytes(&bad).is_err());
    }

    #[test]
    fn prob_map_rejects_non_simplex() {
        assert!(ProbMap::new(1, 1, 2, vec![0.7, 0.7]).is_err());
        assert!(ProbMap::new(1, 1, 2, vec![0.7]).is_err());
    }
}
