//! Densely connected patch classifier.
//!
//! ```text
//! stem:        3×3 conv (3 → stem_maps) + per-channel PReLU
//! block_pairs × {
//!   dense:     extractors_per_block × [ReLU → 3×3 conv → growth_rate maps],
//!              each unit sees the concatenation of the block input and all
//!              earlier unit outputs
//!   downsample: 1×1 conv doubling the channels + 2×2 average pooling
//! }
//! head:        global average pool → FC(hidden_units) → ReLU → FC(num_classes) → softmax
//! ```
//!
//! Output rows are probabilities in [`SlideLabel`] index order:
//! 0 = negative, 1 = ITC, 2 = micro, 3 = macro.
//!
//! The 1×1 convolution and the 2×2 average pool of a downsampling block are
//! both linear and act on different axes, so they commute; the pool runs
//! first, which cuts the convolution cost by four.
//!
//! [`SlideLabel`]: crate::slide::SlideLabel

use crate::nn::{self, ops, Graph, NnError, ParamStore, Tensor, Var};

pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseNetConfig {
    pub stem_maps: usize,
    pub extractors_per_block: usize,
    pub growth_rate: usize,
    pub block_pairs: usize,
    pub hidden_units: usize,
    pub num_classes: usize,
    pub input_px: usize,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        DenseNetConfig {
            stem_maps: 32,
            extractors_per_block: 6,
            growth_rate: 12,
            block_pairs: 4,
            hidden_units: 128,
            num_classes: 4,
            input_px: 512,
        }
    }
}

impl DenseNetConfig {
    /// 64-pixel patches, two dense/downsample pairs, growth 4. Sized so that
    /// training and validation fit a single laptop core.
    pub fn desk() -> Self {
        DenseNetConfig {
            growth_rate: 4,
            block_pairs: 2,
            input_px: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let fields = [
            self.stem_maps,
            self.extractors_per_block,
            self.growth_rate,
            self.block_pairs,
            self.hidden_units,
            self.num_classes,
            self.input_px,
        ];
        if fields.contains(&0) {
            return Err(NnError::InvalidConfig(format!("all fields must be positive: {self:?}")));
        }
        if self.block_pairs >= usize::BITS as usize || !self.input_px.is_multiple_of(1usize << self.block_pairs) {
            return Err(NnError::InvalidConfig(format!(
                "input_px {} not divisible by 2^{}",
                self.input_px, self.block_pairs
            )));
        }
        Ok(())
    }

    /// Channel count after every stage: stem, then dense/downsample pairs.
    pub fn channel_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.stem_maps];
        let mut c = self.stem_maps;
        for _ in 0..self.block_pairs {
            c += self.extractors_per_block * self.growth_rate;
            trace.push(c);
            c *= 2;
            trace.push(c);
        }
        trace
    }

    /// Spatial extent entering global average pooling.
    pub fn gap_extent(&self) -> usize {
        self.input_px >> self.block_pairs
    }

    pub fn final_channels(&self) -> usize {
        *self.channel_trace().last().expect("non-empty trace")
    }
}

/// Parameter names and shapes in build order, with fan-in for initialization.
/// Biases and PReLU slopes report a fan-in of 0.
pub fn parameter_layout(cfg: &DenseNetConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<_>, name: String, o: usize, c: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![o, c, k, k], c * k * k));
        out.push((format!("{name}.bias"), vec![o], 0));
    };
    conv(&mut out, "stem.conv".into(), cfg.stem_maps, 3, 3);
    out.push(("stem.prelu.slope".into(), vec![cfg.stem_maps], 0));
    let mut c = cfg.stem_maps;
    for b in 0..cfg.block_pairs {
        for u in 0..cfg.extractors_per_block {
            conv(&mut out, format!("dense{b}.unit{u}.conv"), cfg.growth_rate, c + u * cfg.growth_rate, 3);
        }
        c += cfg.extractors_per_block * cfg.growth_rate;
        conv(&mut out, format!("down{b}.conv"), 2 * c, c, 1);
        c *= 2;
    }
    out.push(("head.fc1.weight".into(), vec![cfg.hidden_units, c], c));
    out.push(("head.fc1.bias".into(), vec![cfg.hidden_units], 0));
    out.push(("head.fc2.weight".into(), vec![cfg.num_classes, cfg.hidden_units], cfg.hidden_units));
    out.push(("head.fc2.bias".into(), vec![cfg.num_classes], 0));
    out
}

fn param_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A configured network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: DenseNetConfig,
    pub params: ParamStore,
}

/// Build a freshly initialized network: MSRA weights, zero biases,
/// PReLU slopes at 0.25.
pub fn build(config: DenseNetConfig, seed: u64) -> Result<Network, NnError> {
    config.validate()?;
    let mut params = ParamStore::new();
    for (i, (name, dims, fan_in)) in parameter_layout(&config).into_iter().enumerate() {
        let value = if name.ends_with(".slope") {
            Tensor::full(&dims, PRELU_INIT)
        } else if fan_in == 0 {
            Tensor::zeros(&dims)
        } else {
            nn::msra_init(&dims, fan_in, param_seed(seed, i))?
        };
        params.insert(name, value)?;
    }
    Ok(Network { config, params })
}

impl Network {
    /// Wrap a loaded parameter store, checking every name and shape against
    /// the layout implied by `config`.
    pub fn from_params(config: DenseNetConfig, params: ParamStore) -> Result<Network, NnError> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(NnError::InvalidConfig(format!(
                "config implies {} parameters, store has {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, dims, _) in &layout {
            let v = params.value(name)?;
            if v.dims() != &dims[..] {
                return Err(NnError::InvalidConfig(format!(
                    "{name}: config implies {:?}, store has {:?}",
                    dims,
                    v.dims()
                )));
            }
        }
        Ok(Network { config, params })
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NnError> {
        let (_, c, h, w) = input.nchw()?;
        let px = self.config.input_px;
        if c != 3 || h != px || w != px {
            return Err(NnError::ShapeMismatch {
                op: "densenet",
                detail: format!("expected N x 3 x {px} x {px}, got {:?}", input.dims()),
            });
        }
        Ok(())
    }

    /// Inference forward pass without recording a graph. Samples are run one
    /// at a time and intermediate activations are dropped as soon as they are
    /// consumed, so each row depends only on its own input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(input)?;
        let n = input.dims()[0];
        let mut rows = Vec::with_capacity(n * self.config.num_classes);
        for i in 0..n {
            rows.extend_from_slice(self.forward_one(&input.batch_item(i)?)?.data());
        }
        Tensor::new(vec![n, self.config.num_classes], rows)
    }

    fn forward_one(&self, input: &Tensor) -> Result<Tensor, NnError> {
        let cfg = &self.config;
        let p = |name: &str| self.params.value(name);
        let x = ops::conv2d(input, p("stem.conv.weight")?, Some(p("stem.conv.bias")?), 1, 1)?;
        let mut x = ops::prelu(&x, p("stem.prelu.slope")?)?;
        for b in 0..cfg.block_pairs {
            let mut raw = vec![x];
            let mut activated = vec![ops::relu(&raw[0])];
            for u in 0..cfg.extractors_per_block {
                let refs: Vec<&Tensor> = activated.iter().collect();
                let w = p(&format!("dense{b}.unit{u}.conv.weight"))?;
                let bias = p(&format!("dense{b}.unit{u}.conv.bias"))?;
                let y = ops::conv2d_parts(&refs, w, Some(bias), 1, 1)?;
                activated.push(ops::relu(&y));
                raw.push(y);
            }
            drop(activated);
            let pooled = raw.iter().map(ops::avg_pool2x2).collect::<Result<Vec<_>, _>>()?;
            drop(raw);
            let refs: Vec<&Tensor> = pooled.iter().collect();
            x = ops::conv2d_parts(
                &refs,
                p(&format!("down{b}.conv.weight"))?,
                Some(p(&format!("down{b}.conv.bias"))?),
                1,
                0,
            )?;
        }
        let g = ops::global_avg_pool(&x)?;
        let h = ops::fully_connected(&g, p("head.fc1.weight")?, Some(p("head.fc1.bias")?))?;
        let h = ops::relu(&h);
        let logits = ops::fully_connected(&h, p("head.fc2.weight")?, Some(p("head.fc2.bias")?))?;
        ops::softmax(&logits)
    }

    /// Record the forward pass on `graph`; returns the softmax output node.
    pub fn forward_graph(&self, graph: &mut Graph, input: Tensor) -> Result<Var, NnError> {
        forward_graph(&self.config, &self.params, graph, input)
    }
}

/// Graph-recording forward pass over an external parameter store (the
/// training loop owns the store mutably between passes).
pub fn forward_graph(cfg: &DenseNetConfig, params: &ParamStore, graph: &mut Graph, input: Tensor) -> Result<Var, NnError> {
    let (_, c, h, w) = input.nchw()?;
    if c != 3 || h != cfg.input_px || w != cfg.input_px {
        return Err(NnError::ShapeMismatch {
            op: "densenet",
            detail: format!("expected N x 3 x {px} x {px}, got {:?}", input.dims(), px = cfg.input_px),
        });
    }
    let x = graph.input(input);
    let p = |g: &mut Graph, name: &str| g.param(params, name);
    let w = p(graph, "stem.conv.weight")?;
    let b = p(graph, "stem.conv.bias")?;
    let x = graph.conv2d(x, w, Some(b), 1)?;
    let slope = p(graph, "stem.prelu.slope")?;
    let mut x = graph.prelu(x, slope)?;
    for blk in 0..cfg.block_pairs {
        let mut raw = vec![x];
        let mut activated = vec![graph.relu(x)];
        for u in 0..cfg.extractors_per_block {
            let w = p(graph, &format!("dense{blk}.unit{u}.conv.weight"))?;
            let b = p(graph, &format!("dense{blk}.unit{u}.conv.bias"))?;
            let y = graph.conv2d_concat(&activated, w, Some(b), 1)?;
            activated.push(graph.relu(y));
            raw.push(y);
        }
        let pooled = raw.iter().map(|&r| graph.avg_pool2x2(r)).collect::<Result<Vec<_>, _>>()?;
        let w = p(graph, &format!("down{blk}.conv.weight"))?;
        let b = p(graph, &format!("down{blk}.conv.bias"))?;
        x = graph.conv2d_concat(&pooled, w, Some(b), 1)?;
    }
    let gap = graph.global_avg_pool(x)?;
    let w1 = p(graph, "head.fc1.weight")?;
    let b1 = p(graph, "head.fc1.bias")?;
    let h = graph.fully_connected(gap, w1, Some(b1))?;
    let h = graph.relu(h);
    let w2 = p(graph, "head.fc2.weight")?;
    let b2 = p(graph, "head.fc2.bias")?;
    let logits = graph.fully_connected(h, w2, Some(b2))?;
    graph.softmax(logits)
}

/// Pack RGB8 square patches into an N × 3 × px × px tensor scaled to [−1, 1].
pub fn patches_to_tensor<'a>(patches: impl IntoIterator<Item = &'a [u8]>, px: usize) -> Result<Tensor, NnError> {
    let plane = px * px;
    let mut data = Vec::new();
    let mut n = 0;
    for rgb in patches {
        if rgb.len() != plane * 3 {
            return Err(NnError::shape("patches_to_tensor", format!("{} bytes for {px}x{px} RGB", rgb.len())));
        }
        let start = data.len();
        data.resize(start + 3 * plane, 0.0);
        for (i, px_rgb) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[start + c * plane + i] = (px_rgb[c] as f64 - 127.5) / 127.5;
            }
        }
        n += 1;
    }
    Tensor::new(vec![n, 3, px, px], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_channel_trace() {
        // stem 32, +6·12 = 104, ×2 = 208, +72 = 280, ×2 = 560, ...
        let trace = DenseNetConfig::default().channel_trace();
        assert_eq!(trace, vec![32, 104, 208, 280, 560, 632, 1264, 1336, 2672]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = DenseNetConfig::desk();
        c.input_px = 66;
        assert!(build(c, 0).is_err());
        c.input_px = 64;
        c.growth_rate = 0;
        assert!(matches!(build(c, 0), Err(NnError::InvalidConfig(_))));
    }

    #[test]
    fn from_params_detects_mismatch() {
        let net = build(DenseNetConfig { input_px: 8, block_pairs: 1, growth_rate: 2, ..Default::default() }, 1).unwrap();
        let other = DenseNetConfig { growth_rate: 3, ..net.config };
        assert!(Network::from_params(other, net.params.clone()).is_err());
        assert!(Network::from_params(net.config, net.params.clone()).is_ok());
    }
}
