//! Network builders and the forward/backward driver.
//!
//! A model is a flat layer list plus skip links. Skips name the layer whose
//! output feeds back in (`from`) and the layer whose output it combines
//! with (`to`); residual blocks are Add skips, the look-alike generator's
//! long skip is a Concat. Multiple skips on one layer apply in list order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{RbsrError, Result};
use crate::nn::init::kaiming_uniform;
use crate::nn::ops::{
    activation, activation_grad, conv2d, conv2d_grad, dense, dense_grad, pixel_shuffle,
    pixel_unshuffle, Activation,
};
use crate::nn::tensor::{Scalar, Tensor4};
use crate::nn::Parameter;

#[derive(Debug, Clone)]
pub enum Layer {
    /// Cross-correlation conv; `w`/`b` index into the parameter list.
    Conv {
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Act(Activation),
    Dense {
        w: usize,
        b: usize,
    },
    /// (n,c,h,w) -> (n, c*h*w, 1, 1)
    Flatten,
    PixelShuffle {
        r: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Add,
    Concat,
}

#[derive(Debug, Clone, Copy)]
pub struct SkipLink {
    /// Combined output of layer `from` is the source.
    pub from: usize,
    /// Applied after layer `to` computes its raw output.
    pub to: usize,
    pub combine: Combine,
}

#[derive(Debug, Clone)]
pub struct ModelGraph<T> {
    pub layers: Vec<Layer>,
    pub skips: Vec<SkipLink>,
    pub params: Vec<Parameter<T>>,
    /// Layer index whose combined output is residual block k's output.
    pub block_outputs: Vec<usize>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// FNV-1a over the value bytes of every parameter, in order. Used to
    /// assert that frozen models stay frozen.
    pub fn weight_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.params {
            for byte in p.name.as_bytes() {
                eat(*byte);
            }
            for v in &p.value.data {
                for byte in v.to_f64_lossy().to_le_bytes() {
                    eat(byte);
                }
            }
        }
        h
    }

    /// Lossy cast of the whole graph (used to run f32 weights in f64 mode).
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            layers: self.layers.clone(),
            skips: self.skips.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
            block_outputs: self.block_outputs.clone(),
        }
    }

    /// Load values by name from a decoded checkpoint. Every model parameter
    /// must be present with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor4<f32>)]) -> Result<()> {
        for p in &mut self.params {
            let found = tensors
                .iter()
                .find(|(n, _)| n == &p.name)
                .ok_or_else(|| RbsrError::Checkpoint(format!("missing tensor '{}'", p.name)))?;
            let want = p.value.shape();
            let got = found.1.shape();
            if want != got {
                return Err(RbsrError::Checkpoint(format!(
                    "tensor '{}' shape {got:?} != expected {want:?}",
                    p.name
                )));
            }
            p.value = found.1.cast();
        }
        Ok(())
    }

    fn layer_label(&self, i: usize) -> String {
        match &self.layers[i] {
            Layer::Conv { w, .. } | Layer::Dense { w, .. } => {
                format!("{} ({})", i, self.params[*w].name)
            }
            other => format!("{i} ({other:?})"),
        }
    }
}

/// Per-run activation cache: `acts[i]` is the input of layer i, `acts[L]`
/// the final output (all with skips applied).
pub struct ForwardCache<T> {
    pub acts: Vec<Tensor4<T>>,
    /// Index of the last layer that was executed.
    pub last_layer: usize,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Tensor4<T> {
        &self.acts[self.last_layer + 1]
    }
}

/// Run layers 0..=upto (default: all), recording every activation.
pub fn forward_cached<T: Scalar>(
    model: &ModelGraph<T>,
    x: &Tensor4<T>,
    upto: Option<usize>,
) -> Result<ForwardCache<T>> {
    let last = upto.unwrap_or(model.layers.len() - 1);
    let mut acts = Vec::with_capacity(last + 2);
    acts.push(x.clone());
    for i in 0..=last {
        let input = &acts[i];
        let mut out = match &model.layers[i] {
            Layer::Conv { w, b, stride, pad } => conv2d(
                input,
                &model.params[*w].value,
                &model.params[*b].value.data,
                *stride,
                *pad,
            )
            .map_err(|e| layer_err(model, i, e))?,
            Layer::Act(kind) => activation(input, *kind),
            Layer::Dense { w, b } => dense(
                input,
                &model.params[*w].value,
                &model.params[*b].value.data,
            )
            .map_err(|e| layer_err(model, i, e))?,
            Layer::Flatten => Tensor4::new(
                input.n,
                input.c * input.h * input.w,
                1,
                1,
                input.data.clone(),
            ),
            Layer::PixelShuffle { r } => {
                pixel_shuffle(input, *r).map_err(|e| layer_err(model, i, e))?
            }
        };
        for skip in model.skips.iter().filter(|s| s.to == i) {
            let src = &acts[skip.from + 1];
            match skip.combine {
                Combine::Add => {
                    if out.shape() != src.shape() {
                        return Err(layer_err(
                            model,
                            i,
                            RbsrError::Shape(format!(
                                "skip add {:?} vs {:?}",
                                src.shape(),
                                out.shape()
                            )),
                        ));
                    }
                    out.add_assign(src);
                }
                Combine::Concat => out = out.concat_channels(src),
            }
        }
        acts.push(out);
    }
    Ok(ForwardCache {
        acts,
        last_layer: last,
    })
}

fn layer_err<T: Scalar>(model: &ModelGraph<T>, i: usize, e: RbsrError) -> RbsrError {
    RbsrError::Shape(format!("layer {}: {e}", model.layer_label(i)))
}

/// Plain forward pass.
pub fn forward<T: Scalar>(model: &ModelGraph<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    Ok(forward_cached(model, x, None)?.acts.pop().unwrap())
}

/// Reverse pass over a cached forward run. Accumulates parameter gradients
/// (unless `accumulate_params` is false) and returns d loss / d input.
pub fn backward<T: Scalar>(
    model: &mut ModelGraph<T>,
    cache: &ForwardCache<T>,
    dy: &Tensor4<T>,
    accumulate_params: bool,
) -> Result<Tensor4<T>> {
    let mut sink = Vec::new();
    let dx = backward_walk(
        &model.layers,
        &model.skips,
        &model.params,
        cache,
        dy,
        accumulate_params.then_some(&mut sink),
    )?;
    for (idx, g) in sink {
        model.params[idx].grad.add_assign(&g);
    }
    Ok(dx)
}

/// Input gradient through a frozen model; parameter gradients are not formed.
pub fn backward_frozen<T: Scalar>(
    model: &ModelGraph<T>,
    cache: &ForwardCache<T>,
    dy: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    backward_walk(&model.layers, &model.skips, &model.params, cache, dy, None)
}

fn backward_walk<T: Scalar>(
    layers: &[Layer],
    skips: &[SkipLink],
    params: &[Parameter<T>],
    cache: &ForwardCache<T>,
    dy: &Tensor4<T>,
    mut param_sink: Option<&mut Vec<(usize, Tensor4<T>)>>,
) -> Result<Tensor4<T>> {
    let label = |i: usize| match &layers[i] {
        Layer::Conv { w, .. } | Layer::Dense { w, .. } => {
            format!("{i} ({})", params[*w].name)
        }
        other => format!("{i} ({other:?})"),
    };
    let last = cache.last_layer;
    let mut grads: Vec<Option<Tensor4<T>>> = vec![None; last + 2];
    grads[last + 1] = Some(dy.clone());

    for i in (0..=last).rev() {
        let mut g = match grads[i + 1].take() {
            Some(g) => g,
            None => continue, // dead branch: output unused
        };
        // Peel skips in reverse application order.
        let applied: Vec<SkipLink> = skips.iter().filter(|s| s.to == i).copied().collect();
        for skip in applied.iter().rev() {
            match skip.combine {
                Combine::Concat => {
                    let src_c = cache.acts[skip.from + 1].c;
                    let raw_c = g.c - src_c;
                    let (raw, to_src) = g.split_channels(raw_c);
                    add_grad(&mut grads[skip.from + 1], to_src);
                    g = raw;
                }
                Combine::Add => {
                    add_grad(&mut grads[skip.from + 1], g.clone());
                }
            }
        }
        let input = &cache.acts[i];
        let dx = match &layers[i] {
            Layer::Conv { w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_grad(input, &params[*w].value, &g, *stride, *pad)
                    .map_err(|e| RbsrError::Shape(format!("layer {}: {e}", label(i))))?;
                if let Some(sink) = param_sink.as_deref_mut() {
                    sink.push((*w, dw));
                    sink.push((*b, Tensor4::new(db.len(), 1, 1, 1, db)));
                }
                dx
            }
            Layer::Act(kind) => activation_grad(input, &g, *kind),
            Layer::Dense { w, b } => {
                let (dx, dw, db) = dense_grad(input, &params[*w].value, &g)
                    .map_err(|e| RbsrError::Shape(format!("layer {}: {e}", label(i))))?;
                if let Some(sink) = param_sink.as_deref_mut() {
                    sink.push((*w, dw));
                    sink.push((*b, Tensor4::new(db.len(), 1, 1, 1, db)));
                }
                dx
            }
            Layer::Flatten => Tensor4::new(input.n, input.c, input.h, input.w, g.data.clone()),
            Layer::PixelShuffle { r } => pixel_unshuffle(&g, *r)
                .map_err(|e| RbsrError::Shape(format!("layer {}: {e}", label(i))))?,
        };
        add_grad(&mut grads[i], dx);
    }
    Ok(grads[0]
        .take()
        .unwrap_or_else(|| Tensor4::zeros_like(&cache.acts[0])))
}

fn add_grad<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GeneratorConfig {
    pub n_res_blocks: usize,
    pub channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_res_blocks: 8,
            channels: 64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SRConfig {
    pub n_res_blocks: usize,
    pub channels: usize,
    pub scale: usize,
}

impl Default for SRConfig {
    fn default() -> Self {
        Self {
            n_res_blocks: 16,
            channels: 64,
            scale: 4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub n_stages: usize,
    pub dense_width: usize,
    /// Training crop size the dense head is sized for.
    pub input_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_stages: 4,
            dense_width: 1024,
            input_size: 128,
        }
    }
}

struct Builder<T> {
    layers: Vec<Layer>,
    skips: Vec<SkipLink>,
    params: Vec<Parameter<T>>,
    block_outputs: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn new(seed: u64) -> Self {
        Self {
            layers: Vec::new(),
            skips: Vec::new(),
            params: Vec::new(),
            block_outputs: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Adds a 3x3 (or kxk) conv with zero bias; returns its layer index.
    fn conv(&mut self, name: &str, ic: usize, oc: usize, k: usize, stride: usize) -> usize {
        let w = kaiming_uniform(oc, ic, k, k, ic * k * k, &mut self.rng);
        let wi = self.params.len();
        self.params.push(Parameter::new(format!("{name}.w"), w));
        let bi = self.params.len();
        self.params
            .push(Parameter::new(format!("{name}.b"), Tensor4::zeros(oc, 1, 1, 1)));
        self.layers.push(Layer::Conv {
            w: wi,
            b: bi,
            stride,
            pad: k / 2,
        });
        self.layers.len() - 1
    }

    fn act(&mut self, kind: Activation) -> usize {
        self.layers.push(Layer::Act(kind));
        self.layers.len() - 1
    }

    fn dense(&mut self, name: &str, input: usize, output: usize) -> usize {
        let w = kaiming_uniform(output, input, 1, 1, input, &mut self.rng);
        let wi = self.params.len();
        self.params.push(Parameter::new(format!("{name}.w"), w));
        let bi = self.params.len();
        self.params
            .push(Parameter::new(format!("{name}.b"), Tensor4::zeros(output, 1, 1, 1)));
        self.layers.push(Layer::Dense { w: wi, b: bi });
        self.layers.len() - 1
    }

    fn finish(self) -> ModelGraph<T> {
        ModelGraph {
            layers: self.layers,
            skips: self.skips,
            params: self.params,
            block_outputs: self.block_outputs,
        }
    }
}

/// Size-preserving image-to-image generator:
/// conv+ReLU head, residual blocks of [conv, ReLU, conv, ReLU] with an
/// additive identity skip, channel concat of the last block output with the
/// head features, and a fusing 2C->3 conv.
pub fn build_lookalike_generator<T: Scalar>(
    config: &GeneratorConfig,
    seed: u64,
) -> Result<ModelGraph<T>> {
    if config.n_res_blocks < 1 || config.channels < 1 {
        return Err(RbsrError::InvalidArg(
            "generator needs >= 1 block and >= 1 channel".into(),
        ));
    }
    let c = config.channels;
    let mut b = Builder::new(seed);
    b.conv("gen.head", 3, c, 3, 1);
    let head_relu = b.act(Activation::Relu);
    let mut block_in = head_relu;
    for blk in 0..config.n_res_blocks {
        b.conv(&format!("gen.block{blk}.conv1"), c, c, 3, 1);
        b.act(Activation::Relu);
        b.conv(&format!("gen.block{blk}.conv2"), c, c, 3, 1);
        let last = b.act(Activation::Relu);
        b.skips.push(SkipLink {
            from: block_in,
            to: last,
            combine: Combine::Add,
        });
        b.block_outputs.push(last);
        block_in = last;
    }
    // Long skip: concat(block output, head features) -> fuse to 3 channels.
    b.skips.push(SkipLink {
        from: head_relu,
        to: block_in,
        combine: Combine::Concat,
    });
    b.conv("gen.tail", 2 * c, 3, 3, 1);
    Ok(b.finish())
}

/// EDSR-style x4 SR generator: conv head, residual blocks without
/// normalization, mid conv with a long additive skip, two conv+shuffle x2
/// stages, and a 3-channel tail conv.
pub fn build_sr_generator<T: Scalar>(config: &SRConfig, seed: u64) -> Result<ModelGraph<T>> {
    build_sr_like(config, seed, "sr")
}

/// The end-to-end ablation baseline: same topology as the SR generator,
/// typically with more blocks, trained directly on mixed real/synthetic data.
pub fn build_e2e_baseline<T: Scalar>(config: &SRConfig, seed: u64) -> Result<ModelGraph<T>> {
    build_sr_like(config, seed, "e2e")
}

fn build_sr_like<T: Scalar>(config: &SRConfig, seed: u64, prefix: &str) -> Result<ModelGraph<T>> {
    if config.scale != 4 {
        return Err(RbsrError::InvalidArg(format!(
            "SR scale is fixed to 4 (two x2 shuffle stages), got {}",
            config.scale
        )));
    }
    if config.n_res_blocks < 1 || config.channels < 1 {
        return Err(RbsrError::InvalidArg(
            "SR generator needs >= 1 block and >= 1 channel".into(),
        ));
    }
    let c = config.channels;
    let mut b = Builder::new(seed);
    let head = b.conv(&format!("{prefix}.head"), 3, c, 3, 1);
    let mut block_in = head;
    for blk in 0..config.n_res_blocks {
        b.conv(&format!("{prefix}.block{blk}.conv1"), c, c, 3, 1);
        b.act(Activation::Relu);
        let last = b.conv(&format!("{prefix}.block{blk}.conv2"), c, c, 3, 1);
        b.skips.push(SkipLink {
            from: block_in,
            to: last,
            combine: Combine::Add,
        });
        b.block_outputs.push(last);
        block_in = last;
    }
    let mid = b.conv(&format!("{prefix}.mid"), c, c, 3, 1);
    b.skips.push(SkipLink {
        from: head,
        to: mid,
        combine: Combine::Add,
    });
    for (i, stage) in ["up1", "up2"].iter().enumerate() {
        b.conv(&format!("{prefix}.{stage}"), c, 4 * c, 3, 1);
        b.layers.push(Layer::PixelShuffle { r: 2 });
        let _ = i;
    }
    b.conv(&format!("{prefix}.tail"), c, 3, 3, 1);
    Ok(b.finish())
}

/// Patch classifier: stages of [conv s1, ReLU, conv s2, ReLU] with channel
/// doubling capped at 512, then two dense layers and a sigmoid.
pub fn build_discriminator<T: Scalar>(
    config: &DiscriminatorConfig,
    seed: u64,
) -> Result<ModelGraph<T>> {
    if config.n_stages < 1 || config.base_channels < 1 || config.dense_width < 1 {
        return Err(RbsrError::InvalidArg("bad discriminator config".into()));
    }
    let reduced = config.input_size >> config.n_stages;
    if reduced == 0 || reduced << config.n_stages != config.input_size {
        return Err(RbsrError::InvalidArg(format!(
            "input size {} incompatible with {} stride-2 stages",
            config.input_size, config.n_stages
        )));
    }
    let mut b = Builder::new(seed);
    let mut prev = 3;
    let mut ch = config.base_channels;
    for stage in 0..config.n_stages {
        b.conv(&format!("disc.stage{stage}.conv1"), prev, ch, 3, 1);
        b.act(Activation::Relu);
        b.conv(&format!("disc.stage{stage}.conv2"), ch, ch, 3, 2);
        b.act(Activation::Relu);
        prev = ch;
        ch = (ch * 2).min(512);
    }
    b.layers.push(Layer::Flatten);
    let flat = prev * reduced * reduced;
    b.dense("disc.fc1", flat, config.dense_width);
    b.act(Activation::Relu);
    b.dense("disc.fc2", config.dense_width, 1);
    b.act(Activation::Sigmoid);
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

/// Compare analytic parameter gradients against central finite differences.
///
/// `loss` must evaluate the scalar objective from the model's current
/// weights (forward only); `compute_grads` must zero and refill
/// `param.grad` via the backward pass. Returns the max relative error over
/// a fixed random sample of at least `samples` coordinates.
pub fn finite_diff_check<T: Scalar>(
    model: &mut ModelGraph<T>,
    mut loss: impl FnMut(&ModelGraph<T>) -> T,
    compute_grads: impl FnOnce(&mut ModelGraph<T>),
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    compute_grads(model);
    let analytic: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|p| p.grad.data.iter().map(|g| g.to_f64_lossy()).collect())
        .collect();

    let total: usize = model.params.iter().map(|p| p.value.numel()).sum();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if total <= samples {
        for (pi, p) in model.params.iter().enumerate() {
            for ei in 0..p.value.numel() {
                coords.push((pi, ei));
            }
        }
    } else {
        use rand::Rng;
        let mut seen = std::collections::HashSet::new();
        while coords.len() < samples {
            let flat = rng.gen_range(0..total);
            if !seen.insert(flat) {
                continue;
            }
            let mut rem = flat;
            for (pi, p) in model.params.iter().enumerate() {
                if rem < p.value.numel() {
                    coords.push((pi, rem));
                    break;
                }
                rem -= p.value.numel();
            }
        }
    }

    let eps = T::from_f64(epsilon);
    let mut max_rel: f64 = 0.0;
    for (pi, ei) in coords {
        let orig = model.params[pi].value.data[ei];
        model.params[pi].value.data[ei] = orig + eps;
        let lp = loss(model).to_f64_lossy();
        model.params[pi].value.data[ei] = orig - eps;
        let lm = loss(model).to_f64_lossy();
        model.params[pi].value.data[ei] = orig;
        let fd = (lp - lm) / (2.0 * epsilon);
        let an = analytic[pi][ei];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::new(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn lookalike_preserves_shape() {
        let g: ModelGraph<f32> =
            build_lookalike_generator(&GeneratorConfig { n_res_blocks: 2, channels: 6 }, 0)
                .unwrap();
        let x = rng_input(1, 3, 32, 48, 1).cast::<f32>();
        let y = forward(&g, &x).unwrap();
        assert_eq!(y.shape(), (1, 3, 32, 48));
    }

    #[test]
    fn lookalike_toy_param_count() {
        // blocks=1, C=4: head (3*4*9+4) + block 2*(4*4*9+4) + tail (8*3*9+3) = 627
        let g: ModelGraph<f32> =
            build_lookalike_generator(&GeneratorConfig { n_res_blocks: 1, channels: 4 }, 0)
                .unwrap();
        assert_eq!(g.param_count(), 627);
    }

    #[test]
    fn lookalike_zero_weights_give_zero_output() {
        let mut g: ModelGraph<f32> =
            build_lookalike_generator(&GeneratorConfig { n_res_blocks: 1, channels: 4 }, 0)
                .unwrap();
        for p in &mut g.params {
            p.value.fill(0.0);
        }
        let x = rng_input(1, 3, 8, 8, 2).cast::<f32>();
        let y = forward(&g, &x).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sr_generator_is_4x() {
        let g: ModelGraph<f32> =
            build_sr_generator(&SRConfig { n_res_blocks: 2, channels: 8, scale: 4 }, 0).unwrap();
        let x = rng_input(1, 3, 16, 16, 3).cast::<f32>();
        let y = forward(&g, &x).unwrap();
        assert_eq!(y.shape(), (1, 3, 64, 64));
    }

    #[test]
    fn sr_zero_tail_gives_zero_at_4x() {
        let mut g: ModelGraph<f32> =
            build_sr_generator(&SRConfig { n_res_blocks: 1, channels: 4, scale: 4 }, 0).unwrap();
        let tail_w = g.params.iter().position(|p| p.name == "sr.tail.w").unwrap();
        g.params[tail_w].value.fill(0.0);
        let x = rng_input(1, 3, 8, 8, 4).cast::<f32>();
        let y = forward(&g, &x).unwrap();
        assert_eq!(y.shape(), (1, 3, 32, 32));
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sr_constant_input_constant_interior() {
        let g: ModelGraph<f32> =
            build_sr_generator(&SRConfig { n_res_blocks: 2, channels: 8, scale: 4 }, 7).unwrap();
        let x = Tensor4::new(1, 3, 32, 32, vec![0.5f32; 3 * 32 * 32]);
        let y = forward(&g, &x).unwrap();
        // Away from padding effects the map is translation equivariant, so a
        // constant input gives a (per-phase) periodic interior. Compare
        // pixels one full shuffle period (4) apart, with a margin covering
        // the network's receptive field (~8 input px = 32 output px).
        let margin = 48usize;
        for c in 0..3 {
            let v0 = y.at(0, c, margin, margin);
            for dy in 0..2 {
                for dx in 0..2 {
                    let v = y.at(0, c, margin + 4 * dy, margin + 4 * dx);
                    assert!((v - v0).abs() < 1e-5, "c={c} ({dy},{dx}): {v} vs {v0}");
                }
            }
        }
    }

    #[test]
    fn e2e_baseline_matches_sr_topology() {
        let cfg = SRConfig { n_res_blocks: 2, channels: 8, scale: 4 };
        let sr: ModelGraph<f32> = build_sr_generator(&cfg, 5).unwrap();
        let e2e: ModelGraph<f32> = build_e2e_baseline(&cfg, 5).unwrap();
        assert_eq!(sr.layers.len(), e2e.layers.len());
        assert_eq!(sr.param_count(), e2e.param_count());
        // identical weights (same seed) -> identical forward
        let x = rng_input(1, 3, 20, 20, 6).cast::<f32>();
        let ys = forward(&sr, &x).unwrap();
        let ye = forward(&e2e, &x).unwrap();
        assert_eq!(ys.shape(), (1, 3, 80, 80));
        assert_eq!(ys.data, ye.data);
        assert!(e2e.params.iter().all(|p| p.name.starts_with("e2e.")));

        let bigger: ModelGraph<f32> =
            build_e2e_baseline(&SRConfig { n_res_blocks: 3, channels: 8, scale: 4 }, 5).unwrap();
        assert!(bigger.param_count() > sr.param_count());
    }

    #[test]
    fn discriminator_output_in_unit_interval() {
        let cfg = DiscriminatorConfig {
            base_channels: 8,
            n_stages: 2,
            dense_width: 16,
            input_size: 16,
        };
        let d: ModelGraph<f32> = build_discriminator(&cfg, 0).unwrap();
        let x = rng_input(3, 3, 16, 16, 8).cast::<f32>();
        let y = forward(&d, &x).unwrap();
        assert_eq!(y.shape(), (3, 1, 1, 1));
        assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn discriminator_stride_arithmetic() {
        // (2,3,128,128) with 4 stages -> pre-flatten (2,512,8,8)
        let cfg = DiscriminatorConfig::default();
        let d: ModelGraph<f32> = build_discriminator(&cfg, 0).unwrap();
        let x = Tensor4::zeros(2, 3, 128, 128);
        let flatten_idx = d
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Flatten))
            .unwrap();
        let cache = forward_cached(&d, &x, Some(flatten_idx - 1)).unwrap();
        assert_eq!(cache.output().shape(), (2, 512, 8, 8));
    }

    #[test]
    fn discriminator_batch_independence() {
        let cfg = DiscriminatorConfig {
            base_channels: 4,
            n_stages: 2,
            dense_width: 8,
            input_size: 8,
        };
        let d: ModelGraph<f32> = build_discriminator(&cfg, 3).unwrap();
        let one = rng_input(1, 3, 8, 8, 9).cast::<f32>();
        let mut two = Tensor4::zeros(2, 3, 8, 8);
        two.data[..one.data.len()].copy_from_slice(&one.data);
        two.data[one.data.len()..].copy_from_slice(&one.data);
        let y = forward(&d, &two).unwrap();
        assert_eq!(y.data[0], y.data[1]);
    }

    #[test]
    fn discriminator_rejects_incompatible_input_size() {
        let cfg = DiscriminatorConfig {
            base_channels: 4,
            n_stages: 3,
            dense_width: 8,
            input_size: 12, // 12 >> 3 == 1 but 1 << 3 != 12
        };
        assert!(build_discriminator::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let g: ModelGraph<f32> =
            build_sr_generator(&SRConfig { n_res_blocks: 2, channels: 8, scale: 4 }, 1).unwrap();
        let x = rng_input(2, 3, 12, 12, 10).cast::<f32>();
        let a = forward(&g, &x).unwrap();
        let b = forward(&g, &x).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn backward_zero_dy_zero_grads() {
        let mut g: ModelGraph<f64> =
            build_lookalike_generator(&GeneratorConfig { n_res_blocks: 1, channels: 4 }, 2)
                .unwrap();
        let x = rng_input(1, 3, 8, 8, 11);
        let cache = forward_cached(&g, &x, None).unwrap();
        let dy = Tensor4::zeros_like(cache.output());
        backward(&mut g, &cache, &dy, true).unwrap();
        for p in &g.params {
            assert!(p.grad.data.iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn generator_backward_matches_finite_differences() {
        let mut g: ModelGraph<f64> =
            build_lookalike_generator(&GeneratorConfig { n_res_blocks: 2, channels: 4 }, 3)
                .unwrap();
        let x = rng_input(1, 3, 8, 8, 12);
        let dy = rng_input(1, 3, 8, 8, 13);
        let (x_eval, dy_eval) = (x.clone(), dy.clone());
        let err = finite_diff_check(
            &mut g,
            move |m| {
                let y = forward(m, &x_eval).unwrap();
                y.data.iter().zip(&dy_eval.data).map(|(a, g)| a * g).sum()
            },
            |m| {
                m.zero_grads();
                let cache = forward_cached(m, &x, None).unwrap();
                backward(m, &cache, &dy, true).unwrap();
            },
            1e-5,
            250,
            99,
        );
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn sr_backward_matches_finite_differences() {
        let mut g: ModelGraph<f64> =
            build_sr_generator(&SRConfig { n_res_blocks: 2, channels: 4, scale: 4 }, 4).unwrap();
        let x = rng_input(1, 3, 6, 6, 14);
        let dy = rng_input(1, 3, 24, 24, 15);
        let (x_eval, dy_eval) = (x.clone(), dy.clone());
        let err = finite_diff_check(
            &mut g,
            move |m| {
                let y = forward(m, &x_eval).unwrap();
                y.data.iter().zip(&dy_eval.data).map(|(a, g)| a * g).sum()
            },
            |m| {
                m.zero_grads();
                let cache = forward_cached(m, &x, None).unwrap();
                backward(m, &cache, &dy, true).unwrap();
            },
            1e-5,
            250,
            100,
        );
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn discriminator_backward_matches_finite_differences() {
        let cfg = DiscriminatorConfig {
            base_channels: 4,
            n_stages: 2,
            dense_width: 8,
            input_size: 8,
        };
        let mut d: ModelGraph<f64> = build_discriminator(&cfg, 5).unwrap();
        let x = rng_input(2, 3, 8, 8, 16);
        let (x_eval,) = (x.clone(),);
        let err = finite_diff_check(
            &mut d,
            move |m| forward(m, &x_eval).unwrap().data.iter().sum(),
            |m| {
                m.zero_grads();
                let cache = forward_cached(m, &x, None).unwrap();
                let dy = Tensor4::new(2, 1, 1, 1, vec![1.0, 1.0]);
                backward(m, &cache, &dy, true).unwrap();
            },
            1e-5,
            250,
            101,
        );
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn linear_model_gradcheck_is_exact() {
        // single 1x1 conv; finite differences are exact up to rounding
        let mut b = Builder::<f64>::new(0);
        b.conv("lin", 1, 1, 1, 1);
        let mut m = b.finish();
        let x = rng_input(1, 1, 4, 4, 17);
        let (x_eval,) = (x.clone(),);
        let err = finite_diff_check(
            &mut m,
            move |g| forward(g, &x_eval).unwrap().data.iter().sum(),
            |g| {
                g.zero_grads();
                let cache = forward_cached(g, &x, None).unwrap();
                let dy = Tensor4::new(1, 1, 4, 4, vec![1.0; 16]);
                backward(g, &cache, &dy, true).unwrap();
            },
            1e-4,
            200,
            102,
        );
        assert!(err < 1e-8, "linear model rel error {err}");
    }

    #[test]
    fn backward_accumulate_flag_skips_params() {
        let mut g: ModelGraph<f64> =
            build_lookalike_generator(&GeneratorConfig { n_res_blocks: 1, channels: 4 }, 6)
                .unwrap();
        let x = rng_input(1, 3, 8, 8, 18);
        let cache = forward_cached(&g, &x, None).unwrap();
        let dy = rng_input(1, 3, 8, 8, 19);
        let dx = backward(&mut g, &cache, &dy, false).unwrap();
        assert!(g.params.iter().all(|p| p.grad.data.iter().all(|&v| v == 0.0)));
        assert!(dx.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn load_tensors_checks_names_and_shapes() {
        let mut g: ModelGraph<f32> =
            build_lookalike_generator(&GeneratorConfig { n_res_blocks: 1, channels: 4 }, 7)
                .unwrap();
        let tensors: Vec<(String, Tensor4<f32>)> = g
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.map(|v| v + 1.0)))
            .collect();
        g.load_tensors(&tensors).unwrap();
        assert!((g.params[0].value.data[0] - tensors[0].1.data[0]).abs() < 1e-9);
        assert!(g.load_tensors(&tensors[1..]).is_err());
    }
}
