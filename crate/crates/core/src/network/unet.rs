//! The encoder-decoder segmentation network: mixed 2D/3D levels, skip
//! concatenation, optional spatial attention at the bottleneck and after
//! every decoder stage, and a softmax classifier head.

use crate::error::{Error, Result};
use crate::network::attention::AttentionModule;
use crate::network::{AttentionMode, LayerSchedule, NetworkConfig, UpsampleMode};
use crate::nn::conv::{Conv3d, ConvTranspose3d};
use crate::nn::layers::{
    concat_channels, split_channels, BatchNorm, MaxPool, NearestUpsample, PRelu, Softmax,
};
use crate::nn::{Param, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two convolutions, each followed by batch norm and pReLU.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv3d,
    bn1: BatchNorm,
    act1: PRelu,
    conv2: Conv3d,
    bn2: BatchNorm,
    act2: PRelu,
}

impl ConvBlock {
    fn new(scope: &str, c_in: usize, c_out: usize, kernel: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv1: Conv3d::new(&format!("{scope}.conv1"), c_in, c_out, kernel, rng),
            bn1: BatchNorm::new(&format!("{scope}.bn1"), c_out),
            act1: PRelu::new(&format!("{scope}.act1"), c_out),
            conv2: Conv3d::new(&format!("{scope}.conv2"), c_out, c_out, kernel, rng),
            bn2: BatchNorm::new(&format!("{scope}.bn2"), c_out),
            act2: PRelu::new(&format!("{scope}.act2"), c_out),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.conv1.forward(x, train);
        let y = self.bn1.forward(&y, train);
        let y = self.act1.forward(&y, train);
        let y = self.conv2.forward(&y, train);
        let y = self.bn2.forward(&y, train);
        self.act2.forward(&y, train)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let g = self.act2.backward(dy);
        let g = self.bn2.backward(&g);
        let g = self.conv2.backward(&g);
        let g = self.act1.backward(&g);
        let g = self.bn1.backward(&g);
        self.conv1.backward(&g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.act1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        self.act2.visit_params(f);
    }

    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
    }
}

#[derive(Debug, Clone)]
enum Upsampler {
    Transposed(ConvTranspose3d),
    Nearest(NearestUpsample, Conv3d),
}

impl Upsampler {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        match self {
            Upsampler::Transposed(t) => t.forward(x, train),
            Upsampler::Nearest(up, conv) => {
                let u = up.forward(x, train);
                conv.forward(&u, train)
            }
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        match self {
            Upsampler::Transposed(t) => t.backward(dy),
            Upsampler::Nearest(up, conv) => {
                let g = conv.backward(dy);
                up.backward(&g)
            }
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Upsampler::Transposed(t) => t.visit_params(f),
            Upsampler::Nearest(_, conv) => conv.visit_params(f),
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Upsampler,
    attn: Option<AttentionModule>,
    block: ConvBlock,
    skip_channels: usize,
}

/// Batch forward output.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// (batch, class, depth, height, width), softmax-normalized.
    pub probs: Tensor,
    /// One (batch, 1, d_l, h_l, w_l) map per level, index l = level l+1;
    /// empty when attention is disabled.
    pub attentions: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    schedule: LayerSchedule,
    enc_blocks: Vec<ConvBlock>,
    pools: Vec<MaxPool>,
    bottleneck_attn: Option<AttentionModule>,
    stages: Vec<DecoderStage>,
    classifier: Conv3d,
    softmax: Softmax,
    /// (channels, depth, height, width) of each encoder level output, from
    /// the most recent forward pass.
    pub last_encoder_shapes: Vec<[usize; 4]>,
}

impl Network {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = config.resolved_schedule();
        let levels = &schedule.levels;
        let n_levels = levels.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let with_attention = config.attention_mode != AttentionMode::None;

        let mut enc_blocks = Vec::with_capacity(n_levels);
        let mut c_in = 1usize;
        for (l, spec) in levels.iter().enumerate() {
            enc_blocks.push(ConvBlock::new(
                &format!("enc{}", l + 1),
                c_in,
                spec.channels,
                spec.dim.kernel(),
                &mut rng,
            ));
            c_in = spec.channels;
        }
        let pools: Vec<MaxPool> = schedule.pool_factors.iter().map(|&f| MaxPool::new(f)).collect();

        let bottleneck_attn = if with_attention {
            Some(AttentionModule::new(
                &format!("attn{n_levels}"),
                levels[n_levels - 1].channels,
                &mut rng,
            )?)
        } else {
            None
        };

        // decoder stages, deepest first: stage targeting level l+1 upsamples
        // from level l+2
        let mut stages_rev = Vec::with_capacity(n_levels - 1);
        for l in (0..n_levels - 1).rev() {
            let c_src = levels[l + 1].channels;
            let c_dst = levels[l].channels;
            let factor = schedule.pool_factors[l];
            let kernel = levels[l].dim.kernel();
            let up = match config.upsample_mode {
                UpsampleMode::TransposedConv => Upsampler::Transposed(ConvTranspose3d::new(
                    &format!("up{}", l + 1),
                    c_src,
                    c_dst,
                    factor,
                    &mut rng,
                )),
                UpsampleMode::NearestConv => Upsampler::Nearest(
                    NearestUpsample::new(factor),
                    Conv3d::new(&format!("up{}", l + 1), c_src, c_dst, kernel, &mut rng),
                ),
            };
            let attn = if with_attention {
                Some(AttentionModule::new(
                    &format!("attn{}", l + 1),
                    2 * c_dst,
                    &mut rng,
                )?)
            } else {
                None
            };
            let block = ConvBlock::new(&format!("dec{}", l + 1), 2 * c_dst, c_dst, kernel, &mut rng);
            stages_rev.push(DecoderStage {
                up,
                attn,
                block,
                skip_channels: c_dst,
            });
        }
        stages_rev.reverse(); // index by target level (0-based)

        let classifier = Conv3d::new(
            "classifier",
            levels[0].channels,
            config.n_classes,
            [1, 1, 1],
            &mut rng,
        );

        Ok(Network {
            config: config.clone(),
            schedule,
            enc_blocks,
            pools,
            bottleneck_attn,
            stages: stages_rev,
            classifier,
            softmax: Softmax::new(),
            last_encoder_shapes: Vec::new(),
        })
    }

    pub fn n_levels(&self) -> usize {
        self.schedule.levels.len()
    }

    pub fn schedule(&self) -> &LayerSchedule {
        &self.schedule
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, d, h, w) = x.dim();
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a single input channel, got {c}"
            )));
        }
        let div = self.schedule.required_divisor();
        if d % div[0] != 0 || h % div[1] != 0 || w % div[2] != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input extent ({d}, {h}, {w}) not divisible by the cumulative pool factor {div:?}"
            )));
        }
        Ok(())
    }

    /// Full forward pass. With `train` set, every layer caches what its
    /// backward pass needs.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<BatchOutput> {
        self.check_input(x)?;
        let n_levels = self.n_levels();
        let with_attention = self.config.attention_mode != AttentionMode::None;

        let mut enc_outs: Vec<Tensor> = Vec::with_capacity(n_levels);
        let mut cur = x.clone();
        self.last_encoder_shapes.clear();
        for l in 0..n_levels {
            let y = self.enc_blocks[l].forward(&cur, train);
            let (_, c, d, h, w) = y.dim();
            self.last_encoder_shapes.push([c, d, h, w]);
            if l < n_levels - 1 {
                cur = self.pools[l].forward(&y, train);
            }
            enc_outs.push(y);
        }

        let mut attns: Vec<Option<Tensor>> = vec![None; n_levels];
        let mut d = enc_outs[n_levels - 1].clone();
        if let Some(attn) = &mut self.bottleneck_attn {
            let (cal, a) = attn.forward(&d, train);
            d = cal;
            attns[n_levels - 1] = Some(a);
        }
        for l in (0..n_levels - 1).rev() {
            let stage = &mut self.stages[l];
            let u = stage.up.forward(&d, train);
            let mut c = concat_channels(&u, &enc_outs[l]);
            if let Some(attn) = &mut stage.attn {
                let (cal, a) = attn.forward(&c, train);
                c = cal;
                attns[l] = Some(a);
            }
            d = stage.block.forward(&c, train);
        }

        let logits = self.classifier.forward(&d, train);
        let probs = self.softmax.forward(&logits, train);
        let attentions = if with_attention {
            attns.into_iter().map(|a| a.expect("attention recorded")).collect()
        } else {
            Vec::new()
        };
        Ok(BatchOutput { probs, attentions })
    }

    /// Backpropagates the probability gradient (and, in supervised-attention
    /// training, per-level attention-map gradients), accumulating parameter
    /// gradients.
    pub fn backward(&mut self, d_probs: &Tensor, d_attn: &[Option<Tensor>]) {
        let n_levels = self.n_levels();
        let ext = |l: usize| -> Option<&Tensor> { d_attn.get(l).and_then(|o| o.as_ref()) };

        let dlogits = self.softmax.backward(d_probs);
        let mut dd = self.classifier.backward(&dlogits);

        let mut dskips: Vec<Option<Tensor>> = vec![None; n_levels - 1];
        for l in 0..n_levels - 1 {
            let stage = &mut self.stages[l];
            let dc = stage.block.backward(&dd);
            let dc = match &mut stage.attn {
                Some(attn) => attn.backward(&dc, ext(l)),
                None => dc,
            };
            let (du, dskip) = split_channels(&dc, stage.skip_channels);
            dskips[l] = Some(dskip);
            dd = stage.up.backward(&du);
        }
        if let Some(attn) = &mut self.bottleneck_attn {
            dd = attn.backward(&dd, ext(n_levels - 1));
        }

        let mut g = dd;
        for l in (0..n_levels).rev() {
            let dx = self.enc_blocks[l].backward(&g);
            if l == 0 {
                break;
            }
            let mut dpooled = self.pools[l - 1].backward(&dx);
            dpooled += dskips[l - 1].take().as_ref().expect("skip grad recorded");
            g = dpooled;
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.enc_blocks {
            b.visit_params(f);
        }
        if let Some(a) = &mut self.bottleneck_attn {
            a.visit_params(f);
        }
        for s in &mut self.stages {
            s.up.visit_params(f);
            if let Some(a) = &mut s.attn {
                a.visit_params(f);
            }
            s.block.visit_params(f);
        }
        self.classifier.visit_params(f);
    }

    pub fn visit_batchnorms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        for b in &mut self.enc_blocks {
            b.visit_bn(f);
        }
        for s in &mut self.stages {
            s.block.visit_bn(f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.data.len());
        n
    }
}
