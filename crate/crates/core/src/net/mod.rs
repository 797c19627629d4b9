//! The encoder-decoder segmentation network with long and short residual
//! connections and two deeply supervised auxiliary heads.
//!
//! Layout, with `r` the window resolution and `C1..C4` the stage channels:
//!
//! ```text
//! enc1 (C1, r) -> pool -> enc2 (C2, r/2) -> pool -> enc3 (C3, r/4) -> pool -> enc4 (C4, r/8)
//! up3 + enc3 -> dec3 -> up2 + enc2 -> dec2 -> up1 + enc1 -> dec1 -> head (2, r)
//! aux1: enc2 -> up -> head          aux2: enc3 -> up -> up -> head
//! ```

mod checkpoint;
mod config;
mod layers;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{NetworkConfig, Residual, Variant};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{invalid_arg, shape_err, Result};
use crate::ops::{self, ConvSpec, PoolIndices};
use crate::rng::{self, Purpose};
use crate::tensor::{Param, Scalar, Tensor};
use layers::{Block, BlockTrace, Conv, Named, NamedMut, Stage, StageTrace};

#[derive(Clone, Debug)]
struct AuxBranch<T> {
    ups: Vec<Block<T>>,
    head: Conv<T>,
}

struct AuxTrace<T> {
    ups: Vec<BlockTrace<T>>,
    head_in: Tensor<T>,
}

impl<T: Scalar> AuxBranch<T> {
    /// Upsampling chain through `channels` (deepest first), then a head.
    fn new(channels: &[usize], rng: &mut impl Rng) -> Self {
        let ups = channels.windows(2).map(|c| Block::up(c[0], c[1], rng)).collect();
        let last = *channels.last().expect("non-empty chain");
        AuxBranch {
            ups,
            head: Conv::new(ConvSpec::pointwise(last, 2), false, true, rng),
        }
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for u in &self.ups {
            h = u.forward_eval(&h)?;
        }
        self.head.forward(&h)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, AuxTrace<T>)> {
        let mut h = x.clone();
        let mut ups = Vec::with_capacity(self.ups.len());
        for u in &mut self.ups {
            let (y, t) = u.forward_train(&h)?;
            ups.push(t);
            h = y;
        }
        Ok((self.head.forward(&h)?, AuxTrace { ups, head_in: h }))
    }

    fn backward(&mut self, t: &AuxTrace<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = self.head.backward(&t.head_in, dy, true)?.expect("input gradient");
        for (u, ut) in self.ups.iter_mut().zip(&t.ups).rev() {
            d = u.backward(ut, &d, true)?.expect("input gradient");
        }
        Ok(d)
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.params_mut(&format!("{prefix}.up{}", i + 1), out);
        }
        self.head.params_mut(&format!("{prefix}.head"), out);
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        for (i, u) in self.ups.iter().enumerate() {
            u.tensors(&format!("{prefix}.up{}", i + 1), out);
        }
        self.head.tensors(&format!("{prefix}.head"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.tensors_mut(&format!("{prefix}.up{}", i + 1), out);
        }
        self.head.tensors_mut(&format!("{prefix}.head"), out);
    }
}

/// Logits of the main head and of the auxiliary heads (none when deep
/// supervision is off), all `[n, 2, d, h, w]` at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutputs<T> {
    pub main: Tensor<T>,
    pub aux: Vec<Tensor<T>>,
}

/// Gradients of a scalar loss with respect to each head's logits.
#[derive(Clone, Debug)]
pub struct OutputGrads<T> {
    pub main: Tensor<T>,
    pub aux: Vec<Tensor<T>>,
}

/// Activations saved by a training-mode forward pass.
pub struct Trace<T> {
    enc: Vec<StageTrace<T>>,
    pools: Vec<PoolIndices>,
    ups: Vec<BlockTrace<T>>,
    dec: Vec<StageTrace<T>>,
    head_in: Tensor<T>,
    aux: Vec<AuxTrace<T>>,
}

impl<T: Scalar> Trace<T> {
    /// Hash of every ReLU on/off state and max-pool selection. Two forward
    /// passes with equal patterns lie in the same smooth piece of the loss.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.enc.iter().chain(&self.dec).for_each(|t| t.hash_pattern(&mut h));
        self.ups.iter().for_each(|t| t.hash_pattern(&mut h));
        for a in &self.aux {
            a.ups.iter().for_each(|t| t.hash_pattern(&mut h));
        }
        self.pools.iter().for_each(|p| p.argmax().hash(&mut h));
        h.finish()
    }
}

#[derive(Clone, Debug)]
pub struct ResDsn<T> {
    config: NetworkConfig,
    enc: Vec<Stage<T>>,
    /// Decoder upsampling blocks, deepest first (into stages 3, 2, 1).
    ups: Vec<Block<T>>,
    dec: Vec<Stage<T>>,
    head: Conv<T>,
    aux: Vec<AuxBranch<T>>,
}

impl<T: Scalar> ResDsn<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
        let c = config.stage_channels;
        let short = config.short_residual == Residual::Sum;
        let mut enc = Vec::with_capacity(4);
        let mut cin = 1;
        for &cout in &c {
            enc.push(Stage::new(cin, cout, short, &mut rng));
            cin = cout;
        }
        let mut ups = Vec::with_capacity(3);
        let mut dec = Vec::with_capacity(3);
        for s in (0..3).rev() {
            ups.push(Block::up(c[s + 1], c[s], &mut rng));
            dec.push(Stage::new(c[s], c[s], short, &mut rng));
        }
        let head = Conv::new(ConvSpec::pointwise(c[0], 2), false, true, &mut rng);
        let aux = if config.deep_supervision {
            vec![
                AuxBranch::new(&[c[1], c[0]], &mut rng),
                AuxBranch::new(&[c[2], c[1], c[0]], &mut rng),
            ]
        } else {
            Vec::new()
        };
        Ok(ResDsn {
            config,
            enc,
            ups,
            dec,
            head,
            aux,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != 1 || [d, h, w] != self.config.window_shape() {
            return Err(shape_err!(
                "network expects [n, 1, {:?}] input, got {:?}",
                self.config.window_shape(),
                x.shape()
            ));
        }
        Ok(())
    }

    fn long(&self) -> bool {
        self.config.long_residual == Residual::Sum
    }

    /// Inference-mode forward pass using batch-norm running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<NetworkOutputs<T>> {
        let (main, feats) = self.main_path_eval(x)?;
        let aux = self
            .aux
            .iter()
            .zip([&feats[1], &feats[2]])
            .map(|(a, f)| a.forward_eval(f))
            .collect::<Result<_>>()?;
        Ok(NetworkOutputs { main, aux })
    }

    /// Main-head logits and encoder stage outputs.
    fn main_path_eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check_input(x)?;
        let mut feats = Vec::with_capacity(4);
        let mut h = x.clone();
        for (s, stage) in self.enc.iter().enumerate() {
            if s > 0 {
                h = ops::maxpool3d(&h)?.0;
            }
            h = stage.forward_eval(&h)?;
            feats.push(h.clone());
        }
        for (i, (up, dec)) in self.ups.iter().zip(&self.dec).enumerate() {
            let mut u = up.forward_eval(&h)?;
            if self.long() {
                u.add_assign(&feats[2 - i])?;
            }
            h = dec.forward_eval(&u)?;
        }
        Ok((self.head.forward(&h)?, feats))
    }

    /// Training-mode forward pass. Updates batch-norm running statistics
    /// and returns the activations needed by [`ResDsn::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(NetworkOutputs<T>, Trace<T>)> {
        self.check_input(x)?;
        let long = self.long();
        let mut feats = Vec::with_capacity(4);
        let mut enc_t = Vec::with_capacity(4);
        let mut pools = Vec::with_capacity(3);
        let mut h = x.clone();
        for (s, stage) in self.enc.iter_mut().enumerate() {
            if s > 0 {
                let (p, idx) = ops::maxpool3d(&h)?;
                pools.push(idx);
                h = p;
            }
            let (y, t) = stage.forward_train(&h)?;
            enc_t.push(t);
            feats.push(y.clone());
            h = y;
        }
        let mut up_t = Vec::with_capacity(3);
        let mut dec_t = Vec::with_capacity(3);
        for (i, (up, dec)) in self.ups.iter_mut().zip(&mut self.dec).enumerate() {
            let (mut u, ut) = up.forward_train(&h)?;
            if long {
                u.add_assign(&feats[2 - i])?;
            }
            let (y, dt) = dec.forward_train(&u)?;
            up_t.push(ut);
            dec_t.push(dt);
            h = y;
        }
        let main = self.head.forward(&h)?;
        let mut aux = Vec::with_capacity(2);
        let mut aux_t = Vec::with_capacity(2);
        for (a, f) in self.aux.iter_mut().zip([&feats[1], &feats[2]]) {
            let (y, t) = a.forward_train(f)?;
            aux.push(y);
            aux_t.push(t);
        }
        let trace = Trace {
            enc: enc_t,
            pools,
            ups: up_t,
            dec: dec_t,
            head_in: h,
            aux: aux_t,
        };
        Ok((NetworkOutputs { main, aux }, trace))
    }

    /// Accumulates parameter gradients for the given head gradients.
    pub fn backward(&mut self, trace: &Trace<T>, grads: &OutputGrads<T>) -> Result<()> {
        if grads.aux.len() != self.aux.len() {
            return Err(shape_err!("{} auxiliary gradients for {} heads", grads.aux.len(), self.aux.len()));
        }
        let long = self.long();
        let mut d = self.head.backward(&trace.head_in, &grads.main, true)?.expect("input gradient");
        // gradient flowing into each encoder stage output
        let mut d_enc: Vec<Option<Tensor<T>>> = vec![None, None, None, None];
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
            match slot {
                Some(s) => s.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        for i in (0..3).rev() {
            let du = self.dec[i].backward(&trace.dec[i], &d, true)?.expect("input gradient");
            if long {
                accumulate(&mut d_enc[2 - i], du.clone())?;
            }
            d = self.ups[i].backward(&trace.ups[i], &du, true)?.expect("input gradient");
        }
        accumulate(&mut d_enc[3], d)?;
        for (k, (a, t)) in self.aux.iter_mut().zip(&trace.aux).enumerate() {
            let g = a.backward(t, &grads.aux[k])?;
            accumulate(&mut d_enc[k + 1], g)?;
        }
        for s in (0..4).rev() {
            let dy = d_enc[s].take().expect("every encoder stage feeds the next");
            let dx = self.enc[s].backward(&trace.enc[s], &dy, s > 0)?;
            if s > 0 {
                let dp = ops::maxpool3d_backward(&dx.expect("input gradient"), &trace.pools[s - 1])?;
                accumulate(&mut d_enc[s - 1], dp)?;
            }
        }
        Ok(())
    }

    /// Trainable parameters in a fixed order, with their names.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (s, st) in self.enc.iter_mut().enumerate() {
            st.params_mut(&format!("enc{}", s + 1), &mut out);
        }
        for (i, (u, d)) in self.ups.iter_mut().zip(&mut self.dec).enumerate() {
            u.params_mut(&format!("up{}", 3 - i), &mut out);
            d.params_mut(&format!("dec{}", 3 - i), &mut out);
        }
        self.head.params_mut("head", &mut out);
        for (k, a) in self.aux.iter_mut().enumerate() {
            a.params_mut(&format!("aux{}", k + 1), &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    /// Every parameter and batch-norm buffer, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (s, st) in self.enc.iter().enumerate() {
            st.tensors(&format!("enc{}", s + 1), &mut out);
        }
        for (i, (u, d)) in self.ups.iter().zip(&self.dec).enumerate() {
            u.tensors(&format!("up{}", 3 - i), &mut out);
            d.tensors(&format!("dec{}", 3 - i), &mut out);
        }
        self.head.tensors("head", &mut out);
        for (k, a) in self.aux.iter().enumerate() {
            a.tensors(&format!("aux{}", k + 1), &mut out);
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (s, st) in self.enc.iter_mut().enumerate() {
            st.tensors_mut(&format!("enc{}", s + 1), &mut out);
        }
        for (i, (u, d)) in self.ups.iter_mut().zip(&mut self.dec).enumerate() {
            u.tensors_mut(&format!("up{}", 3 - i), &mut out);
            d.tensors_mut(&format!("dec{}", 3 - i), &mut out);
        }
        self.head.tensors_mut("head", &mut out);
        for (k, a) in self.aux.iter_mut().enumerate() {
            a.tensors_mut(&format!("aux{}", k + 1), &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let mut me = self.clone();
        me.params_mut().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// `weight_decay * sum ||w||^2` over parameters subject to decay.
    pub fn regularizer(&mut self) -> f64 {
        let lambda = self.config.weight_decay;
        lambda
            * self
                .params_mut()
                .iter()
                .filter(|p| p.decay)
                .map(|p| p.value.sum_squares())
                .sum::<f64>()
    }

    /// Zeroes the weights of the decoder's upsampling convolutions.
    pub fn zero_decoder_upsampling(&mut self) {
        for u in &mut self.ups {
            u.conv.weight.value.fill(T::zero());
        }
    }

    /// Foreground probability `[n, 1, d, h, w]` from the main head.
    pub fn predict_prob(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (logits, _) = self.main_path_eval(x)?;
        ops::foreground_probability(&logits)
    }

    pub fn to_checkpoint(&self, iteration: u64, seed: u64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration,
            seed,
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.cast::<f32>()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = ResDsn::new(ck.config.clone(), 0)?;
        let slots = net.named_tensors_mut();
        if slots.len() != ck.tensors.len() {
            return Err(invalid_arg!(
                "checkpoint holds {} tensors, network expects {}",
                ck.tensors.len(),
                slots.len()
            ));
        }
        for ((name, slot), (ck_name, t)) in slots.into_iter().zip(&ck.tensors) {
            if name != *ck_name || slot.shape() != t.shape() {
                return Err(invalid_arg!(
                    "checkpoint tensor {ck_name} {:?} does not match {name} {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            *slot = t.cast();
        }
        Ok(net)
    }
}

/// Loss components: mainstream and auxiliary cross-entropies and their
/// weighted sum. Weight decay is applied by the optimiser and reported
/// separately.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub aux: Vec<f64>,
    pub total: f64,
}

/// `main + sum_d xi_d * aux_d` with mean-reduced cross-entropy per head.
pub fn loss_overall<T: Scalar>(
    outputs: &NetworkOutputs<T>,
    labels: &[u8],
    aux_weights: [f64; 2],
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    if outputs.aux.len() > 2 {
        return Err(shape_err!("at most two auxiliary heads, got {}", outputs.aux.len()));
    }
    let (main, main_grad) = ops::softmax_xent(&outputs.main, labels)?;
    let mut total = main;
    let mut aux = Vec::new();
    let mut aux_grads = Vec::new();
    for (logits, &xi) in outputs.aux.iter().zip(&aux_weights) {
        let (l, g) = ops::softmax_xent(logits, labels)?;
        total += xi * l;
        aux.push(l);
        let xi = T::of(xi);
        aux_grads.push(g.map(|v| v * xi));
    }
    Ok((
        LossBreakdown { main, aux, total },
        OutputGrads {
            main: main_grad,
            aux: aux_grads,
        },
    ))
}
