//! Building blocks of the network: convolutions, batch norm, conv-BN-ReLU
//! blocks and residual stages. Each layer keeps its own parameters and
//! accumulates gradients into them during `backward`.

use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ops::{self, BnCache, ConvSpec, RunningStats};
use crate::tensor::{Param, Scalar, Tensor};

/// He-normal initialisation, `std = sqrt(2 / fan_in)`.
fn he_normal<T: Scalar>(shape: &[usize], fan_in: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

pub(crate) type Named<'a, T> = Vec<(String, &'a Tensor<T>)>;
pub(crate) type NamedMut<'a, T> = Vec<(String, &'a mut Tensor<T>)>;

#[derive(Clone, Debug)]
pub(crate) struct Conv<T> {
    spec: ConvSpec,
    transposed: bool,
    pub(crate) weight: Param<T>,
    bias: Option<Param<T>>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(spec: ConvSpec, transposed: bool, bias: bool, rng: &mut impl Rng) -> Self {
        let k3 = spec.kernel_volume() as f64;
        let (shape, fan_in) = if transposed {
            (spec.deconv_weight_shape(), spec.in_channels as f64 * k3 / (spec.stride as f64).powi(3))
        } else {
            (spec.conv_weight_shape(), spec.in_channels as f64 * k3)
        };
        Conv {
            spec,
            transposed,
            weight: Param::new(he_normal(&shape, fan_in, rng), true),
            bias: bias.then(|| Param::new(Tensor::zeros(&[spec.out_channels]), true)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let zero;
        let b = match &self.bias {
            Some(p) => &p.value,
            None => {
                zero = Tensor::zeros(&[self.spec.out_channels]);
                &zero
            }
        };
        if self.transposed {
            ops::deconv3d(x, &self.weight.value, b, &self.spec)
        } else {
            ops::conv3d(x, &self.weight.value, b, &self.spec)
        }
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_input: bool) -> Result<Option<Tensor<T>>> {
        let g = if self.transposed {
            ops::deconv3d_backward(x, &self.weight.value, dy, &self.spec, need_input)?
        } else {
            ops::conv3d_backward(x, &self.weight.value, dy, &self.spec, need_input)?
        };
        self.weight.grad.add_assign(&g.weight)?;
        if let Some(b) = &mut self.bias {
            b.grad.add_assign(&g.bias)?;
        }
        Ok(g.input)
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        out.push((format!("{prefix}.weight"), &self.weight.value));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), &b.value));
        }
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        out.push((format!("{prefix}.weight"), &mut self.weight.value));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), &mut b.value));
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm<T> {
    gamma: Param<T>,
    beta: Param<T>,
    stats: RunningStats<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn new(channels: usize) -> Self {
        Norm {
            gamma: Param::new(Tensor::full(&[channels], T::one()), false),
            beta: Param::new(Tensor::zeros(&[channels]), false),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        let (y, cache) = ops::batchnorm3d(x, &self.gamma.value, &self.beta.value, &mut self.stats, ops::Mode::Train)?;
        Ok((y, cache.expect("train mode returns a cache")))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut stats = self.stats.clone();
        let (y, _) = ops::batchnorm3d(x, &self.gamma.value, &self.beta.value, &mut stats, ops::Mode::Eval)?;
        Ok(y)
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = ops::batchnorm3d_backward(dy, &self.gamma.value, cache)?;
        self.gamma.grad.add_assign(&g.gamma)?;
        self.beta.grad.add_assign(&g.beta)?;
        Ok(g.input)
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        out.push((format!("{prefix}.gamma"), &self.gamma.value));
        out.push((format!("{prefix}.beta"), &self.beta.value));
        out.push((format!("{prefix}.running_mean"), &self.stats.mean));
        out.push((format!("{prefix}.running_var"), &self.stats.var));
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma.value));
        out.push((format!("{prefix}.beta"), &mut self.beta.value));
        out.push((format!("{prefix}.running_mean"), &mut self.stats.mean));
        out.push((format!("{prefix}.running_var"), &mut self.stats.var));
    }
}

/// Convolution (or transposed convolution), batch norm, ReLU. The
/// convolution carries no bias since batch norm removes it.
#[derive(Clone, Debug)]
pub(crate) struct Block<T> {
    pub(crate) conv: Conv<T>,
    norm: Norm<T>,
}

pub(crate) struct BlockTrace<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    out: Tensor<T>,
}

impl<T: Scalar> BlockTrace<T> {
    pub fn hash_pattern(&self, h: &mut impl Hasher) {
        for v in self.out.data() {
            (*v > T::zero()).hash(h);
        }
    }
}

impl<T: Scalar> Block<T> {
    pub fn conv3(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Block {
            conv: Conv::new(ConvSpec::same3(cin, cout), false, false, rng),
            norm: Norm::new(cout),
        }
    }

    pub fn up(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Block {
            conv: Conv::new(ConvSpec::up2(cin, cout), true, false, rng),
            norm: Norm::new(cout),
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.norm.forward_eval(&self.conv.forward(x)?)?;
        Ok(ops::relu(&y))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockTrace<T>)> {
        let (y, bn) = self.norm.forward_train(&self.conv.forward(x)?)?;
        let out = ops::relu(&y);
        let trace = BlockTrace {
            input: x.clone(),
            bn,
            out: out.clone(),
        };
        Ok((out, trace))
    }

    pub fn backward(&mut self, t: &BlockTrace<T>, dy: &Tensor<T>, need_input: bool) -> Result<Option<Tensor<T>>> {
        // relu(x) > 0 exactly where x > 0, so the output serves as the mask
        let d = ops::relu_backward(&t.out, dy)?;
        let d = self.norm.backward(&t.bn, &d)?;
        self.conv.backward(&t.input, &d, need_input)
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.params_mut(&format!("{prefix}.conv"), out);
        self.norm.params_mut(&format!("{prefix}.bn"), out);
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        self.conv.tensors(&format!("{prefix}.conv"), out);
        self.norm.tensors(&format!("{prefix}.bn"), out);
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        self.conv.tensors_mut(&format!("{prefix}.conv"), out);
        self.norm.tensors_mut(&format!("{prefix}.bn"), out);
    }
}

#[derive(Clone, Debug)]
enum Skip<T> {
    None,
    Identity,
    Project(Conv<T>),
}

/// Two conv blocks, optionally spanned by a short residual connection. A
/// 1x1x1 projection stands in for the identity when channel counts differ.
#[derive(Clone, Debug)]
pub(crate) struct Stage<T> {
    a: Block<T>,
    b: Block<T>,
    skip: Skip<T>,
}

pub(crate) struct StageTrace<T> {
    a: BlockTrace<T>,
    b: BlockTrace<T>,
}

impl<T: Scalar> StageTrace<T> {
    pub fn hash_pattern(&self, h: &mut impl Hasher) {
        self.a.hash_pattern(h);
        self.b.hash_pattern(h);
    }
}

impl<T: Scalar> Stage<T> {
    pub fn new(cin: usize, cout: usize, short_residual: bool, rng: &mut impl Rng) -> Self {
        let a = Block::conv3(cin, cout, rng);
        let b = Block::conv3(cout, cout, rng);
        let skip = match (short_residual, cin == cout) {
            (false, _) => Skip::None,
            (true, true) => Skip::Identity,
            (true, false) => Skip::Project(Conv::new(ConvSpec::pointwise(cin, cout), false, true, rng)),
        };
        Stage { a, b, skip }
    }

    fn add_skip(&self, x: &Tensor<T>, mut y: Tensor<T>) -> Result<Tensor<T>> {
        match &self.skip {
            Skip::None => {}
            Skip::Identity => y.add_assign(x)?,
            Skip::Project(p) => y.add_assign(&p.forward(x)?)?,
        }
        Ok(y)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.b.forward_eval(&self.a.forward_eval(x)?)?;
        self.add_skip(x, y)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, StageTrace<T>)> {
        let (h, a) = self.a.forward_train(x)?;
        let (y, b) = self.b.forward_train(&h)?;
        Ok((self.add_skip(x, y)?, StageTrace { a, b }))
    }

    pub fn backward(&mut self, t: &StageTrace<T>, dy: &Tensor<T>, need_input: bool) -> Result<Option<Tensor<T>>> {
        let skip_grad = match &mut self.skip {
            Skip::None => None,
            Skip::Identity => Some(dy.clone()),
            Skip::Project(p) => p.backward(&t.a.input, dy, need_input)?,
        };
        let dh = self.b.backward(&t.b, dy, true)?.expect("input gradient requested");
        let dx = self.a.backward(&t.a, &dh, need_input)?;
        match (dx, skip_grad) {
            (Some(mut dx), Some(s)) if need_input => {
                dx.add_assign(&s)?;
                Ok(Some(dx))
            }
            (dx, _) => Ok(dx),
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.a.params_mut(&format!("{prefix}.block_a"), out);
        self.b.params_mut(&format!("{prefix}.block_b"), out);
        if let Skip::Project(p) = &mut self.skip {
            p.params_mut(&format!("{prefix}.proj"), out);
        }
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        self.a.tensors(&format!("{prefix}.block_a"), out);
        self.b.tensors(&format!("{prefix}.block_b"), out);
        if let Skip::Project(p) = &self.skip {
            p.tensors(&format!("{prefix}.proj"), out);
        }
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        self.a.tensors_mut(&format!("{prefix}.block_a"), out);
        self.b.tensors_mut(&format!("{prefix}.block_b"), out);
        if let Skip::Project(p) = &mut self.skip {
            p.tensors_mut(&format!("{prefix}.proj"), out);
        }
    }
}
