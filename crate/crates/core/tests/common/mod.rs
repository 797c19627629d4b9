//! Independent oracles shared by the integration and acceptance suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resdsn::Tensor;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero gradient entries.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rand_tensor_f32(shape: &[usize], rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor<f32> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x`.
pub fn fd_max_rel_err(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Seven nested loops: `y[n, co, o] = (sum_ci sum_kz sum_ky sum_kx w * x) + b`,
/// summing in channel-major, kernel scan order and skipping padded taps.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_oracle<T>(
    x: &[T],
    xshape: [usize; 5],
    w: &[T],
    b: &[T],
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 5])
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Mul<Output = T> + Default,
{
    let [n, ci, d, h, wd] = xshape;
    let out = |e: usize| (e + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out(d), out(h), out(wd));
    let mut y = vec![T::default(); n * co * od * oh * ow];
    for bn in 0..n {
        for c in 0..co {
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = T::default();
                        for cin in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (yy * stride + ky) as isize - pad as isize;
                                        let ix = (xx * stride + kx) as isize - pad as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        let xv = x[(((bn * ci + cin) * d + iz) * h + iy) * wd + ix];
                                        let wv = w[(((c * ci + cin) * k + kz) * k + ky) * k + kx];
                                        acc = acc + wv * xv;
                                    }
                                }
                            }
                        }
                        y[(((bn * co + c) * od + z) * oh + yy) * ow + xx] = acc + b[c];
                    }
                }
            }
        }
    }
    (y, [n, co, od, oh, ow])
}

/// Transposed convolution by explicit scatter of every input voxel.
pub fn deconv3d_oracle(
    x: &[f64],
    xshape: [usize; 5],
    w: &[f64],
    b: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, ci, d, h, wd] = xshape;
    let out = |e: usize| (e - 1) * stride + k - 2 * pad;
    let (od, oh, ow) = (out(d), out(h), out(wd));
    let mut y = vec![0.0; n * co * od * oh * ow];
    for bn in 0..n {
        for cin in 0..ci {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..wd {
                        let xv = x[(((bn * ci + cin) * d + z) * h + yy) * wd + xx];
                        for c in 0..co {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let oz = (z * stride + kz) as isize - pad as isize;
                                        let oy = (yy * stride + ky) as isize - pad as isize;
                                        let ox = (xx * stride + kx) as isize - pad as isize;
                                        if oz < 0
                                            || oy < 0
                                            || ox < 0
                                            || oz >= od as isize
                                            || oy >= oh as isize
                                            || ox >= ow as isize
                                        {
                                            continue;
                                        }
                                        let wv = w[(((cin * co + c) * k + kz) * k + ky) * k + kx];
                                        y[(((bn * co + c) * od + oz as usize) * oh + oy as usize) * ow
                                            + ox as usize] += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for bn in 0..n {
        for c in 0..co {
            let plane = od * oh * ow;
            for v in &mut y[(bn * co + c) * plane..(bn * co + c + 1) * plane] {
                *v += b[c];
            }
        }
    }
    (y, [n, co, od, oh, ow])
}

pub mod gradcheck {
    //! Per-op finite-difference checks. Each returns the worst relative error
    //! over every input and parameter entry for one random instance.

    use super::*;
    use resdsn::ops::{self, ConvSpec, Mode, RunningStats};

    fn projection(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        rand_tensor(shape, rng, -1.0, 1.0)
    }

    pub fn conv3d(seed: u64) -> f64 {
        let mut r = rng(seed);
        let spec = ConvSpec::same3(2, 3);
        let x = rand_tensor(&[2, 2, 5, 5, 5], &mut r, -1.0, 1.0);
        let w = rand_tensor(&spec.conv_weight_shape(), &mut r, -0.5, 0.5);
        let b = rand_tensor(&[3], &mut r, -0.5, 0.5);
        let y = ops::conv3d(&x, &w, &b, &spec).unwrap();
        let p = projection(y.shape(), &mut r);
        let g = ops::conv3d_backward(&x, &w, &p, &spec, true).unwrap();
        let ex = fd_max_rel_err(&x, g.input.as_ref().unwrap(), |x| dot(&ops::conv3d(x, &w, &b, &spec).unwrap(), &p));
        let ew = fd_max_rel_err(&w, &g.weight, |w| dot(&ops::conv3d(&x, w, &b, &spec).unwrap(), &p));
        let eb = fd_max_rel_err(&b, &g.bias, |b| dot(&ops::conv3d(&x, &w, b, &spec).unwrap(), &p));
        ex.max(ew).max(eb)
    }

    pub fn deconv3d(seed: u64) -> f64 {
        let mut r = rng(seed);
        let spec = ConvSpec::up2(3, 2);
        let x = rand_tensor(&[2, 3, 4, 4, 4], &mut r, -1.0, 1.0);
        let w = rand_tensor(&spec.deconv_weight_shape(), &mut r, -0.5, 0.5);
        let b = rand_tensor(&[2], &mut r, -0.5, 0.5);
        let y = ops::deconv3d(&x, &w, &b, &spec).unwrap();
        let p = projection(y.shape(), &mut r);
        let g = ops::deconv3d_backward(&x, &w, &p, &spec, true).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&ops::deconv3d(x, w, b, &spec).unwrap(), &p);
        let ex = fd_max_rel_err(&x, g.input.as_ref().unwrap(), |x| f(x, &w, &b));
        let ew = fd_max_rel_err(&w, &g.weight, |w| f(&x, w, &b));
        let eb = fd_max_rel_err(&b, &g.bias, |b| f(&x, &w, b));
        ex.max(ew).max(eb)
    }

    /// Inputs are a random permutation of well-separated values so no
    /// perturbation changes a block's argmax.
    pub fn maxpool3d(seed: u64) -> f64 {
        use rand::seq::SliceRandom;
        let mut r = rng(seed);
        let mut vals: Vec<f64> = (0..64).map(|i| i as f64 * 0.01 - 0.3).collect();
        vals.shuffle(&mut r);
        let x = Tensor::from_vec(&[1, 1, 4, 4, 4], vals).unwrap();
        let (y, idx) = ops::maxpool3d(&x).unwrap();
        let p = projection(y.shape(), &mut r);
        let dx = ops::maxpool3d_backward(&p, &idx).unwrap();
        fd_max_rel_err(&x, &dx, |x| dot(&ops::maxpool3d(x).unwrap().0, &p))
    }

    pub fn batchnorm3d(seed: u64) -> f64 {
        let mut r = rng(seed);
        let x = rand_tensor(&[2, 3, 4, 4, 4], &mut r, -2.0, 3.0);
        let gamma = rand_tensor(&[3], &mut r, 0.5, 1.5);
        let beta = rand_tensor(&[3], &mut r, -0.5, 0.5);
        let run = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut st = RunningStats::new(3);
            ops::batchnorm3d(x, g, b, &mut st, Mode::Train).unwrap()
        };
        let (y, cache) = run(&x, &gamma, &beta);
        let p = projection(y.shape(), &mut r);
        let g = ops::batchnorm3d_backward(&p, &gamma, cache.as_ref().unwrap()).unwrap();
        let ex = fd_max_rel_err(&x, &g.input, |x| dot(&run(x, &gamma, &beta).0, &p));
        let eg = fd_max_rel_err(&gamma, &g.gamma, |gm| dot(&run(&x, gm, &beta).0, &p));
        let eb = fd_max_rel_err(&beta, &g.beta, |bt| dot(&run(&x, &gamma, bt).0, &p));
        ex.max(eg).max(eb)
    }

    /// Entries are kept at least 0.01 away from the kink at zero.
    pub fn relu(seed: u64) -> f64 {
        let mut r = rng(seed);
        let vals: Vec<f64> = (0..60)
            .map(|_| {
                let m: f64 = r.random_range(0.01..2.0);
                if r.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let x = Tensor::from_vec(&[1, 3, 4, 5, 1], vals).unwrap();
        let p = projection(x.shape(), &mut r);
        let dx = ops::relu_backward(&x, &p).unwrap();
        fd_max_rel_err(&x, &dx, |x| dot(&ops::relu(x), &p))
    }

    pub fn residual_add(seed: u64) -> f64 {
        let mut r = rng(seed);
        let a = rand_tensor(&[1, 2, 3, 3, 3], &mut r, -1.0, 1.0);
        let b = rand_tensor(&[1, 2, 3, 3, 3], &mut r, -1.0, 1.0);
        let p = projection(a.shape(), &mut r);
        // both operand gradients equal the upstream gradient
        let ea = fd_max_rel_err(&a, &p, |a| dot(&ops::residual_add(a, &b).unwrap(), &p));
        let eb = fd_max_rel_err(&b, &p, |b| dot(&ops::residual_add(&a, b).unwrap(), &p));
        ea.max(eb)
    }

    pub fn softmax_xent(seed: u64) -> f64 {
        let mut r = rng(seed);
        let logits = rand_tensor(&[2, 2, 3, 3, 3], &mut r, -3.0, 3.0);
        let labels: Vec<u8> = (0..54).map(|_| r.random_range(0..2u8)).collect();
        let (_, grad) = ops::softmax_xent(&logits, &labels).unwrap();
        fd_max_rel_err(&logits, &grad, |l| ops::softmax_xent(l, &labels).unwrap().0)
    }

    pub const ALL: [(&str, fn(u64) -> f64); 7] = [
        ("conv3d", conv3d),
        ("deconv3d", deconv3d),
        ("maxpool3d", maxpool3d),
        ("batchnorm3d", batchnorm3d),
        ("relu", relu),
        ("residual_add", residual_add),
        ("softmax_xent", softmax_xent),
    ];
}

pub mod netcheck {
    //! End-to-end finite-difference check of the full network loss.
    //!
    //! The loss is piecewise smooth: every ReLU sign and max-pool selection
    //! fixes one smooth piece. A central difference whose two evaluations
    //! land in a different piece than the base point straddles a kink and
    //! says nothing about the derivative, so such probes are redrawn.

    use super::*;
    use resdsn::net::{loss_overall, NetworkConfig, ResDsn, Variant};

    pub const SIDE: usize = 8;
    pub const BATCH: usize = 4;
    const MAX_DRAWS: usize = 20;

    pub fn config(variant: Variant) -> NetworkConfig {
        NetworkConfig {
            input_size: [SIDE; 3],
            ..NetworkConfig::tiny().with_variant(variant)
        }
    }

    #[derive(Debug, Default, Clone, Copy)]
    pub struct Report {
        pub worst: f64,
        pub checked: usize,
        pub straddled: usize,
    }

    fn loss(net: &mut ResDsn<f64>, x: &Tensor<f64>, labels: &[u8]) -> (f64, u64) {
        let (out, trace) = net.forward_train(x).unwrap();
        let aux = net.config().aux_weights;
        (loss_overall(&out, labels, aux).unwrap().0.total, trace.activation_pattern())
    }

    /// Checks `per_tensor` kink-free entries of every parameter tensor. The
    /// variant cycles with the seed.
    pub fn network(seed: u64, per_tensor: usize) -> Report {
        let variant = Variant::ALL[seed as usize % 4];
        network_with(config(variant), seed, per_tensor)
    }

    pub fn network_with(cfg: NetworkConfig, seed: u64, per_tensor: usize) -> Report {
        let side = cfg.input_size[0];
        let mut net = ResDsn::<f64>::new(cfg, seed).unwrap();
        let mut r = rng(seed ^ 0x5eed);
        let x = rand_tensor(&[BATCH, 1, side, side, side], &mut r, -1.5, 1.5);
        let labels: Vec<u8> = (0..BATCH * side.pow(3)).map(|_| r.random_range(0..2u8)).collect();

        let (out, trace) = net.forward_train(&x).unwrap();
        let base = trace.activation_pattern();
        let aux = net.config().aux_weights;
        let (_, grads) = loss_overall(&out, &labels, aux).unwrap();
        net.zero_grad();
        net.backward(&trace, &grads).unwrap();
        drop(trace);

        let analytic: Vec<Tensor<f64>> = net.params_mut().iter().map(|p| p.grad.clone()).collect();
        let mut rep = Report::default();
        for (pi, g) in analytic.iter().enumerate() {
            let mut valid = 0;
            for _ in 0..MAX_DRAWS {
                if valid == per_tensor {
                    break;
                }
                let e = r.random_range(0..g.len());
                let orig = net.params_mut()[pi].value.data()[e];
                net.params_mut()[pi].value.data_mut()[e] = orig + FD_STEP;
                let (up, pu) = loss(&mut net, &x, &labels);
                net.params_mut()[pi].value.data_mut()[e] = orig - FD_STEP;
                let (down, pd) = loss(&mut net, &x, &labels);
                net.params_mut()[pi].value.data_mut()[e] = orig;
                if pu != base || pd != base {
                    rep.straddled += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * FD_STEP);
                rep.worst = rep.worst.max(rel_err(g.data()[e], numeric));
                rep.checked += 1;
                valid += 1;
            }
        }
        rep
    }
}

pub mod oracle {
    //! Brute-force geometry and metric references.

    use resdsn::c2f::BoundingBox;
    use resdsn::Volume;

    pub fn bbox_scan(mask: &Volume<u8>) -> Option<BoundingBox> {
        let [w, h, d] = mask.dims();
        let mut found: Option<([usize; 3], [usize; 3])> = None;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(x, y, z) == 0 {
                        continue;
                    }
                    let p = [x, y, z];
                    found = Some(match found {
                        None => (p, p),
                        Some((lo, hi)) => ([0, 1, 2].map(|a| lo[a].min(p[a])), [0, 1, 2].map(|a| hi[a].max(p[a]))),
                    });
                }
            }
        }
        found.map(|(lo, hi)| BoundingBox { lo, hi })
    }

    /// Component id per voxel from union-find over every adjacent foreground
    /// pair; ids are the root voxel index plus one, `0` for background.
    pub fn union_find_components(mask: &Volume<u8>, corners: bool) -> Vec<usize> {
        let [w, h, d] = mask.dims();
        let n = mask.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let idx = |x: usize, y: usize, z: usize| x + w * (y + h * z);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(x, y, z) == 0 {
                        continue;
                    }
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let m = dx.abs() + dy.abs() + dz.abs();
                                if m == 0 || (!corners && m > 1) {
                                    continue;
                                }
                                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                if nx < 0 || ny < 0 || nz < 0 || nx >= w as i64 || ny >= h as i64 || nz >= d as i64 {
                                    continue;
                                }
                                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                                if mask.get(nx, ny, nz) != 0 {
                                    let a = find(&mut parent, idx(x, y, z));
                                    let b = find(&mut parent, idx(nx, ny, nz));
                                    parent[a] = b;
                                }
                            }
                        }
                    }
                }
            }
        }
        (0..n)
            .map(|i| if mask.data()[i] == 0 { 0 } else { find(&mut parent, i) + 1 })
            .collect()
    }

    /// True when two labelings induce the same partition of the voxels.
    pub fn same_partition(a: &[u32], b: &[usize]) -> bool {
        use std::collections::HashMap;
        let mut ab: HashMap<u32, usize> = HashMap::new();
        let mut ba: HashMap<usize, u32> = HashMap::new();
        a.iter().zip(b).all(|(&x, &y)| {
            ((x == 0) == (y == 0)) && *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x
        })
    }

    pub fn filter_oracle(mask: &Volume<u8>, fraction: f64, corners: bool) -> Vec<u8> {
        use std::collections::HashMap;
        let ids = union_find_components(mask, corners);
        let mut sizes: HashMap<usize, usize> = HashMap::new();
        for &i in ids.iter().filter(|&&i| i != 0) {
            *sizes.entry(i).or_default() += 1;
        }
        let total: usize = sizes.values().sum();
        ids.iter()
            .map(|&i| (i != 0 && sizes[&i] as f64 >= fraction * total as f64) as u8)
            .collect()
    }

    /// `2|P n Y| / (|P| + |Y|)` by direct counting, 1 for two empty masks.
    pub fn dice_count(p: &Volume<u8>, y: &Volume<u8>) -> f64 {
        let a = p.data().iter().filter(|&&v| v != 0).count();
        let b = y.data().iter().filter(|&&v| v != 0).count();
        let both = p.data().iter().zip(y.data()).filter(|(&u, &v)| u != 0 && v != 0).count();
        if a + b == 0 {
            1.0
        } else {
            2.0 * both as f64 / (a + b) as f64
        }
    }

    /// Element-wise replacement by a two-branch loop.
    pub fn decrop_loop(p_f: &Volume<u8>, p_c: &Volume<u8>, b: &BoundingBox) -> Volume<u8> {
        let mut out = p_c.clone();
        let [w, h, d] = p_c.dims();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = if b.contains([x, y, z]) {
                        p_f.get(x - b.lo[0], y - b.lo[1], z - b.lo[2])
                    } else {
                        p_c.get(x, y, z)
                    };
                    out.set(x, y, z, v);
                }
            }
        }
        out
    }

    pub fn random_mask(dims: [usize; 3], density: f64, rng: &mut super::ChaCha8Rng) -> Volume<u8> {
        use rand::Rng;
        let n = dims.iter().product();
        Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.random_bool(density) as u8).collect()).unwrap()
    }
}
