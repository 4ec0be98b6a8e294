use rand::Rng;

use super::ops::{fcl_backward, fcl_into, pool_backward, pool_into, relu_in_place, softmax2};
use super::params::{Gradients, NetworkParams, Topology};
use super::Layer2Wiring;
use crate::error::{Error, Result};
use crate::sh::ShCube;

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tag: u64,
    input: Vec<f64>,
    /// Layer-1 pre-activations, one `M³P` array per branch.
    pub l1_pre: [Vec<f64>; 3],
    pub l1_pool: [Vec<f64>; 3],
    l1_arg: [Vec<u32>; 3],
    /// Layer-2 pre-activations: 3 (shared) or 6 (per-direction) `M²P` arrays.
    pub l2_pre: Vec<Vec<f64>>,
    pub l2_pool: [Vec<f64>; 6],
    l2_arg: [Vec<u32>; 6],
    pub l3_pre: [Vec<f64>; 6],
    pub l3_pool: [Vec<f64>; 6],
    l3_arg: [Vec<u32>; 6],
    pub fuse_pre: [Vec<f64>; 3],
    /// Merge-FCL input after dropout scaling.
    pub merge_in: Vec<f64>,
    /// Per-element dropout scale (0 or 1/keep); empty without dropout.
    pub dropout_scale: Vec<f64>,
    pub merge_pre: Vec<f64>,
    pub logits: [f64; 2],
    pub gamma: f64,
}

fn check_input(topo: &Topology, input: &ShCube) -> Result<()> {
    let cfg = &topo.config;
    if input.radius != cfg.radius || input.n_max != cfg.n_max || input.data.len() != topo.conv3.array_len() {
        return Err(Error::Shape(format!(
            "network expects radius {} and n_max {}, got radius {} and n_max {}",
            cfg.radius, cfg.n_max, input.radius, input.n_max
        )));
    }
    Ok(())
}

/// Inference pass without dropout.
pub fn forward(params: &NetworkParams, input: &ShCube) -> Result<(f64, ForwardCache)> {
    check_input(&params.topo, input)?;
    let cache = run(params, &input.data, None);
    Ok((cache.gamma, cache))
}

/// Training pass with inverted dropout on the merge-FCL input.
pub fn forward_with_dropout<R: Rng + ?Sized>(
    params: &NetworkParams,
    input: &ShCube,
    keep_prob: f64,
    rng: &mut R,
) -> Result<(f64, ForwardCache)> {
    check_input(&params.topo, input)?;
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!("keep probability must be in (0, 1], got {keep_prob}")));
    }
    let len = 3 * params.config().pair_width;
    let scale = (0..len)
        .map(|_| {
            if rng.random::<f64>() < keep_prob {
                1.0 / keep_prob
            } else {
                0.0
            }
        })
        .collect();
    let cache = run(params, &input.data, Some(scale));
    Ok((cache.gamma, cache))
}

/// PSIC score only.
pub fn predict(params: &NetworkParams, input: &ShCube) -> Result<f64> {
    forward(params, input).map(|(g, _)| g)
}

fn run(params: &NetworkParams, input: &[f64], dropout: Option<Vec<f64>>) -> ForwardCache {
    let topo = &params.topo;
    let cfg = &topo.config;
    let values = params.values();
    let m = cfg.side();
    let p = cfg.channels();
    let s = &topo.slots;

    let mut l1_pre: [Vec<f64>; 3] = Default::default();
    let mut l1_pool: [Vec<f64>; 3] = Default::default();
    let mut l1_arg: [Vec<u32>; 3] = Default::default();
    for a in 0..3 {
        let mut pre = vec![0.0; m * m * m * p];
        topo.conv3
            .forward(input, topo.slice(values, s.l1[a].0), topo.slice(values, s.l1[a].1), &mut pre);
        let mut act = pre.clone();
        relu_in_place(&mut act);
        let mut pooled = vec![0.0; m * m * p];
        let mut arg = vec![0u32; m * m * p];
        pool_into(&act, 3, m, p, a, &mut pooled, &mut arg);
        l1_pre[a] = pre;
        l1_pool[a] = pooled;
        l1_arg[a] = arg;
    }

    let mut l2_pre = Vec::with_capacity(s.l2.len());
    let mut l2_pool: [Vec<f64>; 6] = Default::default();
    let mut l2_arg: [Vec<u32>; 6] = Default::default();
    for (ci, unit) in s.l2.iter().enumerate() {
        let branch = match cfg.wiring {
            Layer2Wiring::SharedConv => ci,
            Layer2Wiring::PerDirectionConv => ci / 2,
        };
        let mut pre = vec![0.0; m * m * p];
        topo.conv2.forward(
            &l1_pool[branch],
            topo.slice(values, unit.0),
            topo.slice(values, unit.1),
            &mut pre,
        );
        let mut act = pre.clone();
        relu_in_place(&mut act);
        let dirs: &[usize] = match cfg.wiring {
            Layer2Wiring::SharedConv => &[0, 1],
            Layer2Wiring::PerDirectionConv => {
                if ci % 2 == 0 {
                    &[0]
                } else {
                    &[1]
                }
            }
        };
        for &d in dirs {
            let path = 2 * branch + d;
            let mut pooled = vec![0.0; m * p];
            let mut arg = vec![0u32; m * p];
            pool_into(&act, 2, m, p, d, &mut pooled, &mut arg);
            l2_pool[path] = pooled;
            l2_arg[path] = arg;
        }
        l2_pre.push(pre);
    }

    let mut l3_pre: [Vec<f64>; 6] = Default::default();
    let mut l3_pool: [Vec<f64>; 6] = Default::default();
    let mut l3_arg: [Vec<u32>; 6] = Default::default();
    for i in 0..6 {
        let mut pre = vec![0.0; m * p];
        topo.conv1.forward(
            &l2_pool[i],
            topo.slice(values, s.l3[i].0),
            topo.slice(values, s.l3[i].1),
            &mut pre,
        );
        let mut act = pre.clone();
        relu_in_place(&mut act);
        let mut pooled = vec![0.0; p];
        let mut arg = vec![0u32; p];
        pool_into(&act, 1, m, p, 0, &mut pooled, &mut arg);
        l3_pre[i] = pre;
        l3_pool[i] = pooled;
        l3_arg[i] = arg;
    }

    let pw = cfg.pair_width;
    let mut fuse_pre: [Vec<f64>; 3] = Default::default();
    let mut merge_in = Vec::with_capacity(3 * pw);
    for a in 0..3 {
        let v: Vec<f64> = l3_pool[2 * a].iter().chain(&l3_pool[2 * a + 1]).copied().collect();
        let mut pre = topo.slice(values, s.fuse[a].1).to_vec();
        fcl_into(&v, topo.slice(values, s.fuse[a].0), &mut pre);
        merge_in.extend(pre.iter().map(|x| x.max(0.0)));
        fuse_pre[a] = pre;
    }
    let dropout_scale = dropout.unwrap_or_default();
    if !dropout_scale.is_empty() {
        for (x, sc) in merge_in.iter_mut().zip(&dropout_scale) {
            *x *= sc;
        }
    }
    let mut merge_pre = topo.slice(values, s.merge.1).to_vec();
    fcl_into(&merge_in, topo.slice(values, s.merge.0), &mut merge_pre);
    let merge_act: Vec<f64> = merge_pre.iter().map(|x| x.max(0.0)).collect();
    let mut logits = topo.slice(values, s.head.1).to_vec();
    fcl_into(&merge_act, topo.slice(values, s.head.0), &mut logits);
    let gamma = softmax2(logits[0], logits[1]);

    ForwardCache {
        tag: params.version(),
        input: input.to_vec(),
        l1_pre,
        l1_pool,
        l1_arg,
        l2_pre,
        l2_pool,
        l2_arg,
        l3_pre,
        l3_pool,
        l3_arg,
        fuse_pre,
        merge_in,
        dropout_scale,
        merge_pre,
        logits: [logits[0], logits[1]],
        gamma,
    }
}

fn gate(grad: &mut [f64], pre: &[f64]) {
    for (g, x) in grad.iter_mut().zip(pre) {
        if *x <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Cross-entropy gradient for one sample.
pub fn backward(params: &NetworkParams, cache: &ForwardCache, target: f64) -> Result<Gradients> {
    let mut g = Gradients::zeros(params.len());
    backward_into(params, cache, target, &mut g.values)?;
    Ok(g)
}

/// Accumulates the gradient of `−[γ₀ log γ + (1−γ₀) log(1−γ)]` into `grad`.
pub fn backward_into(params: &NetworkParams, cache: &ForwardCache, target: f64, grad: &mut [f64]) -> Result<()> {
    if cache.tag != params.version() {
        return Err(Error::StaleCache {
            cache: cache.tag,
            params: params.version(),
        });
    }
    if grad.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient buffer has {} entries, expected {}",
            grad.len(),
            params.len()
        )));
    }
    let topo = &params.topo;
    let cfg = &topo.config;
    let values = params.values();
    let blocks = &topo.layout.blocks;
    let s = &topo.slots;
    let m = cfg.side();
    let p = cfg.channels();

    // Split the flat gradient into disjoint per-block slices.
    let mut gslices: Vec<&mut [f64]> = Vec::with_capacity(blocks.len());
    let mut rest = grad;
    for b in blocks {
        let (head, tail) = rest.split_at_mut(b.len);
        gslices.push(head);
        rest = tail;
    }
    let mut gs: Vec<Option<&mut [f64]>> = gslices.into_iter().map(Some).collect();
    let mut take = |i: usize| gs[i].take().expect("each block is visited once");

    // Softmax + cross-entropy.
    let d = cache.gamma - target;
    let dlogits = [d, -d];

    let merge_act: Vec<f64> = cache.merge_pre.iter().map(|x| x.max(0.0)).collect();
    let (hw, hb) = (take(s.head.0), take(s.head.1));
    let mut d_merge = fcl_backward(&merge_act, topo.slice(values, s.head.0), &dlogits, hw, hb);
    gate(&mut d_merge, &cache.merge_pre);

    let (mw, mb) = (take(s.merge.0), take(s.merge.1));
    let mut d_merge_in = fcl_backward(&cache.merge_in, topo.slice(values, s.merge.0), &d_merge, mw, mb);
    if !cache.dropout_scale.is_empty() {
        for (g, sc) in d_merge_in.iter_mut().zip(&cache.dropout_scale) {
            *g *= sc;
        }
    }

    let pw = cfg.pair_width;
    let mut d_l3_pool: [Vec<f64>; 6] = Default::default();
    for a in 0..3 {
        let mut d_pre = d_merge_in[a * pw..(a + 1) * pw].to_vec();
        gate(&mut d_pre, &cache.fuse_pre[a]);
        let v: Vec<f64> = cache.l3_pool[2 * a]
            .iter()
            .chain(&cache.l3_pool[2 * a + 1])
            .copied()
            .collect();
        let (fw, fb) = (take(s.fuse[a].0), take(s.fuse[a].1));
        let dv = fcl_backward(&v, topo.slice(values, s.fuse[a].0), &d_pre, fw, fb);
        d_l3_pool[2 * a] = dv[..p].to_vec();
        d_l3_pool[2 * a + 1] = dv[p..].to_vec();
    }

    let mut d_l2_pool: [Vec<f64>; 6] = Default::default();
    for i in 0..6 {
        let mut d_pre = vec![0.0; m * p];
        pool_backward(&d_l3_pool[i], &cache.l3_arg[i], &mut d_pre);
        gate(&mut d_pre, &cache.l3_pre[i]);
        let mut d_in = vec![0.0; m * p];
        let (w, b) = (take(s.l3[i].0), take(s.l3[i].1));
        topo.conv1.backward(
            &cache.l2_pool[i],
            topo.slice(values, s.l3[i].0),
            &d_pre,
            w,
            b,
            Some(&mut d_in),
        );
        d_l2_pool[i] = d_in;
    }

    let mut d_l1_pool: [Vec<f64>; 3] = [vec![0.0; m * m * p], vec![0.0; m * m * p], vec![0.0; m * m * p]];
    for (ci, unit) in s.l2.iter().enumerate() {
        let (branch, paths): (usize, &[usize]) = match cfg.wiring {
            Layer2Wiring::SharedConv => (ci, &[0, 1]),
            Layer2Wiring::PerDirectionConv => (ci / 2, if ci % 2 == 0 { &[0] } else { &[1] }),
        };
        let mut d_pre = vec![0.0; m * m * p];
        for &dir in paths {
            let path = 2 * branch + dir;
            pool_backward(&d_l2_pool[path], &cache.l2_arg[path], &mut d_pre);
        }
        gate(&mut d_pre, &cache.l2_pre[ci]);
        let (w, b) = (take(unit.0), take(unit.1));
        topo.conv2.backward(
            &cache.l1_pool[branch],
            topo.slice(values, unit.0),
            &d_pre,
            w,
            b,
            Some(&mut d_l1_pool[branch]),
        );
    }

    for a in 0..3 {
        let mut d_pre = vec![0.0; m * m * m * p];
        pool_backward(&d_l1_pool[a], &cache.l1_arg[a], &mut d_pre);
        gate(&mut d_pre, &cache.l1_pre[a]);
        let (w, b) = (take(s.l1[a].0), take(s.l1[a].1));
        topo.conv3
            .backward(&cache.input, topo.slice(values, s.l1[a].0), &d_pre, w, b, None);
    }
    Ok(())
}
