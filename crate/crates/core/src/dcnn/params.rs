use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::ops::{band_weight_count, ConvPlan};
use super::{Layer2Wiring, NetworkConfig};
use crate::error::{Error, Result};

/// One named, contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    /// Coarse grouping used by the per-layer breakdown.
    pub layer: &'static str,
    pub offset: usize,
    pub len: usize,
    /// Inputs feeding each output unit; zero for biases.
    pub fan_in: usize,
}

impl ParamBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Canonical ordering of every trainable parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub total: usize,
}

/// `(weights, bias)` block indices of one layer unit.
pub(crate) type Unit = (usize, usize);

#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub l1: [Unit; 3],
    /// Three entries for shared wiring, six (branch-major) otherwise.
    pub l2: Vec<Unit>,
    pub l3: [Unit; 6],
    pub fuse: [Unit; 3],
    pub merge: Unit,
    pub head: Unit,
}

impl ParamLayout {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        Ok(Self::with_slots(config)?.0)
    }

    pub(crate) fn with_slots(config: &NetworkConfig) -> Result<(Self, Slots)> {
        config.validate()?;
        let p = config.channels();
        let pairs = band_weight_count(config.n_max);
        let j = config.filter_size;
        let mut blocks = Vec::new();
        let mut push = |name: String, layer: &'static str, len: usize, fan_in: usize| -> usize {
            let offset = blocks.last().map_or(0, |b: &ParamBlock| b.offset + b.len);
            blocks.push(ParamBlock {
                name,
                layer,
                offset,
                len,
                fan_in,
            });
            blocks.len() - 1
        };
        let axes = ["x", "y", "z"];
        let mut unit = |prefix: String, layer: &'static str, dims: u32| -> Unit {
            let taps = j.pow(dims);
            // Fan-in of a band-n output channel is (2n+1)·taps; the He
            // variance is applied per band at initialisation.
            let w = push(format!("{prefix}.w"), layer, pairs * taps, taps);
            let b = push(format!("{prefix}.b"), layer, p, 0);
            (w, b)
        };
        let l1 = [0, 1, 2].map(|a| unit(format!("l1.{}", axes[a]), "layer1", 3));
        let l2 = match config.wiring {
            Layer2Wiring::SharedConv => (0..3).map(|a| unit(format!("l2.{}", axes[a]), "layer2", 2)).collect(),
            Layer2Wiring::PerDirectionConv => (0..6)
                .map(|i| unit(format!("l2.{}.{}", axes[i / 2], i % 2), "layer2", 2))
                .collect(),
        };
        let l3 = [0, 1, 2, 3, 4, 5].map(|i| unit(format!("l3.{}.{}", axes[i / 2], i % 2), "layer3", 1));
        let pw = config.pair_width;
        let mw = config.merge_width;
        let fuse = [0, 1, 2].map(|a| {
            let w = push(format!("fuse.{}.w", axes[a]), "fusion", pw * 2 * p, 2 * p);
            let b = push(format!("fuse.{}.b", axes[a]), "fusion", pw, 0);
            (w, b)
        });
        let merge = (
            push("merge.w".into(), "merge", mw * 3 * pw, 3 * pw),
            push("merge.b".into(), "merge", mw, 0),
        );
        let head = (
            push("head.w".into(), "head", 2 * mw, mw),
            push("head.b".into(), "head", 2, 0),
        );
        let total = blocks.last().map_or(0, |b| b.offset + b.len);
        Ok((
            Self { blocks, total },
            Slots {
                l1,
                l2,
                l3,
                fuse,
                merge,
                head,
            },
        ))
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Parameter count with a per-layer breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub per_layer: Vec<(&'static str, usize)>,
}

impl std::fmt::Display for ParamCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (layer, n) in &self.per_layer {
            writeln!(f, "{layer:>8}: {n}")?;
        }
        write!(f, "{:>8}: {}", "total", self.total)
    }
}

pub fn param_count(config: &NetworkConfig) -> Result<ParamCount> {
    let layout = ParamLayout::new(config)?;
    let mut per_layer: Vec<(&'static str, usize)> = Vec::new();
    for b in &layout.blocks {
        match per_layer.last_mut() {
            Some((l, n)) if *l == b.layer => *n += b.len,
            _ => per_layer.push((b.layer, b.len)),
        }
    }
    Ok(ParamCount {
        total: layout.total,
        per_layer,
    })
}

/// Shapes shared by every parameter vector of one configuration.
#[derive(Debug)]
pub(crate) struct Topology {
    pub config: NetworkConfig,
    pub layout: ParamLayout,
    pub slots: Slots,
    pub conv3: ConvPlan,
    pub conv2: ConvPlan,
    pub conv1: ConvPlan,
}

impl Topology {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        let (layout, slots) = ParamLayout::with_slots(config)?;
        let m = config.side();
        Ok(Self {
            config: config.clone(),
            layout,
            slots,
            conv3: ConvPlan::new(3, m, config.filter_size, config.n_max)?,
            conv2: ConvPlan::new(2, m, config.filter_size, config.n_max)?,
            conv1: ConvPlan::new(1, m, config.filter_size, config.n_max)?,
        })
    }

    pub fn slice<'a>(&self, values: &'a [f64], block: usize) -> &'a [f64] {
        &values[self.layout.blocks[block].range()]
    }
}

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

/// All trainable parameters as one flat vector in [`ParamLayout`] order.
///
/// Every mutation issues a new version tag; a [`super::ForwardCache`]
/// remembers the tag it was produced under.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub(crate) topo: Arc<Topology>,
    values: Vec<f64>,
    tag: u64,
}

impl NetworkParams {
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        let topo = Arc::new(Topology::new(config)?);
        let values = vec![0.0; topo.layout.total];
        Ok(Self {
            topo,
            values,
            tag: fresh_tag(),
        })
    }

    pub fn from_values(config: &NetworkConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if values.len() != p.values.len() {
            return Err(Error::Shape(format!(
                "configuration has {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.topo.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.topo.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.tag = fresh_tag();
        &mut self.values
    }

    pub fn version(&self) -> u64 {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block_values(&self, name: &str) -> Option<&[f64]> {
        self.layout().block(name).map(|b| &self.values[b.range()])
    }
}

/// Gradient of the loss with respect to every parameter, same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// He initialisation: weights ~ N(0, 2/fan_in), biases zero.
///
/// For composite-convolution banks the fan-in of a band-`n` output channel is
/// `(2n+1)·J^d`.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    let mut params = NetworkParams::zeros(config)?;
    let topo = params.topo.clone();
    let mut rng = crate::rng::stream(seed, &[0x1217]);
    let values = params.values_mut();
    for block in &topo.layout.blocks {
        if block.fan_in == 0 {
            continue;
        }
        let dst = &mut values[block.range()];
        let is_bank = block.name.starts_with('l');
        if is_bank {
            let taps = block.fan_in;
            let mut off = 0;
            for n in (0..=config.n_max).step_by(2) {
                let width = 2 * n + 1;
                let len = width * width * taps;
                let normal = Normal::new(0.0, (2.0 / (width * taps) as f64).sqrt()).expect("positive std");
                for v in &mut dst[off..off + len] {
                    *v = normal.sample(&mut rng);
                }
                off += len;
            }
        } else {
            let normal = Normal::new(0.0, (2.0 / block.fan_in as f64).sqrt()).expect("positive std");
            for v in dst.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(params)
}
