//! Layered forward pass: conv (+activation) (+pooling) layers applied in
//! sequence with dense, ECR or fused PECR kernels.
//!
//! The sparse methods re-convert each layer's input into their format,
//! move the network input and all filters to the device once, and only
//! bring the final output back. The dense method models the separate
//! pipeline where every layer round-trips through the host.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dataset::random_filter;
use crate::ecr::ecr_conv;
use crate::execmodel::ExecConfig;
use crate::metrics::{fused_from_volumes, LayerVolumes, OpCount, TrafficReport, ELEMENT_BYTES};
use crate::pecr::{pecr_conv_pool_with, pecr_convert_with, pecr_tiling};
use crate::tensor::{
    dense_conv, pool, relu, sparsity, ConvConfig, ConvGeometry, ConvPoolGeometry, FeatureMap,
    Filter, PoolConfig, PoolMode,
};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvPool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dense,
    Ecr,
    Pecr,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Method::Dense),
            "ecr" => Ok(Method::Ecr),
            "pecr" => Ok(Method::Pecr),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Methods that produce a plain (unpooled) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMethod {
    Dense,
    Ecr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec<T> {
    pub kind: LayerKind,
    /// One filter per output channel.
    pub filters: Vec<Filter<T>>,
    pub conv: ConvConfig,
    pub pool: Option<PoolConfig>,
    pub activation: Activation,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn conv(filters: Vec<Filter<T>>, conv: ConvConfig, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv,
            filters,
            conv,
            pool: None,
            activation,
        }
    }

    pub fn conv_pool(
        filters: Vec<Filter<T>>,
        conv: ConvConfig,
        pool: PoolConfig,
        activation: Activation,
    ) -> Self {
        Self {
            kind: LayerKind::ConvPool,
            filters,
            conv,
            pool: Some(pool),
            activation,
        }
    }

    fn kernel_dims(&self) -> Result<(usize, usize, usize)> {
        let f = self
            .filters
            .first()
            .ok_or_else(|| Error::Config("layer has no filters".into()))?;
        let dims = (f.channels(), f.k_h(), f.k_w());
        if self
            .filters
            .iter()
            .any(|g| (g.channels(), g.k_h(), g.k_w()) != dims)
        {
            return Err(Error::Shape("filters of one layer differ in shape".into()));
        }
        Ok(dims)
    }

    /// Output `(channels, height, width)` for an input of the given shape.
    pub fn output_dims(
        &self,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<(usize, usize, usize)> {
        let (in_ch, k_h, k_w) = self.kernel_dims()?;
        if in_ch != channels {
            return Err(Error::Shape(format!(
                "layer expects {in_ch} input channels, got {channels}"
            )));
        }
        let conv = ConvGeometry {
            channels,
            in_h: height,
            in_w: width,
            k_h,
            k_w,
            stride: self.conv.stride,
        };
        conv.validate()?;
        let (o_w, o_h) = conv.out_dims();
        match (self.kind, self.pool) {
            (LayerKind::Conv, None) => Ok((self.filters.len(), o_h, o_w)),
            (LayerKind::ConvPool, Some(pool)) => {
                let (p_w, p_h) = ConvPoolGeometry { conv, pool }.pool_out_dims()?;
                Ok((self.filters.len(), p_h, p_w))
            }
            (LayerKind::Conv, Some(_)) => Err(Error::Config(
                "conv layer must not carry a pool config".into(),
            )),
            (LayerKind::ConvPool, None) => {
                Err(Error::Config("conv_pool layer needs a pool config".into()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<T> {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<LayerSpec<T>>,
}

impl<T: Scalar> NetworkSpec<T> {
    /// Checks layer chaining and returns each layer's output shape.
    pub fn validate(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut dims = (self.input_channels, self.input_height, self.input_width);
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            dims = layer
                .output_dims(dims.0, dims.1, dims.2)
                .map_err(|e| Error::Layer {
                    index,
                    source: Box::new(e),
                })?;
            shapes.push(dims);
        }
        Ok(shapes)
    }
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub method: Method,
    pub output: FeatureMap<T>,
    pub ops: OpCount,
    /// Sparsity of the convolution output before and after the activation;
    /// `None` when the fused kernel never materializes it.
    pub activation_sparsity: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult<T> {
    pub output: FeatureMap<T>,
    pub ops: OpCount,
    pub traffic: TrafficReport,
    pub layers: Vec<LayerTrace<T>>,
    /// Layers that ran with ECR because PECR could not handle them.
    pub fallbacks: Vec<usize>,
}

/// One output channel per filter.
pub fn multichannel_conv<T: Scalar>(
    map: &FeatureMap<T>,
    filters: &[Filter<T>],
    cfg: ConvConfig,
    method: ConvMethod,
    mut counters: Option<&mut OpCount>,
    exec: &ExecConfig,
) -> Result<FeatureMap<T>> {
    let mut outputs = Vec::with_capacity(filters.len());
    for f in filters {
        let mut ops = OpCount::ZERO;
        let out = match method {
            ConvMethod::Dense => dense_conv(map, f, cfg, Some(&mut ops))?,
            ConvMethod::Ecr => ecr_conv(map, f, cfg, Some(&mut ops), exec)?,
        };
        if let Some(c) = counters.as_deref_mut() {
            *c += ops;
        }
        outputs.push(out);
    }
    FeatureMap::stack(&outputs)
}

fn conv_only_volumes(input: u64, filters: u64, output: u64) -> TrafficReport {
    TrafficReport {
        host_to_device_bytes: (input + filters) * ELEMENT_BYTES,
        device_to_host_bytes: output * ELEMENT_BYTES,
        global_loads_bytes: (input + filters) * ELEMENT_BYTES,
        global_stores_bytes: output * ELEMENT_BYTES,
    }
}

struct LayerRun<T> {
    trace: LayerTrace<T>,
    /// Device global-memory traffic of this layer.
    device: TrafficReport,
    /// Traffic if the layer round-trips through the host on its own.
    separate: TrafficReport,
    fell_back: bool,
}

fn run_layer<T: Scalar>(
    layer: &LayerSpec<T>,
    input: &FeatureMap<T>,
    method: Method,
    exec: &ExecConfig,
) -> Result<LayerRun<T>> {
    layer.output_dims(input.channels(), input.height(), input.width())?;
    let (_, k_h, k_w) = layer.kernel_dims()?;
    let conv_geom = ConvGeometry {
        channels: input.channels(),
        in_h: input.height(),
        in_w: input.width(),
        k_h,
        k_w,
        stride: layer.conv.stride,
    };
    let filters_len = (layer.filters.len() * conv_geom.window_len()) as u64;
    let relu_on = layer.activation == Activation::Relu;

    if let (Method::Pecr, Some(pool_cfg)) = (method, layer.pool) {
        let geom = ConvPoolGeometry {
            conv: conv_geom,
            pool: pool_cfg,
        };
        if pecr_tiling(&geom).is_ok() {
            let mut ops = OpCount::ZERO;
            let mut outs = Vec::with_capacity(layer.filters.len());
            for f in &layer.filters {
                let p = pecr_convert_with(input, f, layer.conv, pool_cfg, exec)?;
                outs.push(pecr_conv_pool_with(&p, relu_on, Some(&mut ops), exec)?);
            }
            let output = FeatureMap::stack(&outs)?;
            let v = LayerVolumes::of(&geom, layer.filters.len())?;
            let fused = fused_from_volumes(&v);
            return Ok(LayerRun {
                trace: LayerTrace {
                    method: Method::Pecr,
                    output,
                    ops,
                    activation_sparsity: None,
                },
                device: TrafficReport {
                    host_to_device_bytes: 0,
                    device_to_host_bytes: 0,
                    ..fused
                },
                separate: crate::metrics::separate_from_volumes(&v),
                fell_back: false,
            });
        }
    }

    let (conv_method, used) = match method {
        Method::Dense => (ConvMethod::Dense, Method::Dense),
        Method::Ecr | Method::Pecr => (ConvMethod::Ecr, Method::Ecr),
    };
    let mut ops = OpCount::ZERO;
    let conv_out = multichannel_conv(
        input,
        &layer.filters,
        layer.conv,
        conv_method,
        Some(&mut ops),
        exec,
    )?;
    let (activated, activation_sparsity) = match layer.activation {
        Activation::Relu => {
            let before = sparsity(&conv_out);
            let after = relu(&conv_out);
            let s = sparsity(&after);
            (after, Some((before, s)))
        }
        Activation::None => {
            let s = sparsity(&conv_out);
            (conv_out, Some((s, s)))
        }
    };
    let conv_len = activated.len() as u64;
    let input_len = input.len() as u64;
    let (output, device, separate) = match layer.pool {
        Some(cfg) => {
            let pooled = pool(&activated, cfg)?;
            let v = LayerVolumes {
                input: input_len,
                filters: filters_len,
                conv_output: conv_len,
                pool_output: pooled.len() as u64,
            };
            let sep = crate::metrics::separate_from_volumes(&v);
            let device = TrafficReport {
                host_to_device_bytes: 0,
                device_to_host_bytes: 0,
                ..sep
            };
            (pooled, device, sep)
        }
        None => {
            let sep = conv_only_volumes(input_len, filters_len, conv_len);
            let device = TrafficReport {
                host_to_device_bytes: 0,
                device_to_host_bytes: 0,
                ..sep
            };
            (activated, device, sep)
        }
    };
    Ok(LayerRun {
        trace: LayerTrace {
            method: used,
            output,
            ops,
            activation_sparsity,
        },
        device,
        separate,
        fell_back: method == Method::Pecr,
    })
}

/// Runs every layer of `net` on `input`.
pub fn forward<T: Scalar>(
    net: &NetworkSpec<T>,
    input: &FeatureMap<T>,
    method: Method,
    exec: &ExecConfig,
) -> Result<ForwardResult<T>> {
    if (input.channels(), input.height(), input.width())
        != (net.input_channels, net.input_height, net.input_width)
    {
        return Err(Error::Shape(format!(
            "network expects input {}x{}x{}, got {}x{}x{}",
            net.input_channels,
            net.input_height,
            net.input_width,
            input.channels(),
            input.height(),
            input.width()
        )));
    }
    net.validate()?;

    let mut current = input.clone();
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut fallbacks = Vec::new();
    let mut ops = OpCount::ZERO;
    let mut traffic = TrafficReport::default();
    let mut all_filters = 0u64;
    for (index, layer) in net.layers.iter().enumerate() {
        let run = run_layer(layer, &current, method, exec).map_err(|e| Error::Layer {
            index,
            source: Box::new(e),
        })?;
        all_filters += layer
            .filters
            .iter()
            .map(|f| f.weights().len() as u64)
            .sum::<u64>();
        if run.fell_back {
            fallbacks.push(index);
        }
        ops += run.trace.ops;
        traffic += match method {
            Method::Dense => run.separate,
            Method::Ecr | Method::Pecr => run.device,
        };
        current = run.trace.output.clone();
        layers.push(run.trace);
    }
    if method != Method::Dense {
        traffic.host_to_device_bytes += (input.len() as u64 + all_filters) * ELEMENT_BYTES;
        traffic.device_to_host_bytes += current.len() as u64 * ELEMENT_BYTES;
    }
    Ok(ForwardResult {
        output: current,
        ops,
        traffic,
        layers,
        fallbacks,
    })
}

// ---------------------------------------------------------------------------
// JSON network description
// ---------------------------------------------------------------------------

pub const NETWORK_SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    NETWORK_SCHEMA_VERSION
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    #[serde(default = "schema_version")]
    pub version: u32,
    pub input: InputDoc,
    pub layers: Vec<LayerDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDoc {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDoc {
    pub kind: LayerKind,
    pub kernel: KernelDoc,
    #[serde(default = "one", alias = "strides")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolDoc>,
    #[serde(default)]
    pub activation: Activation,
    pub weights: WeightsDoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelDoc {
    pub h: usize,
    pub w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl KernelDoc {
    fn len(&self) -> usize {
        self.out_ch * self.in_ch * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolDoc {
    pub h: usize,
    pub w: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "max_mode")]
    pub mode: PoolMode,
}

fn max_mode() -> PoolMode {
    PoolMode::Max
}

/// Filter weights, `out_ch × in_ch × h × w` little-endian `f32`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightsDoc {
    Inline { base64: String },
    File { path: String },
    Seeded { seed: u64 },
}

fn decode_le_f32(bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::PayloadLength {
            expected: expected * 4,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

impl LayerDoc {
    fn weights(&self, base_dir: &Path) -> Result<Vec<f32>> {
        let n = self.kernel.len();
        match &self.weights {
            WeightsDoc::Inline { base64 } => {
                let bytes = BASE64
                    .decode(base64.trim())
                    .map_err(|e| Error::Config(format!("bad base64 weights: {e}")))?;
                decode_le_f32(&bytes, n)
            }
            WeightsDoc::File { path } => {
                let full = base_dir.join(path);
                let bytes = std::fs::read(&full).map_err(|e| Error::from(e).at_path(&full))?;
                decode_le_f32(&bytes, n).map_err(|e| e.at_path(&full))
            }
            WeightsDoc::Seeded { seed } => (0..self.kernel.out_ch)
                .map(|o| {
                    random_filter(
                        self.kernel.in_ch,
                        self.kernel.h,
                        self.kernel.w,
                        seed.wrapping_add(o as u64),
                    )
                    .map(|f| f.weights().to_vec())
                })
                .collect::<Result<Vec<_>>>()
                .map(|v| v.concat()),
        }
    }

    fn to_spec<T: Scalar>(&self, base_dir: &Path) -> Result<LayerSpec<T>> {
        let k = self.kernel;
        let weights = self.weights(base_dir)?;
        let per = k.in_ch * k.h * k.w;
        let filters = weights
            .chunks(per.max(1))
            .map(|w| {
                Filter::new(
                    k.in_ch,
                    k.h,
                    k.w,
                    w.iter().map(|&v| T::from_f32_lossy(v)).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        if filters.len() != k.out_ch || k.out_ch == 0 {
            return Err(Error::Config(format!("expected {} filters", k.out_ch)));
        }
        let pool = self
            .pool
            .map(|p| PoolConfig::new(p.w, p.h, p.stride, p.mode))
            .transpose()?;
        Ok(LayerSpec {
            kind: self.kind,
            filters,
            conv: ConvConfig::new(self.stride)?,
            pool,
            activation: self.activation,
        })
    }
}

impl NetworkDoc {
    /// Builds a validated network; file weight paths resolve against `base_dir`.
    pub fn to_spec<T: Scalar>(&self, base_dir: &Path) -> Result<NetworkSpec<T>> {
        if self.version != NETWORK_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported network schema version {}",
                self.version
            )));
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(index, l)| {
                l.to_spec(base_dir).map_err(|e| Error::Layer {
                    index,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = NetworkSpec {
            input_channels: self.input.channels,
            input_height: self.input.height,
            input_width: self.input.width,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Document with all weights inlined.
    pub fn from_spec<T: Scalar>(net: &NetworkSpec<T>) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let f = &l.filters[0];
                let bytes: Vec<u8> = l
                    .filters
                    .iter()
                    .flat_map(|f| {
                        f.weights()
                            .iter()
                            .flat_map(|w| w.to_f32_lossy().to_le_bytes())
                    })
                    .collect();
                LayerDoc {
                    kind: l.kind,
                    kernel: KernelDoc {
                        h: f.k_h(),
                        w: f.k_w(),
                        in_ch: f.channels(),
                        out_ch: l.filters.len(),
                    },
                    stride: l.conv.stride,
                    pool: l.pool.map(|p| PoolDoc {
                        h: p.height,
                        w: p.width,
                        stride: p.stride,
                        mode: p.mode,
                    }),
                    activation: l.activation,
                    weights: WeightsDoc::Inline {
                        base64: BASE64.encode(bytes),
                    },
                }
            })
            .collect();
        NetworkDoc {
            version: NETWORK_SCHEMA_VERSION,
            input: InputDoc {
                channels: net.input_channels,
                height: net.input_height,
                width: net.input_width,
            },
            layers,
        }
    }
}

/// Reads a network JSON file.
pub fn load_network<T: Scalar>(path: impl AsRef<Path>) -> Result<NetworkSpec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
    let doc: NetworkDoc = serde_json::from_str(&text).map_err(|e| Error::from(e).at_path(path))?;
    doc.to_spec(path.parent().unwrap_or(Path::new(".")))
}

/// Small seeded network: two conv+pool layers followed by two conv layers.
pub fn toy_network(input: usize, seed: u64) -> Result<NetworkSpec<f32>> {
    let filters = |n: usize, ch: usize, k: usize, s: u64| -> Result<Vec<Filter<f32>>> {
        (0..n)
            .map(|o| random_filter(ch, k, k, s.wrapping_add(o as u64)))
            .collect()
    };
    let net = NetworkSpec {
        input_channels: 1,
        input_height: input,
        input_width: input,
        layers: vec![
            LayerSpec::conv_pool(
                filters(4, 1, 3, seed)?,
                ConvConfig::default(),
                PoolConfig::max(2, 2, 2)?,
                Activation::Relu,
            ),
            LayerSpec::conv_pool(
                filters(4, 4, 3, seed + 100)?,
                ConvConfig::default(),
                PoolConfig::max(2, 2, 1)?,
                Activation::Relu,
            ),
            LayerSpec::conv(
                filters(3, 4, 3, seed + 200)?,
                ConvConfig::default(),
                Activation::Relu,
            ),
            LayerSpec::conv(
                filters(2, 3, 1, seed + 300)?,
                ConvConfig::default(),
                Activation::Relu,
            ),
        ],
    };
    net.validate()?;
    Ok(net)
}
