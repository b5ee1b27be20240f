//! Declarative architecture descriptions and the parameter/FLOP cost model.
//!
//! Counts exclude biases and batch-normalization affine parameters. Two FLOP
//! conventions are available: [`FlopConvention::Mac`] counts one
//! multiply-accumulate as one FLOP (the convention published cost tables use),
//! [`FlopConvention::Eq3`] counts `2·K²·C_in/d − 1` operations per output
//! element.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    FullyConnected,
    AvgPool,
    GlobalPool,
}

impl LayerKind {
    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::AvgPool | LayerKind::GlobalPool)
    }
}

/// One layer of an expanded network. `out_height`/`out_width` describe the
/// output feature map; for a global pool the kernel equals the input size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: u64,
    pub in_channels: u64,
    pub out_channels: u64,
    pub groups: u64,
    pub stride: u64,
    pub out_height: u64,
    pub out_width: u64,
}

impl LayerSpec {
    pub fn conv(k: u64, c_in: u64, c_out: u64, stride: u64, out_hw: u64) -> Self {
        Self::grouped_conv(k, c_in, c_out, 1, stride, out_hw)
    }

    pub fn grouped_conv(k: u64, c_in: u64, c_out: u64, groups: u64, stride: u64, out_hw: u64) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel: k,
            in_channels: c_in,
            out_channels: c_out,
            groups,
            stride,
            out_height: out_hw,
            out_width: out_hw,
        }
    }

    pub fn depthwise(k: u64, channels: u64, stride: u64, out_hw: u64) -> Self {
        LayerSpec {
            kind: LayerKind::DepthwiseConv,
            ..Self::grouped_conv(k, channels, channels, channels, stride, out_hw)
        }
    }

    pub fn fully_connected(c_in: u64, c_out: u64) -> Self {
        LayerSpec {
            kind: LayerKind::FullyConnected,
            ..Self::conv(1, c_in, c_out, 1, 1)
        }
    }

    pub fn global_pool(channels: u64, in_hw: u64) -> Self {
        LayerSpec {
            kind: LayerKind::GlobalPool,
            kernel: in_hw,
            in_channels: channels,
            out_channels: channels,
            groups: 1,
            stride: 1,
            out_height: 1,
            out_width: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kernel", self.kernel),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("groups", self.groups),
            ("stride", self.stride),
            ("out_height", self.out_height),
            ("out_width", self.out_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("layer {name} must be positive")));
            }
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::validation(format!(
                "channels must be divisible by groups: C_in={} C_out={} d={}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        match self.kind {
            LayerKind::DepthwiseConv if self.groups != self.in_channels => Err(Error::validation(
                format!("depthwise conv requires d = C_in (d={}, C_in={})", self.groups, self.in_channels),
            )),
            LayerKind::FullyConnected
                if self.kernel != 1 || self.out_height != 1 || self.out_width != 1 || self.groups != 1 =>
            {
                Err(Error::validation("fully-connected layer requires K = 1, H = W = 1, d = 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlopConvention {
    Eq3,
    #[default]
    Mac,
}

impl std::str::FromStr for FlopConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq3" => Ok(FlopConvention::Eq3),
            "mac" => Ok(FlopConvention::Mac),
            other => Err(Error::validation(format!("unknown FLOP convention `{other}`"))),
        }
    }
}

/// `K² · (C_in / d) · C_out`, biases excluded. Pools carry no parameters.
pub fn conv_params(layer: &LayerSpec) -> Result<u64> {
    layer.validate()?;
    Ok(match layer.kind {
        LayerKind::AvgPool | LayerKind::GlobalPool => 0,
        LayerKind::FullyConnected => layer.in_channels * layer.out_channels,
        LayerKind::Conv | LayerKind::DepthwiseConv => {
            layer.kernel * layer.kernel * (layer.in_channels / layer.groups) * layer.out_channels
        }
    })
}

pub fn conv_flops(layer: &LayerSpec, convention: FlopConvention) -> Result<u64> {
    layer.validate()?;
    let outputs = layer.out_height * layer.out_width * layer.out_channels;
    let k2 = layer.kernel * layer.kernel;
    if layer.kind.is_pool() {
        // same count under both conventions
        return Ok(k2 * outputs);
    }
    let fan_in = k2 * (layer.in_channels / layer.groups);
    Ok(match convention {
        FlopConvention::Mac => fan_in * outputs,
        FlopConvention::Eq3 => (2 * fan_in - 1) * outputs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    ResnetCifarBottleneck,
    SeResnetCifar,
    Wrn,
    Resnext,
    ShakeShake,
    Densenet,
    PyramidnetShakedrop,
    Efficientnet,
    Generic,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::ResnetCifarBottleneck => "resnet-cifar-bottleneck",
            Family::SeResnetCifar => "se-resnet-cifar",
            Family::Wrn => "wrn",
            Family::Resnext => "resnext",
            Family::ShakeShake => "shake-shake",
            Family::Densenet => "densenet",
            Family::PyramidnetShakedrop => "pyramidnet-shakedrop",
            Family::Efficientnet => "efficientnet",
            Family::Generic => "generic",
        }
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_input_channels() -> u32 {
    3
}

/// A network family plus its scale parameters.
///
/// Fields that do not apply to the family are `None` and ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub name: String,
    pub family: Family,
    #[serde(default)]
    pub depth: u32,
    #[serde(default)]
    pub base_channels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widen_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub additional_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_ratio: Option<f64>,
    pub input_resolution: u32,
    #[serde(default = "default_input_channels")]
    pub input_channels: u32,
    pub num_classes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_layers: Option<Vec<LayerSpec>>,
}

impl ArchSpec {
    fn bare(name: &str, family: Family, depth: u32, num_classes: u32) -> Self {
        ArchSpec {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            family,
            depth,
            base_channels: Vec::new(),
            widen_factor: None,
            cardinality: None,
            growth_rate: None,
            additional_rate: None,
            drop_ratio: None,
            input_resolution: 32,
            input_channels: 3,
            num_classes,
            explicit_layers: None,
        }
    }

    pub fn wrn(depth: u32, widen: f64, num_classes: u32) -> Self {
        ArchSpec {
            base_channels: vec![16, 16, 32, 64],
            widen_factor: Some(widen),
            ..Self::bare(&format!("wrn-{depth}-{widen}"), Family::Wrn, depth, num_classes)
        }
    }

    pub fn resnet_cifar(depth: u32, num_classes: u32) -> Self {
        ArchSpec {
            base_channels: vec![16, 32, 64],
            ..Self::bare(&format!("resnet-{depth}"), Family::ResnetCifarBottleneck, depth, num_classes)
        }
    }

    pub fn se_resnet_cifar(depth: u32, num_classes: u32) -> Self {
        ArchSpec {
            base_channels: vec![16, 32, 64],
            ..Self::bare(&format!("se-resnet-{depth}"), Family::SeResnetCifar, depth, num_classes)
        }
    }

    /// ResNeXt; `group_width` is the per-group bottleneck width of the first
    /// stage ("64d").
    pub fn resnext(depth: u32, cardinality: u32, group_width: u32, num_classes: u32) -> Self {
        ArchSpec {
            base_channels: vec![group_width],
            cardinality: Some(cardinality),
            ..Self::bare(
                &format!("resnext-{depth}-{cardinality}x{group_width}d"),
                Family::Resnext,
                depth,
                num_classes,
            )
        }
    }

    /// Shake-Shake `depth 2×(16·widen)d`; stage widths are `[16, 16w, 32w, 64w]`.
    pub fn shake_shake(depth: u32, widen: f64, num_classes: u32) -> Self {
        ArchSpec {
            base_channels: vec![16, 16, 32, 64],
            widen_factor: Some(widen),
            ..Self::bare(&format!("shake-shake-{depth}"), Family::ShakeShake, depth, num_classes)
        }
    }

    pub fn densenet(depth: u32, growth_rate: f64, num_classes: u32) -> Self {
        ArchSpec {
            growth_rate: Some(growth_rate),
            ..Self::bare(&format!("densenet-bc-{depth}"), Family::Densenet, depth, num_classes)
        }
    }

    pub fn pyramidnet(depth: u32, additional_rate: f64, drop_ratio: f64, num_classes: u32) -> Self {
        ArchSpec {
            base_channels: vec![16],
            additional_rate: Some(additional_rate),
            drop_ratio: Some(drop_ratio),
            ..Self::bare(&format!("pyramidnet-{depth}"), Family::PyramidnetShakedrop, depth, num_classes)
        }
    }

    /// EfficientNet-B0 stem and stage output widths.
    pub fn efficientnet_b0(num_classes: u32) -> Self {
        ArchSpec {
            base_channels: vec![32, 16, 24, 40, 80, 112, 192, 320, 1280],
            drop_ratio: Some(0.2),
            ..Self::bare("efficientnet-b0", Family::Efficientnet, 0, num_classes)
        }
    }

    /// Fully-connected toy network: `input → hidden… → classes`.
    pub fn mlp(name: &str, input_dim: u32, hidden: &[u32], num_classes: u32) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim as u64;
        for &h in hidden {
            layers.push(LayerSpec::fully_connected(prev, h as u64));
            prev = h as u64;
        }
        layers.push(LayerSpec::fully_connected(prev, num_classes as u64));
        ArchSpec {
            input_resolution: 1,
            input_channels: input_dim,
            explicit_layers: Some(layers),
            ..Self::bare(name, Family::Generic, hidden.len() as u32 + 1, num_classes)
        }
    }

    /// Two 3×3 conv stages (the second with stride 2), global pooling, and a
    /// classifier.
    pub fn tiny_convnet(name: &str, in_channels: u32, resolution: u32, widths: [u32; 2], num_classes: u32) -> Self {
        let r = resolution as u64;
        let r2 = r.div_ceil(2);
        let layers = vec![
            LayerSpec::conv(3, in_channels as u64, widths[0] as u64, 1, r),
            LayerSpec::conv(3, widths[0] as u64, widths[1] as u64, 2, r2),
            LayerSpec::global_pool(widths[1] as u64, r2),
            LayerSpec::fully_connected(widths[1] as u64, num_classes as u64),
        ];
        ArchSpec {
            input_resolution: resolution,
            input_channels: in_channels,
            explicit_layers: Some(layers),
            ..Self::bare(name, Family::Generic, 3, num_classes)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ArchSpec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.num_classes == 0 || self.input_resolution == 0 || self.input_channels == 0 {
            return Err(Error::validation("num_classes, input_resolution and input_channels must be positive"));
        }
        if self.base_channels.contains(&0) {
            return Err(Error::validation("base_channels must be positive"));
        }
        if let Some(p) = self.drop_ratio {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("drop_ratio {p} outside [0, 1]")));
            }
        }
        let positive_real = [
            ("widen_factor", self.widen_factor),
            ("growth_rate", self.growth_rate),
            ("additional_rate", self.additional_rate),
        ];
        for (name, v) in positive_real {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::validation(format!("{name} must be positive, got {v}")));
                }
            }
        }
        match self.family {
            Family::Generic => {
                let layers = self
                    .explicit_layers
                    .as_ref()
                    .ok_or_else(|| Error::validation("generic family requires explicit_layers"))?;
                if layers.is_empty() {
                    return Err(Error::validation("explicit_layers must not be empty"));
                }
                for (i, l) in layers.iter().enumerate() {
                    l.validate()
                        .map_err(|e| Error::validation(format!("layer {i}: {e}")))?;
                }
            }
            _ if self.explicit_layers.is_some() => {
                return Err(Error::validation("explicit_layers is only allowed for the generic family"));
            }
            Family::ResnetCifarBottleneck | Family::SeResnetCifar | Family::Resnext => {
                self.blocks_per_stage(9, 2)?;
            }
            Family::Wrn => {
                self.blocks_per_stage(6, 4)?;
                if self.widen_factor.is_none() {
                    return Err(Error::validation("wrn requires widen_factor"));
                }
            }
            _ => {}
        }
        if self.family == Family::Resnext && self.cardinality.unwrap_or(0) == 0 {
            return Err(Error::validation("resnext requires a positive cardinality"));
        }
        Ok(())
    }

    /// Solves `depth = step·n + offset` for the number of blocks per stage.
    fn blocks_per_stage(&self, step: u32, offset: u32) -> Result<u32> {
        if self.depth < offset + step || (self.depth - offset) % step != 0 {
            return Err(Error::validation(format!(
                "{} depth {} does not satisfy depth = {step}n + {offset}",
                self.family.as_str(),
                self.depth
            )));
        }
        Ok((self.depth - offset) / step)
    }

    fn stage_bases(&self, default: &[u32]) -> Vec<u64> {
        let src = if self.base_channels.is_empty() {
            default
        } else {
            &self.base_channels
        };
        src.iter().map(|&c| c as u64).collect()
    }
}

/// Expands a family preset into its full layer list.
pub fn expand(spec: &ArchSpec) -> Result<Vec<LayerSpec>> {
    spec.validate()?;
    match spec.family {
        Family::Generic => Ok(spec.explicit_layers.clone().unwrap_or_default()),
        Family::Wrn => Ok(expand_wrn(spec)?),
        Family::ResnetCifarBottleneck => Ok(expand_resnet_bottleneck(spec)?),
        Family::Resnext => Ok(expand_resnext(spec)?),
        other => Err(Error::UnsupportedFamily(other.as_str().to_string())),
    }
}

fn expand_wrn(spec: &ArchSpec) -> Result<Vec<LayerSpec>> {
    let n = spec.blocks_per_stage(6, 4)?;
    let w = spec.widen_factor.unwrap_or(1.0);
    let bases = spec.stage_bases(&[16, 16, 32, 64]);
    if bases.len() != 4 {
        return Err(Error::validation("wrn base_channels must list [stem, stage1, stage2, stage3]"));
    }
    let widths: Vec<u64> = bases[1..].iter().map(|&b| (b as f64 * w).round() as u64).collect();
    let mut hw = spec.input_resolution as u64;
    let mut layers = vec![LayerSpec::conv(3, spec.input_channels as u64, bases[0], 1, hw)];
    let mut c_in = bases[0];
    for (stage, &c_out) in widths.iter().enumerate() {
        for block in 0..n {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            hw = hw.div_ceil(stride);
            layers.push(LayerSpec::conv(3, c_in, c_out, stride, hw));
            layers.push(LayerSpec::conv(3, c_out, c_out, 1, hw));
            if c_in != c_out || stride != 1 {
                layers.push(LayerSpec::conv(1, c_in, c_out, stride, hw));
            }
            c_in = c_out;
        }
    }
    layers.push(LayerSpec::global_pool(c_in, hw));
    layers.push(LayerSpec::fully_connected(c_in, spec.num_classes as u64));
    Ok(layers)
}

/// Pre-activation bottleneck ResNet for 32×32 inputs, expansion 4.
fn expand_resnet_bottleneck(spec: &ArchSpec) -> Result<Vec<LayerSpec>> {
    let n = spec.blocks_per_stage(9, 2)?;
    let bases = spec.stage_bases(&[16, 32, 64]);
    let mut hw = spec.input_resolution as u64;
    let mut layers = vec![LayerSpec::conv(3, spec.input_channels as u64, bases[0], 1, hw)];
    let mut c_in = bases[0];
    for (stage, &planes) in bases.iter().enumerate() {
        let c_out = planes * 4;
        for block in 0..n {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let in_hw = hw;
            hw = hw.div_ceil(stride);
            layers.push(LayerSpec::conv(1, c_in, planes, 1, in_hw));
            layers.push(LayerSpec::conv(3, planes, planes, stride, hw));
            layers.push(LayerSpec::conv(1, planes, c_out, 1, hw));
            if c_in != c_out || stride != 1 {
                layers.push(LayerSpec::conv(1, c_in, c_out, stride, hw));
            }
            c_in = c_out;
        }
    }
    layers.push(LayerSpec::global_pool(c_in, hw));
    layers.push(LayerSpec::fully_connected(c_in, spec.num_classes as u64));
    Ok(layers)
}

/// ResNeXt for 32×32 inputs: 64-channel stem, stage outputs 256/512/1024,
/// grouped bottleneck width `cardinality · group_width · 2^stage`.
fn expand_resnext(spec: &ArchSpec) -> Result<Vec<LayerSpec>> {
    let n = spec.blocks_per_stage(9, 2)?;
    let card = spec.cardinality.unwrap_or(1) as u64;
    let group_width = spec.stage_bases(&[64])[0];
    let mut hw = spec.input_resolution as u64;
    let stem = 64;
    let mut layers = vec![LayerSpec::conv(3, spec.input_channels as u64, stem, 1, hw)];
    let mut c_in = stem;
    for stage in 0..3u32 {
        let width = card * group_width << stage;
        let c_out = 256u64 << stage;
        for block in 0..n {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let in_hw = hw;
            hw = hw.div_ceil(stride);
            layers.push(LayerSpec::conv(1, c_in, width, 1, in_hw));
            layers.push(LayerSpec::grouped_conv(3, width, width, card, stride, hw));
            layers.push(LayerSpec::conv(1, width, c_out, 1, hw));
            if c_in != c_out || stride != 1 {
                layers.push(LayerSpec::conv(1, c_in, c_out, stride, hw));
            }
            c_in = c_out;
        }
    }
    layers.push(LayerSpec::global_pool(c_in, hw));
    layers.push(LayerSpec::fully_connected(c_in, spec.num_classes as u64));
    Ok(layers)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub total_params: u64,
    pub total_flops: u64,
    pub convention: FlopConvention,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    /// Aligned plain-text table, one row per layer plus a total row.
    pub fn to_table(&self, layers: &[LayerSpec]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {} (convention: {:?}; biases and batch-norm parameters excluded)",
            self.name, self.convention
        );
        let _ = writeln!(
            out,
            "{:>5}  {:<16} {:>3} {:>6} {:>6} {:>5} {:>5} {:>12} {:>16}",
            "idx", "kind", "K", "C_in", "C_out", "d", "HxW", "params", "flops"
        );
        for (cost, layer) in self.per_layer.iter().zip(layers) {
            let kind = serde_json::to_value(layer.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{:>5}  {:<16} {:>3} {:>6} {:>6} {:>5} {:>5} {:>12} {:>16}",
                cost.index,
                kind,
                layer.kernel,
                layer.in_channels,
                layer.out_channels,
                layer.groups,
                layer.out_height,
                cost.params,
                cost.flops
            );
        }
        let _ = writeln!(
            out,
            "total: {} params ({:.3} M), {} flops ({:.3} G)",
            self.total_params,
            self.params_millions(),
            self.total_flops,
            self.gflops()
        );
        out
    }
}

pub fn cost_report(spec: &ArchSpec, convention: FlopConvention) -> Result<CostReport> {
    let layers = expand(spec)?;
    cost_of_layers(&spec.name, &layers, convention)
}

pub fn cost_of_layers(name: &str, layers: &[LayerSpec], convention: FlopConvention) -> Result<CostReport> {
    let per_layer = layers
        .iter()
        .enumerate()
        .map(|(index, l)| {
            Ok(LayerCost {
                index,
                params: conv_params(l)?,
                flops: conv_flops(l, convention)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport {
        name: name.to_string(),
        total_params: per_layer.iter().map(|c| c.params).sum(),
        total_flops: per_layer.iter().map(|c| c.flops).sum(),
        convention,
        per_layer,
    })
}
