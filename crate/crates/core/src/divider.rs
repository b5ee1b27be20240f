//! Division of one architecture into `S` narrower members.
//!
//! Channel counts scale by `1/√S` through the GCD rule, widen factors and
//! rates by `1/√S`, grouped-conv cardinality by `1/S`. Every rounding is
//! recorded in the plan's `rounding_log`.

use serde::{Deserialize, Serialize};

use crate::archspec::{ArchSpec, Family, LayerKind, LayerSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WdKind {
    #[default]
    None,
    Exponential,
    Linear,
}

impl std::str::FromStr for WdKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WdKind::None),
            "exp" | "exponential" => Ok(WdKind::Exponential),
            "linear" => Ok(WdKind::Linear),
            other => Err(Error::validation(format!("unknown weight-decay policy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdPolicy {
    pub kind: WdKind,
    pub base_wd: f64,
}

impl WdPolicy {
    pub fn new(kind: WdKind, base_wd: f64) -> Result<Self> {
        if !(base_wd > 0.0 && base_wd.is_finite()) {
            return Err(Error::validation(format!("base_wd must be positive, got {base_wd}")));
        }
        Ok(WdPolicy { kind, base_wd })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    DensenetGrowth,
    PyramidAdditional,
    DropRatio,
}

impl std::str::FromStr for RateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "densenet_growth" => Ok(RateKind::DensenetGrowth),
            "pyramid_additional" => Ok(RateKind::PyramidAdditional),
            "drop_ratio" => Ok(RateKind::DropRatio),
            other => Err(Error::validation(format!("unknown rate kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundingEntry {
    pub field: String,
    pub exact: f64,
    pub rounded: f64,
    pub channel_count: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisionPlan {
    pub s: u32,
    pub members: Vec<ArchSpec>,
    pub adjusted_wd: f64,
    pub rounding_log: Vec<RoundingEntry>,
}

impl DivisionPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Nearest even integer, never below 2. Odd integers sit exactly between two
/// even numbers and round up.
pub fn round_even(x: f64) -> u64 {
    let half = (x / 2.0 + 0.5).floor();
    2 * half.max(1.0) as u64
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn check_s(s: u32) -> Result<()> {
    if s == 0 {
        return Err(Error::validation("S must be at least 1"));
    }
    Ok(())
}

/// GCD rule: the common divisor `g` becomes `round_even(g/√S)` and every
/// channel is rescaled by the same ratio, so every result stays even.
pub fn divide_channels(channels: &[u64], s: u32) -> Result<Vec<u64>> {
    Ok(divide_channels_logged(channels, s, "channels")?.0)
}

fn divide_channels_logged(channels: &[u64], s: u32, field: &str) -> Result<(Vec<u64>, Vec<RoundingEntry>)> {
    check_s(s)?;
    if channels.is_empty() {
        return Err(Error::validation("cannot divide an empty channel list"));
    }
    if channels.contains(&0) {
        return Err(Error::validation("channel counts must be positive"));
    }
    if s == 1 {
        return Ok((channels.to_vec(), Vec::new()));
    }
    let root = (s as f64).sqrt();
    let g = channels.iter().copied().fold(0, gcd);
    let g_star = round_even(g as f64 / root);
    let out: Vec<u64> = channels.iter().map(|&c| c / g * g_star).collect();
    let log = channels
        .iter()
        .zip(&out)
        .enumerate()
        .map(|(i, (&c, &r))| RoundingEntry {
            field: format!("{field}[{i}]"),
            exact: c as f64 / root,
            rounded: r as f64,
            channel_count: true,
        })
        .collect();
    Ok((out, log))
}

/// `max(⌊w/√S + 0.4⌋, 1)`.
pub fn divide_widen(w: f64, s: u32) -> Result<u64> {
    check_s(s)?;
    Ok((w / (s as f64).sqrt() + 0.4).floor().max(1.0) as u64)
}

/// `max(⌊d/S⌋, 1)`.
pub fn divide_cardinality(cardinality: u64, s: u32) -> Result<u64> {
    check_s(s)?;
    Ok((cardinality / s as u64).max(1))
}

pub fn divide_rate(rate: f64, s: u32, kind: RateKind) -> Result<f64> {
    check_s(s)?;
    let root = (s as f64).sqrt();
    Ok(match kind {
        RateKind::DensenetGrowth => 0.5 * (2.0 * rate / root).floor(),
        RateKind::PyramidAdditional | RateKind::DropRatio => rate / root,
    })
}

pub fn divide_wd(policy: &WdPolicy, s: u32) -> Result<f64> {
    check_s(s)?;
    let s = s as f64;
    Ok(match policy.kind {
        WdKind::None => policy.base_wd,
        WdKind::Exponential => policy.base_wd * (1.0 / s - 1.0).exp(),
        WdKind::Linear => policy.base_wd / s,
    })
}

pub const EFFICIENTNET_B0_CHANNELS: [u64; 9] = [32, 16, 24, 40, 80, 112, 192, 320, 1280];

/// Published EfficientNet-B0 member widths; no single rounding rule yields
/// them, so they are tabulated.
pub fn efficientnet_preset(s: u32) -> Result<[u64; 9]> {
    match s {
        1 => Ok(EFFICIENTNET_B0_CHANNELS),
        2 => Ok([24, 12, 16, 24, 56, 80, 136, 224, 920]),
        4 => Ok([16, 12, 16, 20, 40, 56, 96, 160, 640]),
        other => Err(Error::UnsupportedPreset(format!(
            "efficientnet division is tabulated only for S in {{1, 2, 4}}, got {other}"
        ))),
    }
}

pub fn divide_arch(spec: &ArchSpec, s: u32, policy: &WdPolicy) -> Result<DivisionPlan> {
    check_s(s)?;
    spec.validate()?;
    let adjusted_wd = divide_wd(policy, s)?;
    if s == 1 {
        return Ok(DivisionPlan {
            s,
            members: vec![spec.clone()],
            adjusted_wd,
            rounding_log: Vec::new(),
        });
    }

    let mut member = spec.clone();
    let mut log = Vec::new();
    let root = (s as f64).sqrt();

    match spec.family {
        Family::ResnetCifarBottleneck | Family::SeResnetCifar => {
            let base: Vec<u64> = spec.base_channels.iter().map(|&c| c as u64).collect();
            let base = if base.is_empty() { vec![16, 32, 64] } else { base };
            let (out, entries) = divide_channels_logged(&base, s, "base_channels")?;
            member.base_channels = out.iter().map(|&c| c as u32).collect();
            log.extend(entries);
        }
        Family::Wrn | Family::ShakeShake => {
            let w = spec
                .widen_factor
                .ok_or_else(|| Error::validation("widen_factor required for this family"))?;
            let w_star = divide_widen(w, s)?;
            log.push(RoundingEntry {
                field: "widen_factor".into(),
                exact: w / root,
                rounded: w_star as f64,
                channel_count: false,
            });
            member.widen_factor = Some(w_star as f64);
        }
        Family::Resnext => {
            let d = spec.cardinality.unwrap_or(1) as u64;
            let d_star = divide_cardinality(d, s)?;
            log.push(RoundingEntry {
                field: "cardinality".into(),
                exact: d as f64 / s as f64,
                rounded: d_star as f64,
                channel_count: false,
            });
            member.cardinality = Some(d_star as u32);
        }
        Family::Densenet => {
            let g = spec
                .growth_rate
                .ok_or_else(|| Error::validation("densenet requires growth_rate"))?;
            let g_star = divide_rate(g, s, RateKind::DensenetGrowth)?;
            log.push(RoundingEntry {
                field: "growth_rate".into(),
                exact: g / root,
                rounded: g_star,
                channel_count: false,
            });
            member.growth_rate = Some(g_star);
        }
        Family::PyramidnetShakedrop => {
            // base channel (16) is left undivided
            let g = spec
                .additional_rate
                .ok_or_else(|| Error::validation("pyramidnet requires additional_rate"))?;
            member.additional_rate = Some(divide_rate(g, s, RateKind::PyramidAdditional)?);
        }
        Family::Efficientnet => {
            let preset = efficientnet_preset(s)?;
            for (i, (&orig, &new)) in EFFICIENTNET_B0_CHANNELS.iter().zip(&preset).enumerate() {
                log.push(RoundingEntry {
                    field: format!("base_channels[{i}]"),
                    exact: orig as f64 / root,
                    rounded: new as f64,
                    channel_count: true,
                });
            }
            member.base_channels = preset.iter().map(|&c| c as u32).collect();
        }
        Family::Generic => {
            let layers = spec.explicit_layers.as_deref().unwrap_or_default();
            let (new_layers, entries) = divide_layers(layers, s)?;
            member.explicit_layers = Some(new_layers);
            log.extend(entries);
        }
    }

    if let Some(p) = spec.drop_ratio {
        member.drop_ratio = Some(divide_rate(p, s, RateKind::DropRatio)?);
    }
    member.validate()?;

    let members = (0..s)
        .map(|i| ArchSpec {
            name: format!("{}-s{s}-m{i}", spec.name),
            ..member.clone()
        })
        .collect();
    Ok(DivisionPlan {
        s,
        members,
        adjusted_wd,
        rounding_log: log,
    })
}

/// Divides every inner width of an explicit layer list with the GCD rule.
/// The network input and the classifier output stay fixed.
fn divide_layers(layers: &[LayerSpec], s: u32) -> Result<(Vec<LayerSpec>, Vec<RoundingEntry>)> {
    let n = layers.len();
    // Widths at the n-1 internal boundaries; pools pass channels through.
    let mut boundary_idx = Vec::new();
    let mut widths = Vec::new();
    for (i, l) in layers.iter().enumerate().take(n.saturating_sub(1)) {
        if !l.kind.is_pool() && l.kind != LayerKind::DepthwiseConv {
            boundary_idx.push(i);
            widths.push(l.out_channels);
        }
    }
    if widths.is_empty() {
        return Ok((layers.to_vec(), Vec::new()));
    }
    let root = (s as f64).sqrt();
    let (divided, _) = divide_channels_logged(&widths, s, "layers")?;
    let mut out = layers.to_vec();
    let mut log = Vec::new();
    let mut current = out[0].in_channels;
    let mut next_width = boundary_idx.iter().zip(&divided).peekable();
    for (i, layer) in out.iter_mut().enumerate() {
        layer.in_channels = current;
        match layer.kind {
            LayerKind::AvgPool | LayerKind::GlobalPool | LayerKind::DepthwiseConv => {
                layer.out_channels = current;
                if layer.kind == LayerKind::DepthwiseConv {
                    layer.groups = current;
                }
            }
            _ => {
                if let Some(&(&idx, &w)) = next_width.peek() {
                    if idx == i {
                        log.push(RoundingEntry {
                            field: format!("layers[{i}].out_channels"),
                            exact: layer.out_channels as f64 / root,
                            rounded: w as f64,
                            channel_count: true,
                        });
                        layer.out_channels = w;
                        next_width.next();
                    }
                }
            }
        }
        layer
            .validate()
            .map_err(|e| Error::validation(format!("divided layer {i}: {e}")))?;
        current = layer.out_channels;
    }
    Ok((out, log))
}
