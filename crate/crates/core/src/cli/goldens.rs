//! Published reference values, checked against the implementation.

use serde::Serialize;

use crate::archspec::{cost_report, ArchSpec, FlopConvention};
use crate::cotrain::{lambda_schedule, TrainConfig};
use crate::datagen::{Transform, ViewPipeline};
use crate::divider::{divide_arch, divide_channels, divide_wd, round_even, WdKind, WdPolicy};
use crate::numerics::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GoldenCheck {
    pub name: String,
    pub expected: String,
    pub actual: String,
    pub status: Status,
}

impl GoldenCheck {
    fn new(name: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>, ok: bool) -> Self {
        GoldenCheck {
            name: name.into(),
            expected: expected.into(),
            actual: actual.into(),
            status: if ok { Status::Pass } else { Status::Fail },
        }
    }

    fn exact<V: PartialEq + std::fmt::Debug>(name: impl Into<String>, expected: V, actual: V) -> Self {
        let ok = expected == actual;
        Self::new(name, format!("{expected:?}"), format!("{actual:?}"), ok)
    }

    fn close(name: impl Into<String>, expected: f64, actual: f64, rel_tol: f64) -> Self {
        let ok = ((actual - expected) / expected).abs() <= rel_tol;
        Self::new(
            name,
            format!("{expected} ± {:.0}%", rel_tol * 100.0),
            format!("{actual:.4}"),
            ok,
        )
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

/// `(spec, params in M, tolerance, GFLOPs or None, tolerance)`.
fn cost_targets() -> Vec<(ArchSpec, f64, f64, Option<(f64, f64)>)> {
    vec![
        (ArchSpec::wrn(16, 8.0, 100), 11.0, 0.02, Some((1.55, 0.08))),
        (ArchSpec::wrn(28, 10.0, 100), 36.5, 0.02, Some((5.25, 0.08))),
        (ArchSpec::wrn(40, 10.0, 100), 55.9, 0.02, Some((8.08, 0.08))),
        (ArchSpec::resnet_cifar(164, 100), 1.73, 0.05, None),
        (ArchSpec::resnext(29, 8, 64, 100), 34.5, 0.03, Some((5.41, 0.08))),
    ]
}

pub fn cost_checks() -> Result<Vec<GoldenCheck>> {
    let mut out = Vec::new();
    for (spec, params, ptol, flops) in cost_targets() {
        let r = cost_report(&spec, FlopConvention::Mac)?;
        out.push(GoldenCheck::close(format!("cost {} params (M)", spec.name), params, r.params_millions(), ptol));
        if let Some((g, gtol)) = flops {
            out.push(GoldenCheck::close(format!("cost {} GFLOPs", spec.name), g, r.gflops(), gtol));
        }
    }
    Ok(out)
}

fn member(spec: &ArchSpec, s: u32) -> Result<ArchSpec> {
    let policy = WdPolicy::new(WdKind::None, 5e-4)?;
    Ok(divide_arch(spec, s, &policy)?.members.remove(0))
}

fn shake_widths(spec: &ArchSpec) -> Vec<u64> {
    let w = spec.widen_factor.unwrap_or(1.0);
    let b = &spec.base_channels;
    vec![b[0] as u64, (b[1] as f64 * w) as u64, (b[2] as f64 * w) as u64, (b[3] as f64 * w) as u64]
}

pub fn division_checks() -> Result<Vec<GoldenCheck>> {
    let mut out = vec![GoldenCheck::exact("round_even(16/sqrt 2 = 11.31)", 12, round_even(16.0 / 2f64.sqrt()))];
    for (s, want) in [(2, vec![12u64, 24, 48]), (4, vec![8, 16, 32])] {
        out.push(GoldenCheck::exact(format!("resnet channels S={s}"), want.clone(), divide_channels(&[16, 32, 64], s)?));
        let m = member(&ArchSpec::resnet_cifar(164, 100), s)?;
        let got: Vec<u64> = m.base_channels.iter().map(|&c| c as u64).collect();
        out.push(GoldenCheck::exact(format!("resnet-164 member S={s}"), want.clone(), got));
        let m = member(&ArchSpec::se_resnet_cifar(164, 100), s)?;
        let got: Vec<u64> = m.base_channels.iter().map(|&c| c as u64).collect();
        out.push(GoldenCheck::exact(format!("se-resnet-164 member S={s}"), want, got));
    }
    for (s, want) in [
        (2, vec![24u32, 12, 16, 24, 56, 80, 136, 224, 920]),
        (4, vec![16, 12, 16, 20, 40, 56, 96, 160, 640]),
    ] {
        let m = member(&ArchSpec::efficientnet_b0(1000), s)?;
        out.push(GoldenCheck::exact(format!("efficientnet-b0 channels S={s}"), want, m.base_channels));
    }
    for (s, want) in [(2, 7.0), (4, 5.0)] {
        let m = member(&ArchSpec::wrn(28, 10.0, 100), s)?;
        out.push(GoldenCheck::exact(format!("wrn-28-10 widen factor S={s}"), Some(want), m.widen_factor));
    }
    for (s, want) in [(2, 4), (4, 2)] {
        let m = member(&ArchSpec::resnext(29, 8, 64, 100), s)?;
        out.push(GoldenCheck::exact(format!("resnext-29 8x64d cardinality S={s}"), Some(want), m.cardinality));
    }
    let shake = ArchSpec::shake_shake(26, 6.0, 10);
    out.push(GoldenCheck::exact("shake-shake 26 2x96d widths", vec![16u64, 96, 192, 384], shake_widths(&shake)));
    for (s, want) in [(2, vec![16u64, 64, 128, 256]), (4, vec![16, 48, 96, 192])] {
        out.push(GoldenCheck::exact(
            format!("shake-shake 26 2x96d widths S={s}"),
            want,
            shake_widths(&member(&shake, s)?),
        ));
    }
    let dense = member(&ArchSpec::densenet(190, 40.0, 100), 2)?;
    out.push(GoldenCheck::exact("densenet growth 40 S=2", Some(28.0), dense.growth_rate));
    let pyr = member(&ArchSpec::pyramidnet(272, 200.0, 0.5, 100), 4)?;
    out.push(GoldenCheck::exact("pyramidnet additional rate 200 S=4", Some(100.0), pyr.additional_rate));
    out.push(GoldenCheck::exact("shakedrop ratio 0.5 S=4", Some(0.25), pyr.drop_ratio));
    out.push(GoldenCheck::exact("pyramidnet base channel kept", vec![16], pyr.base_channels));

    let exp = divide_wd(&WdPolicy::new(WdKind::Exponential, 5e-4)?, 2)?;
    out.push(GoldenCheck::new(
        "wd 5e-4 exponential S=2",
        "3.0327e-4",
        format!("{exp:.4e}"),
        (exp - 3.0327e-4).abs() < 5e-9,
    ));
    let lin = divide_wd(&WdPolicy::new(WdKind::Linear, 1e-4)?, 4)?;
    out.push(GoldenCheck::new("wd 1e-4 linear S=4", "2.5e-5", format!("{lin:e}"), (lin - 2.5e-5).abs() < 1e-18));
    Ok(out)
}

pub fn schedule_checks() -> Vec<GoldenCheck> {
    let cfg = TrainConfig {
        max_epoch: 300,
        lambda_cot: 0.5,
        cot_warm_epochs: 40,
        ..TrainConfig::default()
    };
    vec![GoldenCheck::exact("lambda at epoch 40 (warm 40, peak 0.5)", 0.5, lambda_schedule(40, &cfg))]
}

/// Random erasing with `p = 1` and a fixed fill must blank exactly one
/// axis-aligned rectangle per image.
pub fn cutout_check() -> Result<GoldenCheck> {
    let (n, h, w) = (16, 12, 12);
    let batch = Tensor::new(vec![n, 1, h, w], vec![1.0f64; n * h * w])?;
    let labels = vec![0; n];
    let pipe = ViewPipeline::new(
        0,
        7,
        vec![Transform::RandomErasing {
            p: 1.0,
            area: (0.02, 0.4),
            fill: Some(0.0),
        }],
    )?;
    let view = pipe.apply(&batch, &labels, 0, 0)?;
    let mut ok = 0;
    for i in 0..n {
        let img = view.features.row(i);
        let zeros: Vec<(usize, usize)> = (0..h * w).filter(|&k| img[k] == 0.0).map(|k| (k / w, k % w)).collect();
        if zeros.is_empty() {
            continue;
        }
        let (r0, r1) = (zeros.iter().map(|z| z.0).min().unwrap(), zeros.iter().map(|z| z.0).max().unwrap());
        let (c0, c1) = (zeros.iter().map(|z| z.1).min().unwrap(), zeros.iter().map(|z| z.1).max().unwrap());
        if (r1 - r0 + 1) * (c1 - c0 + 1) == zeros.len() {
            ok += 1;
        }
    }
    Ok(GoldenCheck::new(
        "random erasing p=1 acts as cutout",
        format!("{n}/{n} single rectangles"),
        format!("{ok}/{n} single rectangles"),
        ok == n,
    ))
}

/// Every published reference value reproduced by the library.
pub fn all_checks() -> Result<Vec<GoldenCheck>> {
    let mut out = cost_checks()?;
    out.extend(division_checks()?);
    out.extend(schedule_checks());
    out.push(cutout_check()?);
    Ok(out)
}

pub fn render(checks: &[GoldenCheck]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        s.push_str(&format!("{tag}  {:<width$}  expected {}  got {}\n", c.name, c.expected, c.actual));
    }
    let passed = checks.iter().filter(|c| c.passed()).count();
    s.push_str(&format!("{passed}/{} passed\n", checks.len()));
    s
}
