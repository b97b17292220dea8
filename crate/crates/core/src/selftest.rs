//! Built-in checks run by `voxbox selftest`: two-pass gradient equivalence
//! and the sub-cube memory bound, on a synthetic 16³ sphere.

use serde::Serialize;

use crate::loss::LossConfig;
use crate::model::{Model, ModelConfig};
use crate::partition::Partition;
use crate::tensor::{Element, MemoryMeter, Tape, Tensor};
use crate::train::{plain_gradients, single_tape_gradients, two_pass_gradients, Sample};
use crate::Result;

pub const GRADIENT_TOLERANCE: f64 = 1e-10;
pub const MEMORY_RATIO: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Textured ball of radius `n/3` in an `n³` volume.
pub fn phantom<T: Element>(n: usize) -> Result<Sample<T>> {
    let c = (n as f64 - 1.0) / 2.0;
    let r2 = (n as f64 / 3.0).powi(2);
    let mut img = Vec::with_capacity(n * n * n);
    let mut lbl = Vec::with_capacity(n * n * n);
    for i in 0..n * n * n {
        let (z, y, x) = ((i / (n * n)) as f64, (i / n % n) as f64, (i % n) as f64);
        let inside = (z - c).powi(2) + (y - c).powi(2) + (x - c).powi(2) <= r2;
        img.push(T::lit(if inside { 1.0 } else { -0.5 } + 0.1 * (i as f64 * 0.61).sin()));
        lbl.push(T::lit(inside as u8 as f64));
    }
    Sample::new(
        "phantom",
        Tensor::new(img, &[1, 1, n, n, n])?,
        Tensor::new(lbl, &[1, 1, n, n, n])?,
    )
}

/// Toy model used by the checks.
pub fn model_config() -> ModelConfig {
    ModelConfig::toy(8, 4, 4, 2)
}

fn flat_grads(model: &Model<f64>) -> Vec<f64> {
    model
        .parameters()
        .iter()
        .flat_map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn gradient_suite() -> Result<Vec<Check>> {
    let model = Model::<f64>::new(&model_config())?;
    let sample = phantom::<f64>(16)?;
    let loss = LossConfig::default();
    let mut out = Vec::new();
    for cubes in [1, 8] {
        let p = Partition::from_cube_count([16; 3], cubes)?;
        single_tape_gradients(&model, &sample, &p, &loss, &MemoryMeter::new())?;
        let oracle = flat_grads(&model);
        model.zero_grad();
        two_pass_gradients(&model, &sample, &p, &loss, &MemoryMeter::new())?;
        let e = rel_err(&flat_grads(&model), &oracle);
        model.zero_grad();
        out.push(Check {
            suite: "gradient",
            name: format!("two-pass vs single tape, {cubes} cube(s)"),
            passed: e <= GRADIENT_TOLERANCE,
            detail: format!("relative error {e:.3e}, tolerance {GRADIENT_TOLERANCE:e}"),
        });
    }

    let p = Partition::trivial([16; 3]);
    two_pass_gradients(&model, &sample, &p, &loss, &MemoryMeter::new())?;
    let a = flat_grads(&model);
    model.zero_grad();
    plain_gradients(&model, &sample, &loss)?;
    let b = flat_grads(&model);
    model.zero_grad();
    out.push(Check {
        suite: "gradient",
        name: "single cube vs whole volume".into(),
        passed: a == b,
        detail: format!("bit-identical: {}", a == b),
    });
    Ok(out)
}

pub fn memory_suite() -> Result<Vec<Check>> {
    let model = Model::<f64>::new(&model_config())?;
    let sample = phantom::<f64>(16)?;
    let loss = LossConfig::default();
    let peak = |cubes| -> Result<usize> {
        let m = MemoryMeter::new();
        two_pass_gradients(&model, &sample, &Partition::from_cube_count([16; 3], cubes)?, &loss, &m)?;
        model.zero_grad();
        Ok(m.peak_bytes())
    };
    let (one, eight) = (peak(1)?, peak(8)?);
    let ratio = eight as f64 / one as f64;

    let meter = MemoryMeter::new();
    let tape = Tape::with_meter(meter.clone());
    tape.set_mode(crate::tensor::Mode::Suspended);
    let ctx = crate::encoder::CubeContext::whole("phantom", [16; 3]);
    model.forward(&tape, &sample.image, &ctx)?;
    let quiet = meter.allocations() == 0 && meter.grad_allocations() == 0;

    Ok(vec![
        Check {
            suite: "memory",
            name: "peak tape bytes, 8 cubes vs 1".into(),
            passed: ratio <= MEMORY_RATIO,
            detail: format!("{eight} / {one} = {ratio:.4}, bound {MEMORY_RATIO}"),
        },
        Check {
            suite: "memory",
            name: "suspended forward records nothing".into(),
            passed: quiet,
            detail: format!(
                "{} allocations, {} gradient buffers",
                meter.allocations(),
                meter.grad_allocations()
            ),
        },
    ])
}

pub fn run() -> Result<Vec<Check>> {
    let mut checks = gradient_suite()?;
    checks.extend(memory_suite()?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_has_foreground() {
        let s = phantom::<f32>(9).unwrap();
        let fg = s.label.data().iter().filter(|&&v| v == 1.0).count();
        assert!(fg > 0 && fg < 729);
    }
}
