//! Finite-difference sweep over every differentiable op and a full network, in 64-bit mode.

use crate::autograd::gradcheck::{finite_diff_check, FdOptions, FdReport};
use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::Result;
use crate::model::{build_model, segmentation_loss, Arch, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Elements probed per parameter tensor in the whole-network case.
const NETWORK_PROBES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub tolerance: f64,
    pub report: FdReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_err <= self.tolerance
    }
}

fn randn(dims: [usize; 4], rng: &mut Rng) -> Tensor<f64> {
    let len = dims.iter().product();
    Tensor::from_vec(dims, (0..len).map(|_| rng.normal()).collect()).expect("dims match")
}

fn bits(dims: [usize; 4], rng: &mut Rng) -> Tensor<f64> {
    let len = dims.iter().product();
    Tensor::from_vec(dims, (0..len).map(|_| rng.below(2) as f64).collect()).expect("dims match")
}

/// Reduces an op output to a scalar through fixed random weights, so every output
/// element carries a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let dims = g.value(y).dims();
    let w = randn(dims, &mut Rng::new(seed ^ 0xFD));
    g.weighted_sum(y, w)
}

fn op_case<F>(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, build: F) -> Result<CaseResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = FdOptions {
        h: FD_STEP,
        max_elems_per_input: None,
        seed,
    };
    let report = finite_diff_check(|g, v| {
        let y = build(g, v)?;
        if g.value(y).len() == 1 {
            Ok(y)
        } else {
            project(g, y, seed)
        }
    }, &inputs, &opts)?;
    Ok(CaseResult {
        name: name.to_string(),
        seed,
        tolerance: OP_TOLERANCE,
        report,
    })
}

/// Every single-op case for one seed.
pub fn op_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for d in [1, 2, 4] {
        let inputs = vec![randn([2, 2, 9, 9], &mut rng), randn([3, 2, 3, 3], &mut rng), randn([3, 1, 1, 1], &mut rng)];
        out.push(op_case(&format!("conv2d_d{d}"), seed, inputs, |g, v| {
            g.conv2d(v[0], v[1], v[2], ConvSpec::same3(d))
        })?);
    }
    let inputs = vec![randn([1, 2, 8, 8], &mut rng), randn([2, 2, 3, 3], &mut rng), randn([2, 1, 1, 1], &mut rng)];
    out.push(op_case("conv2d_stride2", seed, inputs, |g, v| {
        g.conv2d(v[0], v[1], v[2], ConvSpec { stride: 2, padding: 1, dilation: 1 })
    })?);
    let inputs = vec![randn([2, 3, 3, 3], &mut rng), randn([3, 2, 2, 2], &mut rng), randn([2, 1, 1, 1], &mut rng)];
    out.push(op_case("transposed_conv2d", seed, inputs, |g, v| g.transposed_conv2d(v[0], v[1], v[2]))?);
    let inputs = vec![randn([2, 2, 6, 6], &mut rng)];
    out.push(op_case("maxpool2d", seed, inputs, |g, v| g.maxpool2d(v[0]))?);
    let slopes = Tensor::from_vec([3, 1, 1, 1], (0..3).map(|_| rng.uniform(0.05, 0.5)).collect())?;
    let inputs = vec![randn([2, 3, 4, 4], &mut rng), slopes];
    out.push(op_case("prelu", seed, inputs, |g, v| g.prelu(v[0], v[1]))?);
    let inputs = vec![randn([2, 2, 4, 4], &mut rng).map(|z| 3.0 * z)];
    out.push(op_case("sigmoid", seed, inputs, |g, v| Ok(g.sigmoid(v[0])))?);
    let inputs = vec![randn([2, 2, 4, 5], &mut rng)];
    out.push(op_case("bilinear_upsample2d", seed, inputs, |g, v| Ok(g.bilinear_upsample2d(v[0])))?);
    let inputs = vec![randn([2, 2, 4, 4], &mut rng), randn([2, 3, 4, 4], &mut rng)];
    out.push(op_case("concat", seed, inputs, |g, v| g.concat_channels(v[0], v[1]))?);
    let inputs = vec![randn([2, 3, 4, 4], &mut rng), randn([2, 3, 4, 4], &mut rng)];
    out.push(op_case("residual_add", seed, inputs, |g, v| g.residual_add(v[0], v[1]))?);
    let target = bits([2, 1, 5, 5], &mut rng);
    let inputs = vec![randn([2, 1, 5, 5], &mut rng).map(|z| 2.0 * z)];
    out.push(op_case("bce_loss", seed, inputs, move |g, v| g.bce_loss(v[0], &target))?);
    Ok(out)
}

/// Dilated U-Net at base width 4 on a 16×16 input: deep-supervised loss against a random
/// mask, differentiated with respect to the input and a sample of every parameter tensor.
pub fn network_case(seed: u64) -> Result<CaseResult> {
    let cfg = ModelConfig {
        base_channels: 4,
        input_size: (16, 16),
        ..ModelConfig::new(Arch::Dilated)
    };
    let model = build_model(&cfg, seed)?.cast::<f64>();
    let mut rng = Rng::new(seed ^ 0x0E7);
    let x = Tensor::from_vec([2, 1, 16, 16], (0..512).map(|_| rng.next_f64()).collect())?;
    let target = bits([2, 1, 16, 16], &mut rng);
    let mut inputs = vec![x];
    inputs.extend(model.params.values().cloned());
    let n_params = model.params.len();
    let opts = FdOptions {
        h: FD_STEP,
        max_elems_per_input: Some(NETWORK_PROBES),
        seed,
    };
    let report = finite_diff_check(
        |g, v| {
            let out = model.forward_with(g, &v[1..=n_params], v[0])?;
            segmentation_loss(g, &out, &target, 1.0)
        },
        &inputs,
        &opts,
    )?;
    Ok(CaseResult {
        name: "dilated_unet_b4_16x16".to_string(),
        seed,
        tolerance: NETWORK_TOLERANCE,
        report,
    })
}

/// All op cases and the network case for each seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for &s in seeds {
        out.extend(op_cases(s)?);
        out.push(network_case(s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_cases_pass_for_one_seed() {
        let cases = op_cases(11).unwrap();
        assert_eq!(cases.len(), 12);
        for c in &cases {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn network_case_passes_for_one_seed() {
        let c = network_case(11).unwrap();
        assert!(c.report.checked > 50, "{c:?}");
        assert!(c.passed(), "{c:?}");
    }

    #[test]
    fn failing_tolerance_is_reported() {
        let mut c = op_cases(3).unwrap().remove(0);
        c.tolerance = -1.0;
        assert!(!c.passed());
    }
}
