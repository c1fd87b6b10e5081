//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of every backward rule it verifies. A function under test returns a value
//! of any shape; the harness contracts it with a fixed random tensor to get a
//! scalar, which exercises every output element with a distinct weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tape::{BatchNormMode, Conv2dSpec, Pool2dSpec, Tape, VarId};
use crate::tensor::Tensor;

/// Step size for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Largest relative error accepted by the suites.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradient magnitude below which errors are measured absolutely.
///
/// f64 central differences with h = 1e-5 carry roughly 1e-10 of round-off,
/// so comparing entries much smaller than this purely relatively measures
/// noise rather than the backward rule.
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    /// (input index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            worst: None,
        }
    }
}

fn projected(
    tape: &mut Tape,
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[VarId]) -> Result<VarId>,
    projection: &mut Option<Vec<f64>>,
) -> Result<(Vec<VarId>, VarId)> {
    let ids = inputs
        .iter()
        .map(|t| tape.leaf(t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(tape, &ids)?;
    let n = tape.value(out).len();
    let proj = projection.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x005e_ed0f_9a1d);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    });
    let weighted = tape.mask_mul(out, proj.clone())?;
    let loss = tape.sum(weighted)?;
    Ok((ids, loss))
}

/// Compares tape gradients of `f` against central differences for every input element.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut projection = None;
    let mut tape = Tape::new();
    let (ids, loss) = projected(&mut tape, inputs, &f, &mut projection)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&ids)
        .map(|(t, &id)| {
            tape.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + cfg.step;
            let plus = eval_scalar(&probe, &f, &mut projection)?;
            probe[i].data_mut()[e] = orig - cfg.step;
            let minus = eval_scalar(&probe, &f, &mut projection)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[i][e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}

fn eval_scalar(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[VarId]) -> Result<VarId>,
    projection: &mut Option<Vec<f64>>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, loss) = projected(&mut tape, inputs, f, projection)?;
    Ok(tape.value(loss)[0])
}

/// One named gradient check, parameterized by a seed.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCase").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    pub seeds: usize,
    pub report: GradCheckReport,
    pub passed: bool,
}

/// Runs every case for seeds `0..seeds` and aggregates the worst error per case.
pub fn run_suite(cases: &[GradCase], seeds: u64, tolerance: f64) -> Result<Vec<SuiteRow>> {
    cases
        .iter()
        .map(|case| {
            let mut agg = GradCheckReport::default();
            for seed in 0..seeds {
                agg.merge(&(case.run)(seed)?);
            }
            Ok(SuiteRow {
                name: case.name,
                seeds: seeds as usize,
                passed: agg.passes(tolerance),
                report: agg,
            })
        })
        .collect()
}

/// Standard-normal tensor from a seeded stream.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[VarId]) -> Result<VarId>) -> Result<GradCheckReport> {
    check_gradients(&inputs, f, GradCheckConfig::default())
}

fn conv_case(seed: u64, salt: u64, x: [usize; 4], w: [usize; 4], spec: Conv2dSpec) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, salt);
    let inputs = vec![random_tensor(&mut rng, &x), random_tensor(&mut rng, &w)];
    check(inputs, move |t, v| t.conv2d(v[0], v[1], spec))
}

/// Gradient checks for every tape primitive, plus one composite chain.
pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            run: |s| {
                let mut r = rng_for(s, 1);
                check(vec![random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[3, 4])], |t, v| {
                    t.add(v[0], v[1])
                })
            },
        },
        GradCase {
            name: "mul",
            run: |s| {
                let mut r = rng_for(s, 2);
                check(vec![random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[3, 4])], |t, v| {
                    t.mul(v[0], v[1])
                })
            },
        },
        GradCase {
            name: "scale_sum",
            run: |s| {
                let mut r = rng_for(s, 3);
                check(vec![random_tensor(&mut r, &[5])], |t, v| {
                    let y = t.scale(v[0], -1.7)?;
                    t.sum(y)
                })
            },
        },
        GradCase {
            name: "add_n",
            run: |s| {
                let mut r = rng_for(s, 4);
                let xs = (0..3).map(|_| random_tensor(&mut r, &[2, 3])).collect();
                check(xs, |t, v| t.add_n(v))
            },
        },
        GradCase {
            name: "matmul",
            run: |s| {
                let mut r = rng_for(s, 5);
                check(vec![random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[4, 2])], |t, v| {
                    t.matmul(v[0], v[1])
                })
            },
        },
        GradCase {
            name: "add_bias",
            run: |s| {
                let mut r = rng_for(s, 6);
                check(vec![random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[4])], |t, v| {
                    t.add_bias(v[0], v[1])
                })
            },
        },
        GradCase {
            name: "relu",
            run: |s| {
                let mut r = rng_for(s, 7);
                check(vec![random_tensor(&mut r, &[2, 3, 4])], |t, v| t.relu(v[0]))
            },
        },
        GradCase {
            name: "conv2d_3x3_pad1",
            run: |s| conv_case(s, 8, [2, 3, 5, 5], [4, 3, 3, 3], Conv2dSpec { padding: 1, ..Default::default() }),
        },
        GradCase {
            name: "conv2d_stride2",
            run: |s| {
                conv_case(
                    s,
                    9,
                    [2, 2, 6, 6],
                    [3, 2, 3, 3],
                    Conv2dSpec {
                        stride: 2,
                        padding: 1,
                        ..Default::default()
                    },
                )
            },
        },
        GradCase {
            name: "conv2d_dilated",
            run: |s| {
                conv_case(
                    s,
                    10,
                    [2, 2, 6, 6],
                    [2, 2, 3, 3],
                    Conv2dSpec {
                        padding: 2,
                        dilation: 2,
                        ..Default::default()
                    },
                )
            },
        },
        GradCase {
            name: "conv2d_depthwise",
            run: |s| {
                conv_case(
                    s,
                    11,
                    [2, 3, 5, 5],
                    [3, 1, 5, 5],
                    Conv2dSpec {
                        padding: 2,
                        groups: 3,
                        ..Default::default()
                    },
                )
            },
        },
        GradCase {
            name: "conv2d_pointwise",
            run: |s| conv_case(s, 12, [2, 3, 4, 4], [5, 3, 1, 1], Conv2dSpec::default()),
        },
        GradCase {
            name: "max_pool2d",
            run: |s| {
                let mut r = rng_for(s, 13);
                check(vec![random_tensor(&mut r, &[2, 2, 5, 5])], |t, v| {
                    let a = t.max_pool2d(v[0], Pool2dSpec::three_by_three(1))?;
                    let b = t.max_pool2d(a, Pool2dSpec::three_by_three(2))?;
                    Ok(b)
                })
            },
        },
        GradCase {
            name: "avg_pool2d",
            run: |s| {
                let mut r = rng_for(s, 14);
                check(vec![random_tensor(&mut r, &[2, 2, 5, 5])], |t, v| {
                    let a = t.avg_pool2d(v[0], Pool2dSpec::three_by_three(1))?;
                    t.avg_pool2d(a, Pool2dSpec::three_by_three(2))
                })
            },
        },
        GradCase {
            name: "batch_norm_batch_affine",
            run: |s| {
                let mut r = rng_for(s, 15);
                let inputs = vec![
                    random_tensor(&mut r, &[3, 2, 3, 3]),
                    random_tensor(&mut r, &[2]),
                    random_tensor(&mut r, &[2]),
                ];
                check(inputs, |t, v| {
                    Ok(t.batch_norm(v[0], Some((v[1], v[2])), BatchNormMode::Batch { eps: 1e-5 })?.0)
                })
            },
        },
        GradCase {
            name: "batch_norm_batch_plain",
            run: |s| {
                let mut r = rng_for(s, 16);
                check(vec![random_tensor(&mut r, &[3, 2, 3, 3])], |t, v| {
                    Ok(t.batch_norm(v[0], None, BatchNormMode::Batch { eps: 1e-5 })?.0)
                })
            },
        },
        GradCase {
            name: "batch_norm_fixed",
            run: |s| {
                let mut r = rng_for(s, 17);
                let inputs = vec![
                    random_tensor(&mut r, &[2, 2, 3, 3]),
                    random_tensor(&mut r, &[2]),
                    random_tensor(&mut r, &[2]),
                ];
                check(inputs, |t, v| {
                    let mode = BatchNormMode::Fixed {
                        mean: &[0.3, -0.2],
                        var: &[1.5, 0.7],
                        eps: 1e-5,
                    };
                    Ok(t.batch_norm(v[0], Some((v[1], v[2])), mode)?.0)
                })
            },
        },
        GradCase {
            name: "concat_slice_channels",
            run: |s| {
                let mut r = rng_for(s, 18);
                let inputs = vec![random_tensor(&mut r, &[2, 2, 3, 3]), random_tensor(&mut r, &[2, 3, 3, 3])];
                check(inputs, |t, v| {
                    let c = t.concat_channels(&[v[0], v[1]])?;
                    let mid = t.slice_channels(c, 1, 3)?;
                    t.relu(mid)
                })
            },
        },
        GradCase {
            name: "crop",
            run: |s| {
                let mut r = rng_for(s, 19);
                check(vec![random_tensor(&mut r, &[2, 2, 4, 4])], |t, v| t.crop(v[0], 1, 1))
            },
        },
        GradCase {
            name: "softmax",
            run: |s| {
                let mut r = rng_for(s, 20);
                check(vec![random_tensor(&mut r, &[6])], |t, v| t.softmax(v[0]))
            },
        },
        GradCase {
            name: "cross_entropy",
            run: |s| {
                let mut r = rng_for(s, 21);
                let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
                check(vec![random_tensor(&mut r, &[4, 5])], move |t, v| t.cross_entropy(v[0], &labels))
            },
        },
        GradCase {
            name: "weighted_sum",
            run: |s| {
                let mut r = rng_for(s, 22);
                let inputs = vec![
                    random_tensor(&mut r, &[3]),
                    random_tensor(&mut r, &[2, 3]),
                    random_tensor(&mut r, &[2, 3]),
                ];
                check(inputs, |t, v| t.weighted_sum(v[0], &[Some(v[1]), None, Some(v[2])], &[2, 3]))
            },
        },
        GradCase {
            name: "mask_mul",
            run: |s| {
                let mut r = rng_for(s, 23);
                let mask: Vec<f64> = (0..12).map(|_| if r.random_bool(0.5) { 2.0 } else { 0.0 }).collect();
                check(vec![random_tensor(&mut r, &[3, 4])], move |t, v| t.mask_mul(v[0], mask.clone()))
            },
        },
        GradCase {
            name: "scale_samples",
            run: |s| {
                let mut r = rng_for(s, 24);
                check(vec![random_tensor(&mut r, &[3, 2, 2, 2])], |t, v| {
                    t.scale_samples(v[0], vec![0.0, 1.25, 1.25])
                })
            },
        },
        GradCase {
            name: "global_avg_pool",
            run: |s| {
                let mut r = rng_for(s, 25);
                check(vec![random_tensor(&mut r, &[2, 3, 3, 3])], |t, v| t.global_avg_pool(v[0]))
            },
        },
        GradCase {
            name: "chain_conv_bn_relu_pool_linear_ce",
            run: |s| {
                fn pre_relu(t: &mut Tape, v: &[VarId]) -> Result<VarId> {
                    let c = t.conv2d(v[0], v[1], Conv2dSpec { padding: 1, ..Default::default() })?;
                    Ok(t.batch_norm(c, Some((v[2], v[3])), BatchNormMode::Batch { eps: 1e-5 })?.0)
                }
                let mut r = rng_for(s, 26);
                let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
                // Redraw until no ReLU input sits close enough to the kink for
                // a finite-difference step to straddle it.
                let inputs = loop {
                    let inputs = vec![
                        random_tensor(&mut r, &[3, 2, 6, 6]),
                        random_tensor(&mut r, &[4, 2, 3, 3]),
                        random_tensor(&mut r, &[4]),
                        random_tensor(&mut r, &[4]),
                        random_tensor(&mut r, &[4, 4]),
                        random_tensor(&mut r, &[4]),
                    ];
                    let mut t = Tape::new();
                    let ids = inputs[..4]
                        .iter()
                        .map(|x| t.constant(x.shape().to_vec(), x.data().to_vec()))
                        .collect::<Result<Vec<_>>>()?;
                    let b = pre_relu(&mut t, &ids)?;
                    if t.value(b).iter().all(|x| x.abs() > 1e-3) {
                        break inputs;
                    }
                };
                check(inputs, move |t, v| {
                    let b = pre_relu(t, v)?;
                    let a = t.relu(b)?;
                    let p = t.avg_pool2d(a, Pool2dSpec::three_by_three(2))?;
                    let g = t.global_avg_pool(p)?;
                    let l = t.matmul(g, v[4])?;
                    let l = t.add_bias(l, v[5])?;
                    t.cross_entropy(l, &labels)
                })
            },
        },
    ]
}
