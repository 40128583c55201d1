//! Central finite-difference verification of tape gradients in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per parameter, chosen at random.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose probes crossed a ReLU or max-pool boundary and were
    /// re-evaluated with the branches of the unperturbed pass.
    pub frozen: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol && self.params.iter().all(|p| p.checked > 0)
    }
}

/// Relative error between analytic and numeric derivatives. `floor` keeps
/// near-zero entries from dominating the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `graph` against central differences for
/// every named parameter. `graph` must return a scalar.
pub fn grad_check<F>(params: &[(String, Tensor<f64>)], graph: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |mut tape: Tape<f64>, values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        Ok((tape.value(out).data()[0], tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let base_sig = tape.branch_signature();
    let base_branches = tape.branches();
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).expect("param grad").to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (p, (name, _)) in params.iter().enumerate() {
        let n = values[p].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        let mut frozen = 0;
        let step = opts.step;
        for &i in &coords {
            let orig = values[p].data()[i];
            let mut probe = |x: f64, replay: bool| -> Result<(f64, u64)> {
                values[p].data_mut()[i] = x;
                let tape = if replay { Tape::replaying(base_branches.clone()) } else { Tape::new() };
                let r = run(tape, &values);
                values[p].data_mut()[i] = orig;
                r
            };
            let (mut plus, sig_plus) = probe(orig + step, false)?;
            let (mut minus, sig_minus) = probe(orig - step, false)?;
            if sig_plus != base_sig || sig_minus != base_sig {
                frozen += 1;
                plus = probe(orig + step, true)?.0;
                minus = probe(orig - step, true)?.0;
            }
            numeric.push((i, (plus - minus) / (2.0 * step)));
        }
        let scale = numeric.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
        let floor = (1e-2 * scale).max(1e-8);
        let max_rel_error = numeric
            .iter()
            .map(|&(i, num)| relative_error(analytic[p][i], num, floor))
            .fold(0.0, f64::max);
        report.params.push(ParamReport {
            name: name.clone(),
            max_rel_error,
            checked: numeric.len(),
            frozen,
        });
    }
    Ok(report)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = super::numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

// A fixed random projection turns any tensor output into a scalar with a
// non-uniform upstream gradient.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = t.shape(y).to_vec();
    let r = t.constant(random(&shape, &mut rng));
    let m = t.mul(y, r)?;
    t.sum(m)
}

/// Checks every differentiable tape op on random inputs drawn from `seed`,
/// returning one report per op.
pub fn op_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut reports = Vec::new();
    let mut check = |op: &str, params: Vec<(&str, Tensor<f64>)>, graph: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| -> Result<()> {
        let named: Vec<(String, Tensor<f64>)> = params.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        let opts = GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        };
        reports.push((op.to_string(), grad_check(&named, graph, &opts)?));
        Ok(())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, 4, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    check("conv3d", vec![("x", x), ("w", w), ("b", b)], &|t, v| {
        let y = t.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1])?;
        project(t, y, seed)
    })?;
    {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&[2, 4, 6, 5], &mut rng);
        check("maxpool3d", vec![("x", x.clone())], &|t, v| {
            let y = t.maxpool3d(v[0], [2, 2, 2], [2, 2, 2])?;
            project(t, y, seed)
        })?;
        check("trilinear_upsample", vec![("x", x.clone())], &|t, v| {
            let y = t.trilinear_upsample(v[0], [5, 9, 6])?;
            project(t, y, seed)
        })?;
        check("sigmoid", vec![("x", x.clone())], &|t, v| {
            let y = t.sigmoid(v[0])?;
            project(t, y, seed)
        })?;
        check("relu", vec![("x", x.clone())], &|t, v| {
            let y = t.relu(v[0])?;
            project(t, y, seed)
        })?;
        check("mean_axis/broadcast_to/narrow", vec![("x", x.clone())], &|t, v| {
            let m = t.mean_axis(v[0], 1)?;
            let b = t.broadcast_to(m, &[2, 4, 6, 5])?;
            let n = t.narrow(b, 2, 1, 3)?;
            project(t, n, seed)
        })?;
        let w = random(&[2, 3, 1, 2, 2], &mut rng);
        let b = random(&[3], &mut rng);
        check("conv_transpose3d", vec![("x", x.clone()), ("w", w), ("b", b)], &|t, v| {
            let y = t.conv_transpose3d(v[0], v[1], Some(v[2]), [1, 2, 2])?;
            project(t, y, seed)
        })?;
        let ws = random(&[3, 2, 1, 3, 3], &mut rng);
        let wt = random(&[3, 3, 3, 1, 1], &mut rng);
        check("sep_conv3d", vec![("x", x.clone()), ("ws", ws), ("wt", wt)], &|t, v| {
            let y = t.sep_conv3d(v[0], v[1], None, v[2], None, [2, 2, 1], [1, 1, 1])?;
            project(t, y, seed)
        })?;
        let a = random(&[3, 4], &mut rng);
        let bm = random(&[4, 5], &mut rng);
        check("matmul", vec![("a", a.clone()), ("b", bm)], &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        })?;
        let c = random(&[3, 4], &mut rng);
        check("sub/mul/concat/reshape/scale", vec![("a", a.clone()), ("c", c)], &|t, v| {
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(s, v[0])?;
            let k = t.concat(&[m, v[1]], 1)?;
            let r = t.reshape(k, &[6, 4])?;
            let y = t.scale(r, 0.7)?;
            project(t, y, seed)
        })?;
        let x1 = random(&[3, 4], &mut rng);
        let am = random(&[4, 5, 2], &mut rng);
        let x2 = random(&[3, 2], &mut rng);
        let bb = random(&[5], &mut rng);
        check("bilinear", vec![("x1", x1), ("A", am), ("x2", x2), ("b", bb)], &|t, v| {
            let y = t.bilinear(v[0], v[1], v[2], v[3])?;
            project(t, y, seed)
        })?;
        let sig = random(&[2, 9], &mut rng);
        let k = random(&[3, 2, 3], &mut rng);
        check("conv1d/maxpool1d", vec![("x", sig), ("w", k)], &|t, v| {
            let y = t.conv1d(v[0], v[1], None, 2, 1)?;
            let p = t.maxpool1d(y, 2, 2)?;
            project(t, p, seed)
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = [4, 5];
        let n = 20;
        // Entries well above the step keep the O(h^2) truncation term small.
        let p = Tensor::new(&shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
        let q = Tensor::new(&shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
        check("normalize_to_distribution/kldiv", vec![("p", p), ("q", q)], &|t, v| {
            let pn = t.normalize_to_distribution(v[0])?;
            let qn = t.normalize_to_distribution(v[1])?;
            t.kldiv(pn, qn, 1e-7)
        })?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_is_exact() {
        let x = Tensor::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap();
        let report = grad_check(&[("x".into(), x)], |t, v| t.sum(v[0]), &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn op_suite_passes_on_five_seeds() {
        for seed in 0..5 {
            let reports = op_suite(seed).unwrap();
            assert_eq!(reports.len(), 13);
            for (op, report) in reports {
                assert!(report.passes(1e-4), "{op}: {report:?}");
            }
        }
    }

    #[test]
    fn conv_relu_sum() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let named = vec![
                ("x".to_string(), random(&[2, 4, 5, 5], &mut rng)),
                ("w".to_string(), random(&[3, 2, 3, 3, 3], &mut rng)),
                ("b".to_string(), random(&[3], &mut rng)),
            ];
            let report = grad_check(
                &named,
                |t, v| {
                    let y = t.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1])?;
                    let r = t.relu(y)?;
                    t.sum(r)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }
}
