//! Small dense ReLU networks with hand-rolled reverse-mode gradients and an
//! Adam optimizer.
//!
//! The dual trainer only needs scalar-input scalar-output networks of a fixed
//! depth, so this module implements exactly that shape generically over layer
//! widths: affine layers with ReLU on every hidden layer and a linear output.
//! Gradients flow through a per-network workspace that caches activations, so
//! a training iteration performs no allocation.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine layer; `w` has shape (fan_in, fan_out).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Multilayer perceptron: ReLU hidden layers, linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub layers: Vec<Dense>,
}

/// Reusable forward/backward buffers for one network at a fixed batch size.
#[derive(Debug, Clone)]
pub struct MlpWorkspace {
    /// acts[0] is the input copy; acts[l] the post-activation output of layer l.
    acts: Vec<Array2<f64>>,
    /// dz[l] holds the gradient w.r.t. layer l's pre-activation.
    dz: Vec<Array2<f64>>,
}

impl Mlp {
    /// Xavier-uniform initialization: weights on ±sqrt(6 / (fan_in + fan_out)),
    /// biases zero. Draw order (layers in sequence, weights row-major) is part
    /// of the determinism contract.
    pub fn xavier_init(widths: &[usize], rng: &mut ChaCha12Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidInput(
                "a network needs at least input and output widths".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut w = Array2::<f64>::zeros((fan_in, fan_out));
            for v in w.iter_mut() {
                *v = dist.sample(rng);
            }
            layers.push(Dense {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Ok(Mlp { layers })
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        out.push(self.layers[0].w.nrows());
        for l in &self.layers {
            out.push(l.w.ncols());
        }
        out
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// Build directly from layers (used by tests and hand-crafted nets).
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("a network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].w.ncols() != pair[1].w.nrows() {
                return Err(Error::InvalidInput(format!(
                    "layer {} output width {} does not match layer {} input width {}",
                    i,
                    pair[0].w.ncols(),
                    i + 1,
                    pair[1].w.nrows()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.w.ncols() {
                return Err(Error::InvalidInput(format!(
                    "layer {i} bias length {} does not match width {}",
                    l.b.len(),
                    l.w.ncols()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Run the batch forward, caching activations in `ws`.
    /// Input shape: (batch, fan_in of the first layer).
    pub fn forward(&self, input: &ArrayView2<f64>, ws: &mut MlpWorkspace) -> Result<()> {
        if input.ncols() != self.layers[0].w.nrows() {
            return Err(Error::InvalidInput(format!(
                "input width {} does not match network fan-in {}",
                input.ncols(),
                self.layers[0].w.nrows()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "non-finite network input".into(),
            ));
        }
        ws.ensure(self, input.nrows());
        ws.acts[0].assign(input);
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let z = &mut rest[0];
            general_mat_mul(1.0, &prev[l], &layer.w, 0.0, z);
            for mut row in z.rows_mut() {
                row += &layer.b;
            }
            if l + 1 < n_layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(())
    }

    /// Backpropagate `dout` (gradient w.r.t. the network output) through the
    /// activations cached by the last `forward`, writing parameter gradients
    /// into `grad` (overwriting it).
    pub fn backward(&self, ws: &mut MlpWorkspace, dout: &ArrayView2<f64>, grad: &mut MlpGrad) {
        self.backward_impl(ws, dout, grad, 0.0);
    }

    /// Like `backward`, but adds the parameter gradients onto whatever `grad`
    /// already holds — used when one loss sums contributions from several
    /// forward passes (e.g. separate penalty and marginal-cost batches).
    pub fn backward_accumulate(
        &self,
        ws: &mut MlpWorkspace,
        dout: &ArrayView2<f64>,
        grad: &mut MlpGrad,
    ) {
        self.backward_impl(ws, dout, grad, 1.0);
    }

    fn backward_impl(&self, ws: &mut MlpWorkspace, dout: &ArrayView2<f64>, grad: &mut MlpGrad, beta: f64) {
        let n_layers = self.layers.len();
        ws.dz[n_layers - 1].assign(dout);
        for l in (0..n_layers).rev() {
            // Parameter gradients for layer l.
            {
                let (dz_head, dz_tail) = ws.dz.split_at_mut(l);
                let dz_l = &dz_tail[0];
                let g = &mut grad.layers[l];
                general_mat_mul(1.0, &ws.acts[l].t(), dz_l, beta, &mut g.w);
                for (j, gb) in g.b.iter_mut().enumerate() {
                    let col_sum = dz_l.column(j).sum();
                    *gb = if beta == 0.0 { col_sum } else { *gb + col_sum };
                }
                // Gradient w.r.t. the previous activation, masked by ReLU.
                if l > 0 {
                    let dprev = &mut dz_head[l - 1];
                    general_mat_mul(1.0, dz_l, &self.layers[l].w.t(), 0.0, dprev);
                    for (dp, a) in dprev.iter_mut().zip(ws.acts[l].iter()) {
                        if *a <= 0.0 {
                            *dp = 0.0;
                        }
                    }
                }
            }
        }
    }

    /// Write parameters into `out` in canonical order (layers in sequence,
    /// weight matrix row-major, then bias).
    pub fn copy_params_to(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.param_count());
        let mut k = 0;
        for l in &self.layers {
            for &v in l.w.iter() {
                out[k] = v;
                k += 1;
            }
            for &v in l.b.iter() {
                out[k] = v;
                k += 1;
            }
        }
    }

    /// Read parameters back in canonical order.
    pub fn copy_params_from(&mut self, src: &[f64]) {
        debug_assert_eq!(src.len(), self.param_count());
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = src[k];
                k += 1;
            }
            for v in l.b.iter_mut() {
                *v = src[k];
                k += 1;
            }
        }
    }

    /// Convenience forward pass that allocates its own workspace.
    pub fn forward_owned(&self, input: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut ws = MlpWorkspace::new(self, input.nrows());
        self.forward(input, &mut ws)?;
        Ok(ws.output().clone())
    }
}

impl MlpWorkspace {
    pub fn new(mlp: &Mlp, batch: usize) -> Self {
        let mut ws = MlpWorkspace {
            acts: Vec::new(),
            dz: Vec::new(),
        };
        ws.ensure(mlp, batch);
        ws
    }

    fn ensure(&mut self, mlp: &Mlp, batch: usize) {
        let widths = mlp.widths();
        let ok = self.acts.len() == widths.len()
            && self.acts[0].nrows() == batch
            && self
                .acts
                .iter()
                .zip(widths.iter())
                .all(|(a, &w)| a.ncols() == w);
        if ok {
            return;
        }
        self.acts = widths
            .iter()
            .map(|&w| Array2::zeros((batch, w)))
            .collect();
        self.dz = widths[1..]
            .iter()
            .map(|&w| Array2::zeros((batch, w)))
            .collect();
    }

    /// Output of the last forward pass (batch, fan_out).
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("workspace is never empty")
    }
}

impl MlpGrad {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrad {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect(),
        }
    }

    /// Flatten in the same canonical order as `Mlp::copy_params_to`.
    pub fn copy_to(&self, out: &mut [f64]) {
        let mut k = 0;
        for l in &self.layers {
            for &v in l.w.iter() {
                out[k] = v;
                k += 1;
            }
            for &v in l.b.iter() {
                out[k] = v;
                k += 1;
            }
        }
        debug_assert_eq!(k, out.len());
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with the standard defaults (0.9, 0.999, 1e-8).
    pub fn new(n_params: usize) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One Adam update with bias correction:
/// `theta -= lr * m_hat / (sqrt(v_hat) + epsilon)`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::InvalidInput(format!(
            "adam shapes disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn xavier_respects_bounds_and_zeroes_biases() {
        let widths = [1, 64, 64, 64, 64, 1];
        let mlp = Mlp::xavier_init(&widths, &mut rng(3)).unwrap();
        for (l, layer) in mlp.layers().iter().enumerate() {
            let bound = (6.0 / (widths[l] + widths[l + 1]) as f64).sqrt();
            for &w in layer.w.iter() {
                assert!(w.abs() <= bound, "layer {l} weight {w} exceeds {bound}");
            }
            assert!(layer.b.iter().all(|&b| b == 0.0));
        }
        // Same seed, same parameters.
        let again = Mlp::xavier_init(&widths, &mut rng(3)).unwrap();
        let (mut a, mut b) = (vec![0.0; mlp.param_count()], vec![0.0; mlp.param_count()]);
        mlp.copy_params_to(&mut a);
        again.copy_params_to(&mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_network_outputs_zero() {
        let mut mlp = Mlp::xavier_init(&[1, 8, 8, 1], &mut rng(5)).unwrap();
        let zeros = vec![0.0; mlp.param_count()];
        mlp.copy_params_from(&zeros);
        let x = array![[0.3], [2.0], [100.0]];
        let y = mlp.forward_owned(&x.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_built_single_unit_realizes_relu_shift() {
        // One hidden unit implementing ReLU(x - 6).
        let mlp = Mlp::from_layers(vec![
            Dense {
                w: array![[1.0]],
                b: array![-6.0],
            },
            Dense {
                w: array![[1.0]],
                b: array![0.0],
            },
        ])
        .unwrap();
        let x = array![[4.0], [6.0], [9.0]];
        let y = mlp.forward_owned(&x.view()).unwrap();
        assert_eq!(y[(0, 0)], 0.0);
        assert_eq!(y[(1, 0)], 0.0);
        assert_eq!(y[(2, 0)], 3.0);
    }

    #[test]
    fn forward_is_lipschitz_within_the_weight_norm_product() {
        let mlp = Mlp::xavier_init(&[1, 32, 32, 1], &mut rng(11)).unwrap();
        // Product of max-absolute-row-sum norms bounds the ReLU chain.
        let mut lip = 1.0;
        for layer in mlp.layers() {
            let mut norm: f64 = 0.0;
            for row in layer.w.rows() {
                norm = norm.max(row.iter().map(|v| v.abs()).sum());
            }
            lip *= norm;
        }
        let h = 1e-7;
        for &x0 in &[0.2, 0.9, 1.7, 3.4] {
            let a = mlp.forward_owned(&array![[x0]].view()).unwrap()[(0, 0)];
            let b = mlp.forward_owned(&array![[x0 + h]].view()).unwrap()[(0, 0)];
            assert!(
                (b - a).abs() <= lip * h * (1.0 + 1e-9),
                "|f({x0}+h) - f({x0})| = {} exceeds {}",
                (b - a).abs(),
                lip * h
            );
        }
    }

    #[test]
    fn backward_matches_central_finite_differences() {
        // Loss L = sum_r c_r * out_r on random small nets; the analytic
        // gradient must match central differences coordinate by coordinate.
        let h = 1e-5;
        for trial in 0..20 {
            let mut r = rng(100 + trial);
            let mut mlp = Mlp::xavier_init(&[1, 8, 6, 1], &mut r).unwrap();
            // Zero biases put pre-activations exactly on ReLU kinks whenever a
            // whole layer goes dead for a row; central differences then see a
            // one-sided slope where the subgradient convention reports 0. Move
            // the biases off zero so every probe point is generic.
            for layer in mlp.layers_mut() {
                for b in layer.b.iter_mut() {
                    *b = r.gen_range(0.05..0.2) * if r.gen::<bool>() { 1.0 } else { -1.0 };
                }
            }
            let batch = 16;
            let mut x = Array2::<f64>::zeros((batch, 1));
            for v in x.iter_mut() {
                *v = r.gen_range(0.5..2.0);
            }
            let mut c = Array2::<f64>::zeros((batch, 1));
            for v in c.iter_mut() {
                *v = r.gen_range(-1.0..1.0);
            }

            let loss = |m: &Mlp| -> f64 {
                let y = m.forward_owned(&x.view()).unwrap();
                y.iter().zip(c.iter()).map(|(a, b)| a * b).sum()
            };

            let mut ws = MlpWorkspace::new(&mlp, batch);
            mlp.forward(&x.view(), &mut ws).unwrap();
            let mut grad = MlpGrad::zeros_like(&mlp);
            mlp.backward(&mut ws, &c.view(), &mut grad);

            let n = mlp.param_count();
            let mut analytic = vec![0.0; n];
            grad.copy_to(&mut analytic);
            let mut params = vec![0.0; n];
            mlp.copy_params_to(&mut params);

            let mut probe = mlp.clone();
            for i in 0..n {
                let orig = params[i];
                params[i] = orig + h;
                probe.copy_params_from(&params);
                let up = loss(&probe);
                params[i] = orig - h;
                probe.copy_params_from(&params);
                let down = loss(&probe);
                params[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[i];
                if a.abs() < 1e-8 {
                    assert!(
                        (fd - a).abs() < 1e-6,
                        "trial {trial} param {i}: fd {fd} vs analytic {a}"
                    );
                } else {
                    assert!(
                        ((fd - a) / a).abs() < 1e-4,
                        "trial {trial} param {i}: fd {fd} vs analytic {a}"
                    );
                }
            }
            probe.copy_params_from(&params);
        }
    }

    #[test]
    fn backward_accumulate_equals_sum_of_separate_backwards() {
        let mut r = rng(42);
        let mlp = Mlp::xavier_init(&[2, 6, 1], &mut r).unwrap();
        let batch = 8;
        let mut xa = Array2::<f64>::zeros((batch, 2));
        let mut xb = Array2::<f64>::zeros((batch, 2));
        let mut da = Array2::<f64>::zeros((batch, 1));
        let mut db = Array2::<f64>::zeros((batch, 1));
        for v in xa.iter_mut().chain(xb.iter_mut()) {
            *v = r.gen_range(-1.0..1.0);
        }
        for v in da.iter_mut().chain(db.iter_mut()) {
            *v = r.gen_range(-1.0..1.0);
        }

        let mut ws = MlpWorkspace::new(&mlp, batch);
        let mut ga = MlpGrad::zeros_like(&mlp);
        let mut gb = MlpGrad::zeros_like(&mlp);
        mlp.forward(&xa.view(), &mut ws).unwrap();
        mlp.backward(&mut ws, &da.view(), &mut ga);
        mlp.forward(&xb.view(), &mut ws).unwrap();
        mlp.backward(&mut ws, &db.view(), &mut gb);

        let mut gsum = MlpGrad::zeros_like(&mlp);
        mlp.forward(&xa.view(), &mut ws).unwrap();
        mlp.backward(&mut ws, &da.view(), &mut gsum);
        mlp.forward(&xb.view(), &mut ws).unwrap();
        mlp.backward_accumulate(&mut ws, &db.view(), &mut gsum);

        let n = mlp.param_count();
        let (mut va, mut vb, mut vs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        ga.copy_to(&mut va);
        gb.copy_to(&mut vb);
        gsum.copy_to(&mut vs);
        for i in 0..n {
            assert_eq!(vs[i], va[i] + vb[i], "param {i}");
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[0.0, 0.0, 0.0], &mut state, 1e-3).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_has_closed_form() {
        // From zero moments, one step moves by -lr * g / (|g| + eps).
        let g = [0.3, -1.7, 4.0e-3];
        let mut params = vec![0.0; 3];
        let mut state = AdamState::new(3);
        let lr = 1e-3;
        adam_step(&mut params, &g, &mut state, lr).unwrap();
        for i in 0..3 {
            let expected = -lr * g[i] / (g[i].abs() + state.epsilon);
            assert!(
                (params[i] - expected).abs() < 1e-15,
                "param {i}: {} vs {expected}",
                params[i]
            );
        }
    }

    #[test]
    fn adam_constant_gradient_keeps_unit_scaled_steps() {
        // With a constant gradient the bias-corrected moments stay m_hat = g,
        // v_hat = g^2, so every step is -lr * g / (|g| + eps).
        let g = [2.5, -0.03];
        let mut params = vec![0.0; 2];
        let mut state = AdamState::new(2);
        let lr = 1e-2;
        let mut last = params.clone();
        for _ in 0..50 {
            adam_step(&mut params, &g, &mut state, lr).unwrap();
            for i in 0..2 {
                let step = params[i] - last[i];
                let expected = -lr * g[i] / (g[i].abs() + state.epsilon);
                assert!(
                    (step - expected).abs() < 1e-12,
                    "step {step} vs expected {expected}"
                );
            }
            last = params.clone();
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = vec![0.0; 2];
        let mut state = AdamState::new(3);
        assert!(adam_step(&mut params, &[1.0, 2.0], &mut state, 1e-3).is_err());
    }

    #[test]
    fn forward_rejects_non_finite_input() {
        let mlp = Mlp::xavier_init(&[1, 4, 1], &mut rng(1)).unwrap();
        let x = array![[f64::NAN]];
        assert!(mlp.forward_owned(&x.view()).is_err());
    }

    #[test]
    fn parameters_survive_json_round_trip() {
        let mlp = Mlp::xavier_init(&[1, 8, 8, 1], &mut rng(21)).unwrap();
        let js = serde_json::to_string(&mlp).unwrap();
        let back: Mlp = serde_json::from_str(&js).unwrap();
        let mut a = vec![0.0; mlp.param_count()];
        let mut b = vec![0.0; back.param_count()];
        mlp.copy_params_to(&mut a);
        back.copy_params_to(&mut b);
        assert_eq!(a, b);
    }
}
