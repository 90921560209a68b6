//! Single-hidden-layer regression network: tanh hidden units trained by
//! momentum backpropagation, a linear output layer solved in closed form.
//!
//! Weight matrices carry the bias as their last row: `w_hidden` is
//! `(n_in + 1) × n_hidden` and `w_out` is `(n_hidden + 1) × n_out`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, Matrix};

/// Half-width of the uniform interval used to initialise every weight.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
}

impl Dims {
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize) -> Result<Self> {
        if n_in == 0 || n_hidden == 0 || n_out == 0 {
            return Err(Error::Argument(format!(
                "network dimensions must be positive, got ({n_in}, {n_hidden}, {n_out})"
            )));
        }
        Ok(Self {
            n_in,
            n_hidden,
            n_out,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub dims: Dims,
    pub w_hidden: Matrix,
    pub w_out: Matrix,
    /// Probability of dropping a hidden unit during training. Inference
    /// scales hidden activations by `1 - drop_prob`.
    pub drop_prob: f64,
    pub init_seed: u64,
}

impl NetworkParams {
    pub fn check(&self) -> Result<()> {
        let d = self.dims;
        if self.w_hidden.shape() != (d.n_in + 1, d.n_hidden) || self.w_out.shape() != (d.n_hidden + 1, d.n_out) {
            return Err(Error::Shape(format!(
                "weights {:?}/{:?} do not match dims {d:?}",
                self.w_hidden.shape(),
                self.w_out.shape()
            )));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Argument(format!("drop_prob {} outside [0, 1)", self.drop_prob)));
        }
        if !self.w_hidden.is_finite() || !self.w_out.is_finite() {
            return Err(Error::Numeric("network weights are not finite".into()));
        }
        Ok(())
    }

    pub fn inference_scale(&self) -> f64 {
        1.0 - self.drop_prob
    }
}

/// Uniform weights on `[-0.05, 0.05]` from a seeded ChaCha stream.
pub fn init_params(dims: Dims, seed: u64, drop_prob: f64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized")
    };
    let w_hidden = draw(dims.n_in + 1, dims.n_hidden);
    let w_out = draw(dims.n_hidden + 1, dims.n_out);
    NetworkParams {
        dims,
        w_hidden,
        w_out,
        drop_prob,
        init_seed: seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    drop_prob: f64,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(n_hidden: usize, drop_prob: f64, rng: &mut R) -> Self {
        Self {
            keep: (0..n_hidden).map(|_| rng.gen::<f64>() >= drop_prob).collect(),
            drop_prob,
        }
    }

    pub fn from_flags(keep: Vec<bool>, drop_prob: f64) -> Self {
        Self { keep, drop_prob }
    }

    pub fn all_keep(n_hidden: usize, drop_prob: f64) -> Self {
        Self::from_flags(vec![true; n_hidden], drop_prob)
    }

    pub fn keep_flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn drop_prob(&self) -> f64 {
        self.drop_prob
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Hidden activations as seen by the output layer (masked or scaled).
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

fn check_input(params: &NetworkParams, x: &[f64]) -> Result<()> {
    if x.len() != params.dims.n_in {
        return Err(Error::Shape(format!(
            "input has {} values, network expects {}",
            x.len(),
            params.dims.n_in
        )));
    }
    Ok(())
}

/// `tanh(W_hiddenᵀ · [x; 1])` written into `out`.
fn hidden_activations_into(w_hidden: &Matrix, x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    out.copy_from_slice(w_hidden.row(n_in));
    for (i, &xi) in x.iter().enumerate() {
        for (acc, &w) in out.iter_mut().zip(w_hidden.row(i)) {
            *acc += xi * w;
        }
    }
    for v in out.iter_mut() {
        *v = v.tanh();
    }
}

fn output_into(w_out: &Matrix, hidden: &[f64], out: &mut [f64]) {
    out.copy_from_slice(w_out.row(hidden.len()));
    for (j, &h) in hidden.iter().enumerate() {
        for (acc, &w) in out.iter_mut().zip(w_out.row(j)) {
            *acc += h * w;
        }
    }
}

/// Forward pass. With a mask, dropped units are zeroed (training mode);
/// without one, every hidden activation is scaled by `1 - drop_prob`.
pub fn forward(params: &NetworkParams, x: &[f64], mask: Option<&DropoutMask>) -> Result<ForwardPass> {
    check_input(params, x)?;
    let mut hidden = vec![0.0; params.dims.n_hidden];
    hidden_activations_into(&params.w_hidden, x, &mut hidden);
    apply_mode(params, mask, &mut hidden)?;
    let mut output = vec![0.0; params.dims.n_out];
    output_into(&params.w_out, &hidden, &mut output);
    Ok(ForwardPass { hidden, output })
}

fn apply_mode(params: &NetworkParams, mask: Option<&DropoutMask>, hidden: &mut [f64]) -> Result<()> {
    match mask {
        Some(m) => {
            if m.keep.len() != hidden.len() {
                return Err(Error::Shape(format!(
                    "mask has {} flags for {} hidden units",
                    m.keep.len(),
                    hidden.len()
                )));
            }
            for (h, &k) in hidden.iter_mut().zip(&m.keep) {
                if !k {
                    *h = 0.0;
                }
            }
        }
        None => {
            let s = params.inference_scale();
            hidden.iter_mut().for_each(|h| *h *= s);
        }
    }
    Ok(())
}

/// Reusable buffers for repeated gradient evaluations.
#[derive(Debug, Clone)]
pub struct Workspace {
    tanh: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
    delta: Vec<f64>,
}

impl Workspace {
    pub fn new(dims: Dims) -> Self {
        Self {
            tanh: vec![0.0; dims.n_hidden],
            hidden: vec![0.0; dims.n_hidden],
            output: vec![0.0; dims.n_out],
            delta: vec![0.0; dims.n_hidden],
        }
    }
}

/// Adds `∂E/∂W_hidden` for `E = ½‖output − target‖²` into `grad`, and
/// returns `E`. The masked forward pass is the one differentiated.
pub fn backprop_accumulate(
    params: &NetworkParams,
    x: &[f64],
    target: &[f64],
    mask: &DropoutMask,
    ws: &mut Workspace,
    grad: &mut Matrix,
) -> Result<f64> {
    check_input(params, x)?;
    if target.len() != params.dims.n_out {
        return Err(Error::Shape(format!(
            "target has {} values, network has {} outputs",
            target.len(),
            params.dims.n_out
        )));
    }
    if grad.shape() != params.w_hidden.shape() {
        return Err(Error::Shape("gradient buffer does not match W_hidden".into()));
    }
    hidden_activations_into(&params.w_hidden, x, &mut ws.tanh);
    ws.hidden.copy_from_slice(&ws.tanh);
    apply_mode(params, Some(mask), &mut ws.hidden)?;
    output_into(&params.w_out, &ws.hidden, &mut ws.output);

    let mut err = 0.0;
    for (o, t) in ws.output.iter_mut().zip(target) {
        *o -= t;
        err += 0.5 * *o * *o;
    }
    // δ_j = keep_j · (1 − tanh²) · Σ_k W_out[j][k] · (o_k − t_k)
    for (j, d) in ws.delta.iter_mut().enumerate() {
        *d = if mask.keep[j] {
            let back: f64 = params.w_out.row(j).iter().zip(&ws.output).map(|(w, e)| w * e).sum();
            back * (1.0 - ws.tanh[j] * ws.tanh[j])
        } else {
            0.0
        };
    }
    let n_in = x.len();
    for (i, &xi) in x.iter().enumerate() {
        for (g, &d) in grad.row_mut(i).iter_mut().zip(&ws.delta) {
            *g += xi * d;
        }
    }
    for (g, &d) in grad.row_mut(n_in).iter_mut().zip(&ws.delta) {
        *g += d;
    }
    Ok(err)
}

/// Gradient of the half sum-of-squares error with respect to `W_hidden`.
pub fn backprop(params: &NetworkParams, x: &[f64], target: &[f64], mask: &DropoutMask) -> Result<Matrix> {
    let mut grad = Matrix::zeros(params.dims.n_in + 1, params.dims.n_hidden);
    backprop_accumulate(params, x, target, mask, &mut Workspace::new(params.dims), &mut grad)?;
    Ok(grad)
}

/// Inference-mode hidden activations for every row, with a trailing bias
/// column of ones: the design matrix of the linear output layer.
pub fn hidden_design(params: &NetworkParams, inputs: impl ExactSizeIterator<Item = impl AsRef<[f64]>>) -> Result<Matrix> {
    let n_hidden = params.dims.n_hidden;
    let mut h = Matrix::zeros(inputs.len(), n_hidden + 1);
    for (r, x) in inputs.enumerate() {
        let x = x.as_ref();
        check_input(params, x)?;
        let row = h.row_mut(r);
        hidden_activations_into(&params.w_hidden, x, &mut row[..n_hidden]);
        apply_mode(params, None, &mut row[..n_hidden])?;
        row[n_hidden] = 1.0;
    }
    Ok(h)
}

/// Least-squares output weights `pinv(H) · T`.
pub fn solve_output_pinv(h: &Matrix, t: &Matrix) -> Result<Matrix> {
    if !h.is_finite() || !t.is_finite() {
        return Err(Error::Numeric("hidden activations or targets are not finite".into()));
    }
    lstsq(h, t)
}

/// `v' = μ·v − α·g`, `W' = W + v'`, in place.
pub fn sgd_momentum_step(w: &mut [f64], velocity: &mut [f64], gradient: &[f64], alpha: f64, mu: f64) -> Result<()> {
    if w.len() != velocity.len() || w.len() != gradient.len() {
        return Err(Error::Shape(format!(
            "momentum step over {} weights, {} velocities, {} gradients",
            w.len(),
            velocity.len(),
            gradient.len()
        )));
    }
    for ((w, v), g) in w.iter_mut().zip(velocity.iter_mut()).zip(gradient) {
        *v = mu * *v - alpha * g;
        *w += *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(w_h: f64, b_h: f64, w_o: f64, b_o: f64, drop_prob: f64) -> NetworkParams {
        NetworkParams {
            dims: Dims::new(1, 1, 1).unwrap(),
            w_hidden: Matrix::from_vec(2, 1, vec![w_h, b_h]).unwrap(),
            w_out: Matrix::from_vec(2, 1, vec![w_o, b_o]).unwrap(),
            drop_prob,
            init_seed: 0,
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let dims = Dims::new(30, 7, 4).unwrap();
        let a = init_params(dims, 11, 0.7);
        let b = init_params(dims, 11, 0.7);
        assert_eq!(a, b);
        assert_ne!(a, init_params(dims, 12, 0.7));
        for w in a.w_hidden.as_slice().iter().chain(a.w_out.as_slice()) {
            assert!(w.abs() <= INIT_RANGE);
        }
    }

    #[test]
    fn init_shapes() {
        let p = init_params(Dims::new(3, 2, 4).unwrap(), 0, 0.7);
        assert_eq!(p.w_hidden.shape(), (4, 2));
        assert_eq!(p.w_out.shape(), (3, 4));
        p.check().unwrap();
    }

    #[test]
    fn zero_weights_output_bias_only() {
        let dims = Dims::new(5, 3, 4).unwrap();
        let mut p = init_params(dims, 1, 0.7);
        p.w_hidden = Matrix::zeros(6, 3);
        p.w_out.as_mut_slice().iter_mut().take(12).for_each(|w| *w = 0.0);
        let out = forward(&p, &[0.3, -0.2, 0.9, 0.0, 1.0], None).unwrap();
        assert!(out.hidden.iter().all(|&h| h == 0.0));
        assert_eq!(out.output, p.w_out.row(3));
    }

    #[test]
    fn dropping_every_unit_leaves_output_bias() {
        let p = init_params(Dims::new(4, 6, 4).unwrap(), 3, 0.7);
        let mask = DropoutMask::from_flags(vec![false; 6], 0.7);
        let out = forward(&p, &[0.1, 0.2, 0.3, 0.4], Some(&mask)).unwrap();
        assert_eq!(out.output, p.w_out.row(6));
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        let out = forward(&tiny(1.0, 0.0, 2.0, 0.0, 0.0), &[0.5], None).unwrap();
        assert!((out.output[0] - 0.924_234_315_4).abs() < 1e-9, "{}", out.output[0]);
    }

    #[test]
    fn shape_errors() {
        let p = init_params(Dims::new(3, 2, 4).unwrap(), 0, 0.7);
        assert!(matches!(forward(&p, &[1.0], None), Err(Error::Shape(_))));
        let mask = DropoutMask::all_keep(2, 0.7);
        assert!(matches!(backprop(&p, &[1.0, 2.0, 3.0], &[0.0; 3], &mask), Err(Error::Shape(_))));
    }

    #[test]
    fn all_keep_without_dropout_matches_inference() {
        let p = init_params(Dims::new(6, 5, 4).unwrap(), 9, 0.0);
        let x = [0.4, -0.1, 0.3, 0.9, -0.7, 0.2];
        let masked = forward(&p, &x, Some(&DropoutMask::all_keep(5, 0.0))).unwrap();
        assert_eq!(masked, forward(&p, &x, None).unwrap());
    }

    #[test]
    fn perfect_output_has_zero_gradient() {
        let p = init_params(Dims::new(4, 3, 4).unwrap(), 5, 0.5);
        let x = [0.2, 0.1, -0.3, 0.8];
        let mask = DropoutMask::from_flags(vec![true, false, true], 0.5);
        let target = forward(&p, &x, Some(&mask)).unwrap().output;
        let g = backprop(&p, &x, &target, &mask).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropped_units_get_zero_gradient() {
        let p = init_params(Dims::new(4, 3, 4).unwrap(), 5, 0.5);
        let mask = DropoutMask::from_flags(vec![true, false, true], 0.5);
        let g = backprop(&p, &[0.2, 0.1, -0.3, 0.8], &[1.0, -1.0, 0.5, 0.0], &mask).unwrap();
        for i in 0..5 {
            assert_eq!(g.get(i, 1), 0.0);
            assert_ne!(g.get(i, 0), 0.0);
        }
    }

    #[test]
    fn pinv_exact_fit_for_square_system() {
        let h = Matrix::from_rows(&[vec![2.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 4.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let w = solve_output_pinv(&h, &t).unwrap();
        assert!(h.matmul(&w).unwrap().sub(&t).unwrap().frobenius_norm() <= 1e-8);
    }

    #[test]
    fn momentum_examples() {
        let mut w = vec![0.5];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut w, &mut v, &[0.0], 0.002, 0.95).unwrap();
        assert_eq!((w[0], v[0]), (0.5, 0.0));

        let mut w = vec![0.5];
        let mut v = vec![0.3];
        sgd_momentum_step(&mut w, &mut v, &[2.0], 0.1, 0.0).unwrap();
        assert_eq!(w[0], 0.5 - 0.1 * 2.0);

        // v1 = -0.002, v2 = 0.95 * -0.002 - 0.002 = -0.0039, total shift -0.0059
        let mut w = vec![0.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut w, &mut v, &[1.0], 0.002, 0.95).unwrap();
        sgd_momentum_step(&mut w, &mut v, &[1.0], 0.002, 0.95).unwrap();
        assert!((v[0] + 0.0039).abs() < 1e-15);
        assert!((w[0] + 0.0059).abs() < 1e-15);

        assert!(sgd_momentum_step(&mut w, &mut v, &[1.0, 2.0], 0.1, 0.9).is_err());
    }

    #[test]
    fn masks_average_to_inference_scaling() {
        let p = init_params(Dims::new(6, 8, 4).unwrap(), 21, 0.7);
        let x = [0.9, -0.4, 0.7, 0.1, -0.8, 0.5];
        let mut p_big = p.clone();
        // scale up weights so every unit has a clearly non-zero activation
        p_big.w_hidden.as_mut_slice().iter_mut().for_each(|w| *w *= 20.0);
        let scaled = forward(&p_big, &x, None).unwrap().hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let mut sum = vec![0.0; 8];
        for _ in 0..n {
            let mask = DropoutMask::sample(8, 0.7, &mut rng);
            let h = forward(&p_big, &x, Some(&mask)).unwrap().hidden;
            sum.iter_mut().zip(&h).for_each(|(s, v)| *s += v);
        }
        for (s, want) in sum.iter().zip(&scaled) {
            let mean = s / n as f64;
            assert!(want.abs() > 1e-3);
            assert!(((mean - want) / want).abs() <= 0.02, "{mean} vs {want}");
        }
    }

    #[test]
    fn tanh_stays_inside_open_interval() {
        let p = init_params(Dims::new(3, 4, 2).unwrap(), 2, 0.0);
        let out = forward(&p, &[1e6, -1e6, 1e3], Some(&DropoutMask::all_keep(4, 0.0))).unwrap();
        assert!(out.hidden.iter().all(|h| h.abs() <= 1.0));
        assert!(out.output.iter().all(|o| o.is_finite()));
    }
}
