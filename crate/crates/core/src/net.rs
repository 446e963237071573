//! Dense ReLU velocity network with an internal feature tap and a projection
//! head, plus hand-written reverse-mode gradients.
//!
//! The velocity network maps `[x1, x2, t]` through `depth` affine layers with
//! ReLU between them. The post-activation of layer `tap` is the internal
//! representation `f(x, t)`; the remaining layers form `g`, so `v = g(f(x, t))`.
//! The projection head is a two-layer ReLU MLP on `f(x, t)` whose output rows
//! are normalized to unit length.
//!
//! All operations work on row batches. The per-point functions at the bottom
//! of the module are thin wrappers over batches of one.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Point2;
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, DEGENERATE_NORM};

/// Architecture metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Number of affine layers in the velocity network.
    pub depth: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    /// Layer whose post-activation feeds the projection head (1-based).
    pub tap: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden width of the projection head.
    pub head_hidden: usize,
    /// Dimension of the projected feature row.
    pub feature_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            depth: 5,
            hidden: 512,
            tap: 3,
            input_dim: 3,
            output_dim: 2,
            head_hidden: 512,
            feature_dim: 2,
        }
    }
}

impl Arch {
    /// A small architecture for gradient checks and quick experiments.
    pub fn small(hidden: usize) -> Self {
        Arch {
            hidden,
            head_hidden: hidden,
            ..Arch::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Invalid(format!("depth {} < 2", self.depth)));
        }
        if self.tap < 1 || self.tap > self.depth - 1 {
            return Err(Error::Invalid(format!(
                "tap layer {} outside 1..={}",
                self.tap,
                self.depth - 1
            )));
        }
        if self.hidden == 0 || self.head_hidden == 0 || self.feature_dim == 0 || self.output_dim == 0 {
            return Err(Error::Invalid("zero-width layer".into()));
        }
        if self.input_dim != 3 || self.output_dim != 2 {
            return Err(Error::Invalid(format!(
                "velocity network must map 3 inputs to 2 outputs, got {} -> {}",
                self.input_dim, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(out, in)` shapes of the velocity layers.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|k| {
                let fan_in = if k == 0 { self.input_dim } else { self.hidden };
                let fan_out = if k == self.depth - 1 { self.output_dim } else { self.hidden };
                (fan_out, fan_in)
            })
            .collect()
    }

    /// `(out, in)` shapes of the two head layers.
    pub fn head_shapes(&self) -> [(usize, usize); 2] {
        [(self.head_hidden, self.hidden), (self.feature_dim, self.head_hidden)]
    }
}

/// One affine layer, `z = W a + b` with `W` stored `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros((out, inp): (usize, usize)) -> Self {
        Dense {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn apply(&self, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = a.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

/// All weights of the velocity network and the projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub layers: Vec<Dense>,
    pub head: Vec<Dense>,
}

impl ModelParams {
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        Ok(ModelParams {
            arch,
            layers: arch.layer_shapes().into_iter().map(Dense::zeros).collect(),
            head: arch.head_shapes().into_iter().map(Dense::zeros).collect(),
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(arch: Arch, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        for layer in params.layers.iter_mut().chain(params.head.iter_mut()) {
            let (out, inp) = layer.weight.dim();
            let bound = (6.0 / (inp + out) as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch).expect("arch already validated")
    }

    fn dense(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain(self.head.iter())
    }

    fn dense_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.layers.iter_mut().chain(self.head.iter_mut())
    }

    /// Every parameter array as a flat slice, in checkpoint order
    /// (`layer0.weight, layer0.bias, ..., head1.bias`).
    pub fn slices(&self) -> Vec<&[f64]> {
        self.dense()
            .flat_map(|d| {
                [
                    d.weight.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.dense_mut()
            .flat_map(|d| {
                [
                    d.weight.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Names and shapes in checkpoint order.
    pub fn array_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (prefix, group) in [("layer", &self.layers), ("head", &self.head)] {
            for (k, d) in group.iter().enumerate() {
                out.push((format!("{prefix}{k}.weight"), d.weight.shape().to_vec()));
                out.push((format!("{prefix}{k}.bias"), d.bias.shape().to_vec()));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Checks shape composition and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let expected: Vec<(usize, usize)> = self
            .arch
            .layer_shapes()
            .into_iter()
            .chain(self.arch.head_shapes())
            .collect();
        let actual: Vec<&Dense> = self.dense().collect();
        if actual.len() != expected.len() {
            return Err(Error::Shape(format!(
                "{} layers, architecture needs {}",
                actual.len(),
                expected.len()
            )));
        }
        for (k, (d, shape)) in actual.iter().zip(&expected).enumerate() {
            if d.weight.dim() != *shape || d.bias.len() != shape.0 {
                return Err(Error::Shape(format!(
                    "layer {k}: weight {:?} bias {}, expected {:?}",
                    d.weight.dim(),
                    d.bias.len(),
                    shape
                )));
            }
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Builds the `(B, 3)` network input from states and a shared time.
    pub fn input_rows(points: &[Point2], t: f64) -> Array2<f64> {
        let mut input = Array2::zeros((points.len(), 3));
        for (mut row, p) in input.rows_mut().into_iter().zip(points) {
            row[0] = p[0];
            row[1] = p[1];
            row[2] = t;
        }
        input
    }

    /// Forward pass of the velocity network over a `(B, 3)` input.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Tape> {
        if input.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, expected {}",
                input.ncols(),
                self.arch.input_dim
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(last);
        for (k, layer) in self.layers.iter().enumerate() {
            let z = match k {
                0 => layer.apply(&input),
                _ => layer.apply(&post[k - 1].view()),
            };
            if k < last {
                post.push(z.mapv(relu));
            }
            pre.push(z);
        }
        Ok(Tape {
            input: input.to_owned(),
            pre,
            post,
        })
    }

    /// Projection head over the tapped representation, rows normalized.
    pub fn project_batch(&self, tape: &Tape) -> Result<HeadTape> {
        let tapped = tape.tapped(self.arch.tap);
        let hidden_pre = self.head[0].apply(&tapped.view());
        let hidden = hidden_pre.mapv(relu);
        let raw = self.head[1].apply(&hidden.view());
        let mut norms = Array1::zeros(raw.nrows());
        let mut features = raw.clone();
        for (i, mut row) in features.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm >= DEGENERATE_NORM) {
                return Err(Error::Degenerate {
                    norm,
                    floor: DEGENERATE_NORM,
                });
            }
            row /= norm;
            norms[i] = norm;
        }
        Ok(HeadTape {
            hidden_pre,
            hidden,
            raw,
            norms,
            features,
        })
    }

    /// Reverse-mode gradients of `<dv, v> + <dh, h>` summed over the batch.
    ///
    /// `dh` requires the head tape of the same forward pass. Parameter
    /// gradients are only accumulated when `want_params` is set; the input
    /// gradient (all three input columns) is always returned.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        head: Option<&HeadTape>,
        dv: Option<ArrayView2<f64>>,
        dh: Option<ArrayView2<f64>>,
        want_params: bool,
    ) -> Result<Gradients> {
        let batch = tape.input.nrows();
        let last = self.layers.len() - 1;
        if dv.is_none() && dh.is_none() {
            return Err(Error::Invalid("backward needs a velocity or a feature cotangent".into()));
        }
        if let Some(dv) = &dv {
            if dv.dim() != (batch, self.arch.output_dim) {
                return Err(Error::Shape(format!(
                    "velocity cotangent {:?}, expected {:?}",
                    dv.dim(),
                    (batch, self.arch.output_dim)
                )));
            }
        }
        let mut grads = want_params.then(|| self.zeros_like());

        // Cotangent arriving at the tapped activation from the head.
        let mut tap_cotangent = None;
        if let Some(dh) = dh {
            let head = head.ok_or_else(|| Error::Invalid("feature cotangent without head tape".into()))?;
            if dh.dim() != head.features.dim() {
                return Err(Error::Shape(format!(
                    "feature cotangent {:?}, expected {:?}",
                    dh.dim(),
                    head.features.dim()
                )));
            }
            // Through h = u / |u|: du = (dh - h <h, dh>) / |u|.
            let mut du = dh.to_owned();
            for (i, mut row) in du.rows_mut().into_iter().enumerate() {
                let h = head.features.row(i);
                let along = h.dot(&row);
                row.scaled_add(-along, &h);
                row /= head.norms[i];
            }
            let tapped = tape.tapped(self.arch.tap);
            if let Some(g) = grads.as_mut() {
                g.head[1].weight = du.t().dot(&head.hidden);
                g.head[1].bias = du.sum_axis(Axis(0));
            }
            let mut d_hidden = du.dot(&self.head[1].weight);
            relu_backward(&mut d_hidden, &head.hidden_pre);
            if let Some(g) = grads.as_mut() {
                g.head[0].weight = d_hidden.t().dot(tapped);
                g.head[0].bias = d_hidden.sum_axis(Axis(0));
            }
            tap_cotangent = Some(d_hidden.dot(&self.head[0].weight));
        }

        // `delta` is the cotangent of the pre-activation of layer k; `None`
        // stands for an exact zero (nothing above the tap needs visiting when
        // only the head is differentiated).
        let mut delta: Option<Array2<f64>> = dv.map(|d| d.to_owned());
        let mut d_input = Array2::zeros((batch, self.arch.input_dim));
        for k in (0..=last).rev() {
            if let Some(d) = &delta {
                let below = if k == 0 { tape.input.view() } else { tape.post[k - 1].view() };
                if let Some(g) = grads.as_mut() {
                    g.layers[k].weight = d.t().dot(&below);
                    g.layers[k].bias = d.sum_axis(Axis(0));
                }
            }
            let mut d_below = delta.as_ref().map(|d| d.dot(&self.layers[k].weight));
            if k == 0 {
                if let Some(d) = d_below {
                    d_input = d;
                }
                break;
            }
            // Post-activation k-1 is the output of layer k (1-based).
            if k == self.arch.tap {
                if let Some(extra) = tap_cotangent.take() {
                    d_below = Some(match d_below {
                        Some(d) => d + extra,
                        None => extra,
                    });
                }
            }
            delta = d_below.map(|mut d| {
                relu_backward(&mut d, &tape.pre[k - 1]);
                d
            });
        }
        Ok(Gradients {
            params: grads,
            input: d_input,
        })
    }
}

/// Intermediates of one forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Tape {
    /// `(B, 3)` rows of `[x1, x2, t]`.
    pub input: Array2<f64>,
    /// Pre-activations, one per layer; the last entry is the velocity.
    pub pre: Vec<Array2<f64>>,
    /// ReLU outputs of the hidden layers.
    pub post: Vec<Array2<f64>>,
}

impl Tape {
    /// Number of recorded layers (equals the network depth).
    pub fn len(&self) -> usize {
        self.pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    pub fn velocity(&self) -> &Array2<f64> {
        self.pre.last().expect("non-empty tape")
    }

    /// The tapped representation `f(x, t)`.
    pub fn tapped(&self, tap: usize) -> &Array2<f64> {
        &self.post[tap - 1]
    }

    /// Replays the recorded input through `params`.
    pub fn replay(&self, params: &ModelParams) -> Result<Tape> {
        params.forward_batch(self.input.view())
    }
}

/// Intermediates of the projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTape {
    pub hidden_pre: Array2<f64>,
    pub hidden: Array2<f64>,
    /// Head output before normalization.
    pub raw: Array2<f64>,
    pub norms: Array1<f64>,
    /// Unit-normalized head output.
    pub features: Array2<f64>,
}

/// Output of [`ModelParams::backward_batch`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Option<ModelParams>,
    /// `(B, 3)`; the time column is included but not part of any contract.
    pub input: Array2<f64>,
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Zeroes cotangents where the pre-activation was not positive.
fn relu_backward(d: &mut Array2<f64>, pre: &Array2<f64>) {
    d.zip_mut_with(pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Velocity `v(x, t)` for one state, with its tape.
pub fn forward_velocity(params: &ModelParams, x: Point2, t: f64) -> Result<(Point2, Tape)> {
    if !x[0].is_finite() || !x[1].is_finite() || !t.is_finite() {
        return Err(Error::NonFinite(format!("forward input ({}, {}, {t})", x[0], x[1])));
    }
    check_time(t)?;
    let tape = params.forward_batch(ModelParams::input_rows(&[x], t).view())?;
    let v = tape.velocity();
    Ok(([v[[0, 0]], v[[0, 1]]], tape))
}

/// Unit-normalized head output for the state recorded in `tape`.
pub fn forward_projection(params: &ModelParams, tape: &Tape) -> Result<FeatureMap> {
    let head = params.project_batch(tape)?;
    FeatureMap::from_unit_rows(head.features)
}

/// Gradients of `<v_grad, v> + <h_grad, h>` with respect to every parameter
/// and to the spatial input.
pub fn backward(
    params: &ModelParams,
    tape: &Tape,
    v_grad: Option<Point2>,
    h_grad: Option<&FeatureMap>,
) -> Result<(ModelParams, Point2)> {
    if tape.batch_size() != 1 || tape.len() != params.layers.len() {
        return Err(Error::Shape("tape does not belong to a single-point forward pass".into()));
    }
    let dv = v_grad.map(|g| Array2::from_shape_vec((1, 2), g.to_vec()).expect("1x2"));
    let head = match h_grad {
        Some(_) => Some(params.project_batch(tape)?),
        None => None,
    };
    let grads = params.backward_batch(
        tape,
        head.as_ref(),
        dv.as_ref().map(|d| d.view()),
        h_grad.map(|h| h.rows().view()),
        true,
    )?;
    let dx = [grads.input[[0, 0]], grads.input[[0, 1]]];
    Ok((grads.params.expect("requested"), dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Role};
    use ndarray::array;
    use rand::Rng;

    fn tiny(seed: u64) -> ModelParams {
        ModelParams::init(Arch::small(6), &mut stream(seed, Role::Init, 0)).unwrap()
    }

    #[test]
    fn arch_validation() {
        assert!(Arch::default().validate().is_ok());
        assert!(Arch { tap: 0, ..Arch::default() }.validate().is_err());
        assert!(Arch { tap: 5, ..Arch::default() }.validate().is_err());
        assert!(Arch { depth: 1, tap: 1, ..Arch::default() }.validate().is_err());
        let shapes = Arch::default().layer_shapes();
        assert_eq!(shapes, vec![(512, 3), (512, 512), (512, 512), (512, 512), (2, 512)]);
        for w in shapes.windows(2) {
            assert_eq!(w[1].1, w[0].0);
        }
    }

    #[test]
    fn zero_weights_give_the_final_bias() {
        let mut p = ModelParams::zeros(Arch::small(4)).unwrap();
        p.layers[4].bias = array![0.25, -1.5];
        let (v, tape) = forward_velocity(&p, [0.3, -0.7], 0.4).unwrap();
        assert_eq!(v, [0.25, -1.5]);
        assert_eq!(tape.len(), 5);
    }

    #[test]
    fn forward_is_deterministic_and_replayable() {
        let p = tiny(1);
        let (v1, t1) = forward_velocity(&p, [0.1, 0.2], 0.3).unwrap();
        let (v2, t2) = forward_velocity(&p, [0.1, 0.2], 0.3).unwrap();
        assert_eq!(v1.map(f64::to_bits), v2.map(f64::to_bits));
        assert_eq!(t1, t2);
        assert_eq!(t1.replay(&p).unwrap(), t1);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = tiny(1);
        assert!(matches!(forward_velocity(&p, [f64::NAN, 0.0], 0.5), Err(Error::NonFinite(_))));
        assert!(matches!(forward_velocity(&p, [0.0, 0.0], 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn projection_passes_a_unit_direction_through() {
        // Head that copies a positive tapped unit into its output direction.
        let mut p = ModelParams::zeros(Arch::small(4)).unwrap();
        p.layers[0].bias[0] = 1.0;
        p.layers[1].bias[0] = 1.0;
        p.layers[2].bias[0] = 1.0;
        p.head[0].weight[[0, 0]] = 1.0;
        p.head[1].weight[[0, 0]] = 0.6;
        p.head[1].weight[[1, 0]] = -0.8;
        let (_, tape) = forward_velocity(&p, [0.0, 0.0], 0.0).unwrap();
        let h = forward_projection(&p, &tape).unwrap();
        assert!((h.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((h.row(0)[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn projection_is_unit_and_degenerate_head_errors() {
        let p = ModelParams::init(Arch::small(32), &mut stream(2, Role::Init, 0)).unwrap();
        let mut rng = stream(9, Role::GradCheck, 0);
        for _ in 0..50 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let (_, tape) = forward_velocity(&p, x, rng.random()).unwrap();
            let h = forward_projection(&p, &tape).unwrap();
            let norm = h.row(0).dot(&h.row(0)).sqrt();
            assert!((norm - 1.0).abs() <= 1e-6);
        }
        let z = ModelParams::zeros(Arch::small(4)).unwrap();
        let (_, tape) = forward_velocity(&z, [0.0, 0.0], 0.0).unwrap();
        assert!(matches!(forward_projection(&z, &tape), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let p = tiny(3);
        let (_, tape) = forward_velocity(&p, [0.2, -0.4], 0.6).unwrap();
        let zero_h = FeatureMap::new(Array2::zeros((1, 2)));
        let (g, dx) = backward(&p, &tape, Some([0.0, 0.0]), Some(&zero_h)).unwrap();
        assert_eq!(dx, [0.0, 0.0]);
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(backward(&p, &tape, None, None).is_err());
    }

    #[test]
    fn velocity_only_backward_leaves_head_untouched() {
        let p = tiny(4);
        let (_, tape) = forward_velocity(&p, [0.2, -0.4], 0.6).unwrap();
        let (g, _) = backward(&p, &tape, Some([1.0, -2.0]), None).unwrap();
        assert!(g.head.iter().all(|d| d.weight.iter().all(|&v| v == 0.0)));
        assert!(g.layers[4].weight.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batch_forward_matches_rows() {
        let p = tiny(5);
        let pts = [[0.1, 0.2], [-0.5, 0.9], [1.2, -0.3]];
        let tape = p.forward_batch(ModelParams::input_rows(&pts, 0.25).view()).unwrap();
        for (i, x) in pts.iter().enumerate() {
            let (v, _) = forward_velocity(&p, *x, 0.25).unwrap();
            assert!((tape.velocity()[[i, 0]] - v[0]).abs() < 1e-14);
            assert!((tape.velocity()[[i, 1]] - v[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn add_scaled_and_counts() {
        let p = tiny(6);
        let mut q = p.clone();
        q.add_scaled(&p, -1.0);
        assert!(q.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        let expected: usize = 6 * 3 + 6 + 3 * (36 + 6) + 2 * 6 + 2 + 36 + 6 + 2 * 6 + 2;
        assert_eq!(p.num_params(), expected);
        assert_eq!(p.array_specs().len(), 14);
    }
}
