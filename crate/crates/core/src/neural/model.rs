use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Init, Layer, LayerSpec, Param};
use super::tensor::{Real, Tensor};
use super::NnError;

/// Ordered stack of layers plus the dropout mask generator.
#[derive(Debug, Clone)]
pub struct Model<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    dropout_rng: ChaCha8Rng,
}

impl<T: Real> Model<T> {
    /// Builds a model with seeded He/Glorot initialization. Biases start at 0.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        let mut model = Self::uninitialized(input_shape, specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = model.layers.len();
        for i in 0..n {
            let init = match model.layers[i + 1..]
                .iter()
                .find(|l| matches!(l, Layer::Relu(_) | Layer::Sigmoid(_)))
            {
                Some(Layer::Sigmoid(_)) => Init::Glorot,
                _ => Init::He,
            };
            model.layers[i].init(init, &mut rng);
        }
        model.reseed_dropout(seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(model)
    }

    /// Same architecture as [`Model::build`] with every parameter at zero.
    pub fn uninitialized(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Self, NnError> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = Layer::from_spec(spec).map_err(|reason| NnError::InvalidSpec { layer: i, reason })?;
            shape = spec.output_shape(&shape).ok_or_else(|| NnError::ShapeMismatch {
                layer: i,
                kind: spec.name(),
                expected: spec.input_shape().unwrap_or_default(),
                got: shape.clone(),
            })?;
            layers.push(layer);
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers
            .iter()
            .fold(self.input_shape.clone(), |s, l| l.spec().output_shape(&s).expect("validated at build"))
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NnError> {
        if x.shape().len() != self.input_shape.len() + 1 || x.sample_shape() != self.input_shape {
            return Err(NnError::ShapeMismatch {
                layer: 0,
                kind: self.layers.first().map_or("input", |l| l.name()),
                expected: self.input_shape.clone(),
                got: x.sample_shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Inference pass on a batch `[batch, ...input_shape]`. Dropout is off and
    /// nothing is cached, so a frozen model can be shared across threads.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h).map_err(|e| e.at_layer(i))?;
        }
        Ok(h)
    }

    /// Caching forward pass; `train` enables dropout.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h, train, &mut self.dropout_rng).map_err(|e| e.at_layer(i))?;
        }
        Ok(h)
    }

    /// Accumulates loss gradients into every parameter, then adds the
    /// `2·λ·w` terms of the L2 penalties.
    pub fn backward(&mut self, loss_grad: &Tensor<T>) -> Result<(), NnError> {
        self.backward_data(loss_grad)?;
        self.add_regularization_grads();
        Ok(())
    }

    /// Backward pass without the regularizer contribution.
    pub fn backward_data(&mut self, loss_grad: &Tensor<T>) -> Result<(), NnError> {
        let mut g = loss_grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            match layer.backward(&g, i > 0).map_err(|e| e.at_layer(i))? {
                Some(dx) => g = dx,
                None => break,
            }
        }
        Ok(())
    }

    pub fn add_regularization_grads(&mut self) {
        for p in self.params_mut() {
            if p.l2 > 0.0 {
                let k = T::of(2.0 * p.l2);
                for (g, w) in p.grad.iter_mut().zip(&p.value) {
                    *g += k * *w;
                }
            }
        }
    }

    /// Σ λ·‖w‖² over every regularized tensor.
    pub fn l2_penalty(&self) -> f64 {
        self.params()
            .iter()
            .filter(|p| p.l2 > 0.0)
            .map(|p| p.l2 * p.value.iter().map(|w| w.f64() * w.f64()).sum::<f64>())
            .sum()
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Copies parameters into a model of another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::uninitialized(&self.input_shape, &self.specs()).expect("same architecture");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.value.iter_mut().zip(&src.value) {
                *d = U::of(s.f64());
            }
        }
        out.dropout_rng = self.dropout_rng.clone();
        out
    }
}

impl<T: Real> PartialEq for Model<T> {
    /// Architecture and parameter values; caches and RNG state are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.specs() == other.specs()
            && self.params().iter().zip(other.params()).all(|(a, b)| a.value == b.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn empty_model_is_identity() {
        let m = Model::<f64>::build(&[3], &[], 1).unwrap();
        let x = t(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        assert_eq!(m.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_dense_gives_zero_output() {
        let m = Model::<f64>::uninitialized(&[4], &[LayerSpec::Dense { inputs: 4, units: 3, l2: 0.0 }]).unwrap();
        let y = m.predict(&t(&[1, 4], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
    }

    #[test]
    fn conv_output_length_uses_ceil() {
        let spec = LayerSpec::Conv1d {
            in_len: 4096,
            in_channels: 1,
            filters: 2,
            kernel: 16,
            stride: 4,
            l2: 0.0,
        };
        let m = Model::<f32>::build(&[4096, 1], &[spec], 0).unwrap();
        let y = m.predict(&Tensor::zeros(vec![1, 4096, 1])).unwrap();
        assert_eq!(y.shape(), &[1, 1024, 2]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let specs = [
            LayerSpec::Dense { inputs: 4, units: 3, l2: 0.0 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 5, units: 1, l2: 0.0 },
        ];
        match Model::<f32>::build(&[4], &specs, 0) {
            Err(NnError::ShapeMismatch { layer, kind, .. }) => {
                assert_eq!(layer, 2);
                assert_eq!(kind, "dense");
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = Model::<f32>::build(&[4], &specs[..2], 0).unwrap();
        assert!(matches!(
            m.predict(&Tensor::zeros(vec![1, 5])),
            Err(NnError::ShapeMismatch { layer: 0, .. })
        ));
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut m = Model::<f64>::build(&[2], &[LayerSpec::Dense { inputs: 2, units: 1, l2: 0.0 }], 0).unwrap();
        assert!(matches!(
            m.backward(&Tensor::zeros(vec![1, 1])),
            Err(NnError::MissingCache { layer: 0 })
        ));
    }

    #[test]
    fn zero_loss_grad_gives_zero_param_grads() {
        let specs = [
            LayerSpec::Dense { inputs: 3, units: 4, l2: 0.0 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 4, units: 2, l2: 0.0 },
            LayerSpec::Sigmoid,
        ];
        let mut m = Model::<f64>::build(&[3], &specs, 5).unwrap();
        m.forward(&t(&[1, 3], vec![0.3, -0.1, 0.8]), true).unwrap();
        m.zero_grad();
        m.backward(&Tensor::zeros(vec![1, 2])).unwrap();
        assert!(m.params().iter().all(|p| p.grad.iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn l2_alone_gives_two_lambda_w() {
        let specs = [
            LayerSpec::Conv1d {
                in_len: 8,
                in_channels: 2,
                filters: 3,
                kernel: 3,
                stride: 2,
                l2: 0.1,
            },
            LayerSpec::Relu,
        ];
        let mut m = Model::<f64>::build(&[8, 2], &specs, 9).unwrap();
        m.forward(&Tensor::zeros(vec![2, 8, 2]), true).unwrap();
        m.zero_grad();
        m.backward(&Tensor::zeros(vec![2, 4, 3])).unwrap();
        let p = m.params();
        for (g, w) in p[0].grad.iter().zip(&p[0].value) {
            assert_eq!(*g, 2.0 * 0.1 * w);
        }
        assert!(p[1].grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let specs = [LayerSpec::Dense { inputs: 5, units: 7, l2: 0.0 }, LayerSpec::Relu];
        let a = Model::<f32>::build(&[5], &specs, 42).unwrap();
        let b = Model::<f32>::build(&[5], &specs, 42).unwrap();
        let c = Model::<f32>::build(&[5], &specs, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
