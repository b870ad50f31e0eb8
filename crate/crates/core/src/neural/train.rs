use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::bce_loss;
use super::model::Model;
use super::optim::Optimizer;
use super::tensor::{Real, Tensor};
use super::NnError;

/// Indexed supervised examples.
pub trait TrainingData<T> {
    fn len(&self) -> usize;
    fn input_shape(&self) -> Vec<usize>;
    fn target_len(&self) -> usize;
    fn write_input(&self, index: usize, out: &mut [T]);
    fn write_target(&self, index: usize, out: &mut [T]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs and targets held as flat row-major buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryData<T> {
    pub input_shape: Vec<usize>,
    pub inputs: Vec<T>,
    pub target_len: usize,
    pub targets: Vec<T>,
}

impl<T: Real> InMemoryData<T> {
    pub fn new(input_shape: Vec<usize>, inputs: Vec<T>, target_len: usize, targets: Vec<T>) -> Self {
        let d: usize = input_shape.iter().product();
        assert!(d > 0 && inputs.len() % d == 0, "inputs are not whole samples");
        assert_eq!(inputs.len() / d * target_len, targets.len(), "one target per input");
        InMemoryData {
            input_shape,
            inputs,
            target_len,
            targets,
        }
    }

    fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

impl<T: Real> TrainingData<T> for InMemoryData<T> {
    fn len(&self) -> usize {
        self.inputs.len() / self.input_len()
    }

    fn input_shape(&self) -> Vec<usize> {
        self.input_shape.clone()
    }

    fn target_len(&self) -> usize {
        self.target_len
    }

    fn write_input(&self, index: usize, out: &mut [T]) {
        let d = self.input_len();
        out.copy_from_slice(&self.inputs[index * d..(index + 1) * d]);
    }

    fn write_target(&self, index: usize, out: &mut [T]) {
        let d = self.target_len;
        out.copy_from_slice(&self.targets[index * d..(index + 1) * d]);
    }
}

/// One pass over `data` in seeded-shuffle order. Returns the mean batch loss
/// (BCE plus L2 penalty).
pub fn train_epoch<T: Real, D: TrainingData<T> + ?Sized>(
    model: &mut Model<T>,
    data: &D,
    batch_size: usize,
    optimizer: &mut dyn Optimizer<T>,
    seed: u64,
) -> Result<f64, NnError> {
    if batch_size < 1 {
        return Err(NnError::BadBatchSize);
    }
    let n = data.len();
    if n == 0 {
        return Err(NnError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    model.reseed_dropout(rng.next_u64());

    let in_shape = data.input_shape();
    let in_len: usize = in_shape.iter().product();
    let t_len = data.target_len();
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let b = chunk.len();
        let mut shape = vec![b];
        shape.extend_from_slice(&in_shape);
        let mut x = Tensor::zeros(shape);
        let mut t = Tensor::zeros(vec![b, t_len]);
        for (row, &idx) in chunk.iter().enumerate() {
            data.write_input(idx, &mut x.data_mut()[row * in_len..(row + 1) * in_len]);
            data.write_target(idx, &mut t.data_mut()[row * t_len..(row + 1) * t_len]);
        }
        let y = model.forward(&x, true)?;
        let out_shape = y.shape().to_vec();
        let t = t.reshaped(out_shape);
        let (loss, grad) = bce_loss(&y, &t)?;
        total += loss + model.l2_penalty();
        batches += 1;
        model.zero_grad();
        model.backward(&grad)?;
        optimizer.step(&mut model.params_mut());
    }
    model.clear_cache();
    Ok(total / batches as f64)
}

/// Runs `epochs` epochs; epoch seeds are drawn from `seed`. Returns the loss
/// history.
pub fn fit<T: Real, D: TrainingData<T> + ?Sized>(
    model: &mut Model<T>,
    data: &D,
    epochs: usize,
    batch_size: usize,
    optimizer: &mut dyn Optimizer<T>,
    seed: u64,
) -> Result<Vec<f64>, NnError> {
    fit_with(model, data, epochs, batch_size, optimizer, seed, |_, _| {})
}

/// [`fit`] with a per-epoch callback receiving `(epoch, loss)`.
pub fn fit_with<T: Real, D: TrainingData<T> + ?Sized>(
    model: &mut Model<T>,
    data: &D,
    epochs: usize,
    batch_size: usize,
    optimizer: &mut dyn Optimizer<T>,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>, NnError> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let loss = train_epoch(model, data, batch_size, optimizer, seeds.next_u64())?;
        on_epoch(epoch, loss);
        history.push(loss);
    }
    Ok(history)
}
