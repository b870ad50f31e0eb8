use super::layers::Param;
use super::tensor::Real;

/// Parameter update rule. Parameters are passed in a stable order; state is
/// allocated lazily on the first step.
pub trait Optimizer<T: Real> {
    fn step(&mut self, params: &mut [&mut Param<T>]);
    fn learning_rate(&self) -> f64;
}

fn ensure_state<T: Real>(state: &mut Vec<Vec<T>>, params: &[&mut Param<T>]) {
    if state.len() != params.len() {
        *state = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    }
}

/// Infinity-norm variant of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adamax<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub u: Vec<Vec<T>>,
}

impl<T: Real> Default for Adamax<T> {
    fn default() -> Self {
        Self::new(0.002)
    }
}

impl<T: Real> Adamax<T> {
    pub fn new(lr: f64) -> Self {
        Adamax {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            u: Vec::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for Adamax<T> {
    fn step(&mut self, params: &mut [&mut Param<T>]) {
        ensure_state(&mut self.m, params);
        ensure_state(&mut self.u, params);
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one_minus_b1 = T::of(1.0 - self.beta1);
        let step = T::of(self.lr / (1.0 - self.beta1.powi(self.t as i32)));
        let eps = T::of(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, u) = (&mut self.m[i], &mut self.u[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + one_minus_b1 * g;
                u[j] = (b2 * u[j]).max(g.abs());
                p.value[j] -= step * m[j] / u[j].max(eps);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.001)
    }
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [&mut Param<T>]) {
        ensure_state(&mut self.m, params);
        ensure_state(&mut self.v, params);
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p.value[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Plain gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> Default for Sgd<T> {
    fn default() -> Self {
        Self::new(0.01, 0.0)
    }
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut [&mut Param<T>]) {
        ensure_state(&mut self.velocity, params);
        let lr = T::of(self.lr);
        let mu = T::of(self.momentum);
        for (i, p) in params.iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            for j in 0..p.value.len() {
                v[j] = mu * v[j] - lr * p.grad[j];
                p.value[j] += v[j];
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: Vec<f64>, grad: Vec<f64>) -> Param<f64> {
        Param {
            shape: vec![value.len()],
            value,
            grad,
            l2: 0.0,
        }
    }

    #[test]
    fn adamax_hand_example() {
        let mut p = param(vec![0.0], vec![1.0]);
        let mut opt = Adamax::<f64>::default();
        opt.step(&mut [&mut p]);
        assert_eq!(opt.t, 1);
        assert!((opt.m[0][0] - 0.1).abs() < 1e-15);
        assert_eq!(opt.u[0][0], 1.0);
        assert!((p.value[0] + 0.002).abs() < 1e-12, "{}", p.value[0]);
    }

    #[test]
    fn adamax_zero_gradient_leaves_theta() {
        let mut p = param(vec![0.3, -1.2], vec![0.0, 0.0]);
        let mut opt = Adamax::<f64>::default();
        opt.step(&mut [&mut p]);
        assert_eq!(p.value, vec![0.3, -1.2]);
    }

    #[test]
    fn every_optimizer_moves_against_the_gradient() {
        let grads = vec![0.5, -2.0, 1e-3, -7.0];
        let start = vec![0.1, 0.2, -0.3, 0.0];
        let opts: Vec<Box<dyn Optimizer<f64>>> = vec![
            Box::new(Adamax::default()),
            Box::new(Adam::default()),
            Box::new(Sgd::new(0.1, 0.9)),
        ];
        for mut opt in opts {
            let mut p = param(start.clone(), grads.clone());
            opt.step(&mut [&mut p]);
            for j in 0..4 {
                assert_eq!((p.value[j] - start[j]).signum(), -grads[j].signum());
            }
        }
    }
}
