//! Named parameter storage, Adam, and seeded initialization.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::tensor::{Element, Tensor};
use super::NdiffError;

/// One learnable tensor with its Adam state.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Element> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// Named parameter tensors with deterministic (name-sorted) iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// One Adam update with bias correction. `grads` must carry exactly the
    /// same keys as the store.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<(), NdiffError> {
        for name in grads.keys() {
            if !self.params.contains_key(name) {
                return Err(NdiffError::KeyMismatch(format!("unknown gradient `{name}`")));
            }
        }
        for name in self.params.keys() {
            if !grads.contains_key(name) {
                return Err(NdiffError::KeyMismatch(format!("missing gradient `{name}`")));
            }
        }
        for (name, param) in self.params.iter_mut() {
            let grad = &grads[name];
            if grad.shape() != param.value.shape() {
                return Err(NdiffError::ShapeMismatch(format!(
                    "gradient `{name}`: {:?} vs {:?}",
                    grad.shape(),
                    param.value.shape()
                )));
            }
            param.t += 1;
            let b1 = T::from_f64(beta1);
            let b2 = T::from_f64(beta2);
            let one_m_b1 = T::from_f64(1.0 - beta1);
            let one_m_b2 = T::from_f64(1.0 - beta2);
            let corr1 = T::from_f64(1.0 - beta1.powi(param.t as i32));
            let corr2 = T::from_f64(1.0 - beta2.powi(param.t as i32));
            let lr_t = T::from_f64(lr);
            let eps_t = T::from_f64(eps);
            for i in 0..grad.len() {
                let g = grad.data()[i];
                let m = b1 * param.m.data()[i] + one_m_b1 * g;
                let v = b2 * param.v.data()[i] + one_m_b2 * g * g;
                param.m.data_mut()[i] = m;
                param.v.data_mut()[i] = v;
                let m_hat = m / corr1;
                let v_hat = v / corr2;
                param.value.data_mut()[i] -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

/// How one parameter tensor is filled at initialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamInit {
    /// Truncated normal (|z| <= 2) rescaled so the resulting variance is
    /// `2 / fan_in`.
    FanInNormal { fan_in: usize },
    /// All zeros (biases, and correction heads that must start as identity).
    Zero,
}

/// Declares one tensor of a parameter layout.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: ParamInit) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }
}

// Standard deviation of a unit normal truncated to [-2, 2]; dividing by it
// restores unit variance after truncation.
const TRUNC_NORMAL_STD: f64 = 0.879_625_661_034_239_8;

fn uniform_open01(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1]: never zero, so ln() is safe.
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1 = uniform_open01(rng);
        let u2 = uniform_open01(rng);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Builds a [`ParamStore`] from a layout, drawing weights in layout order
/// from a ChaCha8 stream seeded with `seed`. Identical seeds produce
/// bit-identical stores.
pub fn init_params<T: Element>(layout: &[ParamSpec], seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in layout {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            ParamInit::Zero => vec![T::ZERO; n],
            ParamInit::FanInNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt() / TRUNC_NORMAL_STD;
                (0..n)
                    .map(|_| T::from_f64(truncated_normal(&mut rng) * std))
                    .collect()
            }
        };
        store.insert(
            spec.name.clone(),
            Tensor::new(spec.shape.clone(), data).expect("layout shape"),
        );
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    fn scalar_grads(g: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::scalar(g));
        m
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // g = 1, t: 0 -> 1, beta1 = 0.5: m-hat = v-hat = 1, so the update is
        // lr / (1 + eps), i.e. the parameter decreases by about lr.
        let mut store = scalar_store(0.0);
        store
            .adam_step(&scalar_grads(1.0), 1e-4, 0.5, 0.999, 1e-8)
            .unwrap();
        let p = store.get("w").unwrap();
        assert!((p.value.data()[0] + 1e-4).abs() < 1e-9);
        assert_eq!(p.t, 1);
        assert!((p.m.data()[0] - 0.5).abs() < 1e-12);
        assert!((p.v.data()[0] - 0.001).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_zero_state_param_unchanged() {
        let mut store = scalar_store(0.7);
        store
            .adam_step(&scalar_grads(0.0), 1e-2, 0.5, 0.999, 1e-8)
            .unwrap();
        assert_eq!(store.get("w").unwrap().value.data()[0], 0.7);
    }

    #[test]
    fn adam_runs_are_bit_identical() {
        let run = || {
            let mut store = scalar_store(0.3);
            for i in 0..10 {
                let g = 0.1 * (i as f64 - 4.0);
                store
                    .adam_step(&scalar_grads(g), 1e-3, 0.5, 0.999, 1e-8)
                    .unwrap();
            }
            store.get("w").unwrap().value.data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_key_mismatch() {
        let mut store = scalar_store(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("nope".to_string(), Tensor::scalar(1.0));
        assert!(matches!(
            store.adam_step(&grads, 1e-3, 0.5, 0.999, 1e-8),
            Err(NdiffError::KeyMismatch(_))
        ));
    }

    #[test]
    fn init_same_seed_is_bit_identical() {
        let layout = vec![
            ParamSpec::new("a.weight", vec![4, 3, 3, 3], ParamInit::FanInNormal { fan_in: 27 }),
            ParamSpec::new("a.bias", vec![4], ParamInit::Zero),
        ];
        let s1: ParamStore<f32> = init_params(&layout, 9);
        let s2: ParamStore<f32> = init_params(&layout, 9);
        for ((n1, p1), (n2, p2)) in s1.iter().zip(s2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.value.data(), p2.value.data());
        }
        let s3: ParamStore<f32> = init_params(&layout, 10);
        assert_ne!(
            s1.get("a.weight").unwrap().value.data(),
            s3.get("a.weight").unwrap().value.data()
        );
    }

    #[test]
    fn init_biases_are_zero() {
        let layout = vec![ParamSpec::new("b", vec![16], ParamInit::Zero)];
        let store: ParamStore<f32> = init_params(&layout, 1);
        assert!(store.get("b").unwrap().value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let fan_in = 64;
        let layout = vec![ParamSpec::new(
            "w",
            vec![10_000],
            ParamInit::FanInNormal { fan_in },
        )];
        let store: ParamStore<f64> = init_params(&layout, 123);
        let data = store.get("w").unwrap().value.data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / data.len() as f64;
        let want = 2.0 / fan_in as f64;
        assert!(
            (var - want).abs() < 0.2 * want,
            "sample variance {var} vs expected {want}"
        );
    }
}
