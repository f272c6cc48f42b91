//! Parameter plumbing: deterministic initialisation, flattening for
//! finite-difference checks, and round-trip restore.

use burn::module::{Module, ModuleMapper, ModuleVisitor, ParamId};
use burn::prelude::*;
use std::sync::Mutex;

/// Backend RNG state is process-global in burn, so model construction is
/// serialised behind this lock and seeded explicitly.
static INIT_LOCK: Mutex<()> = Mutex::new(());

/// Run `f` with the backend RNG freshly seeded, holding a global lock so
/// concurrent initialisations cannot interleave their draws.
pub fn with_seed<B: Backend, T>(seed: u64, f: impl FnOnce() -> T) -> T {
    let _guard = INIT_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    B::seed(seed);
    f()
}

struct ForceInit;

impl<B: Backend> ModuleVisitor<B> for ForceInit {
    fn visit_float<const D: usize>(&mut self, _id: ParamId, tensor: &Tensor<B, D>) {
        // Touching the shape is enough to materialise a lazy parameter.
        let _ = tensor.shape();
    }
}

/// Materialise every lazy parameter in module-definition order, so RNG
/// consumption matches construction order rather than first-use order.
pub fn force_init<B: Backend, M: Module<B>>(module: &M) {
    module.visit(&mut ForceInit);
}

struct Flatten {
    values: Vec<f64>,
}

impl<B: Backend> ModuleVisitor<B> for Flatten {
    fn visit_float<const D: usize>(&mut self, _id: ParamId, tensor: &Tensor<B, D>) {
        let data = tensor.to_data().convert::<f64>();
        self.values.extend(data.to_vec::<f64>().expect("float param"));
    }
}

/// All float parameters concatenated in traversal order.
pub fn flatten_params<B: Backend, M: Module<B>>(module: &M) -> Vec<f64> {
    let mut v = Flatten { values: Vec::new() };
    module.visit(&mut v);
    v.values
}

pub fn param_count<B: Backend, M: Module<B>>(module: &M) -> usize {
    flatten_params(module).len()
}

struct Restore<'a, B: Backend> {
    values: &'a [f64],
    cursor: usize,
    device: B::Device,
}

impl<B: Backend> ModuleMapper<B> for Restore<'_, B> {
    fn map_float<const D: usize>(&mut self, _id: ParamId, tensor: Tensor<B, D>) -> Tensor<B, D> {
        let shape = tensor.shape();
        let n = shape.num_elements();
        let chunk = &self.values[self.cursor..self.cursor + n];
        self.cursor += n;
        let grad = tensor.is_require_grad();
        Tensor::from_data(burn::tensor::TensorData::new(chunk.to_vec(), shape), &self.device)
            .set_require_grad(grad)
    }
}

/// Rebuild a module from a flat parameter vector produced by
/// [`flatten_params`] on a module of identical structure.
pub fn restore_params<B: Backend, M: Module<B>>(module: M, values: &[f64], device: &B::Device) -> M {
    let mut mapper = Restore::<B> {
        values,
        cursor: 0,
        device: device.clone(),
    };
    let module = module.map(&mut mapper);
    assert_eq!(mapper.cursor, values.len(), "parameter count mismatch");
    module
}
