//! In-memory sessions: a forged model, one latent and an intervention stack.

use std::sync::{Arc, Mutex, MutexGuard, OnceLock, RwLock};

use normdid::ace::{ace_table, AceTable};
use normdid::config::BlueprintRef;
use normdid::forge::build_generator;
use normdid::generator::NormMode;
use normdid::interventions::InterventionSpec;
use normdid::latent::sample_latents;
use normdid::model::Model;
use normdid::tensor::Tensor;
use normdid::Result;

pub struct Session {
    pub blueprint: BlueprintRef,
    pub seed: u64,
    pub n_samples: usize,
    pub model: Arc<Model>,
    pub z: Vec<f32>,
    stack: RwLock<Vec<InterventionSpec>>,
    mutation: Mutex<()>,
    table: OnceLock<AceTable>,
}

impl Session {
    /// Forges the blueprint with `seed`; the latent is the first draw of `seed`.
    pub fn create(blueprint: BlueprintRef, seed: u64, n_samples: usize) -> Result<Self> {
        let model = build_generator(&blueprint.resolve_preset()?, seed)?;
        let z = sample_latents(seed, 1, model.generator.latent_dim()).remove(0);
        Ok(Session {
            blueprint,
            seed,
            n_samples,
            model: Arc::new(model),
            z,
            stack: RwLock::new(Vec::new()),
            mutation: Mutex::new(()),
            table: OnceLock::new(),
        })
    }

    /// Exclusive right to mutate; `None` while another mutation runs.
    pub fn try_begin_mutation(&self) -> Option<MutexGuard<'_, ()>> {
        self.mutation.try_lock().ok()
    }

    pub fn stack(&self) -> Vec<InterventionSpec> {
        self.stack.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub(crate) fn set_stack(&self, stack: Vec<InterventionSpec>) {
        *self.stack.write().unwrap_or_else(|e| e.into_inner()) = stack;
    }

    pub fn render(&self, stack: &[InterventionSpec]) -> Result<Tensor> {
        Ok(self.model.generator.forward(&self.z, stack, &NormMode::Live)?.image)
    }

    /// Singleton ACE table, computed on first use.
    pub fn table(&self) -> Result<&AceTable> {
        if let Some(t) = self.table.get() {
            return Ok(t);
        }
        let t = ace_table(&self.model, self.n_samples, self.seed)?;
        Ok(self.table.get_or_init(|| t))
    }
}
