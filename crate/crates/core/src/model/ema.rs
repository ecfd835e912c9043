use crate::error::{bail, Result};
use crate::tensor::{Element, ParamId, ParamStore};

/// Momentum-branch bookkeeping: `theta_t <- mu * theta_t + (1 - mu) * theta_s`.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub mu: f64,
    /// `(target, source)` pairs.
    pub pairs: Vec<(ParamId, ParamId)>,
    /// Groups whose every tensor must be bound as a target.
    pub target_groups: Vec<String>,
}

impl EmaState {
    pub fn new(mu: f64, target_groups: Vec<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            bail!(Config, "EMA momentum {} outside [0, 1]", mu);
        }
        Ok(EmaState { mu, pairs: Vec::new(), target_groups })
    }

    pub fn bind(&mut self, target: ParamId, source: ParamId) {
        self.pairs.push((target, source));
    }

    /// Checks shapes and that every tensor of the target groups is bound exactly once.
    pub fn validate<T: Element>(&self, store: &ParamStore<T>) -> Result<()> {
        let mut seen = vec![false; store.len()];
        for &(t, s) in &self.pairs {
            if t.index() >= store.len() || s.index() >= store.len() {
                bail!(Config, "EMA pair refers to an unknown tensor");
            }
            if seen[t.index()] {
                bail!(Config, "EMA target `{}` bound twice", store.get(t).name);
            }
            seen[t.index()] = true;
            if store.value(t).shape() != store.value(s).shape() {
                bail!(
                    Config,
                    "EMA pair `{}` {:?} vs `{}` {:?}",
                    store.get(t).name,
                    store.value(t).shape(),
                    store.get(s).name,
                    store.value(s).shape()
                );
            }
        }
        for (id, p) in store.iter() {
            if self.target_groups.contains(&p.group) && !seen[id.index()] {
                bail!(Config, "momentum tensor `{}` has no EMA source", p.name);
            }
        }
        Ok(())
    }

    /// Copies every source into its target (momentum branch starts as a clone).
    pub fn copy_sources<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.validate(store)?;
        for &(t, s) in &self.pairs {
            let v = store.value(s).clone();
            *store.value_mut(t) = v;
        }
        Ok(())
    }
}

/// One in-place convex blend of every bound target toward its source.
pub fn ema_update<T: Element>(store: &mut ParamStore<T>, state: &EmaState) -> Result<()> {
    state.validate(store)?;
    let mu = T::lit(state.mu);
    let one_minus = T::lit(1.0 - state.mu);
    for &(t, s) in &state.pairs {
        let src = store.value(s).data().to_vec();
        for (a, b) in store.value_mut(t).data_mut().iter_mut().zip(src) {
            *a = mu * *a + one_minus * b;
        }
    }
    Ok(())
}
