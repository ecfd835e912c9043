use rand::Rng;

use super::Linear;
use crate::error::{bail, Result};
use crate::tensor::{Element, GeluMode, Graph, ParamId, ParamStore, Var};

/// Plain MLP: Glorot-initialized linear layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct MlpStack {
    pub layers: Vec<Linear>,
}

impl MlpStack {
    /// `dims` lists layer widths including input and output, e.g. `[64, 256, 256, 64]`.
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, group: &str, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            bail!(Config, "MLP `{}` needs at least one layer", name);
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::xavier(store, group, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpStack { layers })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var, gelu: GeluMode) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.gelu(x, gelu)?;
            }
            x = layer.forward(g, store, x)?;
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Projection head, plus a prediction head on the online side only.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub projection: MlpStack,
    pub prediction: Option<MlpStack>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Projection,
    ProjectionThenPrediction,
}

impl HeadParams {
    /// Projection `dim -> 4dim -> 4dim -> contrast_dim`, prediction `contrast_dim -> 4c -> c`.
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        group: &str,
        dim: usize,
        contrast_dim: usize,
        with_prediction: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let projection = MlpStack::new(store, group, "projection", &[dim, 4 * dim, 4 * dim, contrast_dim], rng)?;
        let prediction = if with_prediction {
            Some(MlpStack::new(store, group, "prediction", &[contrast_dim, 4 * contrast_dim, contrast_dim], rng)?)
        } else {
            None
        };
        Ok(HeadParams { projection, prediction })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.projection.params();
        if let Some(pred) = &self.prediction {
            p.extend(pred.params());
        }
        p
    }
}

/// Applies the projection, then the prediction head when requested.
pub fn mlp_head<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    head: &HeadParams,
    mode: HeadMode,
    gelu: GeluMode,
) -> Result<Var> {
    let z = head.projection.forward(g, store, x, gelu)?;
    match (mode, &head.prediction) {
        (HeadMode::Projection, _) => Ok(z),
        (HeadMode::ProjectionThenPrediction, Some(pred)) => pred.forward(g, store, z, gelu),
        (HeadMode::ProjectionThenPrediction, None) => {
            bail!(Usage, "prediction requested on a head without a prediction stack (momentum side)")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tensor::Tensor;
    use crate::CmaeError;
    use rand::Rng;

    fn heads(store: &mut ParamStore<f64>) -> (HeadParams, HeadParams) {
        let mut rng = stream(0, Stream::Init, &[]);
        let online = HeadParams::new(store, "online_heads", 8, 6, true, &mut rng).unwrap();
        let momentum = HeadParams::new(store, "momentum_heads", 8, 6, false, &mut rng).unwrap();
        (online, momentum)
    }

    #[test]
    fn zero_input_zero_output_and_dims() {
        let mut store = ParamStore::new();
        let (online, momentum) = heads(&mut store);
        for batch in [1usize, 3, 7] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[batch, 8])).unwrap();
            let y = mlp_head(&mut g, &store, x, &online, HeadMode::ProjectionThenPrediction, GeluMode::Erf).unwrap();
            assert_eq!(g.shape(y), &[batch, 6]);
            assert!(g.value(y).data().iter().all(|v| *v == 0.0));
            let z = mlp_head(&mut g, &store, x, &momentum, HeadMode::Projection, GeluMode::Erf).unwrap();
            assert_eq!(g.shape(z), &[batch, 6]);
        }
    }

    #[test]
    fn prediction_on_momentum_head_is_usage_error() {
        let mut store = ParamStore::new();
        let (_, momentum) = heads(&mut store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 8])).unwrap();
        let r = mlp_head(&mut g, &store, x, &momentum, HeadMode::ProjectionThenPrediction, GeluMode::Erf);
        assert!(matches!(r, Err(CmaeError::Usage(_))));
    }

    #[test]
    fn gradient_reaches_every_head_layer() {
        let mut store = ParamStore::new();
        let (online, _) = heads(&mut store);
        let mut rng = stream(1, Stream::Eval, &[]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4, 8], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        let y = mlp_head(&mut g, &store, x, &online, HeadMode::ProjectionThenPrediction, GeluMode::Erf).unwrap();
        let w = g.constant(Tensor::new(&[4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        let y = g.mul(y, w).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        for layer in online.projection.layers.iter().chain(online.prediction.as_ref().unwrap().layers.iter()) {
            let gw = grads.get(layer.weight).expect("weight grad");
            assert!(gw.iter().any(|v| *v != 0.0), "{}", store.get(layer.weight).name);
        }
    }
}
