//! A trainable model: one objective on top of one or more ensembles.

use crate::ensemble::{self, init_member, EnsembleConfig, EnsembleError, EnsembleParams, ForwardTrace};
use crate::kernel::RealArray;
use crate::objective::{closeness_penalty, Objective, ObjectiveError};
use serde::{Deserialize, Serialize};

/// How the heads of a multi-head objective (ZIP, NB) are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayout {
    /// One ensemble with `k` leaf outputs; all heads share the routing.
    #[default]
    Shared,
    /// One single-head ensemble per head, each with its own splits.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTreeModel {
    pub objective: Objective,
    pub layout: HeadLayout,
    /// Config of each member ensemble.
    pub config: EnsembleConfig,
    pub members: Vec<EnsembleParams>,
}

impl SoftTreeModel {
    /// Fresh model. `base.num_heads` is ignored; the objective decides it.
    pub fn new(objective: Objective, base: EnsembleConfig, layout: HeadLayout, seed: u64) -> Result<Self, EnsembleError> {
        let heads = objective.heads_required();
        let (config, count) = match layout {
            HeadLayout::Shared => (base.with_heads(heads), 1),
            HeadLayout::Separate => (base.with_heads(1), heads),
        };
        config.validate()?;
        let members = (0..count).map(|h| init_member(&config, seed, h as u32)).collect();
        Ok(Self {
            objective,
            layout,
            config,
            members,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.config.num_tasks
    }

    pub fn num_features(&self) -> usize {
        self.config.num_features
    }

    pub fn num_heads(&self) -> usize {
        self.objective.heads_required()
    }

    pub fn num_params(&self) -> usize {
        self.config.num_params() * self.members.len()
    }

    /// Checks that the members agree with the config and objective.
    pub fn check(&self) -> Result<(), EnsembleError> {
        self.config.validate()?;
        let heads = self.num_heads();
        let (want_k, want_members) = match self.layout {
            HeadLayout::Shared => (heads, 1),
            HeadLayout::Separate => (1, heads),
        };
        if self.config.num_heads != want_k || self.members.len() != want_members {
            return Err(EnsembleError::Config(format!(
                "{} with {:?} heads needs {want_members} ensemble(s) of {want_k} head(s), found {} of {}",
                self.objective,
                self.layout,
                self.members.len(),
                self.config.num_heads
            )));
        }
        for m in &self.members {
            m.check(&self.config)?;
        }
        Ok(())
    }

    /// Raw heads `[B, T, k]` without keeping a trace.
    pub fn predict_raw(&self, xs: &RealArray) -> Result<RealArray, EnsembleError> {
        let outs = self
            .members
            .iter()
            .map(|p| ensemble::predict(&self.config, p, xs))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.merge(outs))
    }

    pub fn forward(&self, xs: &RealArray) -> Result<(RealArray, Vec<ForwardTrace>), EnsembleError> {
        let mut outs = Vec::with_capacity(self.members.len());
        let mut traces = Vec::with_capacity(self.members.len());
        for p in &self.members {
            let (o, t) = ensemble::forward(&self.config, p, xs)?;
            outs.push(o);
            traces.push(t);
        }
        Ok((self.merge(outs), traces))
    }

    /// Like [`forward`](Self::forward), reusing `traces` from an earlier call.
    pub fn forward_into(&self, xs: &RealArray, traces: &mut Vec<ForwardTrace>) -> Result<RealArray, EnsembleError> {
        traces.resize_with(self.members.len(), || ForwardTrace::empty(&self.config));
        let outs = self
            .members
            .iter()
            .zip(traces.iter_mut())
            .map(|(p, t)| ensemble::forward_into(&self.config, p, xs, t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.merge(outs))
    }

    /// Member gradients given head gradients `[B, T, k]`.
    pub fn backward(
        &self,
        traces: &[ForwardTrace],
        xs: &RealArray,
        output_grads: &RealArray,
    ) -> Result<Vec<EnsembleParams>, EnsembleError> {
        if traces.len() != self.members.len() {
            return Err(EnsembleError::StaleTrace(format!(
                "{} traces for {} ensembles",
                traces.len(),
                self.members.len()
            )));
        }
        match self.layout {
            HeadLayout::Shared => Ok(vec![ensemble::backward(
                &self.config,
                &self.members[0],
                &traces[0],
                xs,
                output_grads,
            )?]),
            HeadLayout::Separate => {
                let k = self.num_heads();
                let cells = output_grads.len() / k.max(1);
                (0..k)
                    .map(|h| {
                        let g: Vec<f64> = (0..cells).map(|c| output_grads.as_slice()[c * k + h]).collect();
                        let mut shape = output_grads.shape().to_vec();
                        if let Some(last) = shape.last_mut() {
                            *last = 1;
                        }
                        let g = RealArray::new(shape, g)?;
                        ensemble::backward(&self.config, &self.members[h], &traces[h], xs, &g)
                    })
                    .collect()
            }
        }
    }

    /// Closeness penalty summed over members, with per-member split gradients.
    pub fn penalty(&self, lambda: f64, depth_decay: bool) -> Result<(f64, Vec<RealArray>), ObjectiveError> {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(self.members.len());
        for p in &self.members {
            let (v, g) = closeness_penalty(&self.config, p, lambda, depth_decay)?;
            total += v;
            grads.push(g);
        }
        Ok((total, grads))
    }

    /// Natural-scale parameters `[B, T, q]`, columns named by
    /// [`Objective::output_names`].
    pub fn predict_natural(&self, xs: &RealArray) -> Result<RealArray, EnsembleError> {
        let raw = self.predict_raw(xs)?;
        Ok(self.natural_from_raw(&raw))
    }

    pub fn natural_from_raw(&self, raw: &RealArray) -> RealArray {
        let k = self.num_heads();
        let q = self.objective.output_names().len();
        let (b, t) = (raw.shape()[0], raw.shape()[1]);
        let data = raw.as_slice().chunks(k).flat_map(|h| self.objective.natural_params(h)).collect();
        RealArray::new(vec![b, t, q], data).expect("natural parameter count")
    }

    /// `E[y | x]` per task, `[B, T]`.
    pub fn mean_from_raw(&self, raw: &RealArray) -> RealArray {
        let k = self.num_heads();
        let (b, t) = (raw.shape()[0], raw.shape()[1]);
        let data = raw.as_slice().chunks(k).map(|h| self.objective.mean_response(h)).collect();
        RealArray::new(vec![b, t], data).expect("one mean per cell")
    }

    fn merge(&self, mut outs: Vec<RealArray>) -> RealArray {
        if outs.len() == 1 {
            return outs.pop().expect("one member");
        }
        let k = outs.len();
        let (b, t) = (outs[0].shape()[0], outs[0].shape()[1]);
        let mut data = Vec::with_capacity(b * t * k);
        for c in 0..b * t {
            for o in &outs {
                data.push(o.as_slice()[c]);
            }
        }
        RealArray::new(vec![b, t, k], data).expect("merged heads")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_heads_use_one_trace() {
        let base = EnsembleConfig::new(3, 2, 2);
        let model = SoftTreeModel::new(Objective::Zip, base, HeadLayout::Shared, 5).unwrap();
        assert_eq!(model.members.len(), 1);
        assert_eq!(model.config.num_heads, 2);
        let xs = RealArray::new(vec![2, 2], vec![0.3, -0.2, 1.0, 0.5]).unwrap();
        let (raw, traces) = model.forward(&xs).unwrap();
        assert_eq!(raw.shape(), &[2, 1, 2]);
        assert_eq!(traces.len(), 1);
        // both heads read the same reach probabilities: only the values carry a head axis
        let v = traces[0].values(0, 0, 0);
        assert_eq!(v.len(), 3 * 2);
    }

    #[test]
    fn separate_heads_split_gradients() {
        let base = EnsembleConfig::new(2, 2, 2);
        let mut model = SoftTreeModel::new(Objective::NegativeBinomial, base, HeadLayout::Separate, 5).unwrap();
        assert_eq!(model.members.len(), 2);
        assert_ne!(model.members[0].split_weights, model.members[1].split_weights);
        model.members[1].leaf_weights.as_mut_slice().fill(0.5);
        let xs = RealArray::new(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let (raw, traces) = model.forward(&xs).unwrap();
        assert_eq!(raw.as_slice()[0], 0.0);
        assert!((raw.as_slice()[1] - 1.0).abs() < 1e-12);
        let g = RealArray::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let grads = model.backward(&traces, &xs, &g).unwrap();
        assert!(grads[0].leaf_weights.as_slice().iter().any(|&v| v != 0.0));
        assert!(grads[1].leaf_weights.as_slice().iter().all(|&v| v == 0.0));
        model.check().unwrap();
    }

    #[test]
    fn predict_raw_matches_forward() {
        let base = EnsembleConfig::new(4, 3, 3).with_tasks(2);
        let mut model = SoftTreeModel::new(Objective::Zip, base, HeadLayout::Separate, 1).unwrap();
        for (i, m) in model.members.iter_mut().enumerate() {
            for (j, v) in m.leaf_weights.as_mut_slice().iter_mut().enumerate() {
                *v = ((i * 31 + j) % 7) as f64 * 0.1;
            }
        }
        let xs = RealArray::new(vec![3, 3], vec![0.1, 0.2, -0.3, 1.0, 0.0, -1.0, 0.4, 0.4, 0.4]).unwrap();
        assert_eq!(model.predict_raw(&xs).unwrap(), model.forward(&xs).unwrap().0);
        let nat = model.predict_natural(&xs).unwrap();
        assert_eq!(nat.shape(), &[3, 2, 2]);
    }
}
