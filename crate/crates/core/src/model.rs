//! Planner and world model sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::error::Result;
use crate::flow::{FlowConfig, WorldModel};
use crate::planner::{Planner, PlannerConfig, TrajectorySet};
use crate::sim::Command;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub planner: PlannerConfig,
    pub flow: FlowConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub planner: Planner,
    pub world: WorldModel,
    pub params: ParamStore,
}

impl Model {
    /// Fresh Xavier-initialized model; planner parameters are drawn first.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let planner = Planner::new(config.planner.clone(), &mut params, &mut rng)?;
        let pc = &config.planner;
        let world = WorldModel::new(
            config.flow.clone(),
            pc.obs_dim,
            pc.n_views,
            pc.n_scene_queries,
            pc.d_model,
            &mut params,
            &mut rng,
        )?;
        Ok(Self {
            config,
            planner,
            world,
            params,
        })
    }

    /// Inference path: planner only.
    pub fn plan(&self, features: &[Vec<f64>], command: Command) -> Result<TrajectorySet> {
        self.planner.plan(&self.params, features, command)
    }

    /// World latent and pooled view latent for one tick, without gradients.
    pub fn world_latent(&self, features: &[Vec<f64>]) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let scene = self.planner.encode_scene(&mut g, &self.params, features)?;
        let raw = g.constant(self.planner.observation_tensor(features)?);
        let ex = self.world.extract(&mut g, &self.params, raw, scene)?;
        Ok((g.value(ex.z).clone(), g.value(ex.pooled).data().to_vec()))
    }
}
