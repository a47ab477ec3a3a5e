//! Action abstraction schemes: beta-VAE compression, k-means with
//! moving-average centroids, and a fixed random projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AbstractionError;
use crate::math::nets::{gaussian_from_head, gaussian_kl, gaussian_sample, GaussianNodes};
use crate::math::{Adam, Bind, Graph, Mlp, ParamStore, ParamTree, Tensor};
use crate::rssm::SampleMode;
use crate::scalar::Scalar;

/// Softplus floor for the VAE posterior stddev.
const VAE_MIN_STD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Flattened chunk width `k * a_dim`.
    pub in_dim: usize,
    /// Abstract action width; must compress (`< in_dim`).
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// KL weight.
    pub beta: f64,
    /// Stddev of the Gaussian prior `N(0, sigma_prior^2 I)`.
    pub sigma_prior: f64,
    pub learn_rate: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct VaeMetrics {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Beta-VAE over flattened action chunks.
#[derive(Debug)]
pub struct ActionVae<S> {
    cfg: VaeConfig,
    store: ParamStore<S>,
    enc: Mlp,
    dec: Mlp,
}

impl<S: Scalar> ActionVae<S> {
    pub fn new(cfg: VaeConfig, rng: &mut impl Rng) -> Result<Self, AbstractionError> {
        if cfg.latent_dim >= cfg.in_dim {
            return Err(AbstractionError::Config(format!(
                "compression required: latent_dim {} must be below in_dim {}",
                cfg.latent_dim, cfg.in_dim
            )));
        }
        if cfg.sigma_prior <= 0.0 {
            return Err(AbstractionError::Config("sigma_prior must be > 0".into()));
        }
        let mut store = ParamStore::new();
        let enc = Mlp::init(
            &mut store,
            "enc",
            cfg.in_dim,
            &[cfg.hidden_dim],
            2 * cfg.latent_dim,
            rng,
        );
        let dec = Mlp::init(
            &mut store,
            "dec",
            cfg.latent_dim,
            &[cfg.hidden_dim],
            cfg.in_dim,
            rng,
        );
        Ok(Self {
            cfg,
            store,
            enc,
            dec,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    fn encoder_head(&self, g: &mut Graph<S>, x: crate::math::Node, bind: Bind) -> GaussianNodes {
        let head = self.enc.forward(g, &self.store, x, bind);
        gaussian_from_head(g, head, self.cfg.latent_dim, VAE_MIN_STD)
    }

    /// Encode one flattened chunk. Sample mode draws from the posterior so
    /// the dataset carries local jitter; mean mode is deterministic.
    pub fn encode(&self, chunk: &[S], mode: SampleMode, rng: &mut impl Rng) -> Vec<S> {
        assert_eq!(chunk.len(), self.cfg.in_dim, "chunk width mismatch");
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(chunk));
        let params = self.encoder_head(&mut g, x, Bind::Frozen);
        let z = match mode {
            SampleMode::Mean => params.mean,
            SampleMode::Sample => {
                let noise = g.constant(crate::rssm::normal_tensor(1, self.cfg.latent_dim, rng));
                gaussian_sample(&mut g, params, noise)
            }
        };
        g.value(z).row(0).to_vec()
    }

    /// Reconstruct a flattened chunk from an abstract action.
    pub fn decode(&self, latent: &[S]) -> Vec<S> {
        assert_eq!(latent.len(), self.cfg.latent_dim, "latent width mismatch");
        let mut g = Graph::new();
        let z = g.constant(Tensor::row_vector(latent));
        let out = self.dec.forward(&mut g, &self.store, z, Bind::Frozen);
        g.value(out).row(0).to_vec()
    }

    /// One gradient step on `recon + beta * KL(q || N(0, sigma_prior^2 I))`.
    pub fn train_step(
        &mut self,
        batch: &Tensor<S>,
        rng: &mut impl Rng,
        adam: &mut Adam<S>,
    ) -> Result<VaeMetrics, AbstractionError> {
        if batch.rows() == 0 {
            return Err(AbstractionError::EmptyBatch);
        }
        assert_eq!(batch.cols(), self.cfg.in_dim);
        let b = batch.rows();
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let post = self.encoder_head(&mut g, x, Bind::Trainable);
        let noise = g.constant(crate::rssm::normal_tensor(b, self.cfg.latent_dim, rng));
        let z = gaussian_sample(&mut g, post, noise);
        let recon = self.dec.forward(&mut g, &self.store, z, Bind::Trainable);

        let diff = g.sub(recon, x);
        let sq = g.square(diff);
        let recon_rows = g.sum_cols(sq);
        let recon_mean = g.mean_all(recon_rows);

        let prior = GaussianNodes {
            mean: g.constant(Tensor::zeros(b, self.cfg.latent_dim)),
            std: g.constant(Tensor::filled(
                b,
                self.cfg.latent_dim,
                S::of_f64(self.cfg.sigma_prior),
            )),
        };
        let kl_rows = gaussian_kl(&mut g, post, prior);
        let kl_mean = g.mean_all(kl_rows);
        let kl_term = g.scale(kl_mean, S::of_f64(self.cfg.beta));
        let total = g.add(recon_mean, kl_term);

        let metrics = VaeMetrics {
            recon: g.scalar_value(recon_mean).as_f64(),
            kl: g.scalar_value(kl_mean).as_f64(),
            total: g.scalar_value(total).as_f64(),
        };
        let grads = g.backward(total);
        let pg = g.param_grads(&grads, &self.store);
        adam.step(&mut self.store, pg);
        Ok(metrics)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub in_dim: usize,
    pub n_centroids: usize,
    /// Moving-average rate: `c <- (1 - rho) c + rho * mean(assigned)`.
    pub rho: f64,
}

/// Online k-means over flattened action chunks with moving-average centroids.
#[derive(Debug)]
pub struct ActionKMeans<S> {
    cfg: KMeansConfig,
    centroids: Option<Tensor<S>>,
}

impl<S: Scalar> ActionKMeans<S> {
    pub fn new(cfg: KMeansConfig) -> Result<Self, AbstractionError> {
        if cfg.n_centroids == 0 {
            return Err(AbstractionError::Config("need at least one centroid".into()));
        }
        if !(0.0..=1.0).contains(&cfg.rho) {
            return Err(AbstractionError::Config("rho must lie in [0, 1]".into()));
        }
        Ok(Self {
            cfg,
            centroids: None,
        })
    }

    pub fn config(&self) -> &KMeansConfig {
        &self.cfg
    }

    pub fn centroids(&self) -> Option<&Tensor<S>> {
        self.centroids.as_ref()
    }

    pub fn is_initialised(&self) -> bool {
        self.centroids.is_some()
    }

    /// Fill the centroid table by sampling chunks from the first batch.
    pub fn init_from_batch(
        &mut self,
        batch: &Tensor<S>,
        rng: &mut impl Rng,
    ) -> Result<(), AbstractionError> {
        if batch.rows() == 0 {
            return Err(AbstractionError::EmptyBatch);
        }
        assert_eq!(batch.cols(), self.cfg.in_dim);
        let mut table = Tensor::zeros(self.cfg.n_centroids, self.cfg.in_dim);
        for i in 0..self.cfg.n_centroids {
            let pick = rng.gen_range(0..batch.rows());
            table.row_mut(i).copy_from_slice(batch.row(pick));
        }
        self.centroids = Some(table);
        Ok(())
    }

    /// Nearest centroid by Euclidean distance; ties resolve to the lowest id.
    pub fn assign(&self, chunk: &[S]) -> Result<usize, AbstractionError> {
        let centroids = self.centroids.as_ref().ok_or(AbstractionError::Uninitialised)?;
        assert_eq!(chunk.len(), self.cfg.in_dim);
        let mut best = 0usize;
        let mut best_d = S::infinity();
        for i in 0..centroids.rows() {
            let d: S = centroids
                .row(i)
                .iter()
                .zip(chunk)
                .map(|(&c, &x)| (c - x) * (c - x))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(best)
    }

    /// Moving-average update; centroids with no assignment stay untouched.
    pub fn update(&mut self, batch: &Tensor<S>) -> Result<(), AbstractionError> {
        if batch.rows() == 0 {
            return Err(AbstractionError::EmptyBatch);
        }
        if self.centroids.is_none() {
            return Err(AbstractionError::Uninitialised);
        }
        let k = self.cfg.n_centroids;
        let mut sums = Tensor::zeros(k, self.cfg.in_dim);
        let mut counts = vec![0usize; k];
        for r in 0..batch.rows() {
            let id = self.assign(batch.row(r))?;
            counts[id] += 1;
            for (s, &v) in sums.row_mut(id).iter_mut().zip(batch.row(r)) {
                *s = *s + v;
            }
        }
        let rho = S::of_f64(self.cfg.rho);
        let centroids = self.centroids.as_mut().unwrap();
        for i in 0..k {
            if counts[i] == 0 {
                continue;
            }
            let inv = S::one() / S::from_usize(counts[i]).unwrap();
            for (c, &s) in centroids.row_mut(i).iter_mut().zip(sums.row(i)) {
                *c = (S::one() - rho) * *c + rho * s * inv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Seed for the one-time draw of the projection matrix.
    pub seed: u64,
}

/// Fixed random linear map, frozen at creation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RandomProjection<S> {
    cfg: ProjectionConfig,
    matrix: Tensor<S>, // [out_dim x in_dim]
}

impl<S: Scalar> RandomProjection<S> {
    pub fn new(cfg: ProjectionConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = S::of_f64(1.0 / (cfg.in_dim as f64).sqrt());
        let matrix = Tensor::randn(cfg.out_dim, cfg.in_dim, std, &mut rng);
        Self { cfg, matrix }
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.cfg
    }

    pub fn matrix(&self) -> &Tensor<S> {
        &self.matrix
    }

    pub fn project(&self, chunk: &[S]) -> Vec<S> {
        assert_eq!(chunk.len(), self.cfg.in_dim);
        (0..self.cfg.out_dim)
            .map(|o| {
                self.matrix
                    .row(o)
                    .iter()
                    .zip(chunk)
                    .map(|(&m, &x)| m * x)
                    .sum()
            })
            .collect()
    }
}

/// The configured action abstraction scheme.
#[derive(Debug)]
pub enum ActionAbstractor<S> {
    Vae(ActionVae<S>),
    KMeans(ActionKMeans<S>),
    Projection(RandomProjection<S>),
}

impl<S: Scalar> ActionAbstractor<S> {
    /// Width of the abstract action as consumed by the level-l model:
    /// continuous width for VAE/projection, one-hot width for k-means.
    pub fn action_dim(&self) -> usize {
        match self {
            Self::Vae(v) => v.cfg.latent_dim,
            Self::KMeans(k) => k.cfg.n_centroids,
            Self::Projection(p) => p.cfg.out_dim,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::KMeans(_))
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Self::Vae(v) => v.cfg.in_dim,
            Self::KMeans(k) => k.cfg.in_dim,
            Self::Projection(p) => p.cfg.in_dim,
        }
    }

    /// Abstract one flattened chunk into the model-input vector.
    pub fn encode_model_input(
        &self,
        chunk: &[S],
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<S>, AbstractionError> {
        match self {
            Self::Vae(v) => Ok(v.encode(chunk, mode, rng)),
            Self::KMeans(k) => {
                let id = k.assign(chunk)?;
                let mut one_hot = vec![S::zero(); k.cfg.n_centroids];
                one_hot[id] = S::one();
                Ok(one_hot)
            }
            Self::Projection(p) => Ok(p.project(chunk)),
        }
    }

    /// Serializable snapshot of the abstractor state.
    pub fn to_state(&self) -> AbstractorState<S> {
        match self {
            Self::Vae(v) => AbstractorState::Vae {
                config: v.cfg.clone(),
                params: v.store.to_tree(),
            },
            Self::KMeans(k) => AbstractorState::KMeans {
                config: k.cfg.clone(),
                centroids: k.centroids.clone(),
            },
            Self::Projection(p) => AbstractorState::Projection {
                config: p.cfg.clone(),
                matrix: p.matrix.clone(),
            },
        }
    }

    pub fn from_state(state: AbstractorState<S>) -> Result<Self, AbstractionError> {
        match state {
            AbstractorState::Vae { config, params } => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut vae = ActionVae::new(config, &mut rng)?;
                vae.store
                    .load_tree(&params)
                    .map_err(|e| AbstractionError::Config(e.to_string()))?;
                Ok(Self::Vae(vae))
            }
            AbstractorState::KMeans { config, centroids } => {
                let mut km = ActionKMeans::new(config)?;
                km.centroids = centroids;
                Ok(Self::KMeans(km))
            }
            AbstractorState::Projection { config, matrix } => {
                Ok(Self::Projection(RandomProjection { cfg: config, matrix }))
            }
        }
    }
}

/// Serialized abstractor state for checkpoints.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AbstractorState<S> {
    Vae {
        config: VaeConfig,
        params: ParamTree<S>,
    },
    KMeans {
        config: KMeansConfig,
        centroids: Option<Tensor<S>>,
    },
    Projection {
        config: ProjectionConfig,
        matrix: Tensor<S>,
    },
}
