//! Flow-prediction model: a hierarchical point encoder over scene + query
//! tokens, language conditioning from a learned embedding table, and a
//! per-query transformer denoiser for the diffusion head that predicts
//! 3-step displacement sequences.

use crate::geometry::{Point3, QuerySet, ScenePointCloud};
use crate::rng::Rng;
use crate::scene::{Affordance, DisplacementSequence, Instruction, SceneError};
use crate::tensor::{ParamId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("encoder needs at least {needed} points after downsampling, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-finite value during sampling at diffusion step {k}")]
    NonFiniteSample { k: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

// ---------------------------------------------------------------------------
// config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Query features and language fused after the encoder (default).
    Late,
    /// Language added to every token embedding before the encoder.
    Early,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaLevel {
    /// Downsampling ratio: keep n/ratio centroids.
    pub ratio: usize,
    /// Ball-query radius in meters.
    pub radius: f64,
    /// Max neighbors per group.
    pub k: usize,
    /// Output feature width.
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Point feature width at the full-resolution level.
    pub d: usize,
    pub d_lang: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_ratio: usize,
    /// Sinusoidal position-encoding frequency count per coordinate.
    pub pos_freqs: usize,
    /// Displacement steps per clip.
    pub m: usize,
    /// Diffusion step count.
    pub k_steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
    /// Min-SNR loss clamp.
    pub gamma_minsnr: f64,
    pub fusion: Fusion,
    pub sa_levels: Vec<SaLevel>,
    /// Known object categories for the language table; everything else maps
    /// to a shared out-of-vocabulary row.
    pub vocab: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            d_lang: 16,
            d_model: 64,
            heads: 4,
            layers: 2,
            ff_ratio: 2,
            pos_freqs: 4,
            m: 3,
            k_steps: 100,
            beta_lo: 1e-4,
            beta_hi: 0.02,
            gamma_minsnr: 5.0,
            fusion: Fusion::Late,
            sa_levels: vec![
                SaLevel { ratio: 4, radius: 0.12, k: 16, width: 48 },
                SaLevel { ratio: 4, radius: 0.3, k: 16, width: 64 },
            ],
            vocab: [
                "executor", "oven", "cup", "box", "device", "bowl", "apple", "knife", "mug",
                "hook", "table", "block",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl ModelConfig {
    /// A deliberately tiny configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 8,
            d_lang: 6,
            d_model: 16,
            heads: 2,
            layers: 1,
            ff_ratio: 2,
            pos_freqs: 2,
            m: 3,
            k_steps: 10,
            sa_levels: vec![SaLevel { ratio: 2, radius: 0.3, k: 4, width: 12 }],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.k_steps == 0 {
            return bad("k_steps must be >= 1".into());
        }
        if !(0.0 < self.beta_lo && self.beta_lo <= self.beta_hi && self.beta_hi < 1.0) {
            return bad(format!("betas must satisfy 0 < {} <= {} < 1", self.beta_lo, self.beta_hi));
        }
        if self.gamma_minsnr <= 0.0 {
            return bad("gamma_minsnr must be positive".into());
        }
        if self.m == 0 || self.pos_freqs == 0 || self.layers == 0 {
            return bad("m, pos_freqs, layers must be >= 1".into());
        }
        if self.sa_levels.is_empty() {
            return bad("at least one set-abstraction level required".into());
        }
        for (i, l) in self.sa_levels.iter().enumerate() {
            if l.ratio == 0 || l.k == 0 || l.radius <= 0.0 || l.width == 0 {
                return bad(format!("sa level {i}: ratio/k/width >= 1 and radius > 0 required"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// noise schedule

/// Linear-beta DDPM schedule; indices are 1-based diffusion steps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ModelConfig) -> Result<NoiseSchedule, ModelError> {
        cfg.validate()?;
        let k = cfg.k_steps;
        let beta: Vec<f64> = (0..k)
            .map(|i| {
                if k == 1 {
                    cfg.beta_lo
                } else {
                    cfg.beta_lo + (cfg.beta_hi - cfg.beta_lo) * i as f64 / (k - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(k);
        let mut prod = 1.0;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        // schedule invariants by construction; assert anyway so a broken
        // edit fails loudly
        assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]), "alpha_bar must strictly decrease");
        assert!(alpha_bar.iter().all(|&a| 0.0 < a && a < 1.0));
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn k_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k - 1]
    }

    /// Posterior noise std for ancestral sampling; zero at k = 1.
    pub fn sigma(&self, k: usize) -> f64 {
        if k == 1 {
            return 0.0;
        }
        let ab_prev = self.alpha_bar[k - 2];
        (self.beta(k) * (1.0 - ab_prev) / (1.0 - self.alpha_bar(k))).sqrt()
    }

    pub fn snr(&self, k: usize) -> f64 {
        self.alpha_bar(k) / (1.0 - self.alpha_bar(k))
    }

    /// Min-SNR diffusion loss weight: min(SNR, gamma) / SNR.
    pub fn minsnr_weight(&self, k: usize, gamma: f64) -> f64 {
        let snr = self.snr(k);
        snr.min(gamma) / snr
    }

    /// Forward diffusion: x_k = sqrt(ab) x0 + sqrt(1 - ab) eps.
    pub fn q_sample(&self, x0: &[f64], k: usize, eps: &[f64]) -> Vec<f64> {
        assert_eq!(x0.len(), eps.len(), "q_sample: x0/eps length mismatch");
        let ab = self.alpha_bar(k);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect()
    }

    /// One-step x0 estimate from x_k and predicted noise.
    pub fn predict_x0(&self, x_k: &Tensor, k: usize, eps_hat: &Tensor) -> Tensor {
        let ab = self.alpha_bar(k);
        x_k.sub(&eps_hat.scale((1.0 - ab).sqrt())).scale(1.0 / ab.sqrt())
    }
}

// ---------------------------------------------------------------------------
// geometric neighborhood structure (outside autodiff)

fn centroid(points: &[Point3]) -> Point3 {
    let mut c = Point3::ZERO;
    for p in points {
        c = c.add(p);
    }
    c.scale(1.0 / points.len() as f64)
}

/// Farthest-point sampling with a canonical start: the point nearest the
/// cloud centroid. The selected positions are therefore invariant to input
/// permutation (up to exact distance ties).
fn fps(points: &[Point3], n_out: usize) -> Vec<usize> {
    let n = points.len();
    let n_out = n_out.min(n);
    let c = centroid(points);
    let start = (0..n)
        .min_by(|&a, &b| points[a].dist(&c).partial_cmp(&points[b].dist(&c)).unwrap())
        .unwrap();
    let mut chosen = Vec::with_capacity(n_out);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..n_out {
        chosen.push(cur);
        let mut far = 0usize;
        let mut far_d = -1.0;
        for i in 0..n {
            let d = points[i].dist(&points[cur]);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far_d {
                far_d = best[i];
                far = i;
            }
        }
        cur = far;
    }
    chosen
}

/// Up to `k` in-radius neighbors per centroid, nearest first, padded by
/// repetition so every group has exactly `k` members (max-pool is
/// unaffected). Falls back to the single nearest point when the ball is
/// empty.
fn ball_groups(points: &[Point3], centers: &[usize], radius: f64, k: usize) -> Vec<Vec<usize>> {
    centers
        .iter()
        .map(|&ci| {
            let c = points[ci];
            let mut nb: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let d = p.dist(&c);
                    (d <= radius).then_some((d, i))
                })
                .collect();
            nb.sort_by(|a, b| a.partial_cmp(b).unwrap());
            nb.truncate(k);
            if nb.is_empty() {
                let i = (0..points.len())
                    .min_by(|&a, &b| points[a].dist(&c).partial_cmp(&points[b].dist(&c)).unwrap())
                    .unwrap();
                nb.push((points[i].dist(&c), i));
            }
            let mut idx: Vec<usize> = nb.iter().map(|&(_, i)| i).collect();
            while idx.len() < k {
                idx.push(idx[0]);
            }
            idx
        })
        .collect()
}

/// Three nearest deep points per shallow point with inverse-square-distance
/// weights, for feature propagation.
fn interp_neighbors(shallow: &[Point3], deep: &[Point3]) -> (Vec<usize>, Vec<f64>) {
    let kn = 3.min(deep.len());
    let mut idx = Vec::with_capacity(shallow.len() * 3);
    let mut w = Vec::with_capacity(shallow.len() * 3);
    for p in shallow {
        let mut nb: Vec<(f64, usize)> =
            deep.iter().enumerate().map(|(i, q)| (p.dist(q), i)).collect();
        nb.sort_by(|a, b| a.partial_cmp(b).unwrap());
        nb.truncate(kn);
        let raw: Vec<f64> = nb.iter().map(|&(d, _)| 1.0 / (d * d + 1e-8)).collect();
        let total: f64 = raw.iter().sum();
        for j in 0..3 {
            let (i, weight) = if j < kn { (nb[j].1, raw[j] / total) } else { (nb[0].1, 0.0) };
            idx.push(i);
            w.push(weight);
        }
    }
    (idx, w)
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct SaParams {
    mlp1: Linear,
    mlp2: Linear,
    fp: Linear,
}

#[derive(Debug, Clone)]
struct LayerParams {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct ModelParams {
    scene_embed: Linear,
    query_embed: Linear,
    role_embed: ParamId,
    action_table: ParamId,
    tool_table: ParamId,
    target_table: ParamId,
    lang_to_token: Option<Linear>, // early fusion only
    sa: Vec<SaParams>,
    fuse1: Linear,
    fuse2: Linear,
    x_embed: Linear,
    layers: Vec<LayerParams>,
    head: Linear,
}

fn init_linear(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Linear {
    let scale = (2.0 / fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.normal() * scale).collect();
    Linear {
        w: store.add(format!("{name}.w"), vec![fan_in, fan_out], w),
        b: store.add(format!("{name}.b"), vec![fan_out], vec![0.0; fan_out]),
    }
}

fn init_table(store: &mut ParamStore, rng: &mut Rng, name: &str, rows: usize, cols: usize) -> ParamId {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * 0.1).collect();
    store.add(name, vec![rows, cols], data)
}

fn linear(store: &ParamStore, l: &Linear, x: &Tensor) -> Tensor {
    // x: (n, fan_in) -> (n, fan_out)
    x.matmul(&store.get(l.w)).add(&store.get(l.b).reshape(vec![1, store.get(l.b).data().len()]))
}

// ---------------------------------------------------------------------------
// model

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    p: ModelParams,
}

fn sinusoid(value: f64, dims: usize) -> Vec<f64> {
    // standard transformer step encoding
    (0..dims)
        .map(|i| {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dims as f64);
            if i % 2 == 0 { (value * freq).sin() } else { (value * freq).cos() }
        })
        .collect()
}

fn gamma_encode(p: &Point3, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * freqs);
    for c in [p.x, p.y, p.z] {
        for j in 0..freqs {
            let f = (1 << j) as f64 * std::f64::consts::PI;
            out.push((c * f).sin());
            out.push((c * f).cos());
        }
    }
    out
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, 0x0de1);
        let d = cfg.d;
        let scene_embed = init_linear(&mut store, &mut rng, "embed.scene", 6, d);
        let query_embed =
            init_linear(&mut store, &mut rng, "embed.query", 3 + 6 * cfg.pos_freqs, d);
        let role_embed = init_table(&mut store, &mut rng, "embed.role", 2, d);
        let v = cfg.vocab.len() + 1; // + shared OOV row
        let action_table = init_table(&mut store, &mut rng, "lang.action", Affordance::ALL.len(), cfg.d_lang);
        let tool_table = init_table(&mut store, &mut rng, "lang.tool", v, cfg.d_lang);
        let target_table = init_table(&mut store, &mut rng, "lang.target", v, cfg.d_lang);
        let lang_to_token = match cfg.fusion {
            Fusion::Early => Some(init_linear(&mut store, &mut rng, "lang.to_token", cfg.d_lang, d)),
            Fusion::Late => None,
        };
        let mut sa = Vec::new();
        let mut w_in = d;
        for (i, level) in cfg.sa_levels.iter().enumerate() {
            let mlp1 = init_linear(&mut store, &mut rng, &format!("sa{i}.mlp1"), w_in + 3, level.width);
            let mlp2 = init_linear(&mut store, &mut rng, &format!("sa{i}.mlp2"), level.width, level.width);
            // fp runs shallow-ward: the incoming deep features are this
            // level's own output (either its SA output at the deepest level,
            // or the deeper fp's output, which is projected back to this
            // level's width), concatenated with the skip connection.
            let fp = init_linear(&mut store, &mut rng, &format!("sa{i}.fp"), level.width + w_in, w_in);
            sa.push(SaParams { mlp1, mlp2, fp });
            w_in = level.width;
        }
        let fuse_in = match cfg.fusion {
            Fusion::Late => d + cfg.d_lang,
            Fusion::Early => d,
        };
        let fuse1 = init_linear(&mut store, &mut rng, "fuse.1", fuse_in, cfg.d_model);
        let fuse2 = init_linear(&mut store, &mut rng, "fuse.2", cfg.d_model, cfg.d_model);
        let x_embed = init_linear(&mut store, &mut rng, "denoise.x_embed", 3, cfg.d_model);
        let mut layers = Vec::new();
        for i in 0..cfg.layers {
            let pre = format!("denoise.layer{i}");
            layers.push(LayerParams {
                wq: init_linear(&mut store, &mut rng, &format!("{pre}.wq"), cfg.d_model, cfg.d_model),
                wk: init_linear(&mut store, &mut rng, &format!("{pre}.wk"), cfg.d_model, cfg.d_model),
                wv: init_linear(&mut store, &mut rng, &format!("{pre}.wv"), cfg.d_model, cfg.d_model),
                wo: init_linear(&mut store, &mut rng, &format!("{pre}.wo"), cfg.d_model, cfg.d_model),
                ff1: init_linear(&mut store, &mut rng, &format!("{pre}.ff1"), cfg.d_model, cfg.ff_ratio * cfg.d_model),
                ff2: init_linear(&mut store, &mut rng, &format!("{pre}.ff2"), cfg.ff_ratio * cfg.d_model, cfg.d_model),
            });
        }
        let head = init_linear(&mut store, &mut rng, "denoise.head", cfg.d_model, 3);
        let p = ModelParams {
            scene_embed,
            query_embed,
            role_embed,
            action_table,
            tool_table,
            target_table,
            lang_to_token,
            sa,
            fuse1,
            fuse2,
            x_embed,
            layers,
            head,
        };
        Ok(Model { cfg, store, p })
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(&self.cfg).expect("validated config")
    }

    fn noun_index(&self, name: &str) -> usize {
        self.cfg.vocab.iter().position(|v| v == name).unwrap_or(self.cfg.vocab.len())
    }

    /// Summed action + tool-category + target-category embedding, (1, d_lang).
    pub fn embed_language(&self, instruction: &Instruction) -> Tensor {
        let a = Affordance::ALL.iter().position(|&x| x == instruction.action).unwrap();
        let t = self.store.get(self.p.action_table).gather_rows(&[a]);
        let tool = self
            .store
            .get(self.p.tool_table)
            .gather_rows(&[self.noun_index(&instruction.tool_desc)]);
        let target = self
            .store
            .get(self.p.target_table)
            .gather_rows(&[self.noun_index(&instruction.target_desc)]);
        t.add(&tool).add(&target)
    }

    /// Token embeddings over the union point set (scene then queries).
    fn embed_points(&self, scene: &ScenePointCloud, queries: &QuerySet, z_l: &Tensor) -> Tensor {
        let n_s = scene.len();
        let mut sdata = Vec::with_capacity(n_s * 6);
        for (p, c) in scene.points.iter().zip(&scene.colors) {
            sdata.extend_from_slice(&[p.x, p.y, p.z, c[0], c[1], c[2]]);
        }
        let s_tok = linear(&self.store, &self.p.scene_embed, &Tensor::from_vec(vec![n_s, 6], sdata));

        let qpts = queries.all();
        let n_q = qpts.len();
        let qdim = 3 + 6 * self.cfg.pos_freqs;
        let mut qdata = Vec::with_capacity(n_q * qdim);
        for p in &qpts {
            qdata.extend_from_slice(&[p.x, p.y, p.z]);
            qdata.extend(gamma_encode(p, self.cfg.pos_freqs));
        }
        let q_tok = linear(&self.store, &self.p.query_embed, &Tensor::from_vec(vec![n_q, qdim], qdata));
        let role_rows: Vec<usize> =
            queries.role_mask().iter().map(|&r| if r == 1 { 0 } else { 1 }).collect();
        let q_tok = q_tok.add(&self.store.get(self.p.role_embed).gather_rows(&role_rows));

        let mut tokens = Tensor::concat(&[s_tok, q_tok], 0);
        if let Some(l) = &self.p.lang_to_token {
            let inject = linear(&self.store, l, z_l); // (1, d)
            tokens = tokens.add(&inject.broadcast_to(vec![n_s + n_q, self.cfg.d]));
        }
        tokens
    }

    /// Hierarchical encode + propagate back to full resolution.
    fn encode_decode(&self, positions: &[Point3], f0: Tensor) -> Result<Tensor, ModelError> {
        let mut level_pos: Vec<Vec<Point3>> = vec![positions.to_vec()];
        let mut feats: Vec<Tensor> = vec![f0];
        for (li, level) in self.cfg.sa_levels.iter().enumerate() {
            let in_pos = level_pos.last().unwrap().clone();
            let n_out = (in_pos.len() / level.ratio).max(1);
            if n_out < 3 {
                return Err(ModelError::TooFewPoints { needed: 3 * level.ratio, got: in_pos.len() });
            }
            let centers = fps(&in_pos, n_out);
            let groups = ball_groups(&in_pos, &centers, level.radius, level.k);
            let flat: Vec<usize> = groups.iter().flatten().copied().collect();
            let w_in = feats.last().unwrap().shape()[1];
            let gathered = feats.last().unwrap().gather_rows(&flat); // (n_out*k, w_in)
            let mut rel = Vec::with_capacity(flat.len() * 3);
            for (g, &ci) in groups.iter().zip(&centers) {
                let c = in_pos[ci];
                for &i in g {
                    let d = in_pos[i].sub(&c);
                    rel.extend_from_slice(&[d.x, d.y, d.z]);
                }
            }
            let rel = Tensor::from_vec(vec![flat.len(), 3], rel);
            let h = Tensor::concat(&[gathered, rel], 1); // (n_out*k, w_in+3)
            let h = linear(&self.store, &self.p.sa[li].mlp1, &h).gelu();
            let h = linear(&self.store, &self.p.sa[li].mlp2, &h).gelu();
            let h = h.reshape(vec![centers.len(), level.k, level.width]).max_axis(1);
            let h = h.reshape(vec![centers.len(), level.width]);
            let _ = w_in;
            level_pos.push(centers.iter().map(|&i| in_pos[i]).collect());
            feats.push(h);
        }
        // propagate deepest-to-shallowest with skip connections
        let mut deep = feats.pop().unwrap();
        for li in (0..self.cfg.sa_levels.len()).rev() {
            let shallow_pos = &level_pos[li];
            let deep_pos = &level_pos[li + 1];
            let skip = feats.pop().unwrap();
            let (idx, w) = interp_neighbors(shallow_pos, deep_pos);
            let wd = deep.shape()[1];
            let gathered = deep.gather_rows(&idx).reshape(vec![shallow_pos.len(), 3, wd]);
            let weights = Tensor::from_vec(vec![shallow_pos.len(), 3, 1], w);
            let interp = gathered
                .mul(&weights.broadcast_to(vec![shallow_pos.len(), 3, wd]))
                .sum_axis(1)
                .reshape(vec![shallow_pos.len(), wd]);
            let cat = Tensor::concat(&[interp, skip], 1);
            deep = linear(&self.store, &self.p.sa[li].fp, &cat).gelu();
        }
        Ok(deep) // (n_tokens, d)
    }

    /// Per-query conditioning tokens C, shape (n_q, d_model): encoder
    /// features at the query tokens fused with the language embedding.
    pub fn condition(
        &self,
        scene: &ScenePointCloud,
        queries: &QuerySet,
        instruction: &Instruction,
    ) -> Result<Tensor, ModelError> {
        let z_l = self.embed_language(instruction);
        let tokens = self.embed_points(scene, queries, &z_l);
        let mut positions = scene.points.clone();
        positions.extend(queries.all());
        let h = self.encode_decode(&positions, tokens)?;
        let n_q = queries.len();
        let q_idx: Vec<usize> = (scene.len()..scene.len() + n_q).collect();
        let h_q = h.gather_rows(&q_idx); // (n_q, d)
        let fused_in = match self.cfg.fusion {
            Fusion::Late => Tensor::concat(&[h_q, z_l.broadcast_to(vec![n_q, self.cfg.d_lang])], 1),
            Fusion::Early => h_q,
        };
        let c = linear(&self.store, &self.p.fuse1, &fused_in).gelu();
        Ok(linear(&self.store, &self.p.fuse2, &c))
    }

    /// Predict the noise in `x_k` (shape (n_q, m, 3)) given per-query
    /// conditioning tokens. Each query forms its own short sequence
    /// [c_cond; x^1..x^m] with shared weights across queries.
    pub fn denoise(&self, x_k: &Tensor, k: usize, cond: &Tensor) -> Tensor {
        let n_q = cond.shape()[0];
        let m = self.cfg.m;
        let dm = self.cfg.d_model;
        assert_eq!(x_k.shape(), &[n_q, m, 3], "denoise: x_k shape");
        let x_tok = linear(&self.store, &self.p.x_embed, &x_k.reshape(vec![n_q * m, 3]))
            .reshape(vec![n_q, m, dm]);
        let c_tok = cond.reshape(vec![n_q, 1, dm]);
        let mut t = Tensor::concat(&[c_tok, x_tok], 1); // (n_q, m+1, dm)
        let step = Tensor::from_vec(vec![1, 1, dm], sinusoid(k as f64, dm));
        t = t.add(&step.broadcast_to(vec![n_q, m + 1, dm]));

        let seq = m + 1;
        let h = self.cfg.heads;
        let dh = dm / h;
        for lp in &self.p.layers {
            // pre-LN multi-head self-attention over each query's sequence
            let ln = t.layer_norm(2, 1e-5).reshape(vec![n_q * seq, dm]);
            let split = |l: &Linear| {
                linear(&self.store, l, &ln)
                    .reshape(vec![n_q, seq, h, dh])
                    .permute(&[0, 2, 1, 3])
                    .reshape(vec![n_q * h, seq, dh])
            };
            let (q, kk, v) = (split(&lp.wq), split(&lp.wk), split(&lp.wv));
            let att = q
                .bmm(&kk.permute(&[0, 2, 1]))
                .scale(1.0 / (dh as f64).sqrt())
                .softmax(2);
            let o = att
                .bmm(&v)
                .reshape(vec![n_q, h, seq, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(vec![n_q * seq, dm]);
            let o = linear(&self.store, &lp.wo, &o).reshape(vec![n_q, seq, dm]);
            t = t.add(&o);
            let ln2 = t.layer_norm(2, 1e-5).reshape(vec![n_q * seq, dm]);
            let ff = linear(&self.store, &lp.ff2, &linear(&self.store, &lp.ff1, &ln2).gelu())
                .reshape(vec![n_q, seq, dm]);
            t = t.add(&ff);
        }
        let steps = t.slice(1, 1, seq).layer_norm(2, 1e-5).reshape(vec![n_q * m, dm]);
        let x0_hat = linear(&self.store, &self.p.head, &steps).reshape(vec![n_q, m, 3]);
        // The head predicts the clean signal, which is smooth and has a
        // k-independent scale; converting it to the noise estimate
        // analytically avoids making the network fit a map whose slope
        // grows like 1/sqrt(1 - alpha_bar) as k -> 1.
        let ab = self.schedule().alpha_bar(k);
        x_k.sub(&x0_hat.scale(ab.sqrt())).scale(1.0 / (1.0 - ab).sqrt())
    }

    /// Ancestral DDPM sampling of a displacement sequence for the given
    /// conditioning. Deterministic per seed.
    pub fn sample_flow(
        &self,
        cond: &Tensor,
        role_mask: Vec<u8>,
        seed: u64,
    ) -> Result<DisplacementSequence, ModelError> {
        let sched = self.schedule();
        let n_q = cond.shape()[0];
        let m = self.cfg.m;
        let mut rng = Rng::derive(seed, 0x5a5a);
        let mut x: Vec<f64> = rng.normal_vec(n_q * m * 3);
        for k in (1..=sched.k_steps()).rev() {
            let xt = Tensor::from_vec(vec![n_q, m, 3], x.clone());
            let eps_hat = self.denoise(&xt, k, cond);
            let (a, ab, b) = (sched.alpha(k), sched.alpha_bar(k), sched.beta(k));
            let coef = b / (1.0 - ab).sqrt();
            let sigma = sched.sigma(k);
            let inv_sqrt_a = 1.0 / a.sqrt();
            let eh = eps_hat.data();
            for i in 0..x.len() {
                let z = if k > 1 { rng.normal() } else { 0.0 };
                x[i] = inv_sqrt_a * (x[i] - coef * eh[i]) + sigma * z;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteSample { k });
            }
        }
        Ok(DisplacementSequence::new(x, n_q, m, role_mask)?)
    }
}
