use std::path::Path;

use diffnet::{
    sinusoidal, Activation, Checkpoint, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore,
    Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{cosine, feasible_windows, DomainWeights, FeasibleWindow};
use crate::error::{read_file, write_file, Error, Result};
use crate::kp::{extract_smooth, KpCatalog, KpSequence};
use crate::motion::MotionSequence;
use crate::text::{DecomposedPrompt, TextEmbedder};

pub const CHECKPOINT_FORMAT: &str = "kineta-aligner/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// One window per decomposed part.
    FineGrained,
    /// A single window over the whole motion, queried by the full text.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignerConfig {
    pub d_text: usize,
    pub hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub sigma_min: f64,
    /// Temperature of the smooth phrases the aligner is trained on.
    pub tau: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: AlignMode,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            d_text: 64,
            hidden: 64,
            d_model: 32,
            heads: 4,
            sigma_min: 0.5,
            tau: 1.0,
            epochs: 200,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            mode: AlignMode::FineGrained,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_text == 0 || self.hidden == 0 || self.d_model == 0 {
            return Err(Error::validation("aligner widths must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::validation(format!(
                "aligner width {} is not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::validation("sigma_min must be positive"));
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::validation("aligner tau, lr and batch must be positive"));
        }
        Ok(())
    }
}

/// Cross-attention block placing one Gaussian per part inside its window.
#[derive(Clone, Debug)]
struct DomainNet {
    text_in: Linear,
    window_in: Linear,
    norm_q: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: Mlp,
    mu_head: Linear,
    sigma_head: Linear,
    d_model: usize,
}

/// Initial σ pre-activation; softplus(2) ≈ 2.1 frames above σ_min.
const SIGMA_BIAS_INIT: f64 = 2.0;

impl DomainNet {
    fn new(store: &mut ParamStore, cfg: &AlignerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let sigma_head = Linear::zeros(store, "domain.sigma_head", d, 1);
        let bias = sigma_head.bias.expect("zeros() has a bias");
        store.value_mut(bias).data_mut()[0] = SIGMA_BIAS_INIT;
        Ok(Self {
            text_in: Linear::new(store, "domain.text_in", cfg.d_text, d, rng),
            window_in: Linear::new(store, "domain.window_in", 4, d, rng),
            norm_q: LayerNorm::new(store, "domain.norm_q", d),
            attn: MultiHeadAttention::new(store, "domain.attn", d, cfg.heads, rng)?,
            norm_ff: LayerNorm::new(store, "domain.norm_ff", d),
            ff: Mlp::new(store, "domain.ff", d, 2 * d, d, Activation::Gelu, rng),
            mu_head: Linear::zeros(store, "domain.mu_head", d, 1),
            sigma_head,
            d_model: d,
        })
    }

    /// Returns `(μ, σ)` as `[P, 1]` nodes.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: Var,
        windows: &[FeasibleWindow],
        t_len: usize,
        sigma_min: f64,
    ) -> Result<(Var, Var)> {
        let p = windows.len();
        let n1 = (p.max(2) - 1) as f64;
        let t = t_len as f64;
        let mut desc = Vec::with_capacity(p * 4);
        for (i, w) in windows.iter().enumerate() {
            desc.extend([w.l / t, w.r / t, w.width() / t, if p == 1 { 0.0 } else { i as f64 / n1 }]);
        }
        let desc = g.constant(Tensor::matrix(p, 4, desc)?);
        let q_text = self.text_in.forward(g, store, text)?;
        let q_win = self.window_in.forward(g, store, desc)?;
        let q = g.add(q_text, q_win)?;

        let frames: Vec<f64> = (0..t_len).map(|j| j as f64).collect();
        let ctx = g.constant(sinusoidal(&frames, self.d_model));
        let mut mask = Vec::with_capacity(p * t_len);
        for w in windows {
            let r = w.frames(t_len);
            mask.extend((0..t_len).map(|j| r.contains(&j)));
        }
        let mask = window_mask(p, t_len, &mask);

        let h = self.norm_q.forward(g, store, q)?;
        let a = self.attn.forward(g, store, h, ctx, Some(&mask))?;
        let x = g.add(q, a)?;
        let h = self.norm_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        let x = g.add(x, f)?;

        let lo = g.constant(Tensor::matrix(p, 1, windows.iter().map(|w| w.l).collect())?);
        let width = g.constant(Tensor::matrix(p, 1, windows.iter().map(|w| w.width()).collect())?);
        let a = self.mu_head.forward(g, store, x)?;
        let s = g.sigmoid(a);
        let s = g.mul(s, width)?;
        let mu = g.add(lo, s)?;

        let b = self.sigma_head.forward(g, store, x)?;
        let sp = g.softplus(b);
        let raw = g.add_scalar(sp, sigma_min);
        // min(raw, width) = width − relu(width − raw)
        let gap = g.sub(width, raw)?;
        let gap = g.relu(gap);
        let sigma = g.sub(width, gap)?;
        Ok((mu, sigma))
    }
}

/// Additive `[rows, keys]` mask from a row-major validity grid.
fn window_mask(rows: usize, keys: usize, valid: &[bool]) -> Tensor {
    let data = valid.iter().map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY }).collect();
    Tensor::matrix(rows, keys, data).expect("grid sized by caller")
}

/// Graph nodes produced by one aligner pass over a prompt.
pub struct AlignerOutputs {
    /// `[P, n_kp]` projected text features.
    pub projected: Var,
    /// `[P, T]` frame weights; zero outside each window.
    pub weights: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Motion-independent parts of the alignment loss for a fixed prompt and
/// sequence length: `loss = ‖weights · kp − projected‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignTargets {
    pub weights: Tensor,
    pub projected: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub per_part: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug)]
pub struct AlignerModel {
    pub config: AlignerConfig,
    pub catalog: KpCatalog,
    pub store: ParamStore,
    pub embedder: TextEmbedder,
    projector: Mlp,
    domain: DomainNet,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format: String,
    vocabulary_version: String,
    config: AlignerConfig,
    catalog: KpCatalog,
}

impl AlignerModel {
    pub fn new(config: AlignerConfig, catalog: KpCatalog) -> Result<Self> {
        config.validate()?;
        catalog.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new("aligner");
        let embedder = TextEmbedder::new(&mut store, "text", config.d_text, &mut rng);
        let projector = Mlp::new(
            &mut store,
            "projector",
            config.d_text,
            config.hidden,
            catalog.len(),
            Activation::Gelu,
            &mut rng,
        );
        let domain = DomainNet::new(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            catalog,
            store,
            embedder,
            projector,
            domain,
        })
    }

    pub fn n_kp(&self) -> usize {
        self.catalog.len()
    }

    /// Texts the aligner sees for a prompt: the parts, or the full text in
    /// full mode.
    pub fn texts(&self, prompt: &DecomposedPrompt) -> Vec<String> {
        match self.config.mode {
            AlignMode::FineGrained => prompt.parts.clone(),
            AlignMode::Full => vec![prompt.full_text.clone()],
        }
    }

    pub fn windows(&self, prompt: &DecomposedPrompt, t_len: usize) -> Result<Vec<FeasibleWindow>> {
        feasible_windows(self.texts(prompt).len(), t_len)
    }

    /// `[P, d_text]` embedding node for the aligner's texts.
    pub fn embed(&self, g: &mut Graph, prompt: &DecomposedPrompt) -> Result<Var> {
        Ok(self.embedder.forward(g, &self.store, &self.texts(prompt))?)
    }

    /// Runs projector and domain net on a `[P, d_text]` text node.
    pub fn forward(&self, g: &mut Graph, text: Var, t_len: usize) -> Result<AlignerOutputs> {
        let p = g.shape(text)[0];
        let windows = feasible_windows(p, t_len)?;
        for w in &windows {
            if w.width() < 1.0 {
                return Err(Error::validation(format!("window [{}, {}] is shorter than one frame", w.l, w.r)));
            }
        }
        let h = self.projector.forward(g, &self.store, text)?;
        let projected = g.tanh(h);
        let (mu, sigma) = self.domain.forward(g, &self.store, text, &windows, t_len, self.config.sigma_min)?;

        let mut frame = Vec::with_capacity(p * t_len);
        let mut valid = Vec::with_capacity(p * t_len);
        for w in &windows {
            let r = w.frames(t_len);
            frame.extend((0..t_len).map(|j| j as f64));
            valid.extend((0..t_len).map(|j| r.contains(&j)));
        }
        let frame = g.constant(Tensor::matrix(p, t_len, frame)?);
        let d = g.sub(frame, mu)?;
        let d2 = g.square(d);
        let s2 = g.square(sigma);
        let s2 = g.scale(s2, 2.0);
        let z = g.div(d2, s2)?;
        let z = g.neg(z);
        let mask = g.constant(window_mask(p, t_len, &valid));
        let logits = g.add(z, mask)?;
        let weights = g.softmax(logits)?;
        Ok(AlignerOutputs {
            projected,
            weights,
            mu,
            sigma,
        })
    }

    /// `Σ_i ‖Ω_i − proj(T_i)‖²` for a `[T, n_kp]` phrase node.
    pub fn loss(&self, g: &mut Graph, out: &AlignerOutputs, kp: Var) -> Result<Var> {
        let omega = g.matmul(out.weights, kp)?;
        let r = g.sub(omega, out.projected)?;
        Ok(g.sum_squares(r))
    }

    /// Full alignment loss of a prompt against a phrase sequence.
    pub fn align_loss(&self, prompt: &DecomposedPrompt, kp: &KpSequence) -> Result<f64> {
        self.check_kp(kp)?;
        let mut g = Graph::new();
        let text = self.embed(&mut g, prompt)?;
        let out = self.forward(&mut g, text, kp.n_frames())?;
        let kp = g.constant(kp.values.clone());
        let loss = self.loss(&mut g, &out, kp)?;
        Ok(g.scalar(loss))
    }

    fn check_kp(&self, kp: &KpSequence) -> Result<()> {
        if kp.n_kp() != self.n_kp() {
            return Err(Error::validation(format!(
                "phrase sequence has {} phrases, aligner expects {}",
                kp.n_kp(),
                self.n_kp()
            )));
        }
        Ok(())
    }

    /// Frame weights and projected features for a prompt, without gradients.
    pub fn targets(&self, prompt: &DecomposedPrompt, t_len: usize) -> Result<AlignTargets> {
        let mut g = Graph::new();
        let text = self.embed(&mut g, prompt)?;
        self.targets_from(&mut g, text, t_len)
    }

    /// Same as [`AlignerModel::targets`] for externally supplied `[P, d_text]`
    /// embeddings.
    pub fn targets_for_embedding(&self, vectors: &Tensor, t_len: usize) -> Result<AlignTargets> {
        if vectors.cols() != self.config.d_text {
            return Err(Error::validation(format!(
                "embedding width {} does not match aligner d_text {}",
                vectors.cols(),
                self.config.d_text
            )));
        }
        let mut g = Graph::new();
        let text = g.constant(vectors.clone());
        self.targets_from(&mut g, text, t_len)
    }

    fn targets_from(&self, g: &mut Graph, text: Var, t_len: usize) -> Result<AlignTargets> {
        let out = self.forward(g, text, t_len)?;
        Ok(AlignTargets {
            weights: g.value(out.weights).clone(),
            projected: g.value(out.projected).clone(),
        })
    }

    pub fn domain_weights(&self, prompt: &DecomposedPrompt, t_len: usize) -> Result<Vec<DomainWeights>> {
        let mut g = Graph::new();
        let text = self.embed(&mut g, prompt)?;
        let out = self.forward(&mut g, text, t_len)?;
        let windows = self.windows(prompt, t_len)?;
        let (w, mu, sigma) = (g.value(out.weights), g.value(out.mu), g.value(out.sigma));
        Ok(windows
            .iter()
            .enumerate()
            .map(|(i, win)| {
                let frames = win.frames(t_len);
                DomainWeights {
                    mu: mu.data()[i],
                    sigma: sigma.data()[i],
                    start: frames.start,
                    weights: w.row_slice(i)[frames].to_vec(),
                }
            })
            .collect())
    }

    pub fn smooth_kp(&self, motion: &MotionSequence) -> Result<KpSequence> {
        extract_smooth(motion, &self.catalog, self.config.tau)
    }

    /// Per-part cosine between `Ω_i` and `proj(T_i)`, and their mean.
    pub fn similarity(&self, prompt: &DecomposedPrompt, motion: &MotionSequence) -> Result<Similarity> {
        let kp = self.smooth_kp(motion)?;
        let t = self.targets(prompt, kp.n_frames())?;
        Ok(similarity_from(&t, &kp))
    }

    /// Guide vectors `proj(T_i) − Ω_i`, one row per part.
    pub fn guide(&self, prompt: &DecomposedPrompt, motion: &MotionSequence) -> Result<Tensor> {
        let kp = self.smooth_kp(motion)?;
        let t = self.targets(prompt, kp.n_frames())?;
        guide_from(&t, &kp)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Metadata {
            format: CHECKPOINT_FORMAT.into(),
            vocabulary_version: self.embedder.vocabulary.version(),
            config: self.config.clone(),
            catalog: self.catalog.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::validation(format!("aligner metadata: {e}")))?;
        let mut ck = Checkpoint::new(text);
        ck.push_store("", &self.store);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Metadata = toml::from_str(&ck.metadata)
            .map_err(|e| Error::parse(0, format!("aligner metadata: {}", e.message())))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!("not an aligner checkpoint: `{}`", meta.format)));
        }
        let mut model = Self::new(meta.config, meta.catalog)?;
        if model.embedder.vocabulary.version() != meta.vocabulary_version {
            return Err(Error::validation("aligner checkpoint was trained with a different vocabulary"));
        }
        ck.load_store("", &mut model.store)?;
        Ok(model)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn checksum(&self) -> Result<String> {
        Ok(self.to_checkpoint()?.checksum())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_checkpoint()?.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::from_bytes(&read_file(path)?)?)
    }
}

/// `[P, n_kp]` weighted phrases `Ω = W · kp`.
pub(crate) fn omega(targets: &AlignTargets, kp: &KpSequence) -> Result<Tensor> {
    let (p, t) = (targets.weights.rows(), targets.weights.cols());
    if kp.n_frames() != t {
        return Err(Error::validation(format!("weights span {t} frames, phrases {}", kp.n_frames())));
    }
    let n = kp.n_kp();
    let mut out = vec![0.0; p * n];
    for i in 0..p {
        for (j, &w) in targets.weights.row_slice(i).iter().enumerate() {
            if w != 0.0 {
                for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(kp.values.row_slice(j)) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(Tensor::matrix(p, n, out)?)
}

pub(crate) fn similarity_from(targets: &AlignTargets, kp: &KpSequence) -> Similarity {
    let om = omega(targets, kp).expect("targets computed for this sequence");
    let per_part: Vec<f64> = (0..om.rows())
        .map(|i| cosine(om.row_slice(i), targets.projected.row_slice(i)))
        .collect();
    let mean = per_part.iter().sum::<f64>() / per_part.len() as f64;
    Similarity { per_part, mean }
}

pub(crate) fn guide_from(targets: &AlignTargets, kp: &KpSequence) -> Result<Tensor> {
    let om = omega(targets, kp)?;
    let data = targets
        .projected
        .data()
        .iter()
        .zip(om.data())
        .map(|(p, o)| p - o)
        .collect();
    Ok(Tensor::new(om.shape(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kp::{default_catalog, extract_hard, KpMode};
    use crate::motion::{render_script, Command, MotionScript, Skeleton, Verb};
    use crate::text::script_to_ground_truth;

    fn model() -> AlignerModel {
        let cfg = AlignerConfig {
            d_text: 16,
            hidden: 16,
            d_model: 16,
            heads: 2,
            ..Default::default()
        };
        AlignerModel::new(cfg, default_catalog(&Skeleton::standard())).unwrap()
    }

    fn record() -> (DecomposedPrompt, MotionSequence) {
        let s = MotionScript::new(vec![
            Command::new(Verb::WalkForward, 20, 1.0),
            Command::new(Verb::Squat, 15, 1.0),
            Command::new(Verb::Wave, 25, 1.0),
        ])
        .unwrap();
        let r = render_script(&s, &Skeleton::standard(), 5).unwrap();
        (script_to_ground_truth(&s), r.motion)
    }

    #[test]
    fn weights_are_normalized_inside_windows() {
        let m = model();
        let (p, motion) = record();
        let t = motion.n_frames();
        let dw = m.domain_weights(&p, t).unwrap();
        let windows = m.windows(&p, t).unwrap();
        for (d, w) in dw.iter().zip(&windows) {
            assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.mu >= w.l && d.mu <= w.r);
            assert!(d.sigma >= 0.5 - 1e-12 && d.sigma <= w.width() + 1e-12);
            assert_eq!(d.frames(), w.frames(t));
        }
        let targets = m.targets(&p, t).unwrap();
        for i in 0..p.len() {
            let row = targets.weights.row_slice(i);
            assert!(row.iter().enumerate().all(|(j, &x)| x == 0.0 || windows[i].frames(t).contains(&j)));
        }
    }

    #[test]
    fn untrained_mu_is_window_center() {
        let m = model();
        let (p, motion) = record();
        for (d, w) in m.domain_weights(&p, motion.n_frames()).unwrap().iter().zip(m.windows(&p, motion.n_frames()).unwrap()) {
            assert!((d.mu - 0.5 * (w.l + w.r)).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_matches_explicit_residual() {
        let m = model();
        let (p, motion) = record();
        let kp = m.smooth_kp(&motion).unwrap();
        let t = m.targets(&p, kp.n_frames()).unwrap();
        let om = omega(&t, &kp).unwrap();
        let want: f64 = om.data().iter().zip(t.projected.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((m.align_loss(&p, &kp).unwrap() - want).abs() < 1e-9);
        assert!(om.data().iter().all(|v| v.abs() <= 1.0));
        let g = guide_from(&t, &kp).unwrap();
        let bound = 2.0 * (m.n_kp() as f64).sqrt();
        for i in 0..g.rows() {
            assert!(g.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt() <= bound);
        }
    }

    #[test]
    fn similarity_is_one_when_projection_matches() {
        let m = model();
        let (p, motion) = record();
        let kp = extract_hard(&motion, &m.catalog).unwrap();
        let mut t = m.targets(&p, kp.n_frames()).unwrap();
        t.projected = omega(&t, &kp).unwrap();
        let s = similarity_from(&t, &kp);
        assert!(s.per_part.iter().all(|&c| (c - 1.0).abs() < 1e-12 || c == 0.0));
        assert!(guide_from(&t, &kp).unwrap().data().iter().all(|&x| x == 0.0));
        t.projected = t.projected.map(|x| -x);
        let s = similarity_from(&t, &kp);
        assert!(s.per_part.iter().all(|&c| (c + 1.0).abs() < 1e-12 || c == 0.0));
        assert_eq!(kp.mode, KpMode::Hard);
    }

    #[test]
    fn full_mode_uses_one_window() {
        let mut m = model();
        m.config.mode = AlignMode::Full;
        let (p, motion) = record();
        let w = m.windows(&p, motion.n_frames()).unwrap();
        assert_eq!(w, vec![FeasibleWindow { l: 0.0, r: motion.n_frames() as f64 }]);
        assert_eq!(m.texts(&p), vec![p.full_text.clone()]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let back = AlignerModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.config, m.config);
        assert_eq!(back.checksum().unwrap(), m.checksum().unwrap());
    }
}
