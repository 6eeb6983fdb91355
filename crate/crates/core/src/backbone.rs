//! The latent forecasting backbone: a small dual-branch transformer whose
//! textual branch cross-attends to principal embeddings of a vocabulary
//! matrix, trained with per-block feature regularization, output matching,
//! and supervised MSE.
//!
//! The transformer blocks are randomly initialized at desk scale; the
//! embedding matrix is a seeded synthetic stand-in loaded from file. The
//! architecture and losses follow the cross-modal alignment recipe exactly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::market::WindowPair;

/// Architecture and loss weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub heads: usize,
    pub n_blocks: usize,
    /// Retained principal components of the embedding matrix.
    pub pca_k: usize,
    /// Per-block feature-loss decay γ; block n is weighted γ^(N-n).
    pub gamma: f64,
    pub w_sup: f64,
    pub w_feat: f64,
    pub w_out: f64,
    /// MLP hidden width inside each block.
    pub hidden: usize,
    /// Input feature channels per bar.
    pub input_features: usize,
    /// Window length T.
    pub t: usize,
    /// Forecast horizon T'.
    pub horizon: usize,
    /// Rows of the synthetic embedding matrix.
    pub vocab_rows: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            n_blocks: 2,
            pca_k: 8,
            gamma: 0.5,
            w_sup: 1.0,
            w_feat: 0.1,
            w_out: 0.1,
            hidden: 64,
            input_features: 6,
            t: 10,
            horizon: 10,
            vocab_rows: 64,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Parameter("n_blocks must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Parameter("gamma must be in (0, 1]".into()));
        }
        if self.pca_k == 0 || self.pca_k > self.vocab_rows.min(self.d_model) {
            return Err(Error::Parameter(format!(
                "pca_k {} must be in [1, min(vocab_rows, d_model)]",
                self.pca_k
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// A vocabulary-like matrix of embedding rows.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    rows: usize,
    width: usize,
    seed: u64,
}

impl EmbeddingMatrix {
    /// Seeded synthetic embedding matrix with mild cluster structure.
    pub fn synth(seed: u64, rows: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = 4.max(rows / 16);
        let centers: Vec<Vec<f64>> = (0..clusters)
            .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut data = Array2::zeros((rows, width));
        for i in 0..rows {
            let center = &centers[i % clusters];
            for j in 0..width {
                data[[i, j]] = center[j] + rng.gen_range(-0.2..0.2);
            }
        }
        Self { rows: data, seed }
    }

    /// Binary rows with a JSON header line: `{rows, width, seed}\n<f64 LE>`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = EmbeddingHeader {
            rows: self.rows.nrows(),
            width: self.rows.ncols(),
            seed: self.seed,
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        for v in self.rows.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Schema("embedding file missing header line".into()))?;
        let header: EmbeddingHeader = serde_json::from_slice(&bytes[..newline])?;
        let body = &bytes[newline + 1..];
        if body.len() != header.rows * header.width * 8 {
            return Err(Error::Schema("embedding file body length mismatch".into()));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            rows: Array2::from_shape_vec((header.rows, header.width), values)
                .map_err(|e| Error::Schema(e.to_string()))?,
            seed: header.seed,
        })
    }
}

/// Top-k principal directions of a mean-centered matrix.
#[derive(Debug, Clone)]
pub struct PcaResult {
    /// k × d, orthonormal rows, ordered by decreasing eigenvalue.
    pub basis: Array2<f64>,
    /// 1 × d column means.
    pub mean: Array2<f64>,
    pub eigenvalues: Vec<f64>,
}

impl PcaResult {
    /// Coordinates of `rows` in the principal basis (rows × k).
    pub fn project(&self, rows: &Array2<f64>) -> Array2<f64> {
        (rows - &self.mean).dot(&self.basis.t())
    }

    /// Back-projection of `rows` through the retained basis.
    pub fn reconstruct(&self, rows: &Array2<f64>) -> Array2<f64> {
        self.project(rows).dot(&self.basis) + &self.mean
    }

    /// The principal embeddings D̂: directions scaled by component spread,
    /// living in the original embedding space (k × d).
    pub fn principal_embeddings(&self) -> Array2<f64> {
        let mut out = self.basis.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let scale = self.eigenvalues[i].max(0.0).sqrt();
            row.mapv_inplace(|v| v * scale);
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvector columns), unsorted.
fn jacobi_eigen(sym: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = sym.nrows();
    let mut a = sym.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[[i, i]]).collect();
    (eigenvalues, v)
}

/// PCA of the mean-centered matrix, retaining the top-k directions.
pub fn pca_reduce(matrix: &Array2<f64>, k: usize) -> Result<PcaResult> {
    let (rows, d) = matrix.dim();
    if k == 0 || k > rows.min(d) {
        return Err(Error::Parameter(format!(
            "pca k = {k} must be in [1, min(rows = {rows}, width = {d})]"
        )));
    }
    let mean = matrix.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
    let centered = matrix - &mean;
    let cov = centered.t().dot(&centered) / rows as f64;
    let (eigenvalues, vectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    let mut basis = Array2::zeros((k, d));
    let mut top = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        for j in 0..d {
            basis[[row, j]] = vectors[[j, idx]];
        }
        top.push(eigenvalues[idx]);
    }
    Ok(PcaResult {
        basis,
        mean,
        eigenvalues: top,
    })
}

/// Ordered named parameter tensors with flat-vector views for checkpoints
/// and finite-difference probes.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub entries: Vec<(String, Array2<f64>)>,
}

impl ParamSet {
    pub fn init(shapes: &[(String, (usize, usize))], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = shapes
            .iter()
            .map(|(name, (r, c))| {
                let (r, c) = (*r, *c);
                let scale = (1.0 / r as f64).sqrt();
                let data = Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale));
                (name.clone(), data)
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, a)| a.iter().cloned())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, array) in self.entries.iter_mut() {
            for v in array.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

fn param_shapes(cfg: &BackboneConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let mut shapes = vec![
        ("embed_w".to_string(), (cfg.input_features, d)),
        ("pos".to_string(), (cfg.t, d)),
    ];
    let attn = |prefix: &str, kv_width: usize, shapes: &mut Vec<(String, (usize, usize))>| {
        for h in 0..cfg.heads {
            shapes.push((format!("{prefix}_wq{h}"), (d, dh)));
            shapes.push((format!("{prefix}_wk{h}"), (kv_width, dh)));
            shapes.push((format!("{prefix}_wv{h}"), (kv_width, dh)));
        }
        shapes.push((format!("{prefix}_wo"), (d, d)));
    };
    attn("time_embed", d, &mut shapes);
    attn("cross", d, &mut shapes);
    for n in 0..cfg.n_blocks {
        for branch in ["time", "text"] {
            attn(&format!("block{n}_{branch}"), d, &mut shapes);
            shapes.push((format!("block{n}_{branch}_mlp_w1"), (d, cfg.hidden)));
            shapes.push((format!("block{n}_{branch}_mlp_b1"), (1, cfg.hidden)));
            shapes.push((format!("block{n}_{branch}_mlp_w2"), (cfg.hidden, d)));
            shapes.push((format!("block{n}_{branch}_mlp_b2"), (1, d)));
            shapes.push((format!("proj{n}_{branch}"), (d, d)));
        }
    }
    shapes.push(("head_time".to_string(), (cfg.t * d, cfg.horizon)));
    shapes.push(("head_text".to_string(), (cfg.t * d, cfg.horizon)));
    shapes
}

/// Temporal/textual forecasts plus the per-block projected features the
/// training losses consume.
#[derive(Debug, Clone)]
pub struct ForecastPair {
    pub y_time: Vec<f64>,
    pub y_text: Vec<f64>,
    /// Per-block (projected time features, projected text features).
    pub block_features: Vec<(Array2<f64>, Array2<f64>)>,
}

/// Feature regularization: `Σ_n γ^(N-n) · L1(proj_text^n, proj_time^n)`
/// over mean-reduced L1 terms, with blocks 1-indexed.
pub fn loss_feature(block_features: &[(Array2<f64>, Array2<f64>)], gamma: f64) -> f64 {
    let n_blocks = block_features.len();
    block_features
        .iter()
        .enumerate()
        .map(|(i, (time, text))| {
            let weight = gamma.powi((n_blocks - (i + 1)) as i32);
            let l1 = (time - text).mapv(f64::abs).mean().unwrap_or(0.0);
            weight * l1
        })
        .sum()
}

/// Output matching: mean L1 between the two branch forecasts.
pub fn loss_output(pair: &ForecastPair) -> f64 {
    pair.y_time
        .iter()
        .zip(&pair.y_text)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pair.y_time.len() as f64
}

struct ForwardVars {
    y_time: Var,
    y_text: Var,
    x_time: Var,
    block_features: Vec<(Var, Var)>,
}

/// Epoch-level training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

/// Renders training curves as `epoch,train_loss,val_mse` CSV.
pub fn curves_to_csv(curves: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,val_mse\n");
    for c in curves {
        out.push_str(&format!("{},{},{}\n", c.epoch, c.train_loss, c.val_mse));
    }
    out
}

/// One training/forecast input: normalized bar features and target.
#[derive(Debug, Clone)]
pub struct BackboneExample {
    /// T × input_features.
    pub features: Array2<f64>,
    pub target_norm: Vec<f64>,
}

impl BackboneExample {
    pub fn from_pair(pair: &WindowPair) -> Self {
        let rows = pair.window.feature_rows();
        let t = rows.len();
        let mut features = Array2::zeros((t, 6));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                features[[i, j]] = v;
            }
        }
        let transform = pair.window.norm_transform();
        Self {
            features,
            target_norm: pair.target.normalized(&transform),
        }
    }
}

/// The dual-branch forecaster: config, parameters, and the principal
/// embeddings its textual branch attends to.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub params: ParamSet,
    pub d_hat: Array2<f64>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, embedding: &EmbeddingMatrix) -> Result<Self> {
        cfg.validate()?;
        if embedding.rows.ncols() != cfg.d_model {
            return Err(Error::Parameter(format!(
                "embedding width {} != d_model {}",
                embedding.rows.ncols(),
                cfg.d_model
            )));
        }
        let pca = pca_reduce(&embedding.rows, cfg.pca_k)?;
        let params = ParamSet::init(&param_shapes(&cfg), cfg.seed);
        Ok(Self {
            cfg,
            params,
            d_hat: pca.principal_embeddings(),
        })
    }

    fn leaves(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .entries
            .iter()
            .map(|(name, array)| (name.clone(), tape.leaf(array.clone())))
            .collect()
    }

    fn mha(
        &self,
        tape: &mut Tape,
        leaves: &BTreeMap<String, Var>,
        prefix: &str,
        queries: Var,
        keys_values: Var,
        attn_out: Option<&mut Vec<Var>>,
    ) -> Var {
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut attn_vars = Vec::new();
        for h in 0..self.cfg.heads {
            let q = tape.matmul(queries, leaves[&format!("{prefix}_wq{h}")]);
            let k = tape.matmul(keys_values, leaves[&format!("{prefix}_wk{h}")]);
            let v = tape.matmul(keys_values, leaves[&format!("{prefix}_wv{h}")]);
            let scores = tape.matmul_nt(q, k);
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled);
            attn_vars.push(attn);
            heads.push(tape.matmul(attn, v));
        }
        if let Some(out) = attn_out {
            *out = attn_vars;
        }
        let concat = tape.concat_cols(&heads);
        tape.matmul(concat, leaves[&format!("{prefix}_wo")])
    }

    fn block(
        &self,
        tape: &mut Tape,
        leaves: &BTreeMap<String, Var>,
        prefix: &str,
        x: Var,
    ) -> Var {
        let attended = self.mha(tape, leaves, prefix, x, x, None);
        let x = tape.add(x, attended);
        let pre = tape.matmul(x, leaves[&format!("{prefix}_mlp_w1")]);
        let pre = tape.add_row(pre, leaves[&format!("{prefix}_mlp_b1")]);
        let act = tape.tanh(pre);
        let post = tape.matmul(act, leaves[&format!("{prefix}_mlp_w2")]);
        let post = tape.add_row(post, leaves[&format!("{prefix}_mlp_b2")]);
        tape.add(x, post)
    }

    fn forward_tape(
        &self,
        tape: &mut Tape,
        leaves: &BTreeMap<String, Var>,
        features: Var,
    ) -> ForwardVars {
        // embedding + self-attention -> projected time tokens
        let embedded = tape.matmul(features, leaves["embed_w"]);
        let embedded = tape.add(embedded, leaves["pos"]);
        let attended = self.mha(tape, leaves, "time_embed", embedded, embedded, None);
        let x_time = tape.add(embedded, attended);

        // cross-attention to the principal embeddings -> aligned text tokens
        let d_hat = tape.leaf(self.d_hat.clone());
        let x_text = self.mha(tape, leaves, "cross", x_time, d_hat, None);

        let mut time = x_time;
        let mut text = x_text;
        let mut block_features = Vec::with_capacity(self.cfg.n_blocks);
        for n in 0..self.cfg.n_blocks {
            time = self.block(tape, leaves, &format!("block{n}_time"), time);
            text = self.block(tape, leaves, &format!("block{n}_text"), text);
            let proj_time = tape.matmul(time, leaves[&format!("proj{n}_time")]);
            let proj_text = tape.matmul(text, leaves[&format!("proj{n}_text")]);
            block_features.push((proj_time, proj_text));
        }

        let flat_dim = self.cfg.t * self.cfg.d_model;
        let time_flat = tape.reshape(time, 1, flat_dim);
        let text_flat = tape.reshape(text, 1, flat_dim);
        let y_time = tape.matmul(time_flat, leaves["head_time"]);
        let y_text = tape.matmul(text_flat, leaves["head_text"]);
        ForwardVars {
            y_time,
            y_text,
            x_time,
            block_features,
        }
    }

    fn check_features(&self, features: &Array2<f64>) -> Result<()> {
        if features.dim() != (self.cfg.t, self.cfg.input_features) {
            return Err(Error::Parameter(format!(
                "features must be {} x {}, got {:?}",
                self.cfg.t,
                self.cfg.input_features,
                features.dim()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("features must be finite".into()));
        }
        Ok(())
    }

    /// Projected time tokens: embedding plus self-attention (T × d_model).
    pub fn embed_time(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_features(features)?;
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let f = tape.leaf(features.clone());
        let vars = self.forward_tape(&mut tape, &leaves, f);
        Ok(tape.value(vars.x_time).clone())
    }

    /// Aligned text tokens for given time tokens, plus per-head attention
    /// matrices (each row a probability vector over D̂ rows).
    pub fn cross_align(&self, x_time: &Array2<f64>) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        if x_time.ncols() != self.cfg.d_model {
            return Err(Error::Parameter(format!(
                "x_time width {} != d_model {}",
                x_time.ncols(),
                self.cfg.d_model
            )));
        }
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let q = tape.leaf(x_time.clone());
        let d_hat = tape.leaf(self.d_hat.clone());
        let mut attn = Vec::new();
        let out = self.mha(&mut tape, &leaves, "cross", q, d_hat, Some(&mut attn));
        let attn_values = attn.iter().map(|&a| tape.value(a).clone()).collect();
        Ok((tape.value(out).clone(), attn_values))
    }

    /// Full dual-branch forward pass.
    pub fn forward(&self, features: &Array2<f64>) -> Result<ForecastPair> {
        self.check_features(features)?;
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let f = tape.leaf(features.clone());
        let vars = self.forward_tape(&mut tape, &leaves, f);
        let y_time: Vec<f64> = tape.value(vars.y_time).iter().cloned().collect();
        let y_text: Vec<f64> = tape.value(vars.y_text).iter().cloned().collect();
        for (n, (pt, px)) in vars.block_features.iter().enumerate() {
            if tape.value(*pt).iter().chain(tape.value(*px).iter()).any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    step: n,
                    message: format!("non-finite activation in block {n}"),
                });
            }
        }
        if y_time.iter().chain(y_text.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: self.cfg.n_blocks,
                message: "non-finite forecast head output".into(),
            });
        }
        Ok(ForecastPair {
            y_time,
            y_text,
            block_features: vars
                .block_features
                .iter()
                .map(|&(pt, px)| (tape.value(pt).clone(), tape.value(px).clone()))
                .collect(),
        })
    }

    /// The unconditional forecast ŷ_φ: the temporal head output.
    pub fn forecast_uncond(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.forward(features)?.y_time)
    }

    /// Combined training loss and its gradient in flat parameter order:
    /// `w_sup·MSE(ŷ_time, y) + w_feat·L_feature + w_out·L_output`.
    pub fn loss_and_grad(&self, example: &BackboneExample) -> Result<(f64, Vec<f64>)> {
        self.check_features(&example.features)?;
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let f = tape.leaf(example.features.clone());
        let vars = self.forward_tape(&mut tape, &leaves, f);

        let target = tape.leaf(Array2::from_shape_vec(
            (1, example.target_norm.len()),
            example.target_norm.clone(),
        )
        .map_err(|e| Error::Parameter(e.to_string()))?);
        let sup = tape.mse_mean(vars.y_time, target);
        let out_match = tape.l1_mean(vars.y_time, vars.y_text);

        let n_blocks = self.cfg.n_blocks;
        let mut feat_terms = Vec::with_capacity(n_blocks);
        for (i, &(pt, px)) in vars.block_features.iter().enumerate() {
            let l1 = tape.l1_mean(px, pt);
            let weight = self.cfg.gamma.powi((n_blocks - (i + 1)) as i32);
            feat_terms.push(tape.scale(l1, weight));
        }
        let mut feat = feat_terms[0];
        for &term in &feat_terms[1..] {
            feat = tape.add(feat, term);
        }

        let sup_w = tape.scale(sup, self.cfg.w_sup);
        let feat_w = tape.scale(feat, self.cfg.w_feat);
        let out_w = tape.scale(out_match, self.cfg.w_out);
        let partial = tape.add(sup_w, feat_w);
        let total = tape.add(partial, out_w);

        let loss = tape.scalar(total);
        let grads = tape.backward(total)?;
        let mut flat = Vec::with_capacity(self.params.param_count());
        for (name, _) in &self.params.entries {
            flat.extend(grads[leaves[name]].iter().cloned());
        }
        Ok((loss, flat))
    }

    /// Mean temporal-head MSE over examples.
    pub fn validation_mse(&self, examples: &[BackboneExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Parameter("cannot evaluate on an empty split".into()));
        }
        let mut total = 0.0;
        for example in examples {
            let y = self.forecast_uncond(&example.features)?;
            total += y
                .iter()
                .zip(&example.target_norm)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / y.len() as f64;
        }
        Ok(total / examples.len() as f64)
    }

    /// Plain gradient descent over epochs with deterministic example order.
    pub fn train(
        &mut self,
        train: &[BackboneExample],
        validation: &[BackboneExample],
        epochs: usize,
        lr: f64,
    ) -> Result<Vec<EpochMetrics>> {
        if train.is_empty() && epochs > 0 {
            return Err(Error::Parameter("training split is empty".into()));
        }
        let mut curves = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut epoch_loss = 0.0;
            for example in train {
                let (loss, grad) = self.loss_and_grad(example)?;
                epoch_loss += loss;
                let mut flat = self.params.flatten();
                for (p, g) in flat.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
                self.params.assign_flat(&flat);
                if !self.params.is_finite() {
                    return Err(Error::Divergence {
                        step: epoch,
                        message: "backbone parameters became non-finite".into(),
                    });
                }
            }
            let val_mse = if validation.is_empty() {
                f64::NAN
            } else {
                self.validation_mse(validation)?
            };
            curves.push(EpochMetrics {
                epoch,
                train_loss: epoch_loss / train.len() as f64,
                val_mse,
            });
        }
        Ok(curves)
    }

    /// Writes parameters as little-endian f64 bytes plus a JSON sidecar
    /// carrying the config.
    pub fn save(&self, path: &Path) -> Result<()> {
        let flat = self.params.flatten();
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in &flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        let sidecar = sidecar_path(path);
        std::fs::write(&sidecar, serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(path: &Path, embedding: &EmbeddingMatrix) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let cfg: BackboneConfig = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
        let mut backbone = Self::new(cfg, embedding)?;
        let bytes = std::fs::read(path)?;
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if flat.len() != backbone.params.param_count() {
            return Err(Error::Schema(format!(
                "backbone checkpoint has {} values, expected {}",
                flat.len(),
                backbone.params.param_count()
            )));
        }
        backbone.params.assign_flat(&flat);
        Ok(backbone)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension(format!(
        "{}json",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ))
}
