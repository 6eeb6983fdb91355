//! The sequence-policy abstraction the trainer optimizes.
//!
//! [`ToyPolicy`] is a categorical softmax policy over a small vocabulary:
//! per-slot word logits for the think-block and per-slot numeric-grid logits
//! for the forecast line, with the forecast logits linearly conditioned on
//! summary features of the prompt series. It is fully differentiable, so
//! the trainer's gradients can be checked against finite differences.
//!
//! [`ExternalPolicy`] speaks line-delimited JSON over a child process's
//! standard input/output, so a real LLM can sit behind the same interface.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::Prompt;
use crate::error::{Error, Result};

/// Think-block word vocabulary for the toy policy.
pub const TRACE_WORDS: [&str; 8] = [
    "uptrend",
    "downtrend",
    "flat",
    "volatile",
    "momentum",
    "reversion",
    "support",
    "resistance",
];

/// One generated rollout: text plus the tokens and log-probabilities that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub logprobs: Vec<f64>,
}

impl PolicyOutput {
    pub fn sum_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Result of parsing policy text: think-block interior, forecast numbers,
/// and whether the required format was satisfied.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub trace: Option<String>,
    pub forecast: Option<Vec<f64>>,
    pub format_ok: bool,
}

/// Total parser for policy text. `format_ok` is true iff exactly one
/// `<think>...</think>` block precedes a `FORECAST:` line holding exactly
/// `horizon` comma-separated finite numbers. Never fails.
pub fn parse_output(text: &str, horizon: usize) -> ParsedOutput {
    let failed = ParsedOutput {
        trace: None,
        forecast: None,
        format_ok: false,
    };
    if text.matches("<think>").count() != 1 || text.matches("</think>").count() != 1 {
        return failed;
    }
    let open = text.find("<think>").unwrap();
    let close = text.find("</think>").unwrap();
    if close < open {
        return failed;
    }
    let trace = text[open + "<think>".len()..close].trim().to_string();
    let rest = &text[close + "</think>".len()..];
    let forecast_line = rest
        .lines()
        .find_map(|line| line.trim().strip_prefix("FORECAST:"));
    let Some(line) = forecast_line else {
        return failed;
    };
    let values: Vec<f64> = line
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .unwrap_or_default();
    if values.len() != horizon || values.iter().any(|v| !v.is_finite()) {
        return ParsedOutput {
            trace: Some(trace),
            forecast: None,
            format_ok: false,
        };
    }
    ParsedOutput {
        trace: Some(trace),
        forecast: Some(values),
        format_ok: true,
    }
}

/// One policy rollout with its parse result and rewards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReasoningSample {
    pub prompt: Prompt,
    pub output: PolicyOutput,
    pub trace: Option<String>,
    pub forecast: Option<Vec<f64>>,
    pub format_ok: bool,
    pub rewards: BTreeMap<String, f64>,
    pub total_reward: f64,
}

impl ReasoningSample {
    /// Builds a sample by parsing the output; rewards start empty.
    pub fn from_output(prompt: Prompt, output: PolicyOutput) -> Self {
        let horizon = prompt.horizon;
        let parsed = parse_output(&output.text, horizon);
        Self {
            prompt,
            output,
            trace: parsed.trace,
            forecast: parsed.forecast,
            format_ok: parsed.format_ok,
            rewards: BTreeMap::new(),
            total_reward: 0.0,
        }
    }
}

/// Architecture of the toy policy; fixes the parameter vector length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyPolicySpec {
    pub trace_len: usize,
    pub horizon: usize,
    /// Quantization levels of the numeric grid over [0, 1].
    pub levels: usize,
    /// Number of prompt summary features conditioning the forecast logits.
    pub n_features: usize,
}

impl Default for ToyPolicySpec {
    fn default() -> Self {
        Self {
            trace_len: 4,
            horizon: 10,
            levels: 257,
            n_features: 3,
        }
    }
}

impl ToyPolicySpec {
    pub fn n_words(&self) -> usize {
        TRACE_WORDS.len()
    }

    pub fn param_count(&self) -> usize {
        self.trace_len * self.n_words()
            + self.horizon * self.levels
            + self.horizon * self.levels * self.n_features
    }

    /// Grid value of a numeric level index.
    pub fn grid_value(&self, level: usize) -> f64 {
        level as f64 / (self.levels - 1) as f64
    }

    /// Nearest grid level for a value clamped into [0, 1].
    pub fn nearest_level(&self, value: f64) -> usize {
        let clamped = value.clamp(0.0, 1.0);
        (clamped * (self.levels - 1) as f64).round() as usize
    }

    fn trace_off(&self, slot: usize, word: usize) -> usize {
        slot * self.n_words() + word
    }

    fn base_off(&self, slot: usize, level: usize) -> usize {
        self.trace_len * self.n_words() + slot * self.levels + level
    }

    fn weight_off(&self, slot: usize, level: usize, feature: usize) -> usize {
        self.trace_len * self.n_words()
            + self.horizon * self.levels
            + (slot * self.levels + level) * self.n_features
            + feature
    }
}

/// Summary features the toy policy conditions on: last value, mean, and
/// net change of the normalized prompt series.
pub fn prompt_features(prompt: &Prompt) -> [f64; 3] {
    if prompt.series.is_empty() {
        return [0.0; 3];
    }
    let last = *prompt.series.last().unwrap();
    let first = prompt.series[0];
    let mean = prompt.series.iter().sum::<f64>() / prompt.series.len() as f64;
    [last, mean, last - first]
}

/// Metadata sidecar stored next to a checkpoint's parameter file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: usize,
    pub seed: u64,
    pub spec: ToyPolicySpec,
}

/// A flat parameter vector plus metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub parameters: Vec<f64>,
    pub metadata: CheckpointMeta,
}

impl PolicyCheckpoint {
    pub fn zeros(spec: ToyPolicySpec, seed: u64) -> Self {
        Self {
            parameters: vec![0.0; spec.param_count()],
            metadata: CheckpointMeta {
                stage: "base".into(),
                step: 0,
                seed,
                spec,
            },
        }
    }

    /// Writes parameters as little-endian f64 bytes plus a `.json` metadata
    /// sidecar at `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.parameters.len() * 8);
        for p in &self.parameters {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        let sidecar = path.with_extension(format!(
            "{}json",
            path.extension()
                .map(|e| format!("{}.", e.to_string_lossy()))
                .unwrap_or_default()
        ));
        std::fs::write(&sidecar, serde_json::to_string_pretty(&self.metadata)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Schema("checkpoint byte length not a multiple of 8".into()));
        }
        let parameters: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let sidecar = path.with_extension(format!(
            "{}json",
            path.extension()
                .map(|e| format!("{}.", e.to_string_lossy()))
                .unwrap_or_default()
        ));
        let metadata: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
        if metadata.spec.param_count() != parameters.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} parameters but spec expects {}",
                parameters.len(),
                metadata.spec.param_count()
            )));
        }
        Ok(Self {
            parameters,
            metadata,
        })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The differentiable toy sequence policy.
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    pub spec: ToyPolicySpec,
    pub params: Vec<f64>,
}

impl ToyPolicy {
    pub fn from_checkpoint(ckpt: &PolicyCheckpoint) -> Result<Self> {
        if ckpt.parameters.len() != ckpt.metadata.spec.param_count() {
            return Err(Error::Schema("checkpoint parameter count mismatch".into()));
        }
        Ok(Self {
            spec: ckpt.metadata.spec,
            params: ckpt.parameters.clone(),
        })
    }

    pub fn to_checkpoint(&self, stage: &str, step: usize, seed: u64) -> PolicyCheckpoint {
        PolicyCheckpoint {
            parameters: self.params.clone(),
            metadata: CheckpointMeta {
                stage: stage.into(),
                step,
                seed,
                spec: self.spec,
            },
        }
    }

    fn trace_logits(&self, slot: usize) -> Vec<f64> {
        (0..self.spec.n_words())
            .map(|w| self.params[self.spec.trace_off(slot, w)])
            .collect()
    }

    fn forecast_logits(&self, slot: usize, feats: &[f64; 3]) -> Vec<f64> {
        (0..self.spec.levels)
            .map(|level| {
                let mut logit = self.params[self.spec.base_off(slot, level)];
                for (f, &feat) in feats.iter().enumerate().take(self.spec.n_features) {
                    logit += self.params[self.spec.weight_off(slot, level, f)] * feat;
                }
                logit
            })
            .collect()
    }

    fn render(&self, token_ids: &[usize]) -> String {
        let n_words = self.spec.n_words();
        let trace: Vec<&str> = token_ids[..self.spec.trace_len]
            .iter()
            .map(|&id| TRACE_WORDS[id])
            .collect();
        let values: Vec<String> = token_ids[self.spec.trace_len..]
            .iter()
            .map(|&id| self.spec.grid_value(id - n_words).to_string())
            .collect();
        format!(
            "<think>{}</think>\nFORECAST: {}",
            trace.join(" "),
            values.join(", ")
        )
    }

    /// Draws `group` rollouts; deterministic per seed, and the recorded
    /// logprobs equal a rescoring of the sampled tokens.
    pub fn sample(&self, prompt: &Prompt, group: usize, seed: u64) -> Result<Vec<PolicyOutput>> {
        if group == 0 {
            return Err(Error::Parameter("group size must be >= 1".into()));
        }
        let feats = prompt_features(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_words = self.spec.n_words();
        let mut outputs = Vec::with_capacity(group);
        for _ in 0..group {
            let mut token_ids = Vec::with_capacity(self.spec.trace_len + self.spec.horizon);
            let mut logprobs = Vec::with_capacity(token_ids.capacity());
            for slot in 0..self.spec.trace_len {
                let probs = softmax(&self.trace_logits(slot));
                let pick = sample_categorical(&probs, &mut rng);
                if probs[pick] <= 0.0 {
                    return Err(Error::Domain("sampled a zero-probability token".into()));
                }
                token_ids.push(pick);
                logprobs.push(probs[pick].ln());
            }
            for slot in 0..self.spec.horizon {
                let probs = softmax(&self.forecast_logits(slot, &feats));
                let pick = sample_categorical(&probs, &mut rng);
                if probs[pick] <= 0.0 {
                    return Err(Error::Domain("sampled a zero-probability token".into()));
                }
                token_ids.push(n_words + pick);
                logprobs.push(probs[pick].ln());
            }
            outputs.push(PolicyOutput {
                text: self.render(&token_ids),
                token_ids,
                logprobs,
            });
        }
        Ok(outputs)
    }

    /// Deterministic argmax decode, used for validation scoring.
    pub fn greedy(&self, prompt: &Prompt) -> PolicyOutput {
        let feats = prompt_features(prompt);
        let n_words = self.spec.n_words();
        let argmax = |probs: &[f64]| {
            probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        };
        let mut token_ids = Vec::with_capacity(self.spec.trace_len + self.spec.horizon);
        let mut logprobs = Vec::with_capacity(token_ids.capacity());
        for slot in 0..self.spec.trace_len {
            let probs = softmax(&self.trace_logits(slot));
            let pick = argmax(&probs);
            token_ids.push(pick);
            logprobs.push(probs[pick].ln());
        }
        for slot in 0..self.spec.horizon {
            let probs = softmax(&self.forecast_logits(slot, &feats));
            let pick = argmax(&probs);
            token_ids.push(n_words + pick);
            logprobs.push(probs[pick].ln());
        }
        PolicyOutput {
            text: self.render(&token_ids),
            token_ids,
            logprobs,
        }
    }

    /// Per-token log-probabilities of `token_ids` under this policy.
    pub fn score(&self, prompt: &Prompt, token_ids: &[usize]) -> Result<Vec<f64>> {
        if token_ids.len() != self.spec.trace_len + self.spec.horizon {
            return Err(Error::Parameter(format!(
                "expected {} tokens, got {}",
                self.spec.trace_len + self.spec.horizon,
                token_ids.len()
            )));
        }
        let feats = prompt_features(prompt);
        let n_words = self.spec.n_words();
        let mut logprobs = Vec::with_capacity(token_ids.len());
        for (slot, &id) in token_ids.iter().enumerate() {
            if slot < self.spec.trace_len {
                if id >= n_words {
                    return Err(Error::Domain(format!(
                        "token {id} out of trace vocabulary at slot {slot}"
                    )));
                }
                logprobs.push(softmax(&self.trace_logits(slot))[id].ln());
            } else {
                let level = id
                    .checked_sub(n_words)
                    .filter(|&l| l < self.spec.levels)
                    .ok_or_else(|| {
                        Error::Domain(format!("token {id} out of numeric vocabulary at slot {slot}"))
                    })?;
                let j = slot - self.spec.trace_len;
                logprobs.push(softmax(&self.forecast_logits(j, &feats))[level].ln());
            }
        }
        Ok(logprobs)
    }

    /// Accumulates `coeff · ∇_params Σ_t log π(token_t)` into `grad`.
    pub fn accumulate_grad_sum_logprob(
        &self,
        prompt: &Prompt,
        token_ids: &[usize],
        coeff: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::Parameter("gradient buffer length mismatch".into()));
        }
        let feats = prompt_features(prompt);
        let n_words = self.spec.n_words();
        for (slot, &id) in token_ids.iter().enumerate() {
            if slot < self.spec.trace_len {
                let probs = softmax(&self.trace_logits(slot));
                for (w, &p) in probs.iter().enumerate() {
                    let indicator = if w == id { 1.0 } else { 0.0 };
                    grad[self.spec.trace_off(slot, w)] += coeff * (indicator - p);
                }
            } else {
                let j = slot - self.spec.trace_len;
                let level = id - n_words;
                let probs = softmax(&self.forecast_logits(j, &feats));
                for (k, &p) in probs.iter().enumerate() {
                    let indicator = if k == level { 1.0 } else { 0.0 };
                    let dlogit = coeff * (indicator - p);
                    grad[self.spec.base_off(j, k)] += dlogit;
                    for (f, &feat) in feats.iter().enumerate().take(self.spec.n_features) {
                        grad[self.spec.weight_off(j, k, f)] += dlogit * feat;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adapter to an external policy process speaking line-delimited JSON:
/// request `{"prompt", "group", "seed"}`, then one `{"text", "token_ids",
/// "logprobs"}` response line per sample.
pub struct ExternalPolicy {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    prompt: &'a str,
    group: usize,
    seed: u64,
}

impl ExternalPolicy {
    /// Spawns `program args...` with piped standard input/output.
    pub fn spawn(program: &str, args: &[&str]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
        })
    }

    pub fn sample(&mut self, prompt: &Prompt, group: usize, seed: u64) -> Result<Vec<PolicyOutput>> {
        let request = ExternalRequest {
            prompt: &prompt.text,
            group,
            seed,
        };
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.flush()?;
        let mut outputs = Vec::with_capacity(group);
        for _ in 0..group {
            let mut response = String::new();
            if self.stdout.read_line(&mut response)? == 0 {
                return Err(Error::Domain("external policy closed its output".into()));
            }
            outputs.push(serde_json::from_str(&response)?);
        }
        Ok(outputs)
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
