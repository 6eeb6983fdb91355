//! Classifier-free guidance of the backbone forecast by verbal-reasoner
//! attributes.
//!
//! The reasoner's parsed forecast is summarized into a small attribute class
//! (max / min / mean); parse failures map to the learned null class. A
//! conditional head is trained on top of the frozen backbone with conditional
//! dropout, and inference blends the unconditional and conditional forecasts
//! with a guidance scale `s`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{Backbone, BackboneExample, EpochMetrics, ParamSet};
use crate::error::{Error, Result};

/// Summary attributes of a reasoner forecast, or the null class when no
/// parseable forecast is available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeClass {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub null_flag: bool,
}

impl AttributeClass {
    /// The unconditional class ∅.
    pub fn null() -> Self {
        Self {
            max: 0.0,
            min: 0.0,
            mean: 0.0,
            null_flag: true,
        }
    }

    pub fn is_null(&self) -> bool {
        self.null_flag
    }
}

/// Attributes of a forecast; `None` or an empty/non-finite forecast yields
/// the null class.
pub fn extract_attributes(forecast: Option<&[f64]>) -> AttributeClass {
    let values = match forecast {
        Some(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => v,
        _ => return AttributeClass::null(),
    };
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    AttributeClass {
        max,
        min,
        mean,
        null_flag: false,
    }
}

/// Conditional dropout: replaces the class with ∅ with probability
/// `p_uncond`; a null input stays null.
pub fn drop_condition(
    class: &AttributeClass,
    p_uncond: f64,
    rng: &mut ChaCha8Rng,
) -> AttributeClass {
    if class.is_null() || rng.gen::<f64>() < p_uncond {
        AttributeClass::null()
    } else {
        *class
    }
}

/// Guidance hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Probability of replacing the condition with ∅ during training.
    pub p_uncond: f64,
    /// Guidance scale s in `ŷ = ŷ_uncond + s·(ŷ_cond − ŷ_uncond)`.
    pub s: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            p_uncond: 0.3,
            s: 0.1,
            epochs: 60,
            learning_rate: 0.02,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Parameter("p_uncond must be in [0, 1]".into()));
        }
        if !self.s.is_finite() {
            return Err(Error::Parameter("guidance scale must be finite".into()));
        }
        Ok(())
    }
}

const ATTRIBUTE_LABELS: [&str; 3] = ["max", "min", "mean"];

/// The trainable conditional head ψ: a linear map of the frozen backbone
/// forecast plus per-attribute contributions (each attribute broadcast to a
/// T'-wide row), or a learned null embedding for ∅, followed by an
/// aggregation projection.
#[derive(Debug, Clone)]
pub struct ConditionalHead {
    pub horizon: usize,
    pub params: ParamSet,
}

fn head_shapes(horizon: usize) -> Vec<(String, (usize, usize))> {
    let mut shapes = vec![("w_base".to_string(), (horizon, horizon))];
    for label in ATTRIBUTE_LABELS {
        shapes.push((format!("w_{label}"), (horizon, horizon)));
    }
    shapes.push(("null_emb".to_string(), (1, horizon)));
    shapes.push(("w_agg".to_string(), (horizon, horizon)));
    shapes.push(("b_agg".to_string(), (1, horizon)));
    shapes
}

impl ConditionalHead {
    pub fn new(horizon: usize, seed: u64) -> Self {
        Self {
            horizon,
            params: ParamSet::init(&head_shapes(horizon), seed),
        }
    }

    fn row(&self, values: &[f64]) -> Result<Array2<f64>> {
        if values.len() != self.horizon {
            return Err(Error::Parameter(format!(
                "expected a length-{} forecast, got {}",
                self.horizon,
                values.len()
            )));
        }
        Ok(Array2::from_shape_vec((1, self.horizon), values.to_vec())
            .expect("row shape checked above"))
    }

    fn forward_loss(
        &self,
        y_base: &[f64],
        condition: &AttributeClass,
        target: Option<&[f64]>,
    ) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let leaves: std::collections::BTreeMap<String, crate::autodiff::Var> = self
            .params
            .entries
            .iter()
            .map(|(name, array)| (name.clone(), tape.leaf(array.clone())))
            .collect();

        let base = tape.leaf(self.row(y_base)?);
        let base_part = tape.matmul(base, leaves["w_base"]);

        let cond_part = if condition.is_null() {
            leaves["null_emb"]
        } else {
            let mut parts = Vec::new();
            for (label, value) in ATTRIBUTE_LABELS
                .iter()
                .zip([condition.max, condition.min, condition.mean])
            {
                let broadcast = tape.leaf(Array2::from_elem((1, self.horizon), value));
                parts.push(tape.matmul(broadcast, leaves[&format!("w_{label}")]));
            }
            let sum = tape.add(parts[0], parts[1]);
            tape.add(sum, parts[2])
        };

        let combined = tape.add(base_part, cond_part);
        let projected = tape.matmul(combined, leaves["w_agg"]);
        let y_cond = tape.add(projected, leaves["b_agg"]);
        let forecast: Vec<f64> = tape.value(y_cond).iter().cloned().collect();
        if forecast.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: 0,
                message: "conditional head produced a non-finite forecast".into(),
            });
        }

        match target {
            None => Ok((forecast, f64::NAN, Vec::new())),
            Some(y) => {
                let target = tape.leaf(self.row(y)?);
                let loss = tape.mse_mean(y_cond, target);
                let loss_value = tape.scalar(loss);
                let grads = tape.backward(loss)?;
                let mut flat = Vec::with_capacity(self.params.param_count());
                for (name, _) in &self.params.entries {
                    flat.extend(grads[leaves[name]].iter().cloned());
                }
                Ok((forecast, loss_value, flat))
            }
        }
    }

    /// ŷ_ψ(base forecast, condition).
    pub fn conditional_forward(
        &self,
        y_base: &[f64],
        condition: &AttributeClass,
    ) -> Result<Vec<f64>> {
        Ok(self.forward_loss(y_base, condition, None)?.0)
    }

    /// Writes parameters as little-endian f64 bytes plus a JSON sidecar
    /// with the horizon.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let flat = self.params.flatten();
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in &flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        let sidecar = path.with_extension("meta.json");
        std::fs::write(
            &sidecar,
            serde_json::to_string_pretty(&serde_json::json!({ "horizon": self.horizon }))?,
        )?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let sidecar = path.with_extension("meta.json");
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
        let horizon = meta["horizon"]
            .as_u64()
            .ok_or_else(|| Error::Schema("head sidecar missing horizon".into()))?
            as usize;
        let mut head = Self::new(horizon, 0);
        let bytes = std::fs::read(path)?;
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if flat.len() != head.params.param_count() {
            return Err(Error::Schema(format!(
                "head checkpoint has {} values, expected {}",
                flat.len(),
                head.params.param_count()
            )));
        }
        head.params.assign_flat(&flat);
        Ok(head)
    }

    /// MSE against the target and its gradient in flat parameter order.
    pub fn loss_and_grad(
        &self,
        y_base: &[f64],
        condition: &AttributeClass,
        target: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let (_, loss, grad) = self.forward_loss(y_base, condition, Some(target))?;
        Ok((loss, grad))
    }
}

/// One joint-training example: backbone input plus a reasoner attribute
/// class for the same window.
#[derive(Debug, Clone)]
pub struct JointExample {
    pub example: BackboneExample,
    pub condition: AttributeClass,
}

/// Trains the conditional head on top of the frozen backbone with
/// conditional dropout; the backbone parameters never change.
pub fn train_joint(
    backbone: &Backbone,
    head: &mut ConditionalHead,
    train: &[JointExample],
    validation: &[JointExample],
    cfg: &GuidanceConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Parameter("joint training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for item in train {
            let y_base = backbone.forecast_uncond(&item.example.features)?;
            let dropped = drop_condition(&item.condition, cfg.p_uncond, &mut rng);
            let (loss, grad) =
                head.loss_and_grad(&y_base, &dropped, &item.example.target_norm)?;
            epoch_loss += loss;
            let mut flat = head.params.flatten();
            for (p, g) in flat.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            head.params.assign_flat(&flat);
            if !head.params.is_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    message: "conditional head parameters became non-finite".into(),
                });
            }
        }
        let val_mse = if validation.is_empty() {
            f64::NAN
        } else {
            let mut total = 0.0;
            for item in validation {
                let y_base = backbone.forecast_uncond(&item.example.features)?;
                let y = head.conditional_forward(&y_base, &item.condition)?;
                total += y
                    .iter()
                    .zip(&item.example.target_norm)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / y.len() as f64;
            }
            total / validation.len() as f64
        };
        curves.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_mse,
        });
    }
    Ok(curves)
}

/// The blended forecast and both branches that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidedForecast {
    pub y_uncond: Vec<f64>,
    pub y_cond: Vec<f64>,
    pub y_final: Vec<f64>,
    pub scale_used: f64,
}

/// `ŷ = ŷ_uncond + s·(ŷ_cond − ŷ_uncond)`; the endpoints s = 0 and s = 1
/// return the respective branch bit-exactly.
pub fn guided_forecast(y_uncond: &[f64], y_cond: &[f64], s: f64) -> Result<GuidedForecast> {
    if y_uncond.len() != y_cond.len() {
        return Err(Error::Parameter(format!(
            "branch lengths differ: {} vs {}",
            y_uncond.len(),
            y_cond.len()
        )));
    }
    let y_final = if s == 0.0 {
        y_uncond.to_vec()
    } else if s == 1.0 {
        y_cond.to_vec()
    } else {
        y_uncond
            .iter()
            .zip(y_cond)
            .map(|(u, c)| u + s * (c - u))
            .collect()
    };
    Ok(GuidedForecast {
        y_uncond: y_uncond.to_vec(),
        y_cond: y_cond.to_vec(),
        y_final,
        scale_used: s,
    })
}

/// Full inference record written by the `forecast` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub symbol: String,
    pub anchor: chrono::NaiveDate,
    pub y_uncond: Vec<f64>,
    pub y_cond: Vec<f64>,
    pub y_final: Vec<f64>,
    pub s: f64,
    pub attributes: AttributeClass,
    pub trace: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error};
    use crate::backbone::{BackboneConfig, EmbeddingMatrix};

    fn tiny_backbone(seed: u64) -> Backbone {
        let cfg = BackboneConfig {
            d_model: 8,
            heads: 2,
            n_blocks: 1,
            pca_k: 3,
            hidden: 8,
            t: 4,
            horizon: 3,
            vocab_rows: 12,
            seed,
            ..BackboneConfig::default()
        };
        let embedding = EmbeddingMatrix::synth(seed, 12, 8);
        Backbone::new(cfg, &embedding).unwrap()
    }

    fn tiny_example(seed: u64) -> BackboneExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BackboneExample {
            features: Array2::from_shape_fn((4, 6), |_| rng.gen_range(0.0..1.0)),
            target_norm: (0..3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn attributes_of_a_forecast() {
        let attrs = extract_attributes(Some(&[0.2, 0.8, 0.5]));
        assert_eq!(attrs.max, 0.8);
        assert_eq!(attrs.min, 0.2);
        assert!((attrs.mean - 0.5).abs() < 1e-12);
        assert!(!attrs.is_null());
    }

    #[test]
    fn missing_or_bad_forecasts_map_to_null() {
        assert!(extract_attributes(None).is_null());
        assert!(extract_attributes(Some(&[])).is_null());
        assert!(extract_attributes(Some(&[0.1, f64::NAN])).is_null());
    }

    #[test]
    fn dropout_frequency_is_near_p_uncond() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let class = extract_attributes(Some(&[0.3, 0.6]));
        let n = 10_000;
        let nulls = (0..n)
            .filter(|_| drop_condition(&class, 0.3, &mut rng).is_null())
            .count();
        let rate = nulls as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.03, "dropout rate {rate}");
        // p = 0 never drops a live class; null stays null regardless
        assert!(!drop_condition(&class, 0.0, &mut rng).is_null());
        assert!(drop_condition(&AttributeClass::null(), 0.0, &mut rng).is_null());
    }

    #[test]
    fn conditional_forward_distinguishes_conditions() {
        let head = ConditionalHead::new(3, 21);
        let y_base = vec![0.4, 0.5, 0.6];
        let a = head
            .conditional_forward(&y_base, &extract_attributes(Some(&[0.1, 0.2, 0.3])))
            .unwrap();
        let b = head
            .conditional_forward(&y_base, &extract_attributes(Some(&[0.7, 0.8, 0.9])))
            .unwrap();
        let null = head
            .conditional_forward(&y_base, &AttributeClass::null())
            .unwrap();
        assert_eq!(a.len(), 3);
        assert_ne!(a, b);
        assert_ne!(a, null);
        // determinism
        let a2 = head
            .conditional_forward(&y_base, &extract_attributes(Some(&[0.1, 0.2, 0.3])))
            .unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let head = ConditionalHead::new(3, 33);
        let y_base = vec![0.4, 0.5, 0.6];
        let target = vec![0.45, 0.55, 0.6];
        for condition in [extract_attributes(Some(&[0.2, 0.9, 0.5])), AttributeClass::null()] {
            let (_, grad) = head.loss_and_grad(&y_base, &condition, &target).unwrap();
            let base = head.clone();
            let eval = |flat: &[f64]| {
                let mut h = base.clone();
                h.params.assign_flat(flat);
                h.loss_and_grad(&y_base, &condition, &target).unwrap().0
            };
            let fd = finite_difference(eval, &head.params.flatten(), 1e-6);
            let err = max_relative_error(&grad, &fd);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn joint_training_freezes_backbone_and_learns() {
        let backbone = tiny_backbone(41);
        let backbone_before = backbone.params.flatten();
        let mut head = ConditionalHead::new(3, 42);
        let train: Vec<JointExample> = (0..6)
            .map(|i| {
                let example = tiny_example(200 + i);
                let condition = extract_attributes(Some(&example.target_norm));
                JointExample { example, condition }
            })
            .collect();
        let cfg = GuidanceConfig {
            epochs: 25,
            learning_rate: 0.1,
            seed: 7,
            ..GuidanceConfig::default()
        };
        let curves = train_joint(&backbone, &mut head, &train, &train, &cfg).unwrap();
        assert_eq!(curves.len(), 25);
        assert!(curves.last().unwrap().train_loss < curves[0].train_loss);
        assert_eq!(backbone.params.flatten(), backbone_before);
    }

    #[test]
    fn guided_endpoints_are_bit_exact() {
        let u = vec![0.11, 0.22, 0.33];
        let c = vec![0.5, -0.4, 0.9];
        let at_zero = guided_forecast(&u, &c, 0.0).unwrap();
        assert_eq!(at_zero.y_final, u);
        let at_one = guided_forecast(&u, &c, 1.0).unwrap();
        assert_eq!(at_one.y_final, c);
    }

    #[test]
    fn guided_combination_is_affine_in_s() {
        let u = vec![0.11, 0.22, 0.33];
        let c = vec![0.5, -0.4, 0.9];
        for s in [0.1, 0.25, 0.5, 0.9, 1.5, -0.5] {
            let g = guided_forecast(&u, &c, s).unwrap();
            for i in 0..u.len() {
                let expect = u[i] + s * (c[i] - u[i]);
                assert!((g.y_final[i] - expect).abs() < 1e-12);
            }
        }
        assert!(guided_forecast(&u, &c[..2], 0.1).is_err());
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let head = ConditionalHead::new(5, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.bin");
        head.save(&path).unwrap();
        let loaded = ConditionalHead::load(&path).unwrap();
        assert_eq!(loaded.horizon, 5);
        assert_eq!(loaded.params.flatten(), head.params.flatten());
    }

    #[test]
    fn forecast_record_serializes() {
        let record = ForecastRecord {
            symbol: "SYN0".into(),
            anchor: chrono::NaiveDate::from_ymd_opt(2024, 3, 1).unwrap(),
            y_uncond: vec![0.1, 0.2],
            y_cond: vec![0.15, 0.25],
            y_final: vec![0.105, 0.205],
            s: 0.1,
            attributes: extract_attributes(Some(&[0.1, 0.2])),
            trace: Some("uptrend momentum".into()),
        };
        let json = serde_json::to_string(&record).unwrap();
        let back: ForecastRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.symbol, "SYN0");
        assert_eq!(back.y_final, record.y_final);
        assert!(!back.attributes.null_flag);
    }
}
